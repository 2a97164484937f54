//! Epsilon-stopping geometric-search baseline, built on the same crafted
//! parameters and slice machinery as the main attack.
//!
//! The baseline cannot tell one resident from several: it keeps bisecting
//! every nonzero slab at its projection midpoint until the slab is narrower
//! than a user-chosen epsilon, then emits `s/β` of the terminal slab. With
//! epsilon at or below the true minimum projection gap every emission is
//! exact; above it, slabs holding several close samples terminate early and
//! emit linear combinations.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{
    compute_slices, craft_parameters, draw_direction, initial_interval, recover_target,
    reconstruct_input, rescaled_row_scale, slab_is_empty, AttackConfig, AttackOutcome,
    Certificate, ReconstructionRecord, RoundTrace, BETA_FLOOR,
};
use crate::error::{Error, Result};
use crate::fl::{client_round, pseudo_gradient, ClientConfig, RoundMessageDown};
use crate::linalg::lerp;
use crate::nn::{Batch, LossKind, ModelShape};

/// Which epsilon regime a run represents, relative to the true minimum
/// projection gap; a reporting label plus a derivation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtpVariant {
    EpsLt,
    EpsEq,
    EpsGt,
}

impl CtpVariant {
    /// Conventional epsilon for this regime given the true gap.
    pub fn epsilon_from(&self, eps_w: f64) -> f64 {
        match self {
            CtpVariant::EpsLt => 0.5 * eps_w,
            CtpVariant::EpsEq => eps_w,
            CtpVariant::EpsGt => 10.0 * eps_w,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CtpVariant::EpsLt => "ctp_lt",
            CtpVariant::EpsEq => "ctp_eq",
            CtpVariant::EpsGt => "ctp_gt",
        }
    }
}

/// Baseline parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtpConfig {
    /// Projection-width stopping threshold.
    pub epsilon: f64,
    pub variant: CtpVariant,
    /// Hyperplanes per round.
    pub budget: usize,
}

impl CtpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.budget < 3 {
            return Err(Error::Config("budget must be at least 3".into()));
        }
        Ok(())
    }
}

/// Minimum absolute gap between the projections of any two distinct samples
/// along `w`; zero when the batch contains duplicate projections.
pub fn epsilon_w(data: &Batch, w: &[f64]) -> Result<f64> {
    if data.len() < 2 {
        return Err(Error::Config("epsilon_w needs at least two samples".into()));
    }
    let mut proj: Vec<f64> = (0..data.len())
        .map(|j| crate::linalg::dot(w, data.sample(j)))
        .collect();
    proj.sort_by(|a, b| a.partial_cmp(b).expect("finite projections"));
    let mut min = f64::INFINITY;
    for pair in proj.windows(2) {
        min = min.min(pair[1] - pair[0]);
    }
    Ok(min)
}

#[derive(Debug, Clone, Copy)]
struct Slab {
    lo: f64,
    hi: f64,
}

fn subdividable(lo: f64, hi: f64) -> bool {
    let ulp = lo.abs().max(hi.abs()).max(1e-300) * f64::EPSILON;
    hi - lo > 16.0 * ulp
}

/// Runs the baseline search. Shares the attack config (and therefore `w`)
/// with a paired main-attack run on the same seed.
pub fn run_ctp(
    shape: &ModelShape,
    data: &Batch,
    cfg: &CtpConfig,
    attack_cfg: &AttackConfig,
    client_cfg: &ClientConfig,
    loss: LossKind,
    max_rounds: usize,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    attack_cfg.validate()?;
    client_cfg.validate(data.len())?;

    let n = cfg.budget;
    let mut rng = ChaCha8Rng::seed_from_u64(attack_cfg.seed);
    let w = draw_direction(&attack_cfg.direction_distribution, shape.input_dim, &mut rng);
    let (lo0, hi0) = initial_interval(&attack_cfg.feature_box, &w);

    let mut live: Vec<Slab> = vec![Slab { lo: lo0, hi: hi0 }];
    let mut emitted: Vec<ReconstructionRecord> = Vec::new();
    let mut trace: Vec<RoundTrace> = Vec::new();
    let mut rounds_to_verifiability = None;
    let mut skipped_degenerate = 0usize;

    for round in 1..=max_rounds {
        let started = Instant::now();
        live.sort_by(|a, b| a.lo.partial_cmp(&b.lo).expect("finite slabs"));

        // plan: round 1 sweeps the whole interval uniformly; later rounds
        // place (lo, mid, hi) per slab, sharing abutting boundaries
        let mut biases: Vec<f64> = Vec::with_capacity(n);
        let mut probes: Vec<(usize, usize, usize)> = Vec::new(); // (slab idx, lo_idx, hi_idx)
        if round == 1 {
            let s = live[0];
            for i in 0..n {
                biases.push(lerp(s.lo, s.hi, i as f64 / (n - 1) as f64));
            }
            probes.push((0, 0, n - 1));
        } else {
            let m = live.len().min(n / 3);
            for k in 0..m {
                let s = live[k];
                if !subdividable(s.lo, s.hi) {
                    continue;
                }
                let shared = !biases.is_empty() && *biases.last().unwrap() == s.lo;
                let lo_idx = if shared { biases.len() - 1 } else { biases.len() };
                if !shared {
                    biases.push(s.lo);
                }
                biases.push(lerp(s.lo, s.hi, 0.5));
                biases.push(s.hi);
                let hi_idx = biases.len() - 1;
                probes.push((k, lo_idx, hi_idx));
            }
        }
        if probes.is_empty() {
            for s in &live {
                log::warn!(
                    "slab [{}, {}] is below subdivision resolution; giving up on it",
                    s.lo,
                    s.hi
                );
            }
            break;
        }

        // the model still has n attack neurons: park any unused budget on
        // strictly increasing biases below the probed region, whose slices
        // are never read
        if biases.len() < n {
            let extra = n - biases.len();
            let span = (biases[biases.len() - 1] - biases[0]).max(1.0);
            let base = biases[0];
            let mut parked: Vec<f64> =
                (0..extra).map(|i| base - span * 1e-3 * (extra - i) as f64).collect();
            parked.extend_from_slice(&biases);
            biases = parked;
            for p in probes.iter_mut() {
                p.1 += extra;
                p.2 += extra;
            }
        }
        if !biases.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::Config("baseline biases are not strictly increasing".into()));
        }

        let crafted = craft_parameters(attack_cfg, shape, &w, &biases, &mut rng)?;
        let ctx = crafted.into_context(round);
        let down = RoundMessageDown { model: ctx.model.clone(), round };
        let up = client_round(&down, data, client_cfg, loss)?;
        let report = pseudo_gradient(&up, client_cfg)?;
        let slices = compute_slices(&report, &ctx.gains, &biases, round)?;
        let row_scale = rescaled_row_scale(&report, &ctx.gains);

        let mut next: Vec<Slab> = Vec::new();
        let probed: Vec<usize> = probes.iter().map(|p| p.0).collect();
        for (k, s) in live.iter().enumerate() {
            if !probed.contains(&k) {
                next.push(*s);
            }
        }
        for &(_, lo_idx, hi_idx) in &probes {
            for child in &slices[lo_idx..hi_idx] {
                if slab_is_empty(child, row_scale) {
                    continue;
                }
                if child.width() < cfg.epsilon {
                    match reconstruct_input(child) {
                        Ok(x_hat) => {
                            let y_hat =
                                recover_target(&x_hat, child.beta, &ctx, loss, data.len())?;
                            emitted.push(ReconstructionRecord {
                                x_hat,
                                y_hat,
                                beta: child.beta,
                                certificate: Certificate::EpsilonStopped,
                                round_found: round,
                            });
                        }
                        Err(_) => {
                            skipped_degenerate += 1;
                            debug_assert!(child.beta.abs() <= BETA_FLOOR);
                        }
                    }
                } else {
                    next.push(Slab { lo: child.b_low, hi: child.b_high });
                }
            }
        }
        live = next;

        trace.push(RoundTrace {
            round,
            biases_placed: biases.len(),
            live_intervals: live.len(),
            certified_total: emitted.len(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        if live.is_empty() {
            rounds_to_verifiability = Some(round);
            break;
        }
    }

    let complete = live.is_empty();
    Ok(AttackOutcome {
        reconstructions: emitted,
        trace,
        complete,
        rounds_to_verifiability,
        direction: w,
        unrecoverable_events: skipped_degenerate,
        refused_certificates: 0,
    })
}
