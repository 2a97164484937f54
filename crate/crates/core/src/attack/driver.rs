//! The attack loop: place hyperplanes, craft parameters, run the client
//! round, extract slices, certify, reconstruct; repeat until no live interval
//! remains or the round budget is spent.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fl::{client_round, pseudo_gradient, ClientConfig, ClientMode, RoundMessageDown};
use crate::nn::{Batch, LossKind, ModelShape};

use super::craft::craft_parameters;
use super::hyperplanes::set_hyperplanes;
use super::isolation::{check_isolation, IsolationParams};
use super::slices::{compute_slices, rescaled_row_scale};
use super::{draw_direction, initial_interval, AttackConfig, ReconstructionRecord, SearchState};

/// One row of the per-round trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub biases_placed: usize,
    pub live_intervals: usize,
    pub certified_total: usize,
    pub wall_ms: f64,
}

/// Everything a finished (or exhausted) attack run reports.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub reconstructions: Vec<ReconstructionRecord>,
    pub trace: Vec<RoundTrace>,
    /// True when the search space emptied: every slab was certified, proven
    /// empty, or pruned.
    pub complete: bool,
    /// Round after which no live interval remained.
    pub rounds_to_verifiability: Option<usize>,
    /// The realized shared direction `w`.
    pub direction: Vec<f64>,
    /// Span-certified slabs whose coefficient was too small to divide by;
    /// they were retried, so a nonzero count here only means extra rounds.
    pub unrecoverable_events: usize,
    /// Certificates refused because the span verdict and the coefficient
    /// replay disagreed. Zero on exact gradients unless the batch holds
    /// linearly dependent (duplicate) records or a threshold was corrupted.
    pub refused_certificates: usize,
}

/// Runs the verifiable inversion attack against one simulated client.
pub fn run_vgia(
    shape: &ModelShape,
    data: &Batch,
    cfg: &AttackConfig,
    client_cfg: &ClientConfig,
    loss: LossKind,
    max_rounds: usize,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    client_cfg.validate(data.len())?;
    if shape.input_dim != data.dim() {
        return Err(crate::error::Error::Shape(format!(
            "model input {} vs batch dim {}",
            shape.input_dim,
            data.dim()
        )));
    }
    if cfg.feature_box.dim() != data.dim() {
        return Err(crate::error::Error::Shape("feature box vs batch dim".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = draw_direction(&cfg.direction_distribution, shape.input_dim, &mut rng);
    let (lo, hi) = initial_interval(&cfg.feature_box, &w);

    let mut state = SearchState::new(lo, hi);
    let mut trace = Vec::with_capacity(max_rounds);
    let mut rounds_to_verifiability = None;
    let mut unrecoverable_events = 0;
    let mut refused_certificates = 0;

    for round in 1..=max_rounds {
        let started = Instant::now();
        state.round = round;
        let plan = set_hyperplanes(&mut state, shape.attack_neurons, cfg.min_probes_per_interval)?;
        if plan.probes.is_empty() {
            break; // everything live is below subdivision resolution
        }
        let crafted = craft_parameters(cfg, shape, &w, &plan.biases, &mut rng)?;
        let ctx = crafted.into_context(round);

        let down = RoundMessageDown { model: ctx.model.clone(), round };
        let up = client_round(&down, data, client_cfg, loss)?;
        let report = pseudo_gradient(&up, client_cfg)?;

        let slices = compute_slices(&report, &ctx.gains, &plan.biases, round)?;
        // A single full-batch local step cannot drift, so its pseudo-gradient
        // is exact and the strict thresholds apply.
        let one_exact_step = client_cfg.mode == ClientMode::FedsgdFullbatch
            || (client_cfg.local_epochs == 1 && client_cfg.local_batch_size >= data.len());
        let params = if one_exact_step {
            IsolationParams::fedsgd(cfg, rescaled_row_scale(&report, &ctx.gains), loss, data.len())
        } else {
            let round_scale = slices
                .iter()
                .map(|s| crate::linalg::norm_inf(&s.s).max(s.beta.abs()))
                .fold(0.0_f64, f64::max);
            IsolationParams::fedavg(cfg, round_scale.max(f64::MIN_POSITIVE), loss, data.len())
        };
        let outcome = check_isolation(&mut state, &slices, &plan, &ctx, &params)?;
        unrecoverable_events += outcome.unrecoverable;
        refused_certificates += outcome.refused;
        state.certified.extend(outcome.certified);

        trace.push(RoundTrace {
            round,
            biases_placed: plan.biases.len(),
            live_intervals: state.intervals.len(),
            certified_total: state.certified.len(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        if state.intervals.is_empty() {
            rounds_to_verifiability = Some(round);
            break;
        }
    }

    let complete = state.intervals.is_empty();
    Ok(AttackOutcome {
        reconstructions: state.certified,
        trace,
        complete,
        rounds_to_verifiability,
        direction: w,
        unrecoverable_events,
        refused_certificates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::data::SyntheticTargets;
    use crate::linalg::Mat;
    use crate::nn::{FeatureBox, Targets, TargetValue};

    fn l2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn single_sample_certifies_at_round_two() {
        let batch = Batch::new(
            Mat::from_rows(vec![vec![0.3, 0.8, 0.1, 0.6]]),
            Targets::Scalar(vec![0.7]),
        )
        .unwrap();
        let cfg = AttackConfig::tabular_default(FeatureBox(vec![(0.0, 1.0); 4]), 7);
        let shape = ModelShape { input_dim: 4, attack_neurons: 8, hidden: vec![6], outputs: 1 };
        let out = run_vgia(
            &shape,
            &batch,
            &cfg,
            &ClientConfig::fedsgd(),
            LossKind::SquaredError,
            10,
        )
        .unwrap();
        assert!(out.complete);
        assert_eq!(out.rounds_to_verifiability, Some(2));
        assert_eq!(out.reconstructions.len(), 1);
        let rec = &out.reconstructions[0];
        assert!(l2(&rec.x_hat, batch.sample(0)) < 1e-9);
        match rec.y_hat {
            TargetValue::Scalar(v) => assert!((v - 0.7).abs() < 1e-8),
            _ => panic!(),
        }
    }

    #[test]
    fn small_batch_full_recovery() {
        let batch = gen_synthetic(4, 8, 99, SyntheticTargets::LinearNoise).unwrap();
        let cfg = AttackConfig::tabular_default(FeatureBox(vec![(0.0, 1.0); 4]), 3);
        let shape = ModelShape { input_dim: 4, attack_neurons: 16, hidden: vec![8], outputs: 1 };
        let out = run_vgia(
            &shape,
            &batch,
            &cfg,
            &ClientConfig::fedsgd(),
            LossKind::SquaredError,
            20,
        )
        .unwrap();
        assert!(out.complete, "trace: {:?}", out.trace);
        assert_eq!(out.reconstructions.len(), 8);
        for rec in &out.reconstructions {
            let best = (0..8).map(|j| l2(&rec.x_hat, batch.sample(j))).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-9, "l2 {best:e}");
        }
    }

    // A duplicate pair drives its interval all the way down to the
    // double-precision floor when the budget allows; the search must stall
    // that interval and stop cleanly instead of erroring out.
    #[test]
    fn deep_descent_stalls_instead_of_failing() {
        let mut rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..3).map(|j| ((i * 5 + j * 2) % 9) as f64 / 9.0 + 0.05).collect())
            .collect();
        rows[3] = rows[1].clone();
        let ys = vec![0.1, 0.5, 0.9, 0.5];
        let batch = Batch::new(Mat::from_rows(rows), Targets::Scalar(ys)).unwrap();
        let cfg = AttackConfig::tabular_default(FeatureBox(vec![(0.0, 1.0); 3]), 21);
        let shape = ModelShape { input_dim: 3, attack_neurons: 24, hidden: vec![6], outputs: 1 };
        let out = run_vgia(
            &shape,
            &batch,
            &cfg,
            &ClientConfig::fedsgd(),
            LossKind::SquaredError,
            100,
        )
        .unwrap();
        assert!(!out.complete);
        assert_eq!(out.reconstructions.len(), 2);
        // far fewer than the full budget: the stalled interval ended the run
        assert!(out.trace.len() < 100, "ran {} rounds", out.trace.len());
    }

    #[test]
    fn duplicate_rows_leave_the_run_incomplete() {
        let mut rows: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 10) as f64 / 10.0 + 0.05).collect())
            .collect();
        rows[5] = rows[2].clone();
        let mut ys: Vec<f64> = (0..6).map(|i| i as f64 / 6.0).collect();
        ys[5] = ys[2];
        let batch = Batch::new(Mat::from_rows(rows.clone()), Targets::Scalar(ys)).unwrap();
        let cfg = AttackConfig::tabular_default(FeatureBox(vec![(0.0, 1.0); 4]), 11);
        let shape = ModelShape { input_dim: 4, attack_neurons: 12, hidden: vec![6], outputs: 1 };
        let out = run_vgia(
            &shape,
            &batch,
            &cfg,
            &ClientConfig::fedsgd(),
            LossKind::SquaredError,
            15,
        )
        .unwrap();
        assert!(!out.complete, "the duplicate slab must stay live");
        // the 4 distinct non-duplicated samples are all certified correctly
        assert_eq!(out.reconstructions.len(), 4);
        for rec in &out.reconstructions {
            let best =
                (0..6).map(|j| l2(&rec.x_hat, batch.sample(j))).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-9);
        }
    }
}
