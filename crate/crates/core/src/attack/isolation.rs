//! The subspace isolation certificate.
//!
//! A probed interval's slice vector must lie in the span of its children's
//! slice vectors exactly when every nonzero child holds a single sample
//! (with probability 1 over the per-round parameter redraw). Certification
//! additionally confirms each candidate child by replaying its reconstruction
//! through the parent round's model and comparing coefficients: slabs whose
//! residents are linearly dependent (duplicate records) pass the raw span
//! test but fail this confirmation, so they are never certified.
//!
//! The span test runs on homogeneous signatures `[s; β]`, which ties the
//! coefficient into the membership question and keeps near-zero inputs
//! detectable.

use std::sync::Arc;

use crate::error::Result;
use crate::linalg::{self, project_onto_span, span_residual};
use crate::nn::LossKind;

use super::reconstruct::{recover_target, reconstruct_input, virtual_coefficient};
use super::{
    AttackConfig, Certificate, LiveInterval, ParentSlice, ReconstructionRecord, RoundContext,
    RoundPlan, SearchState, SliceRecord, BETA_FLOOR, ZERO_TOLERANCE_FACTOR,
};

/// How the empty-slab decision is scaled.
#[derive(Debug, Clone, Copy)]
pub enum ZeroRule {
    /// Exact gradients: pure cancellation leaves rounding noise only, so the
    /// threshold is absolute, `1e-12 · max(1, rescaled row scale)`.
    Absolute(f64),
    /// Drifted gradients: slabs are occupied when their magnitude stands out
    /// against the round's largest slice; drift noise sits orders of
    /// magnitude below real residents on that scale.
    Relative { threshold: f64, round_scale: f64 },
}

/// Mode-resolved thresholds for one certification pass.
#[derive(Debug, Clone)]
pub struct IsolationParams {
    pub span_threshold: f64,
    pub consistency_tolerance: f64,
    pub zero_rule: ZeroRule,
    pub loss: LossKind,
    pub batch_size: usize,
}

impl IsolationParams {
    pub fn fedsgd(cfg: &AttackConfig, row_scale: f64, loss: LossKind, batch_size: usize) -> Self {
        IsolationParams {
            span_threshold: cfg.span_tolerance,
            consistency_tolerance: cfg.correctness_tolerance,
            zero_rule: ZeroRule::Absolute(ZERO_TOLERANCE_FACTOR * row_scale.max(1.0)),
            loss,
            batch_size,
        }
    }

    pub fn fedavg(cfg: &AttackConfig, round_scale: f64, loss: LossKind, batch_size: usize) -> Self {
        IsolationParams {
            span_threshold: cfg.fedavg_residual_threshold,
            consistency_tolerance: cfg.fedavg_residual_threshold,
            zero_rule: ZeroRule::Relative {
                threshold: cfg.fedavg_residual_threshold,
                round_scale,
            },
            loss,
            batch_size,
        }
    }
}

/// Result of one certification pass.
#[derive(Debug, Default)]
pub struct IsolationOutcome {
    pub certified: Vec<ReconstructionRecord>,
    /// Span-certified slabs whose coefficient sat below the recovery floor;
    /// they stay live and are retried with fresh coefficients.
    pub unrecoverable: usize,
    /// Slabs that passed the span test but failed the coefficient replay;
    /// a healthy exact-gradient run has none.
    pub refused: usize,
}

/// Empty-slab decision for exact gradients: both the slice vector and its
/// coefficient collapse to rounding noise when no sample sits in the slab.
pub fn slab_is_empty(slice: &SliceRecord, row_scale: f64) -> bool {
    let tol = ZERO_TOLERANCE_FACTOR * row_scale.max(1.0);
    linalg::norm_inf(&slice.s).max(slice.beta.abs()) < tol
}

fn slab_is_empty_under(slice: &SliceRecord, rule: ZeroRule) -> bool {
    let mag = linalg::norm_inf(&slice.s).max(slice.beta.abs());
    match rule {
        ZeroRule::Absolute(tol) => mag < tol,
        ZeroRule::Relative { threshold, round_scale } => mag < threshold * round_scale,
    }
}

/// Gram–Schmidt span membership with an explicit threshold, as used under
/// FedAvg drift: orthogonalize the children, project the parent, accept when
/// the relative residual is below the threshold.
pub fn robust_span_test(parent: &[f64], children: &[&[f64]], threshold: f64) -> bool {
    span_residual(parent, children) < threshold
}

enum ChildVerdict {
    Certified(ReconstructionRecord),
    Live,
    Refused,
    Unrecoverable,
}

/// Reconstructs a span-certified child and confirms it against the parent
/// round: the child's share of the parent coefficient (its span-representation
/// weight times its own coefficient) must match the coefficient the parent
/// model reproduces on the reconstructed record.
fn confirm_child(
    child: &SliceRecord,
    lambda: f64,
    parent: &ParentSlice,
    ctx: &RoundContext,
    params: &IsolationParams,
) -> ChildVerdict {
    if child.beta.abs() <= BETA_FLOOR {
        log::warn!(
            "slab [{}, {}] certified but coefficient {:e} is below the recovery floor",
            child.b_low,
            child.b_high,
            child.beta
        );
        return ChildVerdict::Unrecoverable;
    }
    let x_hat = match reconstruct_input(child) {
        Ok(x) => x,
        Err(_) => return ChildVerdict::Unrecoverable,
    };
    let y_hat = match recover_target(&x_hat, child.beta, ctx, params.loss, params.batch_size) {
        Ok(y) => y,
        Err(e) => {
            log::warn!("target recovery failed on certified slab: {e}");
            return ChildVerdict::Live;
        }
    };
    let expected = lambda * child.beta;
    let v = match virtual_coefficient(&parent.ctx, &x_hat, &y_hat, params.loss, params.batch_size)
    {
        Ok(v) => v,
        Err(e) => {
            log::warn!("parent-round replay failed: {e}");
            return ChildVerdict::Live;
        }
    };
    let tol = params.consistency_tolerance * expected.abs().max(v.abs()).max(BETA_FLOOR);
    if (v - expected).abs() <= tol {
        ChildVerdict::Certified(ReconstructionRecord {
            x_hat,
            y_hat,
            beta: child.beta,
            certificate: Certificate::SpanCertified,
            round_found: child.round,
        })
    } else {
        log::warn!(
            "slab [{}, {}] passed the span test but its coefficient replay disagrees \
             ({v:e} vs {expected:e}); refusing the certificate",
            child.b_low,
            child.b_high,
        );
        ChildVerdict::Refused
    }
}

/// Runs the certification pass for one round.
///
/// `plan` must be the plan produced from `state` this round, and `slices` the
/// slice records of the plan's biases. Probed intervals are replaced by their
/// verdicts: certified children leave the search, everything else becomes a
/// live interval carrying its slice vector. Intervals the plan deferred stay
/// untouched. First-round slices (no parent) are only filtered for emptiness.
pub fn check_isolation(
    state: &mut SearchState,
    slices: &[SliceRecord],
    plan: &RoundPlan,
    ctx: &Arc<RoundContext>,
    params: &IsolationParams,
) -> Result<IsolationOutcome> {
    let mut outcome = IsolationOutcome::default();
    let old = std::mem::take(&mut state.intervals);
    let probed: Vec<bool> = {
        let mut v = vec![false; old.len()];
        for p in &plan.probes {
            v[p.interval_idx] = true;
        }
        v
    };

    let mut next: Vec<LiveInterval> = Vec::new();
    for (i, iv) in old.iter().enumerate() {
        if !probed[i] {
            next.push(iv.clone());
        }
    }

    for probe in &plan.probes {
        let parent_iv = &old[probe.interval_idx];
        let children = &slices[probe.lo_idx..probe.hi_idx];
        debug_assert!(children.iter().all(|c| c.width() <= parent_iv.width() * (1.0 + 1e-12)));
        let nonzero: Vec<&SliceRecord> =
            children.iter().filter(|c| !slab_is_empty_under(c, params.zero_rule)).collect();

        let spawn = |c: &SliceRecord| LiveInterval {
            lo: c.b_low,
            hi: c.b_high,
            parent: Some(ParentSlice { slice: c.clone(), ctx: Arc::clone(ctx) }),
            stalled: false,
        };

        let Some(parent) = parent_iv.parent.as_ref() else {
            // whole-space sweep: locate occupied slabs, certify nothing
            next.extend(nonzero.iter().map(|c| spawn(c)));
            continue;
        };

        if nonzero.is_empty() {
            // every resident's coefficient vanished this round (or drift noise
            // swallowed them); retry with fresh parameters later
            log::warn!(
                "probed interval [{}, {}] shows no residents this round; keeping it live",
                parent_iv.lo,
                parent_iv.hi
            );
            next.push(parent_iv.clone());
            continue;
        }

        let parent_sig = parent.slice.signature();
        let child_sigs: Vec<Vec<f64>> = nonzero.iter().map(|c| c.signature()).collect();
        let basis: Vec<&[f64]> = child_sigs.iter().map(|v| v.as_slice()).collect();
        let proj = project_onto_span(&parent_sig, &basis);
        let resid = proj.relative_residual;
        if resid > params.span_threshold * 0.1 && resid < params.span_threshold * 10.0 {
            log::warn!(
                "span residual {resid:e} is within 10x of the threshold {:e}",
                params.span_threshold
            );
        }

        if resid < params.span_threshold {
            for (child, &lambda) in nonzero.iter().zip(&proj.coefficients) {
                match confirm_child(child, lambda, parent, ctx, params) {
                    ChildVerdict::Certified(rec) => outcome.certified.push(rec),
                    ChildVerdict::Live => next.push(spawn(child)),
                    ChildVerdict::Refused => {
                        outcome.refused += 1;
                        next.push(spawn(child));
                    }
                    ChildVerdict::Unrecoverable => {
                        outcome.unrecoverable += 1;
                        next.push(spawn(child));
                    }
                }
            }
        } else {
            next.extend(nonzero.iter().map(|c| spawn(c)));
        }
    }

    state.intervals = next;
    state.sort_intervals();
    Ok(outcome)
}
