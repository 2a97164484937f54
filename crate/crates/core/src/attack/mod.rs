//! The verifiable gradient inversion attack: malicious parameter crafting,
//! adaptive hyperplane placement, slice-vector extraction, subspace
//! certification of sample isolation, and exact input/target reconstruction.

mod craft;
mod driver;
mod hyperplanes;
mod isolation;
mod reconstruct;
mod slices;

pub use craft::{craft_parameters, CraftedRound, RoundContext};
pub use driver::{run_vgia, AttackOutcome, RoundTrace};
pub use hyperplanes::{set_hyperplanes, ProbeRange, RoundPlan};
pub use isolation::{
    check_isolation, robust_span_test, slab_is_empty, IsolationOutcome, IsolationParams, ZeroRule,
};
pub use reconstruct::{recover_target, recover_target_bisect, reconstruct_input};
pub use slices::{compute_slices, observation, rescaled_row_scale};

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeatureBox, TargetValue};

/// Coefficients with magnitude at or below this floor are treated as
/// unrecoverable rather than divided into garbage.
pub const BETA_FLOOR: f64 = 1e-12;

/// Scale factor of the empty-slab test under exact (FedSGD) gradients: pure
/// cancellation leaves only rounding noise.
pub const ZERO_TOLERANCE_FACTOR: f64 = 1e-12;

/// A scalar parameter distribution the attacker draws from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dist {
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Dist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Dist::Normal { mean, std } => {
                Normal::new(*mean, *std).expect("normal parameters").sample(rng)
            }
            Dist::Uniform { lo, hi } => rng.gen_range(*lo..*hi),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Dist::Normal { mean, std } => {
                if !(mean.is_finite() && std.is_finite() && *std > 0.0) {
                    return Err(Error::Config(format!("normal({mean}, {std})")));
                }
            }
            Dist::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::Config(format!("uniform[{lo}, {hi}]")));
                }
            }
        }
        Ok(())
    }
}

/// Everything the attacker chooses up front.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Distribution of the shared hyperplane normal `w`.
    pub direction_distribution: Dist,
    /// Distribution of all downstream weights and biases (redrawn per round).
    pub downstream_distribution: Dist,
    /// Known per-feature bounds of the (scaled) inputs.
    pub feature_box: FeatureBox,
    /// Relative orthogonal-residual threshold of the span test (exact
    /// gradients).
    pub span_tolerance: f64,
    /// Looser residual threshold of the robust span test under FedAvg drift.
    pub fedavg_residual_threshold: f64,
    /// Minimum hyperplanes allocated to a probed interval; at least 3.
    pub min_probes_per_interval: usize,
    /// Tolerance used when confirming certificates numerically.
    pub correctness_tolerance: f64,
    /// Seed of the attacker's random draws.
    pub seed: u64,
}

impl AttackConfig {
    /// Attack configuration used on `[0,1]`-scaled tabular data: the shared
    /// direction from N(0, 1e-2) and positive downstream parameters from
    /// U[0.01, 0.02].
    pub fn tabular_default(feature_box: FeatureBox, seed: u64) -> Self {
        AttackConfig {
            direction_distribution: Dist::Normal { mean: 0.0, std: 1e-2 },
            downstream_distribution: Dist::Uniform { lo: 0.01, hi: 0.02 },
            feature_box,
            span_tolerance: 1e-8,
            fedavg_residual_threshold: 1e-3,
            min_probes_per_interval: 3,
            correctness_tolerance: 1e-9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.direction_distribution.validate()?;
        self.downstream_distribution.validate()?;
        self.feature_box.validate()?;
        if self.min_probes_per_interval < 3 {
            return Err(Error::Config(
                "min_probes_per_interval must be at least 3 to certify anything".into(),
            ));
        }
        for (name, v) in [
            ("span_tolerance", self.span_tolerance),
            ("fedavg_residual_threshold", self.fedavg_residual_threshold),
            ("correctness_tolerance", self.correctness_tolerance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// The realized shared direction `w` for this configuration's seed.
    ///
    /// This is the attacker's first random draw, so a paired baseline run
    /// with the same config sees the same direction.
    pub fn direction(&self, dim: usize) -> Vec<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        draw_direction(&self.direction_distribution, dim, &mut rng)
    }
}

pub(crate) fn draw_direction<R: Rng + ?Sized>(dist: &Dist, dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| dist.sample(rng)).collect()
}

/// One probing hyperplane `{x | w·x + bias = 0}`; the normal `w` is shared by
/// every neuron within a round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub neuron: usize,
    pub bias: f64,
}

/// One probed slab: the bias pair delimiting it, its slice vector, and the
/// matching coefficient from the bias-gradient differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub b_low: f64,
    pub b_high: f64,
    /// Slice vector `s`: rescaled difference of consecutive weight-gradient
    /// rows.
    pub s: Vec<f64>,
    /// Coefficient `β`: matching rescaled difference of bias gradients.
    pub beta: f64,
    /// Attack round the slice was observed in.
    pub round: usize,
}

impl SliceRecord {
    pub fn width(&self) -> f64 {
        self.b_high - self.b_low
    }

    /// The slab signature `[s; β]` in homogeneous coordinates: a singleton
    /// slab holding `x` has signature `β·[x; 1]`.
    pub fn signature(&self) -> Vec<f64> {
        let mut v = self.s.clone();
        v.push(self.beta);
        v
    }
}

/// How a reconstruction was validated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Certificate {
    /// Passed the subspace isolation test (and its coefficient confirmation).
    SpanCertified,
    /// Emitted by the baseline when the slab width fell below epsilon; no
    /// correctness claim attached.
    EpsilonStopped,
}

/// An emitted reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRecord {
    pub x_hat: Vec<f64>,
    pub y_hat: TargetValue,
    pub beta: f64,
    pub certificate: Certificate,
    pub round_found: usize,
}

/// A live search interval in bias space, carrying the slice vector of the
/// round that spawned it.
#[derive(Debug, Clone)]
pub struct LiveInterval {
    pub lo: f64,
    pub hi: f64,
    /// The slice observed over `[lo, hi]` and the round context it was
    /// computed under; `None` only for the initial whole-space interval.
    pub parent: Option<ParentSlice>,
    /// Set when the interval is too narrow to subdivide in double precision;
    /// such intervals are never probed again.
    pub stalled: bool,
}

impl LiveInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Parent slice plus the crafted-round context needed to re-check it later.
#[derive(Debug, Clone)]
pub struct ParentSlice {
    pub slice: SliceRecord,
    pub ctx: Arc<RoundContext>,
}

/// Ordered live intervals plus everything certified so far.
#[derive(Debug, Clone, Default)]
pub struct SearchState {
    /// Live intervals, sorted by lower endpoint, pairwise disjoint interiors.
    pub intervals: Vec<LiveInterval>,
    pub certified: Vec<ReconstructionRecord>,
    pub round: usize,
}

impl SearchState {
    pub fn new(lo: f64, hi: f64) -> Self {
        SearchState {
            intervals: vec![LiveInterval { lo, hi, parent: None, stalled: false }],
            certified: Vec::new(),
            round: 0,
        }
    }

    pub(crate) fn sort_intervals(&mut self) {
        self.intervals.sort_by(|a, b| a.lo.partial_cmp(&b.lo).expect("finite interval bounds"));
    }

    /// Number of intervals that can still be probed.
    pub fn probeable(&self) -> usize {
        self.intervals.iter().filter(|iv| !iv.stalled).count()
    }
}

/// Initial bias-space search interval induced by the feature bounds, padded
/// so samples sitting exactly on the box boundary stay inside the sweep.
pub fn initial_interval(feature_box: &FeatureBox, w: &[f64]) -> (f64, f64) {
    let (p_lo, p_hi) = feature_box.projection_bounds(w);
    let pad = 1e-6 * (p_hi - p_lo).max(1e-12);
    (-p_hi - pad, -p_lo + pad)
}
