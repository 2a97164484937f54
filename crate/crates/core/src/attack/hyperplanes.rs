//! Adaptive allocation of the round's hyperplane budget across live search
//! intervals.
//!
//! Intervals are processed in ascending order of their lower endpoint. With
//! `M = min(live, ⌊N/q_min⌋)` intervals probed per round, interval `k` gets
//! `q_k = ⌊N/M⌋ + 1[k ≤ N mod M]` hyperplanes placed at both endpoints plus
//! interior points; abutting intervals share the boundary hyperplane. Any
//! intervals beyond the first `M` stay live untouched until a later round.

use crate::error::{Error, Result};
use crate::linalg::lerp;

use super::{Hyperplane, SearchState};

/// Where this round's hyperplanes go, and which live interval each contiguous
/// bias run probes.
#[derive(Debug, Clone)]
pub struct RoundPlan {
    /// Strictly increasing attack-layer biases, one per neuron.
    pub biases: Vec<f64>,
    pub hyperplanes: Vec<Hyperplane>,
    /// One entry per probed interval.
    pub probes: Vec<ProbeRange>,
}

/// Bias indices `lo_idx..=hi_idx` bound the probed interval; its child slabs
/// are the consecutive slices `lo_idx..hi_idx`.
#[derive(Debug, Clone, Copy)]
pub struct ProbeRange {
    /// Index into the search state's interval list at planning time.
    pub interval_idx: usize,
    pub lo_idx: usize,
    pub hi_idx: usize,
}

/// Narrower than this and a bias interval cannot be subdivided meaningfully
/// in double precision.
fn subdividable(lo: f64, hi: f64, parts: usize) -> bool {
    let ulp = lo.abs().max(hi.abs()).max(1e-300) * f64::EPSILON;
    hi - lo > 4.0 * parts as f64 * ulp
}

/// Plans the next round's biases over the live intervals.
///
/// Marks intervals that can no longer be subdivided as stalled; they are
/// skipped and keep their live status. Returns an empty plan when nothing is
/// probeable.
pub fn set_hyperplanes(state: &mut SearchState, n: usize, q_min: usize) -> Result<RoundPlan> {
    if n < q_min {
        return Err(Error::Config(format!("budget {n} is below the minimum probe count {q_min}")));
    }
    state.sort_intervals();

    // The allocation feeds back into itself: an interval too narrow for its
    // assigned probe count is stalled, which changes the allocation. Re-plan
    // until the probed set is stable.
    loop {
        let candidates: Vec<usize> = state
            .intervals
            .iter()
            .enumerate()
            .filter(|(_, iv)| !iv.stalled)
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            return Ok(RoundPlan {
                biases: Vec::new(),
                hyperplanes: Vec::new(),
                probes: Vec::new(),
            });
        }

        let m = candidates.len().min(n / q_min);
        let r = n % m;
        let mut stalled_any = false;
        for (k, &idx) in candidates.iter().take(m).enumerate() {
            let iv = &mut state.intervals[idx];
            let q = n / m + usize::from(k < r);
            if !subdividable(iv.lo, iv.hi, q) {
                iv.stalled = true;
                stalled_any = true;
                log::warn!(
                    "interval [{}, {}] is below double-precision resolution for {q} probes; \
                     leaving it live unprobed",
                    iv.lo,
                    iv.hi
                );
            }
        }
        if stalled_any {
            continue;
        }

        let mut biases: Vec<f64> = Vec::with_capacity(n);
        let mut probes = Vec::with_capacity(m);
        for (k, &idx) in candidates.iter().take(m).enumerate() {
            let iv = &state.intervals[idx];
            let q = n / m + usize::from(k < r);
            let shared = k > 0 && {
                let prev = &state.intervals[candidates[k - 1]];
                prev.hi == iv.lo
            };
            let lo_idx = if shared { biases.len() - 1 } else { biases.len() };
            if shared {
                // the lower boundary hyperplane is already placed; spread the
                // budget over the interior and the upper endpoint
                for i in 1..=q {
                    biases.push(lerp(iv.lo, iv.hi, i as f64 / q as f64));
                }
            } else {
                for i in 0..q {
                    biases.push(lerp(iv.lo, iv.hi, i as f64 / (q - 1) as f64));
                }
            }
            let hi_idx = biases.len() - 1;
            probes.push(ProbeRange { interval_idx: idx, lo_idx, hi_idx });
        }

        debug_assert_eq!(biases.len(), n);
        if !biases.windows(2).all(|p| p[0] < p[1]) {
            // rounding produced a coincident pair anyway; stall the narrowest
            // probed interval and re-plan
            let narrowest = probes
                .iter()
                .map(|p| p.interval_idx)
                .min_by(|&a, &b| {
                    let wa = state.intervals[a].width();
                    let wb = state.intervals[b].width();
                    wa.partial_cmp(&wb).expect("finite widths")
                })
                .expect("probes nonempty");
            state.intervals[narrowest].stalled = true;
            continue;
        }

        let hyperplanes = biases
            .iter()
            .enumerate()
            .map(|(neuron, &bias)| Hyperplane { neuron, bias })
            .collect();
        return Ok(RoundPlan { biases, hyperplanes, probes });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{LiveInterval, ParentSlice, RoundContext, SliceRecord};
    use crate::linalg::Mat;
    use crate::nn::{DenseModel, Layer};
    use std::sync::Arc;

    fn dummy_parent(round: usize) -> ParentSlice {
        let model = DenseModel::new(vec![Layer {
            weights: Mat::from_rows(vec![vec![1.0]]),
            bias: vec![0.0],
            relu: false,
        }])
        .unwrap();
        ParentSlice {
            slice: SliceRecord { b_low: 0.0, b_high: 1.0, s: vec![1.0], beta: 1.0, round },
            ctx: Arc::new(RoundContext {
                model,
                gains: vec![1.0],
                head_projection: None,
                round,
            }),
        }
    }

    fn state_with(intervals: Vec<(f64, f64)>) -> SearchState {
        SearchState {
            intervals: intervals
                .into_iter()
                .map(|(lo, hi)| LiveInterval {
                    lo,
                    hi,
                    parent: Some(dummy_parent(1)),
                    stalled: false,
                })
                .collect(),
            certified: Vec::new(),
            round: 1,
        }
    }

    #[test]
    fn first_round_uniform_split() {
        let mut state = SearchState::new(0.0, 1.0);
        let plan = set_hyperplanes(&mut state, 5, 3).unwrap();
        assert_eq!(plan.biases, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(plan.probes.len(), 1);
        assert_eq!((plan.probes[0].lo_idx, plan.probes[0].hi_idx), (0, 4));
    }

    #[test]
    fn single_interval_gets_the_whole_budget() {
        let mut state = state_with(vec![(2.0, 3.0)]);
        let plan = set_hyperplanes(&mut state, 5, 3).unwrap();
        assert_eq!(plan.biases.len(), 5);
        assert_eq!(plan.biases[0], 2.0);
        assert_eq!(plan.biases[4], 3.0);
        // endpoints plus 3 interior points
        assert!(plan.biases.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn abutting_intervals_share_the_boundary() {
        let mut state = state_with(vec![(0.0, 1.0), (1.0, 2.0)]);
        let plan = set_hyperplanes(&mut state, 7, 3).unwrap();
        assert_eq!(plan.biases.len(), 7);
        // all distinct and sorted
        assert!(plan.biases.windows(2).all(|p| p[1] > p[0]));
        // first interval: q = 4 (gets the remainder), bounded by indices 0..=3
        assert_eq!((plan.probes[0].lo_idx, plan.probes[0].hi_idx), (0, 3));
        // second interval shares bias index 3 as its lower bound
        assert_eq!((plan.probes[1].lo_idx, plan.probes[1].hi_idx), (3, 6));
        assert_eq!(plan.biases[3], 1.0);
        assert_eq!(plan.biases[6], 2.0);
    }

    #[test]
    fn excess_intervals_are_deferred_in_sorted_order() {
        let ivs: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 * 2.0, i as f64 * 2.0 + 1.0)).collect();
        let mut state = state_with(ivs);
        // budget 9, q_min 3 → only 3 intervals probed
        let plan = set_hyperplanes(&mut state, 9, 3).unwrap();
        assert_eq!(plan.probes.len(), 3);
        let probed: Vec<usize> = plan.probes.iter().map(|p| p.interval_idx).collect();
        assert_eq!(probed, vec![0, 1, 2]);
        assert_eq!(state.intervals.len(), 10);
    }

    #[test]
    fn unsubdividable_interval_is_stalled_not_probed() {
        let lo = 1.0;
        let hi = 1.0 + f64::EPSILON;
        let mut state = state_with(vec![(lo, hi), (5.0, 6.0)]);
        let plan = set_hyperplanes(&mut state, 6, 3).unwrap();
        assert_eq!(plan.probes.len(), 1);
        assert_eq!(plan.probes[0].interval_idx, 1);
        assert!(state.intervals[0].stalled);
    }

    #[test]
    fn budget_below_q_min_is_an_error() {
        let mut state = SearchState::new(0.0, 1.0);
        assert!(set_hyperplanes(&mut state, 2, 3).is_err());
    }
}
