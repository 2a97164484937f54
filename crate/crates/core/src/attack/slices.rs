//! Slice vectors and coefficients from rescaled gradient differences.
//!
//! Dividing each attack-layer gradient row by its path gain aligns the
//! observations of consecutive neurons; the difference then cancels every
//! sample active at both neurons, leaving exactly the slab residents.

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::GradientReport;

use super::SliceRecord;

/// The gradient-ratio observation `o_i = (∂L/∂W_i) / (∂L/∂b_i)`: a convex-ish
/// combination of the inputs activating neuron `i`. `None` when the bias
/// gradient vanishes.
pub fn observation(report: &GradientReport, neuron: usize) -> Option<Vec<f64>> {
    let db = report.attack_bias(neuron);
    if db == 0.0 {
        return None;
    }
    Some(linalg::scale(report.attack_row(neuron), 1.0 / db))
}

/// Largest magnitude among the rescaled attack-layer gradient entries; sets
/// the scale of the empty-slab test.
pub fn rescaled_row_scale(report: &GradientReport, gains: &[f64]) -> f64 {
    let mut m = 0.0_f64;
    for (i, g) in gains.iter().enumerate() {
        let inv = 1.0 / g;
        m = m.max(linalg::norm_inf(report.attack_row(i)) * inv.abs());
        m = m.max((report.attack_bias(i) * inv).abs());
    }
    m
}

/// Slice vectors and coefficients for all consecutive neuron pairs.
///
/// For neurons `i`, `i+1` with biases `b_i < b_{i+1}`:
/// `s = (∂L/∂W_{i+1})/g_{i+1} − (∂L/∂W_i)/g_i` and the matching bias-gradient
/// difference gives `β`. Returns `N−1` records tagged with the round.
pub fn compute_slices(
    report: &GradientReport,
    gains: &[f64],
    biases: &[f64],
    round: usize,
) -> Result<Vec<SliceRecord>> {
    let n = gains.len();
    if biases.len() != n {
        return Err(Error::Shape(format!("{} biases for {} gains", biases.len(), n)));
    }
    if report.layers[0].weights.rows() != n {
        return Err(Error::Shape(format!(
            "report has {} attack rows, expected {n}",
            report.layers[0].weights.rows()
        )));
    }
    for (i, g) in gains.iter().enumerate() {
        if g.abs() < 1e-300 {
            return Err(Error::DegenerateGain(i));
        }
    }

    let rows: Vec<Vec<f64>> =
        (0..n).map(|i| linalg::scale(report.attack_row(i), 1.0 / gains[i])).collect();
    let bias_ratios: Vec<f64> = (0..n).map(|i| report.attack_bias(i) / gains[i]).collect();

    Ok((0..n - 1)
        .map(|k| SliceRecord {
            b_low: biases[k],
            b_high: biases[k + 1],
            s: linalg::sub(&rows[k + 1], &rows[k]),
            beta: bias_ratios[k + 1] - bias_ratios[k],
            round,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{craft_parameters, AttackConfig};
    use crate::linalg::Mat;
    use crate::nn::{batch_gradient, Batch, FeatureBox, LossKind, ModelShape, Targets};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(
        seed: u64,
        biases: &[f64],
        rows: Vec<Vec<f64>>,
        ys: Vec<f64>,
    ) -> (Vec<SliceRecord>, crate::attack::CraftedRound, Batch) {
        let d = rows[0].len();
        let cfg = AttackConfig::tabular_default(FeatureBox(vec![(0.0, 1.0); d]), seed);
        let shape =
            ModelShape { input_dim: d, attack_neurons: biases.len(), hidden: vec![6], outputs: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let crafted = craft_parameters(&cfg, &shape, &w, biases, &mut rng).unwrap();
        let batch = Batch::new(Mat::from_rows(rows), Targets::Scalar(ys)).unwrap();
        let report = batch_gradient(&crafted.model, &batch, LossKind::SquaredError).unwrap();
        let slices = compute_slices(&report, &crafted.gains, biases, 1).unwrap();
        (slices, crafted, batch)
    }

    #[test]
    fn empty_slab_gives_null_slice() {
        // one sample, far from the middle slab
        let rows = vec![vec![0.9, 0.9, 0.9]];
        // place biases so the sample activates either all or none of the
        // neurons bounding the middle slab
        let (slices, crafted, batch) = setup(3, &[-10.0, -5.0, -4.0, 10.0], rows, vec![0.4]);
        let w = crafted.model.layers()[0].weights.row(0);
        let p = crate::linalg::dot(w, batch.sample(0));
        // slab (-5, -4): resident iff 4 < p <= 5, which p is far from
        assert!(!(4.0 < p && p <= 5.0));
        let mid = &slices[1];
        assert!(crate::linalg::norm_inf(&mid.s) < 1e-15);
        assert!(mid.beta.abs() < 1e-15);
    }

    #[test]
    fn slice_matches_per_sample_sum() {
        // B=3 toy batch; verify s equals (1/B) Σ_residents dL/dz · x
        let rows = vec![vec![0.2, 0.8], vec![0.5, 0.5], vec![0.9, 0.1]];
        let ys = vec![0.3, -0.2, 0.8];
        let (slices, crafted, batch) = setup(11, &[-0.5, -0.01, 0.0, 0.5], rows.clone(), ys);
        let w = crafted.model.layers()[0].weights.row(0).to_vec();
        for slice in &slices {
            let mut expect = vec![0.0; 2];
            let mut expect_beta = 0.0;
            for j in 0..batch.len() {
                let p = crate::linalg::dot(&w, batch.sample(j));
                // resident of [b_low, b_high] iff -b_high < p <= -b_low
                if -slice.b_high < p && p <= -slice.b_low {
                    let dldz = crate::nn::per_sample_output_grad(
                        &crafted.model,
                        batch.sample(j),
                        &batch.target(j),
                        LossKind::SquaredError,
                    )
                    .unwrap()[0];
                    for (e, x) in expect.iter_mut().zip(batch.sample(j)) {
                        *e += dldz * x / 3.0;
                    }
                    expect_beta += dldz / 3.0;
                }
            }
            for (a, b) in slice.s.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            assert!((slice.beta - expect_beta).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_slab_reproduces_the_resident() {
        let rows = vec![vec![0.25, 0.75, 0.5]];
        let ys = vec![0.9];
        let (slices, crafted, batch) = setup(17, &[-1.0, -0.5, 0.0, 0.5, 1.0], rows, ys);
        let w = crafted.model.layers()[0].weights.row(0).to_vec();
        let p = crate::linalg::dot(&w, batch.sample(0));
        let hit: Vec<&SliceRecord> =
            slices.iter().filter(|s| -s.b_high < p && p <= -s.b_low).collect();
        assert_eq!(hit.len(), 1);
        let s = hit[0];
        let xhat = crate::linalg::scale(&s.s, 1.0 / s.beta);
        let err: f64 = xhat
            .iter()
            .zip(batch.sample(0))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-9, "l2 error {err:e}");
    }

    #[test]
    fn observation_is_a_weighted_input_combination() {
        let rows = vec![vec![0.2, 0.4], vec![0.6, 0.9]];
        let ys = vec![0.5, -0.5];
        let (_slices, crafted, batch) = setup(23, &[0.0, 0.25, 0.5], rows, ys);
        let report = batch_gradient(&crafted.model, &batch, LossKind::SquaredError).unwrap();
        for i in 0..3 {
            if let Some(o) = observation(&report, i) {
                assert_eq!(o.len(), 2);
                assert!(o.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn degenerate_gain_is_rejected() {
        let report = GradientReport {
            layers: vec![crate::nn::LayerGrad {
                weights: Mat::from_rows(vec![vec![1.0], vec![1.0]]),
                bias: vec![1.0, 1.0],
            }],
        };
        let err = compute_slices(&report, &[1.0, 0.0], &[0.0, 1.0], 1).unwrap_err();
        assert!(matches!(err, Error::DegenerateGain(1)));
    }
}
