//! Server ↔ client round exchange for FedSGD full-batch and FedAvg
//! multi-step rounds, exposing exactly what a malicious server observes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::{batch_gradient, Batch, DenseModel, GradientReport, LossKind, Targets};

/// Client update mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClientMode {
    FedsgdFullbatch,
    Fedavg,
}

/// Protocol parameters governing one client's local computation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientConfig {
    pub mode: ClientMode,
    /// Local epochs `E` (FedAvg only).
    #[serde(default = "one")]
    pub local_epochs: usize,
    /// Mini-batch size for local SGD (FedAvg only).
    #[serde(default)]
    pub local_batch_size: usize,
    /// Local SGD learning rate (FedAvg only).
    #[serde(default)]
    pub learning_rate: f64,
    /// Seed of the per-epoch shuffle permutation.
    #[serde(default)]
    pub shuffle_seed: u64,
}

fn one() -> usize {
    1
}

impl ClientConfig {
    pub fn fedsgd() -> Self {
        ClientConfig {
            mode: ClientMode::FedsgdFullbatch,
            local_epochs: 1,
            local_batch_size: usize::MAX,
            learning_rate: 1.0,
            shuffle_seed: 0,
        }
    }

    pub fn validate(&self, batch_len: usize) -> Result<()> {
        if self.mode == ClientMode::Fedavg {
            if self.learning_rate <= 0.0 {
                return Err(Error::Config("learning_rate must be positive".into()));
            }
            if self.local_epochs == 0 {
                return Err(Error::Config("local_epochs must be at least 1".into()));
            }
            if self.local_batch_size == 0 || self.local_batch_size > batch_len {
                return Err(Error::Config(format!(
                    "local_batch_size must be in 1..={batch_len}"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters the server sends down for round `t`.
#[derive(Debug, Clone)]
pub struct RoundMessageDown {
    pub model: DenseModel,
    pub round: usize,
}

/// What the client returns: an exact batch gradient (FedSGD) or a parameter
/// delta `θ_after − θ_received` with the local step count (FedAvg).
#[derive(Debug, Clone)]
pub enum RoundMessageUp {
    Gradient { report: GradientReport, round: usize },
    Delta { delta: GradientReport, steps: usize, round: usize },
}

fn subbatch(data: &Batch, idx: &[usize]) -> Batch {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&j| data.sample(j).to_vec()).collect();
    let targets = match data.targets() {
        Targets::Scalar(v) => Targets::Scalar(idx.iter().map(|&j| v[j]).collect()),
        Targets::Class(v) => Targets::Class(idx.iter().map(|&j| v[j]).collect()),
    };
    Batch::new(Mat::from_rows(rows), targets).expect("subbatch construction")
}

/// Runs one client round on its fixed local dataset.
///
/// FedSGD returns the exact batch-mean gradient. FedAvg performs `E` epochs of
/// mini-batch SGD (fixed permutation per epoch derived from the shuffle seed
/// and round index) and returns the parameter delta. Deterministic given the
/// seed.
pub fn client_round(
    msg: &RoundMessageDown,
    data: &Batch,
    cfg: &ClientConfig,
    loss: LossKind,
) -> Result<RoundMessageUp> {
    cfg.validate(data.len())?;
    match cfg.mode {
        ClientMode::FedsgdFullbatch => {
            let report = batch_gradient(&msg.model, data, loss)?;
            Ok(RoundMessageUp::Gradient { report, round: msg.round })
        }
        ClientMode::Fedavg => {
            let mut model = msg.model.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.shuffle_seed ^ (msg.round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            // The update is accumulated at its own scale instead of being
            // recovered from the drifted parameters afterwards: subtracting
            // against the received weights would quantize the delta at their
            // ulp, and a single full-batch step would no longer invert to
            // the exact gradient.
            let mut delta = GradientReport::zeros_like(&msg.model);
            let mut steps = 0usize;
            for _epoch in 0..cfg.local_epochs {
                let mut order: Vec<usize> = (0..data.len()).collect();
                // a full-batch chunk is order-insensitive; keeping natural
                // order makes the one-step case bit-identical to FedSGD
                if cfg.local_batch_size < data.len() {
                    order.shuffle(&mut rng);
                }
                for chunk in order.chunks(cfg.local_batch_size.min(data.len())) {
                    let mb = subbatch(data, chunk);
                    let grad = batch_gradient(&model, &mb, loss)?;
                    for ((layer, g), dl) in
                        model.layers_mut().iter_mut().zip(&grad.layers).zip(&mut delta.layers)
                    {
                        for ((w, dw), d) in layer
                            .weights
                            .data_mut()
                            .iter_mut()
                            .zip(g.weights.data())
                            .zip(dl.weights.data_mut())
                        {
                            let step = cfg.learning_rate * dw;
                            *w -= step;
                            *d -= step;
                        }
                        for ((b, db), d) in
                            layer.bias.iter_mut().zip(&g.bias).zip(&mut dl.bias)
                        {
                            let step = cfg.learning_rate * db;
                            *b -= step;
                            *d -= step;
                        }
                    }
                    steps += 1;
                }
            }
            Ok(RoundMessageUp::Delta { delta, steps, round: msg.round })
        }
    }
}

/// The attacker's gradient proxy: FedSGD gradients pass through unchanged,
/// FedAvg deltas become `−delta / (η · steps)`.
pub fn pseudo_gradient(up: &RoundMessageUp, cfg: &ClientConfig) -> Result<GradientReport> {
    match up {
        RoundMessageUp::Gradient { report, .. } => Ok(report.clone()),
        RoundMessageUp::Delta { delta, steps, .. } => {
            if *steps == 0 {
                return Err(Error::ZeroSteps);
            }
            let mut out = delta.clone();
            out.scale_in_place(-1.0 / (cfg.learning_rate * *steps as f64));
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use rand::Rng;
    use rand::SeedableRng;

    fn toy_model() -> DenseModel {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mk = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Mat::from_rows(
                (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(0.01..0.02)).collect()).collect(),
            )
        };
        DenseModel::new(vec![
            Layer {
                weights: Mat::from_rows(
                    (0..6).map(|_| (0..3).map(|_| rng.gen_range(-0.1..0.1)).collect()).collect(),
                ),
                bias: (0..6).map(|_| rng.gen_range(-0.05..0.05)).collect(),
                relu: true,
            },
            Layer { weights: mk(4, 6, &mut rng), bias: vec![0.015; 4], relu: true },
            Layer { weights: mk(1, 4, &mut rng), bias: vec![0.012], relu: false },
        ])
        .unwrap()
    }

    fn toy_batch(n: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows = (0..n).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let ys = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Batch::new(Mat::from_rows(rows), Targets::Scalar(ys)).unwrap()
    }

    #[test]
    fn fedsgd_round_is_the_exact_batch_gradient() {
        let model = toy_model();
        let data = toy_batch(5);
        let msg = RoundMessageDown { model: model.clone(), round: 1 };
        let up = client_round(&msg, &data, &ClientConfig::fedsgd(), LossKind::SquaredError).unwrap();
        let direct = batch_gradient(&model, &data, LossKind::SquaredError).unwrap();
        match up {
            RoundMessageUp::Gradient { report, .. } => assert_eq!(report, direct),
            _ => panic!("expected gradient message"),
        }
    }

    #[test]
    fn fedsgd_round_is_stateless() {
        let model = toy_model();
        let data = toy_batch(4);
        let cfg = ClientConfig::fedsgd();
        let msg = RoundMessageDown { model, round: 3 };
        let a = client_round(&msg, &data, &cfg, LossKind::SquaredError).unwrap();
        let b = client_round(&msg, &data, &cfg, LossKind::SquaredError).unwrap();
        match (a, b) {
            (RoundMessageUp::Gradient { report: ra, .. }, RoundMessageUp::Gradient { report: rb, .. }) => {
                assert_eq!(ra, rb)
            }
            _ => panic!(),
        }
    }

    #[test]
    fn fedavg_single_full_batch_step_is_minus_eta_gradient() {
        let model = toy_model();
        let data = toy_batch(5);
        let cfg = ClientConfig {
            mode: ClientMode::Fedavg,
            local_epochs: 1,
            local_batch_size: 5,
            learning_rate: 0.01,
            shuffle_seed: 99,
        };
        let msg = RoundMessageDown { model: model.clone(), round: 1 };
        let up = client_round(&msg, &data, &cfg, LossKind::SquaredError).unwrap();
        let (delta, steps) = match &up {
            RoundMessageUp::Delta { delta, steps, .. } => (delta, *steps),
            _ => panic!(),
        };
        assert_eq!(steps, 1);
        // the shuffle permutes the single chunk, so compare against the
        // gradient of the permuted batch: summation order may differ by ULPs
        let direct = batch_gradient(&model, &data, LossKind::SquaredError).unwrap();
        for (dl, gl) in delta.layers.iter().zip(&direct.layers) {
            for (d, g) in dl.weights.data().iter().zip(gl.weights.data()) {
                assert!((d + 0.01 * g).abs() < 1e-15);
            }
        }
        // and the pseudo-gradient inverts the step
        let proxy = pseudo_gradient(&up, &cfg).unwrap();
        for (pl, gl) in proxy.layers.iter().zip(&direct.layers) {
            for (p, g) in pl.weights.data().iter().zip(gl.weights.data()) {
                assert!((p - g).abs() < 1e-13);
            }
            for (p, g) in pl.bias.iter().zip(&gl.bias) {
                assert!((p - g).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn fedavg_two_epochs_matches_scripted_sgd_trace() {
        let model = toy_model();
        let data = toy_batch(6);
        let cfg = ClientConfig {
            mode: ClientMode::Fedavg,
            local_epochs: 2,
            local_batch_size: 3,
            learning_rate: 0.05,
            shuffle_seed: 1234,
        };
        let msg = RoundMessageDown { model: model.clone(), round: 2 };
        let up = client_round(&msg, &data, &cfg, LossKind::SquaredError).unwrap();
        let delta = match &up {
            RoundMessageUp::Delta { delta, steps, .. } => {
                assert_eq!(*steps, 4);
                delta
            }
            _ => panic!(),
        };

        // independently scripted 4-step trace with the same permutations
        let mut rng = ChaCha8Rng::seed_from_u64(1234 ^ 2u64.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut theta = model.clone();
        for _ in 0..2 {
            let mut order: Vec<usize> = (0..6).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(3) {
                let mb = subbatch(&data, chunk);
                let g = batch_gradient(&theta, &mb, LossKind::SquaredError).unwrap();
                for (layer, gl) in theta.layers_mut().iter_mut().zip(&g.layers) {
                    for (w, dw) in layer.weights.data_mut().iter_mut().zip(gl.weights.data()) {
                        *w -= 0.05 * dw;
                    }
                    for (b, db) in layer.bias.iter_mut().zip(&gl.bias) {
                        *b -= 0.05 * db;
                    }
                }
            }
        }
        for ((dl, after), before) in delta.layers.iter().zip(theta.layers()).zip(model.layers()) {
            for ((d, a), b) in dl.weights.data().iter().zip(after.weights.data()).zip(before.weights.data())
            {
                assert!((d - (a - b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fedavg_multi_epoch_proxy_drifts_from_round_start_gradient() {
        let model = toy_model();
        let data = toy_batch(6);
        let cfg = ClientConfig {
            mode: ClientMode::Fedavg,
            local_epochs: 2,
            local_batch_size: 3,
            learning_rate: 0.05,
            shuffle_seed: 5,
        };
        let msg = RoundMessageDown { model: model.clone(), round: 1 };
        let up = client_round(&msg, &data, &cfg, LossKind::SquaredError).unwrap();
        let proxy = pseudo_gradient(&up, &cfg).unwrap();
        let direct = batch_gradient(&model, &data, LossKind::SquaredError).unwrap();
        let mut max_diff = 0.0_f64;
        for (pl, gl) in proxy.layers.iter().zip(&direct.layers) {
            for (p, g) in pl.weights.data().iter().zip(gl.weights.data()) {
                max_diff = max_diff.max((p - g).abs());
            }
        }
        assert!(max_diff > 1e-12, "expected drift, got {max_diff:e}");
    }

    #[test]
    fn pseudo_gradient_passes_fedsgd_through() {
        let model = toy_model();
        let data = toy_batch(3);
        let cfg = ClientConfig::fedsgd();
        let msg = RoundMessageDown { model, round: 1 };
        let up = client_round(&msg, &data, &cfg, LossKind::SquaredError).unwrap();
        let proxy = pseudo_gradient(&up, &cfg).unwrap();
        match up {
            RoundMessageUp::Gradient { report, .. } => assert_eq!(proxy, report),
            _ => panic!(),
        }
    }
}
