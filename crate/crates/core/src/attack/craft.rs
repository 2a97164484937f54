//! Malicious parameter crafting: every attack-layer row carries the shared
//! probe direction, attack-layer biases hold the round's hyperplane
//! positions, and all downstream parameters are redrawn fresh each round so
//! the certification argument has its per-round randomness.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::{path_gain, DenseModel, Layer, ModelShape};

use super::AttackConfig;

const GATING_RETRIES: usize = 16;

/// A crafted round: the model sent to the client plus the per-neuron divisor
/// the slice algebra needs (path gains for regression, mixing factors for the
/// rank-1 classification head).
#[derive(Debug, Clone)]
pub struct CraftedRound {
    pub model: DenseModel,
    pub gains: Vec<f64>,
    /// Class projection vector `c` of the rank-1 head; present only for
    /// classification models.
    pub head_projection: Option<Vec<f64>>,
}

/// Crafted round retained for later certificate confirmation.
#[derive(Debug, Clone)]
pub struct RoundContext {
    pub model: DenseModel,
    pub gains: Vec<f64>,
    pub head_projection: Option<Vec<f64>>,
    pub round: usize,
}

impl CraftedRound {
    pub fn into_context(self, round: usize) -> Arc<RoundContext> {
        Arc::new(RoundContext {
            model: self.model,
            gains: self.gains,
            head_projection: self.head_projection,
            round,
        })
    }
}

/// Builds the round's malicious parameters.
///
/// Attack-layer rows all equal `w` with the given strictly increasing biases.
/// Downstream layers are drawn from the configured distribution and checked
/// for an input-independent gating pattern over the feature box; draws that
/// fail the check are retried a bounded number of times. Classification
/// models get a rank-1 output layer `c·vᵀ` whose per-neuron mixing factor
/// replaces the path gain.
pub fn craft_parameters<R: Rng + ?Sized>(
    cfg: &AttackConfig,
    shape: &ModelShape,
    w: &[f64],
    biases: &[f64],
    rng: &mut R,
) -> Result<CraftedRound> {
    if w.len() != shape.input_dim {
        return Err(Error::Shape(format!(
            "direction has {} entries, model input is {}",
            w.len(),
            shape.input_dim
        )));
    }
    if biases.len() != shape.attack_neurons {
        return Err(Error::Shape(format!(
            "{} biases for {} attack neurons",
            biases.len(),
            shape.attack_neurons
        )));
    }
    if !biases.windows(2).all(|p| p[0] < p[1]) {
        return Err(Error::Config("attack biases must be strictly increasing".into()));
    }

    let mut last_err = Error::Config("crafting never attempted".into());
    for _ in 0..GATING_RETRIES {
        match try_craft(cfg, shape, w, biases, rng) {
            Ok(round) => return Ok(round),
            Err(e @ (Error::GatingNotFixed(_) | Error::DegenerateGain(_))) => last_err = e,
            Err(e) => return Err(e),
        }
    }
    Err(last_err)
}

fn try_craft<R: Rng + ?Sized>(
    cfg: &AttackConfig,
    shape: &ModelShape,
    w: &[f64],
    biases: &[f64],
    rng: &mut R,
) -> Result<CraftedRound> {
    let dist = &cfg.downstream_distribution;
    let mut layers = Vec::with_capacity(shape.hidden.len() + 2);
    layers.push(Layer {
        weights: Mat::from_rows(vec![w.to_vec(); shape.attack_neurons]),
        bias: biases.to_vec(),
        relu: true,
    });

    let mut prev = shape.attack_neurons;
    for &width in &shape.hidden {
        let rows = (0..width).map(|_| (0..prev).map(|_| dist.sample(rng)).collect()).collect();
        layers.push(Layer {
            weights: Mat::from_rows(rows),
            bias: (0..width).map(|_| dist.sample(rng)).collect(),
            relu: true,
        });
        prev = width;
    }

    if shape.outputs == 1 {
        let row: Vec<f64> = (0..prev).map(|_| dist.sample(rng)).collect();
        layers.push(Layer {
            weights: Mat::from_rows(vec![row]),
            bias: vec![dist.sample(rng)],
            relu: false,
        });
        let model = DenseModel::new(layers)?;
        let gains = path_gain(&model, &cfg.feature_box)?;
        Ok(CraftedRound { model, gains, head_projection: None })
    } else {
        // rank-1 head: W_out = c · vᵀ collapses the class error into one
        // scalar pseudo-residual per sample
        let c: Vec<f64> = (0..shape.outputs).map(|_| dist.sample(rng)).collect();
        let v: Vec<f64> = (0..prev).map(|_| dist.sample(rng)).collect();
        let rows = c.iter().map(|ci| v.iter().map(|vj| ci * vj).collect()).collect();
        let out_bias: Vec<f64> = (0..shape.outputs).map(|_| dist.sample(rng)).collect();

        // mixing factors come from the same chain product, evaluated on a
        // scalar head carrying v
        let mut probe_layers = layers.clone();
        probe_layers.push(Layer {
            weights: Mat::from_rows(vec![v.clone()]),
            bias: vec![0.0],
            relu: false,
        });
        let probe = DenseModel::new(probe_layers)?;
        let gains = path_gain(&probe, &cfg.feature_box)?;

        layers.push(Layer { weights: Mat::from_rows(rows), bias: out_bias, relu: false });
        let model = DenseModel::new(layers)?;
        Ok(CraftedRound { model, gains, head_projection: Some(c) })
    }
}
