//! Exact double-precision forward/backward engine for fully connected ReLU
//! networks.
//!
//! The attack algebra consumes three quantities from here: full-batch
//! gradient reports, per-sample output-loss derivatives, and the path gains
//! `g_i = ∂z_out/∂z_i` from the first hidden layer to the output under a
//! fixed downstream gating pattern. Gradients are reverse-mode with a fixed
//! summation order (samples in batch order, units in index order), so a given
//! model/batch pair always produces the same bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// One dense layer: `z = W x + b`, optionally followed by ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Mat,
    pub bias: Vec<f64>,
    pub relu: bool,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Layered fully connected ReLU network, all double precision.
///
/// Layer 0 is the attack layer (`N` rows over `d` inputs); the final layer is
/// linear (scalar output for regression, `C` outputs for classification).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseModel {
    layers: Vec<Layer>,
}

impl DenseModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {} outputs {} units but layer {} expects {}",
                    i,
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape(format!("layer {i} bias length")));
            }
        }
        if layers.last().unwrap().relu {
            return Err(Error::Shape("final layer must be linear".into()));
        }
        Ok(DenseModel { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Width of the attack layer (first hidden layer).
    pub fn attack_width(&self) -> usize {
        self.layers[0].out_dim()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Architecture of the victim model, independent of parameter values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Input feature count.
    pub input_dim: usize,
    /// Attack-layer width `N`.
    pub attack_neurons: usize,
    /// Hidden widths between the attack layer and the output layer.
    pub hidden: Vec<usize>,
    /// Output count: 1 for regression, `C` for classification.
    pub outputs: usize,
}

impl ModelShape {
    /// Layer dimensions as (in, out) pairs from input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim, self.attack_neurons];
        widths.extend_from_slice(&self.hidden);
        widths.push(self.outputs);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Batch targets: scalar regression values or class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Scalar(Vec<f64>),
    Class(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Scalar(v) => v.len(),
            Targets::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A recovered or ground-truth target value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TargetValue {
    Scalar(f64),
    Class(usize),
}

/// The victim client's records: `B×d` features plus per-sample targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    features: Mat,
    targets: Targets,
}

impl Batch {
    pub fn new(features: Mat, targets: Targets) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Shape("batch must contain at least one sample".into()));
        }
        if targets.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} targets",
                features.rows(),
                targets.len()
            )));
        }
        if !features.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Shape("non-finite feature value".into()));
        }
        Ok(Batch { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn sample(&self, j: usize) -> &[f64] {
        self.features.row(j)
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn target(&self, j: usize) -> TargetValue {
        match &self.targets {
            Targets::Scalar(v) => TargetValue::Scalar(v[j]),
            Targets::Class(v) => TargetValue::Class(v[j]),
        }
    }

    /// Validates class indices against the model's output count.
    pub fn check_against(&self, model: &DenseModel) -> Result<()> {
        if self.dim() != model.input_dim() {
            return Err(Error::Shape(format!(
                "batch dim {} vs model input {}",
                self.dim(),
                model.input_dim()
            )));
        }
        if let Targets::Class(idx) = &self.targets {
            let c = model.output_dim();
            if let Some(bad) = idx.iter().find(|&&k| k >= c) {
                return Err(Error::Shape(format!("class index {bad} out of range 0..{c}")));
            }
        }
        Ok(())
    }
}

/// Per-feature closed bounds `[min, max]` on the (scaled) input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBox(pub Vec<(f64, f64)>);

impl FeatureBox {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config("empty feature box".into()));
        }
        for (i, (lo, hi)) in self.0.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("feature box entry {i}: [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.0).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Tight bounds of `w·x` over the box, by interval arithmetic.
    pub fn projection_bounds(&self, w: &[f64]) -> (f64, f64) {
        assert_eq!(w.len(), self.dim());
        let mut lo = 0.0;
        let mut hi = 0.0;
        for (wi, (a, b)) in w.iter().zip(&self.0) {
            let (p, q) = (wi * a, wi * b);
            lo += p.min(q);
            hi += p.max(q);
        }
        (lo, hi)
    }
}

/// Loss attached to the final output.
///
/// Squared error is the per-sample loss `(z − y)²` (no 1/2 factor), so
/// `∂L/∂z = 2(z − y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

impl LossKind {
    /// `∂L_j/∂z` at output `z` for target `y`; length matches `z`.
    pub fn output_grad(&self, z: &[f64], y: &TargetValue) -> Vec<f64> {
        match (self, y) {
            (LossKind::SquaredError, TargetValue::Scalar(t)) => {
                assert_eq!(z.len(), 1, "squared loss needs a scalar output");
                vec![2.0 * (z[0] - t)]
            }
            (LossKind::CrossEntropy, TargetValue::Class(k)) => {
                let mut g = softmax(z);
                g[*k] -= 1.0;
                g
            }
            _ => panic!("loss/target mismatch"),
        }
    }

    pub fn loss(&self, z: &[f64], y: &TargetValue) -> f64 {
        match (self, y) {
            (LossKind::SquaredError, TargetValue::Scalar(t)) => {
                let r = z[0] - t;
                r * r
            }
            (LossKind::CrossEntropy, TargetValue::Class(k)) => {
                let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - z[*k]
            }
            _ => panic!("loss/target mismatch"),
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub weights: Mat,
    pub bias: Vec<f64>,
}

/// Gradients of the batch-mean loss w.r.t. every parameter; mirrors the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub layers: Vec<LayerGrad>,
}

impl GradientReport {
    pub fn zeros_like(model: &DenseModel) -> Self {
        GradientReport {
            layers: model
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weights: Mat::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    /// Attack-layer weight-gradient row for neuron `i`.
    pub fn attack_row(&self, i: usize) -> &[f64] {
        self.layers[0].weights.row(i)
    }

    /// Attack-layer bias gradient for neuron `i`.
    pub fn attack_bias(&self, i: usize) -> f64 {
        self.layers[0].bias[i]
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for l in &mut self.layers {
            for v in l.weights.data_mut() {
                *v *= alpha;
            }
            for v in &mut l.bias {
                *v *= alpha;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0_f64;
        for l in &self.layers {
            for v in l.weights.data() {
                m = m.max(v.abs());
            }
            for v in &l.bias {
                m = m.max(v.abs());
            }
        }
        m
    }
}

/// Pre- and post-activation values of every layer for one input.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Pre-activation `z` per layer.
    pub pre: Vec<Vec<f64>>,
    /// Post-activation per layer (equals `pre` on linear layers).
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().unwrap()
    }
}

/// Evaluates the network on `x`, keeping every pre/post activation.
pub fn forward(model: &DenseModel, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != model.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} entries, model expects {}",
            x.len(),
            model.input_dim()
        )));
    }
    let mut pre = Vec::with_capacity(model.num_layers());
    let mut post = Vec::with_capacity(model.num_layers());
    let mut cur = x;
    for layer in model.layers() {
        let mut z = layer.weights.matvec(cur);
        for (zi, bi) in z.iter_mut().zip(&layer.bias) {
            *zi += bi;
        }
        let a = if layer.relu { z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect() } else { z.clone() };
        pre.push(z);
        post.push(a);
        cur = post.last().unwrap();
    }
    Ok(ForwardTrace { pre, post })
}

/// `∂L_j/∂z_out` at the model's prediction for `(x, y)`.
pub fn per_sample_output_grad(
    model: &DenseModel,
    x: &[f64],
    y: &TargetValue,
    loss: LossKind,
) -> Result<Vec<f64>> {
    let trace = forward(model, x)?;
    Ok(loss.output_grad(trace.output(), y))
}

/// Accumulates one sample's parameter gradients into `acc` (unnormalized).
fn backprop_into(
    model: &DenseModel,
    trace: &ForwardTrace,
    x: &[f64],
    out_grad: &[f64],
    acc: &mut GradientReport,
) {
    let nl = model.num_layers();
    let mut delta = out_grad.to_vec();
    for l in (0..nl).rev() {
        let layer = &model.layers()[l];
        let input: &[f64] = if l == 0 { x } else { &trace.post[l - 1] };
        {
            let g = &mut acc.layers[l];
            for r in 0..layer.out_dim() {
                let dr = delta[r];
                if dr != 0.0 {
                    linalg::axpy(dr, input, g.weights.row_mut(r));
                    g.bias[r] += dr;
                }
            }
        }
        if l > 0 {
            let mut prev = layer.weights.t_matvec(&delta);
            if model.layers()[l - 1].relu {
                for (p, z) in prev.iter_mut().zip(&trace.pre[l - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
    }
}

/// Exact reverse-mode gradient of the batch-mean loss `(1/B) Σ_j L_j`.
///
/// Samples are accumulated in batch order; results are deterministic for a
/// given model/batch pair.
pub fn batch_gradient(model: &DenseModel, batch: &Batch, loss: LossKind) -> Result<GradientReport> {
    batch.check_against(model)?;
    let mut acc = GradientReport::zeros_like(model);
    for j in 0..batch.len() {
        let x = batch.sample(j);
        let trace = forward(model, x)?;
        for (l, z) in trace.pre.iter().enumerate() {
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: l, context: "forward pass" });
            }
        }
        let og = loss.output_grad(trace.output(), &batch.target(j));
        backprop_into(model, &trace, x, &og, &mut acc);
    }
    acc.scale_in_place(1.0 / batch.len() as f64);
    if !acc.layers.iter().all(|l| {
        l.weights.data().iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
    }) {
        return Err(Error::NonFinite { layer: 0, context: "gradient accumulation" });
    }
    Ok(acc)
}

/// Interval bounds on every unit of a layer's pre-activation, given bounds on
/// its input.
fn layer_interval(layer: &Layer, lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = layer.out_dim();
    let mut zlo = layer.bias.clone();
    let mut zhi = layer.bias.clone();
    for r in 0..n {
        let row = layer.weights.row(r);
        for c in 0..row.len() {
            let (p, q) = (row[c] * lo[c], row[c] * hi[c]);
            zlo[r] += p.min(q);
            zhi[r] += p.max(q);
        }
    }
    (zlo, zhi)
}

/// Path gains `g_i = ∂z_out/∂z_i` from attack-layer pre-activations to the
/// scalar output, valid for every input in `feature_box`.
///
/// The downstream gating pattern must be input-independent: every
/// pre-activation after the attack layer has to stay strictly on one side of
/// zero over the whole box (verified by interval arithmetic; the check is
/// conservative). Gains are the chain product of downstream weights restricted
/// to the always-on gates.
pub fn path_gain(model: &DenseModel, feature_box: &FeatureBox) -> Result<Vec<f64>> {
    if model.output_dim() != 1 {
        return Err(Error::Shape("path_gain needs a scalar-output model".into()));
    }
    if feature_box.dim() != model.input_dim() {
        return Err(Error::Shape("feature box dimension".into()));
    }
    let layers = model.layers();
    let nl = layers.len();

    // Propagate the box through the attack layer.
    let (lo0, hi0): (Vec<f64>, Vec<f64>) = {
        let mut lo = Vec::with_capacity(feature_box.dim());
        let mut hi = Vec::with_capacity(feature_box.dim());
        for &(a, b) in &feature_box.0 {
            lo.push(a);
            hi.push(b);
        }
        (lo, hi)
    };
    let (z1lo, z1hi) = layer_interval(&layers[0], &lo0, &hi0);
    let mut alo: Vec<f64> = z1lo.iter().map(|v| v.max(0.0)).collect();
    let mut ahi: Vec<f64> = z1hi.iter().map(|v| v.max(0.0)).collect();

    // Fixed gate per downstream ReLU layer: 1 = always on, 0 = always off.
    let mut gates: Vec<Vec<f64>> = Vec::with_capacity(nl.saturating_sub(2));
    for (l, layer) in layers.iter().enumerate().skip(1) {
        let (zlo, zhi) = layer_interval(layer, &alo, &ahi);
        if layer.relu {
            let mut gate = Vec::with_capacity(layer.out_dim());
            for r in 0..layer.out_dim() {
                if zlo[r] > 0.0 {
                    gate.push(1.0);
                } else if zhi[r] < 0.0 {
                    gate.push(0.0);
                } else {
                    return Err(Error::GatingNotFixed(l));
                }
            }
            alo = zlo.iter().zip(&gate).map(|(v, g)| v.max(0.0) * g).collect();
            ahi = zhi.iter().zip(&gate).map(|(v, g)| v.max(0.0) * g).collect();
            gates.push(gate);
        } else {
            alo = zlo;
            ahi = zhi;
        }
    }

    // Chain product back from the output row.
    let mut v: Vec<f64> = layers[nl - 1].weights.row(0).to_vec();
    for l in (1..nl - 1).rev() {
        let gate = &gates[l - 1];
        let gated: Vec<f64> = v.iter().zip(gate).map(|(x, g)| x * g).collect();
        v = layers[l].weights.t_matvec(&gated);
    }
    for (i, g) in v.iter().enumerate() {
        if g.abs() < 1e-300 {
            return Err(Error::DegenerateGain(i));
        }
    }
    Ok(v)
}
