//! Independent straightforward evaluators used as oracles by the acceptance
//! suite. Everything here is written in plain textbook loops against the
//! public model types, deliberately not sharing any code with the library's
//! gradient engine.

use gia_core::linalg::Mat;
use gia_core::nn::{Batch, DenseModel, LossKind, TargetValue};

/// Plain nested-loop forward pass; returns every post-activation.
pub fn naive_forward(model: &DenseModel, x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts: Vec<Vec<f64>> = Vec::new();
    let mut cur: Vec<f64> = x.to_vec();
    for layer in model.layers() {
        let mut next = vec![0.0; layer.out_dim()];
        for r in 0..layer.out_dim() {
            let mut s = layer.bias[r];
            for c in 0..layer.in_dim() {
                s += layer.weights.get(r, c) * cur[c];
            }
            next[r] = if layer.relu && s < 0.0 { 0.0 } else { s };
        }
        acts.push(next.clone());
        cur = next;
    }
    acts
}

pub fn naive_loss(model: &DenseModel, x: &[f64], y: &TargetValue, loss: LossKind) -> f64 {
    let out = naive_forward(model, x).pop().unwrap();
    match (loss, y) {
        (LossKind::SquaredError, TargetValue::Scalar(t)) => {
            let r = out[0] - t;
            r * r
        }
        (LossKind::CrossEntropy, TargetValue::Class(k)) => {
            let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + out.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - out[*k]
        }
        _ => panic!("loss/target mismatch"),
    }
}

/// Mean loss over the batch.
pub fn naive_batch_loss(model: &DenseModel, batch: &Batch, loss: LossKind) -> f64 {
    let mut total = 0.0;
    for j in 0..batch.len() {
        total += naive_loss(model, batch.sample(j), &batch.target(j), loss);
    }
    total / batch.len() as f64
}

/// Textbook per-sample backprop: returns (weight grads, bias grads) per layer.
pub fn naive_per_sample_grad(
    model: &DenseModel,
    x: &[f64],
    y: &TargetValue,
    loss: LossKind,
) -> Vec<(Mat, Vec<f64>)> {
    let nl = model.num_layers();
    // forward, keeping pre-activations
    let mut pres: Vec<Vec<f64>> = Vec::new();
    let mut posts: Vec<Vec<f64>> = Vec::new();
    let mut cur: Vec<f64> = x.to_vec();
    for layer in model.layers() {
        let mut pre = vec![0.0; layer.out_dim()];
        for r in 0..layer.out_dim() {
            let mut s = layer.bias[r];
            for c in 0..layer.in_dim() {
                s += layer.weights.get(r, c) * cur[c];
            }
            pre[r] = s;
        }
        let post: Vec<f64> =
            pre.iter().map(|&v| if layer.relu && v < 0.0 { 0.0 } else { v }).collect();
        pres.push(pre);
        posts.push(post.clone());
        cur = post;
    }

    let out = posts.last().unwrap();
    let mut delta: Vec<f64> = match (loss, y) {
        (LossKind::SquaredError, TargetValue::Scalar(t)) => vec![2.0 * (out[0] - t)],
        (LossKind::CrossEntropy, TargetValue::Class(k)) => {
            let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = out.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            let mut g: Vec<f64> = exps.iter().map(|e| e / s).collect();
            g[*k] -= 1.0;
            g
        }
        _ => panic!("loss/target mismatch"),
    };

    let mut grads: Vec<(Mat, Vec<f64>)> = model
        .layers()
        .iter()
        .map(|l| (Mat::zeros(l.out_dim(), l.in_dim()), vec![0.0; l.out_dim()]))
        .collect();
    for l in (0..nl).rev() {
        let layer = &model.layers()[l];
        let input: Vec<f64> = if l == 0 { x.to_vec() } else { posts[l - 1].clone() };
        for r in 0..layer.out_dim() {
            for c in 0..layer.in_dim() {
                let v = grads[l].0.get(r, c) + delta[r] * input[c];
                grads[l].0.set(r, c, v);
            }
            grads[l].1[r] += delta[r];
        }
        if l > 0 {
            let mut prev = vec![0.0; layer.in_dim()];
            for c in 0..layer.in_dim() {
                for r in 0..layer.out_dim() {
                    prev[c] += layer.weights.get(r, c) * delta[r];
                }
                if model.layers()[l - 1].relu && pres[l - 1][c] <= 0.0 {
                    prev[c] = 0.0;
                }
            }
            delta = prev;
        }
    }
    grads
}

/// Central finite differences of the batch-mean loss over every parameter.
pub fn fd_batch_gradient(
    model: &DenseModel,
    batch: &Batch,
    loss: LossKind,
    h: f64,
) -> Vec<(Mat, Vec<f64>)> {
    let mut out = Vec::new();
    for l in 0..model.num_layers() {
        let (rows, cols) = {
            let layer = &model.layers()[l];
            (layer.out_dim(), layer.in_dim())
        };
        let mut dw = Mat::zeros(rows, cols);
        let mut db = vec![0.0; rows];
        for r in 0..rows {
            for c in 0..cols {
                let base = model.layers()[l].weights.get(r, c);
                let mut up = model.clone();
                up.layers_mut()[l].weights.set(r, c, base + h);
                let mut dn = model.clone();
                dn.layers_mut()[l].weights.set(r, c, base - h);
                dw.set(
                    r,
                    c,
                    (naive_batch_loss(&up, batch, loss) - naive_batch_loss(&dn, batch, loss))
                        / (2.0 * h),
                );
            }
            let base = model.layers()[l].bias[r];
            let mut up = model.clone();
            up.layers_mut()[l].bias[r] = base + h;
            let mut dn = model.clone();
            dn.layers_mut()[l].bias[r] = base - h;
            db[r] = (naive_batch_loss(&up, batch, loss) - naive_batch_loss(&dn, batch, loss))
                / (2.0 * h);
        }
        out.push((dw, db));
    }
    out
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
