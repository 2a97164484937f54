//! Exact input recovery from certified singleton slices, and target recovery
//! by inverting the output-loss derivative.

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{forward, softmax, LossKind, TargetValue};

use super::{RoundContext, SliceRecord, BETA_FLOOR};

/// `x̂ = s / β` for a certified singleton slice.
pub fn reconstruct_input(slice: &SliceRecord) -> Result<Vec<f64>> {
    if slice.beta.abs() <= BETA_FLOOR {
        return Err(Error::DegenerateCoefficient(slice.beta));
    }
    let x = linalg::scale(&slice.s, 1.0 / slice.beta);
    debug_assert!(
        x.iter()
            .zip(&slice.s)
            .all(|(xi, si)| (xi * slice.beta - si).abs() < 1e-12 * si.abs().max(1.0)),
        "division must reproduce the slice vector"
    );
    Ok(x)
}

/// The scalar pseudo-residual `∂L/∂z` (or its class projection) the crafted
/// model of `ctx` produces on `(x, y)`.
pub fn virtual_coefficient(ctx: &RoundContext, x: &[f64], y: &TargetValue, loss: LossKind, batch_size: usize) -> Result<f64> {
    let trace = forward(&ctx.model, x)?;
    let z = trace.output();
    let raw = match (loss, y) {
        (LossKind::SquaredError, TargetValue::Scalar(t)) => 2.0 * (z[0] - t),
        (LossKind::CrossEntropy, TargetValue::Class(k)) => {
            let c = ctx
                .head_projection
                .as_ref()
                .ok_or_else(|| Error::Config("classification context without head projection".into()))?;
            let p = softmax(z);
            linalg::dot(c, &p) - c[*k]
        }
        _ => return Err(Error::Config("loss/target mismatch".into())),
    };
    Ok(raw / batch_size as f64)
}

/// Recovers the target of a certified sample.
///
/// Squared loss inverts `∂L/∂z = 2(z − y)` in closed form:
/// `ŷ = z(x̂) − B·β/2`. Classification evaluates the virtual coefficient for
/// every candidate class and returns the one closest to `β`.
pub fn recover_target(
    x_hat: &[f64],
    beta: f64,
    ctx: &RoundContext,
    loss: LossKind,
    batch_size: usize,
) -> Result<TargetValue> {
    match loss {
        LossKind::SquaredError => {
            let z = forward(&ctx.model, x_hat)?.output()[0];
            Ok(TargetValue::Scalar(z - batch_size as f64 * beta / 2.0))
        }
        LossKind::CrossEntropy => {
            let classes = ctx.model.output_dim();
            let mut best = (f64::INFINITY, 0usize);
            for k in 0..classes {
                let v = virtual_coefficient(ctx, x_hat, &TargetValue::Class(k), loss, batch_size)?;
                let err = (v - beta) * (v - beta);
                if err < best.0 {
                    best = (err, k);
                }
            }
            Ok(TargetValue::Class(best.1))
        }
    }
}

/// Target recovery for any loss whose output derivative is monotone in the
/// target: bisects `(1/B)·∂L/∂z(z(x̂), y) = β` over `[lo, hi]`.
pub fn recover_target_bisect(
    x_hat: &[f64],
    beta: f64,
    ctx: &RoundContext,
    loss: LossKind,
    batch_size: usize,
    range: (f64, f64),
) -> Result<f64> {
    let (mut lo, mut hi) = range;
    if lo >= hi {
        return Err(Error::TargetRange { lo, hi });
    }
    let eval = |y: f64| -> Result<f64> {
        Ok(virtual_coefficient(ctx, x_hat, &TargetValue::Scalar(y), loss, batch_size)? - beta)
    };
    let mut flo = eval(lo)?;
    let fhi = eval(hi)?;
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::TargetRange { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fmid = eval(mid)?;
        if fmid == 0.0 {
            return Ok(mid);
        }
        if fmid.signum() == flo.signum() {
            lo = mid;
            flo = fmid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= f64::EPSILON * lo.abs().max(hi.abs()).max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
