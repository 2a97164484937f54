//! Minimal dense linear algebra: row-major matrices, vector helpers, and the
//! Gram–Schmidt span-membership residual used by the isolation certificate.
//!
//! Everything here runs in plain loops with a fixed evaluation order; no
//! blocking or reassociation, so results are reproducible across runs.

use serde::{Deserialize, Serialize};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == m), "ragged rows");
        let mut data = Vec::with_capacity(n * m);
        for r in &rows {
            data.extend_from_slice(r);
        }
        Mat { rows: n, cols: m, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension");
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            out[r] = dot(self.row(r), x);
        }
        out
    }

    /// `self^T * y` for a column vector `y`.
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "t_matvec dimension");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let yr = y[r];
            let row = self.row(r);
            for c in 0..self.cols {
                out[c] += yr * row[c];
            }
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().map(|x| x * alpha).collect()
}

/// Endpoint-exact linear interpolation: `t = 0` gives `lo`, `t = 1` gives `hi`.
#[inline]
pub fn lerp(lo: f64, hi: f64, t: f64) -> f64 {
    lo * (1.0 - t) + hi * t
}

/// Outcome of projecting a vector onto the span of a set of vectors.
#[derive(Debug, Clone)]
pub struct SpanProjection {
    /// Relative orthogonal residual `‖v − proj(v)‖₂ / ‖v‖₂` (0 for v = 0).
    pub relative_residual: f64,
    /// Least-squares coefficients of `v` in the original (un-normalized)
    /// vectors, in input order. Near-dependent inputs get a 0 coefficient.
    pub coefficients: Vec<f64>,
}

/// Projects `v` onto `span(basis)` by modified Gram–Schmidt.
///
/// Vectors that are numerically dependent on earlier ones (projection leaves
/// less than `1e-12` of their norm) are dropped from the basis but keep a slot
/// in the coefficient vector.
pub fn project_onto_span(v: &[f64], basis: &[&[f64]]) -> SpanProjection {
    let d = v.len();
    let n = basis.len();

    // Orthonormalize, remembering the MGS expansion q_k in terms of inputs.
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    // expn[k][j]: coefficient of basis[j] in q[k]
    let mut expn: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (j, b) in basis.iter().enumerate() {
        assert_eq!(b.len(), d, "span basis dimension");
        let scale_b = norm2(b);
        if scale_b == 0.0 {
            continue;
        }
        let mut w = b.to_vec();
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        for (qi, ei) in q.iter().zip(&expn) {
            let c = dot(qi, &w);
            axpy(-c, qi, &mut w);
            for (ek, &eik) in e.iter_mut().zip(ei) {
                *ek -= c * eik;
            }
        }
        let r = norm2(&w);
        if r <= 1e-12 * scale_b {
            continue; // dependent on earlier vectors
        }
        let inv = 1.0 / r;
        for x in w.iter_mut() {
            *x *= inv;
        }
        for x in e.iter_mut() {
            *x *= inv;
        }
        q.push(w);
        expn.push(e);
    }

    let nv = norm2(v);
    let mut resid = v.to_vec();
    let mut coefficients = vec![0.0; n];
    for (qi, ei) in q.iter().zip(&expn) {
        let c = dot(qi, &resid);
        axpy(-c, qi, &mut resid);
        for (ck, &eik) in coefficients.iter_mut().zip(ei) {
            *ck += c * eik;
        }
    }
    let relative_residual = if nv == 0.0 { 0.0 } else { norm2(&resid) / nv };
    SpanProjection { relative_residual, coefficients }
}

/// Relative orthogonal residual of `v` against `span(basis)`.
pub fn span_residual(v: &[f64], basis: &[&[f64]]) -> f64 {
    project_onto_span(v, basis).relative_residual
}
