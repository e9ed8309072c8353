//! Fixed-size 2-D vector and matrix helpers.

use std::f64::consts::PI;

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn mat_vec(m: &Mat2, v: Vec2) -> Vec2 {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

#[inline]
pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

#[inline]
pub fn mat_add(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [a[0][0] + b[0][0], a[0][1] + b[0][1]],
        [a[1][0] + b[1][0], a[1][1] + b[1][1]],
    ]
}

#[inline]
pub fn mat_scale(a: &Mat2, s: f64) -> Mat2 {
    [[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]]
}

#[inline]
pub fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

#[inline]
pub fn trace(m: &Mat2) -> f64 {
    m[0][0] + m[1][1]
}

#[inline]
pub fn inverse(m: &Mat2) -> Mat2 {
    let d = det(m);
    [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]
}

pub fn transpose(m: &Mat2) -> Mat2 {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue_sym(m: &Mat2) -> f64 {
    let half_tr = 0.5 * trace(m);
    let disc = (0.25 * (m[0][0] - m[1][1]).powi(2) + m[0][1] * m[1][0]).max(0.0);
    half_tr + disc.sqrt()
}

pub fn is_spd(m: &Mat2) -> bool {
    det(m) > 0.0 && trace(m) > 0.0 && (m[0][1] - m[1][0]).abs() <= 1e-12 * (1.0 + trace(m).abs())
}

/// Log density of a 2-D normal with precomputed inverse and determinant.
#[inline]
pub fn gaussian_log_pdf(x: Vec2, mean: Vec2, inv: &Mat2, det: f64) -> f64 {
    let d = sub(x, mean);
    -0.5 * dot(d, mat_vec(inv, d)) - (2.0 * PI).ln() - 0.5 * det.ln()
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax of `values` in place semantics, returning a new vector.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
