//! Dense row-major helpers for the small `d × d` blocks carried inside
//! augmented states. Dimensions are tiny (d ≤ 3 in practice), so plain loops
//! beat any BLAS call and keep the Euler step allocation-free.

use nalgebra::{DMatrix, SymmetricEigen};

/// `out = a · b` for `n × n` row-major matrices.
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], n: usize) {
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a[i * n + k] * b[k * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out = a · v` for an `n × n` matrix and an `n`-vector.
pub fn matvec(a: &[f64], v: &[f64], out: &mut [f64], n: usize) {
    for i in 0..n {
        let mut acc = 0.0;
        for k in 0..n {
            acc += a[i * n + k] * v[k];
        }
        out[i] = acc;
    }
}

/// Row vector times matrix: `out = v^T · a`.
pub fn vecmat(v: &[f64], a: &[f64], out: &mut [f64], n: usize) {
    for j in 0..n {
        let mut acc = 0.0;
        for k in 0..n {
            acc += v[k] * a[k * n + j];
        }
        out[j] = acc;
    }
}

pub fn set_identity(out: &mut [f64], n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    set_identity(&mut m, n);
    m
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Frobenius norm; coincides with the absolute value for `1 × 1` blocks.
pub fn frobenius(a: &[f64]) -> f64 {
    norm(a)
}

/// Frobenius distance of `a` from the identity.
pub fn distance_from_identity(a: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let e = a[i * n + j] - if i == j { 1.0 } else { 0.0 };
            acc += e * e;
        }
    }
    acc.sqrt()
}

/// Eigenvalues (ascending) of the symmetric part of an `n × n` row-major matrix.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a[0]];
    }
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[i * n + j] + a[j * n + i]));
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Inverse of a symmetric matrix, or `None` when its smallest eigenvalue is not
/// safely positive relative to the largest.
pub fn symmetric_inverse(a: &[f64], n: usize, rel_floor: f64) -> Option<Vec<f64>> {
    if n == 1 {
        let v = a[0];
        return (v > rel_floor * v.abs().max(1.0)).then(|| vec![1.0 / v]);
    }
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[i * n + j] + a[j * n + i]));
    let eig = SymmetricEigen::new(m);
    let max = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > rel_floor * max.max(1.0)) {
        return None;
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = inv[(i, j)];
        }
    }
    Some(out)
}
