// Copyright 2026 The qtwin Authors
// SPDX-License-Identifier: Apache-2.0

//! Small dense complex matrix helpers.

use ndarray::Array2;
use num_complex::Complex64;

pub type CMatrix = Array2<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn identity(d: usize) -> CMatrix {
    Array2::from_shape_fn((d, d), |(i, j)| if i == j { ONE } else { ZERO })
}

pub fn from_rows<const N: usize>(rows: [[Complex64; N]; N]) -> CMatrix {
    Array2::from_shape_fn((N, N), |(i, j)| rows[i][j])
}

pub fn dagger(m: &CMatrix) -> CMatrix {
    m.t().mapv(|z| z.conj())
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| a[[i / br, j / bc]] * b[[i % br, j % bc]])
}

/// Entrywise maximum of `|a - b|`.
pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Single-qubit Paulis in the order I, X, Y, Z.
pub fn paulis() -> [CMatrix; 4] {
    [
        identity(2),
        from_rows([[ZERO, ONE], [ONE, ZERO]]),
        from_rows([[ZERO, c(0.0, -1.0)], [c(0.0, 1.0), ZERO]]),
        from_rows([[ONE, ZERO], [ZERO, -ONE]]),
    ]
}

/// Smallest eigenvalue of a Hermitian matrix (the Hermitian part of `m`).
pub fn min_eigenvalue(m: &CMatrix) -> f64 {
    let d = m.nrows();
    let herm = nalgebra::DMatrix::from_fn(d, d, |i, j| (m[[i, j]] + m[[j, i]].conj()) * 0.5);
    herm.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
