//! Largest singular values of matrix-free linear maps.
//!
//! Golub–Kahan–Lanczos bidiagonalization with full reorthogonalization and
//! explicit restarts from the current Ritz vector. Convergence is certified
//! by the true residual `‖Aᵀu − s·v‖` of the returned singular triplet.

use std::io::{self, Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub trait LinearMap: Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `y = A x`
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// `y = Aᵀ x`
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormResult {
    pub value: f64,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    /// Relative tolerance on the Ritz residual estimate.
    pub tolerance: f64,
    /// Relative bound the explicit residual must meet to certify.
    pub certificate: f64,
    /// Cap on products with `A` or `Aᵀ`.
    pub max_products: usize,
    pub krylov_dim: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            certificate: 1e-10,
            max_products: 100_000,
            krylov_dim: 100,
            seed: 0x5eed,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: &mut [f64], c: f64) {
    a.iter_mut().for_each(|x| *x *= c);
}

/// Two passes of classical Gram–Schmidt against an orthonormal basis.
fn reorthogonalize(x: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = dot(x, b);
            x.iter_mut().zip(b).for_each(|(xi, bi)| *xi -= c * bi);
        }
    }
}

/// Certified residual of the unit vector `v`: returns `(s, ‖Aᵀu − s v‖)`
/// with `u = Av/s`.
fn explicit_residual(op: &dyn LinearMap, v: &[f64]) -> (f64, f64) {
    let mut u = vec![0.0; op.rows()];
    op.apply(v, &mut u);
    let s = norm2(&u);
    if s == 0.0 {
        return (0.0, 0.0);
    }
    scale(&mut u, 1.0 / s);
    let mut r = vec![0.0; op.cols()];
    op.apply_transpose(&u, &mut r);
    r.iter_mut().zip(v).for_each(|(ri, vi)| *ri -= s * vi);
    (s, norm2(&r))
}

pub fn largest_singular_value(op: &dyn LinearMap, opts: &SolverOptions) -> Result<NormResult> {
    let (m, n) = (op.rows(), op.cols());
    if m == 0 || n == 0 {
        return Ok(NormResult { value: 0.0, iterations: 0, residual: 0.0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut start: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let s0 = norm2(&start);
    scale(&mut start, 1.0 / s0);

    let kmax = opts.krylov_dim.min(n).min(m).max(1);
    let mut products = 0usize;
    let mut last = (0.0, f64::INFINITY);

    while products < opts.max_products {
        let mut vs: Vec<Vec<f64>> = vec![start.clone()];
        let mut us: Vec<Vec<f64>> = Vec::with_capacity(kmax);
        let mut alphas: Vec<f64> = Vec::with_capacity(kmax);
        let mut betas: Vec<f64> = Vec::with_capacity(kmax);
        let mut ritz: Option<Vec<f64>> = None;

        for j in 0..kmax {
            let mut u = vec![0.0; m];
            op.apply(&vs[j], &mut u);
            if j > 0 {
                let b = betas[j - 1];
                u.iter_mut().zip(&us[j - 1]).for_each(|(x, p)| *x -= b * p);
            }
            reorthogonalize(&mut u, &us);
            let alpha = norm2(&u);
            products += 1;
            let scale_ref = alphas.iter().chain(&betas).fold(alpha, |a, &b| a.max(b));
            if alpha <= 1e-14 * scale_ref || alpha == 0.0 {
                // A maps the new direction into the span already found.
                if j == 0 {
                    return Ok(NormResult { value: 0.0, iterations: products, residual: 0.0 });
                }
                // Exact: A V_{j+1} = U_j [B_j | β_j e_j].
                ritz = Some(ritz_vector(&vs[..=j], &alphas, &betas[..j]));
                break;
            }
            scale(&mut u, 1.0 / alpha);
            us.push(u);
            alphas.push(alpha);

            let mut v = vec![0.0; n];
            op.apply_transpose(&us[j], &mut v);
            v.iter_mut().zip(&vs[j]).for_each(|(x, p)| *x -= alpha * p);
            reorthogonalize(&mut v, &vs);
            let beta = norm2(&v);
            products += 1;

            let k = j + 1;
            let (s, y, x_last) = top_triplet(&alphas, &betas, k);
            let estimate = (beta * x_last).abs();
            let done = estimate <= opts.tolerance * s
                || beta <= 1e-14 * s
                || k == kmax
                || products >= opts.max_products;
            if done {
                ritz = Some(combine(&vs[..k], &y));
                break;
            }
            betas.push(beta);
            scale(&mut v, 1.0 / beta);
            vs.push(v);
        }

        let mut v = ritz.expect("loop always yields a Ritz vector");
        let nv = norm2(&v);
        scale(&mut v, 1.0 / nv);
        let (s, res) = explicit_residual(op, &v);
        products += 2;
        last = (s, res);
        if s == 0.0 {
            return Ok(NormResult { value: 0.0, iterations: products, residual: 0.0 });
        }
        if res <= opts.certificate * s {
            return Ok(NormResult { value: s, iterations: products, residual: res });
        }
        start = v;
    }
    Err(LabError::NonConvergence {
        iterations: products,
        residual: last.1,
        value: last.0,
    })
}

/// Largest singular triplet of the `alphas.len() x cols` upper bidiagonal
/// matrix with diagonal `alphas` and superdiagonal `betas`. Returns
/// `(s, right vector, last entry of left vector)`.
fn top_triplet(alphas: &[f64], betas: &[f64], cols: usize) -> (f64, Vec<f64>, f64) {
    let k = alphas.len();
    let mut b = DMatrix::<f64>::zeros(k, cols);
    for i in 0..k {
        b[(i, i)] = alphas[i];
        if i + 1 < cols {
            b[(i, i + 1)] = betas[i];
        }
    }
    let svd = b.svd(true, true);
    let (idx, &s) = svd
        .singular_values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let u = svd.u.as_ref().expect("requested");
    let vt = svd.v_t.as_ref().expect("requested");
    let y: Vec<f64> = (0..cols).map(|i| vt[(idx, i)]).collect();
    (s, y, u[(k - 1, idx)])
}

fn ritz_vector(vs: &[Vec<f64>], alphas: &[f64], betas: &[f64]) -> Vec<f64> {
    let (_, y, _) = top_triplet(alphas, betas, vs.len());
    combine(vs, &y)
}

fn combine(vs: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for (v, &c) in vs.iter().zip(y) {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += c * x);
    }
    out
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::InvalidParameter(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.apply(x, &mut y);
        y
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn rank(&self, tol: f64) -> usize {
        self.to_nalgebra().rank(tol)
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    /// Largest singular value by a full dense SVD.
    pub fn dense_norm(&self) -> f64 {
        self.to_nalgebra()
            .singular_values()
            .iter()
            .fold(0.0f64, |a, &b| a.max(b))
    }

    /// Binary export: `rows` and `cols` as little-endian `u32`, then the
    /// entries row-major as little-endian `f64`.
    pub fn write_binary(&self, mut out: impl Write) -> io::Result<()> {
        out.write_all(&(self.rows as u32).to_le_bytes())?;
        out.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut input: impl Read) -> io::Result<Self> {
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let rows = u32::from_le_bytes(word) as usize;
        input.read_exact(&mut word)?;
        let cols = u32::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Ok(Self { rows, cols, data })
    }
}

impl LinearMap for DenseMatrix {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = dot(self.row(i), x);
        }
    }

    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                y.iter_mut().zip(self.row(i)).for_each(|(yj, a)| *yj += xi * a);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_row_major(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn matches_dense_svd() {
        for seed in 0..10 {
            let a = random_matrix(40 + seed as usize, 37, seed);
            let r = largest_singular_value(&a, &SolverOptions::default()).unwrap();
            let exact = a.dense_norm();
            assert!((r.value - exact).abs() <= 1e-12 * exact, "{} vs {}", r.value, exact);
            assert!(r.residual <= 1e-10 * r.value);
        }
    }

    #[test]
    fn handles_clustered_and_degenerate_spectra() {
        // Orthogonal projection: every nonzero singular value is one.
        let n = 64;
        let mut p = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                p.add_to(i, j, if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64);
            }
        }
        let r = largest_singular_value(&p, &SolverOptions::default()).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);

        let z = DenseMatrix::zeros(5, 7);
        assert_eq!(largest_singular_value(&z, &SolverOptions::default()).unwrap().value, 0.0);

        let mut rank_one = DenseMatrix::zeros(6, 6);
        rank_one.add_to(2, 4, 3.0);
        let r = largest_singular_value(&rank_one, &SolverOptions::default()).unwrap();
        assert!((r.value - 3.0).abs() < 1e-14);
    }

    #[test]
    fn small_krylov_space_restarts() {
        let a = random_matrix(50, 50, 99);
        let opts = SolverOptions { krylov_dim: 6, ..SolverOptions::default() };
        let r = largest_singular_value(&a, &opts).unwrap();
        assert!((r.value - a.dense_norm()).abs() < 1e-10 * r.value);
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let a = random_matrix(60, 60, 5);
        let opts = SolverOptions { krylov_dim: 2, max_products: 6, ..SolverOptions::default() };
        assert!(matches!(
            largest_singular_value(&a, &opts),
            Err(LabError::NonConvergence { .. })
        ));
    }

    #[test]
    fn binary_roundtrip() {
        let a = random_matrix(3, 5, 1);
        let mut buf = Vec::new();
        a.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 15 * 8);
        assert_eq!(&buf[..4], &3u32.to_le_bytes());
        assert_eq!(DenseMatrix::read_binary(buf.as_slice()).unwrap(), a);
    }
}
