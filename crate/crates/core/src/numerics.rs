//! Dense vector and matrix primitives shared by the model, trainer and decoder.
//!
//! Everything here is `f64`. Summation inside matrix-vector products always runs
//! in ascending column order, so identical inputs give bit-identical outputs.
//!
//! Random initialization uses ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded through
//! `SeedableRng::seed_from_u64`; uniform doubles come from `Rng::gen::<f64>()` and
//! Gaussian samples are produced with the Box–Muller transform, consuming two
//! uniforms per pair of outputs.

use std::f64::consts::PI;
use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NumericDomain(format!(
            "{what}: entry {i} is {}",
            data[i]
        ))),
        None => Ok(()),
    }
}

/// A non-empty list of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        ensure!(!data.is_empty(), "vector must be non-empty");
        check_finite(&data, "vector")?;
        Ok(Vector(data))
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        ensure!(index < len, "one-hot index {index} out of range for length {len}");
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Ok(Vector(v))
    }

    /// Wraps data produced by crate-internal arithmetic on finite inputs.
    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Vector(data)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(rows > 0 && cols > 0, "matrix dims must be positive, got {rows}x{cols}");
        ensure!(
            data.len() == rows * cols,
            "matrix data length {} does not match {rows}x{cols}",
            data.len()
        );
        check_finite(&data, "matrix")?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vector {
        Vector::from_raw((0..self.rows).map(|r| self.get(r, c)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `W x` without bias, summing each row in ascending column order.
    pub(crate) fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let mut acc = 0.0;
                for (w, v) in self.row(r).iter().zip(x) {
                    acc += w * v;
                }
                acc
            })
            .collect()
    }

    /// Accumulates `Wᵀ y` into `out`.
    pub(crate) fn add_matvec_transposed(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
    }

    /// Accumulates the outer product `a bᵀ` into `self`.
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        let cols = self.cols;
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            for (w, bc) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *w += ar * bc;
            }
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Nonlinearities used for the gates (`Sigmoid`, `Tanh`) and for the
/// guidance transfer function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    Identity,
    Sigmoid,
    Tanh,
    #[serde(rename = "relu")]
    ReLU,
    Softmax,
}

impl TransferKind {
    pub const ALL: [TransferKind; 5] = [
        TransferKind::Identity,
        TransferKind::Sigmoid,
        TransferKind::Tanh,
        TransferKind::ReLU,
        TransferKind::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransferKind::Identity => "identity",
            TransferKind::Sigmoid => "sigmoid",
            TransferKind::Tanh => "tanh",
            TransferKind::ReLU => "relu",
            TransferKind::Softmax => "softmax",
        }
    }

    /// Applies the function to finite input; no validation.
    pub(crate) fn apply_slice(self, v: &[f64]) -> Vec<f64> {
        match self {
            TransferKind::Identity => v.to_vec(),
            TransferKind::Sigmoid => v.iter().map(|&x| sigmoid(x)).collect(),
            TransferKind::Tanh => v.iter().map(|x| x.tanh()).collect(),
            TransferKind::ReLU => v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
            TransferKind::Softmax => softmax(v),
        }
    }

    /// Vector-Jacobian product: given the input, the output, and the gradient with
    /// respect to the output, returns the gradient with respect to the input.
    pub(crate) fn backward(self, input: &[f64], output: &[f64], upstream: &[f64]) -> Vec<f64> {
        match self {
            TransferKind::Identity => upstream.to_vec(),
            TransferKind::Sigmoid => upstream
                .iter()
                .zip(output)
                .map(|(u, y)| u * y * (1.0 - y))
                .collect(),
            TransferKind::Tanh => upstream
                .iter()
                .zip(output)
                .map(|(u, y)| u * (1.0 - y * y))
                .collect(),
            TransferKind::ReLU => upstream
                .iter()
                .zip(input)
                .map(|(&u, &x)| if x > 0.0 { u } else { 0.0 })
                .collect(),
            TransferKind::Softmax => {
                let dot: f64 = upstream.iter().zip(output).map(|(u, y)| u * y).sum();
                upstream
                    .iter()
                    .zip(output)
                    .map(|(u, y)| y * (u - dot))
                    .collect()
            }
        }
    }
}

impl std::str::FromStr for TransferKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransferKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown transfer function {s:?}")))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    let log_z = max + sum.ln();
    v.iter().map(|x| x - log_z).collect()
}

pub fn transfer_apply(kind: TransferKind, v: &Vector) -> Result<Vector> {
    ensure!(!v.is_empty(), "transfer input must be non-empty");
    check_finite(v, "transfer input")?;
    Ok(Vector::from_raw(kind.apply_slice(v)))
}

/// `W x + b`.
pub fn affine(w: &Matrix, x: &Vector, b: &Vector) -> Result<Vector> {
    ensure!(
        w.cols() == x.len(),
        "affine: matrix has {} cols but input has length {}",
        w.cols(),
        x.len()
    );
    ensure!(
        w.rows() == b.len(),
        "affine: matrix has {} rows but bias has length {}",
        w.rows(),
        b.len()
    );
    let mut y = w.matvec(x);
    for (yi, bi) in y.iter_mut().zip(b.iter()) {
        *yi += bi;
    }
    check_finite(&y, "affine output")?;
    Ok(Vector::from_raw(y))
}

pub fn hadamard(a: &Vector, b: &Vector) -> Result<Vector> {
    ensure!(
        a.len() == b.len(),
        "hadamard: lengths {} and {} differ",
        a.len(),
        b.len()
    );
    let c: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
    check_finite(&c, "hadamard output")?;
    Ok(Vector::from_raw(c))
}

/// Seeded source of uniform and Gaussian samples.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal via Box–Muller.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, stddev: f64) -> f64 {
        mean + stddev * self.standard_normal()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn gaussian_init(rows: usize, cols: usize, mean: f64, stddev: f64, seed: u64) -> Result<Matrix> {
    ensure!(rows > 0 && cols > 0, "gaussian_init: dims must be positive");
    ensure!(
        stddev >= 0.0 && stddev.is_finite() && mean.is_finite(),
        "gaussian_init: need finite mean and stddev >= 0"
    );
    if stddev == 0.0 {
        return Ok(Matrix::filled(rows, cols, mean));
    }
    let mut rng = SeededRng::new(seed);
    Ok(Matrix::from_fn(rows, cols, |_, _| rng.normal(mean, stddev)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(data: &[f64]) -> Vector {
        Vector::new(data.to_vec()).unwrap()
    }

    #[test]
    fn transfer_examples() {
        assert_eq!(transfer_apply(TransferKind::Sigmoid, &v(&[0.0])).unwrap().as_slice(), &[0.5]);
        assert_eq!(transfer_apply(TransferKind::Tanh, &v(&[0.0, 0.0])).unwrap().as_slice(), &[0.0, 0.0]);
        assert_eq!(
            transfer_apply(TransferKind::Softmax, &v(&[0.0; 4])).unwrap().as_slice(),
            &[0.25; 4]
        );
        // 1 / (1 + e^-1) evaluated to 20 digits: 0.73105857863000487925
        let s = transfer_apply(TransferKind::Sigmoid, &v(&[1.0])).unwrap();
        assert!((s[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn transfer_rejects_bad_input() {
        let empty = Vector(vec![]);
        assert!(matches!(
            transfer_apply(TransferKind::Tanh, &empty),
            Err(Error::InvalidArgument(_))
        ));
        let nan = Vector(vec![1.0, f64::NAN]);
        assert!(matches!(
            transfer_apply(TransferKind::Tanh, &nan),
            Err(Error::NumericDomain(_))
        ));
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn affine_examples() {
        let x = v(&[1.0, 2.0, 3.0]);
        assert_eq!(affine(&Matrix::identity(3), &x, &Vector::zeros(3)).unwrap(), x);

        let y = affine(&Matrix::zeros(2, 7), &Vector::zeros(7), &v(&[4.0, 5.0])).unwrap();
        assert_eq!(y.as_slice(), &[4.0, 5.0]);

        let w = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = affine(&w, &v(&[1.0, 1.0]), &Vector::zeros(2)).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 7.0]);

        assert!(affine(&w, &v(&[1.0]), &Vector::zeros(2)).is_err());
        assert!(affine(&w, &v(&[1.0, 1.0]), &Vector::zeros(3)).is_err());
    }

    #[test]
    fn hadamard_examples() {
        let xyz = v(&[0.3, -2.0, 7.5]);
        assert_eq!(hadamard(&v(&[1.0; 3]), &xyz).unwrap(), xyz);
        assert_eq!(hadamard(&v(&[0.0, 0.0]), &v(&[9.0, -1.0])).unwrap().as_slice(), &[0.0, 0.0]);
        assert_eq!(hadamard(&v(&[2.0, 3.0]), &v(&[4.0, 5.0])).unwrap().as_slice(), &[8.0, 15.0]);
        assert!(hadamard(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn gaussian_init_examples() {
        assert_eq!(gaussian_init(2, 2, 1.0, 0.0, 99).unwrap(), Matrix::filled(2, 2, 1.0));
        assert_eq!(
            gaussian_init(3, 3, 0.0, 0.01, 7).unwrap(),
            gaussian_init(3, 3, 0.0, 0.01, 7).unwrap()
        );
        assert_ne!(
            gaussian_init(3, 3, 0.0, 0.01, 7).unwrap(),
            gaussian_init(3, 3, 0.0, 0.01, 8).unwrap()
        );

        let m = gaussian_init(1000, 10, 0.0, 0.01, 1).unwrap();
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.002, "mean {mean}");
        assert!((var.sqrt() - 0.01).abs() < 0.002, "stddev {}", var.sqrt());

        assert!(gaussian_init(2, 2, 0.0, -1.0, 0).is_err());
    }

    #[test]
    fn identity_transfer_is_bit_exact() {
        let x = v(&[1e-300, -3.5, 7.0e12, 0.1]);
        let y = transfer_apply(TransferKind::Identity, &x).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn transfer_backward_matches_finite_differences() {
        let x = [0.3, -1.2, 0.8, 2.0];
        let up = [0.7, -0.4, 1.1, 0.25];
        for kind in TransferKind::ALL {
            let y = kind.apply_slice(&x);
            let analytic = kind.backward(&x, &y, &up);
            for i in 0..x.len() {
                let eps = 1e-6;
                let mut xp = x;
                xp[i] += eps;
                let mut xm = x;
                xm[i] -= eps;
                let fp: f64 = kind.apply_slice(&xp).iter().zip(&up).map(|(a, b)| a * b).sum();
                let fm: f64 = kind.apply_slice(&xm).iter().zip(&up).map(|(a, b)| a * b).sum();
                let numeric = (fp - fm) / (2.0 * eps);
                assert!((numeric - analytic[i]).abs() < 1e-8, "{kind:?} coord {i}");
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            xs in prop::collection::vec(-1e3f64..1e3, 1..16),
            shift in -1e3f64..1e3,
        ) {
            let p = transfer_apply(TransferKind::Softmax, &v(&xs)).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            let q = transfer_apply(TransferKind::Softmax, &v(&shifted)).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        // f64 tanh rounds to ±1 past about 19.
        fn elementwise_ranges(xs in prop::collection::vec(-15f64..15.0, 1..16)) {
            let x = v(&xs);
            let s = transfer_apply(TransferKind::Sigmoid, &x).unwrap();
            prop_assert!(s.iter().all(|&y| y > 0.0 && y < 1.0));
            let t = transfer_apply(TransferKind::Tanh, &x).unwrap();
            prop_assert!(t.iter().all(|&y| y > -1.0 && y < 1.0));
            let r = transfer_apply(TransferKind::ReLU, &x).unwrap();
            prop_assert!(r.iter().all(|&y| y >= 0.0));
        }

        #[test]
        fn affine_is_linear(
            seed in any::<u64>(),
            alpha in -3f64..3.0,
            beta in -3f64..3.0,
        ) {
            let w = gaussian_init(5, 4, 0.0, 1.0, seed).unwrap();
            let x = gaussian_init(4, 1, 0.0, 1.0, seed ^ 1).unwrap();
            let y = gaussian_init(4, 1, 0.0, 1.0, seed ^ 2).unwrap();
            let x = v(x.as_slice());
            let y = v(y.as_slice());
            let combo = v(&x.iter().zip(y.iter()).map(|(a, b)| alpha * a + beta * b).collect::<Vec<_>>());
            let zero = Vector::zeros(5);
            let lhs = affine(&w, &combo, &zero).unwrap();
            let ax = affine(&w, &x, &zero).unwrap();
            let ay = affine(&w, &y, &zero).unwrap();
            for i in 0..5 {
                let rhs = alpha * ax[i] + beta * ay[i];
                let scale = lhs[i].abs().max(rhs.abs()).max(1.0);
                prop_assert!((lhs[i] - rhs).abs() / scale < 1e-10);
            }
        }
    }
}
