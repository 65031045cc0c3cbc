//! Dense `f64` numerics: row-major matrices, stable softmax and log-sum-exp,
//! L2 normalization and the seeded random stream shared by every module.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Config(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        ensure_finite(&data, "matrix entries")?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Config(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a 0-column matrix still has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · otherᵀ`, i.e. every row of `self` dotted with every row of `other`.
    pub fn matmul_transposed(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::Config(format!(
                "inner dimensions differ: {} vs {}",
                self.cols, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NumericInput(format!(
            "{what}: entry {i} is {}",
            values[i]
        ))),
        None => Ok(()),
    }
}

fn ensure_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::DegenerateInput("empty logit vector".into()));
    }
    ensure_finite(logits, "logits")
}

/// `log Σ exp(ℓ_j)` evaluated around the maximum logit.
pub fn log_sum_exp(logits: &[f64]) -> Result<f64> {
    ensure_logits(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Softmax evaluated with the max-shift, so it never overflows and is
/// invariant to adding a constant to every logit.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    ensure_logits(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    ensure_finite(v, "vector")?;
    let norm = l2_norm(v);
    if norm == 0.0 || v.is_empty() {
        return Err(Error::DegenerateInput(
            "cannot normalize a zero vector".into(),
        ));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Clamps a probability to at least [`PROB_FLOOR`].
#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.max(PROB_FLOOR)
}

/// Serializable snapshot of a [`SeededRng`] position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Deterministic random stream.
///
/// Recipe: `ChaCha8Rng::seed_from_u64(seed)`. Uniforms are `rng.random::<f64>()`
/// (53-bit, in `[0, 1)`), gaussians are `rand_distr::StandardNormal` draws,
/// shuffles are `SliceRandom::shuffle`. Identical seeds give identical streams.
#[derive(Debug, Clone, PartialEq)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[-1, 1)`, computed as `2u - 1`.
    pub fn symmetric(&mut self) -> f64 {
        2.0 * self.uniform() - 1.0
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Self { inner }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Naive `exp / Σexp` without the max-shift, with compensated summation.
    fn softmax_oracle(logits: &[f64]) -> Vec<f64> {
        let exps: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        let total = neumaier_sum(&exps);
        exps.iter().map(|e| e / total).collect()
    }

    fn neumaier_sum(values: &[f64]) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for &v in values {
            let t = sum + v;
            if sum.abs() >= v.abs() {
                comp += (sum - t) + v;
            } else {
                comp += (v - t) + sum;
            }
            sum = t;
        }
        sum + comp
    }

    fn random_vec(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = SeededRng::new(seed);
        (0..len).map(|_| 4.0 * rng.symmetric()).collect()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = stable_softmax(&[0.0; 4]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let l = random_vec(5, 7);
        let shifted: Vec<f64> = l.iter().map(|x| x + 7.3).collect();
        let a = stable_softmax(&l).unwrap();
        let b = stable_softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let l = random_vec(1, 6);
        let got = stable_softmax(&l).unwrap();
        let want = softmax_oracle(&l);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            stable_softmax(&[0.0, f64::NAN]),
            Err(Error::NumericInput(_))
        ));
        assert!(stable_softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn log_sum_exp_cases() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let l = random_vec(2, 8);
        let exps: Vec<f64> = l.iter().map(|x| x.exp()).collect();
        let want = neumaier_sum(&exps).ln();
        assert!((log_sum_exp(&l).unwrap() - want).abs() < 1e-12);
        assert!(log_sum_exp(&[-700.0, 700.0]).unwrap().is_finite());
    }

    #[test]
    fn normalize_cases() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let unit = [0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&unit).unwrap(), unit.to_vec());
        let r = random_vec(3, 5);
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in l2_normalize(&r).unwrap().iter().zip(&r) {
            assert!((a - b / n).abs() < 1e-15);
        }
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn softmax_sums_to_one_on_long_vectors() {
        let l = random_vec(11, 100_000);
        let p = stable_softmax(&l).unwrap();
        assert!((neumaier_sum(&p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rng_state_roundtrip_continues_stream() {
        let mut a = SeededRng::new(42);
        for _ in 0..13 {
            a.normal();
        }
        let mut b = SeededRng::from_state(a.state());
        for _ in 0..20 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn mat_shape_checks() {
        assert!(Mat::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Mat::new(1, 1, vec![f64::NAN]).is_err());
        let m = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let p = m.matmul_transposed(&Mat::identity(2)).unwrap();
        assert_eq!(p, m);
    }

    proptest! {
        #[test]
        fn softmax_sum_and_shift(
            logits in prop::collection::vec(-50.0f64..50.0, 1..64),
            shift in -300.0f64..300.0,
        ) {
            let p = stable_softmax(&logits).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let q = stable_softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..32)) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            prop_assert!((l2_norm(&once) - 1.0).abs() < 1e-12);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
