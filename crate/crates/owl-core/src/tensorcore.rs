//! Dense numeric kernel shared by every other module: row-major `f64`
//! matrices, numerically stable softmax, nearest-rank percentiles, layer
//! normalization, and a seeded, platform-stable PRNG.
//!
//! All floating-point storage repo-wide is `f64`. Public operations reject
//! non-finite values so downstream code never has to re-check for NaN/Inf.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors produced by the numeric kernel.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch: {a_rows}x{a_cols} * {b_rows}x{b_cols}")]
    DimMismatch {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("empty input to {op}")]
    EmptyInput { op: &'static str },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("percentile {p} outside [0, 100]")]
    PercentileOutOfRange { p: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Row-major dense matrix of `f64` values.
///
/// Invariants: `data.len() == rows * cols` and every entry is finite. Both
/// are checked at construction and after every public operation that
/// produces a new matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, validating shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(TensorError::EmptyInput { op: "from_rows" });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    rows: rows.len(),
                    cols,
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
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

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Standard matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(TensorError::DimMismatch {
            a_rows: a.rows,
            a_cols: a.cols,
            b_rows: b.rows,
            b_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    if !out.data.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op: "matmul" });
    }
    Ok(out)
}

/// `m * v` for a row-major `m` of shape (out, in).
pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if m.cols != v.len() {
        return Err(TensorError::DimMismatch {
            a_rows: m.rows,
            a_cols: m.cols,
            b_rows: v.len(),
            b_cols: 1,
        });
    }
    Ok((0..m.rows)
        .map(|r| dot(m.row(r), v))
        .collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Softmax / layer norm / percentile
// ---------------------------------------------------------------------------

/// Numerically stable softmax over one row.
///
/// Subtracts the row maximum before exponentiating, so arbitrarily large
/// finite inputs cannot overflow. The output sums to 1 and preserves the
/// input ordering; shifting every input by a constant leaves it unchanged.
pub fn softmax_row(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(TensorError::EmptyInput { op: "softmax_row" });
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(TensorError::NonFinite { op: "softmax_row" });
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// Nearest-rank percentile: sort ascending and return the element at index
/// `ceil(p/100 * n)`, clamped to `[1, n]` (1-based). Always returns a member
/// of `samples`; no interpolation.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(TensorError::EmptyInput { op: "percentile" });
    }
    if !(0.0..=100.0).contains(&p) || p.is_nan() {
        return Err(TensorError::PercentileOutOfRange { p });
    }
    if !samples.iter().all(|x| x.is_finite()) {
        return Err(TensorError::NonFinite { op: "percentile" });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    let rank = (p / 100.0 * n as f64).ceil() as usize;
    let rank = rank.clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Layer normalization with learned gain/bias. Returns the normalized
/// vector plus the `(mean, inv_std)` pair needed by the backward pass.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> (Vec<f64>, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let out = x
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| g * (v - mean) * inv_std + b)
        .collect();
    (out, mean, inv_std)
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

/// Deterministic 64-bit PRNG: xoshiro256++ seeded through SplitMix64.
///
/// The algorithm is fixed so a given seed produces the identical stream on
/// every platform and in every release of this workspace. All randomness in
/// the repo funnels through one root seed; sub-streams are derived with
/// [`Rng::derive`], which hashes a textual tag (FNV-1a 64) into the root
/// seed so unrelated pipeline stages never share a stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
    gauss_spare: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Child seed for the stream named `tag`: `root ^ FNV-1a(tag)`. This is the
/// repo-wide key-derivation scheme; every pipeline stage draws its
/// randomness from a stream derived off one root seed, so sub-seeds stay
/// stable when unrelated knobs change.
pub fn derive_seed(root_seed: u64, tag: &str) -> u64 {
    root_seed ^ fnv1a64(tag.as_bytes())
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self {
            state,
            gauss_spare: None,
        }
    }

    /// Derives an independent child stream: `new(derive_seed(root, tag))`.
    pub fn derive(root_seed: u64, tag: &str) -> Self {
        Self::new(derive_seed(root_seed, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    pub fn gen_range(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller (the spare value is cached).
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(v) = self.gauss_spare.take() {
            return v;
        }
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.gen_range(i + 1);
            slice.swap(i, j);
        }
    }

    /// Index sampled proportionally to non-negative `weights`.
    /// Returns `None` when the total mass is zero.
    pub fn choose_weighted(&mut self, weights: &[f64]) -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let mut dart = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            dart -= w;
            if dart <= 0.0 {
                return Some(i);
            }
        }
        Some(weights.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = matmul(&Matrix::identity(3), &m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_zero() {
        let m = Matrix::from_vec(3, 2, vec![1.0; 6]).unwrap();
        let out = matmul(&Matrix::zeros(2, 3), &m).unwrap();
        assert_eq!(out, Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] * [[5],[6]] = [[17],[39]]
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![5.0, 6.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.as_slice(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_dim_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        assert!(matches!(
            matmul(&a, &b),
            Err(TensorError::DimMismatch { .. })
        ));
    }

    #[test]
    fn softmax_uniform() {
        let out = softmax_row(&[0.0, 0.0, 0.0]).unwrap();
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_inputs_no_overflow() {
        let out = softmax_row(&[1000.0, 0.0]).unwrap();
        assert!(out[0] > 1.0 - 1e-12);
        assert!(out[1] < 1e-12);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_two_element_oracle() {
        // Direct exp evaluation: e^1/(e^1+e^2), e^2/(e^1+e^2).
        let out = softmax_row(&[1.0, 2.0]).unwrap();
        assert!((out[0] - 0.26894).abs() < 1e-5);
        assert!((out[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_empty_errors() {
        assert!(matches!(
            softmax_row(&[]),
            Err(TensorError::EmptyInput { .. })
        ));
    }

    #[test]
    fn percentile_single_sample() {
        assert_eq!(percentile(&[5.0], 80.0).unwrap(), 5.0);
    }

    #[test]
    fn percentile_nearest_rank_oracle() {
        let samples: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(percentile(&samples, 80.0).unwrap(), 80.0);
    }

    #[test]
    fn percentile_zero_is_minimum() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 0.0).unwrap(), 1.0);
    }

    #[test]
    fn percentile_bad_inputs() {
        assert!(matches!(
            percentile(&[], 50.0),
            Err(TensorError::EmptyInput { .. })
        ));
        assert!(matches!(
            percentile(&[1.0], 101.0),
            Err(TensorError::PercentileOutOfRange { .. })
        ));
        assert!(matches!(
            percentile(&[1.0], -0.5),
            Err(TensorError::PercentileOutOfRange { .. })
        ));
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::derive(42, "corpus");
        let mut d = Rng::derive(42, "corpus");
        assert_eq!(c.next_u64(), d.next_u64());
        let mut e = Rng::derive(42, "train");
        assert_ne!(Rng::derive(42, "corpus").next_u64(), e.next_u64());
    }

    #[test]
    fn gaussian_moments_sane() {
        let mut rng = Rng::new(7);
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let v = rng.next_gaussian();
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let out = softmax_row(&v).unwrap();
            let sum: f64 = out.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(out.iter().all(|p| *p >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(
            v in proptest::collection::vec(-20.0f64..20.0, 1..20),
            c in -100.0f64..100.0,
        ) {
            let base = softmax_row(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let out = softmax_row(&shifted).unwrap();
            for (a, b) in base.iter().zip(&out) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn percentile_returns_member(
            v in proptest::collection::vec(-1e6f64..1e6, 1..64),
            p in 0.0f64..=100.0,
        ) {
            let out = percentile(&v, p).unwrap();
            prop_assert!(v.contains(&out));
        }

        #[test]
        fn matmul_associative(
            a in proptest::collection::vec(-2.0f64..2.0, 12),
            b in proptest::collection::vec(-2.0f64..2.0, 12),
            c in proptest::collection::vec(-2.0f64..2.0, 12),
        ) {
            let a = Matrix::from_vec(3, 4, a).unwrap();
            let b = Matrix::from_vec(4, 3, b).unwrap();
            let c = Matrix::from_vec(3, 4, c).unwrap();
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (l, r) in left.as_slice().iter().zip(right.as_slice()) {
                let scale = l.abs().max(r.abs()).max(1.0);
                prop_assert!((l - r).abs() / scale < 1e-4);
            }
        }
    }

    #[test]
    fn softmax_property_sweep_1000_seeds() {
        // Seeded bulk check independent of proptest shrinking.
        for seed in 0..1000u64 {
            let mut rng = Rng::new(seed);
            let len = 1 + rng.gen_range(32);
            let v: Vec<f64> = (0..len).map(|_| rng.next_gaussian() * 10.0).collect();
            let out = softmax_row(&v).unwrap();
            let sum: f64 = out.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
