//! Dense matrix arithmetic and categorical-distribution primitives.
//!
//! Everything here works in `f64`. Low-bit quantization elsewhere in the
//! crate is simulated numerically on top of these carriers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AaqError, Result};

/// Floor applied to both arguments of a KL divergence before the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

// Below this many multiply-adds a product runs on the calling thread.
const PAR_MATMUL_THRESHOLD: usize = 1 << 15;

impl TensorMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AaqError::shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(AaqError::InvalidInput(format!(
                "matrix entry {i} is not finite"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix without the finiteness scan. Callers guarantee the length.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(AaqError::shape("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
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

    pub fn matmul(&self, other: &TensorMatrix) -> Result<TensorMatrix> {
        matmul(self, other)
    }

    pub fn sub(&self, other: &TensorMatrix) -> Result<TensorMatrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &TensorMatrix) -> Result<TensorMatrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn hadamard_product(&self, other: &TensorMatrix) -> Result<TensorMatrix> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &TensorMatrix, f: impl Fn(f64, f64) -> f64) -> Result<TensorMatrix> {
        if self.shape() != other.shape() {
            return Err(AaqError::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    pub fn scale(&self, k: f64) -> TensorMatrix {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * k).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> TensorMatrix {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|v| f(*v)).collect())
    }

    pub fn add_assign(&mut self, other: &TensorMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(AaqError::shape("add_assign"));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn frobenius_sq(&self) -> f64 {
        pairwise_sum_map(&self.data, |v| v * v)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max-column-sum norm.
    pub fn norm_one(&self) -> f64 {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self.get(r, c).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &TensorMatrix, b: &TensorMatrix) -> Result<TensorMatrix> {
    if a.cols != b.rows {
        return Err(AaqError::shape(format!(
            "matmul {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    let kernel = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if n > 0 && m * k * n >= PAR_MATMUL_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(kernel);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(kernel);
    }
    Ok(TensorMatrix::from_raw(m, n, out))
}

/// `a · bᵀ`.
pub fn matmul_transposed(a: &TensorMatrix, b: &TensorMatrix) -> Result<TensorMatrix> {
    if a.cols != b.cols {
        return Err(AaqError::shape(format!(
            "matmul_transposed {}x{} · ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    // the row-axpy kernel in `matmul` vectorizes; dot products do not
    matmul(a, &b.transpose())
}

/// Inverse of a square matrix together with its 1-norm condition estimate.
pub fn invert_with_condition(a: &TensorMatrix) -> Result<(TensorMatrix, f64)> {
    if a.rows != a.cols {
        return Err(AaqError::shape("inverse of non-square matrix"));
    }
    let n = a.rows;
    let m = nalgebra::DMatrix::from_row_slice(n, n, &a.data);
    let inv = m
        .try_inverse()
        .ok_or_else(|| AaqError::Numeric("matrix is singular".into()))?;
    let mut data = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            data.push(inv[(r, c)]);
        }
    }
    let inv = TensorMatrix::from_raw(n, n, data);
    let cond = a.norm_one() * inv.norm_one();
    Ok((inv, cond))
}

/// Raw next-token scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AaqError::InvalidInput("logits must be finite".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A categorical distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(AaqError::InvalidInput(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(AaqError::InvalidInput(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn softmax(logits: &LogitVector) -> Result<ProbVector> {
    if logits.values().iter().any(|v| !v.is_finite()) {
        return Err(AaqError::InvalidInput("softmax of non-finite logits".into()));
    }
    Ok(ProbVector::from_raw(softmax_slice(logits.values())))
}

pub(crate) fn softmax_slice(l: &[f64]) -> Vec<f64> {
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
    let total = pairwise_sum(&exps);
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn log_softmax_slice(l: &[f64]) -> Vec<f64> {
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + pairwise_sum_map(l, |v| (v - max).exp()).ln();
    l.iter().map(|v| v - lse).collect()
}

/// `Σ pᵢ ln(pᵢ/qᵢ)` in nats, with both arguments floored at [`PROB_FLOOR`]
/// and `0 · ln(0/q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(AaqError::shape(format!(
            "kl_divergence over {} vs {} entries",
            p.len(),
            q.len()
        )));
    }
    let terms: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else {
                pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln())
            }
        })
        .collect();
    Ok(pairwise_sum(&terms))
}

/// Indices of the `k` largest values, ties to the lowest index, returned in ascending order.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(AaqError::InvalidArgument(format!(
            "top-{k} of {} values",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Deterministic pairwise summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    pairwise_sum_map(values, |v| v)
}

pub(crate) fn pairwise_sum_map(values: &[f64], f: impl Fn(f64) -> f64 + Copy) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        values.iter().map(|v| f(*v)).sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum_map(&values[..mid], f) + pairwise_sum_map(&values[mid..], f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &TensorMatrix, b: &TensorMatrix) -> TensorMatrix {
        let mut out = TensorMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for p in 0..a.cols() {
                    acc += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn softmax_symmetric_and_shift_invariant() {
        let p = softmax(&LogitVector::new(vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(p.values(), &[0.5, 0.5]);
        for c in [-1e3, -3.5, 0.0, 17.25, 700.0] {
            let p = softmax(&LogitVector::new(vec![c; 4]).unwrap()).unwrap();
            assert_eq!(p.values(), &[0.25; 4]);
        }
    }

    #[test]
    fn softmax_golden_one_two_three() {
        // exp(k - 3) / (e^-2 + e^-1 + 1), evaluated independently
        let denom = (-2.0f64).exp() + (-1.0f64).exp() + 1.0;
        let oracle = [(-2.0f64).exp() / denom, (-1.0f64).exp() / denom, 1.0 / denom];
        let golden = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        let p = softmax(&LogitVector::new(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        for i in 0..3 {
            assert!((p.values()[i] - oracle[i]).abs() < 1e-15);
            assert!((p.values()[i] - golden[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(LogitVector::new(vec![f64::NAN]).is_err());
        let bad = LogitVector(vec![1.0, f64::INFINITY]);
        assert!(matches!(softmax(&bad), Err(AaqError::InvalidInput(_))));
    }

    #[test]
    fn kl_hand_cases() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let ln2 = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((ln2 - std::f64::consts::LN_2).abs() < 1e-15);
        let v = kl_divergence(&[0.875, 0.125], &[0.5, 0.5]).unwrap();
        let hand = 0.875 * 1.75f64.ln() + 0.125 * 0.25f64.ln();
        assert!((v - hand).abs() < 1e-15);
        assert!((v - 0.316_377).abs() < 1e-6);
    }

    #[test]
    fn kl_shape_error() {
        assert!(matches!(
            kl_divergence(&[1.0], &[0.5, 0.5]),
            Err(AaqError::Shape(_))
        ));
    }

    #[test]
    fn topk_tie_rules() {
        assert_eq!(topk_indices(&[0.7, 0.1, 0.1, 0.1], 2).unwrap(), vec![0, 1]);
        assert_eq!(topk_indices(&[0.3, 0.9], 0).unwrap(), Vec::<usize>::new());
        assert_eq!(topk_indices(&[0.6, 0.6, 0.0, 0.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(topk_indices(&[0.0, 0.2, 0.9, 0.2], 2).unwrap(), vec![1, 2]);
        assert!(matches!(
            topk_indices(&[1.0], 2),
            Err(AaqError::InvalidArgument(_))
        ));
    }

    #[test]
    fn matmul_identities_and_oracle() {
        let b = TensorMatrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]).unwrap();
        assert_eq!(TensorMatrix::identity(2).matmul(&b).unwrap(), b);
        assert_eq!(b.matmul(&TensorMatrix::identity(2)).unwrap(), b);
        let a = TensorMatrix::from_rows(&[vec![0.3, 0.7], vec![-1.1, 2.2]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
        assert!(matches!(
            matmul(&a, &TensorMatrix::zeros(3, 1)),
            Err(AaqError::Shape(_))
        ));
    }

    #[test]
    fn parallel_matmul_matches_oracle() {
        let a = TensorMatrix::from_raw(40, 33, (0..40 * 33).map(|i| (i as f64 * 0.37).sin()).collect());
        let b = TensorMatrix::from_raw(33, 50, (0..33 * 50).map(|i| (i as f64 * 0.11).cos()).collect());
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = b.transpose();
        let via_t = matmul_transposed(&a, &bt).unwrap();
        for (x, y) in via_t.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let a = TensorMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let (inv, cond) = invert_with_condition(&a).unwrap();
        let prod = a.matmul(&inv).unwrap();
        assert!(prod.sub(&TensorMatrix::identity(2)).unwrap().max_abs() < 1e-15);
        assert!(cond >= 1.0);
    }

    fn prob_pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(-6.0f64..6.0, n),
            proptest::collection::vec(-6.0f64..6.0, n),
        )
            .prop_map(|(a, b)| (softmax_slice(&a), softmax_slice(&b)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_sums_to_one_and_ignores_shift(
            l in proptest::collection::vec(-50.0f64..50.0, 1..40),
            c in -100.0f64..100.0,
        ) {
            let p = softmax_slice(&l);
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
            let ps = softmax_slice(&shifted);
            for (a, b) in p.iter().zip(&ps) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn kl_is_non_negative_and_zero_only_on_match((p, q) in prob_pair(6)) {
            let d = kl_divergence(&p, &q).unwrap();
            prop_assert!(d >= 0.0);
            let close = p.iter().zip(&q).all(|(a, b)| (a - b).abs() <= 1e-12);
            if close {
                prop_assert!(d.abs() < 1e-9);
            } else {
                prop_assert!(d > 0.0);
            }
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn topk_matches_sort_oracle(values in proptest::collection::vec(0u8..6, 0..20), k in 0usize..20) {
            let values: Vec<f64> = values.into_iter().map(f64::from).collect();
            let k = k.min(values.len());
            let got = topk_indices(&values, k).unwrap();
            // oracle: repeatedly take the first index of the max among the remaining
            let mut remaining: Vec<usize> = (0..values.len()).collect();
            let mut want = Vec::new();
            for _ in 0..k {
                let best = remaining.iter().copied().fold(None, |acc: Option<usize>, i| match acc {
                    Some(b) if values[b] >= values[i] => Some(b),
                    _ => Some(i),
                }).unwrap();
                want.push(best);
                remaining.retain(|&i| i != best);
            }
            want.sort_unstable();
            prop_assert_eq!(got, want);
        }
    }
}
