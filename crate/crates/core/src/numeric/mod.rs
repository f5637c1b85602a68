//! Dense 64-bit float math used by every other module.
//!
//! Everything here is deliberately plain: row-major matrices, naive
//! triple-loop products, single fixed accumulation order in every
//! reduction. Reductions are never reassociated, so results are
//! bit-stable run to run.

mod rng;

pub use rng::Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from row-major data. All entries must be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn random_gauss(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gauss() * std).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    /// Standard matrix product with a fixed k-inner accumulation order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[k * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch("matrix add".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

/// Dot product with fixed left-to-right accumulation.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax over one row of logits.
///
/// Subtracts the maximum before exponentiating; the output is positive and
/// sums to 1 up to rounding.
pub fn softmax_row(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::EmptyInput("softmax_row"));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("softmax_row input"));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = 0.0;
    for &e in &out {
        sum += e;
    }
    for e in &mut out {
        *e /= sum;
    }
    Ok(out)
}

/// log(sum(exp(z))) computed without overflow.
pub fn log_sum_exp(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::EmptyInput("log_sum_exp"));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("log_sum_exp input"));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in z {
        sum += (v - max).exp();
    }
    Ok(max + sum.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    // The proptest prelude re-exports rand's Rng trait; ours wins here.
    use super::Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn identity_matmul_is_identity_map() {
        let m = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = Matrix::identity(3).matmul(&m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        // Independent oracle: an explicitly separate triple loop with
        // j-outer ordering, accumulated in a different association order.
        let mut rng = Rng::new(11);
        let a = Matrix::random_gauss(5, 7, 1.0, &mut rng);
        let b = Matrix::random_gauss(7, 3, 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for j in 0..3 {
            for i in 0..5 {
                let mut acc = 0.0;
                for k in (0..7).rev() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert_close(c.get(i, j), acc, 1e-12);
            }
        }
    }

    #[test]
    fn matmul_dimension_mismatch_is_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax_row(&[0.0, 0.0, 0.0]).unwrap();
        for &v in &p {
            assert_close(v, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn softmax_shift_with_ln2_gap() {
        for c in [-1000.0, 0.0, 3.5, 1000.0] {
            let p = softmax_row(&[c, c + 2f64.ln()]).unwrap();
            assert_close(p[0], 1.0 / 3.0, 1e-12);
            assert_close(p[1], 2.0 / 3.0, 1e-12);
        }
    }

    #[test]
    fn softmax_extreme_logits_no_overflow() {
        let p = softmax_row(&[1000.0, 0.0]).unwrap();
        assert!(p[0].is_finite() && p[1].is_finite());
        // Oracle: p_i = exp(z_i - lse(z)).
        let lse = log_sum_exp(&[1000.0, 0.0]).unwrap();
        assert_close(p[0], (1000.0 - lse).exp(), 1e-12);
        assert_close(p[1], (0.0 - lse).exp(), 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax_row(&[f64::NAN, 0.0]).is_err());
        assert!(softmax_row(&[f64::INFINITY]).is_err());
        assert!(softmax_row(&[]).is_err());
    }

    #[test]
    fn lse_singleton_and_pair() {
        assert_close(log_sum_exp(&[0.0]).unwrap(), 0.0, 1e-15);
        let a = -3.25;
        assert_close(log_sum_exp(&[a, a]).unwrap(), a + 2f64.ln(), 1e-14);
    }

    #[test]
    fn lse_matches_extended_precision_oracle() {
        // Oracle: Kahan-compensated summation of exp(z - max) gives an
        // effectively extended-precision reference for the mantissa sum.
        let mut rng = Rng::new(99);
        let z: Vec<f64> = (0..1000).map(|_| rng.uniform_in(-30.0, 30.0)).collect();
        let lse = log_sum_exp(&z).unwrap();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &v in &z {
            let y = (v - max).exp() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let reference = max + sum.ln();
        assert!((lse - reference).abs() / reference.abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_shift_invariant(
            z in proptest::collection::vec(-50.0f64..50.0, 1..40),
            c in -100.0f64..100.0,
        ) {
            let p = softmax_row(&z).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            let shifted: Vec<f64> = z.iter().map(|&v| v + c).collect();
            let q = softmax_row(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn matmul_is_bilinear(seed in 0u64..5000) {
            let mut rng = Rng::new(seed);
            let a = Matrix::random_gauss(4, 6, 1.0, &mut rng);
            let b = Matrix::random_gauss(6, 3, 1.0, &mut rng);
            let c = Matrix::random_gauss(6, 3, 1.0, &mut rng);
            let lhs = a.matmul(&b.add(&c).unwrap()).unwrap();
            let rhs = a.matmul(&b).unwrap().add(&a.matmul(&c).unwrap()).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }

        #[test]
        fn lse_dominates_max(z in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let lse = log_sum_exp(&z).unwrap();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lse >= max - 1e-12);
            prop_assert!(lse <= max + (z.len() as f64).ln() + 1e-12);
        }
    }
}
