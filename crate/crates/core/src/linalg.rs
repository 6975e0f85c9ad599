//! Small dense linear algebra shared by the quantizers and attention kernels.
//!
//! Everything here is row-major `f64` with fixed left-to-right reduction
//! order so results are bit-reproducible across runs.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// Wraps `data` as a `rows × cols` matrix. Rejects wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite matrix entry at flat index {pos}"));
        }
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
            m.data[i * n + i] = 1.0;
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
                return invalid(format!("row {i} has length {} (expected {cols})", r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn columns(&self, start: usize, width: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Mean of every column.
    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        if self.rows > 0 {
            let inv = 1.0 / self.rows as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
        }
        mean
    }

    /// Population variance over all entries.
    pub fn variance(&self) -> f64 {
        let n = self.data.len();
        if n == 0 {
            return 0.0;
        }
        let mean = self.data.iter().sum::<f64>() / n as f64;
        self.data
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n as f64
    }
}

/// Standard matrix product with left-to-right summation over the inner
/// dimension.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return invalid(format!(
            "matmul shape mismatch: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Numerically stable softmax of one row.
pub fn softmax_row(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return invalid("softmax of an empty vector");
    }
    if v.iter().any(|x| !x.is_finite()) {
        return invalid("softmax input contains non-finite values");
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|x| *x *= inv);
    Ok(out)
}

/// Mean squared element difference.
pub fn mse(a: &Mat, b: &Mat) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return invalid(format!(
            "mse shape mismatch: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    Ok(mse_slices(&a.data, &b.data))
}

pub(crate) fn mse_slices(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Solves `A x = b` for symmetric positive-definite `A` (n × n, row-major)
/// via Cholesky factorization.
pub fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    if a.len() != n * n || b.len() != n {
        return invalid("cholesky_solve: shape mismatch");
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Training(format!(
                        "matrix not positive definite: pivot {i} = {s:e}"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    // forward: L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    // backward: Lᵀ x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::new(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mat(&mut rng, 3, 4);
        assert_eq!(matmul(&Mat::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Mat::from_rows(&[[0.0], [1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_mat(&mut rng, 5, 7);
        let b = random_mat(&mut rng, 7, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        assert!(matmul(&Mat::zeros(2, 3), &Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Mat::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Mat::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_row(&[0.0, 0.0, 0.0]).unwrap();
        for p in &u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_row(&[1000.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert!(s[1] >= 0.0 && s[1] < 1e-300);
        assert!(softmax_row(&[]).is_err());
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // Oracle: e^1, e^2, e^3 to 20 digits, normalized by hand.
        let e1 = 2.718_281_828_459_045_235_f64;
        let e2 = 7.389_056_098_930_650_227_f64;
        let e3 = 20.085_536_923_187_667_741_f64;
        let z = e1 + e2 + e3;
        let expect = [e1 / z, e2 / z, e3 / z];
        let got = softmax_row(&[1.0, 2.0, 3.0]).unwrap();
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-15, "{g} vs {e}");
        }
    }

    #[test]
    fn mse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_mat(&mut rng, 4, 6);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let z = Mat::from_rows(&[[0.0, 0.0]]).unwrap();
        let o = Mat::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        let b = random_mat(&mut rng, 4, 6);
        let mut s = 0.0;
        for i in 0..4 {
            for j in 0..6 {
                s += (a.get(i, j) - b.get(i, j)).powi(2);
            }
        }
        assert!((mse(&a, &b).unwrap() - s / 24.0).abs() < 1e-15);
        assert!(mse(&a, &Mat::zeros(6, 4)).is_err());
    }

    #[test]
    fn cholesky_solves_spd() {
        let a = [4.0, 1.0, 1.0, 3.0];
        let x = cholesky_solve(&a, &[1.0, 2.0], 2).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-14);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-14);
        assert!(matches!(
            cholesky_solve(&[0.0; 4], &[1.0, 1.0], 2),
            Err(Error::Training(_))
        ));
    }

    proptest! {
        #[test]
        fn scalar_commutes_with_matmul(seed in any::<u64>(), c in -10.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mat(&mut rng, 3, 4);
            let b = random_mat(&mut rng, 4, 2);
            let lhs = matmul(&a.scale(c), &b).unwrap();
            let rhs = matmul(&a, &b).unwrap().scale(c);
            for (l, r) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((l - r).abs() <= 1e-12 * r.abs().max(1.0));
            }
        }

        #[test]
        fn softmax_is_probability_vector(v in prop::collection::vec(-700.0f64..700.0, 1..32)) {
            let p = softmax_row(&v).unwrap();
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn mse_symmetric_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mat(&mut rng, 2, 5);
            let b = random_mat(&mut rng, 2, 5);
            let ab = mse(&a, &b).unwrap();
            prop_assert_eq!(ab, mse(&b, &a).unwrap());
            prop_assert!(ab > 0.0);
        }
    }
}
