//! Dense small-matrix and vector kernels used by the routers and baselines.
//!
//! Vectors are plain `[f64]` slices; matrices are row-major [`Mat`]. Every
//! operation here is a pure function and rejects non-finite input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Guard for every norm and variance division.
pub const EPS: f64 = 1e-12;

/// Default convergence tolerance for [`svd_top_right`].
pub const SVD_TOL: f64 = 1e-10;
/// Default iteration cap for [`svd_top_right`].
pub const SVD_MAX_ITER: usize = 10_000;

const SVD_START_SEED: u64 = 0x5eed_a77e_0001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("vector has zero variance (std <= {EPS:e})")]
    ZeroVariance,
    #[error("vector dimension {0} is below the minimum of 2")]
    DimTooSmall(usize),
    #[error("zero-norm vector{}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    ZeroNorm { row: Option<usize> },
    #[error("k = {k} is outside 1..={n}")]
    BadK { k: usize, n: usize },
    #[error("top-p mass {0} is outside (0, 1)")]
    BadP(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("power iteration did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("matrix is all zeros")]
    ZeroMatrix,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(LinalgError::DimMismatch { expected, got })
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(rows * cols, data.len())?;
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, x.len())?;
        Ok(self.row_iter().map(|row| dot(row, x)).collect())
    }

    /// `selfᵀ · x`
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (row, xi) in self.row_iter().zip(x) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * xi;
            }
        }
        Ok(out)
    }

    /// `self · other`
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        check_dim(self.cols, other.rows)?;
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.get(r, c);
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

    /// `self += s · other`
    pub fn add_scaled(&mut self, other: &Mat, s: f64) -> Result<()> {
        check_dim(self.rows, other.rows)?;
        check_dim(self.cols, other.cols)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Subtracts the mean and divides by the population standard deviation.
pub fn standardize(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(LinalgError::DimTooSmall(x.len()));
    }
    check_finite(x)?;
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= EPS {
        return Err(LinalgError::ZeroVariance);
    }
    Ok(x.iter().map(|v| (v - mean) / std).collect())
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    check_finite(a)?;
    check_finite(b)?;
    let (na, nb) = (norm(a), norm(b));
    if na <= EPS || nb <= EPS {
        return Err(LinalgError::ZeroNorm { row: None });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of every row of `m` against `x`.
pub fn rowwise_cosine(m: &Mat, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(m.cols(), x.len())?;
    check_finite(x)?;
    let nx = norm(x);
    if nx <= EPS {
        return Err(LinalgError::ZeroNorm { row: None });
    }
    m.row_iter()
        .enumerate()
        .map(|(i, row)| {
            let nr = norm(row);
            if nr <= EPS {
                return Err(LinalgError::ZeroNorm { row: Some(i) });
            }
            Ok((dot(row, x) / (nr * nx)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Max-subtracted softmax.
pub fn softmax(s: &[f64]) -> Result<Vec<f64>> {
    check_finite(s)?;
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Indices sorted by descending value; ties keep the lower index first.
pub fn descending_order(s: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    idx
}

/// Indices of the `k` largest entries, in descending order of value.
pub fn top_k_indices(s: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > s.len() {
        return Err(LinalgError::BadK { k, n: s.len() });
    }
    check_finite(s)?;
    let mut idx = descending_order(s);
    idx.truncate(k);
    Ok(idx)
}

/// Shortest descending-probability prefix whose cumulative mass strictly
/// exceeds `p`. Falls back to every index if rounding keeps the total at or
/// below `p`.
pub fn top_p_indices(w: &[f64], p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(LinalgError::BadP(p));
    }
    check_finite(w)?;
    let order = descending_order(w);
    let mut mass = 0.0;
    let mut picked = Vec::new();
    for i in order {
        picked.push(i);
        mass += w[i];
        if mass > p {
            break;
        }
    }
    Ok(picked)
}

/// Leading singular value and right singular vector of `m`, by power
/// iteration on `mᵀm` from a fixed seeded start.
pub fn svd_top_right(m: &Mat, tol: f64, max_iter: usize) -> Result<(f64, Vec<f64>)> {
    svd_top_right_seeded(m, tol, max_iter, SVD_START_SEED)
}

/// [`svd_top_right`] with an explicit start-vector seed, for retries.
pub fn svd_top_right_seeded(
    m: &Mat,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    if m.data().iter().all(|v| *v == 0.0) {
        return Err(LinalgError::ZeroMatrix);
    }
    let gram = m.transpose().matmul(m)?;
    let n = m.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    for _ in 0..max_iter {
        let w = gram.matvec(&v)?;
        let lambda = dot(&v, &w);
        let residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if lambda > EPS && residual <= tol * lambda {
            let sigma = norm(&m.matvec(&v)?);
            return Ok((sigma, v));
        }
        let nw = norm(&w);
        if nw <= EPS {
            // start landed in the null space; nudge it
            v = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let nv = norm(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            continue;
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Err(LinalgError::NoConvergence(max_iter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(standardize(&[1.0, 1.0, 1.0]), Err(LinalgError::ZeroVariance));
        assert_eq!(standardize(&[4.0]), Err(LinalgError::DimTooSmall(1)));
        let out = standardize(&[1.0, 2.0, 3.0]).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        assert!(close(&out, &[-1.0 / s, 0.0, 1.0 / s], 1e-12));
        assert!(close(&out, &[-1.224745, 0.0, 1.224745], 1e-6));
        let two = standardize(&[-3.5, 10.0]).unwrap();
        assert!(close(&two, &[-1.0, 1.0], 1e-12));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[3.0, -2.0], &[3.0, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(LinalgError::ZeroNorm { row: None })
        );
        assert!(matches!(
            cosine_sim(&[1.0], &[1.0, 2.0]),
            Err(LinalgError::DimMismatch { .. })
        ));
    }

    #[test]
    fn rowwise_examples() {
        let id = Mat::identity(2);
        assert_eq!(rowwise_cosine(&id, &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let m = Mat::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(close(&rowwise_cosine(&m, &[1.0, 2.0]).unwrap(), &[1.0, 0.8], 1e-15));
        let same = Mat::from_rows(&[[0.3, -1.0, 2.0], [0.3, -1.0, 2.0]]).unwrap();
        assert!(close(
            &rowwise_cosine(&same, &[0.3, -1.0, 2.0]).unwrap(),
            &[1.0, 1.0],
            1e-15
        ));
        let bad = Mat::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(
            rowwise_cosine(&bad, &[1.0, 1.0]),
            Err(LinalgError::ZeroNorm { row: Some(1) })
        );
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let c = softmax(&[7.0, 7.0, 7.0]).unwrap();
        assert!(close(&c, &[1.0 / 3.0; 3], 1e-15));
        let w = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!(close(&w, &[0.25, 0.75], 1e-15));
        assert_eq!(softmax(&[f64::NAN, 1.0]), Err(LinalgError::NonFinite));
        // no overflow for large logits
        let big = softmax(&[1000.0, 999.0]).unwrap();
        assert!(big.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        let mut all = top_k_indices(&[0.3, -1.0, 4.0], 3).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert_eq!(top_k_indices(&[5.0, 5.0, 1.0], 1).unwrap(), vec![0]);
        assert_eq!(top_k_indices(&[1.0], 0), Err(LinalgError::BadK { k: 0, n: 1 }));
        assert_eq!(top_k_indices(&[1.0], 2), Err(LinalgError::BadK { k: 2, n: 1 }));
    }

    #[test]
    fn top_p_examples() {
        assert_eq!(top_p_indices(&[0.7, 0.2, 0.1], 0.5).unwrap(), vec![0]);
        // 0.4 + 0.35 lands exactly on 0.75, which does not exceed it
        assert_eq!(0.4 + 0.35, 0.75);
        assert_eq!(top_p_indices(&[0.4, 0.35, 0.25], 0.75).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_p_indices(&[0.5, 0.5], 0.5).unwrap(), vec![0, 1]);
        assert_eq!(top_p_indices(&[0.5, 0.5], 1.0), Err(LinalgError::BadP(1.0)));
        assert_eq!(top_p_indices(&[0.5, 0.5], 0.0), Err(LinalgError::BadP(0.0)));
    }

    #[test]
    fn svd_examples() {
        let (s, v) = svd_top_right(&Mat::diag(&[3.0, 1.0]), SVD_TOL, SVD_MAX_ITER).unwrap();
        assert!((s - 3.0).abs() < 1e-9);
        assert!((v[0].abs() - 1.0).abs() < 1e-9 && v[1].abs() < 1e-5);

        let m = Mat::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let (s, v) = svd_top_right(&m, SVD_TOL, SVD_MAX_ITER).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-9);
        assert!((v[0].abs() - 1.0).abs() < 1e-9);

        assert_eq!(
            svd_top_right(&Mat::zeros(2, 2), SVD_TOL, SVD_MAX_ITER),
            Err(LinalgError::ZeroMatrix)
        );
    }

    #[test]
    fn svd_reports_no_convergence() {
        let m = Mat::from_rows(&[[1.0, 0.0], [0.0, 0.999]]).unwrap();
        assert_eq!(svd_top_right(&m, SVD_TOL, 3), Err(LinalgError::NoConvergence(3)));
    }

    #[test]
    fn mat_basics() {
        let a = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(a.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0, 11.0]);
        assert_eq!(a.matvec_t(&[1.0, 0.0, 1.0]).unwrap(), vec![6.0, 8.0]);
        assert_eq!(a.transpose().matmul(&Mat::identity(3)).unwrap(), a.transpose());
        assert!(Mat::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Mat::from_vec(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }

    fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn standardize_moments(x in prop::collection::vec(-100.0f64..100.0, 2..40)) {
            if let Ok(z) = standardize(&x) {
                let n = z.len() as f64;
                let mean = z.iter().sum::<f64>() / n;
                let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn cosine_scale_invariant(x in finite_vec(6), y in finite_vec(6),
                                  a in 0.01f64..50.0, b in 0.01f64..50.0) {
            prop_assume!(norm(&x) > 1e-3 && norm(&y) > 1e-3);
            let base = cosine_sim(&x, &y).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| v * a).collect();
            let ys: Vec<f64> = y.iter().map(|v| v * b).collect();
            let scaled = cosine_sim(&xs, &ys).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }

        #[test]
        fn softmax_shift_invariant(s in finite_vec(7), c in -100.0f64..100.0) {
            let a = softmax(&s).unwrap();
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let b = softmax(&shifted).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.iter().all(|v| *v > 0.0));
            prop_assert!(close(&a, &b, 1e-9));
            // order preserving
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if s[i] > s[j] { prop_assert!(a[i] >= a[j]); }
                }
            }
        }

        #[test]
        fn top_k_shift_invariant(s in prop::collection::vec(-8i32..8, 1..10),
                                 c in -1000i32..1000, k in 1usize..10) {
            // integer-valued scores keep the shift exact
            let s: Vec<f64> = s.into_iter().map(f64::from).collect();
            let k = k.min(s.len());
            let shifted: Vec<f64> = s.iter().map(|v| v + f64::from(c)).collect();
            prop_assert_eq!(top_k_indices(&s, k).unwrap(), top_k_indices(&shifted, k).unwrap());
        }

        #[test]
        fn top_p_is_minimal_prefix(raw in prop::collection::vec(-3.0f64..3.0, 1..8), p in 0.01f64..0.99) {
            let w = softmax(&raw).unwrap();
            let picked = top_p_indices(&w, p).unwrap();
            prop_assert!(!picked.is_empty());
            let mass: f64 = picked.iter().map(|&i| w[i]).sum();
            let without_last: f64 = picked[..picked.len() - 1].iter().map(|&i| w[i]).sum();
            prop_assert!(mass > p || picked.len() == w.len());
            prop_assert!(without_last <= p);
        }
    }
}
