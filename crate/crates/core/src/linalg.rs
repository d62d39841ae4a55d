//! Row-major covariate storage and the handful of dense helpers the
//! estimators need. Matrices here are tiny (p x p with p the number of
//! covariates), so nalgebra's dynamic types are plenty.

use nalgebra::{DMatrix, DVector};

/// Row-major `n x p` covariate matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Covariates {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl Covariates {
    pub fn new(n: usize, p: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * p, "covariate buffer has the wrong length");
        Covariates { n, p, data }
    }

    pub fn from_rows<'a, I>(p: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut data = Vec::new();
        let mut n = 0;
        for row in rows {
            assert_eq!(row.len(), p, "ragged covariate rows");
            data.extend_from_slice(row);
            n += 1;
        }
        Covariates { n, p, data }
    }

    /// Prepends a column of ones.
    pub fn with_intercept(&self) -> Covariates {
        let p = self.p + 1;
        let mut data = Vec::with_capacity(self.n * p);
        for i in 0..self.n {
            data.push(1.0);
            data.extend_from_slice(self.row(i));
        }
        Covariates { n: self.n, p, data }
    }

    /// Keeps the listed columns, in order.
    pub fn select(&self, columns: &[usize]) -> Covariates {
        let mut data = Vec::with_capacity(self.n * columns.len());
        for i in 0..self.n {
            let row = self.row(i);
            data.extend(columns.iter().map(|&c| row[c]));
        }
        Covariates {
            n: self.n,
            p: columns.len(),
            data,
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.data[i * self.p + j]).collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.n).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `X b` for every row.
    pub fn linear_predictor(&self, coef: &[f64]) -> Vec<f64> {
        self.rows().map(|r| dot(r, coef)).collect()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `A x = b` for symmetric positive definite `A`. `None` when the
/// Cholesky factorization fails.
pub fn solve_spd(a: &DMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let chol = a.clone().cholesky()?;
    let x = chol.solve(&DVector::from_column_slice(b));
    Some(x.iter().copied().collect())
}

/// Inverse of a symmetric positive definite matrix.
pub fn inverse_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.inverse())
}

/// Ratio of smallest to largest eigenvalue of a symmetric matrix; used as a
/// rank check before iterating.
pub fn reciprocal_condition(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

pub fn matvec(a: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (a * DVector::from_column_slice(x)).iter().copied().collect()
}

pub fn to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman–Fan type 7). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let (lo, frac) = quantile_position(sorted.len(), p);
    if frac == 0.0 || lo + 1 >= sorted.len() {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Lower order-statistic index and interpolation fraction for the type-7
/// quantile of `n` values.
pub fn quantile_position(n: usize, p: f64) -> (usize, f64) {
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    (lo.min(n - 1), h - h.floor())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation with the `n - 1` divisor.
pub fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert!((quantile_sorted(&v, 0.25) - 1.75).abs() < 1e-15);
        assert!((quantile_sorted(&v, 0.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn intercept_and_select() {
        let x = Covariates::from_rows(2, [&[1.0, 2.0][..], &[3.0, 4.0][..]]);
        let xi = x.with_intercept();
        assert_eq!(xi.row(1), &[1.0, 3.0, 4.0]);
        assert_eq!(x.select(&[1]).column(0), vec![2.0, 4.0]);
    }

    #[test]
    fn spd_solve() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let x = solve_spd(&a, &[1.0, 2.0]).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-14);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-14);
        assert!(solve_spd(&DMatrix::zeros(2, 2), &[1.0, 1.0]).is_none());
    }
}
