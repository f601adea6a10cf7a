//! Monte Carlo statistics helpers: means with standard errors, unbiased
//! variances with delta-method errors, weighted ensemble moments, and the
//! small regressions used by the verification suite.

use nalgebra::{DMatrix, DVector};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the sample mean.
pub fn se_mean(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Unbiased sample variance.
pub fn sample_var(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Delta-method standard error of the unbiased sample variance,
/// sqrt((m4 - s^4 (n-3)/(n-1)) / n) with m4 the fourth central moment.
pub fn se_var(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 0.0;
    }
    let m = mean(xs);
    let s2 = sample_var(xs);
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n as f64;
    let v = (m4 - s2 * s2 * (n as f64 - 3.0) / (n as f64 - 1.0)) / n as f64;
    v.max(0.0).sqrt()
}

/// Mean and SE of a statistic given per-path influence values.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    (mean(xs), se_mean(xs))
}

pub fn skewness(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let s2 = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    if s2 == 0.0 {
        return 0.0;
    }
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / s2.powf(1.5)
}

pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let s2 = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    if s2 == 0.0 {
        return 0.0;
    }
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (s2 * s2) - 3.0
}

/// Weighted mean of vectors (weights need not be normalized).
pub fn weighted_mean(xs: &[DVector<f64>], w: &[f64]) -> DVector<f64> {
    let dim = xs.first().map_or(0, |x| x.len());
    let mut acc = DVector::zeros(dim);
    let wsum: f64 = w.iter().sum();
    for (x, &wi) in xs.iter().zip(w) {
        acc.axpy(wi, x, 1.0);
    }
    acc / wsum
}

/// Weighted cross-covariance E_w[(x - mean_x)(y - mean_y)^T].
pub fn weighted_cov(xs: &[DVector<f64>], ys: &[DVector<f64>], w: &[f64]) -> DMatrix<f64> {
    let mx = weighted_mean(xs, w);
    let my = weighted_mean(ys, w);
    let wsum: f64 = w.iter().sum();
    let mut acc = DMatrix::zeros(mx.len(), my.len());
    for ((x, y), &wi) in xs.iter().zip(ys).zip(w) {
        acc.ger(wi / wsum, &(x - &mx), &(y - &my), 1.0);
    }
    acc
}

/// Fit y ~ a*eps + b*eps^2 from per-path observations of the response at
/// each eps. `per_path[i][j]` is path i's response at `eps[j]`; using the
/// per-path covariance propagates the cross-eps correlation induced by
/// common random numbers into the coefficient errors.
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub se_a: f64,
    pub se_b: f64,
}

pub fn fit_quadratic_through_origin(eps: &[f64], per_path: &[Vec<f64>]) -> QuadraticFit {
    let p = eps.len();
    let n = per_path.len();
    assert!(p >= 2 && n >= 2);
    // mean response and covariance of the mean across eps points
    let mut ybar = vec![0.0; p];
    for row in per_path {
        for (j, &v) in row.iter().enumerate() {
            ybar[j] += v;
        }
    }
    for y in &mut ybar {
        *y /= n as f64;
    }
    let mut cov = DMatrix::zeros(p, p);
    for row in per_path {
        for j in 0..p {
            for l in 0..p {
                cov[(j, l)] += (row[j] - ybar[j]) * (row[l] - ybar[l]);
            }
        }
    }
    cov /= (n - 1) as f64 * n as f64; // covariance of the mean vector

    // design: columns [eps, eps^2]; OLS on the mean response, errors by
    // propagating cov through the fixed linear map L = (X'X)^{-1} X'.
    let x = DMatrix::from_fn(p, 2, |j, c| if c == 0 { eps[j] } else { eps[j] * eps[j] });
    let xtx = x.transpose() * &x;
    let xtx_inv = xtx.try_inverse().expect("eps design nonsingular");
    let l = xtx_inv * x.transpose(); // 2 x p
    let y = DVector::from_vec(ybar);
    let beta = &l * &y;
    let cb = &l * cov * l.transpose();
    QuadraticFit {
        a: beta[0],
        b: beta[1],
        se_a: cb[(0, 0)].max(0.0).sqrt(),
        se_b: cb[(1, 1)].max(0.0).sqrt(),
    }
}

/// OLS of y on columns of x (no intercept) with heteroskedasticity-robust
/// (HC0 sandwich) standard errors.
pub struct Regression {
    pub coef: DVector<f64>,
    pub se: DVector<f64>,
}

pub fn ols_robust(x: &DMatrix<f64>, y: &DVector<f64>) -> Regression {
    let xtx = x.transpose() * x;
    let xtx_inv = xtx.try_inverse().expect("regression design nonsingular");
    let coef = &xtx_inv * (x.transpose() * y);
    let resid = y - x * &coef;
    let k = x.ncols();
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..x.nrows() {
        let xi = x.row(i).transpose();
        meat.ger(resid[i] * resid[i], &xi, &xi, 1.0);
    }
    let cov = &xtx_inv * meat * &xtx_inv;
    let se = DVector::from_fn(k, |i, _| cov[(i, i)].max(0.0).sqrt());
    Regression { coef, se }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_of_known_sample() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((mean(&xs) - 2.5).abs() < 1e-15);
        assert!((sample_var(&xs) - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn quadratic_fit_recovers_exact_polynomial() {
        let eps = [-0.1, -0.05, 0.05, 0.1];
        // y = 0.3 eps + 2.0 eps^2, no noise
        let row: Vec<f64> = eps.iter().map(|&e| 0.3 * e + 2.0 * e * e).collect();
        let per_path = vec![row.clone(), row.clone(), row];
        let fit = fit_quadratic_through_origin(&eps, &per_path);
        assert!((fit.a - 0.3).abs() < 1e-12);
        assert!((fit.b - 2.0).abs() < 1e-10);
        assert!(fit.se_a < 1e-12);
    }

    #[test]
    fn ols_recovers_coefficients() {
        let n = 200;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { (i as f64).sin() } else { (i as f64 * 0.7).cos() });
        let beta = DVector::from_vec(vec![1.5, -0.4]);
        let y = &x * &beta;
        let reg = ols_robust(&x, &y);
        assert!((reg.coef[0] - 1.5).abs() < 1e-10);
        assert!((reg.coef[1] + 0.4).abs() < 1e-10);
    }
}
