//! Dense regression core shared by the forecasting and econometrics layers.
//!
//! OLS is solved through a Householder QR factorization rather than normal
//! equations, since the synthetic feature sets can be near-collinear. Plain
//! and cluster-robust covariance follow the standard sandwich forms; the
//! cluster estimator applies the finite-sample factor
//! `G/(G-1) * (N-1)/(N-K)`, so with every observation in its own cluster it
//! reproduces the HC1 heteroskedasticity-robust estimator exactly.
//!
//! SUR small-sample conventions (documented, per the Wald-comparison
//! contract): each equation's residual variance and the cross-equation
//! covariance use the same `N-K` divisor, sigma_ab = u_a'u_b/(N-K), and
//! Var(b_a - b_b) = (sigma_a^2 + sigma_b^2 - 2 sigma_ab) * [(X'X)^-1]_jj.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::collections::BTreeMap;

use crate::{Error, Result};

pub mod dist;

/// Which fixed-effect families were absorbed before the fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FeFlags {
    pub firm: bool,
    pub year: bool,
}

/// A fitted least-squares regression with plain and (optionally)
/// cluster-robust covariance.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
    pub vcov_plain: DMatrix<f64>,
    pub vcov_clustered: Option<DMatrix<f64>>,
    pub n_obs: usize,
    pub n_params: usize,
    pub adj_r2: f64,
    pub fe_absorbed: FeFlags,
    xtx_inv: DMatrix<f64>,
    rss: f64,
}

impl RegressionFit {
    /// Plain (homoskedastic) standard error of coefficient `j`.
    pub fn se_plain(&self, j: usize) -> f64 {
        self.vcov_plain[(j, j)].max(0.0).sqrt()
    }

    /// Cluster-robust standard error of coefficient `j`, if clusters were given.
    pub fn se_clustered(&self, j: usize) -> Option<f64> {
        self.vcov_clustered.as_ref().map(|v| v[(j, j)].max(0.0).sqrt())
    }

    /// t-statistic for coefficient `j`, using the clustered SE when present.
    pub fn t_stat(&self, j: usize) -> f64 {
        let se = self
            .se_clustered(j)
            .unwrap_or_else(|| self.se_plain(j));
        self.coefficients[j] / se
    }

    /// Residual sum of squares.
    pub fn rss(&self) -> f64 {
        self.rss
    }

    /// Recompute the adjusted R² charging `extra_df` absorbed parameters
    /// (firm/year effect levels removed by demeaning) against the residual
    /// degrees of freedom, and record which effect families were absorbed.
    pub fn with_absorbed(mut self, flags: FeFlags, extra_df: usize, tss_original: f64) -> Self {
        self.fe_absorbed = flags;
        let df_resid = self.n_obs as f64 - self.n_params as f64 - extra_df as f64;
        if df_resid > 0.0 && tss_original > 0.0 {
            self.adj_r2 =
                1.0 - (self.rss / df_resid) / (tss_original / (self.n_obs as f64 - 1.0));
        }
        self
    }

    /// Table-shaped export: one row per coefficient.
    pub fn summary(&self, names: Option<&[String]>) -> FitSummary {
        let rows = (0..self.n_params)
            .map(|j| CoefficientRow {
                name: names
                    .and_then(|n| n.get(j).cloned())
                    .unwrap_or_else(|| format!("col{j}")),
                coefficient: self.coefficients[j],
                se_plain: self.se_plain(j),
                se_clustered: self.se_clustered(j),
                t_stat: self.t_stat(j),
            })
            .collect();
        FitSummary {
            coefficients: rows,
            n_obs: self.n_obs,
            adj_r2: self.adj_r2,
            firm_fe: self.fe_absorbed.firm,
            year_fe: self.fe_absorbed.year,
        }
    }
}

/// JSON-facing view of a fit, shaped like a regression-table column.
#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub coefficients: Vec<CoefficientRow>,
    pub n_obs: usize,
    pub adj_r2: f64,
    pub firm_fe: bool,
    pub year_fe: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientRow {
    pub name: String,
    pub coefficient: f64,
    pub se_plain: f64,
    pub se_clustered: Option<f64>,
    pub t_stat: f64,
}

/// Result of an SUR-based Wald comparison of two slope coefficients.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WaldResult {
    pub chi2: f64,
    pub p_value: f64,
    pub df: usize,
}

/// Ordinary least squares of `y` on the columns of `x`.
///
/// `x` must have full column rank; the first linearly dependent column is
/// named in the error. When `cluster_ids` is given, a cluster-robust
/// sandwich covariance is computed alongside the plain one.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>, cluster_ids: Option<&[u64]>) -> Result<RegressionFit> {
    let n = x.nrows();
    let k = x.ncols();
    if n == 0 || k == 0 {
        return Err(Error::Data("empty design matrix".into()));
    }
    if y.len() != n {
        return Err(Error::Shape(format!("y has {} rows, X has {n}", y.len())));
    }
    if n <= k {
        return Err(Error::Data(format!("n_obs ({n}) must exceed n_params ({k})")));
    }
    if let Some(c) = cluster_ids {
        if c.len() != n {
            return Err(Error::Shape(format!("cluster_ids has {} entries, X has {n} rows", c.len())));
        }
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in regression input".into()));
    }

    let qr = x.clone().qr();
    let r = qr.r();

    // With unpivoted Householder QR, |r_jj| is the distance of column j from
    // the span of columns 0..j, so a vanishing diagonal names the first
    // collinear column.
    let scale = (0..k)
        .map(|j| x.column(j).norm())
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    for j in 0..k {
        if r[(j, j)].abs() < 1e-10 * scale {
            return Err(Error::Singular { column: j, name: format!("col{j}") });
        }
    }

    let qt_y = qr.q().transpose() * y;
    let coefficients = r
        .solve_upper_triangular(&qt_y)
        .ok_or_else(|| Error::Numeric("upper-triangular solve failed".into()))?;

    let residuals = y - x * &coefficients;
    let rss: f64 = residuals.iter().map(|u| u * u).sum();

    // (X'X)^-1 = R^-1 R^-T
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::Numeric("triangular inversion failed".into()))?;
    let xtx_inv = &r_inv * r_inv.transpose();

    let sigma2 = rss / (n - k) as f64;
    let vcov_plain = &xtx_inv * sigma2;

    let y_mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum();
    let adj_r2 = if tss > 0.0 {
        1.0 - (rss / (n - k) as f64) / (tss / (n - 1) as f64)
    } else {
        0.0
    };

    let vcov_clustered = match cluster_ids {
        Some(ids) => Some(cluster_vcov(x, &residuals, ids, &xtx_inv)?),
        None => None,
    };

    Ok(RegressionFit {
        coefficients,
        residuals,
        vcov_plain,
        vcov_clustered,
        n_obs: n,
        n_params: k,
        adj_r2,
        fe_absorbed: FeFlags::default(),
        xtx_inv,
        rss,
    })
}

fn cluster_vcov(
    x: &DMatrix<f64>,
    residuals: &DVector<f64>,
    ids: &[u64],
    xtx_inv: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let k = x.ncols();
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        groups.entry(*id).or_default().push(i);
    }
    let g = groups.len();
    if g < 2 {
        return Err(Error::Parameter("cluster-robust covariance needs at least 2 clusters".into()));
    }
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for rows in groups.values() {
        let mut score = DVector::<f64>::zeros(k);
        for &i in rows {
            for j in 0..k {
                score[j] += x[(i, j)] * residuals[i];
            }
        }
        meat += &score * score.transpose();
    }
    let factor =
        (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k as f64));
    Ok(xtx_inv * meat * xtx_inv * factor)
}

/// Two-way within transform: iteratively demeans `values` by firm then by
/// year until the largest absolute change in a full sweep drops below 1e-10
/// (at most 100 sweeps). The result is orthogonal to both effect families.
pub fn two_way_within(values: &[f64], firm_ids: &[u64], year_ids: &[i64]) -> Result<Vec<f64>> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Data("empty input to two-way demeaning".into()));
    }
    if firm_ids.len() != n || year_ids.len() != n {
        return Err(Error::Shape("firm/year id lengths differ from values".into()));
    }

    let mut firm_groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, f) in firm_ids.iter().enumerate() {
        firm_groups.entry(*f).or_default().push(i);
    }
    let mut year_groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, yr) in year_ids.iter().enumerate() {
        year_groups.entry(*yr).or_default().push(i);
    }

    let mut v = values.to_vec();
    let mut trace = Vec::new();
    for _ in 0..100 {
        let before = v.clone();
        for rows in firm_groups.values() {
            let mean: f64 = rows.iter().map(|&i| v[i]).sum::<f64>() / rows.len() as f64;
            for &i in rows {
                v[i] -= mean;
            }
        }
        for rows in year_groups.values() {
            let mean: f64 = rows.iter().map(|&i| v[i]).sum::<f64>() / rows.len() as f64;
            for &i in rows {
                v[i] -= mean;
            }
        }
        let delta = v
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        trace.push(delta);
        if delta < 1e-10 {
            return Ok(v);
        }
    }
    let tail: Vec<f64> = trace.iter().rev().take(5).rev().copied().collect();
    Err(Error::Numeric(format!(
        "two-way demeaning did not converge in 100 sweeps; last deltas {tail:?}"
    )))
}

/// Applies [`two_way_within`] to every column of a matrix.
pub fn two_way_within_matrix(
    x: &DMatrix<f64>,
    firm_ids: &[u64],
    year_ids: &[i64],
) -> Result<DMatrix<f64>> {
    let mut out = x.clone();
    for j in 0..x.ncols() {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let demeaned = two_way_within(&col, firm_ids, year_ids)?;
        for (i, v) in demeaned.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// SUR-based Wald test of H0: the `coef_index`-th coefficients of two fits
/// are equal. The fits must come from the same observations and regressor
/// matrix, differing only in the dependent variable; with identical
/// regressors, SUR point estimates coincide with equation-by-equation OLS
/// and only the cross-equation residual covariance is needed.
pub fn sur_wald(fit_a: &RegressionFit, fit_b: &RegressionFit, coef_index: usize) -> Result<WaldResult> {
    if fit_a.n_obs != fit_b.n_obs || fit_a.n_params != fit_b.n_params {
        return Err(Error::Alignment(format!(
            "fits have different shapes: ({}, {}) vs ({}, {})",
            fit_a.n_obs, fit_a.n_params, fit_b.n_obs, fit_b.n_params
        )));
    }
    if coef_index >= fit_a.n_params {
        return Err(Error::Range(format!(
            "coefficient index {coef_index} out of range for {} parameters",
            fit_a.n_params
        )));
    }
    // Same X implies same (X'X)^-1; a mismatch means the fits were not run
    // on an identical design.
    let scale = fit_a.xtx_inv.amax().max(f64::MIN_POSITIVE);
    let diff = (&fit_a.xtx_inv - &fit_b.xtx_inv).amax();
    if diff > 1e-8 * scale {
        return Err(Error::Alignment(
            "fits were not estimated on the same regressor matrix".into(),
        ));
    }

    let n = fit_a.n_obs as f64;
    let k = fit_a.n_params as f64;
    let df_resid = n - k;
    let sigma_aa = fit_a.rss / df_resid;
    let sigma_bb = fit_b.rss / df_resid;
    let sigma_ab = fit_a.residuals.dot(&fit_b.residuals) / df_resid;

    let jj = fit_a.xtx_inv[(coef_index, coef_index)];
    let var = ((sigma_aa + sigma_bb - 2.0 * sigma_ab) * jj).max(0.0);
    let delta = fit_a.coefficients[coef_index] - fit_b.coefficients[coef_index];

    let beta_scale = fit_a.coefficients[coef_index]
        .abs()
        .max(fit_b.coefficients[coef_index].abs())
        .max(1.0);
    let chi2 = if delta.abs() <= 1e-12 * beta_scale {
        0.0
    } else if var == 0.0 {
        f64::INFINITY
    } else {
        delta * delta / var
    };
    Ok(WaldResult { chi2, p_value: dist::chi2_sf_1(chi2), df: 1 })
}

/// Diebold–Mariano comparison of two per-period mean-loss series.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DmTest {
    /// Positive values favor forecaster `a` (lower loss).
    pub dm_stat: f64,
    pub p_value: f64,
    pub nw_lag: usize,
}

/// DM test on per-period mean losses. `d_t = loss_b_t - loss_a_t`, so a
/// positive statistic favors `a`. The long-run variance of the mean uses a
/// Newey–West (Bartlett) estimator with lag floor(T^(1/3)).
pub fn diebold_mariano(loss_a: &[f64], loss_b: &[f64]) -> Result<DmTest> {
    let t = loss_a.len();
    if loss_b.len() != t {
        return Err(Error::Shape("loss series have different lengths".into()));
    }
    if t < 8 {
        return Err(Error::Data(format!("need at least 8 periods, got {t}")));
    }
    let d: Vec<f64> = loss_a.iter().zip(loss_b).map(|(a, b)| b - a).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate(
            "identical per-period losses; forecasts are indistinguishable".into(),
        ));
    }
    let tf = t as f64;
    let dbar: f64 = d.iter().sum::<f64>() / tf;
    let lag = tf.cbrt().floor() as usize;
    let centered: Vec<f64> = d.iter().map(|v| v - dbar).collect();
    let gamma = |l: usize| -> f64 {
        centered[l..]
            .iter()
            .zip(&centered[..t - l])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / tf
    };
    let mut lrv = gamma(0);
    for l in 1..=lag.min(t - 1) {
        let w = 1.0 - l as f64 / (lag as f64 + 1.0);
        lrv += 2.0 * w * gamma(l);
    }
    // The Bartlett kernel keeps lrv nonnegative; it is zero only when the
    // loss differential is constant, in which case the sign is still exact.
    let dm_stat = if lrv <= 0.0 {
        if dbar > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    } else {
        dbar / (lrv / tf).sqrt()
    };
    let p_value = if dm_stat.is_finite() {
        dist::normal_p_two_sided(dm_stat)
    } else {
        0.0
    };
    Ok(DmTest { dm_stat, p_value, nw_lag: lag })
}

/// Mean squared error of forecasts against actuals.
pub fn mse(actuals: &[f64], forecasts: &[f64]) -> Result<f64> {
    if actuals.is_empty() {
        return Err(Error::Data("empty input to mse".into()));
    }
    if actuals.len() != forecasts.len() {
        return Err(Error::Shape("actuals and forecasts differ in length".into()));
    }
    Ok(actuals
        .iter()
        .zip(forecasts)
        .map(|(a, f)| (a - f) * (a - f))
        .sum::<f64>()
        / actuals.len() as f64)
}

/// Out-of-sample R² against a naive benchmark (typically the lagged actual).
/// Not bounded below by zero: a forecast worse than the benchmark goes
/// negative.
pub fn oos_r2(actuals: &[f64], forecasts: &[f64], naive: &[f64]) -> Result<f64> {
    if actuals.is_empty() {
        return Err(Error::Data("empty input to oos_r2".into()));
    }
    if actuals.len() != forecasts.len() || actuals.len() != naive.len() {
        return Err(Error::Shape("oos_r2 inputs differ in length".into()));
    }
    let sse: f64 = actuals.iter().zip(forecasts).map(|(a, f)| (a - f) * (a - f)).sum();
    let sse_naive: f64 = actuals.iter().zip(naive).map(|(a, b)| (a - b) * (a - b)).sum();
    if sse_naive == 0.0 {
        return Err(Error::Degenerate("naive benchmark has zero error".into()));
    }
    Ok(1.0 - sse / sse_naive)
}

/// Spearman rank correlation with a large-sample normal test.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpearmanTest {
    pub rho: f64,
    /// Large-sample statistic z = rho * sqrt(n - 1).
    pub z: f64,
    /// One-sided p-value for H1: rho > 0.
    pub p_positive: f64,
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<SpearmanTest> {
    let n = xs.len();
    if ys.len() != n {
        return Err(Error::Shape("spearman inputs differ in length".into()));
    }
    if n < 3 {
        return Err(Error::Data("spearman needs at least 3 observations".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("constant ranks in spearman input".into()));
    }
    let rho = sxy / (sxx.sqrt() * syy.sqrt());
    let z = rho * ((n - 1) as f64).sqrt();
    Ok(SpearmanTest { rho, z, p_positive: 1.0 - dist::normal_cdf(z) })
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("non-finite rank input"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = avg;
        }
        i = j + 1;
    }
    ranks
}
