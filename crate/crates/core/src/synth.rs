//! Synthetic panel generator and the diagnostic-expectations forecast rule.
//!
//! Outcomes follow the AR(1)-plus-firm-component process
//! `x_{i,t+1} = delta * x_{i,t} + f(z_{i,t}) + eps_{i,t+1}` with
//! `eps ~ N(0, sigma_eps^2)` i.i.d. across firms and years, and forecasts
//! follow `F_t x_{i,t+1} = delta_hat * x_{i,t} + f_hat(z_{i,t}) +
//! theta * delta_hat * eps_{i,t}`. Every latent draw is recorded on the
//! observation, so downstream regressions have exact oracles.
//!
//! RNG scheme: one ChaCha12 generator per firm, keyed by the panel seed with
//! the ChaCha stream index set to `firm_index + 1` (stream 0 is reserved for
//! panel-level draws). Adding firms therefore never perturbs existing firms'
//! draws, and per-firm generation can run in parallel with results that are
//! independent of scheduling. Within a firm's stream the draw order is fixed:
//! initial condition, all z's, all innovations, all investment noises, then
//! noise features year by year.
//!
//! Monthly granularity: outcomes are annual; the 12 monthly rows of a fiscal
//! year replicate the annual outcome and differ only in the month stamp
//! (feature column 3). Fiscal years all end in December.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::harness::{ForecastPanel, ForecastRecord, Forecaster};
use crate::{Error, Result};

/// Feature column layout of synthetic panels. The CSV header names columns
/// `feat_0..feat_k`; these constants give them meaning.
pub const FEAT_LAG_OUTCOME: usize = 0;
/// Firm covariate z of the current year.
pub const FEAT_Z: usize = 1;
/// Analyst consensus forecast (default analyst type) for next year's outcome.
pub const FEAT_ANALYST: usize = 2;
/// Month stamp, 1..=12.
pub const FEAT_MONTH: usize = 3;
/// First pure-noise predictor column.
pub const FEAT_NOISE_START: usize = 4;

/// First fiscal year of every synthetic panel.
pub const START_YEAR: i32 = 2000;

const BURN_IN_YEARS: usize = 2;
const INVESTMENT_SLOPE: f64 = 1.0;
const INVESTMENT_NOISE_SD: f64 = 0.05;

/// Firm-component specification f(z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum FSpec {
    /// f(z) = 0.
    #[serde(rename = "zero")]
    Zero,
    /// f(z) = coefficient * z.
    #[serde(rename = "linear-in-z")]
    LinearInZ { coefficient: f64 },
    /// f(z) = low for z <= threshold, high otherwise.
    #[serde(rename = "step")]
    Step { threshold: f64, low: f64, high: f64 },
}

impl FSpec {
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            FSpec::Zero => 0.0,
            FSpec::LinearInZ { coefficient } => coefficient * z,
            FSpec::Step { threshold, low, high } => {
                if z <= threshold {
                    low
                } else {
                    high
                }
            }
        }
    }
}

/// Parameters of the synthetic data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub n_firms: usize,
    pub n_years: usize,
    /// Persistence, |delta| < 1.
    pub delta: f64,
    /// Overreaction of the default analyst type, >= 0.
    pub theta: f64,
    /// Overreaction of the "tech" analyst type.
    pub theta_tech: f64,
    /// Innovation standard deviation, > 0.
    pub sigma_eps: f64,
    pub f_spec: FSpec,
    /// Standard deviation of the firm covariate z.
    pub sigma_z: f64,
    /// Number of pure-noise predictor columns.
    pub n_features_noise: usize,
    pub seed: u64,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.delta.abs() >= 1.0 {
            return Err(Error::Parameter(format!("|delta| must be < 1, got {}", self.delta)));
        }
        if !(self.sigma_eps > 0.0) {
            return Err(Error::Parameter(format!("sigma_eps must be > 0, got {}", self.sigma_eps)));
        }
        if self.n_firms < 2 {
            return Err(Error::Parameter(format!("n_firms must be >= 2, got {}", self.n_firms)));
        }
        if self.n_years < 3 {
            return Err(Error::Parameter(format!("n_years must be >= 3, got {}", self.n_years)));
        }
        if self.theta < 0.0 || self.theta_tech < 0.0 {
            return Err(Error::Parameter("theta values must be >= 0".into()));
        }
        if self.sigma_z < 0.0 {
            return Err(Error::Parameter(format!("sigma_z must be >= 0, got {}", self.sigma_z)));
        }
        Ok(())
    }

    /// The configuration used throughout the synthetic experiments:
    /// 50 firms x 20 years, delta = 0.785, theta = 0.991, unit innovation
    /// variance, linear firm component.
    pub fn standard(seed: u64) -> Self {
        SynthParams {
            n_firms: 50,
            n_years: 20,
            delta: 0.785,
            theta: 0.991,
            theta_tech: 0.3,
            sigma_eps: 1.0,
            f_spec: FSpec::LinearInZ { coefficient: 0.5 },
            sigma_z: 1.0,
            n_features_noise: 3,
            seed,
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let p: SynthParams = serde_json::from_str(json)?;
        p.validate()?;
        Ok(p)
    }
}

/// One firm-year-month row of a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelObservation {
    pub firm_id: String,
    pub fiscal_year: i32,
    pub month: u8,
    /// Earnings-like outcome of the fiscal year (replicated across months).
    pub outcome: f64,
    /// Scaled investment, >= 0; a monotone noisy transform of date-t news.
    pub investment: f64,
    pub latent_eps: Option<f64>,
    pub latent_z: Option<f64>,
    pub features: Vec<f64>,
}

/// Where a panel came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic(SynthParams),
    File(String),
}

/// A long-format firm x year-month panel, sorted by (firm_id, fiscal_year,
/// month), with a constant feature-vector length.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub observations: Vec<PanelObservation>,
    pub feature_names: Vec<String>,
    pub provenance: Provenance,
}

impl PanelDataset {
    /// Rows stamped December — one per firm-year, carrying the annual data.
    pub fn december_rows(&self) -> impl Iterator<Item = &PanelObservation> {
        self.observations.iter().filter(|o| o.month == 12)
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Sorted list of distinct fiscal years.
    pub fn years(&self) -> Vec<i32> {
        let mut ys: Vec<i32> = self.observations.iter().map(|o| o.fiscal_year).collect();
        ys.sort_unstable();
        ys.dedup();
        ys
    }

    /// Sorted list of distinct firm ids.
    pub fn firm_ids(&self) -> Vec<String> {
        let mut f: Vec<String> = self.observations.iter().map(|o| o.firm_id.clone()).collect();
        f.sort();
        f.dedup();
        f
    }

    /// Realized outcome per (firm, fiscal year).
    pub fn realized(&self) -> std::collections::BTreeMap<(String, i32), f64> {
        self.december_rows()
            .map(|o| ((o.firm_id.clone(), o.fiscal_year), o.outcome))
            .collect()
    }

    fn check_sorted_unique(&self) -> Result<()> {
        for w in self.observations.windows(2) {
            let a = (&w[0].firm_id, w[0].fiscal_year, w[0].month);
            let b = (&w[1].firm_id, w[1].fiscal_year, w[1].month);
            if a >= b {
                return Err(Error::Data(format!("panel rows not sorted/unique at {a:?} vs {b:?}")));
            }
        }
        Ok(())
    }

    /// Writes the panel as CSV: `firm_id,fiscal_year,month,outcome,investment,
    /// latent_eps,latent_z,feat_0,...`. Empty field means an absent latent.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec![
            "firm_id".to_string(),
            "fiscal_year".to_string(),
            "month".to_string(),
            "outcome".to_string(),
            "investment".to_string(),
            "latent_eps".to_string(),
            "latent_z".to_string(),
        ];
        header.extend(self.feature_names.iter().cloned());
        wtr.write_record(&header)?;
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for o in &self.observations {
            let mut rec = vec![
                o.firm_id.clone(),
                o.fiscal_year.to_string(),
                o.month.to_string(),
                o.outcome.to_string(),
                o.investment.to_string(),
                fmt_opt(o.latent_eps),
                fmt_opt(o.latent_z),
            ];
            rec.extend(o.features.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }

    /// Reads a panel from CSV written by [`PanelDataset::write_csv`].
    pub fn read_csv<R: Read>(r: R, origin: &str) -> Result<PanelDataset> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let fixed =
            ["firm_id", "fiscal_year", "month", "outcome", "investment", "latent_eps", "latent_z"];
        if headers.len() < fixed.len() {
            return Err(Error::Data("panel CSV is missing required columns".into()));
        }
        for (i, name) in fixed.iter().enumerate() {
            if &headers[i] != *name {
                return Err(Error::Data(format!(
                    "panel CSV column {i} must be '{name}', found '{}'",
                    &headers[i]
                )));
            }
        }
        let feature_names: Vec<String> =
            headers.iter().skip(fixed.len()).map(|s| s.to_string()).collect();
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|e| Error::Data(format!("bad float '{s}': {e}")))
            }
        };
        let mut observations = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let features = (fixed.len()..rec.len())
                .map(|i| {
                    rec[i]
                        .parse::<f64>()
                        .map_err(|e| Error::Data(format!("bad feature '{}': {e}", &rec[i])))
                })
                .collect::<Result<Vec<f64>>>()?;
            if features.len() != feature_names.len() {
                return Err(Error::Data("inconsistent feature vector length".into()));
            }
            observations.push(PanelObservation {
                firm_id: rec[0].to_string(),
                fiscal_year: rec[1].parse().map_err(|e| Error::Data(format!("bad year: {e}")))?,
                month: rec[2].parse().map_err(|e| Error::Data(format!("bad month: {e}")))?,
                outcome: rec[3].parse().map_err(|e| Error::Data(format!("bad outcome: {e}")))?,
                investment: rec[4]
                    .parse()
                    .map_err(|e| Error::Data(format!("bad investment: {e}")))?,
                latent_eps: parse_opt(&rec[5])?,
                latent_z: parse_opt(&rec[6])?,
                features,
            });
        }
        let panel = PanelDataset {
            observations,
            feature_names,
            provenance: Provenance::File(origin.to_string()),
        };
        panel.check_sorted_unique()?;
        Ok(panel)
    }
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

struct FirmBlock {
    /// Annual series over the retained years.
    outcome: Vec<f64>,
    lag_outcome: Vec<f64>,
    investment: Vec<f64>,
    eps: Vec<f64>,
    z: Vec<f64>,
    analyst: Vec<f64>,
    noise: Vec<Vec<f64>>,
}

fn simulate_firm(params: &SynthParams, firm_index: usize) -> FirmBlock {
    let mut rng = ChaCha12Rng::seed_from_u64(params.seed);
    rng.set_stream(firm_index as u64 + 1);

    let total = params.n_years + BURN_IN_YEARS;
    let stationary_sd = params.sigma_eps / (1.0 - params.delta * params.delta).sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let x0 = std_normal.sample(&mut rng) * stationary_sd;
    let z: Vec<f64> = (0..total).map(|_| std_normal.sample(&mut rng) * params.sigma_z).collect();
    let mut eps = vec![0.0; total];
    for e in eps.iter_mut().skip(1) {
        *e = std_normal.sample(&mut rng) * params.sigma_eps;
    }
    let nu: Vec<f64> =
        (0..total).map(|_| std_normal.sample(&mut rng) * INVESTMENT_NOISE_SD).collect();
    let noise_draws: Vec<Vec<f64>> = (0..total)
        .map(|_| (0..params.n_features_noise).map(|_| std_normal.sample(&mut rng)).collect())
        .collect();

    let mut x = vec![0.0; total];
    x[0] = x0;
    for t in 1..total {
        x[t] = params.delta * x[t - 1] + params.f_spec.eval(z[t - 1]) + eps[t];
    }

    let keep = BURN_IN_YEARS..total;
    let mut block = FirmBlock {
        outcome: Vec::with_capacity(params.n_years),
        lag_outcome: Vec::with_capacity(params.n_years),
        investment: Vec::with_capacity(params.n_years),
        eps: Vec::with_capacity(params.n_years),
        z: Vec::with_capacity(params.n_years),
        analyst: Vec::with_capacity(params.n_years),
        noise: Vec::with_capacity(params.n_years),
    };
    for t in keep {
        let news = x[t] - params.delta * x[t - 1];
        let inv = (logistic(INVESTMENT_SLOPE * news) + nu[t]).max(0.0);
        // Diagnostic-expectations forecast of x_{t+1} by the default analyst
        // type, with the true delta and f.
        let forecast =
            params.delta * x[t] + params.f_spec.eval(z[t]) + params.theta * params.delta * eps[t];
        block.outcome.push(x[t]);
        block.lag_outcome.push(x[t - 1]);
        block.investment.push(inv);
        block.eps.push(eps[t]);
        block.z.push(z[t]);
        block.analyst.push(forecast);
        block.noise.push(noise_draws[t].clone());
    }
    block
}

/// Generates a synthetic panel. Deterministic given `params` (including the
/// seed) and independent of thread scheduling.
pub fn generate_synthetic_panel(params: &SynthParams) -> Result<PanelDataset> {
    params.validate()?;
    let blocks: Vec<FirmBlock> =
        (0..params.n_firms).into_par_iter().map(|i| simulate_firm(params, i)).collect();

    let n_feat = FEAT_NOISE_START + params.n_features_noise;
    let feature_names: Vec<String> = (0..n_feat).map(|i| format!("feat_{i}")).collect();

    let mut observations = Vec::with_capacity(params.n_firms * params.n_years * 12);
    for (fi, block) in blocks.iter().enumerate() {
        let firm_id = format!("F{fi:05}");
        for (yi, year) in (0..params.n_years).map(|y| (y, START_YEAR + y as i32)) {
            for month in 1..=12u8 {
                let mut features = Vec::with_capacity(n_feat);
                features.push(block.lag_outcome[yi]);
                features.push(block.z[yi]);
                features.push(block.analyst[yi]);
                features.push(month as f64);
                features.extend_from_slice(&block.noise[yi]);
                observations.push(PanelObservation {
                    firm_id: firm_id.clone(),
                    fiscal_year: year,
                    month,
                    outcome: block.outcome[yi],
                    investment: block.investment[yi],
                    latent_eps: Some(block.eps[yi]),
                    latent_z: Some(block.z[yi]),
                    features,
                });
            }
        }
    }
    let panel = PanelDataset {
        observations,
        feature_names,
        provenance: Provenance::Synthetic(params.clone()),
    };
    panel.check_sorted_unique()?;
    Ok(panel)
}

/// Applies the diagnostic-expectations rule to a synthetic panel: one
/// forecast per firm-fiscal-year (replicated across the 12 forecast months)
/// of next year's outcome,
/// `F_t x_{t+1} = delta_hat * x_t + f_hat(z_t) + theta * delta_hat * eps_t`.
///
/// With `theta = 0`, `delta_hat` equal to the true persistence and `f_hat`
/// the true firm component, the forecast is the rational conditional mean.
pub fn generate_analyst_forecasts(
    panel: &PanelDataset,
    theta: f64,
    delta_hat: f64,
    f_hat_spec: &FSpec,
) -> Result<ForecastPanel> {
    let realized = panel.realized();
    let mut records = Vec::new();
    for o in panel.december_rows() {
        let target = o.fiscal_year + 1;
        if !realized.contains_key(&(o.firm_id.clone(), target)) {
            continue;
        }
        let eps = o.latent_eps.ok_or_else(|| {
            Error::OracleUnavailable(format!(
                "panel row {} {} has no recorded latent shock",
                o.firm_id, o.fiscal_year
            ))
        })?;
        let z = o.latent_z.ok_or_else(|| {
            Error::OracleUnavailable(format!(
                "panel row {} {} has no recorded latent covariate",
                o.firm_id, o.fiscal_year
            ))
        })?;
        let value = delta_hat * o.outcome + f_hat_spec.eval(z) + theta * delta_hat * eps;
        for month in 1..=12u8 {
            records.push(ForecastRecord {
                firm_id: o.firm_id.clone(),
                fiscal_year: target,
                horizon_months: 24 - month as u32,
                made_year: o.fiscal_year,
                made_month: month,
                forecaster: Forecaster::Analyst,
                value,
            });
        }
    }
    ForecastPanel::from_records(records, realized, Vec::new())
}

/// Closed-form overreaction slope `-theta * delta * var_eps / var_y` for a
/// regression of forecast errors on a date-t shock proxy with variance
/// `var_y`.
pub fn analytic_overreaction_beta(theta: f64, delta: f64, var_eps: f64, var_y: f64) -> Result<f64> {
    if !(var_y > 0.0) {
        return Err(Error::Parameter(format!("var_y must be > 0, got {var_y}")));
    }
    if var_eps < 0.0 {
        return Err(Error::Parameter(format!("var_eps must be >= 0, got {var_eps}")));
    }
    Ok(-theta * delta * var_eps / var_y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny(seed: u64) -> SynthParams {
        SynthParams {
            n_firms: 4,
            n_years: 6,
            delta: 0.5,
            theta: 0.9,
            theta_tech: 0.2,
            sigma_eps: 1.0,
            f_spec: FSpec::LinearInZ { coefficient: 0.4 },
            sigma_z: 1.0,
            n_features_noise: 2,
            seed,
        }
    }

    /// Pooled within-firm lag-1 autocorrelation of the annual outcome.
    fn lag1_autocorr(panel: &PanelDataset) -> f64 {
        let mut series: std::collections::BTreeMap<&str, Vec<(i32, f64)>> = Default::default();
        for o in panel.december_rows() {
            series.entry(&o.firm_id).or_default().push((o.fiscal_year, o.outcome));
        }
        let all: Vec<f64> = series.values().flatten().map(|&(_, v)| v).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;
        let mut cov = 0.0;
        let mut count = 0usize;
        for s in series.values() {
            for w in s.windows(2) {
                cov += (w[0].1 - mean) * (w[1].1 - mean);
                count += 1;
            }
        }
        (cov / count as f64) / var
    }

    #[test]
    fn rejects_invalid_params() {
        let mut p = tiny(1);
        p.delta = 1.0;
        assert!(matches!(generate_synthetic_panel(&p), Err(Error::Parameter(_))));
        let mut p = tiny(1);
        p.sigma_eps = 0.0;
        assert!(p.validate().is_err());
        let mut p = tiny(1);
        p.n_firms = 1;
        assert!(p.validate().is_err());
        let mut p = tiny(1);
        p.n_years = 2;
        assert!(p.validate().is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let p = tiny(42);
        let a = generate_synthetic_panel(&p).unwrap();
        let b = generate_synthetic_panel(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv_bytes().unwrap(), b.to_csv_bytes().unwrap());
        let c = generate_synthetic_panel(&tiny(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn adding_firms_keeps_existing_draws() {
        let small = tiny(7);
        let mut big = tiny(7);
        big.n_firms = small.n_firms + 3;
        let a = generate_synthetic_panel(&small).unwrap();
        let b = generate_synthetic_panel(&big).unwrap();
        let firms = a.firm_ids();
        let b_subset: Vec<&PanelObservation> =
            b.observations.iter().filter(|o| firms.contains(&o.firm_id)).collect();
        assert_eq!(a.observations.len(), b_subset.len());
        for (x, y) in a.observations.iter().zip(b_subset) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn zero_persistence_kills_autocorrelation() {
        let p = SynthParams {
            n_firms: 5000,
            n_years: 20,
            delta: 0.0,
            theta: 0.0,
            theta_tech: 0.0,
            sigma_eps: 1.0,
            f_spec: FSpec::Zero,
            sigma_z: 1.0,
            n_features_noise: 0,
            seed: 11,
        };
        let panel = generate_synthetic_panel(&p).unwrap();
        assert!(lag1_autocorr(&panel).abs() < 0.02);
    }

    #[test]
    fn persistence_is_recovered_in_the_sample() {
        let p = SynthParams {
            n_firms: 5000,
            n_years: 20,
            delta: 0.785,
            theta: 0.0,
            theta_tech: 0.0,
            sigma_eps: 1.0,
            f_spec: FSpec::Zero,
            sigma_z: 1.0,
            n_features_noise: 0,
            seed: 12,
        };
        let panel = generate_synthetic_panel(&p).unwrap();
        let rho = lag1_autocorr(&panel);
        assert!((rho - 0.785).abs() < 0.01, "lag-1 autocorr {rho}");
    }

    #[test]
    fn moments_match_analytic_values() {
        let p = SynthParams {
            n_firms: 5000,
            n_years: 20,
            delta: 0.6,
            theta: 0.0,
            theta_tech: 0.0,
            sigma_eps: 1.5,
            f_spec: FSpec::Zero,
            sigma_z: 1.0,
            n_features_noise: 0,
            seed: 13,
        };
        let panel = generate_synthetic_panel(&p).unwrap();
        let eps: Vec<f64> = panel.december_rows().map(|o| o.latent_eps.unwrap()).collect();
        let xs: Vec<f64> = panel.december_rows().map(|o| o.outcome).collect();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
        };
        let var_eps = var(&eps);
        let var_x = var(&xs);
        let expect_eps = 1.5 * 1.5;
        let expect_x = expect_eps / (1.0 - 0.6 * 0.6);
        assert!((var_eps - expect_eps).abs() / expect_eps < 0.02, "var_eps {var_eps}");
        assert!((var_x - expect_x).abs() / expect_x < 0.02, "var_x {var_x}");
    }

    #[test]
    fn investment_tracks_news() {
        let p = SynthParams { n_firms: 500, ..tiny(3) };
        let panel = generate_synthetic_panel(&p).unwrap();
        let pairs: Vec<(f64, f64)> =
            panel.december_rows().map(|o| (o.latent_eps.unwrap(), o.investment)).collect();
        let n = pairs.len() as f64;
        let me = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let mi = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let cov: f64 = pairs.iter().map(|(e, i)| (e - me) * (i - mi)).sum::<f64>() / n;
        assert!(cov > 0.0, "investment must covary positively with the date-t shock");
        assert!(pairs.iter().all(|p| p.1 >= 0.0));
    }

    #[test]
    fn rational_forecast_errors_are_next_innovations() {
        let p = tiny(21);
        let panel = generate_synthetic_panel(&p).unwrap();
        let fp = generate_analyst_forecasts(&panel, 0.0, p.delta, &p.f_spec).unwrap();
        let eps_by_fy: std::collections::BTreeMap<(String, i32), f64> = panel
            .december_rows()
            .map(|o| ((o.firm_id.clone(), o.fiscal_year), o.latent_eps.unwrap()))
            .collect();
        let errors = fp.consensus_errors(Forecaster::Analyst);
        assert!(!errors.is_empty());
        for ((firm, year), err) in errors {
            let eps_next = eps_by_fy[&(firm, year)];
            assert_relative_eq!(err, eps_next, epsilon = 1e-12);
        }
    }

    #[test]
    fn forecast_mse_decomposition_matches_term_by_term() {
        // delta_hat = delta, f_hat mis-specified, theta > 0: the remaining
        // three components are mutually uncorrelated by construction.
        let p = SynthParams {
            n_firms: 5000,
            n_years: 20,
            delta: 0.7,
            theta: 0.8,
            theta_tech: 0.0,
            sigma_eps: 1.0,
            f_spec: FSpec::LinearInZ { coefficient: 0.5 },
            sigma_z: 1.0,
            n_features_noise: 0,
            seed: 31,
        };
        let panel = generate_synthetic_panel(&p).unwrap();
        let f_hat = FSpec::LinearInZ { coefficient: 0.3 };
        let fp = generate_analyst_forecasts(&panel, p.theta, p.delta, &f_hat).unwrap();
        let realized = panel.realized();
        let by_fy: std::collections::BTreeMap<(String, i32), &PanelObservation> =
            panel.december_rows().map(|o| ((o.firm_id.clone(), o.fiscal_year), o)).collect();

        let mut sq_err = 0.0;
        let mut c_f = 0.0; // E(f - f_hat)^2
        let mut c_th = 0.0; // theta^2 delta_hat^2 E(eps_t^2)
        let mut c_e = 0.0; // E(eps_{t+1}^2)
        let mut n = 0.0;
        for ((firm, target), cons) in fp.consensus(Forecaster::Analyst) {
            let x_next = realized[&(firm.clone(), target)];
            let row = by_fy[&(firm.clone(), target - 1)];
            let eps_next = by_fy[&(firm.clone(), target)].latent_eps.unwrap();
            let z = row.latent_z.unwrap();
            let eps = row.latent_eps.unwrap();
            sq_err += (x_next - cons) * (x_next - cons);
            let df = p.f_spec.eval(z) - f_hat.eval(z);
            c_f += df * df;
            c_th += (p.theta * p.delta * eps) * (p.theta * p.delta * eps);
            c_e += eps_next * eps_next;
            n += 1.0;
        }
        let mse = sq_err / n;
        let sum = c_f / n + c_th / n + c_e / n; // (delta - delta_hat)^2 term is zero
        assert!((mse - sum).abs() / mse < 0.02, "mse {mse} vs component sum {sum}");
        // And against population values.
        let pop = 0.04 * 1.0 + 0.8f64.powi(2) * 0.7f64.powi(2) * 1.0 + 1.0;
        assert!((mse - pop).abs() / pop < 0.02, "mse {mse} vs population {pop}");
    }

    #[test]
    fn analytic_beta_is_the_direct_product() {
        assert_eq!(analytic_overreaction_beta(0.0, 0.785, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(analytic_overreaction_beta(0.991, 0.0, 1.0, 1.0).unwrap(), 0.0);
        let b = analytic_overreaction_beta(0.991, 0.785, 1.0, 1.0).unwrap();
        assert_relative_eq!(b, -(0.991 * 0.785), epsilon = 1e-10);
        assert!(analytic_overreaction_beta(0.9, 0.7, 1.0, 0.0).is_err());
        assert!(analytic_overreaction_beta(0.9, 0.7, 1.0, -1.0).is_err());
    }

    #[test]
    fn missing_latents_are_an_oracle_error() {
        let p = tiny(2);
        let mut panel = generate_synthetic_panel(&p).unwrap();
        for o in &mut panel.observations {
            o.latent_eps = None;
        }
        let r = generate_analyst_forecasts(&panel, 0.5, p.delta, &p.f_spec);
        assert!(matches!(r, Err(Error::OracleUnavailable(_))));
    }

    #[test]
    fn csv_round_trip_preserves_panel() {
        let p = tiny(4);
        let panel = generate_synthetic_panel(&p).unwrap();
        let bytes = panel.to_csv_bytes().unwrap();
        let back = PanelDataset::read_csv(&bytes[..], "roundtrip").unwrap();
        assert_eq!(panel.observations, back.observations);
        assert_eq!(panel.feature_names, back.feature_names);
        // absent latents survive the trip as empty fields
        let mut stripped = panel.clone();
        for o in &mut stripped.observations {
            o.latent_eps = None;
            o.latent_z = None;
        }
        let bytes = stripped.to_csv_bytes().unwrap();
        let back = PanelDataset::read_csv(&bytes[..], "roundtrip").unwrap();
        assert_eq!(stripped.observations, back.observations);
    }

    #[test]
    fn params_json_rejects_unknown_keys() {
        let good = serde_json::to_string(&tiny(5)).unwrap();
        assert!(SynthParams::from_json(&good).is_ok());
        let bad = good.replace("\"seed\":5", "\"seed\":5,\"bogus\":1");
        assert!(SynthParams::from_json(&bad).is_err());
    }
}
