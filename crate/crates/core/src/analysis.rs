//! Sweeps that compare measured errors with the theoretical bounds and rates.
//!
//! Every sweep point draws from its own child seed, so points run in
//! parallel and reports are reproducible bit for bit.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{build_cd_pairs, build_ct_pairs, coupling_w2_empirical, coupling_w2_theory};
use crate::error::{Error, Result};
use crate::matching::{expfam_fit, sandwich_covariance, ExpFamilySpec};
use crate::metrics::{tv_histogram_vs_cdf, vp_tv_bound, w2_bound_best, w2_fitted_gaussian};
use crate::rng::{child_seed, domain};
use crate::sampler::{self, SamplerConfig, Scheme};
use crate::score::ScoreField;
use crate::sde::{DiffusionModel, ModelSpec};
use crate::stats::{fit_line, normal_cdf, Estimate, LineFit};
use crate::target::GaussianMixture;
use crate::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Histogram TV against the VP total-variation bound over `T`.
    TvBound,
    /// OU Wasserstein error against the coupling bound over `T` and `eps`.
    W2Bound,
    /// Euler-Maruyama error against the step size.
    StepOrder,
    /// OU Wasserstein error against the score error at fixed `T`.
    ScoreError,
    /// Score-matching estimator error against the sample size.
    ExpFamilyRate,
    /// Consistency-pair coupling distance, formula against simulation.
    ConsistencyCoupling,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::TvBound => "tv_bound",
            Experiment::W2Bound => "w2_bound",
            Experiment::StepOrder => "step_order",
            Experiment::ScoreError => "score_error",
            Experiment::ExpFamilyRate => "exp_family_rate",
            Experiment::ConsistencyCoupling => "consistency_coupling",
        }
    }

    fn needs_regression(self) -> bool {
        matches!(self, Experiment::StepOrder | Experiment::ExpFamilyRate)
    }
}

/// Sweep description. Unset fields take per-experiment defaults, see
/// [`SweepSpec::resolved`].
///
/// `values` is the swept variable: horizons `T` (tv_bound, w2_bound), step
/// sizes (step_order), score errors (score_error), sample sizes
/// (exp_family_rate) or times `t` (consistency_coupling).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub experiment: Experiment,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    /// Constant score shifts (tv_bound, w2_bound).
    #[serde(default)]
    pub perturbations: Option<Vec<f64>>,
    /// Pair gaps (consistency_coupling).
    #[serde(default)]
    pub deltas: Option<Vec<f64>>,
    #[serde(default)]
    pub samples: Option<usize>,
    /// Sampler steps: total (tv_bound) or per unit time (w2_bound, score_error).
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub bins: Option<usize>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub replications: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

/// A [`SweepSpec`] with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedSweep {
    pub experiment: Experiment,
    pub values: Vec<f64>,
    pub perturbations: Vec<f64>,
    pub deltas: Vec<f64>,
    pub samples: usize,
    pub steps: usize,
    pub bins: usize,
    pub horizon: f64,
    pub dim: usize,
    pub replications: usize,
    pub seed: u64,
}

impl SweepSpec {
    pub fn new(experiment: Experiment, seed: u64) -> Self {
        Self {
            experiment,
            values: None,
            perturbations: None,
            deltas: None,
            samples: None,
            steps: None,
            bins: None,
            horizon: None,
            dim: None,
            replications: None,
            seed,
        }
    }

    pub fn resolved(&self) -> Result<ResolvedSweep> {
        let e = self.experiment;
        let (values, samples, steps, replications): (Vec<f64>, usize, usize, usize) = match e {
            Experiment::TvBound => (vec![0.5, 1.0, 2.0, 4.0], 50_000, 1500, 1),
            Experiment::W2Bound => (vec![1.0, 2.0, 4.0], 100_000, 250, 1),
            Experiment::StepOrder => (vec![1.0 / 50.0, 1.0 / 100.0, 1.0 / 200.0, 1.0 / 400.0], 200_000, 0, 1),
            Experiment::ScoreError => (vec![0.0, 0.05, 0.1, 0.2], 100_000, 250, 1),
            Experiment::ExpFamilyRate => (vec![1e2, 1e3, 1e4, 1e5], 0, 0, 1000),
            Experiment::ConsistencyCoupling => (vec![0.25, 0.5, 1.0], 100_000, 0, 4),
        };
        let r = ResolvedSweep {
            experiment: e,
            values: self.values.clone().unwrap_or(values),
            perturbations: self.perturbations.clone().unwrap_or_else(|| match e {
                Experiment::W2Bound => vec![0.0, 0.1, 0.2],
                _ => vec![0.0, 0.1],
            }),
            deltas: self.deltas.clone().unwrap_or_else(|| vec![0.05, 0.1, 0.2]),
            samples: self.samples.unwrap_or(samples),
            steps: self.steps.unwrap_or(steps),
            bins: self.bins.unwrap_or(100),
            horizon: self.horizon.unwrap_or(match e {
                Experiment::ScoreError => 2.0,
                _ => 1.0,
            }),
            dim: self.dim.unwrap_or(match e {
                Experiment::ConsistencyCoupling => 2,
                _ => 1,
            }),
            replications: self.replications.unwrap_or(replications),
            seed: self.seed,
        };
        r.validate()?;
        Ok(r)
    }
}

impl ResolvedSweep {
    fn validate(&self) -> Result<()> {
        let e = self.experiment;
        if self.values.is_empty() {
            return Err(Error::InvalidArgument(format!("{} sweep needs at least one value", e.name())));
        }
        if e.needs_regression() && self.values.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "{} sweep fits a slope and needs at least 3 points, got {}",
                e.name(),
                self.values.len()
            )));
        }
        if self.replications == 0 {
            return Err(Error::InvalidArgument("replications must be at least 1".into()));
        }
        if self.values.iter().chain(&self.perturbations).chain(&self.deltas).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("sweep values must be finite".into()));
        }
        let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0);
        let ok = match e {
            Experiment::TvBound | Experiment::W2Bound => positive(&self.values),
            Experiment::StepOrder => positive(&self.values) && self.values.iter().all(|d| *d <= self.horizon),
            Experiment::ScoreError => self.values.iter().all(|x| *x >= 0.0),
            Experiment::ExpFamilyRate => self.values.iter().all(|x| *x >= 3.0),
            Experiment::ConsistencyCoupling => positive(&self.values) && positive(&self.deltas),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("{} sweep values out of range: {:?}", e.name(), self.values)));
        }
        let needs_samples = !matches!(e, Experiment::ExpFamilyRate);
        if needs_samples && self.samples < 2 {
            return Err(Error::InvalidArgument("sweep needs at least 2 samples per point".into()));
        }
        if matches!(e, Experiment::TvBound | Experiment::W2Bound | Experiment::ScoreError) && self.steps == 0 {
            return Err(Error::InvalidArgument("sampler steps must be positive".into()));
        }
        if !(self.horizon > 0.0) || self.dim == 0 || self.bins == 0 {
            return Err(Error::InvalidArgument("horizon, dim and bins must be positive".into()));
        }
        Ok(())
    }
}

/// One point of a figure-ready series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub series: String,
    pub x: f64,
    pub y: f64,
    /// Monte-Carlo standard error of `y` (0 for exact values).
    pub y_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub rows: Vec<ReportRow>,
    pub checks: Vec<Check>,
    pub fit: Option<LineFit>,
}

impl ExperimentReport {
    fn new(experiment: Experiment) -> Self {
        Self { experiment, rows: Vec::new(), checks: Vec::new(), fit: None }
    }

    fn row(&mut self, series: impl Into<String>, x: f64, y: f64, y_err: f64) {
        self.rows.push(ReportRow { series: series.into(), x, y, y_err });
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: String) {
        self.checks.push(Check { name: name.into(), passed, detail });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Series labels in first-appearance order.
    pub fn series_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.series.as_str()) {
                names.push(&r.series);
            }
        }
        names
    }

    pub fn series(&self, name: &str) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.series == name).collect()
    }

    /// Tidy CSV `x,y,y_err,series` of all rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows(w, self.rows.iter())
    }

    /// Tidy CSV of one series.
    pub fn write_series_csv<W: Write>(&self, name: &str, w: W) -> Result<()> {
        write_rows(w, self.rows.iter().filter(|r| r.series == name))
    }

    /// CSV `check,passed,detail`.
    pub fn write_checks<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["check", "passed", "detail"])?;
        for c in &self.checks {
            wr.write_record([c.name.as_str(), if c.passed { "true" } else { "false" }, c.detail.as_str()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn write_rows<'a, W: Write>(w: W, rows: impl Iterator<Item = &'a ReportRow>) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["x", "y", "y_err", "series"])?;
    for r in rows {
        wr.write_record([r.x.to_string(), r.y.to_string(), r.y_err.to_string(), r.series.clone()])?;
    }
    wr.flush()?;
    Ok(())
}

/// Dispatches on `spec.experiment`.
pub fn run_sweep(spec: &SweepSpec) -> Result<ExperimentReport> {
    match spec.experiment {
        Experiment::TvBound => run_tv_bound_sweep(spec),
        Experiment::W2Bound => run_w2_bound_sweep(spec),
        Experiment::StepOrder => run_step_order_sweep(spec),
        Experiment::ScoreError => run_score_error_sweep(spec),
        Experiment::ExpFamilyRate => run_expfam_rate_sweep(spec),
        Experiment::ConsistencyCoupling => run_consistency_coupling_sweep(spec),
    }
}

fn expect(spec: &SweepSpec, e: Experiment) -> Result<ResolvedSweep> {
    if spec.experiment != e {
        return Err(Error::InvalidArgument(format!("expected a {} sweep, got {}", e.name(), spec.experiment.name())));
    }
    spec.resolved()
}

fn point_seed(seed: u64, index: usize) -> u64 {
    child_seed(seed, domain::SWEEP, index as u64)
}

fn shifted_oracle(target: &GaussianMixture, model: &DiffusionModel, c: f64) -> Result<ScoreField> {
    let oracle = ScoreField::oracle(target.clone(), model)?;
    if c == 0.0 {
        Ok(oracle)
    } else {
        ScoreField::perturbed(oracle, vec![c; model.dim()])
    }
}

fn fmt_eps(c: f64) -> String {
    format!("eps={c}")
}

const TV_MEAN: f64 = 1.0;
const TV_VAR: f64 = 0.5;

/// VP(0.1, 20, T) on the 1D target N(1, 1/2): histogram TV of exponential
/// integrator samples against the target law, versus the VP total-variation
/// bound, for each horizon and constant score shift `c` (score error `|c|`).
pub fn run_tv_bound_sweep(spec: &SweepSpec) -> Result<ExperimentReport> {
    let r = expect(spec, Experiment::TvBound)?;
    let target = GaussianMixture::gaussian(vec![TV_MEAN], TV_VAR)?;
    let second_moment = TV_MEAN * TV_MEAN + TV_VAR;
    let points: Vec<(f64, f64)> = r.perturbations.iter().flat_map(|&c| r.values.iter().map(move |&t| (c, t))).collect();
    let results: Vec<(f64, Estimate, f64)> = points
        .par_iter()
        .enumerate()
        .map(|(i, &(c, big_t))| -> Result<(f64, Estimate, f64)> {
            let model = DiffusionModel::new(&ModelSpec::vp(0.1, 20.0, 1, big_t))?;
            let field = shifted_oracle(&target, &model, c)?;
            let mut cfg = SamplerConfig::new(Scheme::EiSde, r.steps, point_seed(r.seed, i));
            cfg.t_floor = Some(0.0);
            let mut tv = Vec::with_capacity(r.replications);
            let mut floor = 0.0;
            for rep in 0..r.replications {
                cfg.seed = child_seed(point_seed(r.seed, i), domain::SWEEP, rep as u64);
                let batch = sampler::sample(&model, &field, &cfg, r.samples)?;
                let m = tv_histogram_vs_cdf(&batch.samples, |x| normal_cdf((x - TV_MEAN) / TV_VAR.sqrt()), r.bins)?;
                tv.push(m.value);
                floor += m.mc_error / r.replications as f64;
            }
            let mut est = Estimate::from_samples(&tv);
            est.std_err = floor / (r.replications as f64).sqrt();
            let bound = vp_tv_bound(&model, second_moment, c.abs(), big_t)?;
            Ok((c, est, bound))
        })
        .collect::<Result<_>>()?;
    let mut rep = ExperimentReport::new(Experiment::TvBound);
    for (&(c, big_t), (_, est, bound)) in points.iter().zip(&results) {
        rep.row(format!("measured {}", fmt_eps(c)), big_t, est.value, est.std_err);
        rep.row(format!("bound {}", fmt_eps(c)), big_t, *bound, 0.0);
        rep.check(
            format!("tv <= bound ({}, T={big_t})", fmt_eps(c)),
            est.value <= bound + 3.0 * est.std_err,
            format!("measured {:.5} +- {:.5}, bound {:.5}", est.value, est.std_err, bound),
        );
    }
    Ok(rep)
}

const OU_THETA: f64 = 1.0;

/// Coupling-bound grid for `w2_bound_best`.
fn h_grid() -> Vec<f64> {
    (1..200).map(|k| k as f64 * 0.005).collect()
}

/// Measured W2 (fitted Gaussian against the exact target) and the coupling
/// bound for OU(1, 0, sqrt 2) with stationary target N(0, I) and score shift
/// `c` per coordinate. Returns `(measured, bound)`.
fn ou_point(big_t: f64, c: f64, r: &ResolvedSweep, seed: u64) -> Result<(Estimate, f64)> {
    let d = r.dim;
    let model = DiffusionModel::new(&ModelSpec::ou(OU_THETA, 0.0, 2.0f64.sqrt(), d, big_t))?;
    let target = GaussianMixture::gaussian(vec![0.0; d], 1.0)?;
    let field = shifted_oracle(&target, &model, c)?;
    let steps = ((r.steps as f64 * big_t).ceil() as usize).max(1);
    let mut vals = Vec::with_capacity(r.replications);
    let mut se = 0.0;
    for rep in 0..r.replications {
        let mut cfg = SamplerConfig::new(Scheme::EiSde, steps, child_seed(seed, domain::SWEEP, rep as u64));
        cfg.t_floor = Some(0.0);
        let batch = sampler::sample(&model, &field, &cfg, r.samples)?;
        let m = w2_fitted_gaussian(&batch.samples, &vec![0.0; d], 1.0)?;
        vals.push(m.value);
        se += m.mc_error / r.replications as f64;
    }
    let mut est = Estimate::from_samples(&vals);
    est.std_err = se / (r.replications as f64).sqrt();
    let eps = c.abs() * (d as f64).sqrt();
    Ok((est, ou_bound(&model, eps)?))
}

/// Bound with the forward drift rate `r_f = -theta` and the one-sided
/// Lipschitz constant `-2 theta / sigma^2 = -1` of the stationary score; the
/// prior term vanishes because the forward law is stationary.
fn ou_bound(model: &DiffusionModel, eps: f64) -> Result<f64> {
    Ok(w2_bound_best(model, |_| -OU_THETA, -1.0, &h_grid(), eps, 0.0)?.0)
}

/// OU sweep over horizons and score shifts: measured W2 against the
/// coupling bound, and against the horizon-free limit of the bound.
pub fn run_w2_bound_sweep(spec: &SweepSpec) -> Result<ExperimentReport> {
    let r = expect(spec, Experiment::W2Bound)?;
    let points: Vec<(f64, f64)> = r.perturbations.iter().flat_map(|&c| r.values.iter().map(move |&t| (c, t))).collect();
    let results: Vec<(Estimate, f64)> = points
        .par_iter()
        .enumerate()
        .map(|(i, &(c, big_t))| ou_point(big_t, c, &r, point_seed(r.seed, i)))
        .collect::<Result<_>>()?;
    let t_max = r.values.iter().fold(0.0f64, |a, b| a.max(*b));
    let mut rep = ExperimentReport::new(Experiment::W2Bound);
    for (&(c, big_t), (est, bound)) in points.iter().zip(&results) {
        let eps = c.abs() * (r.dim as f64).sqrt();
        let far = DiffusionModel::new(&ModelSpec::ou(OU_THETA, 0.0, 2.0f64.sqrt(), r.dim, 16.0 * t_max.max(1.0)))?;
        let ceiling = ou_bound(&far, eps)?;
        rep.row(format!("measured {}", fmt_eps(c)), big_t, est.value, est.std_err);
        rep.row(format!("bound {}", fmt_eps(c)), big_t, *bound, 0.0);
        rep.row(format!("ceiling {}", fmt_eps(c)), big_t, ceiling, 0.0);
        rep.check(
            format!("w2 <= bound ({}, T={big_t})", fmt_eps(c)),
            est.value <= bound + 3.0 * est.std_err,
            format!("measured {:.5} +- {:.5}, bound {:.5}", est.value, est.std_err, bound),
        );
        rep.check(
            format!("w2 bounded uniformly in T ({}, T={big_t})", fmt_eps(c)),
            est.value <= ceiling + 3.0 * est.std_err,
            format!("measured {:.5} +- {:.5}, horizon-free bound {:.5}", est.value, est.std_err, ceiling),
        );
    }
    Ok(rep)
}

/// OU at fixed horizon over score errors: measured W2 against the bound,
/// monotone increments and linearity in the error.
pub fn run_score_error_sweep(spec: &SweepSpec) -> Result<ExperimentReport> {
    let r = expect(spec, Experiment::ScoreError)?;
    let scale = (r.dim as f64).sqrt();
    let results: Vec<(Estimate, f64)> = r
        .values
        .par_iter()
        .enumerate()
        .map(|(i, &eps)| ou_point(r.horizon, eps / scale, &r, point_seed(r.seed, i)))
        .collect::<Result<_>>()?;
    let mut rep = ExperimentReport::new(Experiment::ScoreError);
    for (&eps, (est, bound)) in r.values.iter().zip(&results) {
        rep.row("measured", eps, est.value, est.std_err);
        rep.row("bound", eps, *bound, 0.0);
        rep.check(
            format!("w2 <= bound (eps={eps})"),
            est.value <= bound + 3.0 * est.std_err,
            format!("measured {:.5} +- {:.5}, bound {:.5}", est.value, est.std_err, bound),
        );
    }
    let mut order: Vec<usize> = (0..r.values.len()).collect();
    order.sort_by(|a, b| r.values[*a].total_cmp(&r.values[*b]));
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (ma, mb) = (&results[a].0, &results[b].0);
        let dm = mb.value - ma.value;
        let db = results[b].1 - results[a].1;
        let se = (ma.std_err.powi(2) + mb.std_err.powi(2)).sqrt();
        rep.check(
            format!("increment <= bound increment (eps {} -> {})", r.values[a], r.values[b]),
            dm <= db + 3.0 * se,
            format!("measured +{dm:.5}, bound +{db:.5}, s.e. {se:.5}"),
        );
    }
    let pos: Vec<usize> = order.iter().copied().filter(|&i| r.values[i] > 0.0).collect();
    if pos.len() >= 2 {
        let xs: Vec<f64> = pos.iter().map(|&i| r.values[i]).collect();
        let ys: Vec<f64> = pos.iter().map(|&i| results[i].0.value).collect();
        let fit = fit_line(&xs, &ys);
        rep.fit = Some(fit);
        rep.check(
            "linear in eps",
            pos.len() == 2 || fit.r_squared >= 0.99,
            format!("slope {:.4}, intercept {:.5}, R^2 {:.5}", fit.slope, fit.intercept, fit.r_squared),
        );
    }
    Ok(rep)
}

/// Euler-Maruyama on VP(0.1, 20, T) with the exact score of N(1, 1/2):
/// fitted-Gaussian W2 error against the step size and its log-log slope.
pub fn run_step_order_sweep(spec: &SweepSpec) -> Result<ExperimentReport> {
    let r = expect(spec, Experiment::StepOrder)?;
    let d = r.dim;
    let target = GaussianMixture::gaussian(vec![TV_MEAN; d], TV_VAR)?;
    let model = DiffusionModel::new(&ModelSpec::vp(0.1, 20.0, d, r.horizon))?;
    let field = ScoreField::oracle(target, &model)?;
    let errors: Vec<Estimate> = r
        .values
        .par_iter()
        .enumerate()
        .map(|(i, &delta)| -> Result<Estimate> {
            let steps = ((r.horizon / delta).round() as usize).max(1);
            let mut vals = Vec::with_capacity(r.replications);
            let mut se = 0.0;
            for rep in 0..r.replications {
                let mut cfg = SamplerConfig::new(Scheme::EulerMaruyama, steps, child_seed(point_seed(r.seed, i), domain::SWEEP, rep as u64));
                cfg.t_floor = Some(0.0);
                let batch = sampler::sample(&model, &field, &cfg, r.samples)?;
                let m = w2_fitted_gaussian(&batch.samples, &vec![TV_MEAN; d], TV_VAR)?;
                vals.push(m.value);
                se += m.mc_error / r.replications as f64;
            }
            let mut est = Estimate::from_samples(&vals);
            est.std_err = se / (r.replications as f64).sqrt();
            Ok(est)
        })
        .collect::<Result<_>>()?;
    let mut rep = ExperimentReport::new(Experiment::StepOrder);
    for (&delta, e) in r.values.iter().zip(&errors) {
        rep.row("error", delta, e.value, e.std_err);
        rep.row("log_error", delta.ln(), e.value.ln(), e.std_err / e.value);
    }
    let xs: Vec<f64> = r.values.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.value.ln()).collect();
    let fit = fit_line(&xs, &ys);
    rep.row("fitted_slope", fit.r_squared, fit.slope, fit.slope_std_err);
    rep.fit = Some(fit);
    rep.check(
        "slope in [0.5, 1.5]",
        (0.5..=1.5).contains(&fit.slope),
        format!("slope {:.4} +- {:.4}, R^2 {:.4}", fit.slope, fit.slope_std_err, fit.r_squared),
    );
    let mut order: Vec<usize> = (0..r.values.len()).collect();
    order.sort_by(|a, b| r.values[*b].total_cmp(&r.values[*a]));
    let monotone = order.windows(2).all(|w| errors[w[1]].value < errors[w[0]].value);
    let listing: Vec<String> = order.iter().map(|&i| format!("{:.5}", errors[i].value)).collect();
    rep.check("error decreases with the step size", monotone, format!("errors {}", listing.join(", ")));
    Ok(rep)
}

/// Score-matching estimator of the 1D Gaussian family on N(1, 1) samples
/// (natural parameters `(1, 1)`): RMSE against `n`, and the covariance of
/// `sqrt(n) (theta_n - theta)` at the largest `n` against the sandwich.
pub fn run_expfam_rate_sweep(spec: &SweepSpec) -> Result<ExperimentReport> {
    let r = expect(spec, Experiment::ExpFamilyRate)?;
    let fam = ExpFamilySpec::gaussian();
    let theta = [1.0, 1.0];
    let target = GaussianMixture::gaussian(vec![1.0], 1.0)?;
    let sizes: Vec<usize> = r.values.iter().map(|v| v.round() as usize).collect();
    let draws: Vec<Vec<Vec<f64>>> = sizes
        .par_iter()
        .enumerate()
        .map(|(i, &n)| -> Result<Vec<Vec<f64>>> {
            let base = point_seed(r.seed, i);
            (0..r.replications)
                .into_par_iter()
                .map(|rep| -> Result<Vec<f64>> {
                    // singular moments only occur for degenerate tiny samples; redraw
                    for attempt in 0..100u64 {
                        let seed = child_seed(child_seed(base, domain::SWEEP, rep as u64), domain::SWEEP, attempt);
                        let x = target.sample(n, seed)?.into_flat();
                        match expfam_fit(&fam, &x) {
                            Ok(t) => return Ok(t),
                            Err(Error::SingularMatrix(_)) => continue,
                            Err(e) => return Err(e),
                        }
                    }
                    Err(Error::SingularMatrix(format!("moments stayed singular at n = {n}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rep = ExperimentReport::new(Experiment::ExpFamilyRate);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&n, fits) in sizes.iter().zip(&draws) {
        let sq: Vec<f64> = fits.iter().map(|t| (t[0] - theta[0]).powi(2) + (t[1] - theta[1]).powi(2)).collect();
        let mse = Estimate::from_samples(&sq);
        let rmse = mse.value.sqrt();
        let rmse_err = if rmse > 0.0 { mse.std_err / (2.0 * rmse) } else { 0.0 };
        rep.row("rmse", n as f64, rmse, rmse_err);
        xs.push((n as f64).ln());
        ys.push(rmse.ln());
    }
    let fit = fit_line(&xs, &ys);
    rep.row("fitted_slope", fit.r_squared, fit.slope, fit.slope_std_err);
    rep.fit = Some(fit);
    rep.check(
        "rate slope -0.5 +- 0.1",
        (fit.slope + 0.5).abs() <= 0.1,
        format!("slope {:.4} +- {:.4}, R^2 {:.4}", fit.slope, fit.slope_std_err, fit.r_squared),
    );

    let (imax, &nmax) = sizes.iter().enumerate().max_by_key(|(_, n)| **n).expect("values are nonempty");
    let scaled: Vec<[f64; 2]> =
        draws[imax].iter().map(|t| [(t[0] - theta[0]) * (nmax as f64).sqrt(), (t[1] - theta[1]) * (nmax as f64).sqrt()]).collect();
    let k = scaled.len() as f64;
    let mean = [scaled.iter().map(|s| s[0]).sum::<f64>() / k, scaled.iter().map(|s| s[1]).sum::<f64>() / k];
    let mut emp = [[0.0; 2]; 2];
    for s in &scaled {
        for i in 0..2 {
            for j in 0..2 {
                emp[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]) / (k - 1.0).max(1.0);
            }
        }
    }
    let population = target.sample(1_000_000, point_seed(r.seed, sizes.len()))?.into_flat();
    let gamma = sandwich_covariance(&fam, &theta, &population)?;
    let (mut diff, mut norm) = (0.0, 0.0);
    for i in 0..2 {
        for j in 0..2 {
            diff += (emp[i][j] - gamma[(i, j)]).powi(2);
            norm += gamma[(i, j)].powi(2);
            rep.row(format!("covariance[{i}{j}] empirical"), nmax as f64, emp[i][j], 0.0);
            rep.row(format!("covariance[{i}{j}] sandwich"), nmax as f64, gamma[(i, j)], 0.0);
        }
    }
    let rel = (diff / norm).sqrt();
    rep.check(
        "scaled covariance within 20% of sandwich",
        r.replications >= 2 && rel <= 0.2,
        format!("relative Frobenius distance {rel:.4} at n = {nmax} over {} replications", r.replications),
    );
    Ok(rep)
}

/// Point-mass target under VE with `sigma_t = t`: squared coupling distance
/// between CD and CT pair laws, simulated against the closed form, plus the
/// `t ~ U(delta, 1)` average of the (unsquared) distance.
pub fn run_consistency_coupling_sweep(spec: &SweepSpec) -> Result<ExperimentReport> {
    let r = expect(spec, Experiment::ConsistencyCoupling)?;
    let d = r.dim;
    let t_max = r.values.iter().fold(0.0f64, |a, b| a.max(*b));
    let model = DiffusionModel::new(&ModelSpec::ve_linear(d, t_max))?;
    let target = GaussianMixture::dirac(vec![0.0; d])?;
    let field = ScoreField::oracle(target, &model)?;
    let points: Vec<(f64, f64)> = r
        .deltas
        .iter()
        .flat_map(|&delta| r.values.iter().filter(move |&&t| delta < t).map(move |&t| (delta, t)))
        .collect();
    if points.is_empty() {
        return Err(Error::InvalidArgument("no sweep point satisfies 0 < delta < t".into()));
    }
    let results: Vec<Estimate> = points
        .par_iter()
        .enumerate()
        .map(|(i, &(delta, t))| -> Result<Estimate> {
            let x0 = Batch::zeros(r.samples, d);
            let vals: Vec<f64> = (0..r.replications)
                .map(|rep| {
                    let seed = child_seed(point_seed(r.seed, i), domain::SWEEP, rep as u64);
                    let cd = build_cd_pairs(&model, &field, &x0, t, delta, seed)?;
                    let ct = build_ct_pairs(&model, &x0, t, delta, seed)?;
                    coupling_w2_empirical(&cd, &ct)
                })
                .collect::<Result<_>>()?;
            Ok(Estimate::from_samples(&vals))
        })
        .collect::<Result<_>>()?;
    let mut rep = ExperimentReport::new(Experiment::ConsistencyCoupling);
    for (&(delta, t), est) in points.iter().zip(&results) {
        let theory = coupling_w2_theory(t, delta, d)?;
        rep.row(format!("empirical delta={delta}"), t, est.value, est.std_err);
        rep.row(format!("theory delta={delta}"), t, theory, 0.0);
        let rel = (est.value - theory).abs() / theory;
        rep.check(
            format!("empirical within 5% of theory (t={t}, delta={delta})"),
            rel <= 0.05,
            format!("empirical {:.5} +- {:.5}, theory {:.5}, relative {:.4}", est.value, est.std_err, theory, rel),
        );
    }
    for &delta in &r.deltas {
        if delta < 1.0 {
            rep.row("mean distance over t", delta, mean_coupling_distance(delta, d, 4096)?, 0.0);
        }
    }
    rep.row("mean distance limit", 0.0, ((1.0 - 0.5f64.sqrt()) * d as f64).sqrt(), 0.0);
    Ok(rep)
}

/// `E_{t ~ U(delta, 1)} W2(t, delta)` by the midpoint rule.
pub fn mean_coupling_distance(delta: f64, d: usize, nodes: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) || nodes == 0 {
        return Err(Error::InvalidArgument(format!("need 0 < delta < 1 and nodes > 0, got {delta}, {nodes}")));
    }
    let w = (1.0 - delta) / nodes as f64;
    let mut acc = 0.0;
    for k in 0..nodes {
        let t = delta + (k as f64 + 0.5) * w;
        acc += coupling_w2_theory(t, delta, d)?.sqrt();
    }
    Ok(acc / nodes as f64)
}
