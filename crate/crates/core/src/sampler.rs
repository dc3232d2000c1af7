//! Backward-time generation.
//!
//! Grids are in backward time `0 = t_0 < ... < t_N = T - t_floor`; the
//! forward time seen by the model and the score is `T - t`. Chains advance
//! step-synchronously so each step prepares the score once, and each chain
//! owns its random stream, so results do not depend on thread count.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{Batch, SampleBatch};
use crate::error::{Error, Result};
use crate::rng::{self, domain, StreamRng};
use crate::score::ScoreField;
use crate::sde::DiffusionModel;

const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Euler drift with the exact Brownian variance `int g^2` per step.
    #[default]
    ExactNoiseEm,
    EulerMaruyama,
    /// Exponential integrator for the SDE.
    EiSde,
    /// Exponential integrator for the probability-flow ODE.
    EiOde,
    /// Heun steps of the probability-flow ODE.
    #[serde(alias = "probability_flow_rk")]
    HeunOde,
    /// Exact-noise predictor followed by Langevin corrector steps.
    PredictorCorrector,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::ExactNoiseEm,
        Scheme::EulerMaruyama,
        Scheme::EiSde,
        Scheme::EiOde,
        Scheme::HeunOde,
        Scheme::PredictorCorrector,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::ExactNoiseEm => "exact_noise_em",
            Scheme::EulerMaruyama => "euler_maruyama",
            Scheme::EiSde => "ei_sde",
            Scheme::EiOde => "ei_ode",
            Scheme::HeunOde => "heun_ode",
            Scheme::PredictorCorrector => "predictor_corrector",
        }
    }

    pub fn is_deterministic(self) -> bool {
        matches!(self, Scheme::EiOde | Scheme::HeunOde)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "probability_flow_rk" {
            return Ok(Scheme::HeunOde);
        }
        Scheme::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Scheme::ALL.iter().map(|k| k.name()).collect();
            Error::InvalidArgument(format!("unknown scheme `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    #[default]
    Uniform,
    /// Forward times geometric between `T` and `t_floor`, so steps shrink
    /// towards the data end.
    Geometric,
}

/// Sampler settings. `t_floor` defaults to `1e-3 T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub scheme: Scheme,
    pub steps: usize,
    pub grid: GridKind,
    pub t_floor: Option<f64>,
    pub corrector_steps: usize,
    pub corrector_eps0: f64,
    pub corrector_rho: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::ExactNoiseEm,
            steps: 1000,
            grid: GridKind::Uniform,
            t_floor: None,
            corrector_steps: 1,
            corrector_eps0: 1e-3,
            corrector_rho: 0.999,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn new(scheme: Scheme, steps: usize, seed: u64) -> Self {
        Self { scheme, steps, seed, ..Self::default() }
    }

    pub fn t_floor(&self, horizon: f64) -> f64 {
        self.t_floor.unwrap_or(1e-3 * horizon)
    }

    pub fn grid_for(&self, model: &DiffusionModel) -> Result<Grid> {
        let t = model.horizon();
        match self.grid {
            GridKind::Uniform => Grid::uniform(t, self.t_floor(t), self.steps),
            GridKind::Geometric => Grid::geometric(t, self.t_floor(t), self.steps),
        }
    }

    /// Corrector step size `eps0 * rho^k` after predictor step `k`.
    pub fn corrector_eps(&self, k: usize) -> f64 {
        self.corrector_eps0 * self.corrector_rho.powi(k as i32)
    }

    fn validate(&self) -> Result<()> {
        if self.scheme == Scheme::PredictorCorrector {
            if self.corrector_steps == 0 {
                return Err(Error::InvalidArgument("predictor-corrector needs at least one corrector step".into()));
            }
            if !(self.corrector_eps0 > 0.0 && self.corrector_rho > 0.0 && self.corrector_rho <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "corrector step sizes need eps0 > 0 and 0 < rho <= 1, got eps0={} rho={}",
                    self.corrector_eps0, self.corrector_rho
                )));
            }
        }
        Ok(())
    }
}

/// Strictly increasing backward times starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    times: Vec<f64>,
    horizon: f64,
}

impl Grid {
    pub fn new(times: Vec<f64>, horizon: f64) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidGrid("need at least two grid points".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("grid must start at 0, starts at {}", times[0])));
        }
        if let Some(w) = times.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid(format!("grid not strictly increasing at {} -> {}", w[0], w[1])));
        }
        let last = *times.last().unwrap();
        if last > horizon {
            return Err(Error::InvalidGrid(format!("grid ends at {last}, beyond T = {horizon}")));
        }
        Ok(Self { times, horizon })
    }

    pub fn uniform(horizon: f64, t_floor: f64, steps: usize) -> Result<Self> {
        Self::check_spec(horizon, t_floor, steps)?;
        let end = horizon - t_floor;
        let mut times: Vec<f64> = (0..=steps).map(|k| end * k as f64 / steps as f64).collect();
        times[steps] = end;
        Self::new(times, horizon)
    }

    pub fn geometric(horizon: f64, t_floor: f64, steps: usize) -> Result<Self> {
        Self::check_spec(horizon, t_floor, steps)?;
        if t_floor <= 0.0 {
            return Err(Error::InvalidGrid("geometric grid needs t_floor > 0".into()));
        }
        let ratio = horizon / t_floor;
        let mut times: Vec<f64> =
            (0..=steps).map(|k| horizon - t_floor * ratio.powf((steps - k) as f64 / steps as f64)).collect();
        times[0] = 0.0;
        times[steps] = horizon - t_floor;
        Self::new(times, horizon)
    }

    fn check_spec(horizon: f64, t_floor: f64, steps: usize) -> Result<()> {
        if steps == 0 {
            return Err(Error::InvalidGrid("need at least one step".into()));
        }
        if !(t_floor >= 0.0 && t_floor < horizon) {
            return Err(Error::InvalidGrid(format!("t_floor {t_floor} must lie in [0, T)")));
        }
        Ok(())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn max_step(&self) -> f64 {
        self.times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Index of the grid point nearest backward time `t`.
    pub fn nearest(&self, t: f64) -> usize {
        let mut best = 0;
        for (i, s) in self.times.iter().enumerate() {
            if (s - t).abs() < (self.times[best] - t).abs() {
                best = i;
            }
        }
        best
    }
}

fn check_state(model: &DiffusionModel, field: &ScoreField, y: &[f64]) -> Result<()> {
    if field.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: field.dim() });
    }
    if y.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: y.len() });
    }
    Ok(())
}

/// `-f(T - t, y) + g^2(T - t) s(T - t, y)`.
pub fn backward_drift(model: &DiffusionModel, field: &ScoreField, t: f64, y: &[f64]) -> Result<Vec<f64>> {
    check_state(model, field, y)?;
    let tau = model.horizon() - t;
    let s = field.forward(tau, y)?;
    let (a, c, g2) = (model.drift_slope(tau), model.drift_offset(tau), model.diffusion_sq(tau));
    Ok(y.iter().zip(&s).map(|(yi, si)| -(a * yi + c) + g2 * si).collect())
}

/// `-f(T - t, y) + g^2(T - t) s(T - t, y) / 2`.
pub fn ode_rhs(model: &DiffusionModel, field: &ScoreField, t: f64, y: &[f64]) -> Result<Vec<f64>> {
    check_state(model, field, y)?;
    let tau = model.horizon() - t;
    let s = field.forward(tau, y)?;
    let (a, c, g2) = (model.drift_slope(tau), model.drift_offset(tau), model.diffusion_sq(tau));
    Ok(y.iter().zip(&s).map(|(yi, si)| -(a * yi + c) + 0.5 * g2 * si).collect())
}

/// `Psi(s, t) = exp(-int_s^t a(T - u) du)` for backward times `s <= t`.
pub fn ei_factor(model: &DiffusionModel, s: f64, t: f64) -> Result<f64> {
    if model.has_offset() {
        return Err(Error::UnsupportedModel {
            op: "exponential integrator (drift has an offset c(t))",
            kind: model.kind().to_string(),
        });
    }
    if !(0.0 <= s && s <= t && t <= model.horizon()) {
        return Err(Error::InvalidArgument(format!("ei_factor needs 0 <= s <= t <= T, got s={s} t={t}")));
    }
    let big_t = model.horizon();
    Ok((-model.slope_integral(big_t - t, big_t - s)?).exp())
}

/// Output of [`run`]: the final batch plus any requested intermediate
/// states.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub last: SampleBatch,
    pub snapshots: Vec<SampleBatch>,
}

/// Prior draw followed by the configured scheme on the configured grid.
pub fn sample(model: &DiffusionModel, field: &ScoreField, cfg: &SamplerConfig, n: usize) -> Result<SampleBatch> {
    let grid = cfg.grid_for(model)?;
    let init = model.prior_sample(n, cfg.seed)?;
    Ok(run(model, field, cfg, &grid, init, &[])?.last)
}

/// Runs the scheme from `init` along `grid`. `snapshot_times` are backward
/// times; each is recorded at the nearest grid point.
pub fn run(
    model: &DiffusionModel,
    field: &ScoreField,
    cfg: &SamplerConfig,
    grid: &Grid,
    init: Batch,
    snapshot_times: &[f64],
) -> Result<Trajectory> {
    cfg.validate()?;
    let d = model.dim();
    if field.dim() != d || init.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: if field.dim() != d { field.dim() } else { init.dim() } });
    }
    if init.is_empty() {
        return Err(Error::EmptySample);
    }
    if (grid.horizon() - model.horizon()).abs() > 1e-12 {
        return Err(Error::InvalidGrid(format!("grid horizon {} differs from model horizon {}", grid.horizon(), model.horizon())));
    }
    if matches!(cfg.scheme, Scheme::EiSde | Scheme::EiOde) && model.has_offset() {
        return Err(Error::UnsupportedModel {
            op: "exponential integrator (drift has an offset c(t))",
            kind: model.kind().to_string(),
        });
    }
    if !init.all_finite() {
        return Err(Error::SamplerDiverged { step: 0 });
    }
    let n = init.len();
    let big_t = model.horizon();
    let hash = model.hash().to_string();
    let tag = cfg.scheme.name();
    let snap_idx: Vec<usize> = snapshot_times.iter().map(|t| grid.nearest(*t)).collect();
    let mut snapshots: Vec<Option<SampleBatch>> = vec![None; snap_idx.len()];
    let record = |k: usize, state: &[f64], snapshots: &mut Vec<Option<SampleBatch>>| -> Result<()> {
        for (slot, &idx) in snapshots.iter_mut().zip(&snap_idx) {
            if idx == k {
                let b = Batch::from_flat(d, state.to_vec())?;
                *slot = Some(SampleBatch::new(b, big_t - grid.times()[k], hash.clone(), cfg.seed, tag));
            }
        }
        Ok(())
    };

    let mut state = init.into_flat();
    record(0, &state, &mut snapshots)?;
    let mut rngs: Vec<StreamRng> = if cfg.scheme.is_deterministic() {
        Vec::new()
    } else {
        (0..n as u64).map(|i| rng::stream(cfg.seed, domain::SAMPLER, i)).collect()
    };

    for k in 1..=grid.steps() {
        let step = StepPlan::new(model, cfg, grid, k)?;
        let chunk_rows = CHUNK.min(n);
        let work = |(states, rngs): (&mut [f64], &mut [StreamRng])| -> Result<()> {
            step.apply(field, d, states, rngs).map_err(|e| match e {
                Error::NonFinite(_) => Error::SamplerDiverged { step: k },
                other => other,
            })
        };
        if rngs.is_empty() {
            state.par_chunks_mut(chunk_rows * d).map(|s| (s, <&mut [StreamRng]>::default())).try_for_each(work)?;
        } else {
            state.par_chunks_mut(chunk_rows * d).zip(rngs.par_chunks_mut(chunk_rows)).try_for_each(work)?;
        }
        record(k, &state, &mut snapshots)?;
    }
    let last = SampleBatch::new(Batch::from_flat(d, state)?, big_t - grid.end(), hash, cfg.seed, tag);
    Ok(Trajectory { last, snapshots: snapshots.into_iter().map(|s| s.expect("every snapshot index is on the grid")).collect() })
}

/// Scalars for one step `t_{k-1} -> t_k`.
struct StepPlan {
    scheme: Scheme,
    h: f64,
    tau0: f64,
    tau1: f64,
    /// drift slope/offset at the new forward time (Euler-type schemes)
    a1: f64,
    c1: f64,
    a0: f64,
    c0: f64,
    g2_0: f64,
    g2_1: f64,
    noise_sd: f64,
    psi: f64,
    score_weight: f64,
    corrector_steps: usize,
    eps: f64,
}

impl StepPlan {
    fn new(model: &DiffusionModel, cfg: &SamplerConfig, grid: &Grid, k: usize) -> Result<Self> {
        let big_t = model.horizon();
        let (t0, t1) = (grid.times()[k - 1], grid.times()[k]);
        let h = t1 - t0;
        let (tau0, tau1) = (big_t - t0, (big_t - t1).max(0.0));
        let mut plan = StepPlan {
            scheme: cfg.scheme,
            h,
            tau0,
            tau1,
            a1: model.drift_slope(tau1),
            c1: model.drift_offset(tau1),
            a0: model.drift_slope(tau0),
            c0: model.drift_offset(tau0),
            g2_0: model.diffusion_sq(tau0),
            g2_1: model.diffusion_sq(tau1),
            noise_sd: 0.0,
            psi: 1.0,
            score_weight: 0.0,
            corrector_steps: 0,
            eps: 0.0,
        };
        match cfg.scheme {
            Scheme::ExactNoiseEm | Scheme::PredictorCorrector => {
                plan.noise_sd = model.diffusion_sq_integral(tau1, tau0)?.max(0.0).sqrt();
                if cfg.scheme == Scheme::PredictorCorrector {
                    plan.corrector_steps = cfg.corrector_steps;
                    plan.eps = cfg.corrector_eps(k);
                }
            }
            Scheme::EulerMaruyama => plan.noise_sd = (plan.g2_0 * h).max(0.0).sqrt(),
            Scheme::EiSde | Scheme::EiOde => {
                plan.psi = (-model.slope_integral(tau1, tau0)?).exp();
                plan.score_weight = model.ei_score_weight(tau1, tau0)?;
                if cfg.scheme == Scheme::EiSde {
                    plan.noise_sd = model.ei_noise_variance(tau1, tau0)?.max(0.0).sqrt();
                } else {
                    plan.score_weight *= 0.5;
                }
            }
            Scheme::HeunOde => {}
        }
        Ok(plan)
    }

    fn apply(&self, field: &ScoreField, d: usize, states: &mut [f64], rngs: &mut [StreamRng]) -> Result<()> {
        let mut ev0 = field.at(self.tau0)?;
        let mut ev1 = match self.scheme {
            Scheme::HeunOde | Scheme::PredictorCorrector => Some(field.at(self.tau1)?),
            _ => None,
        };
        let mut s = vec![0.0; d];
        let mut k1 = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        for (i, y) in states.chunks_exact_mut(d).enumerate() {
            ev0.eval(y, &mut s);
            match self.scheme {
                Scheme::ExactNoiseEm | Scheme::EulerMaruyama | Scheme::PredictorCorrector => {
                    let rng = &mut rngs[i];
                    for j in 0..d {
                        let z: f64 = StandardNormal.sample(rng);
                        y[j] += (-(self.a1 * y[j] + self.c1) + self.g2_0 * s[j]) * self.h + self.noise_sd * z;
                    }
                    if let Some(ev1) = ev1.as_mut() {
                        let sq = (2.0 * self.eps).sqrt();
                        for _ in 0..self.corrector_steps {
                            ev1.eval(y, &mut s);
                            for j in 0..d {
                                let z: f64 = StandardNormal.sample(rng);
                                y[j] += self.eps * s[j] + sq * z;
                            }
                        }
                    }
                }
                Scheme::EiSde => {
                    let rng = &mut rngs[i];
                    for j in 0..d {
                        let z: f64 = StandardNormal.sample(rng);
                        y[j] = self.psi * y[j] + self.score_weight * s[j] + self.noise_sd * z;
                    }
                }
                Scheme::EiOde => {
                    for j in 0..d {
                        y[j] = self.psi * y[j] + self.score_weight * s[j];
                    }
                }
                Scheme::HeunOde => {
                    for j in 0..d {
                        k1[j] = -(self.a0 * y[j] + self.c0) + 0.5 * self.g2_0 * s[j];
                        tmp[j] = y[j] + self.h * k1[j];
                    }
                    let ev1 = ev1.as_mut().expect("heun prepares the second stage");
                    ev1.eval(&tmp, &mut s);
                    for j in 0..d {
                        let k2 = -(self.a1 * tmp[j] + self.c1) + 0.5 * self.g2_1 * s[j];
                        y[j] += 0.5 * self.h * (k1[j] + k2);
                    }
                }
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("sampler state".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::ModelSpec;
    use crate::target::GaussianMixture;
    use approx::assert_relative_eq;

    fn ou() -> DiffusionModel {
        DiffusionModel::new(&ModelSpec::ou(1.0, 0.5, 2.0f64.sqrt(), 2, 1.0)).unwrap()
    }

    fn stationary_oracle(model: &DiffusionModel) -> ScoreField {
        let p = model.prior();
        ScoreField::oracle(GaussianMixture::gaussian(p.mean.clone(), p.variance).unwrap(), model).unwrap()
    }

    #[test]
    fn drift_examples() {
        let m = ou();
        let f = stationary_oracle(&m);
        let y = [1.3, -0.4];
        let dr = backward_drift(&m, &f, 0.3, &y).unwrap();
        for j in 0..2 {
            assert_relative_eq!(dr[j], -(y[j] - 0.5), epsilon = 1e-12);
        }
        let ve = DiffusionModel::new(&ModelSpec::ve(0.01, 50.0, 2, 1.0)).unwrap();
        let z = ScoreField::Zero { dim: 2 };
        assert_eq!(backward_drift(&ve, &z, 0.3, &y).unwrap(), vec![0.0, 0.0]);
        assert_eq!(ode_rhs(&ve, &z, 0.3, &y).unwrap(), vec![0.0, 0.0]);
        let vp = DiffusionModel::new(&ModelSpec::vp(0.1, 20.0, 2, 1.0)).unwrap();
        let std_score = ScoreField::linear(vec![-1.0, 0.0, 0.0, -1.0], vec![0.0, 0.0]).unwrap();
        let t = 0.25;
        let b = vp.beta(1.0 - t).unwrap();
        let dr = backward_drift(&vp, &std_score, t, &y).unwrap();
        assert_relative_eq!(dr[0], -0.5 * b * y[0], max_relative = 1e-12);
        let rhs = ode_rhs(&vp, &std_score, t, &y).unwrap();
        assert!(rhs.iter().all(|v| v.abs() < 1e-12));
        let unit = ScoreField::perturbed(ScoreField::Zero { dim: 2 }, vec![1.0, 2.0]).unwrap();
        let rhs = ode_rhs(&ve, &unit, t, &y).unwrap();
        assert_relative_eq!(rhs[1], ve.diffusion_sq(1.0 - t), max_relative = 1e-12);
    }

    #[test]
    fn ei_factor_examples() {
        let vp = DiffusionModel::new(&ModelSpec::vp(1.0, 1.0, 1, 2.0)).unwrap();
        assert_relative_eq!(ei_factor(&vp, 0.0, 1.0).unwrap(), 0.5f64.exp(), max_relative = 1e-12);
        assert_eq!(ei_factor(&vp, 0.4, 0.4).unwrap(), 1.0);
        let ve = DiffusionModel::new(&ModelSpec::ve(0.01, 50.0, 1, 1.0)).unwrap();
        assert_eq!(ei_factor(&ve, 0.1, 0.9).unwrap(), 1.0);
        assert!(ei_factor(&ou(), 0.1, 0.2).is_err());
    }

    #[test]
    fn grids() {
        let g = Grid::uniform(1.0, 1e-3, 10).unwrap();
        assert_eq!(g.steps(), 10);
        assert_relative_eq!(g.end(), 0.999, epsilon = 1e-15);
        let geo = Grid::geometric(1.0, 1e-3, 10).unwrap();
        assert_relative_eq!(geo.end(), 0.999, epsilon = 1e-15);
        assert!(geo.times().windows(2).all(|w| w[1] > w[0]));
        // steps shrink towards the data end
        let st: Vec<f64> = geo.times().windows(2).map(|w| w[1] - w[0]).collect();
        assert!(st[0] > st[9]);
        assert!(Grid::new(vec![0.0, 0.5, 0.5], 1.0).is_err());
        assert!(Grid::new(vec![0.1, 0.5], 1.0).is_err());
        assert!(Grid::uniform(1.0, 1e-3, 0).is_err());
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("rk4".parse::<Scheme>().is_err());
    }

    #[test]
    fn stationarity_for_every_scheme() {
        let m = ou();
        let f = stationary_oracle(&m);
        let n = 20_000;
        let var = m.prior().variance;
        for scheme in Scheme::ALL {
            if matches!(scheme, Scheme::EiSde | Scheme::EiOde) {
                continue;
            }
            let mut cfg = SamplerConfig::new(scheme, 200, 5);
            cfg.corrector_eps0 = 1e-2;
            let out = sample(&m, &f, &cfg, n).unwrap();
            let mean = out.samples.mean();
            let v = out.samples.variance();
            for j in 0..2 {
                assert!((mean[j] - 0.5).abs() < 4.0 * (var / n as f64).sqrt(), "{scheme}: mean {}", mean[j]);
                let se = var * (2.0 / n as f64).sqrt();
                assert!((v[j] - var).abs() < 4.0 * se + 0.01, "{scheme}: var {}", v[j]);
            }
        }
    }

    #[test]
    fn zero_score_ve_adds_integrated_variance() {
        let ve = DiffusionModel::new(&ModelSpec::ve(0.01, 10.0, 1, 1.0)).unwrap();
        let f = ScoreField::Zero { dim: 1 };
        let cfg = SamplerConfig::new(Scheme::ExactNoiseEm, 50, 8);
        let n = 100_000;
        let out = sample(&ve, &f, &cfg, n).unwrap();
        let expected = ve.prior().variance + ve.diffusion_sq_integral(1e-3, 1.0).unwrap();
        let v = out.samples.variance()[0];
        assert!((v - expected).abs() < 4.0 * expected * (2.0 / n as f64).sqrt(), "{v} vs {expected}");
    }

    #[test]
    fn single_step_without_dynamics_keeps_prior() {
        let m = DiffusionModel::custom(|_| 0.0, |_| 0.0, 1.0, 2, 1.0).unwrap();
        let f = ScoreField::Zero { dim: 2 };
        let grid = Grid::new(vec![0.0, 0.9], 1.0).unwrap();
        let init = m.prior_sample(10, 1).unwrap();
        let out = run(&m, &f, &SamplerConfig::new(Scheme::ExactNoiseEm, 1, 1), &grid, init.clone(), &[]).unwrap();
        assert_eq!(out.last.samples, init);
    }

    #[test]
    fn ei_sde_one_step_matches_reversed_linear_law() {
        let vp = DiffusionModel::new(&ModelSpec::vp(0.1, 20.0, 1, 1.0)).unwrap();
        let f = ScoreField::Zero { dim: 1 };
        let grid = Grid::new(vec![0.0, 0.6], 1.0).unwrap();
        let init = Batch::from_flat(1, vec![1.0; 1]).unwrap();
        let cfg = SamplerConfig::new(Scheme::EiOde, 1, 1);
        let out = run(&vp, &f, &cfg, &grid, init, &[]).unwrap();
        let tr = vp.transition(0.4, 1.0).unwrap();
        assert_relative_eq!(out.last.samples.as_slice()[0], 1.0 / tr.factor, max_relative = 1e-12);
        assert_relative_eq!(ei_factor(&vp, 0.0, 0.6).unwrap(), 1.0 / tr.factor, max_relative = 1e-12);
        // noise variance of the SDE variant
        let n = 200_000;
        let init = Batch::zeros(n, 1);
        let out = run(&vp, &f, &SamplerConfig::new(Scheme::EiSde, 1, 2), &grid, init, &[]).unwrap();
        let expected = tr.variance / (tr.factor * tr.factor);
        let v = out.last.samples.variance()[0];
        assert!((v - expected).abs() < 4.0 * expected * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn ode_is_deterministic_given_prior() {
        let vp = DiffusionModel::new(&ModelSpec::vp(0.1, 20.0, 2, 1.0)).unwrap();
        let g = GaussianMixture::new(vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![-1.0, 0.5]], vec![0.2, 0.3]).unwrap();
        let f = ScoreField::oracle(g, &vp).unwrap();
        let cfg = SamplerConfig::new(Scheme::HeunOde, 50, 3);
        let a = sample(&vp, &f, &cfg, 1000).unwrap();
        let b = sample(&vp, &f, &cfg, 1000).unwrap();
        assert_eq!(a, b);
        let cfg2 = SamplerConfig::new(Scheme::EiSde, 50, 3);
        assert_eq!(sample(&vp, &f, &cfg2, 700).unwrap(), sample(&vp, &f, &cfg2, 700).unwrap());
    }

    #[test]
    fn snapshots_and_errors() {
        let m = ou();
        let f = stationary_oracle(&m);
        let cfg = SamplerConfig::new(Scheme::ExactNoiseEm, 10, 1);
        let grid = cfg.grid_for(&m).unwrap();
        let init = m.prior_sample(5, 1).unwrap();
        let tr = run(&m, &f, &cfg, &grid, init, &[0.0, 0.5]).unwrap();
        assert_eq!(tr.snapshots.len(), 2);
        assert_relative_eq!(tr.snapshots[1].time, 1.0 - grid.times()[5], epsilon = 1e-12);
        let mut pc = SamplerConfig::new(Scheme::PredictorCorrector, 10, 1);
        pc.corrector_steps = 0;
        assert!(sample(&m, &f, &pc, 5).is_err());
        let ei = SamplerConfig::new(Scheme::EiSde, 10, 1);
        assert!(sample(&m, &f, &ei, 5).is_err());
        // an exploding score is reported with its step
        let vp = DiffusionModel::new(&ModelSpec::vp(0.1, 20.0, 1, 1.0)).unwrap();
        let bad = ScoreField::linear(vec![1e300], vec![0.0]).unwrap();
        let err = sample(&vp, &bad, &SamplerConfig::new(Scheme::EulerMaruyama, 10, 1), 5).unwrap_err();
        assert!(matches!(err, Error::SamplerDiverged { .. }), "{err:?}");
    }
}
