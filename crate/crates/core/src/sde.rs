//! Forward SDE model zoo `dX = (a(t) X + c(t)) dt + g(t) dB` with closed-form
//! conditional marginals, priors and the space-time change to VE.

use std::fmt;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::quadrature;
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ou,
    Ve,
    Vp,
    SubVp,
    Cvp,
    /// User-supplied slope and diffusion; integrals by quadrature.
    Custom,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ou => "ou",
            ModelKind::Ve => "ve",
            ModelKind::Vp => "vp",
            ModelKind::SubVp => "sub_vp",
            ModelKind::Cvp => "cvp",
            ModelKind::Custom => "custom",
        }
    }

    pub fn uses_beta(self) -> bool {
        matches!(self, ModelKind::Vp | ModelKind::SubVp | ModelKind::Cvp)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VeSchedule {
    /// `sigma(t) = sigma_min (sigma_max / sigma_min)^(t/T)`.
    #[default]
    Geometric,
    /// `sigma(t) = t`, `g(t) = sqrt(2t)`, prior `N(0, T^2 I)`.
    Linear,
}

/// Serializable model description. Fields not used by `kind` are ignored.
///
/// Canonical keys: `kind`, `dim`, `horizon`, `beta_min`, `beta_max`,
/// `sigma_min`, `sigma_max`, `ve_schedule`, `theta`, `ou_mean`, `ou_sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dim: usize,
    pub horizon: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub ve_schedule: VeSchedule,
    pub theta: f64,
    pub ou_mean: f64,
    pub ou_sigma: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Vp,
            dim: 2,
            horizon: 1.0,
            beta_min: 0.1,
            beta_max: 20.0,
            sigma_min: 0.01,
            sigma_max: 50.0,
            ve_schedule: VeSchedule::Geometric,
            theta: 1.0,
            ou_mean: 0.0,
            ou_sigma: std::f64::consts::SQRT_2,
        }
    }
}

impl ModelSpec {
    pub fn vp(beta_min: f64, beta_max: f64, dim: usize, horizon: f64) -> Self {
        Self { kind: ModelKind::Vp, beta_min, beta_max, dim, horizon, ..Self::default() }
    }

    pub fn sub_vp(beta_min: f64, beta_max: f64, dim: usize, horizon: f64) -> Self {
        Self { kind: ModelKind::SubVp, ..Self::vp(beta_min, beta_max, dim, horizon) }
    }

    pub fn cvp(beta_min: f64, beta_max: f64, dim: usize, horizon: f64) -> Self {
        Self { kind: ModelKind::Cvp, ..Self::vp(beta_min, beta_max, dim, horizon) }
    }

    pub fn ve(sigma_min: f64, sigma_max: f64, dim: usize, horizon: f64) -> Self {
        Self { kind: ModelKind::Ve, sigma_min, sigma_max, dim, horizon, ..Self::default() }
    }

    pub fn ve_linear(dim: usize, horizon: f64) -> Self {
        Self { kind: ModelKind::Ve, ve_schedule: VeSchedule::Linear, dim, horizon, ..Self::default() }
    }

    pub fn ou(theta: f64, mean: f64, sigma: f64, dim: usize, horizon: f64) -> Self {
        Self { kind: ModelKind::Ou, theta, ou_mean: mean, ou_sigma: sigma, dim, horizon, ..Self::default() }
    }

    /// Stable content hash of the fields relevant to `kind`.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.name());
        h.update(self.dim.to_le_bytes());
        h.update(self.horizon.to_le_bytes());
        let relevant: Vec<f64> = match self.kind {
            ModelKind::Vp | ModelKind::SubVp | ModelKind::Cvp => vec![self.beta_min, self.beta_max],
            ModelKind::Ve => match self.ve_schedule {
                VeSchedule::Geometric => vec![self.sigma_min, self.sigma_max],
                VeSchedule::Linear => vec![-1.0],
            },
            ModelKind::Ou => vec![self.theta, self.ou_mean, self.ou_sigma],
            ModelKind::Custom => vec![],
        };
        for v in relevant {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Schedule {
    Beta { min: f64, max: f64 },
    VeGeometric { min: f64, max: f64 },
    VeLinear,
    Ou { theta: f64, mean: f64, sigma: f64 },
    Custom { slope: ScalarFn, diffusion: ScalarFn, prior_variance: f64 },
}

impl fmt::Debug for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Beta { min, max } => write!(f, "Beta({min}, {max})"),
            Schedule::VeGeometric { min, max } => write!(f, "VeGeometric({min}, {max})"),
            Schedule::VeLinear => write!(f, "VeLinear"),
            Schedule::Ou { theta, mean, sigma } => write!(f, "Ou({theta}, {mean}, {sigma})"),
            Schedule::Custom { prior_variance, .. } => write!(f, "Custom(prior_variance={prior_variance})"),
        }
    }
}

/// Law of `X_t | X_0 = x`: `N(mean_factor * x + mean_offset, std^2 I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMarginal {
    pub mean_factor: f64,
    /// Per-coordinate offset (drift offsets are isotropic).
    pub mean_offset: f64,
    pub std: f64,
}

impl ConditionalMarginal {
    pub fn variance(&self) -> f64 {
        self.std * self.std
    }
}

/// Forward transition `X_b | X_a = x ~ N(factor * x + offset, variance I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub factor: f64,
    pub offset: f64,
    pub variance: f64,
}

/// Isotropic Gaussian `p_noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// An affine-drift forward SDE. Immutable and cheap to clone.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    kind: ModelKind,
    schedule: Schedule,
    dim: usize,
    horizon: f64,
    hash: String,
}

const TIME_SLACK: f64 = 1e-12;

impl DiffusionModel {
    /// Builds a model from its schedule constants.
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        if spec.dim == 0 {
            return Err(Error::InvalidDimension(0));
        }
        if !(spec.horizon > 0.0 && spec.horizon.is_finite()) {
            return Err(Error::InvalidHorizon(spec.horizon));
        }
        let schedule = match spec.kind {
            ModelKind::Vp | ModelKind::SubVp | ModelKind::Cvp => {
                // Equal endpoints give a constant schedule; only reversed ones are rejected.
                if !(spec.beta_min > 0.0 && spec.beta_min <= spec.beta_max && spec.beta_max.is_finite()) {
                    return Err(Error::InvalidSchedule(format!(
                        "need 0 < beta_min <= beta_max, got beta_min={} beta_max={}",
                        spec.beta_min, spec.beta_max
                    )));
                }
                Schedule::Beta { min: spec.beta_min, max: spec.beta_max }
            }
            ModelKind::Ve => match spec.ve_schedule {
                VeSchedule::Geometric => {
                    if !(spec.sigma_min > 0.0 && spec.sigma_min < spec.sigma_max && spec.sigma_max.is_finite()) {
                        return Err(Error::InvalidSchedule(format!(
                            "need 0 < sigma_min < sigma_max, got sigma_min={} sigma_max={}",
                            spec.sigma_min, spec.sigma_max
                        )));
                    }
                    Schedule::VeGeometric { min: spec.sigma_min, max: spec.sigma_max }
                }
                VeSchedule::Linear => Schedule::VeLinear,
            },
            ModelKind::Ou => {
                if !(spec.theta > 0.0 && spec.ou_sigma > 0.0 && spec.ou_mean.is_finite()) {
                    return Err(Error::InvalidSchedule(format!(
                        "need theta > 0 and sigma > 0, got theta={} sigma={}",
                        spec.theta, spec.ou_sigma
                    )));
                }
                Schedule::Ou { theta: spec.theta, mean: spec.ou_mean, sigma: spec.ou_sigma }
            }
            ModelKind::Custom => {
                return Err(Error::InvalidSchedule("custom models are built with DiffusionModel::custom".into()))
            }
        };
        Ok(Self { kind: spec.kind, schedule, dim: spec.dim, horizon: spec.horizon, hash: spec.hash() })
    }

    /// A model with user-supplied drift slope `a(t)` and diffusion `g(t)`
    /// (no offset) and prior `N(0, prior_variance I)`.
    pub fn custom(
        slope: impl Fn(f64) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64) -> f64 + Send + Sync + 'static,
        prior_variance: f64,
        dim: usize,
        horizon: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension(0));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidHorizon(horizon));
        }
        if !(prior_variance >= 0.0) {
            return Err(Error::InvalidSchedule(format!("prior variance {prior_variance} < 0")));
        }
        Ok(Self {
            kind: ModelKind::Custom,
            schedule: Schedule::Custom { slope: Arc::new(slope), diffusion: Arc::new(diffusion), prior_variance },
            dim,
            horizon,
            hash: "custom".into(),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        if t.is_nan() || t < -TIME_SLACK || t > self.horizon * (1.0 + TIME_SLACK) + TIME_SLACK {
            return Err(Error::TimeOutOfRange { t, horizon: self.horizon });
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    /// `beta(t)` for VP, subVP and CVP.
    pub fn beta(&self, t: f64) -> Result<f64> {
        match self.schedule {
            Schedule::Beta { min, max } => Ok(min + t / self.horizon * (max - min)),
            _ => Err(Error::UnsupportedModel { op: "beta", kind: self.kind.to_string() }),
        }
    }

    /// `int_0^t beta(s) ds` in closed form.
    pub fn beta_integral(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        match self.schedule {
            Schedule::Beta { min, max } => Ok(self.beta_integral_unchecked(min, max, t)),
            _ => Err(Error::UnsupportedModel { op: "beta_integral", kind: self.kind.to_string() }),
        }
    }

    fn beta_integral_unchecked(&self, min: f64, max: f64, t: f64) -> f64 {
        min * t + t * t / (2.0 * self.horizon) * (max - min)
    }

    /// Drift slope `a(t)` in `f(t, x) = a(t) x + c(t)`.
    pub fn drift_slope(&self, t: f64) -> f64 {
        match &self.schedule {
            Schedule::Beta { .. } => {
                let b = self.beta(t).expect("beta schedule");
                match self.kind {
                    ModelKind::Cvp => 0.5 * b,
                    _ => -0.5 * b,
                }
            }
            Schedule::VeGeometric { .. } | Schedule::VeLinear => 0.0,
            Schedule::Ou { theta, .. } => -theta,
            Schedule::Custom { slope, .. } => slope(t),
        }
    }

    /// Per-coordinate drift offset `c(t)`; nonzero only for OU.
    pub fn drift_offset(&self, _t: f64) -> f64 {
        match self.schedule {
            Schedule::Ou { theta, mean, .. } => theta * mean,
            _ => 0.0,
        }
    }

    pub fn has_offset(&self) -> bool {
        matches!(self.schedule, Schedule::Ou { mean, .. } if mean != 0.0)
    }

    /// Writes `f(t, x)` into `out`.
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let a = self.drift_slope(t);
        let c = self.drift_offset(t);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = a * xi + c;
        }
    }

    /// Diffusion coefficient `g(t)`.
    pub fn diffusion(&self, t: f64) -> f64 {
        self.diffusion_sq(t).max(0.0).sqrt()
    }

    /// `g(t)^2`.
    pub fn diffusion_sq(&self, t: f64) -> f64 {
        match &self.schedule {
            Schedule::Beta { min, max } => {
                let b = self.beta(t).expect("beta schedule");
                match self.kind {
                    ModelKind::SubVp => {
                        let bi = self.beta_integral_unchecked(*min, *max, t.max(0.0));
                        b * (-(-2.0 * bi).exp_m1())
                    }
                    _ => b,
                }
            }
            Schedule::VeGeometric { min, max } => {
                let r = (max / min).ln();
                let s = min * (r * t / self.horizon).exp();
                s * s * 2.0 * r / self.horizon
            }
            Schedule::VeLinear => 2.0 * t.max(0.0),
            Schedule::Ou { sigma, .. } => sigma * sigma,
            Schedule::Custom { diffusion, .. } => {
                let g = diffusion(t);
                g * g
            }
        }
    }

    /// Contraction rate `r_f(t)`: `(x - x') . (f(t,x) - f(t,x')) = r_f(t) |x - x'|^2`.
    pub fn contraction_rate(&self, t: f64) -> f64 {
        self.drift_slope(t)
    }

    /// `A(t) = int_0^t a(s) ds`.
    fn slope_antiderivative(&self, t: f64) -> f64 {
        match &self.schedule {
            Schedule::Beta { min, max } => {
                let b = self.beta_integral_unchecked(*min, *max, t);
                if self.kind == ModelKind::Cvp {
                    0.5 * b
                } else {
                    -0.5 * b
                }
            }
            Schedule::VeGeometric { .. } | Schedule::VeLinear => 0.0,
            Schedule::Ou { theta, .. } => -theta * t,
            Schedule::Custom { slope, .. } => quadrature::integrate(|s| slope(s), 0.0, t, 1e-13),
        }
    }

    /// `int_a^b a(s) ds`.
    pub fn slope_integral(&self, a: f64, b: f64) -> Result<f64> {
        let a = self.check_time(a)?;
        let b = self.check_time(b)?;
        Ok(self.slope_antiderivative(b) - self.slope_antiderivative(a))
    }

    /// Conditional variance `sigma_t^2` of `X_t | X_0`.
    fn marginal_variance(&self, t: f64) -> f64 {
        match &self.schedule {
            Schedule::Beta { min, max } => {
                let b = self.beta_integral_unchecked(*min, *max, t);
                match self.kind {
                    ModelKind::Vp => -(-b).exp_m1(),
                    ModelKind::SubVp => {
                        let s = -(-b).exp_m1();
                        s * s
                    }
                    _ => b.exp_m1(),
                }
            }
            Schedule::VeGeometric { min, max } => min * min * (2.0 * t / self.horizon * (max / min).ln()).exp_m1(),
            Schedule::VeLinear => t * t,
            Schedule::Ou { theta, sigma, .. } => sigma * sigma / (2.0 * theta) * (-(-2.0 * theta * t).exp_m1()),
            Schedule::Custom { diffusion, .. } => {
                let at = self.slope_antiderivative(t);
                quadrature::integrate(
                    |s| {
                        let g = diffusion(s);
                        (2.0 * (at - self.slope_antiderivative(s))).exp() * g * g
                    },
                    0.0,
                    t,
                    1e-12,
                )
            }
        }
    }

    /// Closed-form law of `X_t | X_0`.
    pub fn conditional_marginal(&self, t: f64) -> Result<ConditionalMarginal> {
        let t = self.check_time(t)?;
        let mean_factor = self.slope_antiderivative(t).exp();
        let mean_offset = match self.schedule {
            Schedule::Ou { theta, mean, .. } => -mean * (-theta * t).exp_m1(),
            _ => 0.0,
        };
        let std = self.marginal_variance(t).max(0.0).sqrt();
        Ok(ConditionalMarginal { mean_factor, mean_offset, std })
    }

    /// Forward transition from time `a` to time `b >= a`.
    pub fn transition(&self, a: f64, b: f64) -> Result<Transition> {
        if b < a {
            return Err(Error::InvalidArgument(format!("transition needs a <= b, got a={a} b={b}")));
        }
        let ma = self.conditional_marginal(a)?;
        let mb = self.conditional_marginal(b)?;
        let factor = (self.slope_antiderivative(self.check_time(b)?) - self.slope_antiderivative(self.check_time(a)?)).exp();
        let offset = mb.mean_offset - factor * ma.mean_offset;
        let variance = (mb.variance() - factor * factor * ma.variance()).max(0.0);
        Ok(Transition { factor, offset, variance })
    }

    /// `int_a^b g(s)^2 ds`.
    pub fn diffusion_sq_integral(&self, a: f64, b: f64) -> Result<f64> {
        let a = self.check_time(a)?;
        let b = self.check_time(b)?;
        let v = match &self.schedule {
            Schedule::Beta { min, max } => {
                let (ba, bb) = (self.beta_integral_unchecked(*min, *max, a), self.beta_integral_unchecked(*min, *max, b));
                match self.kind {
                    ModelKind::SubVp => (bb - ba) + 0.5 * ((-2.0 * bb).exp() - (-2.0 * ba).exp()),
                    _ => bb - ba,
                }
            }
            Schedule::VeGeometric { .. } | Schedule::VeLinear => self.marginal_variance(b) - self.marginal_variance(a),
            Schedule::Ou { sigma, .. } => sigma * sigma * (b - a),
            Schedule::Custom { .. } => quadrature::integrate(|s| self.diffusion_sq(s), a, b, 1e-13),
        };
        Ok(v)
    }

    /// `int_lo^hi exp(A(lo) - A(s)) g(s)^2 ds`: the score coefficient of an
    /// exponential-integrator step covering forward times `[lo, hi]`.
    pub fn ei_score_weight(&self, lo: f64, hi: f64) -> Result<f64> {
        let lo = self.check_time(lo)?;
        let hi = self.check_time(hi)?;
        let v = match &self.schedule {
            Schedule::Beta { min, max } => {
                let (bl, bh) = (self.beta_integral_unchecked(*min, *max, lo), self.beta_integral_unchecked(*min, *max, hi));
                match self.kind {
                    ModelKind::Vp => 2.0 * (0.5 * (bh - bl)).exp_m1(),
                    ModelKind::Cvp => -2.0 * (-0.5 * (bh - bl)).exp_m1(),
                    _ => {
                        (-0.5 * bl).exp()
                            * (2.0 * ((0.5 * bh).exp() - (0.5 * bl).exp())
                                - 2.0 / 3.0 * ((-1.5 * bl).exp() - (-1.5 * bh).exp()))
                    }
                }
            }
            Schedule::VeGeometric { .. } | Schedule::VeLinear => self.marginal_variance(hi) - self.marginal_variance(lo),
            Schedule::Ou { theta, sigma, .. } => sigma * sigma * (theta * (hi - lo)).exp_m1() / theta,
            Schedule::Custom { .. } => {
                let al = self.slope_antiderivative(lo);
                quadrature::integrate(|s| (al - self.slope_antiderivative(s)).exp() * self.diffusion_sq(s), lo, hi, 1e-12)
            }
        };
        Ok(v)
    }

    /// `int_lo^hi exp(2 A(lo) - 2 A(s)) g(s)^2 ds`: the noise variance of an
    /// exponential-integrator step covering forward times `[lo, hi]`.
    pub fn ei_noise_variance(&self, lo: f64, hi: f64) -> Result<f64> {
        let tr = self.transition(lo, hi)?;
        Ok(tr.variance / (tr.factor * tr.factor))
    }

    pub fn prior(&self) -> PriorSpec {
        let (mean, variance) = match &self.schedule {
            Schedule::Beta { min, max } => match self.kind {
                ModelKind::Cvp => (0.0, self.beta_integral_unchecked(*min, *max, self.horizon).exp_m1()),
                _ => (0.0, 1.0),
            },
            Schedule::VeGeometric { min, max } => (0.0, max * max - min * min),
            Schedule::VeLinear => (0.0, self.horizon * self.horizon),
            Schedule::Ou { theta, mean, sigma } => (*mean, sigma * sigma / (2.0 * theta)),
            Schedule::Custom { prior_variance, .. } => (0.0, *prior_variance),
        };
        PriorSpec { mean: vec![mean; self.dim], variance }
    }

    /// `n` i.i.d. draws from the prior, deterministic in `seed`.
    pub fn prior_sample(&self, n: usize, seed: u64) -> Result<Batch> {
        if n == 0 {
            return Err(Error::EmptySample);
        }
        let prior = self.prior();
        let sd = prior.variance.sqrt();
        let mut rng = rng::stream(seed, domain::PRIOR, 0);
        let mut batch = Batch::zeros(n, self.dim);
        for row in batch.rows_mut() {
            for (x, m) in row.iter_mut().zip(&prior.mean) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = m + sd * z;
            }
        }
        Ok(batch)
    }

    /// Space-time change `X_t = s(t) X^VE_{l(t)}` for models with `c = 0`.
    pub fn reparam_to_ve(&self) -> Result<VeReparam> {
        if matches!(self.schedule, Schedule::Ou { .. }) {
            return Err(Error::UnsupportedModel {
                op: "reparam_to_ve (drift offset c(t) = theta * mu is not of the form a(t) x)",
                kind: self.kind.to_string(),
            });
        }
        Ok(VeReparam { model: self.clone() })
    }
}

/// The pair `s(t) = exp(int_0^t a)`, `l(t) = sqrt(int_0^t g^2 / s^2)`.
#[derive(Debug, Clone)]
pub struct VeReparam {
    model: DiffusionModel,
}

impl VeReparam {
    pub fn scale(&self, t: f64) -> Result<f64> {
        Ok(self.model.conditional_marginal(t)?.mean_factor)
    }

    /// `l(t)`; equals `sigma_t / s(t)` since `sigma_t^2 = s(t)^2 l(t)^2`.
    pub fn noise_level(&self, t: f64) -> Result<f64> {
        let m = self.model.conditional_marginal(t)?;
        Ok(m.std / m.mean_factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate, trapezoid};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn vp() -> DiffusionModel {
        DiffusionModel::new(&ModelSpec::vp(0.1, 20.0, 2, 1.0)).unwrap()
    }

    fn all_models() -> Vec<DiffusionModel> {
        vec![
            vp(),
            DiffusionModel::new(&ModelSpec::sub_vp(0.1, 20.0, 2, 1.0)).unwrap(),
            DiffusionModel::new(&ModelSpec::cvp(0.1, 5.0, 2, 1.0)).unwrap(),
            DiffusionModel::new(&ModelSpec::ve(0.01, 50.0, 2, 1.0)).unwrap(),
            DiffusionModel::new(&ModelSpec::ve_linear(2, 2.0)).unwrap(),
            DiffusionModel::new(&ModelSpec::ou(1.3, 0.7, 0.9, 2, 1.5)).unwrap(),
        ]
    }

    #[test]
    fn vp_diffusion_endpoints() {
        let m = vp();
        assert_relative_eq!(m.diffusion(0.0), 0.1f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(m.diffusion(1.0), 20f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn rejects_bad_constants() {
        assert!(DiffusionModel::new(&ModelSpec::ve(1.0, 1.0, 2, 1.0)).is_err());
        assert!(DiffusionModel::new(&ModelSpec::vp(20.0, 0.1, 2, 1.0)).is_err());
        assert!(DiffusionModel::new(&ModelSpec::vp(0.1, 20.0, 0, 1.0)).is_err());
        assert!(DiffusionModel::new(&ModelSpec::vp(0.1, 20.0, 2, 0.0)).is_err());
        assert!(DiffusionModel::new(&ModelSpec::vp(0.1, 20.0, 2, -1.0)).is_err());
    }

    #[test]
    fn ou_stationary_prior() {
        let m = DiffusionModel::new(&ModelSpec::ou(1.0, 0.0, std::f64::consts::SQRT_2, 1, 1.0)).unwrap();
        assert_relative_eq!(m.prior().variance, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn beta_integral_matches_trapezoid_oracle() {
        let m = vp();
        let oracle = trapezoid(|s| m.beta(s).unwrap(), 0.0, 1.0, 1_000_000);
        assert_relative_eq!(oracle, 10.05, max_relative = 1e-10);
        assert_relative_eq!(m.beta_integral(1.0).unwrap(), oracle, max_relative = 1e-10);
        assert_eq!(m.beta_integral(0.0).unwrap(), 0.0);
        let c = DiffusionModel::new(&ModelSpec::vp(1.0, 1.0, 1, 1.0)).unwrap();
        assert_relative_eq!(c.beta_integral(0.5).unwrap(), 0.5, epsilon = 1e-15);
        assert!(m.beta_integral(1.5).is_err());
        let ve = DiffusionModel::new(&ModelSpec::ve(0.01, 50.0, 2, 1.0)).unwrap();
        assert!(ve.beta_integral(0.5).is_err());
    }

    #[test]
    fn beta_integral_agrees_with_adaptive_quadrature() {
        let m = DiffusionModel::new(&ModelSpec::vp(0.3, 7.0, 1, 2.5)).unwrap();
        let mut rng = crate::rng::stream(11, 0, 0);
        for _ in 0..100 {
            let t = rng.random::<f64>() * 2.5;
            let q = integrate(|s| m.beta(s).unwrap(), 0.0, t, 1e-14);
            assert_relative_eq!(m.beta_integral(t).unwrap(), q, max_relative = 1e-10);
        }
    }

    #[test]
    fn vp_marginal_at_horizon() {
        let cm = vp().conditional_marginal(1.0).unwrap();
        let bi = trapezoid(|s| 0.1 + 19.9 * s, 0.0, 1.0, 100_000);
        assert_relative_eq!(cm.mean_factor, (-0.5 * bi).exp(), max_relative = 1e-10);
        assert_relative_eq!(cm.mean_factor, 6.5705e-3, max_relative = 1e-3);
        assert_relative_eq!(cm.variance(), 1.0 - (-bi).exp(), max_relative = 1e-12);
    }

    #[test]
    fn marginals_start_at_identity() {
        for m in all_models() {
            let cm = m.conditional_marginal(0.0).unwrap();
            assert_eq!(cm.mean_factor, 1.0, "{:?}", m.kind());
            assert_eq!(cm.mean_offset, 0.0);
            assert_eq!(cm.std, 0.0);
        }
    }

    #[test]
    fn ve_variance_at_horizon() {
        let m = DiffusionModel::new(&ModelSpec::ve(0.01, 50.0, 2, 1.0)).unwrap();
        assert_relative_eq!(m.conditional_marginal(1.0).unwrap().variance(), 2499.9999, max_relative = 1e-12);
        assert_relative_eq!(m.prior().variance, 2499.9999, max_relative = 1e-12);
    }

    #[test]
    fn cvp_prior_variance() {
        let m = DiffusionModel::new(&ModelSpec::cvp(0.1, 5.0, 2, 1.0)).unwrap();
        assert_relative_eq!(m.prior().variance, (1.0f64 * (5.0 + 0.1) / 2.0).exp() - 1.0, max_relative = 1e-14);
    }

    /// sigma_t^2 = int_0^t exp(2(A(t) - A(s))) g(s)^2 ds, checked by quadrature.
    #[test]
    fn closed_form_variances_match_quadrature() {
        for m in all_models() {
            for &frac in &[0.1, 0.5, 1.0] {
                let t = frac * m.horizon();
                let at = m.slope_integral(0.0, t).unwrap();
                let q = integrate(|s| (2.0 * (at - m.slope_integral(0.0, s).unwrap())).exp() * m.diffusion_sq(s), 0.0, t, 1e-12);
                let cm = m.conditional_marginal(t).unwrap();
                assert_relative_eq!(cm.variance(), q, max_relative = 1e-8);
                let mean_q = integrate(|s| (at - m.slope_integral(0.0, s).unwrap()).exp() * m.drift_offset(s), 0.0, t, 1e-13);
                assert!((cm.mean_offset - mean_q).abs() < 1e-10, "{:?}", m.kind());
            }
        }
    }

    #[test]
    fn closed_form_integrals_match_quadrature() {
        for m in all_models() {
            let t = m.horizon();
            let (lo, hi) = (0.2 * t, 0.7 * t);
            let g2q = integrate(|s| m.diffusion_sq(s), lo, hi, 1e-13);
            assert_relative_eq!(m.diffusion_sq_integral(lo, hi).unwrap(), g2q, max_relative = 1e-9);
            let al = m.slope_integral(0.0, lo).unwrap();
            let wq = integrate(|s| (al - m.slope_integral(0.0, s).unwrap()).exp() * m.diffusion_sq(s), lo, hi, 1e-13);
            assert_relative_eq!(m.ei_score_weight(lo, hi).unwrap(), wq, max_relative = 1e-9);
            let vq = integrate(|s| (2.0 * (al - m.slope_integral(0.0, s).unwrap())).exp() * m.diffusion_sq(s), lo, hi, 1e-13);
            assert_relative_eq!(m.ei_noise_variance(lo, hi).unwrap(), vq, max_relative = 1e-9);
        }
    }

    #[test]
    fn custom_model_uses_quadrature_fallback() {
        let custom = DiffusionModel::custom(|t| -0.5 * (0.1 + 19.9 * t), |t| (0.1 + 19.9 * t).sqrt(), 1.0, 2, 1.0).unwrap();
        let reference = vp();
        for &t in &[0.0, 0.3, 1.0] {
            let a = custom.conditional_marginal(t).unwrap();
            let b = reference.conditional_marginal(t).unwrap();
            assert_relative_eq!(a.mean_factor, b.mean_factor, max_relative = 1e-10);
            assert_relative_eq!(a.std, b.std, max_relative = 1e-8, epsilon = 1e-14);
        }
        assert_relative_eq!(custom.ei_score_weight(0.2, 0.6).unwrap(), reference.ei_score_weight(0.2, 0.6).unwrap(), max_relative = 1e-8);
    }

    #[test]
    fn sigma_nondecreasing() {
        for m in all_models() {
            let mut prev = 0.0;
            for k in 0..=200 {
                let s = m.conditional_marginal(k as f64 / 200.0 * m.horizon()).unwrap().std;
                assert!(s >= prev - 1e-15);
                prev = s;
            }
        }
    }

    #[test]
    fn cvp_is_contractive() {
        let m = DiffusionModel::new(&ModelSpec::cvp(0.1, 20.0, 2, 1.0)).unwrap();
        let inf = (0..=100).map(|k| m.contraction_rate(k as f64 / 100.0)).fold(f64::INFINITY, f64::min);
        assert!(inf > 0.0);
        assert_relative_eq!(inf, 0.05, epsilon = 1e-15);
    }

    #[test]
    fn prior_sampling_is_deterministic_and_centered() {
        let m = vp();
        let a = m.prior_sample(1000, 5).unwrap();
        let b = m.prior_sample(1000, 5).unwrap();
        assert_eq!(a, b);
        assert!(m.prior_sample(0, 5).is_err());
        let big = m.prior_sample(1_000_000, 1).unwrap();
        for mu in big.mean() {
            assert!(mu.abs() < 4.0 / 1000.0, "{mu}");
        }
    }

    #[test]
    fn reparametrization_examples() {
        let ve = DiffusionModel::new(&ModelSpec::ve_linear(1, 2.0)).unwrap().reparam_to_ve().unwrap();
        for &t in &[0.0, 0.4, 1.7] {
            assert_relative_eq!(ve.scale(t).unwrap(), 1.0);
            assert_relative_eq!(ve.noise_level(t).unwrap(), t, epsilon = 1e-15);
        }
        let vp1 = DiffusionModel::new(&ModelSpec::vp(1.0, 1.0, 1, 1.0)).unwrap().reparam_to_ve().unwrap();
        assert_relative_eq!(vp1.scale(1.0).unwrap(), (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(vp1.scale(1.0).unwrap(), 0.6065, epsilon = 1e-4);
        assert_relative_eq!(vp1.noise_level(1.0).unwrap(), (std::f64::consts::E - 1.0).sqrt(), max_relative = 1e-14);
        assert_relative_eq!(vp1.noise_level(1.0).unwrap(), 1.3108, epsilon = 1e-4);
        assert_eq!(vp1.scale(0.0).unwrap(), 1.0);
        assert_eq!(vp1.noise_level(0.0).unwrap(), 0.0);
        let ou = DiffusionModel::new(&ModelSpec::ou(1.0, 0.5, 1.0, 1, 1.0)).unwrap();
        let err = ou.reparam_to_ve().unwrap_err();
        assert!(err.to_string().contains("offset"));
    }

    #[test]
    fn reparametrization_from_definition() {
        // l(t)^2 = int_0^t g^2 / s^2, checked by quadrature for each model.
        for m in all_models().into_iter().filter(|m| m.kind() != ModelKind::Ou) {
            let r = m.reparam_to_ve().unwrap();
            let t = 0.6 * m.horizon();
            let q = integrate(|u| m.diffusion_sq(u) / (2.0 * m.slope_integral(0.0, u).unwrap()).exp(), 0.0, t, 1e-12);
            assert_relative_eq!(r.noise_level(t).unwrap().powi(2), q, max_relative = 1e-8);
        }
    }

    proptest::proptest! {
        #[test]
        fn vp_reparam_identity(t in 0.0f64..1.0, bmin in 0.05f64..1.0, spread in 0.0f64..30.0) {
            let m = DiffusionModel::new(&ModelSpec::vp(bmin, bmin + spread, 1, 1.0)).unwrap();
            let r = m.reparam_to_ve().unwrap();
            let s = r.scale(t).unwrap();
            let l = r.noise_level(t).unwrap();
            proptest::prop_assert!((s * s * l * l + s * s - 1.0).abs() < 1e-12);
        }
    }
}
