//! Data distributions `p_data` and the exact time-`t` oracle for affine SDEs.
//!
//! An isotropic Gaussian mixture stays a Gaussian mixture under the forward
//! dynamics, so density, score and posterior mean at any time are available in
//! closed form. Everything else in the crate is checked against this oracle.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::sde::DiffusionModel;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Mixture of isotropic Gaussians `sum_i w_i N(mu_i, v_i I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let gm = Self::build(weights, means, variances)?;
        if let Some(v) = gm.variances.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidTarget(format!("component variance {v} must be positive")));
        }
        Ok(gm)
    }

    /// Point mass at `center`, i.e. a single component with zero variance.
    /// Its evolved law at any `t > 0` is a proper Gaussian.
    pub fn dirac(center: Vec<f64>) -> Result<Self> {
        Self::build(vec![1.0], vec![center], vec![0.0])
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    fn build(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::InvalidTarget(format!(
                "need matching nonempty weights/means/variances, got {}/{}/{}",
                k,
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidDimension(0));
        }
        if let Some(m) = means.iter().find(|m| m.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: m.len() });
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidTarget("weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidTarget(format!("weights sum to {total}, not 1")));
        }
        if variances.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::InvalidTarget("means and variances must be finite, variances nonnegative".into()));
        }
        Ok(Self { weights, means, variances, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (a, b) in m.iter_mut().zip(mu) {
                *a += w * b;
            }
        }
        m
    }

    /// `E|X|^2`.
    pub fn second_moment(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, mu), v)| w * (mu.iter().map(|x| x * x).sum::<f64>() + self.dim as f64 * v))
            .sum()
    }

    /// Per-coordinate variance, meaningful for single-component targets.
    pub fn total_variance(&self) -> f64 {
        let m = self.mean();
        self.second_moment() / self.dim as f64 - m.iter().map(|x| x * x).sum::<f64>() / self.dim as f64
    }

    /// Exact law of `X_t` when `X_0 ~ self`.
    pub fn evolve(&self, model: &DiffusionModel, t: f64) -> Result<Self> {
        if model.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: model.dim(), got: self.dim });
        }
        let cm = model.conditional_marginal(t)?;
        let m = cm.mean_factor;
        let means = self.means.iter().map(|mu| mu.iter().map(|x| m * x + cm.mean_offset).collect()).collect();
        let variances = self.variances.iter().map(|v| m * m * v + cm.variance()).collect();
        Ok(Self { weights: self.weights.clone(), means, variances, dim: self.dim })
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if let Some(v) = self.variances.iter().zip(&self.weights).find(|(v, w)| **w > 0.0 && !(**v > 0.0)) {
            return Err(Error::DegenerateVariance(format!("component variance {} has no density", v.0)));
        }
        Ok(())
    }

    /// Fills `out[i]` with `log w_i + log N(x; mu_i, v_i I)`.
    fn component_log_terms(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim as f64;
        for (i, o) in out.iter_mut().enumerate() {
            let w = self.weights[i];
            if w == 0.0 {
                *o = f64::NEG_INFINITY;
                continue;
            }
            let v = self.variances[i];
            let sq: f64 = x.iter().zip(&self.means[i]).map(|(a, b)| (a - b) * (a - b)).sum();
            *o = w.ln() - 0.5 * d * (LN_2PI + v.ln()) - 0.5 * sq / v;
        }
    }

    /// Posterior responsibilities `r_i(x)`, computed with log-sum-exp.
    /// Returns `log p(x)`.
    fn responsibilities_into(&self, x: &[f64], r: &mut [f64]) -> f64 {
        self.component_log_terms(x, r);
        let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in r.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        r.iter_mut().for_each(|v| *v /= s);
        mx + s.ln()
    }

    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut r = vec![0.0; self.components()];
        self.responsibilities_into(x, &mut r);
        Ok(r)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        let mut r = vec![0.0; self.components()];
        Ok(self.responsibilities_into(x, &mut r))
    }

    /// `grad log p(x) = sum_i r_i(x) (mu_i - x) / v_i`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut out = vec![0.0; self.dim];
        self.score_into_unchecked(x, &mut out);
        Ok(out)
    }

    /// Hot-path score evaluation; the caller guarantees dimensions and
    /// positive variances (see [`GaussianMixture::check_density`]).
    pub(crate) fn score_into_unchecked(&self, x: &[f64], out: &mut [f64]) {
        let k = self.components();
        let mut stack = [0.0f64; 16];
        let mut heap;
        let r: &mut [f64] = if k <= 16 {
            &mut stack[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        self.responsibilities_into(x, r);
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..k {
            if r[i] == 0.0 {
                continue;
            }
            let c = r[i] / self.variances[i];
            for ((o, m), xi) in out.iter_mut().zip(&self.means[i]).zip(x) {
                *o += c * (m - xi);
            }
        }
    }

    /// Errors unless every weighted component has a density.
    pub fn check_density(&self) -> Result<()> {
        self.check_point(&vec![0.0; self.dim])
    }

    /// Jacobian of the score, row-major `d x d`.
    pub fn score_jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.responsibilities(x)?;
        let d = self.dim;
        let mut jac = vec![0.0; d * d];
        let mut mean_a = vec![0.0; d];
        let mut a = vec![0.0; d];
        for i in 0..self.components() {
            if r[i] == 0.0 {
                continue;
            }
            let v = self.variances[i];
            for j in 0..d {
                a[j] = (self.means[i][j] - x[j]) / v;
                mean_a[j] += r[i] * a[j];
            }
            for p in 0..d {
                jac[p * d + p] -= r[i] / v;
                for q in 0..d {
                    jac[p * d + q] += r[i] * a[p] * a[q];
                }
            }
        }
        for p in 0..d {
            for q in 0..d {
                jac[p * d + q] -= mean_a[p] * mean_a[q];
            }
        }
        Ok(jac)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Batch> {
        if n == 0 {
            return Err(Error::EmptySample);
        }
        let mut rng = rng::stream(seed, domain::TARGET, 0);
        let mut batch = Batch::zeros(n, self.dim);
        for row in batch.rows_mut() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut idx = self.components() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc && *w > 0.0 {
                    idx = i;
                    break;
                }
            }
            while self.weights[idx] == 0.0 && idx > 0 {
                idx -= 1;
            }
            let sd = self.variances[idx].sqrt();
            for (x, m) in row.iter_mut().zip(&self.means[idx]) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = m + sd * z;
            }
        }
        Ok(batch)
    }
}

/// Tweedie posterior mean `E(m(t) X_0 + mu_off(t) | X_t = x)` computed from
/// per-component Gaussian conjugacy (independently of the score).
pub fn posterior_mean(target: &GaussianMixture, model: &DiffusionModel, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let cm = model.conditional_marginal(t)?;
    if cm.std == 0.0 {
        if x.len() != target.dim() {
            return Err(Error::DimensionMismatch { expected: target.dim(), got: x.len() });
        }
        return Ok(x.to_vec());
    }
    let evolved = target.evolve(model, t)?;
    let r = evolved.responsibilities(x)?;
    let (m, off, s2) = (cm.mean_factor, cm.mean_offset, cm.variance());
    let mut out = vec![0.0; target.dim()];
    for i in 0..target.components() {
        let v = target.variances()[i];
        let gain = v * m / (m * m * v + s2);
        for (j, o) in out.iter_mut().enumerate() {
            let mu = target.means()[i][j];
            let x0 = mu + gain * (x[j] - m * mu - off);
            *o += r[i] * (m * x0 + off);
        }
    }
    Ok(out)
}

/// Two-dimensional Swiss roll: `theta * (cos theta, sin theta)` along
/// `theta in [1.5 pi, 1.5 pi + 2 pi turns]`, rescaled and noised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwissRoll {
    pub turns: f64,
    pub noise_std: f64,
    pub scale: f64,
}

impl Default for SwissRoll {
    fn default() -> Self {
        Self { turns: 1.5, noise_std: 0.05, scale: 1.0 }
    }
}

impl SwissRoll {
    pub fn sample(&self, n: usize, seed: u64) -> Result<Batch> {
        if n == 0 {
            return Err(Error::EmptySample);
        }
        if !(self.turns > 0.0 && self.noise_std >= 0.0) {
            return Err(Error::InvalidTarget("swiss roll needs turns > 0 and noise_std >= 0".into()));
        }
        let start = 1.5 * std::f64::consts::PI;
        let end = start + 2.0 * std::f64::consts::PI * self.turns;
        let mut rng = rng::stream(seed, domain::TARGET, 0);
        let mut batch = Batch::zeros(n, 2);
        for row in batch.rows_mut() {
            let th = start + (end - start) * rng.random::<f64>();
            let (zx, zy): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            row[0] = self.scale * th * th.cos() / end + self.noise_std * zx;
            row[1] = self.scale * th * th.sin() / end + self.noise_std * zy;
        }
        Ok(batch)
    }

    /// Equal-weight mixture of `components` Gaussians centred on the curve at
    /// evenly spaced angles, each with the roll's noise variance. Gives the
    /// roll an exact score for oracle sampling.
    pub fn mixture(&self, components: usize) -> Result<GaussianMixture> {
        if components == 0 || !(self.turns > 0.0 && self.noise_std >= 0.0) {
            return Err(Error::InvalidTarget("swiss roll mixture needs components >= 1, turns > 0, noise_std >= 0".into()));
        }
        let start = 1.5 * std::f64::consts::PI;
        let end = start + 2.0 * std::f64::consts::PI * self.turns;
        let means = (0..components)
            .map(|k| {
                let th = start + (end - start) * (k as f64 + 0.5) / components as f64;
                vec![self.scale * th * th.cos() / end, self.scale * th * th.sin() / end]
            })
            .collect();
        let mut weights = vec![1.0 / components as f64; components];
        weights[components - 1] = 1.0 - weights[..components - 1].iter().sum::<f64>();
        GaussianMixture::build(weights, means, vec![self.noise_std * self.noise_std; components])
    }
}

/// A data distribution: either a mixture (with oracle) or a Swiss roll
/// (samples only).
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Mixture(GaussianMixture),
    SwissRoll(SwissRoll),
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::Mixture(g) => g.dim(),
            Target::SwissRoll(_) => 2,
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Batch> {
        match self {
            Target::Mixture(g) => g.sample(n, seed),
            Target::SwissRoll(s) => s.sample(n, seed),
        }
    }

    pub fn as_mixture(&self) -> Option<&GaussianMixture> {
        match self {
            Target::Mixture(g) => Some(g),
            Target::SwissRoll(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    Gmm,
    SwissRoll,
    Dirac,
}

/// Serializable target description.
///
/// Canonical keys: `kind` (`gmm` | `swiss_roll` | `dirac`), `weights`,
/// `means`, `variances`, `center`, `turns`, `noise_std`, `scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSpec {
    pub kind: TargetKind,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub center: Vec<f64>,
    pub turns: f64,
    pub noise_std: f64,
    pub scale: f64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        let roll = SwissRoll::default();
        Self {
            kind: TargetKind::Gmm,
            weights: vec![0.3, 0.7],
            means: vec![vec![-1.5, -1.0], vec![1.0, 1.0]],
            variances: vec![0.15, 0.25],
            center: vec![0.0, 0.0],
            turns: roll.turns,
            noise_std: roll.noise_std,
            scale: roll.scale,
        }
    }
}

impl TargetSpec {
    pub fn build(&self) -> Result<Target> {
        match self.kind {
            TargetKind::Gmm => Ok(Target::Mixture(GaussianMixture::new(
                self.weights.clone(),
                self.means.clone(),
                self.variances.clone(),
            )?)),
            TargetKind::Dirac => Ok(Target::Mixture(GaussianMixture::dirac(self.center.clone())?)),
            TargetKind::SwissRoll => {
                Ok(Target::SwissRoll(SwissRoll { turns: self.turns, noise_std: self.noise_std, scale: self.scale }))
            }
        }
    }
}
