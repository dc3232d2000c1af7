//! Score-matching objectives, their Monte-Carlo estimators, a minibatch
//! trainer and the closed-form exponential-family estimator.

use std::io::Write;
use std::ops::Range;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{ensure_finite, Error, Result};
use crate::optim::{self, OptState, Optimizer};
use crate::rng::{self, domain, StreamRng};
use crate::score::{LearnedScore, ScoreField};
use crate::sde::DiffusionModel;
use crate::stats::Estimate;
use crate::target::{GaussianMixture, Target};

const CHUNK: usize = 256;
const TRAIN_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Esm,
    Ism,
    Ssm,
    #[default]
    Dsm,
}

/// Time weight `lambda(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weight {
    Unit,
    #[default]
    SigmaSquared,
}

/// Training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingConfig {
    pub objective: Objective,
    pub weight: Weight,
    /// Lower end of the uniform time law; defaults to `1e-3 T`.
    pub t_floor: Option<f64>,
    /// Train at a single time instead of sampling `t`.
    pub fixed_time: Option<f64>,
    pub batch_size: usize,
    /// Projections per sample for SSM.
    pub projections: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Constant step size up to this iteration, then `lr sqrt(decay_after / k)`.
    pub decay_after: usize,
    pub clip_norm: Option<f64>,
    /// Return the mean of the iterates from this iteration on.
    pub average_from: Option<usize>,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dsm,
            weight: Weight::SigmaSquared,
            t_floor: None,
            fixed_time: None,
            batch_size: 128,
            projections: 1,
            optimizer: Optimizer::Sgd,
            learning_rate: 1e-2,
            momentum: 0.9,
            decay_after: 1000,
            clip_norm: None,
            average_from: None,
            iterations: 1000,
            seed: 0,
        }
    }
}

impl MatchingConfig {
    pub fn t_floor(&self, horizon: f64) -> f64 {
        self.t_floor.unwrap_or(1e-3 * horizon)
    }

    pub fn step_size(&self, k: usize) -> f64 {
        optim::step_size(self.learning_rate, self.decay_after, k)
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.objective == Objective::Ssm && self.projections == 0 {
            return Err(Error::InvalidArgument("SSM needs at least one projection".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("need learning_rate > 0 and momentum in [0, 1)".into()));
        }
        let floor = self.t_floor(horizon);
        if !(floor > 0.0 && floor < horizon) {
            return Err(Error::InvalidArgument(format!("t_floor {floor} must lie in (0, {horizon})")));
        }
        if let Some(t) = self.fixed_time {
            if !(t > 0.0 && t <= horizon) {
                return Err(Error::TimeOutOfRange { t, horizon });
            }
        }
        Ok(())
    }
}

fn weight_at(weight: Weight, model: &DiffusionModel, t: f64) -> Result<f64> {
    Ok(match weight {
        Weight::Unit => 1.0,
        Weight::SigmaSquared => model.conditional_marginal(t)?.variance(),
    })
}

fn normal_vec(rng: &mut StreamRng, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
}

fn check_batch(field: &ScoreField, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptySample);
    }
    if batch.dim() != field.dim() {
        return Err(Error::DimensionMismatch { expected: field.dim(), got: batch.dim() });
    }
    Ok(())
}

/// Evaluates `f` over row ranges in parallel, keeping row order.
fn per_row<F>(n: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(Range<usize>) -> Result<Vec<f64>> + Sync + Send,
{
    let chunks: Vec<Range<usize>> = (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect();
    let parts = chunks.into_par_iter().map(f).collect::<Result<Vec<_>>>()?;
    let out: Vec<f64> = parts.into_iter().flatten().collect();
    ensure_finite(&out, "loss term")?;
    Ok(out)
}

/// Per-sample `|s(t, x) - s*(t, x)|^2`.
pub fn esm_terms(field: &ScoreField, oracle: &ScoreField, t: f64, batch: &Batch) -> Result<Vec<f64>> {
    check_batch(field, batch)?;
    if !matches!(oracle, ScoreField::Oracle { .. }) {
        return Err(Error::InvalidArgument("ESM needs an oracle score (mixture targets only)".into()));
    }
    let d = batch.dim();
    per_row(batch.len(), |r| {
        let (mut ev, mut ov) = (field.at(t)?, oracle.at(t)?);
        let (mut s, mut o) = (vec![0.0; d], vec![0.0; d]);
        Ok(r.map(|i| {
            let x = batch.row(i);
            ev.eval(x, &mut s);
            ov.eval(x, &mut o);
            s.iter().zip(&o).map(|(a, b)| (a - b) * (a - b)).sum()
        })
        .collect())
    })
}

/// Explicit score matching `E|s - grad log p_t|^2` over a batch drawn from
/// the evolved target.
pub fn esm_loss(field: &ScoreField, oracle: &ScoreField, t: f64, batch: &Batch) -> Result<Estimate> {
    Ok(Estimate::from_samples(&esm_terms(field, oracle, t, batch)?))
}

/// Per-sample `|s|^2 + 2 div s`.
pub fn ism_terms(field: &ScoreField, t: f64, batch: &Batch) -> Result<Vec<f64>> {
    check_batch(field, batch)?;
    let d = batch.dim();
    per_row(batch.len(), |r| {
        let mut ev = field.at(t)?;
        let mut s = vec![0.0; d];
        r.map(|i| {
            let x = batch.row(i);
            ev.eval(x, &mut s);
            Ok(s.iter().map(|v| v * v).sum::<f64>() + 2.0 * ev.divergence(x)?)
        })
        .collect()
    })
}

/// Implicit score matching `E[|s|^2 + 2 div s]`.
pub fn ism_loss(field: &ScoreField, t: f64, batch: &Batch) -> Result<Estimate> {
    Ok(Estimate::from_samples(&ism_terms(field, t, batch)?))
}

/// Per-sample `(1/m) sum_j v_j^T (ds/dx) v_j` with `v_j ~ N(0, I)`; row `i`
/// draws from its own stream.
pub fn projection_terms(field: &ScoreField, t: f64, batch: &Batch, m: usize, seed: u64) -> Result<Vec<f64>> {
    check_batch(field, batch)?;
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let d = batch.dim();
    per_row(batch.len(), |r| {
        let mut ev = field.at(t)?;
        let mut v = vec![0.0; d];
        r.map(|i| {
            let mut rng = rng::stream(seed, domain::LOSS, i as u64);
            let mut acc = 0.0;
            for _ in 0..m {
                normal_vec(&mut rng, &mut v);
                acc += ev.projected_jacobian(batch.row(i), &v)?;
            }
            Ok(acc / m as f64)
        })
        .collect()
    })
}

/// Per-sample sliced objective `|s|^2 + (2/m) sum_j v_j^T (ds/dx) v_j`.
pub fn ssm_terms(field: &ScoreField, t: f64, batch: &Batch, m: usize, seed: u64) -> Result<Vec<f64>> {
    let proj = projection_terms(field, t, batch, m, seed)?;
    let d = batch.dim();
    let sq = per_row(batch.len(), |r| {
        let mut ev = field.at(t)?;
        let mut s = vec![0.0; d];
        Ok(r.map(|i| {
            ev.eval(batch.row(i), &mut s);
            s.iter().map(|v| v * v).sum()
        })
        .collect())
    })?;
    Ok(sq.iter().zip(&proj).map(|(a, b)| a + 2.0 * b).collect())
}

/// Sliced score matching with `m` Gaussian projections per sample.
pub fn ssm_loss(field: &ScoreField, t: f64, batch: &Batch, m: usize, seed: u64) -> Result<Estimate> {
    Ok(Estimate::from_samples(&ssm_terms(field, t, batch, m, seed)?))
}

/// `mu_t(x0) + sigma_t eps` row by row.
pub fn noised(model: &DiffusionModel, t: f64, x0: &Batch, eps: &Batch) -> Result<Batch> {
    if x0.len() != eps.len() || x0.dim() != eps.dim() {
        return Err(Error::DimensionMismatch { expected: x0.len(), got: eps.len() });
    }
    let cm = model.conditional_marginal(t)?;
    let data = x0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(x, e)| cm.mean_factor * x + cm.mean_offset + cm.std * e)
        .collect();
    Batch::from_flat(x0.dim(), data)
}

fn dsm_term(s: &[f64], eps: &[f64], std: f64, lambda: f64) -> f64 {
    lambda * s.iter().zip(eps).map(|(a, e)| (a + e / std).powi(2)).sum::<f64>()
}

/// Per-sample denoising terms `lambda |s(t, x_t) + eps / sigma_t|^2` at a
/// fixed time with supplied noise.
pub fn dsm_terms_at(
    field: &ScoreField,
    model: &DiffusionModel,
    t: f64,
    x0: &Batch,
    eps: &Batch,
    weight: Weight,
) -> Result<Vec<f64>> {
    check_batch(field, x0)?;
    let cm = model.conditional_marginal(t)?;
    if cm.std <= 0.0 {
        return Err(Error::DegenerateVariance(format!("sigma_t = 0 at t = {t}")));
    }
    let lambda = weight_at(weight, model, t)?;
    let xt = noised(model, t, x0, eps)?;
    let d = x0.dim();
    per_row(x0.len(), |r| {
        let mut ev = field.at(t)?;
        let mut s = vec![0.0; d];
        Ok(r.map(|i| {
            ev.eval(xt.row(i), &mut s);
            dsm_term(&s, eps.row(i), cm.std, lambda)
        })
        .collect())
    })
}

/// Denoising score matching with `t ~ U(t_floor, T)` and `eps ~ N(0, I)`;
/// with `SigmaSquared` weight each term is `|sigma_t s + eps|^2`.
pub fn dsm_loss(
    field: &ScoreField,
    model: &DiffusionModel,
    x0: &Batch,
    weight: Weight,
    t_floor: f64,
    seed: u64,
) -> Result<Estimate> {
    check_batch(field, x0)?;
    let horizon = model.horizon();
    if !(t_floor > 0.0 && t_floor < horizon) {
        return Err(Error::InvalidArgument(format!("t_floor {t_floor} must lie in (0, {horizon})")));
    }
    let d = x0.dim();
    let terms = per_row(x0.len(), |r| {
        let mut s = vec![0.0; d];
        let mut eps = vec![0.0; d];
        let mut xt = vec![0.0; d];
        r.map(|i| {
            let mut rng = rng::stream(seed, domain::LOSS, i as u64);
            let t = rng.random_range(t_floor..=horizon);
            normal_vec(&mut rng, &mut eps);
            let cm = model.conditional_marginal(t)?;
            for ((o, x), e) in xt.iter_mut().zip(x0.row(i)).zip(&eps) {
                *o = cm.mean_factor * x + cm.mean_offset + cm.std * e;
            }
            field.at(t)?.eval(&xt, &mut s);
            Ok(dsm_term(&s, &eps, cm.std, weight_at(weight, model, t)?))
        })
        .collect()
    })?;
    Ok(Estimate::from_samples(&terms))
}

/// Least-squares coefficient of the isotropic class `s(x) = a x` for the
/// denoising objective at time `t`: `a = -sum x_t . eps / sigma / sum |x_t|^2`.
pub fn dsm_linear_coefficient(model: &DiffusionModel, t: f64, x0: &Batch, eps: &Batch) -> Result<f64> {
    let cm = model.conditional_marginal(t)?;
    if cm.std <= 0.0 {
        return Err(Error::DegenerateVariance(format!("sigma_t = 0 at t = {t}")));
    }
    let xt = noised(model, t, x0, eps)?;
    let num: f64 = xt.as_slice().iter().zip(eps.as_slice()).map(|(x, e)| x * e).sum();
    let den: f64 = xt.as_slice().iter().map(|x| x * x).sum();
    if den <= 0.0 {
        return Err(Error::SingularMatrix("sum |x_t|^2 = 0".into()));
    }
    Ok(-num / cm.std / den)
}

/// One training iteration's loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub wall_time: f64,
}

pub fn write_loss_trace<W: Write>(mut w: W, trace: &[LossRecord]) -> Result<()> {
    writeln!(w, "iteration,loss,wall_time")?;
    for r in trace {
        writeln!(w, "{},{:e},{:.6}", r.iteration, r.loss, r.wall_time)?;
    }
    Ok(())
}

/// A trained field and its loss trace.
#[derive(Debug, Clone)]
pub struct Trained {
    pub field: ScoreField,
    pub trace: Vec<LossRecord>,
}

struct Draw {
    t: f64,
    xt: Vec<f64>,
    /// `eps / sigma_t` for DSM, the oracle score for ESM.
    aim: Vec<f64>,
    dirs: Vec<Vec<f64>>,
    lambda: f64,
}

fn draw_batch(
    cfg: &MatchingConfig,
    model: &DiffusionModel,
    target: &Target,
    floor: f64,
    k: usize,
) -> Result<Vec<Draw>> {
    let d = model.dim();
    let horizon = model.horizon();
    let x0 = target.sample(cfg.batch_size, rng::child_seed(cfg.seed, domain::TARGET, k as u64))?;
    let mut rng = rng::stream(cfg.seed, domain::TRAIN, k as u64);
    let mut eps = vec![0.0; d];
    let mut draws = Vec::with_capacity(cfg.batch_size);
    for x in x0.rows() {
        let t = match cfg.fixed_time {
            Some(t) => t,
            None => rng.random_range(floor..=horizon),
        };
        normal_vec(&mut rng, &mut eps);
        let cm = model.conditional_marginal(t)?;
        let xt: Vec<f64> = x.iter().zip(&eps).map(|(x, e)| cm.mean_factor * x + cm.mean_offset + cm.std * e).collect();
        let aim = match cfg.objective {
            Objective::Dsm => {
                if cm.std <= 0.0 {
                    return Err(Error::DegenerateVariance(format!("sigma_t = 0 at t = {t}")));
                }
                eps.iter().map(|e| e / cm.std).collect()
            }
            _ => Vec::new(),
        };
        let dirs = match cfg.objective {
            Objective::Ssm => (0..cfg.projections)
                .map(|_| {
                    let mut v = vec![0.0; d];
                    normal_vec(&mut rng, &mut v);
                    v
                })
                .collect(),
            Objective::Ism => (0..d)
                .map(|j| {
                    let mut e = vec![0.0; d];
                    e[j] = 1.0;
                    e
                })
                .collect(),
            _ => Vec::new(),
        };
        draws.push(Draw { t, xt, aim, dirs, lambda: weight_at(cfg.weight, model, t)? });
    }
    Ok(draws)
}

fn loss_and_grad(
    net: &LearnedScore,
    objective: Objective,
    oracle: Option<&GaussianMixture>,
    model: &DiffusionModel,
    draws: &[Draw],
) -> Result<(f64, Vec<f64>)> {
    let d = net.dim();
    let mut grad = vec![0.0; net.mlp().n_params()];
    let mut sc = net.scratch();
    let mut s = vec![0.0; d];
    let mut up = vec![0.0; d];
    let mut loss = 0.0;
    for dr in draws {
        let at = net.at(dr.t)?;
        net.eval(&at, &dr.xt, &mut sc, &mut s);
        match objective {
            Objective::Dsm | Objective::Esm => {
                let aim = match objective {
                    Objective::Esm => {
                        let g = oracle.expect("checked").evolve(model, dr.t)?;
                        g.score(&dr.xt)?.iter().map(|v| -v).collect()
                    }
                    _ => dr.aim.clone(),
                };
                let mut sq = 0.0;
                for ((u, a), b) in up.iter_mut().zip(&s).zip(&aim) {
                    let r = a + b;
                    sq += r * r;
                    *u = 2.0 * dr.lambda * r;
                }
                loss += dr.lambda * sq;
                net.accumulate_grad(&at, &mut sc, &up, &mut grad);
            }
            Objective::Ism | Objective::Ssm => {
                let w = 2.0 / dr.dirs.len() as f64;
                let mut sq = 0.0;
                for (u, a) in up.iter_mut().zip(&s) {
                    sq += a * a;
                    *u = 2.0 * dr.lambda * a;
                }
                net.accumulate_grad(&at, &mut sc, &up, &mut grad);
                let mut proj = 0.0;
                for v in &dr.dirs {
                    proj += net.projected_jacobian(&at, &dr.xt, v, &mut sc);
                    net.accumulate_projected_grad(&at, v, dr.lambda * w, &mut sc, &mut grad);
                }
                loss += dr.lambda * (sq + w * proj);
            }
        }
    }
    Ok((loss, grad))
}

/// Minibatch stochastic optimization of a learned field on the configured
/// objective. Deterministic given the seed.
pub fn train(cfg: &MatchingConfig, field: ScoreField, model: &DiffusionModel, target: &Target) -> Result<Trained> {
    let ScoreField::Learned(mut net) = field else {
        return Err(Error::NoParameters);
    };
    cfg.validate(model.horizon())?;
    if target.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: target.dim() });
    }
    let oracle = match cfg.objective {
        Objective::Esm => Some(
            target
                .as_mixture()
                .ok_or_else(|| Error::InvalidArgument("ESM needs a mixture target with a known score".into()))?
                .clone(),
        ),
        _ => None,
    };
    let mut floor = cfg.t_floor(model.horizon());
    if let crate::score::Parametrization::Tweedie { t_floor } = net.parametrization() {
        floor = floor.max(t_floor);
    }
    let n_params = net.mlp().n_params();
    let mut state = OptState::new(cfg.optimizer, cfg.momentum, n_params);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    for k in 0..cfg.iterations {
        let draws = draw_batch(cfg, model, target, floor, k)?;
        let parts = draws
            .par_chunks(TRAIN_CHUNK)
            .map(|c| loss_and_grad(&net, cfg.objective, oracle.as_ref(), model, c))
            .collect::<Result<Vec<_>>>()?;
        let mut loss = 0.0;
        let mut grad = vec![0.0; n_params];
        for (l, g) in parts {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let b = cfg.batch_size as f64;
        loss /= b;
        grad.iter_mut().for_each(|g| *g /= b);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { iteration: k, loss });
        }
        if let Some(c) = cfg.clip_norm {
            optim::clip(&mut grad, c);
        }
        state.step(net.params_mut(), &grad, cfg.step_size(k));
        if cfg.average_from.is_some_and(|a| k >= a) {
            state.accumulate(net.params());
        }
        trace.push(LossRecord { iteration: k, loss, wall_time: start.elapsed().as_secs_f64() });
    }
    if let Some(avg) = state.average() {
        net.params_mut().copy_from_slice(avg);
    }
    Ok(Trained { field: ScoreField::Learned(net), trace })
}

type Stat = Box<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// A one-dimensional exponential family `p_theta(x) ~ exp(theta . F(x))`
/// described by the gradient and Laplacian of its statistic.
pub struct ExpFamilySpec {
    k: usize,
    grad: Stat,
    laplacian: Stat,
}

impl std::fmt::Debug for ExpFamilySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExpFamilySpec").field("k", &self.k).finish_non_exhaustive()
    }
}

impl ExpFamilySpec {
    pub fn new(k: usize, grad: Stat, laplacian: Stat) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("statistic needs at least one component".into()));
        }
        Ok(Self { k, grad, laplacian })
    }

    /// `F(x) = (x, -x^2/2)`: natural parameters `(mu / s^2, 1 / s^2)`.
    pub fn gaussian() -> Self {
        Self {
            k: 2,
            grad: Box::new(|x, o| {
                o[0] = 1.0;
                o[1] = -x;
            }),
            laplacian: Box::new(|_, o| {
                o[0] = 0.0;
                o[1] = -1.0;
            }),
        }
    }

    /// `F(x) = x`.
    pub fn linear() -> Self {
        Self { k: 1, grad: Box::new(|_, o| o[0] = 1.0), laplacian: Box::new(|_, o| o[0] = 0.0) }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Empirical `E[grad F grad F^T]` and `E[lap F]`.
    pub fn moments(&self, samples: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        if samples.is_empty() {
            return Err(Error::EmptySample);
        }
        let k = self.k;
        let mut a = DMatrix::zeros(k, k);
        let mut b = DVector::zeros(k);
        let (mut g, mut l) = (vec![0.0; k], vec![0.0; k]);
        for &x in samples {
            (self.grad)(x, &mut g);
            (self.laplacian)(x, &mut l);
            for i in 0..k {
                b[i] += l[i];
                for j in 0..k {
                    a[(i, j)] += g[i] * g[j];
                }
            }
        }
        let n = samples.len() as f64;
        a /= n;
        b /= n;
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("statistic moments".into()));
        }
        Ok((a, b))
    }

    /// `E[(grad F grad F^T theta + lap F)(...)^T]` at `theta`.
    pub fn score_covariance(&self, theta: &[f64], samples: &[f64]) -> Result<DMatrix<f64>> {
        if theta.len() != self.k {
            return Err(Error::DimensionMismatch { expected: self.k, got: theta.len() });
        }
        if samples.is_empty() {
            return Err(Error::EmptySample);
        }
        let k = self.k;
        let mut s = DMatrix::zeros(k, k);
        let (mut g, mut l) = (vec![0.0; k], vec![0.0; k]);
        for &x in samples {
            (self.grad)(x, &mut g);
            (self.laplacian)(x, &mut l);
            let gt: f64 = g.iter().zip(theta).map(|(a, b)| a * b).sum();
            let psi: Vec<f64> = (0..k).map(|i| g[i] * gt + l[i]).collect();
            for i in 0..k {
                for j in 0..k {
                    s[(i, j)] += psi[i] * psi[j];
                }
            }
        }
        Ok(s / samples.len() as f64)
    }
}

/// `theta = -A^{-1} b`.
pub fn expfam_from_moments(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Vec<f64>> {
    let lu = a.clone().lu();
    let sol = lu.solve(b).ok_or_else(|| Error::SingularMatrix("E[grad F grad F^T]".into()))?;
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let det = a.determinant();
    if !(det.abs() > 1e-12 * scale.powi(a.nrows() as i32)) {
        return Err(Error::SingularMatrix(format!("E[grad F grad F^T] has determinant {det:e}")));
    }
    Ok((-sol).iter().copied().collect())
}

/// The score-matching estimator `-[E_n grad F grad F^T]^{-1} E_n lap F`.
pub fn expfam_fit(spec: &ExpFamilySpec, samples: &[f64]) -> Result<Vec<f64>> {
    let (a, b) = spec.moments(samples)?;
    expfam_from_moments(&a, &b)
}

/// Sandwich covariance `A^{-1} S A^{-1}` of `sqrt(n) (theta_n - theta)`,
/// estimated from `samples` at `theta`.
pub fn sandwich_covariance(spec: &ExpFamilySpec, theta: &[f64], samples: &[f64]) -> Result<DMatrix<f64>> {
    let (a, _) = spec.moments(samples)?;
    let inv = a.try_inverse().ok_or_else(|| Error::SingularMatrix("E[grad F grad F^T]".into()))?;
    let s = spec.score_covariance(theta, samples)?;
    Ok(&inv * s * &inv)
}
