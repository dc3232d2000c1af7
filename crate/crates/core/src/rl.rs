//! Reward fine-tuning of a pretrained score: Gaussian exploration over the
//! backward SDE, a pathwise KL penalty and likelihood-ratio policy gradients.
//!
//! Times here are backward times `t in [0, T]`; the pretrained score is read
//! at forward time `T - t`.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{Batch, SampleBatch};
use crate::error::{Error, Result};
use crate::net::{Mlp, Workspace};
use crate::optim::{self, OptState, Optimizer};
use crate::rng::{self, domain, StreamRng};
use crate::sampler::Grid;
use crate::score::{ScoreEval, ScoreField};
use crate::sde::DiffusionModel;
use crate::stats::Estimate;

const CHUNK: usize = 64;

/// Terminal reward `R(y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reward {
    /// `-(scale / 2) |y - center|^2`
    Quadratic { center: Vec<f64>, scale: f64 },
    Zero,
}

impl Reward {
    pub fn quadratic(center: Vec<f64>) -> Self {
        Reward::Quadratic { center, scale: 1.0 }
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            Reward::Quadratic { center, scale } => {
                -0.5 * scale * y.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
            Reward::Zero => 0.0,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if let Reward::Quadratic { center, scale } = self {
            if center.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: center.len() });
            }
            if !(scale.is_finite() && *scale > 0.0) || center.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidArgument(format!("quadratic reward needs finite center and scale > 0, got scale={scale}")));
            }
        }
        Ok(())
    }
}

/// Exploration level `sigma_t` as a function of backward time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Exploration {
    Constant { sigma: f64 },
    /// Geometric interpolation from `start` at `t = 0` to `end` at `t = T`.
    Geometric { start: f64, end: f64 },
}

impl Default for Exploration {
    fn default() -> Self {
        Exploration::Constant { sigma: 0.1 }
    }
}

impl Exploration {
    pub fn sigma(&self, t: f64, horizon: f64) -> f64 {
        match *self {
            Exploration::Constant { sigma } => sigma,
            Exploration::Geometric { start, end } => start * (end / start).powf((t / horizon).clamp(0.0, 1.0)),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |s: f64| s.is_finite() && s > 0.0;
        let fine = match *self {
            Exploration::Constant { sigma } => ok(sigma),
            Exploration::Geometric { start, end } => ok(start) && ok(end),
        };
        if fine {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("exploration levels must be positive and finite, got {self:?}")))
        }
    }
}

/// Trainable correction added to the pretrained score.
#[derive(Debug, Clone)]
pub enum Correction {
    /// `exp(-decay (T - t)) (offset + gain y)`; parameters are the `d`
    /// offsets followed by the scalar gain.
    Affine { decay: f64 },
    /// Network of `(y, t / T)` with `d` outputs.
    Net(Mlp),
}

/// Gaussian policy `a ~ N(mu_theta(t, y), sigma_t^2 I)` with
/// `mu_theta = mu_pre + correction_theta`, together with the reward and the
/// penalty weight of the regularized objective.
#[derive(Debug, Clone)]
pub struct Policy {
    pretrained: ScoreField,
    correction: Correction,
    params: Vec<f64>,
    exploration: Exploration,
    beta_pen: f64,
    reward: Reward,
    horizon: f64,
}

impl Policy {
    /// Policy starting at the pretrained score (zero correction).
    pub fn new(
        model: &DiffusionModel,
        pretrained: ScoreField,
        correction: Correction,
        exploration: Exploration,
        beta_pen: f64,
        reward: Reward,
    ) -> Result<Self> {
        let d = model.dim();
        if pretrained.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: pretrained.dim() });
        }
        if !(beta_pen.is_finite() && beta_pen > 0.0) {
            return Err(Error::InvalidArgument(format!("penalty weight must be positive, got {beta_pen}")));
        }
        exploration.validate()?;
        reward.validate(d)?;
        let n = match &correction {
            Correction::Affine { decay } => {
                if !decay.is_finite() {
                    return Err(Error::InvalidArgument(format!("non-finite correction decay {decay}")));
                }
                d + 1
            }
            Correction::Net(mlp) => {
                if mlp.input_dim() != d + 1 || mlp.output_dim() != d {
                    return Err(Error::InvalidArgument(format!(
                        "correction net must map {} inputs to {d} outputs, has sizes {:?}",
                        d + 1,
                        mlp.sizes()
                    )));
                }
                mlp.n_params()
            }
        };
        Ok(Self {
            pretrained,
            correction,
            params: vec![0.0; n],
            exploration,
            beta_pen,
            reward,
            horizon: model.horizon(),
        })
    }

    /// Random network weights with the output layer zeroed, so the policy
    /// still starts at the pretrained score.
    pub fn init_net(&mut self, seed: u64) {
        if let Correction::Net(mlp) = &self.correction {
            let mut p = mlp.init(seed);
            let sizes = mlp.sizes();
            let (i, o) = (sizes[sizes.len() - 2], sizes[sizes.len() - 1]);
            let n = p.len();
            p[n - (i * o + o)..].iter_mut().for_each(|v| *v = 0.0);
            self.params = p;
        }
    }

    pub fn dim(&self) -> usize {
        self.pretrained.dim()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        self.params = params;
        Ok(())
    }

    pub fn beta_pen(&self) -> f64 {
        self.beta_pen
    }

    pub fn set_beta_pen(&mut self, beta: f64) -> Result<()> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidArgument(format!("penalty weight must be positive, got {beta}")));
        }
        self.beta_pen = beta;
        Ok(())
    }

    pub fn reward(&self) -> &Reward {
        &self.reward
    }

    pub fn exploration(&self) -> Exploration {
        self.exploration
    }

    pub fn pretrained(&self) -> &ScoreField {
        &self.pretrained
    }

    fn evaluator(&self, t: f64) -> Result<PolicyEval<'_>> {
        let score = self.pretrained.at(self.horizon - t)?;
        Ok(PolicyEval { policy: self, score, t, ws: self.workspace(), input: vec![0.0; self.dim() + 1] })
    }

    fn workspace(&self) -> Option<Workspace> {
        match &self.correction {
            Correction::Net(mlp) => Some(mlp.workspace()),
            Correction::Affine { .. } => None,
        }
    }

    /// `mu_theta(t, y)` at backward time `t`.
    pub fn mean(&self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: y.len() });
        }
        let mut ev = self.evaluator(t)?;
        let (mut pre, mut mu) = (vec![0.0; y.len()], vec![0.0; y.len()]);
        ev.mean(y, &mut pre, &mut mu);
        Ok(mu)
    }

    /// Accumulates `d(upstream . mu_theta(t, y)) / d theta` into `grad`.
    fn accumulate_grad(&self, ws: &mut Option<Workspace>, input: &mut [f64], t: f64, y: &[f64], upstream: &[f64], grad: &mut [f64]) {
        match &self.correction {
            Correction::Affine { decay } => {
                let e = (-decay * (self.horizon - t)).exp();
                let d = y.len();
                for j in 0..d {
                    grad[j] += e * upstream[j];
                }
                grad[d] += e * upstream.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
            }
            Correction::Net(mlp) => {
                let ws = ws.as_mut().expect("net policies carry a workspace");
                input[..y.len()].copy_from_slice(y);
                input[y.len()] = t / self.horizon;
                mlp.forward(&self.params, input, ws);
                mlp.backward(&self.params, ws, upstream, grad, None);
            }
        }
    }
}

struct PolicyEval<'a> {
    policy: &'a Policy,
    score: ScoreEval<'a>,
    t: f64,
    ws: Option<Workspace>,
    input: Vec<f64>,
}

impl PolicyEval<'_> {
    fn mean(&mut self, y: &[f64], pre: &mut [f64], mu: &mut [f64]) {
        self.score.eval(y, pre);
        let p = self.policy;
        match &p.correction {
            Correction::Affine { decay } => {
                let e = (-decay * (p.horizon - self.t)).exp();
                let (off, gain) = p.params.split_at(y.len());
                for j in 0..y.len() {
                    mu[j] = pre[j] + e * (off[j] + gain[0] * y[j]);
                }
            }
            Correction::Net(mlp) => {
                self.input[..y.len()].copy_from_slice(y);
                self.input[y.len()] = self.t / p.horizon;
                let out = mlp.forward(&p.params, &self.input, self.ws.as_mut().expect("net policies carry a workspace"));
                for j in 0..y.len() {
                    mu[j] = pre[j] + out[j];
                }
            }
        }
    }
}

/// One trajectory viewed step by step.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub t: f64,
    pub y: Vec<f64>,
    pub action: Vec<f64>,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
    pub terminal_state: Vec<f64>,
    pub terminal_reward: f64,
    /// `sum_k -(beta / 2) g^2(T - t_k) |a_k - mu_pre(t_k, y_k)|^2 dt_k`
    pub running_penalty: f64,
}

/// A batch of rollouts stored step-major: entry `k` of each vector holds
/// all `n` trajectories at grid step `k`.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub times: Vec<f64>,
    pub dim: usize,
    pub n: usize,
    /// `N + 1` blocks of `n * dim` states.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    pub logprob: Vec<Vec<f64>>,
    /// Running reward of each step (non-positive).
    pub penalty: Vec<Vec<f64>>,
    pub terminal: Vec<f64>,
}

impl RolloutBatch {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Total return of each trajectory.
    pub fn returns(&self) -> Vec<f64> {
        let mut r = self.terminal.clone();
        for pen in &self.penalty {
            r.iter_mut().zip(pen).for_each(|(a, p)| *a += p);
        }
        r
    }

    /// `[k][i]`: terminal reward plus the running rewards from step `k` on.
    pub fn reward_to_go(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.steps()];
        let mut acc = self.terminal.clone();
        for k in (0..self.steps()).rev() {
            acc.iter_mut().zip(&self.penalty[k]).for_each(|(a, p)| *a += p);
            out[k] = acc.clone();
        }
        out
    }

    pub fn terminal_batch(&self) -> Result<Batch> {
        Batch::from_flat(self.dim, self.states[self.steps()].clone())
    }

    pub fn trajectory(&self, i: usize) -> Rollout {
        let d = self.dim;
        let row = |block: &Vec<f64>| block[i * d..(i + 1) * d].to_vec();
        let steps = (0..self.steps())
            .map(|k| RolloutStep {
                t: self.times[k],
                y: row(&self.states[k]),
                action: row(&self.actions[k]),
                logprob: self.logprob[k][i],
            })
            .collect();
        Rollout {
            steps,
            terminal_state: row(&self.states[self.steps()]),
            terminal_reward: self.terminal[i],
            running_penalty: self.penalty.iter().map(|p| p[i]).sum(),
        }
    }
}

fn gaussian_logprob(a: &[f64], mu: &[f64], sigma: f64) -> f64 {
    let d = a.len() as f64;
    let sq: f64 = a.iter().zip(mu).map(|(x, m)| (x - m) * (x - m)).sum();
    -0.5 * sq / (sigma * sigma) - d * (sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
}

fn check_grid(model: &DiffusionModel, grid: &Grid) -> Result<()> {
    if (grid.horizon() - model.horizon()).abs() > 1e-12 {
        return Err(Error::InvalidGrid(format!("grid horizon {} differs from model horizon {}", grid.horizon(), model.horizon())));
    }
    Ok(())
}

/// Per-step constants of the Euler-Maruyama update.
struct Step {
    t0: f64,
    h: f64,
    a1: f64,
    c1: f64,
    g2: f64,
    noise_sd: f64,
    sigma: f64,
}

fn step_plan(model: &DiffusionModel, policy: &Policy, grid: &Grid, k: usize) -> Step {
    let big_t = model.horizon();
    let (t0, t1) = (grid.times()[k], grid.times()[k + 1]);
    let h = t1 - t0;
    let (tau0, tau1) = (big_t - t0, (big_t - t1).max(0.0));
    let g2 = model.diffusion_sq(tau0);
    Step {
        t0,
        h,
        a1: model.drift_slope(tau1),
        c1: model.drift_offset(tau1),
        g2,
        noise_sd: (g2 * h).max(0.0).sqrt(),
        sigma: policy.exploration.sigma(t0, big_t),
    }
}

/// Simulates `n` trajectories of the controlled backward SDE with sampled
/// actions `a_k ~ N(mu_theta(t_k, y_k), sigma_{t_k}^2 I)` in place of the
/// score. Brownian increments use the sampler's per-row streams and action
/// noise its own, so the state noise matches the pretrained sampler at the
/// same seed.
pub fn rollout(policy: &Policy, model: &DiffusionModel, n: usize, grid: &Grid, seed: u64) -> Result<RolloutBatch> {
    check_grid(model, grid)?;
    if policy.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: policy.dim() });
    }
    let d = model.dim();
    let steps = grid.steps();
    let mut state = model.prior_sample(n, seed)?.into_flat();
    let mut noise: Vec<StreamRng> = (0..n as u64).map(|i| rng::stream(seed, domain::SAMPLER, i)).collect();
    let mut act: Vec<StreamRng> = (0..n as u64).map(|i| rng::stream(seed, domain::ROLLOUT, i)).collect();
    let mut out = RolloutBatch {
        times: grid.times().to_vec(),
        dim: d,
        n,
        states: Vec::with_capacity(steps + 1),
        actions: Vec::with_capacity(steps),
        means: Vec::with_capacity(steps),
        sigmas: Vec::with_capacity(steps),
        logprob: Vec::with_capacity(steps),
        penalty: Vec::with_capacity(steps),
        terminal: Vec::new(),
    };
    let half_beta = 0.5 * policy.beta_pen;
    for k in 0..steps {
        let st = step_plan(model, policy, grid, k);
        out.states.push(state.clone());
        let mut actions = vec![0.0; n * d];
        let mut means = vec![0.0; n * d];
        let mut logprob = vec![0.0; n];
        let mut penalty = vec![0.0; n];
        state
            .par_chunks_mut(CHUNK * d)
            .zip(noise.par_chunks_mut(CHUNK))
            .zip(act.par_chunks_mut(CHUNK))
            .zip(actions.par_chunks_mut(CHUNK * d))
            .zip(means.par_chunks_mut(CHUNK * d))
            .zip(logprob.par_chunks_mut(CHUNK))
            .zip(penalty.par_chunks_mut(CHUNK))
            .try_for_each(|((((((ys, nr), ar), acts), mus), lps), pens)| -> Result<()> {
                let mut ev = policy.evaluator(st.t0)?;
                let mut pre = vec![0.0; d];
                for (i, y) in ys.chunks_exact_mut(d).enumerate() {
                    let (a, mu) = (&mut acts[i * d..(i + 1) * d], &mut mus[i * d..(i + 1) * d]);
                    ev.mean(y, &mut pre, mu);
                    let mut dev = 0.0;
                    for j in 0..d {
                        let z: f64 = StandardNormal.sample(&mut ar[i]);
                        a[j] = mu[j] + st.sigma * z;
                        dev += (a[j] - pre[j]) * (a[j] - pre[j]);
                    }
                    lps[i] = gaussian_logprob(a, mu, st.sigma);
                    pens[i] = -half_beta * st.g2 * dev * st.h;
                    for j in 0..d {
                        let z: f64 = StandardNormal.sample(&mut nr[i]);
                        y[j] += (-(st.a1 * y[j] + st.c1) + st.g2 * a[j]) * st.h + st.noise_sd * z;
                    }
                    if y.iter().chain(a.iter()).any(|v| !v.is_finite()) {
                        return Err(Error::SamplerDiverged { step: k + 1 });
                    }
                }
                Ok(())
            })?;
        out.actions.push(actions);
        out.means.push(means);
        out.sigmas.push(st.sigma);
        out.logprob.push(logprob);
        out.penalty.push(penalty);
    }
    out.terminal = state.chunks_exact(d).map(|y| policy.reward.eval(y)).collect();
    out.states.push(state);
    Ok(out)
}

/// Terminal samples of the mean dynamics `dY = [-f + g^2 mu_theta] dt + g dB`
/// (no exploration), with the same noise streams as [`rollout`].
pub fn sample(policy: &Policy, model: &DiffusionModel, n: usize, grid: &Grid, seed: u64) -> Result<SampleBatch> {
    check_grid(model, grid)?;
    if policy.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: policy.dim() });
    }
    let d = model.dim();
    let mut state = model.prior_sample(n, seed)?.into_flat();
    let mut noise: Vec<StreamRng> = (0..n as u64).map(|i| rng::stream(seed, domain::SAMPLER, i)).collect();
    for k in 0..grid.steps() {
        let st = step_plan(model, policy, grid, k);
        state.par_chunks_mut(CHUNK * d).zip(noise.par_chunks_mut(CHUNK)).try_for_each(|(ys, nr)| -> Result<()> {
            let mut ev = policy.evaluator(st.t0)?;
            let (mut pre, mut mu) = (vec![0.0; d], vec![0.0; d]);
            for (i, y) in ys.chunks_exact_mut(d).enumerate() {
                ev.mean(y, &mut pre, &mut mu);
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut nr[i]);
                    y[j] += (-(st.a1 * y[j] + st.c1) + st.g2 * mu[j]) * st.h + st.noise_sd * z;
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SamplerDiverged { step: k + 1 });
                }
            }
            Ok(())
        })?;
    }
    let hash = model.hash().to_string();
    Ok(SampleBatch::new(Batch::from_flat(d, state)?, model.horizon() - grid.end(), hash, seed, "rl_policy"))
}

/// Monte-Carlo estimate of `E[R(Y_T)] + E[sum of running rewards]`.
pub fn objective_estimate(batch: &RolloutBatch) -> Result<Estimate> {
    if batch.n == 0 {
        return Err(Error::EmptySample);
    }
    Ok(Estimate::from_samples(&batch.returns()))
}

/// Reward-to-go minus the leave-one-out batch mean at the same step.
pub fn advantages(batch: &RolloutBatch) -> Vec<Vec<f64>> {
    let n = batch.n as f64;
    batch
        .reward_to_go()
        .into_iter()
        .map(|g| {
            if batch.n < 2 {
                return vec![0.0; g.len()];
            }
            let total: f64 = g.iter().sum();
            g.iter().map(|x| x - (total - x) / (n - 1.0)).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub mean: Vec<f64>,
    /// Standard error of each coordinate across trajectories.
    pub std_err: Vec<f64>,
}

impl PolicyGradient {
    pub fn norm(&self) -> f64 {
        self.mean.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// `mean_i sum_k grad log pi(a_k | t_k, y_k) A_k^i` for given advantages
/// `adv[k][i]`.
pub fn score_function_gradient(policy: &Policy, batch: &RolloutBatch, adv: &[Vec<f64>]) -> Result<PolicyGradient> {
    let (n, d, p) = (batch.n, batch.dim, policy.params.len());
    if adv.len() != batch.steps() || adv.iter().any(|a| a.len() != n) {
        return Err(Error::InvalidArgument("advantages must have one entry per step and trajectory".into()));
    }
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let per: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .with_min_len(CHUNK)
        .map_init(
            || (policy.workspace(), vec![0.0; d + 1], vec![0.0; d]),
            |(ws, input, up), i| {
                let mut g = vec![0.0; p];
                for k in 0..batch.steps() {
                    let a_ik = adv[k][i];
                    if a_ik == 0.0 {
                        continue;
                    }
                    let s2 = batch.sigmas[k] * batch.sigmas[k];
                    let row = i * d..(i + 1) * d;
                    for ((u, a), m) in up.iter_mut().zip(&batch.actions[k][row.clone()]).zip(&batch.means[k][row.clone()]) {
                        *u = a_ik * (a - m) / s2;
                    }
                    policy.accumulate_grad(ws, input, batch.times[k], &batch.states[k][row], up, &mut g);
                }
                g
            },
        )
        .collect();
    let mut mean = vec![0.0; p];
    let mut std_err = vec![0.0; p];
    for j in 0..p {
        let col: Vec<f64> = per.iter().map(|g| g[j]).collect();
        let e = Estimate::from_samples(&col);
        mean[j] = e.value;
        std_err[j] = e.std_err;
    }
    if mean.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("policy gradient".into()));
    }
    Ok(PolicyGradient { mean, std_err })
}

/// Reward-to-go policy gradient of a fresh rollout batch.
pub fn policy_gradient(policy: &Policy, model: &DiffusionModel, grid: &Grid, n: usize, seed: u64) -> Result<(PolicyGradient, Estimate)> {
    let batch = rollout(policy, model, n, grid, seed)?;
    let adv = advantages(&batch);
    Ok((score_function_gradient(policy, &batch, &adv)?, objective_estimate(&batch)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub objective: Estimate,
    pub grad_norm: f64,
}

/// One plain ascent step `theta += step * gradient`.
pub fn policy_gradient_step(
    policy: &mut Policy,
    model: &DiffusionModel,
    grid: &Grid,
    n: usize,
    step: f64,
    seed: u64,
) -> Result<StepDiagnostics> {
    let (g, objective) = policy_gradient(policy, model, grid, n, seed)?;
    policy.params.iter_mut().zip(&g.mean).for_each(|(p, gi)| *p += step * gi);
    Ok(StepDiagnostics { objective, grad_norm: g.norm() })
}

/// Gaussian law `N(mean, var I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    pub mean: Vec<f64>,
    pub var: f64,
}

/// Maximizer of `E R - beta KL(. || N(0, I))` over terminal laws for the
/// quadratic reward `-(scale / 2)|y - y*|^2`: the tilted Gaussian
/// `N(scale y* / (beta + scale), beta / (beta + scale) I)`.
pub fn closed_form_optimum(reward: &Reward, beta_pen: f64) -> Result<GaussianLaw> {
    if !(beta_pen > 0.0) {
        return Err(Error::InvalidArgument(format!("penalty weight must be positive, got {beta_pen}")));
    }
    let Reward::Quadratic { center, scale } = reward else {
        return Err(Error::InvalidArgument("closed-form optimum needs a quadratic reward".into()));
    };
    reward.validate(center.len())?;
    let k = scale / (beta_pen + scale);
    Ok(GaussianLaw { mean: center.iter().map(|c| k * c).collect(), var: beta_pen / (beta_pen + scale) })
}

/// Fine-tuning loop settings. `t_floor` defaults to `1e-3 T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub t_floor: Option<f64>,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_after: usize,
    pub clip_norm: Option<f64>,
    pub average_from: Option<usize>,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            t_floor: None,
            batch_size: 500,
            iterations: 500,
            optimizer: Optimizer::Sgd,
            learning_rate: 0.05,
            momentum: 0.0,
            decay_after: 100,
            clip_norm: None,
            average_from: None,
            eval_every: 50,
            eval_batch: 2000,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn grid(&self, model: &DiffusionModel) -> Result<Grid> {
        let t = model.horizon();
        Grid::uniform(t, self.t_floor.unwrap_or(1e-3 * t), self.steps)
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.eval_batch == 0 || self.iterations == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument(
                "fine-tuning needs batch_size >= 2 and positive iterations, eval_every and eval_batch".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Objective of the evaluated parameters at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub objective: Estimate,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub checkpoints: Vec<Checkpoint>,
}

impl FinetuneReport {
    /// CSV with columns `iteration,objective,std_err,grad_norm`; the gradient
    /// norm is empty before the first step.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iteration", "objective", "std_err", "grad_norm"])?;
        for c in &self.checkpoints {
            wr.write_record([
                c.iteration.to_string(),
                c.objective.value.to_string(),
                c.objective.std_err.to_string(),
                if c.grad_norm.is_nan() { String::new() } else { c.grad_norm.to_string() },
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Runs `iterations` policy-gradient ascent steps on fresh rollout batches.
/// Checkpoints (including iteration 0) evaluate the objective on an
/// independent batch; with `average_from` set they evaluate, and the policy
/// ends at, the running mean of the iterates.
pub fn finetune(cfg: &FinetuneConfig, policy: &mut Policy, model: &DiffusionModel) -> Result<FinetuneReport> {
    cfg.validate()?;
    let grid = cfg.grid(model)?;
    let mut opt = OptState::new(cfg.optimizer, cfg.momentum, policy.params.len());
    let mut checkpoints = Vec::new();
    let eval = |p: &Policy, iteration: usize, grad_norm: f64| -> Result<Checkpoint> {
        let seed = rng::child_seed(cfg.seed, domain::ROLLOUT, 2 * iteration as u64 + 1);
        let batch = rollout(p, model, cfg.eval_batch, &grid, seed)?;
        Ok(Checkpoint { iteration, objective: objective_estimate(&batch)?, grad_norm })
    };
    checkpoints.push(eval(policy, 0, f64::NAN)?);
    let mut live = policy.params.clone();
    for it in 1..=cfg.iterations {
        let mut current = policy.clone();
        current.params.clone_from(&live);
        let seed = rng::child_seed(cfg.seed, domain::ROLLOUT, 2 * it as u64);
        let (g, _) = policy_gradient(&current, model, &grid, cfg.batch_size, seed)?;
        let grad_norm = g.norm();
        let mut dir: Vec<f64> = g.mean.iter().map(|v| -v).collect();
        if let Some(c) = cfg.clip_norm {
            optim::clip(&mut dir, c);
        }
        opt.step(&mut live, &dir, optim::step_size(cfg.learning_rate, cfg.decay_after, it));
        if live.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged { iteration: it, loss: grad_norm });
        }
        if cfg.average_from.is_some_and(|a| it >= a) {
            opt.accumulate(&live);
        }
        policy.params = opt.average().map_or_else(|| live.clone(), <[f64]>::to_vec);
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            checkpoints.push(eval(policy, it, grad_norm)?);
        }
    }
    Ok(FinetuneReport { checkpoints })
}
