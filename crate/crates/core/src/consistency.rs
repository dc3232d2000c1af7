//! Consistency models over the probability-flow ODE: pair construction,
//! discrete and continuous-time objectives, one-step sampling and the
//! CD/CT coupling distance.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{Batch, SampleBatch};
use crate::error::{ensure_finite, Error, Result};
use crate::matching::{LossRecord, Weight};
use crate::metrics;
use crate::net::{Mlp, Workspace};
use crate::optim::{self, OptState, Optimizer};
use crate::rng::{self, domain, StreamRng};
use crate::score::ScoreField;
use crate::sde::DiffusionModel;
use crate::stats::Estimate;
use crate::target::Target;

const CHUNK: usize = 256;
const TRAIN_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Distillation: the second point is one ODE step from the first.
    #[default]
    Cd,
    /// Training: the second point is perturbed independently.
    Ct,
}

/// A batch of consistency pairs at forward times `t` and `t - delta`.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub mode: PairMode,
    pub delta: f64,
    pub t: Vec<f64>,
    pub x0: Batch,
    pub plus: Batch,
    pub minus: Batch,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Rows `(y_plus, y_minus)` concatenated, for moment fits.
    pub fn joint(&self) -> Batch {
        let d = self.plus.dim();
        let mut data = Vec::with_capacity(2 * d * self.len());
        for (p, m) in self.plus.rows().zip(self.minus.rows()) {
            data.extend_from_slice(p);
            data.extend_from_slice(m);
        }
        Batch::from_flat(2 * d, data).expect("nonempty pair rows")
    }
}

fn check_times(t: f64, delta: f64, horizon: f64) -> Result<()> {
    if !(delta > 0.0 && delta < t) {
        return Err(Error::InvalidArgument(format!("need 0 < delta < t, got delta = {delta}, t = {t}")));
    }
    if t > horizon {
        return Err(Error::TimeOutOfRange { t, horizon });
    }
    Ok(())
}

fn normal_vec(rng: &mut StreamRng, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
}

/// One Euler step of the probability-flow ODE from forward time `t` down to
/// `t - delta`: `y + (-f(t, y) + g^2(t) s(t, y) / 2) delta`.
pub fn cd_step(model: &DiffusionModel, field: &ScoreField, t: f64, delta: f64, y: &[f64]) -> Result<Vec<f64>> {
    let s = field.forward(t, y)?;
    let mut f = vec![0.0; y.len()];
    model.drift(t, y, &mut f);
    let g2 = model.diffusion_sq(t);
    Ok(y.iter().zip(&f).zip(&s).map(|((y, f), s)| y + (-f + 0.5 * g2 * s) * delta).collect())
}

/// Pairs at the given times from data `x0`. Row `i` draws from its own
/// stream, so CD and CT batches built with one seed share `y_plus`.
pub fn build_pairs(
    mode: PairMode,
    model: &DiffusionModel,
    field: Option<&ScoreField>,
    x0: &Batch,
    t: &[f64],
    delta: f64,
    seed: u64,
) -> Result<PairBatch> {
    if x0.is_empty() {
        return Err(Error::EmptySample);
    }
    if x0.len() != t.len() {
        return Err(Error::DimensionMismatch { expected: x0.len(), got: t.len() });
    }
    if x0.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: x0.dim() });
    }
    for &ti in t {
        check_times(ti, delta, model.horizon())?;
    }
    let field = match (mode, field) {
        (PairMode::Cd, None) => return Err(Error::InvalidArgument("CD pairs need a score field".into())),
        (PairMode::Cd, Some(f)) => Some(f),
        (PairMode::Ct, _) => None,
    };
    let d = x0.dim();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..x0.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, domain::PAIRS, i as u64);
            let mut e = vec![0.0; d];
            normal_vec(&mut rng, &mut e);
            let cm = model.conditional_marginal(t[i])?;
            let x = x0.row(i);
            let plus: Vec<f64> = x.iter().zip(&e).map(|(x, e)| cm.mean_factor * x + cm.mean_offset + cm.std * e).collect();
            let minus = match field {
                Some(f) => cd_step(model, f, t[i], delta, &plus)?,
                None => {
                    normal_vec(&mut rng, &mut e);
                    let cm = model.conditional_marginal(t[i] - delta)?;
                    x.iter().zip(&e).map(|(x, e)| cm.mean_factor * x + cm.mean_offset + cm.std * e).collect()
                }
            };
            Ok((plus, minus))
        })
        .collect::<Result<_>>()?;
    let (plus, minus): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let plus = Batch::from_flat(d, plus.concat())?;
    let minus = Batch::from_flat(d, minus.concat())?;
    if !plus.all_finite() || !minus.all_finite() {
        return Err(Error::NonFinite("consistency pair".into()));
    }
    Ok(PairBatch { mode, delta, t: t.to_vec(), x0: x0.clone(), plus, minus })
}

/// CD pairs at a common time `t`.
pub fn build_cd_pairs(
    model: &DiffusionModel,
    field: &ScoreField,
    x0: &Batch,
    t: f64,
    delta: f64,
    seed: u64,
) -> Result<PairBatch> {
    build_pairs(PairMode::Cd, model, Some(field), x0, &vec![t; x0.len()], delta, seed)
}

/// CT pairs at a common time `t`.
pub fn build_ct_pairs(model: &DiffusionModel, x0: &Batch, t: f64, delta: f64, seed: u64) -> Result<PairBatch> {
    build_pairs(PairMode::Ct, model, None, x0, &vec![t; x0.len()], delta, seed)
}

/// Squared W2 between the CD and CT pair laws of a point-mass target under
/// VE with `sigma_t = t`: `2d (t^2 + (t - delta)^2 - sqrt(t^4 + (t - delta)^4))`.
pub fn coupling_w2_theory(t: f64, delta: f64, d: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < t) {
        return Err(Error::InvalidArgument(format!("need 0 < delta < t, got delta = {delta}, t = {t}")));
    }
    let s = t - delta;
    Ok(2.0 * d as f64 * (t * t + s * s - (t.powi(4) + s.powi(4)).sqrt()))
}

/// Pair covariances `(CD, CT)` of a point-mass target, row-major `2d x 2d`.
pub fn pair_covariances(t: f64, delta: f64, d: usize) -> (Vec<f64>, Vec<f64>) {
    let s = t - delta;
    let n = 2 * d;
    let mut cd = vec![0.0; n * n];
    let mut ct = vec![0.0; n * n];
    for i in 0..d {
        cd[i * n + i] = t * t;
        cd[(i + d) * n + i + d] = s * s;
        cd[i * n + i + d] = t * s;
        cd[(i + d) * n + i] = t * s;
        ct[i * n + i] = t * t;
        ct[(i + d) * n + i + d] = s * s;
    }
    (cd, ct)
}

/// The same squared distance from the general Gaussian W2 formula applied
/// to [`pair_covariances`].
pub fn coupling_w2_gaussian(t: f64, delta: f64, d: usize) -> Result<f64> {
    let (cd, ct) = pair_covariances(t, delta, d);
    let zero = vec![0.0; 2 * d];
    Ok(metrics::w2_gaussian_full(&zero, &cd, &zero, &ct)?.powi(2))
}

/// Squared W2 between Gaussians fitted to the joint laws of two pair
/// batches.
pub fn coupling_w2_empirical(cd: &PairBatch, ct: &PairBatch) -> Result<f64> {
    let (a, b) = (cd.joint(), ct.joint());
    Ok(metrics::w2_gaussian_full(&a.mean(), &a.covariance(), &b.mean(), &b.covariance())?.powi(2))
}

/// Skip parametrization `F(t, y) = c_skip(t) y + c_out(t) net(y, t / T)` with
/// `c_skip(t_floor) = 1` and `c_out(t_floor) = 0`.
#[derive(Debug, Clone)]
pub struct FlowNet {
    mlp: Mlp,
    params: Vec<f64>,
    dim: usize,
    horizon: f64,
    t_floor: f64,
    sigma_data: f64,
}

#[derive(Debug, Clone, Copy)]
struct Skip {
    c_skip: f64,
    c_out: f64,
    dc_skip: f64,
    dc_out: f64,
}

impl FlowNet {
    pub fn new(dim: usize, hidden: &[usize], horizon: f64, t_floor: f64, sigma_data: f64, seed: u64) -> Result<Self> {
        let mlp = Mlp::new(dim + 1, hidden, dim)?;
        let params = mlp.init(seed);
        Self::from_parts(mlp, params, horizon, t_floor, sigma_data)
    }

    pub fn from_parts(mlp: Mlp, params: Vec<f64>, horizon: f64, t_floor: f64, sigma_data: f64) -> Result<Self> {
        let dim = mlp.output_dim();
        if mlp.input_dim() != dim + 1 {
            return Err(Error::InvalidArgument(format!("flow net input must be {} wide, got {}", dim + 1, mlp.input_dim())));
        }
        if params.len() != mlp.n_params() {
            return Err(Error::DimensionMismatch { expected: mlp.n_params(), got: params.len() });
        }
        ensure_finite(&params, "flow parameters")?;
        if !(horizon > 0.0 && t_floor >= 0.0 && t_floor < horizon && sigma_data > 0.0) {
            return Err(Error::InvalidArgument("need 0 <= t_floor < T and sigma_data > 0".into()));
        }
        Ok(Self { mlp, params, dim, horizon, t_floor, sigma_data })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn t_floor(&self) -> f64 {
        self.t_floor
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    fn skip(&self, t: f64) -> Skip {
        let sd2 = self.sigma_data * self.sigma_data;
        let u = t - self.t_floor;
        let den = u * u + sd2;
        let r = (sd2 + t * t).sqrt();
        Skip {
            c_skip: sd2 / den,
            dc_skip: -2.0 * u * sd2 / (den * den),
            c_out: self.sigma_data * u / r,
            dc_out: self.sigma_data / r - self.sigma_data * u * t / (r * r * r),
        }
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let sizes: Vec<String> = self.mlp.sizes().iter().map(|s| s.to_string()).collect();
        writeln!(w, "scorelab-flow 1")?;
        writeln!(w, "sizes {}", sizes.join(" "))?;
        writeln!(w, "horizon {:e}", self.horizon)?;
        writeln!(w, "t_floor {:e}", self.t_floor)?;
        writeln!(w, "sigma_data {:e}", self.sigma_data)?;
        writeln!(w, "count {}", self.params.len())?;
        writeln!(w, "end")?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::ParamFormat(m.to_string());
        let mut line = String::new();
        let mut field = |name: &str, r: &mut R| -> Result<String> {
            line.clear();
            r.read_line(&mut line)?;
            let rest = line.trim_end().strip_prefix(name).ok_or_else(|| bad(&format!("expected `{name}`")))?;
            Ok(rest.trim().to_string())
        };
        if field("scorelab-flow", &mut r)? != "1" {
            return Err(bad("unsupported flow file version"));
        }
        let sizes: Vec<usize> = field("sizes", &mut r)?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("sizes")))
            .collect::<Result<_>>()?;
        let num = |s: String| s.parse::<f64>().map_err(|_| bad("number"));
        let horizon = num(field("horizon", &mut r)?)?;
        let t_floor = num(field("t_floor", &mut r)?)?;
        let sigma_data = num(field("sigma_data", &mut r)?)?;
        let count: usize = field("count", &mut r)?.parse().map_err(|_| bad("count"))?;
        field("end", &mut r)?;
        if sizes.len() < 2 {
            return Err(bad("sizes"));
        }
        let mlp = Mlp::new(sizes[0], &sizes[1..sizes.len() - 1], sizes[sizes.len() - 1])?;
        if count != mlp.n_params() {
            return Err(bad(&format!("count {count} does not match the architecture ({})", mlp.n_params())));
        }
        let mut bytes = vec![0u8; 8 * count];
        r.read_exact(&mut bytes).map_err(|_| bad("truncated parameters"))?;
        let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_parts(mlp, params, horizon, t_floor, sigma_data)
    }
}

/// A map `F(t, y)` from forward time `t` to the data end of the ODE flow.
#[derive(Debug, Clone)]
pub enum Flow {
    Net(FlowNet),
    /// Exact flow of a Gaussian target `N(mean, var I)` under VE with
    /// `sigma_t = t`: `mean + (y - mean) sqrt((var + t_floor^2) / (var + t^2))`.
    Gaussian { mean: Vec<f64>, var: f64, t_floor: f64 },
    Identity { dim: usize },
    Constant(Vec<f64>),
}

/// Scratch buffers for evaluating a [`Flow`].
#[derive(Debug, Clone)]
pub struct FlowWork {
    ws: Option<Workspace>,
    input: Vec<f64>,
    tangent: Vec<f64>,
}

impl Flow {
    pub fn dim(&self) -> usize {
        match self {
            Flow::Net(n) => n.dim(),
            Flow::Gaussian { mean, .. } => mean.len(),
            Flow::Identity { dim } => *dim,
            Flow::Constant(c) => c.len(),
        }
    }

    pub fn work(&self) -> FlowWork {
        match self {
            Flow::Net(n) => FlowWork {
                ws: Some(n.mlp.workspace()),
                input: vec![0.0; n.dim + 1],
                tangent: vec![0.0; n.dim + 1],
            },
            _ => FlowWork { ws: None, input: Vec::new(), tangent: Vec::new() },
        }
    }

    /// Writes `F(t, y)` into `out`.
    pub fn eval(&self, t: f64, y: &[f64], w: &mut FlowWork, out: &mut [f64]) {
        match self {
            Flow::Net(n) => {
                let sk = n.skip(t);
                w.input[..n.dim].copy_from_slice(y);
                w.input[n.dim] = t / n.horizon;
                let o = n.mlp.forward(&n.params, &w.input, w.ws.as_mut().expect("net work"));
                for ((r, yi), oi) in out.iter_mut().zip(y).zip(o) {
                    *r = sk.c_skip * yi + sk.c_out * oi;
                }
            }
            Flow::Gaussian { mean, var, t_floor } => {
                let k = ((var + t_floor * t_floor) / (var + t * t)).sqrt();
                for ((r, yi), m) in out.iter_mut().zip(y).zip(mean) {
                    *r = m + (yi - m) * k;
                }
            }
            Flow::Identity { .. } => out.copy_from_slice(y),
            Flow::Constant(c) => out.copy_from_slice(c),
        }
    }

    /// `F(t, y)` and the directional derivative `d_t F + (grad_y F) v`.
    pub fn directional(&self, t: f64, y: &[f64], v: &[f64], w: &mut FlowWork, out: &mut [f64], dir: &mut [f64]) {
        match self {
            Flow::Net(n) => {
                let sk = n.skip(t);
                let d = n.dim;
                w.input[..d].copy_from_slice(y);
                w.input[d] = t / n.horizon;
                w.tangent[..d].copy_from_slice(v);
                w.tangent[d] = 1.0 / n.horizon;
                let (o, ot) = n.mlp.jvp(&n.params, &w.input, &w.tangent, w.ws.as_mut().expect("net work"));
                for i in 0..d {
                    out[i] = sk.c_skip * y[i] + sk.c_out * o[i];
                    dir[i] = sk.dc_skip * y[i] + sk.c_skip * v[i] + sk.dc_out * o[i] + sk.c_out * ot[i];
                }
            }
            Flow::Gaussian { mean, var, t_floor } => {
                let k = ((var + t_floor * t_floor) / (var + t * t)).sqrt();
                let dk = -k * t / (var + t * t);
                for i in 0..mean.len() {
                    out[i] = mean[i] + (y[i] - mean[i]) * k;
                    dir[i] = (y[i] - mean[i]) * dk + k * v[i];
                }
            }
            Flow::Identity { .. } => {
                out.copy_from_slice(y);
                dir.copy_from_slice(v);
            }
            Flow::Constant(c) => {
                out.copy_from_slice(c);
                dir.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

fn weight_at(weight: Weight, model: &DiffusionModel, t: f64) -> Result<f64> {
    Ok(match weight {
        Weight::Unit => 1.0,
        Weight::SigmaSquared => model.conditional_marginal(t)?.variance(),
    })
}

fn pair_terms(flow: &Flow, lagged: &Flow, pairs: &PairBatch, model: &DiffusionModel, weight: Weight) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::EmptySample);
    }
    if flow.dim() != pairs.plus.dim() || lagged.dim() != pairs.plus.dim() {
        return Err(Error::DimensionMismatch { expected: pairs.plus.dim(), got: flow.dim() });
    }
    let d = flow.dim();
    let n = pairs.len();
    let chunks: Vec<_> = (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect();
    let parts = chunks
        .into_par_iter()
        .map(|r| {
            let (mut w1, mut w2) = (flow.work(), lagged.work());
            let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
            r.map(|i| {
                let t = pairs.t[i];
                flow.eval(t, pairs.plus.row(i), &mut w1, &mut a);
                lagged.eval(t - pairs.delta, pairs.minus.row(i), &mut w2, &mut b);
                Ok(weight_at(weight, model, t)? * a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
            })
            .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let out: Vec<f64> = parts.concat();
    ensure_finite(&out, "consistency loss")?;
    Ok(out)
}

/// `E[lambda(t) |F(t, y_plus) - F^-(t - delta, y_minus)|^2]` on CD pairs, with
/// `lagged` the stop-gradient copy.
pub fn cd_loss(flow: &Flow, lagged: &Flow, pairs: &PairBatch, model: &DiffusionModel, weight: Weight) -> Result<Estimate> {
    if pairs.mode != PairMode::Cd {
        return Err(Error::InvalidArgument("cd_loss needs CD pairs".into()));
    }
    Ok(Estimate::from_samples(&pair_terms(flow, lagged, pairs, model, weight)?))
}

/// The same objective on CT pairs.
pub fn ct_loss(flow: &Flow, lagged: &Flow, pairs: &PairBatch, model: &DiffusionModel, weight: Weight) -> Result<Estimate> {
    if pairs.mode != PairMode::Ct {
        return Err(Error::InvalidArgument("ct_loss needs CT pairs".into()));
    }
    Ok(Estimate::from_samples(&pair_terms(flow, lagged, pairs, model, weight)?))
}

/// Which continuous-time objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Continuous {
    Cd,
    Ct,
}

fn continuous_terms(
    kind: Continuous,
    flow: &Flow,
    model: &DiffusionModel,
    field: Option<&ScoreField>,
    x0: &Batch,
    t: &[f64],
    weight: Weight,
    seed: u64,
) -> Result<Vec<f64>> {
    if x0.is_empty() {
        return Err(Error::EmptySample);
    }
    if x0.len() != t.len() || x0.dim() != flow.dim() {
        return Err(Error::DimensionMismatch { expected: x0.len(), got: t.len() });
    }
    let d = x0.dim();
    let n = x0.len();
    let chunks: Vec<_> = (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect();
    let parts = chunks
        .into_par_iter()
        .map(|r| {
            let mut w = flow.work();
            let (mut e, mut y, mut v, mut f, mut out, mut dir) =
                (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
            r.map(|i| {
                let ti = t[i];
                let mut rng = rng::stream(seed, domain::PAIRS, i as u64);
                normal_vec(&mut rng, &mut e);
                let cm = model.conditional_marginal(ti)?;
                let x = x0.row(i);
                for j in 0..d {
                    y[j] = cm.mean_factor * x[j] + cm.mean_offset + cm.std * e[j];
                }
                match kind {
                    Continuous::Cd => {
                        let s = field.expect("checked").forward(ti, &y)?;
                        model.drift(ti, &y, &mut f);
                        let g2 = model.diffusion_sq(ti);
                        for j in 0..d {
                            v[j] = f[j] - 0.5 * g2 * s[j];
                        }
                    }
                    Continuous::Ct => {
                        for j in 0..d {
                            v[j] = (y[j] - x[j]) / ti;
                        }
                    }
                }
                flow.directional(ti, &y, &v, &mut w, &mut out, &mut dir);
                let lam = weight_at(weight, model, ti)?;
                Ok(match kind {
                    Continuous::Cd => lam * dir.iter().map(|a| a * a).sum::<f64>(),
                    Continuous::Ct => lam * out.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>(),
                })
            })
            .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let out: Vec<f64> = parts.concat();
    ensure_finite(&out, "continuous consistency loss")?;
    Ok(out)
}

/// `E[lambda(t) |d_t F + grad F (f - g^2 s / 2)|^2]` at `y_plus ~ X_t`.
pub fn continuous_cd_loss(
    flow: &Flow,
    model: &DiffusionModel,
    field: &ScoreField,
    x0: &Batch,
    t: &[f64],
    weight: Weight,
    seed: u64,
) -> Result<Estimate> {
    Ok(Estimate::from_samples(&continuous_terms(Continuous::Cd, flow, model, Some(field), x0, t, weight, seed)?))
}

/// `E[lambda(t) F . (d_t F + grad F (y_plus - x) / t)]`.
pub fn continuous_ct_loss(flow: &Flow, model: &DiffusionModel, x0: &Batch, t: &[f64], weight: Weight, seed: u64) -> Result<Estimate> {
    Ok(Estimate::from_samples(&continuous_terms(Continuous::Ct, flow, model, None, x0, t, weight, seed)?))
}

/// `F(T, Y_0)` with `Y_0` drawn from the prior.
pub fn one_step_sample(flow: &Flow, model: &DiffusionModel, n: usize, seed: u64) -> Result<SampleBatch> {
    if flow.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: flow.dim() });
    }
    let y0 = model.prior_sample(n, seed)?;
    let d = model.dim();
    let big_t = model.horizon();
    let mut out = Batch::zeros(n, d);
    out.as_mut_slice().par_chunks_mut(CHUNK * d).zip(y0.as_slice().par_chunks(CHUNK * d)).for_each(|(o, y)| {
        let mut w = flow.work();
        for (oi, yi) in o.chunks_exact_mut(d).zip(y.chunks_exact(d)) {
            flow.eval(big_t, yi, &mut w, oi);
        }
    });
    if !out.all_finite() {
        return Err(Error::NonFinite("one-step sample".into()));
    }
    Ok(SampleBatch::new(out, 0.0, model.hash(), seed, "consistency_one_step"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    #[default]
    Cd,
    Ct,
    ContinuousCd,
    ContinuousCt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub mode: ConsistencyMode,
    pub delta: f64,
    pub weight: Weight,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_after: usize,
    pub clip_norm: Option<f64>,
    /// Moving-average weight of the stop-gradient copy; 0 copies the
    /// current parameters every iteration.
    pub ema: f64,
    pub seed: u64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            mode: ConsistencyMode::Cd,
            delta: 0.05,
            weight: Weight::Unit,
            batch_size: 128,
            iterations: 1000,
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            decay_after: 1000,
            clip_norm: Some(10.0),
            ema: 0.0,
            seed: 0,
        }
    }
}

/// A trained flow with its loss trace.
#[derive(Debug, Clone)]
pub struct TrainedFlow {
    pub flow: FlowNet,
    pub trace: Vec<LossRecord>,
}

struct FlowDraw {
    t: f64,
    plus: Vec<f64>,
    /// CD/CT: the partner point; continuous: the direction `v`.
    other: Vec<f64>,
    lambda: f64,
}

fn flow_grad(
    mode: ConsistencyMode,
    net: &FlowNet,
    lagged: &Flow,
    delta: f64,
    draws: &[FlowDraw],
) -> (f64, Vec<f64>) {
    let d = net.dim;
    let mut grad = vec![0.0; net.mlp.n_params()];
    let mut ws = net.mlp.workspace();
    let mut lw = lagged.work();
    let mut input = vec![0.0; d + 1];
    let mut tangent = vec![0.0; d + 1];
    let mut target = vec![0.0; d];
    let (mut up, mut up_t) = (vec![0.0; d], vec![0.0; d]);
    let mut loss = 0.0;
    for dr in draws {
        let sk = net.skip(dr.t);
        input[..d].copy_from_slice(&dr.plus);
        input[d] = dr.t / net.horizon;
        match mode {
            ConsistencyMode::Cd | ConsistencyMode::Ct => {
                lagged.eval(dr.t - delta, &dr.other, &mut lw, &mut target);
                let o = net.mlp.forward(&net.params, &input, &mut ws);
                let mut sq = 0.0;
                for j in 0..d {
                    let r = sk.c_skip * dr.plus[j] + sk.c_out * o[j] - target[j];
                    sq += r * r;
                    up[j] = 2.0 * dr.lambda * sk.c_out * r;
                }
                loss += dr.lambda * sq;
                net.mlp.backward(&net.params, &mut ws, &up, &mut grad, None);
            }
            ConsistencyMode::ContinuousCd | ConsistencyMode::ContinuousCt => {
                tangent[..d].copy_from_slice(&dr.other);
                tangent[d] = 1.0 / net.horizon;
                let (o, ot) = net.mlp.jvp(&net.params, &input, &tangent, &mut ws);
                let mut val = 0.0;
                for j in 0..d {
                    let f = sk.c_skip * dr.plus[j] + sk.c_out * o[j];
                    let dir = sk.dc_skip * dr.plus[j] + sk.c_skip * dr.other[j] + sk.dc_out * o[j] + sk.c_out * ot[j];
                    if mode == ConsistencyMode::ContinuousCd {
                        val += dir * dir;
                        up[j] = 2.0 * dr.lambda * sk.dc_out * dir;
                        up_t[j] = 2.0 * dr.lambda * sk.c_out * dir;
                    } else {
                        val += f * dir;
                        up[j] = dr.lambda * (sk.c_out * dir + sk.dc_out * f);
                        up_t[j] = dr.lambda * sk.c_out * f;
                    }
                }
                loss += dr.lambda * val;
                net.mlp.backward_jvp(&net.params, &mut ws, &up, &up_t, &mut grad);
            }
        }
    }
    (loss, grad)
}

/// Trains a flow network on the configured consistency objective. CD modes
/// need a score field; `t` is uniform on `[t_floor + delta, T]` for discrete
/// modes and `[t_floor, T]` otherwise.
pub fn train_consistency(
    cfg: &ConsistencyConfig,
    mut net: FlowNet,
    model: &DiffusionModel,
    target: &Target,
    field: Option<&ScoreField>,
) -> Result<TrainedFlow> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.ema) || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("need ema in [0, 1) and learning_rate > 0".into()));
    }
    if net.dim != model.dim() || target.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: net.dim });
    }
    let needs_score = matches!(cfg.mode, ConsistencyMode::Cd | ConsistencyMode::ContinuousCd);
    if needs_score && field.is_none() {
        return Err(Error::InvalidArgument("distillation modes need a score field".into()));
    }
    let discrete = matches!(cfg.mode, ConsistencyMode::Cd | ConsistencyMode::Ct);
    let big_t = model.horizon();
    let lo = if discrete { net.t_floor + cfg.delta } else { net.t_floor.max(1e-6 * big_t) };
    if discrete && !(cfg.delta > 0.0 && lo < big_t) {
        return Err(Error::InvalidArgument(format!("delta {} leaves no room in (t_floor, T]", cfg.delta)));
    }
    let d = model.dim();
    let mut state = OptState::new(cfg.optimizer, cfg.momentum, net.mlp.n_params());
    let mut lag = net.params.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    for k in 0..cfg.iterations {
        let x0 = target.sample(cfg.batch_size, rng::child_seed(cfg.seed, domain::TARGET, k as u64))?;
        let mut rng = rng::stream(cfg.seed, domain::TRAIN, k as u64);
        let mut e = vec![0.0; d];
        let mut draws = Vec::with_capacity(cfg.batch_size);
        for x in x0.rows() {
            let t = rng.random_range(lo..=big_t);
            normal_vec(&mut rng, &mut e);
            let cm = model.conditional_marginal(t)?;
            let plus: Vec<f64> = x.iter().zip(&e).map(|(x, e)| cm.mean_factor * x + cm.mean_offset + cm.std * e).collect();
            let other = match cfg.mode {
                ConsistencyMode::Cd => cd_step(model, field.expect("checked"), t, cfg.delta, &plus)?,
                ConsistencyMode::Ct => {
                    normal_vec(&mut rng, &mut e);
                    let cm = model.conditional_marginal(t - cfg.delta)?;
                    x.iter().zip(&e).map(|(x, e)| cm.mean_factor * x + cm.mean_offset + cm.std * e).collect()
                }
                ConsistencyMode::ContinuousCd => {
                    let s = field.expect("checked").forward(t, &plus)?;
                    let mut f = vec![0.0; d];
                    model.drift(t, &plus, &mut f);
                    let g2 = model.diffusion_sq(t);
                    f.iter().zip(&s).map(|(f, s)| f - 0.5 * g2 * s).collect()
                }
                ConsistencyMode::ContinuousCt => plus.iter().zip(x).map(|(y, x)| (y - x) / t).collect(),
            };
            draws.push(FlowDraw { t, plus, other, lambda: weight_at(cfg.weight, model, t)? });
        }
        let lagged = Flow::Net(FlowNet { params: lag.clone(), ..net.clone() });
        let parts: Vec<(f64, Vec<f64>)> =
            draws.par_chunks(TRAIN_CHUNK).map(|c| flow_grad(cfg.mode, &net, &lagged, cfg.delta, c)).collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; net.mlp.n_params()];
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
        state.step(&mut net.params, &grad, optim::step_size(cfg.learning_rate, cfg.decay_after, k));
        for (l, p) in lag.iter_mut().zip(&net.params) {
            *l = cfg.ema * *l + (1.0 - cfg.ema) * p;
        }
        trace.push(LossRecord { iteration: k, loss, wall_time: start.elapsed().as_secs_f64() });
    }
    Ok(TrainedFlow { flow: net, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::ModelSpec;
    use crate::target::GaussianMixture;
    use approx::assert_relative_eq;

    fn ve(d: usize, horizon: f64) -> DiffusionModel {
        DiffusionModel::new(&ModelSpec::ve_linear(d, horizon)).unwrap()
    }

    fn point_mass(d: usize, model: &DiffusionModel) -> (GaussianMixture, ScoreField) {
        let g = GaussianMixture::dirac(vec![0.0; d]).unwrap();
        let f = ScoreField::oracle(g.clone(), model).unwrap();
        (g, f)
    }

    #[test]
    fn coupling_theory_examples() {
        let v = coupling_w2_theory(1.0, 0.1, 2).unwrap();
        assert_relative_eq!(v, 4.0 * (1.81 - 1.6561f64.sqrt()), max_relative = 1e-12);
        assert_relative_eq!(v, 2.0924, epsilon = 1e-4);
        assert_relative_eq!(coupling_w2_gaussian(1.0, 0.1, 2).unwrap(), v, epsilon = 1e-9);
        let small = coupling_w2_theory(2.0, 1e-7, 3).unwrap();
        assert_relative_eq!(small, 2.0 * (2.0 - 2f64.sqrt()) * 4.0 * 3.0, max_relative = 1e-6);
        assert_eq!(coupling_w2_theory(1.0, 0.1, 0).unwrap(), 0.0);
        assert!(coupling_w2_theory(1.0, 1.0, 2).is_err());
    }

    #[test]
    fn cd_pairs_for_point_mass() {
        let m = ve(2, 1.0);
        let (g, f) = point_mass(2, &m);
        let x0 = g.sample(1000, 1).unwrap();
        let (t, delta) = (0.8, 0.1);
        let p = build_cd_pairs(&m, &f, &x0, t, delta, 3).unwrap();
        for (a, b) in p.plus.as_slice().iter().zip(p.minus.as_slice()) {
            assert_relative_eq!(*b, a * (1.0 - delta / t), max_relative = 1e-12);
        }
        let tiny = build_cd_pairs(&m, &f, &x0, t, 1e-14, 3).unwrap();
        for (a, b) in tiny.plus.as_slice().iter().zip(tiny.minus.as_slice()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        assert!(build_cd_pairs(&m, &f, &x0, t, t, 3).is_err());
        let ct = build_ct_pairs(&m, &x0, t, t * (1.0 - 1e-12), 3).unwrap();
        assert!(ct.minus.as_slice().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn pair_laws_match_the_closed_forms() {
        let m = ve(2, 1.0);
        let (g, f) = point_mass(2, &m);
        let (t, delta) = (1.0, 0.1);
        let x0 = g.sample(100_000, 0).unwrap();
        let cd = build_cd_pairs(&m, &f, &x0, t, delta, 5).unwrap();
        let ct = build_ct_pairs(&m, &x0, t, delta, 5).unwrap();
        let (ccd, cct) = pair_covariances(t, delta, 2);
        for (est, exact) in [(cd.joint().covariance(), ccd), (ct.joint().covariance(), cct)] {
            for (a, b) in est.iter().zip(&exact) {
                assert!((a - b).abs() < 0.02, "{a} vs {b}");
            }
        }
        // marginals agree in law
        let (va, vb) = (cd.plus.variance(), ct.plus.variance());
        assert!((va[0] - vb[0]).abs() < 0.02);
        let emp = coupling_w2_empirical(&cd, &ct).unwrap();
        let theory = coupling_w2_theory(t, delta, 2).unwrap();
        assert!((emp - theory).abs() < 0.05 * theory, "{emp} vs {theory}");
    }

    #[test]
    fn identity_losses_on_pairs() {
        let m = ve(2, 1.0);
        let (g, f) = point_mass(2, &m);
        let x0 = g.sample(200_000, 0).unwrap();
        let id = Flow::Identity { dim: 2 };
        for delta in [0.05, 0.1, 0.3, 0.6] {
            let t = 1.0;
            let cd = cd_loss(&id, &id, &build_cd_pairs(&m, &f, &x0, t, delta, 1).unwrap(), &m, Weight::Unit).unwrap();
            let ct = ct_loss(&id, &id, &build_ct_pairs(&m, &x0, t, delta, 2).unwrap(), &m, Weight::Unit).unwrap();
            assert!(cd.agrees_with(delta * delta * 2.0, 4.0), "{cd:?}");
            assert!(ct.agrees_with(2.0 * (t * t + (t - delta).powi(2)), 4.0), "{ct:?}");
            assert!(cd.value < ct.value);
        }
        let c = Flow::Constant(vec![1.0, 2.0]);
        let p = build_ct_pairs(&m, &x0, 1.0, 0.1, 2).unwrap();
        assert_eq!(ct_loss(&c, &c, &p, &m, Weight::Unit).unwrap().value, 0.0);
        assert!(cd_loss(&c, &c, &p, &m, Weight::Unit).is_err());
    }

    #[test]
    fn cd_pairs_lie_on_the_ode_path() {
        let m = ve(1, 1.0);
        let g = GaussianMixture::new(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![0.1, 0.2]).unwrap();
        let f = ScoreField::oracle(g.clone(), &m).unwrap();
        let x0 = g.sample(1, 4).unwrap();
        let t = 0.7;
        let mut errs = Vec::new();
        for delta in [0.04, 0.02, 0.01] {
            let p = build_cd_pairs(&m, &f, &x0, t, delta, 9).unwrap();
            // integrate the forward-time ODE dy/dt = f - g^2 s / 2 from t - delta to t
            let mut y = p.minus.row(0).to_vec();
            let n = 2000;
            let h = delta / n as f64;
            let rhs = |s: f64, y: &[f64]| {
                let sc = f.forward(s, y).unwrap();
                vec![-0.5 * m.diffusion_sq(s) * sc[0]]
            };
            for k in 0..n {
                let s = t - delta + k as f64 * h;
                let k1 = rhs(s, &y);
                let yp = vec![y[0] + h * k1[0]];
                let k2 = rhs(s + h, &yp);
                y[0] += 0.5 * h * (k1[0] + k2[0]);
            }
            errs.push((y[0] - p.plus.row(0)[0]).abs());
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 3.0 && ratio < 5.0, "{errs:?}");
        }
    }

    #[test]
    fn exact_flow_has_zero_continuous_cd_loss() {
        let m = ve(2, 1.0);
        let tf = 0.002;
        for var in [0.0, 0.3] {
            let g = if var == 0.0 {
                GaussianMixture::dirac(vec![0.5, -0.5]).unwrap()
            } else {
                GaussianMixture::gaussian(vec![0.5, -0.5], var).unwrap()
            };
            let f = ScoreField::oracle(g.clone(), &m).unwrap();
            let flow = Flow::Gaussian { mean: vec![0.5, -0.5], var, t_floor: tf };
            let x0 = g.sample(2000, 1).unwrap();
            let t: Vec<f64> = (0..2000).map(|i| 0.01 + 0.99 * (i as f64 + 0.5) / 2000.0).collect();
            let e = continuous_cd_loss(&flow, &m, &f, &x0, &t, Weight::Unit, 3).unwrap();
            assert!(e.value.abs() < 1e-4, "{e:?}");
        }
        let c = Flow::Constant(vec![0.0, 1.0]);
        let (g, f) = point_mass(2, &m);
        let x0 = g.sample(10, 1).unwrap();
        let e = continuous_cd_loss(&c, &m, &f, &x0, &[0.5; 10], Weight::Unit, 3).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(continuous_ct_loss(&c, &m, &x0, &[0.5; 10], Weight::Unit, 3).unwrap().value, 0.0);
    }

    #[test]
    fn discrete_cd_scales_to_continuous() {
        let m = ve(2, 1.0);
        let g = GaussianMixture::gaussian(vec![0.0, 0.0], 0.25).unwrap();
        let f = ScoreField::oracle(g.clone(), &m).unwrap();
        let flow = Flow::Net(FlowNet::new(2, &[16], 1.0, 0.002, 0.5, 7).unwrap());
        let x0 = g.sample(4000, 2).unwrap();
        let t = vec![0.6; 4000];
        let cont = continuous_cd_loss(&flow, &m, &f, &x0, &t, Weight::Unit, 11).unwrap().value;
        for delta in [0.1, 0.05, 0.025] {
            let p = build_pairs(PairMode::Cd, &m, Some(&f), &x0, &t, delta, 11).unwrap();
            let disc = cd_loss(&flow, &flow, &p, &m, Weight::Unit).unwrap().value / (delta * delta);
            assert!((disc / cont - 1.0).abs() < 0.1, "delta {delta}: {disc} vs {cont}");
        }
    }

    #[test]
    fn net_directional_matches_finite_differences() {
        let net = FlowNet::new(2, &[8, 8], 2.0, 0.01, 0.5, 3).unwrap();
        let flow = Flow::Net(net);
        let mut w = flow.work();
        let (y, v, t) = ([0.3, -0.7], [0.4, 1.1], 0.9);
        let (mut out, mut dir) = ([0.0; 2], [0.0; 2]);
        flow.directional(t, &y, &v, &mut w, &mut out, &mut dir);
        let h = 1e-6;
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        flow.eval(t + h, &[y[0] + h * v[0], y[1] + h * v[1]], &mut w, &mut a);
        flow.eval(t - h, &[y[0] - h * v[0], y[1] - h * v[1]], &mut w, &mut b);
        for j in 0..2 {
            assert_relative_eq!(dir[j], (a[j] - b[j]) / (2.0 * h), max_relative = 1e-6);
        }
        // boundary condition
        flow.eval(0.01, &y, &mut w, &mut a);
        assert_relative_eq!(a[0], y[0], max_relative = 1e-14);
    }

    #[test]
    fn flow_gradients_match_finite_differences() {
        let net = FlowNet::new(2, &[6], 1.0, 0.01, 0.5, 5).unwrap();
        let lagged = Flow::Net(FlowNet::new(2, &[6], 1.0, 0.01, 0.5, 6).unwrap());
        let draws = vec![
            FlowDraw { t: 0.5, plus: vec![0.2, -0.3], other: vec![0.1, 0.4], lambda: 1.3 },
            FlowDraw { t: 0.9, plus: vec![-0.6, 0.5], other: vec![0.7, -0.2], lambda: 0.7 },
        ];
        for mode in [ConsistencyMode::Cd, ConsistencyMode::ContinuousCd, ConsistencyMode::ContinuousCt] {
            let (_, g) = flow_grad(mode, &net, &lagged, 0.05, &draws);
            for idx in [0, 7, 13, net.mlp.n_params() - 1] {
                let h = 1e-6;
                let mut p = net.clone();
                p.params[idx] += h;
                let (lp, _) = flow_grad(mode, &p, &lagged, 0.05, &draws);
                p.params[idx] -= 2.0 * h;
                let (lm, _) = flow_grad(mode, &p, &lagged, 0.05, &draws);
                let fd = (lp - lm) / (2.0 * h);
                assert!((g[idx] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{mode:?} {idx}: {} vs {fd}", g[idx]);
            }
        }
    }

    #[test]
    fn one_step_examples() {
        let m = ve(2, 20.0);
        let var = 0.25;
        let g = GaussianMixture::gaussian(vec![0.0, 0.0], var).unwrap();
        let flow = Flow::Gaussian { mean: vec![0.0, 0.0], var, t_floor: 0.002 };
        let s = one_step_sample(&flow, &m, 20_000, 1).unwrap();
        let tgt = g.sample(20_000, 2).unwrap();
        let tgt2 = g.sample(20_000, 3).unwrap();
        let sw = metrics::sliced_w2(&s.samples, &tgt, 64, 0).unwrap().value;
        let base = metrics::sliced_w2(&tgt2, &tgt, 64, 0).unwrap().value;
        assert!(sw <= 3.0 * base, "{sw} vs {base}");
        let id = one_step_sample(&Flow::Identity { dim: 2 }, &m, 100, 4).unwrap();
        assert_eq!(id.samples, m.prior_sample(100, 4).unwrap());
        assert_eq!(one_step_sample(&flow, &m, 100, 4).unwrap().samples, one_step_sample(&flow, &m, 100, 4).unwrap().samples);
    }

    #[test]
    fn training_reduces_the_loss_and_respects_the_boundary() {
        let m = ve(1, 2.0);
        let g = GaussianMixture::gaussian(vec![0.5], 0.25).unwrap();
        let f = ScoreField::oracle(g.clone(), &m).unwrap();
        let target = Target::Mixture(g);
        for mode in [ConsistencyMode::Cd, ConsistencyMode::Ct, ConsistencyMode::ContinuousCd, ConsistencyMode::ContinuousCt] {
            let net = FlowNet::new(1, &[16], 2.0, 0.002, 0.5, 1).unwrap();
            let cfg = ConsistencyConfig { mode, iterations: 300, batch_size: 64, learning_rate: 3e-3, ..Default::default() };
            let out = train_consistency(&cfg, net, &m, &target, Some(&f)).unwrap();
            assert_eq!(out.trace.len(), 300);
            if mode != ConsistencyMode::ContinuousCt {
                let head: f64 = out.trace[..30].iter().map(|r| r.loss).sum();
                let tail: f64 = out.trace[270..].iter().map(|r| r.loss).sum();
                assert!(tail < head, "{mode:?}: {head} -> {tail}");
            }
            let flow = Flow::Net(out.flow);
            let mut w = flow.work();
            let mut o = [0.0];
            flow.eval(0.002, &[1.7], &mut w, &mut o);
            assert_relative_eq!(o[0], 1.7, max_relative = 1e-12);
        }
    }

    #[test]
    fn flow_file_roundtrip() {
        let net = FlowNet::new(2, &[5], 1.0, 0.01, 0.5, 2).unwrap();
        let mut buf = Vec::new();
        net.save(&mut buf).unwrap();
        let back = FlowNet::load(&buf[..]).unwrap();
        assert_eq!(back.params(), net.params());
        assert!(FlowNet::load(&buf[..buf.len() - 3]).is_err());
    }
}
