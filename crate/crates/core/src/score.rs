//! Score fields `s(t, x)`: the exact mixture oracle, learned networks and a
//! few analytic fields used as controls.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Mlp, Workspace};
use crate::sde::{DiffusionModel, ModelKind};
use crate::target::GaussianMixture;

/// Largest dimension for which the exact divergence (one JVP pass per
/// coordinate) is offered.
pub const DIVERGENCE_CAP: usize = 8;

/// Extra network inputs derived from `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeFeatures {
    /// No time input; the field is time-independent.
    None,
    /// `(t / T, sigma_t, m(t))`.
    #[default]
    Schedule,
}

impl TimeFeatures {
    pub fn count(self) -> usize {
        match self {
            TimeFeatures::None => 0,
            TimeFeatures::Schedule => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            TimeFeatures::None => "none",
            TimeFeatures::Schedule => "schedule",
        }
    }
}

/// Writes the time features of `t` into `out` (length `features.count()`).
pub fn time_features(model: &DiffusionModel, features: TimeFeatures, t: f64, out: &mut [f64]) -> Result<()> {
    if let TimeFeatures::Schedule = features {
        let cm = model.conditional_marginal(t)?;
        out[0] = t / model.horizon();
        out[1] = cm.std;
        out[2] = cm.mean_factor;
    }
    Ok(())
}

/// Time derivative of [`time_features`]; needs `sigma_t > 0`.
pub fn time_feature_derivatives(model: &DiffusionModel, features: TimeFeatures, t: f64, out: &mut [f64]) -> Result<()> {
    if let TimeFeatures::Schedule = features {
        let cm = model.conditional_marginal(t)?;
        if cm.std == 0.0 {
            return Err(Error::BelowTimeFloor { t, floor: 0.0 });
        }
        let a = model.drift_slope(t);
        out[0] = 1.0 / model.horizon();
        out[1] = (2.0 * a * cm.variance() + model.diffusion_sq(t)) / (2.0 * cm.std);
        out[2] = a * cm.mean_factor;
    }
    Ok(())
}

/// How a network output `f` becomes a score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parametrization {
    /// `s = f`.
    #[default]
    Raw,
    /// VP only: `s = gamma^(1/4) / (1 - sqrt(gamma)) f - x / (1 - sqrt(gamma))`
    /// with `gamma(t) = exp(-2 int_0^t beta)`; undefined at `t = 0`, so
    /// evaluation below `t_floor` is rejected.
    Tweedie { t_floor: f64 },
}

/// A network score `s_theta(t, x)`.
#[derive(Debug, Clone)]
pub struct LearnedScore {
    mlp: Mlp,
    params: Vec<f64>,
    features: TimeFeatures,
    parametrization: Parametrization,
    model: DiffusionModel,
}

/// Per-time constants of a learned score: the time features and the affine
/// map `s = coef * f - shortcut * x`.
#[derive(Debug, Clone, Copy)]
pub struct LearnedAt {
    pub t: f64,
    feats: [f64; 3],
    pub coef: f64,
    pub shortcut: f64,
}

/// Scratch space for evaluating a learned score.
#[derive(Debug, Clone)]
pub struct NetScratch {
    ws: Workspace,
    input: Vec<f64>,
    tangent: Vec<f64>,
}

impl LearnedScore {
    /// Fresh network with hidden widths `hidden` and seeded initial weights.
    pub fn new(
        model: &DiffusionModel,
        hidden: &[usize],
        features: TimeFeatures,
        parametrization: Parametrization,
        seed: u64,
    ) -> Result<Self> {
        let d = model.dim();
        let mlp = Mlp::new(d + features.count(), hidden, d)?;
        let params = mlp.init(seed);
        Self::from_parts(model, mlp, params, features, parametrization)
    }

    pub fn from_parts(
        model: &DiffusionModel,
        mlp: Mlp,
        params: Vec<f64>,
        features: TimeFeatures,
        parametrization: Parametrization,
    ) -> Result<Self> {
        let d = model.dim();
        if mlp.input_dim() != d + features.count() || mlp.output_dim() != d {
            return Err(Error::ParamFormat(format!(
                "network shape {:?} does not fit dimension {d} with {} time features",
                mlp.sizes(),
                features.count()
            )));
        }
        if params.len() != mlp.n_params() {
            return Err(Error::ParamFormat(format!("expected {} parameters, got {}", mlp.n_params(), params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        if let Parametrization::Tweedie { t_floor } = parametrization {
            if model.kind() != ModelKind::Vp {
                return Err(Error::UnsupportedModel { op: "tweedie parametrization", kind: model.kind().to_string() });
            }
            if !(t_floor > 0.0 && t_floor < model.horizon()) {
                return Err(Error::InvalidArgument(format!("t_floor must lie in (0, T), got {t_floor}")));
            }
        }
        Ok(Self { mlp, params, features, parametrization, model: model.clone() })
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

    pub fn features(&self) -> TimeFeatures {
        self.features
    }

    pub fn parametrization(&self) -> Parametrization {
        self.parametrization
    }

    pub fn model(&self) -> &DiffusionModel {
        &self.model
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn scratch(&self) -> NetScratch {
        NetScratch { ws: self.mlp.workspace(), input: vec![0.0; self.mlp.input_dim()], tangent: vec![0.0; self.mlp.input_dim()] }
    }

    /// Per-time constants; rejects times outside `[0, T]` or below the floor.
    pub fn at(&self, t: f64) -> Result<LearnedAt> {
        let mut feats = [0.0; 3];
        time_features(&self.model, self.features, t, &mut feats)?;
        let (coef, shortcut) = match self.parametrization {
            Parametrization::Raw => (1.0, 0.0),
            Parametrization::Tweedie { t_floor } => {
                if t < t_floor {
                    return Err(Error::BelowTimeFloor { t, floor: t_floor });
                }
                let gamma = (-2.0 * self.model.beta_integral(t)?).exp();
                let denom = 1.0 - gamma.sqrt();
                (gamma.powf(0.25) / denom, 1.0 / denom)
            }
        };
        Ok(LearnedAt { t, feats, coef, shortcut })
    }

    fn load_input(&self, at: &LearnedAt, x: &[f64], sc: &mut NetScratch) {
        let d = self.dim();
        sc.input[..d].copy_from_slice(x);
        sc.input[d..].copy_from_slice(&at.feats[..self.features.count()]);
    }

    /// Evaluates `s(t, x)` into `out`.
    pub fn eval(&self, at: &LearnedAt, x: &[f64], sc: &mut NetScratch, out: &mut [f64]) {
        self.load_input(at, x, sc);
        let f = self.mlp.forward(&self.params, &sc.input, &mut sc.ws);
        for ((o, fi), xi) in out.iter_mut().zip(f).zip(x) {
            *o = at.coef * fi - at.shortcut * xi;
        }
    }

    /// After [`LearnedScore::eval`]: accumulates `d(upstream . s)/d theta`.
    pub fn accumulate_grad(&self, at: &LearnedAt, sc: &mut NetScratch, upstream: &[f64], grad: &mut [f64]) {
        let d = self.dim();
        let mut scaled = [0.0; 16];
        let mut heap;
        let up: &mut [f64] = if d <= 16 {
            &mut scaled[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        for (u, v) in up.iter_mut().zip(upstream) {
            *u = at.coef * v;
        }
        self.mlp.backward(&self.params, &mut sc.ws, up, grad, None);
    }

    /// `v^T (d s / d x) v`.
    pub fn projected_jacobian(&self, at: &LearnedAt, x: &[f64], v: &[f64], sc: &mut NetScratch) -> f64 {
        let d = self.dim();
        self.load_input(at, x, sc);
        sc.tangent.iter_mut().for_each(|t| *t = 0.0);
        sc.tangent[..d].copy_from_slice(v);
        let (_, df) = self.mlp.jvp(&self.params, &sc.input, &sc.tangent, &mut sc.ws);
        let vjv: f64 = df.iter().zip(v).map(|(a, b)| a * b).sum();
        let vv: f64 = v.iter().map(|a| a * a).sum();
        at.coef * vjv - at.shortcut * vv
    }

    /// After [`LearnedScore::projected_jacobian`]: accumulates
    /// `weight * d(v^T J v)/d theta`.
    pub fn accumulate_projected_grad(&self, at: &LearnedAt, v: &[f64], weight: f64, sc: &mut NetScratch, grad: &mut [f64]) {
        let d = self.dim();
        let zeros = vec![0.0; d];
        let up_tan: Vec<f64> = v.iter().map(|a| weight * at.coef * a).collect();
        self.mlp.backward_jvp(&self.params, &mut sc.ws, &zeros, &up_tan, grad);
    }

    /// Exact divergence via `d` directional passes.
    pub fn divergence(&self, at: &LearnedAt, x: &[f64], sc: &mut NetScratch) -> Result<f64> {
        let d = self.dim();
        if d > DIVERGENCE_CAP {
            return Err(Error::DivergenceCap { dim: d, cap: DIVERGENCE_CAP });
        }
        let mut e = vec![0.0; d];
        let mut total = 0.0;
        for j in 0..d {
            e[j] = 1.0;
            total += self.projected_jacobian(at, x, &e, sc);
            e[j] = 0.0;
        }
        Ok(total)
    }

    /// Writes the text header followed by the little-endian parameters.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let sizes: Vec<String> = self.mlp.sizes().iter().map(|s| s.to_string()).collect();
        writeln!(w, "scorelab-params 1")?;
        writeln!(w, "sizes {}", sizes.join(" "))?;
        writeln!(w, "features {}", self.features.name())?;
        match self.parametrization {
            Parametrization::Raw => writeln!(w, "parametrization raw")?,
            Parametrization::Tweedie { t_floor } => writeln!(w, "parametrization tweedie {t_floor:e}")?,
        }
        writeln!(w, "model_hash {}", self.model.hash())?;
        writeln!(w, "count {}", self.params.len())?;
        writeln!(w, "end")?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a file written by [`LearnedScore::save`] for use with `model`.
    /// Rejects shape, count and model mismatches.
    pub fn load<R: BufRead>(mut r: R, model: &DiffusionModel) -> Result<Self> {
        let bad = |m: String| Error::ParamFormat(m);
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("unexpected end of header".into()));
            }
            Ok(line.trim_end().to_string())
        };
        if next_line(&mut r)? != "scorelab-params 1" {
            return Err(bad("not a scorelab parameter file".into()));
        }
        let mut sizes = None;
        let mut features = None;
        let mut parametrization = None;
        let mut hash = None;
        let mut count = None;
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            let mut it = l.split_whitespace();
            let key = it.next().unwrap_or_default();
            let rest: Vec<&str> = it.collect();
            match key {
                "sizes" => {
                    let v: std::result::Result<Vec<usize>, _> = rest.iter().map(|s| s.parse()).collect();
                    sizes = Some(v.map_err(|_| bad(format!("bad sizes line `{l}`")))?);
                }
                "features" => {
                    features = Some(match rest.first().copied() {
                        Some("none") => TimeFeatures::None,
                        Some("schedule") => TimeFeatures::Schedule,
                        _ => return Err(bad(format!("bad features line `{l}`"))),
                    })
                }
                "parametrization" => {
                    parametrization = Some(match rest.as_slice() {
                        ["raw"] => Parametrization::Raw,
                        ["tweedie", f] => Parametrization::Tweedie {
                            t_floor: f.parse().map_err(|_| bad(format!("bad t_floor `{f}`")))?,
                        },
                        _ => return Err(bad(format!("bad parametrization line `{l}`"))),
                    })
                }
                "model_hash" => hash = rest.first().map(|s| s.to_string()),
                "count" => count = Some(rest.first().and_then(|s| s.parse::<usize>().ok()).ok_or_else(|| bad("bad count".into()))?),
                _ => return Err(bad(format!("unknown header key `{key}`"))),
            }
        }
        let sizes = sizes.ok_or_else(|| bad("missing sizes".into()))?;
        let features = features.ok_or_else(|| bad("missing features".into()))?;
        let parametrization = parametrization.ok_or_else(|| bad("missing parametrization".into()))?;
        let count = count.ok_or_else(|| bad("missing count".into()))?;
        if hash.as_deref() != Some(model.hash()) {
            return Err(bad(format!(
                "parameters were trained for model {}, not {}",
                hash.unwrap_or_default(),
                model.hash()
            )));
        }
        if sizes.len() < 2 {
            return Err(bad("need at least input and output sizes".into()));
        }
        let mlp = Mlp::new(sizes[0], &sizes[1..sizes.len() - 1], sizes[sizes.len() - 1])?;
        if mlp.n_params() != count {
            return Err(bad(format!("shape {:?} implies {} parameters, header says {count}", sizes, mlp.n_params())));
        }
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() != 8 * count {
            return Err(bad(format!("expected {} bytes of parameters, found {}", 8 * count, buf.len())));
        }
        let params = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_parts(model, mlp, params, features, parametrization)
    }
}

/// Source of `s(t, x)`.
#[derive(Debug, Clone)]
pub enum ScoreField {
    /// Exact score of a mixture target under the model's forward dynamics.
    Oracle { target: GaussianMixture, model: DiffusionModel },
    Learned(LearnedScore),
    /// Time-independent affine field `A x + b` (`A` row-major).
    Linear { matrix: Vec<f64>, offset: Vec<f64> },
    /// `base + shift`: a score with a known constant error.
    Perturbed { base: Box<ScoreField>, shift: Vec<f64> },
    Zero { dim: usize },
}

impl ScoreField {
    pub fn oracle(target: GaussianMixture, model: &DiffusionModel) -> Result<Self> {
        if target.dim() != model.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), got: target.dim() });
        }
        Ok(ScoreField::Oracle { target, model: model.clone() })
    }

    pub fn linear(matrix: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        let d = offset.len();
        if d == 0 {
            return Err(Error::InvalidDimension(0));
        }
        if matrix.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d * d, got: matrix.len() });
        }
        Ok(ScoreField::Linear { matrix, offset })
    }

    pub fn perturbed(base: ScoreField, shift: Vec<f64>) -> Result<Self> {
        if shift.len() != base.dim() {
            return Err(Error::DimensionMismatch { expected: base.dim(), got: shift.len() });
        }
        Ok(ScoreField::Perturbed { base: Box::new(base), shift })
    }

    /// Wraps a network output `f_theta` with the Tweedie (U-net style)
    /// parametrization of a VP model.
    pub fn tweedie_parametrize(net: LearnedScore, t_floor: f64) -> Result<Self> {
        let LearnedScore { mlp, params, features, model, .. } = net;
        Ok(ScoreField::Learned(LearnedScore::from_parts(
            &model,
            mlp,
            params,
            features,
            Parametrization::Tweedie { t_floor },
        )?))
    }

    pub fn dim(&self) -> usize {
        match self {
            ScoreField::Oracle { target, .. } => target.dim(),
            ScoreField::Learned(l) => l.dim(),
            ScoreField::Linear { offset, .. } => offset.len(),
            ScoreField::Perturbed { base, .. } => base.dim(),
            ScoreField::Zero { dim } => *dim,
        }
    }

    pub fn as_learned(&self) -> Option<&LearnedScore> {
        match self {
            ScoreField::Learned(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_learned_mut(&mut self) -> Option<&mut LearnedScore> {
        match self {
            ScoreField::Learned(l) => Some(l),
            _ => None,
        }
    }

    /// Prepares an evaluator for time `t`. The mixture oracle evolves the
    /// target once here, so repeated evaluations at one time are cheap.
    pub fn at(&self, t: f64) -> Result<ScoreEval<'_>> {
        let mut shift = vec![0.0; self.dim()];
        let mut field = self;
        while let ScoreField::Perturbed { base, shift: s } = field {
            shift.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            field = base;
        }
        let base = match field {
            ScoreField::Oracle { target, model } => {
                let evolved = target.evolve(model, t)?;
                evolved.check_density()?;
                EvalBase::Mixture(evolved)
            }
            ScoreField::Learned(l) => EvalBase::Learned { net: l, at: l.at(t)?, scratch: l.scratch() },
            ScoreField::Linear { matrix, offset } => EvalBase::Linear { matrix, offset },
            ScoreField::Zero { .. } => EvalBase::Zero,
            ScoreField::Perturbed { .. } => unreachable!(),
        };
        let has_shift = shift.iter().any(|s| *s != 0.0);
        Ok(ScoreEval { base, shift, has_shift, t })
    }

    /// `s(t, x)` with input validation.
    pub fn forward(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score input".into()));
        }
        let mut out = vec![0.0; self.dim()];
        self.at(t)?.eval(x, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score output".into()));
        }
        Ok(out)
    }

    /// Exact `div_x s(t, x)`.
    pub fn divergence(&self, t: f64, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        self.at(t)?.divergence(x)
    }

    /// `d(upstream . s_theta(t, x)) / d theta`.
    pub fn param_gradient(&self, t: f64, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let ScoreField::Learned(l) = self else {
            return Err(Error::NoParameters);
        };
        if x.len() != l.dim() || upstream.len() != l.dim() {
            return Err(Error::DimensionMismatch { expected: l.dim(), got: x.len().min(upstream.len()) });
        }
        let at = l.at(t)?;
        let mut sc = l.scratch();
        let mut out = vec![0.0; l.dim()];
        l.eval(&at, x, &mut sc, &mut out);
        let mut grad = vec![0.0; l.mlp().n_params()];
        l.accumulate_grad(&at, &mut sc, upstream, &mut grad);
        Ok(grad)
    }
}

enum EvalBase<'a> {
    Mixture(GaussianMixture),
    Learned { net: &'a LearnedScore, at: LearnedAt, scratch: NetScratch },
    Linear { matrix: &'a [f64], offset: &'a [f64] },
    Zero,
}

/// A score field frozen at one time. Holds scratch buffers, so each thread
/// needs its own.
pub struct ScoreEval<'a> {
    base: EvalBase<'a>,
    shift: Vec<f64>,
    has_shift: bool,
    t: f64,
}

impl ScoreEval<'_> {
    pub fn time(&self) -> f64 {
        self.t
    }

    /// Writes `s(t, x)` into `out`. No validation; callers check finiteness.
    pub fn eval(&mut self, x: &[f64], out: &mut [f64]) {
        match &mut self.base {
            EvalBase::Mixture(g) => g.score_into_unchecked(x, out),
            EvalBase::Learned { net, at, scratch } => net.eval(at, x, scratch, out),
            EvalBase::Linear { matrix, offset } => {
                let d = offset.len();
                for (r, o) in out.iter_mut().enumerate() {
                    *o = offset[r] + matrix[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            EvalBase::Zero => out.iter_mut().for_each(|o| *o = 0.0),
        }
        if self.has_shift {
            out.iter_mut().zip(&self.shift).for_each(|(o, s)| *o += s);
        }
    }

    pub fn divergence(&mut self, x: &[f64]) -> Result<f64> {
        let d = self.shift.len();
        if d > DIVERGENCE_CAP {
            return Err(Error::DivergenceCap { dim: d, cap: DIVERGENCE_CAP });
        }
        match &mut self.base {
            EvalBase::Mixture(g) => {
                let jac = g.score_jacobian(x)?;
                Ok((0..d).map(|i| jac[i * d + i]).sum())
            }
            EvalBase::Learned { net, at, scratch } => net.divergence(at, x, scratch),
            EvalBase::Linear { matrix, .. } => Ok((0..d).map(|i| matrix[i * d + i]).sum()),
            EvalBase::Zero => Ok(0.0),
        }
    }

    /// `v^T (d s / d x) v`.
    pub fn projected_jacobian(&mut self, x: &[f64], v: &[f64]) -> Result<f64> {
        let d = self.shift.len();
        match &mut self.base {
            EvalBase::Mixture(g) => {
                let jac = g.score_jacobian(x)?;
                Ok((0..d).map(|i| v[i] * (0..d).map(|j| jac[i * d + j] * v[j]).sum::<f64>()).sum())
            }
            EvalBase::Learned { net, at, scratch } => Ok(net.projected_jacobian(at, x, v, scratch)),
            EvalBase::Linear { matrix, .. } => {
                Ok((0..d).map(|i| v[i] * (0..d).map(|j| matrix[i * d + j] * v[j]).sum::<f64>()).sum())
            }
            EvalBase::Zero => Ok(0.0),
        }
    }
}
