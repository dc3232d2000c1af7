//! Distribution distances and evaluators for the convergence bounds.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::quadrature;
use crate::rng::{self, domain};
use crate::sde::{DiffusionModel, ModelKind};
use crate::stats;

const FRAC_2_PI_SQRT: f64 = 0.797_884_560_802_865_4;

/// A measured distance with its Monte-Carlo error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub value: f64,
    pub mc_error: f64,
    pub n_used: usize,
}

impl MetricResult {
    fn new(name: &str, value: f64, mc_error: f64, n_used: usize) -> Result<Self> {
        if !value.is_finite() || !(mc_error >= 0.0) {
            return Err(Error::NonFinite(format!("metric {name}: value {value}, error {mc_error}")));
        }
        Ok(Self { name: name.to_string(), value, mc_error, n_used })
    }
}

/// W2 between `N(m1, v1 I)` and `N(m2, v2 I)`.
pub fn w2_gaussian(m1: &[f64], v1: f64, m2: &[f64], v2: f64) -> Result<f64> {
    if m1.len() != m2.len() {
        return Err(Error::DimensionMismatch { expected: m1.len(), got: m2.len() });
    }
    if !(v1 >= 0.0 && v2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("variances must be nonnegative, got {v1} and {v2}")));
    }
    let d = m1.len() as f64;
    let dm: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((dm + d * (v1.sqrt() - v2.sqrt()).powi(2)).sqrt())
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    // eigenvalues within rounding of zero are zero: their square roots would
    // otherwise contribute errors of order sqrt(eps)
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = m.nrows() as f64 * f64::EPSILON * top;
    let vals = eig.eigenvalues.map(|v| if v > tol { v.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// W2 between general Gaussians; covariances are row-major `d x d`.
pub fn w2_gaussian_full(m1: &[f64], c1: &[f64], m2: &[f64], c2: &[f64]) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d || c1.len() != d * d || c2.len() != d * d {
        return Err(Error::DimensionMismatch { expected: d, got: m2.len() });
    }
    let a = DMatrix::from_row_slice(d, d, c1);
    let b = DMatrix::from_row_slice(d, d, c2);
    let ra = psd_sqrt(&a);
    let cross = psd_sqrt(&(&ra * &b * &ra));
    let tr = (a.trace() + b.trace() - 2.0 * cross.trace()).max(0.0);
    let dm: f64 = m1.iter().zip(m2).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((dm + tr).sqrt())
}

/// W2 between the Gaussian fitted to `batch` and `N(mean, var I)`. The
/// reported error is the null noise level `sqrt(1.5 tr(C) / n)` of the
/// fitted-moment estimator.
pub fn w2_fitted_gaussian(batch: &Batch, mean: &[f64], var: f64) -> Result<MetricResult> {
    if batch.is_empty() {
        return Err(Error::EmptySample);
    }
    let d = batch.dim();
    let mut target_cov = vec![0.0; d * d];
    (0..d).for_each(|i| target_cov[i * d + i] = var);
    let cov = batch.covariance();
    let v = w2_gaussian_full(&batch.mean(), &cov, mean, &target_cov)?;
    let tr: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    MetricResult::new("w2_fitted_gaussian", v, (1.5 * tr / batch.len() as f64).sqrt(), batch.len())
}

/// 1D W2 between two sorted samples under the quantile coupling.
pub fn w2_sorted_1d(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == m {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        return (s / n as f64).sqrt();
    }
    // merge the quantile breakpoints i/n and j/m
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        acc += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc.max(0.0).sqrt()
}

/// Sliced W2: mean over `n_proj` random unit directions of the 1D W2 of the
/// projections. The error is the standard error across directions.
pub fn sliced_w2(a: &Batch, b: &Batch, n_proj: usize, seed: u64) -> Result<MetricResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    if n_proj == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let d = a.dim();
    let mut rng = rng::stream(seed, domain::PROJECTION, 0);
    let dirs: Vec<Vec<f64>> = (0..n_proj)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = stats::norm_sq(&v).sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect();
    let project = |batch: &Batch, dir: &[f64]| {
        let mut p: Vec<f64> = batch.rows().map(|r| stats::dot(r, dir)).collect();
        p.sort_unstable_by(f64::total_cmp);
        p
    };
    let values: Vec<f64> = dirs.par_iter().map(|dir| w2_sorted_1d(&project(a, dir), &project(b, dir))).collect();
    let est = stats::Estimate::from_samples(&values);
    MetricResult::new("sliced_w2", est.value, est.std_err, a.len().min(b.len()))
}

struct Axis {
    lo: f64,
    width: f64,
    bins: usize,
}

impl Axis {
    fn covering(cols: &[&[f64]], bins: usize) -> Self {
        let all = cols.iter().flat_map(|c| c.iter().copied());
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
        for x in all {
            lo = lo.min(x);
            hi = hi.max(x);
            s += x;
            s2 += x * x;
            n += 1.0;
        }
        let sd = (s2 / n - (s / n).powi(2)).max(0.0).sqrt();
        let pad = if sd > 0.0 { 3.0 * sd } else { 1.0 };
        let (lo, hi) = (lo - pad, hi + pad);
        Self { lo, width: (hi - lo) / bins as f64, bins }
    }

    fn index(&self, x: f64) -> usize {
        (((x - self.lo) / self.width).floor().max(0.0) as usize).min(self.bins - 1)
    }

    fn edge(&self, k: usize) -> f64 {
        self.lo + self.width * k as f64
    }
}

fn histogram(batch: &Batch, axes: &[Axis]) -> Vec<f64> {
    let cells: usize = axes.iter().map(|a| a.bins).product();
    let mut h = vec![0.0; cells];
    for r in batch.rows() {
        let mut idx = 0;
        for (x, ax) in r.iter().zip(axes) {
            idx = idx * ax.bins + ax.index(*x);
        }
        h[idx] += 1.0;
    }
    let n = batch.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Histogram total variation `1/2 sum |p - q|` on a shared grid with `bins`
/// cells per axis (`d <= 2`). The error is the null noise floor
/// `1/2 sum sqrt(2/pi) sqrt(p(1-p)/n1 + q(1-q)/n2)`: the expected value of the
/// estimator when both batches come from one law.
pub fn tv_histogram(a: &Batch, b: &Batch, bins: usize) -> Result<MetricResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    if a.dim() > 2 {
        return Err(Error::InvalidArgument(format!("histogram TV needs d <= 2, got d = {}", a.dim())));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let axes: Vec<Axis> = (0..a.dim())
        .map(|j| {
            let (ca, cb) = (a.column(j), b.column(j));
            Axis::covering(&[&ca, &cb], bins)
        })
        .collect();
    let (p, q) = (histogram(a, &axes), histogram(b, &axes));
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mut tv = 0.0;
    let mut floor = 0.0;
    for (pi, qi) in p.iter().zip(&q) {
        tv += (pi - qi).abs();
        floor += FRAC_2_PI_SQRT * (pi * (1.0 - pi) / n1 + qi * (1.0 - qi) / n2).sqrt();
    }
    MetricResult::new("tv_histogram", 0.5 * tv, 0.5 * floor, a.len().min(b.len()))
}

/// Histogram TV between a 1D batch and a law given by its CDF; mass outside
/// the grid counts fully. The error is the one-sample noise floor.
pub fn tv_histogram_vs_cdf(batch: &Batch, cdf: impl Fn(f64) -> f64, bins: usize) -> Result<MetricResult> {
    if batch.is_empty() {
        return Err(Error::EmptySample);
    }
    if batch.dim() != 1 {
        return Err(Error::InvalidArgument(format!("analytic histogram TV needs d = 1, got d = {}", batch.dim())));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let axis = Axis::covering(&[batch.as_slice()], bins);
    let p = histogram(batch, std::slice::from_ref(&axis));
    let n = batch.len() as f64;
    let mut tv = cdf(axis.edge(0)) + (1.0 - cdf(axis.edge(bins)));
    let mut floor = 0.0;
    for (k, pk) in p.iter().enumerate() {
        let q = cdf(axis.edge(k + 1)) - cdf(axis.edge(k));
        tv += (pk - q).abs();
        floor += FRAC_2_PI_SQRT * (q * (1.0 - q) / n).sqrt();
    }
    MetricResult::new("tv_histogram", 0.5 * tv, 0.5 * floor, batch.len())
}

/// Exact TV between two 1D Gaussians by quadrature.
pub fn tv_gaussian_1d(m1: f64, v1: f64, m2: f64, v2: f64) -> Result<f64> {
    if !(v1 > 0.0 && v2 > 0.0) {
        return Err(Error::InvalidArgument("variances must be positive".into()));
    }
    let pdf = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let s = v1.sqrt().max(v2.sqrt());
    let (lo, hi) = (m1.min(m2) - 12.0 * s, m1.max(m2) + 12.0 * s);
    Ok(0.5 * quadrature::integrate(|x| (pdf(x, m1, v1) - pdf(x, m2, v2)).abs(), lo, hi, 1e-12))
}

/// `KL(N(m1, v1 I) || N(m2, v2 I))`.
pub fn kl_gaussian_isotropic(m1: &[f64], v1: f64, m2: &[f64], v2: f64) -> Result<f64> {
    if m1.len() != m2.len() {
        return Err(Error::DimensionMismatch { expected: m1.len(), got: m2.len() });
    }
    if !(v1 > 0.0 && v2 > 0.0) {
        return Err(Error::InvalidArgument("variances must be positive".into()));
    }
    let d = m1.len() as f64;
    let dm: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * (d * v1 / v2 + dm / v2 - d + d * (v2 / v1).ln()))
}

/// Total-variation bound for VP:
/// `exp(-1/2 int_0^T beta) sqrt(E|x|^2 / 2) + eps sqrt(T / 2)`.
pub fn vp_tv_bound(model: &DiffusionModel, second_moment: f64, eps: f64, horizon: f64) -> Result<f64> {
    if model.kind() != ModelKind::Vp {
        return Err(Error::UnsupportedModel { op: "vp_tv_bound", kind: model.kind().to_string() });
    }
    if !(second_moment >= 0.0 && eps >= 0.0 && horizon >= 0.0) {
        return Err(Error::InvalidArgument("second moment, eps and T must be nonnegative".into()));
    }
    let b = model.beta_integral(horizon)?;
    Ok((-0.5 * b).exp() * (second_moment / 2.0).sqrt() + eps * (horizon / 2.0).sqrt())
}

fn check_h(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("h must be positive, got {h}")));
    }
    Ok(())
}

/// `sqrt(prior_w2^2 e^{u(T)} + eps^2/(2h) int_0^T g^2(t) e^{u(T)-u(T-t)} dt)`.
fn coupling_bound(
    model: &DiffusionModel,
    rate: &dyn Fn(f64) -> f64,
    h: f64,
    eps: f64,
    prior_w2: f64,
    tol: f64,
) -> Result<(f64, f64, f64)> {
    check_h(h)?;
    if !(eps >= 0.0 && prior_w2 >= 0.0) {
        return Err(Error::InvalidArgument("eps and prior_w2 must be nonnegative".into()));
    }
    let big_t = model.horizon();
    // antiderivative R(s) = int_0^s rate; u(t) = R(T) - R(T - t)
    let n = 2048;
    let ds = big_t / n as f64;
    let mut cum = vec![0.0; n + 1];
    for k in 0..n {
        let a = k as f64 * ds;
        cum[k + 1] = cum[k] + quadrature::integrate(rate, a, a + ds, tol);
    }
    let big_r = |s: f64| {
        let k = ((s / ds).floor() as usize).min(n - 1);
        let a = k as f64 * ds;
        cum[k] + if s > a { quadrature::integrate(rate, a, s, tol) } else { 0.0 }
    };
    let r_t = cum[n];
    let u_t = r_t;
    let noise = prior_w2 * prior_w2 * u_t.exp();
    let score = if eps == 0.0 {
        0.0
    } else {
        // e^{u(T) - u(T - t)} = e^{R(t)}; write the integral over t directly
        eps * eps / (2.0 * h) * quadrature::integrate(|t| model.diffusion_sq(t) * big_r(t).exp(), 0.0, big_t, tol)
    };
    Ok(((noise + score).sqrt(), noise, score))
}

/// Coupling bound on `W2(p_data, law of Y_T)` for a drift with contraction
/// rate `r_f` and a score field whose one-sided Lipschitz constant is `l`.
pub fn w2_bound(model: &DiffusionModel, r_f: impl Fn(f64) -> f64, l: f64, h: f64, eps: f64, prior_w2: f64) -> Result<f64> {
    let rate = |s: f64| -2.0 * r_f(s) + (2.0 * l + 2.0 * h) * model.diffusion_sq(s);
    Ok(coupling_bound(model, &rate, h, eps, prior_w2, 1e-11)?.0)
}

/// Smallest [`w2_bound`] over the supplied `h` values (each is a valid
/// bound). Returns `(bound, h)`.
pub fn w2_bound_best(
    model: &DiffusionModel,
    r_f: impl Fn(f64) -> f64 + Copy,
    l: f64,
    hs: &[f64],
    eps: f64,
    prior_w2: f64,
) -> Result<(f64, f64)> {
    let mut best = (f64::INFINITY, f64::NAN);
    for &h in hs {
        let b = w2_bound(model, r_f, l, h, eps, prior_w2)?;
        if b < best.0 {
            best = (b, h);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::InvalidArgument("no finite bound over the supplied h values".into()));
    }
    Ok(best)
}

/// Parts of the VP bound for a `kappa`-strongly log-concave target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpW2Bound {
    pub bound: f64,
    pub noise_term: f64,
    pub score_term: f64,
}

/// VP bound with the log-concavity-refined exponent
/// `u_VP(t) = int_{T-t}^T beta(s) (1 + 2h - 2 kappa / (e^{-B(s)} + kappa (1 - e^{-B(s)}))) ds`
/// and `W2^2(p_T, N(0, I)) <= e^{-B(T)} E|x|^2 + d/4 e^{-2 B(T)}`.
pub fn vp_log_concave_w2_bound(model: &DiffusionModel, kappa: f64, h: f64, eps: f64, second_moment: f64) -> Result<VpW2Bound> {
    if model.kind() != ModelKind::Vp {
        return Err(Error::UnsupportedModel { op: "vp_log_concave_w2_bound", kind: model.kind().to_string() });
    }
    if !(kappa > 0.0 && second_moment >= 0.0) {
        return Err(Error::InvalidArgument("need kappa > 0 and a nonnegative second moment".into()));
    }
    let big_t = model.horizon();
    let b_t = model.beta_integral(big_t)?;
    let prior_w2_sq = (-b_t).exp() * second_moment + model.dim() as f64 / 4.0 * (-2.0 * b_t).exp();
    let rate = |s: f64| {
        let b = model.beta(s).expect("beta schedule");
        let e = (-model.beta_integral(s).expect("in range")).exp();
        b * (1.0 + 2.0 * h - 2.0 * kappa / (e + kappa * (1.0 - e)))
    };
    let (bound, noise_term, score_term) = coupling_bound(model, &rate, h, eps, prior_w2_sq.sqrt(), 1e-11)?;
    Ok(VpW2Bound { bound, noise_term, score_term })
}
