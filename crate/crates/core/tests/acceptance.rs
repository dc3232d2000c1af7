//! End-to-end acceptance suite. Runs every criterion, prints one line per
//! criterion and exits nonzero if any fails.

use std::time::{Duration, Instant};

use scorelab_core::analysis::{run_sweep, ExperimentReport};
use scorelab_core::consistency::{
    build_cd_pairs, build_ct_pairs, cd_loss, coupling_w2_empirical, coupling_w2_gaussian, coupling_w2_theory, ct_loss,
};
use scorelab_core::matching::{
    dsm_linear_coefficient, dsm_terms_at, esm_loss, esm_terms, ism_terms, noised, projection_terms, train,
};
use scorelab_core::metrics::sliced_w2;
use scorelab_core::rl::{self, Correction, Exploration, FinetuneConfig, Policy, Reward};
use scorelab_core::rng::{self, domain};
use scorelab_core::stats::{fit_line, variance, Estimate};
use scorelab_core::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

fn two_component() -> GaussianMixture {
    GaussianMixture::new(vec![0.3, 0.7], vec![vec![-1.5, -1.0], vec![1.0, 1.0]], vec![0.15, 0.25]).unwrap()
}

fn vp() -> DiffusionModel {
    DiffusionModel::new(&ModelSpec::vp(0.1, 20.0, 2, 1.0)).unwrap()
}

fn paired_diff(a: &[f64], b: &[f64]) -> Estimate {
    Estimate::from_samples(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>())
}

fn within_runtime(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < limit_s, format!("{s:.1} s (limit {limit_s} s)"))
}

const N_MARGINAL: usize = 50_000;

struct Marginals {
    target: Batch,
    baseline: f64,
    sde: Batch,
    elapsed: Duration,
}

fn marginals() -> Marginals {
    let m = vp();
    let g = two_component();
    let oracle = ScoreField::oracle(g.clone(), &m).unwrap();
    let target = g.sample(N_MARGINAL, 101).unwrap();
    let other = g.sample(N_MARGINAL, 102).unwrap();
    let baseline = sliced_w2(&target, &other, 128, 7).unwrap().value;
    let start = Instant::now();
    let sde = sampler::sample(&m, &oracle, &SamplerConfig::new(Scheme::ExactNoiseEm, 1000, 11), N_MARGINAL).unwrap();
    Marginals { target, baseline, sde: sde.samples, elapsed: start.elapsed() }
}

fn time_reversal(mg: &Marginals) -> Outcome {
    let w = sliced_w2(&mg.sde, &mg.target, 128, 7).unwrap();
    let (fast, rt) = within_runtime(mg.elapsed, 60.0);
    Outcome::new(
        w.value <= 3.0 * mg.baseline && fast,
        format!("sliced W2 {:.4} vs 3 x baseline {:.4}; sampling {rt}", w.value, 3.0 * mg.baseline),
    )
}

fn flow_marginals(mg: &Marginals) -> Outcome {
    let m = vp();
    let oracle = ScoreField::oracle(two_component(), &m).unwrap();
    let start = Instant::now();
    let ode = sampler::sample(&m, &oracle, &SamplerConfig::new(Scheme::HeunOde, 1000, 12), N_MARGINAL).unwrap();
    let (fast, rt) = within_runtime(start.elapsed(), 60.0);
    let vs_sde = sliced_w2(&ode.samples, &mg.sde, 128, 7).unwrap().value;
    let vs_target = sliced_w2(&ode.samples, &mg.target, 128, 7).unwrap().value;
    let limit = 3.0 * mg.baseline;
    Outcome::new(
        vs_sde <= limit && vs_target <= limit && fast,
        format!("sliced W2 vs SDE {vs_sde:.4}, vs target {vs_target:.4}, limit {limit:.4}; sampling {rt}"),
    )
}

fn random_fields(m: &DiffusionModel) -> Vec<ScoreField> {
    let mut r = rng::stream(5, domain::INIT, 0);
    let mut fields = Vec::new();
    for _ in 0..3 {
        let a: Vec<f64> = (0..4).map(|_| r.random_range(-1.5..1.0)).collect();
        let b: Vec<f64> = (0..2).map(|_| r.random_range(-0.5..0.5)).collect();
        fields.push(ScoreField::linear(a, b).unwrap());
    }
    for seed in [21, 22] {
        fields.push(ScoreField::Learned(
            LearnedScore::new(m, &[16, 16], TimeFeatures::Schedule, Parametrization::Raw, seed).unwrap(),
        ));
    }
    fields
}

fn constant_offsets() -> Outcome {
    let m = vp();
    let g = two_component();
    let oracle = ScoreField::oracle(g.clone(), &m).unwrap();
    let n = 100_000;
    let t = 0.3;
    let x0 = g.sample(n, 31).unwrap();
    let eps = GaussianMixture::gaussian(vec![0.0, 0.0], 1.0).unwrap().sample(n, 32).unwrap();
    let xt = noised(&m, t, &x0, &eps).unwrap();
    let offsets: Vec<(Vec<f64>, Vec<f64>)> = random_fields(&m)
        .iter()
        .map(|f| {
            let esm = esm_terms(f, &oracle, t, &xt).unwrap();
            let ism = ism_terms(f, t, &xt).unwrap();
            let dsm = dsm_terms_at(f, &m, t, &x0, &eps, Weight::Unit).unwrap();
            (
                ism.iter().zip(&esm).map(|(a, b)| a - b).collect(),
                dsm.iter().zip(&esm).map(|(a, b)| a - b).collect(),
            )
        })
        .collect();
    let mut worst: f64 = 0.0;
    for i in 0..offsets.len() {
        for j in i + 1..offsets.len() {
            for (a, b) in [(&offsets[i].0, &offsets[j].0), (&offsets[i].1, &offsets[j].1)] {
                let d = paired_diff(a, b);
                worst = worst.max(d.value.abs() / d.std_err.max(f64::MIN_POSITIVE));
            }
        }
    }
    let ism_off = Estimate::from_samples(&offsets[0].0).value;
    let dsm_off = Estimate::from_samples(&offsets[0].1).value;
    Outcome::new(
        worst <= 3.0,
        format!("ISM-ESM {ism_off:.4}, DSM-ESM {dsm_off:.4}; largest pairwise gap {worst:.2} s.e. over 5 fields"),
    )
}

fn ssm_unbiased() -> Outcome {
    let a = vec![0.8, -0.3, 0.5, 0.2, -1.1, 0.4, 0.0, 0.7, 0.6];
    let trace = 0.8 - 1.1 + 0.6;
    let field = ScoreField::linear(a, vec![0.1, 0.0, -0.2]).unwrap();
    let x = GaussianMixture::gaussian(vec![0.0; 3], 1.0).unwrap().sample(100_000, 41).unwrap();
    let one = Estimate::from_samples(&projection_terms(&field, 0.0, &x, 1, 42).unwrap());
    let unbiased = one.agrees_with(trace, 3.0);
    let ms = [1usize, 2, 4, 8, 16, 32];
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for &k in &ms {
        let terms = projection_terms(&field, 0.0, &x, k, 43 + k as u64).unwrap();
        lx.push((k as f64).ln());
        ly.push(variance(&terms).ln());
    }
    let fit = fit_line(&lx, &ly);
    let slope_ok = (fit.slope + 1.0).abs() <= 0.2;
    Outcome::new(
        unbiased && slope_ok,
        format!(
            "projection mean {:.4} +- {:.4} vs trace {trace:.4}; variance slope {:.3}",
            one.value, one.std_err, fit.slope
        ),
    )
}

fn dsm_recovers_score() -> Outcome {
    let m = DiffusionModel::new(&ModelSpec::ve_linear(1, 1.0)).unwrap();
    let (v, t) = (0.5, 0.5);
    let s2 = m.conditional_marginal(t).unwrap().variance();
    let truth = -1.0 / (v + s2);
    let law = GaussianMixture::gaussian(vec![0.0], v).unwrap();
    let x0 = law.sample(400_000, 51).unwrap();
    let eps = GaussianMixture::gaussian(vec![0.0], 1.0).unwrap().sample(400_000, 52).unwrap();
    let normal = dsm_linear_coefficient(&m, t, &x0, &eps).unwrap();
    let cfg = MatchingConfig {
        fixed_time: Some(t),
        batch_size: 256,
        iterations: 3000,
        learning_rate: 0.05,
        decay_after: 200,
        average_from: Some(1000),
        seed: 53,
        ..Default::default()
    };
    let net = ScoreField::Learned(LearnedScore::new(&m, &[], TimeFeatures::None, Parametrization::Raw, 54).unwrap());
    let trained = train(&cfg, net, &m, &Target::Mixture(law)).unwrap();
    let w = trained.field.as_learned().unwrap().params()[0];
    let ok = (normal - truth).abs() < 1e-2 && (w - truth).abs() < 1e-2 && (w - normal).abs() < 1e-2;
    Outcome::new(ok, format!("truth {truth:.5}, normal equations {normal:.5}, trained {w:.5}"))
}

fn tweedie_identity() -> Outcome {
    let mut r = rng::stream(61, domain::TARGET, 0);
    let three = GaussianMixture::new(
        vec![0.2, 0.5, 0.3],
        vec![vec![0.0, 2.0, -1.0], vec![1.0, -1.0, 0.5], vec![-2.0, 0.0, 0.0]],
        vec![0.1, 0.4, 0.9],
    )
    .unwrap();
    let cases = [
        (two_component(), ModelSpec::vp(0.1, 20.0, 2, 1.0)),
        (two_component(), ModelSpec::ve(0.01, 50.0, 2, 1.0)),
        (two_component(), ModelSpec::sub_vp(0.1, 20.0, 2, 1.0)),
        (three.clone(), ModelSpec::vp(0.1, 20.0, 3, 1.0)),
        (three, ModelSpec::ou(1.0, 0.5, 2.0f64.sqrt(), 3, 1.0)),
    ];
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (g, spec) in &cases {
        let m = DiffusionModel::new(spec).unwrap();
        let oracle = ScoreField::oracle(g.clone(), &m).unwrap();
        for _ in 0..200 {
            let t = r.random_range(0.01..1.0);
            let x: Vec<f64> = (0..g.dim())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    2.0 * z
                })
                .collect();
            let s2 = m.conditional_marginal(t).unwrap().variance();
            let s = oracle.forward(t, &x).unwrap();
            let pm = posterior_mean(g, &m, t, &x).unwrap();
            for ((p, xi), si) in pm.iter().zip(&x).zip(&s) {
                worst = worst.max((p - (xi + s2 * si)).abs());
            }
            count += 1;
        }
    }
    Outcome::new(worst <= 1e-9, format!("max |posterior mean - (x + sigma^2 s)| = {worst:.2e} over {count} points"))
}

fn consistency_coupling() -> Outcome {
    let (t, delta, d) = (1.0, 0.1, 2);
    let theory = coupling_w2_theory(t, delta, d).unwrap();
    let gauss = coupling_w2_gaussian(t, delta, d).unwrap();
    let m = DiffusionModel::new(&ModelSpec::ve_linear(d, 1.0)).unwrap();
    let g = GaussianMixture::dirac(vec![0.0; d]).unwrap();
    let f = ScoreField::oracle(g.clone(), &m).unwrap();
    let x0 = g.sample(100_000, 71).unwrap();
    let cd = build_cd_pairs(&m, &f, &x0, t, delta, 72).unwrap();
    let ct = build_ct_pairs(&m, &x0, t, delta, 72).unwrap();
    let emp = coupling_w2_empirical(&cd, &ct).unwrap();
    let rel = (emp - theory).abs() / theory;
    let id = Flow::Identity { dim: d };
    let mut ordered = true;
    for delta in [0.05, 0.1, 0.2, 0.4, 0.8] {
        let closed_cd = d as f64 * delta * delta;
        let closed_ct = d as f64 * (t * t + (t - delta) * (t - delta));
        let cdl = cd_loss(&id, &id, &build_cd_pairs(&m, &f, &x0, t, delta, 73).unwrap(), &m, Weight::Unit).unwrap();
        let ctl = ct_loss(&id, &id, &build_ct_pairs(&m, &x0, t, delta, 74).unwrap(), &m, Weight::Unit).unwrap();
        ordered &= closed_cd < closed_ct && cdl.value < ctl.value;
    }
    let ok = (theory - gauss).abs() <= 1e-9 && rel <= 0.05 && ordered;
    Outcome::new(
        ok,
        format!(
            "theory {theory:.6}, Gaussian formula {gauss:.6}, empirical {emp:.5} ({:.2}% off); CD < CT at all deltas: {ordered}",
            100.0 * rel
        ),
    )
}

fn sweep_outcome(report: &ExperimentReport, elapsed: Duration, limit_s: Option<f64>) -> Outcome {
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let (fast, rt) = match limit_s {
        Some(l) => within_runtime(elapsed, l),
        None => (true, format!("{:.1} s", elapsed.as_secs_f64())),
    };
    let mut detail = format!("{}/{} checks; {rt}", report.checks.len() - failed.len(), report.checks.len());
    if let Some(fit) = &report.fit {
        detail.push_str(&format!("; slope {:.3} +- {:.3}", fit.slope, fit.slope_std_err));
    }
    if !failed.is_empty() {
        detail.push_str(&format!("; failed: {}", failed.join(" | ")));
    }
    Outcome::new(report.passed() && fast && !report.checks.is_empty(), detail)
}

fn sweep(experiment: Experiment, seed: u64, limit_s: Option<f64>) -> Outcome {
    let start = Instant::now();
    let report = run_sweep(&SweepSpec::new(experiment, seed)).unwrap();
    sweep_outcome(&report, start.elapsed(), limit_s)
}

fn rl_finetuning() -> Outcome {
    let start = Instant::now();
    let m = DiffusionModel::new(&ModelSpec::ou(1.0, 0.0, 2.0f64.sqrt(), 1, 2.0)).unwrap();
    let cfg = FinetuneConfig {
        iterations: 600,
        learning_rate: 0.05,
        eval_every: 50,
        average_from: Some(100),
        t_floor: Some(0.0),
        ..Default::default()
    };
    let seeds = 10;
    let mut means = Vec::new();
    let mut traces: Vec<Vec<Estimate>> = Vec::new();
    for s in 0..seeds {
        let pre = ScoreField::oracle(GaussianMixture::gaussian(vec![0.0], 1.0).unwrap(), &m).unwrap();
        let mut p = Policy::new(
            &m,
            pre,
            Correction::Affine { decay: 1.0 },
            Exploration::Constant { sigma: 0.5 },
            1.0,
            Reward::quadratic(vec![2.0]),
        )
        .unwrap();
        let report = rl::finetune(&FinetuneConfig { seed: 1000 + s, ..cfg.clone() }, &mut p, &m).unwrap();
        traces.push(report.checkpoints.iter().map(|c| c.objective).collect());
        let batch = rl::sample(&p, &m, 20_000, &cfg.grid(&m).unwrap(), 5000 + s).unwrap();
        means.push(batch.samples.mean()[0]);
    }
    let k = traces[0].len();
    let avg: Vec<(f64, f64)> = (0..k)
        .map(|j| {
            let v = traces.iter().map(|t| t[j].value).sum::<f64>() / seeds as f64;
            let se = traces.iter().map(|t| t[j].std_err.powi(2)).sum::<f64>().sqrt() / seeds as f64;
            (v, se)
        })
        .collect();
    let monotone = avg.windows(2).all(|w| w[1].0 >= w[0].0 - 3.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt());
    let worst = means.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
    let mean = means.iter().sum::<f64>() / seeds as f64;
    let (fast, rt) = within_runtime(start.elapsed(), 120.0);
    Outcome::new(
        worst <= 0.1 && monotone && fast,
        format!(
            "terminal mean {mean:.4} (worst seed off by {worst:.4}) after {} steps; objective {:.3} -> {:.3}, monotone: {monotone}; {rt}",
            cfg.iterations,
            avg[0].0,
            avg[k - 1].0
        ),
    )
}

fn weighted_esm(field: &ScoreField, oracle: &ScoreField, g: &GaussianMixture, m: &DiffusionModel) -> f64 {
    let k = 20;
    let floor = 1e-3;
    (0..k)
        .map(|i| {
            let t = floor + (1.0 - floor) * (i as f64 + 0.5) / k as f64;
            let x = g.evolve(m, t).unwrap().sample(4000, 900 + i as u64).unwrap();
            m.conditional_marginal(t).unwrap().variance() * esm_loss(field, oracle, t, &x).unwrap().value
        })
        .sum::<f64>()
        / k as f64
}

fn learned_pipeline() -> Outcome {
    let start = Instant::now();
    let m = vp();
    let g = two_component();
    let oracle = ScoreField::oracle(g.clone(), &m).unwrap();
    let net = ScoreField::Learned(LearnedScore::new(&m, &[64, 64], TimeFeatures::Schedule, Parametrization::Raw, 81).unwrap());
    let before = weighted_esm(&net, &oracle, &g, &m);
    let cfg = MatchingConfig {
        optimizer: Optimizer::Adam,
        learning_rate: 1e-3,
        batch_size: 128,
        iterations: 20_000,
        decay_after: 10_000,
        average_from: Some(10_000),
        seed: 82,
        ..Default::default()
    };
    let trained = train(&cfg, net, &m, &Target::Mixture(g.clone())).unwrap();
    let after = weighted_esm(&trained.field, &oracle, &g, &m);
    let n = 10_000;
    let gen = sampler::sample(&m, &trained.field, &SamplerConfig::new(Scheme::ExactNoiseEm, 500, 83), n).unwrap();
    let w = sliced_w2(&gen.samples, &g.sample(n, 84).unwrap(), 128, 85).unwrap();
    let (fast, rt) = within_runtime(start.elapsed(), 300.0);
    Outcome::new(
        before >= 10.0 * after && w.value <= 0.1 && fast,
        format!(
            "weighted ESM {before:.4} -> {after:.5} ({:.0}x); sliced W2 {:.4} +- {:.4}; {rt}",
            before / after,
            w.value,
            w.mc_error
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |i: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let out = f();
        println!("[{}] criterion {i:>2} {name}: {}", if out.passed { "PASS" } else { "FAIL" }, out.detail);
        results.push((i, name, out));
    };
    let mg = marginals();
    record(1, "time-reversal fidelity", &|| time_reversal(&mg));
    record(2, "probability-flow marginals", &|| flow_marginals(&mg));
    record(3, "ISM/DSM constant offsets", &constant_offsets);
    record(4, "sliced projection unbiasedness", &ssm_unbiased);
    record(5, "DSM minimizer", &dsm_recovers_score);
    record(6, "Tweedie identity", &tweedie_identity);
    record(7, "consistency coupling distance", &consistency_coupling);
    record(8, "discretization order", &|| sweep(Experiment::StepOrder, 0, Some(120.0)));
    record(9, "TV bound", &|| sweep(Experiment::TvBound, 0, None));
    record(10, "W2 bound", &|| sweep(Experiment::W2Bound, 0, None));
    record(11, "exp-family estimator", &|| sweep(Experiment::ExpFamilyRate, 0, None));
    record(12, "RL fine-tuning", &rl_finetuning);
    record(13, "learned pipeline", &learned_pipeline);
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
