//! The `scorelab` command line: configuration, dispatch and run persistence.
//!
//! Every command resolves one [`RunConfig`], runs entirely in memory and only
//! then writes its outputs plus a `manifest.toml` into the run directory.

pub mod config;
pub mod persist;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use toml::Value;

use scorelab_core::analysis::{self, ExperimentReport};
use scorelab_core::metrics::{sliced_w2, tv_histogram};
use scorelab_core::rng::{child_seed, domain};
use scorelab_core::{
    consistency, matching, rl, sampler, Batch, DiffusionModel, Experiment, Flow, FlowNet, LearnedScore,
    MetricResult, Policy, Reward, SampleBatch, ScoreField, SweepSpec, Target,
};

pub use config::{parse_config, parse_override, RunConfig, ScoreBackend};
pub use persist::{Outputs, RunManifest};

/// Environment variable naming the parent of default run directories.
pub const OUT_ENV: &str = "SCORELAB_OUT";

#[derive(Debug, Parser)]
#[command(name = "scorelab", version, about = "Score-based diffusion experiments on toy targets")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; module seeds follow it unless set explicitly.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory. Defaults to `$SCORELAB_OUT/<command>-<hash>` or
    /// `scorelab-runs/<command>-<hash>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Configuration override `key=value` (dotted key, TOML value).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train a score network by score matching.
    Train {
        /// esm | ism | ssm | dsm
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Generate samples with a reverse-time sampler.
    Sample {
        /// `oracle` or `learned:<path>`.
        #[arg(long)]
        score: Option<String>,
        /// exact_noise_em | euler_maruyama | ei_sde | ei_ode | heun_ode | predictor_corrector
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(short = 'n', long = "count")]
        count: Option<usize>,
        /// Sample CSV path (default `samples.csv` in the run directory).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare a sample CSV with another one or with the configured target.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        /// Second sample CSV; the configured target is used when absent.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run bound and rate sweeps.
    Sweep {
        /// Experiment name or `all`; adds a default sweep per use.
        #[arg(long)]
        experiment: Vec<String>,
        /// Exit with an error if any check fails.
        #[arg(long)]
        strict: bool,
    },
    /// Train a consistency model and draw one-step samples.
    Consistency {
        /// cd | ct | continuous-cd | continuous-ct
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        delta: Option<f64>,
        /// Lower end of the time range.
        #[arg(long)]
        t_min: Option<f64>,
        /// Upper end of the time range (the model horizon).
        #[arg(long)]
        t_max: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// `oracle` or `learned:<path>`; used by the distillation modes.
        #[arg(long)]
        score: Option<String>,
        #[arg(long)]
        loss_output: Option<PathBuf>,
        #[arg(long)]
        samples_output: Option<PathBuf>,
    },
    /// Fine-tune a pretrained sampler against a quadratic reward.
    Finetune {
        /// `oracle` or `learned:<path>`.
        #[arg(long)]
        score: Option<String>,
        /// Reward centre `y*`, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        center: Option<Vec<f64>>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        beta_pen: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Final sample CSV path (default `samples.csv` in the run directory).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Consistency { .. } => "consistency",
            Command::Finetune { .. } => "finetune",
        }
    }

    /// Flags expressed as configuration overrides.
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut v = Vec::new();
        let mut put = |k: &str, val: Value| v.push((k.to_string(), val));
        let s = |x: &str| Value::String(x.replace('-', "_"));
        let u = |x: usize| Value::Integer(x as i64);
        match self {
            Command::Train { objective, iterations } => {
                if let Some(o) = objective.as_deref() {
                    put("train.objective", s(o));
                }
                if let Some(n) = *iterations {
                    put("train.iterations", u(n));
                }
            }
            Command::Sample { score, scheme, steps, count, .. } => {
                if let Some(x) = score.as_ref() {
                    put("score", Value::String(x.clone()));
                }
                if let Some(x) = scheme.as_deref() {
                    put("sampler.scheme", s(x));
                }
                if let Some(n) = *steps {
                    put("sampler.steps", u(n));
                }
                if let Some(n) = *count {
                    put("samples", u(n));
                }
            }
            Command::Eval { .. } | Command::Sweep { .. } => {}
            Command::Consistency { mode, delta, t_min, t_max, iterations, score, .. } => {
                if let Some(x) = mode.as_deref() {
                    put("consistency.mode", s(x));
                }
                if let Some(x) = *delta {
                    put("consistency.delta", Value::Float(x));
                }
                if let Some(x) = *t_min {
                    put("flow.t_floor", Value::Float(x));
                }
                if let Some(x) = *t_max {
                    put("model.horizon", Value::Float(x));
                }
                if let Some(n) = *iterations {
                    put("consistency.iterations", u(n));
                }
                if let Some(x) = score.as_ref() {
                    put("score", Value::String(x.clone()));
                }
            }
            Command::Finetune { score, center, scale, beta_pen, iterations, .. } => {
                if let Some(x) = score.as_ref() {
                    put("score", Value::String(x.clone()));
                }
                if let Some(c) = center.as_ref() {
                    put("policy.center", Value::Array(c.iter().map(|x| Value::Float(*x)).collect()));
                }
                if let Some(x) = *scale {
                    put("policy.scale", Value::Float(x));
                }
                if let Some(x) = *beta_pen {
                    put("policy.beta_pen", Value::Float(x));
                }
                if let Some(n) = *iterations {
                    put("finetune.iterations", u(n));
                }
            }
        }
        v
    }
}

/// Resolves the configuration of `cli` without running anything.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for raw in &cli.global.set {
        overrides.push(parse_override(raw)?);
    }
    overrides.extend(cli.command.overrides());
    if let Some(seed) = cli.global.seed {
        overrides.push(("seed".into(), Value::Integer(seed as i64)));
    }
    let mut cfg = parse_config(cli.global.config.as_deref(), &overrides)?;
    if let Command::Sweep { experiment, .. } = &cli.command {
        for name in experiment {
            for e in experiments(name)? {
                cfg.sweep.push(SweepSpec::new(e, cfg.seed));
            }
        }
    }
    Ok(cfg)
}

fn experiments(name: &str) -> Result<Vec<Experiment>> {
    use Experiment::*;
    if name == "all" {
        return Ok(vec![TvBound, W2Bound, StepOrder, ScoreError, ExpFamilyRate, ConsistencyCoupling]);
    }
    let e: Experiment = Value::String(name.replace('-', "_"))
        .try_into()
        .map_err(|_| anyhow!("unknown experiment `{name}`"))?;
    Ok(vec![e])
}

/// Inputs read by a command, hashed into the manifest.
#[derive(Debug, Default)]
struct Inputs(Vec<persist::InputFile>);

impl Inputs {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.0.push(persist::InputFile { path: path.display().to_string(), sha256: persist::sha256_hex(&bytes) });
        Ok(bytes)
    }
}

/// Resolves, runs and persists one command. Nothing is written unless the
/// command succeeds.
pub fn run(cli: &Cli) -> Result<RunManifest> {
    let cfg = resolve(cli)?;
    let started = persist::now();
    let mut inputs = Inputs::default();
    let mut outputs = Outputs::default();
    let mut log = Vec::new();
    let failed = match &cli.command {
        Command::Train { .. } => train(&cfg, &mut outputs, &mut log).map(|_| false),
        Command::Sample { output, .. } => sample(&cfg, output.as_deref(), &mut inputs, &mut outputs, &mut log).map(|_| false),
        Command::Eval { samples, reference } => eval(&cfg, samples, reference.as_deref(), &mut inputs, &mut outputs, &mut log).map(|_| false),
        Command::Sweep { strict, .. } => sweep(&cfg, *strict, &mut outputs, &mut log),
        Command::Consistency { loss_output, samples_output, .. } => {
            consistency_cmd(&cfg, loss_output.as_deref(), samples_output.as_deref(), &mut inputs, &mut outputs, &mut log)
                .map(|_| false)
        }
        Command::Finetune { output, .. } => finetune(&cfg, output.as_deref(), &mut inputs, &mut outputs, &mut log).map(|_| false),
    }?;
    let command = cli.command.name();
    let hash = persist::config_hash(command, &cfg, &inputs.0)?;
    let dir = match &cli.global.out {
        Some(d) => d.clone(),
        None => {
            let base = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("scorelab-runs"));
            base.join(format!("{command}-{}", &hash[..12]))
        }
    };
    let manifest = RunManifest {
        command: command.into(),
        seed: cfg.seed,
        config_hash: hash,
        started,
        finished: started,
        inputs: inputs.0,
        outputs: Vec::new(),
        config: cfg,
    };
    let manifest = outputs.commit(&dir, manifest)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(&log)?;
    writeln!(stdout, "wrote {} files to {}", manifest.outputs.len() + 1, dir.display())?;
    if failed {
        bail!("sweep checks failed (outputs were written to {})", dir.display());
    }
    Ok(manifest)
}

fn model_and_target(cfg: &RunConfig) -> Result<(DiffusionModel, Target)> {
    let model = DiffusionModel::new(&cfg.model).context("model")?;
    let target = cfg.target.build().context("target")?;
    if target.dim() != model.dim() {
        bail!("target: dimension {} does not match model dimension {}", target.dim(), model.dim());
    }
    Ok((model, target))
}

fn oracle(cfg: &RunConfig, model: &DiffusionModel, target: &Target) -> Result<ScoreField> {
    let mixture = match target {
        Target::Mixture(g) => g.clone(),
        Target::SwissRoll(s) => s.mixture(cfg.oracle_components).context("target")?,
    };
    ScoreField::oracle(mixture, model).context("score")
}

fn score_field(cfg: &RunConfig, model: &DiffusionModel, target: &Target, inputs: &mut Inputs) -> Result<ScoreField> {
    match cfg.backend()? {
        ScoreBackend::Oracle => oracle(cfg, model, target),
        ScoreBackend::Learned(path) => {
            let bytes = inputs.read(Path::new(&path))?;
            let net = LearnedScore::load(bytes.as_slice(), model).with_context(|| format!("score: loading {path}"))?;
            Ok(ScoreField::Learned(net))
        }
    }
}

fn train(cfg: &RunConfig, out: &mut Outputs, log: &mut Vec<u8>) -> Result<()> {
    let (model, target) = model_and_target(cfg)?;
    let net = cfg.network.clone();
    let init = LearnedScore::new(&model, &net.hidden, net.features, net.parametrization, cfg.train.seed).context("score")?;
    let trained = matching::train(&cfg.train, ScoreField::Learned(init), &model, &target).context("matching")?;
    let learned = trained.field.as_learned().ok_or_else(|| anyhow!("matching: trained field is not a network"))?;
    out.write("score.bin", |w| learned.save(w))?;
    out.write("loss.csv", |w| matching::write_loss_trace(w, &trained.trace))?;
    if let Some(last) = trained.trace.last() {
        writeln!(log, "final loss {:.6e} after {} iterations", last.loss, trained.trace.len())?;
    }
    Ok(())
}

fn sample(cfg: &RunConfig, output: Option<&Path>, inputs: &mut Inputs, out: &mut Outputs, log: &mut Vec<u8>) -> Result<()> {
    let (model, target) = model_and_target(cfg)?;
    let field = score_field(cfg, &model, &target, inputs)?;
    let batch = sampler::sample(&model, &field, &cfg.sampler, cfg.samples).context("sampler")?;
    writeln!(log, "{} samples, scheme {}, mean {:?}", batch.len(), cfg.sampler.scheme, batch.samples.mean())?;
    out.write(output.unwrap_or(Path::new("samples.csv")), |w| batch.write_csv(w))
}

fn read_samples(path: &Path, inputs: &mut Inputs) -> Result<SampleBatch> {
    let bytes = inputs.read(path)?;
    SampleBatch::read_csv(bytes.as_slice()).with_context(|| format!("reading samples {}", path.display()))
}

fn eval(
    cfg: &RunConfig,
    samples: &Path,
    reference: Option<&Path>,
    inputs: &mut Inputs,
    out: &mut Outputs,
    log: &mut Vec<u8>,
) -> Result<()> {
    let a = read_samples(samples, inputs)?.samples;
    let ev = &cfg.eval;
    let mut rows: Vec<MetricResult> = Vec::new();
    let b: Batch = match reference {
        Some(p) => read_samples(p, inputs)?.samples,
        None => {
            let target = cfg.target.build().context("target")?;
            let n = if ev.reference == 0 { a.len() } else { ev.reference };
            let b = target.sample(n, child_seed(cfg.seed, domain::TARGET, 0)).context("target")?;
            let c = target.sample(n, child_seed(cfg.seed, domain::TARGET, 1)).context("target")?;
            let mut base = sliced_w2(&b, &c, ev.projections, cfg.seed).context("metrics")?;
            base.name = "sliced_w2_baseline".into();
            rows.push(base);
            b
        }
    };
    if a.dim() != b.dim() {
        bail!("metrics: sample dimension {} does not match reference dimension {}", a.dim(), b.dim());
    }
    rows.insert(0, sliced_w2(&a, &b, ev.projections, cfg.seed).context("metrics")?);
    if a.dim() <= 2 {
        rows.push(tv_histogram(&a, &b, ev.bins).context("metrics")?);
    }
    let mut csv = String::from("name,value,mc_error,n_used\n");
    for r in &rows {
        csv.push_str(&format!("{},{:e},{:e},{}\n", r.name, r.value, r.mc_error, r.n_used));
        writeln!(log, "{:<20} {:.6} +- {:.6}", r.name, r.value, r.mc_error)?;
    }
    out.add("metrics.csv", csv.into_bytes());
    Ok(())
}

/// Figure-ready CSVs of a report: one tidy `x,y,y_err,series` file per series,
/// named `<experiment>_<series>.csv`.
pub fn emit_plot_data(report: &ExperimentReport) -> Result<Vec<(String, Vec<u8>)>> {
    if report.rows.is_empty() {
        bail!("report for {} has no rows to plot", report.experiment.name());
    }
    let mut files = Vec::new();
    for series in report.series_names() {
        let mut buf = Vec::new();
        report.write_series_csv(series, &mut buf)?;
        files.push((format!("{}_{}.csv", report.experiment.name(), slug(series)), buf));
    }
    Ok(files)
}

fn slug(label: &str) -> String {
    let mut s = String::new();
    for c in label.chars() {
        if c.is_ascii_alphanumeric() || c == '.' {
            s.push(c);
        } else if !s.ends_with('_') {
            s.push('_');
        }
    }
    s.trim_matches('_').to_string()
}

fn sweep(cfg: &RunConfig, strict: bool, out: &mut Outputs, log: &mut Vec<u8>) -> Result<bool> {
    if cfg.sweep.is_empty() {
        bail!("sweep: nothing to run; add a [[sweep]] table or pass --experiment");
    }
    let mut summary = String::from("experiment,passed,checks_passed,checks_total\n");
    let mut all = true;
    writeln!(log, "{:<22} {:<6} {:>6}", "experiment", "result", "checks")?;
    for spec in &cfg.sweep {
        let name = spec.experiment.name();
        let report = analysis::run_sweep(spec).with_context(|| format!("analysis ({name})"))?;
        out.write(format!("{name}.csv"), |w| report.write_csv(w))?;
        out.write(format!("{name}_checks.csv"), |w| report.write_checks(w))?;
        for (file, bytes) in emit_plot_data(&report)? {
            out.add(Path::new("plots").join(file), bytes);
        }
        let ok = report.checks.iter().filter(|c| c.passed).count();
        let passed = report.passed();
        all &= passed;
        summary.push_str(&format!("{name},{passed},{ok},{}\n", report.checks.len()));
        writeln!(log, "{:<22} {:<6} {:>3}/{}", name, if passed { "pass" } else { "FAIL" }, ok, report.checks.len())?;
        for c in report.checks.iter().filter(|c| !c.passed) {
            writeln!(log, "    failed: {} ({})", c.name, c.detail)?;
        }
    }
    out.add("summary.csv", summary.into_bytes());
    Ok(!all && strict)
}

fn consistency_cmd(
    cfg: &RunConfig,
    loss_output: Option<&Path>,
    samples_output: Option<&Path>,
    inputs: &mut Inputs,
    out: &mut Outputs,
    log: &mut Vec<u8>,
) -> Result<()> {
    use scorelab_core::ConsistencyMode::*;
    let (model, target) = model_and_target(cfg)?;
    let field = match cfg.consistency.mode {
        Cd | ContinuousCd => Some(score_field(cfg, &model, &target, inputs)?),
        Ct | ContinuousCt => None,
    };
    let fc = &cfg.flow;
    let net = FlowNet::new(model.dim(), &fc.hidden, model.horizon(), fc.t_floor, fc.sigma_data, cfg.consistency.seed)
        .context("consistency")?;
    let trained = consistency::train_consistency(&cfg.consistency, net, &model, &target, field.as_ref())
        .context("consistency")?;
    let seed = child_seed(cfg.seed, domain::SAMPLER, 0);
    let batch = consistency::one_step_sample(&Flow::Net(trained.flow.clone()), &model, cfg.samples, seed)
        .context("consistency")?;
    out.write("flow.bin", |w| trained.flow.save(w))?;
    out.write(loss_output.unwrap_or(Path::new("loss.csv")), |w| matching::write_loss_trace(w, &trained.trace))?;
    out.write(samples_output.unwrap_or(Path::new("samples.csv")), |w| batch.write_csv(w))?;
    if let Some(last) = trained.trace.last() {
        writeln!(log, "final loss {:.6e}; {} one-step samples", last.loss, batch.len())?;
    }
    Ok(())
}

fn finetune(cfg: &RunConfig, output: Option<&Path>, inputs: &mut Inputs, out: &mut Outputs, log: &mut Vec<u8>) -> Result<()> {
    let (model, target) = model_and_target(cfg)?;
    let pretrained = score_field(cfg, &model, &target, inputs)?;
    let pc = &cfg.policy;
    let center = if pc.center.is_empty() { vec![0.0; model.dim()] } else { pc.center.clone() };
    let reward = Reward::Quadratic { center, scale: pc.scale };
    let mut policy = Policy::new(&model, pretrained, pc.correction.build(model.dim())?, pc.exploration, pc.beta_pen, reward)
        .context("rl")?;
    policy.init_net(child_seed(cfg.finetune.seed, domain::INIT, 0));
    let report = rl::finetune(&cfg.finetune, &mut policy, &model).context("rl")?;
    let grid = cfg.finetune.grid(&model).context("rl")?;
    let batch = rl::sample(&policy, &model, cfg.samples, &grid, child_seed(cfg.seed, domain::SAMPLER, 0)).context("rl")?;
    out.write("objective.csv", |w| report.write_csv(w))?;
    out.write(output.unwrap_or(Path::new("samples.csv")), |w| batch.write_csv(w))?;
    if let (Some(first), Some(last)) = (report.checkpoints.first(), report.checkpoints.last()) {
        writeln!(log, "objective {:.4} -> {:.4}; terminal mean {:?}", first.objective.value, last.objective.value, batch.samples.mean())?;
    }
    Ok(())
}

/// Entry point used by the binary: parses arguments, runs, maps errors to an
/// exit code.
pub fn main_with(cli: Cli) -> std::process::ExitCode {
    match run(&cli) {
        Ok(_) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
