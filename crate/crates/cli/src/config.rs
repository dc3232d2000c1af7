//! Run configuration: one TOML document with a section per module.
//!
//! Resolution order is defaults, then the config file, then `--set`
//! overrides and command flags. Unknown keys are rejected with the nearest
//! valid key as a hint. Module `seed` keys that are not given explicitly are
//! copied from the top-level `seed`.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use scorelab_core::rl::Correction;
use scorelab_core::{
    ConsistencyConfig, Exploration, FinetuneConfig, MatchingConfig, ModelSpec, Parametrization, SamplerConfig,
    SweepSpec, TargetSpec, TimeFeatures,
};

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Points generated by `sample`, `consistency` and `finetune`.
    pub samples: usize,
    /// Score backend: `oracle` or `learned:<path>`.
    pub score: String,
    /// Mixture components used for the Swiss-roll oracle.
    pub oracle_components: usize,
    pub model: ModelSpec,
    pub target: TargetSpec,
    pub network: NetworkConfig,
    pub train: MatchingConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub consistency: ConsistencyConfig,
    pub flow: FlowConfig,
    pub finetune: FinetuneConfig,
    pub policy: PolicyConfig,
    /// Written as `[[sweep]]` tables.
    pub sweep: Vec<SweepSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 10_000,
            score: "oracle".into(),
            oracle_components: 256,
            model: ModelSpec::default(),
            target: TargetSpec::default(),
            network: NetworkConfig::default(),
            train: MatchingConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            consistency: ConsistencyConfig::default(),
            flow: FlowConfig::default(),
            finetune: FinetuneConfig::default(),
            policy: PolicyConfig::default(),
            sweep: Vec::new(),
        }
    }
}

/// Score network architecture for `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub features: TimeFeatures,
    pub parametrization: Parametrization,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], features: TimeFeatures::Schedule, parametrization: Parametrization::Raw }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Sliced-W2 directions.
    pub projections: usize,
    /// Histogram cells per axis for TV (d <= 2 only).
    pub bins: usize,
    /// Reference draws from the target; 0 matches the sample count.
    pub reference: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { projections: 128, bins: 50, reference: 0 }
    }
}

/// Consistency network settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub hidden: Vec<usize>,
    pub sigma_data: f64,
    /// Lower end of the time range; the upper end is `model.horizon`.
    pub t_floor: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], sigma_data: 0.5, t_floor: 0.002 }
    }
}

/// Fine-tuning policy and reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Quadratic reward centre `y*`; empty means the origin.
    pub center: Vec<f64>,
    pub scale: f64,
    pub beta_pen: f64,
    pub exploration: Exploration,
    pub correction: CorrectionConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            center: Vec::new(),
            scale: 1.0,
            beta_pen: 1.0,
            exploration: Exploration::default(),
            correction: CorrectionConfig::Affine { decay: 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorrectionConfig {
    Affine { decay: f64 },
    Net { hidden: Vec<usize> },
}

impl CorrectionConfig {
    pub fn build(&self, dim: usize) -> Result<Correction> {
        Ok(match self {
            CorrectionConfig::Affine { decay } => Correction::Affine { decay: *decay },
            CorrectionConfig::Net { hidden } => {
                Correction::Net(scorelab_core::net::Mlp::new(dim + 1, hidden, dim).context("policy")?)
            }
        })
    }
}

/// Where `s(t, x)` comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScoreBackend {
    Oracle,
    Learned(String),
}

impl std::str::FromStr for ScoreBackend {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            _ if s == "oracle" => Ok(ScoreBackend::Oracle),
            Some(("learned", path)) if !path.is_empty() => Ok(ScoreBackend::Learned(path.to_string())),
            _ => bail!("invalid score backend `{s}`: expected `oracle` or `learned:<path>`"),
        }
    }
}

impl RunConfig {
    pub fn backend(&self) -> Result<ScoreBackend> {
        self.score.parse()
    }

    /// Canonical TOML text of the configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing configuration")
    }
}

/// Parses `key=value`; the value is read as a TOML literal and falls back to
/// a bare string.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, val) = raw.split_once('=').ok_or_else(|| anyhow!("override `{raw}` is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override `{raw}` has an empty key segment");
    }
    Ok((key.to_string(), literal(val.trim())))
}

fn literal(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Loads `path` (if any), applies `overrides` in order and resolves defaults.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    for (key, value) in overrides {
        set_path(&mut table, key, value.clone())?;
    }
    resolve(table)
}

/// Resolves a raw table into a configuration.
pub fn resolve(table: Table) -> Result<RunConfig> {
    let text = toml::to_string(&table).context("re-encoding configuration")?;
    let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| describe(e, &table))?;
    let seeded = |section: &str| table.get(section).and_then(Value::as_table).is_some_and(|t| t.contains_key("seed"));
    let seed = cfg.seed;
    if !seeded("sampler") {
        cfg.sampler.seed = seed;
    }
    if !seeded("train") {
        cfg.train.seed = seed;
    }
    if !seeded("consistency") {
        cfg.consistency.seed = seed;
    }
    if !seeded("finetune") {
        cfg.finetune.seed = seed;
    }
    let sweeps = table.get("sweep").and_then(Value::as_array);
    for (i, s) in cfg.sweep.iter_mut().enumerate() {
        let explicit = sweeps.and_then(|a| a.get(i)).and_then(Value::as_table).is_some_and(|t| t.contains_key("seed"));
        if !explicit {
            s.seed = seed;
        }
    }
    Ok(cfg)
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("nonempty key");
    let mut cur = table;
    for (i, p) in parts.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("cannot set `{key}`: `{}` is not a table", parts[..=i].join(".")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Turns a deserialization error into a message naming the offending key and,
/// for unknown keys, the closest valid one.
fn describe(err: toml::de::Error, table: &Table) -> anyhow::Error {
    let msg = err.message().to_string();
    if let Some((field, expected)) = unknown_field(&msg) {
        let at = find_key(table, &field, "").unwrap_or_else(|| field.clone());
        let nearest = expected
            .iter()
            .map(|k| (strsim::jaro_winkler(&field, k), k))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .filter(|(score, _)| *score > 0.7)
            .map(|(_, k)| k.clone());
        return match nearest {
            Some(k) => anyhow!("unknown configuration key `{at}`; did you mean `{k}`?"),
            None => anyhow!("unknown configuration key `{at}`; valid keys here: {}", expected.join(", ")),
        };
    }
    anyhow!("invalid configuration: {}", err.to_string().trim_end())
}

fn unknown_field(msg: &str) -> Option<(String, Vec<String>)> {
    let rest = msg.strip_prefix("unknown field `")?;
    let (field, rest) = rest.split_once('`')?;
    let expected = rest
        .split('`')
        .skip(1)
        .step_by(2)
        .map(str::to_string)
        .collect();
    Some((field.to_string(), expected))
}

fn find_key(table: &Table, key: &str, prefix: &str) -> Option<String> {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if k == key {
            return Some(path);
        }
        let found = match v {
            Value::Table(t) => find_key(t, key, &path),
            Value::Array(items) => items.iter().enumerate().find_map(|(i, it)| {
                it.as_table().and_then(|t| find_key(t, key, &format!("{path}[{i}]")))
            }),
            _ => None,
        };
        if found.is_some() {
            return found;
        }
    }
    None
}
