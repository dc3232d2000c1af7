//! Desk-scale laboratory for score-based diffusion models driven by SDEs.

pub mod analysis;
pub mod batch;
pub mod consistency;
pub mod error;
pub mod matching;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod quadrature;
pub mod rl;
pub mod rng;
pub mod sampler;
pub mod score;
pub mod sde;
pub mod stats;
pub mod target;

pub use analysis::{Experiment, ExperimentReport, ReportRow, SweepSpec};
pub use batch::{Batch, SampleBatch};
pub use consistency::{ConsistencyConfig, ConsistencyMode, Flow, FlowNet, PairBatch, PairMode};
pub use error::{Error, Result};
pub use matching::{MatchingConfig, Objective, Weight};
pub use metrics::MetricResult;
pub use optim::Optimizer;
pub use rl::{Correction, Exploration, FinetuneConfig, Policy, Reward};
pub use sampler::{Grid, GridKind, SamplerConfig, Scheme};
pub use score::{LearnedScore, Parametrization, ScoreField, TimeFeatures};
pub use sde::{ConditionalMarginal, DiffusionModel, ModelKind, ModelSpec, PriorSpec, VeReparam, VeSchedule};
pub use stats::Estimate;
pub use target::{posterior_mean, GaussianMixture, SwissRoll, Target, TargetKind, TargetSpec};
