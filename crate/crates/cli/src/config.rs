//! Experiment configuration: a TOML file with one section per stage.
//!
//! Every key is optional. Missing keys fall back to the library defaults,
//! command-line flags override the file, and the fully resolved result is
//! written next to the outputs.

use std::fs;
use std::path::{Path, PathBuf};

use se3flow::evaluation::{default_seeds, Chaining, EvalOptions, DEFAULT_STEPS};
use se3flow::training::{EndpointMode, LrSchedule, Optimizer, TrainConfig};
use se3flow::{Convention, Error, ModelSpec, Result, SolverKind, SolverSpec, Task};
use serde::{Deserialize, Serialize};

/// Default output root when neither a flag, the config nor the environment names one.
pub const DEFAULT_OUT: &str = "out";
pub const OUT_ENV: &str = "SE3FLOW_OUT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub flow1: StageSection,
    pub flow2: StageSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub task: Option<String>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub flow1_checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Option<Vec<usize>>,
    pub time_embed_freqs: Option<Vec<f64>>,
    pub convention: Option<String>,
    pub linear_skip: Option<bool>,
    /// Seed of the weight initialization; the stage seed when absent.
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub rectified_step_budget: Option<usize>,
    pub mix_ratio: Option<f64>,
    pub seed: Option<u64>,
    pub lr_schedule: Option<String>,
    pub optimizer: Option<String>,
    pub noise_scale: Option<f64>,
    pub grad_clip: Option<f64>,
    pub endpoint: Option<String>,
    pub solver: Option<String>,
    pub reflow_pairs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub steps: Option<Vec<usize>>,
    pub solver: Option<String>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub noise_scale: Option<f64>,
    pub chaining: Option<String>,
}

fn parse<T: std::str::FromStr<Err = Error>>(key: &str, v: &Option<String>) -> Result<Option<T>> {
    v.as_deref()
        .map(|s| {
            s.parse()
                .map_err(|e: Error| Error::Config(format!("{key}: {e}")))
        })
        .transpose()
}

impl ExperimentConfig {
    /// Reads `path`, or returns the all-default config when there is none.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn task(&self) -> Result<Option<Task>> {
        parse("experiment.task", &self.experiment.task)
    }

    /// Output directory: the config value, then `$SE3FLOW_OUT`, then `out`.
    pub fn out_dir(&self) -> PathBuf {
        self.experiment
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        match &self.experiment.seeds {
            Some(s) if s.is_empty() => Err(Error::Config("experiment.seeds is empty".into())),
            Some(s) => Ok(s.clone()),
            None => Ok(default_seeds()),
        }
    }
}

impl ModelSection {
    pub fn spec(&self) -> Result<ModelSpec> {
        let d = ModelSpec::default();
        Ok(ModelSpec {
            hidden: self.hidden.clone().unwrap_or(d.hidden),
            time_embed_freqs: self.time_embed_freqs.clone().unwrap_or(d.time_embed_freqs),
            convention: parse::<Convention>("model.convention", &self.convention)?
                .unwrap_or(d.convention),
            linear_skip: self.linear_skip.unwrap_or(d.linear_skip),
        })
    }

    /// Section describing `spec` with every key present.
    pub fn resolved(spec: &ModelSpec, init_seed: Option<u64>) -> Self {
        ModelSection {
            hidden: Some(spec.hidden.clone()),
            time_embed_freqs: Some(spec.time_embed_freqs.clone()),
            convention: Some(spec.convention.name().into()),
            linear_skip: Some(spec.linear_skip),
            init_seed,
        }
    }
}

impl StageSection {
    /// Applies the keys present here on top of `base`.
    pub fn apply(&self, base: TrainConfig) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs: self.epochs.unwrap_or(base.epochs),
            rectified_step_budget: self
                .rectified_step_budget
                .unwrap_or(base.rectified_step_budget),
            mix_ratio: self.mix_ratio.unwrap_or(base.mix_ratio),
            seed: self.seed.unwrap_or(base.seed),
            lr_schedule: parse::<LrSchedule>("lr_schedule", &self.lr_schedule)?
                .unwrap_or(base.lr_schedule),
            optimizer: parse::<Optimizer>("optimizer", &self.optimizer)?.unwrap_or(base.optimizer),
            noise_scale: self.noise_scale.unwrap_or(base.noise_scale),
            grad_clip: self.grad_clip.or(base.grad_clip),
            endpoint: parse::<EndpointMode>("endpoint", &self.endpoint)?.unwrap_or(base.endpoint),
            solver: parse::<SolverKind>("solver", &self.solver)?.unwrap_or(base.solver),
            reflow_pairs: self.reflow_pairs.or(base.reflow_pairs),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolved(cfg: &TrainConfig) -> Self {
        StageSection {
            learning_rate: Some(cfg.learning_rate),
            batch_size: Some(cfg.batch_size),
            epochs: Some(cfg.epochs),
            rectified_step_budget: Some(cfg.rectified_step_budget),
            mix_ratio: Some(cfg.mix_ratio),
            seed: Some(cfg.seed),
            lr_schedule: Some(cfg.lr_schedule.name().into()),
            optimizer: Some(cfg.optimizer.name().into()),
            noise_scale: Some(cfg.noise_scale),
            grad_clip: cfg.grad_clip,
            endpoint: Some(cfg.endpoint.name().into()),
            solver: Some(cfg.solver.name().into()),
            reflow_pairs: cfg.reflow_pairs,
        }
    }
}

/// Evaluation settings after defaults are filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub steps: Vec<usize>,
    pub solver: SolverSpec,
    pub options: EvalOptions,
}

impl EvalSettings {
    /// Solver for one step budget; a budget of 1 is a single Euler step.
    pub fn solver_for(&self, steps: usize) -> SolverSpec {
        self.solver.with_steps(steps).normalized()
    }
}

impl EvalSection {
    pub fn resolve(&self) -> Result<EvalSettings> {
        let steps = self.steps.clone().unwrap_or(DEFAULT_STEPS.to_vec());
        if steps.is_empty() || steps.contains(&0) {
            return Err(Error::Config(
                "eval.steps must be a nonempty list of positive budgets".into(),
            ));
        }
        let d = SolverSpec::default();
        let solver = SolverSpec {
            kind: parse::<SolverKind>("eval.solver", &self.solver)?.unwrap_or(SolverKind::Rk4),
            rtol: self.rtol.unwrap_or(d.rtol),
            atol: self.atol.unwrap_or(d.atol),
            ..d
        };
        solver
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let opts = EvalOptions {
            noise_scale: self
                .noise_scale
                .unwrap_or(EvalOptions::default().noise_scale),
            chaining: parse::<Chaining>("eval.chaining", &self.chaining)?.unwrap_or_default(),
        };
        if !(opts.noise_scale.is_finite() && opts.noise_scale > 0.0) {
            return Err(Error::Config("eval.noise_scale must be positive".into()));
        }
        Ok(EvalSettings {
            steps,
            solver,
            options: opts,
        })
    }

    pub fn resolved(s: &EvalSettings) -> Self {
        EvalSection {
            steps: Some(s.steps.clone()),
            solver: Some(s.solver.kind.name().into()),
            rtol: Some(s.solver.rtol),
            atol: Some(s.solver.atol),
            noise_scale: Some(s.options.noise_scale),
            chaining: Some(s.options.chaining.name().into()),
        }
    }
}
