//! Geodesic-error evaluation: per-action `d_geo` curves, trajectory means,
//! multi-seed aggregation, step-budget ablation and external result import.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::drift::{ConditionedDrift, DriftModel, FlowStage, Observation};
use crate::error::{Error, Result};
use crate::geometry::{d_geo, Pose};
use crate::integrator::{integrate, straightness, SolverSpec};
use crate::tasks::{Dataset, Demonstration, Task};
use crate::training::{csv_err, sample_noise_pose};

/// Seed of the first evaluation run; runs use consecutive seeds from here.
pub const BASE_SEED: u64 = 3407;
pub const DEFAULT_STEPS: [usize; 5] = [1, 2, 10, 50, 100];

pub fn default_seeds() -> Vec<u64> {
    (0..10).map(|i| BASE_SEED + i).collect()
}

/// How the actions of one trajectory are chained at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Chaining {
    /// Each action's flow is conditioned on the previously predicted pose.
    #[default]
    Autoregressive,
    /// Each action's flow is conditioned on the demonstrated previous pose,
    /// so the actions are generated independently of each other.
    Joint,
}

impl Chaining {
    pub fn name(self) -> &'static str {
        match self {
            Chaining::Autoregressive => "autoregressive",
            Chaining::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Chaining {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autoregressive" => Ok(Chaining::Autoregressive),
            "joint" => Ok(Chaining::Joint),
            other => Err(Error::invalid(format!("unknown chaining '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Scale of the Gaussian initial-pose noise, as in training.
    pub noise_scale: f64,
    pub chaining: Chaining,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            noise_scale: 0.5,
            chaining: Chaining::Autoregressive,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub model: String,
    pub stage: Option<FlowStage>,
    pub task: Task,
    pub steps: usize,
    pub seed: u64,
    /// Mean over test demonstrations of the error at each action; empty for
    /// imported runs that only report a trajectory mean.
    pub per_action: Vec<f64>,
    pub trajectory_mean: f64,
    pub external: bool,
}

/// Runs from one call of [`run_eval`]; failed seeds are listed, not imputed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub runs: Vec<EvalRun>,
    pub failed: Vec<(u64, String)>,
}

/// Per-action `d_geo` and their mean.
pub fn evaluate_trajectory(pred: &[Pose], truth: &[Pose]) -> Result<(Vec<f64>, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "trajectory lengths differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    let per_action = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| d_geo(t, p))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_action.iter().sum::<f64>() / per_action.len() as f64;
    Ok((per_action, mean))
}

fn demo_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// One rollout: its predicted poses and the flow path of every action.
pub struct Rollout {
    pub poses: Vec<Pose>,
    pub straightness: Vec<f64>,
}

/// Generates the actions of `demo` under `model`; initial poses come from a
/// per-(seed, demonstration) stream so they do not depend on the model.
pub fn rollout(
    model: &DriftModel,
    demo: &Demonstration,
    spec: &SolverSpec,
    seed: u64,
    index: usize,
    opts: &EvalOptions,
    with_straightness: bool,
) -> Result<Rollout> {
    let spec = spec.normalized();
    let base = Observation::at_frame(demo.cloud.clone())?;
    let mut rng = demo_rng(seed, index);
    let mut ee = base.frame().pose;
    let mut poses = Vec::with_capacity(demo.trajectory.len());
    let mut straight = Vec::new();
    for truth in &demo.trajectory {
        let obs = base.with_ee(ee);
        let z0 = ee.compose(&sample_noise_pose(&mut rng, opts.noise_scale)?);
        let path = integrate(&ConditionedDrift { model, obs: &obs }, &z0, &spec)?;
        if with_straightness && path.len() >= 2 {
            straight.push(straightness(&path)?);
        }
        let pred = *path.terminal();
        poses.push(pred);
        ee = match opts.chaining {
            Chaining::Autoregressive => pred,
            Chaining::Joint => *truth,
        };
    }
    Ok(Rollout {
        poses,
        straightness: straight,
    })
}

fn eval_seed(
    model: &DriftModel,
    model_id: &str,
    ds: &Dataset,
    spec: &SolverSpec,
    seed: u64,
    opts: &EvalOptions,
) -> Result<EvalRun> {
    let per_demo = ds
        .demonstrations
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let r = rollout(model, d, spec, seed, i, opts, false)?;
            Ok(evaluate_trajectory(&r.poses, &d.trajectory)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let horizon = ds.demonstrations[0].trajectory.len();
    let mut per_action = vec![0.0; horizon];
    for errs in &per_demo {
        per_action.iter_mut().zip(errs).for_each(|(a, e)| *a += e);
    }
    per_action
        .iter_mut()
        .for_each(|a| *a /= per_demo.len() as f64);
    let trajectory_mean = per_action.iter().sum::<f64>() / horizon as f64;
    Ok(EvalRun {
        model: model_id.to_owned(),
        stage: Some(model.stage),
        task: ds.task,
        steps: spec.normalized().steps,
        seed,
        per_action,
        trajectory_mean,
        external: false,
    })
}

/// Evaluates `model` on every test demonstration once per seed.
pub fn run_eval(
    model: &DriftModel,
    model_id: &str,
    ds: &Dataset,
    spec: &SolverSpec,
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("no evaluation seeds"));
    }
    if let Some(t) = model.task {
        if t != ds.task {
            return Err(Error::Config(format!(
                "model trained on {t}, dataset is {}",
                ds.task
            )));
        }
    }
    let mut report = EvalReport::default();
    for &seed in seeds {
        match eval_seed(model, model_id, ds, spec, seed, opts) {
            Ok(run) => report.runs.push(run),
            Err(
                e @ (Error::Integration { .. }
                | Error::NumericFailure { .. }
                | Error::CutLocus { .. }),
            ) => {
                log::warn!("seed {seed} failed: {e}");
                report.failed.push((seed, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// Mean straightness of every action's flow path over all seeds and demos.
/// Initial poses depend only on `(seed, demonstration)`, and the joint
/// chaining keeps the conditioning identical, so two models are compared on
/// the same starting points.
pub fn mean_straightness(
    model: &DriftModel,
    ds: &Dataset,
    spec: &SolverSpec,
    seeds: &[u64],
    noise_scale: f64,
) -> Result<f64> {
    let opts = EvalOptions {
        noise_scale,
        chaining: Chaining::Joint,
    };
    let mut values = Vec::new();
    for &seed in seeds {
        let per_demo = ds
            .demonstrations
            .par_iter()
            .enumerate()
            .map(|(i, d)| rollout(model, d, spec, seed, i, &opts, true).map(|r| r.straightness))
            .collect::<Result<Vec<_>>>()?;
        values.extend(per_demo.into_iter().flatten());
    }
    if values.is_empty() {
        return Err(Error::invalid("no paths to measure"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub task: Task,
    pub model: String,
    pub steps: usize,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    pub external: bool,
}

/// Groups runs by (task, model, steps, external) and reports the mean and
/// sample standard deviation of the trajectory means.
pub fn aggregate(runs: &[EvalRun]) -> Result<Vec<AggregateReport>> {
    if runs.is_empty() {
        return Err(Error::invalid("no runs to aggregate"));
    }
    let mut groups: BTreeMap<(Task, &str, usize, bool), Vec<f64>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.task, r.model.as_str(), r.steps, r.external))
            .or_default()
            .push(r.trajectory_mean);
    }
    Ok(groups
        .into_iter()
        .map(|((task, model, steps, external), v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            AggregateReport {
                task,
                model: model.to_owned(),
                steps,
                mean,
                std,
                n_seeds: n,
                external,
            }
        })
        .collect())
}

/// Relative improvement of `ours` over `baseline`, in percent.
pub fn error_reduction(baseline: f64, ours: f64) -> Result<f64> {
    if !(baseline.is_finite() && baseline > 0.0) || !ours.is_finite() {
        return Err(Error::invalid(
            "baseline must be positive and both values finite",
        ));
    }
    Ok(100.0 * (baseline - ours) / baseline)
}

#[derive(Debug, Clone, Default)]
pub struct AblationTable {
    pub reports: Vec<AggregateReport>,
    pub runs: Vec<EvalRun>,
    pub failed: Vec<(usize, u64, String)>,
}

/// Evaluates `model` at each step budget with fixed-step RK4 (a budget of 1
/// is a single Euler step).
pub fn step_ablation(
    model: &DriftModel,
    model_id: &str,
    ds: &Dataset,
    steps_list: &[usize],
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<AblationTable> {
    if steps_list.is_empty() {
        return Err(Error::invalid("steps list is empty"));
    }
    let mut table = AblationTable::default();
    for &steps in steps_list {
        let spec = SolverSpec::rk4(steps).normalized();
        let report = run_eval(model, model_id, ds, &spec, seeds, opts)?;
        table
            .failed
            .extend(report.failed.into_iter().map(|(s, e)| (steps, s, e)));
        if !report.runs.is_empty() {
            table.reports.extend(aggregate(&report.runs)?);
        }
        table.runs.extend(report.runs);
    }
    Ok(table)
}

/// Columns of an external results file.
pub const EXTERNAL_COLUMNS: [&str; 5] = ["task", "model", "steps", "seed", "trajectory_mean"];

/// Reads `task,model,steps,seed,trajectory_mean` rows (header optional) as
/// runs tagged external.
pub fn import_external_results<R: Read>(reader: R) -> Result<Vec<EvalRun>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut runs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(i as u64 + 1, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != EXTERNAL_COLUMNS.len() {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "expected {} columns, found {}",
                    EXTERNAL_COLUMNS.len(),
                    rec.len()
                ),
            });
        }
        if i == 0 && &rec[0] == "task" {
            continue;
        }
        let bad = |msg: String| Error::Parse { line, msg };
        let task: Task = rec[0].parse().map_err(|e: Error| bad(e.to_string()))?;
        let steps = rec[2]
            .parse()
            .map_err(|_| bad(format!("steps '{}' is not an integer", &rec[2])))?;
        let seed = rec[3]
            .parse()
            .map_err(|_| bad(format!("seed '{}' is not an integer", &rec[3])))?;
        let mean: f64 = rec[4]
            .parse()
            .map_err(|_| bad(format!("trajectory_mean '{}' is not a number", &rec[4])))?;
        if !(mean.is_finite() && mean >= 0.0) {
            return Err(bad(format!(
                "trajectory_mean {mean} must be finite and nonnegative"
            )));
        }
        runs.push(EvalRun {
            model: rec[1].to_owned(),
            stage: None,
            task,
            steps,
            seed,
            per_action: Vec::new(),
            trajectory_mean: mean,
            external: true,
        });
    }
    Ok(runs)
}

/// Model-by-task table of aggregate means, models and tasks in first-seen
/// order. Missing cells are `-`.
pub fn render_side_by_side(reports: &[AggregateReport]) -> String {
    let mut models: Vec<String> = Vec::new();
    let mut tasks: Vec<Task> = Vec::new();
    for r in reports {
        let label = row_label(r);
        if !models.contains(&label) {
            models.push(label);
        }
        if !tasks.contains(&r.task) {
            tasks.push(r.task);
        }
    }
    let cell = |model: &str, task: Task| -> String {
        reports
            .iter()
            .find(|r| row_label(r) == model && r.task == task)
            .map_or("-".into(), |r| {
                if r.n_seeds > 1 {
                    format!("{:.3} ± {:.3}", r.mean, r.std)
                } else {
                    format!("{:.3}", r.mean)
                }
            })
    };
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("model".to_owned())
        .chain(tasks.iter().map(|t| t.name().to_owned()))
        .collect()];
    for m in &models {
        rows.push(
            std::iter::once(m.clone())
                .chain(tasks.iter().map(|&t| cell(m, t)))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| {
                let pad = w - s.chars().count();
                if c == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        }
    }
    out
}

fn row_label(r: &AggregateReport) -> String {
    format!("{} ({} steps)", r.model, r.steps)
}

/// Long format: `task,model,steps,seed,action_index,d_geo`.
pub fn write_per_action_csv<W: Write>(runs: &[EvalRun], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["task", "model", "steps", "seed", "action_index", "d_geo"])
        .map_err(csv_err)?;
    for r in runs {
        for (k, v) in r.per_action.iter().enumerate() {
            wtr.write_record([
                r.task.name().to_owned(),
                r.model.clone(),
                r.steps.to_string(),
                r.seed.to_string(),
                k.to_string(),
                format!("{v:?}"),
            ])
            .map_err(csv_err)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// `task,model,steps,mean,std,n`.
pub fn write_aggregate_csv<W: Write>(reports: &[AggregateReport], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["task", "model", "steps", "mean", "std", "n"])
        .map_err(csv_err)?;
    for r in reports {
        wtr.write_record([
            r.task.name().to_owned(),
            r.model.clone(),
            r.steps.to_string(),
            format!("{:?}", r.mean),
            format!("{:?}", r.std),
            r.n_seeds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}
