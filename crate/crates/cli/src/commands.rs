//! Subcommand implementations.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use se3flow::checkpoint;
use se3flow::evaluation::{
    aggregate, import_external_results, render_side_by_side, run_eval, step_ablation,
    write_aggregate_csv, write_per_action_csv, AggregateReport, EvalRun,
};
use se3flow::tasks::{load_dataset, save_dataset};
use se3flow::training::{
    anchors_from_dataset, synthesize_reflow_pairs, train_flow1, train_flow2, write_loss_csv,
    Anchor, PairSource, TrainConfig, TrainingPair,
};
use se3flow::{Dataset, DriftModel, Error, FlowStage, Pose, Result, Split, Task};

use crate::config::{EvalSection, ExperimentConfig, ModelSection, StageSection};
use crate::{AblateArgs, EvalArgs, GenerateArgs, ImportArgs, ReflowArgs, TrainArgs};

pub enum Outcome {
    Done,
    /// Evaluation finished but this many runs failed.
    Partial(usize),
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericFailure { .. }
        | Error::NonFiniteLoss { .. }
        | Error::Integration { .. }
        | Error::CutLocus { .. } => 3,
        _ => 2,
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn require<'a>(v: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Config(format!("missing {what}")))
}

fn load_data(path: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "dataset {} does not exist",
            path.display()
        )));
    }
    let ds = load_dataset(path)?;
    if let Some(task) = cfg.task()? {
        if task != ds.task {
            return Err(Error::Config(format!(
                "config task is {task}, dataset {} holds {}",
                path.display(),
                ds.task
            )));
        }
    }
    Ok(ds)
}

fn load_model(path: &Path) -> Result<DriftModel> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    checkpoint::load(path)
}

fn check_task(model: &DriftModel, ds: &Dataset) -> Result<()> {
    match model.task {
        Some(t) if t != ds.task => Err(Error::Config(format!(
            "checkpoint was trained on {t}, dataset is {}",
            ds.task
        ))),
        _ => Ok(()),
    }
}

fn write_effective(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    fs::write(path, cfg.to_toml())?;
    Ok(())
}

pub fn generate(a: GenerateArgs) -> Result<Outcome> {
    let task: Task = a
        .task
        .parse()
        .map_err(|e: Error| Error::Config(e.to_string()))?;
    let n = a.n.unwrap_or(task.default_count());
    let n_test = a.n_test.unwrap_or((n / 5).max(1));
    if n == 0 || n_test == 0 {
        return Err(Error::Config("dataset sizes must be positive".into()));
    }
    let cfg = ExperimentConfig {
        experiment: crate::config::ExperimentSection {
            out: a.out,
            ..Default::default()
        },
        ..Default::default()
    };
    let dir = out_dir(&cfg)?;
    for (split, count) in [(Split::Train, n), (Split::Test, n_test)] {
        let ds = Dataset::generate(task, split, count, a.seed);
        let path = dir.join(format!("{}_{}.bin", task.name(), split.name()));
        save_dataset(&ds, &path)?;
        if a.json {
            let json = path.with_extension("json");
            fs::write(&json, ds.to_json().to_string())?;
        }
        println!(
            "{} {}: {} demonstrations x {} actions, {}-point clouds -> {}",
            task.name(),
            split.name(),
            ds.len(),
            ds.demonstrations[0].trajectory.len(),
            task.n_points(),
            path.display()
        );
    }
    Ok(Outcome::Done)
}

fn apply_train_flags(stage: &mut StageSection, a: &TrainArgs) {
    stage.epochs = a.epochs.or(stage.epochs);
    stage.learning_rate = a.lr.or(stage.learning_rate);
    stage.batch_size = a.batch_size.or(stage.batch_size);
    stage.seed = a.seed.or(stage.seed);
    stage.mix_ratio = a.mix_ratio.or(stage.mix_ratio);
    stage.optimizer = a.optimizer.clone().or(stage.optimizer.take());
}

pub fn train(a: TrainArgs) -> Result<Outcome> {
    let mut cfg = ExperimentConfig::load(a.common.config.as_deref())?;
    cfg.experiment.out = a.common.out.clone().or(cfg.experiment.out);
    cfg.experiment.train = a.train.clone().or(cfg.experiment.train);
    cfg.experiment.flow1_checkpoint = a.flow1.clone().or(cfg.experiment.flow1_checkpoint);
    if a.stage == 1 {
        apply_train_flags(&mut cfg.flow1, &a);
        train_stage1(cfg)
    } else {
        apply_train_flags(&mut cfg.flow2, &a);
        train_stage2(cfg, a.reflow.as_deref())
    }
}

fn train_stage1(mut cfg: ExperimentConfig) -> Result<Outcome> {
    let tc = cfg.flow1.apply(TrainConfig::flow1())?;
    let spec = cfg.model.spec()?;
    let train_path = require(
        &cfg.experiment.train,
        "training dataset (--train or experiment.train)",
    )?
    .to_owned();
    let ds = load_data(&train_path, &cfg)?;
    let dir = out_dir(&cfg)?;
    let anchors = anchors_from_dataset(&ds)?;

    let init_seed = cfg.model.init_seed.unwrap_or(tc.seed);
    let init = DriftModel::init(&spec, &mut ChaCha8Rng::seed_from_u64(init_seed))?;
    let (mut model, reports) = train_flow1(init, &anchors, &tc)?;
    model.task = Some(ds.task);

    cfg.experiment.task = Some(ds.task.name().into());
    cfg.model = ModelSection::resolved(&spec, Some(init_seed));
    cfg.flow1 = StageSection::resolved(&tc);
    finish_training(&cfg, &dir, "flow1", &model, &reports)
}

fn finish_training(
    cfg: &ExperimentConfig,
    dir: &Path,
    name: &str,
    model: &DriftModel,
    reports: &[se3flow::training::LossReport],
) -> Result<Outcome> {
    let ckpt = dir.join(format!("{name}.ckpt"));
    checkpoint::save(model, &ckpt)?;
    write_loss_csv(reports, create(&dir.join(format!("{name}_loss.csv")))?)?;
    write_effective(cfg, &dir.join(format!("{name}_config.toml")))?;
    match reports.last() {
        Some(r) => println!(
            "{name}: {} epochs, final loss {:.6e} -> {}",
            reports.len(),
            r.mean_loss,
            ckpt.display()
        ),
        None => println!("{name}: no epochs, initialization -> {}", ckpt.display()),
    }
    Ok(Outcome::Done)
}

fn flow1_for(cfg: &ExperimentConfig, ds: &Dataset) -> Result<DriftModel> {
    let path = require(
        &cfg.experiment.flow1_checkpoint,
        "flow 1 checkpoint (--flow1 or experiment.flow1_checkpoint)",
    )?;
    let model = load_model(path)?;
    if model.stage != FlowStage::Flow1 {
        return Err(Error::Config(format!(
            "{} is a {} checkpoint, expected flow1",
            path.display(),
            model.stage.name()
        )));
    }
    check_task(&model, ds)?;
    Ok(model)
}

fn train_stage2(mut cfg: ExperimentConfig, reflow_path: Option<&Path>) -> Result<Outcome> {
    let tc = cfg.flow2.apply(TrainConfig::flow2())?;
    let train_path = require(
        &cfg.experiment.train,
        "training dataset (--train or experiment.train)",
    )?
    .to_owned();
    let ds = load_data(&train_path, &cfg)?;
    let model1 = flow1_for(&cfg, &ds)?;
    let dir = out_dir(&cfg)?;
    let anchors = anchors_from_dataset(&ds)?;

    let pairs = match reflow_path {
        Some(p) => read_reflow(p, &anchors)?,
        None if tc.mix_ratio > 0.0 => {
            let n = tc.reflow_pairs.unwrap_or(anchors.len());
            let set = synthesize_reflow_pairs(&model1, &anchors, n, &tc)?;
            report_reflow(n, &set);
            set.pairs
        }
        None => Vec::new(),
    };
    let (mut model, reports, counts) = train_flow2(&model1, &anchors, &pairs, &tc)?;
    model.task = Some(ds.task);
    println!(
        "flow2 draws: {} original, {} reflow",
        counts.original, counts.reflow
    );

    cfg.experiment.task = Some(ds.task.name().into());
    cfg.model = ModelSection::resolved(&model1.spec(), None);
    cfg.flow2 = StageSection::resolved(&tc);
    finish_training(&cfg, &dir, "flow2", &model, &reports)
}

fn report_reflow(n: usize, set: &se3flow::training::ReflowSet) {
    println!(
        "reflow: {} of {n} pairs kept, {} integration failures, {} rejected by the rotation bound",
        set.pairs.len(),
        set.integration_failures,
        set.rejected
    );
}

const REFLOW_HEADER: &str = "anchor";

fn write_reflow(path: &Path, pairs: &[TrainingPair], anchors: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let header: Vec<String> = std::iter::once(REFLOW_HEADER.to_owned())
        .chain((0..16).map(|i| format!("h0_{i}")))
        .chain((0..16).map(|i| format!("h1_{i}")))
        .collect();
    w.write_record(&header).map_err(csv_error)?;
    for (p, k) in pairs.iter().zip(anchors) {
        let row: Vec<String> = std::iter::once(k.to_string())
            .chain(p.h0.to_row_major().iter().map(|v| format!("{v:?}")))
            .chain(p.h1.to_row_major().iter().map(|v| format!("{v:?}")))
            .collect();
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn read_reflow(path: &Path, anchors: &[Anchor]) -> Result<Vec<TrainingPair>> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "reflow file {} does not exist",
            path.display()
        )));
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut pairs = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Parse { line, msg };
        if rec.len() != 33 {
            return Err(bad(format!("expected 33 columns, found {}", rec.len())));
        }
        let k: usize = rec[0]
            .parse()
            .map_err(|_| bad(format!("bad anchor index '{}'", &rec[0])))?;
        let anchor = anchors.get(k).ok_or_else(|| {
            bad(format!(
                "anchor {k} out of range for {} training actions",
                anchors.len()
            ))
        })?;
        let mut vals = [0.0; 32];
        for (v, s) in vals.iter_mut().zip(rec.iter().skip(1)) {
            *v = s
                .parse()
                .map_err(|_| bad(format!("'{s}' is not a number")))?;
        }
        let pose =
            |v: &[f64]| Pose::from_row_major(v.try_into().unwrap()).map_err(|e| bad(e.to_string()));
        let pair = TrainingPair::new(
            pose(&vals[..16])?,
            pose(&vals[16..])?,
            Arc::clone(&anchor.obs),
            PairSource::Reflow,
        )
        .map_err(|e| bad(e.to_string()))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn synthesize_reflow(a: ReflowArgs) -> Result<Outcome> {
    let mut cfg = ExperimentConfig::load(a.common.config.as_deref())?;
    cfg.experiment.out = a.common.out.clone().or(cfg.experiment.out);
    cfg.experiment.train = a.train.clone().or(cfg.experiment.train);
    cfg.experiment.flow1_checkpoint = Some(a.checkpoint.clone());
    cfg.flow2.seed = a.seed.or(cfg.flow2.seed);
    cfg.flow2.reflow_pairs = a.n.or(cfg.flow2.reflow_pairs);
    let tc = cfg.flow2.apply(TrainConfig::flow2())?;
    let train_path = require(
        &cfg.experiment.train,
        "training dataset (--train or experiment.train)",
    )?
    .to_owned();
    let ds = load_data(&train_path, &cfg)?;
    let model1 = flow1_for(&cfg, &ds)?;
    let dir = out_dir(&cfg)?;
    let anchors = anchors_from_dataset(&ds)?;
    let n = tc.reflow_pairs.unwrap_or(anchors.len());
    let set = synthesize_reflow_pairs(&model1, &anchors, n, &tc)?;
    report_reflow(n, &set);
    let path = dir.join("reflow.csv");
    write_reflow(&path, &set.pairs, &set.anchors)?;
    cfg.experiment.task = Some(ds.task.name().into());
    cfg.flow2 = StageSection::resolved(&tc);
    write_effective(&cfg, &dir.join("reflow_config.toml"))?;
    println!("reflow pairs -> {}", path.display());
    Ok(Outcome::Done)
}

/// Everything an evaluation needs, validated before any compute.
struct EvalSetup {
    cfg: ExperimentConfig,
    model: DriftModel,
    model_id: String,
    ds: Dataset,
    seeds: Vec<u64>,
    dir: PathBuf,
}

fn eval_setup(a: &EvalArgs) -> Result<EvalSetup> {
    let mut cfg = ExperimentConfig::load(a.common.config.as_deref())?;
    cfg.experiment.out = a.common.out.clone().or(cfg.experiment.out);
    cfg.experiment.test = a.test.clone().or(cfg.experiment.test);
    cfg.experiment.seeds = a.seeds.clone().or(cfg.experiment.seeds);
    cfg.eval.steps = a.steps.clone().or(cfg.eval.steps);
    cfg.eval.solver = a.solver.clone().or(cfg.eval.solver);
    cfg.eval.chaining = a.chaining.clone().or(cfg.eval.chaining);
    let settings = cfg.eval.resolve()?;
    let seeds = cfg.seeds()?;
    let test_path = require(
        &cfg.experiment.test,
        "test dataset (--test or experiment.test)",
    )?
    .to_owned();
    let ds = load_data(&test_path, &cfg)?;
    let model = load_model(&a.checkpoint)?;
    check_task(&model, &ds)?;
    let model_id = a
        .model_id
        .clone()
        .unwrap_or_else(|| model.stage.name().to_owned());
    let dir = out_dir(&cfg)?;
    cfg.experiment.task = Some(ds.task.name().into());
    cfg.experiment.seeds = Some(seeds.clone());
    cfg.eval = EvalSection::resolved(&settings);
    Ok(EvalSetup {
        cfg,
        model,
        model_id,
        ds,
        seeds,
        dir,
    })
}

fn write_reports(
    dir: &Path,
    stem: &str,
    runs: &[EvalRun],
    reports: &[AggregateReport],
) -> Result<()> {
    write_per_action_csv(runs, create(&dir.join(format!("{stem}_per_action.csv")))?)?;
    write_aggregate_csv(reports, create(&dir.join(format!("{stem}_aggregate.csv")))?)?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<Outcome> {
    let s = eval_setup(&a)?;
    let settings = s.cfg.eval.resolve()?;
    let mut runs = Vec::new();
    let mut failed = 0;
    for &steps in &settings.steps {
        let report = run_eval(
            &s.model,
            &s.model_id,
            &s.ds,
            &settings.solver_for(steps),
            &s.seeds,
            &settings.options,
        )?;
        for (seed, e) in &report.failed {
            eprintln!("{} steps, seed {seed}: {e}", steps);
        }
        failed += report.failed.len();
        runs.extend(report.runs);
    }
    let reports = if runs.is_empty() {
        Vec::new()
    } else {
        aggregate(&runs)?
    };
    write_reports(&s.dir, &s.model_id, &runs, &reports)?;
    write_effective(
        &s.cfg,
        &s.dir.join(format!("{}_eval_config.toml", s.model_id)),
    )?;
    print!("{}", render_side_by_side(&reports));
    Ok(if failed > 0 {
        Outcome::Partial(failed)
    } else {
        Outcome::Done
    })
}

fn read_external(path: &Path) -> Result<Vec<EvalRun>> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "external results {} do not exist",
            path.display()
        )));
    }
    import_external_results(File::open(path)?)
}

pub fn ablate(a: AblateArgs) -> Result<Outcome> {
    let external = a.external.as_deref().map(read_external).transpose()?;
    let mut s = eval_setup(&a.eval)?;
    // the ablation always runs fixed-step RK4
    s.cfg.eval.solver = Some("rk4".into());
    let settings = s.cfg.eval.resolve()?;
    let table = step_ablation(
        &s.model,
        &s.model_id,
        &s.ds,
        &settings.steps,
        &s.seeds,
        &settings.options,
    )?;
    for (steps, seed, e) in &table.failed {
        eprintln!("{steps} steps, seed {seed}: {e}");
    }
    let stem = format!("{}_ablation", s.model_id);
    write_reports(&s.dir, &stem, &table.runs, &table.reports)?;
    write_effective(&s.cfg, &s.dir.join(format!("{stem}_config.toml")))?;
    let mut shown = table.reports.clone();
    if let Some(ext) = external.filter(|e| !e.is_empty()) {
        shown.extend(aggregate(&ext)?);
    }
    let rendered = render_side_by_side(&shown);
    fs::write(s.dir.join(format!("{stem}.md")), &rendered)?;
    print!("{rendered}");
    Ok(if table.failed.is_empty() {
        Outcome::Done
    } else {
        Outcome::Partial(table.failed.len())
    })
}

pub fn import_external(a: ImportArgs) -> Result<Outcome> {
    let runs = read_external(&a.file)?;
    let cfg = ExperimentConfig {
        experiment: crate::config::ExperimentSection {
            out: a.out,
            ..Default::default()
        },
        ..Default::default()
    };
    let dir = out_dir(&cfg)?;
    let reports = if runs.is_empty() {
        Vec::new()
    } else {
        aggregate(&runs)?
    };
    write_aggregate_csv(&reports, create(&dir.join("external_aggregate.csv"))?)?;
    let rendered = render_side_by_side(&reports);
    fs::write(dir.join("external_table.md"), &rendered)?;
    print!("{rendered}");
    Ok(Outcome::Done)
}
