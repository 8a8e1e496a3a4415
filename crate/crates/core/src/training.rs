//! Flow 1 and reflow (Flow 2) training.
//!
//! A training pair joins a source pose `h0` (Gaussian noise in se(3) around
//! the current end-effector pose) to a demonstrated action `h1`. The drift is
//! regressed onto the constant geodesic velocity of the chord between them,
//! evaluated at a uniformly drawn point of that chord.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::drift::{ConditionedDrift, DriftModel, FlowStage, GradientTape, Observation};
use crate::error::{Error, Result};
use crate::geometry::{exp_map, geodesic_interp, log_map, rotation_distance, Pose, Twist, Vec3};
use crate::integrator::{integrate, Convention, SolverKind, SolverSpec};
use crate::tasks::{Dataset, MAX_STEP_ROTATION};

/// Largest accepted rotation of a noise twist.
pub const MAX_NOISE_ROTATION: f64 = MAX_STEP_ROTATION;
/// Attempts at drawing a loggable pair before giving up.
pub const MAX_PAIR_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Cosine,
    Constant,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Cosine => "cosine",
            LrSchedule::Constant => "constant",
        }
    }

    /// Learning rate used during `epoch` (0-based) of `epochs`.
    pub fn rate(self, lr: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let x = epoch as f64 / epochs.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(LrSchedule::Cosine),
            "constant" => Ok(LrSchedule::Constant),
            other => Err(Error::invalid(format!("unknown lr schedule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Plain stochastic gradient descent.
    Sgd,
    /// Adam with β = (0.9, 0.999), ε = 1e-8.
    Adam,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        }
    }
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::invalid(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// How reflow endpoints are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointMode {
    /// Integrate the Flow-1 ODE from a fresh noise pose.
    Flow1,
    /// Freeze one noise pose per sampled action and keep the demonstrated target.
    Gaussian,
}

impl EndpointMode {
    pub fn name(self) -> &'static str {
        match self {
            EndpointMode::Flow1 => "flow1",
            EndpointMode::Gaussian => "gaussian",
        }
    }
}

impl std::str::FromStr for EndpointMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow1" => Ok(EndpointMode::Flow1),
            "gaussian" => Ok(EndpointMode::Gaussian),
            other => Err(Error::invalid(format!("unknown endpoint mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Integration steps used when synthesizing reflow endpoints.
    pub rectified_step_budget: usize,
    /// Probability that a Flow-2 draw is a reflow pair.
    pub mix_ratio: f64,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub optimizer: Optimizer,
    /// Per-component standard deviation of the se(3) source noise.
    pub noise_scale: f64,
    /// Gradient norm cap, off when `None`.
    pub grad_clip: Option<f64>,
    pub endpoint: EndpointMode,
    /// Solver for reflow synthesis.
    pub solver: SolverKind,
    /// Number of reflow pairs; defaults to the number of training actions.
    pub reflow_pairs: Option<usize>,
}

impl TrainConfig {
    pub fn flow1() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 1,
            epochs: 5000,
            rectified_step_budget: 100,
            mix_ratio: 0.0,
            seed: 3407,
            lr_schedule: LrSchedule::Cosine,
            optimizer: Optimizer::Sgd,
            noise_scale: 0.5,
            grad_clip: None,
            endpoint: EndpointMode::Flow1,
            solver: SolverKind::Rk45,
            reflow_pairs: None,
        }
    }

    pub fn flow2() -> Self {
        TrainConfig {
            learning_rate: 8e-5,
            epochs: 3000,
            rectified_step_budget: 200,
            mix_ratio: 0.5,
            ..TrainConfig::flow1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.rectified_step_budget == 0 {
            return Err(Error::Config(
                "rectified_step_budget must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config("mix_ratio must lie in [0, 1]".into()));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return Err(Error::Config("noise_scale must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    /// Solver used for reflow synthesis.
    pub fn synthesis_solver(&self) -> SolverSpec {
        let spec = match self.solver {
            SolverKind::Euler => SolverSpec::euler(self.rectified_step_budget),
            SolverKind::Rk4 => SolverSpec::rk4(self.rectified_step_budget),
            SolverKind::Rk45 => SolverSpec::default().with_steps(self.rectified_step_budget),
        };
        spec.normalized()
    }

    /// `key = value` lines, stored in checkpoints and sidecar files.
    pub fn echo(&self) -> String {
        format!(
            "learning_rate = {:?}\nbatch_size = {}\nepochs = {}\nrectified_step_budget = {}\n\
             mix_ratio = {:?}\nseed = {}\nlr_schedule = \"{}\"\noptimizer = \"{}\"\nnoise_scale = {:?}\n\
             grad_clip = {}\nendpoint = \"{}\"\nsolver = \"{}\"\nreflow_pairs = {}\n",
            self.learning_rate,
            self.batch_size,
            self.epochs,
            self.rectified_step_budget,
            self.mix_ratio,
            self.seed,
            self.lr_schedule.name(),
            self.optimizer.name(),
            self.noise_scale,
            self.grad_clip.map_or("0".into(), |c| format!("{c:?}")),
            self.endpoint.name(),
            self.solver.name(),
            self.reflow_pairs.map_or("0".into(), |n| n.to_string()),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairSource {
    Original,
    Reflow,
}

/// One demonstrated action with what the policy observed before it.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub obs: Arc<Observation>,
    pub target: Pose,
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub h0: Pose,
    pub h1: Pose,
    pub obs: Arc<Observation>,
    pub source: PairSource,
}

impl TrainingPair {
    /// Builds a pair after checking the rotation bound between endpoints.
    pub fn new(h0: Pose, h1: Pose, obs: Arc<Observation>, source: PairSource) -> Result<Self> {
        let angle = rotation_distance(&h0, &h1)?;
        if angle > MAX_STEP_ROTATION {
            return Err(Error::invalid(format!(
                "pair rotation {angle} exceeds 0.9 pi"
            )));
        }
        Ok(TrainingPair {
            h0,
            h1,
            obs,
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// `Exp` of a twist with i.i.d. `N(0, scale²)` components; the rotation part
/// is redrawn until its angle is at most 0.9π.
pub fn sample_noise_pose<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Result<Pose> {
    Ok(exp_map(&sample_noise_twist(rng, scale)?))
}

pub fn sample_noise_twist<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Result<Twist> {
    let normal = Normal::new(0.0, scale)
        .ok()
        .filter(|_| scale > 0.0)
        .ok_or_else(|| Error::invalid(format!("noise scale must be positive, got {scale}")))?;
    let mut draw = || Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
    let omega = loop {
        let w = draw();
        if w.norm() <= MAX_NOISE_ROTATION {
            break w;
        }
    };
    Ok(Twist::new(omega, draw()))
}

/// One anchor per (demonstration, action). The first action is observed with
/// the end-effector at the cloud frame; later ones at the previous pose.
pub fn anchors_from_dataset(ds: &Dataset) -> Result<Vec<Anchor>> {
    let mut out = Vec::with_capacity(ds.len() * crate::tasks::HORIZON);
    for d in &ds.demonstrations {
        let base = Observation::at_frame(d.cloud.clone())?;
        let mut ee = base.frame().pose;
        for target in &d.trajectory {
            out.push(Anchor {
                obs: Arc::new(base.with_ee(ee)),
                target: *target,
            });
            ee = *target;
        }
    }
    Ok(out)
}

/// Noise-to-data pair for `anchor`, redrawing the noise if the endpoints are
/// too far apart in rotation.
pub fn original_pair<R: Rng + ?Sized>(
    anchor: &Anchor,
    scale: f64,
    rng: &mut R,
) -> Result<TrainingPair> {
    for attempt in 0..MAX_PAIR_ATTEMPTS {
        let h0 = anchor.obs.ee().compose(&sample_noise_pose(rng, scale)?);
        match TrainingPair::new(h0, anchor.target, anchor.obs.clone(), PairSource::Original) {
            Ok(p) => return Ok(p),
            Err(e) => debug!("pair rejected on attempt {attempt}: {e}"),
        }
    }
    Err(Error::invalid(format!(
        "no admissible noise pose after {MAX_PAIR_ATTEMPTS} attempts"
    )))
}

/// The regression target: the constant velocity of the chord from `h0` to
/// `h1`, in the twist convention of the model.
pub fn pair_target(pair: &TrainingPair, convention: Convention) -> Result<Twist> {
    match convention {
        Convention::Spatial => log_map(&pair.h1.compose(&pair.h0.inverse())),
        Convention::Body => log_map(&pair.h0.inverse().compose(&pair.h1)),
    }
}

/// Squared residual between the chord velocity and the drift at the chord
/// point for time `t`, and the parameter gradient of that loss.
pub fn flow1_loss(model: &DriftModel, pair: &TrainingPair, t: f64) -> Result<(f64, GradientTape)> {
    let mut tape = GradientTape::for_model(model);
    let loss = accumulate_loss(model, pair, t, 1.0, &mut tape)?;
    Ok((loss, tape))
}

fn accumulate_loss(
    model: &DriftModel,
    pair: &TrainingPair,
    t: f64,
    scale: f64,
    tape: &mut GradientTape,
) -> Result<f64> {
    let target = pair_target(pair, model.convention())?;
    let zt = geodesic_interp(&pair.h0, &pair.h1, t)?;
    let pred = model.drift(&zt, t, &pair.obs)?;
    let r = target - pred;
    // d/dθ |target - ξ|² = -2 rᵀ dξ/dθ
    model.accumulate_grad(&zt, t, &pair.obs, &(r * -2.0), scale, tape)?;
    Ok(r.norm_squared())
}

/// Loss alone, for a pair at time `t`.
pub fn pair_loss(model: &DriftModel, pair: &TrainingPair, t: f64) -> Result<f64> {
    let target = pair_target(pair, model.convention())?;
    let zt = geodesic_interp(&pair.h0, &pair.h1, t)?;
    Ok((target - model.drift(&zt, t, &pair.obs)?).norm_squared())
}

/// Mean loss over fixed `(pair, t)` samples.
pub fn evaluate_loss(model: &DriftModel, samples: &[(TrainingPair, f64)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let mut sum = 0.0;
    for (p, t) in samples {
        sum += pair_loss(model, p, *t)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Parameter update rule with its state.
enum Stepper {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Stepper {
    fn new(opt: Optimizer, n: usize) -> Self {
        match opt {
            Optimizer::Sgd => Stepper::Sgd,
            Optimizer::Adam => Stepper::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    fn step(
        &mut self,
        model: &mut DriftModel,
        tape: &mut GradientTape,
        lr: f64,
        clip: Option<f64>,
    ) {
        if let Some(c) = clip {
            let n = tape.norm();
            if n > c {
                tape.scale(c / n);
            }
        }
        let params = model.params_mut();
        match self {
            Stepper::Sgd => params
                .iter_mut()
                .zip(&tape.grads)
                .for_each(|(p, g)| *p -= lr * g),
            Stepper::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                for (((p, g), m), v) in params.iter_mut().zip(&tape.grads).zip(m).zip(v) {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

/// Shared SGD loop; `draw` yields the training pair for position `i` of an epoch.
fn run_epochs<F>(
    model: &mut DriftModel,
    cfg: &TrainConfig,
    epoch_len: usize,
    rng: &mut ChaCha8Rng,
    mut draw: F,
) -> Result<Vec<LossReport>>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Result<TrainingPair>,
{
    let start = Instant::now();
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut tape = GradientTape::for_model(model);
    let mut stepper = Stepper::new(cfg.optimizer, model.n_params());
    let mut order: Vec<usize> = (0..epoch_len).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule.rate(cfg.learning_rate, epoch, cfg.epochs);
        order.shuffle(rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            tape.zero();
            let w = 1.0 / batch.len() as f64;
            for (j, &i) in batch.iter().enumerate() {
                let pair = draw(i, rng)?;
                let t: f64 = rng.random();
                let loss = accumulate_loss(model, &pair, t, w, &mut tape)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        sample: b * cfg.batch_size + j,
                    });
                }
                total += loss;
            }
            stepper.step(model, &mut tape, lr, cfg.grad_clip);
        }
        let mean_loss = total / epoch_len as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, sample: 0 });
        }
        if epoch % 100 == 0 || epoch + 1 == cfg.epochs {
            debug!("epoch {epoch}: loss {mean_loss:.6e}, lr {lr:.3e}");
        }
        reports.push(LossReport {
            epoch,
            mean_loss,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok(reports)
}

/// Flow 1: straight-path matching on noise-to-demonstration pairs, with a
/// fresh noise pose and time per sample.
pub fn train_flow1(
    mut model: DriftModel,
    anchors: &[Anchor],
    cfg: &TrainConfig,
) -> Result<(DriftModel, Vec<LossReport>)> {
    cfg.validate()?;
    if anchors.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reports = run_epochs(&mut model, cfg, anchors.len(), &mut rng, |i, rng| {
        original_pair(&anchors[i], cfg.noise_scale, rng)
    })?;
    if cfg.epochs > 0 {
        model.stage = FlowStage::Flow1;
    }
    model.config_echo = format!("[flow1]\n{}", cfg.echo());
    if let Some(last) = reports.last() {
        info!(
            "flow 1 finished: {} epochs, final loss {:.6e}",
            cfg.epochs, last.mean_loss
        );
    }
    Ok((model, reports))
}

/// Reflow pairs plus what was dropped while producing them.
#[derive(Debug, Clone, Default)]
pub struct ReflowSet {
    pub pairs: Vec<TrainingPair>,
    /// Anchor each pair was drawn from, parallel to `pairs`.
    pub anchors: Vec<usize>,
    /// Pairs dropped because the solver failed.
    pub integration_failures: usize,
    /// Pairs dropped for exceeding the rotation bound.
    pub rejected: usize,
}

/// RNG for reflow pair `index`; independent of thread scheduling.
pub fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Synthesizes `n` reflow pairs from a Flow-1 model: draw an action and a
/// noise pose, integrate the Flow-1 ODE to `t = 1`, keep `(Z⁰, Z¹)`.
pub fn synthesize_reflow_pairs(
    model1: &DriftModel,
    anchors: &[Anchor],
    n: usize,
    cfg: &TrainConfig,
) -> Result<ReflowSet> {
    cfg.validate()?;
    if model1.stage != FlowStage::Flow1 {
        return Err(Error::invalid(format!(
            "reflow needs a flow 1 model, got stage {:?}",
            model1.stage
        )));
    }
    if n > 0 && anchors.is_empty() {
        return Err(Error::invalid("no anchors to synthesize from"));
    }
    let spec = cfg.synthesis_solver();
    let outcomes: Vec<Result<Synthesized>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = pair_rng(cfg.seed, i);
            let k = rng.random_range(0..anchors.len());
            let anchor = &anchors[k];
            let z0 = anchor
                .obs
                .ee()
                .compose(&sample_noise_pose(&mut rng, cfg.noise_scale)?);
            let z1 = match cfg.endpoint {
                EndpointMode::Gaussian => anchor.target,
                EndpointMode::Flow1 => {
                    let field = ConditionedDrift {
                        model: model1,
                        obs: &anchor.obs,
                    };
                    match integrate(&field, &z0, &spec) {
                        Ok(path) => *path.terminal(),
                        Err(e @ Error::Integration { .. }) => {
                            warn!("reflow pair {i} skipped: {e}");
                            return Ok(Synthesized::Failed);
                        }
                        Err(e) => return Err(e),
                    }
                }
            };
            match TrainingPair::new(z0, z1, anchor.obs.clone(), PairSource::Reflow) {
                Ok(p) => Ok(Synthesized::Pair(Box::new(p), k)),
                Err(e) => {
                    warn!("reflow pair {i} rejected: {e}");
                    Ok(Synthesized::Rejected)
                }
            }
        })
        .collect();
    let mut set = ReflowSet::default();
    for outcome in outcomes {
        match outcome? {
            Synthesized::Pair(p, k) => {
                set.pairs.push(*p);
                set.anchors.push(k);
            }
            Synthesized::Failed => set.integration_failures += 1,
            Synthesized::Rejected => set.rejected += 1,
        }
    }
    Ok(set)
}

enum Synthesized {
    Pair(Box<TrainingPair>, usize),
    Failed,
    Rejected,
}

/// How many Flow-2 draws came from each source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SourceCounts {
    pub original: usize,
    pub reflow: usize,
}

/// Flow 2: warm-started from Flow 1; each draw is a reflow pair with
/// probability `mix_ratio`, otherwise a fresh original pair. An epoch has as
/// many draws as there are anchors.
pub fn train_flow2(
    model1: &DriftModel,
    anchors: &[Anchor],
    reflow: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<(DriftModel, Vec<LossReport>, SourceCounts)> {
    cfg.validate()?;
    if anchors.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.mix_ratio > 0.0 && reflow.is_empty() {
        return Err(Error::invalid("mix_ratio > 0 requires reflow pairs"));
    }
    let mut model = model1.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut counts = SourceCounts::default();
    let reports = run_epochs(&mut model, cfg, anchors.len(), &mut rng, |i, rng| {
        if rng.random::<f64>() < cfg.mix_ratio {
            counts.reflow += 1;
            Ok(reflow[rng.random_range(0..reflow.len())].clone())
        } else {
            counts.original += 1;
            original_pair(&anchors[i], cfg.noise_scale, rng)
        }
    })?;
    model.stage = FlowStage::Flow2;
    model.config_echo = format!("{}[flow2]\n{}", model1.config_echo, cfg.echo());
    info!(
        "flow 2 finished: {} original / {} reflow draws",
        counts.original, counts.reflow
    );
    Ok((model, reports, counts))
}

/// Writes `epoch,mean_loss,lr` rows.
pub fn write_loss_csv<W: Write>(reports: &[LossReport], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["epoch", "mean_loss", "lr"])
        .map_err(csv_err)?;
    for r in reports {
        wtr.write_record([
            r.epoch.to_string(),
            format!("{:?}", r.mean_loss),
            format!("{:?}", r.lr),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::drift::ModelSpec;
    use crate::geometry::adjoint_apply;

    fn cloud() -> Vec<Vec3> {
        (0..40)
            .map(|i| {
                let s = i as f64 / 40.0;
                Vec3::new(3.0 * s * s, (7.0 * s).sin(), 0.3 * (13.0 * s).cos())
            })
            .collect()
    }

    fn anchor(ee: Pose, target: Pose) -> Anchor {
        Anchor {
            obs: Arc::new(Observation::new(cloud(), ee).unwrap()),
            target,
        }
    }

    fn translate(x: f64, y: f64, z: f64) -> Pose {
        exp_map(&Twist::new(Vec3::zeros(), Vec3::new(x, y, z)))
    }

    fn small_spec() -> ModelSpec {
        ModelSpec {
            hidden: vec![8],
            ..ModelSpec::default()
        }
    }

    fn varied_anchors(n: usize) -> Vec<Anchor> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|_| {
                let ee = sample_noise_pose(&mut rng, 0.4).unwrap();
                let step = sample_noise_pose(&mut rng, 0.2).unwrap();
                anchor(ee, ee.compose(&step))
            })
            .collect()
    }

    #[test]
    fn cosine_schedule_endpoints_and_monotonicity() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.rate(2e-4, 0, 100), 2e-4);
        assert!(s.rate(2e-4, 100, 100).abs() < 1e-20);
        let rates: Vec<f64> = (0..=100).map(|e| s.rate(1.0, e, 100)).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
        assert!((s.rate(1.0, 50, 100) - 0.5).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.3, 77, 100), 0.3);
    }

    #[test]
    fn defaults_follow_the_published_hyperparameters() {
        let f1 = TrainConfig::flow1();
        assert_eq!(
            (f1.learning_rate, f1.batch_size, f1.epochs, f1.seed),
            (2e-4, 1, 5000, 3407)
        );
        let f2 = TrainConfig::flow2();
        assert_eq!(
            (f2.learning_rate, f2.epochs, f2.mix_ratio),
            (8e-5, 3000, 0.5)
        );
        assert_eq!(f2.rectified_step_budget, 2 * f1.rectified_step_budget);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let bad = [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::flow1()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::flow1()
            },
            TrainConfig {
                mix_ratio: 1.5,
                ..TrainConfig::flow2()
            },
            TrainConfig {
                noise_scale: -1.0,
                ..TrainConfig::flow1()
            },
            TrainConfig {
                grad_clip: Some(0.0),
                ..TrainConfig::flow1()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn tiny_noise_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_noise_pose(&mut rng, 1e-12).unwrap();
        assert!(log_map(&p).unwrap().norm() < 1e-10);
        assert!(sample_noise_pose(&mut rng, 0.0).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let a = sample_noise_pose(&mut ChaCha8Rng::seed_from_u64(5), 0.5).unwrap();
        let b = sample_noise_pose(&mut ChaCha8Rng::seed_from_u64(5), 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_mean_is_zero_within_three_sigma() {
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3407);
        let mut sum = [0.0; 6];
        for _ in 0..n {
            let x = log_map(&sample_noise_pose(&mut rng, 0.5).unwrap())
                .unwrap()
                .to_array();
            sum.iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        let bound = 3.0 * 0.5 / (n as f64).sqrt();
        for s in sum {
            assert!((s / n as f64).abs() < bound, "{}", s / n as f64);
        }
    }

    #[test]
    fn unit_translation_with_zero_model_has_unit_loss() {
        let model = DriftModel::zeros(&ModelSpec::default()).unwrap();
        let a = anchor(Pose::identity(), translate(1.0, 0.0, 0.0));
        let pair =
            TrainingPair::new(Pose::identity(), a.target, a.obs, PairSource::Original).unwrap();
        for t in [0.0, 0.3, 1.0] {
            let (loss, tape) = flow1_loss(&model, &pair, t).unwrap();
            assert!((loss - 1.0).abs() < 1e-15);
            assert_eq!(tape.grads.len(), model.n_params());
        }
    }

    #[test]
    fn zero_model_loss_is_mean_squared_chord_norm() {
        let model = DriftModel::zeros(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<(TrainingPair, f64)> = varied_anchors(50)
            .iter()
            .map(|a| (original_pair(a, 0.5, &mut rng).unwrap(), rng.random()))
            .collect();
        let brute = samples
            .iter()
            .map(|(p, _)| {
                let x = log_map(&p.h1.compose(&p.h0.inverse())).unwrap().to_array();
                x.iter().map(|v| v * v).sum::<f64>()
            })
            .sum::<f64>()
            / samples.len() as f64;
        assert!((evaluate_loss(&model, &samples).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn planted_optimum_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for a in varied_anchors(10) {
            let pair = original_pair(&a, 0.5, &mut rng).unwrap();
            let target = pair_target(&pair, Convention::Spatial).unwrap();
            let mut model = DriftModel::zeros(&small_spec()).unwrap();
            // the head emits end-effector-frame twists; pull the target back
            model.set_output_bias(&adjoint_apply(&a.obs.ee().inverse(), &target));
            for t in [0.0, 0.25, 0.9] {
                assert!(pair_loss(&model, &pair, t).unwrap() < 1e-24);
            }
        }
        // body-convention head output is used as is
        let spec = ModelSpec {
            convention: Convention::Body,
            ..small_spec()
        };
        let a = &varied_anchors(1)[0];
        let pair = original_pair(a, 0.5, &mut rng).unwrap();
        let mut model = DriftModel::zeros(&spec).unwrap();
        model.set_output_bias(&pair_target(&pair, Convention::Body).unwrap());
        assert_eq!(pair_loss(&model, &pair, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn excessive_pair_rotation_is_rejected() {
        let a = anchor(Pose::identity(), Pose::identity());
        let far = exp_map(&Twist::new(
            Vec3::new(0.0, 0.0, 0.95 * std::f64::consts::PI),
            Vec3::zeros(),
        ));
        assert!(TrainingPair::new(Pose::identity(), far, a.obs, PairSource::Original).is_err());
    }

    #[test]
    fn single_mode_regression_converges() {
        // h0 = I, h1 = translate(1, 0, 0); vanishing noise pins h0
        let anchors = vec![anchor(Pose::identity(), translate(1.0, 0.0, 0.0))];
        let cfg = TrainConfig {
            epochs: 2000,
            learning_rate: 1e-2,
            noise_scale: 1e-9,
            ..TrainConfig::flow1()
        };
        let model = DriftModel::init(&small_spec(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (_, reports) = train_flow1(model, &anchors, &cfg).unwrap();
        assert!(
            reports.last().unwrap().mean_loss < 1e-3,
            "{:?}",
            reports.last()
        );
        assert_eq!(reports.len(), 2000);
    }

    #[test]
    fn loss_decreases_on_varied_data() {
        let anchors = varied_anchors(20);
        let cfg = TrainConfig {
            epochs: 300,
            learning_rate: 2e-3,
            ..TrainConfig::flow1()
        };
        let model = DriftModel::init(&small_spec(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (_, r) = train_flow1(model, &anchors, &cfg).unwrap();
        let head: f64 = r[..100].iter().map(|x| x.mean_loss).sum();
        let tail: f64 = r[200..].iter().map(|x| x.mean_loss).sum();
        assert!(tail < head, "{tail} vs {head}");
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let model = DriftModel::init(&small_spec(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::flow1()
        };
        let (out, reports) = train_flow1(model.clone(), &varied_anchors(3), &cfg).unwrap();
        assert!(reports.is_empty());
        assert_eq!(out.params(), model.params());
        assert_eq!(out.stage, FlowStage::Initialized);
    }

    #[test]
    fn seeded_training_is_bit_deterministic() {
        let anchors = varied_anchors(10);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 3,
            ..TrainConfig::flow1()
        };
        let run = || {
            let model = DriftModel::init(&small_spec(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
            train_flow1(model, &anchors, &cfg).unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(checkpoint::to_bytes(&a), checkpoint::to_bytes(&b));
        let curve = |r: &[LossReport]| r.iter().map(|x| x.mean_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(curve(&ra), curve(&rb));
    }

    #[test]
    fn adam_with_clipping_also_trains() {
        let anchors = varied_anchors(10);
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            grad_clip: Some(10.0),
            ..TrainConfig::flow1()
        };
        let model = DriftModel::init(&small_spec(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let (_, r) = train_flow1(model, &anchors, &cfg).unwrap();
        assert!(r.last().unwrap().mean_loss < r[0].mean_loss);
    }

    #[test]
    fn non_finite_loss_names_the_epoch() {
        let mut model = DriftModel::zeros(&small_spec()).unwrap();
        // a huge head bias overflows the squared residual
        let (_, b) = model.layer_offsets(model.n_layers() - 1);
        model.params_mut()[b] = 1e200;
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::flow1()
        };
        match train_flow1(model, &varied_anchors(2), &cfg) {
            Err(Error::NumericFailure { .. }) | Err(Error::NonFiniteLoss { epoch: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    fn planted_flow1(xi: &Twist) -> DriftModel {
        let mut model = DriftModel::zeros(&small_spec()).unwrap();
        model.set_output_bias(xi);
        model.stage = FlowStage::Flow1;
        model
    }

    #[test]
    fn reflow_of_a_constant_field_is_its_exponential() {
        let xi = Twist::from_array([0.3, -0.2, 0.5, 0.4, 0.1, -0.6]);
        let model = planted_flow1(&xi);
        let anchors = vec![anchor(Pose::identity(), translate(0.1, 0.0, 0.0))];
        let set = synthesize_reflow_pairs(&model, &anchors, 16, &TrainConfig::flow2()).unwrap();
        assert_eq!(
            set.pairs.len() + set.rejected + set.integration_failures,
            16
        );
        assert!(!set.pairs.is_empty());
        for p in &set.pairs {
            let expected = exp_map(&xi).compose(&p.h0);
            assert!(crate::geometry::d_geo(&expected, &p.h1).unwrap() < 1e-6);
            assert_eq!(p.source, PairSource::Reflow);
            assert!(rotation_distance(&p.h0, &p.h1).unwrap() <= MAX_STEP_ROTATION);
        }
    }

    #[test]
    fn reflow_edge_cases() {
        let model = planted_flow1(&Twist::zero());
        let anchors = varied_anchors(3);
        let cfg = TrainConfig::flow2();
        assert!(synthesize_reflow_pairs(&model, &anchors, 0, &cfg)
            .unwrap()
            .pairs
            .is_empty());
        let untrained = DriftModel::zeros(&small_spec()).unwrap();
        assert!(synthesize_reflow_pairs(&untrained, &anchors, 4, &cfg).is_err());
        // synthesis is independent of thread scheduling
        let a = synthesize_reflow_pairs(&model, &anchors, 8, &cfg).unwrap();
        let b = synthesize_reflow_pairs(&model, &anchors, 8, &cfg).unwrap();
        let ends = |s: &ReflowSet| s.pairs.iter().map(|p| p.h1).collect::<Vec<_>>();
        assert_eq!(ends(&a), ends(&b));
    }

    #[test]
    fn gaussian_endpoints_keep_demonstrated_targets() {
        let model = planted_flow1(&Twist::zero());
        let anchors = varied_anchors(4);
        let cfg = TrainConfig {
            endpoint: EndpointMode::Gaussian,
            ..TrainConfig::flow2()
        };
        let set = synthesize_reflow_pairs(&model, &anchors, 10, &cfg).unwrap();
        for p in &set.pairs {
            assert!(anchors.iter().any(|a| a.target == p.h1));
        }
    }

    fn reflow_pool(model: &DriftModel, anchors: &[Anchor]) -> Vec<TrainingPair> {
        synthesize_reflow_pairs(model, anchors, 20, &TrainConfig::flow2())
            .unwrap()
            .pairs
    }

    #[test]
    fn mix_ratio_controls_the_source_counts() {
        let model1 = planted_flow1(&Twist::zero());
        let anchors = varied_anchors(10);
        let reflow = reflow_pool(&model1, &anchors);
        let counts = |rho: f64, epochs: usize| {
            let cfg = TrainConfig {
                mix_ratio: rho,
                epochs,
                ..TrainConfig::flow2()
            };
            train_flow2(&model1, &anchors, &reflow, &cfg).unwrap().2
        };
        assert_eq!(
            counts(0.0, 5),
            SourceCounts {
                original: 50,
                reflow: 0
            }
        );
        assert_eq!(
            counts(1.0, 5),
            SourceCounts {
                original: 0,
                reflow: 50
            }
        );
        let c = counts(0.5, 1000);
        assert_eq!(c.original + c.reflow, 10_000);
        let frac = c.reflow as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[test]
    fn flow2_needs_reflow_pairs_when_mixing() {
        let model1 = planted_flow1(&Twist::zero());
        assert!(train_flow2(&model1, &varied_anchors(2), &[], &TrainConfig::flow2()).is_err());
    }

    #[test]
    fn flow2_warm_starts_from_flow1() {
        let anchors = varied_anchors(10);
        let cfg1 = TrainConfig {
            epochs: 30,
            ..TrainConfig::flow1()
        };
        let init = DriftModel::init(&small_spec(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (model1, _) = train_flow1(init, &anchors, &cfg1).unwrap();
        let reflow = reflow_pool(&model1, &anchors);
        let cfg2 = TrainConfig {
            epochs: 0,
            ..TrainConfig::flow2()
        };
        let (start, _, _) = train_flow2(&model1, &anchors, &reflow, &cfg2).unwrap();
        assert_eq!(start.stage, FlowStage::Flow2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let subset: Vec<(TrainingPair, f64)> = anchors
            .iter()
            .map(|a| (original_pair(a, 0.5, &mut rng).unwrap(), rng.random()))
            .collect();
        let l1 = evaluate_loss(&model1, &subset).unwrap();
        let l2 = evaluate_loss(&start, &subset).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(start.config_echo.starts_with("[flow1]\n"));
        assert!(start.config_echo.contains("[flow2]\nlearning_rate = 8e-5"));
    }

    #[test]
    fn anchors_chain_previous_targets() {
        let ds = Dataset::generate(
            crate::tasks::Task::RotatingTriangle,
            crate::tasks::Split::Train,
            2,
            1,
        );
        let anchors = anchors_from_dataset(&ds).unwrap();
        assert_eq!(anchors.len(), 2 * crate::tasks::HORIZON);
        assert_eq!(*anchors[0].obs.ee(), anchors[0].obs.frame().pose);
        for k in 1..crate::tasks::HORIZON {
            assert_eq!(*anchors[k].obs.ee(), anchors[k - 1].target);
        }
    }

    #[test]
    fn loss_csv_has_documented_columns() {
        let reports = [LossReport {
            epoch: 0,
            mean_loss: 0.5,
            lr: 2e-4,
            wall_time: 0.1,
        }];
        let mut buf = Vec::new();
        write_loss_csv(&reports, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,mean_loss,lr\n0,0.5,0.0002\n"
        );
    }
}
