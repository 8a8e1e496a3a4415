//! Equivariant drift model.
//!
//! The network never sees world coordinates. The conditioning point cloud
//! defines a frame (centroid + sign-fixed PCA axes). The query pose is
//! expressed relative to the current end-effector pose, the end-effector
//! relative to the cloud frame, and the cloud by a rigid-invariant radial
//! histogram. The network predicts a twist in the end-effector frame which is
//! carried back with the adjoint of that pose. Rigidly moving the pose, the
//! end-effector and the cloud together therefore moves the output by exactly
//! the same adjoint. With the end-effector placed at the cloud frame this is
//! plain canonicalization by the cloud frame.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{adjoint_apply, log_map_principal, Pose, Rotation, Twist, Vec3};
use crate::integrator::{Convention, VectorField};
use crate::tasks::Task;

/// Number of radial histogram bins in the cloud descriptor.
pub const HISTOGRAM_BINS: usize = 16;
/// Radial extent (meters) covered by the histogram; farther points land in the last bin.
pub const HISTOGRAM_RADIUS: f64 = 1.0;
/// Width of the pose featurization: rotation matrix, translation and log
/// coordinates.
pub const POSE_FEATURES: usize = 18;
/// Inputs per layer-0 row: the state and the end-effector pose, each as
/// [`POSE_FEATURES`] values, then time and cloud features.
const POSE_INPUTS: usize = 2 * POSE_FEATURES;
/// Hard cap on the drift norm.
pub const OUTPUT_CAP: f64 = 1e3;
/// Third moments below this magnitude count as ties for PCA sign fixing.
pub const MOMENT_TIE: f64 = 1e-9;
/// Relative eigengap below which the PCA frame is considered degenerate.
pub const EIGENGAP_TOL: f64 = 1e-6;

pub const DEFAULT_TIME_FREQS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Frame attached to a point cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationFrame {
    pub pose: Pose,
    /// True when the PCA spectrum was too flat and the identity rotation was used.
    pub degenerate: bool,
}

fn centroid(cloud: &[Vec3]) -> Vec3 {
    cloud.iter().fold(Vec3::zeros(), |acc, p| acc + p) / cloud.len() as f64
}

/// Orients `axis` so the third moment of the projections is nonnegative.
fn fix_sign(axis: Vec3, centered: &[Vec3]) -> Vec3 {
    let n = centered.len() as f64;
    let moment = centered.iter().map(|p| p.dot(&axis).powi(3)).sum::<f64>() / n;
    if moment > MOMENT_TIE {
        axis
    } else if moment < -MOMENT_TIE {
        -axis
    } else {
        // lexicographic: first clearly nonzero component positive
        let lead = axis
            .iter()
            .copied()
            .find(|c| c.abs() > 1e-12)
            .unwrap_or(1.0);
        if lead < 0.0 {
            -axis
        } else {
            axis
        }
    }
}

struct Pca {
    centroid: Vec3,
    centered: Vec<Vec3>,
    /// Descending eigenvalues with matching unit eigenvectors.
    values: [f64; 3],
    axes: [Vec3; 3],
}

fn pca(cloud: &[Vec3]) -> Result<Pca> {
    if cloud.is_empty() {
        return Err(Error::invalid("empty point cloud"));
    }
    if cloud.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
        return Err(Error::invalid("point cloud has non-finite coordinates"));
    }
    let c = centroid(cloud);
    let centered: Vec<Vec3> = cloud.iter().map(|p| p - c).collect();
    let mut cov = Matrix3::zeros();
    for p in &centered {
        cov += p * p.transpose();
    }
    cov /= cloud.len() as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Ok(Pca {
        centroid: c,
        centered,
        values: order.map(|i| eig.eigenvalues[i]),
        axes: order.map(|i| eig.eigenvectors.column(i).into_owned()),
    })
}

impl Pca {
    fn relative_gap(&self) -> f64 {
        let l = &self.values;
        if l[0] <= 0.0 || self.centered.len() < 3 {
            return 0.0;
        }
        (l[0] - l[1]).min(l[1] - l[2]) / l[0]
    }

    fn third_moment(&self, axis: &Vec3) -> f64 {
        self.centered
            .iter()
            .map(|p| p.dot(axis).powi(3))
            .sum::<f64>()
            / self.centered.len() as f64
    }
}

/// Conditioning of a cloud's frame: the relative eigengap of its covariance
/// and the smaller |third moment| along the two leading axes. Frames whose
/// gap is near [`EIGENGAP_TOL`] or whose moments are near [`MOMENT_TIE`] are
/// not reliably equivariant.
pub fn frame_margin(cloud: &[Vec3]) -> Result<(f64, f64)> {
    let pca = pca(cloud)?;
    let m = pca
        .third_moment(&pca.axes[0])
        .abs()
        .min(pca.third_moment(&pca.axes[1]).abs());
    Ok((pca.relative_gap(), m))
}

/// Centroid translation and sign-fixed PCA rotation of `cloud`.
///
/// The first two principal axes are oriented by their third moments and the
/// third is their cross product, so the result is always a proper rotation.
/// Clouds with a repeated eigenvalue (relative gap below [`EIGENGAP_TOL`])
/// fall back to the identity rotation.
pub fn observation_frame(cloud: &[Vec3]) -> Result<ObservationFrame> {
    let pca = pca(cloud)?;
    if pca.relative_gap() <= EIGENGAP_TOL {
        return Ok(ObservationFrame {
            pose: Pose::from_translation(pca.centroid),
            degenerate: true,
        });
    }
    let e1 = fix_sign(pca.axes[0], &pca.centered);
    let e2 = fix_sign(pca.axes[1], &pca.centered);
    let e3 = e1.cross(&e2);
    let r = Matrix3::from_columns(&[e1, e2, e3]);
    Ok(ObservationFrame {
        pose: Pose::new(Rotation::from_matrix_unchecked(r), pca.centroid),
        degenerate: false,
    })
}

/// Expresses `z` in the cloud frame: returns `(frame⁻¹ ∘ z, frame)`.
pub fn canonicalize(z: &Pose, cloud: &[Vec3]) -> Result<(Pose, ObservationFrame)> {
    let frame = observation_frame(cloud)?;
    Ok((frame.pose.inverse().compose(z), frame))
}

/// Rigid-invariant descriptor: normalized histogram of point distances from
/// the frame origin over `[0, HISTOGRAM_RADIUS)` in [`HISTOGRAM_BINS`] bins.
pub fn cloud_features(cloud: &[Vec3], frame: &ObservationFrame) -> Result<Vec<f64>> {
    if cloud.is_empty() {
        return Err(Error::invalid("empty point cloud"));
    }
    let origin = frame.pose.translation();
    let mut radii: Vec<f64> = cloud.iter().map(|p| (p - origin).norm()).collect();
    radii.sort_by(f64::total_cmp);
    let mut counts = [0usize; HISTOGRAM_BINS];
    for r in radii {
        let bin = ((r / HISTOGRAM_RADIUS) * HISTOGRAM_BINS as f64) as usize;
        counts[bin.min(HISTOGRAM_BINS - 1)] += 1;
    }
    let n = cloud.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / n).collect())
}

/// What the policy sees before an action: a point cloud (with its frame and
/// descriptor precomputed) and the current end-effector pose.
#[derive(Debug, Clone)]
pub struct Observation {
    cloud: Vec<Vec3>,
    ee: Pose,
    frame: ObservationFrame,
    features: Vec<f64>,
}

impl Observation {
    pub fn new(cloud: Vec<Vec3>, ee: Pose) -> Result<Self> {
        if !ee.is_finite() {
            return Err(Error::invalid("end-effector pose must be finite"));
        }
        let frame = observation_frame(&cloud)?;
        let features = cloud_features(&cloud, &frame)?;
        Ok(Observation {
            cloud,
            ee,
            frame,
            features,
        })
    }

    /// Observation whose end-effector sits at the cloud frame itself.
    pub fn at_frame(cloud: Vec<Vec3>) -> Result<Self> {
        let frame = observation_frame(&cloud)?;
        Observation::new(cloud, frame.pose)
    }

    pub fn with_ee(&self, ee: Pose) -> Self {
        Observation { ee, ..self.clone() }
    }

    pub fn ee(&self) -> &Pose {
        &self.ee
    }

    pub fn cloud(&self) -> &[Vec3] {
        &self.cloud
    }

    pub fn frame(&self) -> &ObservationFrame {
        &self.frame
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// The same observation after moving the cloud by `g`.
    pub fn transformed(&self, g: &Pose) -> Result<Self> {
        Observation::new(
            self.cloud.iter().map(|p| g.transform_point(p)).collect(),
            g.compose(&self.ee),
        )
    }
}

/// Which training stage produced a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlowStage {
    Initialized = 0,
    Flow1 = 1,
    Flow2 = 2,
}

impl FlowStage {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            FlowStage::Initialized => "init",
            FlowStage::Flow1 => "flow1",
            FlowStage::Flow2 => "flow2",
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FlowStage::Initialized),
            1 => Some(FlowStage::Flow1),
            2 => Some(FlowStage::Flow2),
            _ => None,
        }
    }
}

/// Architecture of the drift network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub time_embed_freqs: Vec<f64>,
    pub convention: Convention,
    /// Adds a learned linear map from the input features straight to the head.
    pub linear_skip: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden: vec![64, 64],
            time_embed_freqs: DEFAULT_TIME_FREQS.to_vec(),
            convention: Convention::Spatial,
            linear_skip: false,
        }
    }
}

impl ModelSpec {
    pub fn input_width(&self) -> usize {
        POSE_INPUTS + 2 * self.time_embed_freqs.len() + HISTOGRAM_BINS
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_width()];
        sizes.extend(&self.hidden);
        sizes.push(6);
        sizes
    }
}

/// Tanh MLP drift `ξ_θ(z, t | cloud)` with a linear 6-wide head.
///
/// Parameters are stored flat; layer `l` holds its `n_out × n_in` weights
/// row-major followed by its `n_out` biases. With a linear skip, a final
/// `6 × n_in` block maps the input features directly onto the output.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftModel {
    layer_sizes: Vec<usize>,
    time_embed_freqs: Vec<f64>,
    convention: Convention,
    linear_skip: bool,
    params: Vec<f64>,
    pub stage: FlowStage,
    pub task: Option<Task>,
    /// Free-form training configuration, carried into checkpoints.
    pub config_echo: String,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn total_params(sizes: &[usize], linear_skip: bool) -> usize {
    param_count(sizes) + if linear_skip { 6 * sizes[0] } else { 0 }
}

impl DriftModel {
    /// All-zero parameters (the drift is identically zero).
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        let layer_sizes = spec.layer_sizes();
        Self::from_parts(
            layer_sizes.clone(),
            spec.time_embed_freqs.clone(),
            spec.convention,
            spec.linear_skip,
            vec![0.0; total_params(&layer_sizes, spec.linear_skip)],
        )
    }

    /// Glorot-uniform weights, zero biases, and the head scaled by 0.01 so the
    /// initial flow is close to the identity.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(spec)?;
        let n_layers = model.n_layers();
        for l in 0..n_layers {
            let (n_in, n_out) = (model.layer_sizes[l], model.layer_sizes[l + 1]);
            let mut s = (6.0 / (n_in + n_out) as f64).sqrt();
            if l + 1 == n_layers {
                s *= 0.01;
            }
            let (w, _) = model.layer_offsets(l);
            for p in &mut model.params[w..w + n_in * n_out] {
                *p = rng.random_range(-s..=s);
            }
        }
        Ok(model)
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        time_embed_freqs: Vec<f64>,
        convention: Convention,
        linear_skip: bool,
        params: Vec<f64>,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be >= 2 positive entries"));
        }
        if *layer_sizes.last().unwrap() != 6 {
            return Err(Error::invalid("output layer must have width 6"));
        }
        if time_embed_freqs
            .iter()
            .any(|f| !(f.is_finite() && *f > 0.0))
        {
            return Err(Error::invalid(
                "time embedding frequencies must be positive",
            ));
        }
        let expected_in = POSE_INPUTS + 2 * time_embed_freqs.len() + HISTOGRAM_BINS;
        if layer_sizes[0] != expected_in {
            return Err(Error::invalid(format!(
                "input width {} does not match features ({expected_in})",
                layer_sizes[0]
            )));
        }
        if params.len() != total_params(&layer_sizes, linear_skip) {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                total_params(&layer_sizes, linear_skip),
                params.len()
            )));
        }
        Ok(DriftModel {
            layer_sizes,
            time_embed_freqs,
            convention,
            linear_skip,
            params,
            stage: FlowStage::Initialized,
            task: None,
            config_echo: String::new(),
        })
    }

    /// The architecture this model was built from.
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            hidden: self.layer_sizes[1..self.layer_sizes.len() - 1].to_vec(),
            time_embed_freqs: self.time_embed_freqs.clone(),
            convention: self.convention,
            linear_skip: self.linear_skip,
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn time_embed_freqs(&self) -> &[f64] {
        &self.time_embed_freqs
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn linear_skip(&self) -> bool {
        self.linear_skip
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Offsets of layer `l`'s weight block and bias block in the flat vector.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let w = param_count(&self.layer_sizes[..=l]);
        (w, w + self.layer_sizes[l] * self.layer_sizes[l + 1])
    }

    fn skip_offset(&self) -> usize {
        param_count(&self.layer_sizes)
    }

    /// Sets the output bias (in the end-effector frame); handy for planted fields.
    pub fn set_output_bias(&mut self, x: &Twist) {
        let (_, b) = self.layer_offsets(self.n_layers() - 1);
        self.params[b..b + 6].copy_from_slice(&x.to_array());
    }

    /// Network input for `local` (query pose relative to the end-effector) at time `t`.
    pub fn features(&self, local: &Pose, t: f64, obs: &Observation) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.layer_sizes[0]);
        let ee = obs.frame.pose.inverse().compose(&obs.ee);
        for p in [local, &ee] {
            f.extend(p.rotation().matrix().iter());
            f.extend(p.translation().iter());
            f.extend(log_map_principal(p).to_array());
        }
        for &freq in &self.time_embed_freqs {
            let (s, c) = (std::f64::consts::TAU * freq * t).sin_cos();
            f.push(s);
            f.push(c);
        }
        f.extend_from_slice(obs.features());
        f
    }

    /// Runs the MLP. When `acts` is given it receives every layer's output
    /// (post-activation) for the backward pass.
    fn forward(&self, input: &[f64], mut acts: Option<&mut Vec<Vec<f64>>>) -> Result<[f64; 6]> {
        let n_layers = self.n_layers();
        let mut a = input.to_vec();
        let skip: Option<Vec<f64>> = self.linear_skip.then(|| {
            let n_in = input.len();
            self.params[self.skip_offset()..]
                .chunks_exact(n_in)
                .map(|row| row.iter().zip(input).map(|(w, x)| w * x).sum())
                .collect()
        });
        for l in 0..n_layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let w = &self.params[w_off..w_off + n_in * n_out];
            let b = &self.params[b_off..b_off + n_out];
            let last = l + 1 == n_layers;
            let mut z: Vec<f64> = w
                .chunks_exact(n_in)
                .zip(b)
                .map(|(row, bi)| row.iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>() + bi)
                .collect();
            if !last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            } else if let Some(skip) = &skip {
                z.iter_mut().zip(skip).for_each(|(v, s)| *v += s);
            }
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericFailure {
                    layer: l,
                    detail: "non-finite activation".into(),
                });
            }
            if let Some(acts) = acts.as_deref_mut() {
                acts.push(a);
            }
            a = z;
        }
        let out: [f64; 6] = a.try_into().expect("head width is 6");
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > OUTPUT_CAP {
            return Err(Error::NumericFailure {
                layer: n_layers - 1,
                detail: format!("drift norm {norm:e} exceeds cap {OUTPUT_CAP:e}"),
            });
        }
        Ok(out)
    }

    fn check_time(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::invalid(format!("time {t} outside [0, 1]")))
        }
    }

    /// Raw network output in the end-effector frame.
    pub fn raw_output(&self, z: &Pose, t: f64, obs: &Observation) -> Result<Twist> {
        Self::check_time(t)?;
        let local = obs.ee.inverse().compose(z);
        Ok(Twist::from_array(
            self.forward(&self.features(&local, t, obs), None)?,
        ))
    }

    fn to_working_frame(&self, raw: &Twist, obs: &Observation) -> Twist {
        match self.convention {
            Convention::Spatial => adjoint_apply(&obs.ee, raw),
            // body twists are invariant under left motions
            Convention::Body => *raw,
        }
    }

    fn upstream_to_canonical(&self, upstream: &Twist, obs: &Observation) -> Twist {
        match self.convention {
            Convention::Spatial => {
                // transpose of Ad_E = [[R, 0], [t^R, R]]
                let r = obs.ee.rotation().matrix();
                let t = obs.ee.translation();
                Twist::new(
                    r.transpose() * (upstream.omega + upstream.rho.cross(t)),
                    r.transpose() * upstream.rho,
                )
            }
            Convention::Body => *upstream,
        }
    }

    /// Drift twist at `(z, t)` for observation `obs`, in the model's convention.
    pub fn drift(&self, z: &Pose, t: f64, obs: &Observation) -> Result<Twist> {
        let raw = self.raw_output(z, t, obs)?;
        Ok(self.to_working_frame(&raw, obs))
    }

    /// Drift plus the parameter gradient of `upstreamᵀ · drift`.
    pub fn drift_with_grad(
        &self,
        z: &Pose,
        t: f64,
        obs: &Observation,
        upstream: &Twist,
    ) -> Result<(Twist, GradientTape)> {
        let mut tape = GradientTape::for_model(self);
        let out = self.accumulate_grad(z, t, obs, upstream, 1.0, &mut tape)?;
        Ok((out, tape))
    }

    /// Like [`drift_with_grad`](Self::drift_with_grad) but adds `scale ×` the
    /// gradient into an existing tape.
    pub fn accumulate_grad(
        &self,
        z: &Pose,
        t: f64,
        obs: &Observation,
        upstream: &Twist,
        scale: f64,
        tape: &mut GradientTape,
    ) -> Result<Twist> {
        Self::check_time(t)?;
        if tape.grads.len() != self.params.len() {
            return Err(Error::invalid("gradient tape shape does not match model"));
        }
        let local = obs.ee.inverse().compose(z);
        let input = self.features(&local, t, obs);
        let mut acts = Vec::with_capacity(self.n_layers());
        let out = Twist::from_array(self.forward(&input, Some(&mut acts))?);

        let mut delta: Vec<f64> = self
            .upstream_to_canonical(upstream, obs)
            .to_array()
            .iter()
            .map(|v| v * scale)
            .collect();
        if self.linear_skip {
            let (off, n_in) = (self.skip_offset(), input.len());
            for (o, d) in delta.iter().enumerate() {
                let row = &mut tape.grads[off + o * n_in..off + (o + 1) * n_in];
                row.iter_mut().zip(&input).for_each(|(g, x)| *g += d * x);
            }
        }
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let a_in = &acts[l];
            for (o, d) in delta.iter().enumerate() {
                let row = &mut tape.grads[w_off + o * n_in..w_off + (o + 1) * n_in];
                row.iter_mut().zip(a_in).for_each(|(g, a)| *g += d * a);
                tape.grads[b_off + o] += d;
            }
            if l > 0 {
                let w = &self.params[w_off..w_off + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for (o, d) in delta.iter().enumerate() {
                    prev.iter_mut()
                        .zip(&w[o * n_in..(o + 1) * n_in])
                        .for_each(|(p, wi)| *p += wi * d);
                }
                // a_in is tanh output of layer l-1
                prev.iter_mut()
                    .zip(a_in)
                    .for_each(|(p, a)| *p *= 1.0 - a * a);
                delta = prev;
            }
        }
        Ok(self.to_working_frame(&out, obs))
    }
}

/// Per-parameter gradient accumulators, laid out like [`DriftModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub grads: Vec<f64>,
}

impl GradientTape {
    pub fn for_model(model: &DriftModel) -> Self {
        GradientTape {
            grads: vec![0.0; model.n_params()],
        }
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().for_each(|g| *g *= s);
    }
}

/// A drift model bound to one observation, usable as an ODE right-hand side.
#[derive(Debug, Clone, Copy)]
pub struct ConditionedDrift<'a> {
    pub model: &'a DriftModel,
    pub obs: &'a Observation,
}

impl VectorField for ConditionedDrift<'_> {
    fn twist(&self, z: &Pose, t: f64) -> Result<Twist> {
        self.model.drift(z, t.clamp(0.0, 1.0), self.obs)
    }

    fn convention(&self) -> Convention {
        self.model.convention
    }
}
