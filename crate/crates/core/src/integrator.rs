//! Geometric ODE solvers on SE(3).
//!
//! All solvers advance the pose with exponential-map steps, so every node of a
//! path is a rotation to machine precision no matter how many steps are taken.
//! Runge-Kutta stages work in exp-coordinates frozen at the start of each step
//! (Munthe-Kaas style); stage derivatives are pulled back through a truncated
//! inverse `dexp` series.

use std::io::Write;

use crate::error::{Error, Result};
use crate::geometry::{d_geo, exp_map, geodesic_interp, Pose, Twist};

/// Which side the twist acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum Convention {
    /// `dZ/dt = hat(ξ) Z`; a step is `Exp(hξ) ∘ Z`.
    #[default]
    Spatial,
    /// `dZ/dt = Z hat(ξ)`; a step is `Z ∘ Exp(hξ)`.
    Body,
}

impl Convention {
    pub fn code(self) -> u8 {
        match self {
            Convention::Spatial => 0,
            Convention::Body => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Convention::Spatial),
            1 => Some(Convention::Body),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Convention::Spatial => "spatial",
            Convention::Body => "body",
        }
    }
}

impl std::str::FromStr for Convention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Convention::Spatial),
            "body" => Ok(Convention::Body),
            other => Err(Error::invalid(format!("unknown convention '{other}'"))),
        }
    }
}

/// A time-dependent twist field on SE(3).
pub trait VectorField {
    fn twist(&self, z: &Pose, t: f64) -> Result<Twist>;

    fn convention(&self) -> Convention {
        Convention::Spatial
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    pub f: F,
    pub convention: Convention,
}

impl<F> FnField<F>
where
    F: Fn(&Pose, f64) -> Twist,
{
    pub fn spatial(f: F) -> Self {
        FnField {
            f,
            convention: Convention::Spatial,
        }
    }

    pub fn body(f: F) -> Self {
        FnField {
            f,
            convention: Convention::Body,
        }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&Pose, f64) -> Twist,
{
    fn twist(&self, z: &Pose, t: f64) -> Result<Twist> {
        Ok((self.f)(z, t))
    }

    fn convention(&self) -> Convention {
        self.convention
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Euler,
    Rk4,
    Rk45,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::Rk4 => "rk4",
            SolverKind::Rk45 => "rk45",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SolverKind::Euler),
            "rk4" => Ok(SolverKind::Rk4),
            "rk45" => Ok(SolverKind::Rk45),
            other => Err(Error::invalid(format!("unknown solver '{other}'"))),
        }
    }
}

/// Solver configuration. For `Rk45`, `steps` sets the initial step `1/steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSpec {
    pub kind: SolverKind,
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            kind: SolverKind::Rk45,
            steps: 100,
            rtol: 1e-6,
            atol: 1e-8,
            max_steps: 10_000,
        }
    }
}

impl SolverSpec {
    pub fn euler(steps: usize) -> Self {
        SolverSpec {
            kind: SolverKind::Euler,
            steps,
            ..Self::default()
        }
    }

    pub fn rk4(steps: usize) -> Self {
        SolverSpec {
            kind: SolverKind::Rk4,
            steps,
            ..Self::default()
        }
    }

    pub fn rk45(rtol: f64, atol: f64) -> Self {
        SolverSpec {
            kind: SolverKind::Rk45,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn with_steps(self, steps: usize) -> Self {
        SolverSpec { steps, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("solver steps must be >= 1"));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::invalid("rtol and atol must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be >= 1"));
        }
        Ok(())
    }

    /// A budget of one step is always a single Euler step.
    pub fn normalized(self) -> Self {
        if self.steps == 1 {
            SolverSpec {
                kind: SolverKind::Euler,
                ..self
            }
        } else {
            self
        }
    }
}

/// Poses visited by an integration, with their times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowPath {
    pub times: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl FlowPath {
    fn start(z0: Pose) -> Self {
        FlowPath {
            times: vec![0.0],
            poses: vec![z0],
        }
    }

    fn push(&mut self, t: f64, z: Pose) {
        self.times.push(t);
        self.poses.push(z);
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn initial(&self) -> &Pose {
        &self.poses[0]
    }

    pub fn terminal(&self) -> &Pose {
        self.poses.last().expect("paths are never empty")
    }

    /// CSV with columns `t, m00 .. m33` (row-major homogeneous matrix).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("t");
        for i in 0..4 {
            for j in 0..4 {
                header.push_str(&format!(",m{i}{j}"));
            }
        }
        writeln!(w, "{header}")?;
        for (t, p) in self.times.iter().zip(&self.poses) {
            let row: Vec<String> = p.to_row_major().iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{t:?},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// One exponential step of size `h` along `xi`.
pub fn step_exp(z: &Pose, xi: &Twist, h: f64, convention: Convention) -> Pose {
    let step = exp_map(&(*xi * h));
    match convention {
        Convention::Spatial => step.compose(z),
        Convention::Body => z.compose(&step),
    }
}

/// Inverse of the trivialized differential of `exp` at `u`, applied to `v`,
/// truncated after the fourth-order bracket term.
fn dexp_inv(u: &Twist, v: &Twist, convention: Convention) -> Twist {
    let u = match convention {
        Convention::Spatial => *u,
        Convention::Body => -*u,
    };
    let b1 = u.bracket(v);
    let b2 = u.bracket(&b1);
    let b4 = u.bracket(&u.bracket(&b2));
    *v - b1 * 0.5 + b2 * (1.0 / 12.0) - b4 * (1.0 / 720.0)
}

/// Stage derivative in the exp-coordinates centered at `base`.
fn stage<F: VectorField + ?Sized>(
    field: &F,
    base: &Pose,
    u: &Twist,
    t: f64,
    convention: Convention,
) -> Result<Twist> {
    let z = step_exp(base, u, 1.0, convention);
    let xi = field.twist(&z, t)?;
    if !xi.is_finite() {
        return Err(Error::NumericFailure {
            layer: 0,
            detail: format!("non-finite field value at t = {t}"),
        });
    }
    Ok(dexp_inv(u, &xi, convention))
}

fn euler<F: VectorField + ?Sized>(field: &F, z0: Pose, n: usize) -> Result<FlowPath> {
    let conv = field.convention();
    let h = 1.0 / n as f64;
    let mut path = FlowPath::start(z0);
    let mut z = z0;
    for i in 0..n {
        let t = i as f64 * h;
        let xi = field.twist(&z, t)?;
        z = step_exp(&z, &xi, h, conv);
        path.push(if i + 1 == n { 1.0 } else { (i + 1) as f64 * h }, z);
    }
    Ok(path)
}

fn rk4<F: VectorField + ?Sized>(field: &F, z0: Pose, n: usize) -> Result<FlowPath> {
    let conv = field.convention();
    let h = 1.0 / n as f64;
    let mut path = FlowPath::start(z0);
    let mut z = z0;
    for i in 0..n {
        let t = i as f64 * h;
        let k1 = stage(field, &z, &Twist::zero(), t, conv)?;
        let k2 = stage(field, &z, &(k1 * (0.5 * h)), t + 0.5 * h, conv)?;
        let k3 = stage(field, &z, &(k2 * (0.5 * h)), t + 0.5 * h, conv)?;
        let k4 = stage(field, &z, &(k3 * h), t + h, conv)?;
        let u = (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        z = step_exp(&z, &u, 1.0, conv);
        path.push(if i + 1 == n { 1.0 } else { (i + 1) as f64 * h }, z);
    }
    Ok(path)
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const MIN_STEP: f64 = 1e-12;

fn rk45<F: VectorField + ?Sized>(field: &F, z0: Pose, spec: &SolverSpec) -> Result<FlowPath> {
    let conv = field.convention();
    let mut path = FlowPath::start(z0);
    let mut z = z0;
    let mut t = 0.0;
    let mut h = (1.0 / spec.steps as f64).min(1.0);
    let mut attempts = 0usize;
    let fail = |t: f64, reason: String, path: &FlowPath| Error::Integration {
        t,
        reason,
        partial: Box::new(path.clone()),
    };

    while t < 1.0 {
        if attempts >= spec.max_steps {
            return Err(fail(t, format!("exceeded {} steps", spec.max_steps), &path));
        }
        attempts += 1;
        let last = t + h >= 1.0 - 1e-14;
        if last {
            h = 1.0 - t;
        }
        if h < MIN_STEP {
            return Err(fail(t, format!("step size underflow (h = {h:e})"), &path));
        }

        let mut k = [Twist::zero(); 7];
        for s in 0..7 {
            let u = (0..s).fold(Twist::zero(), |acc, j| acc + k[j] * (h * DP_A[s][j]));
            k[s] = match stage(field, &z, &u, (t + DP_C[s] * h).min(1.0), conv) {
                Ok(v) => v,
                Err(Error::NumericFailure { detail, .. }) => return Err(fail(t, detail, &path)),
                Err(e) => return Err(e),
            };
        }
        let u5 = (0..7).fold(Twist::zero(), |acc, j| acc + k[j] * (h * DP_B5[j]));
        let u4 = (0..7).fold(Twist::zero(), |acc, j| acc + k[j] * (h * DP_B4[j]));
        let (a5, a4) = (u5.to_array(), u4.to_array());
        let err = a5
            .iter()
            .zip(&a4)
            .map(|(x5, x4)| (x5 - x4).abs() / (spec.atol + spec.rtol * x5.abs()))
            .fold(0.0, f64::max);

        if err <= 1.0 {
            z = step_exp(&z, &u5, 1.0, conv);
            t = if last { 1.0 } else { t + h };
            path.push(t, z);
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
    }
    Ok(path)
}

/// Integrates `field` from `z0` at t = 0 to t = 1.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    z0: &Pose,
    spec: &SolverSpec,
) -> Result<FlowPath> {
    spec.validate()?;
    if !z0.is_finite() {
        return Err(Error::invalid("initial pose is not finite"));
    }
    let spec = spec.normalized();
    match spec.kind {
        SolverKind::Euler => euler(field, *z0, spec.steps),
        SolverKind::Rk4 => rk4(field, *z0, spec.steps),
        SolverKind::Rk45 => rk45(field, *z0, &spec),
    }
}

/// Largest `d_geo` between an interior node and the geodesic chord between
/// the path's endpoints at the same time. Zero for paths with no interior nodes.
pub fn straightness(path: &FlowPath) -> Result<f64> {
    if path.len() < 2 {
        return Err(Error::invalid("straightness needs at least two nodes"));
    }
    let (z0, z1) = (path.initial(), path.terminal());
    let mut worst: f64 = 0.0;
    for (t, p) in path.times[1..path.len() - 1].iter().zip(&path.poses[1..]) {
        let chord = geodesic_interp(z0, z1, *t)?;
        worst = worst.max(d_geo(p, &chord)?);
    }
    Ok(worst)
}
