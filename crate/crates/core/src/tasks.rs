//! Synthetic manipulation demonstrations and their file formats.
//!
//! Three task families share one record shape: a point cloud observation, a
//! ten-step end-effector pose trajectory and a gripper channel. Every
//! trajectory is anchored to the cloud's PCA frame so that a rigid motion of
//! the scene moves the demonstration along with it.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `SE3FDSET`                        |
//! | 8      | 4    | format version (u32, currently 1)       |
//! | 12     | 1    | task code (0 painting, 1 door, 2 triangle) |
//! | 13     | 1    | split (0 train, 1 test)                 |
//! | 14     | 2    | reserved, zero                          |
//! | 16     | 8    | generation seed (u64)                   |
//! | 24     | 4    | demonstration count (u32)               |
//! | 28     | 4    | points per cloud N (u32)                |
//! | 32     | 4    | horizon L (u32)                         |
//! | 36     | ...  | per demonstration: N×3 f64 cloud, L×16 f64 row-major poses, L f64 gripper |

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

use crate::drift::{frame_margin, observation_frame};
use crate::error::{Error, Result};
use crate::geometry::{rotation_distance, Pose, Rotation, Vec3};

/// Action steps per demonstration.
pub const HORIZON: usize = 10;
/// Largest rotation allowed between consecutive poses.
pub const MAX_STEP_ROTATION: f64 = 0.9 * std::f64::consts::PI;

pub const DATASET_MAGIC: &[u8; 8] = b"SE3FDSET";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 36;

/// Generators only accept clouds whose frame is this well conditioned.
const MIN_RELATIVE_GAP: f64 = 1e-2;
const MIN_MOMENT: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Painting,
    DoorOpening,
    RotatingTriangle,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Painting, Task::DoorOpening, Task::RotatingTriangle];

    pub fn code(self) -> u8 {
        match self {
            Task::Painting => 0,
            Task::DoorOpening => 1,
            Task::RotatingTriangle => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.code() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Painting => "painting",
            Task::DoorOpening => "door_opening",
            Task::RotatingTriangle => "rotating_triangle",
        }
    }

    pub fn n_points(self) -> usize {
        match self {
            Task::Painting => 256,
            Task::DoorOpening => 128,
            Task::RotatingTriangle => 100,
        }
    }

    /// Demonstration count of the reference setup.
    pub fn default_count(self) -> usize {
        match self {
            Task::Painting => 31,
            Task::DoorOpening => 10,
            Task::RotatingTriangle => 500,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Task> {
        match s {
            "painting" => Ok(Task::Painting),
            "door_opening" | "door" => Ok(Task::DoorOpening),
            "rotating_triangle" | "triangle" => Ok(Task::RotatingTriangle),
            other => Err(Error::invalid(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Split> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub task: Task,
    pub cloud: Vec<Vec3>,
    pub trajectory: Vec<Pose>,
    pub gripper: Vec<f64>,
}

impl Demonstration {
    /// Checks cloud size, horizon, gripper range and the step rotation bound.
    pub fn validate(&self) -> Result<()> {
        if self.cloud.len() != self.task.n_points() {
            return Err(Error::invalid(format!(
                "{} cloud has {} points, expected {}",
                self.task,
                self.cloud.len(),
                self.task.n_points()
            )));
        }
        if self.trajectory.len() != HORIZON || self.gripper.len() != HORIZON {
            return Err(Error::invalid("trajectory and gripper must have length 10"));
        }
        if self.gripper.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::invalid("gripper values must lie in [0, 1]"));
        }
        for w in self.trajectory.windows(2) {
            let angle = rotation_distance(&w[0], &w[1])?;
            if angle > MAX_STEP_ROTATION {
                return Err(Error::invalid(format!(
                    "step rotation {angle} exceeds 0.9 pi"
                )));
            }
        }
        Ok(())
    }

    /// The demonstration seen after moving the whole scene by `g`.
    pub fn transformed(&self, g: &Pose) -> Demonstration {
        Demonstration {
            task: self.task,
            cloud: self.cloud.iter().map(|p| g.transform_point(p)).collect(),
            trajectory: self.trajectory.iter().map(|p| g.compose(p)).collect(),
            gripper: self.gripper.clone(),
        }
    }
}

fn normal3<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    Vec3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = normal3(rng);
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Random table-top placement: yaw about +z plus an offset in the workspace.
fn table_placement<R: Rng + ?Sized>(rng: &mut R) -> Pose {
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let t = Vec3::new(
        rng.random_range(0.3..0.6),
        rng.random_range(-0.25..0.25),
        rng.random_range(0.0..0.1),
    );
    Pose::new(Rotation::rotz(yaw), t)
}

/// Held-out offset for test scenes: rotation up to 60° about a random axis
/// and translation up to 0.3 m in a random direction.
pub fn held_out_offset<R: Rng + ?Sized>(rng: &mut R) -> Pose {
    let axis = unit_vector(rng);
    let angle = rng.random_range(0.0..=std::f64::consts::FRAC_PI_3);
    let dir = unit_vector(rng);
    let dist = rng.random_range(0.0..=0.3);
    Pose::new(Rotation::about_axis(&axis, angle), dir * dist)
}

fn well_conditioned(cloud: &[Vec3]) -> bool {
    matches!(frame_margin(cloud), Ok((gap, m)) if gap > MIN_RELATIVE_GAP && m > MIN_MOMENT)
}

fn frame_of(cloud: &[Vec3]) -> Pose {
    observation_frame(cloud)
        .expect("generated clouds are non-empty")
        .pose
}

/// Triangle scene before placement: vertices in the z = 0 plane.
fn triangle_vertices<R: Rng + ?Sized>(rng: &mut R) -> [Vec3; 3] {
    let phi0 = rng.random_range(0.0..std::f64::consts::TAU);
    std::array::from_fn(|i| {
        let phi = phi0 + i as f64 * std::f64::consts::TAU / 3.0 + rng.random_range(-0.4..0.4);
        let r = rng.random_range(0.06..0.14);
        Vec3::new(r * phi.cos(), r * phi.sin(), 0.0)
    })
}

fn triangle_demo<R: Rng + ?Sized>(rng: &mut R) -> Demonstration {
    loop {
        let [a, b, c] = triangle_vertices(rng);
        if 0.5 * (b - a).cross(&(c - a)).norm() < 2e-3 {
            continue;
        }
        let place = table_placement(rng);
        let cloud: Vec<Vec3> = (0..Task::RotatingTriangle.n_points())
            .map(|_| {
                let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                let jitter = Vec3::new(
                    0.002 * rng.sample::<f64, _>(StandardNormal),
                    0.002 * rng.sample::<f64, _>(StandardNormal),
                    0.0,
                );
                place.transform_point(&(a + (b - a) * u + (c - a) * v + jitter))
            })
            .collect();
        if !well_conditioned(&cloud) {
            continue;
        }
        let total =
            rng.random_range(std::f64::consts::FRAC_PI_4..=3.0 * std::f64::consts::FRAC_PI_4);
        let frame = frame_of(&cloud);
        // hover 5 cm above the centroid along the frame normal, spin about it
        let start = frame.compose(&Pose::translate(0.0, 0.0, 0.05));
        let trajectory = (0..HORIZON)
            .map(|k| {
                let angle = total * k as f64 / (HORIZON - 1) as f64;
                start.compose(&Pose::from_rotation(Rotation::rotz(angle)))
            })
            .collect();
        return Demonstration {
            task: Task::RotatingTriangle,
            cloud,
            trajectory,
            gripper: vec![1.0; HORIZON],
        };
    }
}

/// Door geometry behind a generated demonstration.
#[derive(Debug, Clone, Copy)]
pub struct DoorScene {
    pub hinge_point: Vec3,
    pub hinge_axis: Vec3,
    pub width: f64,
    pub swing: f64,
}

fn door_demo<R: Rng + ?Sized>(rng: &mut R) -> (Demonstration, DoorScene) {
    const DOOR_POINTS: usize = 96;
    loop {
        let width = rng.random_range(0.5..=0.9);
        let height = rng.random_range(1.0..1.4);
        let swing = rng.random_range(30f64.to_radians()..=80f64.to_radians());
        let place = table_placement(rng);
        // door in the x-z plane with its hinge on the z axis; a frame strip
        // beside the hinge and along the top
        let mut local: Vec<Vec3> = (0..DOOR_POINTS)
            .map(|_| {
                Vec3::new(
                    rng.random_range(0.0..width),
                    0.0,
                    rng.random_range(0.0..height),
                )
            })
            .collect();
        for i in 0..(Task::DoorOpening.n_points() - DOOR_POINTS) {
            let p = if i % 2 == 0 {
                Vec3::new(
                    rng.random_range(-0.1..0.0),
                    0.0,
                    rng.random_range(0.0..height + 0.1),
                )
            } else {
                Vec3::new(
                    rng.random_range(-0.1..width),
                    0.0,
                    rng.random_range(height..height + 0.1),
                )
            };
            local.push(p);
        }
        let cloud: Vec<Vec3> = local.iter().map(|p| place.transform_point(p)).collect();
        if !well_conditioned(&cloud) {
            continue;
        }
        let frame = frame_of(&cloud);
        let hinge_point = *place.translation();
        let hinge_axis = place.rotation().matrix().column(2).into_owned();
        let handle = place.transform_point(&Vec3::new(width, 0.0, 0.5 * height));
        let start = Pose::new(*frame.rotation(), handle);
        let to_hinge = Pose::from_translation(hinge_point);
        let trajectory = (0..HORIZON)
            .map(|k| {
                let angle = swing * k as f64 / (HORIZON - 1) as f64;
                let about_hinge = to_hinge
                    .compose(&Pose::from_rotation(Rotation::about_axis(
                        &hinge_axis,
                        angle,
                    )))
                    .compose(&to_hinge.inverse());
                about_hinge.compose(&start)
            })
            .collect();
        let demo = Demonstration {
            task: Task::DoorOpening,
            cloud,
            trajectory,
            gripper: vec![1.0; HORIZON],
        };
        return (
            demo,
            DoorScene {
                hinge_point,
                hinge_axis,
                width,
                swing,
            },
        );
    }
}

/// Canvas geometry behind a generated demonstration.
#[derive(Debug, Clone, Copy)]
pub struct CanvasScene {
    pub placement: Pose,
    pub half_extent: (f64, f64),
    pub stroke_length: f64,
}

const CANVAS_INSET: f64 = 0.05;
const BRUSH_STANDOFF: f64 = 0.005;

fn painting_demo<R: Rng + ?Sized>(rng: &mut R) -> (Demonstration, CanvasScene) {
    const COLS: usize = 5;
    const ROWS: usize = HORIZON / COLS;
    loop {
        let a = rng.random_range(0.4..0.6);
        let b = rng.random_range(0.2..0.3);
        let place = table_placement(rng);
        let cloud: Vec<Vec3> = (0..Task::Painting.n_points())
            .map(|_| {
                place.transform_point(&Vec3::new(
                    rng.random_range(-0.5 * a..0.5 * a),
                    rng.random_range(-0.5 * b..0.5 * b),
                    0.0,
                ))
            })
            .collect();
        if !well_conditioned(&cloud) {
            continue;
        }
        let frame = frame_of(&cloud);
        let x0 = -0.5 * a + CANVAS_INSET;
        let dx = (a - 2.0 * CANVAS_INSET) / (COLS - 1) as f64;
        let dy = 0.5 * b;
        let trajectory: Vec<Pose> = (0..HORIZON)
            .map(|k| {
                let (row, col) = (k / COLS, k % COLS);
                // serpentine: odd rows run backwards
                let col = if row % 2 == 0 { col } else { COLS - 1 - col };
                let p = Vec3::new(
                    x0 + dx * col as f64,
                    -0.25 * b + dy * row as f64,
                    BRUSH_STANDOFF,
                );
                Pose::new(*frame.rotation(), place.transform_point(&p))
            })
            .collect();
        let stroke_length = ROWS as f64 * (COLS - 1) as f64 * dx + (ROWS - 1) as f64 * dy;
        let demo = Demonstration {
            task: Task::Painting,
            cloud,
            trajectory,
            gripper: vec![1.0; HORIZON],
        };
        return (
            demo,
            CanvasScene {
                placement: place,
                half_extent: (0.5 * a, 0.5 * b),
                stroke_length,
            },
        );
    }
}

pub fn generate_rotating_triangle<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Demonstration> {
    (0..n).map(|_| triangle_demo(rng)).collect()
}

pub fn generate_door_opening<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Demonstration> {
    (0..n).map(|_| door_demo(rng).0).collect()
}

pub fn generate_painting<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Demonstration> {
    (0..n).map(|_| painting_demo(rng).0).collect()
}

/// One door demonstration together with its hinge geometry.
pub fn door_scene<R: Rng + ?Sized>(rng: &mut R) -> (Demonstration, DoorScene) {
    door_demo(rng)
}

/// One painting demonstration together with its canvas geometry.
pub fn canvas_scene<R: Rng + ?Sized>(rng: &mut R) -> (Demonstration, CanvasScene) {
    painting_demo(rng)
}

pub fn generate<R: Rng + ?Sized>(task: Task, rng: &mut R, n: usize) -> Vec<Demonstration> {
    match task {
        Task::Painting => generate_painting(rng, n),
        Task::DoorOpening => generate_door_opening(rng, n),
        Task::RotatingTriangle => generate_rotating_triangle(rng, n),
    }
}

/// RNG for demonstration `index` of `split`; streams never overlap across
/// splits or indices.
pub fn demo_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split.code() as u64) << 40) | index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub split: Split,
    pub seed: u64,
    pub demonstrations: Vec<Demonstration>,
}

impl Dataset {
    /// Generates `n` demonstrations, one independent RNG stream each. Test
    /// scenes additionally receive a [`held_out_offset`].
    pub fn generate(task: Task, split: Split, n: usize, seed: u64) -> Dataset {
        let demonstrations = (0..n)
            .map(|i| {
                let mut rng = demo_rng(seed, split, i);
                let demo = generate(task, &mut rng, 1).remove(0);
                match split {
                    Split::Train => demo,
                    Split::Test => demo.transformed(&held_out_offset(&mut rng)),
                }
            })
            .collect();
        Dataset {
            task,
            split,
            seed,
            demonstrations,
        }
    }

    pub fn len(&self) -> usize {
        self.demonstrations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demonstrations.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.demonstrations.iter().enumerate() {
            if d.task != self.task {
                return Err(Error::invalid(format!(
                    "demonstration {i} has task {}",
                    d.task
                )));
            }
            d.validate()
                .map_err(|e| Error::invalid(format!("demonstration {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n_points = self.task.n_points();
        let per_demo = (n_points * 3 + HORIZON * 17) * 8;
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * per_demo);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.push(self.task.code());
        out.push(self.split.code());
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(n_points as u32).to_le_bytes());
        out.extend_from_slice(&(HORIZON as u32).to_le_bytes());
        for d in &self.demonstrations {
            for p in &d.cloud {
                p.iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
            for pose in &d.trajectory {
                pose.to_row_major()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
            d.gripper
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let fmt = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(
                bytes.len(),
                format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len()),
            ));
        }
        if &bytes[0..8] != DATASET_MAGIC {
            return Err(fmt(0, "bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != DATASET_VERSION {
            return Err(fmt(8, format!("unsupported version {version}")));
        }
        let task = Task::from_code(bytes[12])
            .ok_or_else(|| fmt(12, format!("unknown task code {}", bytes[12])))?;
        let split = Split::from_code(bytes[13])
            .ok_or_else(|| fmt(13, format!("unknown split code {}", bytes[13])))?;
        let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let count = u32_at(24) as usize;
        let n_points = u32_at(28) as usize;
        let horizon = u32_at(32) as usize;
        if n_points != task.n_points() {
            return Err(fmt(
                28,
                format!(
                    "{task} requires {} points, header says {n_points}",
                    task.n_points()
                ),
            ));
        }
        if horizon != HORIZON {
            return Err(fmt(
                32,
                format!("horizon must be {HORIZON}, header says {horizon}"),
            ));
        }
        let per_demo = (n_points * 3 + horizon * 17) * 8;
        let expected = HEADER_LEN + count * per_demo;
        if bytes.len() < expected {
            return Err(fmt(
                bytes.len(),
                format!(
                    "truncated body: header promises {count} demonstrations ({expected} bytes)"
                ),
            ));
        }
        if bytes.len() > expected {
            return Err(fmt(
                expected,
                format!("{} trailing bytes after body", bytes.len() - expected),
            ));
        }

        let mut off = HEADER_LEN;
        let mut next = || {
            let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
            v
        };
        let mut demonstrations = Vec::with_capacity(count);
        for _ in 0..count {
            let cloud = (0..n_points)
                .map(|_| Vec3::new(next(), next(), next()))
                .collect();
            let mut trajectory = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let mut m = [0.0; 16];
                m.iter_mut().for_each(|v| *v = next());
                trajectory.push(m);
            }
            let gripper = (0..horizon).map(|_| next()).collect();
            demonstrations.push((cloud, trajectory, gripper));
        }
        let mut out = Vec::with_capacity(count);
        let mut pose_off = HEADER_LEN;
        for (cloud, traj, gripper) in demonstrations {
            pose_off += n_points * 24;
            let mut trajectory = Vec::with_capacity(horizon);
            for m in traj {
                trajectory
                    .push(Pose::from_row_major(&m).map_err(|e| fmt(pose_off, e.to_string()))?);
                pose_off += 128;
            }
            pose_off += horizon * 8;
            out.push(Demonstration {
                task,
                cloud,
                trajectory,
                gripper,
            });
        }
        Ok(Dataset {
            task,
            split,
            seed,
            demonstrations: out,
        })
    }

    /// Lossless JSON rendering; every number is a shortest-roundtrip decimal string.
    pub fn to_json(&self) -> Value {
        let s = |v: &f64| Value::String(format!("{v:?}"));
        let demos: Vec<Value> = self
            .demonstrations
            .iter()
            .map(|d| {
                json!({
                    "cloud": d.cloud.iter().map(|p| p.iter().map(s).collect::<Vec<_>>()).collect::<Vec<_>>(),
                    "trajectory": d.trajectory.iter().map(|p| p.to_row_major().iter().map(s).collect::<Vec<_>>()).collect::<Vec<_>>(),
                    "gripper": d.gripper.iter().map(s).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({
            "format": "se3flow-dataset",
            "version": DATASET_VERSION,
            "task": self.task.name(),
            "split": self.split.name(),
            "seed": self.seed.to_string(),
            "demonstrations": demos,
        })
    }

    pub fn from_json(v: &Value) -> Result<Dataset> {
        let bad = |m: &str| Error::invalid(format!("dataset json: {m}"));
        let num = |v: &Value| -> Result<f64> {
            v.as_str()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| bad("number must be a decimal string"))
        };
        let arr = |v: &Value| -> Result<Vec<Value>> {
            v.as_array().cloned().ok_or_else(|| bad("expected array"))
        };
        let task: Task = v["task"]
            .as_str()
            .ok_or_else(|| bad("missing task"))?
            .parse()?;
        let split = match v["split"].as_str() {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            _ => return Err(bad("split must be train or test")),
        };
        let seed = v["seed"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing seed"))?;
        let mut demonstrations = Vec::new();
        for d in arr(&v["demonstrations"])? {
            let cloud = arr(&d["cloud"])?
                .iter()
                .map(|p| {
                    let c = arr(p)?;
                    if c.len() != 3 {
                        return Err(bad("points need 3 coordinates"));
                    }
                    Ok(Vec3::new(num(&c[0])?, num(&c[1])?, num(&c[2])?))
                })
                .collect::<Result<Vec<_>>>()?;
            let trajectory = arr(&d["trajectory"])?
                .iter()
                .map(|m| {
                    let vals = arr(m)?.iter().map(num).collect::<Result<Vec<_>>>()?;
                    let m: [f64; 16] = vals.try_into().map_err(|_| bad("poses need 16 entries"))?;
                    Pose::from_row_major(&m)
                })
                .collect::<Result<Vec<_>>>()?;
            let gripper = arr(&d["gripper"])?
                .iter()
                .map(num)
                .collect::<Result<Vec<_>>>()?;
            demonstrations.push(Demonstration {
                task,
                cloud,
                trajectory,
                gripper,
            });
        }
        Ok(Dataset {
            task,
            split,
            seed,
            demonstrations,
        })
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ds.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}
