//! Rectified flow policies on SE(3).
//!
//! The crate is layered bottom-up:
//!
//! - [`geometry`]: exact SE(3) kernels (hat/vee, Exp/Log, geodesics, adjoint, `d_geo`)
//! - [`integrator`]: exp-map ODE solvers (Euler, RK4, Dormand–Prince) on the group
//! - [`drift`]: a canonicalization-equivariant MLP drift field with hand-written backprop
//! - [`checkpoint`]: the versioned model file
//! - [`tasks`]: synthetic demonstration generators and the dataset file
//! - [`training`]: Flow 1 and reflow (Flow 2) training loops
//! - [`evaluation`]: the geodesic-error protocol, aggregation and ablation tables

pub mod checkpoint;
pub mod drift;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod integrator;
pub mod tasks;
pub mod training;

pub use drift::{DriftModel, FlowStage, ModelSpec, Observation};
pub use error::{Error, Result};
pub use geometry::{d_geo, exp_map, log_map, Pose, Rotation, Twist, Vec3};
pub use integrator::{integrate, Convention, FlowPath, SolverKind, SolverSpec};
pub use tasks::{Dataset, Demonstration, Split, Task};
