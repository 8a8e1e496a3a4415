//! SE(3) / se(3) kernels.
//!
//! Poses are stored as a rotation matrix plus translation vector. Twists are
//! ordered `(omega, rho)`: angular part first, translational part second. The
//! hat matrix of a twist is
//!
//! ```text
//! [ [omega]x  rho ]
//! [   0 0 0    0  ]
//! ```
//!
//! `exp_map` / `log_map` are the closed-form Rodrigues maps with a Taylor
//! branch below `SMALL_ANGLE`. Rotations of angle π (the cut locus) are a hard
//! domain error for every operation that needs a logarithm.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Below this rotation angle the Rodrigues coefficients switch to their
/// two-term Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Logarithms are refused for rotation angles `>= PI - CUT_LOCUS_MARGIN`.
pub const CUT_LOCUS_MARGIN: f64 = 1e-6;

/// Tolerance used when validating rotation matrices read from outside.
pub const ROTATION_TOL: f64 = 1e-9;

const PI: f64 = std::f64::consts::PI;

/// Skew-symmetric cross-product matrix of `v`.
#[rustfmt::skip]
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(
         0.0, -v.z,  v.y,
         v.z,  0.0, -v.x,
        -v.y,  v.x,  0.0,
    )
}

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps `m`, checking orthonormality and unit determinant to [`ROTATION_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("rotation has non-finite entries"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::invalid(format!(
                "not a rotation: |RtR - I|max = {ortho:e}, det = {det}"
            )));
        }
        Ok(Rotation(m))
    }

    /// Wraps `m` without validation. Callers guarantee `m` is a rotation.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn about_axis(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        so3_exp(&(axis * (angle / n)))
    }

    pub fn rotz(angle: f64) -> Self {
        Self::about_axis(&Vec3::z(), angle)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Rotation angle in `[0, PI]`.
    pub fn angle(&self) -> f64 {
        let (_, sin, cos) = axis_sin_cos(&self.0);
        sin.atan2(cos)
    }

    /// Largest deviation of `RtR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let ortho = (self.0.transpose() * self.0 - Matrix3::identity())
            .abs()
            .max();
        ortho.max((self.0.determinant() - 1.0).abs())
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// A rigid-body transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    r: Rotation,
    t: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(r: Rotation, t: Vec3) -> Self {
        Pose { r, t }
    }

    pub fn identity() -> Self {
        Pose::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose::new(Rotation::identity(), t)
    }

    pub fn translate(x: f64, y: f64, z: f64) -> Self {
        Self::from_translation(Vec3::new(x, y, z))
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Pose::new(r, Vec3::zeros())
    }

    pub fn rotation(&self) -> &Rotation {
        &self.r
    }

    pub fn translation(&self) -> &Vec3 {
        &self.t
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: Rotation(self.r.0 * other.r.0),
            t: self.r.0 * other.t + self.t,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.0.transpose();
        Pose {
            r: Rotation(rt),
            t: -(rt * self.t),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.r.0 * p + self.t
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r.0);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }

    /// Reads a homogeneous matrix; the last row must be exactly `(0, 0, 0, 1)`.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Pose> {
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return Err(Error::invalid(
                "homogeneous matrix last row is not (0,0,0,1)",
            ));
        }
        let r = Rotation::from_matrix(m.fixed_view::<3, 3>(0, 0).into_owned())?;
        let t: Vec3 = m.fixed_view::<3, 1>(0, 3).into_owned();
        if !t.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("translation has non-finite entries"));
        }
        Ok(Pose { r, t })
    }

    /// The 16 entries of the homogeneous matrix in row-major order.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                out[4 * i + j] = m[(i, j)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64; 16]) -> Result<Pose> {
        Pose::from_matrix(&Matrix4::from_row_slice(v))
    }

    pub fn is_finite(&self) -> bool {
        self.r.0.iter().chain(self.t.iter()).all(|x| x.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// An element of se(3) as `(omega, rho)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub omega: Vec3,
    pub rho: Vec3,
}

impl Twist {
    pub fn new(omega: Vec3, rho: Vec3) -> Self {
        Twist { omega, rho }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Twist {
            omega: Vec3::new(a[0], a[1], a[2]),
            rho: Vec3::new(a[3], a[4], a[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.rho.x,
            self.rho.y,
            self.rho.z,
        ]
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            omega: Vec3::new(v[0], v[1], v[2]),
            rho: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::from_row_slice(&self.to_array())
    }

    pub fn norm_squared(&self) -> f64 {
        self.omega.norm_squared() + self.rho.norm_squared()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.omega.amax().max(self.rho.amax())
    }

    pub fn is_finite(&self) -> bool {
        self.omega
            .iter()
            .chain(self.rho.iter())
            .all(|x| x.is_finite())
    }

    /// Lie bracket `[self, other]`, i.e. `vee(hat(self) hat(other) - hat(other) hat(self))`.
    pub fn bracket(&self, other: &Twist) -> Twist {
        Twist {
            omega: self.omega.cross(&other.omega),
            rho: self.omega.cross(&other.rho) - other.omega.cross(&self.rho),
        }
    }
}

impl Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist::new(self.omega + rhs.omega, self.rho + rhs.rho)
    }
}

impl Sub for Twist {
    type Output = Twist;
    fn sub(self, rhs: Twist) -> Twist {
        Twist::new(self.omega - rhs.omega, self.rho - rhs.rho)
    }
}

impl Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.omega, -self.rho)
    }
}

impl Mul<f64> for Twist {
    type Output = Twist;
    fn mul(self, s: f64) -> Twist {
        Twist::new(self.omega * s, self.rho * s)
    }
}

impl Mul<Twist> for f64 {
    type Output = Twist;
    fn mul(self, x: Twist) -> Twist {
        x * self
    }
}

/// 4×4 matrix form of a twist.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwistMatrix(Matrix4<f64>);

impl TwistMatrix {
    /// Wraps an arbitrary matrix; `vee` checks the structure.
    pub fn from_matrix(m: Matrix4<f64>) -> Self {
        TwistMatrix(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }
}

pub fn hat(x: &Twist) -> Result<TwistMatrix> {
    if !x.is_finite() {
        return Err(Error::invalid("hat: non-finite twist"));
    }
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&x.omega));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&x.rho);
    Ok(TwistMatrix(m))
}

pub fn vee(m: &TwistMatrix) -> Result<Twist> {
    const TOL: f64 = 1e-9;
    let m = &m.0;
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        worst = worst.max(m[(i, i)].abs());
        for j in (i + 1)..3 {
            worst = worst.max((m[(i, j)] + m[(j, i)]).abs());
        }
    }
    if worst > TOL {
        return Err(Error::invalid(format!(
            "vee: rotation block is not skew-symmetric (violation {worst:e})"
        )));
    }
    let last_row = (0..4).map(|j| m[(3, j)].abs()).fold(0.0, f64::max);
    if last_row > TOL {
        return Err(Error::invalid("vee: last row is not zero"));
    }
    Ok(Twist {
        omega: Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]),
        rho: Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]),
    })
}

/// Rodrigues coefficients `sin θ/θ`, `(1 - cos θ)/θ²`, `(θ - sin θ)/θ³`.
fn exp_coefficients(theta: f64) -> (f64, f64, f64) {
    let th2 = theta * theta;
    if theta < SMALL_ANGLE {
        (1.0 - th2 / 6.0, 0.5 - th2 / 24.0, 1.0 / 6.0 - th2 / 120.0)
    } else {
        let s = theta.sin();
        let half = (0.5 * theta).sin();
        (
            s / theta,
            2.0 * half * half / th2,
            (theta - s) / (th2 * theta),
        )
    }
}

pub fn so3_exp(omega: &Vec3) -> Rotation {
    let theta = omega.norm();
    let (a, b, _) = exp_coefficients(theta);
    let w = skew(omega);
    Rotation(Matrix3::identity() + w * a + w * w * b)
}

/// Returns `(v, sin θ, cos θ)` where `v = sin θ · axis`.
fn axis_sin_cos(m: &Matrix3<f64>) -> (Vec3, f64, f64) {
    let v = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    ) * 0.5;
    let cos = 0.5 * (m.trace() - 1.0);
    (v, v.norm(), cos)
}

fn check_cut_locus(angle: f64) -> Result<()> {
    if angle >= PI - CUT_LOCUS_MARGIN {
        Err(Error::CutLocus {
            angle,
            margin: CUT_LOCUS_MARGIN,
        })
    } else {
        Ok(())
    }
}

pub fn so3_log(r: &Rotation) -> Result<Vec3> {
    let (_, sin, cos) = axis_sin_cos(&r.0);
    check_cut_locus(sin.atan2(cos))?;
    Ok(so3_log_principal(&r.0))
}

/// Rotation vector with angle in `[0, π]`. At exactly π the axis sign is
/// arbitrary; callers that need a unique answer use [`so3_log`].
fn so3_log_principal(m: &Matrix3<f64>) -> Vec3 {
    let (v, sin, cos) = axis_sin_cos(m);
    let theta = sin.atan2(cos);
    if theta < SMALL_ANGLE {
        return v * (1.0 + theta * theta / 6.0);
    }
    if cos > -0.5 {
        return v * (theta / sin);
    }
    // Past 2π/3 the antisymmetric part loses precision; recover the axis from
    // the symmetric part (R + Rt)/2 - cos I = (1 - cos) a at.
    let s = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos;
    let j = (0..3)
        .max_by(|&a, &b| s[(a, a)].total_cmp(&s[(b, b)]))
        .unwrap_or(0);
    let mut axis: Vec3 = s.column(j).into_owned() / (s[(j, j)] * (1.0 - cos)).sqrt();
    axis /= axis.norm();
    if axis.dot(&v) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian of SO(3) applied on the translation part of `exp_map`.
fn left_jacobian(omega: &Vec3) -> Matrix3<f64> {
    let theta = omega.norm();
    let (_, b, c) = exp_coefficients(theta);
    let w = skew(omega);
    Matrix3::identity() + w * b + w * w * c
}

fn left_jacobian_inverse(omega: &Vec3) -> Matrix3<f64> {
    let theta = omega.norm();
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / (theta * theta)
    };
    let w = skew(omega);
    Matrix3::identity() - w * 0.5 + w * w * d
}

/// Exponential map se(3) → SE(3). Total.
pub fn exp_map(x: &Twist) -> Pose {
    Pose {
        r: so3_exp(&x.omega),
        t: left_jacobian(&x.omega) * x.rho,
    }
}

/// Total variant of [`log_map`] that does not reject the cut locus; for
/// features where an arbitrary but finite choice at angle π is acceptable.
pub fn log_map_principal(p: &Pose) -> Twist {
    let omega = so3_log_principal(&p.r.0);
    let rho = left_jacobian_inverse(&omega) * p.t;
    Twist { omega, rho }
}

/// Logarithm SE(3) → se(3) on the principal branch.
pub fn log_map(p: &Pose) -> Result<Twist> {
    let omega = so3_log(&p.r)?;
    let rho = left_jacobian_inverse(&omega) * p.t;
    Ok(Twist { omega, rho })
}

/// `x ⊖ y = vee(log(x y⁻¹))`: the spatial twist carrying `y` onto `x` in unit time.
pub fn geodesic_diff(x: &Pose, y: &Pose) -> Result<Twist> {
    log_map(&x.compose(&y.inverse()))
}

/// `Exp(t log(h1 h0⁻¹)) h0`.
pub fn geodesic_interp(h0: &Pose, h1: &Pose, t: f64) -> Result<Pose> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!(
            "interpolation parameter {t} outside [0, 1]"
        )));
    }
    let delta = geodesic_diff(h1, h0)?;
    Ok(exp_map(&(delta * t)).compose(h0))
}

/// Adjoint of `p` acting on `(omega, rho)` twists:
/// `hat(Ad_p x) = p hat(x) p⁻¹`.
pub fn adjoint(p: &Pose) -> Matrix6<f64> {
    let r = p.r.0;
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(skew(&p.t) * r));
    ad
}

/// `Ad_p x` without forming the 6×6 matrix.
pub fn adjoint_apply(p: &Pose, x: &Twist) -> Twist {
    let omega = p.r.0 * x.omega;
    Twist {
        omega,
        rho: p.r.0 * x.rho + p.t.cross(&omega),
    }
}

/// Rotation-angle error between two poses in radians.
pub fn rotation_distance(a: &Pose, b: &Pose) -> Result<f64> {
    let rel = a.r.0.transpose() * b.r.0;
    let (_, sin, cos) = axis_sin_cos(&rel);
    let angle = sin.atan2(cos);
    check_cut_locus(angle)?;
    Ok(angle)
}

/// Pose error `sqrt(|Log(Rt R̂)|² + |t̂ - t|²)`, radians and meters with unit weight.
pub fn d_geo(t: &Pose, t_hat: &Pose) -> Result<f64> {
    let angle = rotation_distance(t, t_hat)?;
    let dt = (t_hat.t - t.t).norm_squared();
    Ok((angle * angle + dt).sqrt())
}
