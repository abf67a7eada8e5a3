//! SO(3)/SE(3) primitives and product-of-exponentials forward kinematics.
//!
//! Lengths are millimeters and angles radians throughout the crate. A robot is
//! described by its joint axes `H` (one unit vector per joint, expressed in the
//! preceding link frame) and link vectors `P` (`p_01 ... p_nT`, one more column
//! than `H`). The tool frame has identity rotation relative to the last link.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Rot3 = Matrix3<f64>;

/// Tolerance on `‖h‖ = 1` accepted by [`rot`].
pub const UNIT_AXIS_TOL: f64 = 1e-9;

/// Pose-error weight that makes one degree of orientation error cost as much
/// as one millimeter of position error: `1 / (8 sin²(π/360)) ≈ 1641`.
pub fn default_weight() -> f64 {
    let s = (std::f64::consts::PI / 360.0).sin();
    1.0 / (8.0 * s * s)
}

pub fn skew(v: &Vec3) -> Rot3 {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]; the symmetric part of `m` is discarded.
pub fn vee(m: &Rot3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Euler-Rodrigues rotation about unit axis `h` by `q` radians.
pub fn rot(h: &Vec3, q: f64) -> Result<Rot3> {
    let norm = h.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_AXIS_TOL {
        return Err(Error::Precondition(format!(
            "rotation axis must be unit length, got norm {norm}"
        )));
    }
    Ok(rot_unchecked(h, q))
}

pub(crate) fn rot_unchecked(h: &Vec3, q: f64) -> Rot3 {
    let k = skew(h);
    let (s, c) = q.sin_cos();
    Rot3::identity() + k * s + k * k * (1.0 - c)
}

/// Equivalent rotation angle of `r` in `[0, π]`.
pub fn rotation_angle(r: &Rot3) -> f64 {
    // atan2 form stays accurate near both 0 and π.
    let sin = vee(r).norm();
    let cos = 0.5 * (r.trace() - 1.0);
    sin.atan2(cos)
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix, with `w ≥ 0`.
pub fn rotation_to_quaternion(r: &Rot3) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(*r));
    let mut c = [q.w, q.i, q.j, q.k];
    if c[0] < 0.0 {
        c.iter_mut().for_each(|x| *x = -*x);
    }
    c
}

pub fn quaternion_to_rotation(q: [f64; 4]) -> Rot3 {
    let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    uq.to_rotation_matrix().into_inner()
}

/// Anything that maps a joint vector to a tool pose.
pub trait PosePredictor {
    fn predict(&self, q: &[f64]) -> Result<Transform>;
}

impl PosePredictor for RobotModel {
    fn predict(&self, q: &[f64]) -> Result<Transform> {
        forward_kinematics(self, q)
    }
}

/// Rigid transform `x ↦ R x + p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rotation: Rot3,
    pub translation: Vec3,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            rotation: Rot3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Rot3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Transform {
        let rt = self.rotation.transpose();
        Transform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }
}

/// POE kinematic model of an all-revolute serial arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RobotModelFile", into = "RobotModelFile")]
pub struct RobotModel {
    h: Vec<Vec3>,
    p: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
struct RobotModelFile {
    n: usize,
    #[serde(rename = "H")]
    h: Vec<[f64; 3]>,
    #[serde(rename = "P")]
    p: Vec<[f64; 3]>,
}

impl TryFrom<RobotModelFile> for RobotModel {
    type Error = Error;

    fn try_from(f: RobotModelFile) -> Result<Self> {
        if f.h.len() != f.n {
            return Err(Error::DimensionMismatch {
                expected: f.n,
                got: f.h.len(),
            });
        }
        RobotModel::new(
            f.h.into_iter().map(Vec3::from).collect(),
            f.p.into_iter().map(Vec3::from).collect(),
        )
    }
}

impl From<RobotModel> for RobotModelFile {
    fn from(m: RobotModel) -> Self {
        RobotModelFile {
            n: m.h.len(),
            h: m.h.iter().map(|v| [v.x, v.y, v.z]).collect(),
            p: m.p.iter().map(|v| [v.x, v.y, v.z]).collect(),
        }
    }
}

impl RobotModel {
    /// Validates unit axes (within 1e-9) and `len(P) = len(H) + 1`.
    pub fn new(h: Vec<Vec3>, p: Vec<Vec3>) -> Result<Self> {
        if p.len() != h.len() + 1 {
            return Err(Error::DimensionMismatch {
                expected: h.len() + 1,
                got: p.len(),
            });
        }
        for (i, axis) in h.iter().enumerate() {
            if (axis.norm() - 1.0).abs() > UNIT_AXIS_TOL {
                return Err(Error::Precondition(format!(
                    "joint axis {} has norm {}",
                    i + 1,
                    axis.norm()
                )));
            }
        }
        if h.iter().chain(p.iter()).any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::Precondition("model contains non-finite values".into()));
        }
        Ok(Self { h, p })
    }

    pub fn n(&self) -> usize {
        self.h.len()
    }

    pub fn axes(&self) -> &[Vec3] {
        &self.h
    }

    pub fn links(&self) -> &[Vec3] {
        &self.p
    }

    pub(crate) fn check_q(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: q.len(),
            });
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::Precondition("joint vector contains non-finite values".into()));
        }
        Ok(())
    }

    /// Returns the model with `p_01` translated by `offset`.
    pub fn with_base_offset(&self, offset: &Vec3) -> RobotModel {
        let mut m = self.clone();
        m.p[0] += offset;
        m
    }

    /// Yaskawa MA2010 vendor parameters in its zero configuration.
    pub fn ma2010() -> Self {
        Self::six_r_elbow(150.0, 760.0, [1082.0, 200.0], 100.0)
    }

    /// Yaskawa MA1440 vendor parameters in its zero configuration.
    pub fn ma1440() -> Self {
        Self::six_r_elbow(155.0, 614.0, [640.0, 200.0], 100.0)
    }

    fn six_r_elbow(shoulder_x: f64, upper_arm: f64, forearm: [f64; 2], flange: f64) -> Self {
        let h = vec![
            Vec3::z(),
            Vec3::y(),
            -Vec3::y(),
            -Vec3::x(),
            -Vec3::y(),
            -Vec3::x(),
        ];
        let p = vec![
            Vec3::zeros(),
            Vec3::new(shoulder_x, 0.0, 0.0),
            Vec3::new(0.0, 0.0, upper_arm),
            Vec3::new(forearm[0], 0.0, forearm[1]),
            Vec3::zeros(),
            Vec3::zeros(),
            Vec3::new(flange, 0.0, 0.0),
        ];
        Self { h, p }
    }
}

/// Intermediate frames of one forward-kinematics evaluation.
///
/// `rotations[i]` is `R_0i` and `origins[i]` is `p_0i` for `i = 0..=n`
/// (index 0 is the base). The tool has rotation `R_0n`.
#[derive(Debug, Clone)]
pub struct FkFrames {
    pub rotations: Vec<Rot3>,
    pub origins: Vec<Vec3>,
    pub tool: Transform,
}

impl FkFrames {
    /// `p_iT` expressed in frame `i`.
    pub fn tool_in_frame(&self, i: usize) -> Vec3 {
        self.rotations[i].transpose() * (self.tool.translation - self.origins[i])
    }

    /// Joint axis `i` (1-based) expressed in the base frame.
    pub fn axis_in_base(&self, model: &RobotModel, i: usize) -> Vec3 {
        self.rotations[i - 1] * model.h[i - 1]
    }
}

pub fn fk_frames(model: &RobotModel, q: &[f64]) -> Result<FkFrames> {
    model.check_q(q)?;
    let n = model.n();
    let mut rotations = Vec::with_capacity(n + 1);
    let mut origins = Vec::with_capacity(n + 1);
    let mut r = Rot3::identity();
    let mut p = Vec3::zeros();
    rotations.push(r);
    origins.push(p);
    for ((pi, hi), &qi) in model.p.iter().zip(&model.h).zip(q) {
        p += r * pi;
        r *= rot_unchecked(hi, qi);
        rotations.push(r);
        origins.push(p);
    }
    let tool = Transform::new(r, p + r * model.p[n]);
    Ok(FkFrames {
        rotations,
        origins,
        tool,
    })
}

pub fn forward_kinematics(model: &RobotModel, q: &[f64]) -> Result<Transform> {
    Ok(fk_frames(model, q)?.tool)
}

/// `‖p1 − p2‖² + a ‖R1 R2ᵀ − I‖²_F`.
pub fn pose_error(t1: &Transform, t2: &Transform, a: f64) -> f64 {
    let dp = (t1.translation - t2.translation).norm_squared();
    let dr = (t1.rotation * t2.rotation.transpose() - Rot3::identity()).norm_squared();
    dp + a * dr
}
