//! Minimal POE parameterization anchored to a nominal model.
//!
//! Each joint contributes four deviation parameters: two offsets `(v, w)`
//! sliding its origin within the plane perpendicular to the nominal axis, and
//! two angles `(θ, φ)` tilting the axis about the in-plane basis vectors
//! `(k1, k2)`. Base and tool origins are fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kin::{fk_frames, rot_unchecked, RobotModel, Vec3};

/// Guard angle for `project_to_minimal`: axes more than 80° apart are rejected.
pub const PERPENDICULAR_GUARD_DEG: f64 = 80.0;

/// Stacked deviation parameters `(v_1, w_1, …, v_n, w_n, θ_1, φ_1, …, θ_n, φ_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ParamVector::from_vec(v)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0
    }
}

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; 4 * n])
    }

    pub fn from_vec(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() || !v.len().is_multiple_of(4) {
            return Err(Error::InvalidData(format!(
                "parameter vector length {} is not a positive multiple of 4",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidData("parameter vector has non-finite entries".into()));
        }
        Ok(Self(v))
    }

    /// Number of joints `n`.
    pub fn joints(&self) -> usize {
        self.0.len() / 4
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    // Zero-based joint accessors.
    pub fn v(&self, j: usize) -> f64 {
        self.0[2 * j]
    }
    pub fn w(&self, j: usize) -> f64 {
        self.0[2 * j + 1]
    }
    pub fn theta(&self, j: usize) -> f64 {
        self.0[2 * self.joints() + 2 * j]
    }
    pub fn phi(&self, j: usize) -> f64 {
        self.0[2 * self.joints() + 2 * j + 1]
    }

    /// `Θ_P` block (millimeters).
    pub fn position_part(&self) -> &[f64] {
        &self.0[..2 * self.joints()]
    }

    /// `Θ_H` block (radians).
    pub fn axis_part(&self) -> &[f64] {
        &self.0[2 * self.joints()..]
    }
}

/// In-plane basis `(k1_i, k2_i)` per joint, stored in the nominal link frame
/// `i − 1` where the deviation formulas consume them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneBasis {
    pub k1: Vec<Vec3>,
    pub k2: Vec<Vec3>,
}

/// Unit `k1 ⊥ h` from the standard basis vector least aligned with `h`
/// (lowest index on ties), and `k2 = h × k1`.
pub fn plane_vectors(h: &Vec3) -> (Vec3, Vec3) {
    let mut best = 0;
    for i in 1..3 {
        if h[i].abs() < h[best].abs() {
            best = i;
        }
    }
    let mut e = Vec3::zeros();
    e[best] = 1.0;
    let k1 = (e - h * h.dot(&e)).normalize();
    let k2 = h.cross(&k1).normalize();
    (k1, k2)
}

pub fn plane_basis(nominal: &RobotModel, q_anchor: &[f64]) -> Result<PlaneBasis> {
    let frames = fk_frames(nominal, q_anchor)?;
    let mut k1 = Vec::with_capacity(nominal.n());
    let mut k2 = Vec::with_capacity(nominal.n());
    for i in 1..=nominal.n() {
        let r = frames.rotations[i - 1];
        let (a, b) = plane_vectors(&frames.axis_in_base(nominal, i));
        k1.push(r.transpose() * a);
        k2.push(r.transpose() * b);
    }
    Ok(PlaneBasis { k1, k2 })
}

impl PlaneBasis {
    pub fn n(&self) -> usize {
        self.k1.len()
    }

    fn offset(&self, theta: &ParamVector, j: usize) -> Vec3 {
        self.k1[j] * theta.v(j) + self.k2[j] * theta.w(j)
    }
}

fn check_param_dims(nominal: &RobotModel, theta: &ParamVector, basis: &PlaneBasis) -> Result<()> {
    let n = nominal.n();
    if theta.joints() != n {
        return Err(Error::DimensionMismatch {
            expected: 4 * n,
            got: theta.as_slice().len(),
        });
    }
    if basis.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: basis.n(),
        });
    }
    Ok(())
}

/// Perturbed model: `h_i = R(k1, θ_i) R(k2, φ_i) h̄_i` and
/// `p_{i-1,i} = p̄_{i-1,i} + δ_i − δ_{i-1}` with `δ_i = v_i k1_i + w_i k2_i`.
pub fn apply_params(nominal: &RobotModel, theta: &ParamVector, basis: &PlaneBasis) -> Result<RobotModel> {
    check_param_dims(nominal, theta, basis)?;
    let n = nominal.n();
    let h: Vec<Vec3> = (0..n)
        .map(|j| {
            let hj = rot_unchecked(&basis.k1[j], theta.theta(j))
                * rot_unchecked(&basis.k2[j], theta.phi(j))
                * nominal.axes()[j];
            hj / hj.norm()
        })
        .collect();
    let p: Vec<Vec3> = (0..=n)
        .map(|j| {
            let mut pj = nominal.links()[j];
            if j < n {
                pj += basis.offset(theta, j);
            }
            if j > 0 {
                pj -= basis.offset(theta, j - 1);
            }
            pj
        })
        .collect();
    RobotModel::new(h, p)
}

/// Intersection of the identified axis line with the plane through
/// `nominal_origin` perpendicular to `nominal_dir`.
pub fn project_to_minimal(point: &Vec3, dir: &Vec3, nominal_origin: &Vec3, nominal_dir: &Vec3) -> Result<Vec3> {
    let cos = dir.dot(nominal_dir);
    if cos.abs() <= PERPENDICULAR_GUARD_DEG.to_radians().cos() {
        return Err(Error::NearPerpendicularAxes { joint: 0, cos });
    }
    Ok(point + dir * ((nominal_origin - point).dot(nominal_dir) / cos))
}

/// A joint axis as a line in the base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisLine {
    pub point: Vec3,
    pub dir: Vec3,
}

/// Base-frame axis lines of `model` at configuration `q`.
pub fn axis_lines(model: &RobotModel, q: &[f64]) -> Result<Vec<AxisLine>> {
    let frames = fk_frames(model, q)?;
    Ok((1..=model.n())
        .map(|i| AxisLine {
            point: frames.origins[i],
            dir: frames.axis_in_base(model, i),
        })
        .collect())
}

/// Rebuilds `H`, `P` from base-frame axis lines observed at `q`, placing each
/// origin on its nominal plane. `tool_point` is the tool origin in the base
/// frame at `q`.
pub fn recover_model(axes: &[AxisLine], tool_point: &Vec3, nominal: &RobotModel, q: &[f64]) -> Result<RobotModel> {
    let n = nominal.n();
    if axes.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: axes.len(),
        });
    }
    let nominal_frames = fk_frames(nominal, q)?;
    let mut r_prev = crate::kin::Rot3::identity();
    let mut p_prev = Vec3::zeros();
    let mut h = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n + 1);
    for (j, line) in axes.iter().enumerate() {
        let i = j + 1;
        let dir = line.dir.normalize();
        let origin = project_to_minimal(
            &line.point,
            &dir,
            &nominal_frames.origins[i],
            &nominal_frames.axis_in_base(nominal, i),
        )
        .map_err(|e| match e {
            Error::NearPerpendicularAxes { cos, .. } => Error::NearPerpendicularAxes { joint: i, cos },
            other => other,
        })?;
        let rt = r_prev.transpose();
        let hi = (rt * dir).normalize();
        p.push(rt * (origin - p_prev));
        r_prev *= rot_unchecked(&hi, q[j]);
        h.push(hi);
        p_prev = origin;
    }
    p.push(r_prev.transpose() * (tool_point - p_prev));
    RobotModel::new(h, p)
}

/// Re-expresses `model` in minimal coordinates using its own axes at `q`.
pub fn reproject(model: &RobotModel, nominal: &RobotModel, q: &[f64]) -> Result<RobotModel> {
    let lines = axis_lines(model, q)?;
    let tool = fk_frames(model, q)?.tool.translation;
    recover_model(&lines, &tool, nominal, q)
}
