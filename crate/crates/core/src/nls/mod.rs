//! Nonlinear least-squares identification of minimal POE deviations.
//!
//! The cost is `½ Σ_k ‖r_k‖²` where each 6-vector `r_k` stacks the position
//! error (mm) and a scaled rotation error whose squared norm matches the
//! Frobenius term of [`pose_error`](crate::kin::pose_error).

pub mod solver;

use nalgebra::{DMatrix, DVector, Matrix3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kin::{default_weight, fk_frames, rotation_to_quaternion, skew, RobotModel, Rot3, Transform, Vec3};
use crate::minpoe::{apply_params, plane_basis, ParamVector, PlaneBasis};
use solver::{LeastSquaresProblem, SolverKind, SolverSettings};

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSample {
    pub q: Vec<f64>,
    pub measured: Transform,
    pub cluster_id: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NlsOptions {
    pub weight_a: f64,
    pub max_iters: usize,
    pub cost_tol: f64,
    pub step_tol: f64,
    pub lm_lambda0: f64,
    pub lm_growth: f64,
    pub solver: SolverKind,
    /// Relative singular-value cutoff for LM steps (see
    /// [`SolverSettings::rank_tol`]); zero disables truncation.
    pub rank_tol: f64,
}

impl Default for NlsOptions {
    fn default() -> Self {
        Self {
            weight_a: default_weight(),
            max_iters: 200,
            cost_tol: 1e-12,
            step_tol: 1e-12,
            lm_lambda0: 1e-3,
            lm_growth: 10.0,
            solver: SolverKind::LevenbergMarquardt,
            rank_tol: 0.0,
        }
    }
}

impl NlsOptions {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            self.weight_a,
            self.cost_tol,
            self.step_tol,
            self.lm_lambda0,
            self.lm_growth,
        ];
        if reals.iter().any(|x| !(x.is_finite() && *x > 0.0)) || self.max_iters == 0 {
            return Err(Error::Precondition("NLS options must be positive".into()));
        }
        if !(self.rank_tol >= 0.0 && self.rank_tol < 1.0) {
            return Err(Error::Precondition("rank_tol must lie in [0, 1)".into()));
        }
        if self.lm_growth <= 1.0 {
            return Err(Error::Precondition("lm_growth must exceed 1".into()));
        }
        Ok(())
    }

    fn settings(&self) -> SolverSettings {
        SolverSettings {
            kind: self.solver,
            max_iters: self.max_iters,
            cost_tol: self.cost_tol,
            step_tol: self.step_tol,
            lambda0: self.lm_lambda0,
            growth: self.lm_growth,
            rank_tol: self.rank_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlsReport {
    pub theta_hat: ParamVector,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Fewer samples than `⌈4n/6⌉`.
    pub under_determined: bool,
    pub num_samples: usize,
    pub cost_history: Vec<f64>,
}

/// Minimum pose count for `4n` unknowns.
pub fn min_samples(n: usize) -> usize {
    (4 * n).div_ceil(6)
}

/// Vector part of the unit quaternion of `R_model R_measᵀ` (scalar part ≥ 0)
/// and that scalar part.
fn rotation_error(r_model: &Rot3, r_meas: &Rot3) -> (f64, Vec3) {
    let q = rotation_to_quaternion(&(r_model * r_meas.transpose()));
    (q[0], Vec3::new(q[1], q[2], q[3]))
}

fn orientation_scale(a: f64) -> f64 {
    (8.0 * a).sqrt()
}

fn stack(dp: Vec3, dr: Vec3) -> Vector6<f64> {
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

/// Residual of `model` against one measured pose.
pub fn model_residual(model: &RobotModel, sample: &PoseSample, a: f64) -> Result<Vector6<f64>> {
    let tool = fk_frames(model, &sample.q)?.tool;
    Ok(transform_residual(&tool, &sample.measured, a))
}

pub fn transform_residual(t: &Transform, measured: &Transform, a: f64) -> Vector6<f64> {
    let (_, eps) = rotation_error(&t.rotation, &measured.rotation);
    stack(t.translation - measured.translation, eps * orientation_scale(a))
}

pub fn residual(
    nominal: &RobotModel,
    basis: &PlaneBasis,
    theta: &ParamVector,
    sample: &PoseSample,
    a: f64,
) -> Result<Vector6<f64>> {
    let model = apply_params(nominal, theta, basis)?;
    model_residual(&model, sample, a)
}

/// Derivative of `R(h, q)` along a unit-preserving axis variation `dh`.
fn d_rot(h: &Vec3, dh: &Vec3, q: f64) -> Rot3 {
    let hx = skew(h);
    let dhx = skew(dh);
    dhx * q.sin() + (dhx * hx + hx * dhx) * (1.0 - q.cos())
}

fn axis_derivatives(nominal: &RobotModel, basis: &PlaneBasis, theta: &ParamVector, j: usize) -> (Vec3, Vec3) {
    let k1 = basis.k1[j];
    let k2 = basis.k2[j];
    let r1 = crate::kin::rot_unchecked(&k1, theta.theta(j));
    let r2h = crate::kin::rot_unchecked(&k2, theta.phi(j)) * nominal.axes()[j];
    let h = r1 * r2h;
    (k1.cross(&h), r1 * k2.cross(&r2h))
}

fn pose_jacobian_of(nominal: &RobotModel, basis: &PlaneBasis, theta: &ParamVector, model: &RobotModel, q: &[f64]) -> Result<DMatrix<f64>> {
    let n = nominal.n();
    let frames = fk_frames(model, q)?;
    let mut jac = DMatrix::zeros(6, 4 * n);
    for j in 0..n {
        let ra = frames.rotations[j];
        let rb = frames.rotations[j + 1];
        let diff = ra - rb;
        let dv = diff * basis.k1[j];
        let dw = diff * basis.k2[j];
        for r in 0..3 {
            jac[(r, 2 * j)] = dv[r];
            jac[(r, 2 * j + 1)] = dw[r];
        }
        let h = model.axes()[j];
        let p_tool = frames.tool_in_frame(j + 1);
        let r_local = ra.transpose() * rb;
        let (dh_t, dh_p) = axis_derivatives(nominal, basis, theta, j);
        for (c, dh) in [(2 * n + 2 * j, dh_t), (2 * n + 2 * j + 1, dh_p)] {
            let dr = d_rot(&h, &dh, q[j]);
            let dp = ra * dr * p_tool;
            let omega = crate::kin::vee(&(ra * dr * r_local.transpose() * ra.transpose()));
            for r in 0..3 {
                jac[(r, c)] = dp[r];
                jac[(r + 3, c)] = omega[r];
            }
        }
    }
    Ok(jac)
}

/// 6 × 4n derivative of `[p_0T; ω]` with respect to `Θ`, where `ω` is the
/// base-frame angular velocity of the tool.
pub fn pose_jacobian(nominal: &RobotModel, basis: &PlaneBasis, theta: &ParamVector, q: &[f64]) -> Result<DMatrix<f64>> {
    let model = apply_params(nominal, theta, basis)?;
    pose_jacobian_of(nominal, basis, theta, &model, q)
}

fn residual_and_jacobian(
    nominal: &RobotModel,
    basis: &PlaneBasis,
    theta: &ParamVector,
    model: &RobotModel,
    sample: &PoseSample,
    a: f64,
) -> Result<(Vector6<f64>, DMatrix<f64>)> {
    let mut jac = pose_jacobian_of(nominal, basis, theta, model, &sample.q)?;
    let tool = fk_frames(model, &sample.q)?.tool;
    let (eta, eps) = rotation_error(&tool.rotation, &sample.measured.rotation);
    let s = orientation_scale(a);
    let m: Matrix3<f64> = (Matrix3::identity() * eta - skew(&eps)) * (0.5 * s);
    let omega_rows = jac.rows(3, 3).into_owned();
    jac.rows_mut(3, 3).copy_from(&(m * omega_rows));
    let res = stack(tool.translation - sample.measured.translation, eps * s);
    Ok((res, jac))
}

/// 6 × 4n Jacobian of [`residual`] with respect to `Θ`.
pub fn jacobian(
    nominal: &RobotModel,
    basis: &PlaneBasis,
    theta: &ParamVector,
    sample: &PoseSample,
    a: f64,
) -> Result<DMatrix<f64>> {
    let model = apply_params(nominal, theta, basis)?;
    Ok(residual_and_jacobian(nominal, basis, theta, &model, sample, a)?.1)
}

struct MinPoeProblem<'a> {
    nominal: &'a RobotModel,
    basis: &'a PlaneBasis,
    samples: &'a [PoseSample],
    a: f64,
}

impl MinPoeProblem<'_> {
    fn theta(&self, x: &DVector<f64>) -> ParamVector {
        ParamVector::from_vec(x.as_slice().to_vec()).expect("length is 4n")
    }
}

impl LeastSquaresProblem for MinPoeProblem<'_> {
    fn num_params(&self) -> usize {
        4 * self.nominal.n()
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let model = apply_params(self.nominal, &self.theta(x), self.basis)?;
        let mut r = DVector::zeros(6 * self.samples.len());
        for (k, s) in self.samples.iter().enumerate() {
            r.rows_mut(6 * k, 6).copy_from(&model_residual(&model, s, self.a)?);
        }
        Ok(r)
    }

    fn linearize(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let theta = self.theta(x);
        let model = apply_params(self.nominal, &theta, self.basis)?;
        let m = self.num_params();
        let mut r = DVector::zeros(6 * self.samples.len());
        let mut jac = DMatrix::zeros(6 * self.samples.len(), m);
        for (k, s) in self.samples.iter().enumerate() {
            let (rk, jk) = residual_and_jacobian(self.nominal, self.basis, &theta, &model, s, self.a)?;
            r.rows_mut(6 * k, 6).copy_from(&rk);
            jac.view_mut((6 * k, 0), (6, m)).copy_from(&jk);
        }
        Ok((r, jac))
    }
}

fn check_samples(nominal: &RobotModel, samples: &[PoseSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in samples {
        if s.q.len() != nominal.n() {
            return Err(Error::DimensionMismatch {
                expected: nominal.n(),
                got: s.q.len(),
            });
        }
    }
    Ok(())
}

/// Identifies `Θ` starting from the nominal model, with the plane basis
/// taken at the zero configuration.
pub fn nls_calibrate(nominal: &RobotModel, samples: &[PoseSample], opts: &NlsOptions) -> Result<NlsReport> {
    let basis = plane_basis(nominal, &vec![0.0; nominal.n()])?;
    nls_calibrate_with_basis(nominal, &basis, samples, opts)
}

pub fn nls_calibrate_with_basis(
    nominal: &RobotModel,
    basis: &PlaneBasis,
    samples: &[PoseSample],
    opts: &NlsOptions,
) -> Result<NlsReport> {
    opts.validate()?;
    check_samples(nominal, samples)?;
    let n = nominal.n();
    let problem = MinPoeProblem {
        nominal,
        basis,
        samples,
        a: opts.weight_a,
    };
    let sol = solver::solve(&problem, DVector::zeros(4 * n), &opts.settings())?;
    Ok(NlsReport {
        theta_hat: problem.theta(&sol.x),
        initial_cost: sol.initial_cost,
        final_cost: sol.final_cost,
        iterations: sol.iterations,
        converged: sol.converged,
        under_determined: samples.len() < min_samples(n),
        num_samples: samples.len(),
        cost_history: sol.cost_history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseReport {
    pub offset: [f64; 3],
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct BaseProblem<'a> {
    nominal: &'a RobotModel,
    samples: &'a [PoseSample],
    a: f64,
}

impl LeastSquaresProblem for BaseProblem<'_> {
    fn num_params(&self) -> usize {
        3
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.linearize(x)?.0)
    }

    fn linearize(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let model = self.nominal.with_base_offset(&Vec3::new(x[0], x[1], x[2]));
        let mut r = DVector::zeros(6 * self.samples.len());
        let mut jac = DMatrix::zeros(6 * self.samples.len(), 3);
        for (k, s) in self.samples.iter().enumerate() {
            r.rows_mut(6 * k, 6).copy_from(&model_residual(&model, s, self.a)?);
            for c in 0..3 {
                jac[(6 * k + c, c)] = 1.0;
            }
        }
        Ok((r, jac))
    }
}

/// Fits only a translation of `p_01`; returns the shifted model.
pub fn base_calibrate(nominal: &RobotModel, samples: &[PoseSample], opts: &NlsOptions) -> Result<(RobotModel, BaseReport)> {
    opts.validate()?;
    check_samples(nominal, samples)?;
    let problem = BaseProblem {
        nominal,
        samples,
        a: opts.weight_a,
    };
    let sol = solver::solve(&problem, DVector::zeros(3), &opts.settings())?;
    let offset = Vec3::new(sol.x[0], sol.x[1], sol.x[2]);
    Ok((
        nominal.with_base_offset(&offset),
        BaseReport {
            offset: offset.into(),
            initial_cost: sol.initial_cost,
            final_cost: sol.final_cost,
            iterations: sol.iterations,
            converged: sol.converged,
        },
    ))
}
