//! Dense Levenberg–Marquardt and gradient-descent drivers for small
//! least-squares problems `min ½‖r(x)‖²`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub trait LeastSquaresProblem {
    fn num_params(&self) -> usize;

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Residuals and their Jacobian at `x`.
    fn linearize(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    LevenbergMarquardt,
    GradientDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub kind: SolverKind,
    pub max_iters: usize,
    pub cost_tol: f64,
    pub step_tol: f64,
    pub lambda0: f64,
    pub growth: f64,
    /// Relative cutoff on the singular values of the column-scaled Jacobian;
    /// steps discard directions below it. Zero keeps every direction.
    pub rank_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: DVector<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after each accepted iteration, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

fn half_norm2(r: &DVector<f64>) -> f64 {
    0.5 * r.norm_squared()
}

pub fn solve<P: LeastSquaresProblem>(problem: &P, x0: DVector<f64>, s: &SolverSettings) -> Result<Solution> {
    match s.kind {
        SolverKind::LevenbergMarquardt => levenberg_marquardt(problem, x0, s),
        SolverKind::GradientDescent => gradient_descent(problem, x0, s),
    }
}

fn step_small(dx: &DVector<f64>, x: &DVector<f64>, tol: f64) -> bool {
    dx.norm() <= tol * (x.norm() + tol)
}

pub fn levenberg_marquardt<P: LeastSquaresProblem>(
    problem: &P,
    x0: DVector<f64>,
    s: &SolverSettings,
) -> Result<Solution> {
    let mut x = x0;
    let (mut r, mut jac) = problem.linearize(&x)?;
    let mut cost = half_norm2(&r);
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = s.lambda0;
    let mut converged = cost == 0.0;
    let mut iterations = 0;

    while !converged && iterations < s.max_iters {
        iterations += 1;
        let jtj = jac.tr_mul(&jac);
        let g = jac.tr_mul(&r);
        let diag_floor = 1e-12 * jtj.diagonal().max().max(1e-300);
        let truncated = (s.rank_tol > 0.0).then(|| TruncatedSystem::new(&jac, &r, diag_floor, s.rank_tol));
        let mut accepted = false;
        while lambda < 1e20 {
            let dx = if let Some(t) = &truncated {
                t.step(lambda)
            } else {
                let mut a = jtj.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += lambda * jtj[(i, i)].max(diag_floor);
                }
                match a.clone().cholesky() {
                    Some(ch) => ch.solve(&(-&g)),
                    None => match a.lu().solve(&(-&g)) {
                        Some(dx) => dx,
                        None => {
                            lambda *= s.growth;
                            continue;
                        }
                    },
                }
            };
            let x_new = &x + &dx;
            let r_new = problem.residuals(&x_new)?;
            let cost_new = half_norm2(&r_new);
            if cost_new.is_finite() && cost_new < cost {
                let rel = (cost - cost_new) / cost;
                let tiny_step = step_small(&dx, &x, s.step_tol);
                x = x_new;
                cost = cost_new;
                history.push(cost);
                lambda = (lambda / s.growth).max(1e-15);
                if rel < s.cost_tol || tiny_step || cost == 0.0 {
                    converged = true;
                } else {
                    let (rr, jj) = problem.linearize(&x)?;
                    r = rr;
                    jac = jj;
                }
                accepted = true;
                break;
            }
            if step_small(&dx, &x, s.step_tol) {
                // no downhill step resolvable at machine precision
                converged = true;
                accepted = true;
                break;
            }
            lambda *= s.growth;
        }
        if !accepted {
            break;
        }
    }
    Ok(Solution {
        x,
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
        cost_history: history,
    })
}

/// SVD of the column-scaled Jacobian `J D⁻¹`, kept for all damping trials
/// of one iteration.
struct TruncatedSystem {
    inv_scale: DVector<f64>,
    /// `(σ_k, u_kᵀ r, v_k)` for the retained directions.
    modes: Vec<(f64, f64, DVector<f64>)>,
}

impl TruncatedSystem {
    fn new(jac: &DMatrix<f64>, r: &DVector<f64>, diag_floor: f64, rank_tol: f64) -> Self {
        let scale = DVector::from_iterator(
            jac.ncols(),
            jac.column_iter().map(|c| c.norm_squared().max(diag_floor).sqrt()),
        );
        let inv_scale = scale.map(|d| 1.0 / d);
        let mut scaled = jac.clone();
        for (j, mut c) in scaled.column_iter_mut().enumerate() {
            c *= inv_scale[j];
        }
        let svd = scaled.svd(true, true);
        let u = svd.u.expect("requested U");
        let vt = svd.v_t.expect("requested Vᵀ");
        let smax = svd.singular_values.max();
        let modes = svd
            .singular_values
            .iter()
            .enumerate()
            .filter(|(_, &sk)| sk > rank_tol * smax && sk > 0.0)
            .map(|(k, &sk)| (sk, u.column(k).dot(r), vt.row(k).transpose()))
            .collect();
        Self { inv_scale, modes }
    }

    fn step(&self, lambda: f64) -> DVector<f64> {
        let mut dx = DVector::zeros(self.inv_scale.len());
        for (sk, ur, v) in &self.modes {
            dx -= v * (sk * ur / (sk * sk + lambda));
        }
        dx.component_mul(&self.inv_scale)
    }
}

/// Steepest descent with Armijo backtracking.
pub fn gradient_descent<P: LeastSquaresProblem>(problem: &P, x0: DVector<f64>, s: &SolverSettings) -> Result<Solution> {
    let mut x = x0;
    let (mut r, mut jac) = problem.linearize(&x)?;
    let mut cost = half_norm2(&r);
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut alpha = 1.0;
    let mut converged = cost == 0.0;
    let mut iterations = 0;
    while !converged && iterations < s.max_iters {
        iterations += 1;
        let g = jac.tr_mul(&r);
        let g2 = g.norm_squared();
        if g2 == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        while alpha > 1e-30 {
            let dx = &g * (-alpha);
            let x_new = &x + &dx;
            let cost_new = half_norm2(&problem.residuals(&x_new)?);
            if cost_new.is_finite() && cost_new <= cost - 1e-4 * alpha * g2 {
                let rel = (cost - cost_new) / cost;
                let tiny_step = step_small(&dx, &x, s.step_tol);
                x = x_new;
                cost = cost_new;
                history.push(cost);
                alpha *= 2.0;
                converged = rel < s.cost_tol || tiny_step || cost == 0.0;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            converged = true;
            break;
        }
        if !converged {
            let (rr, jj) = problem.linearize(&x)?;
            r = rr;
            jac = jj;
        }
    }
    Ok(Solution {
        x,
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
        cost_history: history,
    })
}
