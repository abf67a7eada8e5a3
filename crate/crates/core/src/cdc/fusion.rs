//! Joint smoothing of per-cluster estimates over the anchor graph.
//!
//! Each cluster fit is replaced by the minimizer of
//!
//! ```text
//! Σ_l (Θ_l − Θ̂_l)ᵀ H_l (Θ_l − Θ̂_l) + Σ_(l,k) (Θ_l − Θ_k)ᵀ W (Θ_l − Θ_k)
//! ```
//!
//! where `H_l = Σ JᵀJ` is the Gauss–Newton information of cluster `l` and
//! the edges `(l, k)` come from the Delaunay triangulation of the anchors.
//! `W = μ · diag(mean_l diag H_l)`. Directions a cluster's data pins down
//! stay put; directions it cannot observe are borrowed from its neighbors.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::scattered::Triangulation;
use super::ClusterModel;
use crate::error::{Error, Result};
use crate::kin::RobotModel;
use crate::minpoe::{ParamVector, PlaneBasis};
use crate::nls::{jacobian, PoseSample};

const MAX_ITERS: usize = 5000;
const REL_TOL: f64 = 1e-12;

/// Smoothed cluster estimates. `samples` must be the training set the
/// clusters were identified from; groups are matched in ascending
/// cluster-id order, as [`identify_clusters`](super::identify_clusters)
/// produces them. `smoothing = 0` returns the input unchanged.
pub fn fuse_clusters(
    nominal: &RobotModel,
    basis: &PlaneBasis,
    samples: &[PoseSample],
    clusters: &[ClusterModel],
    smoothing: f64,
    weight_a: f64,
) -> Result<Vec<ClusterModel>> {
    if !(smoothing.is_finite() && smoothing >= 0.0) {
        return Err(Error::Precondition("smoothing must be finite and non-negative".into()));
    }
    if clusters.is_empty() {
        return Err(Error::EmptyModel);
    }
    if smoothing == 0.0 || clusters.len() == 1 {
        return Ok(clusters.to_vec());
    }
    let mut groups: BTreeMap<usize, Vec<&PoseSample>> = BTreeMap::new();
    for s in samples {
        let id = s
            .cluster_id
            .ok_or_else(|| Error::InvalidData("sample without cluster id".into()))?;
        groups.entry(id).or_default().push(s);
    }
    if groups.len() != clusters.len() {
        return Err(Error::DimensionMismatch {
            expected: clusters.len(),
            got: groups.len(),
        });
    }
    let groups: Vec<Vec<&PoseSample>> = groups.into_values().collect();
    let p = clusters[0].theta.as_slice().len();
    let info: Vec<DMatrix<f64>> = groups
        .par_iter()
        .zip(clusters.par_iter())
        .map(|(g, c)| {
            let mut h = DMatrix::zeros(p, p);
            for s in g {
                let j = jacobian(nominal, basis, &c.theta, s, weight_a)?;
                h += j.tr_mul(&j);
            }
            Ok(h)
        })
        .collect::<Result<_>>()?;
    let mut w = DVector::zeros(p);
    for h in &info {
        w += h.diagonal();
    }
    w *= smoothing / clusters.len() as f64;

    let points: Vec<[f64; 2]> = clusters.iter().map(ClusterModel::q23).collect();
    let mut nb = vec![Vec::new(); clusters.len()];
    for (i, j) in Triangulation::new(&points)?.edges() {
        nb[i].push(j);
        nb[j].push(i);
    }
    let theta0: Vec<DVector<f64>> = clusters.iter().map(|c| DVector::from_row_slice(c.theta.as_slice())).collect();
    let fused = solve_graph_system(&info, &w, &nb, &theta0)?;
    clusters
        .iter()
        .zip(fused)
        .map(|(c, th)| {
            Ok(ClusterModel {
                theta: ParamVector::from_vec(th.as_slice().to_vec())?,
                ..c.clone()
            })
        })
        .collect()
}

type Blocks = Vec<DVector<f64>>;

fn dot(a: &Blocks, b: &Blocks) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Solves `(H + L ⊗ W) x = H θ0` by conjugate gradients with a
/// block-Jacobi preconditioner.
fn solve_graph_system(info: &[DMatrix<f64>], w: &DVector<f64>, nb: &[Vec<usize>], theta0: &Blocks) -> Result<Blocks> {
    let apply = |x: &Blocks| -> Blocks {
        (0..x.len())
            .map(|l| {
                let mut y = &info[l] * &x[l];
                for &k in &nb[l] {
                    y += (&x[l] - &x[k]).component_mul(w);
                }
                y
            })
            .collect()
    };
    let pre: Vec<DMatrix<f64>> = info
        .iter()
        .zip(nb)
        .map(|(h, n)| {
            let mut m = h.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += w[i] * n.len() as f64;
            }
            m.clone().cholesky().map(|c| c.inverse()).or_else(|| m.pseudo_inverse(0.0).ok())
        })
        .collect::<Option<_>>()
        .ok_or_else(|| Error::DegenerateGeometry("fusion preconditioner".into()))?;
    let precondition = |r: &Blocks| -> Blocks { r.iter().zip(&pre).map(|(r, m)| m * r).collect() };

    let b: Blocks = info.iter().zip(theta0).map(|(h, t)| h * t).collect();
    let bn = dot(&b, &b).sqrt();
    let mut x = theta0.clone();
    let mut r: Blocks = b.iter().zip(apply(&x)).map(|(b, a)| b - a).collect();
    let mut z = precondition(&r);
    let mut d = z.clone();
    let mut rz = dot(&r, &z);
    for _ in 0..MAX_ITERS {
        if dot(&r, &r).sqrt() <= REL_TOL * bn || rz == 0.0 {
            break;
        }
        let ad = apply(&d);
        let alpha = rz / dot(&d, &ad);
        if !alpha.is_finite() {
            return Err(Error::DegenerateGeometry("fusion conjugate gradients".into()));
        }
        for l in 0..x.len() {
            x[l] += &d[l] * alpha;
            r[l] -= &ad[l] * alpha;
        }
        z = precondition(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for l in 0..x.len() {
            d[l] = &z[l] + &d[l] * beta;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdc::identify_clusters;
    use crate::kin::forward_kinematics;
    use crate::nls::NlsOptions;

    /// Exact solution of the same quadratic by a dense solve.
    fn dense(info: &[DMatrix<f64>], w: &DVector<f64>, nb: &[Vec<usize>], theta0: &Blocks) -> Blocks {
        let p = w.len();
        let l = info.len();
        let mut a = DMatrix::zeros(p * l, p * l);
        let mut b = DVector::zeros(p * l);
        for i in 0..l {
            a.view_mut((i * p, i * p), (p, p)).add_assign(&info[i]);
            b.rows_mut(i * p, p).copy_from(&(&info[i] * &theta0[i]));
            for &k in &nb[i] {
                for r in 0..p {
                    a[(i * p + r, i * p + r)] += w[r];
                    a[(i * p + r, k * p + r)] -= w[r];
                }
            }
        }
        let x = a.lu().solve(&b).unwrap();
        (0..l).map(|i| x.rows(i * p, p).into_owned()).collect()
    }

    use std::ops::AddAssign;

    #[test]
    fn conjugate_gradients_match_dense_solve() {
        let p = 4;
        let info: Vec<DMatrix<f64>> = (0..5)
            .map(|i| {
                let m = DMatrix::from_fn(p, p, |r, c| ((r * 7 + c * 3 + i) % 5) as f64 - 2.0);
                // rank-deficient blocks, as in gauge-dependent fits
                let mut h = m.tr_mul(&m);
                if i % 2 == 1 {
                    h.column_mut(3).fill(0.0);
                    h.row_mut(3).fill(0.0);
                }
                h
            })
            .collect();
        let w = DVector::from_element(p, 0.5);
        let nb = vec![vec![1], vec![0, 2], vec![1, 3], vec![2, 4], vec![3]];
        let theta0: Blocks = (0..5).map(|i| DVector::from_fn(p, |r, _| (i + r) as f64 * 0.1)).collect();
        let x = solve_graph_system(&info, &w, &nb, &theta0).unwrap();
        let y = dense(&info, &w, &nb, &theta0);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).norm() < 1e-8, "{a} vs {b}");
        }
    }

    fn grid_samples(nominal: &RobotModel, per_model: &dyn Fn(usize) -> RobotModel) -> Vec<PoseSample> {
        let mut out = Vec::new();
        for a in 0..3 {
            for b in 0..3 {
                let id = a * 3 + b;
                let model = per_model(id);
                for k in 0..12 {
                    let t = k as f64;
                    let q = vec![
                        0.3 * (t * 0.7).sin(),
                        -0.3 + 0.3 * a as f64 + 0.01 * (t * 1.3).sin(),
                        -0.3 + 0.3 * b as f64 + 0.01 * (t * 0.4).cos(),
                        (t * 1.1).sin(),
                        0.4 + 0.5 * (t * 0.9).cos(),
                        (t * 2.3).sin(),
                    ];
                    out.push(PoseSample {
                        measured: forward_kinematics(&model, &q).unwrap(),
                        q,
                        cluster_id: Some(id),
                    });
                }
            }
        }
        let _ = nominal;
        out
    }

    #[test]
    fn zero_smoothing_is_identity_and_shared_truth_is_preserved() {
        let nominal = RobotModel::ma2010();
        let basis = crate::minpoe::plane_basis(&nominal, &[0.0; 6]).unwrap();
        let mut truth = ParamVector::zeros(6);
        for (i, v) in truth.as_mut_slice().iter_mut().enumerate() {
            *v = if i < 12 { 0.3 * ((i as f64) * 0.9).sin() } else { 1e-3 * ((i as f64) * 1.7).cos() };
        }
        let model = crate::minpoe::apply_params(&nominal, &truth, &basis).unwrap();
        let samples = grid_samples(&nominal, &|_| model.clone());
        let opts = NlsOptions::default();
        let clusters = identify_clusters(&nominal, &basis, &samples, &opts).unwrap();
        let same = fuse_clusters(&nominal, &basis, &samples, &clusters, 0.0, opts.weight_a).unwrap();
        assert_eq!(same, clusters);
        let fused = fuse_clusters(&nominal, &basis, &samples, &clusters, 0.1, opts.weight_a).unwrap();
        for c in &fused {
            let m = crate::minpoe::apply_params(&nominal, &c.theta, &basis).unwrap();
            for s in samples.iter().take(20) {
                let e = forward_kinematics(&m, &s.q).unwrap().translation - s.measured.translation;
                assert!(e.norm() < 1e-6, "{}", e.norm());
            }
        }
    }

    #[test]
    fn rejects_mismatched_groups() {
        let nominal = RobotModel::ma2010();
        let basis = crate::minpoe::plane_basis(&nominal, &[0.0; 6]).unwrap();
        let samples = grid_samples(&nominal, &|_| nominal.clone());
        let opts = NlsOptions::default();
        let clusters = identify_clusters(&nominal, &basis, &samples, &opts).unwrap();
        let err = fuse_clusters(&nominal, &basis, &samples[..12], &clusters, 0.1, opts.weight_a).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        assert!(fuse_clusters(&nominal, &basis, &samples, &clusters, -1.0, opts.weight_a).is_err());
    }
}
