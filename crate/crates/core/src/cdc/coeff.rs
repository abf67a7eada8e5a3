//! Linear-in-coefficients parameter fields `Θ(q2, q3) = A β(q2, q3)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::serde_mat;
use super::ClusterModel;
use crate::error::{Error, Result};

pub const FOURIER_TERMS: usize = 13;
const PINV_CUTOFF: f64 = 1e-10;
const REFINE_STEPS: usize = 3;

/// `[1, s2, c2, s3, c3, s23, c23, sin2q2, cos2q2, sin2q3, cos2q3,
/// sin2(q2+q3), cos2(q2+q3)]`.
pub fn eval_fourier_basis(q2: f64, q3: f64) -> [f64; FOURIER_TERMS] {
    let q23 = q2 + q3;
    [
        1.0,
        q2.sin(),
        q2.cos(),
        q3.sin(),
        q3.cos(),
        q23.sin(),
        q23.cos(),
        (2.0 * q2).sin(),
        (2.0 * q2).cos(),
        (2.0 * q3).sin(),
        (2.0 * q3).cos(),
        (2.0 * q23).sin(),
        (2.0 * q23).cos(),
    ]
}

/// Thin-plate kernel `r² ln r`.
pub fn thin_plate(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Fourier13,
    /// Thin-plate kernels at the anchors plus an affine tail `[1, q2, q3]`.
    Rbf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduced {
    #[serde(with = "serde_mat")]
    pub a_r: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub v_r: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffMatrix {
    #[serde(with = "serde_mat")]
    pub a: DMatrix<f64>,
    pub basis_kind: BasisKind,
    /// Kernel centers in `(q2, q3)`; empty for the Fourier basis.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub centers: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduced: Option<Reduced>,
    /// Largest absolute misfit at the anchors.
    pub anchor_residual: f64,
}

fn svd_sorted(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(vt.ncols(), order.len(), |r, c| vt[(order[c], r)]);
    (u, s, v)
}

/// Moore–Penrose inverse with a relative singular-value cutoff; also returns
/// the numerical rank.
pub(crate) fn pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (u, s, v) = svd_sorted(m);
    let smax = s.first().copied().unwrap_or(0.0);
    let tol = PINV_CUTOFF * smax;
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    let mut rank = 0;
    for (k, &sk) in s.iter().enumerate() {
        if sk > tol && sk > 0.0 {
            rank += 1;
            out += v.column(k) * u.column(k).transpose() / sk;
        }
    }
    (out, rank)
}

fn rbf_features(centers: &[[f64; 2]], q2: f64, q3: f64) -> DVector<f64> {
    let l = centers.len();
    let mut b = DVector::zeros(l + 3);
    for (k, c) in centers.iter().enumerate() {
        b[k] = thin_plate(((q2 - c[0]).powi(2) + (q3 - c[1]).powi(2)).sqrt());
    }
    b[l] = 1.0;
    b[l + 1] = q2;
    b[l + 2] = q3;
    b
}

impl CoeffMatrix {
    pub fn num_terms(&self) -> usize {
        self.a.ncols()
    }

    pub fn features(&self, q2: f64, q3: f64) -> DVector<f64> {
        match self.basis_kind {
            BasisKind::Fourier13 => DVector::from_row_slice(&eval_fourier_basis(q2, q3)),
            BasisKind::Rbf => rbf_features(&self.centers, q2, q3),
        }
    }

    /// `A β`, or `A_r V_rᵀ β` when reduced.
    pub fn predict(&self, q2: f64, q3: f64) -> DVector<f64> {
        let beta = self.features(q2, q3);
        match &self.reduced {
            Some(r) => &r.a_r * (r.v_r.tr_mul(&beta)),
            None => &self.a * beta,
        }
    }
}

fn anchor_q23(c: &ClusterModel) -> Result<(f64, f64)> {
    if c.anchor_q.len() < 3 {
        return Err(Error::Precondition("anchors need at least three joints".into()));
    }
    Ok((c.anchor_q[1], c.anchor_q[2]))
}

fn targets(clusters: &[ClusterModel]) -> Result<DMatrix<f64>> {
    let dim = clusters[0].theta.as_slice().len();
    let mut c = DMatrix::zeros(dim, clusters.len());
    for (l, cl) in clusters.iter().enumerate() {
        let t = cl.theta.as_slice();
        if t.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: t.len(),
            });
        }
        c.column_mut(l).copy_from_slice(t);
    }
    Ok(c)
}

/// `A = C B⁺` over the anchors' `(q2, q3)`.
pub fn fit_basis_coefficients(clusters: &[ClusterModel], kind: BasisKind) -> Result<CoeffMatrix> {
    if clusters.is_empty() {
        return Err(Error::EmptyModel);
    }
    let pts: Vec<(f64, f64)> = clusters.iter().map(anchor_q23).collect::<Result<_>>()?;
    let c = targets(clusters)?;
    let l = clusters.len();
    let (a, centers) = match kind {
        BasisKind::Fourier13 => {
            if l > 1 && pts.iter().all(|p| *p == pts[0]) {
                return Err(Error::Precondition("all anchors share the same (q2, q3)".into()));
            }
            let mut b = DMatrix::zeros(FOURIER_TERMS, l);
            for (k, &(q2, q3)) in pts.iter().enumerate() {
                b.column_mut(k).copy_from_slice(&eval_fourier_basis(q2, q3));
            }
            let (bp, rank) = pinv(&b);
            if rank == 0 {
                return Err(Error::DegenerateAnchors);
            }
            (&c * bp, Vec::new())
        }
        BasisKind::Rbf => {
            let centers: Vec<[f64; 2]> = pts.iter().map(|&(a, b)| [a, b]).collect();
            // saddle system [K P; Pᵀ 0] [w; c] = [Θ; 0]
            let mut sys = DMatrix::zeros(l + 3, l + 3);
            for i in 0..l {
                let f = rbf_features(&centers, pts[i].0, pts[i].1);
                for k in 0..l + 3 {
                    sys[(i, k)] = f[k];
                    if k >= l {
                        sys[(k, i)] = f[k];
                    }
                }
            }
            let (inv, rank) = pinv(&sys);
            if rank == 0 {
                return Err(Error::DegenerateAnchors);
            }
            let mut rhs = DMatrix::zeros(c.nrows(), l + 3);
            rhs.columns_mut(0, l).copy_from(&c);
            let inv_t = inv.transpose();
            let mut a = &rhs * &inv_t;
            // iterative refinement; the kernel matrix is poorly conditioned
            for _ in 0..REFINE_STEPS {
                let e = &rhs - &a * sys.transpose();
                a += e * &inv_t;
            }
            (a, centers)
        }
    };
    let mut out = CoeffMatrix {
        a,
        basis_kind: kind,
        centers,
        reduced: None,
        anchor_residual: 0.0,
    };
    out.anchor_residual = pts
        .iter()
        .enumerate()
        .map(|(k, &(q2, q3))| (out.predict(q2, q3) - c.column(k)).amax())
        .fold(0.0, f64::max);
    Ok(out)
}

/// Keeps the `r` dominant singular directions of `A`.
pub fn reduce_basis(coeffs: &CoeffMatrix, r: usize) -> Result<CoeffMatrix> {
    let m = coeffs.num_terms();
    if r == 0 || r > m {
        return Err(Error::Precondition(format!("reduced rank {r} outside 1..={m}")));
    }
    let (u, s, v) = svd_sorted(&coeffs.a);
    let keep = r.min(s.len());
    let mut a_r = u.columns(0, keep).into_owned();
    for (k, &sk) in s.iter().enumerate().take(keep) {
        a_r.column_mut(k).scale_mut(sk);
    }
    let v_r = v.columns(0, keep).into_owned();
    let mut singular_values = s;
    singular_values.resize(m, 0.0);
    let mut out = coeffs.clone();
    out.reduced = Some(Reduced {
        a_r,
        v_r,
        singular_values,
    });
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::minpoe::ParamVector;
    use crate::nls::NlsReport;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn cluster(q2: f64, q3: f64, theta: Vec<f64>) -> ClusterModel {
        let theta = ParamVector::from_vec(theta).unwrap();
        ClusterModel {
            anchor_q: vec![0.0, q2, q3, 0.0, 0.0, 0.0],
            nls_report: NlsReport {
                theta_hat: theta.clone(),
                initial_cost: 0.0,
                final_cost: 0.0,
                iterations: 0,
                converged: true,
                under_determined: false,
                num_samples: 0,
                cost_history: vec![],
            },
            theta,
        }
    }

    fn random_anchor(rng: &mut ChaCha8Rng) -> (f64, f64) {
        (rng.random_range(-1.0..0.9), rng.random_range(-1.2..0.9))
    }

    fn random_a(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn field_clusters(a: &DMatrix<f64>, pts: &[(f64, f64)]) -> Vec<ClusterModel> {
        pts.iter()
            .map(|&(q2, q3)| {
                let t = a * DVector::from_row_slice(&eval_fourier_basis(q2, q3));
                cluster(q2, q3, t.as_slice().to_vec())
            })
            .collect()
    }

    #[test]
    fn fourier_basis_examples() {
        let b = eval_fourier_basis(0.0, 0.0);
        assert_eq!(b, [1., 0., 1., 0., 1., 0., 1., 0., 1., 0., 1., 0., 1.]);
        let b = eval_fourier_basis(std::f64::consts::FRAC_PI_2, 0.0);
        let want = [1., 1., 0., 0., 1., 1., 0., 0., -1., 0., 1., 0., -1.];
        for (x, y) in b.iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
        let tau = std::f64::consts::TAU;
        let (x, y) = (eval_fourier_basis(0.3, -0.7), eval_fourier_basis(0.3 + tau, -0.7));
        for k in 0..13 {
            assert!((x[k] - y[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_is_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tc: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let clusters: Vec<_> = (0..40)
            .map(|_| {
                let (a, b) = random_anchor(&mut rng);
                cluster(a, b, tc.clone())
            })
            .collect();
        let coeffs = fit_basis_coefficients(&clusters, BasisKind::Fourier13).unwrap();
        for _ in 0..20 {
            let (a, b) = random_anchor(&mut rng);
            let p = coeffs.predict(a, b);
            for k in 0..24 {
                assert!((p[k] - tc[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn exact_model_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a_true = random_a(&mut rng, 24, 13);
        let pts: Vec<_> = (0..30).map(|_| random_anchor(&mut rng)).collect();
        let coeffs = fit_basis_coefficients(&field_clusters(&a_true, &pts), BasisKind::Fourier13).unwrap();
        assert!((&coeffs.a - &a_true).norm() < 1e-8, "{}", (&coeffs.a - &a_true).norm());
        assert!(coeffs.anchor_residual < 1e-9);
    }

    #[test]
    fn few_anchors_are_interpolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clusters: Vec<_> = (0..5)
            .map(|_| {
                let (a, b) = random_anchor(&mut rng);
                cluster(a, b, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect())
            })
            .collect();
        let coeffs = fit_basis_coefficients(&clusters, BasisKind::Fourier13).unwrap();
        for c in &clusters {
            let p = coeffs.predict(c.anchor_q[1], c.anchor_q[2]);
            for k in 0..24 {
                assert!((p[k] - c.theta.as_slice()[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_anchors_rejected() {
        let clusters = vec![cluster(0.1, 0.2, vec![0.0; 24]), cluster(0.1, 0.2, vec![1.0; 24])];
        assert!(matches!(
            fit_basis_coefficients(&clusters, BasisKind::Fourier13),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(fit_basis_coefficients(&[], BasisKind::Fourier13), Err(Error::EmptyModel)));
    }

    #[test]
    fn reduction_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a_true = random_a(&mut rng, 24, 13);
        let pts: Vec<_> = (0..40).map(|_| random_anchor(&mut rng)).collect();
        let coeffs = fit_basis_coefficients(&field_clusters(&a_true, &pts), BasisKind::Fourier13).unwrap();
        let full = reduce_basis(&coeffs, 13).unwrap();
        for _ in 0..10 {
            let (a, b) = random_anchor(&mut rng);
            assert!((full.predict(a, b) - coeffs.predict(a, b)).amax() < 1e-10);
        }
        for r in 1..=13 {
            let red = reduce_basis(&coeffs, r).unwrap();
            let rd = red.reduced.as_ref().unwrap();
            assert!(rd.singular_values.windows(2).all(|w| w[0] >= w[1]));
            let trunc = &rd.a_r * rd.v_r.transpose();
            let tail: f64 = rd.singular_values[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!(((&coeffs.a - trunc).norm() - tail).abs() < 1e-10);
        }
        assert!(reduce_basis(&coeffs, 0).is_err());
        assert!(reduce_basis(&coeffs, 14).is_err());
    }

    #[test]
    fn rank_seven_field_loses_nothing_at_seven() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a_true = random_a(&mut rng, 24, 7) * random_a(&mut rng, 7, 13);
        let pts: Vec<_> = (0..60).map(|_| random_anchor(&mut rng)).collect();
        let coeffs = fit_basis_coefficients(&field_clusters(&a_true, &pts), BasisKind::Fourier13).unwrap();
        let r7 = reduce_basis(&coeffs, 7).unwrap();
        let r13 = reduce_basis(&coeffs, 13).unwrap();
        for _ in 0..50 {
            let (a, b) = random_anchor(&mut rng);
            let truth = &a_true * DVector::from_row_slice(&eval_fourier_basis(a, b));
            let e7 = (r7.predict(a, b) - &truth).norm();
            let e13 = (r13.predict(a, b) - &truth).norm();
            assert!((e7 - e13).abs() < 1e-9);
        }
    }

    #[test]
    fn rbf_interpolates_anchors_and_affine_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let clusters: Vec<_> = (0..30)
            .map(|_| {
                let (a, b) = random_anchor(&mut rng);
                let mut t: Vec<f64> = (0..23).map(|_| rng.random_range(-1.0..1.0)).collect();
                t.push(2.0 * a - 3.0 * b + 0.5);
                cluster(a, b, t)
            })
            .collect();
        let coeffs = fit_basis_coefficients(&clusters, BasisKind::Rbf).unwrap();
        assert_eq!(coeffs.num_terms(), 33);
        assert!(coeffs.anchor_residual < 1e-9);

        let affine: Vec<_> = (0..20)
            .map(|_| {
                let (a, b) = random_anchor(&mut rng);
                cluster(a, b, vec![2.0 * a - 3.0 * b + 0.5; 4])
            })
            .collect();
        let coeffs = fit_basis_coefficients(&affine, BasisKind::Rbf).unwrap();
        for _ in 0..10 {
            let (a, b) = random_anchor(&mut rng);
            assert!((coeffs.predict(a, b)[0] - (2.0 * a - 3.0 * b + 0.5)).abs() < 1e-8);
        }
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a_true = random_a(&mut rng, 8, 13);
        let pts: Vec<_> = (0..20).map(|_| random_anchor(&mut rng)).collect();
        let coeffs = reduce_basis(
            &fit_basis_coefficients(&field_clusters(&a_true, &pts), BasisKind::Fourier13).unwrap(),
            4,
        )
        .unwrap();
        let s = serde_json::to_string(&coeffs).unwrap();
        let back: CoeffMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, coeffs);
    }
}
