//! Circular-point analysis: identify each joint axis by sweeping that joint
//! alone and fitting the traced points to a circle in space.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector2};

use crate::error::{Error, Result};
use crate::kin::{forward_kinematics, fk_frames, rot_unchecked, RobotModel, Vec3};
use crate::minpoe::{recover_model, AxisLine};

/// Minimum sweep span accepted by [`JointSweep::validate`].
pub const MIN_SWEEP_SPAN_DEG: f64 = 10.0;
const COLLINEAR_TOL_MM: f64 = 1e-6;
const REFINE_MAX_ITERS: usize = 50;
const REFINE_STEP_TOL: f64 = 1e-12;

/// One joint swept through `K` angles with everything else held at `base_config`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSweep {
    /// 1-based.
    pub joint_index: usize,
    pub base_config: Vec<f64>,
    pub sweep_angles: Vec<f64>,
    /// Tracked point in the base frame for each sweep angle.
    pub tcp_positions: Vec<Vec3>,
}

impl JointSweep {
    pub fn validate(&self) -> Result<()> {
        let k = self.sweep_angles.len();
        if k < 3 || self.tcp_positions.len() != k {
            return Err(Error::InvalidData(format!(
                "sweep of joint {} needs at least 3 paired angles and points (got {k} angles, {} points)",
                self.joint_index,
                self.tcp_positions.len()
            )));
        }
        if self.joint_index == 0 || self.joint_index > self.base_config.len() {
            return Err(Error::InvalidData(format!("joint index {} out of range", self.joint_index)));
        }
        let mut sorted = self.sweep_angles.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[1] - w[0] <= 0.0) {
            return Err(Error::InvalidData(format!(
                "sweep of joint {} repeats an angle",
                self.joint_index
            )));
        }
        let span = sorted[k - 1] - sorted[0];
        if span < MIN_SWEEP_SPAN_DEG.to_radians() {
            return Err(Error::InvalidData(format!(
                "sweep of joint {} spans {:.2}°, below the {MIN_SWEEP_SPAN_DEG}° floor",
                self.joint_index,
                span.to_degrees()
            )));
        }
        Ok(())
    }

    /// Joint configuration of sample `k`.
    pub fn config(&self, k: usize) -> Vec<f64> {
        let mut q = self.base_config.clone();
        q[self.joint_index - 1] = self.sweep_angles[k];
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleFit {
    pub center: Vec3,
    pub normal: Vec3,
    pub radius: f64,
    pub rms_residual: f64,
}

/// Fits a circle to points in space.
///
/// Plane from the centered scatter matrix, Kåsa algebraic fit in the plane,
/// then Gauss-Newton on the geometric distance. The normal is oriented so the
/// points, taken in the given order, run counterclockwise about it.
pub fn fit_circle_3d(points: &[Vec3]) -> Result<CircleFit> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "circle fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let k = points.len() as f64;
    let centroid = points.iter().sum::<Vec3>() / k;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let major: Vec3 = eig.eigenvectors.column(order[0]).into();
    let mut normal: Vec3 = eig.eigenvectors.column(order[2]).into();

    let line_dist = points
        .iter()
        .map(|p| {
            let d = p - centroid;
            (d - major * d.dot(&major)).norm()
        })
        .fold(0.0, f64::max);
    if line_dist <= COLLINEAR_TOL_MM {
        return Err(Error::DegenerateGeometry(
            "points are collinear or coincident".into(),
        ));
    }

    let u = major;
    let v = normal.cross(&u).normalize();
    let planar: Vec<Vector2<f64>> = points
        .iter()
        .map(|p| {
            let d = p - centroid;
            Vector2::new(d.dot(&u), d.dot(&v))
        })
        .collect();

    let (mut c, mut r) = kasa_fit(&planar)?;
    for _ in 0..REFINE_MAX_ITERS {
        let mut jac = DMatrix::zeros(planar.len(), 3);
        let mut res = DVector::zeros(planar.len());
        for (i, p) in planar.iter().enumerate() {
            let d = p - c;
            let dist = d.norm();
            if dist == 0.0 {
                continue;
            }
            res[i] = dist - r;
            jac[(i, 0)] = -d.x / dist;
            jac[(i, 1)] = -d.y / dist;
            jac[(i, 2)] = -1.0;
        }
        let Some(step) = jac.clone().svd(true, true).solve(&(-res), 1e-14).ok() else {
            break;
        };
        c += Vector2::new(step[0], step[1]);
        r += step[2];
        if step.norm() <= REFINE_STEP_TOL * (1.0 + r.abs()) {
            break;
        }
    }
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::DegenerateGeometry(format!("fitted radius {r} is not positive")));
    }

    // Orientation from the traversal order.
    let mut turn = 0.0;
    for w in planar.windows(2) {
        let a = w[0] - c;
        let b = w[1] - c;
        turn += (a.x * b.y - a.y * b.x).atan2(a.dot(&b));
    }
    if turn < 0.0 {
        normal = -normal;
    }

    let center = centroid + u * c.x + v * c.y;
    let rms = (points
        .iter()
        .map(|p| {
            let d = p - center;
            let h = d.dot(&normal);
            let rho = (d - normal * h).norm();
            h * h + (rho - r) * (rho - r)
        })
        .sum::<f64>()
        / k)
        .sqrt();
    Ok(CircleFit {
        center,
        normal,
        radius: r,
        rms_residual: rms,
    })
}

fn kasa_fit(planar: &[Vector2<f64>]) -> Result<(Vector2<f64>, f64)> {
    let mut a = DMatrix::zeros(planar.len(), 3);
    let mut b = DVector::zeros(planar.len());
    for (i, p) in planar.iter().enumerate() {
        a[(i, 0)] = p.x;
        a[(i, 1)] = p.y;
        a[(i, 2)] = 1.0;
        b[i] = -(p.x * p.x + p.y * p.y);
    }
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::DegenerateGeometry(e.to_string()))?;
    let c = Vector2::new(-0.5 * sol[0], -0.5 * sol[1]);
    let r2 = c.norm_squared() - sol[2];
    if r2 <= 0.0 {
        return Err(Error::DegenerateGeometry("algebraic circle fit failed".into()));
    }
    Ok((c, r2.sqrt()))
}

/// Identifies a model from one sweep per joint around `q_anchor`.
///
/// `probe_offset` is the tracked point expressed in the tool frame; zero means
/// the tool origin itself.
pub fn cpa_identify(
    sweeps: &[JointSweep],
    nominal: &RobotModel,
    q_anchor: &[f64],
    probe_offset: &Vec3,
) -> Result<RobotModel> {
    let n = nominal.n();
    if sweeps.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: sweeps.len(),
        });
    }
    let nominal_frames = fk_frames(nominal, q_anchor)?;
    let mut ordered: Vec<&JointSweep> = sweeps.iter().collect();
    ordered.sort_by_key(|s| s.joint_index);

    let mut lines = Vec::with_capacity(n);
    let mut probe_sum = Vec3::zeros();
    let mut probe_count = 0usize;
    for (j, sweep) in ordered.iter().enumerate() {
        if sweep.joint_index != j + 1 {
            return Err(Error::InvalidData(format!("missing sweep for joint {}", j + 1)));
        }
        sweep.validate()?;
        for (i, (&b, &a)) in sweep.base_config.iter().zip(q_anchor).enumerate() {
            if i != j && (b - a).abs() > 1e-9 {
                return Err(Error::InvalidData(format!(
                    "sweep of joint {} does not hold joint {} at the anchor value",
                    j + 1,
                    i + 1
                )));
            }
        }
        let mut idx: Vec<usize> = (0..sweep.sweep_angles.len()).collect();
        idx.sort_by(|&a, &b| sweep.sweep_angles[a].total_cmp(&sweep.sweep_angles[b]));
        let pts: Vec<Vec3> = idx.iter().map(|&k| sweep.tcp_positions[k]).collect();
        let fit = fit_circle_3d(&pts).map_err(|e| match e {
            Error::DegenerateGeometry(msg) => {
                Error::DegenerateGeometry(format!("joint {} sweep: {msg}", j + 1))
            }
            other => other,
        })?;
        let mut dir = fit.normal;
        if dir.dot(&nominal_frames.axis_in_base(nominal, j + 1)) < 0.0 {
            dir = -dir;
        }
        for &k in &idx {
            let back = rot_unchecked(&dir, q_anchor[j] - sweep.sweep_angles[k]);
            probe_sum += fit.center + back * (sweep.tcp_positions[k] - fit.center);
            probe_count += 1;
        }
        lines.push(AxisLine {
            point: fit.center,
            dir,
        });
    }
    let probe = probe_sum / probe_count as f64;
    let provisional = recover_model(&lines, &probe, nominal, q_anchor)?;
    let tool_rotation = forward_kinematics(&provisional, q_anchor)?.rotation;
    let tool_point = probe - tool_rotation * probe_offset;
    recover_model(&lines, &tool_point, nominal, q_anchor)
}

/// Writes sweeps as CSV rows `joint_index, q1..qn, x, y, z`.
pub fn write_sweeps_csv(path: &Path, sweeps: &[JointSweep]) -> Result<()> {
    let n = sweeps.first().map_or(0, |s| s.base_config.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["joint_index".to_string()];
    header.extend((1..=n).map(|i| format!("q{i}")));
    header.extend(["x", "y", "z"].map(String::from));
    w.write_record(&header)?;
    for s in sweeps {
        for k in 0..s.sweep_angles.len() {
            let mut row = vec![s.joint_index.to_string()];
            row.extend(s.config(k).iter().map(|x| x.to_string()));
            let p = s.tcp_positions[k];
            row.extend([p.x, p.y, p.z].map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::io::write_atomic(path, &bytes)
}

pub fn read_sweeps_csv(path: &Path) -> Result<Vec<JointSweep>> {
    let mut r = csv::Reader::from_path(path)?;
    let n = r.headers()?.len().checked_sub(4).filter(|&n| n > 0).ok_or_else(|| {
        Error::InvalidData("sweep CSV needs joint_index, q1..qn, x, y, z columns".into())
    })?;
    let mut sweeps: Vec<JointSweep> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidData(format!("sweep CSV: {e}")))?;
        let joint = vals[0] as usize;
        if joint == 0 || joint > n {
            return Err(Error::InvalidData(format!("sweep CSV: joint index {joint} out of range")));
        }
        let q = &vals[1..=n];
        let p = Vec3::new(vals[n + 1], vals[n + 2], vals[n + 3]);
        match sweeps.last_mut() {
            Some(s) if s.joint_index == joint => {
                s.sweep_angles.push(q[joint - 1]);
                s.tcp_positions.push(p);
            }
            _ => sweeps.push(JointSweep {
                joint_index: joint,
                base_config: q.to_vec(),
                sweep_angles: vec![q[joint - 1]],
                tcp_positions: vec![p],
            }),
        }
    }
    for s in &mut sweeps {
        let mean = s.sweep_angles.iter().sum::<f64>() / s.sweep_angles.len() as f64;
        s.base_config[s.joint_index - 1] = mean;
    }
    Ok(sweeps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kin::rot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn circle(n: usize, radius: f64) -> Vec<Vec3> {
        (0..n)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Vec3::new(radius * t.cos(), radius * t.sin(), 0.0)
            })
            .collect()
    }

    #[test]
    fn exact_unit_circle() {
        let fit = fit_circle_3d(&circle(8, 1.0)).unwrap();
        assert!(fit.center.norm() < 1e-12);
        assert!((fit.normal - Vec3::z()).norm() < 1e-12);
        assert!((fit.radius - 1.0).abs() < 1e-12);
        assert!(fit.rms_residual < 1e-10);
    }

    #[test]
    fn reversed_order_flips_normal() {
        let mut pts = circle(8, 1.0);
        pts.reverse();
        let fit = fit_circle_3d(&pts).unwrap();
        assert!((fit.normal + Vec3::z()).norm() < 1e-12);
    }

    #[test]
    fn collinear_and_coincident_points_are_degenerate() {
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.5)).collect();
        assert!(matches!(fit_circle_3d(&line), Err(Error::DegenerateGeometry(_))));
        let same = vec![Vec3::new(1.0, 2.0, 3.0); 4];
        assert!(matches!(fit_circle_3d(&same), Err(Error::DegenerateGeometry(_))));
        assert!(fit_circle_3d(&circle(2, 1.0)).is_err());
    }

    #[test]
    fn noisy_large_circle() {
        let normal = Normal::new(0.0, 0.2).unwrap();
        let clean = circle(8, 1000.0);
        let mut mean_residual = 0.0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = clean
                .iter()
                .map(|p| p + Vec3::from_fn(|_, _| normal.sample(&mut rng)))
                .collect();
            let fit = fit_circle_3d(&pts).unwrap();
            assert!((fit.radius - 1000.0).abs() < 0.5, "seed {seed}: {}", fit.radius);
            mean_residual += fit.rms_residual / 100.0;
        }
        assert!((mean_residual - 0.2).abs() < 0.1, "{mean_residual}");
    }

    #[test]
    fn fit_is_rigidly_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..7)
            .map(|k| {
                let t = 0.3 * k as f64;
                Vec3::new(300.0 * t.cos(), 300.0 * t.sin(), rng.random_range(-0.5..0.5))
            })
            .collect();
        let base = fit_circle_3d(&pts).unwrap();
        let r = rot(&Vec3::new(1.0, -2.0, 0.5).normalize(), 1.2).unwrap();
        let t = Vec3::new(10.0, -40.0, 700.0);
        let moved: Vec<Vec3> = pts.iter().map(|p| r * p + t).collect();
        let fit = fit_circle_3d(&moved).unwrap();
        assert!((fit.center - (r * base.center + t)).norm() < 1e-9);
        assert!((fit.normal - r * base.normal).norm() < 1e-9);
        assert!((fit.radius - base.radius).abs() < 1e-9);
        assert!((fit.rms_residual - base.rms_residual).abs() < 1e-9);
    }

    #[test]
    fn sweep_validation() {
        let mut s = JointSweep {
            joint_index: 2,
            base_config: vec![0.0; 6],
            sweep_angles: vec![0.0, 0.1, 0.2],
            tcp_positions: vec![Vec3::zeros(); 3],
        };
        assert!(s.validate().is_ok());
        s.sweep_angles = vec![0.0, 0.05, 0.1];
        assert!(s.validate().is_err());
        s.sweep_angles = vec![0.0, 0.2, 0.2];
        assert!(s.validate().is_err());
        s.sweep_angles = vec![0.0, 0.2];
        assert!(s.validate().is_err());
    }
}
