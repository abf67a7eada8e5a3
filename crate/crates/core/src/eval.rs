//! Error statistics, method comparison tables, correlation with joint
//! angles and paired significance tests.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kin::{rotation_angle, PosePredictor};
use crate::sim::Dataset;

/// Population statistics of a set of nonnegative errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub count: usize,
}

impl ErrorStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            mean,
            std: var.sqrt(),
            max,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    /// mm.
    pub position: ErrorStats,
    /// Degrees.
    pub orientation: ErrorStats,
    pub position_errors: Vec<f64>,
    pub orientation_errors: Vec<f64>,
}

/// Position error `‖p_model − p_meas‖` (mm) and the angle of
/// `R_model R_measᵀ` (degrees) for every sample.
pub fn evaluate(method: &str, model: &(dyn PosePredictor + Sync), dataset: &Dataset) -> Result<MethodReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let errors: Vec<(f64, f64)> = dataset
        .samples
        .par_iter()
        .map(|s| {
            let t = model.predict(&s.q)?;
            let dp = (t.translation - s.measured.translation).norm();
            let da = rotation_angle(&(t.rotation * s.measured.rotation.transpose())).to_degrees();
            Ok((dp, da))
        })
        .collect::<Result<_>>()?;
    let (position_errors, orientation_errors): (Vec<f64>, Vec<f64>) = errors.into_iter().unzip();
    Ok(MethodReport {
        method: method.to_string(),
        position: ErrorStats::from_values(&position_errors)?,
        orientation: ErrorStats::from_values(&orientation_errors)?,
        position_errors,
        orientation_errors,
    })
}

/// Absolute Pearson correlation of position error with each joint angle.
/// A joint (or error vector) without variance reports 0 and is flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCorrelation {
    pub values: Vec<f64>,
    pub zero_variance: Vec<bool>,
}

pub fn joint_error_correlation(report: &MethodReport, dataset: &Dataset) -> Result<JointCorrelation> {
    let e = &report.position_errors;
    if e.len() != dataset.len() {
        return Err(Error::DimensionMismatch {
            expected: dataset.len(),
            got: e.len(),
        });
    }
    if e.len() < 3 {
        return Err(Error::Precondition("correlation needs at least 3 samples".into()));
    }
    let n = dataset.samples[0].q.len();
    let count = e.len() as f64;
    let me = e.iter().sum::<f64>() / count;
    let ve: f64 = e.iter().map(|x| (x - me).powi(2)).sum();
    let mut values = Vec::with_capacity(n);
    let mut zero_variance = Vec::with_capacity(n);
    for j in 0..n {
        let q: Vec<f64> = dataset.samples.iter().map(|s| s.q[j]).collect();
        let mq = q.iter().sum::<f64>() / count;
        let vq: f64 = q.iter().map(|x| (x - mq).powi(2)).sum();
        let scale = (vq * ve).sqrt();
        let tiny = |v: f64, m: f64| v <= 1e-24 * count * m.abs().max(1.0).powi(2);
        if tiny(vq, mq) || tiny(ve, me) {
            values.push(0.0);
            zero_variance.push(true);
            continue;
        }
        let c: f64 = q.iter().zip(e).map(|(a, b)| (a - mq) * (b - me)).sum();
        values.push((c / scale).abs().min(1.0));
        zero_variance.push(false);
    }
    Ok(JointCorrelation { values, zero_variance })
}

/// Two-sided paired tests on per-sample position errors, `a − b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_difference: f64,
    pub t_statistic: f64,
    pub t_p_value: f64,
    /// Sum of positive-difference ranks.
    pub wilcoxon_w_plus: f64,
    pub wilcoxon_z: f64,
    pub wilcoxon_p_value: f64,
}

pub fn paired_tests(a: &MethodReport, b: &MethodReport) -> Result<PairedTest> {
    let (x, y) = (&a.position_errors, &b.position_errors);
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::Precondition("paired tests need at least 2 samples".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let (t, tp) = if sd == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / (sd / n.sqrt());
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Precondition(e.to_string()))?;
        (t, 2.0 * dist.cdf(-t.abs()))
    };
    let (w, z, wp) = wilcoxon(&d);
    Ok(PairedTest {
        n: d.len(),
        mean_difference: mean,
        t_statistic: t,
        t_p_value: tp,
        wilcoxon_w_plus: w,
        wilcoxon_z: z,
        wilcoxon_p_value: wp,
    })
}

/// Signed-rank statistic with the tie-corrected normal approximation; zero
/// differences are dropped.
fn wilcoxon(d: &[f64]) -> (f64, f64, f64) {
    let mut nz: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    if nz.is_empty() {
        return (0.0, 0.0, 1.0);
    }
    nz.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let m = nz.len();
    let mut w_plus = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j + 1 < m && nz[j + 1].abs() == nz[i].abs() {
            j += 1;
        }
        let rank = 0.5 * ((i + 1) + (j + 1)) as f64;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        for v in &nz[i..=j] {
            if *v > 0.0 {
                w_plus += rank;
            }
        }
        i = j + 1;
    }
    let mf = m as f64;
    let mu = mf * (mf + 1.0) / 4.0;
    let var = mf * (mf + 1.0) * (2.0 * mf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return (w_plus, 0.0, 1.0);
    }
    let z = (w_plus - mu) / var.sqrt();
    let p = 2.0 * Normal::standard().cdf(-z.abs());
    (w_plus, z, p.min(1.0))
}

/// One row per method: `method, pos_mean, pos_std, pos_max, ori_mean,
/// ori_std, ori_max`.
pub fn table_csv(reports: &[MethodReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "pos_mean", "pos_std", "pos_max", "ori_mean", "ori_std", "ori_max"])?;
    for r in reports {
        let p = r.position;
        let o = r.orientation;
        let mut rec = vec![r.method.clone()];
        rec.extend([p.mean, p.std, p.max, o.mean, o.std, o.max].iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Per-sample rows `x_position_mm, error_mm, method`, with `x` the measured
/// tool x coordinate.
pub fn samples_csv(reports: &[MethodReport], dataset: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x_position_mm", "error_mm", "method"])?;
    for r in reports {
        if r.position_errors.len() != dataset.len() {
            return Err(Error::DimensionMismatch {
                expected: dataset.len(),
                got: r.position_errors.len(),
            });
        }
        for (s, e) in dataset.samples.iter().zip(&r.position_errors) {
            w.write_record([s.measured.translation.x.to_string(), e.to_string(), r.method.clone()])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_table_csv(path: &Path, reports: &[MethodReport]) -> Result<()> {
    write_atomic(path, &table_csv(reports)?)
}

pub fn write_samples_csv(path: &Path, reports: &[MethodReport], dataset: &Dataset) -> Result<()> {
    write_atomic(path, &samples_csv(reports, dataset)?)
}

/// Aligned text table of position and orientation statistics. The minimum
/// of each column is marked with `*`.
pub fn render_table(reports: &[MethodReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cols: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| {
            vec![
                r.position.mean,
                r.position.std,
                r.position.max,
                r.orientation.mean,
                r.orientation.std,
                r.orientation.max,
            ]
        })
        .collect();
    let best: Vec<usize> = (0..6)
        .map(|c| {
            (0..cols.len())
                .min_by(|&a, &b| cols[a][c].total_cmp(&cols[b][c]))
                .expect("nonempty")
        })
        .collect();
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$}  {:>10} {:>10} {:>10}  {:>10} {:>10} {:>10}\n",
        "method", "pos mean", "pos std", "pos max", "ori mean", "ori std", "ori max"
    );
    out.push_str(&format!("{:<width$}  {:>32}  {:>32}\n", "", "position (mm)", "orientation (deg)"));
    for (i, r) in reports.iter().enumerate() {
        out.push_str(&format!("{:<width$} ", r.method));
        for c in 0..6 {
            if c == 3 {
                out.push(' ');
            }
            let mark = if best[c] == i { "*" } else { " " };
            out.push_str(&format!(" {:>9.4}{mark}", cols[i][c]));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Correlation table, one row per method.
pub fn render_correlations(rows: &[(String, JointCorrelation)]) -> String {
    let n = rows.first().map_or(6, |r| r.1.values.len());
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}", "method");
    for j in 1..=n {
        out.push_str(&format!(" {:>7}", format!("q{j}")));
    }
    out.push('\n');
    for (name, c) in rows {
        out.push_str(&format!("{name:<width$}"));
        for (v, z) in c.values.iter().zip(&c.zero_variance) {
            let cell = if *z { "-".to_string() } else { format!("{v:.3}") };
            out.push_str(&format!(" {cell:>7}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kin::{forward_kinematics, RobotModel, Transform, Vec3};
    use crate::nls::PoseSample;
    use crate::sim::DatasetKind;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(samples: Vec<PoseSample>) -> Dataset {
        Dataset {
            samples,
            anchors: Vec::new(),
            kind: DatasetKind::Test,
        }
    }

    fn random_dataset(model: &RobotModel, count: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        dataset(
            (0..count)
                .map(|_| {
                    let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                    PoseSample {
                        measured: forward_kinematics(model, &q).unwrap(),
                        q,
                        cluster_id: None,
                    }
                })
                .collect(),
        )
    }

    fn report(name: &str, errors: Vec<f64>) -> MethodReport {
        MethodReport {
            method: name.into(),
            position: ErrorStats::from_values(&errors).unwrap(),
            orientation: ErrorStats::from_values(&errors).unwrap(),
            orientation_errors: errors.clone(),
            position_errors: errors,
        }
    }

    #[test]
    fn self_evaluation_is_zero() {
        let m = RobotModel::ma2010();
        let ds = random_dataset(&m, 40, 1);
        let r = evaluate("nominal", &m, &ds).unwrap();
        assert!(r.position.max < 1e-12 && r.orientation.max < 1e-6);
        assert_eq!(r.position.count, 40);
        assert!(matches!(evaluate("x", &m, &dataset(vec![])), Err(Error::EmptyDataset)));
    }

    #[test]
    fn singleton_offset() {
        let m = RobotModel::ma2010();
        let q = vec![0.1; 6];
        let mut t = forward_kinematics(&m, &q).unwrap();
        t.translation += Vec3::new(0.0, 1.0, 0.0);
        let r = evaluate("x", &m, &dataset(vec![PoseSample { q, measured: t, cluster_id: None }])).unwrap();
        assert!((r.position.mean - 1.0).abs() < 1e-12 && (r.position.max - 1.0).abs() < 1e-12);
        assert_eq!(r.position.std, 0.0);
        assert!(r.orientation.max < 1e-6);
    }

    #[test]
    fn orientation_error_in_degrees() {
        let m = RobotModel::ma2010();
        let q = vec![0.0; 6];
        let t = forward_kinematics(&m, &q).unwrap();
        let turned = Transform::new(crate::kin::rot(&Vec3::x(), 1f64.to_radians()).unwrap() * t.rotation, t.translation);
        let r = evaluate("x", &m, &dataset(vec![PoseSample { q, measured: turned, cluster_id: None }])).unwrap();
        assert!((r.orientation.mean - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn stats_sanity(values in prop::collection::vec(0.0f64..100.0, 2..60)) {
            let s = ErrorStats::from_values(&values).unwrap();
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let n = values.len() as f64;
            prop_assert!(s.mean <= s.max + 1e-12 && s.mean >= 0.0 && s.std >= 0.0);
            prop_assert!(s.std <= (s.max - min) * 0.5 * (n / (n - 1.0)).sqrt() + 1e-9);
        }

        #[test]
        fn evaluation_is_order_invariant(seed in 0u64..1000) {
            let m = RobotModel::ma2010();
            let truth = m.with_base_offset(&Vec3::new(0.5, -0.2, 0.1));
            let ds = random_dataset(&truth, 25, seed);
            let mut rev = ds.clone();
            rev.samples.reverse();
            let a = evaluate("x", &m, &ds).unwrap();
            let b = evaluate("x", &m, &rev).unwrap();
            prop_assert!((a.position.mean - b.position.mean).abs() < 1e-12);
            prop_assert!((a.position.std - b.position.std).abs() < 1e-12);
            prop_assert_eq!(a.position.max, b.position.max);
        }
    }

    #[test]
    fn independent_errors_have_small_correlation() {
        let m = RobotModel::ma2010();
        let ds = random_dataset(&m, 1500, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = report("x", (0..1500).map(|_| rng.random_range(0.0..1.0)).collect());
        let c = joint_error_correlation(&r, &ds).unwrap();
        assert!(c.values.iter().all(|v| *v < 0.1 && *v >= 0.0), "{:?}", c.values);
        assert!(c.zero_variance.iter().all(|z| !z));
    }

    #[test]
    fn correlated_and_degenerate_inputs() {
        let m = RobotModel::ma2010();
        let mut ds = random_dataset(&m, 100, 5);
        let linear: Vec<f64> = ds.samples.iter().map(|s| 3.0 - 2.0 * s.q[1]).collect();
        let c = joint_error_correlation(&report("x", linear), &ds).unwrap();
        assert!((c.values[1] - 1.0).abs() < 1e-12);
        let flat = joint_error_correlation(&report("x", vec![0.7; 100]), &ds).unwrap();
        assert!(flat.values.iter().all(|v| *v == 0.0) && flat.zero_variance.iter().all(|z| *z));
        for s in &mut ds.samples {
            s.q[3] = 0.25;
        }
        let c = joint_error_correlation(&report("x", (0..100).map(|i| i as f64).collect()), &ds).unwrap();
        assert!(c.zero_variance[3] && c.values[3] == 0.0 && !c.zero_variance[0]);
    }

    #[test]
    fn paired_t_matches_hand_computation() {
        let a = report("a", vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = report("b", vec![0.5, 1.7, 3.2, 3.1, 4.2]);
        // d = 0.5, 0.3, -0.2, 0.9, 0.8: mean 0.46, sample sd 0.4393
        let t = paired_tests(&a, &b).unwrap();
        let sd = ((0.0016f64 + 0.0256 + 0.4356 + 0.1936 + 0.1156) / 4.0).sqrt();
        assert!((t.t_statistic - 0.46 / (sd / 5f64.sqrt())).abs() < 1e-12);
        assert!(t.t_p_value > 0.05 && t.t_p_value < 0.1, "{}", t.t_p_value);
        // ranks of |d|: 0.2→1, 0.3→2, 0.5→3, 0.8→4, 0.9→5; W+ = 14
        assert_eq!(t.wilcoxon_w_plus, 14.0);
    }

    #[test]
    fn paired_tests_detect_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..1.0)).collect();
        let better: Vec<f64> = base.iter().map(|v| v * 0.8 + rng.random_range(-0.01..0.01)).collect();
        let t = paired_tests(&report("a", better), &report("b", base.clone())).unwrap();
        assert!(t.mean_difference < 0.0 && t.t_p_value < 1e-6 && t.wilcoxon_p_value < 1e-6);
        let same = paired_tests(&report("a", base.clone()), &report("b", base)).unwrap();
        assert_eq!(same.t_p_value, 1.0);
        assert_eq!(same.wilcoxon_p_value, 1.0);
    }

    #[test]
    fn exports_and_rendering() {
        let m = RobotModel::ma2010();
        let ds = random_dataset(&m, 3, 2);
        let reps = vec![report("a", vec![1.0, 2.0, 3.0]), report("bb", vec![0.5, 0.5, 4.0])];
        let table = String::from_utf8(table_csv(&reps).unwrap()).unwrap();
        assert_eq!(table.lines().count(), 3);
        assert!(table.starts_with("method,pos_mean,pos_std,pos_max,ori_mean,ori_std,ori_max\n"));
        let per = String::from_utf8(samples_csv(&reps, &ds).unwrap()).unwrap();
        assert_eq!(per.lines().count(), 7);
        let text = render_table(&reps).unwrap();
        assert_eq!(text.matches('*').count(), 6);
        assert_eq!(text, render_table(&reps).unwrap());
        assert!(render_table(&[]).is_err());
    }
}
