//! Synthetic ground truth: a hidden robot whose deviation parameters vary
//! smoothly with the shoulder and elbow angles, a tracker noise model, and
//! the data-collection protocols used by the experiments.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cdc::serde_mat;
use crate::cdc::{eval_fourier_basis, CoeffMatrix, FOURIER_TERMS};
use crate::cpa::JointSweep;
use crate::error::{Error, Result};
use crate::kin::{
    forward_kinematics, quaternion_to_rotation, rot_unchecked, rotation_to_quaternion, PosePredictor,
    RobotModel, Transform, Vec3,
};
use crate::minpoe::{apply_params, plane_basis, ParamVector, PlaneBasis};
use crate::nls::PoseSample;

/// Bound on `‖Θ_P‖∞` at severity 1 (mm).
pub const MAX_POSITION_DEVIATION: f64 = 2.0;
/// Bound on `‖Θ_H‖∞` at severity 1 (rad).
pub const MAX_AXIS_DEVIATION: f64 = 0.01;
/// Relative amplitude of the out-of-span terms in mismatched mode.
pub const MISMATCH_AMPLITUDE: f64 = 0.2;
const MISMATCH_TERMS: usize = 3;

/// Mean nominal position error (mm) the generated field is scaled to.
pub const NOMINAL_ERROR_TARGET: f64 = 1.3;
const CALIBRATION_POSES: u64 = 256;
// Row sizes before rescaling (position rows in mm, axis rows in rad) and the
// share given to joints other than shoulder and elbow.
const AXIS_UNIT: f64 = 5e-4;
const MINOR_SHARE: f64 = 0.3;
// Load profile `c0 + c1 sin q2 + c2 sin q3`.
const PROFILE: [f64; 3] = [2.1, 1.2, 1.2];
// Weight of the random part of each row relative to the shared profile.
const SPREAD: f64 = 0.15;

// Stream tags partitioning the counter space of each seed.
const STREAM_FIELD: u64 = 1;
const STREAM_TRAIN_CONFIG: u64 = 2;
const STREAM_TEST_CONFIG: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_DUAL: u64 = 5;

/// Deterministic generator for `(seed, tag, counter)`.
pub fn rng_for(seed: u64, tag: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) ^ counter);
    rng
}

/// `[sin 3q2, cos 3q3, sin(q2 − q3)]`, outside the span of the 13-term basis.
fn mismatch_basis(q2: f64, q3: f64) -> [f64; MISMATCH_TERMS] {
    [(3.0 * q2).sin(), (3.0 * q3).cos(), (q2 - q3).sin()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRobot {
    pub nominal: RobotModel,
    pub basis: PlaneBasis,
    /// `4n × 13` coefficients over the Fourier basis.
    #[serde(with = "serde_mat")]
    pub field: DMatrix<f64>,
    /// `4n × 3` out-of-span coefficients; zero unless mismatched.
    #[serde(with = "serde_mat")]
    pub mismatch: DMatrix<f64>,
    pub severity: f64,
    pub seed: u64,
}

impl GroundTruthRobot {
    /// Draws a random field in the Fourier span.
    ///
    /// Each row is a random multiple of a shared load profile
    /// `g = 2.1 + 1.2 sin q2 + 1.2 sin q3`, nonnegative and monotone over the working
    /// ranges, plus a weaker random mix of all 13 terms. Shoulder and elbow
    /// rows get a larger share than the other joints. The whole field is then
    /// rescaled so the mean nominal position error over a fixed set of
    /// workspace poses is [`NOMINAL_ERROR_TARGET`], and every row is clamped
    /// so its absolute coefficient sum, which caps `|Θ_i|` for all
    /// `(q2, q3)`, stays within the bounds.
    pub fn generate(nominal: &RobotModel, severity: f64, seed: u64, mismatched: bool) -> Result<Self> {
        if !(severity.is_finite() && severity >= 0.0) {
            return Err(Error::Precondition(format!("severity must be nonnegative, got {severity}")));
        }
        let n = nominal.n();
        let basis = plane_basis(nominal, &vec![0.0; n])?;
        let mut rng = rng_for(seed, STREAM_FIELD, 0);
        let rows = 4 * n;
        let mut field = DMatrix::zeros(rows, FOURIER_TERMS);
        let mut mismatch = DMatrix::zeros(rows, MISMATCH_TERMS);
        let mut profile = [0.0; FOURIER_TERMS];
        profile[0] = PROFILE[0];
        profile[1] = PROFILE[1];
        profile[3] = PROFILE[2];
        for i in 0..rows {
            let joint = i % (2 * n) / 2;
            let unit = if i < 2 * n { MAX_POSITION_DEVIATION } else { AXIS_UNIT };
            let share = if joint == 1 || joint == 2 { unit } else { MINOR_SHARE * unit };
            let gain = rng.random_range(-1.0..1.0f64);
            let mut row = [0.0f64; FOURIER_TERMS];
            for (c, p) in row.iter_mut().zip(profile) {
                *c = gain * p + SPREAD * rng.random_range(-1.0..1.0);
            }
            let mut extra = [0.0f64; MISMATCH_TERMS];
            if mismatched {
                for e in &mut extra {
                    *e = rng.random_range(-1.0..1.0);
                }
            }
            let field_sum: f64 = row.iter().map(|c| c.abs()).sum();
            let extra_sum: f64 = extra.iter().map(|c| c.abs()).sum();
            let scale = share * gain.abs().max(0.2);
            for (k, c) in row.iter().enumerate() {
                field[(i, k)] = c * scale / field_sum;
            }
            if extra_sum > 0.0 {
                for (k, e) in extra.iter().enumerate() {
                    mismatch[(i, k)] = e * MISMATCH_AMPLITUDE * scale / extra_sum;
                }
            }
        }
        let mut robot = Self {
            nominal: nominal.clone(),
            basis,
            field,
            mismatch,
            severity: 1.0,
            seed,
        };
        let mean = robot.mean_nominal_error()?;
        if mean > 0.0 {
            let gain = NOMINAL_ERROR_TARGET / mean;
            robot.field *= gain;
            robot.mismatch *= gain;
        }
        for i in 0..rows {
            let bound = if i < 2 * n { MAX_POSITION_DEVIATION } else { MAX_AXIS_DEVIATION };
            let sum = robot.field.row(i).abs().sum() + robot.mismatch.row(i).abs().sum();
            if sum > bound {
                let shrink = bound / sum;
                robot.field.row_mut(i).scale_mut(shrink);
                robot.mismatch.row_mut(i).scale_mut(shrink);
            }
        }
        robot.severity = severity;
        Ok(robot)
    }

    /// Mean position deviation from nominal over the calibration poses.
    fn mean_nominal_error(&self) -> Result<f64> {
        let spec = TestSpec::default();
        let mut total = 0.0;
        for k in 0..CALIBRATION_POSES {
            let q = sample_config(&spec, &mut rng_for(self.seed, STREAM_FIELD, 1 + k));
            let dp = self.true_pose(&q)?.translation - forward_kinematics(&self.nominal, &q)?.translation;
            total += dp.norm();
        }
        Ok(total / CALIBRATION_POSES as f64)
    }

    pub fn n(&self) -> usize {
        self.nominal.n()
    }

    /// `Θ_true(q2, q3)`.
    pub fn theta(&self, q2: f64, q3: f64) -> ParamVector {
        let b = DVector::from_row_slice(&eval_fourier_basis(q2, q3));
        let e = DVector::from_row_slice(&mismatch_basis(q2, q3));
        let t = (&self.field * b + &self.mismatch * e) * self.severity;
        ParamVector::from_vec(t.iter().copied().collect()).expect("4n rows")
    }

    pub fn model_at(&self, q: &[f64]) -> Result<RobotModel> {
        if q.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: q.len(),
            });
        }
        if self.severity == 0.0 {
            return Ok(self.nominal.clone());
        }
        apply_params(&self.nominal, &self.theta(q[1], q[2]), &self.basis)
    }

    pub fn true_pose(&self, q: &[f64]) -> Result<Transform> {
        forward_kinematics(&self.model_at(q)?, q)
    }

    /// The field as a [`CoeffMatrix`] (in-span part only).
    pub fn coefficients(&self) -> CoeffMatrix {
        CoeffMatrix {
            a: &self.field * self.severity,
            basis_kind: crate::cdc::BasisKind::Fourier13,
            centers: Vec::new(),
            reduced: None,
            anchor_residual: 0.0,
        }
    }

    pub fn measure(&self, q: &[f64], noise: &NoiseModel, counter: u64) -> Result<PoseSample> {
        let truth = self.true_pose(q)?;
        Ok(PoseSample {
            q: q.to_vec(),
            measured: noise.perturb(&truth, counter),
            cluster_id: None,
        })
    }
}

impl PosePredictor for GroundTruthRobot {
    fn predict(&self, q: &[f64]) -> Result<Transform> {
        self.true_pose(q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Per-axis position standard deviation (mm).
    pub pos_sigma: f64,
    /// Scale of the half-normal rotation angle (degrees).
    pub ori_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            pos_sigma: 0.2 / 3f64.sqrt(),
            ori_sigma: 0.05,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            pos_sigma: 0.0,
            ori_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pos_sigma >= 0.0 && self.ori_sigma >= 0.0) || !self.pos_sigma.is_finite() || !self.ori_sigma.is_finite()
        {
            return Err(Error::Precondition("noise sigmas must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Perturbs a pose with the draw numbered `counter`.
    pub fn perturb(&self, t: &Transform, counter: u64) -> Transform {
        if self.pos_sigma == 0.0 && self.ori_sigma == 0.0 {
            return *t;
        }
        let mut rng = rng_for(self.seed, STREAM_NOISE, counter);
        let dp = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * self.pos_sigma;
        let axis = loop {
            let v = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = v.norm();
            if norm > 1e-12 {
                break v / norm;
            }
        };
        let g: f64 = rng.sample(StandardNormal);
        let angle = (g * self.ori_sigma).abs().to_radians();
        Transform::new(rot_unchecked(&axis, angle) * t.rotation, t.translation + dp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Training,
    Test,
    Sweep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PoseSample>,
    /// Commanded anchor configurations, indexed by cluster id.
    pub anchors: Vec<Vec<f64>>,
    pub kind: DatasetKind,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        let mut ids: Vec<usize> = self.samples.iter().filter_map(|s| s.cluster_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Writes `cluster_id, q1..qn, px, py, pz, qw, qx, qy, qz`; the cluster
    /// id is empty for unclustered samples.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_csv_bytes()?)
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let n = self.samples.first().map_or(6, |s| s.q.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["cluster_id".to_string()];
        header.extend((1..=n).map(|i| format!("q{i}")));
        header.extend(["px", "py", "pz", "qw", "qx", "qy", "qz"].map(String::from));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.cluster_id.map(|c| c.to_string()).unwrap_or_default()];
            row.extend(s.q.iter().map(|x| x.to_string()));
            let p = s.measured.translation;
            row.extend([p.x, p.y, p.z].map(|x| x.to_string()));
            row.extend(rotation_to_quaternion(&s.measured.rotation).map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.into_inner().map_err(|e| Error::InvalidData(format!("CSV buffer: {e}")))
    }

    /// Reads a dataset CSV. Anchors are rebuilt as cluster means since the
    /// commanded grid points are not stored.
    pub fn read_csv(path: &Path, kind: DatasetKind) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let cols = r.headers()?.len();
        let n = cols
            .checked_sub(8)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidData(format!("dataset CSV has {cols} columns")))?;
        let mut samples = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != cols {
                return Err(Error::InvalidData(format!("dataset CSV row {} is short", line + 1)));
            }
            let cluster_id = match rec[0].trim() {
                "" => None,
                s => Some(
                    s.parse::<usize>()
                        .map_err(|e| Error::InvalidData(format!("row {}: cluster id: {e}", line + 1)))?,
                ),
            };
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidData(format!("row {}: {e}", line + 1)))?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("row {}: non-finite value", line + 1)));
            }
            let q = vals[..n].to_vec();
            let p = Vec3::new(vals[n], vals[n + 1], vals[n + 2]);
            let quat = [vals[n + 3], vals[n + 4], vals[n + 5], vals[n + 6]];
            let norm = quat.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidData(format!("row {}: quaternion norm {norm}", line + 1)));
            }
            samples.push(PoseSample {
                q,
                measured: Transform::new(quaternion_to_rotation(quat), p),
                cluster_id,
            });
        }
        let anchors = cluster_means(&samples);
        Ok(Self { samples, anchors, kind })
    }
}

fn cluster_means(samples: &[PoseSample]) -> Vec<Vec<f64>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for s in samples {
        if let Some(id) = s.cluster_id {
            let e = sums.entry(id).or_insert_with(|| (vec![0.0; s.q.len()], 0));
            e.0.iter_mut().zip(&s.q).for_each(|(a, q)| *a += q);
            e.1 += 1;
        }
    }
    let len = sums.keys().next_back().map_or(0, |k| k + 1);
    let mut out = vec![Vec::new(); len];
    for (id, (sum, count)) in sums {
        out[id] = sum.into_iter().map(|x| x / count as f64).collect();
    }
    out
}

/// Anchor grid and cluster shape for training data (degrees).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub q2_range: [f64; 2],
    pub q3_range: [f64; 2],
    /// Grid points along `(q2, q3)`.
    pub counts: [usize; 2],
    pub samples_per_anchor: usize,
    /// Uniform jitter of the non-(q2, q3) joints around zero at each anchor.
    pub anchor_jitter: f64,
    /// Per-joint uniform jitter of each sample around its anchor. q2 and q3
    /// stay local; the others sweep wide so a cluster's fit is well posed.
    pub sample_jitter: [f64; 6],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::ma2010()
    }
}

impl GridSpec {
    /// 8 × 31 = 248 anchors.
    pub fn ma2010() -> Self {
        Self {
            q2_range: [-55.0, 50.0],
            q3_range: [-70.0, 50.0],
            counts: [8, 31],
            samples_per_anchor: 7,
            anchor_jitter: 5.0,
            sample_jitter: [30.0, 2.0, 2.0, 60.0, 60.0, 60.0],
        }
    }

    /// 14 × 20 = 280 anchors.
    pub fn ma1440() -> Self {
        Self {
            q3_range: [-70.0, 60.0],
            counts: [14, 20],
            ..Self::ma2010()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.contains(&0) || self.samples_per_anchor == 0 {
            return Err(Error::Precondition("grid counts and samples per anchor must be ≥ 1".into()));
        }
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ok(self.q2_range) || !ok(self.q3_range) {
            return Err(Error::Precondition("grid ranges must be finite and ordered".into()));
        }
        if self.anchor_jitter < 0.0 || self.sample_jitter.iter().any(|j| j.is_nan() || *j < 0.0) {
            return Err(Error::Precondition("jitter must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn num_anchors(&self) -> usize {
        self.counts[0] * self.counts[1]
    }
}

fn grid_values(range: [f64; 2], count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.5 * (range[0] + range[1])];
    }
    (0..count)
        .map(|i| range[0] + (range[1] - range[0]) * i as f64 / (count - 1) as f64)
        .collect()
}

fn jitter(rng: &mut ChaCha8Rng, half_width_deg: f64) -> f64 {
    if half_width_deg == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width_deg..=half_width_deg).to_radians()
    }
}

/// Clustered training data on a `(q2, q3)` grid. Configurations draw from
/// `robot.seed`, measurement noise from `noise.seed`.
pub fn gen_training(robot: &GroundTruthRobot, noise: &NoiseModel, grid: &GridSpec) -> Result<Dataset> {
    grid.validate()?;
    noise.validate()?;
    let n = robot.n();
    if n != 6 {
        return Err(Error::Precondition("data protocols assume six joints".into()));
    }
    let mut anchors = Vec::with_capacity(grid.num_anchors());
    let mut samples = Vec::with_capacity(grid.num_anchors() * grid.samples_per_anchor);
    let mut counter = 0u64;
    for q2 in grid_values(grid.q2_range, grid.counts[0]) {
        for q3 in grid_values(grid.q3_range, grid.counts[1]) {
            let id = anchors.len();
            let mut rng = rng_for(robot.seed, STREAM_TRAIN_CONFIG, id as u64);
            let mut anchor: Vec<f64> = (0..n).map(|_| jitter(&mut rng, grid.anchor_jitter)).collect();
            anchor[1] = q2.to_radians();
            anchor[2] = q3.to_radians();
            for _ in 0..grid.samples_per_anchor {
                let q: Vec<f64> = anchor
                    .iter()
                    .zip(grid.sample_jitter)
                    .map(|(a, j)| a + jitter(&mut rng, j))
                    .collect();
                let mut s = robot.measure(&q, noise, counter)?;
                s.cluster_id = Some(id);
                samples.push(s);
                counter += 1;
            }
            anchors.push(anchor);
        }
    }
    Ok(Dataset {
        samples,
        anchors,
        kind: DatasetKind::Training,
    })
}

/// Joint ranges for test data (degrees) and the excluded `|q5|` band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestSpec {
    pub count: usize,
    pub ranges: [[f64; 2]; 6],
    pub q5_exclusion: f64,
}

impl Default for TestSpec {
    fn default() -> Self {
        Self {
            count: 1500,
            ranges: [
                [-60.0, 60.0],
                [-55.0, 50.0],
                [-70.0, 60.0],
                [-90.0, 90.0],
                [-60.0, 60.0],
                [-90.0, 90.0],
            ],
            q5_exclusion: 5.0,
        }
    }
}

impl TestSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Precondition("test count must be ≥ 1".into()));
        }
        if self.ranges.iter().any(|r| !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1])) {
            return Err(Error::Precondition("test ranges must be finite and ordered".into()));
        }
        let r5 = self.ranges[4];
        if self.q5_exclusion.is_nan() || self.q5_exclusion < 0.0 || (r5[0] >= -self.q5_exclusion && r5[1] <= self.q5_exclusion) {
            return Err(Error::Precondition("q5 exclusion band covers the whole q5 range".into()));
        }
        Ok(())
    }
}

fn sample_config(spec: &TestSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    spec.ranges
        .iter()
        .enumerate()
        .map(|(j, r)| loop {
            let x: f64 = if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) };
            if j != 4 || x.abs() >= spec.q5_exclusion {
                break x.to_radians();
            }
        })
        .collect()
}

/// Uniform test poses; the noise counter space starts after `counter_offset`
/// so test draws never reuse training draws under a shared noise seed.
pub fn gen_test(robot: &GroundTruthRobot, noise: &NoiseModel, spec: &TestSpec, counter_offset: u64) -> Result<Dataset> {
    spec.validate()?;
    noise.validate()?;
    if robot.n() != 6 {
        return Err(Error::Precondition("data protocols assume six joints".into()));
    }
    let mut samples = Vec::with_capacity(spec.count);
    for k in 0..spec.count {
        let q = sample_config(spec, &mut rng_for(robot.seed, STREAM_TEST_CONFIG, k as u64));
        samples.push(robot.measure(&q, noise, counter_offset + k as u64)?);
    }
    Ok(Dataset {
        samples,
        anchors: Vec::new(),
        kind: DatasetKind::Test,
    })
}

/// One single-joint sweep per joint: `k` equally spaced angles over
/// `±span/2` (degrees) about the anchor, tracking `p + R·probe_offset`.
pub fn gen_sweeps(
    robot: &GroundTruthRobot,
    noise: &NoiseModel,
    q_anchor: &[f64],
    k: usize,
    span: f64,
    probe_offset: &Vec3,
    counter_offset: u64,
) -> Result<Vec<JointSweep>> {
    if k < 3 {
        return Err(Error::Precondition(format!("sweeps need K ≥ 3, got {k}")));
    }
    if !(span.is_finite() && span > 0.0) {
        return Err(Error::Precondition("sweep span must be positive".into()));
    }
    noise.validate()?;
    let n = robot.n();
    if q_anchor.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: q_anchor.len(),
        });
    }
    let half = 0.5 * span.to_radians();
    let mut counter = counter_offset;
    (0..n)
        .map(|j| {
            let angles: Vec<f64> = (0..k)
                .map(|i| q_anchor[j] - half + 2.0 * half * i as f64 / (k - 1) as f64)
                .collect();
            let mut points = Vec::with_capacity(k);
            for &a in &angles {
                let mut q = q_anchor.to_vec();
                q[j] = a;
                let t = noise.perturb(&robot.true_pose(&q)?, counter);
                counter += 1;
                points.push(t.apply(probe_offset));
            }
            Ok(JointSweep {
                joint_index: j + 1,
                base_config: q_anchor.to_vec(),
                sweep_angles: angles,
                tcp_positions: points,
            })
        })
        .collect()
}

/// Joint configurations of both robots for the relative-position check.
pub type ConfigPair = (Vec<f64>, Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualReport {
    /// Per-pair deviation of the relative tool position from the first pair (mm).
    pub errors: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl DualReport {
    fn from_errors(errors: Vec<f64>) -> Self {
        let c = errors.len().max(1) as f64;
        let mean = errors.iter().sum::<f64>() / c;
        let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / c).sqrt();
        let max = errors.iter().copied().fold(0.0, f64::max);
        Self { errors, mean, std, max }
    }
}

fn relative_position(
    a: &dyn PosePredictor,
    b: &dyn PosePredictor,
    mount: &Transform,
    pair: &ConfigPair,
) -> Result<Vec3> {
    let pa = a.predict(&pair.0)?.translation;
    let pb = mount.apply(&b.predict(&pair.1)?.translation);
    Ok(pb - pa)
}

/// Relative tool position error of two calibrated models. `mount` maps
/// robot B's base frame into robot A's.
#[allow(clippy::too_many_arguments)]
pub fn dual_robot_eval(
    robot_a: &GroundTruthRobot,
    robot_b: &GroundTruthRobot,
    model_a: &dyn PosePredictor,
    model_b: &dyn PosePredictor,
    configs: &[ConfigPair],
    mount: &Transform,
) -> Result<DualReport> {
    if configs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let truth: Vec<Vec3> = configs
        .iter()
        .map(|c| relative_position(robot_a, robot_b, mount, c))
        .collect::<Result<_>>()?;
    let max_dev = truth.iter().map(|r| (r - truth[0]).norm()).fold(0.0, f64::max);
    if max_dev > 1e-6 {
        return Err(Error::InconsistentPairs { max_dev });
    }
    let rel: Vec<Vec3> = configs
        .iter()
        .map(|c| relative_position(model_a, model_b, mount, c))
        .collect::<Result<_>>()?;
    Ok(DualReport::from_errors(rel.iter().map(|r| (r - rel[0]).norm()).collect()))
}

/// Damped Newton on joints 1..3 of `robot` so its true tool position reaches
/// `target`; the wrist stays at `q0[3..]`.
pub fn position_ik(robot: &GroundTruthRobot, target: &Vec3, q0: &[f64]) -> Result<Vec<f64>> {
    let mut q = q0.to_vec();
    for _ in 0..100 {
        let err = target - robot.true_pose(&q)?.translation;
        if err.norm() < 1e-10 {
            return Ok(q);
        }
        // Central differences on the true pose, since the field itself moves
        // with q2 and q3.
        let mut jac = nalgebra::Matrix3::zeros();
        for j in 0..3 {
            let h = 1e-6;
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[j] += h;
            qm[j] -= h;
            let col = (robot.true_pose(&qp)?.translation - robot.true_pose(&qm)?.translation) / (2.0 * h);
            jac.set_column(j, &col);
        }
        let jt = jac.transpose();
        let lhs = jt * jac + nalgebra::Matrix3::identity() * 1e-9;
        let step = lhs
            .cholesky()
            .ok_or_else(|| Error::DegenerateGeometry("position IK Jacobian is singular".into()))?
            .solve(&(jt * err));
        let scale = (50.0_f64.to_radians() / step.amax()).min(1.0);
        for j in 0..3 {
            q[j] += scale * step[j];
        }
    }
    Err(Error::DegenerateGeometry("position IK did not converge".into()))
}

/// Default two-robot cell: B faces A across the x axis.
pub fn default_mount(distance: f64) -> Transform {
    Transform::new(rot_unchecked(&Vec3::z(), std::f64::consts::PI), Vec3::new(distance, 0.0, 0.0))
}

/// Pairs that hold robot B's true tool at a fixed offset from robot A's true
/// tool while A moves from a folded to an outstretched pose.
pub fn gen_dual_configs(
    robot_a: &GroundTruthRobot,
    robot_b: &GroundTruthRobot,
    mount: &Transform,
    offset: &Vec3,
    count: usize,
) -> Result<Vec<ConfigPair>> {
    if count == 0 {
        return Err(Error::Precondition("need at least one config pair".into()));
    }
    let mut rng = rng_for(robot_a.seed ^ robot_b.seed.rotate_left(17), STREAM_DUAL, 0);
    let to_b = mount.inverse();
    let mut out = Vec::with_capacity(count);
    let mut qb_guess = vec![0.0, 0.0, 0.0, 0.0, (-30f64).to_radians(), 0.0];
    for i in 0..count {
        let s = if count == 1 { 0.5 } else { i as f64 / (count - 1) as f64 };
        let mut qa = vec![0.0; 6];
        qa[0] = rng.random_range(-10.0..10.0f64).to_radians();
        qa[1] = (-20.0 + 45.0 * s).to_radians();
        qa[2] = (-30.0 + 45.0 * s).to_radians();
        qa[3] = rng.random_range(-30.0..30.0f64).to_radians();
        qa[4] = (-30.0f64).to_radians();
        qa[5] = rng.random_range(-30.0..30.0f64).to_radians();
        let target_a = robot_a.true_pose(&qa)?.translation + offset;
        let target_b = to_b.apply(&target_a);
        qb_guess[0] = target_b.y.atan2(target_b.x);
        let qb = position_ik(robot_b, &target_b, &qb_guess)?;
        qb_guess = qb.clone();
        out.push((qa, qb));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpa::{cpa_identify, fit_circle_3d};
    use crate::kin::rotation_angle;

    fn robot(seed: u64) -> GroundTruthRobot {
        GroundTruthRobot::generate(&RobotModel::ma2010(), 1.0, seed, false).unwrap()
    }

    fn configs(count: usize, seed: u64) -> Vec<Vec<f64>> {
        let spec = TestSpec::default();
        (0..count).map(|k| sample_config(&spec, &mut rng_for(seed, 99, k as u64))).collect()
    }

    #[test]
    fn zero_severity_is_nominal() {
        let nominal = RobotModel::ma2010();
        let r = GroundTruthRobot::generate(&nominal, 0.0, 3, true).unwrap();
        for q in configs(50, 1) {
            let a = r.true_pose(&q).unwrap();
            let b = forward_kinematics(&nominal, &q).unwrap();
            assert!((a.translation - b.translation).norm() < 1e-12);
            assert!((a.rotation - b.rotation).norm() < 1e-12);
        }
    }

    #[test]
    fn base_rotation_covariance() {
        let r = robot(4);
        for q in configs(20, 2) {
            let p0 = r.true_pose(&q).unwrap().translation;
            let mut q1 = q.clone();
            q1[0] += 0.7;
            let p1 = r.true_pose(&q1).unwrap().translation;
            // joint 1 of both robots is the base z axis up to the field's tilt,
            // so compare against the true axis-1 rotation
            let m = r.model_at(&q).unwrap();
            let h = m.axes()[0];
            let c = m.links()[0];
            let expect = rot_unchecked(&h, 0.7) * (p0 - c) + c;
            assert!((p1 - expect).norm() < 1e-9, "{}", (p1 - expect).norm());
        }
    }

    /// Deviations vanish at the zero configuration, so the lower edge of the
    /// band applies to the sample mean, the upper edge to every pose.
    #[test]
    fn deviation_magnitude_and_field_bounds() {
        let nominal = RobotModel::ma2010();
        for seed in 0..5 {
            let r = robot(seed);
            let mut total = 0.0;
            for q in configs(100, seed + 10) {
                let d = (r.true_pose(&q).unwrap().translation - forward_kinematics(&nominal, &q).unwrap().translation).norm();
                assert!(d <= 5.0, "seed {seed}: deviation {d}");
                total += d;
                let t = r.theta(q[1], q[2]);
                assert!(t.position_part().iter().all(|x| x.abs() <= MAX_POSITION_DEVIATION + 1e-12));
                assert!(t.axis_part().iter().all(|x| x.abs() <= MAX_AXIS_DEVIATION + 1e-12));
            }
            let mean = total / 100.0;
            assert!((0.1..=5.0).contains(&mean), "seed {seed}: mean {mean}");
        }
    }

    #[test]
    fn noise_statistics() {
        let noise = NoiseModel {
            seed: 11,
            ..NoiseModel::default()
        };
        let t = Transform::identity();
        let n = 10000;
        let mut sums = Vec3::zeros();
        let mut sq = Vec3::zeros();
        let mut ang = 0.0;
        for k in 0..n {
            let m = noise.perturb(&t, k);
            sums += m.translation;
            sq += m.translation.component_mul(&m.translation);
            ang += rotation_angle(&m.rotation).to_degrees();
        }
        let nf = n as f64;
        for i in 0..3 {
            let std = (sq[i] / nf - (sums[i] / nf).powi(2)).sqrt();
            assert!((std / noise.pos_sigma - 1.0).abs() < 0.05, "axis {i} std {std}");
        }
        let expect = noise.ori_sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!((ang / nf / expect - 1.0).abs() < 0.05, "mean angle {}", ang / nf);
        assert_eq!(NoiseModel::noiseless().perturb(&t, 3), t);
    }

    #[test]
    fn training_counts_and_ranges() {
        let noise = NoiseModel::default();
        for (nominal, grid, rows, clusters) in [
            (RobotModel::ma2010(), GridSpec::ma2010(), 1736, 248),
            (RobotModel::ma1440(), GridSpec::ma1440(), 1960, 280),
        ] {
            let r = GroundTruthRobot::generate(&nominal, 1.0, 2, false).unwrap();
            let ds = gen_training(&r, &noise, &grid).unwrap();
            assert_eq!(ds.len(), rows);
            assert_eq!(ds.num_clusters(), clusters);
            assert_eq!(ds.anchors.len(), clusters);
            let slack = grid.sample_jitter[1] + 1e-9;
            for s in &ds.samples {
                let id = s.cluster_id.unwrap();
                assert!(id < ds.anchors.len());
                let (q2, q3) = (s.q[1].to_degrees(), s.q[2].to_degrees());
                assert!(q2 >= grid.q2_range[0] - slack && q2 <= grid.q2_range[1] + slack);
                assert!(q3 >= grid.q3_range[0] - slack && q3 <= grid.q3_range[1] + slack);
            }
        }
    }

    #[test]
    fn test_set_ranges_breadth_and_determinism() {
        let r = robot(1);
        let noise = NoiseModel::default();
        let spec = TestSpec::default();
        let ds = gen_test(&r, &noise, &spec, 1 << 40).unwrap();
        assert_eq!(ds.len(), 1500);
        for j in 0..6 {
            let [lo, hi] = spec.ranges[j];
            let mut bins = [0usize; 10];
            for s in &ds.samples {
                let x = s.q[j].to_degrees();
                assert!(x >= lo - 1e-9 && x <= hi + 1e-9);
                if j == 4 {
                    assert!(x.abs() >= spec.q5_exclusion - 1e-9);
                }
                bins[(((x - lo) / (hi - lo) * 10.0) as usize).min(9)] += 1;
            }
            assert!(bins.iter().all(|&b| b <= 300), "joint {j}: {bins:?}");
        }
        let again = gen_test(&r, &noise, &spec, 1 << 40).unwrap();
        assert_eq!(ds, again);
        assert_eq!(ds.to_csv_bytes().unwrap(), again.to_csv_bytes().unwrap());
    }

    #[test]
    fn training_and_test_share_no_configuration() {
        let r = robot(5);
        let noise = NoiseModel::default();
        let train = gen_training(&r, &noise, &GridSpec::default()).unwrap();
        let test = gen_test(&r, &noise, &TestSpec::default(), 1 << 40).unwrap();
        let seen: std::collections::HashSet<Vec<u64>> =
            train.samples.iter().map(|s| s.q.iter().map(|x| x.to_bits()).collect()).collect();
        assert!(test.samples.iter().all(|s| !seen.contains(&s.q.iter().map(|x| x.to_bits()).collect::<Vec<_>>())));
    }

    #[test]
    fn csv_round_trip() {
        let r = robot(6);
        let grid = GridSpec {
            counts: [2, 3],
            ..GridSpec::default()
        };
        let ds = gen_training(&r, &NoiseModel::default(), &grid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        ds.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path, DatasetKind::Training).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.q, b.q);
            assert_eq!(a.cluster_id, b.cluster_id);
            assert!((a.measured.translation - b.measured.translation).norm() < 1e-9);
            assert!((a.measured.rotation - b.measured.rotation).norm() < 1e-9);
        }
    }

    #[test]
    fn sweeps_close_the_loop_with_cpa() {
        let nominal = RobotModel::ma2010();
        let r = GroundTruthRobot::generate(&nominal, 0.0, 0, false).unwrap();
        let q0 = [0.1, 0.2, -0.1, 0.3, 0.5, -0.2];
        let probe = Vec3::new(0.0, 0.0, 100.0);
        let sweeps = gen_sweeps(&r, &NoiseModel::noiseless(), &q0, 7, 60.0, &probe, 0).unwrap();
        for s in &sweeps {
            s.validate().unwrap();
            assert!(fit_circle_3d(&s.tcp_positions).unwrap().rms_residual < 1e-9);
        }
        let m = cpa_identify(&sweeps, &nominal, &q0, &probe).unwrap();
        for q in configs(20, 3) {
            let a = forward_kinematics(&m, &q).unwrap();
            let b = forward_kinematics(&nominal, &q).unwrap();
            assert!((a.translation - b.translation).norm() < 1e-6);
        }
        assert!(gen_sweeps(&r, &NoiseModel::noiseless(), &q0, 2, 60.0, &probe, 0).is_err());
    }

    #[test]
    fn dual_robot_eval_ground_truth_and_guard() {
        let a = robot(8);
        let b = GroundTruthRobot::generate(&RobotModel::ma1440(), 1.0, 9, false).unwrap();
        let mount = default_mount(2200.0);
        let offset = Vec3::new(150.0, 0.0, 0.0);
        let pairs = gen_dual_configs(&a, &b, &mount, &offset, 5).unwrap();
        let rep = dual_robot_eval(&a, &b, &a, &b, &pairs, &mount).unwrap();
        assert!(rep.max < 1e-9, "{}", rep.max);
        let nom = dual_robot_eval(&a, &b, &a.nominal, &b.nominal, &pairs, &mount).unwrap();
        assert!(nom.mean > 0.05 && nom.mean < 10.0, "{}", nom.mean);
        let mut bad = pairs.clone();
        bad[2].1[0] += 0.05;
        assert!(matches!(
            dual_robot_eval(&a, &b, &a, &b, &bad, &mount),
            Err(Error::InconsistentPairs { .. })
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(robot(12), robot(12));
        assert_ne!(robot(12).field, robot(13).field);
        let noise = NoiseModel::default();
        let a = gen_training(&robot(12), &noise, &GridSpec::default()).unwrap();
        let b = gen_training(&robot(12), &noise, &GridSpec::default()).unwrap();
        assert_eq!(a.to_csv_bytes().unwrap(), b.to_csv_bytes().unwrap());
    }
}
