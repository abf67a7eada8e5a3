//! Experiment pipeline: scenario configuration, per-method calibration and
//! the file-based simulate / calibrate / evaluate / report stages.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cdc::{
    fit_basis_coefficients, fuse_clusters, identify_clusters, reduce_basis, BasisKind, CdcModel, ClusterModel,
    Interpolator,
};
use crate::cpa::{cpa_identify, read_sweeps_csv, write_sweeps_csv, JointSweep};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, joint_error_correlation, paired_tests, render_correlations, render_table, table_csv, samples_csv,
    JointCorrelation, MethodReport, PairedTest,
};
use crate::io::{read_json, write_atomic, write_json};
use crate::kin::{PosePredictor, RobotModel, Transform, Vec3};
use crate::learn::{train_autoencoder, train_nn_field, TrainConfig};
use crate::minpoe::{apply_params, PlaneBasis};
use crate::nls::{base_calibrate, nls_calibrate_with_basis, NlsOptions, PoseSample};
use crate::sim::{
    default_mount, dual_robot_eval, gen_dual_configs, gen_sweeps, gen_test, gen_training, Dataset, DatasetKind,
    DualReport, GridSpec, GroundTruthRobot, NoiseModel, TestSpec,
};

/// Noise counter offsets of the test set and the sweeps.
pub const TEST_COUNTER: u64 = 1 << 40;
pub const SWEEP_COUNTER: u64 = 1 << 41;

pub const TRAINING_FILE: &str = "training.csv";
pub const TEST_FILE: &str = "test.csv";
pub const SWEEPS_FILE: &str = "sweeps.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const MODELS_DIR: &str = "models";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "table.csv";
pub const ERRORS_FILE: &str = "errors.csv";
pub const CORRELATION_FILE: &str = "correlation.csv";
pub const SIGNIFICANCE_FILE: &str = "significance.csv";
pub const DUAL_FILE: &str = "dual.csv";
pub const SUMMARY_FILE: &str = "report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nominal,
    Base,
    Cpa,
    Nls0,
    Nls1,
    Nearest,
    Linear,
    Cubic,
    Rbf,
    Fourier13,
    FourierR,
    Nn,
    Ae,
}

impl Method {
    pub const ALL: [Method; 13] = [
        Method::Nominal,
        Method::Base,
        Method::Cpa,
        Method::Nls0,
        Method::Nls1,
        Method::Nearest,
        Method::Linear,
        Method::Cubic,
        Method::Rbf,
        Method::Fourier13,
        Method::FourierR,
        Method::Nn,
        Method::Ae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nominal => "nominal",
            Method::Base => "base",
            Method::Cpa => "cpa",
            Method::Nls0 => "nls0",
            Method::Nls1 => "nls1",
            Method::Nearest => "nearest",
            Method::Linear => "linear",
            Method::Cubic => "cubic",
            Method::Rbf => "rbf",
            Method::Fourier13 => "fourier13",
            Method::FourierR => "fourier_r",
            Method::Nn => "nn",
            Method::Ae => "ae",
        }
    }

    /// Configuration-dependent methods built on cluster fits.
    pub fn is_cdc(self) -> bool {
        !matches!(self, Method::Nominal | Method::Base | Method::Cpa | Method::Nls0 | Method::Nls1)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Precondition(format!("unknown method {s:?}")))
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseLevels {
    /// Per-axis position sigma (mm).
    pub pos_sigma: f64,
    /// Half-normal rotation scale (degrees).
    pub ori_sigma: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        let d = NoiseModel::default();
        Self {
            pos_sigma: d.pos_sigma,
            ori_sigma: d.ori_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub k: usize,
    /// Degrees.
    pub span: f64,
    /// Tracked point in the tool frame (mm).
    pub probe_offset: [f64; 3],
    /// Radians.
    pub anchor: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            k: 7,
            span: 60.0,
            probe_offset: [0.0, 0.0, 100.0],
            anchor: vec![0.0, 0.0, 0.0, 0.0, 30f64.to_radians(), 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualSpec {
    pub enabled: bool,
    /// Second robot: `ma2010`, `ma1440` or a model file.
    pub partner: String,
    /// Base separation along x (mm); the partner faces the first robot.
    pub distance: f64,
    /// Fixed offset of the partner's tool from the first robot's tool (mm).
    pub offset: [f64; 3],
    pub pairs: usize,
}

impl Default for DualSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            partner: "ma1440".into(),
            distance: 2200.0,
            offset: [150.0, 0.0, 0.0],
            pairs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// `ma2010`, `ma1440` or a path to a model JSON file.
    pub robot: String,
    pub severity: f64,
    pub mismatched: bool,
    pub seed: u64,
    pub noise: NoiseLevels,
    /// Robot-specific default grid when absent.
    pub grid: Option<GridSpec>,
    pub test: TestSpec,
    pub sweeps: SweepSpec,
    pub methods: Vec<Method>,
    pub nls: NlsOptions,
    /// Clusters nearest the zero configuration used by `nls0`.
    pub nls0_clusters: usize,
    /// Graph smoothing of cluster fits; zero keeps independent fits.
    pub fusion_smoothing: f64,
    /// Rank of the reduced Fourier basis.
    pub fourier_rank: usize,
    /// Autoencoder latent dimension.
    pub ae_latent: usize,
    pub train: TrainConfig,
    pub dual: DualSpec,
    pub out: PathBuf,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            robot: "ma2010".into(),
            severity: 1.0,
            mismatched: false,
            seed: 0,
            noise: NoiseLevels::default(),
            grid: None,
            test: TestSpec::default(),
            sweeps: SweepSpec::default(),
            methods: Method::ALL.to_vec(),
            nls: NlsOptions::default(),
            nls0_clusters: 4,
            fusion_smoothing: 0.1,
            fourier_rank: 7,
            ae_latent: 6,
            train: TrainConfig {
                epochs: 5000,
                ..TrainConfig::default()
            },
            dual: DualSpec::default(),
            out: PathBuf::from("out"),
        }
    }
}

fn builtin_robot(name: &str) -> Option<(RobotModel, GridSpec)> {
    match name {
        "ma2010" => Some((RobotModel::ma2010(), GridSpec::ma2010())),
        "ma1440" => Some((RobotModel::ma1440(), GridSpec::ma1440())),
        _ => None,
    }
}

fn load_robot(name: &str) -> Result<(RobotModel, GridSpec)> {
    if let Some(r) = builtin_robot(name) {
        return Ok(r);
    }
    let path = Path::new(name);
    if !path.is_file() {
        return Err(Error::Precondition(format!("robot {name:?} is neither built in nor an existing file")));
    }
    Ok((read_json(path)?, GridSpec::default()))
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Sets the scenario seed and the network seed together.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Precondition("methods list is empty".into()));
        }
        if !(self.severity.is_finite() && self.severity >= 0.0) {
            return Err(Error::Precondition("severity must be finite and nonnegative".into()));
        }
        let (nominal, _) = load_robot(&self.robot)?;
        if nominal.n() != 6 {
            return Err(Error::Precondition("scenarios assume a six-joint robot".into()));
        }
        self.noise_model().validate()?;
        self.grid().validate()?;
        self.test.validate()?;
        self.nls.validate()?;
        self.train.validate()?;
        if self.sweeps.anchor.len() != 6 || self.sweeps.k < 3 {
            return Err(Error::Precondition("sweeps need a 6-joint anchor and K ≥ 3".into()));
        }
        if self.nls0_clusters == 0 || self.ae_latent == 0 || self.fourier_rank == 0 || self.fourier_rank > 13 {
            return Err(Error::Precondition(
                "nls0_clusters and ae_latent must be ≥ 1, fourier_rank in 1..=13".into(),
            ));
        }
        if !(self.fusion_smoothing.is_finite() && self.fusion_smoothing >= 0.0) {
            return Err(Error::Precondition("fusion_smoothing must be finite and nonnegative".into()));
        }
        if self.dual.enabled {
            load_robot(&self.dual.partner)?;
            if self.dual.pairs == 0 {
                return Err(Error::Precondition("dual validation needs at least one pair".into()));
            }
        }
        Ok(())
    }

    pub fn nominal(&self) -> Result<RobotModel> {
        Ok(load_robot(&self.robot)?.0)
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
            .clone()
            .unwrap_or_else(|| load_robot(&self.robot).map(|r| r.1).unwrap_or_default())
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel {
            pos_sigma: self.noise.pos_sigma,
            ori_sigma: self.noise.ori_sigma,
            seed: self.seed,
        }
    }

    pub fn ground_truth(&self) -> Result<GroundTruthRobot> {
        GroundTruthRobot::generate(&self.nominal()?, self.severity, self.seed, self.mismatched)
    }

    fn probe(&self) -> Vec3 {
        Vec3::from(self.sweeps.probe_offset)
    }
}

/// Generated data for one scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub robot: GroundTruthRobot,
    pub training: Dataset,
    pub test: Dataset,
    pub sweeps: Vec<JointSweep>,
}

pub fn simulate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let robot = cfg.ground_truth()?;
    let noise = cfg.noise_model();
    let training = gen_training(&robot, &noise, &cfg.grid())?;
    let test = gen_test(&robot, &noise, &cfg.test, TEST_COUNTER)?;
    let sweeps = gen_sweeps(
        &robot,
        &noise,
        &cfg.sweeps.anchor,
        cfg.sweeps.k,
        cfg.sweeps.span,
        &cfg.probe(),
        SWEEP_COUNTER,
    )?;
    Ok(Scenario {
        robot,
        training,
        test,
        sweeps,
    })
}

/// A calibrated predictor.
#[derive(Debug, Clone, PartialEq)]
pub enum CalibratedModel {
    Rigid(RobotModel),
    Cdc(Box<CdcModel>),
}

impl PosePredictor for CalibratedModel {
    fn predict(&self, q: &[f64]) -> Result<Transform> {
        match self {
            CalibratedModel::Rigid(m) => m.predict(q),
            CalibratedModel::Cdc(m) => m.predict(q),
        }
    }
}

impl CalibratedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            CalibratedModel::Rigid(m) => write_json(path, m),
            CalibratedModel::Cdc(m) => m.save(path),
        }
    }

    pub fn load(method: Method, path: &Path) -> Result<Self> {
        if method.is_cdc() {
            Ok(CalibratedModel::Cdc(Box::new(CdcModel::load(path)?)))
        } else {
            Ok(CalibratedModel::Rigid(read_json(path)?))
        }
    }
}

/// Method-specific side output written next to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodDetails {
    None,
    Base(crate::nls::BaseReport),
    Nls(crate::nls::NlsReport),
    Clusters {
        clusters: usize,
        converged: usize,
        fusion_smoothing: f64,
        /// Max anchor residual of coefficient fits, reconstruction RMSE of
        /// the autoencoder, or final training loss of the network.
        fit_metric: Option<f64>,
    },
}

/// Shared inputs; cluster fits are computed once on first use.
pub struct Calibrator<'a> {
    cfg: &'a ScenarioConfig,
    nominal: RobotModel,
    basis: PlaneBasis,
    training: &'a Dataset,
    sweeps: &'a [JointSweep],
    clusters: Option<Vec<ClusterModel>>,
}

impl<'a> Calibrator<'a> {
    pub fn new(cfg: &'a ScenarioConfig, training: &'a Dataset, sweeps: &'a [JointSweep]) -> Result<Self> {
        let nominal = cfg.nominal()?;
        let basis = crate::minpoe::plane_basis(&nominal, &vec![0.0; nominal.n()])?;
        Ok(Self {
            cfg,
            nominal,
            basis,
            training,
            sweeps,
            clusters: None,
        })
    }

    /// Fused cluster fits over the training set.
    pub fn clusters(&mut self) -> Result<&[ClusterModel]> {
        if self.clusters.is_none() {
            let s = &self.training.samples;
            let raw = identify_clusters(&self.nominal, &self.basis, s, &self.cfg.nls)?;
            let fused = fuse_clusters(&self.nominal, &self.basis, s, &raw, self.cfg.fusion_smoothing, self.cfg.nls.weight_a)?;
            self.clusters = Some(fused);
        }
        Ok(self.clusters.as_deref().expect("just set"))
    }

    /// Samples of the clusters whose mean `(q2, q3)` lies nearest zero.
    fn zero_clusters(&self) -> Result<Vec<PoseSample>> {
        let mut groups: BTreeMap<usize, Vec<&PoseSample>> = BTreeMap::new();
        for s in &self.training.samples {
            let id = s
                .cluster_id
                .ok_or_else(|| Error::InvalidData("nls0 needs cluster ids".into()))?;
            groups.entry(id).or_default().push(s);
        }
        let mut ranked: Vec<(f64, usize)> = groups
            .iter()
            .map(|(&id, g)| {
                let n = g.len() as f64;
                let q2 = g.iter().map(|s| s.q[1]).sum::<f64>() / n;
                let q3 = g.iter().map(|s| s.q[2]).sum::<f64>() / n;
                (q2.hypot(q3), id)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(ranked
            .iter()
            .take(self.cfg.nls0_clusters)
            .flat_map(|(_, id)| groups[id].iter().map(|s| (*s).clone()))
            .collect())
    }

    fn cdc(&mut self, interpolator: impl FnOnce(&[ClusterModel]) -> Result<Interpolator>) -> Result<CdcModel> {
        let (nominal, basis) = (self.nominal.clone(), self.basis.clone());
        let clusters = self.clusters()?.to_vec();
        let interp = interpolator(&clusters)?;
        CdcModel::new(nominal, basis, clusters, interp)
    }

    pub fn calibrate(&mut self, method: Method) -> Result<(CalibratedModel, MethodDetails)> {
        let cfg = self.cfg;
        let rigid = |m: RobotModel, d: MethodDetails| Ok((CalibratedModel::Rigid(m), d));
        match method {
            Method::Nominal => rigid(self.nominal.clone(), MethodDetails::None),
            Method::Base => {
                let (m, rep) = base_calibrate(&self.nominal, &self.training.samples, &cfg.nls)?;
                rigid(m, MethodDetails::Base(rep))
            }
            Method::Cpa => {
                let m = cpa_identify(self.sweeps, &self.nominal, &cfg.sweeps.anchor, &cfg.probe())?;
                rigid(m, MethodDetails::None)
            }
            Method::Nls0 | Method::Nls1 => {
                let samples = if method == Method::Nls0 {
                    self.zero_clusters()?
                } else {
                    self.training.samples.clone()
                };
                let rep = nls_calibrate_with_basis(&self.nominal, &self.basis, &samples, &cfg.nls)?;
                let m = apply_params(&self.nominal, &rep.theta_hat, &self.basis)?;
                rigid(m, MethodDetails::Nls(rep))
            }
            _ => {
                let mut metric = None;
                let model = match method {
                    Method::Nearest => self.cdc(|_| Ok(Interpolator::Nearest))?,
                    Method::Linear => self.cdc(|_| Ok(Interpolator::Linear))?,
                    Method::Cubic => self.cdc(|_| Ok(Interpolator::Cubic))?,
                    Method::Rbf | Method::Fourier13 | Method::FourierR => self.cdc(|c| {
                        let kind = if method == Method::Rbf { BasisKind::Rbf } else { BasisKind::Fourier13 };
                        let mut coeffs = fit_basis_coefficients(c, kind)?;
                        metric = Some(coeffs.anchor_residual);
                        Ok(match method {
                            Method::Rbf => Interpolator::Rbf(coeffs),
                            Method::FourierR => {
                                coeffs = reduce_basis(&coeffs, cfg.fourier_rank)?;
                                Interpolator::Fourier(coeffs)
                            }
                            _ => Interpolator::Fourier(coeffs),
                        })
                    })?,
                    Method::Nn => self.cdc(|c| {
                        let w = train_nn_field(c, &cfg.train)?;
                        metric = Some(w.final_loss);
                        Ok(Interpolator::Nn(w))
                    })?,
                    Method::Ae => {
                        let clusters = self.clusters()?.to_vec();
                        let ae = train_autoencoder(&clusters, cfg.ae_latent, &cfg.train)?;
                        metric = Some(ae.reconstruction_rmse);
                        CdcModel::with_autoencoder(self.nominal.clone(), self.basis.clone(), clusters, &ae)?
                    }
                    _ => unreachable!("rigid methods handled above"),
                };
                let details = MethodDetails::Clusters {
                    clusters: model.clusters().len(),
                    converged: model.clusters().iter().filter(|c| c.nls_report.converged).count(),
                    fusion_smoothing: cfg.fusion_smoothing,
                    fit_metric: metric,
                };
                Ok((CalibratedModel::Cdc(Box::new(model)), details))
            }
        }
    }
}

/// Outcome of one method in the calibrate stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStatus {
    pub method: Method,
    pub ok: bool,
    pub error: Option<String>,
}

/// Paired comparison of a method against a baseline on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub method: String,
    pub baseline: String,
    pub test: PairedTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualRow {
    pub method: String,
    pub report: DualReport,
}

/// Everything the evaluate stage produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub methods: Vec<MethodReport>,
    pub correlations: Vec<(String, JointCorrelation)>,
    pub significance: Vec<Significance>,
    #[serde(default)]
    pub dual: Vec<DualRow>,
}

/// Evaluates models on a test set; CDC methods are compared with `nls1`
/// when present.
pub fn evaluate_models(models: &[(Method, CalibratedModel)], test: &Dataset) -> Result<EvaluationReport> {
    let mut methods = Vec::with_capacity(models.len());
    let mut correlations = Vec::with_capacity(models.len());
    for (m, model) in models {
        let rep = evaluate(m.name(), model, test)?;
        correlations.push((m.name().to_string(), joint_error_correlation(&rep, test)?));
        methods.push(rep);
    }
    let mut significance = Vec::new();
    if let Some(base) = methods.iter().find(|r| r.method == Method::Nls1.name()) {
        for ((m, _), rep) in models.iter().zip(&methods) {
            if m.is_cdc() {
                significance.push(Significance {
                    method: rep.method.clone(),
                    baseline: base.method.clone(),
                    test: paired_tests(rep, base)?,
                });
            }
        }
    }
    Ok(EvaluationReport {
        methods,
        correlations,
        significance,
        dual: Vec::new(),
    })
}

/// Calibrates every method on both robots of a two-robot cell and measures
/// the drift of their relative tool position.
pub fn run_dual(cfg: &ScenarioConfig, methods: &[Method]) -> Result<Vec<DualRow>> {
    let a = simulate(cfg)?;
    let mut partner_cfg = cfg.clone();
    partner_cfg.robot = cfg.dual.partner.clone();
    partner_cfg.grid = None;
    partner_cfg.set_seed(cfg.seed.wrapping_add(1));
    partner_cfg.dual.enabled = false;
    let b = simulate(&partner_cfg)?;
    let mount = default_mount(cfg.dual.distance);
    let pairs = gen_dual_configs(&a.robot, &b.robot, &mount, &Vec3::from(cfg.dual.offset), cfg.dual.pairs)?;
    let mut cal_a = Calibrator::new(cfg, &a.training, &a.sweeps)?;
    let mut cal_b = Calibrator::new(&partner_cfg, &b.training, &b.sweeps)?;
    methods
        .iter()
        .map(|&m| {
            let (ma, _) = cal_a.calibrate(m)?;
            let (mb, _) = cal_b.calibrate(m)?;
            Ok(DualRow {
                method: m.name().to_string(),
                report: dual_robot_eval(&a.robot, &b.robot, &ma, &mb, &pairs, &mount)?,
            })
        })
        .collect()
}

fn model_path(dir: &Path, m: Method) -> PathBuf {
    dir.join(MODELS_DIR).join(format!("{}.json", m.name()))
}

fn details_path(dir: &Path, m: Method) -> PathBuf {
    dir.join(MODELS_DIR).join(format!("{}.report.json", m.name()))
}

/// Writes the datasets and the ground truth into `dir`.
pub fn stage_simulate(cfg: &ScenarioConfig, dir: &Path) -> Result<Scenario> {
    let sc = simulate(cfg)?;
    std::fs::create_dir_all(dir)?;
    sc.training.write_csv(&dir.join(TRAINING_FILE))?;
    sc.test.write_csv(&dir.join(TEST_FILE))?;
    write_sweeps_csv(&dir.join(SWEEPS_FILE), &sc.sweeps)?;
    write_json(&dir.join(GROUND_TRUTH_FILE), &sc.robot)?;
    Ok(sc)
}

/// Calibrates every configured method from the files in `dir`. A failing
/// method is recorded and the rest still run.
pub fn stage_calibrate(cfg: &ScenarioConfig, dir: &Path) -> Result<Vec<CalibrationStatus>> {
    cfg.validate()?;
    let training = Dataset::read_csv(&dir.join(TRAINING_FILE), DatasetKind::Training)?;
    let sweeps = read_sweeps_csv(&dir.join(SWEEPS_FILE))?;
    let mut cal = Calibrator::new(cfg, &training, &sweeps)?;
    let mut status = Vec::with_capacity(cfg.methods.len());
    for &m in &cfg.methods {
        let outcome = cal.calibrate(m).and_then(|(model, details)| {
            model.save(&model_path(dir, m))?;
            write_json(&details_path(dir, m), &details)
        });
        status.push(CalibrationStatus {
            method: m,
            ok: outcome.is_ok(),
            error: outcome.err().map(|e| e.to_string()),
        });
    }
    write_json(&dir.join(CALIBRATION_FILE), &status)?;
    Ok(status)
}

/// Evaluates the configured methods' saved models against `test.csv`.
pub fn stage_evaluate(cfg: &ScenarioConfig, dir: &Path) -> Result<EvaluationReport> {
    let test = Dataset::read_csv(&dir.join(TEST_FILE), DatasetKind::Test)?;
    let mut models = Vec::with_capacity(cfg.methods.len());
    for &m in &cfg.methods {
        let path = model_path(dir, m);
        if !path.is_file() {
            return Err(Error::InvalidData(format!("missing model for {m}: {}", path.display())));
        }
        models.push((m, CalibratedModel::load(m, &path)?));
    }
    let mut report = evaluate_models(&models, &test)?;
    if cfg.dual.enabled {
        report.dual = run_dual(cfg, &cfg.methods)?;
    }
    write_json(&dir.join(REPORT_FILE), &report)?;
    write_atomic(&dir.join(TABLE_FILE), &table_csv(&report.methods)?)?;
    write_atomic(&dir.join(ERRORS_FILE), &samples_csv(&report.methods, &test)?)?;
    write_atomic(&dir.join(CORRELATION_FILE), &correlation_csv(&report.correlations)?)?;
    write_atomic(&dir.join(SIGNIFICANCE_FILE), &significance_csv(&report.significance)?)?;
    if !report.dual.is_empty() {
        write_atomic(&dir.join(DUAL_FILE), &dual_csv(&report.dual)?)?;
    }
    Ok(report)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn correlation_csv(rows: &[(String, JointCorrelation)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let n = rows.first().map_or(6, |r| r.1.values.len());
    let mut header = vec!["method".to_string()];
    header.extend((1..=n).map(|j| format!("q{j}")));
    w.write_record(&header)?;
    for (name, c) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(
            c.values
                .iter()
                .zip(&c.zero_variance)
                .map(|(v, z)| if *z { String::new() } else { v.to_string() }),
        );
        w.write_record(&rec)?;
    }
    finish(w)
}

fn significance_csv(rows: &[Significance]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "baseline", "mean_difference_mm", "t", "t_p_value", "wilcoxon_z", "wilcoxon_p_value"])?;
    for s in rows {
        let t = &s.test;
        w.write_record([
            s.method.clone(),
            s.baseline.clone(),
            t.mean_difference.to_string(),
            t.t_statistic.to_string(),
            t.t_p_value.to_string(),
            t.wilcoxon_z.to_string(),
            t.wilcoxon_p_value.to_string(),
        ])?;
    }
    finish(w)
}

fn dual_csv(rows: &[DualRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "mean", "std", "max"])?;
    for r in rows {
        let d = &r.report;
        w.write_record([r.method.clone(), d.mean.to_string(), d.std.to_string(), d.max.to_string()])?;
    }
    finish(w)
}

/// Human-readable summary of an evaluation report.
pub fn render_report(report: &EvaluationReport) -> Result<String> {
    let mut out = String::from("Tool position (mm) and orientation (deg) error; * marks the best value per column\n\n");
    out.push_str(&render_table(&report.methods)?);
    out.push_str("\nAbsolute correlation of position error with joint angles\n\n");
    out.push_str(&render_correlations(&report.correlations));
    if !report.significance.is_empty() {
        out.push_str("\nPaired tests on per-sample position error (two-sided)\n\n");
        let width = report.significance.iter().map(|s| s.method.len()).max().unwrap_or(6).max(6);
        out.push_str(&format!(
            "{:<width$}  {:<8} {:>12} {:>12} {:>12}\n",
            "method", "baseline", "mean diff", "t p-value", "W p-value"
        ));
        for s in &report.significance {
            out.push_str(&format!(
                "{:<width$}  {:<8} {:>12.4} {:>12.3e} {:>12.3e}\n",
                s.method, s.baseline, s.test.mean_difference, s.test.t_p_value, s.test.wilcoxon_p_value
            ));
        }
    }
    if !report.dual.is_empty() {
        out.push_str("\nRelative tool position drift of the two-robot cell (mm)\n\n");
        let width = report.dual.iter().map(|d| d.method.len()).max().unwrap_or(6).max(6);
        out.push_str(&format!("{:<width$}  {:>9} {:>9} {:>9}\n", "method", "mean", "std", "max"));
        for d in &report.dual {
            let r = &d.report;
            out.push_str(&format!("{:<width$}  {:>9.4} {:>9.4} {:>9.4}\n", d.method, r.mean, r.std, r.max));
        }
    }
    Ok(out)
}

/// Renders `report.json` from `dir` and writes `report.txt` beside it.
pub fn stage_report(dir: &Path) -> Result<String> {
    let report: EvaluationReport = read_json(&dir.join(REPORT_FILE))?;
    if report.methods.is_empty() {
        return Err(Error::InvalidData("report contains no methods".into()));
    }
    let text = render_report(&report)?;
    write_atomic(&dir.join(SUMMARY_FILE), text.as_bytes())?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            grid: Some(GridSpec {
                counts: [3, 4],
                ..GridSpec::ma2010()
            }),
            test: TestSpec {
                count: 40,
                ..TestSpec::default()
            },
            train: TrainConfig {
                hidden_sizes: vec![8],
                epochs: 50,
                ..TrainConfig::default()
            },
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert_eq!(parse_methods("nominal, fourier13").unwrap(), vec![Method::Nominal, Method::Fourier13]);
        assert!(parse_methods("nominal,bogus").is_err());
    }

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        let back: ScenarioConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: ScenarioConfig = serde_json::from_str(r#"{"robot": "ma1440", "seed": 3}"#).unwrap();
        assert_eq!(partial.grid(), GridSpec::ma1440());
        assert!(serde_json::from_str::<ScenarioConfig>(r#"{"robt": "ma1440"}"#).is_err());
        let bad = ScenarioConfig {
            methods: vec![],
            ..ScenarioConfig::default()
        };
        assert!(bad.validate().is_err());
        let missing = ScenarioConfig {
            robot: "/nonexistent/robot.json".into(),
            ..ScenarioConfig::default()
        };
        assert!(missing.validate().is_err());
    }

    #[test]
    fn every_method_calibrates_on_a_small_scenario() {
        let cfg = small();
        let sc = simulate(&cfg).unwrap();
        let mut cal = Calibrator::new(&cfg, &sc.training, &sc.sweeps).unwrap();
        let mut models = Vec::new();
        for m in Method::ALL {
            let (model, _) = cal.calibrate(m).unwrap_or_else(|e| panic!("{m}: {e}"));
            models.push((m, model));
        }
        let rep = evaluate_models(&models, &sc.test).unwrap();
        assert_eq!(rep.methods.len(), 13);
        let nominal = rep.methods[0].position.mean;
        let nls1 = rep.methods[4].position.mean;
        assert!(nls1 < nominal, "{nls1} vs {nominal}");
        assert_eq!(rep.significance.len(), 8);
    }

    #[test]
    fn stages_round_trip_through_files() {
        let mut cfg = small();
        cfg.methods = vec![Method::Nominal, Method::Nls1, Method::Fourier13, Method::Nn];
        let dir = tempfile::tempdir().unwrap();
        stage_simulate(&cfg, dir.path()).unwrap();
        let status = stage_calibrate(&cfg, dir.path()).unwrap();
        assert!(status.iter().all(|s| s.ok), "{status:?}");
        let rep = stage_evaluate(&cfg, dir.path()).unwrap();
        assert_eq!(rep.methods.len(), 4);
        let text = stage_report(dir.path()).unwrap();
        assert!(text.contains("fourier13"));
        let table = std::fs::read_to_string(dir.path().join(TABLE_FILE)).unwrap();
        assert_eq!(table.lines().count(), 5);

        cfg.methods.push(Method::Cubic);
        assert!(stage_evaluate(&cfg, dir.path()).is_err());
    }
}
