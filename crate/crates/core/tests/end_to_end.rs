use poecal::cdc::{fit_basis_coefficients, BasisKind, CdcModel, Interpolator};
use poecal::kin::{forward_kinematics, PosePredictor, RobotModel};
use poecal::minpoe::{apply_params, axis_lines, plane_basis, recover_model, ParamVector};
use poecal::pipeline::{simulate, Calibrator, Method, NoiseLevels, ScenarioConfig};
use poecal::sim::{GridSpec, GroundTruthRobot, TestSpec};
use proptest::prelude::*;

fn small(severity: f64, noise: NoiseLevels) -> ScenarioConfig {
    ScenarioConfig {
        severity,
        noise,
        grid: Some(GridSpec {
            counts: [3, 5],
            ..GridSpec::ma2010()
        }),
        test: TestSpec {
            count: 50,
            ..TestSpec::default()
        },
        ..ScenarioConfig::default()
    }
}

#[test]
fn undeviated_noiseless_robot_is_recovered_by_every_geometric_method() {
    let cfg = small(0.0, NoiseLevels { pos_sigma: 0.0, ori_sigma: 0.0 });
    let sc = simulate(&cfg).unwrap();
    let mut cal = Calibrator::new(&cfg, &sc.training, &sc.sweeps).unwrap();
    for m in Method::ALL.into_iter().filter(|m| !matches!(m, Method::Nn | Method::Ae)) {
        let (model, _) = cal.calibrate(m).unwrap();
        for s in &sc.test.samples {
            let e = (model.predict(&s.q).unwrap().translation - s.measured.translation).norm();
            assert!(e < 1e-6, "{m}: {e}");
        }
    }
}

#[test]
fn cluster_fits_track_the_true_field_without_noise() {
    let cfg = ScenarioConfig {
        fusion_smoothing: 0.0,
        ..small(1.0, NoiseLevels { pos_sigma: 0.0, ori_sigma: 0.0 })
    };
    let sc = simulate(&cfg).unwrap();
    let mut cal = Calibrator::new(&cfg, &sc.training, &sc.sweeps).unwrap();
    let clusters = cal.clusters().unwrap().to_vec();
    assert_eq!(clusters.len(), 15);
    let nominal = cfg.nominal().unwrap();
    let basis = plane_basis(&nominal, &[0.0; 6]).unwrap();
    let mut at = 0.0f64;
    let mut nominal_err = 0.0f64;
    for c in &clusters {
        let fitted = apply_params(&nominal, &c.theta, &basis).unwrap();
        let truth = sc.robot.model_at(&c.anchor_q).unwrap();
        let q = &c.anchor_q;
        let t = forward_kinematics(&truth, q).unwrap().translation;
        at = at.max((forward_kinematics(&fitted, q).unwrap().translation - t).norm());
        nominal_err = nominal_err.max((forward_kinematics(&nominal, q).unwrap().translation - t).norm());
    }
    assert!(at < 0.1 * nominal_err, "cluster error {at} vs nominal {nominal_err}");
}

#[test]
fn fourier_recovers_an_in_span_field_from_exact_clusters() {
    let nominal = RobotModel::ma2010();
    let robot = GroundTruthRobot::generate(&nominal, 1.0, 5, false).unwrap();
    let grid = GridSpec {
        counts: [6, 6],
        ..GridSpec::ma2010()
    };
    let clusters: Vec<_> = (0..grid.counts[0] * grid.counts[1])
        .map(|k| {
            let (i, j) = (k / grid.counts[1], k % grid.counts[1]);
            let lerp = |r: [f64; 2], t: usize, n: usize| (r[0] + (r[1] - r[0]) * t as f64 / (n - 1) as f64).to_radians();
            let q2 = lerp(grid.q2_range, i, grid.counts[0]);
            let q3 = lerp(grid.q3_range, j, grid.counts[1]);
            let theta = robot.theta(q2, q3);
            poecal::cdc::ClusterModel {
                anchor_q: vec![0.0, q2, q3, 0.0, 0.5, 0.0],
                nls_report: poecal::nls::NlsReport {
                    theta_hat: theta.clone(),
                    initial_cost: 0.0,
                    final_cost: 0.0,
                    iterations: 0,
                    converged: true,
                    under_determined: false,
                    num_samples: 0,
                    cost_history: Vec::new(),
                },
                theta,
            }
        })
        .collect();
    let coeffs = fit_basis_coefficients(&clusters, BasisKind::Fourier13).unwrap();
    let model = CdcModel::new(nominal, robot.basis.clone(), clusters, Interpolator::Fourier(coeffs)).unwrap();
    for k in 0..40 {
        let t = k as f64;
        let q = [0.4 * t.sin(), 0.8 * (0.7 * t).cos() - 0.1, 0.9 * (1.3 * t).sin() - 0.2, t.cos(), 0.3 + t.sin().abs(), 0.0];
        let e = (model.predict(&q).unwrap().translation - robot.true_pose(&q).unwrap().translation).norm();
        assert!(e < 1e-8, "{e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn axis_lines_determine_the_model(
        pos in prop::collection::vec(-2.0f64..2.0, 12),
        ang in prop::collection::vec(-0.01f64..0.01, 12),
        q0 in prop::collection::vec(-1.5f64..1.5, 6),
        q in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let nominal = RobotModel::ma2010();
        let basis = plane_basis(&nominal, &[0.0; 6]).unwrap();
        let theta = ParamVector::from_vec([pos, ang].concat()).unwrap();
        let model = apply_params(&nominal, &theta, &basis).unwrap();
        let lines = axis_lines(&model, &q0).unwrap();
        let tool = forward_kinematics(&model, &q0).unwrap().translation;
        let back = recover_model(&lines, &tool, &nominal, &q0).unwrap();
        let a = forward_kinematics(&model, &q).unwrap();
        let b = forward_kinematics(&back, &q).unwrap();
        prop_assert!((a.translation - b.translation).norm() < 1e-6);
        prop_assert!((a.rotation - b.rotation).norm() < 1e-8);
    }

    #[test]
    fn zero_deviation_reproduces_nominal(q in prop::collection::vec(-3.0f64..3.0, 6)) {
        let nominal = RobotModel::ma2010();
        let basis = plane_basis(&nominal, &[0.0; 6]).unwrap();
        let m = apply_params(&nominal, &ParamVector::zeros(6), &basis).unwrap();
        let a = forward_kinematics(&m, &q).unwrap();
        let b = forward_kinematics(&nominal, &q).unwrap();
        prop_assert!((a.translation - b.translation).norm() < 1e-9);
    }
}
