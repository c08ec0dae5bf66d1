use proptest::prelude::*;

use bnndp::certify::{bound_expectation, certify, gamma_robustness, max_certified_radius, CertifyOptions, Query, Verdict};
use bnndp::model::{gen_model, BnnModel, CovKind, GenSpec, Task};
use bnndp::oracle::{mc_expectation, soundness_audit, AuditFamily, Readout};
use bnndp::relax::BoxDomain;

fn regression(widths: Vec<usize>, seed: u64) -> BnnModel {
    let mut spec = GenSpec::new(widths, Task::Regression);
    spec.var_scale = Some(0.5);
    gen_model(&spec, seed).unwrap()
}

fn classifier(seed: u64) -> BnnModel {
    let mut spec = GenSpec::new(vec![2, 32, 3], Task::Classification);
    spec.scale = 3.0;
    spec.var_scale = Some(0.05);
    gen_model(&spec, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gamma_is_nonnegative(seed in 0u64..1000, r in 0.0..0.2f64) {
        let m = regression(vec![2, 16, 16, 1], seed);
        let opts = CertifyOptions::for_model(&m);
        let q = Query::new(vec![0.1, -0.3], r).unwrap();
        let g = gamma_robustness(&m, &q, &opts).unwrap();
        let b = bound_expectation(&m, &q.as_box().unwrap(), &opts).unwrap();
        prop_assert!(g[0] >= 0.0 && g[0].is_finite());
        prop_assert!(b.lower[0] <= b.upper[0]);
    }

    #[test]
    fn bounds_bracket_mc_at_box_points(seed in 0u64..1000, t in 0.0..1.0f64) {
        let m = regression(vec![1, 24, 1], seed);
        let bx = BoxDomain::new(vec![-0.2], vec![0.3]).unwrap();
        let b = bound_expectation(&m, &bx, &CertifyOptions::for_model(&m)).unwrap();
        let x = -0.2 + 0.5 * t;
        let est = mc_expectation(&m, &[x], Readout::Identity, 20_000, seed).unwrap();
        let tol = 4.0 * est.std_err[0];
        prop_assert!(est.mean[0] >= b.lower[0] - tol && est.mean[0] <= b.upper[0] + tol);
    }
}

#[test]
fn radius_search_is_consistent_with_certify() {
    let m = classifier(4);
    let c = [0.2, -0.4];
    let opts = CertifyOptions::for_model(&m);
    let res = max_certified_radius(&m, &c, 1e-4, &opts).unwrap();
    assert!(res.radius > 0.0);
    assert!(res.bracket[1] - res.bracket[0] <= 1e-4 + 1e-12);
    let half = certify(&m, &Query::new(c.to_vec(), res.radius / 2.0).unwrap(), &opts).unwrap();
    assert_eq!(half.verdict, Verdict::Robust);
    assert_eq!(half.predicted_class, res.class);

    // a finer tolerance keeps the certified radius inside the old bracket
    let fine = max_certified_radius(&m, &c, 5e-5, &opts).unwrap();
    assert!(fine.radius >= res.radius - 1e-12 && fine.radius <= res.bracket[1]);
}

#[test]
fn robust_radius_survives_mc_attack() {
    let m = classifier(4);
    let c = [0.2, -0.4];
    let opts = CertifyOptions::for_model(&m);
    let res = max_certified_radius(&m, &c, 1e-3, &opts).unwrap();
    let cls = res.class.unwrap();
    let r = 0.9 * res.radius;
    for k in 0..16 {
        let ang = k as f64 * std::f64::consts::PI / 8.0;
        let x = [c[0] + r * ang.cos().signum(), c[1] + r * ang.sin().signum()];
        let est = mc_expectation(&m, &x, Readout::Softmax, 20_000, k).unwrap();
        for j in 0..3 {
            assert!(j == cls || est.mean[cls] + 4.0 * (est.std_err[cls] + est.std_err[j]) >= est.mean[j]);
        }
    }
}

#[test]
fn symmetric_classifier_is_never_certified() {
    let mut m = classifier(1);
    let last = m.layers.last_mut().unwrap();
    let row = last.mean.row(0).clone_owned();
    last.mean.set_row(1, &row);
    let cert = certify(&m, &Query::new(vec![0.0, 0.0], 0.0).unwrap(), &CertifyOptions::for_model(&m)).unwrap();
    assert_eq!(cert.verdict, Verdict::NotCertified);
}

#[test]
fn regression_gamma_threshold_decides() {
    let m = regression(vec![2, 8, 1], 3);
    let q = Query::new(vec![0.0, 0.1], 0.05).unwrap();
    let mut opts = CertifyOptions::for_model(&m);
    let open = certify(&m, &q, &opts).unwrap();
    let width = open.gamma[0];
    opts.gamma = Some(width * 1.01);
    assert_eq!(certify(&m, &q, &opts).unwrap().verdict, Verdict::Robust);
    opts.gamma = Some(width * 0.5);
    assert_eq!(certify(&m, &q, &opts).unwrap().verdict, Verdict::NotCertified);
}

#[test]
fn mc_std_err_shrinks_with_samples() {
    let m = regression(vec![2, 16, 1], 9);
    let a = mc_expectation(&m, &[0.3, 0.3], Readout::Identity, 40_000, 1).unwrap();
    let b = mc_expectation(&m, &[0.3, 0.3], Readout::Identity, 80_000, 1).unwrap();
    let ratio = b.std_err[0] / a.std_err[0];
    assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn mc_softmax_lies_on_the_simplex() {
    let m = classifier(2);
    let est = mc_expectation(&m, &[0.5, 0.5], Readout::Softmax, 10_000, 3).unwrap();
    assert!((est.mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(est.mean.iter().all(|p| *p >= 0.0));
}

#[test]
fn audit_is_reproducible() {
    let fam = AuditFamily { mc_samples: 2_000, hidden_max: 1, width_max: 16, ..AuditFamily::default() };
    let a = soundness_audit(&fam, 3, 8).unwrap();
    let b = soundness_audit(&fam, 3, 8).unwrap();
    assert_eq!(a.canonical_json(), b.canonical_json());
    assert_eq!(a.violations, 0);
    let empty = soundness_audit(&fam, 0, 8).unwrap();
    assert!(empty.trials.is_empty() && empty.violations == 0);
}

#[test]
fn model_file_round_trips() {
    let mut spec = GenSpec::new(vec![3, 8, 8, 2], Task::Classification);
    spec.covariance = CovKind::Full;
    let m = gen_model(&spec, 5).unwrap();
    let dir = std::env::temp_dir().join(format!("bnndp-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let p = dir.join("m.json");
    m.save(&p).unwrap();
    let back = BnnModel::load(&p).unwrap();
    assert_eq!(m, back);
    assert_eq!(m.to_json_string(), back.to_json_string());
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn malformed_models_are_rejected() {
    assert!(BnnModel::from_json_str("{}").is_err());
    assert!(BnnModel::from_json_str("not json").is_err());
}
