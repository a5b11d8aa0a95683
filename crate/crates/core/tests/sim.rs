use fedcare_core::domain::{FeatureKind, PseudonymKey, TIME_FEATURE};
use fedcare_core::edge::{EdgeConfig, EdgeNode};
use fedcare_core::ml::{train_linear, TrainingConfig};
use fedcare_core::protocol::{Party, SimClock};
use fedcare_core::sim::{
    bundled_scenario, bundled_scenarios, generate_cohort, run_scenario, verify_report, InProcess, ScenarioSpec, SimFeature, TargetTruth,
};
use fedcare_core::Error;
use std::collections::BTreeMap;
use std::sync::Arc;

fn small_spec(sigma: f64, size: usize) -> ScenarioSpec {
    let mut spec = bundled_scenario("he-2edges").unwrap();
    spec.cohort_size = size;
    spec.he_enabled = false;
    for t in spec.targets.values_mut() {
        t.noise_sigma = sigma;
    }
    spec
}

/// Least squares via the normal equations with Gaussian elimination.
fn normal_equations(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let d = rows[0].len() + 1;
    let mut a = vec![vec![0.0; d + 1]; d];
    for (r, t) in rows.iter().zip(y) {
        let x: Vec<f64> = r.iter().copied().chain([1.0]).collect();
        for i in 0..d {
            for j in 0..d {
                a[i][j] += x[i] * x[j];
            }
            a[i][d] += x[i] * t;
        }
    }
    for c in 0..d {
        let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..d {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=d {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..d).map(|i| a[i][d] / a[i][i]).collect()
}

fn edge_for(spec: &ScenarioSpec) -> EdgeNode {
    let cfg = EdgeConfig {
        edge_id: "edge-0".into(),
        pseudonymization_key: hex::encode(PseudonymKey::derive("sim-test").as_bytes()),
        ..EdgeConfig::default()
    };
    EdgeNode::new(cfg, spec.schema().unwrap(), None, None, Arc::new(SimClock::new(0))).unwrap()
}

#[test]
fn cohorts_are_deterministic() {
    let spec = small_spec(3.0, 20);
    let a = serde_json::to_vec(&generate_cohort(&spec, 1)).unwrap();
    let b = serde_json::to_vec(&generate_cohort(&spec, 1)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, serde_json::to_vec(&generate_cohort(&spec, 0)).unwrap());
}

#[test]
fn empty_cohort() {
    let c = generate_cohort(&small_spec(3.0, 0), 0);
    assert!(c.records.is_empty() && c.observations.is_empty() && c.interventions.is_empty());
}

#[test]
fn noiseless_cohort_recovers_coefficients() {
    let spec = small_spec(0.0, 80);
    let mut edge = edge_for(&spec);
    let report = edge.ingest_his_payload(generate_cohort(&spec, 0).payload()).unwrap();
    assert!(report.rejections.is_empty());
    let key = spec.model_keys()[0].clone();
    let ds = edge.local_dataset(&key).unwrap();
    let truth = &spec.targets[&key.target_variable];
    let schema = spec.schema().unwrap();
    let names: Vec<&str> = schema.names().collect();
    let expected: Vec<f64> = names.iter().map(|n| truth.coefficients.get(*n).copied().unwrap_or(0.0)).collect();

    let exact = normal_equations(&ds.rows, &ds.targets);
    for (w, e) in exact.iter().zip(&expected) {
        assert!((w - e).abs() < 1e-6, "{w} vs {e}");
    }
    assert!((exact[names.len()] - truth.intercept).abs() < 1e-6);

    let cfg = TrainingConfig { epochs: 20_000, learning_rate: 0.3, ..TrainingConfig::default() };
    let m = train_linear(&ds, &cfg, None).unwrap();
    for (i, (w, e)) in m.weights.iter().zip(&expected).enumerate() {
        assert!((w - e).abs() < 1e-3, "{}: {w} vs {e}", names[i]);
    }
}

#[test]
fn targets_are_clipped() {
    let mut spec = small_spec(0.0, 10);
    spec.targets.insert("overall_qol".into(), TargetTruth { intercept: 150.0, coefficients: BTreeMap::new(), noise_sigma: 0.0 });
    assert!(generate_cohort(&spec, 0).observations.iter().all(|o| o.overall_qol == 100.0));
}

#[test]
fn spec_validation() {
    let mut spec = small_spec(1.0, 10);
    spec.features.push(SimFeature { name: TIME_FEATURE.into(), kind: FeatureKind::Numeric, mean: 0.0, std: 1.0, p: 0.5 });
    assert!(spec.validate().is_err());
    let mut spec = small_spec(1.0, 10);
    spec.targets.get_mut("overall_qol").unwrap().coefficients.insert("nope".into(), 1.0);
    assert!(matches!(spec.validate(), Err(Error::Validation(_))));
    assert!(matches!(ScenarioSpec::from_json(b"{\"name\": 3}"), Err(Error::Decode(_))));
}

#[test]
fn bundled_scenarios_pass_and_verify() {
    for (name, _) in bundled_scenarios() {
        let spec = bundled_scenario(name).unwrap();
        let report = run_scenario(&spec, &mut InProcess).unwrap();
        let failed: Vec<_> = report.failures().iter().map(|a| format!("{}: {}", a.name, a.detail)).collect();
        assert!(report.passed, "{name}: {failed:?}");
        assert_eq!(verify_report(&report), Vec::<String>::new(), "{name}");
        assert!(report.events.iter().all(|e| e.initiator == Party::Edge));
    }
}

#[test]
fn reruns_match_modulo_timestamps() {
    let spec = bundled_scenario("churn-leave").unwrap();
    let a = run_scenario(&spec, &mut InProcess).unwrap();
    let b = run_scenario(&spec, &mut InProcess).unwrap();
    assert_eq!(serde_json::to_string(&a.without_timestamps()).unwrap(), serde_json::to_string(&b.without_timestamps()).unwrap());
}

#[test]
fn federation_runs_every_round() {
    let spec = bundled_scenario("iid-3edges").unwrap();
    let report = run_scenario(&spec, &mut InProcess).unwrap();
    let updates = report.events.iter().filter(|e| e.operation == "update" && e.status == "ok").count();
    let expected = spec.rounds as usize * spec.n_edges * spec.targets.len();
    assert!(updates >= expected, "{updates} < {expected}");
}

#[test]
fn verify_flags_tampering() {
    let spec = bundled_scenario("he-2edges").unwrap();
    let report = run_scenario(&spec, &mut InProcess).unwrap();

    let mut tampered = report.clone();
    tampered.events[3].initiator = Party::Cloud;
    let failures = verify_report(&tampered);
    assert!(failures.iter().any(|f| f.starts_with("edge_initiated_only")), "{failures:?}");

    let mut tampered = report.clone();
    tampered.he[0].parameter_delta = 1e-2;
    let failures = verify_report(&tampered);
    assert!(failures.iter().any(|f| f.starts_with("he_equivalence")), "{failures:?}");

    let mut tampered = report;
    tampered.privacy_hits.push((0, "PAT-0-00001".into()));
    assert!(verify_report(&tampered).iter().any(|f| f.starts_with("privacy_scan")));
}
