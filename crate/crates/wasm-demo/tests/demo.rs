use fedcare_wasm_demo::{explore_more, DemoEdge};

#[test]
fn more_round_trip_matches_plaintext() {
    for seed in [0, 7, 12345] {
        let r = explore_more(seed, 3.5, -1.25).unwrap();
        assert!(r.condition_number <= fedcare_core::more::MAX_CONDITION);
        assert!((r.decrypted_sum - r.plain_sum).abs() <= 1e-9 * r.plain_sum.abs().max(1.0));
        assert!((r.decrypted_product - r.plain_product).abs() <= 1e-9 * r.plain_product.abs().max(1.0));
        assert_ne!(r.a, r.b);
    }
    assert_eq!(explore_more(7, 1.0, 2.0).unwrap(), explore_more(7, 1.0, 2.0).unwrap());
}

#[test]
fn demo_edge_serves_timeline_attribution_and_what_if() {
    let demo = DemoEdge::new(2024).unwrap();
    let patients = demo.patients();
    assert_eq!(patients.len(), 40);
    let p = patients[0].pseudonym.to_string();

    let tl = demo.timeline(&p, 3).unwrap();
    assert_eq!(tl.predictions.len(), 3);
    let attr = &tl.attributions["overall_qol"];
    assert!(attr.efficiency_gap() < 1e-9);

    let ids = demo.intervention_ids();
    assert_eq!(ids, vec!["exercise_program".to_string(), "psych_support".to_string()]);
    let base = demo.what_if(&p, &[], 3).unwrap();
    let both = demo.what_if(&p, &ids, 3).unwrap();
    assert_eq!(base.len(), 3);
    assert!(both.iter().all(|pt| pt.assuming.len() == 2));

    let suggestions = demo.suggestions(&p).unwrap();
    assert_eq!(suggestions.len(), 3);
    let top = &suggestions[0];
    let mut ordered = top.intervention_ids.clone();
    ordered.sort();
    let alt = demo.what_if(&p, &ordered, 1).unwrap();
    let none = demo.what_if(&p, &[], 1).unwrap();
    assert!((alt[0].value - none[0].value - top.predicted_delta).abs() < 1e-6);

    assert!(demo.timeline("nope", 2).is_err());
}
