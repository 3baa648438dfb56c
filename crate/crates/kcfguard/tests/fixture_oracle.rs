mod common;

#[test]
fn engine_matches_hand_labels() {
    let (umi, rules) = common::oracle();
    assert!(common::fixture_texts().len() >= 40);
    let mismatches = common::oracle_mismatches(&umi, &rules);
    assert!(mismatches.is_empty(), "{}", mismatches.join("\n"));
}

#[test]
fn named_cases_are_present() {
    let hand = common::hand_labels();
    assert_eq!(
        hand["fig1-privileged-pod.yaml"].evidence_lines["pod-name+0"],
        [11]
    );
    assert_eq!(hand["replicas-one.yaml"].evidence_lines["web+19"], [9]);
    assert!(common::fixture_texts()["secret-in-env.yaml"]
        .contains("- name: GITHUB_CLIENT_SECRET\n          value: "));
    assert_eq!(hand["missing-cpu-requests.yaml"].labels, ["api+7"]);
}
