mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn kcfguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kcfguard"))
        .args(args)
        .env_remove("KCFGUARD_ENDPOINT")
        .env_remove("KCFGUARD_TIMEOUT_MS")
        .env_remove("KCFGUARD_TOKEN")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture(name: &str) -> String {
    common::kcf_dir().join(name).to_string_lossy().into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn scan_fig1_reports_privileged_and_exits_one() {
    let out = tempfile::tempdir().unwrap();
    let o = kcfguard(&[
        "scan",
        &fixture("fig1-privileged-pod.yaml"),
        "--output-dir",
        s(out.path()),
    ]);
    assert_eq!(code(&o), 1);
    assert!(
        stdout(&o).contains("pod-name+0\tline 11\tContainers should not run in privileged mode")
    );
    let report = json(&out.path().join("scan.json"));
    assert_eq!(report["records"][0]["labels"][0], "pod-name+0");
}

#[test]
fn scan_clean_file_exits_zero() {
    let out = tempfile::tempdir().unwrap();
    let o = kcfguard(&[
        "scan",
        &fixture("clean-deployment.yaml"),
        "--output-dir",
        s(out.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn scan_directory_with_malformed_file() {
    let corpus = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    for name in ["replicas-one.yaml", "configmap.yaml"] {
        std::fs::copy(fixture(name), corpus.path().join(name)).unwrap();
    }
    std::fs::write(
        corpus.path().join("broken.yaml"),
        "apiVersion: v1\nkind: Pod\nmetadata:\n  name: [unclosed\n",
    )
    .unwrap();
    let o = kcfguard(&["scan", s(corpus.path()), "--output-dir", s(out.path())]);
    assert_eq!(code(&o), 1);
    let report = json(&out.path().join("scan.json"));
    assert_eq!(report["records"].as_array().unwrap().len(), 2);
    let diags = report["diagnostics"].as_array().unwrap();
    assert_eq!(diags.len(), 1);
    assert!(diags[0]
        .as_str()
        .unwrap()
        .starts_with("broken.yaml: malformed YAML at line 4"));
}

#[test]
fn scan_with_resolve_fills_all_fields() {
    let out = tempfile::tempdir().unwrap();
    let o = kcfguard(&[
        "scan",
        &fixture("replicas-one.yaml"),
        "--resolve",
        "--output-dir",
        s(out.path()),
    ]);
    assert_eq!(code(&o), 1);
    let report = json(&out.path().join("scan.json"));
    let r = &report["resolutions"][0];
    assert_eq!(r["line_number"], 9);
    assert_eq!(r["line_text"], "replicas: 1");
    assert_eq!(r["localization_verified"], "verified");
    assert!(r["fix_suggestion"]
        .as_str()
        .unwrap()
        .to_lowercase()
        .contains("increase the number of replicas"));
}

#[test]
fn encode_and_decode() {
    let o = kcfguard(&["encode", "app", "52"]);
    assert_eq!((code(&o), stdout(&o).as_str()), (0, "app+52\n"));
    let o = kcfguard(&["decode", "app+52"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("app\t52\tContainers should not allow privilege escalation"));
    assert_eq!(code(&kcfguard(&["encode", "app", "999"])), 2);
    assert_eq!(code(&kcfguard(&["decode", "not-a-label"])), 2);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&kcfguard(&[])), 2);
    assert_eq!(code(&kcfguard(&["scan"])), 2);
    assert_eq!(code(&kcfguard(&["scan", "/no/such/path.yaml"])), 2);
    assert_eq!(
        code(&kcfguard(&[
            "--config",
            "/no/such.toml",
            "encode",
            "a",
            "1"
        ])),
        2
    );
    assert_eq!(
        code(&kcfguard(&[
            "--backend",
            "remote",
            "resolve",
            &fixture("configmap.yaml")
        ])),
        2
    );
    assert_eq!(
        code(&kcfguard(&["--umi", "/no/umi.json", "encode", "a", "1"])),
        2
    );
    assert_eq!(code(&kcfguard(&["--version"])), 0);
}

#[test]
fn missing_tool_degrades_to_internal_rules() {
    let out = tempfile::tempdir().unwrap();
    let o = kcfguard(&[
        "scan",
        &fixture("fig1-privileged-pod.yaml"),
        "--tool",
        "checkov",
        "--tool-bin",
        "checkov=/nonexistent/checkov",
        "--output-dir",
        s(out.path()),
    ]);
    assert_eq!(code(&o), 1);
    let report = json(&out.path().join("scan.json"));
    assert_eq!(report["records"][0]["source"], "internal-rules");
    assert!(report["diagnostics"][0]
        .as_str()
        .unwrap()
        .contains("continuing with internal rules"));
}

fn label_fixtures(out: &Path) -> PathBuf {
    let o = kcfguard(&["label", s(&common::kcf_dir()), "--output-dir", s(out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("labels.json")
}

#[test]
fn evaluate_identical_maps_is_perfect() {
    let out = tempfile::tempdir().unwrap();
    let labels = label_fixtures(out.path());
    let o = kcfguard(&[
        "evaluate",
        "--predictions",
        s(&labels),
        "--ground-truth",
        s(&labels),
        "--f1-floor",
        "0.99",
        "--output-dir",
        s(out.path()),
    ]);
    assert_eq!(code(&o), 0);
    let r = json(&out.path().join("report.json"));
    for k in ["weighted_precision", "weighted_recall", "weighted_f1"] {
        assert_eq!(r[k]["mean"], 1.0, "{k}");
    }
    assert!(std::fs::read_to_string(out.path().join("report.txt"))
        .unwrap()
        .contains("weighted f1"));
}

#[test]
fn f1_floor_gates_exit_code_and_audit_round_trip() {
    let out = tempfile::tempdir().unwrap();
    let labels = label_fixtures(out.path());
    let mut gt: serde_json::Map<String, Value> =
        serde_json::from_str(&std::fs::read_to_string(&labels).unwrap()).unwrap();
    let mut pred = gt.clone();
    // One false positive and one missed label.
    pred["configmap.yaml"] = serde_json::json!(["settings+9"]);
    gt["replicas-one.yaml"] = serde_json::json!(["web+19", "web+27"]);
    let (p, g) = (out.path().join("p.json"), out.path().join("g.json"));
    std::fs::write(&p, Value::Object(pred).to_string()).unwrap();
    std::fs::write(&g, Value::Object(gt).to_string()).unwrap();
    let o = kcfguard(&[
        "evaluate",
        "--predictions",
        s(&p),
        "--ground-truth",
        s(&g),
        "--f1-floor",
        "0.999",
        "--output-dir",
        s(out.path()),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("below the floor"));

    let o = kcfguard(&[
        "audit",
        "sample",
        "--predictions",
        s(&p),
        "--ground-truth",
        s(&g),
        "--corpus",
        s(&common::kcf_dir()),
        "--output-dir",
        s(out.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let card = out.path().join("audit/configmap.yaml.md");
    let md = std::fs::read_to_string(&card).unwrap();
    assert!(md.contains("kind: ConfigMap"));
    std::fs::write(
        &card,
        md.replace("- verdict `settings+9`:", "- verdict `settings+9`: tp"),
    )
    .unwrap();
    let o = kcfguard(&[
        "audit",
        "ingest",
        "--predictions",
        s(&p),
        "--ground-truth",
        s(&g),
        "--cards",
        s(&out.path().join("audit")),
        "--output-dir",
        s(out.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let outcome = json(&out.path().join("audit-outcome.json"));
    assert_eq!(outcome["reviewed_fps"], 1);
    assert_eq!(outcome["flipped"], 1);
}

#[test]
fn build_umi_from_saved_matches() {
    let dir = tempfile::tempdir().unwrap();
    let aliases = dir.path().join("aliases.json");
    std::fs::write(
        &aliases,
        r#"[
  {"tool": "a", "rule_id": "A1", "text": "CPU limits should be set."},
  {"tool": "a", "rule_id": "A2", "text": "Image tag should be fixed."},
  {"tool": "b", "rule_id": "B1", "text": "CPU limits not set in config file."},
  {"tool": "b", "rule_id": "B2", "text": "Do not use hostNetwork."}
]"#,
    )
    .unwrap();
    let matches = dir.path().join("ab.txt");
    std::fs::write(
        &matches,
        r#"{ "CPU limits should be set.": "CPU limits not set in config file." }"#,
    )
    .unwrap();
    let o = kcfguard(&[
        "build-umi",
        "--aliases",
        s(&aliases),
        "--matches",
        s(&matches),
        "--output-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "4 entries, 4 aliases\n");
    let umi = json(&dir.path().join("umi.json"));
    assert_eq!(umi["entries"][0]["aliases"].as_array().unwrap().len(), 2);
}

/// Every output file under `dir`, by relative path.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// Fixture corpus plus a second RBAC-wildcard file to serve as the test set.
fn pipeline_corpus(dir: &Path) {
    for (name, text) in common::fixture_texts() {
        std::fs::write(dir.join(&name), text).unwrap();
    }
    std::fs::copy(
        fixture("rbac-wildcard.yaml"),
        dir.join("rbac-wildcard-held-out.yaml"),
    )
    .unwrap();
}

fn pipeline(out: &Path, corpus: &Path, seed: &str) {
    let run = |args: &[&str]| {
        let mut full = vec!["--seed", seed, "--output-dir", s(out)];
        full.extend_from_slice(args);
        let o = kcfguard(&full);
        assert!(
            code(&o) <= 1,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    };
    run(&["scan", s(corpus), "--resolve", "--detector", "both"]);
    run(&["label", s(corpus)]);
    run(&["build-dataset", s(corpus), "--stratified", "2"]);
    run(&["resolve", s(corpus)]);
    let dataset = std::fs::read_to_string(out.join("dataset.jsonl")).unwrap();
    let held_out: String = dataset
        .lines()
        .filter(|l| l.contains("\"source_name\":\"rbac-wildcard-held-out.yaml\""))
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(held_out.lines().count(), 1);
    std::fs::write(out.join("test.jsonl"), held_out).unwrap();
    run(&[
        "adapt",
        "--dataset",
        s(&out.join("dataset.jsonl")),
        "--test",
        s(&out.join("test.jsonl")),
        "--m",
        "51",
        "--s",
        "1",
        "--iterations",
        "2",
        "--old",
        "5",
        "--export",
    ]);
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let corpus = tempfile::tempdir().unwrap();
    pipeline_corpus(corpus.path());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), corpus.path(), "7");
    pipeline(b.path(), corpus.path(), "7");
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.len() >= 10);
    assert_eq!(sa, sb);
    let split = json(&a.path().join("split.json"));
    assert_eq!(split["seed"], 7);
    let adapt = json(&a.path().join("adaptation.json"));
    assert_eq!(adapt[0]["iterations"].as_array().unwrap().len(), 2);
    assert_eq!(adapt[0]["recall"]["mean"], 1.0);
}
