mod common;

use std::collections::BTreeMap;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use kcfguard::tools::{record_from_report, run_external_tool, Tool, ToolError, ALL_TOOLS};
use kcfguard_core::rules::{ensemble, evaluate_rules};
use kcfguard_core::KcfDocument;

fn fig1() -> (String, KcfDocument) {
    let text = common::fixture_texts()["fig1-privileged-pod.yaml"].clone();
    let doc = KcfDocument::parse(&text, "fig1-privileged-pod.yaml").unwrap();
    (text, doc)
}

fn report(name: &str) -> String {
    std::fs::read_to_string(common::fixtures_dir().join("tools").join(name)).unwrap()
}

fn golden() -> BTreeMap<String, Vec<String>> {
    serde_json::from_str(&report("golden-fig1.json")).unwrap()
}

/// Shell script standing in for a scanner: prints `report` and exits `code`.
fn fake_tool(dir: &Path, name: &str, report: &str, code: i32) -> PathBuf {
    let body = dir.join(format!("{name}.out"));
    std::fs::write(&body, report).unwrap();
    let script = dir.join(name);
    std::fs::write(
        &script,
        format!(
            "#!/bin/sh\ncat '{}'\necho 'scanned' >&2\nexit {code}\n",
            body.display()
        ),
    )
    .unwrap();
    std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
    script
}

#[test]
fn golden_reports_map_to_golden_labels() {
    let (umi, _) = common::oracle();
    let (_, doc) = fig1();
    let g = golden();
    let mut records = Vec::new();
    for tool in ALL_TOOLS {
        let r = record_from_report(
            tool,
            &report(&format!("{}-fig1.json", tool.name())),
            &doc,
            &umi,
        )
        .unwrap();
        assert_eq!(r.labels.to_strings(), g[tool.name()], "{}", tool.name());
        assert!(r.diagnostics.is_empty());
        assert!(r.labels.to_strings().contains(&"pod-name+0".to_string()));
        records.push(r);
    }
    let e = ensemble(&records).unwrap();
    assert_eq!(e.labels.to_strings(), g["ensemble"]);
}

#[test]
fn unmapped_finding_is_a_diagnostic() {
    let (umi, _) = common::oracle();
    let (_, doc) = fig1();
    let r = record_from_report(
        Tool::KubeLinter,
        &report("kube-linter-unmapped.json"),
        &doc,
        &umi,
    )
    .unwrap();
    assert_eq!(r.labels.to_strings(), ["pod-name+0"]);
    assert_eq!(r.diagnostics.len(), 1);
    assert!(r.diagnostics[0].contains("acme-custom-annotation"));
}

#[test]
fn subprocess_exit_codes() {
    let (umi, _) = common::oracle();
    let (_, doc) = fig1();
    let dir = tempfile::tempdir().unwrap();
    let file = common::kcf_dir().join("fig1-privileged-pod.yaml");

    let ok = fake_tool(dir.path(), "checkov", &report("checkov-fig1.json"), 1);
    let r = run_external_tool(Tool::Checkov, Some(&ok), &file, &doc, &umi).unwrap();
    assert_eq!(r.labels.to_strings(), golden()["checkov"]);

    let ts = fake_tool(dir.path(), "terrascan", &report("terrascan-fig1.json"), 3);
    assert!(run_external_tool(Tool::Terrascan, Some(&ts), &file, &doc, &umi).is_ok());

    let crash = fake_tool(dir.path(), "kube-linter", "", 2);
    match run_external_tool(Tool::KubeLinter, Some(&crash), &file, &doc, &umi) {
        Err(ToolError::ToolCrashed { status, stderr, .. }) => {
            assert_eq!(status, Some(2));
            assert_eq!(stderr, "scanned");
        }
        other => panic!("{other:?}"),
    }

    let garbage = fake_tool(
        dir.path(),
        "garbage",
        "Traceback (most recent call last)",
        0,
    );
    assert!(matches!(
        run_external_tool(Tool::Checkov, Some(&garbage), &file, &doc, &umi),
        Err(ToolError::UnparseableReport { .. })
    ));
}

#[test]
fn per_tool_precision_identity_on_fixtures() {
    // A tool's own record, scoped to what it covers, is its own ground truth.
    let (umi, rules) = common::oracle();
    for (name, text) in common::fixture_texts() {
        let doc = KcfDocument::parse(&text, &name).unwrap();
        let r = evaluate_rules(&doc, &rules, &umi);
        let scoped = r.restricted_to(&rules.coverage());
        assert_eq!(scoped.labels, r.labels, "{name}");
        assert_eq!(scoped.restricted_to(&rules.coverage()), scoped);
    }
}
