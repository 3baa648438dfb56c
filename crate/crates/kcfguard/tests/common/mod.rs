#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use kcfguard_core::data::{reference_rules, reference_umi};
use kcfguard_core::{DetectionRecord, RuleSet, Umi};

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn kcf_dir() -> PathBuf {
    fixtures_dir().join("kcf")
}

#[derive(Debug, serde::Deserialize)]
pub struct HandLabel {
    pub labels: Vec<String>,
    pub evidence_lines: BTreeMap<String, Vec<u32>>,
}

/// File name to text, sorted by name.
pub fn fixture_texts() -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(kcf_dir()).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        out.insert(name, std::fs::read_to_string(&p).unwrap());
    }
    out
}

pub fn hand_labels() -> BTreeMap<String, HandLabel> {
    let text = std::fs::read_to_string(fixtures_dir().join("expected.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn oracle() -> (Arc<Umi>, Arc<RuleSet>) {
    let umi = reference_umi();
    let rules = reference_rules(&umi);
    (Arc::new(umi), Arc::new(rules))
}

/// Sorted unique evidence lines per rendered label.
pub fn evidence_lines(record: &DetectionRecord) -> BTreeMap<String, Vec<u32>> {
    let mut by: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
    for e in &record.evidence {
        by.entry(e.label.to_string()).or_default().insert(e.line);
    }
    by.into_iter()
        .map(|(k, v)| (k, v.into_iter().collect()))
        .collect()
}

/// Mismatches between the engine and the hand labels; empty when they agree.
pub fn oracle_mismatches(umi: &Umi, rules: &RuleSet) -> Vec<String> {
    let texts = fixture_texts();
    let hand = hand_labels();
    let mut out = Vec::new();
    if texts.keys().collect::<Vec<_>>() != hand.keys().collect::<Vec<_>>() {
        out.push("fixture files and expected.json disagree".to_string());
    }
    for (name, text) in &texts {
        let Some(h) = hand.get(name) else { continue };
        let doc = kcfguard_core::KcfDocument::parse(text, name).unwrap();
        let r = kcfguard_core::rules::evaluate_rules(&doc, rules, umi);
        let got: Vec<String> = r.labels.to_strings();
        let mut want = h.labels.clone();
        want.sort();
        let mut got_sorted = got.clone();
        got_sorted.sort();
        if got_sorted != want {
            out.push(format!("{name}: labels {got_sorted:?} != hand {want:?}"));
        }
        let lines = evidence_lines(&r);
        if lines != h.evidence_lines {
            out.push(format!(
                "{name}: evidence {lines:?} != hand {:?}",
                h.evidence_lines
            ));
        }
    }
    out
}
