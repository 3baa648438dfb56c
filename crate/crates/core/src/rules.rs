//! Declarative checks over resource trees, detection records, and the
//! union ensemble.
//!
//! Rule paths use the tree's key-path syntax plus two extensions: `[*]` matches
//! every item of a sequence, and a leading `@pod` stands for the pod spec of
//! the resource (`spec` for a Pod, `spec/template/spec` for a Deployment,
//! `spec/jobTemplate/spec/template/spec` for a CronJob, and so on).

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::kcf::{KcfDocument, KeyPath, NodeValue, ResourceTree, Scalar, ScalarKind};
use crate::label::{EncodedLabel, LabelSet};
use crate::umi::Umi;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuleError {
    #[error("rule `{rule}` targets unknown misconfig id {id}")]
    UnknownId { rule: String, id: u32 },
    #[error("rule `{0}` targets the clean-file sentinel")]
    SentinelTarget(String),
    #[error("rule `{rule}` has an invalid path `{path}`")]
    InvalidPath { rule: String, path: String },
    #[error("rule id `{0}` is used twice")]
    DuplicateRuleId(String),
    #[error("malformed rule file at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("records describe different files: `{expected}` and `{found}`")]
    MixedSources { expected: String, found: String },
    #[error("an ensemble needs at least one record")]
    EmptyEnsemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cmp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl Cmp {
    fn holds(self, left: f64, right: f64) -> bool {
        match self {
            Cmp::Lt => left < right,
            Cmp::Le => left <= right,
            Cmp::Gt => left > right,
            Cmp::Ge => left >= right,
            Cmp::Eq => left == right,
            Cmp::Ne => left != right,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Predicate {
    /// Scalar at `path` equals `value` (bools, numbers, strings, null).
    Equals {
        path: String,
        value: Value,
    },
    Exists {
        path: String,
    },
    /// Fires for each expansion of `path` that is absent.
    Missing {
        path: String,
    },
    /// Case-insensitive substring of a string scalar, or case-insensitive
    /// equality with an item of a sequence. `value` may be a list (any-of).
    Contains {
        path: String,
        value: Value,
    },
    Compare {
        path: String,
        cmp: Cmp,
        value: f64,
    },
    /// Image reference whose tag (empty when untagged) is in `value`.
    /// Digest-pinned references never match.
    ImageTag {
        path: String,
        value: Vec<String>,
    },
    Any {
        of: Vec<Predicate>,
    },
    All {
        of: Vec<Predicate>,
    },
    /// Items of the sequence at `path` for which every `where` predicate
    /// (paths relative to the item) fires; every item when `where` is empty.
    Item {
        path: String,
        #[serde(rename = "where", default)]
        conditions: Vec<Predicate>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    #[serde(default)]
    pub id: String,
    pub umi_id: u32,
    #[serde(default)]
    pub kinds: Vec<String>,
    pub predicate: Predicate,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fix: Option<String>,
}

impl Rule {
    pub fn applies_to(&self, kind: Option<&str>) -> bool {
        self.kinds.is_empty() || kind.is_some_and(|k| self.kinds.iter().any(|x| x == k))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(mut rules: Vec<Rule>, umi: &Umi) -> Result<Self, RuleError> {
        let mut seen = BTreeSet::new();
        for (i, rule) in rules.iter_mut().enumerate() {
            if rule.id.is_empty() {
                rule.id = format!("rule-{}-{}", rule.umi_id, i);
            }
            if !seen.insert(rule.id.clone()) {
                return Err(RuleError::DuplicateRuleId(rule.id.clone()));
            }
            if !umi.contains(rule.umi_id) {
                return Err(RuleError::UnknownId {
                    rule: rule.id.clone(),
                    id: rule.umi_id,
                });
            }
            if umi.is_sentinel(rule.umi_id) {
                return Err(RuleError::SentinelTarget(rule.id.clone()));
            }
            check_paths(&rule.id, &rule.predicate, false)?;
        }
        Ok(RuleSet { rules })
    }

    /// Parses a JSON array of rules.
    pub fn from_json_str(text: &str, umi: &Umi) -> Result<Self, RuleError> {
        let rules: Vec<Rule> = serde_json::from_str(text).map_err(|e| RuleError::Format {
            line: e.line(),
            message: e.to_string(),
        })?;
        RuleSet::new(rules, umi)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Misconfig ids some rule can report.
    pub fn coverage(&self) -> BTreeSet<u32> {
        self.rules.iter().map(|r| r.umi_id).collect()
    }

    pub fn rules_for(&self, umi_id: u32) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(move |r| r.umi_id == umi_id)
    }

    pub fn subset(&self, mut keep: impl FnMut(&Rule) -> bool) -> RuleSet {
        RuleSet {
            rules: self.rules.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }
}

fn check_paths(rule: &str, p: &Predicate, relative: bool) -> Result<(), RuleError> {
    let check = |path: &str| {
        let bad = path.is_empty()
            || path.starts_with('/')
            || path.ends_with('/')
            || path.contains("//")
            || (path.contains("@pod") && (relative || !path.starts_with("@pod")));
        if bad {
            Err(RuleError::InvalidPath {
                rule: rule.to_string(),
                path: path.to_string(),
            })
        } else {
            Ok(())
        }
    };
    match p {
        Predicate::Equals { path, .. }
        | Predicate::Exists { path }
        | Predicate::Missing { path }
        | Predicate::Contains { path, .. }
        | Predicate::Compare { path, .. }
        | Predicate::ImageTag { path, .. } => check(path),
        Predicate::Any { of } | Predicate::All { of } => {
            of.iter().try_for_each(|q| check_paths(rule, q, relative))
        }
        Predicate::Item { path, conditions } => {
            check(path)?;
            conditions
                .iter()
                .try_for_each(|q| check_paths(rule, q, true))
        }
    }
}

/// Pod spec location for workload kinds.
pub fn pod_spec_prefix(kind: Option<&str>) -> Option<&'static str> {
    match kind? {
        "Pod" => Some("spec"),
        "Deployment"
        | "ReplicaSet"
        | "StatefulSet"
        | "DaemonSet"
        | "Job"
        | "ReplicationController" => Some("spec/template/spec"),
        "CronJob" => Some("spec/jobTemplate/spec/template/spec"),
        "PodTemplate" => Some("template/spec"),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Presence {
    /// The offending key exists at `path`.
    Present,
    /// `path` is missing; `line` is its deepest existing ancestor.
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hit {
    pub path: String,
    pub line: u32,
    pub presence: Presence,
}

struct Eval<'a> {
    tree: &'a ResourceTree,
    pod: Option<&'static str>,
}

impl Eval<'_> {
    fn expand(&self, pattern: &str, base: &str) -> Vec<String> {
        let pattern = match pattern.strip_prefix("@pod") {
            Some(rest) => match self.pod {
                Some(prefix) => format!("{prefix}{rest}"),
                None => return Vec::new(),
            },
            None => pattern.to_string(),
        };
        let mut current = alloc::vec![base.to_string()];
        for seg in pattern.split('/') {
            let mut next = Vec::new();
            for c in &current {
                if seg == "[*]" {
                    if let Some(NodeValue::Sequence { len }) = self.tree.lookup(c).map(|n| &n.value)
                    {
                        next.extend((0..*len).map(|i| KeyPath::child_index(c, i)));
                    }
                } else {
                    next.push(KeyPath::join(c, seg));
                }
            }
            current = next;
        }
        current
    }

    fn scalar(&self, path: &str) -> Option<(&Scalar, u32)> {
        let node = self.tree.lookup(path)?;
        node.value.as_scalar().map(|s| (s, node.line))
    }

    fn present(path: &str, line: u32) -> Hit {
        Hit {
            path: path.to_string(),
            line,
            presence: Presence::Present,
        }
    }

    fn ancestor_line(&self, path: &str) -> u32 {
        let mut cur = path;
        while let Some(parent) = KeyPath::parent(cur) {
            if parent.is_empty() {
                break;
            }
            if let Some(node) = self.tree.lookup(parent) {
                return node.line;
            }
            cur = parent;
        }
        self.tree.line_span().0
    }

    fn hits(&self, p: &Predicate, base: &str) -> Vec<Hit> {
        let mut out = Vec::new();
        match p {
            Predicate::Exists { path } => {
                for c in self.expand(path, base) {
                    if let Some(node) = self.tree.lookup(&c) {
                        out.push(Self::present(&c, node.line));
                    }
                }
            }
            Predicate::Missing { path } => {
                for c in self.expand(path, base) {
                    if self.tree.lookup(&c).is_none() {
                        out.push(Hit {
                            line: self.ancestor_line(&c),
                            path: c,
                            presence: Presence::Absent,
                        });
                    }
                }
            }
            Predicate::Equals { path, value } => {
                for c in self.expand(path, base) {
                    if let Some((s, line)) = self.scalar(&c) {
                        if scalar_equals(s, value) {
                            out.push(Self::present(&c, line));
                        }
                    }
                }
            }
            Predicate::Contains { path, value } => {
                let needles = string_list(value);
                for c in self.expand(path, base) {
                    match self.tree.lookup(&c).map(|n| (&n.value, n.line)) {
                        Some((NodeValue::Scalar(s), line)) => {
                            let hay = s.text.to_lowercase();
                            if needles.iter().any(|n| hay.contains(n.as_str())) {
                                out.push(Self::present(&c, line));
                            }
                        }
                        Some((NodeValue::Sequence { len }, _)) => {
                            for i in 0..*len {
                                let item = KeyPath::child_index(&c, i);
                                if let Some((s, line)) = self.scalar(&item) {
                                    let text = s.text.to_lowercase();
                                    if needles.contains(&text) {
                                        out.push(Self::present(&item, line));
                                    }
                                }
                            }
                        }
                        _ => {}
                    }
                }
            }
            Predicate::Compare { path, cmp, value } => {
                for c in self.expand(path, base) {
                    if let Some((s, line)) = self.scalar(&c) {
                        if s.as_f64().is_some_and(|v| cmp.holds(v, *value)) {
                            out.push(Self::present(&c, line));
                        }
                    }
                }
            }
            Predicate::ImageTag { path, value } => {
                for c in self.expand(path, base) {
                    if let Some((s, line)) = self.scalar(&c) {
                        if s.kind == ScalarKind::Str {
                            if let Some(tag) = image_tag(&s.text) {
                                if value.iter().any(|v| v.eq_ignore_ascii_case(tag)) {
                                    out.push(Self::present(&c, line));
                                }
                            }
                        }
                    }
                }
            }
            Predicate::Any { of } => {
                for q in of {
                    out.extend(self.hits(q, base));
                }
            }
            Predicate::All { of } => {
                for q in of {
                    let h = self.hits(q, base);
                    if h.is_empty() {
                        return Vec::new();
                    }
                    out.extend(h);
                }
            }
            Predicate::Item { path, conditions } => {
                for c in self.expand(path, base) {
                    let Some(NodeValue::Sequence { len }) = self.tree.lookup(&c).map(|n| &n.value)
                    else {
                        continue;
                    };
                    for i in 0..*len {
                        let item = KeyPath::child_index(&c, i);
                        if conditions.is_empty() {
                            if let Some(node) = self.tree.lookup(&item) {
                                out.push(Self::present(&item, node.line));
                            }
                            continue;
                        }
                        let mut item_hits = Vec::new();
                        let mut all = true;
                        for q in conditions {
                            let h = self.hits(q, &item);
                            if h.is_empty() {
                                all = false;
                                break;
                            }
                            item_hits.extend(h);
                        }
                        if all {
                            out.extend(item_hits);
                        }
                    }
                }
            }
        }
        out
    }
}

fn string_list(value: &Value) -> Vec<String> {
    match value {
        Value::Array(items) => items.iter().flat_map(string_list).collect(),
        Value::String(s) => alloc::vec![s.to_lowercase()],
        other => alloc::vec![other.to_string().to_lowercase()],
    }
}

fn scalar_equals(s: &Scalar, value: &Value) -> bool {
    match value {
        Value::Null => s.kind == ScalarKind::Null,
        Value::Bool(b) => s.as_bool() == Some(*b),
        Value::Number(n) => match (s.as_f64(), n.as_f64()) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        },
        Value::String(text) => s.kind != ScalarKind::Null && s.text == *text,
        Value::Array(items) => items.iter().any(|v| scalar_equals(s, v)),
        Value::Object(_) => false,
    }
}

/// Tag of an image reference: `Some("")` when untagged, `None` when pinned
/// by digest.
pub fn image_tag(image: &str) -> Option<&str> {
    if image.contains('@') {
        return None;
    }
    let name_start = image.rfind('/').map_or(0, |i| i + 1);
    match image[name_start..].rfind(':') {
        Some(i) => Some(&image[name_start + i + 1..]),
        None => Some(""),
    }
}

/// Evaluates one predicate against one tree.
pub fn predicate_hits(tree: &ResourceTree, predicate: &Predicate) -> Vec<Hit> {
    Eval {
        tree,
        pod: pod_spec_prefix(tree.kind()),
    }
    .hits(predicate, "")
}

/// Resource token for labels: sanitized `metadata.name`, else the lowercased
/// kind, else `resource`.
pub fn resource_token(tree: &ResourceTree) -> String {
    tree.name()
        .and_then(crate::label::sanitize_resource)
        .or_else(|| tree.kind().and_then(crate::label::sanitize_resource))
        .unwrap_or_else(|| "resource".to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    InternalRules,
    External(String),
    Ensemble,
    Llm,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::InternalRules => f.write_str("internal-rules"),
            Source::External(tool) => write!(f, "external:{tool}"),
            Source::Ensemble => f.write_str("ensemble"),
            Source::Llm => f.write_str("llm"),
        }
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "internal-rules" => Ok(Source::InternalRules),
            "ensemble" => Ok(Source::Ensemble),
            "llm" => Ok(Source::Llm),
            _ => match s.strip_prefix("external:") {
                Some(tool) if !tool.is_empty() => Ok(Source::External(tool.to_string())),
                _ => Err(format!("unknown detection source `{s}`")),
            },
        }
    }
}

impl Serialize for Source {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Evidence {
    pub label: EncodedLabel,
    pub rule: String,
    pub document: usize,
    pub path: String,
    pub line: u32,
    pub presence: Presence,
}

/// Labels one detector assigned to one KCF.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DetectionRecord {
    pub source: Source,
    pub kcf: String,
    pub labels: LabelSet,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub evidence: Vec<Evidence>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl DetectionRecord {
    pub fn new(source: Source, kcf: &str, labels: LabelSet) -> Self {
        DetectionRecord {
            source,
            kcf: kcf.to_string(),
            labels,
            evidence: Vec::new(),
            diagnostics: Vec::new(),
        }
    }

    /// Keeps only labels inside `scope` (sentinel when none remain).
    pub fn restricted_to(&self, scope: &BTreeSet<u32>) -> DetectionRecord {
        let labels = self.labels.restricted_to(scope);
        DetectionRecord {
            source: self.source.clone(),
            kcf: self.kcf.clone(),
            evidence: self
                .evidence
                .iter()
                .filter(|e| labels.contains(&e.label))
                .cloned()
                .collect(),
            diagnostics: self.diagnostics.clone(),
            labels,
        }
    }

    pub fn evidence_for(&self, label: &EncodedLabel) -> impl Iterator<Item = &Evidence> {
        let label = label.clone();
        self.evidence.iter().filter(move |e| e.label == label)
    }
}

/// Runs every applicable rule on every document of `doc`. A file where no
/// rule fires gets the clean-file sentinel.
pub fn evaluate_rules(doc: &KcfDocument, rules: &RuleSet, umi: &Umi) -> DetectionRecord {
    let mut labels = LabelSet::new(umi.sentinel_id());
    let mut evidence = Vec::new();
    for (di, tree) in doc.documents().iter().enumerate() {
        let token = resource_token(tree);
        let eval = Eval {
            tree,
            pod: pod_spec_prefix(tree.kind()),
        };
        for rule in rules.rules() {
            if !rule.applies_to(tree.kind()) {
                continue;
            }
            let hits = eval.hits(&rule.predicate, "");
            if hits.is_empty() {
                continue;
            }
            let label = EncodedLabel::with_resource(&token, rule.umi_id)
                .expect("resource tokens are sanitized");
            labels.insert(label.clone());
            for hit in hits {
                evidence.push(Evidence {
                    label: label.clone(),
                    rule: rule.id.clone(),
                    document: di,
                    path: hit.path,
                    line: hit.line,
                    presence: hit.presence,
                });
            }
        }
    }
    if labels.is_empty() {
        let token = doc
            .documents()
            .first()
            .map(resource_token)
            .unwrap_or_else(|| "resource".to_string());
        labels = LabelSet::clean(&token, umi.sentinel_id());
    }
    DetectionRecord {
        source: Source::InternalRules,
        kcf: doc.source_name().to_string(),
        labels,
        evidence,
        diagnostics: doc.diagnostics().iter().map(|d| d.to_string()).collect(),
    }
}

/// Label union of records for the same file. The sentinel survives only
/// when every input is clean.
pub fn ensemble(records: &[DetectionRecord]) -> Result<DetectionRecord, RuleError> {
    let first = records.first().ok_or(RuleError::EmptyEnsemble)?;
    let mut out = DetectionRecord::new(
        Source::Ensemble,
        &first.kcf,
        LabelSet::new(first.labels.sentinel_id()),
    );
    for r in records {
        if r.kcf != first.kcf {
            return Err(RuleError::MixedSources {
                expected: first.kcf.clone(),
                found: r.kcf.clone(),
            });
        }
        out.labels.union_with(&r.labels);
        out.evidence.extend(r.evidence.iter().cloned());
        out.diagnostics
            .extend(r.diagnostics.iter().map(|d| format!("{}: {d}", r.source)));
    }
    let kept = out.labels.clone();
    out.evidence.retain(|e| kept.contains(&e.label));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{reference_rules, reference_umi};
    use alloc::vec;
    use proptest::prelude::*;

    const PRIVILEGED_POD: &str = "apiVersion: v1
kind: Pod
metadata:
  name: pod-name
spec:
  containers:
    - name: some-container
      image: some-image
      command: [ some-command ]
  securityContext:
    privileged: true
";

    fn parse(text: &str) -> KcfDocument {
        KcfDocument::parse(text, "t.yaml").unwrap()
    }

    fn labels(record: &DetectionRecord) -> Vec<String> {
        record.labels.to_strings()
    }

    #[test]
    fn privileged_pod_fires_with_evidence_line() {
        let umi = reference_umi();
        let rules = reference_rules(&umi);
        let rec = evaluate_rules(&parse(PRIVILEGED_POD), &rules, &umi);
        assert!(labels(&rec).contains(&"pod-name+0".to_string()));
        let ev: Vec<_> = rec
            .evidence_for(&EncodedLabel::parse("pod-name+0").unwrap())
            .collect();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].line, 11);
        assert_eq!(ev[0].path, "spec/securityContext/privileged");
        assert_eq!(ev[0].presence, Presence::Present);
    }

    #[test]
    fn clean_file_gets_sentinel() {
        let umi = reference_umi();
        let rules = reference_rules(&umi);
        let rec = evaluate_rules(&parse("apiVersion: v1\nkind: ConfigMap\nmetadata:\n  name: settings\n  namespace: web\ndata:\n  a: b\n"), &rules, &umi);
        assert_eq!(labels(&rec), vec!["settings+169"]);
        assert!(rec.labels.is_clean());
    }

    #[test]
    fn item_rule_requires_every_condition() {
        let umi = reference_umi();
        let tree_text = "kind: Pod
metadata:
  name: p
spec:
  containers:
  - name: c
    env:
    - name: GITHUB_CLIENT_SECRET
      valueFrom:
        secretKeyRef: {name: s, key: k}
    - name: DB_PASSWORD
      value: hunter2
";
        let doc = parse(tree_text);
        let p: Predicate = serde_json::from_str(
            r#"{"op": "item", "path": "@pod/containers/[*]/env", "where": [
                {"op": "contains", "path": "name", "value": ["secret", "password"]},
                {"op": "exists", "path": "value"}]}"#,
        )
        .unwrap();
        let hits = predicate_hits(&doc.documents()[0], &p);
        let lines: Vec<u32> = hits.iter().map(|h| h.line).collect();
        assert_eq!(lines, vec![11, 12]);
        let _ = umi;
    }

    #[test]
    fn missing_reports_deepest_ancestor() {
        let doc = parse(
            "kind: Deployment
metadata:
  name: d
spec:
  template:
    spec:
      containers:
      - name: a
        resources:
          requests:
            memory: 64Mi
      - name: b
",
        );
        let p = Predicate::Missing {
            path: "@pod/containers/[*]/resources/requests/cpu".to_string(),
        };
        let hits = predicate_hits(&doc.documents()[0], &p);
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].line, 10);
        assert_eq!(hits[1].line, 12);
        assert!(hits.iter().all(|h| h.presence == Presence::Absent));
        let none = predicate_hits(
            &parse("kind: Service\nmetadata:\n  name: s\n").documents()[0],
            &p,
        );
        assert!(none.is_empty());
    }

    #[test]
    fn image_tags() {
        assert_eq!(image_tag("nginx"), Some(""));
        assert_eq!(image_tag("nginx:latest"), Some("latest"));
        assert_eq!(image_tag("registry:5000/team/app"), Some(""));
        assert_eq!(image_tag("registry:5000/team/app:1.2"), Some("1.2"));
        assert_eq!(image_tag("app@sha256:abcd"), None);
    }

    #[test]
    fn rule_file_validation() {
        let umi = reference_umi();
        let bad_id = r#"[{"umi_id": 4000, "predicate": {"op": "exists", "path": "spec"}, "rationale": "x"}]"#;
        assert!(matches!(
            RuleSet::from_json_str(bad_id, &umi),
            Err(RuleError::UnknownId { id: 4000, .. })
        ));
        let sentinel =
            r#"[{"umi_id": 169, "predicate": {"op": "exists", "path": "spec"}, "rationale": "x"}]"#;
        assert!(matches!(
            RuleSet::from_json_str(sentinel, &umi),
            Err(RuleError::SentinelTarget(_))
        ));
        let bad_path = r#"[{"umi_id": 1, "predicate": {"op": "exists", "path": "spec/@pod"}, "rationale": "x"}]"#;
        assert!(matches!(
            RuleSet::from_json_str(bad_path, &umi),
            Err(RuleError::InvalidPath { .. })
        ));
        assert!(matches!(
            RuleSet::from_json_str("[", &umi),
            Err(RuleError::Format { .. })
        ));
        let rules = reference_rules(&umi);
        assert!(rules.len() >= 25);
    }

    #[test]
    fn ensemble_is_a_union() {
        let umi = reference_umi();
        let mk = |src: Source, text: &str| {
            let (set, _) = crate::label::parse_labels(text, &umi);
            DetectionRecord::new(src, "f.yaml", set)
        };
        let a = mk(Source::External("checkov".into()), "x+1");
        let b = mk(Source::External("terrascan".into()), "x+2");
        let u = ensemble(&[a.clone(), b]).unwrap();
        assert_eq!(u.labels.to_strings(), vec!["x+1", "x+2"]);
        assert_eq!(u.source, Source::Ensemble);

        let c1 = mk(Source::InternalRules, "x+169");
        let u = ensemble(&[c1.clone(), c1.clone()]).unwrap();
        assert_eq!(u.labels.to_strings(), vec!["x+169"]);
        let u = ensemble(&[c1, a.clone()]).unwrap();
        assert_eq!(u.labels.to_strings(), vec!["x+1"]);

        let mut other = a.clone();
        other.kcf = "g.yaml".into();
        assert!(matches!(
            ensemble(&[a, other]),
            Err(RuleError::MixedSources { .. })
        ));
        assert_eq!(ensemble(&[]), Err(RuleError::EmptyEnsemble));
    }

    #[test]
    fn source_strings_round_trip() {
        for s in ["internal-rules", "external:kube-linter", "ensemble", "llm"] {
            assert_eq!(s.parse::<Source>().unwrap().to_string(), s);
        }
        assert!("external:".parse::<Source>().is_err());
    }

    const SAMPLE_DEPLOYMENT: &str = "apiVersion: apps/v1
kind: Deployment
metadata:
  name: web
  namespace: default
spec:
  replicas: 1
  template:
    spec:
      hostNetwork: true
      containers:
      - name: app
        image: nginx:latest
        ports:
        - containerPort: 22
          hostPort: 2222
        securityContext:
          privileged: true
          allowPrivilegeEscalation: true
          capabilities:
            add: [SYS_ADMIN, SYS_PTRACE]
        env:
        - name: API_TOKEN
          value: abc
";

    proptest! {
        #[test]
        fn adding_rules_never_removes_labels(mask in prop::collection::vec(any::<bool>(), 64)) {
            let umi = reference_umi();
            let all = reference_rules(&umi);
            let mut i = 0;
            let subset = all.subset(|_| { i += 1; mask[(i - 1) % mask.len()] });
            let doc = parse(SAMPLE_DEPLOYMENT);
            let small = evaluate_rules(&doc, &subset, &umi);
            let big = evaluate_rules(&doc, &all, &umi);
            prop_assert!(small.labels.finding_ids().is_subset(&big.labels.finding_ids()));
            for e in &big.evidence {
                let tree = &doc.documents()[e.document];
                match e.presence {
                    Presence::Present => prop_assert!(tree.lookup(&e.path).is_some()),
                    Presence::Absent => prop_assert!(tree.lookup(&e.path).is_none()),
                }
            }
        }

        #[test]
        fn restriction_is_idempotent(scope in prop::collection::btree_set(0u32..170, 0..20)) {
            let umi = reference_umi();
            let rec = evaluate_rules(&parse(SAMPLE_DEPLOYMENT), &reference_rules(&umi), &umi);
            let once = rec.restricted_to(&scope);
            prop_assert_eq!(once.restricted_to(&scope), once.clone());
            prop_assert!(once.labels.finding_ids().is_subset(&scope));
        }
    }
}
