//! Completion backends: the request type, the backend trait, and the offline
//! backends (rule-engine oracle, replay store, conditioned oracle).
//!
//! The HTTP backend lives in the `kcfguard` crate; everything here is pure.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::kcf::KcfDocument;
use crate::label::{EncodedLabel, LabelSet};
use crate::rules::{evaluate_rules, Evidence, Presence, RuleSet};
use crate::seed::sha256_hex;
use crate::umi::Umi;

pub const DEFAULT_MAX_OUTPUT_UNITS: u32 = 512;

/// Line that introduces the queried misconfig id in a resolution prompt.
pub const MISCONFIG_ID_MARKER: &str = "Misconfig id:";
pub const MISCONFIG_MARKER: &str = "Misconfig:";
pub const RESOURCE_MARKER: &str = "Resource:";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("completion prompt is empty")]
    EmptyPrompt,
    #[error("temperature must be a non-negative number")]
    InvalidTemperature,
    #[error("request timed out after {millis} ms")]
    Timeout { millis: u64 },
    #[error("backend answered with HTTP status {status}")]
    HttpError { status: u16 },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no replay entry for request {0}")]
    ReplayMiss(String),
    #[error("no internal rule provides evidence for misconfig {0}")]
    NoEvidence(u32),
    #[error("prompt carries no configuration file")]
    NoKcfInPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_prompt: Option<String>,
    pub prompt: String,
    pub max_output_units: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

/// Body of `POST <endpoint>/complete`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest<'a> {
    pub system: Option<&'a str>,
    pub prompt: &'a str,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        CompletionRequest {
            system_prompt: None,
            prompt: prompt.into(),
            max_output_units: DEFAULT_MAX_OUTPUT_UNITS,
            temperature: 0.0,
            seed: None,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system_prompt = Some(system.into());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidTemperature);
        }
        Ok(())
    }

    pub fn wire(&self) -> WireRequest<'_> {
        WireRequest {
            system: self.system_prompt.as_deref(),
            prompt: &self.prompt,
            max_tokens: self.max_output_units,
            temperature: self.temperature,
            seed: self.seed,
        }
    }

    pub fn wire_json(&self) -> String {
        serde_json::to_string(&self.wire()).expect("request serializes")
    }

    /// Stable hash used to key replay stores.
    pub fn replay_key(&self) -> String {
        sha256_hex(self.wire_json().as_bytes())
    }
}

/// Parses the `{"text": ...}` body of a completion response.
pub fn parse_wire_response(body: &str) -> Result<String, GatewayError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    value
        .get("text")
        .and_then(serde_json::Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| GatewayError::MalformedResponse("missing string field `text`".to_string()))
}

pub trait CompletionBackend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;

    /// Whether the backend can touch the network.
    fn is_remote(&self) -> bool {
        false
    }
}

impl<T: CompletionBackend + ?Sized> CompletionBackend for Box<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(request)
    }
    fn is_remote(&self) -> bool {
        (**self).is_remote()
    }
}

impl<T: CompletionBackend + ?Sized> CompletionBackend for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(request)
    }
    fn is_remote(&self) -> bool {
        (**self).is_remote()
    }
}

impl<T: CompletionBackend + ?Sized> CompletionBackend for &T {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(request)
    }
    fn is_remote(&self) -> bool {
        (**self).is_remote()
    }
}

/// Wraps a KCF in a yaml fence. The body is kept byte-for-byte so line
/// numbers inside the fence match the file.
pub fn fence(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 16);
    out.push_str("```yaml\n");
    out.push_str(text);
    if !text.ends_with('\n') {
        out.push('\n');
    }
    out.push_str("```\n");
    out
}

/// Body of the last yaml fence in `prompt` and the text that follows it.
pub fn last_fenced(prompt: &str) -> Option<(&str, &str)> {
    let open = prompt.rfind("```yaml\n")?;
    let body_start = open + "```yaml\n".len();
    let rest = &prompt[body_start..];
    let close = if rest.starts_with("```") {
        0
    } else {
        rest.find("\n```").map(|i| i + 1)?
    };
    let body = &rest[..close];
    let after = &rest[close + 3..];
    Some((body, after))
}

/// What a resolution prompt asks about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolutionQuery {
    pub resource: Option<String>,
    pub misconfig_id: u32,
}

/// Reads the `Resource:` / `Misconfig id:` lines after the last fence.
pub fn parse_resolution_query(after_fence: &str) -> Option<ResolutionQuery> {
    let mut resource = None;
    let mut id = None;
    for line in after_fence.lines() {
        let line = line.trim();
        if let Some(v) = line.strip_prefix(RESOURCE_MARKER) {
            resource = Some(v.trim().to_string());
        } else if let Some(v) = line.strip_prefix(MISCONFIG_ID_MARKER) {
            id = v.trim().parse().ok();
        }
    }
    id.map(|misconfig_id| ResolutionQuery {
        resource,
        misconfig_id,
    })
}

/// The oracle backend: runs the rule engine on the KCF embedded in the
/// prompt. Detection prompts get framed labels; resolution prompts get the
/// five-field JSON object built from rule evidence.
#[derive(Debug, Clone)]
pub struct MockRulesBackend {
    umi: Arc<Umi>,
    rules: Arc<RuleSet>,
}

impl MockRulesBackend {
    pub fn new(umi: Arc<Umi>, rules: Arc<RuleSet>) -> Self {
        MockRulesBackend { umi, rules }
    }

    pub fn umi(&self) -> &Umi {
        &self.umi
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    fn embedded_kcf<'p>(&self, prompt: &'p str) -> (&'p str, &'p str) {
        if let Some(found) = last_fenced(prompt) {
            return found;
        }
        match prompt.rfind("Q:") {
            Some(i) => (prompt[i + 2..].trim_start_matches([' ', '\n']), ""),
            None => (prompt, ""),
        }
    }

    pub fn detect_labels(&self, kcf: &str) -> Option<LabelSet> {
        let doc = KcfDocument::parse(kcf, "prompt").ok()?;
        Some(evaluate_rules(&doc, &self.rules, &self.umi).labels)
    }

    pub fn resolution(&self, kcf: &str, query: &ResolutionQuery) -> Result<String, GatewayError> {
        let id = query.misconfig_id;
        let no_evidence = GatewayError::NoEvidence(id);
        let rule_ids: BTreeSet<&str> = self.rules.rules_for(id).map(|r| r.id.as_str()).collect();
        if rule_ids.is_empty() {
            return Err(no_evidence);
        }
        let doc = KcfDocument::parse(kcf, "prompt").map_err(|_| no_evidence.clone())?;
        let record = evaluate_rules(&doc, &self.rules, &self.umi);
        let matching = |e: &&Evidence| {
            e.label.misconfig_id() == id
                && query
                    .resource
                    .as_deref()
                    .is_none_or(|r| e.label.resource() == r)
        };
        let mut evidence: Vec<&Evidence> = record.evidence.iter().filter(matching).collect();
        if evidence.is_empty() {
            evidence = record
                .evidence
                .iter()
                .filter(|e| e.label.misconfig_id() == id)
                .collect();
        }
        let chosen = evidence
            .iter()
            .filter(|e| e.presence == Presence::Present)
            .min_by_key(|e| e.line)
            .or_else(|| evidence.first())
            .ok_or(no_evidence)?;
        let rule = self
            .rules
            .rules()
            .iter()
            .find(|r| r.id == chosen.rule)
            .expect("evidence names a known rule");
        let fix = rule
            .fix
            .clone()
            .unwrap_or_else(|| "Remove or correct the offending setting.".to_string());
        let answer = match chosen.presence {
            Presence::Present => {
                let text = doc.line(chosen.line).unwrap_or("").trim().to_string();
                serde_json::json!({
                    "line_number": chosen.line,
                    "line_text": text,
                    "explanation": rule.rationale,
                    "fix_suggestion": format!("Change `{text}`: {fix}"),
                    "error_number": id,
                })
            }
            Presence::Absent => serde_json::json!({
                "line_number": null,
                "line_text": "",
                "explanation": rule.rationale,
                "fix_suggestion": format!("Add the missing `{}` setting: {fix}", chosen.path),
                "error_number": id,
            }),
        };
        Ok(serde_json::to_string(&answer).expect("json value serializes"))
    }
}

impl CompletionBackend for MockRulesBackend {
    fn name(&self) -> &str {
        "mock-rules"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let (kcf, after) = self.embedded_kcf(&request.prompt);
        if let Some(query) = parse_resolution_query(after) {
            return self.resolution(kcf, &query);
        }
        Ok(self
            .detect_labels(kcf)
            .map(|labels| labels.render_framed())
            .unwrap_or_default())
    }
}

/// Canned completions keyed by [`CompletionRequest::replay_key`].
#[derive(Debug, Clone, Default)]
pub struct MockReplayBackend {
    entries: BTreeMap<String, String>,
}

impl MockReplayBackend {
    pub fn new(entries: BTreeMap<String, String>) -> Self {
        MockReplayBackend { entries }
    }

    pub fn record(&mut self, request: &CompletionRequest, completion: impl Into<String>) {
        self.entries.insert(request.replay_key(), completion.into());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl CompletionBackend for MockReplayBackend {
    fn name(&self) -> &str {
        "mock-replay"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let key = request.replay_key();
        self.entries
            .get(&key)
            .cloned()
            .ok_or(GatewayError::ReplayMiss(key))
    }
}

/// Oracle that cannot report `withheld` ids unless they are in `learned`.
/// Stands in for a model fine-tuned on an adaptation set.
#[derive(Debug, Clone)]
pub struct ConditionedMockBackend {
    inner: MockRulesBackend,
    suppressed: BTreeSet<u32>,
}

impl ConditionedMockBackend {
    pub fn new(inner: MockRulesBackend, withheld: &BTreeSet<u32>, learned: &BTreeSet<u32>) -> Self {
        ConditionedMockBackend {
            inner,
            suppressed: withheld.difference(learned).copied().collect(),
        }
    }

    pub fn suppressed(&self) -> &BTreeSet<u32> {
        &self.suppressed
    }
}

impl CompletionBackend for ConditionedMockBackend {
    fn name(&self) -> &str {
        "mock-conditioned"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let (kcf, after) = self.inner.embedded_kcf(&request.prompt);
        if let Some(query) = parse_resolution_query(after) {
            if self.suppressed.contains(&query.misconfig_id) {
                return Err(GatewayError::NoEvidence(query.misconfig_id));
            }
            return self.inner.resolution(kcf, &query);
        }
        let Some(labels) = self.inner.detect_labels(kcf) else {
            return Ok(String::new());
        };
        let mut kept = LabelSet::new(labels.sentinel_id());
        for label in labels.iter() {
            if !self.suppressed.contains(&label.misconfig_id()) {
                kept.insert(label.clone());
            }
        }
        if kept.is_empty() {
            let resource = labels
                .iter()
                .next()
                .map_or("resource", EncodedLabel::resource);
            kept = LabelSet::clean(resource, labels.sentinel_id());
        }
        Ok(kept.render_framed())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{reference_rules, reference_umi};
    use crate::label::parse_labels;

    const FIG1: &str = "apiVersion: v1
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

    fn oracle() -> MockRulesBackend {
        let umi = reference_umi();
        let rules = reference_rules(&umi);
        MockRulesBackend::new(Arc::new(umi), Arc::new(rules))
    }

    #[test]
    fn oracle_frames_the_privileged_label() {
        let prompt = format!("Find the misconfigs.\n\nQ:\n{}A:", fence(FIG1));
        let out = oracle().complete(&CompletionRequest::new(prompt)).unwrap();
        assert!(out.contains("*pod-name+0$"), "{out}");
    }

    #[test]
    fn oracle_reads_bare_question_without_fence() {
        let out = oracle()
            .complete(&CompletionRequest::new(format!("Q: {FIG1}")))
            .unwrap();
        assert!(out.contains("*pod-name+0$"));
    }

    #[test]
    fn oracle_is_deterministic() {
        let req = CompletionRequest::new(fence(FIG1));
        let o = oracle();
        assert_eq!(o.complete(&req).unwrap(), o.complete(&req).unwrap());
    }

    #[test]
    fn fenced_body_is_exact() {
        let p = format!("x\n{}tail", fence("a: 1\nb: 2"));
        assert_eq!(last_fenced(&p), Some(("a: 1\nb: 2\n", "\ntail")));
        assert_eq!(last_fenced("```yaml\n```\n"), Some(("", "\n")));
        assert_eq!(last_fenced("```yaml\nunclosed"), None);
    }

    #[test]
    fn resolution_of_present_and_missing_lines() {
        let o = oracle();
        let prompt = format!(
            "{}{RESOURCE_MARKER} pod-name\n{MISCONFIG_ID_MARKER} 0\n",
            fence(FIG1)
        );
        let out = o.complete(&CompletionRequest::new(prompt)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["line_number"], 11);
        assert_eq!(v["line_text"], "privileged: true");
        assert_eq!(v["error_number"], 0);

        let prompt = format!("{}{MISCONFIG_ID_MARKER} 7\n", fence(FIG1));
        let v: serde_json::Value =
            serde_json::from_str(&o.complete(&CompletionRequest::new(prompt)).unwrap()).unwrap();
        assert!(v["line_number"].is_null());
        assert_eq!(v["line_text"], "");
        assert!(v["fix_suggestion"]
            .as_str()
            .unwrap()
            .contains("requests/cpu"));

        let prompt = format!("{}{MISCONFIG_ID_MARKER} 168\n", fence(FIG1));
        assert_eq!(
            o.complete(&CompletionRequest::new(prompt)),
            Err(GatewayError::NoEvidence(168))
        );
    }

    #[test]
    fn replay_store() {
        let req = CompletionRequest::new("hello").with_seed(3);
        let mut store = MockReplayBackend::default();
        assert!(matches!(
            store.complete(&req),
            Err(GatewayError::ReplayMiss(_))
        ));
        store.record(&req, "world");
        assert_eq!(store.complete(&req).unwrap(), "world");
        assert_eq!(req.replay_key().len(), 64);
        assert_ne!(
            req.replay_key(),
            CompletionRequest::new("hello").replay_key()
        );
    }

    #[test]
    fn request_validation() {
        assert_eq!(
            CompletionRequest::new("  ").validate(),
            Err(GatewayError::EmptyPrompt)
        );
        let mut r = CompletionRequest::new("x");
        r.temperature = -1.0;
        assert_eq!(r.validate(), Err(GatewayError::InvalidTemperature));
        r.temperature = f64::NAN;
        assert_eq!(r.validate(), Err(GatewayError::InvalidTemperature));
    }

    #[test]
    fn wire_body_shape() {
        let r = CompletionRequest::new("p").with_system("s").with_seed(9);
        assert_eq!(
            r.wire_json(),
            r#"{"system":"s","prompt":"p","max_tokens":512,"temperature":0.0,"seed":9}"#
        );
        assert_eq!(parse_wire_response(r#"{"text":"ok"}"#).unwrap(), "ok");
        assert!(matches!(
            parse_wire_response("{}"),
            Err(GatewayError::MalformedResponse(_))
        ));
        assert!(matches!(
            parse_wire_response("<html>"),
            Err(GatewayError::MalformedResponse(_))
        ));
    }

    #[test]
    fn conditioning_suppresses_unlearned_ids() {
        let umi = reference_umi();
        let withheld: BTreeSet<u32> = [0].into_iter().collect();
        let req = CompletionRequest::new(fence(FIG1));
        let blind = ConditionedMockBackend::new(oracle(), &withheld, &BTreeSet::new());
        let (set, _) = parse_labels(&blind.complete(&req).unwrap(), &umi);
        assert!(!set.finding_ids().contains(&0));
        assert!(set.finding_ids().contains(&7));
        let taught = ConditionedMockBackend::new(oracle(), &withheld, &withheld);
        let (set, _) = parse_labels(&taught.complete(&req).unwrap(), &umi);
        assert!(set.finding_ids().contains(&0));
    }
}
