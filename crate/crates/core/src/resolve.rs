//! Detection through a completion backend, and per-misconfig localization,
//! explanation and remediation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::gateway::{
    fence, CompletionBackend, CompletionRequest, GatewayError, MISCONFIG_ID_MARKER,
    MISCONFIG_MARKER, RESOURCE_MARKER,
};
use crate::json::extract_object;
use crate::kcf::KcfDocument;
use crate::label::{decode, parse_labels, DecodedLabel, EncodedLabel, LabelSet};
use crate::rules::{DetectionRecord, Source};
use crate::umi::Umi;

pub const DETECTION_INSTRUCTION: &str = "Each question (Q) contains a Kubernetes manifest file. \
Each answer (A) lists the misconfigs found in that manifest as encoded labels of the form \
*resource+id$, separated by spaces. Answer the last question in the same format.";

pub const RESOLVE_SYSTEM_PROMPT: &str = "You review Kubernetes manifest files. You receive one \
manifest and one misconfig that was detected in it. Return the exact line number of the \
misconfig, the text of that line, an explanation of why it is a misconfig, a suggestion on how \
to fix it, and the error number of the misconfig. If the lines needed to fix the misconfig are \
missing from the manifest, return null as the line number and an empty line text. Reply with a \
single JSON object with the keys line_number, line_text, explanation, fix_suggestion and \
error_number.";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResolveError {
    #[error("few-shot prompts need at least one training example")]
    EmptyTrainset,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One training pair of a few-shot detection prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotPair {
    pub kcf: String,
    pub labels: LabelSet,
}

/// General instruction, one Q/A block per pair, then a final Q without an
/// answer.
pub fn build_fewshot_detection_prompt(
    trainset: &[FewShotPair],
    test_kcf: &str,
) -> Result<String, ResolveError> {
    if trainset.is_empty() {
        return Err(ResolveError::EmptyTrainset);
    }
    let mut out = String::new();
    out.push_str(DETECTION_INSTRUCTION);
    out.push_str("\n\n");
    for pair in trainset {
        let _ = write!(
            out,
            "Q:\n{}A: {}\n\n",
            fence(&pair.kcf),
            pair.labels.render_framed()
        );
    }
    let _ = write!(out, "Q:\n{}", fence(test_kcf));
    Ok(out)
}

/// Prompt for a backend already specialized on detection: just the file.
pub fn detection_prompt(kcf: &str) -> String {
    format!("Q:\n{}", fence(kcf))
}

fn detection_record(doc: &KcfDocument, completion: &str, umi: &Umi) -> DetectionRecord {
    let (labels, issues) = parse_labels(completion, umi);
    let mut record = DetectionRecord::new(Source::Llm, doc.source_name(), labels);
    record.diagnostics = issues.iter().map(ToString::to_string).collect();
    record
}

/// Runs the backend on `doc` and parses its labels.
pub fn detect(
    doc: &KcfDocument,
    backend: &dyn CompletionBackend,
    umi: &Umi,
    seed: Option<u64>,
) -> Result<DetectionRecord, GatewayError> {
    let mut request = CompletionRequest::new(detection_prompt(&doc.text()));
    request.seed = seed;
    let completion = backend.complete(&request)?;
    Ok(detection_record(doc, &completion, umi))
}

/// Few-shot variant of [`detect`].
pub fn detect_fewshot(
    doc: &KcfDocument,
    trainset: &[FewShotPair],
    backend: &dyn CompletionBackend,
    umi: &Umi,
    seed: Option<u64>,
) -> Result<DetectionRecord, ResolveError> {
    let mut request =
        CompletionRequest::new(build_fewshot_detection_prompt(trainset, &doc.text())?);
    request.seed = seed;
    let completion = backend.complete(&request)?;
    Ok(detection_record(doc, &completion, umi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LineNumber {
    At(u32),
    /// The relevant lines are missing from the file.
    Absent,
}

impl Serialize for LineNumber {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            LineNumber::At(n) => s.serialize_u32(*n),
            LineNumber::Absent => s.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for LineNumber {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match Option::<u32>::deserialize(d)? {
            Some(n) if n > 0 => LineNumber::At(n),
            _ => LineNumber::Absent,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Localization {
    Verified,
    Mismatch,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionReport {
    pub kcf: String,
    pub misconfig: DecodedLabel,
    pub line_number: LineNumber,
    pub line_text: String,
    pub explanation: String,
    pub fix_suggestion: String,
    pub error_number: u32,
    pub localization_verified: Localization,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Checks the claimed line against the file, ignoring whitespace runs.
pub fn verify_localization(
    doc: &KcfDocument,
    line_number: LineNumber,
    line_text: &str,
) -> Localization {
    match line_number {
        LineNumber::Absent => Localization::NotApplicable,
        LineNumber::At(n) => match doc.line(n) {
            Some(actual) if normalize(actual) == normalize(line_text) => Localization::Verified,
            _ => Localization::Mismatch,
        },
    }
}

/// Few-shot example shipped with the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolveExample {
    pub kcf: String,
    pub resource: String,
    pub misconfig_id: u32,
    pub answer: Value,
}

pub fn default_resolve_examples() -> Vec<ResolveExample> {
    serde_json::from_str(crate::data::RESOLVE_FEWSHOT_JSON).expect("bundled examples are valid")
}

fn push_query(out: &mut String, kcf: &str, resource: &str, id: u32, description: &str) {
    out.push_str(&fence(kcf));
    let _ = writeln!(out, "{RESOURCE_MARKER} {resource}");
    let _ = writeln!(out, "{MISCONFIG_ID_MARKER} {id}");
    let _ = writeln!(out, "{MISCONFIG_MARKER} {description}");
}

/// Examples first, the queried file and its decoded misconfig last.
pub fn build_resolve_prompt(
    kcf: &str,
    misconfig: &DecodedLabel,
    examples: &[ResolveExample],
    umi: &Umi,
) -> String {
    let mut out = String::new();
    for (i, ex) in examples.iter().enumerate() {
        let _ = writeln!(out, "Example {}:", i + 1);
        let description = umi.description(ex.misconfig_id).unwrap_or("");
        push_query(
            &mut out,
            &ex.kcf,
            &ex.resource,
            ex.misconfig_id,
            description,
        );
        let _ = writeln!(out, "Answer: {}\n", ex.answer);
    }
    out.push_str("Manifest to review:\n");
    push_query(
        &mut out,
        kcf,
        &misconfig.resource,
        misconfig.misconfig_id,
        &misconfig.description,
    );
    out.push_str("Answer:");
    out
}

pub fn resolve_request(
    kcf: &str,
    misconfig: &DecodedLabel,
    examples: &[ResolveExample],
    umi: &Umi,
    seed: Option<u64>,
) -> CompletionRequest {
    let mut request = CompletionRequest::new(build_resolve_prompt(kcf, misconfig, examples, umi))
        .with_system(RESOLVE_SYSTEM_PROMPT);
    request.seed = seed;
    request
}

fn failed_report(
    doc: &KcfDocument,
    misconfig: DecodedLabel,
    diagnostic: String,
) -> ResolutionReport {
    ResolutionReport {
        kcf: doc.source_name().to_string(),
        error_number: misconfig.misconfig_id,
        misconfig,
        line_number: LineNumber::Absent,
        line_text: String::new(),
        explanation: String::new(),
        fix_suggestion: String::new(),
        localization_verified: Localization::Mismatch,
        diagnostics: alloc::vec![diagnostic],
    }
}

fn text_field(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    diagnostics: &mut Vec<String>,
) -> String {
    match obj.get(key) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => {
            diagnostics.push(format!("field `{key}` missing"));
            String::new()
        }
        Some(other) => other.to_string(),
    }
}

/// Turns one completion into a report. Never fails: problems land in
/// `diagnostics`, and an unreadable completion yields empty fields with
/// mismatch status.
pub fn parse_resolution(
    doc: &KcfDocument,
    misconfig: DecodedLabel,
    completion: &str,
) -> ResolutionReport {
    let Some(obj) = extract_object(completion) else {
        return failed_report(
            doc,
            misconfig,
            "completion holds no JSON object".to_string(),
        );
    };
    let mut diagnostics = Vec::new();
    let line_number = match obj.get("line_number") {
        None => {
            diagnostics.push("field `line_number` missing".to_string());
            LineNumber::Absent
        }
        Some(Value::Null) => LineNumber::Absent,
        Some(Value::Number(n)) => match n.as_u64() {
            Some(v) if v > 0 && v <= u64::from(u32::MAX) => LineNumber::At(v as u32),
            _ => {
                diagnostics.push(format!("line_number `{n}` is not a positive integer"));
                LineNumber::Absent
            }
        },
        Some(Value::String(s)) => match s.trim().parse::<u32>() {
            Ok(v) if v > 0 => LineNumber::At(v),
            _ if s.trim().is_empty() => LineNumber::Absent,
            _ => {
                diagnostics.push(format!("line_number `{s}` is not a positive integer"));
                LineNumber::Absent
            }
        },
        Some(other) => {
            diagnostics.push(format!("line_number `{other}` is not a positive integer"));
            LineNumber::Absent
        }
    };
    let mut line_text = match obj.get("line_text") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) => String::new(),
        None => {
            if line_number != LineNumber::Absent {
                diagnostics.push("field `line_text` missing".to_string());
            }
            String::new()
        }
        Some(other) => other.to_string(),
    };
    if line_number == LineNumber::Absent && !line_text.is_empty() {
        diagnostics.push("line_text dropped because no line number was given".to_string());
        line_text.clear();
    }
    let explanation = text_field(&obj, "explanation", &mut diagnostics);
    let fix_suggestion = text_field(&obj, "fix_suggestion", &mut diagnostics);
    let claimed = obj.get("error_number").and_then(|v| match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    });
    match claimed {
        Some(c) if c == u64::from(misconfig.misconfig_id) => {}
        Some(c) => diagnostics.push(format!(
            "error_number {c} differs from the queried misconfig {}",
            misconfig.misconfig_id
        )),
        None => diagnostics.push("field `error_number` missing".to_string()),
    }
    let localization_verified = verify_localization(doc, line_number, &line_text);
    ResolutionReport {
        kcf: doc.source_name().to_string(),
        error_number: misconfig.misconfig_id,
        misconfig,
        line_number,
        line_text,
        explanation,
        fix_suggestion,
        localization_verified,
        diagnostics,
    }
}

/// Resolves a single label.
pub fn resolve_label(
    doc: &KcfDocument,
    label: &EncodedLabel,
    umi: &Umi,
    backend: &dyn CompletionBackend,
    examples: &[ResolveExample],
    seed: Option<u64>,
) -> ResolutionReport {
    let misconfig = match decode(label, umi) {
        Ok(d) => d,
        Err(e) => {
            let d = DecodedLabel {
                resource: label.resource().to_string(),
                misconfig_id: label.misconfig_id(),
                description: String::new(),
            };
            return failed_report(doc, d, e.to_string());
        }
    };
    let request = resolve_request(&doc.text(), &misconfig, examples, umi, seed);
    match backend.complete(&request) {
        Ok(completion) => parse_resolution(doc, misconfig, &completion),
        Err(e) => failed_report(doc, misconfig, e.to_string()),
    }
}

/// One report per non-sentinel label, in label order.
pub fn resolve(
    doc: &KcfDocument,
    detection: &DetectionRecord,
    umi: &Umi,
    backend: &dyn CompletionBackend,
    examples: &[ResolveExample],
    seed: Option<u64>,
) -> Vec<ResolutionReport> {
    detection
        .labels
        .iter()
        .filter(|l| !umi.is_sentinel(l.misconfig_id()))
        .map(|l| resolve_label(doc, l, umi, backend, examples, seed))
        .collect()
}
