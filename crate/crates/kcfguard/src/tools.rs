//! External scanner adapters: checkov, kube-linter and terrascan.

use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

use kcfguard_core::label::{sanitize_resource, EncodedLabel};
use kcfguard_core::rules::resource_token;
use kcfguard_core::{DetectionRecord, KcfDocument, LabelSet, Source, Umi};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ToolError {
    #[error("{0} not found on PATH")]
    ToolNotFound(String),
    #[error("{tool} exited with status {status:?}: {stderr}")]
    ToolCrashed {
        tool: String,
        status: Option<i32>,
        stderr: String,
    },
    #[error("{tool} report could not be parsed: {message}")]
    UnparseableReport { tool: String, message: String },
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tool {
    Checkov,
    KubeLinter,
    Terrascan,
}

pub const ALL_TOOLS: [Tool; 3] = [Tool::Checkov, Tool::KubeLinter, Tool::Terrascan];

impl Tool {
    pub fn parse(name: &str) -> Result<Tool, ToolError> {
        match name {
            "checkov" => Ok(Tool::Checkov),
            "kube-linter" => Ok(Tool::KubeLinter),
            "terrascan" => Ok(Tool::Terrascan),
            other => Err(ToolError::UnknownTool(other.to_string())),
        }
    }

    /// Name used in UMI aliases and on PATH.
    pub fn name(self) -> &'static str {
        match self {
            Tool::Checkov => "checkov",
            Tool::KubeLinter => "kube-linter",
            Tool::Terrascan => "terrascan",
        }
    }

    pub fn args(self, file: &Path) -> Vec<String> {
        let f = file.to_string_lossy().into_owned();
        let v: Vec<&str> = match self {
            Tool::Checkov => vec!["-f", &f, "-o", "json", "--framework", "kubernetes"],
            Tool::KubeLinter => vec!["lint", &f, "--format", "json"],
            Tool::Terrascan => vec!["scan", "-i", "k8s", "-f", &f, "-o", "json"],
        };
        v.into_iter().map(String::from).collect()
    }

    /// Exit codes that still mean "report written". Findings are not a crash.
    fn accepts(self, code: Option<i32>) -> bool {
        match self {
            Tool::Checkov | Tool::KubeLinter => matches!(code, Some(0 | 1)),
            Tool::Terrascan => matches!(code, Some(0 | 3)),
        }
    }
}

/// One raw finding: tool rule id plus the resource name it was reported on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub rule_id: String,
    pub resource: Option<String>,
}

fn unparseable(tool: Tool, message: impl ToString) -> ToolError {
    ToolError::UnparseableReport {
        tool: tool.name().to_string(),
        message: message.to_string(),
    }
}

fn as_str(v: &Value) -> Option<String> {
    v.as_str().map(str::to_string)
}

/// Checkov prints one object, or an array of them when several frameworks ran.
fn checkov_findings(report: &Value) -> Option<Vec<Finding>> {
    let blocks: Vec<&Value> = match report {
        Value::Array(items) => items.iter().collect(),
        other => vec![other],
    };
    let mut out = Vec::new();
    for b in blocks {
        if b.get("passed").is_some() && b.get("results").is_none() {
            continue; // empty-run summary
        }
        let failed = b.get("results")?.get("failed_checks")?.as_array()?;
        for f in failed {
            out.push(Finding {
                rule_id: as_str(f.get("check_id")?)?,
                resource: f.get("resource").and_then(as_str),
            });
        }
    }
    Some(out)
}

fn kube_linter_findings(report: &Value) -> Option<Vec<Finding>> {
    let reports = match report.get("Reports")? {
        Value::Null => return Some(Vec::new()),
        v => v.as_array()?,
    };
    reports
        .iter()
        .map(|r| {
            Some(Finding {
                rule_id: as_str(r.get("Check")?)?,
                resource: r.pointer("/Object/K8sObject/Name").and_then(as_str),
            })
        })
        .collect()
}

fn terrascan_findings(report: &Value) -> Option<Vec<Finding>> {
    let violations = match report.get("results")?.get("violations") {
        None | Some(Value::Null) => return Some(Vec::new()),
        Some(v) => v.as_array()?,
    };
    violations
        .iter()
        .map(|v| {
            let rule = v.get("rule_name").or_else(|| v.get("rule_id"))?;
            Some(Finding {
                rule_id: as_str(rule)?,
                resource: v.get("resource_name").and_then(as_str),
            })
        })
        .collect()
}

pub fn parse_findings(tool: Tool, report: &str) -> Result<Vec<Finding>, ToolError> {
    let value: Value = serde_json::from_str(report).map_err(|e| unparseable(tool, e))?;
    let found = match tool {
        Tool::Checkov => checkov_findings(&value),
        Tool::KubeLinter => kube_linter_findings(&value),
        Tool::Terrascan => terrascan_findings(&value),
    };
    found.ok_or_else(|| unparseable(tool, "unexpected report layout"))
}

/// Resource token for a finding: the matching document's token when the
/// reported name (or its last `.`/`/` segment) names one, else the sanitized
/// reported name, else the first document's token.
fn finding_resource(doc: &KcfDocument, reported: Option<&str>) -> String {
    let trees = doc.documents();
    if let Some(name) = reported {
        let last = name.rsplit(['.', '/']).next().unwrap_or(name);
        if let Some(t) = trees
            .iter()
            .find(|t| t.name() == Some(name) || t.name() == Some(last))
        {
            return resource_token(t);
        }
        if let Some(tok) = sanitize_resource(last) {
            return tok;
        }
    }
    trees
        .first()
        .map(resource_token)
        .unwrap_or_else(|| "resource".to_string())
}

/// Maps a tool report to UMI labels. Unmapped rule ids become diagnostics.
pub fn record_from_report(
    tool: Tool,
    report: &str,
    doc: &KcfDocument,
    umi: &Umi,
) -> Result<DetectionRecord, ToolError> {
    let findings = parse_findings(tool, report)?;
    let aliases = umi.alias_map(tool.name());
    let mut labels = LabelSet::new(umi.sentinel_id());
    let mut diagnostics = Vec::new();
    for f in findings {
        let Some(&id) = aliases.get(&f.rule_id) else {
            diagnostics.push(format!("unmapped {} rule `{}`", tool.name(), f.rule_id));
            continue;
        };
        let token = finding_resource(doc, f.resource.as_deref());
        if let Ok(label) = EncodedLabel::with_resource(&token, id) {
            labels.insert(label);
        }
    }
    if labels.is_empty() {
        labels = LabelSet::clean(&finding_resource(doc, None), umi.sentinel_id());
    }
    let mut record = DetectionRecord::new(
        Source::External(tool.name().to_string()),
        doc.source_name(),
        labels,
    );
    record.diagnostics = diagnostics;
    Ok(record)
}

/// Runs a scanner on one file. `binary` overrides the executable looked up on
/// PATH.
pub fn run_external_tool(
    tool: Tool,
    binary: Option<&Path>,
    file: &Path,
    doc: &KcfDocument,
    umi: &Umi,
) -> Result<DetectionRecord, ToolError> {
    let exe: PathBuf = binary
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(tool.name()));
    let output = Command::new(&exe)
        .args(tool.args(file))
        .output()
        .map_err(|e| match e.kind() {
            ErrorKind::NotFound | ErrorKind::PermissionDenied => {
                ToolError::ToolNotFound(exe.display().to_string())
            }
            _ => ToolError::ToolCrashed {
                tool: tool.name().to_string(),
                status: None,
                stderr: e.to_string(),
            },
        })?;
    if !tool.accepts(output.status.code()) {
        return Err(ToolError::ToolCrashed {
            tool: tool.name().to_string(),
            status: output.status.code(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    record_from_report(tool, &String::from_utf8_lossy(&output.stdout), doc, umi)
}
