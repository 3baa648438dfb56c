//! Line-indexed model of a Kubernetes configuration file.
//!
//! A [`KcfDocument`] keeps the original text line by line (terminators included,
//! so joining the lines reproduces the input byte for byte) next to one
//! [`ResourceTree`] per `---`-separated manifest. Every tree node remembers the
//! 1-based line its key (or sequence item) starts on.
//!
//! Key-paths are slash-separated. Sequence indices are written `[0]`, `[1]`, ...
//! and a literal `/` or `~` inside a mapping key is escaped as `~1` / `~0`.

mod parser;
pub mod path;

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub use path::KeyPath;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KcfError {
    #[error("input is empty")]
    EmptyInput,
    #[error("malformed YAML at line {line}, column {column}: {message}")]
    MalformedYaml {
        line: u32,
        column: u32,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarKind {
    Null,
    Bool,
    Int,
    Float,
    Str,
}

/// A resolved scalar: its YAML core-schema type plus the decoded text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scalar {
    pub kind: ScalarKind,
    pub text: String,
}

impl Scalar {
    pub fn string(text: impl Into<String>) -> Self {
        Scalar {
            kind: ScalarKind::Str,
            text: text.into(),
        }
    }

    pub fn null() -> Self {
        Scalar {
            kind: ScalarKind::Null,
            text: String::new(),
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match (self.kind, self.text.as_str()) {
            (ScalarKind::Bool, "true" | "True" | "TRUE") => Some(true),
            (ScalarKind::Bool, _) => Some(false),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self.kind {
            ScalarKind::Int => parser::parse_int(&self.text).map(|v| v as f64),
            ScalarKind::Float => parser::parse_float(&self.text),
            _ => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScalarKind::Null => f.write_str("null"),
            _ => f.write_str(&self.text),
        }
    }
}

/// Value stored at a key-path. Collections only record their size; their
/// children live at deeper key-paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum NodeValue {
    Scalar(Scalar),
    Mapping { len: usize },
    Sequence { len: usize },
}

impl NodeValue {
    pub fn as_scalar(&self) -> Option<&Scalar> {
        match self {
            NodeValue::Scalar(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub value: NodeValue,
    pub line: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: Option<u32>,
    pub message: String,
}

impl Diagnostic {
    pub fn at(line: u32, message: impl Into<String>) -> Self {
        Diagnostic {
            line: Some(line),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {}: {}", line, self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// One Kubernetes object (one `---` document).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceTree {
    kind: Option<String>,
    name: Option<String>,
    first_line: u32,
    last_line: u32,
    nodes: BTreeMap<String, Node>,
}

impl ResourceTree {
    pub fn kind(&self) -> Option<&str> {
        self.kind.as_deref()
    }

    /// `metadata.name`, when present.
    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    /// Inclusive line span of the document this tree was parsed from.
    pub fn line_span(&self) -> (u32, u32) {
        (self.first_line, self.last_line)
    }

    pub fn lookup(&self, path: &str) -> Option<&Node> {
        self.nodes.get(path)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&str, &Node)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Parsed KCF. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KcfDocument {
    source_name: String,
    raw_lines: Vec<String>,
    documents: Vec<ResourceTree>,
    diagnostics: Vec<Diagnostic>,
    token_estimate: usize,
}

impl KcfDocument {
    /// Parses `text` into a line-indexed document.
    ///
    /// Documents that fail to parse are reported in [`diagnostics`](Self::diagnostics);
    /// an error is returned only when nothing parses at all.
    pub fn parse(text: &str, source_name: &str) -> Result<Self, KcfError> {
        if text.trim().is_empty() {
            return Err(KcfError::EmptyInput);
        }
        let raw_lines = split_lines_keep_ends(text);
        let stripped: Vec<&str> = raw_lines.iter().map(|l| strip_terminator(l)).collect();
        let outcome = parser::parse_stream(&stripped);

        let mut diagnostics = outcome.diagnostics;
        let mut documents = Vec::new();
        let mut first_error = None;
        for doc in outcome.documents {
            match doc.result {
                Ok(nodes) => {
                    let kind = scalar_text(&nodes, "kind");
                    let name = scalar_text(&nodes, "metadata/name");
                    if kind.is_none() {
                        diagnostics.push(Diagnostic::at(
                            doc.first_line,
                            "document has no `kind`; kept without a resource kind",
                        ));
                    }
                    documents.push(ResourceTree {
                        kind,
                        name,
                        first_line: doc.first_line,
                        last_line: doc.last_line,
                        nodes,
                    });
                }
                Err(err) => {
                    diagnostics.push(Diagnostic::at(
                        err.line,
                        alloc::format!(
                            "document at lines {}-{} is malformed (column {}): {}",
                            doc.first_line,
                            doc.last_line,
                            err.column,
                            err.message
                        ),
                    ));
                    first_error.get_or_insert(err);
                }
            }
        }

        if documents.is_empty() {
            return Err(match first_error {
                Some(err) => KcfError::MalformedYaml {
                    line: err.line,
                    column: err.column,
                    message: err.message,
                },
                None => KcfError::EmptyInput,
            });
        }

        Ok(KcfDocument {
            source_name: source_name.to_string(),
            token_estimate: estimate_tokens(text),
            raw_lines,
            documents,
            diagnostics,
        })
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    /// Lines including their original terminators.
    pub fn raw_lines(&self) -> &[String] {
        &self.raw_lines
    }

    pub fn line_count(&self) -> usize {
        self.raw_lines.len()
    }

    /// 1-based line access without the terminator.
    pub fn line(&self, number: u32) -> Option<&str> {
        let idx = (number as usize).checked_sub(1)?;
        self.raw_lines.get(idx).map(|l| strip_terminator(l))
    }

    /// The original text, reassembled from the raw lines.
    pub fn text(&self) -> String {
        self.raw_lines.concat()
    }

    pub fn documents(&self) -> &[ResourceTree] {
        &self.documents
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    pub fn token_estimate(&self) -> usize {
        self.token_estimate
    }

    /// Exact key-path lookup across documents, first match wins.
    pub fn lookup(&self, path: &str) -> Option<&Node> {
        self.documents.iter().find_map(|tree| tree.lookup(path))
    }
}

fn scalar_text(nodes: &BTreeMap<String, Node>, path: &str) -> Option<String> {
    match nodes.get(path).map(|n| &n.value) {
        Some(NodeValue::Scalar(s)) if s.kind != ScalarKind::Null && !s.text.is_empty() => {
            Some(s.text.clone())
        }
        _ => None,
    }
}

fn split_lines_keep_ends(text: &str) -> Vec<String> {
    text.split_inclusive('\n').map(String::from).collect()
}

fn strip_terminator(line: &str) -> &str {
    let line = line.strip_suffix('\n').unwrap_or(line);
    line.strip_suffix('\r').unwrap_or(line)
}

/// Pluggable token count used for corpus filtering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenEstimator {
    /// Number of whitespace-separated words.
    #[default]
    Whitespace,
    /// `ceil(bytes / 4)`, a rough stand-in for sub-word tokenizers.
    BytePairApprox,
}

impl TokenEstimator {
    pub fn estimate(self, text: &str) -> usize {
        match self {
            TokenEstimator::Whitespace => text.split_whitespace().count(),
            TokenEstimator::BytePairApprox => text.len().div_ceil(4),
        }
    }
}

/// Token estimate under the default estimator.
pub fn estimate_tokens(text: &str) -> usize {
    TokenEstimator::default().estimate(text)
}
