//! Misconfig class labels: the compact `resource+id` form and its decoded form.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::umi::Umi;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LabelError {
    #[error("misconfig id {0} is not in the index")]
    UnknownId(u32),
    #[error("`{0}` does not yield a usable resource token")]
    IllegalResourceToken(String),
    #[error("`{0}` is not a `resource+id` label")]
    Malformed(String),
}

/// Lowercases and collapses every run of non-alphanumerics into `-`.
pub fn sanitize_resource(raw: &str) -> Option<String> {
    let mut out = String::with_capacity(raw.len());
    let mut pending_dash = false;
    for ch in raw.chars() {
        if ch.is_ascii_alphanumeric() {
            if pending_dash && !out.is_empty() {
                out.push('-');
            }
            pending_dash = false;
            out.push(ch.to_ascii_lowercase());
        } else {
            pending_dash = true;
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EncodedLabel {
    resource: String,
    misconfig_id: u32,
}

impl EncodedLabel {
    /// Sanitizes `resource` and checks `id` against the index.
    pub fn encode(resource: &str, id: u32, umi: &Umi) -> Result<Self, LabelError> {
        if !umi.contains(id) {
            return Err(LabelError::UnknownId(id));
        }
        Self::with_resource(resource, id)
    }

    /// Builds a label without consulting an index.
    pub fn with_resource(resource: &str, id: u32) -> Result<Self, LabelError> {
        let resource = sanitize_resource(resource)
            .ok_or_else(|| LabelError::IllegalResourceToken(resource.to_string()))?;
        Ok(EncodedLabel {
            resource,
            misconfig_id: id,
        })
    }

    /// Strict parse of one bare `resource+id` token (no framing).
    pub fn parse(token: &str) -> Result<Self, LabelError> {
        let malformed = || LabelError::Malformed(token.to_string());
        let (resource, id) = token.rsplit_once('+').ok_or_else(malformed)?;
        if id.is_empty() || !id.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed());
        }
        let id: u32 = id.parse().map_err(|_| malformed())?;
        match sanitize_resource(resource) {
            Some(clean) if clean == resource => Ok(EncodedLabel {
                resource: clean,
                misconfig_id: id,
            }),
            _ => Err(malformed()),
        }
    }

    pub fn resource(&self) -> &str {
        &self.resource
    }

    pub fn misconfig_id(&self) -> u32 {
        self.misconfig_id
    }

    pub fn render(&self) -> String {
        format!("{}+{}", self.resource, self.misconfig_id)
    }

    /// Record framing used in training exports: `*resource+id$`.
    pub fn framed(&self) -> String {
        format!("*{}+{}$", self.resource, self.misconfig_id)
    }
}

impl fmt::Display for EncodedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.resource, self.misconfig_id)
    }
}

impl Serialize for EncodedLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for EncodedLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        EncodedLabel::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedLabel {
    pub resource: String,
    pub misconfig_id: u32,
    pub description: String,
}

pub fn decode(label: &EncodedLabel, umi: &Umi) -> Result<DecodedLabel, LabelError> {
    let description = umi
        .description(label.misconfig_id)
        .ok_or(LabelError::UnknownId(label.misconfig_id))?;
    Ok(DecodedLabel {
        resource: label.resource.clone(),
        misconfig_id: label.misconfig_id,
        description: description.to_string(),
    })
}

/// Deduplicated labels of one KCF. The clean-file sentinel never shares a
/// set with a real finding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: BTreeSet<EncodedLabel>,
    sentinel_id: u32,
}

impl LabelSet {
    pub fn new(sentinel_id: u32) -> Self {
        LabelSet {
            labels: BTreeSet::new(),
            sentinel_id,
        }
    }

    pub fn clean(resource: &str, sentinel_id: u32) -> Self {
        let mut set = LabelSet::new(sentinel_id);
        let label =
            EncodedLabel::with_resource(resource, sentinel_id).unwrap_or_else(|_| EncodedLabel {
                resource: "resource".to_string(),
                misconfig_id: sentinel_id,
            });
        set.labels.insert(label);
        set
    }

    pub fn sentinel_id(&self) -> u32 {
        self.sentinel_id
    }

    /// Adds a label. A real finding evicts sentinel labels; a sentinel is
    /// ignored when findings are present. Returns whether the set changed.
    pub fn insert(&mut self, label: EncodedLabel) -> bool {
        if label.misconfig_id == self.sentinel_id {
            if self.has_findings() {
                return false;
            }
        } else {
            let sentinel = self.sentinel_id;
            self.labels.retain(|l| l.misconfig_id != sentinel);
        }
        self.labels.insert(label)
    }

    pub fn contains(&self, label: &EncodedLabel) -> bool {
        self.labels.contains(label)
    }

    pub fn has_findings(&self) -> bool {
        self.labels
            .iter()
            .any(|l| l.misconfig_id != self.sentinel_id)
    }

    /// True iff the set holds only the sentinel.
    pub fn is_clean(&self) -> bool {
        !self.labels.is_empty() && !self.has_findings()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EncodedLabel> {
        self.labels.iter()
    }

    /// Distinct misconfig ids, sentinel excluded.
    pub fn finding_ids(&self) -> BTreeSet<u32> {
        self.labels
            .iter()
            .map(|l| l.misconfig_id)
            .filter(|&id| id != self.sentinel_id)
            .collect()
    }

    /// All ids, sentinel included.
    pub fn ids(&self) -> BTreeSet<u32> {
        self.labels.iter().map(|l| l.misconfig_id).collect()
    }

    pub fn union_with(&mut self, other: &LabelSet) {
        for label in &other.labels {
            self.insert(label.clone());
        }
    }

    /// Keeps findings whose id is in `scope`; an emptied set falls back to
    /// the sentinel for the first resource seen.
    pub fn restricted_to(&self, scope: &BTreeSet<u32>) -> LabelSet {
        let mut out = LabelSet::new(self.sentinel_id);
        for label in &self.labels {
            if label.misconfig_id != self.sentinel_id && scope.contains(&label.misconfig_id) {
                out.insert(label.clone());
            }
        }
        if out.is_empty() {
            let resource = self
                .labels
                .iter()
                .next()
                .map(|l| l.resource.as_str())
                .unwrap_or("resource");
            return LabelSet::clean(resource, self.sentinel_id);
        }
        out
    }

    /// Space-joined bare renderings, sorted by (resource, id).
    pub fn render(&self) -> String {
        self.labels
            .iter()
            .map(EncodedLabel::render)
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Space-joined framed renderings, sorted by (resource, id).
    pub fn render_framed(&self) -> String {
        self.labels
            .iter()
            .map(EncodedLabel::framed)
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.labels.iter().map(EncodedLabel::render).collect()
    }

    /// Builds a set from bare label strings, checking ids against `umi`.
    pub fn from_strings<S: AsRef<str>>(items: &[S], umi: &Umi) -> Result<LabelSet, LabelError> {
        let mut set = LabelSet::new(umi.sentinel_id());
        for item in items {
            let label = EncodedLabel::parse(item.as_ref().trim())?;
            if !umi.contains(label.misconfig_id) {
                return Err(LabelError::UnknownId(label.misconfig_id));
            }
            set.insert(label);
        }
        Ok(set)
    }
}

impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.labels.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelIssue {
    NoLabelsFound,
    Malformed(String),
    UnknownId { token: String, id: u32 },
    Duplicate(String),
    SentinelWithFindings(String),
}

impl fmt::Display for LabelIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelIssue::NoLabelsFound => f.write_str("no labels found"),
            LabelIssue::Malformed(t) => write!(f, "malformed label `{t}`"),
            LabelIssue::UnknownId { token, id } => {
                write!(f, "unknown misconfig id {id} in `{token}`")
            }
            LabelIssue::Duplicate(t) => write!(f, "duplicate label `{t}` collapsed"),
            LabelIssue::SentinelWithFindings(t) => {
                write!(f, "clean-file label `{t}` dropped alongside findings")
            }
        }
    }
}

fn is_separator(c: char) -> bool {
    c.is_whitespace() || matches!(c, '*' | '$' | ',' | ';' | '[' | ']' | '"' | '\'')
}

/// Pulls every well-formed `resource+id` token out of generated text.
/// Never fails: problems come back as issues next to whatever did parse.
pub fn parse_labels(generated: &str, umi: &Umi) -> (LabelSet, Vec<LabelIssue>) {
    let mut set = LabelSet::new(umi.sentinel_id());
    let mut issues = Vec::new();
    let mut seen: BTreeMap<EncodedLabel, ()> = BTreeMap::new();
    let mut sentinels = Vec::new();
    for piece in generated.split(is_separator) {
        if piece.is_empty() || !piece.contains('+') {
            continue;
        }
        let label = match EncodedLabel::parse(piece) {
            Ok(label) => label,
            Err(_) => {
                issues.push(LabelIssue::Malformed(piece.to_string()));
                continue;
            }
        };
        if !umi.contains(label.misconfig_id) {
            issues.push(LabelIssue::UnknownId {
                token: piece.to_string(),
                id: label.misconfig_id,
            });
            continue;
        }
        if seen.insert(label.clone(), ()).is_some() {
            issues.push(LabelIssue::Duplicate(label.render()));
            continue;
        }
        if label.misconfig_id == umi.sentinel_id() {
            sentinels.push(label.clone());
        }
        set.insert(label);
    }
    if set.has_findings() {
        for s in sentinels {
            issues.push(LabelIssue::SentinelWithFindings(s.render()));
        }
    }
    if set.is_empty() {
        issues.push(LabelIssue::NoLabelsFound);
    }
    (set, issues)
}
