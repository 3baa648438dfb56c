//! Unified misconfig index: one numbered entry per distinct misconfig, with
//! every detector rule that reports it attached as an alias.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::json;

pub const CLEAN_DESCRIPTION: &str = "No misconfiguration detected (clean file)";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UmiError {
    #[error("duplicate misconfig id {0}")]
    DuplicateId(u32),
    #[error("duplicate misconfig description `{0}`")]
    DuplicateDescription(String),
    #[error("misconfig {0} has an empty description")]
    EmptyDescription(u32),
    #[error("no clean-file sentinel entry")]
    MissingSentinel,
    #[error("alias {tool}/{rule_id} is attached to more than one entry")]
    DuplicateAlias { tool: String, rule_id: String },
    #[error("malformed index at line {line}: {message}")]
    FormatError { line: usize, message: String },
    #[error("entity matching needs two non-empty lists")]
    EmptyList,
    #[error("completion contains no dictionary")]
    NoDictionaryFound,
    #[error("alias {tool}/{rule_id} is overridden to both {first} and {second}")]
    ConflictingOverride {
        tool: String,
        rule_id: String,
        first: u32,
        second: u32,
    },
    #[error("override names unknown alias {tool}/{rule_id}")]
    UnknownOverrideAlias { tool: String, rule_id: String },
}

/// One detector rule attached to an entry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Alias {
    pub tool: String,
    pub rule_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisconfigEntry {
    pub id: u32,
    pub description: String,
    #[serde(default)]
    pub aliases: Vec<Alias>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity_hint: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct UmiFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentinel_id: Option<u32>,
    entries: Vec<MisconfigEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Umi {
    entries: Vec<MisconfigEntry>,
    sentinel_id: u32,
    by_id: BTreeMap<u32, usize>,
    by_description: BTreeMap<String, u32>,
    by_alias: BTreeMap<(String, String), u32>,
}

impl Umi {
    /// Validates and indexes `entries`. Entries are stored sorted by id.
    pub fn new(mut entries: Vec<MisconfigEntry>, sentinel_id: u32) -> Result<Self, UmiError> {
        entries.sort_by_key(|e| e.id);
        let mut by_id = BTreeMap::new();
        let mut by_description = BTreeMap::new();
        let mut by_alias = BTreeMap::new();
        for (idx, entry) in entries.iter().enumerate() {
            if by_id.insert(entry.id, idx).is_some() {
                return Err(UmiError::DuplicateId(entry.id));
            }
            if entry.description.trim().is_empty() {
                return Err(UmiError::EmptyDescription(entry.id));
            }
            if by_description
                .insert(entry.description.clone(), entry.id)
                .is_some()
            {
                return Err(UmiError::DuplicateDescription(entry.description.clone()));
            }
            for alias in &entry.aliases {
                let key = (alias.tool.clone(), alias.rule_id.clone());
                if by_alias.insert(key, entry.id).is_some() {
                    return Err(UmiError::DuplicateAlias {
                        tool: alias.tool.clone(),
                        rule_id: alias.rule_id.clone(),
                    });
                }
            }
        }
        match by_id.get(&sentinel_id) {
            Some(&idx) if entries[idx].aliases.is_empty() => {}
            _ => return Err(UmiError::MissingSentinel),
        }
        Ok(Umi {
            entries,
            sentinel_id,
            by_id,
            by_description,
            by_alias,
        })
    }

    /// Reads the JSON index format. Without an explicit `sentinel_id` the
    /// highest id is taken as the sentinel.
    pub fn from_json_str(text: &str) -> Result<Self, UmiError> {
        let file: UmiFile = serde_json::from_str(text).map_err(|e| UmiError::FormatError {
            line: e.line(),
            message: e.to_string(),
        })?;
        let sentinel = match file.sentinel_id {
            Some(id) => id,
            None => file
                .entries
                .iter()
                .map(|e| e.id)
                .max()
                .ok_or(UmiError::MissingSentinel)?,
        };
        Umi::new(file.entries, sentinel)
    }

    /// Canonical serialization: pretty JSON, entries sorted by id, trailing newline.
    pub fn to_json(&self) -> String {
        let file = UmiFile {
            sentinel_id: Some(self.sentinel_id),
            entries: self.entries.clone(),
        };
        let mut out = serde_json::to_string_pretty(&file).unwrap_or_default();
        out.push('\n');
        out
    }

    pub fn sentinel_id(&self) -> u32 {
        self.sentinel_id
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        id == self.sentinel_id
    }

    pub fn entries(&self) -> &[MisconfigEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.by_id.contains_key(&id)
    }

    pub fn lookup(&self, id: u32) -> Option<&MisconfigEntry> {
        self.by_id.get(&id).map(|&i| &self.entries[i])
    }

    pub fn description(&self, id: u32) -> Option<&str> {
        self.lookup(id).map(|e| e.description.as_str())
    }

    pub fn id_for_description(&self, description: &str) -> Option<u32> {
        self.by_description.get(description.trim()).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    /// Misconfig ids, sentinel excluded.
    pub fn misconfig_ids(&self) -> BTreeSet<u32> {
        self.ids().filter(|&id| id != self.sentinel_id).collect()
    }

    pub fn resolve_alias(&self, tool: &str, rule_id: &str) -> Option<u32> {
        self.by_alias
            .get(&(tool.to_string(), rule_id.to_string()))
            .copied()
    }

    /// Rule id to UMI id for one tool.
    pub fn alias_map(&self, tool: &str) -> BTreeMap<String, u32> {
        self.by_alias
            .iter()
            .filter(|((t, _), _)| t == tool)
            .map(|((_, rule), &id)| (rule.clone(), id))
            .collect()
    }

    /// Ids a tool can report at all.
    pub fn tool_coverage(&self, tool: &str) -> BTreeSet<u32> {
        self.alias_map(tool).into_values().collect()
    }

    pub fn tools(&self) -> BTreeSet<String> {
        self.by_alias.keys().map(|(t, _)| t.clone()).collect()
    }
}

/// One worked example for the entity-matching prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchExample {
    pub list_a: Vec<String>,
    pub list_b: Vec<String>,
    pub matches: Vec<(String, String)>,
}

pub fn default_match_examples() -> Vec<MatchExample> {
    alloc::vec![MatchExample {
        list_a: alloc::vec![
            "CPU limits should be set.".to_string(),
            "Image tag should be fixed - not latest or blank.".to_string(),
        ],
        list_b: alloc::vec![
            "CPU limits not set in config file.".to_string(),
            "Use a container image with a specific tag other than latest.".to_string(),
        ],
        matches: alloc::vec![
            (
                "CPU limits should be set.".to_string(),
                "CPU limits not set in config file.".to_string(),
            ),
            (
                "Image tag should be fixed - not latest or blank.".to_string(),
                "Use a container image with a specific tag other than latest.".to_string(),
            ),
        ],
    }]
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).unwrap_or_default()
}

/// Renders pairs as a one-line dictionary, `{ "a": "b", "c": "d" }`.
pub fn render_dictionary(pairs: &[(String, String)]) -> String {
    if pairs.is_empty() {
        return "{}".to_string();
    }
    let body: Vec<String> = pairs
        .iter()
        .map(|(a, b)| format!("{}: {}", quoted(a), quoted(b)))
        .collect();
    format!("{{ {} }}", body.join(", "))
}

fn push_lists(out: &mut String, list_a: &[String], list_b: &[String]) {
    out.push_str("List 1:\n");
    for item in list_a {
        out.push_str(item);
        out.push('\n');
    }
    out.push_str("List 2:\n");
    for item in list_b {
        out.push_str(item);
        out.push('\n');
    }
}

/// Prompt asking a model to pair equivalent policy descriptions: task,
/// matching criteria, output format, worked examples, then the new lists.
pub fn build_entity_match_prompt(
    list_a: &[String],
    list_b: &[String],
    examples: &[MatchExample],
) -> Result<String, UmiError> {
    if list_a.is_empty() || list_b.is_empty() {
        return Err(UmiError::EmptyList);
    }
    let mut out = String::new();
    out.push_str(
        "Instructions: Match each policy description from the first list to the same meaning \
         policy description in the second list. Exclude unmatched policies.\n",
    );
    out.push_str(
        "Criteria for matching: Policies must convey the same meaning and be nearly exact in \
         terms of functional equivalence and key terms.\n",
    );
    out.push_str(
        "Output format: return the result as a dictionary of matched policies from both lists, \
         e.g., { \"CPU limits should be set.\": \"CPU Limits Not Set in config file.\" }\n",
    );
    for example in examples {
        out.push_str("\nExample:\n");
        push_lists(&mut out, &example.list_a, &example.list_b);
        out.push_str("Output:\n");
        out.push_str(&render_dictionary(&example.matches));
        out.push('\n');
    }
    out.push_str("\nMatch these lists:\n");
    push_lists(&mut out, list_a, list_b);
    out.push_str("Output:\n");
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityMatches {
    /// list-a description to list-b description, both in their input spelling.
    pub pairs: BTreeMap<String, String>,
    pub diagnostics: Vec<String>,
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Extracts the matched pairs from a completion. Pairs naming descriptions
/// that are not in the inputs are dropped with a diagnostic.
pub fn parse_entity_matches(
    completion: &str,
    list_a: &[String],
    list_b: &[String],
) -> Result<EntityMatches, UmiError> {
    let map = json::extract_object(completion).ok_or(UmiError::NoDictionaryFound)?;
    let index_a: BTreeMap<String, &String> = list_a.iter().map(|s| (normalize(s), s)).collect();
    let index_b: BTreeMap<String, &String> = list_b.iter().map(|s| (normalize(s), s)).collect();
    let mut result = EntityMatches::default();
    for (key, value) in map {
        let Some(value) = value.as_str() else {
            result
                .diagnostics
                .push(format!("dropped pair for `{key}`: value is not a string"));
            continue;
        };
        let Some(a) = index_a.get(&normalize(&key)) else {
            result
                .diagnostics
                .push(format!("dropped pair: `{key}` is not in the first list"));
            continue;
        };
        let Some(b) = index_b.get(&normalize(value)) else {
            result
                .diagnostics
                .push(format!("dropped pair: `{value}` is not in the second list"));
            continue;
        };
        result.pairs.insert((*a).clone(), (*b).clone());
    }
    Ok(result)
}

/// Manual correction: put one alias into a numbered manual group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Override {
    pub tool: String,
    pub rule_id: String,
    pub group: u32,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Collapses matched source rules into entries.
///
/// `matches` pair source descriptions (as produced by
/// [`parse_entity_matches`]); every draft rule whose text equals either side
/// joins the group, and rules with identical text are always grouped.
/// Overridden rules skip automatic grouping and are grouped by override
/// number instead. Ids are dense from 0, ordered by each group's smallest
/// `(tool, rule_id)`; the group's canonical description is that member's
/// text. The sentinel is appended last.
pub fn merge_matches(
    draft: &[Alias],
    matches: &[(String, String)],
    overrides: &[Override],
) -> Result<Umi, UmiError> {
    let mut rules: Vec<Alias> = draft.to_vec();
    rules.sort();
    rules.dedup_by(|a, b| a.tool == b.tool && a.rule_id == b.rule_id);

    let mut manual: BTreeMap<(String, String), u32> = BTreeMap::new();
    for o in overrides {
        let key = (o.tool.clone(), o.rule_id.clone());
        if !rules
            .iter()
            .any(|r| r.tool == o.tool && r.rule_id == o.rule_id)
        {
            return Err(UmiError::UnknownOverrideAlias {
                tool: o.tool.clone(),
                rule_id: o.rule_id.clone(),
            });
        }
        if let Some(&prev) = manual.get(&key) {
            if prev != o.group {
                return Err(UmiError::ConflictingOverride {
                    tool: o.tool.clone(),
                    rule_id: o.rule_id.clone(),
                    first: prev,
                    second: o.group,
                });
            }
        }
        manual.insert(key, o.group);
    }
    let is_manual = |r: &Alias| manual.contains_key(&(r.tool.clone(), r.rule_id.clone()));

    let mut uf = UnionFind::new(rules.len());
    let mut by_text: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in rules.iter().enumerate() {
        if !is_manual(r) {
            by_text.entry(normalize(&r.text)).or_default().push(i);
        }
    }
    for members in by_text.values() {
        for w in members.windows(2) {
            uf.union(w[0], w[1]);
        }
    }
    for (a, b) in matches {
        let (Some(left), Some(right)) = (by_text.get(&normalize(a)), by_text.get(&normalize(b)))
        else {
            continue;
        };
        uf.union(left[0], right[0]);
    }
    let mut first_of_group: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, r) in rules.iter().enumerate() {
        if let Some(&g) = manual.get(&(r.tool.clone(), r.rule_id.clone())) {
            match first_of_group.get(&g) {
                Some(&j) => uf.union(j, i),
                None => {
                    first_of_group.insert(g, i);
                }
            }
        }
    }

    // Rules are sorted, so the root (smallest index) is the smallest member.
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..rules.len() {
        let root = uf.find(i);
        groups.entry(root).or_default().push(i);
    }
    let mut entries = Vec::with_capacity(groups.len() + 1);
    for (id, (root, members)) in groups.into_iter().enumerate() {
        entries.push(MisconfigEntry {
            id: id as u32,
            description: rules[root].text.clone(),
            aliases: members.iter().map(|&i| rules[i].clone()).collect(),
            severity_hint: None,
        });
    }
    let sentinel = entries.len() as u32;
    entries.push(MisconfigEntry {
        id: sentinel,
        description: CLEAN_DESCRIPTION.to_string(),
        aliases: Vec::new(),
        severity_hint: None,
    });
    Umi::new(entries, sentinel)
}
