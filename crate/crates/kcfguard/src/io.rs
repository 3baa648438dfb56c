//! Files on disk: index, rule packs, corpora, label maps and outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kcfguard_core::data;
use kcfguard_core::dataset::Document;
use kcfguard_core::label::{parse_labels, LabelSet};
use kcfguard_core::{RuleSet, Umi};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| IoError::Write {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| IoError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| IoError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_text(path, &text)
}

fn invalid(path: &Path, message: impl ToString) -> IoError {
    IoError::Invalid {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// The bundled index when `path` is `None`.
pub fn load_umi(path: Option<&Path>) -> Result<Umi, IoError> {
    match path {
        None => Ok(data::reference_umi()),
        Some(p) => Umi::from_json_str(&read_text(p)?).map_err(|e| invalid(p, e)),
    }
}

pub fn save_umi(umi: &Umi, path: &Path) -> Result<(), IoError> {
    write_text(path, &umi.to_json())
}

/// The bundled rule pack when `path` is `None`.
pub fn load_rules(path: Option<&Path>, umi: &Umi) -> Result<RuleSet, IoError> {
    match path {
        None => RuleSet::from_json_str(data::RULES_JSON, umi)
            .map_err(|e| invalid(Path::new("<bundled rules>"), e)),
        Some(p) => RuleSet::from_json_str(&read_text(p)?, umi).map_err(|e| invalid(p, e)),
    }
}

fn is_manifest(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("yaml" | "yml" | "json")
    )
}

/// Files named directly plus every `.yaml`/`.yml`/`.json` below named
/// directories, sorted within each directory.
pub fn collect_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, IoError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            walk(p, &mut out)?;
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), IoError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| IoError::Read {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else if is_manifest(&p) {
            out.push(p);
        }
    }
    Ok(())
}

/// Display name of a corpus file: its path relative to `root` when below it.
pub fn source_name(path: &Path, root: Option<&Path>) -> String {
    let rel = root
        .and_then(|r| path.strip_prefix(r).ok())
        .filter(|r| !r.as_os_str().is_empty())
        .unwrap_or(path);
    rel.to_string_lossy().replace('\\', "/")
}

/// Reads a corpus directory into named documents; unreadable files come back
/// as diagnostics.
pub fn read_corpus(root: &Path) -> Result<(Vec<Document>, Vec<String>), IoError> {
    let files = collect_files(&[root.to_path_buf()])?;
    let mut docs = Vec::new();
    let mut diagnostics = Vec::new();
    for f in files {
        match fs::read_to_string(&f) {
            Ok(text) => docs.push(Document::new(source_name(&f, Some(root)), text)),
            Err(e) => diagnostics.push(format!("{}: {e}", f.display())),
        }
    }
    Ok((docs, diagnostics))
}

/// Label map file: `{ "<file>": ["res+id", ...], ... }`.
pub fn read_label_map(path: &Path, umi: &Umi) -> Result<BTreeMap<String, LabelSet>, IoError> {
    let raw: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&read_text(path)?).map_err(|e| invalid(path, e))?;
    raw.into_iter()
        .map(|(k, v)| {
            let (set, issues) = parse_labels(&v.join(" "), umi);
            let real: Vec<_> = issues
                .iter()
                .filter(|i| !matches!(i, kcfguard_core::label::LabelIssue::NoLabelsFound))
                .collect();
            if let Some(issue) = real.first() {
                return Err(invalid(path, format!("{k}: {issue}")));
            }
            Ok((k, set))
        })
        .collect()
}

pub fn label_map_json(map: &BTreeMap<String, LabelSet>) -> BTreeMap<&str, Vec<String>> {
    map.iter()
        .map(|(k, v)| (k.as_str(), v.to_strings()))
        .collect()
}
