//! Labeled and contextual corpora, splits, stratified samples and fine-tune
//! exports.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::kcf::{KcfDocument, TokenEstimator};
use crate::label::LabelSet;
use crate::rules::{evaluate_rules, RuleSet};
use crate::seed::stage_rng;
use crate::umi::Umi;

pub const MASK_TOKEN: &str = "<MASK>";
pub const DEFAULT_TOKEN_LIMIT: usize = 512;
pub const DEFAULT_MASK_FRACTION: f64 = 0.15;
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DatasetError {
    #[error("the corpus is empty")]
    EmptyCorpus,
    #[error("no file in the corpus could be parsed")]
    NothingParsed,
    #[error("a split needs at least 10 examples, got {0}")]
    TooSmall(usize),
    #[error("split ratios must be non-negative and sum to 1")]
    InvalidRatios,
    #[error("source name `{0}` appears twice")]
    DuplicateName(String),
    #[error("split manifest names `{0}`, which is not in the dataset")]
    UnknownExample(String),
    #[error("malformed dataset record at line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Assigns ground-truth labels to a parsed KCF.
pub trait Labeler {
    fn label(&self, doc: &KcfDocument) -> Result<LabelSet, String>;
}

/// Labels with the built-in rule engine.
pub struct RuleLabeler<'a> {
    pub rules: &'a RuleSet,
    pub umi: &'a Umi,
}

impl Labeler for RuleLabeler<'_> {
    fn label(&self, doc: &KcfDocument) -> Result<LabelSet, String> {
        Ok(evaluate_rules(doc, self.rules, self.umi).labels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub kcf_content: String,
    pub source_name: String,
    pub labels: LabelSet,
    pub token_estimate: usize,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    source_name: String,
    kcf_content: String,
    labels: Vec<String>,
    token_estimate: usize,
}

impl LabeledExample {
    pub fn to_json_line(&self) -> String {
        let record = ExampleRecord {
            source_name: self.source_name.clone(),
            kcf_content: self.kcf_content.clone(),
            labels: self.labels.to_strings(),
            token_estimate: self.token_estimate,
        };
        serde_json::to_string(&record).expect("record serializes")
    }

    pub fn from_json_line(line: &str, umi: &Umi) -> Result<Self, String> {
        let r: ExampleRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let labels = LabelSet::from_strings(&r.labels, umi).map_err(|e| e.to_string())?;
        if labels.is_empty() {
            return Err("example has no labels".to_string());
        }
        Ok(LabeledExample {
            kcf_content: r.kcf_content,
            source_name: r.source_name,
            labels,
            token_estimate: r.token_estimate,
        })
    }
}

/// One JSON record per line.
pub fn write_jsonl(examples: &[LabeledExample]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&e.to_json_line());
        out.push('\n');
    }
    out
}

pub fn read_jsonl(text: &str, umi: &Umi) -> Result<Vec<LabeledExample>, DatasetError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            LabeledExample::from_json_line(l, umi).map_err(|message| DatasetError::Format {
                line: i + 1,
                message,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_files: usize,
    pub examples: usize,
    pub excluded_over_limit: usize,
    pub failed: usize,
    pub label_frequencies: BTreeMap<u32, usize>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelingOptions {
    pub token_limit: usize,
    pub estimator: TokenEstimator,
}

impl Default for LabelingOptions {
    fn default() -> Self {
        LabelingOptions {
            token_limit: DEFAULT_TOKEN_LIMIT,
            estimator: TokenEstimator::default(),
        }
    }
}

/// A named text file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub name: String,
    pub text: String,
}

impl Document {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            name: name.into(),
            text: text.into(),
        }
    }
}

/// One example per parseable file at or under the token limit.
pub fn build_labeled_dataset(
    corpus: &[Document],
    labeler: &dyn Labeler,
    options: LabelingOptions,
) -> Result<(Vec<LabeledExample>, DatasetStats), DatasetError> {
    if corpus.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    let mut stats = DatasetStats {
        total_files: corpus.len(),
        ..DatasetStats::default()
    };
    let mut examples = Vec::new();
    let mut parsed_any = false;
    for file in corpus {
        let doc = match KcfDocument::parse(&file.text, &file.name) {
            Ok(doc) => doc,
            Err(e) => {
                stats.failed += 1;
                stats.diagnostics.push(format!("{}: {e}", file.name));
                continue;
            }
        };
        parsed_any = true;
        for d in doc.diagnostics() {
            stats.diagnostics.push(format!("{}: {d}", file.name));
        }
        let tokens = options.estimator.estimate(&file.text);
        if tokens > options.token_limit {
            stats.excluded_over_limit += 1;
            continue;
        }
        let labels = match labeler.label(&doc) {
            Ok(l) if !l.is_empty() => l,
            Ok(_) => {
                stats.failed += 1;
                stats
                    .diagnostics
                    .push(format!("{}: labeler returned no labels", file.name));
                continue;
            }
            Err(e) => {
                stats.failed += 1;
                stats.diagnostics.push(format!("{}: {e}", file.name));
                continue;
            }
        };
        for id in labels.ids() {
            *stats.label_frequencies.entry(id).or_default() += 1;
        }
        examples.push(LabeledExample {
            kcf_content: file.text.clone(),
            source_name: file.name.clone(),
            labels,
            token_estimate: tokens,
        });
    }
    if !parsed_any {
        return Err(DatasetError::NothingParsed);
    }
    stats.examples = examples.len();
    Ok((examples, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Target partition sizes: validation and test are rounded, train takes
/// the rest.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let val = libm::round(n as f64 * ratios.1) as usize;
    let test = libm::round(n as f64 * ratios.2) as usize;
    let val = val.min(n);
    let test = test.min(n - val);
    (n - val - test, val, test)
}

/// Shuffles the sorted names with the `split` sub-seed and cuts them.
pub fn make_split(
    names: &[String],
    seed: u64,
    ratios: (f64, f64, f64),
) -> Result<SplitManifest, DatasetError> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || libm::fabs(a + b + c - 1.0) > 1e-9 {
        return Err(DatasetError::InvalidRatios);
    }
    if names.len() < 10 {
        return Err(DatasetError::TooSmall(names.len()));
    }
    let mut sorted: Vec<String> = names.to_vec();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(DatasetError::DuplicateName(w[0].clone()));
        }
    }
    sorted.shuffle(&mut stage_rng(seed, "split"));
    let (n_train, n_val, _) = split_sizes(sorted.len(), ratios);
    let test = sorted.split_off(n_train + n_val);
    let val = sorted.split_off(n_train);
    Ok(SplitManifest {
        seed,
        ratios,
        train: sorted,
        val,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextVariant {
    Masked,
    Nsp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextualExample {
    pub variant: ContextVariant,
    pub source_name: String,
    pub input: String,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextUnit {
    #[default]
    Line,
    Word,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextualOptions {
    pub mask_fraction: f64,
    pub mask_unit: ContextUnit,
    pub nsp_unit: ContextUnit,
}

impl Default for ContextualOptions {
    fn default() -> Self {
        ContextualOptions {
            mask_fraction: DEFAULT_MASK_FRACTION,
            mask_unit: ContextUnit::Line,
            nsp_unit: ContextUnit::Line,
        }
    }
}

/// Masked copy of `text` and the number of masked and maskable units.
pub fn mask_document(
    text: &str,
    fraction: f64,
    unit: ContextUnit,
    seed: u64,
    name: &str,
) -> (String, usize, usize) {
    let mut rng = stage_rng(seed, &format!("mask/{name}"));
    match unit {
        ContextUnit::Line => {
            let lines: Vec<&str> = text.split_inclusive('\n').collect();
            let candidates: Vec<usize> = (0..lines.len())
                .filter(|&i| !lines[i].trim().is_empty())
                .collect();
            let k = mask_count(candidates.len(), fraction);
            let chosen: BTreeSet<usize> = rand::seq::index::sample(&mut rng, candidates.len(), k)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            let mut out = String::with_capacity(text.len());
            for (i, line) in lines.iter().enumerate() {
                if chosen.contains(&i) {
                    out.push_str(&mask_line(line));
                } else {
                    out.push_str(line);
                }
            }
            (out, k, candidates.len())
        }
        ContextUnit::Word => {
            let spans = word_spans(text);
            let k = mask_count(spans.len(), fraction);
            let chosen: BTreeSet<usize> = rand::seq::index::sample(&mut rng, spans.len(), k)
                .into_iter()
                .collect();
            let mut out = String::with_capacity(text.len());
            let mut pos = 0;
            for (i, &(s, e)) in spans.iter().enumerate() {
                out.push_str(&text[pos..s]);
                out.push_str(if chosen.contains(&i) {
                    MASK_TOKEN
                } else {
                    &text[s..e]
                });
                pos = e;
            }
            out.push_str(&text[pos..]);
            (out, k, spans.len())
        }
    }
}

fn mask_count(units: usize, fraction: f64) -> usize {
    (libm::round(units as f64 * fraction) as usize).min(units)
}

fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Replaces the value of a `key: value` or `- value` line, or the whole
/// content when there is no value. Indentation and terminator are kept.
fn mask_line(line: &str) -> String {
    let body_end = line.trim_end_matches(['\n', '\r']).len();
    let (body, ending) = line.split_at(body_end);
    let indent = body.len() - body.trim_start().len();
    let content = &body[indent..];
    let kept = if let Some(i) = content
        .find(": ")
        .filter(|&i| !content[i + 2..].trim().is_empty())
    {
        format!("{}{MASK_TOKEN}", &content[..i + 2])
    } else if content
        .strip_prefix("- ")
        .is_some_and(|r| !r.trim().is_empty())
    {
        format!("- {MASK_TOKEN}")
    } else {
        MASK_TOKEN.to_string()
    };
    format!("{}{kept}{ending}", &body[..indent])
}

/// First half and second half of `text`; `None` with fewer than two units.
pub fn nsp_split(text: &str, unit: ContextUnit) -> Option<(String, String)> {
    let cut = match unit {
        ContextUnit::Line => {
            let lines: Vec<&str> = text.split_inclusive('\n').collect();
            if lines.len() < 2 {
                return None;
            }
            lines[..lines.len() / 2].iter().map(|l| l.len()).sum()
        }
        ContextUnit::Word => {
            let spans = word_spans(text);
            if spans.len() < 2 {
                return None;
            }
            spans[spans.len() / 2].0
        }
    };
    Some((text[..cut].to_string(), text[cut..].to_string()))
}

/// One masked and one next-part example per usable document.
pub fn build_contextual(
    corpus: &[Document],
    seed: u64,
    options: ContextualOptions,
) -> (Vec<ContextualExample>, Vec<String>) {
    let mut out = Vec::new();
    let mut diagnostics = Vec::new();
    for doc in corpus {
        if doc.text.trim().is_empty() {
            diagnostics.push(format!("{}: empty document skipped", doc.name));
            continue;
        }
        if doc.text.contains(MASK_TOKEN) {
            diagnostics.push(format!(
                "{}: already contains {MASK_TOKEN}; skipped",
                doc.name
            ));
            continue;
        }
        let (masked, _, _) = mask_document(
            &doc.text,
            options.mask_fraction,
            options.mask_unit,
            seed,
            &doc.name,
        );
        out.push(ContextualExample {
            variant: ContextVariant::Masked,
            source_name: doc.name.clone(),
            input: masked,
            target: doc.text.clone(),
        });
        match nsp_split(&doc.text, options.nsp_unit) {
            Some((input, target)) => out.push(ContextualExample {
                variant: ContextVariant::Nsp,
                source_name: doc.name.clone(),
                input,
                target,
            }),
            None => diagnostics.push(format!("{}: too short to split", doc.name)),
        }
    }
    (out, diagnostics)
}

/// Free-text pass-through: one document per blank-line separated paragraph.
/// Not part of the default pipelines.
pub fn free_text_documents(name: &str, text: &str) -> Vec<Document> {
    text.split("\n\n")
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .enumerate()
        .map(|(i, p)| Document::new(format!("{name}#{}", i + 1), p))
        .collect()
}

/// Per label, `min(per_label_count, support)` examples; rarer labels are
/// filled first and examples carrying several labels count for each.
/// The clean-file sentinel is treated as a label. Dataset order is kept.
pub fn stratified_sample(
    dataset: &[LabeledExample],
    per_label_count: usize,
    seed: u64,
) -> Vec<LabeledExample> {
    let mut support: BTreeMap<u32, usize> = BTreeMap::new();
    for e in dataset {
        for id in e.labels.ids() {
            *support.entry(id).or_default() += 1;
        }
    }
    let mut order: Vec<(usize, u32)> = support.iter().map(|(&id, &n)| (n, id)).collect();
    order.sort();
    let quota = |id: u32| per_label_count.min(support[&id]);
    let mut rng = stage_rng(seed, "stratified");
    let mut selected = alloc::vec![false; dataset.len()];
    let mut taken: BTreeMap<u32, usize> = BTreeMap::new();
    for (_, id) in order {
        let have = taken.get(&id).copied().unwrap_or(0);
        let need = quota(id).saturating_sub(have);
        if need == 0 {
            continue;
        }
        let mut candidates: Vec<usize> = (0..dataset.len())
            .filter(|&i| !selected[i] && dataset[i].labels.ids().contains(&id))
            .collect();
        candidates.shuffle(&mut rng);
        // Prefer examples that do not push other labels past their quota.
        candidates.sort_by_key(|&i| {
            dataset[i]
                .labels
                .ids()
                .iter()
                .filter(|&&other| {
                    other != id && taken.get(&other).copied().unwrap_or(0) >= quota(other)
                })
                .count()
        });
        for &i in candidates.iter().take(need) {
            selected[i] = true;
            for other in dataset[i].labels.ids() {
                *taken.entry(other).or_default() += 1;
            }
        }
    }
    dataset
        .iter()
        .zip(selected)
        .filter(|(_, s)| *s)
        .map(|(e, _)| e.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FinetuneRecord<'a> {
    pub input: &'a str,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FinetuneExport {
    pub train: String,
    pub val: String,
    pub test: String,
}

/// `{"input": kcf, "output": "*r+id$ ..."}` lines in one partition's order.
pub fn finetune_lines(
    dataset: &[LabeledExample],
    names: &[String],
) -> Result<String, DatasetError> {
    let index: BTreeMap<&str, &LabeledExample> = dataset
        .iter()
        .map(|e| (e.source_name.as_str(), e))
        .collect();
    let mut out = String::new();
    for name in names {
        let e = index
            .get(name.as_str())
            .ok_or_else(|| DatasetError::UnknownExample(name.clone()))?;
        let record = FinetuneRecord {
            input: &e.kcf_content,
            output: e.labels.render_framed(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn export_finetune(
    dataset: &[LabeledExample],
    split: &SplitManifest,
) -> Result<FinetuneExport, DatasetError> {
    Ok(FinetuneExport {
        train: finetune_lines(dataset, &split.train)?,
        val: finetune_lines(dataset, &split.val)?,
        test: finetune_lines(dataset, &split.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{reference_rules, reference_umi};
    use crate::label::parse_labels;
    use alloc::vec;
    use proptest::prelude::*;

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

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i:06}.yaml")).collect()
    }

    fn example(umi: &Umi, name: &str, labels: &str) -> LabeledExample {
        LabeledExample {
            kcf_content: format!("kind: Pod\nmetadata:\n  name: {name}\n"),
            source_name: name.to_string(),
            labels: parse_labels(labels, umi).0,
            token_estimate: 5,
        }
    }

    #[test]
    fn labeled_dataset_from_rules() {
        let umi = reference_umi();
        let rules = reference_rules(&umi);
        let labeler = RuleLabeler {
            rules: &rules,
            umi: &umi,
        };
        let (ex, stats) = build_labeled_dataset(
            &[Document::new("fig1.yaml", FIG1)],
            &labeler,
            LabelingOptions::default(),
        )
        .unwrap();
        assert_eq!(ex.len(), 1);
        assert!(ex[0].labels.finding_ids().contains(&0));
        assert_eq!(ex[0].token_estimate, crate::kcf::estimate_tokens(FIG1));
        assert_eq!(stats.label_frequencies[&0], 1);
        assert_eq!(
            build_labeled_dataset(&[], &labeler, LabelingOptions::default()),
            Err(DatasetError::EmptyCorpus)
        );
        assert_eq!(
            build_labeled_dataset(
                &[Document::new("a", "a: [")],
                &labeler,
                LabelingOptions::default()
            ),
            Err(DatasetError::NothingParsed)
        );
    }

    #[test]
    fn token_limit_excludes_files() {
        let umi = reference_umi();
        let rules = reference_rules(&umi);
        let labeler = RuleLabeler {
            rules: &rules,
            umi: &umi,
        };
        let mut corpus = Vec::new();
        for i in 0..10 {
            let mut text = format!("kind: ConfigMap\nmetadata:\n  name: c{i}\ndata:\n");
            let extra = if i < 2 { 30 } else { 3 };
            for j in 0..extra {
                text.push_str(&format!("  k{j}: v\n"));
            }
            corpus.push(Document::new(format!("c{i}.yaml"), text));
        }
        let opts = LabelingOptions {
            token_limit: 40,
            estimator: TokenEstimator::Whitespace,
        };
        let (ex, stats) = build_labeled_dataset(&corpus, &labeler, opts).unwrap();
        assert_eq!(ex.len(), 8);
        assert_eq!(stats.excluded_over_limit, 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let umi = reference_umi();
        let ex = vec![example(&umi, "a", "a+1 a+7"), example(&umi, "b", "b+169")];
        let text = write_jsonl(&ex);
        assert_eq!(read_jsonl(&text, &umi).unwrap(), ex);
        assert!(matches!(
            read_jsonl("{}\n", &umi),
            Err(DatasetError::Format { line: 1, .. })
        ));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let m = make_split(&names(10), 1, DEFAULT_RATIOS).unwrap();
        assert_eq!(m.sizes(), (8, 1, 1));
        assert_eq!(make_split(&names(10), 1, DEFAULT_RATIOS).unwrap(), m);
        assert_ne!(
            make_split(&names(50), 1, DEFAULT_RATIOS).unwrap().test,
            make_split(&names(50), 2, DEFAULT_RATIOS).unwrap().test
        );
        assert_eq!(
            split_sizes(229_989, DEFAULT_RATIOS),
            (183_991, 22_999, 22_999)
        );
        assert_eq!(
            make_split(&names(9), 1, DEFAULT_RATIOS),
            Err(DatasetError::TooSmall(9))
        );
        assert_eq!(
            make_split(&names(20), 1, (0.5, 0.1, 0.1)),
            Err(DatasetError::InvalidRatios)
        );
        let mut dup = names(12);
        dup[3] = dup[4].clone();
        assert!(matches!(
            make_split(&dup, 1, DEFAULT_RATIOS),
            Err(DatasetError::DuplicateName(_))
        ));
    }

    #[test]
    fn masking_lines() {
        assert_eq!(mask_line("    image: nginx\n"), "    image: <MASK>\n");
        assert_eq!(mask_line("  - name: a\n"), "  - name: <MASK>\n");
        assert_eq!(mask_line("spec:\n"), "<MASK>\n");
        assert_eq!(mask_line("  - web\r\n"), "  - <MASK>\r\n");
        let doc: String = (0..100).map(|i| format!("key{i}: value{i}\n")).collect();
        let (masked, k, units) = mask_document(&doc, 0.15, ContextUnit::Line, 3, "d");
        assert_eq!((k, units), (15, 100));
        assert_eq!(masked.matches(MASK_TOKEN).count(), 15);
        assert_eq!(masked.lines().count(), 100);
    }

    #[test]
    fn nsp_halves() {
        assert_eq!(
            nsp_split("a: 1\nb: 2\n", ContextUnit::Line),
            Some(("a: 1\n".into(), "b: 2\n".into()))
        );
        assert_eq!(nsp_split("a: 1\n", ContextUnit::Line), None);
        assert_eq!(
            nsp_split("a b c d", ContextUnit::Word),
            Some(("a b ".into(), "c d".into()))
        );
    }

    #[test]
    fn contextual_builder_skips_bad_documents() {
        let corpus = vec![
            Document::new("empty", "  \n"),
            Document::new("masked", "a: <MASK>\nb: 1\n"),
            Document::new("one", "a: 1\n"),
            Document::new("fig1", FIG1),
        ];
        let (ex, diags) = build_contextual(&corpus, 7, ContextualOptions::default());
        assert_eq!(ex.len(), 3);
        assert_eq!(diags.len(), 3);
        let nsp = ex
            .iter()
            .find(|e| e.variant == ContextVariant::Nsp)
            .unwrap();
        assert_eq!(format!("{}{}", nsp.input, nsp.target), FIG1);
    }

    #[test]
    fn stratified_examples() {
        let umi = reference_umi();
        let mut ds = Vec::new();
        for (id, n) in [(1u32, 5usize), (2, 2), (3, 7)] {
            for i in 0..n {
                ds.push(example(&umi, &format!("r{id}x{i}"), &format!("r+{id}")));
            }
        }
        let count = |s: &[LabeledExample], id: u32| {
            s.iter().filter(|e| e.labels.ids().contains(&id)).count()
        };
        let s = stratified_sample(&ds, 4, 9);
        assert_eq!((count(&s, 1), count(&s, 2), count(&s, 3)), (4, 2, 4));
        let s = stratified_sample(&ds, 1, 9);
        assert_eq!(s.len(), 3);
        assert_eq!(stratified_sample(&ds, 100, 9), ds);
    }

    #[test]
    fn finetune_records() {
        let umi = reference_umi();
        let rules = reference_rules(&umi);
        let labeler = RuleLabeler {
            rules: &rules,
            umi: &umi,
        };
        let (ex, _) = build_labeled_dataset(
            &[Document::new("fig1.yaml", FIG1)],
            &labeler,
            LabelingOptions::default(),
        )
        .unwrap();
        let line = finetune_lines(&ex, &["fig1.yaml".to_string()]).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert!(v["output"].as_str().unwrap().contains("*pod-name+0$"));
        assert_eq!(v["input"], FIG1);
        let clean = vec![example(&umi, "c", "c+169")];
        let line = finetune_lines(&clean, &["c".to_string()]).unwrap();
        assert!(line.contains("\"output\":\"*c+169$\""));
        assert!(matches!(
            finetune_lines(&clean, &["zz".to_string()]),
            Err(DatasetError::UnknownExample(_))
        ));
    }

    proptest! {
        #[test]
        fn split_partitions_exactly(n in 10usize..400, seed in any::<u64>()) {
            let all = names(n);
            let m = make_split(&all, seed, DEFAULT_RATIOS).unwrap();
            let mut joined: Vec<String> = m.train.iter().chain(&m.val).chain(&m.test).cloned().collect();
            joined.sort();
            prop_assert_eq!(joined, all);
            let (t, v, s) = m.sizes();
            prop_assert!((t as f64 - 0.8 * n as f64).abs() <= 1.0);
            prop_assert!((v as f64 - 0.1 * n as f64).abs() <= 1.0);
            prop_assert!((s as f64 - 0.1 * n as f64).abs() <= 1.0);
        }

        #[test]
        fn nsp_reconstructs(text in "[a-z: \\-\n]{0,200}") {
            for unit in [ContextUnit::Line, ContextUnit::Word] {
                if let Some((a, b)) = nsp_split(&text, unit) {
                    prop_assert_eq!(format!("{a}{b}"), text.clone());
                }
            }
        }

        #[test]
        fn masked_fraction_in_band(lines in 20usize..200, seed in any::<u64>()) {
            let doc: String = (0..lines).map(|i| format!("  key{i}: v\n")).collect();
            let (_, k, units) = mask_document(&doc, 0.15, ContextUnit::Line, seed, "p");
            let f = k as f64 / units as f64;
            prop_assert!((0.13..=0.17).contains(&f), "{}", f);
        }

        #[test]
        fn stratified_never_exceeds_support(picks in prop::collection::vec((0u32..6, 0u32..6), 1..40), count in 1usize..10) {
            let umi = reference_umi();
            let ds: Vec<LabeledExample> = picks.iter().enumerate()
                .map(|(i, (a, b))| example(&umi, &format!("e{i}"), &format!("x+{a} x+{b}")))
                .collect();
            let s = stratified_sample(&ds, count, 1);
            for id in 0..6u32 {
                let support = ds.iter().filter(|e| e.labels.ids().contains(&id)).count();
                let got = s.iter().filter(|e| e.labels.ids().contains(&id)).count();
                prop_assert!(got <= support);
                prop_assert!(got >= count.min(support));
            }
            prop_assert_eq!(stratified_sample(&ds, 1000, 1), ds);
        }
    }
}
