//! Confusion tallies, support-weighted metrics, the false-positive audit and
//! the adaptation protocol.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledExample;
use crate::gateway::{CompletionBackend, ConditionedMockBackend, GatewayError, MockRulesBackend};
use crate::kcf::KcfDocument;
use crate::label::{EncodedLabel, LabelSet};
use crate::resolve::detect;
use crate::rules::RuleSet;
use crate::seed::stage_rng;
use crate::umi::Umi;

pub const STD_DEFINITION: &str =
    "support-weighted population standard deviation of per-label scores";
pub const SAMPLE_STD_DEFINITION: &str = "sample standard deviation (n-1) over iterations";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("prediction and ground-truth files differ (only predicted: {only_predicted:?}, only in ground truth: {only_truth:?})")]
    KeyMismatch {
        only_predicted: Vec<String>,
        only_truth: Vec<String>,
    },
    #[error("ground truth has no labels inside the evaluated scope")]
    ZeroSupport,
    #[error("there are no false positives to audit")]
    NoFps,
    #[error("misconfig {m} has fewer than {s} examples in the dataset")]
    InsufficientExamples { m: u32, s: usize },
    #[error("only {available} examples free of the adaptation ids, {needed} needed")]
    InsufficientOld { needed: usize, available: usize },
    #[error("misconfig {0} never occurs in the test set")]
    MissingFromTestSet(u32),
    #[error("test file `{name}` does not parse: {message}")]
    Unparseable { name: String, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

/// Counts over (file, misconfig id) pairs. Resources are ignored and the
/// clean-file sentinel never gets a row.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTally {
    pub per_label: BTreeMap<u32, Counts>,
    pub support: BTreeMap<u32, u64>,
    /// Predicted ids missing from the index.
    pub unknown_fp: u64,
    /// Files where prediction and ground truth are both clean.
    pub clean_consensus: u64,
    pub files: u64,
}

impl ConfusionTally {
    pub fn total_fp(&self) -> u64 {
        self.per_label.values().map(|c| c.fp).sum()
    }

    pub fn counts(&self, id: u32) -> Counts {
        self.per_label.get(&id).copied().unwrap_or_default()
    }
}

fn finding_ids(set: &LabelSet, sentinel: u32) -> BTreeSet<u32> {
    set.iter()
        .map(EncodedLabel::misconfig_id)
        .filter(|&id| id != sentinel)
        .collect()
}

fn check_keys(
    predictions: &BTreeMap<String, LabelSet>,
    ground_truth: &BTreeMap<String, LabelSet>,
) -> Result<(), EvalError> {
    let only_predicted: Vec<String> = predictions
        .keys()
        .filter(|k| !ground_truth.contains_key(*k))
        .cloned()
        .collect();
    let only_truth: Vec<String> = ground_truth
        .keys()
        .filter(|k| !predictions.contains_key(*k))
        .cloned()
        .collect();
    if only_predicted.is_empty() && only_truth.is_empty() {
        Ok(())
    } else {
        Err(EvalError::KeyMismatch {
            only_predicted,
            only_truth,
        })
    }
}

/// Per-label TP/FP/FN/TN over every (file, id) pair of the label universe:
/// `scope` when given, otherwise every id seen on either side.
pub fn tally(
    predictions: &BTreeMap<String, LabelSet>,
    ground_truth: &BTreeMap<String, LabelSet>,
    scope: Option<&BTreeSet<u32>>,
    umi: &Umi,
) -> Result<ConfusionTally, EvalError> {
    check_keys(predictions, ground_truth)?;
    let sentinel = umi.sentinel_id();
    let mut out = ConfusionTally::default();
    let mut rows: Vec<(BTreeSet<u32>, BTreeSet<u32>)> = Vec::new();
    for (name, truth) in ground_truth {
        let mut p = finding_ids(&predictions[name], sentinel);
        let unknown: Vec<u32> = p.iter().copied().filter(|&id| !umi.contains(id)).collect();
        for id in unknown {
            p.remove(&id);
            out.unknown_fp += 1;
        }
        let mut g = finding_ids(truth, sentinel);
        if let Some(scope) = scope {
            p.retain(|id| scope.contains(id));
            g.retain(|id| scope.contains(id));
        }
        rows.push((p, g));
    }
    let universe: BTreeSet<u32> = match scope {
        Some(s) => s.iter().copied().filter(|&id| id != sentinel).collect(),
        None => rows
            .iter()
            .flat_map(|(p, g)| p.iter().chain(g))
            .copied()
            .collect(),
    };
    for &id in &universe {
        out.per_label.insert(id, Counts::default());
        out.support.insert(id, 0);
    }
    for (p, g) in &rows {
        out.files += 1;
        if p.is_empty() && g.is_empty() {
            out.clean_consensus += 1;
        }
        for &id in &universe {
            let c = out.per_label.get_mut(&id).expect("universe row");
            match (p.contains(&id), g.contains(&id)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
            if g.contains(&id) {
                *out.support.get_mut(&id).expect("universe row") += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub weighted_precision: MeanStd,
    pub weighted_recall: MeanStd,
    pub weighted_f1: MeanStd,
    pub per_label_metrics: BTreeMap<u32, LabelMetrics>,
    pub n_labels_covered: usize,
    pub unknown_fp: u64,
    pub std_definition: String,
}

/// Precision, recall and F1 of one row. Precision is 1 when nothing was
/// predicted.
pub fn label_metrics(c: Counts) -> LabelMetrics {
    let precision = if c.tp + c.fp == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let support = c.tp + c.fn_;
    let recall = if support == 0 {
        0.0
    } else {
        c.tp as f64 / support as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    LabelMetrics {
        precision,
        recall,
        f1,
        support,
    }
}

/// Weighted mean and weighted population standard deviation.
pub fn weighted_mean_std(values: &[(f64, f64)]) -> MeanStd {
    let total: f64 = values.iter().map(|(_, w)| w).sum();
    if total == 0.0 {
        return MeanStd {
            mean: 0.0,
            std: 0.0,
        };
    }
    let mean = values.iter().map(|(x, w)| x * w).sum::<f64>() / total;
    let var = values
        .iter()
        .map(|(x, w)| w * (x - mean) * (x - mean))
        .sum::<f64>()
        / total;
    MeanStd {
        mean,
        std: libm::sqrt(var),
    }
}

/// Mean and sample (n-1) standard deviation; std is 0 for fewer than two
/// values.
pub fn mean_std_sample(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd {
            mean: 0.0,
            std: 0.0,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        libm::sqrt(values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0))
    };
    MeanStd { mean, std }
}

/// Support-weighted precision, recall and F1 over labels with support.
pub fn weighted_metrics(tally: &ConfusionTally) -> Result<EvalReport, EvalError> {
    let per_label: BTreeMap<u32, LabelMetrics> = tally
        .per_label
        .iter()
        .map(|(&id, &c)| (id, label_metrics(c)))
        .filter(|(_, m)| m.support > 0)
        .collect();
    if per_label.is_empty() {
        return Err(EvalError::ZeroSupport);
    }
    let pick = |f: fn(&LabelMetrics) -> f64| {
        let v: Vec<(f64, f64)> = per_label
            .values()
            .map(|m| (f(m), m.support as f64))
            .collect();
        weighted_mean_std(&v)
    };
    Ok(EvalReport {
        weighted_precision: pick(|m| m.precision),
        weighted_recall: pick(|m| m.recall),
        weighted_f1: pick(|m| m.f1),
        n_labels_covered: per_label.len(),
        per_label_metrics: per_label,
        unknown_fp: tally.unknown_fp,
        std_definition: STD_DEFINITION.to_string(),
    })
}

impl EvalReport {
    /// Aligned-column text for people.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, name: &str, m: MeanStd| {
            let _ = writeln!(out, "{name:<20} {:>7.4} ± {:.4}", m.mean, m.std);
        };
        row(&mut out, "weighted precision", self.weighted_precision);
        row(&mut out, "weighted recall", self.weighted_recall);
        row(&mut out, "weighted f1", self.weighted_f1);
        let _ = writeln!(out, "labels covered       {:>7}", self.n_labels_covered);
        let _ = writeln!(out, "unknown-id fps       {:>7}", self.unknown_fp);
        let _ = writeln!(out, "(± is the {})\n", self.std_definition);
        let _ = writeln!(
            out,
            "{:>6} {:>9} {:>9} {:>9} {:>8}",
            "id", "precision", "recall", "f1", "support"
        );
        for (id, m) in &self.per_label_metrics {
            let _ = writeln!(
                out,
                "{id:>6} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                m.precision, m.recall, m.f1, m.support
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    /// The alleged false positive is a real misconfig.
    Tp,
    /// Confirmed false positive.
    Fp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditCard {
    pub kcf: String,
    pub fp_labels: Vec<EncodedLabel>,
    #[serde(default)]
    pub kcf_text: String,
    #[serde(default)]
    pub rationales: BTreeMap<u32, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditBundle {
    pub seed: u64,
    pub cards: Vec<AuditCard>,
}

/// Samples up to `sample_size` files that carry false positives.
pub fn audit_fps(
    tally: &ConfusionTally,
    predictions: &BTreeMap<String, LabelSet>,
    ground_truth: &BTreeMap<String, LabelSet>,
    sample_size: usize,
    seed: u64,
) -> Result<AuditBundle, EvalError> {
    if tally.total_fp() == 0 {
        return Err(EvalError::NoFps);
    }
    check_keys(predictions, ground_truth)?;
    let mut cards = Vec::new();
    for (name, predicted) in predictions {
        let truth: BTreeSet<u32> = ground_truth[name]
            .iter()
            .map(EncodedLabel::misconfig_id)
            .collect();
        let fps: Vec<EncodedLabel> = predicted
            .iter()
            .filter(|l| {
                tally.per_label.contains_key(&l.misconfig_id())
                    && !truth.contains(&l.misconfig_id())
            })
            .cloned()
            .collect();
        if !fps.is_empty() {
            cards.push(AuditCard {
                kcf: name.clone(),
                fp_labels: fps,
                kcf_text: String::new(),
                rationales: BTreeMap::new(),
            });
        }
    }
    cards.shuffle(&mut stage_rng(seed, "audit"));
    cards.truncate(sample_size);
    cards.sort_by(|a, b| a.kcf.cmp(&b.kcf));
    Ok(AuditBundle { seed, cards })
}

impl AuditBundle {
    /// Fills card texts and the rationale of the first rule per id.
    pub fn attach(&mut self, texts: &BTreeMap<String, String>, rules: Option<&RuleSet>) {
        for card in &mut self.cards {
            if let Some(t) = texts.get(&card.kcf) {
                card.kcf_text = t.clone();
            }
            if let Some(rules) = rules {
                for l in &card.fp_labels {
                    if let Some(r) = rules.rules_for(l.misconfig_id()).next() {
                        card.rationales
                            .insert(l.misconfig_id(), r.rationale.clone());
                    }
                }
            }
        }
    }

    pub fn sampled_fps(&self) -> usize {
        self.cards.iter().map(|c| c.fp_labels.len()).sum()
    }
}

pub const VERDICT_PREFIX: &str = "- verdict ";

impl AuditCard {
    /// Review card with one blank verdict line per false positive.
    pub fn to_markdown(&self, umi: &Umi) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}\n", self.kcf);
        if !self.kcf_text.is_empty() {
            out.push_str("```yaml\n");
            out.push_str(&self.kcf_text);
            if !self.kcf_text.ends_with('\n') {
                out.push('\n');
            }
            out.push_str("```\n\n");
        }
        out.push_str("Write `tp` (real misconfig) or `fp` after each colon.\n\n");
        for l in &self.fp_labels {
            let id = l.misconfig_id();
            let _ = writeln!(out, "## `{l}` {}", umi.description(id).unwrap_or(""));
            if let Some(r) = self.rationales.get(&id) {
                let _ = writeln!(out, "rule: {r}");
            }
            let _ = writeln!(out, "{VERDICT_PREFIX}`{l}`:\n");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictEntry {
    pub kcf: String,
    pub label: EncodedLabel,
    pub verdict: Verdict,
}

/// Reads filled-in verdict lines of one card. Blank or unreadable verdicts
/// are skipped.
pub fn parse_verdicts(kcf: &str, markdown: &str) -> Vec<VerdictEntry> {
    let mut out = Vec::new();
    for line in markdown.lines() {
        let Some(rest) = line.strip_prefix(VERDICT_PREFIX) else {
            continue;
        };
        let Some((label, verdict)) = rest.split_once(':') else {
            continue;
        };
        let Ok(label) = EncodedLabel::parse(label.trim().trim_matches('`')) else {
            continue;
        };
        let verdict = match verdict.trim().to_ascii_lowercase().as_str() {
            "tp" => Verdict::Tp,
            "fp" => Verdict::Fp,
            _ => continue,
        };
        out.push(VerdictEntry {
            kcf: kcf.to_string(),
            label,
            verdict,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditOutcome {
    pub reviewed_fps: u64,
    pub flipped: u64,
    pub flip_rate: f64,
    pub adjusted: ConfusionTally,
}

/// Moves every flipped false positive into the true positives (its support
/// grows by one).
pub fn apply_verdicts(tally: &ConfusionTally, verdicts: &[VerdictEntry]) -> AuditOutcome {
    let mut adjusted = tally.clone();
    let mut flipped = 0;
    let mut reviewed = 0;
    let mut seen = BTreeSet::new();
    for v in verdicts {
        let id = v.label.misconfig_id();
        if !seen.insert((v.kcf.clone(), id)) {
            continue;
        }
        let Some(c) = adjusted.per_label.get_mut(&id) else {
            continue;
        };
        reviewed += 1;
        if v.verdict == Verdict::Tp && c.fp > 0 {
            c.fp -= 1;
            c.tp += 1;
            *adjusted.support.entry(id).or_default() += 1;
            flipped += 1;
        }
    }
    AuditOutcome {
        reviewed_fps: reviewed,
        flipped,
        flip_rate: if reviewed == 0 {
            0.0
        } else {
            flipped as f64 / reviewed as f64
        },
        adjusted,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub m_ids: Vec<u32>,
    pub sample_sizes: Vec<usize>,
    pub iterations: usize,
    pub old_count: usize,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            m_ids: alloc::vec![51, 97, 103, 139, 140],
            sample_sizes: alloc::vec![1, 2, 5],
            iterations: 10,
            old_count: 50,
            seed: crate::seed::DEFAULT_SEED,
        }
    }
}

/// Turns an adaptation set into a detector.
pub trait BackendFactory {
    fn build(&self, adaptation_set: &[LabeledExample]) -> Box<dyn CompletionBackend>;
}

/// Oracle that only knows the withheld ids present in its adaptation set.
pub struct ConditionedFactory {
    pub umi: Arc<Umi>,
    pub rules: Arc<RuleSet>,
    pub withheld: BTreeSet<u32>,
}

impl BackendFactory for ConditionedFactory {
    fn build(&self, adaptation_set: &[LabeledExample]) -> Box<dyn CompletionBackend> {
        let learned: BTreeSet<u32> = adaptation_set.iter().flat_map(|e| e.labels.ids()).collect();
        Box::new(ConditionedMockBackend::new(
            MockRulesBackend::new(self.umi.clone(), self.rules.clone()),
            &self.withheld,
            &learned,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationScore {
    pub precision: f64,
    pub recall: f64,
    pub adaptation_set_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationResult {
    pub m: u32,
    pub s: usize,
    pub iterations: Vec<IterationScore>,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub std_definition: String,
}

impl AdaptationResult {
    pub fn from_scores(m: u32, s: usize, iterations: Vec<IterationScore>) -> Self {
        let p: Vec<f64> = iterations.iter().map(|i| i.precision).collect();
        let r: Vec<f64> = iterations.iter().map(|i| i.recall).collect();
        AdaptationResult {
            m,
            s,
            precision: mean_std_sample(&p),
            recall: mean_std_sample(&r),
            iterations,
            std_definition: SAMPLE_STD_DEFINITION.to_string(),
        }
    }
}

/// Called with (m, s, iteration, adaptation set) before each evaluation.
pub type ExportHook<'a> = dyn FnMut(u32, usize, usize, &[LabeledExample]) + 'a;

/// For each (m, s): `iterations` rounds of sampling `s` examples labeled
/// with `m`, merging them with a fixed set of `old_count` examples free of
/// every adaptation id, building a detector and scoring `m` on the test set.
pub fn run_adaptation(
    config: &AdaptationConfig,
    factory: &dyn BackendFactory,
    dataset: &[LabeledExample],
    test_set: &[LabeledExample],
    umi: &Umi,
    export: &mut ExportHook<'_>,
) -> Result<Vec<AdaptationResult>, EvalError> {
    let m_set: BTreeSet<u32> = config.m_ids.iter().copied().collect();
    let test_names: BTreeSet<&str> = test_set.iter().map(|e| e.source_name.as_str()).collect();
    let pool: Vec<&LabeledExample> = dataset
        .iter()
        .filter(|e| !test_names.contains(e.source_name.as_str()))
        .collect();
    let mut eligible_old: Vec<&LabeledExample> = pool
        .iter()
        .copied()
        .filter(|e| e.labels.ids().is_disjoint(&m_set))
        .collect();
    if eligible_old.len() < config.old_count {
        return Err(EvalError::InsufficientOld {
            needed: config.old_count,
            available: eligible_old.len(),
        });
    }
    eligible_old.shuffle(&mut stage_rng(config.seed, "adapt/old"));
    let old: Vec<LabeledExample> = eligible_old[..config.old_count]
        .iter()
        .map(|e| (*e).clone())
        .collect();

    let docs: Vec<KcfDocument> = test_set
        .iter()
        .map(|e| {
            KcfDocument::parse(&e.kcf_content, &e.source_name).map_err(|err| {
                EvalError::Unparseable {
                    name: e.source_name.clone(),
                    message: err.to_string(),
                }
            })
        })
        .collect::<Result<_, _>>()?;
    let truth: BTreeMap<String, LabelSet> = test_set
        .iter()
        .map(|e| (e.source_name.clone(), e.labels.clone()))
        .collect();

    let mut results = Vec::new();
    for &m in &config.m_ids {
        if !test_set.iter().any(|e| e.labels.ids().contains(&m)) {
            return Err(EvalError::MissingFromTestSet(m));
        }
        let carriers: Vec<&LabeledExample> = pool
            .iter()
            .copied()
            .filter(|e| e.labels.ids().contains(&m))
            .collect();
        for &s in &config.sample_sizes {
            if carriers.len() < s {
                return Err(EvalError::InsufficientExamples { m, s });
            }
            let mut scores = Vec::new();
            for i in 0..config.iterations {
                let mut rng = stage_rng(config.seed, &format!("adapt/{m}/{s}/{i}"));
                let picked = rand::seq::index::sample(&mut rng, carriers.len(), s);
                let mut set = old.clone();
                set.extend(picked.into_iter().map(|j| carriers[j].clone()));
                export(m, s, i + 1, &set);
                let backend = factory.build(&set);
                let mut predictions = BTreeMap::new();
                for doc in &docs {
                    let record = detect(doc, backend.as_ref(), umi, Some(config.seed))?;
                    predictions.insert(doc.source_name().to_string(), record.labels);
                }
                let scope: BTreeSet<u32> = [m].into_iter().collect();
                let t = tally(&predictions, &truth, Some(&scope), umi)?;
                let metrics = label_metrics(t.counts(m));
                scores.push(IterationScore {
                    precision: metrics.precision,
                    recall: metrics.recall,
                    adaptation_set_size: set.len(),
                });
            }
            results.push(AdaptationResult::from_scores(m, s, scores));
        }
    }
    Ok(results)
}
