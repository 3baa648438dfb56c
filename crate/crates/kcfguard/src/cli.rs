//! `kcfguard` command line.
//!
//! Exit codes: 0 clean, 1 findings (or F1 below the floor), 2 usage, 3 internal.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use kcfguard_core::dataset::{
    build_contextual, build_labeled_dataset, export_finetune, make_split, read_jsonl,
    stratified_sample, write_jsonl, ContextualOptions, Document, LabelingOptions, RuleLabeler,
    DEFAULT_RATIOS,
};
use kcfguard_core::eval::{
    apply_verdicts, audit_fps, parse_verdicts, run_adaptation, tally, weighted_metrics,
    AdaptationConfig, AdaptationResult, BackendFactory, ConditionedFactory,
};
use kcfguard_core::label::{decode, EncodedLabel};
use kcfguard_core::resolve::{default_resolve_examples, detect, resolve, LineNumber};
use kcfguard_core::rules::{ensemble, evaluate_rules};
use kcfguard_core::seed::sub_seed;
use kcfguard_core::umi::{
    build_entity_match_prompt, default_match_examples, merge_matches, parse_entity_matches, Alias,
    Override,
};
use kcfguard_core::{
    CompletionBackend, CompletionRequest, DetectionRecord, KcfDocument, LabelSet, LabeledExample,
    ResolutionReport, RuleSet, Umi,
};

use crate::config::{BackendKind, CliConfig, ConfigError};
use crate::io::{
    collect_files, label_map_json, load_rules, load_umi, read_corpus, read_label_map, read_text,
    save_umi, source_name, write_json, write_text, IoError,
};
use crate::limiter::{load_replay_dir, LimitedBackend};
use crate::remote::{RemoteBackend, Transport, UreqTransport};
use crate::tools::{run_external_tool, Tool, ToolError};

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_FINDINGS: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "kcfguard",
    version,
    about = "Kubernetes configuration misconfig detection and resolution"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Index file; the bundled index when omitted.
    #[arg(long, global = true)]
    pub umi: Option<PathBuf>,
    /// Rule pack; the bundled pack when omitted.
    #[arg(long, global = true)]
    pub rules: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub replay_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    #[arg(long, global = true)]
    pub token_limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Detector {
    Rules,
    Llm,
    Both,
}

#[derive(Debug, Args)]
pub struct ToolArgs {
    /// External scanners to run (checkov, kube-linter, terrascan).
    #[arg(long = "tool", value_delimiter = ',')]
    pub tools: Vec<String>,
    /// Executable override, `tool=path`.
    #[arg(long = "tool-bin", value_parser = parse_tool_bin)]
    pub tool_bins: Vec<(String, PathBuf)>,
}

fn parse_tool_bin(s: &str) -> Result<(String, PathBuf), String> {
    let (t, p) = s.split_once('=').ok_or("expected tool=path")?;
    Tool::parse(t).map_err(|e| e.to_string())?;
    Ok((t.to_string(), PathBuf::from(p)))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect misconfigs in files or directories.
    Scan {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "rules")]
        detector: Detector,
        #[command(flatten)]
        tools: ToolArgs,
        /// Also localize and explain every finding.
        #[arg(long)]
        resolve: bool,
    },
    /// Build an index from tool rule lists.
    BuildUmi {
        /// JSON array of `{tool, rule_id, text}`.
        #[arg(long)]
        aliases: PathBuf,
        /// JSON array of `{tool, rule_id, group}`.
        #[arg(long)]
        overrides: Option<PathBuf>,
        /// Saved matching completions, one file per tool pair; skips the backend.
        #[arg(long = "matches")]
        matches: Vec<PathBuf>,
    },
    /// Ground-truth labels for a corpus.
    Label {
        corpus: PathBuf,
        #[command(flatten)]
        tools: ToolArgs,
    },
    /// Labeled, contextual, split and fine-tune datasets from a corpus.
    BuildDataset {
        corpus: PathBuf,
        /// Extra free-text documents for the contextual set.
        #[arg(long)]
        free_text: Option<PathBuf>,
        /// Also write a stratified sample with this many examples per label.
        #[arg(long)]
        stratified: Option<usize>,
    },
    /// Weighted metrics of predictions against ground truth (label maps).
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Restrict to the ids covered by a tool's aliases, or `rules`.
        #[arg(long)]
        scope: Option<String>,
        #[arg(long)]
        f1_floor: Option<f64>,
    },
    /// Detect with the backend, then localize and explain each finding.
    Resolve {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Adaptation experiment over a labeled dataset.
    Adapt {
        /// JSONL dataset from build-dataset.
        #[arg(long)]
        dataset: PathBuf,
        /// JSONL test set; the dataset's test split when omitted.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long = "m", value_delimiter = ',')]
        m_ids: Vec<u32>,
        #[arg(long = "s", value_delimiter = ',')]
        sample_sizes: Vec<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        old: Option<usize>,
        /// Write each adaptation set as JSONL.
        #[arg(long)]
        export: bool,
    },
    /// Print the encoded label for a resource and id.
    Encode { resource: String, id: u32 },
    /// Print the resource and description of an encoded label.
    Decode { label: String },
    /// False-positive audit cards.
    #[command(subcommand)]
    Audit(AuditCommand),
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    /// Sample files with false positives into markdown cards.
    Sample {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Corpus directory, for card texts.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        count: usize,
    },
    /// Read filled-in cards and report the adjusted metrics.
    Ingest {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        cards: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Io(IoError::Read { .. } | IoError::Invalid { .. }) => EXIT_USAGE,
            CliError::Io(IoError::Write { .. }) | CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

fn internal(e: impl ToString) -> CliError {
    CliError::Internal(e.to_string())
}

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

/// Runs with the process environment and the real HTTP transport.
pub fn run(
    args: impl IntoIterator<Item = OsString>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    run_with(
        args,
        out,
        err,
        &|k| std::env::var(k).ok(),
        Arc::new(UreqTransport),
    )
}

/// Runs with an injected environment and transport.
pub fn run_with(
    args: impl IntoIterator<Item = OsString>,
    out: &mut dyn Write,
    err: &mut dyn Write,
    env: &dyn Fn(&str) -> Option<String>,
    transport: Arc<dyn Transport>,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_CLEAN
            };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    match execute(cli, out, env, transport) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx {
    config: CliConfig,
    umi: Arc<Umi>,
    rules: Arc<RuleSet>,
    transport: Arc<dyn Transport>,
}

fn resolve_config(
    g: &GlobalArgs,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<CliConfig, CliError> {
    let mut c = match &g.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    c.apply_env(env)?;
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(b) = g.backend {
        c.backend.kind = b;
    }
    if let Some(p) = &g.umi {
        c.umi_path = Some(p.clone());
    }
    if let Some(p) = &g.rules {
        c.rules_path = Some(p.clone());
    }
    if let Some(p) = &g.output_dir {
        c.output_dir = p.clone();
    }
    if let Some(p) = &g.replay_dir {
        c.backend.replay_dir = Some(p.clone());
    }
    if let Some(e) = &g.endpoint {
        c.backend.endpoint = Some(e.clone());
    }
    if let Some(t) = g.token_limit {
        c.token_limit = t;
    }
    c.validate()?;
    Ok(c)
}

impl Ctx {
    fn backend(&self) -> Result<Box<dyn CompletionBackend>, CliError> {
        let spec = &self.config.backend;
        let b: Box<dyn CompletionBackend> = match spec.kind {
            BackendKind::MockRules => Box::new(kcfguard_core::gateway::MockRulesBackend::new(
                self.umi.clone(),
                self.rules.clone(),
            )),
            BackendKind::MockReplay => {
                let dir = spec
                    .replay_dir
                    .as_deref()
                    .ok_or_else(|| usage("replay dir missing"))?;
                Box::new(load_replay_dir(dir)?)
            }
            BackendKind::Remote => {
                let ep = spec
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| usage("endpoint missing"))?;
                Box::new(LimitedBackend::new(
                    RemoteBackend::new(ep, self.transport.clone())
                        .with_token(spec.token.clone())
                        .with_timeout(Duration::from_millis(spec.timeout_ms)),
                    spec.max_in_flight,
                ))
            }
        };
        Ok(b)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn seed(&self, stage: &str) -> Option<u64> {
        Some(sub_seed(self.config.seed, stage))
    }
}

fn execute(
    cli: Cli,
    out: &mut dyn Write,
    env: &dyn Fn(&str) -> Option<String>,
    transport: Arc<dyn Transport>,
) -> Result<i32, CliError> {
    let config = resolve_config(&cli.global, env)?;
    let umi = Arc::new(load_umi(config.umi_path.as_deref())?);
    let rules = Arc::new(load_rules(config.rules_path.as_deref(), &umi)?);
    let ctx = Ctx {
        config,
        umi,
        rules,
        transport,
    };
    match cli.command {
        Command::Scan {
            paths,
            detector,
            tools,
            resolve,
        } => cmd_scan(&ctx, &paths, detector, &tools, resolve, out),
        Command::BuildUmi {
            aliases,
            overrides,
            matches,
        } => cmd_build_umi(&ctx, &aliases, overrides.as_deref(), &matches, out),
        Command::Label { corpus, tools } => cmd_label(&ctx, &corpus, &tools, out),
        Command::BuildDataset {
            corpus,
            free_text,
            stratified,
        } => cmd_build_dataset(&ctx, &corpus, free_text.as_deref(), stratified, out),
        Command::Evaluate {
            predictions,
            ground_truth,
            scope,
            f1_floor,
        } => cmd_evaluate(
            &ctx,
            &predictions,
            &ground_truth,
            scope.as_deref(),
            f1_floor,
            out,
        ),
        Command::Resolve { paths } => cmd_resolve(&ctx, &paths, out),
        Command::Adapt {
            dataset,
            test,
            m_ids,
            sample_sizes,
            iterations,
            old,
            export,
        } => {
            let mut cfg = AdaptationConfig {
                seed: sub_seed(ctx.config.seed, "adapt"),
                ..AdaptationConfig::default()
            };
            if !m_ids.is_empty() {
                cfg.m_ids = m_ids;
            }
            if !sample_sizes.is_empty() {
                cfg.sample_sizes = sample_sizes;
            }
            if let Some(i) = iterations {
                cfg.iterations = i;
            }
            if let Some(o) = old {
                cfg.old_count = o;
            }
            cmd_adapt(&ctx, &dataset, test.as_deref(), cfg, export, out)
        }
        Command::Encode { resource, id } => {
            let label = EncodedLabel::encode(&resource, id, &ctx.umi).map_err(usage)?;
            writeln!(out, "{label}").map_err(internal)?;
            Ok(EXIT_CLEAN)
        }
        Command::Decode { label } => {
            let parsed = EncodedLabel::parse(&label).map_err(usage)?;
            let d = decode(&parsed, &ctx.umi).map_err(usage)?;
            writeln!(out, "{}\t{}\t{}", d.resource, d.misconfig_id, d.description)
                .map_err(internal)?;
            Ok(EXIT_CLEAN)
        }
        Command::Audit(AuditCommand::Sample {
            predictions,
            ground_truth,
            corpus,
            count,
        }) => cmd_audit_sample(
            &ctx,
            &predictions,
            &ground_truth,
            corpus.as_deref(),
            count,
            out,
        ),
        Command::Audit(AuditCommand::Ingest {
            predictions,
            ground_truth,
            cards,
        }) => cmd_audit_ingest(&ctx, &predictions, &ground_truth, &cards, out),
    }
}

/// A corpus file that parsed.
struct Parsed {
    path: PathBuf,
    doc: KcfDocument,
}

/// Reads and parses every file below `paths`; failures become diagnostics.
fn load_docs(paths: &[PathBuf], diagnostics: &mut Vec<String>) -> Result<Vec<Parsed>, CliError> {
    for p in paths {
        if !p.exists() {
            return Err(usage(format!("no such file or directory: {}", p.display())));
        }
    }
    let single_root = match paths {
        [p] if p.is_dir() => Some(p.as_path()),
        _ => None,
    };
    let mut out = Vec::new();
    for f in collect_files(paths)? {
        let name = source_name(&f, single_root);
        let text = match read_text(&f) {
            Ok(t) => t,
            Err(e) => {
                diagnostics.push(e.to_string());
                continue;
            }
        };
        match KcfDocument::parse(&text, &name) {
            Ok(doc) => {
                diagnostics.extend(doc.diagnostics().iter().map(|d| format!("{name}: {d}")));
                out.push(Parsed { path: f, doc });
            }
            Err(e) => diagnostics.push(format!("{name}: {e}")),
        }
    }
    Ok(out)
}

fn tool_bins(args: &ToolArgs) -> Result<Vec<(Tool, Option<PathBuf>)>, CliError> {
    let overrides: BTreeMap<&str, &PathBuf> = args
        .tool_bins
        .iter()
        .map(|(t, p)| (t.as_str(), p))
        .collect();
    args.tools
        .iter()
        .map(|t| {
            let tool = Tool::parse(t).map_err(usage)?;
            Ok((tool, overrides.get(tool.name()).map(|p| p.to_path_buf())))
        })
        .collect()
}

/// Internal rules plus any external tools; missing tools are dropped with a
/// diagnostic for the rest of the run.
fn ground_truth_record(
    ctx: &Ctx,
    p: &Parsed,
    tools: &mut Vec<(Tool, Option<PathBuf>)>,
    diagnostics: &mut Vec<String>,
) -> DetectionRecord {
    let mut records = vec![evaluate_rules(&p.doc, &ctx.rules, &ctx.umi)];
    let mut i = 0;
    while i < tools.len() {
        let (tool, bin) = &tools[i];
        match run_external_tool(*tool, bin.as_deref(), &p.path, &p.doc, &ctx.umi) {
            Ok(r) => records.push(r),
            Err(e @ ToolError::ToolNotFound(_)) => {
                diagnostics.push(format!("{e}; continuing with internal rules"));
                tools.remove(i);
                continue;
            }
            Err(e) => diagnostics.push(format!("{}: {e}", p.doc.source_name())),
        }
        i += 1;
    }
    if records.len() == 1 {
        records.pop().expect("one record")
    } else {
        ensemble(&records).expect("records share the file name")
    }
}

#[derive(Serialize)]
struct ScanReport<'a> {
    seed: u64,
    backend: String,
    records: &'a [DetectionRecord],
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    resolutions: &'a [ResolutionReport],
    diagnostics: &'a [String],
}

fn cmd_scan(
    ctx: &Ctx,
    paths: &[PathBuf],
    detector: Detector,
    tool_args: &ToolArgs,
    with_resolve: bool,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let mut diagnostics = Vec::new();
    let docs = load_docs(paths, &mut diagnostics)?;
    let mut tools = tool_bins(tool_args)?;
    let needs_backend = detector != Detector::Rules || with_resolve;
    let backend = if needs_backend {
        Some(ctx.backend()?)
    } else {
        None
    };
    let mut records = Vec::new();
    let mut resolutions = Vec::new();
    for p in &docs {
        let mut parts = Vec::new();
        if detector != Detector::Llm {
            parts.push(ground_truth_record(ctx, p, &mut tools, &mut diagnostics));
        }
        if let (Some(b), true) = (&backend, detector != Detector::Rules) {
            match detect(&p.doc, b.as_ref(), &ctx.umi, ctx.seed("detect")) {
                Ok(r) => parts.push(r),
                Err(e) => diagnostics.push(format!("{}: {e}", p.doc.source_name())),
            }
        }
        let record = match parts.len() {
            0 => continue,
            1 => parts.pop().expect("one record"),
            _ => ensemble(&parts).map_err(internal)?,
        };
        if let (Some(b), true) = (&backend, with_resolve) {
            resolutions.extend(resolve(
                &p.doc,
                &record,
                &ctx.umi,
                b.as_ref(),
                &default_resolve_examples(),
                ctx.seed("resolve"),
            ));
        }
        records.push(record);
    }
    let backend_name = backend.as_ref().map_or("none", |b| b.name()).to_string();
    write_json(
        &ctx.out("scan.json"),
        &ScanReport {
            seed: ctx.config.seed,
            backend: backend_name,
            records: &records,
            resolutions: &resolutions,
            diagnostics: &diagnostics,
        },
    )?;
    for r in &records {
        writeln!(out, "{}\t{}", r.kcf, r.labels.render()).map_err(internal)?;
        for l in r
            .labels
            .iter()
            .filter(|l| !ctx.umi.is_sentinel(l.misconfig_id()))
        {
            let desc = ctx.umi.description(l.misconfig_id()).unwrap_or("?");
            let line = r.evidence_for(l).map(|e| e.line).min();
            match line {
                Some(n) => writeln!(out, "  {l}\tline {n}\t{desc}"),
                None => writeln!(out, "  {l}\t{desc}"),
            }
            .map_err(internal)?;
        }
    }
    for d in &diagnostics {
        writeln!(out, "diagnostic: {d}").map_err(internal)?;
    }
    Ok(if records.iter().any(|r| r.labels.has_findings()) {
        EXIT_FINDINGS
    } else {
        EXIT_CLEAN
    })
}

#[derive(Serialize)]
struct UmiBuildReport {
    entries: usize,
    aliases: usize,
    diagnostics: Vec<String>,
}

fn cmd_build_umi(
    ctx: &Ctx,
    aliases_path: &Path,
    overrides_path: Option<&Path>,
    saved: &[PathBuf],
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let draft: Vec<Alias> = serde_json::from_str(&read_text(aliases_path)?)
        .map_err(|e| usage(format!("{}: {e}", aliases_path.display())))?;
    let overrides: Vec<Override> = match overrides_path {
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => Vec::new(),
    };
    let mut by_tool: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for a in &draft {
        by_tool
            .entry(a.tool.as_str())
            .or_default()
            .push(a.text.clone());
    }
    let tools: Vec<&str> = by_tool.keys().copied().collect();
    let mut pairs = Vec::new();
    let mut diagnostics = Vec::new();
    let mut saved_iter = saved.iter();
    let backend = match (saved.is_empty(), ctx.config.backend.kind) {
        (true, BackendKind::MockRules) => {
            diagnostics
                .push("mock-rules cannot match entities; only identical texts are grouped".into());
            None
        }
        (true, _) => Some(ctx.backend()?),
        (false, _) => None,
    };
    for (i, a) in tools.iter().enumerate() {
        for b in &tools[i + 1..] {
            let (la, lb) = (&by_tool[a], &by_tool[b]);
            let completion = if let Some(path) = saved_iter.next() {
                read_text(path)?
            } else if let Some(backend) = &backend {
                let prompt =
                    build_entity_match_prompt(la, lb, &default_match_examples()).map_err(usage)?;
                let mut req = CompletionRequest::new(prompt);
                req.seed = ctx.seed("build-umi");
                match backend.complete(&req) {
                    Ok(c) => c,
                    Err(e) => {
                        diagnostics.push(format!("{a}/{b}: {e}"));
                        continue;
                    }
                }
            } else {
                continue;
            };
            match parse_entity_matches(&completion, la, lb) {
                Ok(m) => {
                    diagnostics.extend(m.diagnostics.iter().map(|d| format!("{a}/{b}: {d}")));
                    pairs.extend(m.pairs);
                }
                Err(e) => diagnostics.push(format!("{a}/{b}: {e}")),
            }
        }
    }
    let umi = merge_matches(&draft, &pairs, &overrides).map_err(usage)?;
    save_umi(&umi, &ctx.out("umi.json"))?;
    let report = UmiBuildReport {
        entries: umi.len(),
        aliases: umi.entries().iter().map(|e| e.aliases.len()).sum(),
        diagnostics,
    };
    write_json(&ctx.out("build-umi.json"), &report)?;
    writeln!(
        out,
        "{} entries, {} aliases",
        report.entries, report.aliases
    )
    .map_err(internal)?;
    Ok(EXIT_CLEAN)
}

fn cmd_label(
    ctx: &Ctx,
    corpus: &Path,
    tool_args: &ToolArgs,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let mut diagnostics = Vec::new();
    let docs = load_docs(&[corpus.to_path_buf()], &mut diagnostics)?;
    let mut tools = tool_bins(tool_args)?;
    let records: Vec<DetectionRecord> = docs
        .iter()
        .map(|p| ground_truth_record(ctx, p, &mut tools, &mut diagnostics))
        .collect();
    let map: BTreeMap<String, LabelSet> = records
        .iter()
        .map(|r| (r.kcf.clone(), r.labels.clone()))
        .collect();
    write_json(&ctx.out("labels.json"), &label_map_json(&map))?;
    write_json(&ctx.out("label-records.json"), &records)?;
    write_json(&ctx.out("label-diagnostics.json"), &diagnostics)?;
    let with_findings = records.iter().filter(|r| r.labels.has_findings()).count();
    writeln!(
        out,
        "{} files labeled, {with_findings} with findings, {} diagnostics",
        records.len(),
        diagnostics.len()
    )
    .map_err(internal)?;
    Ok(EXIT_CLEAN)
}

fn cmd_build_dataset(
    ctx: &Ctx,
    corpus: &Path,
    free_text: Option<&Path>,
    stratified: Option<usize>,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    if !corpus.is_dir() {
        return Err(usage(format!("not a directory: {}", corpus.display())));
    }
    let (docs, read_diags) = read_corpus(corpus)?;
    let labeler = RuleLabeler {
        rules: &ctx.rules,
        umi: &ctx.umi,
    };
    let opts = LabelingOptions {
        token_limit: ctx.config.token_limit,
        ..LabelingOptions::default()
    };
    let (dataset, mut stats) = build_labeled_dataset(&docs, &labeler, opts).map_err(usage)?;
    stats.diagnostics.extend(read_diags);
    write_text(&ctx.out("dataset.jsonl"), &write_jsonl(&dataset))?;
    write_json(&ctx.out("dataset-stats.json"), &stats)?;

    let names: Vec<String> = dataset.iter().map(|e| e.source_name.clone()).collect();
    let split = make_split(&names, ctx.config.seed, DEFAULT_RATIOS).map_err(usage)?;
    write_json(&ctx.out("split.json"), &split)?;
    let ft = export_finetune(&dataset, &split).map_err(internal)?;
    write_text(&ctx.out("finetune/train.jsonl"), &ft.train)?;
    write_text(&ctx.out("finetune/val.jsonl"), &ft.val)?;
    write_text(&ctx.out("finetune/test.jsonl"), &ft.test)?;

    let mut ctx_docs: Vec<Document> = docs;
    if let Some(dir) = free_text {
        let (extra, _) = read_free_text(dir)?;
        ctx_docs.extend(extra);
    }
    let (contextual, ctx_diags) =
        build_contextual(&ctx_docs, ctx.config.seed, ContextualOptions::default());
    let mut lines = String::new();
    for e in &contextual {
        lines.push_str(&serde_json::to_string(e).map_err(internal)?);
        lines.push('\n');
    }
    write_text(&ctx.out("contextual.jsonl"), &lines)?;
    write_json(&ctx.out("contextual-diagnostics.json"), &ctx_diags)?;

    if let Some(n) = stratified {
        let sample = stratified_sample(&dataset, n, ctx.config.seed);
        write_text(&ctx.out("stratified.jsonl"), &write_jsonl(&sample))?;
    }
    let (a, b, c) = split.sizes();
    writeln!(
        out,
        "{} examples ({} over token limit, {} failed); split {a}/{b}/{c}; {} contextual examples",
        stats.examples,
        stats.excluded_over_limit,
        stats.failed,
        contextual.len()
    )
    .map_err(internal)?;
    Ok(EXIT_CLEAN)
}

/// Every regular file below `dir`, split into free-text documents.
fn read_free_text(dir: &Path) -> Result<(Vec<Document>, Vec<String>), CliError> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|source| IoError::Read {
            path: d.clone(),
            source,
        })?;
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut out = Vec::new();
    let mut diags = Vec::new();
    for f in files {
        match read_text(&f) {
            Ok(t) => out.extend(kcfguard_core::dataset::free_text_documents(
                &source_name(&f, Some(dir)),
                &t,
            )),
            Err(e) => diags.push(e.to_string()),
        }
    }
    Ok((out, diags))
}

fn scope_for(ctx: &Ctx, scope: Option<&str>) -> Result<Option<BTreeSet<u32>>, CliError> {
    match scope {
        None => Ok(None),
        Some("rules") => Ok(Some(ctx.rules.coverage())),
        Some(tool) => {
            let cov = ctx.umi.tool_coverage(tool);
            if cov.is_empty() {
                return Err(usage(format!("no index aliases for tool `{tool}`")));
            }
            Ok(Some(cov))
        }
    }
}

fn cmd_evaluate(
    ctx: &Ctx,
    predictions: &Path,
    ground_truth: &Path,
    scope: Option<&str>,
    f1_floor: Option<f64>,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let pred = read_label_map(predictions, &ctx.umi)?;
    let gt = read_label_map(ground_truth, &ctx.umi)?;
    let scope = scope_for(ctx, scope)?;
    let t = tally(&pred, &gt, scope.as_ref(), &ctx.umi).map_err(usage)?;
    let report = weighted_metrics(&t).map_err(usage)?;
    write_json(&ctx.out("report.json"), &report)?;
    write_json(&ctx.out("tally.json"), &t)?;
    let text = report.render_text();
    write_text(&ctx.out("report.txt"), &text)?;
    out.write_all(text.as_bytes()).map_err(internal)?;
    let floor = f1_floor.or(ctx.config.f1_floor);
    match floor {
        Some(f) if report.weighted_f1.mean < f => {
            writeln!(
                out,
                "weighted f1 {:.4} is below the floor {f}",
                report.weighted_f1.mean
            )
            .map_err(internal)?;
            Ok(EXIT_FINDINGS)
        }
        _ => Ok(EXIT_CLEAN),
    }
}

fn cmd_resolve(ctx: &Ctx, paths: &[PathBuf], out: &mut dyn Write) -> Result<i32, CliError> {
    let mut diagnostics = Vec::new();
    let docs = load_docs(paths, &mut diagnostics)?;
    let backend = ctx.backend()?;
    let examples = default_resolve_examples();
    let mut reports = Vec::new();
    for p in &docs {
        let record = match detect(&p.doc, backend.as_ref(), &ctx.umi, ctx.seed("detect")) {
            Ok(r) => r,
            Err(e) => {
                diagnostics.push(format!("{}: {e}", p.doc.source_name()));
                continue;
            }
        };
        reports.extend(resolve(
            &p.doc,
            &record,
            &ctx.umi,
            backend.as_ref(),
            &examples,
            ctx.seed("resolve"),
        ));
    }
    write_json(&ctx.out("resolutions.json"), &reports)?;
    for r in &reports {
        let line = match r.line_number {
            LineNumber::At(n) => n.to_string(),
            LineNumber::Absent => "-".to_string(),
        };
        writeln!(
            out,
            "{}\t{}+{}\tline {line}\t{:?}\t{}",
            r.kcf,
            r.misconfig.resource,
            r.misconfig.misconfig_id,
            r.localization_verified,
            r.fix_suggestion
        )
        .map_err(internal)?;
    }
    for d in &diagnostics {
        writeln!(out, "diagnostic: {d}").map_err(internal)?;
    }
    Ok(if reports.is_empty() {
        EXIT_CLEAN
    } else {
        EXIT_FINDINGS
    })
}

/// Adaptation with a non-mock backend: the detector does not change between
/// iterations; real fine-tuning happens outside on the exported sets.
struct FixedFactory<'a>(&'a Ctx);

impl BackendFactory for FixedFactory<'_> {
    fn build(&self, _: &[LabeledExample]) -> Box<dyn CompletionBackend> {
        self.0.backend().expect("backend validated before the run")
    }
}

fn cmd_adapt(
    ctx: &Ctx,
    dataset_path: &Path,
    test_path: Option<&Path>,
    cfg: AdaptationConfig,
    export: bool,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let dataset = read_jsonl(&read_text(dataset_path)?, &ctx.umi).map_err(usage)?;
    let test_set: Vec<LabeledExample> = match test_path {
        Some(p) => read_jsonl(&read_text(p)?, &ctx.umi).map_err(usage)?,
        None => {
            let names: Vec<String> = dataset.iter().map(|e| e.source_name.clone()).collect();
            let split = make_split(&names, ctx.config.seed, DEFAULT_RATIOS).map_err(usage)?;
            let test: BTreeSet<&String> = split.test.iter().collect();
            dataset
                .iter()
                .filter(|e| test.contains(&e.source_name))
                .cloned()
                .collect()
        }
    };
    let conditioned;
    let fixed;
    let factory: &dyn BackendFactory = match ctx.config.backend.kind {
        BackendKind::MockRules => {
            conditioned = ConditionedFactory {
                umi: ctx.umi.clone(),
                rules: ctx.rules.clone(),
                withheld: cfg.m_ids.iter().copied().collect(),
            };
            &conditioned
        }
        _ => {
            ctx.backend()?;
            fixed = FixedFactory(ctx);
            &fixed
        }
    };
    let mut export_err: Option<IoError> = None;
    let mut hook = |m: u32, s: usize, i: usize, set: &[LabeledExample]| {
        if export && export_err.is_none() {
            let path = ctx.out(&format!("adaptation/m{m}-s{s}-i{i}.jsonl"));
            if let Err(e) = write_text(&path, &write_jsonl(set)) {
                export_err = Some(e);
            }
        }
    };
    let results: Vec<AdaptationResult> =
        run_adaptation(&cfg, factory, &dataset, &test_set, &ctx.umi, &mut hook).map_err(usage)?;
    if let Some(e) = export_err {
        return Err(e.into());
    }
    write_json(&ctx.out("adaptation.json"), &results)?;
    writeln!(
        out,
        "{:>5} {:>3} {:>17} {:>17}",
        "m", "s", "precision", "recall"
    )
    .map_err(internal)?;
    for r in &results {
        writeln!(
            out,
            "{:>5} {:>3} {:>8.4} ± {:.4} {:>8.4} ± {:.4}",
            r.m, r.s, r.precision.mean, r.precision.std, r.recall.mean, r.recall.std
        )
        .map_err(internal)?;
    }
    Ok(EXIT_CLEAN)
}

fn card_file_name(kcf: &str) -> String {
    let safe: String = kcf
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.md")
}

fn cmd_audit_sample(
    ctx: &Ctx,
    predictions: &Path,
    ground_truth: &Path,
    corpus: Option<&Path>,
    count: usize,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let pred = read_label_map(predictions, &ctx.umi)?;
    let gt = read_label_map(ground_truth, &ctx.umi)?;
    let t = tally(&pred, &gt, None, &ctx.umi).map_err(usage)?;
    let mut bundle = audit_fps(&t, &pred, &gt, count, ctx.config.seed).map_err(usage)?;
    if let Some(dir) = corpus {
        let (docs, _) = read_corpus(dir)?;
        let texts: BTreeMap<String, String> = docs.into_iter().map(|d| (d.name, d.text)).collect();
        bundle.attach(&texts, Some(&ctx.rules));
    }
    for card in &bundle.cards {
        write_text(
            &ctx.out(&format!("audit/{}", card_file_name(&card.kcf))),
            &card.to_markdown(&ctx.umi),
        )?;
    }
    write_json(&ctx.out("audit/bundle.json"), &bundle)?;
    writeln!(
        out,
        "{} cards, {} false positives to review",
        bundle.cards.len(),
        bundle.sampled_fps()
    )
    .map_err(internal)?;
    Ok(EXIT_CLEAN)
}

fn cmd_audit_ingest(
    ctx: &Ctx,
    predictions: &Path,
    ground_truth: &Path,
    cards: &Path,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let pred = read_label_map(predictions, &ctx.umi)?;
    let gt = read_label_map(ground_truth, &ctx.umi)?;
    let t = tally(&pred, &gt, None, &ctx.umi).map_err(usage)?;
    let bundle: kcfguard_core::eval::AuditBundle =
        serde_json::from_str(&read_text(&cards.join("bundle.json"))?).map_err(usage)?;
    let mut verdicts = Vec::new();
    for card in &bundle.cards {
        let md = read_text(&cards.join(card_file_name(&card.kcf)))?;
        verdicts.extend(parse_verdicts(&card.kcf, &md));
    }
    let outcome = apply_verdicts(&t, &verdicts);
    let report = weighted_metrics(&outcome.adjusted).map_err(usage)?;
    write_json(&ctx.out("audit-outcome.json"), &outcome)?;
    write_json(&ctx.out("audit-report.json"), &report)?;
    writeln!(
        out,
        "reviewed {} false positives, {} flipped ({:.4})",
        outcome.reviewed_fps, outcome.flipped, outcome.flip_rate
    )
    .map_err(internal)?;
    out.write_all(report.render_text().as_bytes())
        .map_err(internal)?;
    Ok(EXIT_CLEAN)
}
