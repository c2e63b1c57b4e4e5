//! Command-line entry point: argument parsing, config merging, and the
//! table writers behind each subcommand.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analytics::deciles::{assign_deciles, DEFAULT_DECILES};
use crate::analytics::duration::{DESIGNATED_DAYS, DESIGNATED_MINUTES, DESIGNATED_MINUTES_PER_DAY};
use crate::analytics::longitudinal::{user_slopes, DEFAULT_MIN_DAYS};
use crate::analytics::scales::{bundled_scales, change_scores, load_scales, pooled_change, read_scale_responses, score_all, ChangeScores};
use crate::analytics::stats::MeanSe;
use crate::analytics::survey::{read_survey, survey_bucket_summary, SurveyResponse};
use crate::analytics::users::{cohort_summary, sorted_activation_curve, user_activation_fractions, Cohort, UserStats};
use crate::cascade::{classify_all, read_results, write_results, CascadeOptions, ConversationResult, DEFAULT_K};
use crate::corpus::{load_corpus, CorpusSchema, DEFAULT_CONTEXT_WINDOW};
use crate::judge::{BackendKind, JudgeConfig, RateLimit, RemoteConfig, RephrasingVote};
use crate::language::{passes_english_filter, user_language_share, StopwordDetector};
use crate::manifest::{JudgeSummary, Manifest};
use crate::simgen::{generate, SimSpec};
use crate::taxonomy::{load_taxonomy, PromptTemplate, Taxonomy};
use crate::topics::{group_average, run_topics, user_distributions, TopicCatalog};

pub const DEFAULT_ENGLISH_THRESHOLD: f64 = 0.8;
pub const DEFAULT_MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("no input results")]
    NoResults,
    #[error("judge failure rate {rate:.4} exceeds cap {cap:.4}")]
    FailureCap { rate: f64, cap: f64 },
    #[error("{0}")]
    Input(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

/// Settings shared by every subcommand. Loaded from `--config` (TOML) and
/// overridden field by field by command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub prompt_template: Option<PathBuf>,
    pub judge: JudgeConfig,
    /// Per-stage judges for topic attribution; fall back to `judge`.
    pub summary_judge: Option<JudgeConfig>,
    pub category_judge: Option<JudgeConfig>,
    pub k: usize,
    pub context_window: usize,
    pub whole_conversation: bool,
    pub gating: bool,
    pub english_threshold: f64,
    pub max_failure_rate: f64,
    pub min_days: usize,
    pub deciles: usize,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub spec: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub cohorts: Option<PathBuf>,
    pub survey: Option<PathBuf>,
    pub scales: Option<PathBuf>,
    pub scale_definitions: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            taxonomy: None,
            prompt_template: None,
            judge: JudgeConfig::default(),
            summary_judge: None,
            category_judge: None,
            k: DEFAULT_K,
            context_window: DEFAULT_CONTEXT_WINDOW,
            whole_conversation: false,
            gating: true,
            english_threshold: DEFAULT_ENGLISH_THRESHOLD,
            max_failure_rate: DEFAULT_MAX_FAILURE_RATE,
            min_days: DEFAULT_MIN_DAYS,
            deciles: DEFAULT_DECILES,
            out: None,
            seed: None,
            spec: None,
            results: None,
            cohorts: None,
            survey: None,
            scales: None,
            scale_definitions: None,
            catalog: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.k < 1 {
            return bad("k must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.english_threshold) {
            return bad("english threshold must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return bad("max failure rate must be in [0, 1]");
        }
        if self.min_days < 2 {
            return bad("min days must be at least 2");
        }
        if self.deciles < 1 {
            return bad("decile count must be at least 1");
        }
        for j in [Some(&self.judge), self.summary_judge.as_ref(), self.category_judge.as_ref()]
            .into_iter()
            .flatten()
        {
            j.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self
            .out
            .clone()
            .ok_or_else(|| CliError::Config("--out is required".into()))?;
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Config(format!("output directory {} not writable: {e}", dir.display())))?;
        Ok(dir)
    }
}

fn required(p: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    let p = p
        .clone()
        .ok_or_else(|| CliError::Config(format!("{flag} is required")))?;
    if !p.exists() {
        return Err(CliError::MissingInput(p.display().to_string()));
    }
    Ok(p)
}

fn optional(p: &Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
    match p {
        Some(p) if !p.exists() => Err(CliError::MissingInput(p.display().to_string())),
        other => Ok(other.clone()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "emocue", version, about = "Affective-cue classification and usage analytics for chat corpora")]
pub struct Cli {
    /// TOML run config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, scripted-judge rules, and ground truth.
    Simulate(SimulateArgs),
    /// Run the classifier cascade over a corpus.
    Classify(ClassifyArgs),
    /// Per-user fractions, cohort summaries, sorted curves, usage deciles,
    /// and scale changes.
    Aggregate(AnalyticsArgs),
    /// Per-user activation slopes over days.
    Longitudinal(AnalyticsArgs),
    /// Survey answer buckets against activation fractions.
    Survey(AnalyticsArgs),
    /// Summarize and categorize conversations; topic distributions.
    Topics(TopicsArgs),
    /// Every analytics table plus a summary, from one results file.
    Report(AnalyticsArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation spec (TOML).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed set in the --spec file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Taxonomy to plant activations for (default: bundled V1).
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    /// Verdict backend.
    #[arg(long, value_enum)]
    pub judge: Option<BackendKind>,
    /// Scripted-judge rules file (JSON).
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Remote judge endpoint URL (chat-completions style).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Remote judge model name.
    #[arg(long)]
    pub model: Option<String>,
    /// Cap on concurrent judge calls.
    #[arg(long)]
    pub max_concurrency: Option<usize>,
    /// Directory for the persistent verdict cache.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Attempts per judge call, including the first.
    #[arg(long)]
    pub max_attempts: Option<u32>,
    /// Backoff before the second attempt, doubled after each retry.
    #[arg(long)]
    pub backoff_ms: Option<u64>,
    /// Judge requests per second (token bucket); unlimited when absent.
    #[arg(long)]
    pub rate_limit: Option<f64>,
    /// Majority vote over prompt rephrasings.
    #[arg(long, value_enum)]
    pub rephrasing_vote: Option<RephrasingVote>,
}

impl JudgeArgs {
    fn apply(&self, j: &mut JudgeConfig) {
        if let Some(b) = self.judge {
            j.backend = b;
        }
        if self.rules.is_some() {
            j.rules = self.rules.clone();
        }
        if self.endpoint.is_some() || self.model.is_some() {
            let mut r = j.remote.clone().unwrap_or(RemoteConfig {
                endpoint: String::new(),
                model: String::new(),
                max_tokens: 64,
                timeout_secs: 60,
            });
            if let Some(e) = &self.endpoint {
                r.endpoint = e.clone();
            }
            if let Some(m) = &self.model {
                r.model = m.clone();
            }
            j.remote = Some(r);
        }
        if let Some(c) = self.max_concurrency {
            j.max_concurrency = c;
        }
        if self.cache_dir.is_some() {
            j.cache_dir = self.cache_dir.clone();
        }
        if let Some(a) = self.max_attempts {
            j.retry.max_attempts = a;
        }
        if let Some(b) = self.backoff_ms {
            j.retry.backoff_base_ms = b;
        }
        if let Some(r) = self.rate_limit {
            j.rate_limit = Some(RateLimit {
                capacity: r.max(1.0),
                refill_per_sec: r,
            });
        }
        if let Some(v) = self.rephrasing_vote {
            j.rephrasing_vote = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Corpus file (newline-delimited conversations).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Taxonomy file (TOML, or JSON by extension); bundled V1 when absent.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Classifier prompt template override.
    #[arg(long)]
    pub prompt_template: Option<PathBuf>,
    #[command(flatten)]
    pub judge: JudgeArgs,
    /// Subset size K of the adjusted score.
    #[arg(long)]
    pub k: Option<usize>,
    /// Preceding messages shown as snippet context.
    #[arg(long)]
    pub context_window: Option<usize>,
    /// Judge every classifier once on the whole conversation.
    #[arg(long)]
    pub whole_conversation: bool,
    /// Run sub-classifiers even when no parent fired.
    #[arg(long)]
    pub no_gating: bool,
    /// Users need more than this share of English conversations.
    #[arg(long)]
    pub english_threshold: Option<f64>,
    /// Exit nonzero when the share of failed judge units exceeds this.
    #[arg(long)]
    pub max_failure_rate: Option<f64>,
    /// Output directory (results.jsonl and manifest).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyticsArgs {
    /// Classification results (results.jsonl).
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Cohort labels, `user_id,cohort` with cohort in power/control/none.
    #[arg(long)]
    pub cohorts: Option<PathBuf>,
    /// Survey answers, `user_id,question_id,answer`.
    #[arg(long)]
    pub survey: Option<PathBuf>,
    /// Scale item answers, `user_id,scale,phase,item_id,value`.
    #[arg(long)]
    pub scales: Option<PathBuf>,
    /// Scale definitions (TOML); bundled when absent.
    #[arg(long)]
    pub scale_definitions: Option<PathBuf>,
    /// Minimum active days for a slope.
    #[arg(long)]
    pub min_days: Option<usize>,
    /// Number of usage groups.
    #[arg(long)]
    pub deciles: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TopicsArgs {
    /// Corpus file (newline-delimited conversations).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub judge: JudgeArgs,
    /// Topic catalog, one category per line; bundled when absent.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Cohort labels for group distributions.
    #[arg(long)]
    pub cohorts: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

fn set_opt<T: Clone>(slot: &mut Option<T>, v: &Option<T>) {
    if v.is_some() {
        *slot = v.clone();
    }
}

fn merge(cfg: &mut RunConfig, command: &Command) {
    match command {
        Command::Simulate(a) => {
            set_opt(&mut cfg.spec, &a.spec);
            set_opt(&mut cfg.out, &a.out);
            set_opt(&mut cfg.seed, &a.seed);
            set_opt(&mut cfg.taxonomy, &a.taxonomy);
        }
        Command::Classify(a) => {
            set_opt(&mut cfg.corpus, &a.corpus);
            set_opt(&mut cfg.taxonomy, &a.taxonomy);
            set_opt(&mut cfg.prompt_template, &a.prompt_template);
            a.judge.apply(&mut cfg.judge);
            set(&mut cfg.k, &a.k);
            set(&mut cfg.context_window, &a.context_window);
            cfg.whole_conversation |= a.whole_conversation;
            cfg.gating &= !a.no_gating;
            set(&mut cfg.english_threshold, &a.english_threshold);
            set(&mut cfg.max_failure_rate, &a.max_failure_rate);
            set_opt(&mut cfg.out, &a.out);
        }
        Command::Aggregate(a) | Command::Longitudinal(a) | Command::Survey(a) | Command::Report(a) => {
            set_opt(&mut cfg.results, &a.results);
            set_opt(&mut cfg.cohorts, &a.cohorts);
            set_opt(&mut cfg.survey, &a.survey);
            set_opt(&mut cfg.scales, &a.scales);
            set_opt(&mut cfg.scale_definitions, &a.scale_definitions);
            set(&mut cfg.min_days, &a.min_days);
            set(&mut cfg.deciles, &a.deciles);
            set_opt(&mut cfg.out, &a.out);
        }
        Command::Topics(a) => {
            set_opt(&mut cfg.corpus, &a.corpus);
            a.judge.apply(&mut cfg.judge);
            for j in [&mut cfg.summary_judge, &mut cfg.category_judge].into_iter().flatten() {
                a.judge.apply(j);
            }
            set_opt(&mut cfg.catalog, &a.catalog);
            set_opt(&mut cfg.cohorts, &a.cohorts);
            set_opt(&mut cfg.out, &a.out);
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::Classify(_) => "classify",
        Command::Aggregate(_) => "aggregate",
        Command::Longitudinal(_) => "longitudinal",
        Command::Survey(_) => "survey",
        Command::Topics(_) => "topics",
        Command::Report(_) => "report",
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            print!("{e}");
            CliError::Config(String::new())
        }
        _ => CliError::Config(e.to_string()),
    })?;
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    merge(&mut cfg, &cli.command);
    cfg.validate()?;
    let started = Instant::now();
    let name = command_name(&cli.command);
    let mut manifest = Manifest::new(name, &cfg);
    if let Some(p) = &cli.config {
        manifest.add_input(p)?;
    }
    let out = cfg.out_dir()?;
    let outcome = match &cli.command {
        Command::Simulate(_) => simulate(&cfg, &out, &mut manifest),
        Command::Classify(_) => classify(&cfg, &out, &mut manifest),
        Command::Aggregate(_) => aggregate_cmd(&cfg, &out, &mut manifest),
        Command::Longitudinal(_) => longitudinal_cmd(&cfg, &out, &mut manifest),
        Command::Survey(_) => survey_cmd(&cfg, &out, &mut manifest),
        Command::Topics(_) => topics_cmd(&cfg, &out, &mut manifest),
        Command::Report(_) => report_cmd(&cfg, &out, &mut manifest),
    };
    // failure-cap errors still leave a manifest behind
    if outcome.is_ok() || matches!(outcome, Err(CliError::FailureCap { .. })) {
        manifest.wall_time_s = started.elapsed().as_secs_f64();
        manifest.write(&out)?;
    }
    outcome
}

fn load_taxonomy_opt(path: &Option<PathBuf>) -> Result<Taxonomy, CliError> {
    match optional(path)? {
        Some(p) => load_taxonomy(&p).map_err(input_err),
        None => Ok(Taxonomy::bundled_v1()),
    }
}

fn simulate(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let spec_path = required(&cfg.spec, "--spec")?;
    manifest.add_input(&spec_path)?;
    let mut spec = SimSpec::load(&spec_path).map_err(input_err)?;
    if let Some(s) = cfg.seed {
        spec.seed = s;
    }
    manifest.seed = Some(spec.seed);
    let taxonomy = load_taxonomy_opt(&cfg.taxonomy)?;
    if let Some(p) = &cfg.taxonomy {
        manifest.add_input(p)?;
    }
    let sim = generate(&spec, &taxonomy).map_err(input_err)?;
    for p in sim.write(out).map_err(input_err)? {
        manifest.add_output(&p)?;
    }
    manifest.annotate("conversations", sim.conversations.len());
    manifest.annotate("users", sim.truth.users.len());
    Ok(())
}

fn classify(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let corpus_path = required(&cfg.corpus, "--corpus")?;
    manifest.add_input(&corpus_path)?;
    let taxonomy = load_taxonomy_opt(&cfg.taxonomy)?;
    if let Some(p) = &cfg.taxonomy {
        manifest.add_input(p)?;
    }
    let template = match optional(&cfg.prompt_template)? {
        Some(p) => {
            manifest.add_input(&p)?;
            PromptTemplate::load(&p).map_err(input_err)?
        }
        None => PromptTemplate::default(),
    };
    if let Some(r) = &cfg.judge.rules {
        manifest.add_input(r).map_err(|_| CliError::MissingInput(r.display().to_string()))?;
    }
    let loaded = load_corpus(&corpus_path, CorpusSchema::NdjsonV1).map_err(input_err)?;
    for e in &loaded.errors {
        log::warn!("corpus line {}: {}", e.line, e.message);
    }
    let shares = user_language_share(&loaded.conversations, &StopwordDetector);
    let excluded: BTreeSet<&String> = shares
        .iter()
        .filter(|(_, s)| !passes_english_filter(**s, cfg.english_threshold))
        .map(|(u, _)| u)
        .collect();
    let kept: Vec<_> = loaded
        .conversations
        .iter()
        .filter(|c| !excluded.contains(&c.user_id))
        .cloned()
        .collect();

    let namespace = format!("{}:{}", taxonomy.version, template.hash());
    let judge = cfg.judge.build(&namespace).map_err(|e| CliError::Config(e.to_string()))?;
    let options = CascadeOptions {
        k: cfg.k,
        whole_conversation_mode: cfg.whole_conversation,
        context_window: cfg.context_window,
        gating: cfg.gating,
    };
    let (results, tally) = classify_all(&kept, &taxonomy, &template, &judge, &options, cfg.judge.max_concurrency)
        .map_err(input_err)?;

    let path = out.join("results.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    write_results(&mut w, &results)?;
    w.flush()?;
    manifest.add_output(&path)?;
    manifest.judge = Some(JudgeSummary {
        conversations: tally.conversations,
        units: tally.units,
        unit_errors: tally.unit_errors,
        failure_rate: tally.failure_rate(),
        backend_calls: judge.backend_calls(),
    });
    manifest.annotate("corpus_record_errors", loaded.errors.len());
    manifest.annotate("users_excluded_by_language", excluded.len());
    manifest.annotate("taxonomy_version", &taxonomy.version);
    manifest.annotate("template_hash", template.hash());
    if tally.failure_rate() > cfg.max_failure_rate {
        return Err(CliError::FailureCap {
            rate: tally.failure_rate(),
            cap: cfg.max_failure_rate,
        });
    }
    Ok(())
}

fn load_results(cfg: &RunConfig, manifest: &mut Manifest) -> Result<Vec<ConversationResult>, CliError> {
    let path = required(&cfg.results, "--results")?;
    manifest.add_input(&path)?;
    let results = read_results(BufReader::new(File::open(&path)?)).map_err(input_err)?;
    if results.is_empty() {
        return Err(CliError::NoResults);
    }
    Ok(results)
}

/// Reads `user_id,cohort` rows.
pub fn read_cohorts(path: &Path) -> Result<BTreeMap<String, Cohort>, CliError> {
    #[derive(Deserialize)]
    struct Row {
        user_id: String,
        cohort: String,
    }
    let mut rdr = csv::Reader::from_path(path).map_err(input_err)?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(input_err)?;
        let c = Cohort::parse(&row.cohort)
            .ok_or_else(|| CliError::Input(format!("unknown cohort `{}` for {}", row.cohort, row.user_id)))?;
        out.insert(row.user_id, c);
    }
    Ok(out)
}

fn load_cohorts(cfg: &RunConfig, manifest: &mut Manifest) -> Result<BTreeMap<String, Cohort>, CliError> {
    match optional(&cfg.cohorts)? {
        Some(p) => {
            manifest.add_input(&p)?;
            read_cohorts(&p)
        }
        None => Ok(BTreeMap::new()),
    }
}

fn load_changes(cfg: &RunConfig, manifest: &mut Manifest) -> Result<Option<ChangeScores>, CliError> {
    let Some(p) = optional(&cfg.scales)? else {
        return Ok(None);
    };
    manifest.add_input(&p)?;
    let defs = match optional(&cfg.scale_definitions)? {
        Some(d) => {
            manifest.add_input(&d)?;
            load_scales(&d).map_err(input_err)?
        }
        None => bundled_scales(),
    };
    let answers = read_scale_responses(&p).map_err(input_err)?;
    let scores = score_all(&defs, &answers).map_err(input_err)?;
    Ok(Some(change_scores(&scores)))
}

fn load_survey(cfg: &RunConfig, manifest: &mut Manifest) -> Result<Option<Vec<SurveyResponse>>, CliError> {
    match optional(&cfg.survey)? {
        Some(p) => {
            manifest.add_input(&p)?;
            Ok(Some(read_survey(&p).map_err(input_err)?))
        }
        None => Ok(None),
    }
}

/// Fixed-precision, locale-independent number formatting for tables.
pub fn num(x: f64) -> String {
    format!("{x:.6}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn mean_se_cells(m: &MeanSe) -> [String; 4] {
    [m.n.to_string(), num(m.mean), opt_num(m.se), opt_num(m.ci95)]
}

struct Table {
    path: PathBuf,
    w: csv::Writer<File>,
}

impl Table {
    fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self, CliError> {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(input_err)?;
        w.write_record(header).map_err(input_err)?;
        Ok(Table { path, w })
    }

    fn row<I, S>(&mut self, cells: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.w.write_record(cells).map_err(input_err)
    }

    fn finish(mut self, manifest: &mut Manifest) -> Result<PathBuf, CliError> {
        self.w.flush()?;
        manifest.add_output(&self.path)?;
        Ok(self.path)
    }
}

fn classifier_ids(stats: &BTreeMap<String, UserStats>) -> BTreeSet<String> {
    stats.values().flat_map(|s| s.fractions.keys().cloned()).collect()
}

/// Writes user_stats.csv, cohort_summary.csv, sorted_curves.csv,
/// deciles.csv, decile_members.csv, decile_activation.csv, and, with scale
/// changes, changes.csv, change_users.csv, and change_correlations.csv.
pub fn write_aggregate(
    results: &[ConversationResult],
    cohorts: &BTreeMap<String, Cohort>,
    changes: Option<&ChangeScores>,
    deciles: usize,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<BTreeMap<String, UserStats>, CliError> {
    let stats = user_activation_fractions(results, cohorts);
    let ids = classifier_ids(&stats);

    let mut t = Table::create(
        out,
        "user_stats.csv",
        &["user_id", "cohort", "conversation_count", "active_day_count", "total_duration_s", "classifier_id", "fraction", "adjusted_score"],
    )?;
    for s in stats.values() {
        for id in &ids {
            t.row([
                s.user_id.clone(),
                s.cohort.as_str().to_string(),
                s.conversation_count.to_string(),
                s.active_day_count.to_string(),
                num(s.total_duration_s),
                id.clone(),
                num(s.fractions.get(id).copied().unwrap_or(0.0)),
                num(s.adjusted.get(id).copied().unwrap_or(0.0)),
            ])?;
        }
    }
    t.finish(manifest)?;

    let mut t = Table::create(out, "cohort_summary.csv", &["cohort", "classifier_id", "n", "mean", "se", "ci95"])?;
    for ((cohort, id), m) in cohort_summary(stats.values()) {
        let [n, mean, se, ci] = mean_se_cells(&m);
        t.row([cohort.as_str().to_string(), id, n, mean, se, ci])?;
    }
    t.finish(manifest)?;

    let mut t = Table::create(out, "sorted_curves.csv", &["classifier_id", "rank", "fraction"])?;
    for id in &ids {
        for (rank, f) in sorted_activation_curve(stats.values(), id) {
            t.row([id.clone(), rank.to_string(), num(f)])?;
        }
    }
    t.finish(manifest)?;

    let refs: Vec<&UserStats> = stats.values().collect();
    let deltas = changes.map(ChangeScores::deltas).unwrap_or_default();
    let groups = assign_deciles(&refs, deciles, &deltas);
    let mut t = Table::create(
        out,
        "deciles.csv",
        &["decile", "users", "min_duration_s", "max_duration_s", "total_duration_s", "duration_share", "mean_duration_min", "designated_minutes"],
    )?;
    for g in &groups {
        let mean_min = g.total_duration_s / g.members.len() as f64 / 60.0;
        t.row([
            g.index.to_string(),
            g.members.len().to_string(),
            num(g.min_duration_s),
            num(g.max_duration_s),
            num(g.total_duration_s),
            num(g.duration_share),
            num(mean_min),
            DESIGNATED_MINUTES.to_string(),
        ])?;
    }
    t.finish(manifest)?;

    let mut t = Table::create(out, "decile_members.csv", &["user_id", "decile"])?;
    let mut member_rows: Vec<(&String, usize)> = groups
        .iter()
        .flat_map(|g| g.members.iter().map(move |u| (u, g.index)))
        .collect();
    member_rows.sort();
    for (u, d) in member_rows {
        t.row([u.clone(), d.to_string()])?;
    }
    t.finish(manifest)?;

    let mut t = Table::create(out, "decile_activation.csv", &["decile", "classifier_id", "n", "mean", "se", "ci95"])?;
    for g in &groups {
        for (id, m) in &g.activation {
            let [n, mean, se, ci] = mean_se_cells(m);
            t.row([g.index.to_string(), id.clone(), n, mean, se, ci])?;
        }
    }
    t.finish(manifest)?;

    if let Some(ch) = changes {
        let mut t = Table::create(out, "changes.csv", &["group", "scale", "n", "mean", "se", "ci95"])?;
        for scale in ch.per_user.keys() {
            if let Some(m) = pooled_change(ch, scale) {
                let [n, mean, se, ci] = mean_se_cells(&m);
                t.row(["all".to_string(), scale.clone(), n, mean, se, ci])?;
            }
        }
        for g in &groups {
            for (scale, m) in &g.outcome_change {
                let [n, mean, se, ci] = mean_se_cells(m);
                t.row([format!("decile_{}", g.index), scale.clone(), n, mean, se, ci])?;
            }
        }
        t.finish(manifest)?;

        let mut t = Table::create(out, "change_users.csv", &["user_id", "scale", "pre", "post", "delta"])?;
        for (scale, users) in &ch.per_user {
            for (u, c) in users {
                t.row([u.clone(), scale.clone(), num(c.pre), num(c.post), num(c.delta)])?;
            }
        }
        t.finish(manifest)?;

        let mut t = Table::create(out, "change_correlations.csv", &["scale", "n", "r", "p"])?;
        for (scale, corr) in &ch.init_vs_delta {
            match corr {
                Some(c) => t.row([scale.clone(), c.n.to_string(), num(c.r), num(c.p)])?,
                None => t.row([scale.clone(), String::new(), String::new(), String::new()])?,
            }
        }
        t.finish(manifest)?;
    }
    manifest.annotate("usage_groups", groups.len());
    manifest.annotate(
        "designated_usage",
        format!("designated {DESIGNATED_DAYS}x{DESIGNATED_MINUTES_PER_DAY}={DESIGNATED_MINUTES} minutes"),
    );
    Ok(stats)
}

/// Writes slopes.csv.
pub fn write_longitudinal(
    results: &[ConversationResult],
    min_days: usize,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<usize, CliError> {
    let slopes = user_slopes(results, min_days);
    let mut t = Table::create(out, "slopes.csv", &["user_id", "classifier_id", "slope", "intercept", "slope_se", "day_count"])?;
    for s in &slopes {
        t.row([
            s.user_id.clone(),
            s.classifier_id.clone(),
            num(s.slope),
            num(s.intercept),
            opt_num(s.slope_se),
            s.day_count.to_string(),
        ])?;
    }
    t.finish(manifest)?;
    let users: BTreeSet<&str> = slopes.iter().map(|s| s.user_id.as_str()).collect();
    manifest.annotate("users_with_slopes", users.len());
    Ok(users.len())
}

/// Writes survey_buckets.csv for every question present.
pub fn write_survey(
    stats: &BTreeMap<String, UserStats>,
    responses: &[SurveyResponse],
    out: &Path,
    manifest: &mut Manifest,
) -> Result<(), CliError> {
    let mut questions: Vec<&str> = responses
        .iter()
        .map(|r| r.question_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    // Q2 before Q10
    questions.sort_by_key(|q| (q.trim_start_matches(['Q', 'q']).parse::<u32>().unwrap_or(u32::MAX), q.to_string()));
    let mut t = Table::create(
        out,
        "survey_buckets.csv",
        &["question_id", "answer", "encoded", "classifier_id", "n", "mean", "se", "ci95"],
    )?;
    for q in questions {
        for b in survey_bucket_summary(stats, responses, q) {
            for (id, m) in &b.activation {
                let [n, mean, se, ci] = mean_se_cells(m);
                t.row([q.to_string(), b.answer.clone(), b.encoded.to_string(), id.clone(), n, mean, se, ci])?;
            }
        }
    }
    t.finish(manifest)?;
    Ok(())
}

fn aggregate_cmd(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let results = load_results(cfg, manifest)?;
    let cohorts = load_cohorts(cfg, manifest)?;
    let changes = load_changes(cfg, manifest)?;
    write_aggregate(&results, &cohorts, changes.as_ref(), cfg.deciles, out, manifest)?;
    Ok(())
}

fn longitudinal_cmd(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let results = load_results(cfg, manifest)?;
    write_longitudinal(&results, cfg.min_days, out, manifest)?;
    Ok(())
}

fn survey_cmd(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let results = load_results(cfg, manifest)?;
    let cohorts = load_cohorts(cfg, manifest)?;
    let responses = load_survey(cfg, manifest)?.ok_or_else(|| CliError::Config("--survey is required".into()))?;
    let stats = user_activation_fractions(&results, &cohorts);
    write_survey(&stats, &responses, out, manifest)
}

fn report_cmd(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let results = load_results(cfg, manifest)?;
    let cohorts = load_cohorts(cfg, manifest)?;
    let changes = load_changes(cfg, manifest)?;
    let stats = write_aggregate(&results, &cohorts, changes.as_ref(), cfg.deciles, out, manifest)?;
    write_longitudinal(&results, cfg.min_days, out, manifest)?;
    if let Some(responses) = load_survey(cfg, manifest)? {
        write_survey(&stats, &responses, out, manifest)?;
    }

    let ids = classifier_ids(&stats);
    let mut summary = BTreeMap::new();
    summary.insert("conversations", serde_json::json!(results.len()));
    summary.insert("users", serde_json::json!(stats.len()));
    let overall: BTreeMap<&String, String> = ids
        .iter()
        .map(|id| {
            let active = results.iter().filter(|r| r.activated(id)).count();
            (id, num(active as f64 / results.len() as f64))
        })
        .collect();
    summary.insert("conversation_activation_rate", serde_json::json!(overall));
    summary.insert(
        "designated_usage_minutes",
        serde_json::json!(DESIGNATED_MINUTES.to_string()),
    );
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    manifest.add_output(&path)?;
    Ok(())
}

fn topics_cmd(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let corpus_path = required(&cfg.corpus, "--corpus")?;
    manifest.add_input(&corpus_path)?;
    let catalog = match optional(&cfg.catalog)? {
        Some(p) => {
            manifest.add_input(&p)?;
            TopicCatalog::load(&p).map_err(input_err)?
        }
        None => TopicCatalog::bundled(),
    };
    let cohorts = load_cohorts(cfg, manifest)?;
    let loaded = load_corpus(&corpus_path, CorpusSchema::NdjsonV1).map_err(input_err)?;

    let summary_cfg = cfg.summary_judge.clone().unwrap_or_else(|| cfg.judge.clone());
    let category_cfg = cfg.category_judge.clone().unwrap_or_else(|| cfg.judge.clone());
    let summarizer = summary_cfg.build("topics").map_err(|e| CliError::Config(e.to_string()))?;
    let separate;
    let categorizer = if category_cfg == summary_cfg {
        &summarizer
    } else {
        let mut c = category_cfg.clone();
        if c.cache_dir.is_some() && c.cache_dir == summary_cfg.cache_dir {
            c.cache_dir = c.cache_dir.map(|d| d.join("category"));
        }
        separate = c.build("topics").map_err(|e| CliError::Config(e.to_string()))?;
        &separate
    };
    let run = run_topics(
        &loaded.conversations,
        &summarizer,
        categorizer,
        &catalog,
        summary_cfg.max_concurrency.min(category_cfg.max_concurrency),
    );

    let mut t = Table::create(out, "topics.csv", &["conversation_id", "user_id", "summary_hash", "category"])?;
    for a in &run.assignments {
        t.row([&a.conversation_id, &a.user_id, &a.summary_hash, &a.category])?;
    }
    t.finish(manifest)?;

    let users = user_distributions(&run.assignments);
    let mut by_group: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for d in &users {
        by_group.entry("all").or_default().push(d.clone());
        let c = cohorts.get(&d.owner).copied().unwrap_or_default();
        if c != Cohort::None {
            by_group.entry(c.as_str()).or_default().push(d.clone());
        }
    }
    let mut t = Table::create(out, "topic_distributions.csv", &["owner_kind", "owner", "category", "weight"])?;
    for d in &users {
        for (cat, w) in &d.weights {
            t.row(["user", d.owner.as_str(), cat.as_str(), num(*w).as_str()])?;
        }
    }
    for (g, ds) in &by_group {
        if let Some(avg) = group_average(g, ds) {
            for (cat, w) in &avg.weights {
                t.row(["group", g, cat.as_str(), num(*w).as_str()])?;
            }
        }
    }
    t.finish(manifest)?;
    manifest.annotate("topic_failures", run.failures.len());
    manifest.judge = Some(JudgeSummary {
        conversations: loaded.conversations.len(),
        units: loaded.conversations.len() * 2,
        unit_errors: run.failures.len(),
        failure_rate: if loaded.conversations.is_empty() {
            0.0
        } else {
            run.failures.len() as f64 / loaded.conversations.len() as f64
        },
        backend_calls: summarizer.backend_calls()
            + if std::ptr::eq(categorizer, &summarizer) { 0 } else { categorizer.backend_calls() },
    });
    Ok(())
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}
