//! Command-line front end: argument parsing, validation and the subcommands.
//!
//! Every subcommand validates its inputs before doing any work and writes
//! its output in one piece, so a failed run leaves no partial files.
//! Exit codes are 0 on success, 2 for input or validation errors and 3 when
//! an external service (the LLM endpoint) fails.

use std::collections::BTreeSet;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gmpg_core::analysis::{
    correlation_heatmap, disease_profiles, CorrelationHeatmap, DiseaseProfile, CHAR_KEYS, PERF_KEYS,
};
use gmpg_core::cleanup::llm::{LlmConfig, LlmFilter};
use gmpg_core::cleanup::{
    load_blocklist, load_hierarchy, load_report_sentences, load_scene_graph, run_pipeline, write_scene_graph,
    PipelineConfig, RegionFilter, RegionHierarchy, RuleBasedFilter,
};
use gmpg_core::ingest::{
    compute_stats, load_ground_truth, read_predictions, synthesize_predictions, write_predictions, CorruptionProfile,
    DatasetStats,
};
use gmpg_core::metrics::{evaluate, EvalOptions, EvalReport, PredictionSet, DEFAULT_IOU_THRESH, SCHEMA_VERSION};
use gmpg_core::postprocess::{postprocess, tune_threshold, FusionConfig, ScoreMode, ThresholdSweep};
use gmpg_core::{Error, Result};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_EXTERNAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "gmpg",
    version,
    about = "Evaluation and data tooling for medical phrase grounding"
)]
pub struct Cli {
    /// Worker threads for per-sample work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// More log output; repeat for debug level.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Sweep confidence thresholds on a validation split.
    Tune(TuneArgs),
    /// Threshold and fuse predictions, writing a new predictions file.
    Fuse(FuseArgs),
    /// Run the scene-graph cleanup pipeline.
    Clean(CleanArgs),
    /// Dataset statistics for a ground-truth file.
    Stats(StatsArgs),
    /// Per-disease characteristics and their correlation with performance.
    Analyze(AnalyzeArgs),
    /// Generate synthetic predictions from ground truth.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterMode {
    Rules,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreModeArg {
    Mean,
    Max,
}

impl From<ScoreModeArg> for ScoreMode {
    fn from(m: ScoreModeArg) -> Self {
        match m {
            ScoreModeArg::Mean => ScoreMode::Mean,
            ScoreModeArg::Max => ScoreMode::Max,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PostArgs {
    /// Drop boxes scoring below this confidence.
    #[arg(long)]
    pub threshold: Option<f64>,

    /// Use the best threshold from a `tune` output file.
    #[arg(long, conflicts_with = "threshold")]
    pub threshold_from: Option<PathBuf>,

    /// IoU at which boxes are fused.
    #[arg(long, default_value_t = 0.1)]
    pub wbf_iou: f64,

    /// How fused boxes are scored.
    #[arg(long, value_enum, default_value_t = ScoreModeArg::Mean)]
    pub score_mode: ScoreModeArg,

    /// Skip weighted box fusion.
    #[arg(long)]
    pub no_wbf: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    /// Predictions file, or `-` for stdin.
    #[arg(long)]
    pub pred: PathBuf,
    #[command(flatten)]
    pub post: PostArgs,
    /// IoU required for a true positive.
    #[arg(long, default_value_t = DEFAULT_IOU_THRESH)]
    pub iou_thresh: f64,
    /// Add a per-finding-label breakdown.
    #[arg(long)]
    pub by_label: bool,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Grid spacing; the grid runs from `step` to `1 - step`.
    #[arg(long, default_value_t = 0.05)]
    pub grid_step: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[command(flatten)]
    pub post: PostArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    /// Scene-graph records (JSONL).
    #[arg(long)]
    pub input: PathBuf,
    /// Report sentences for stage 3 (JSONL of study_id, image_id, sentence).
    #[arg(long)]
    pub sentences: Option<PathBuf>,
    /// Child-to-parent region map (JSON); the built-in hierarchy by default.
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FilterMode::Rules)]
    pub filter: FilterMode,
    /// Study ids to exclude, one per line.
    #[arg(long)]
    pub blocklist: Option<PathBuf>,
    /// Cleaned records (JSONL).
    #[arg(long)]
    pub output: PathBuf,
    /// Where to write the cleanup report (default: stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Fail instead of falling back to rules when the LLM misbehaves.
    #[arg(long)]
    pub no_fallback: bool,
    /// Maximum concurrent filter requests.
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// An `eval` report, ideally produced with `--by-label`.
    #[arg(long)]
    pub report: PathBuf,
    /// Ground truth with finding labels.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub drop_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub spurious_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub jitter_sd: f64,
    #[arg(long, default_value_t = 0.0)]
    pub duplicate_rate: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A payload tagged with the output schema version.
#[derive(Debug, Serialize)]
struct Versioned<T> {
    schema_version: &'static str,
    #[serde(flatten)]
    body: T,
}

fn versioned<T>(body: T) -> Versioned<T> {
    Versioned {
        schema_version: SCHEMA_VERSION,
        body,
    }
}

#[derive(Debug, Serialize)]
struct Analysis {
    profiles: Vec<DiseaseProfile>,
    heatmap: CorrelationHeatmap,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_external() {
        EXIT_EXTERNAL
    } else {
        EXIT_INVALID
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

fn require_file(path: &Path) -> Result<()> {
    if path.as_os_str() == "-" || path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, io::Error::new(io::ErrorKind::NotFound, "no such file")))
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(format!("--{name}={v} must lie in [0, 1]")))
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes the whole payload to `out`, or stdout when absent. Files are
/// written to a sibling temp path and renamed into place.
fn emit(out: Option<&Path>, payload: &[u8]) -> Result<()> {
    match out {
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(payload).map_err(|e| Error::io("<stdout>", e))?;
            stdout.flush().map_err(|e| Error::io("<stdout>", e))
        }
        Some(path) => {
            let mut tmp = path.as_os_str().to_owned();
            tmp.push(".partial");
            let tmp = PathBuf::from(tmp);
            std::fs::write(&tmp, payload).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
        }
    }
}

fn load_predictions_arg(path: &Path) -> Result<Vec<PredictionSet>> {
    if path.as_os_str() == "-" {
        let mut buf = Vec::new();
        io::stdin()
            .lock()
            .read_to_end(&mut buf)
            .map_err(|e| Error::io("<stdin>", e))?;
        read_predictions(buf.as_slice(), "<stdin>")
    } else {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        read_predictions(BufReader::new(file), &path.display().to_string())
    }
}

impl PostArgs {
    fn validate(&self) -> Result<()> {
        if let Some(t) = self.threshold {
            check_unit("threshold", t)?;
        }
        if let Some(p) = &self.threshold_from {
            require_file(p)?;
        }
        if !self.no_wbf {
            FusionConfig::new(self.wbf_iou)?;
        }
        Ok(())
    }

    fn threshold(&self) -> Result<Option<f64>> {
        if let Some(path) = &self.threshold_from {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let t = v
                .get("best_threshold")
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| invalid(format!("{} has no best_threshold", path.display())))?;
            check_unit("threshold-from", t)?;
            return Ok(Some(t));
        }
        Ok(self.threshold)
    }

    fn fusion(&self) -> Option<FusionConfig> {
        (!self.no_wbf).then(|| FusionConfig {
            iou_thresh: self.wbf_iou,
            score_mode: self.score_mode.into(),
        })
    }

    fn apply(&self, preds: &[PredictionSet]) -> Result<Vec<PredictionSet>> {
        let threshold = self.threshold()?;
        let fusion = self.fusion();
        if threshold.is_none() && fusion.is_none() {
            return Ok(preds.to_vec());
        }
        preds
            .iter()
            .map(|p| postprocess(p, threshold, fusion.as_ref()))
            .collect()
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    require_file(&args.gt)?;
    require_file(&args.pred)?;
    args.post.validate()?;
    if !(args.iou_thresh > 0.0 && args.iou_thresh <= 1.0) {
        return Err(invalid(format!("--iou-thresh={} must lie in (0, 1]", args.iou_thresh)));
    }
    let samples = load_ground_truth(&args.gt)?;
    let preds = args.post.apply(&load_predictions_arg(&args.pred)?)?;
    let opts = EvalOptions {
        iou_thresh: args.iou_thresh,
        by_label: args.by_label,
    };
    evaluate(&samples, &preds, &opts)
}

pub fn grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step < 0.5) {
        return Err(invalid(format!("--grid-step={step} must lie in (0, 0.5)")));
    }
    let n = (1.0 / step).round() as usize;
    if ((n as f64) * step - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("--grid-step={step} must divide 1")));
    }
    Ok((1..n).map(|i| i as f64 / n as f64).collect())
}

pub fn cmd_tune(args: &TuneArgs) -> Result<ThresholdSweep> {
    require_file(&args.gt)?;
    require_file(&args.pred)?;
    let grid = grid(args.grid_step)?;
    let samples = load_ground_truth(&args.gt)?;
    let preds = load_predictions_arg(&args.pred)?;
    tune_threshold(&samples, &preds, &grid)
}

pub fn cmd_fuse(args: &FuseArgs) -> Result<Vec<PredictionSet>> {
    require_file(&args.pred)?;
    args.post.validate()?;
    args.post.apply(&load_predictions_arg(&args.pred)?)
}

pub fn cmd_clean(args: &CleanArgs) -> Result<(Vec<u8>, gmpg_core::cleanup::CleanupReport)> {
    require_file(&args.input)?;
    for p in [&args.sentences, &args.hierarchy, &args.blocklist]
        .into_iter()
        .flatten()
    {
        require_file(p)?;
    }
    if args.concurrency == 0 {
        return Err(invalid("--concurrency must be at least 1"));
    }
    let filter: Box<dyn RegionFilter> = match args.filter {
        FilterMode::Rules => Box::new(RuleBasedFilter),
        FilterMode::Llm => {
            let cfg = LlmConfig::from_env().map_err(|e| invalid(e.to_string()))?;
            Box::new(LlmFilter::new(cfg))
        }
    };
    let hierarchy = match &args.hierarchy {
        Some(p) => load_hierarchy(p)?,
        None => RegionHierarchy::default(),
    };
    let blocklist = match &args.blocklist {
        Some(p) => load_blocklist(p)?,
        None => BTreeSet::new(),
    };
    let sentences = match &args.sentences {
        Some(p) => load_report_sentences(p)?,
        None => Vec::new(),
    };
    let records = load_scene_graph(&args.input)?;
    let cfg = PipelineConfig {
        jobs: args.concurrency,
        allow_fallback: !args.no_fallback,
    };
    let (out, report) = run_pipeline(&records, &sentences, &hierarchy, filter.as_ref(), &blocklist, &cfg)?;
    let mut buf = Vec::new();
    write_scene_graph(&out, &mut buf)?;
    Ok((buf, report))
}

pub fn cmd_stats(args: &StatsArgs) -> Result<DatasetStats> {
    require_file(&args.gt)?;
    Ok(compute_stats(&load_ground_truth(&args.gt)?))
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<(Vec<DiseaseProfile>, CorrelationHeatmap)> {
    require_file(&args.report)?;
    require_file(&args.gt)?;
    let text = std::fs::read_to_string(&args.report).map_err(|e| Error::io(&args.report, e))?;
    let report = EvalReport::from_json(&text)?;
    let samples = load_ground_truth(&args.gt)?;
    let profiles = disease_profiles(&samples, Some(&report));
    let heatmap = correlation_heatmap(&profiles, &PERF_KEYS, &CHAR_KEYS)?;
    Ok((profiles, heatmap))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<Vec<PredictionSet>> {
    require_file(&args.gt)?;
    let profile = CorruptionProfile {
        drop_rate: args.drop_rate,
        spurious_rate: args.spurious_rate,
        jitter_sd: args.jitter_sd,
        duplicate_rate: args.duplicate_rate,
        seed: args.seed,
    };
    profile.validate()?;
    synthesize_predictions(&load_ground_truth(&args.gt)?, &profile)
}

fn profile_table(profiles: &[DiseaseProfile]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
    let mut out = format!(
        "{:<20}{:>8}{:>8}{:>8}{:>7}{:>10}{:>8}\n",
        "disease", "P@F1=1", "CH-F1", "mIoU", "N", "Area(%)", "SDS(%)"
    );
    for p in profiles {
        out += &format!(
            "{:<20}{:>8}{:>8}{:>8}{:>7}{:>10.1}{:>8.1}\n",
            p.name,
            fmt(p.p_at_f1),
            fmt(p.ch_f1),
            fmt(p.miou),
            p.n,
            p.avg_area_pct,
            p.sds_pct
        );
    }
    out
}

fn run_command(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Eval(a) => {
            let report = cmd_eval(a)?;
            let text = match a.format {
                Format::Json => to_json(&report)?,
                Format::Table => report.to_table(),
            };
            emit(a.out.as_deref(), text.as_bytes())
        }
        Command::Tune(a) => emit(a.out.as_deref(), to_json(&versioned(cmd_tune(a)?))?.as_bytes()),
        Command::Fuse(a) => {
            let preds = cmd_fuse(a)?;
            let mut buf = Vec::new();
            write_predictions(&preds, &mut buf)?;
            emit(a.out.as_deref(), &buf)
        }
        Command::Clean(a) => {
            let (records, report) = cmd_clean(a)?;
            emit(Some(&a.output), &records)?;
            emit(a.report.as_deref(), to_json(&report)?.as_bytes())
        }
        Command::Stats(a) => emit(a.out.as_deref(), to_json(&versioned(cmd_stats(a)?))?.as_bytes()),
        Command::Analyze(a) => {
            let (profiles, heatmap) = cmd_analyze(a)?;
            let text = match a.format {
                Format::Json => to_json(&versioned(Analysis { profiles, heatmap }))?,
                Format::Table => format!("{}\n{}", profile_table(&profiles), heatmap.to_table()),
            };
            emit(a.out.as_deref(), text.as_bytes())
        }
        Command::Synth(a) => {
            let preds = cmd_synth(a)?;
            let mut buf = Vec::new();
            write_predictions(&preds, &mut buf)?;
            emit(a.out.as_deref(), &buf)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Runs the parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    init_logging(cli.verbose);
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return EXIT_INVALID;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run_command(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
