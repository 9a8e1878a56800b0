//! Command-line surface: one subcommand per pipeline stage plus `pipeline`
//! to run the whole flow from a TOML config.
//!
//! Every command is deterministic: the same inputs produce byte-identical
//! outputs, with sentences processed in file order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{drive_session, AgentError, SessionConfig, SubprocessTransport, TcpTransport, Transport};
use crate::corpus::{
    parse_alignment, parse_parallel, parse_transcript, tokenize, CorpusError, IndexBase,
    ParallelRecord, SentenceAlignment, SourceTranscript, TokenScheme,
};
use crate::latency::{al_token, laal_sec, laal_token, DelaySequence, LatencyError, TimedEmission};
use crate::quality::{chrf, corpus_bleu, ter, BleuConfig, MetricError, Smoothing};
use crate::schedule::{
    build_timetable, emission_times, insert_waits, DurationModel, ScheduleError, Segment,
};
use crate::sim::{
    actions_from_trace_file, run_policy, wait_k_echo, RunOptions, ScriptedPolicy, SessionTrace,
    SimError, TraceFormatError,
};
use crate::stats::{
    aggregate_stats, format_stats_line, parse_stats_file, rank_systems, render_prompt,
    ActionStats, PromptMode, PromptSpec, StatsError, StatsRecord,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Trace(#[from] TraceFormatError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Parser)]
#[command(
    name = "simt",
    version,
    about = "Simultaneous translation simulation and evaluation toolkit"
)]
pub struct Cli {
    /// TOML config supplying defaults per subcommand (flags win).
    /// Falls back to the SIMT_CONFIG environment variable.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a built-in policy or replay a trace over timed transcripts.
    Simulate(SimulateArgs),
    /// Drive an external agent over the wire protocol.
    Drive(DriveArgs),
    /// Score hypotheses against references (BLEU, chrF, TER).
    Score(ScoreArgs),
    /// Compute AL / LAAL and time-based lag from traces.
    Latency(LatencyArgs),
    /// Insert causal segment boundaries and project a speech timetable.
    Schedule(ScheduleArgs),
    /// Aggregate per-sentence figures by action set and rank systems.
    Stats(StatsArgs),
    /// Render an action-aware inference prompt.
    Prompt(PromptArgs),
    /// Run the whole flow (simulate, schedule, latency, score, stats,
    /// prompt) from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Timed transcript file, one JSON word list per line.
    #[arg(long)]
    pub transcripts: PathBuf,
    /// Wait-k threshold for the built-in echo policy.
    #[arg(long)]
    pub k: Option<usize>,
    /// Replay this action trace instead (transcripts must be one sentence).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Output file for the session traces (JSON lines); stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DriveArgs {
    #[arg(long)]
    pub transcripts: PathBuf,
    /// Agent command line, spawned once per sentence (stdin/stdout framing).
    #[arg(long, conflicts_with = "tcp")]
    pub agent_cmd: Option<String>,
    /// Agent TCP address, connected once per sentence.
    #[arg(long)]
    pub tcp: Option<String>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub lang_pair: Option<String>,
    /// Prompt text sent in the session handshake.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Tab-separated corpus: id, source, hypothesis, reference, [name=value].
    #[arg(long)]
    pub corpus: PathBuf,
    /// Token scheme for BLEU/TER: whitespace, character, punct-split.
    #[arg(long)]
    pub tokenization: Option<TokenScheme>,
    /// BLEU smoothing: exp, none, or floor:EPS.
    #[arg(long)]
    pub smoothing: Option<String>,
    #[arg(long, default_value_t = 6)]
    pub chrf_order: usize,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    /// Per-sentence scores (TSV) output; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the corpus summary as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct LatencyArgs {
    #[arg(long)]
    pub transcripts: PathBuf,
    /// Session traces from `simulate`/`drive` (JSON lines).
    #[arg(long)]
    pub traces: PathBuf,
    /// Per-sentence emission onsets for time-based lag
    /// (JSON lines: {"id":...,"onsets":[...]}).
    #[arg(long)]
    pub onsets: Option<PathBuf>,
    /// Parallel corpus providing reference lengths for LAAL.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Token scheme used to count reference units.
    #[arg(long)]
    pub tokenization: Option<TokenScheme>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub transcripts: PathBuf,
    /// Target sentences, one per line (tokenized with --tokenization).
    #[arg(long, conflicts_with = "corpus")]
    pub targets: Option<PathBuf>,
    /// Or take targets from the reference column of a parallel corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Word alignment file (Pharaoh pairs), one line per sentence.
    #[arg(long)]
    pub alignments: PathBuf,
    /// Treat alignment indices as 1-based (default 0-based).
    #[arg(long)]
    pub one_based: bool,
    #[arg(long)]
    pub tokenization: Option<TokenScheme>,
    /// Constant seconds per target unit; defaults by token scheme.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Measured per-unit durations (JSON array per line) instead of a rate.
    #[arg(long)]
    pub durations: Option<PathBuf>,
    /// Target streams with <WAIT> markers, one line per sentence.
    #[arg(long)]
    pub marked_out: Option<PathBuf>,
    /// Projected timetable (JSON lines with sentence ids).
    #[arg(long)]
    pub timetable_out: Option<PathBuf>,
    /// Per-unit onset times, consumable by `latency --onsets`.
    #[arg(long)]
    pub onsets_out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Per-sentence records: action_set \t bleu \t laal_sec.
    #[arg(long)]
    pub records: PathBuf,
    /// Emit prompt-style lines instead of a TSV table.
    #[arg(long)]
    pub lines: bool,
    /// Also rank the action sets by this metric: bleu or laal.
    #[arg(long)]
    pub rank: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    /// step-wise, prefix-feeding, or few-shot.
    #[arg(long)]
    pub mode: PromptMode,
    #[arg(long)]
    pub lang_pair: Option<String>,
    /// Comma-separated allowed actions, presentation order.
    #[arg(long, default_value = "READ,WRITE")]
    pub actions: String,
    /// Aggregated stats (TSV: action \t mean_bleu \t mean_laal_sec).
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Few-shot demonstrations, embedded verbatim.
    #[arg(long)]
    pub demos: Option<PathBuf>,
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Output directory for all artifacts.
    #[arg(long)]
    pub out: PathBuf,
}

/// Optional config-file defaults; any present value fills an omitted flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub simulate: SimulateCfg,
    #[serde(default)]
    pub drive: DriveCfg,
    #[serde(default)]
    pub score: ScoreCfg,
    #[serde(default)]
    pub latency: LatencyCfg,
    #[serde(default)]
    pub schedule: ScheduleCfg,
    #[serde(default)]
    pub prompt: PromptCfg,
    pub pipeline: Option<PipelineCfg>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateCfg {
    pub k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveCfg {
    pub timeout_ms: Option<u64>,
    pub lang_pair: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreCfg {
    pub tokenization: Option<TokenScheme>,
    pub smoothing: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyCfg {
    pub tokenization: Option<TokenScheme>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleCfg {
    pub tokenization: Option<TokenScheme>,
    pub rate: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptCfg {
    pub lang_pair: Option<String>,
}

/// Paths and knobs for the end-to-end pipeline, relative to the config file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineCfg {
    pub transcripts: String,
    pub corpus: String,
    pub alignments: String,
    #[serde(default)]
    pub alignments_one_based: bool,
    #[serde(default = "default_k")]
    pub k: usize,
    pub label: String,
    #[serde(default = "default_lang_pair")]
    pub lang_pair: String,
    pub tokenization: Option<TokenScheme>,
    pub rate: Option<f64>,
}

fn default_k() -> usize {
    1
}

fn default_lang_pair() -> String {
    "En-Zh".to_string()
}

pub fn load_config(flag: &Option<PathBuf>) -> Result<(FileConfig, Option<PathBuf>), CliError> {
    let path = match flag {
        Some(p) => Some(p.clone()),
        None => std::env::var_os("SIMT_CONFIG").map(PathBuf::from),
    };
    match path {
        None => Ok((FileConfig::default(), None)),
        Some(p) => {
            let text = fs::read_to_string(&p)?;
            let cfg: FileConfig =
                toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
            Ok((cfg, Some(p)))
        }
    }
}

fn write_output(path: &Option<PathBuf>, content: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, content)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(content.as_bytes())?;
        }
    }
    Ok(())
}

fn parse_smoothing(s: &str) -> Result<Smoothing, CliError> {
    match s {
        "exp" => Ok(Smoothing::Exp),
        "none" => Ok(Smoothing::None),
        other => match other.strip_prefix("floor:").and_then(|e| e.parse().ok()) {
            Some(eps) => Ok(Smoothing::Floor(eps)),
            None => Err(CliError::Usage(format!(
                "unknown smoothing {other:?} (expected exp, none, or floor:EPS)"
            ))),
        },
    }
}

/// One session trace tagged with its sentence id; the JSON-lines record
/// written by `simulate`/`drive` and read back by `latency`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    #[serde(flatten)]
    pub trace: SessionTrace,
}

fn traces_to_lines(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
        out.push('\n');
    }
    out
}

fn read_traces(path: &Path) -> Result<Vec<TraceRecord>, CliError> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::Usage(format!("trace record line {}: {}", i + 1, e))
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct OnsetRecord {
    id: String,
    onsets: Vec<f64>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let (cfg, cfg_path) = load_config(&cli.config)?;
    match cli.cmd {
        Command::Simulate(a) => cmd_simulate(a, &cfg),
        Command::Drive(a) => cmd_drive(a, &cfg),
        Command::Score(a) => cmd_score(a, &cfg),
        Command::Latency(a) => cmd_latency(a, &cfg),
        Command::Schedule(a) => cmd_schedule(a, &cfg),
        Command::Stats(a) => cmd_stats(a),
        Command::Prompt(a) => cmd_prompt(a, &cfg),
        Command::Pipeline(a) => cmd_pipeline(a, &cfg, cfg_path.as_deref()),
    }
}

fn load_transcripts(path: &Path) -> Result<Vec<SourceTranscript>, CliError> {
    Ok(parse_transcript(&fs::read_to_string(path)?)?)
}

fn cmd_simulate(a: SimulateArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let transcripts = load_transcripts(&a.transcripts)?;
    let records = match &a.trace {
        Some(trace_path) => {
            if transcripts.len() != 1 {
                return Err(CliError::Usage(format!(
                    "--trace replays one sentence, but the transcript file has {}",
                    transcripts.len()
                )));
            }
            let actions = actions_from_trace_file(&fs::read_to_string(trace_path)?)?;
            let trace = run_policy(
                &transcripts[0],
                &mut ScriptedPolicy::new(actions),
                RunOptions::default(),
            )?;
            vec![TraceRecord {
                id: transcripts[0].id.clone(),
                trace,
            }]
        }
        None => {
            let k = a.k.or(cfg.simulate.k).unwrap_or(1);
            simulate_wait_k(&transcripts, k)?
        }
    };
    write_output(&a.out, &traces_to_lines(&records))
}

fn simulate_wait_k(
    transcripts: &[SourceTranscript],
    k: usize,
) -> Result<Vec<TraceRecord>, CliError> {
    transcripts
        .iter()
        .map(|t| {
            let trace = run_policy(t, &mut wait_k_echo(k), RunOptions::default())?;
            Ok(TraceRecord {
                id: t.id.clone(),
                trace,
            })
        })
        .collect()
}

fn cmd_drive(a: DriveArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let transcripts = load_transcripts(&a.transcripts)?;
    let prompt = match &a.prompt_file {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let session_cfg = SessionConfig {
        timeout_ms: a.timeout_ms.or(cfg.drive.timeout_ms).unwrap_or(30_000),
        step_budget: None,
        prompt,
        lang_pair: a
            .lang_pair
            .or_else(|| cfg.drive.lang_pair.clone())
            .unwrap_or_else(default_lang_pair),
    };
    let mut records = Vec::new();
    for t in &transcripts {
        let mut transport: Box<dyn Transport> = if let Some(cmdline) = &a.agent_cmd {
            let parts: Vec<String> = cmdline.split_whitespace().map(str::to_string).collect();
            let (prog, args) = parts.split_first().ok_or_else(|| {
                CliError::Usage("--agent-cmd must not be empty".to_string())
            })?;
            Box::new(SubprocessTransport::spawn(prog, args)?)
        } else if let Some(addr) = &a.tcp {
            Box::new(TcpTransport::connect(addr)?)
        } else {
            return Err(CliError::Usage(
                "drive requires --agent-cmd or --tcp".to_string(),
            ));
        };
        let trace = drive_session(t, transport.as_mut(), &session_cfg)?;
        records.push(TraceRecord {
            id: t.id.clone(),
            trace,
        });
    }
    write_output(&a.out, &traces_to_lines(&records))
}

#[derive(Debug, Serialize)]
struct ScoreSummary {
    sentences: usize,
    bleu: f64,
    chrf: f64,
    ter: f64,
    bleu_config: String,
    external: BTreeMap<String, f64>,
}

fn score_corpus(
    records: &[ParallelRecord],
    scheme: TokenScheme,
    smoothing: Smoothing,
    chrf_order: usize,
    beta: f64,
) -> Result<(String, ScoreSummary), CliError> {
    let bleu_cfg = BleuConfig {
        max_order: 4,
        smoothing,
        tokenization: scheme,
    };
    let hyp_toks: Vec<Vec<String>> = records
        .iter()
        .map(|r| tokenize(&r.target_hypothesis, scheme))
        .collect();
    let ref_toks: Vec<Vec<String>> = records
        .iter()
        .map(|r| tokenize(&r.target_reference, scheme))
        .collect();
    let hyp_strs: Vec<String> = records.iter().map(|r| r.target_hypothesis.clone()).collect();
    let ref_strs: Vec<String> = records.iter().map(|r| r.target_reference.clone()).collect();

    let mut per_sentence = String::from("id\tbleu\tchrf\tter\n");
    let mut ter_edits = 0.0f64;
    let mut ter_ref_len = 0usize;
    for (i, r) in records.iter().enumerate() {
        let b = corpus_bleu(
            std::slice::from_ref(&hyp_toks[i]),
            std::slice::from_ref(&ref_toks[i]),
            &bleu_cfg,
        )?;
        let c = chrf(
            std::slice::from_ref(&hyp_strs[i]),
            std::slice::from_ref(&ref_strs[i]),
            chrf_order,
            beta,
        )?;
        let t = ter(&hyp_toks[i], &ref_toks[i])?;
        ter_edits += t / 100.0 * ref_toks[i].len() as f64;
        ter_ref_len += ref_toks[i].len();
        per_sentence.push_str(&format!("{}\t{:.4}\t{:.4}\t{:.4}\n", r.id, b, c, t));
    }

    let mut external: BTreeMap<String, f64> = BTreeMap::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        for (name, v) in &r.external_scores {
            *external.entry(name.clone()).or_insert(0.0) += v;
            *counts.entry(name.clone()).or_insert(0) += 1;
        }
    }
    for (name, sum) in external.iter_mut() {
        *sum /= counts[name] as f64;
    }

    let summary = ScoreSummary {
        sentences: records.len(),
        bleu: corpus_bleu(&hyp_toks, &ref_toks, &bleu_cfg)?,
        chrf: chrf(&hyp_strs, &ref_strs, chrf_order, beta)?,
        ter: if ter_ref_len == 0 {
            0.0
        } else {
            ter_edits / ter_ref_len as f64 * 100.0
        },
        bleu_config: bleu_cfg.fingerprint(),
        external,
    };
    Ok((per_sentence, summary))
}

fn cmd_score(a: ScoreArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let records = parse_parallel(&fs::read_to_string(&a.corpus)?)?;
    let scheme = a
        .tokenization
        .or(cfg.score.tokenization)
        .unwrap_or_default();
    let smoothing = parse_smoothing(
        a.smoothing
            .as_deref()
            .or(cfg.score.smoothing.as_deref())
            .unwrap_or("exp"),
    )?;
    let (per_sentence, summary) = score_corpus(&records, scheme, smoothing, a.chrf_order, a.beta)?;
    write_output(&a.out, &per_sentence)?;
    print_summary(a.json, &summary, |s| {
        format!(
            "sentences={} BLEU={:.2} chrF={:.2} TER={:.2}",
            s.sentences, s.bleu, s.chrf, s.ter
        )
    });
    Ok(())
}

fn print_summary<T: Serialize>(json: bool, value: &T, human: impl Fn(&T) -> String) {
    if json {
        println!(
            "{}",
            serde_json::to_string(value).expect("summary serializes")
        );
    } else {
        println!("{}", human(value));
    }
}

#[derive(Debug, Serialize)]
struct LatencySummary {
    sentences: usize,
    mean_al: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_laal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_laal_sec: Option<f64>,
}

#[derive(Debug, Serialize)]
struct LatencyLine {
    id: String,
    al: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    laal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    laal_sec: Option<f64>,
}

fn latency_report(
    transcripts: &[SourceTranscript],
    traces: &[TraceRecord],
    onsets: Option<&[OnsetRecord]>,
    ref_lens: Option<&[usize]>,
) -> Result<(String, LatencySummary, Vec<LatencyLine>), CliError> {
    if traces.len() != transcripts.len() {
        return Err(CliError::Usage(format!(
            "{} traces but {} transcripts",
            traces.len(),
            transcripts.len()
        )));
    }
    let mut lines = Vec::new();
    let mut out = String::new();
    let (mut sum_al, mut sum_laal, mut sum_sec) = (0.0f64, 0.0f64, 0.0f64);
    for (i, (t, tr)) in transcripts.iter().zip(traces).enumerate() {
        let ref_len = ref_lens.map(|r| r[i]);
        let d = DelaySequence::new(tr.trace.delays.clone(), t.len(), ref_len)?;
        let al = al_token(&d);
        let laal = ref_len.map(|_| laal_token(&d)).transpose()?;
        let sec = match onsets {
            Some(records) => {
                let em = TimedEmission::new(records[i].onsets.clone())?;
                Some(laal_sec(t, &em))
            }
            None => None,
        };
        sum_al += al;
        sum_laal += laal.unwrap_or(0.0);
        sum_sec += sec.unwrap_or(0.0);
        let line = LatencyLine {
            id: tr.id.clone(),
            al,
            laal,
            laal_sec: sec,
        };
        out.push_str(&serde_json::to_string(&line).expect("latency line serializes"));
        out.push('\n');
        lines.push(line);
    }
    let n = transcripts.len() as f64;
    let summary = LatencySummary {
        sentences: transcripts.len(),
        mean_al: sum_al / n,
        mean_laal: ref_lens.map(|_| sum_laal / n),
        mean_laal_sec: onsets.map(|_| sum_sec / n),
    };
    Ok((out, summary, lines))
}

fn read_onsets(path: &Path, expected: usize) -> Result<Vec<OnsetRecord>, CliError> {
    let records: Vec<OnsetRecord> = fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Usage(format!("onset line {}: {}", i + 1, e)))
        })
        .collect::<Result<_, _>>()?;
    if records.len() != expected {
        return Err(CliError::Usage(format!(
            "{} onset records but {} sentences",
            records.len(),
            expected
        )));
    }
    Ok(records)
}

fn cmd_latency(a: LatencyArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let transcripts = load_transcripts(&a.transcripts)?;
    let traces = read_traces(&a.traces)?;
    let onsets = a
        .onsets
        .as_deref()
        .map(|p| read_onsets(p, transcripts.len()))
        .transpose()?;
    let scheme = a
        .tokenization
        .or(cfg.latency.tokenization)
        .unwrap_or_default();
    let ref_lens: Option<Vec<usize>> = match &a.corpus {
        Some(p) => {
            let recs = parse_parallel(&fs::read_to_string(p)?)?;
            if recs.len() != transcripts.len() {
                return Err(CliError::Usage(format!(
                    "{} corpus records but {} transcripts",
                    recs.len(),
                    transcripts.len()
                )));
            }
            Some(
                recs.iter()
                    .map(|r| tokenize(&r.target_reference, scheme).len())
                    .collect(),
            )
        }
        None => None,
    };
    let (out, summary, _) =
        latency_report(&transcripts, &traces, onsets.as_deref(), ref_lens.as_deref())?;
    write_output(&a.out, &out)?;
    print_summary(a.json, &summary, |s| {
        format!(
            "sentences={} mean_AL={:.4}{}{}",
            s.sentences,
            s.mean_al,
            s.mean_laal
                .map(|v| format!(" mean_LAAL={v:.4}"))
                .unwrap_or_default(),
            s.mean_laal_sec
                .map(|v| format!(" mean_LAAL_sec={v:.4}"))
                .unwrap_or_default(),
        )
    });
    Ok(())
}

#[derive(Debug, Serialize)]
struct ScheduleSummary {
    sentences: usize,
    segments: usize,
    /// "model" for the constant-rate stand-in, "measured" for real timings.
    duration_source: &'static str,
    rate_s: f64,
}

struct ScheduledSentence {
    id: String,
    marked: String,
    timetable: Vec<Segment>,
    onsets: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn schedule_corpus(
    transcripts: &[SourceTranscript],
    targets: &[Vec<String>],
    alignments: &[SentenceAlignment],
    rate: f64,
    durations: Option<&[Vec<f64>]>,
) -> Result<Vec<ScheduledSentence>, CliError> {
    let mut out = Vec::new();
    for (i, t) in transcripts.iter().enumerate() {
        let ct = insert_waits(&targets[i], &alignments[i], t)?;
        let dm = match durations {
            Some(d) => DurationModel::measured(d[i].clone())?,
            None => DurationModel::constant(rate)?,
        };
        let timetable = build_timetable(&ct, t, &dm)?;
        let onsets = emission_times(&timetable, &dm).onsets;
        out.push(ScheduledSentence {
            id: t.id.clone(),
            marked: ct.to_marked_line(),
            timetable,
            onsets,
        });
    }
    Ok(out)
}

fn schedule_outputs(sentences: &[ScheduledSentence]) -> (String, String, String) {
    #[derive(Serialize)]
    struct Line<'a> {
        id: &'a str,
        seg: usize,
        start: f64,
        tokens: &'a [String],
    }
    let mut marked = String::new();
    let mut timetable = String::new();
    let mut onsets = String::new();
    for s in sentences {
        marked.push_str(&s.marked);
        marked.push('\n');
        for (k, seg) in s.timetable.iter().enumerate() {
            let line = Line {
                id: &s.id,
                seg: k + 1,
                start: seg.earliest_start_s,
                tokens: &seg.tokens,
            };
            timetable.push_str(&serde_json::to_string(&line).expect("segment serializes"));
            timetable.push('\n');
        }
        let rec = OnsetRecord {
            id: s.id.clone(),
            onsets: s.onsets.clone(),
        };
        onsets.push_str(&serde_json::to_string(&rec).expect("onsets serialize"));
        onsets.push('\n');
    }
    (marked, timetable, onsets)
}

fn cmd_schedule(a: ScheduleArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let transcripts = load_transcripts(&a.transcripts)?;
    let scheme = a
        .tokenization
        .or(cfg.schedule.tokenization)
        .unwrap_or_default();
    let targets: Vec<Vec<String>> = if let Some(p) = &a.targets {
        fs::read_to_string(p)?
            .lines()
            .map(|l| tokenize(l, scheme))
            .collect()
    } else if let Some(p) = &a.corpus {
        parse_parallel(&fs::read_to_string(p)?)?
            .iter()
            .map(|r| tokenize(&r.target_reference, scheme))
            .collect()
    } else {
        return Err(CliError::Usage(
            "schedule requires --targets or --corpus".to_string(),
        ));
    };
    if targets.len() != transcripts.len() {
        return Err(CliError::Usage(format!(
            "{} target sentences but {} transcripts",
            targets.len(),
            transcripts.len()
        )));
    }
    let base = if a.one_based {
        IndexBase::One
    } else {
        IndexBase::Zero
    };
    let alignments: Vec<SentenceAlignment> = fs::read_to_string(&a.alignments)?
        .lines()
        .map(|l| parse_alignment(l, base))
        .collect::<Result<_, _>>()?;
    if alignments.len() != transcripts.len() {
        return Err(CliError::Usage(format!(
            "{} alignment lines but {} transcripts",
            alignments.len(),
            transcripts.len()
        )));
    }
    let rate = a.rate.or(cfg.schedule.rate).unwrap_or(match scheme {
        TokenScheme::Character => DurationModel::DEFAULT_CHAR_S,
        _ => DurationModel::DEFAULT_WORD_S,
    });
    let durations: Option<Vec<Vec<f64>>> = a
        .durations
        .as_deref()
        .map(|p| -> Result<Vec<Vec<f64>>, CliError> {
            fs::read_to_string(p)?
                .lines()
                .enumerate()
                .map(|(i, l)| {
                    serde_json::from_str(l).map_err(|e| {
                        CliError::Usage(format!("duration line {}: {}", i + 1, e))
                    })
                })
                .collect()
        })
        .transpose()?;

    let sentences = schedule_corpus(
        &transcripts,
        &targets,
        &alignments,
        rate,
        durations.as_deref(),
    )?;
    let (marked, timetable, onsets) = schedule_outputs(&sentences);
    write_output(&a.marked_out, &marked)?;
    if let Some(p) = &a.timetable_out {
        fs::write(p, &timetable)?;
    }
    if let Some(p) = &a.onsets_out {
        fs::write(p, &onsets)?;
    }
    let summary = ScheduleSummary {
        sentences: sentences.len(),
        segments: sentences.iter().map(|s| s.timetable.len()).sum(),
        duration_source: if durations.is_some() {
            "measured"
        } else {
            "model"
        },
        rate_s: rate,
    };
    print_summary(a.json, &summary, |s| {
        format!(
            "sentences={} segments={} durations={} rate={}s",
            s.sentences, s.segments, s.duration_source, s.rate_s
        )
    });
    Ok(())
}

fn stats_table(stats: &[ActionStats]) -> String {
    let mut out = String::from("action_set\tmean_bleu\tmean_laal_sec\tn\n");
    for s in stats {
        out.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{}\n",
            s.action_set, s.mean_bleu, s.mean_laal_sec, s.n
        ));
    }
    out
}

fn cmd_stats(a: StatsArgs) -> Result<(), CliError> {
    let records = parse_stats_file(&fs::read_to_string(&a.records)?)?;
    let stats = aggregate_stats(&records)?;
    let body = if a.lines {
        stats
            .iter()
            .map(format_stats_line)
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    } else {
        stats_table(&stats)
    };
    write_output(&a.out, &body)?;
    if let Some(metric) = &a.rank {
        let (scores, lower_is_better): (Vec<(String, f64)>, bool) = match metric.as_str() {
            "bleu" => (
                stats
                    .iter()
                    .map(|s| (s.action_set.clone(), s.mean_bleu))
                    .collect(),
                false,
            ),
            "laal" => (
                stats
                    .iter()
                    .map(|s| (s.action_set.clone(), s.mean_laal_sec))
                    .collect(),
                true,
            ),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown rank metric {other:?} (expected bleu or laal)"
                )))
            }
        };
        let ranking = rank_systems(&scores, lower_is_better)?;
        print_summary(a.json, &ranking, |r| r.ordering.clone());
    }
    Ok(())
}

fn cmd_prompt(a: PromptArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let stats = match &a.stats {
        Some(p) => {
            let records = parse_stats_file(&fs::read_to_string(p)?)?;
            aggregate_stats(&records)?
        }
        None => Vec::new(),
    };
    let demonstrations = match &a.demos {
        Some(p) => fs::read_to_string(p)?
            .lines()
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };
    let spec = PromptSpec {
        lang_pair: a
            .lang_pair
            .or_else(|| cfg.prompt.lang_pair.clone())
            .unwrap_or_else(default_lang_pair),
        mode: a.mode,
        allowed_actions: a.actions.split(',').map(str::to_string).collect(),
        stats,
        demonstrations,
        source: a.source,
    };
    write_output(&a.out, &render_prompt(&spec)?)
}

#[derive(Debug, Serialize)]
struct PipelineSummary {
    sentences: usize,
    label: String,
    bleu: f64,
    chrf: f64,
    ter: f64,
    mean_al: f64,
    mean_laal: f64,
    mean_laal_sec: f64,
    segments: usize,
    duration_source: &'static str,
}

fn cmd_pipeline(
    a: PipelineArgs,
    cfg: &FileConfig,
    cfg_path: Option<&Path>,
) -> Result<(), CliError> {
    let pipeline = cfg
        .pipeline
        .as_ref()
        .ok_or_else(|| CliError::Config("pipeline requires a [pipeline] config table".into()))?;
    let cfg_dir = cfg_path
        .and_then(Path::parent)
        .unwrap_or_else(|| Path::new("."));
    let resolve = |rel: &str| cfg_dir.join(rel);

    let transcripts = load_transcripts(&resolve(&pipeline.transcripts))?;
    let corpus = parse_parallel(&fs::read_to_string(resolve(&pipeline.corpus))?)?;
    if corpus.len() != transcripts.len() {
        return Err(CliError::Usage(format!(
            "{} corpus records but {} transcripts",
            corpus.len(),
            transcripts.len()
        )));
    }
    let base = if pipeline.alignments_one_based {
        IndexBase::One
    } else {
        IndexBase::Zero
    };
    let alignments: Vec<SentenceAlignment> =
        fs::read_to_string(resolve(&pipeline.alignments))?
            .lines()
            .map(|l| parse_alignment(l, base))
            .collect::<Result<_, _>>()?;
    if alignments.len() != transcripts.len() {
        return Err(CliError::Usage(format!(
            "{} alignment lines but {} transcripts",
            alignments.len(),
            transcripts.len()
        )));
    }
    let scheme = pipeline.tokenization.unwrap_or_default();
    let rate = pipeline.rate.unwrap_or(match scheme {
        TokenScheme::Character => DurationModel::DEFAULT_CHAR_S,
        _ => DurationModel::DEFAULT_WORD_S,
    });

    fs::create_dir_all(&a.out)?;
    let out = |name: &str| a.out.join(name);

    // 1. Simulate the wait-k echo policy over the timed transcripts.
    let traces = simulate_wait_k(&transcripts, pipeline.k)?;
    fs::write(out("traces.jsonl"), traces_to_lines(&traces))?;

    // 2. Schedule the reference targets causally and project speech timing.
    let targets: Vec<Vec<String>> = corpus
        .iter()
        .map(|r| tokenize(&r.target_reference, scheme))
        .collect();
    let scheduled = schedule_corpus(&transcripts, &targets, &alignments, rate, None)?;
    let (marked, timetable, onset_lines) = schedule_outputs(&scheduled);
    fs::write(out("marked.txt"), marked)?;
    fs::write(out("timetable.jsonl"), timetable)?;
    fs::write(out("onsets.jsonl"), onset_lines)?;

    // 3. Latency from the policy traces and the projected onsets.
    let onsets: Vec<OnsetRecord> = scheduled
        .iter()
        .map(|s| OnsetRecord {
            id: s.id.clone(),
            onsets: s.onsets.clone(),
        })
        .collect();
    let ref_lens: Vec<usize> = targets.iter().map(Vec::len).collect();
    let (latency_lines, latency_summary, per_sentence_latency) =
        latency_report(&transcripts, &traces, Some(&onsets), Some(&ref_lens))?;
    fs::write(out("latency.jsonl"), latency_lines)?;

    // 4. Quality metrics on the parallel corpus.
    let (score_lines, score_summary) =
        score_corpus(&corpus, scheme, Smoothing::Exp, 6, 2.0)?;
    fs::write(out("scores.tsv"), &score_lines)?;

    // 5. Per-sentence records grouped under the configured label.
    let mut records = Vec::new();
    for (line, lat) in score_lines.lines().skip(1).zip(&per_sentence_latency) {
        let bleu: f64 = line
            .split('\t')
            .nth(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Usage("malformed score line".into()))?;
        records.push(StatsRecord {
            action_set: pipeline.label.clone(),
            bleu,
            laal_sec: lat.laal_sec.unwrap_or(0.0),
        });
    }
    let stats = aggregate_stats(&records)?;
    fs::write(
        out("stats.tsv"),
        records
            .iter()
            .map(|r| format!("{}\t{:.4}\t{:.4}\n", r.action_set, r.bleu, r.laal_sec))
            .collect::<String>(),
    )?;

    // 6. Render the step-wise prompt with the aggregated statistics.
    let spec = PromptSpec {
        lang_pair: pipeline.lang_pair.clone(),
        mode: PromptMode::StepWise,
        allowed_actions: vec!["READ".into(), "WRITE".into()],
        stats: Vec::new(),
        demonstrations: Vec::new(),
        source: None,
    };
    fs::write(out("prompt.txt"), render_prompt(&spec)?)?;

    let summary = PipelineSummary {
        sentences: transcripts.len(),
        label: pipeline.label.clone(),
        bleu: score_summary.bleu,
        chrf: score_summary.chrf,
        ter: score_summary.ter,
        mean_al: latency_summary.mean_al,
        mean_laal: latency_summary.mean_laal.unwrap_or(0.0),
        mean_laal_sec: latency_summary.mean_laal_sec.unwrap_or(0.0),
        segments: scheduled.iter().map(|s| s.timetable.len()).sum(),
        duration_source: "model",
    };
    fs::write(
        out("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    println!(
        "pipeline: {} sentences, BLEU={:.2}, mean LAAL={:.4}s ({} stats line{})",
        summary.sentences,
        summary.bleu,
        summary.mean_laal_sec,
        stats.len(),
        if stats.len() == 1 { "" } else { "s" }
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_parses_all_forms() {
        assert_eq!(parse_smoothing("exp").unwrap(), Smoothing::Exp);
        assert_eq!(parse_smoothing("none").unwrap(), Smoothing::None);
        assert_eq!(
            parse_smoothing("floor:0.1").unwrap(),
            Smoothing::Floor(0.1)
        );
        assert!(parse_smoothing("bogus").is_err());
    }

    #[test]
    fn cli_parses_a_pipeline_invocation() {
        let cli = Cli::try_parse_from([
            "simt",
            "--config",
            "cfg.toml",
            "pipeline",
            "--out",
            "outdir",
        ])
        .unwrap();
        assert!(matches!(cli.cmd, Command::Pipeline(_)));
        assert_eq!(cli.config, Some(PathBuf::from("cfg.toml")));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = toml::from_str::<FileConfig>("[simulate]\nwait = 3\n").unwrap_err();
        assert!(err.to_string().contains("wait"));
    }

    #[test]
    fn trace_record_round_trips_with_flattened_fields() {
        let rec = TraceRecord {
            id: "7".into(),
            trace: SessionTrace {
                steps: vec![],
                delays: vec![1, 2],
                final_target: vec!["a".into(), "b".into()],
                dropped_spans: vec![],
                cut_points: vec![],
                src_len: 2,
            },
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.contains("\"id\":\"7\""));
        assert!(line.contains("\"delays\":[1,2]"));
        let back: TraceRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.id, "7");
        assert_eq!(back.trace.delays, vec![1, 2]);
    }
}
