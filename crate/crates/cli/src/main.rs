use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use pivotguard::decoder::Method;
use pivotguard::error::{Error, Result};
use pivotguard::eval::{build_report, decode_corpus, latency_rows, ConflictPrediction, DecodeRecord, TimingRecord};
use pivotguard::jsonl;
use pivotguard::model::{LogitModel, RemoteEndpoint, RemoteModel, ScriptedModel, Vocabulary};
use pivotguard::pivot::AliasTable;
use pivotguard::synth::{
    load_corpus, MockRewriter, MockScorer, RemoteRewriter, RemoteScorer, Rewriter, Scorer, SynthOutcome, SynthTask,
    DEFAULT_K,
};
use pivotguard::trace::TraceLine;
use pivotguard::types::{validate_config, DecodeConfig};

#[derive(Parser)]
#[command(name = "pivotguard", version, about = "Conflict-aware contrastive decoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode every sample of a corpus with one method.
    Decode(DecodeArgs),
    /// Build a conflict corpus from substitution tasks.
    Synth(SynthArgs),
    /// Score decode results against a gold corpus.
    Eval(EvalArgs),
    /// Print exported trace lines.
    TraceDump(TraceDumpArgs),
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// `scripted:<spec.json>` or `remote:<base url>`.
    #[arg(long)]
    model: String,
    /// Vocabulary file, one token per line (remote models only).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// greedy, rpgd or linear:<lambda>.
    #[arg(long, default_value = "rpgd")]
    method: String,
    /// Flat key=value decode configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override one configuration key, e.g. `--set tau=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Per-sample wall-clock timings (JSONL).
    #[arg(long)]
    timings: Option<PathBuf>,
    /// Per-step trace export (JSONL).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    trace_top_k: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Substitution tasks (JSONL).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = ["mock", "remote"], default_value = "mock")]
    client: String,
    #[arg(long)]
    endpoint: Option<String>,
    /// Inclusive score range of the mock scorer, `LOW-HIGH`.
    #[arg(long, default_value = "6-10")]
    mock_scores: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    rejected: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// External conflict predictions (JSONL); defaults to the span-based
    /// conflict predicate.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Timing files from `decode --timings`; adds a latency section.
    #[arg(long, num_args = 1..)]
    timings: Vec<PathBuf>,
    /// Tab-separated alias table for value normalisation.
    #[arg(long)]
    aliases: Option<PathBuf>,
    /// Per-sample verdicts as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Decode configuration to record in the report.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TraceDumpArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    sample: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Decode(a) => run_decode(a),
        Command::Synth(a) => run_synth(a),
        Command::Eval(a) => run_eval(a),
        Command::TraceDump(a) => run_trace_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_config(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<DecodeConfig> {
    let mut cfg = match path {
        Some(p) => DecodeConfig::from_kv(&read_text(p)?)?,
        None => DecodeConfig::default(),
    };
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    validate_config(cfg)
}

fn load_model(uri: &str, vocab: Option<&Path>) -> Result<Box<dyn LogitModel>> {
    if let Some(path) = uri.strip_prefix("scripted:") {
        Ok(Box::new(ScriptedModel::from_path(Path::new(path))?))
    } else if let Some(url) = uri.strip_prefix("remote:") {
        let vocab = vocab.ok_or_else(|| Error::Config("remote models need --vocab".into()))?;
        Ok(Box::new(RemoteModel::new(
            RemoteEndpoint::new(url),
            Vocabulary::from_file(vocab)?,
        )?))
    } else {
        Err(Error::Config(format!(
            "model `{uri}` must start with `scripted:` or `remote:`"
        )))
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run_decode(a: DecodeArgs) -> Result<()> {
    let method: Method = a.method.parse()?;
    let cfg = load_config(a.config.as_deref(), a.seed, &a.overrides)?;
    let corpus = load_corpus(&a.corpus, DEFAULT_K)?;
    let model = load_model(&a.model, a.vocab.as_deref())?;
    let base_dir = a.corpus.parent();
    let outputs = pool(a.jobs)?.install(|| decode_corpus(model.as_ref(), &corpus, method, &cfg, base_dir));

    let records: Vec<&DecodeRecord> = outputs.iter().map(|o| &o.record).collect();
    jsonl::write(&a.out, &records)?;
    if let Some(path) = &a.timings {
        let timings: Vec<&TimingRecord> = outputs.iter().filter_map(|o| o.timing.as_ref()).collect();
        jsonl::write(path, &timings)?;
    }
    if let Some(path) = &a.trace {
        let name = method.to_string();
        let lines: Vec<TraceLine> = outputs
            .iter()
            .filter_map(|o| o.trace.as_ref().map(|t| (o.record.sample_id, t)))
            .flat_map(|(id, t)| t.export_lines(model.vocab(), a.trace_top_k, Some(id), &name))
            .collect();
        jsonl::write(path, &lines)?;
    }
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} samples failed to decode", records.len());
    }
    Ok(())
}

fn parse_range(s: &str) -> Result<(u32, u32)> {
    let bad = || Error::Config(format!("score range `{s}` is not LOW-HIGH"));
    let (lo, hi) = s.split_once('-').ok_or_else(bad)?;
    Ok((
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
    ))
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let tasks: Vec<SynthTask> = jsonl::read(&a.corpus)?;
    for t in &tasks {
        t.base.validate(DEFAULT_K)?;
    }
    let (rewriter, scorer): (Box<dyn Rewriter>, Box<dyn Scorer>) = match a.client.as_str() {
        "remote" => {
            let url = a
                .endpoint
                .as_deref()
                .ok_or_else(|| Error::Config("--client remote needs --endpoint".into()))?;
            (
                Box::new(RemoteRewriter::new(RemoteEndpoint::new(url))?),
                Box::new(RemoteScorer::new(RemoteEndpoint::new(url))?),
            )
        }
        _ => {
            let (low, high) = parse_range(&a.mock_scores)?;
            (Box::new(MockRewriter), Box::new(MockScorer::Seeded { low, high }))
        }
    };
    let outcomes: Vec<Result<SynthOutcome>> = pool(a.jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|t| {
                t.run(rewriter.as_ref(), scorer.as_ref(), a.seed)
                    .map_err(|e| Error::Validation(format!("sample {}: {e}", t.base.sample_id)))
            })
            .collect()
    });
    let mut retained = Vec::new();
    let mut rejected = Vec::new();
    for o in outcomes {
        match o? {
            SynthOutcome::Retained { sample, .. } => retained.push(sample),
            SynthOutcome::Rejected(r) => rejected.push(r),
        }
    }
    jsonl::write(&a.out, &retained)?;
    if let Some(path) = &a.rejected {
        jsonl::write(path, &rejected)?;
    }
    eprintln!("retained {} of {} samples", retained.len(), tasks.len());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let corpus = load_corpus(&a.gold, DEFAULT_K)?;
    let mut records: Vec<DecodeRecord> = Vec::new();
    for path in &a.results {
        records.extend(jsonl::read::<DecodeRecord>(path)?);
    }
    let predictions: Option<Vec<ConflictPrediction>> = a.predictions.as_deref().map(jsonl::read).transpose()?;
    let aliases = match &a.aliases {
        Some(p) => AliasTable::from_file(p)?,
        None => AliasTable::new(),
    };
    let mut report = build_report(&corpus, &records, predictions.as_deref(), &aliases)?;
    if a.config.is_some() || a.seed.is_some() {
        let cfg = load_config(a.config.as_deref(), a.seed, &[])?;
        report.seed = Some(cfg.rng_seed);
        report.config = Some(cfg);
    }
    if !a.timings.is_empty() {
        let mut timings: Vec<TimingRecord> = Vec::new();
        for path in &a.timings {
            timings.extend(jsonl::read::<TimingRecord>(path)?);
        }
        report.latency = Some(latency_rows(&timings));
    }
    write_text(&a.report, &report.to_json()?)?;
    if let Some(path) = &a.csv {
        write_text(path, &report.verdicts_csv()?)?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn run_trace_dump(a: TraceDumpArgs) -> Result<()> {
    let lines: Vec<TraceLine> = jsonl::read(&a.trace)?;
    let mut shown = 0;
    for l in lines
        .iter()
        .filter(|l| a.step.is_none_or(|s| l.step == s) && a.sample.is_none_or(|s| l.sample_id == Some(s)))
    {
        shown += 1;
        let sample = l.sample_id.map_or_else(|| "-".to_owned(), |s| s.to_string());
        let c = l.c.map_or_else(|| "-".to_owned(), |c| format!("{c:.6}"));
        let alpha = l.alpha_pivot_mean.map_or_else(|| "-".to_owned(), |x| format!("{x:.6}"));
        println!(
            "sample {sample} {} step {}: {} (id {}) c={c} alpha_pivot_mean={alpha}",
            l.method, l.step, l.chosen_token, l.chosen_id.0
        );
        let fmt = |entries: &[pivotguard::trace::TopEntry]| {
            entries
                .iter()
                .map(|e| format!("{}={:.4}", e.token, e.logit))
                .collect::<Vec<_>>()
                .join(" ")
        };
        println!("  std   {}", fmt(&l.top_std));
        if let Some(conf) = &l.top_conf {
            println!("  conf  {}", fmt(conf));
        }
        println!("  final {}", fmt(&l.top_final));
    }
    if shown == 0 {
        return Err(Error::Validation("no trace lines match the selection".into()));
    }
    Ok(())
}
