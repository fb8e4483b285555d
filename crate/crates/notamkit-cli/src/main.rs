//! Command-line front end: corpus parsing and extraction, field discovery,
//! evaluation, parameter sweeps, corpus statistics, and cassette recording.
//!
//! Exit codes: 0 on success, 2 when some records failed but the run
//! produced output, 1 on fatal errors. Output files are byte-identical
//! across runs with the same configuration and backend; wall-clock
//! timestamps go to a `<out>.log` sidecar instead.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use notamkit::corpus::{compute_stats, load_corpus, NotamRecord};
use notamkit::debate::{run_hdf, DebateConfig};
use notamkit::discovery::{run_mda, AggregatorConfig, DiscoveryConfig, EmergentField};
use notamkit::evalkit::{
    score_discovery, score_extraction, sweep_shots, sweep_tau, sweep_temperature,
    synthetic_duplicate_benchmark, SweepResult,
};
use notamkit::gateway::{Backend, LiveBackend, MockBackend, RecordingBackend, ReplayBackend};
use notamkit::schema::{builtin_schema, ExtractionResult, FieldSchema, Naming};
use notamkit::strategies::{
    apply_srcv, load_icl_bank, load_srcv_rules, run_extraction, IclExample, StrategyConfig,
    StrategyKind,
};

#[derive(Parser)]
#[command(name = "notamkit", version, about = "NOTAM parsing and field discovery toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract structured records from a NOTAM corpus
    Parse(ParseArgs),
    /// Discover emergent fields per NOTAM and refine them by debate
    Discover(DiscoverArgs),
    /// Score predictions against gold annotations
    Eval(EvalArgs),
    /// Run a parameter sweep and emit CSV
    Sweep(SweepArgs),
    /// Print corpus statistics
    Stats(StatsArgs),
    /// Run extraction while recording completions to a cassette
    Record(RecordArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    ZeroShot,
    Icl,
    Cot,
    SelfConsistency,
}

impl From<StrategyArg> for StrategyKind {
    fn from(v: StrategyArg) -> Self {
        match v {
            StrategyArg::ZeroShot => StrategyKind::ZeroShot,
            StrategyArg::Icl => StrategyKind::Icl,
            StrategyArg::Cot => StrategyKind::Cot,
            StrategyArg::SelfConsistency => StrategyKind::SelfConsistency,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NamingArg {
    Weak,
    Clear,
}

/// Optional JSON config file; any present key fills in for an absent flag.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    backend: Option<String>,
    model: Option<String>,
    schema: Option<String>,
    shots: Option<usize>,
    tau: Option<f64>,
    max_iters: Option<usize>,
    quiescence: Option<usize>,
    seed: Option<u64>,
    jobs: Option<usize>,
}

#[derive(Args)]
struct CommonArgs {
    /// Backend: live, mock:<script.jsonl>, or replay:<cassette.jsonl>
    #[arg(long)]
    backend: Option<String>,
    /// Model identifier (falls back to NOTAMKIT_MODEL)
    #[arg(long)]
    model: Option<String>,
    /// JSON config file; flags override it, it overrides the environment
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-record work; 1 keeps output ordering trivially
    /// deterministic (outputs are order-stable at any value)
    #[arg(long)]
    jobs: Option<usize>,
}

struct Resolved {
    backend_spec: String,
    model: String,
    seed: u64,
    jobs: usize,
    file: FileConfig,
}

impl CommonArgs {
    fn resolve(&self) -> Result<Resolved> {
        let file: FileConfig = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text).context("parsing config file")?
            }
            None => FileConfig::default(),
        };
        let backend_spec = self
            .backend
            .clone()
            .or_else(|| file.backend.clone())
            .unwrap_or_else(|| "live".to_string());
        let model = self
            .model
            .clone()
            .or_else(|| file.model.clone())
            .or_else(|| std::env::var("NOTAMKIT_MODEL").ok())
            .unwrap_or_else(|| "default-model".to_string());
        let seed = self.seed.or(file.seed).unwrap_or(42);
        let jobs = self.jobs.or(file.jobs).unwrap_or(1).max(1);
        Ok(Resolved {
            backend_spec,
            model,
            seed,
            jobs,
            file,
        })
    }
}

fn make_backend(spec: &str) -> Result<Box<dyn Backend>> {
    if spec == "live" {
        return Ok(Box::new(LiveBackend::from_env()?));
    }
    if let Some(path) = spec.strip_prefix("mock:") {
        return Ok(Box::new(MockBackend::from_script_file(Path::new(path))?));
    }
    if let Some(path) = spec.strip_prefix("replay:") {
        return Ok(Box::new(ReplayBackend::from_cassette(Path::new(path))?));
    }
    bail!("unknown backend {spec:?}; expected live, mock:<script>, or replay:<cassette>");
}

/// Wall-clock timestamps are kept out of output files so reruns are
/// byte-identical; they land here instead.
fn write_sidecar(out: &Path, lines: &[String]) -> Result<()> {
    let mut path = out.as_os_str().to_owned();
    path.push(".log");
    let mut file = fs::File::create(PathBuf::from(path))?;
    for line in lines {
        writeln!(file, "{line}")?;
    }
    Ok(())
}

fn now() -> String {
    chrono_free_timestamp()
}

// seconds since the epoch; good enough for a sidecar audit line without
// pulling a date dependency into the binary
fn chrono_free_timestamp() -> String {
    let d = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap_or_default();
    format!("unix:{}", d.as_secs())
}

fn load_records(path: &Path) -> Result<Vec<NotamRecord>> {
    let outcome = load_corpus(path).with_context(|| format!("loading {}", path.display()))?;
    for reject in &outcome.rejects {
        eprintln!("warning: line {}: {}", reject.line_number, reject.reason);
    }
    Ok(outcome.records)
}

fn chunked<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    work: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(&work).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        for (items, slots) in items.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            scope.spawn(|| {
                for (item, slot) in items.iter().zip(slots.iter_mut()) {
                    *slot = Some(work(item));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.unwrap()).collect()
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    input: PathBuf,
    /// Built-in schema id; defaults to runway_lighting
    #[arg(long)]
    schema: Option<String>,
    #[arg(long, value_enum, default_value = "zero-shot")]
    strategy: StrategyArg,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long, value_enum, default_value = "clear")]
    naming: NamingArg,
    /// ICL example bank (JSONL), required for the icl strategy
    #[arg(long)]
    examples: Option<PathBuf>,
    /// SRCV rules file (JSON) to apply after extraction
    #[arg(long)]
    srcv: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

fn strategy_config(
    kind: StrategyKind,
    shots: Option<usize>,
    naming: NamingArg,
    resolved: &Resolved,
) -> StrategyConfig {
    let mut cfg = StrategyConfig::new(kind);
    if let Some(shots) = shots.or(resolved.file.shots) {
        cfg.shots = shots;
    }
    cfg.naming = match naming {
        NamingArg::Weak => Naming::Weak,
        NamingArg::Clear => Naming::Clear,
    };
    cfg.model_id = resolved.model.clone();
    cfg
}

fn run_parse_pipeline(
    args: &ParseArgs,
    backend: &dyn Backend,
    resolved: &Resolved,
) -> Result<(Vec<ExtractionResult>, Vec<NotamRecord>, &'static FieldSchema)> {
    let records = load_records(&args.input)?;
    let schema_id = args
        .schema
        .clone()
        .or_else(|| resolved.file.schema.clone())
        .unwrap_or_else(|| "runway_lighting".to_string());
    let schema = builtin_schema(&schema_id)?;
    let cfg = strategy_config(args.strategy.into(), args.shots, args.naming, resolved);
    let bank: Vec<IclExample> = match &args.examples {
        Some(path) => load_icl_bank(path)?,
        None => Vec::new(),
    };
    let mut results = if resolved.jobs > 1 {
        chunked(&records, resolved.jobs, |record| {
            run_extraction(std::slice::from_ref(record), schema, &cfg, &bank, backend)
                .pop()
                .expect("one result per record")
        })
    } else {
        run_extraction(&records, schema, &cfg, &bank, backend)
    };
    if let Some(rules_path) = &args.srcv {
        let rules = load_srcv_rules(rules_path)?;
        results = results
            .iter()
            .zip(&records)
            .map(|(result, record)| apply_srcv(result, record, &rules, schema, &cfg, backend))
            .collect();
    }
    Ok((results, records, schema))
}

fn cmd_parse(args: &ParseArgs) -> Result<u8> {
    let resolved = args.common.resolve()?;
    let backend = make_backend(&resolved.backend_spec)?;
    let started = now();
    let (results, _, _) = run_parse_pipeline(args, backend.as_ref(), &resolved)?;
    let mut out = String::new();
    let mut failures = 0usize;
    for result in &results {
        if !result.errors.is_empty() {
            failures += 1;
            eprintln!("record {} failed: {}", result.notam_id, result.errors.join("; "));
        }
        out.push_str(&serde_json::to_string(result)?);
        out.push('\n');
    }
    fs::write(&args.out, out)?;
    write_sidecar(
        &args.out,
        &[
            format!("started {started}"),
            format!("finished {}", now()),
            format!("records {} failures {failures}", results.len()),
        ],
    )?;
    Ok(exit_code(failures, results.len()))
}

/// Every record failing is fatal (1); a partial run is 2; a clean run is 0.
fn exit_code(failures: usize, total: usize) -> u8 {
    if failures == 0 {
        0
    } else if failures == total {
        1
    } else {
        2
    }
}

#[derive(Args)]
struct DiscoverArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    quiescence: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    transcript_dir: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Serialize, Deserialize)]
struct DiscoveredDoc {
    notam_id: String,
    fields: Vec<EmergentField>,
}

fn cmd_discover(args: &DiscoverArgs) -> Result<u8> {
    let resolved = args.common.resolve()?;
    let backend = make_backend(&resolved.backend_spec)?;
    let records = load_records(&args.input)?;
    let tau = args.tau.or(resolved.file.tau).unwrap_or(0.7);
    let discovery_cfg = DiscoveryConfig {
        aggregator: AggregatorConfig::new(tau)?,
        model_id: resolved.model.clone(),
        ..DiscoveryConfig::default()
    };
    let debate_cfg = DebateConfig {
        max_iterations: args.max_iters.or(resolved.file.max_iters).unwrap_or(5),
        quiescent_rounds_to_stop: args
            .quiescence
            .or(resolved.file.quiescence)
            .unwrap_or(1),
        model_id: resolved.model.clone(),
        ..DebateConfig::default()
    };
    if let Some(dir) = &args.transcript_dir {
        fs::create_dir_all(dir)?;
    }
    let started = now();

    let runs = chunked(&records, resolved.jobs, |record| {
        run_mda(record, backend.as_ref(), &discovery_cfg)
            .map_err(|e| e.to_string())
            .and_then(|mda| {
                run_hdf(&mda.candidates, backend.as_ref(), &debate_cfg)
                    .map_err(|e| e.to_string())
            })
    });

    let mut out = String::new();
    let mut failures = 0usize;
    for (record, run) in records.iter().zip(runs) {
        match run {
            Ok((final_set, transcript)) => {
                let doc = DiscoveredDoc {
                    notam_id: record.id.clone(),
                    fields: final_set.fields,
                };
                out.push_str(&serde_json::to_string(&doc)?);
                out.push('\n');
                if let Some(dir) = &args.transcript_dir {
                    let path = dir.join(format!("{}.json", record.id));
                    fs::write(path, serde_json::to_string_pretty(&transcript)?)?;
                }
            }
            Err(e) => {
                eprintln!("discovery failed for {}: {e}", record.id);
                failures += 1;
            }
        }
    }
    fs::write(&args.out, out)?;
    write_sidecar(
        &args.out,
        &[
            format!("started {started}"),
            format!("finished {}", now()),
            format!("records {} failures {failures}", records.len()),
        ],
    )?;
    Ok(exit_code(failures, records.len()))
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Extraction,
    Discovery,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, value_enum)]
    mode: EvalMode,
    /// Discovery matching threshold
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(line)
                .with_context(|| format!("{}:{}", path.display(), i + 1))?,
        );
    }
    Ok(items)
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<u8> {
    let report = match args.mode {
        EvalMode::Extraction => {
            let pred: Vec<ExtractionResult> = read_jsonl(&args.pred)?;
            let gold: Vec<ExtractionResult> = read_jsonl(&args.gold)?;
            score_extraction(&pred, &gold)?
        }
        EvalMode::Discovery => {
            let pred: Vec<DiscoveredDoc> = read_jsonl(&args.pred)?;
            let gold: Vec<DiscoveredDoc> = read_jsonl(&args.gold)?;
            let pred_map: BTreeMap<&str, &Vec<EmergentField>> = pred
                .iter()
                .map(|d| (d.notam_id.as_str(), &d.fields))
                .collect();
            let empty = Vec::new();
            let mut pred_docs = Vec::new();
            let mut gold_docs = Vec::new();
            for doc in &gold {
                gold_docs.push(doc.fields.clone());
                pred_docs.push(
                    pred_map
                        .get(doc.notam_id.as_str())
                        .map(|f| (*f).clone())
                        .unwrap_or_else(|| empty.clone()),
                );
            }
            score_discovery(&pred_docs, &gold_docs, args.threshold)
        }
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    emit(args.out.as_ref(), &text)?;
    Ok(0)
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Tau,
    Shots,
    Temperature,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated, strictly increasing values
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cluster count for the synthetic tau benchmark
    #[arg(long, default_value_t = 50)]
    clusters: usize,
    /// Corpus input (shots/temperature sweeps)
    #[arg(long)]
    input: Option<PathBuf>,
    /// Gold extraction results (shots/temperature sweeps)
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long, default_value = "runway_lighting")]
    schema: String,
    #[arg(long)]
    examples: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

fn cmd_sweep(args: &SweepArgs) -> Result<u8> {
    let resolved = args.common.resolve()?;
    let result: SweepResult = match args.param {
        SweepParam::Tau => {
            let bench = synthetic_duplicate_benchmark(resolved.seed, args.clusters);
            sweep_tau(&bench, &args.values)?
        }
        SweepParam::Shots | SweepParam::Temperature => {
            let input = args
                .input
                .as_ref()
                .context("--input is required for this sweep")?;
            let gold_path = args
                .gold
                .as_ref()
                .context("--gold is required for this sweep")?;
            let backend = make_backend(&resolved.backend_spec)?;
            let records = load_records(input)?;
            let gold: Vec<ExtractionResult> = read_jsonl(gold_path)?;
            let schema = builtin_schema(&args.schema)?;
            let bank: Vec<IclExample> = match &args.examples {
                Some(path) => load_icl_bank(path)?,
                None => Vec::new(),
            };
            let base = strategy_config(StrategyKind::Icl, None, NamingArg::Clear, &resolved);
            match args.param {
                SweepParam::Shots => {
                    let shots: Vec<usize> = args.values.iter().map(|&v| v as usize).collect();
                    sweep_shots(
                        &shots,
                        &base,
                        schema,
                        &records,
                        &gold,
                        &bank,
                        backend.as_ref(),
                    )?
                }
                SweepParam::Temperature => sweep_temperature(
                    &args.values,
                    &base,
                    schema,
                    &records,
                    &gold,
                    &bank,
                    backend.as_ref(),
                )?,
                SweepParam::Tau => unreachable!(),
            }
        }
    };
    emit(args.out.as_ref(), &result.to_csv())?;
    Ok(0)
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
}

fn cmd_stats(args: &StatsArgs) -> Result<u8> {
    let records = load_records(&args.input)?;
    let stats = compute_stats(&records)?;
    println!("records: {}", stats.record_count);
    println!("mean words: {:.4}", stats.mean_word_count);
    println!("mean chars: {:.4}", stats.mean_char_count);
    println!("mean lines: {:.4}", stats.mean_line_count);
    match &stats.validity {
        Some(v) => {
            println!(
                "validity days: mean {:.4} median {:.4} min {:.4} max {:.4}",
                v.mean_days, v.median_days, v.min_days, v.max_days
            );
        }
        None => println!("validity days: n/a"),
    }
    println!("categories:");
    for (name, count) in &stats.category_counts {
        println!("  {name}: {count}");
    }
    Ok(0)
}

#[derive(Args)]
struct RecordArgs {
    #[command(flatten)]
    parse: ParseArgs,
    /// Cassette file to append completions to
    #[arg(long)]
    cassette: PathBuf,
}

fn cmd_record(args: &RecordArgs) -> Result<u8> {
    let resolved = args.parse.common.resolve()?;
    let inner = make_backend(&resolved.backend_spec)?;
    let recorder = RecordingBackend::new(inner, &args.cassette)?;
    let started = now();
    let (results, _, _) = run_parse_pipeline(&args.parse, &recorder, &resolved)?;
    recorder.finish()?;
    let mut out = String::new();
    let mut failures = 0usize;
    for result in &results {
        if !result.errors.is_empty() {
            failures += 1;
            eprintln!("record {} failed: {}", result.notam_id, result.errors.join("; "));
        }
        out.push_str(&serde_json::to_string(result)?);
        out.push('\n');
    }
    fs::write(&args.parse.out, out)?;
    write_sidecar(
        &args.parse.out,
        &[
            format!("started {started}"),
            format!("finished {}", now()),
            format!("records {} failures {failures}", results.len()),
        ],
    )?;
    Ok(exit_code(failures, results.len()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Parse(args) => cmd_parse(args),
        Command::Discover(args) => cmd_discover(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Record(args) => cmd_record(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
