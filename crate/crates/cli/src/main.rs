mod error;

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scir_core::backends::CassetteMode;
use scir_core::config::{AppConfig, BackendSpec, CassetteConfig, DEFAULT_ENDPOINT};
use scir_core::correction::Ablation;
use scir_core::dataset::{conll_to_items, item_to_json, load_items, ConllOptions};
use scir_core::engine::{run_batch, AnswerEntry, AnswerSet, RunManifest, TraceRow};
use scir_core::eval::{self, Golds, ScoreReport};
use scir_core::jsonl::{file_sha256, read_json, read_jsonl, write_json, write_jsonl};
use scir_core::mbsc::build_dataset;

use error::Failure;

#[derive(Parser)]
#[command(
    name = "scir",
    version,
    about = "Self-correcting information extraction"
)]
struct Cli {
    /// TOML configuration file. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Run the correction loop over a dataset.
    Run(RunArgs),
    /// Score answers (and optionally traces) against gold labels.
    Eval(EvalArgs),
    /// Diff-label predictions against gold into detector training records.
    BuildMbsc(MbscArgs),
    /// Call and time accounting for a finished run.
    Report(ReportArgs),
    /// Convert a CoNLL-style NER file to dataset JSONL.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Receives answers.jsonl, traces.jsonl and manifest.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// K; rounds 0..=K run, so at most K+1 generations per item.
    #[arg(long)]
    max_iterations: Option<u32>,
    /// both, redundant_only, missing_only or none.
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// oracle, remote[:ENDPOINT], scripted:PATH or follower:PATH[@FRACTION].
    #[arg(long)]
    extractor: Option<BackendSpec>,
    /// oracle, remote[:ENDPOINT], scripted:PATH or fixed:positive|negative.
    #[arg(long)]
    pruner: Option<BackendSpec>,
    /// Sets both detectors.
    #[arg(long)]
    detectors: Option<BackendSpec>,
    #[arg(long)]
    redundancy: Option<BackendSpec>,
    #[arg(long)]
    missing: Option<BackendSpec>,
    /// Defines or overrides the `default` remote endpoint.
    #[arg(long)]
    base_url: Option<String>,
    /// Model name for the `default` remote endpoint.
    #[arg(long)]
    model: Option<String>,
    /// Serve every model call from this cassette; never use the network.
    #[arg(long, conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Serve hits from this cassette and append new replies to it.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset JSONL with gold labels.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    answers: Option<PathBuf>,
    /// Adds the per-round curve, pruning table and accounting.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Supplies K for the curve; otherwise the highest traced round is used.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the per-round curve as CSV here.
    #[arg(long)]
    curve_csv: Option<PathBuf>,
}

#[derive(Args)]
struct MbscArgs {
    #[arg(long)]
    gold: Option<PathBuf>,
    /// JSONL of {"id", "prediction"}; a run's answers.jsonl also works.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write corpus statistics here instead of stdout.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "conll")]
    id_prefix: String,
    #[arg(long, default_value = "en")]
    language: String,
    /// Token separator; use "" for character-tokenized text.
    #[arg(long, default_value = " ")]
    joiner: String,
}

fn load_config(path: Option<&Path>) -> Result<AppConfig, Failure> {
    match path {
        Some(p) => Ok(AppConfig::load(p)?),
        None => Ok(AppConfig::default()),
    }
}

fn require<'a>(value: Option<&'a PathBuf>, what: &str) -> Result<&'a PathBuf, Failure> {
    value.ok_or_else(|| Failure::config(format!("no {what} given (flag or config file)")))
}

fn hash_input(
    inputs: &mut BTreeMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<(), Failure> {
    inputs.insert(key.to_string(), path.display().to_string());
    inputs.insert(format!("{key}_sha256"), file_sha256(path)?);
    Ok(())
}

fn cmd_run(mut cfg: AppConfig, args: RunArgs) -> Result<(), Failure> {
    if let Some(v) = args.dataset {
        cfg.paths.dataset = Some(v);
    }
    if let Some(v) = args.out_dir {
        cfg.paths.out_dir = Some(v);
    }
    if let Some(v) = args.templates {
        cfg.paths.templates = Some(v);
    }
    if let Some(v) = args.max_iterations {
        cfg.run.max_iterations = v;
    }
    if let Some(v) = args.ablation {
        cfg.run.ablation = v;
    }
    if let Some(v) = args.parallelism {
        cfg.run.parallelism = v;
    }
    if let Some(v) = args.extractor {
        cfg.backends.extractor = v;
    }
    if let Some(v) = args.pruner {
        cfg.backends.pruner = v;
    }
    if let Some(v) = args.detectors {
        cfg.backends.redundancy = v.clone();
        cfg.backends.missing = v;
    }
    if let Some(v) = args.redundancy {
        cfg.backends.redundancy = v;
    }
    if let Some(v) = args.missing {
        cfg.backends.missing = v;
    }
    if args.base_url.is_some() || args.model.is_some() {
        let ep = cfg
            .endpoints
            .entry(DEFAULT_ENDPOINT.to_string())
            .or_default();
        if let Some(v) = args.base_url {
            ep.base_url = v;
        }
        if let Some(v) = args.model {
            ep.model = v;
        }
    }
    if let Some(path) = args.replay {
        cfg.cassette = Some(CassetteConfig {
            path,
            mode: CassetteMode::Replay,
        });
    } else if let Some(path) = args.record {
        cfg.cassette = Some(CassetteConfig {
            path,
            mode: CassetteMode::Record,
        });
    }

    let dataset = require(cfg.paths.dataset.as_ref(), "dataset")?.clone();
    let out_dir = require(cfg.paths.out_dir.as_ref(), "output directory")?.clone();
    let backends = cfg.build_backends()?;
    let items = load_items(&dataset, &cfg.run.policy)?;
    fs::create_dir_all(&out_dir).map_err(|e| Failure::io(format!("{}: {e}", out_dir.display())))?;

    let mut inputs = BTreeMap::new();
    hash_input(&mut inputs, "dataset", &dataset)?;
    if let Some(c) = &cfg.cassette {
        inputs.insert(
            "cassette_mode".into(),
            format!("{:?}", c.mode).to_lowercase(),
        );
        if c.path.is_file() {
            hash_input(&mut inputs, "cassette", &c.path)?;
        }
    }

    let mut out = run_batch(&items, &cfg.run, &backends)?;
    out.manifest.inputs = inputs;
    out.manifest.app_config = Some(cfg.to_json());

    write_jsonl(&out_dir.join("answers.jsonl"), out.answers.values())?;
    write_jsonl(&out_dir.join("traces.jsonl"), &out.traces)?;
    write_json(&out_dir.join("manifest.json"), &out.manifest)?;

    let m = &out.manifest;
    println!(
        "items={} pruned={} flushed={} aborted={} extraction_calls={} prune_calls={} detector_calls={}",
        m.items,
        m.outcomes.pruned,
        m.outcomes.flushed,
        m.outcomes.aborted,
        m.calls.extraction,
        m.calls.prune,
        m.calls.detector
    );
    println!("wrote {}", out_dir.display());
    if m.outcomes.aborted > 0 {
        log::warn!(
            "{} items aborted after backend failures; see traces",
            m.outcomes.aborted
        );
    }
    Ok(())
}

fn load_golds(path: &Path, cfg: &AppConfig) -> Result<Golds, Failure> {
    Ok(load_items(path, &cfg.run.policy)?
        .into_iter()
        .filter_map(|item| item.gold.map(|g| (item.id, g)))
        .collect())
}

fn cmd_eval(cfg: AppConfig, args: EvalArgs) -> Result<(), Failure> {
    let gold_path = require(args.gold.as_ref().or(cfg.paths.gold.as_ref()), "gold file")?;
    let golds = load_golds(gold_path, &cfg)?;
    let policy = &cfg.run.policy;
    let traces: Option<Vec<TraceRow>> = args.traces.as_deref().map(read_jsonl).transpose()?;

    let answers: AnswerSet = match (&args.answers, &traces) {
        (Some(path), _) => read_jsonl::<AnswerEntry>(path)?
            .into_iter()
            .map(|a| (a.id.clone(), a))
            .collect(),
        (None, Some(traces)) => eval::answers_from_traces(traces)?,
        (None, None) => return Err(Failure::config("eval needs --answers or --traces")),
    };
    let mut report: ScoreReport = eval::score_answers(&answers, &golds, policy)?;

    if let Some(traces) = &traces {
        let k = match &args.manifest {
            Some(path) => read_json::<RunManifest>(path)?.iterations,
            None => traces.iter().map(|r| r.round).max().unwrap_or(0),
        };
        report.curve = eval::per_round_curve(traces, &golds, k, policy)?;
        report.pruning = eval::pruning_table(traces, &golds, policy)?;
        report.accounting = Some(eval::accounting(traces));
    }

    print!("{}", report.render_text());
    if let Some(path) = &args.json {
        write_json(path, &report)?;
    }
    if let Some(path) = &args.curve_csv {
        if report.curve.is_empty() {
            return Err(Failure::config("--curve-csv needs --traces"));
        }
        fs::write(path, eval::curve_csv(&report.curve))
            .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_build_mbsc(cfg: AppConfig, args: MbscArgs) -> Result<(), Failure> {
    let gold = require(args.gold.as_ref().or(cfg.paths.gold.as_ref()), "gold file")?;
    let preds = require(
        args.predictions.as_ref().or(cfg.paths.predictions.as_ref()),
        "predictions file",
    )?;
    let stats = build_dataset(gold, preds, &args.out, &cfg.run.policy)?;
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    match &args.stats {
        Some(path) => {
            write_json(path, &stats)?;
            println!(
                "records={} malformed_rows={}",
                stats.records, stats.malformed_rows
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let traces: Vec<TraceRow> = read_jsonl(&args.traces)?;
    let acc = eval::accounting(&traces);
    if let Some(path) = &args.manifest {
        let m: RunManifest = read_json(path)?;
        println!(
            "backends: extractor={} pruner={} redundancy={} missing={}",
            m.backends.extractor, m.backends.pruner, m.backends.redundancy, m.backends.missing
        );
        println!(
            "iterations K={} (at most {} generations per item), wall {:.1} ms",
            m.iterations, m.max_generations, m.wall_ms
        );
        if m.calls != acc.total.calls {
            return Err(Failure::new(
                "TraceIncomplete",
                format!(
                    "manifest call counts {:?} differ from trace totals {:?}",
                    m.calls, acc.total.calls
                ),
            ));
        }
    }
    print!("{}", eval::render_accounting(&acc));
    if let Some(path) = &args.json {
        write_json(path, &acc)?;
    }
    Ok(())
}

fn cmd_convert(cfg: AppConfig, args: ConvertArgs) -> Result<(), Failure> {
    let file = fs::File::open(&args.input)
        .map_err(|e| Failure::io(format!("{}: {e}", args.input.display())))?;
    let opts = ConllOptions {
        id_prefix: args.id_prefix,
        language: args.language,
        joiner: args.joiner,
    };
    let items = conll_to_items(BufReader::new(file), &opts, &cfg.run.policy)?;
    let mut text = String::new();
    for item in &items {
        text.push_str(&item_to_json(item));
        text.push('\n');
    }
    fs::write(&args.output, text)
        .map_err(|e| Failure::io(format!("{}: {e}", args.output.display())))?;
    println!("items={}", items.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = load_config(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Run(args) => cmd_run(cfg, args),
        Command::Eval(args) => cmd_eval(cfg, args),
        Command::BuildMbsc(args) => cmd_build_mbsc(cfg, args),
        Command::Report(args) => cmd_report(args),
        Command::Convert(args) => cmd_convert(cfg, args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("{failure}");
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}
