use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use patrend::checkpoint::{write_atomic, Checkpoint};
use patrend::config::{DataConfig, RunConfig, TimeSpec};
use patrend::corpus::time::format_date;
use patrend::corpus::{synthesize, Dataset, SynthConfig};
use patrend::evaluator::{evaluate, rank_descending, replay_until, span_bounds, EvalOptions, Predictor, Span};
use patrend::export::{snapshot, to_tsv, trajectory};
use patrend::fusion::score_logits;
use patrend::model::{Ablations, Model};
use patrend::trainer::fit_with;
use patrend::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "patrend", version, about = "Patent classification trend prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a dataset and print a summary.
    Ingest(IngestArgs),
    /// Write a synthetic corpus with planted preferences.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Print the metric report of a model or baseline.
    Eval(EvalArgs),
    /// Print the top-K codes for the given companies.
    Predict(PredictArgs),
    /// Write memories and embeddings as tab-separated values.
    DumpEmbeddings(DumpArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    window_days: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Comma-separated subset of mi,sif,hmp,tie.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    persist_memory_across_epochs: bool,
}

#[derive(Args, Debug)]
struct EvalFlags {
    #[arg(long, default_value = "val")]
    span: String,
    /// Taxonomy level to evaluate at; defaults to the leaves.
    #[arg(long)]
    level: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40")]
    ks: Vec<usize>,
    /// Score the test span from memories at the end of training.
    #[arg(long)]
    no_warmup: bool,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    companies: Option<usize>,
    /// Children per level, e.g. `2,5,5`.
    #[arg(long, value_delimiter = ',')]
    branching: Option<Vec<usize>>,
    #[arg(long)]
    years: Option<usize>,
    #[arg(long)]
    events_per_company_year: Option<usize>,
    #[arg(long)]
    concentration: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// Checkpoint path.
    #[arg(long, default_value = "checkpoint.json")]
    out: PathBuf,
    /// Per-epoch log as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Top,
    PersonalTop,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "checkpoint")]
    baseline: Option<Baseline>,
    #[command(flatten)]
    eval: EvalFlags,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Company ids, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    company: Vec<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Predict for this span: memories are replayed up to its start.
    #[arg(long, default_value = "test")]
    span: String,
    #[arg(long)]
    no_warmup: bool,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "embeddings.tsv")]
    out: PathBuf,
    /// Snapshot after replaying up to the start of this span.
    #[arg(long, default_value = "test")]
    span: String,
    #[arg(long)]
    no_warmup: bool,
    /// Also write company trajectories at each year boundary.
    #[arg(long)]
    trajectory: bool,
}

fn run_config(data: &DataArgs) -> Result<RunConfig> {
    let mut cfg = match &data.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = &data.events {
        cfg.data.events = Some(e.clone());
    }
    if let Some(t) = &data.taxonomy {
        cfg.data.taxonomy = Some(t.clone());
    }
    Ok(cfg)
}

fn apply(o: &Overrides, cfg: &mut RunConfig) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.hidden_dim {
        t.hidden_dim = v;
    }
    if let Some(v) = o.window_days {
        t.window_days = v;
    }
    if let Some(v) = o.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = o.max_epochs {
        t.max_epochs = v;
    }
    if let Some(v) = o.patience {
        t.patience = v;
    }
    if let Some(a) = &o.ablate {
        t.ablations = a.parse::<Ablations>()?;
    }
    if o.persist_memory_across_epochs {
        t.persist_memory = true;
    }
    t.validate()
}

fn eval_options(f: &EvalFlags, batch_size: usize) -> Result<EvalOptions> {
    Ok(EvalOptions {
        span: f.span.parse()?,
        ks: f.ks.clone(),
        warmup: !f.no_warmup,
        level: f.level,
        batch_size,
    })
}

/// Loads a checkpoint and checks it was trained on `dataset`'s companies
/// and taxonomy.
fn load_model(path: &Path, dataset: &Dataset) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path)?;
    if ck.companies != dataset.company_ids {
        return Err(Error::Data("checkpoint was trained on a different company set".into()));
    }
    if ck.taxonomy != dataset.taxonomy.to_csv() {
        return Err(Error::Data("checkpoint was trained on a different taxonomy".into()));
    }
    let model = ck.model()?;
    Ok((ck, model))
}

fn ingest(args: IngestArgs) -> Result<()> {
    let cfg = run_config(&args.data)?;
    let ds = cfg.data.load()?;
    let tax = &ds.taxonomy;
    let levels: Vec<usize> = (1..=tax.depth()).map(|l| tax.level_size(l)).collect();
    let mut summary = json!({
        "companies": ds.company_count(),
        "events": ds.events.len(),
        "leaves": ds.leaf_count(),
        "level_sizes": levels,
        "first_event": ds.events.first().map(|e| format_date(e.timestamp)),
        "last_event": ds.events.last().map(|e| format_date(e.timestamp)),
    });
    if let Some(s) = ds.splits {
        let count = |a: f64, b: f64| ds.events_between(a, b).len();
        summary["split_events"] = json!({
            "train": ds.events_before(s.train_end).len(),
            "val": count(s.train_end, s.val_end),
            "test": count(s.val_end, s.test_end),
        });
    }
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut sc = SynthConfig::default();
    if let Some(v) = args.companies {
        sc.companies = v;
    }
    if let Some(v) = args.branching {
        sc.branching = v;
    }
    if let Some(v) = args.years {
        sc.years = v;
    }
    if let Some(v) = args.events_per_company_year {
        sc.events_per_company_year = v;
    }
    if let Some(v) = args.concentration {
        sc.concentration = v;
    }
    if let Some(v) = args.drift {
        sc.drift = v;
    }
    let out = synthesize(&sc, args.seed)?;
    let dir = &args.out;
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let ds = &out.dataset;
    let s = ds.splits.expect("synthetic corpora carry splits");
    write_atomic(&dir.join("taxonomy.csv"), ds.taxonomy.to_csv().as_bytes())?;
    ds.write_events(dir.join("events.jsonl"))?;
    let prefs = serde_json::to_string_pretty(&out.preferences).expect("preferences serialize");
    write_atomic(&dir.join("preferences.json"), prefs.as_bytes())?;
    let mut cfg = RunConfig::default();
    cfg.train.seed = args.seed;
    cfg.data = DataConfig {
        events: Some("events.jsonl".into()),
        taxonomy: Some("taxonomy.csv".into()),
        train_end: Some(TimeSpec::Text(format_date(s.train_end))),
        val_end: Some(TimeSpec::Text(format_date(s.val_end))),
        test_end: Some(TimeSpec::Text(format_date(s.test_end))),
        origin: Some(TimeSpec::Text(format_date(ds.origin))),
        filter: false,
        ..Default::default()
    };
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    eprintln!(
        "wrote {} events, {} companies, {} leaves to {}",
        ds.events.len(),
        ds.company_count(),
        ds.leaf_count(),
        dir.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = run_config(&args.data)?;
    apply(&args.overrides, &mut cfg)?;
    let ds = cfg.data.load()?;
    let mut log = match &args.log {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?),
        None => None,
    };
    let mut log_err = None;
    let state = fit_with(&ds, &cfg.train, |entry| {
        let line = serde_json::to_string(entry).expect("log serializes");
        eprintln!("{line}");
        if let Some(f) = log.as_mut() {
            if let Err(e) = writeln!(f, "{line}") {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let (Some(e), Some(p)) = (log_err, &args.log) {
        return Err(Error::Io {
            path: p.clone(),
            source: e,
        });
    }
    Checkpoint::from_state(&state, &cfg.train, &ds).save(&args.out)?;
    eprintln!(
        "best epoch {} ({} = {:.4}); checkpoint written to {}",
        state.best_epoch,
        cfg.train.selection_metric,
        state.best_metric,
        args.out.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = run_config(&args.data)?;
    let ds = cfg.data.load()?;
    let opts = eval_options(&args.eval, args.batch_size.unwrap_or(cfg.train.batch_size))?;
    let report = match (&args.checkpoint, args.baseline) {
        (_, Some(Baseline::Top)) => evaluate(Predictor::Top, &ds, &opts)?,
        (_, Some(Baseline::PersonalTop)) => evaluate(Predictor::PersonalTop, &ds, &opts)?,
        (Some(path), None) => {
            let (_, model) = load_model(path, &ds)?;
            evaluate(Predictor::Model(&model), &ds, &opts)?
        }
        (None, None) => return Err(Error::Config("give --checkpoint or --baseline".into())),
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if let Some(p) = &args.csv {
        write_atomic(p, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn history_end(ds: &Dataset, span: &str, no_warmup: bool) -> Result<f64> {
    let span: Span = span.parse()?;
    Ok(span_bounds(ds, span, !no_warmup)?.history_end)
}

fn predict(args: PredictArgs) -> Result<()> {
    let cfg = run_config(&args.data)?;
    let ds = cfg.data.load()?;
    let (ck, model) = load_model(&args.checkpoint, &ds)?;
    let companies = args
        .company
        .iter()
        .map(|id| {
            ds.company_index(id)
                .ok_or_else(|| Error::Data(format!("unknown company `{id}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let end = history_end(&ds, &args.span, args.no_warmup)?;
    let (mem, history) = replay_until(&model, &ds, end, ck.config.batch_size);
    let tax = &ds.taxonomy;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (&c, scores) in companies.iter().zip(score_logits(&model, &mem, &history, &companies)) {
        for (rank, j) in rank_descending(&scores).into_iter().take(args.k).enumerate() {
            let line = json!({
                "company": ds.company_ids[c],
                "rank": rank + 1,
                "code": tax.leaf_id(j),
                "ancestors": tax.ancestor_chain(j),
                "score": patrend::autodiff::logistic(scores[j]),
            });
            writeln!(out, "{line}").map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            })?;
        }
    }
    Ok(())
}

fn dump_embeddings(args: DumpArgs) -> Result<()> {
    let cfg = run_config(&args.data)?;
    let ds = cfg.data.load()?;
    let (ck, model) = load_model(&args.checkpoint, &ds)?;
    let end = history_end(&ds, &args.span, args.no_warmup)?;
    let bs = ck.config.batch_size;
    let (mem, _) = replay_until(&model, &ds, end, bs);
    let mut rows = snapshot(&model, &ds.company_ids, &mem, end);
    if args.trajectory {
        let first = patrend::corpus::time::year_of(ds.origin) + 1;
        let last = patrend::corpus::time::year_of(end);
        let times: Vec<f64> = (first..=last).map(patrend::corpus::time::year_start).filter(|&t| t <= end).collect();
        rows.extend(trajectory(&model, &ds, &times, bs));
    }
    write_atomic(&args.out, to_tsv(&rows).as_bytes())?;
    eprintln!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::DumpEmbeddings(a) => dump_embeddings(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
