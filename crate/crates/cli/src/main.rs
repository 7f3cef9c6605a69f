//! `rpt`: encode formulas, train and evaluate periodic-table band-gap models.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use rpt_core::data::{
    encode_record, load_csv, prepare_classification, prepare_regression, split, Prepared, Sample, SampleRecord, Source,
    SplitDataset,
};
use rpt_core::encoder::encode;
use rpt_core::formula::{parse_formula, Representation};
use rpt_core::layers::{build_network, NetworkConfig, Periodicity, Scale, Task};
use rpt_core::metrics::DEFAULT_THRESHOLD;
use rpt_core::model_file;
use rpt_core::trainer::{batch_tensor, evaluate, train, EpochRecord, EvalReport, TrainConfig, TrainOutcome};
use rpt_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "rpt",
    version,
    about = "Periodic-table convolutional models for band-gap prediction",
    args_override_self = true
)]
struct Cli {
    /// Seed for subsampling, splitting, initialisation and batch order.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    /// Emit exactly one JSON document on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the 4x9x18 periodic-table tensor of a formula.
    Encode(EncodeArgs),
    /// Train a model and report test-set metrics.
    Train(TrainArgs),
    /// Score a saved model on a CSV file.
    Evaluate(EvaluateArgs),
    /// Predict a gap probability (classify) or band gap in eV (regress).
    Predict(PredictArgs),
    /// Train with and without periodic padding under identical settings.
    Ablate(AblateArgs),
    /// Report dataset counts after deduplication and class balancing.
    Stats(DataArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TaskArg {
    Classify,
    Regress,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Classify => Task::Classify,
            TaskArg::Regress => Task::Regress,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for Periodicity {
    fn from(s: Switch) -> Periodicity {
        match s {
            Switch::On => Periodicity::Cylindrical,
            Switch::Off => Periodicity::Flat,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScaleArg {
    Full,
    Reduced,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Scale {
        match s {
            ScaleArg::Full => Scale::Full,
            ScaleArg::Reduced => Scale::Reduced,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ReprArg {
    Absolute,
    Relative,
}

impl From<ReprArg> for Representation {
    fn from(r: ReprArg) -> Representation {
        match r {
            ReprArg::Absolute => Representation::Absolute,
            ReprArg::Relative => Representation::Relative,
        }
    }
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    formula: String,
    #[arg(long, value_enum, default_value_t = ReprArg::Absolute)]
    representation: ReprArg,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// CSV with header `composition,target[,source]`.
    #[arg(long)]
    data: PathBuf,
    /// Non-gapped CSV; required for classify.
    #[arg(long)]
    negatives: Option<PathBuf>,
    /// Skip malformed CSV lines instead of aborting.
    #[arg(long)]
    skip_bad: bool,
}

#[derive(Args, Debug)]
struct HyperArgs {
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = ScaleArg::Full)]
    scale: ScaleArg,
    #[arg(long, value_enum, default_value_t = ReprArg::Absolute)]
    representation: ReprArg,
    /// Independent re-split and re-initialised runs; metrics are averaged.
    #[arg(long, default_value_t = 1)]
    repeats: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    periodicity: Switch,
    /// Final-epoch model (first repeat).
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Best-scoring checkpoint (first repeat).
    #[arg(long)]
    best_out: Option<PathBuf>,
    /// Per-epoch JSON lines.
    #[arg(long)]
    history_out: Option<PathBuf>,
    /// Dataset statistics JSON.
    #[arg(long)]
    stats_out: Option<PathBuf>,
    /// Write `train.csv` and `test.csv` of the first repeat here.
    #[arg(long)]
    split_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    history_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Extra non-gapped records (classify only).
    #[arg(long)]
    negatives: Option<PathBuf>,
    /// Fail unless the model was trained for this task.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Write ROC points as `fpr,tpr` rows.
    #[arg(long)]
    roc_out: Option<PathBuf>,
    /// Write `true,pred` rows.
    #[arg(long)]
    scatter_out: Option<PathBuf>,
    #[arg(long)]
    skip_bad: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    formula: String,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Core(Error::Io(e.into()))
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(Error::NonFiniteLoss { .. }) => 3,
            _ => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Usage(m) => m.clone(),
        }
    }
}

type Outcome = Result<Report, Failure>;

/// A command result: the JSON document and its plain-text rendering.
struct Report {
    doc: Value,
    text: String,
}

impl Report {
    fn pretty(doc: Value) -> Report {
        let text = serde_json::to_string_pretty(&doc).unwrap_or_default();
        Report { doc, text }
    }
}

struct Ctx {
    seed: u64,
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx { seed: cli.seed, quiet: cli.quiet };
    let result = match &cli.command {
        Command::Encode(a) => cmd_encode(a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => cmd_ablate(&ctx, a),
        Command::Stats(a) => cmd_stats(&ctx, a),
    };
    match result {
        Ok(r) => {
            if cli.json {
                emit(&r.doc.to_string());
            } else {
                emit(&r.text);
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            if cli.json {
                emit(&json!({ "error": f.message(), "exit_code": f.code() }).to_string());
            }
            ExitCode::from(f.code())
        }
    }
}

/// Writes one line to stdout; a closed pipe is not an error.
fn emit(s: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{s}").and_then(|()| out.flush());
}

fn cmd_encode(a: &EncodeArgs) -> Outcome {
    let mut comp = parse_formula(&a.formula)?;
    if matches!(a.representation, ReprArg::Relative) {
        comp = comp.to_relative()?;
    }
    let doc = serde_json::to_value(encode(&comp)?.to_json()).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(Report::pretty(doc))
}

fn load(ctx: &Ctx, path: &Path, task: Task, skip_bad: bool) -> Result<Vec<SampleRecord>, Failure> {
    let loaded = load_csv(path, task, skip_bad)?;
    for d in &loaded.skipped {
        ctx.note(format!("{}: skipped {d}", path.display()));
    }
    Ok(loaded.records)
}

fn prepare(ctx: &Ctx, a: &DataArgs) -> Result<Prepared, Failure> {
    let task = Task::from(a.task);
    let gapped = load(ctx, &a.data, task, a.skip_bad)?;
    match (task, &a.negatives) {
        (Task::Classify, Some(neg)) => {
            let nongapped = load(ctx, neg, task, a.skip_bad)?;
            Ok(prepare_classification(&gapped, &nongapped, ctx.seed)?)
        }
        (Task::Classify, None) => Err(Failure::Usage("classify requires --negatives".into())),
        (Task::Regress, Some(_)) => Err(Failure::Usage("--negatives only applies to classify".into())),
        (Task::Regress, None) => Ok(prepare_regression(&gapped)),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, v).map_err(std::io::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn cmd_stats(ctx: &Ctx, a: &DataArgs) -> Outcome {
    let prepared = prepare(ctx, a)?;
    Ok(Report::pretty(serde_json::to_value(&prepared.stats).map_err(std::io::Error::from)?))
}

fn progress_line(repeat: u64, epochs: usize, r: &EpochRecord) -> String {
    let metric = match &r.test_metrics {
        EvalReport::Classification(c) => match c.auc {
            Some(auc) => format!("acc {:.4} auc {auc:.4}", c.accuracy),
            None => format!("acc {:.4}", c.accuracy),
        },
        EvalReport::Regression(m) => format!("r2 {:.4} rmse {:.4}", m.r_squared, m.rmse),
    };
    format!("[{} r{repeat}] epoch {}/{epochs} loss {:.5} {metric}", r.periodicity, r.epoch, r.train_loss)
}

struct RunSummary {
    param_count: usize,
    repeats: Vec<Value>,
    finals: Vec<Value>,
}

/// Trains `hyper.repeats` models; repeat `r` uses seed `seed + r`.
fn run_repeats(
    ctx: &Ctx,
    prepared: &Prepared,
    task: Task,
    periodicity: Periodicity,
    hyper: &HyperArgs,
    history: &mut Option<BufWriter<File>>,
    mut first: impl FnMut(&TrainOutcome, &SplitDataset) -> Result<(), Failure>,
) -> Result<RunSummary, Failure> {
    if hyper.repeats == 0 {
        return Err(Failure::Usage("--repeats must be at least 1".into()));
    }
    let mut summary = RunSummary { param_count: 0, repeats: Vec::new(), finals: Vec::new() };
    for r in 0..hyper.repeats {
        let seed = ctx.seed.wrapping_add(r);
        let data = split(&prepared.records, seed, hyper.representation.into())?;
        let mut cfg = NetworkConfig::new(task, periodicity, hyper.scale.into(), seed);
        cfg.representation = hyper.representation.into();
        let net = build_network(&cfg)?;
        summary.param_count = net.param_count();
        let tcfg = TrainConfig {
            lr: hyper.lr,
            epochs: hyper.epochs,
            batch_size: hyper.batch_size,
            seed,
            ..TrainConfig::new(task)
        };
        let outcome = train(net, &data, &tcfg, |rec| ctx.note(progress_line(r, hyper.epochs, rec)))?;
        if let Some(w) = history {
            for rec in &outcome.history {
                let mut line = serde_json::to_value(rec).map_err(std::io::Error::from)?;
                if let Value::Object(m) = &mut line {
                    m.insert("repeat".into(), json!(r));
                }
                writeln!(w, "{line}")?;
            }
        }
        if r == 0 {
            first(&outcome, &data)?;
        }
        let last = outcome.history.last().map(|h| &h.test_metrics);
        let best = outcome.history.get(outcome.best_epoch - 1).map(|h| &h.test_metrics);
        let fin = serde_json::to_value(last).map_err(std::io::Error::from)?;
        summary.repeats.push(json!({
            "repeat": r,
            "seed": seed,
            "train_size": data.train.len(),
            "test_size": data.test.len(),
            "final_train_loss": outcome.history.last().map(|h| h.train_loss),
            "final": fin,
            "best_epoch": outcome.best_epoch,
            "best": best,
        }));
        summary.finals.push(fin);
    }
    if let Some(w) = history {
        w.flush()?;
    }
    Ok(summary)
}

/// Field-wise mean of the numeric entries shared by all reports.
fn mean_report(reports: &[Value]) -> Value {
    let mut out = Map::new();
    if let Some(Value::Object(first)) = reports.first() {
        for key in first.keys() {
            let vals: Option<Vec<f64>> = reports.iter().map(|r| r.get(key).and_then(Value::as_f64)).collect();
            if let Some(vals) = vals {
                out.insert(key.clone(), json!(vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
    }
    Value::Object(out)
}

fn summary_text(label: &str, s: &RunSummary) -> String {
    let mean = mean_report(&s.finals);
    let fields: Vec<String> = mean
        .as_object()
        .map(|m| {
            m.iter().map(|(k, v)| format!("{k}={}", v.as_f64().map_or(v.to_string(), |x| format!("{x:.4}")))).collect()
        })
        .unwrap_or_default();
    format!("{label}: params={} repeats={} {}", s.param_count, s.finals.len(), fields.join(" "))
}

fn open_history(path: &Option<PathBuf>) -> Result<Option<BufWriter<File>>, Failure> {
    Ok(match path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    })
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Outcome {
    let task = Task::from(a.data.task);
    let prepared = prepare(ctx, &a.data)?;
    ctx.note(format!("{} records for {task}", prepared.records.len()));
    if let Some(p) = &a.stats_out {
        write_json(p, &prepared.stats)?;
    }
    let periodicity = Periodicity::from(a.periodicity);
    let mut history = open_history(&a.history_out)?;
    let s = run_repeats(ctx, &prepared, task, periodicity, &a.hyper, &mut history, |o, data| {
        if let Some(dir) = &a.split_dir {
            std::fs::create_dir_all(dir)?;
            write_records(&dir.join("train.csv"), &prepared.records, &data.train)?;
            write_records(&dir.join("test.csv"), &prepared.records, &data.test)?;
        }
        if let Some(p) = &a.model_out {
            model_file::save(&o.model, p)?;
        }
        if let Some(p) = &a.best_out {
            model_file::save(&o.best, p)?;
        }
        Ok(())
    })?;
    let doc = json!({
        "task": task,
        "periodicity": periodicity,
        "scale": Scale::from(a.hyper.scale),
        "param_count": s.param_count,
        "dataset": prepared.stats,
        "runs": s.repeats,
        "mean": mean_report(&s.finals),
    });
    Ok(Report { text: summary_text(&format!("{task}/{periodicity}"), &s), doc })
}

fn cmd_ablate(ctx: &Ctx, a: &AblateArgs) -> Outcome {
    let task = Task::from(a.data.task);
    let prepared = prepare(ctx, &a.data)?;
    let mut history = open_history(&a.history_out)?;
    let on = run_repeats(ctx, &prepared, task, Periodicity::Cylindrical, &a.hyper, &mut history, |_, _| Ok(()))?;
    let off = run_repeats(ctx, &prepared, task, Periodicity::Flat, &a.hyper, &mut history, |_, _| Ok(()))?;
    if on.param_count != off.param_count {
        return Err(Failure::Usage(format!(
            "parameter counts differ: cylindrical {} vs flat {}",
            on.param_count, off.param_count
        )));
    }
    let doc = json!({
        "task": task,
        "scale": Scale::from(a.hyper.scale),
        "param_count": on.param_count,
        "dataset": prepared.stats,
        "cylindrical": { "runs": on.repeats, "mean": mean_report(&on.finals) },
        "flat": { "runs": off.repeats, "mean": mean_report(&off.finals) },
    });
    let text = format!("{}\n{}", summary_text("cylindrical", &on), summary_text("flat", &off));
    Ok(Report { doc, text })
}

fn check_task(net_task: Task, requested: Option<TaskArg>) -> Result<(), Failure> {
    match requested.map(Task::from) {
        Some(t) if t != net_task => {
            Err(Error::TaskMismatch { model: net_task.to_string(), requested: t.to_string() }.into())
        }
        _ => Ok(()),
    }
}

fn write_pairs(path: &Path, header: [&str; 2], rows: &[(f64, f64)]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for (a, b) in rows {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_records(path: &Path, records: &[SampleRecord], samples: &[Sample]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["composition", "target", "source"])?;
    for s in samples {
        let r = &records[s.index];
        let source = match r.source {
            Source::Experimental => "experimental",
            Source::Computed => "computed",
        };
        w.write_record([r.composition_text.as_str(), &r.target.to_string(), source])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Outcome {
    let net = model_file::load(&a.model)?;
    let task = net.config().task;
    check_task(task, a.task)?;
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Failure::Usage(format!("threshold must lie in [0, 1], got {}", a.threshold)));
    }
    let mut records = load(ctx, &a.data, task, a.skip_bad)?;
    match (&a.negatives, task) {
        (Some(neg), Task::Classify) => records.extend(load(ctx, neg, task, a.skip_bad)?),
        (Some(_), Task::Regress) => return Err(Failure::Usage("--negatives only applies to classify".into())),
        (None, _) => {}
    }
    let repr = net.config().representation;
    let samples = records.iter().enumerate().map(|(i, r)| encode_record(r, i, repr)).collect::<Result<Vec<_>, _>>()?;
    let report = evaluate(&net, &samples, a.threshold)?;
    match (&report, &a.roc_out, &a.scatter_out) {
        (EvalReport::Regression(_), Some(_), _) => {
            return Err(Failure::Usage("--roc-out needs a classify model".into()))
        }
        (EvalReport::Classification(_), _, Some(_)) => {
            return Err(Failure::Usage("--scatter-out needs a regress model".into()))
        }
        _ => {}
    }
    if let (EvalReport::Classification(c), Some(p)) = (&report, &a.roc_out) {
        write_pairs(p, ["fpr", "tpr"], &c.roc_points)?;
    }
    if let (EvalReport::Regression(r), Some(p)) = (&report, &a.scatter_out) {
        write_pairs(p, ["true", "pred"], &r.scatter)?;
    }
    let doc = json!({
        "task": task,
        "periodicity": net.config().periodicity,
        "samples": samples.len(),
        "metrics": report.summary(),
    });
    Ok(Report::pretty(doc))
}

fn cmd_predict(a: &PredictArgs) -> Outcome {
    let net = model_file::load(&a.model)?;
    let task = net.config().task;
    check_task(task, a.task)?;
    let mut comp = parse_formula(&a.formula)?;
    if net.config().representation == Representation::Relative {
        comp = comp.to_relative()?;
    }
    let sample = Sample { index: 0, tensor: encode(&comp)?, target: 0.0 };
    let value = f64::from(net.predict(batch_tensor(&[&sample])?)?[0]);
    let unit = match task {
        Task::Classify => "probability",
        Task::Regress => "eV",
    };
    Ok(Report {
        doc: json!({ "formula": a.formula, "task": task, "prediction": value, "unit": unit }),
        text: value.to_string(),
    })
}
