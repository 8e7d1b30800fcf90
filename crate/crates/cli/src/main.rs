//! `listreader` command-line interface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use listreader::config::{Ablation, ConfigFile, TrainConfig};
use listreader::model::ListReader;
use listreader::tensor::Checkpoint;
use listreader::text::{
    corpus_stats, generate_synthetic, load_jsonl, write_jsonl, Example, LoadOptions, SynthConfig,
    SynthMode,
};
use listreader::training::{
    disjoint_sentence_recall, evaluate, run_ablation_suite, train, EpochRecord, TrainOptions,
    BEST_CHECKPOINT,
};
use listreader::{Error, Scalar};
use serde_json::json;

/// Environment variable that overrides the configured seed.
const SEED_ENV: &str = "LISTREADER_SEED";
const DEFAULT_LAMBDA: f64 = 2.0;

#[derive(Parser)]
#[command(
    name = "listreader",
    version,
    about = "Extractive reader for list-form answers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic JSONL corpus and print its statistics.
    Gen(GenArgs),
    /// Train a model; writes best.ckpt, report.json, loss.csv and config.json.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled corpus.
    Eval(EvalArgs),
    /// Extract answers for one question from a plain-text passage.
    Predict(PredictArgs),
    /// Sentence probabilities after every interaction sublayer, as CSV.
    Trace(TraceArgs),
    /// Train every ablation variant over several seeds and compare.
    Ablate(AblateArgs),
    /// Print corpus statistics for a JSONL file.
    Stats(StatsArgs),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    mode: SynthMode,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Pseudo-word pool size.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Relational mode: tie distractor sentences in pairs by a private word.
    #[arg(long)]
    paired_distractors: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's ablation variant.
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long, value_enum, default_value_t)]
    precision: Precision,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-example predictions as JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    precision: Precision,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    question: String,
    /// Plain-text passage; sentences end at `.`, `!` or `?`.
    #[arg(long)]
    passage: PathBuf,
    #[arg(long)]
    json: bool,
    #[arg(long, value_enum, default_value_t)]
    precision: Precision,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    example_id: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    precision: Precision,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    /// Comma-separated variants; all four when omitted.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Ablation>,
    /// Directory for table.md and table.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    precision: Precision,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
}

/// Failure with its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            kind: "usage",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Validation { .. }
            | Error::Config(_)
            | Error::Checkpoint(_)
            | Error::Contract(_) => 2,
            Error::Io { .. }
            | Error::Divergence(_)
            | Error::Domain { .. }
            | Error::Dimension { .. } => 3,
        };
        Failure {
            code,
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Run a command generic over the scalar type at the requested precision.
macro_rules! dispatch {
    ($p:expr, $f:ident, $a:expr) => {
        match $p {
            Precision::F32 => $f::<f32>($a),
            Precision::F64 => $f::<f64>($a),
        }
    };
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let line = first
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            return report(Failure::usage(line));
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => dispatch!(a.precision, cmd_train, a),
        Command::Eval(a) => dispatch!(a.precision, cmd_eval, a),
        Command::Predict(a) => dispatch!(a.precision, cmd_predict, a),
        Command::Trace(a) => dispatch!(a.precision, cmd_trace, a),
        Command::Ablate(a) => dispatch!(a.precision, cmd_ablate, a),
        Command::Stats(a) => cmd_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

/// Print a one-line JSON error and map it to an exit code.
fn report(f: Failure) -> ExitCode {
    let line = json!({"error": f.kind, "message": f.message});
    eprintln!("{line}");
    ExitCode::from(f.code)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_data(path: &Path, strict: bool) -> Result<Vec<Example>, Error> {
    load_jsonl(path, LoadOptions { strict })
}

fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ListReader<T>, serde_json::Value), Error> {
    ListReader::from_checkpoint(&Checkpoint::<T>::load(path)?)
}

fn checkpoint_lambda(extra: &serde_json::Value) -> f64 {
    extra
        .get("lambda")
        .and_then(serde_json::Value::as_f64)
        .unwrap_or(DEFAULT_LAMBDA)
}

/// Seed from the environment, if set.
fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Failure::from(Error::Config(format!(
                "{SEED_ENV}=`{v}` is not an unsigned integer"
            )))
        }),
        Err(_) => Ok(None),
    }
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let mut cfg = SynthConfig::new(a.mode, a.n);
    if let Some(v) = a.vocab_size {
        cfg.vocab_size = v;
    }
    cfg.paired_distractors = a.paired_distractors;
    if a.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()).into());
    }
    let data = generate_synthetic(&cfg, a.seed)?;
    write_jsonl(&a.out, &data)?;
    println!("{}", pretty(&corpus_stats(&data)));
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> CmdResult {
    let data = load_data(&a.data, false)?;
    println!("{}", pretty(&corpus_stats(&data)));
    Ok(())
}

/// Config file plus command-line and environment overrides.
fn resolve_config(
    path: &Path,
    ablation: Option<Ablation>,
) -> Result<(ConfigFile, TrainConfig), Failure> {
    let mut file = ConfigFile::load(path)?;
    if let Some(ab) = ablation {
        file.ablation.variant = ab;
    }
    if let Some(seed) = seed_override()? {
        file.training.seed = seed;
    }
    let cfg = file.train_config();
    Ok((file, cfg))
}

fn cmd_train<T: Scalar>(a: TrainArgs) -> CmdResult {
    let (file, cfg) = resolve_config(&a.config, a.ablation)?;
    let train_set = load_data(&a.data, file.data.strict)?;
    let val_set = load_data(&a.val, file.data.strict)?;
    eprintln!("config:\n{}", file.to_json_pretty());
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_file(&a.out.join("config.json"), file.to_json_pretty().as_bytes())?;

    let quiet = a.quiet;
    let mut progress = |r: &EpochRecord| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train {:.4}  val {:.4}  span_f1 {:.4}  sent_f1 {:.4}",
                r.epoch, r.train_loss, r.val_loss, r.val_span_f1, r.val_sent_f1
            );
        }
    };
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        on_epoch: Some(&mut progress),
    };
    let outcome = train::<T>(&cfg, &train_set, &val_set, opts)?;
    let report = &outcome.report;
    write_file(&a.out.join("report.json"), pretty(report).as_bytes())?;
    write_file(&a.out.join("loss.csv"), report.loss_csv().as_bytes())?;
    println!(
        "{}",
        json!({
            "checkpoint": a.out.join(BEST_CHECKPOINT),
            "best_epoch": report.best_epoch,
            "best_val_loss": report.best_val_loss,
            "best_val_span_f1": report.best_val_span_f1,
            "best_val_sent_f1": report.best_val_sent_f1,
            "epochs": report.epochs.len(),
            "stopped_early": report.stopped_early,
            "ablation": report.ablation,
            "seed": report.seed,
        })
    );
    Ok(())
}

fn cmd_eval<T: Scalar>(a: EvalArgs) -> CmdResult {
    let (model, extra) = load_checkpoint::<T>(&a.checkpoint)?;
    let data = load_data(&a.data, false)?;
    let report = evaluate(&model, &data, checkpoint_lambda(&extra))?;
    if let Some(out) = &a.out {
        write_file(out, report.predictions_jsonl().as_bytes())?;
    }
    println!(
        "{}",
        json!({
            "span_f1": report.span_f1,
            "sent_f1": report.sent_f1,
            "loss": report.loss,
            "examples": data.len(),
            "disjoint_sentence_recall": disjoint_sentence_recall(&data, &report),
        })
    );
    Ok(())
}

fn cmd_predict<T: Scalar>(a: PredictArgs) -> CmdResult {
    let text = fs::read_to_string(&a.passage).map_err(|e| Error::io(&a.passage, e))?;
    if text.trim().is_empty() {
        return Err(Failure::usage(format!(
            "passage file {} is empty",
            a.passage.display()
        )));
    }
    if a.question.trim().is_empty() {
        return Err(Failure::usage("question is empty"));
    }
    let (model, _) = load_checkpoint::<T>(&a.checkpoint)?;
    let example = Example::from_running_text("input", &a.question, &text);
    let pred = model.predict(&example)?;
    let record =
        listreader::extractor::PredictionRecord::new(&example, pred.answers.clone(), false);
    let mut out = std::io::stdout().lock();
    if a.json {
        writeln!(
            out,
            "{}",
            serde_json::to_string(&record).expect("record serializes")
        )
        .ok();
        return Ok(());
    }
    if record.spans.is_empty() {
        writeln!(out, "no answers found").ok();
        return Ok(());
    }
    for (i, s) in record.spans.iter().enumerate() {
        let score = pred.sentences.probs[s.sent];
        writeln!(out, "{}. {}", i + 1, s.text).ok();
        writeln!(
            out,
            "   sentence {} (p={score:.3}): {}",
            s.sent, example.passage_text[s.sent]
        )
        .ok();
    }
    Ok(())
}

fn cmd_trace<T: Scalar>(a: TraceArgs) -> CmdResult {
    let (model, _) = load_checkpoint::<T>(&a.checkpoint)?;
    let data = load_data(&a.data, false)?;
    let example = data.iter().find(|e| e.id == a.example_id).ok_or_else(|| {
        Error::validation(
            None,
            format!(
                "example id `{}` not found in {}",
                a.example_id,
                a.data.display()
            ),
        )
    })?;
    let trace = model.trace(example)?;
    let width = trace.rows.first().map_or(0, |r| r.1.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["layer".to_string()];
    header.extend((0..width).map(|k| format!("s{k}")));
    let csv_err = |e: csv::Error| Error::io(&a.out, std::io::Error::other(e));
    w.write_record(&header).map_err(csv_err)?;
    for (name, probs) in &trace.rows {
        let mut rec = vec![name.clone()];
        rec.extend(probs.iter().map(|p| p.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(&a.out, std::io::Error::other(e.to_string())))?;
    write_file(&a.out, &bytes)?;
    println!(
        "{}",
        json!({"rows": trace.rows.len(), "sentences": width, "out": a.out})
    );
    Ok(())
}

fn cmd_ablate<T: Scalar>(a: AblateArgs) -> CmdResult {
    let (file, cfg) = resolve_config(&a.config, None)?;
    let strict = file.data.strict;
    let (train_set, val_set, test_set) = (
        load_data(&a.data, strict)?,
        load_data(&a.val, strict)?,
        load_data(&a.test, false)?,
    );
    let variants = if a.variants.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    let table = run_ablation_suite::<T>(
        &cfg,
        &variants,
        &train_set,
        &val_set,
        &test_set,
        &a.seeds,
        |ab, seed, run, ev| {
            eprintln!(
                "{ab:<15} seed {seed:<4} epochs {:<3} span_f1 {:.4} sent_f1 {:.4}",
                run.epochs.len(),
                ev.span_f1,
                ev.sent_f1
            );
        },
    )?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_file(&a.out.join("table.md"), table.to_markdown().as_bytes())?;
    write_file(&a.out.join("table.json"), pretty(&table).as_bytes())?;
    print!("{}", table.to_markdown());
    Ok(())
}
