//! The `vigkey` command-line front end.
//!
//! Human-readable summaries go to stdout, artifacts go to files. Exit codes:
//! 0 success, 1 runtime failure, 2 usage error. `VIGKEY_THREADS` caps worker
//! threads (0 = all cores).

use std::error::Error;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::analysis::FeatureSchema;
use crate::corpus::clean_text;
use crate::estimators::{write_predictions, DomainSpec, IndexTable, Method, Prediction};
use crate::nn::{argmax, key_length_of, NetworkModel, TrainConfig};
use crate::pipeline::{
    self, build_dataset, compare_methods, evaluate_model, train_model, Dataset, DatasetConfig, FeatureMask,
};

pub const THREADS_ENV: &str = "VIGKEY_THREADS";

type CliResult = Result<(), Box<dyn Error>>;

#[derive(Debug, Parser)]
#[command(
    name = "vigkey",
    version,
    about = "Predict Vigenère key lengths with classical statistics and a neural network"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build train/test feature datasets from a plaintext corpus.
    Generate(GenerateArgs),
    /// Train the classifier on a dataset.
    Train(TrainArgs),
    /// Compare the classifier with the classical estimators on a test set.
    Evaluate(EvaluateArgs),
    /// Predict the key length of one ciphertext.
    Predict(PredictArgs),
    /// Run the classical estimators on a test set or a ciphertext.
    Baselines(BaselinesArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Directory of plaintext files.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for train.csv, test.csv, schema.json and manifest.json.
    #[arg(long, short = 'o')]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Samples kept per text length (200..=500).
    #[arg(long, default_value_t = 1300)]
    pub quota: usize,
    /// Word list (one word per line) for dictionary keys.
    #[arg(long)]
    pub wordlist: Option<PathBuf>,
    /// Share of keys built from the word list.
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub key_mode_ratio: f64,
    /// Target share of samples in the test split.
    #[arg(long, default_value_t = 0.15, value_parser = open_unit_interval)]
    pub test_fraction: f64,
    /// Also write plaintext and ciphertext CSVs for each split.
    #[arg(long)]
    pub write_samples: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training CSV written by `generate`.
    pub train: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// MODEL_1..MODEL_11 or FINAL.
    #[arg(long, default_value = "FINAL", value_parser = parse_mask)]
    pub mask: FeatureMask,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_values_t = [128, 128])]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 0.2, value_parser = open_unit_interval)]
    pub validation_fraction: f64,
    #[arg(long, short = 'o', default_value = "model.json")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub model: PathBuf,
    /// Test CSV with all 114 feature columns.
    pub test: PathBuf,
    /// Report JSON; summary and per-key-length CSVs are written beside it.
    #[arg(long, short = 'o', default_value = "report.json")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    pub model: PathBuf,
    /// Ciphertext, or a path to a file containing it.
    #[arg(long)]
    pub text: String,
    /// Print all 23 class probabilities.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct BaselinesArgs {
    /// Test CSV, ciphertext file, or literal ciphertext.
    pub input: String,
    #[arg(long, value_delimiter = ',', default_value = "ic,twist,tplus,tplusplus", value_parser = parse_baseline)]
    pub methods: Vec<Method>,
    #[arg(long, short = 'o', default_value = "predictions.csv")]
    pub output: PathBuf,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    (0.0..=1.0).contains(&v).then_some(v).ok_or_else(|| format!("{v} is not in [0, 1]"))
}

fn open_unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    (v > 0.0 && v < 1.0).then_some(v).ok_or_else(|| format!("{v} is not in (0, 1)"))
}

fn parse_mask(s: &str) -> Result<FeatureMask, String> {
    FeatureMask::named(s).map_err(|e| e.to_string())
}

fn parse_baseline(s: &str) -> Result<Method, String> {
    match s.parse::<Method>() {
        Ok(Method::Nn) => Err("nn is not a baseline; use `predict` or `evaluate`".into()),
        Ok(m) => Ok(m),
        Err(e) => Err(e.to_string()),
    }
}

/// Configures the global thread pool from `VIGKEY_THREADS`.
fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize =
        raw.trim().parse().map_err(|_| format!("{THREADS_ENV} must be a non-negative integer, got {raw:?}"))?;
    if n > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Baselines(a) => cmd_baselines(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> CliResult {
    let config = DatasetConfig {
        quota_per_length: a.quota,
        key_mode_ratio: a.key_mode_ratio,
        wordlist: a.wordlist,
        test_fraction: a.test_fraction,
        seed: a.seed,
        write_samples: a.write_samples,
        ..Default::default()
    };
    let m = build_dataset(&a.corpus, &a.out, &config)?;
    let mut out = io::stdout().lock();
    writeln!(out, "documents read: {} ({} failed)", m.documents_read, m.documents_failed)?;
    writeln!(out, "samples: {} (train {}, test {})", m.total_samples, m.train.samples, m.test.samples)?;
    writeln!(out, "documents: train {}, test {}", m.train.documents.len(), m.test.documents.len())?;
    writeln!(out, "keys: {} random, {} wordlist", m.key_modes.random, m.key_modes.wordlist)?;
    for w in &m.warnings {
        writeln!(out, "warning: {w}")?;
    }
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let train = Dataset::read(&a.train)?;
    let config = TrainConfig {
        epochs: a.epochs as usize,
        batch_size: a.batch_size as usize,
        validation_fraction: a.validation_fraction,
        hidden: a.hidden,
        seed: a.seed,
        ..Default::default()
    };
    let (model, history) = train_model(&train, &a.mask, &config)?;
    model.save(&a.output)?;
    let history_path = sibling(&a.output, "_history.json");
    fs::write(&history_path, serde_json::to_string_pretty(&history)?)?;

    let mut out = io::stdout().lock();
    writeln!(
        out,
        "mask {} ({} features), {} training and {} validation samples",
        a.mask.name(),
        model.input_dim(),
        history.train_samples,
        history.validation_samples
    )?;
    for e in &history.epochs {
        let val = e.validation_accuracy.map_or("-".to_string(), |v| format!("{:.4}", v));
        writeln!(
            out,
            "epoch {:>3}: loss {:.4}  accuracy {:.4}  validation accuracy {val}",
            e.epoch, e.train_loss, e.train_accuracy
        )?;
    }
    writeln!(out, "wrote {} and {}", a.output.display(), history_path.display())?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    let model = NetworkModel::load(&a.model)?;
    let test = Dataset::read(&a.test)?;
    let report = evaluate_model(&model, &test)?;
    let written = pipeline::write_report(&report, &a.output)?;
    let mut out = io::stdout().lock();
    writeln!(out, "{} test samples, model schema {}", report.test_samples, report.schema_id)?;
    write!(out, "{}", compare_methods(&report).render())?;
    for p in written {
        writeln!(out, "wrote {}", p.display())?;
    }
    Ok(())
}

/// Treats `arg` as a file path when such a file exists, otherwise as literal text.
fn text_or_file(arg: &str) -> io::Result<(String, bool)> {
    let path = Path::new(arg);
    if path.is_file() {
        Ok((String::from_utf8_lossy(&fs::read(path)?).into_owned(), true))
    } else {
        Ok((arg.to_string(), false))
    }
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    let model = NetworkModel::load(&a.model)?;
    let mask = FeatureMask::for_schema_id(&model.schema_id)?;
    let (raw, _) = text_or_file(&a.text)?;
    let cipher = clean_text(&raw);
    let dropped = raw.chars().count() - cipher.len();
    if dropped > 0 {
        eprintln!("warning: removed {dropped} non-letter characters before analysis");
    }
    if cipher.len() < 2 {
        return Err(format!("ciphertext has {} letters; at least 2 are needed", cipher.len()).into());
    }
    let features = mask.features(&cipher)?;
    let probs = model.predict_proba(&features)?;
    let mut ranked: Vec<usize> = (0..probs.len()).collect();
    ranked.sort_by(|&x, &y| probs[y].total_cmp(&probs[x]).then(x.cmp(&y)));

    let mut out = io::stdout().lock();
    writeln!(out, "letters: {}", cipher.len())?;
    writeln!(out, "predicted key length: {}", key_length_of(argmax(&probs)))?;
    writeln!(out, "top 3:")?;
    for &c in ranked.iter().take(3) {
        writeln!(out, "  {:>2}  {:.4}", key_length_of(c), probs[c])?;
    }
    if a.all {
        writeln!(out, "all:")?;
        for (c, p) in probs.iter().enumerate() {
            writeln!(out, "  {:>2}  {:.6}", key_length_of(c), p)?;
        }
    }
    Ok(())
}

fn is_dataset(path: &Path) -> bool {
    fs::File::open(path)
        .ok()
        .and_then(|f| {
            let mut first = String::new();
            io::BufRead::read_line(&mut io::BufReader::new(f), &mut first).ok()?;
            Some(first.starts_with("label,f"))
        })
        .unwrap_or(false)
}

fn cmd_baselines(a: BaselinesArgs) -> CliResult {
    let domain = DomainSpec::default();
    let mut rows: Vec<(String, Prediction, Option<usize>)> = Vec::new();
    let mut out = io::stdout().lock();
    if is_dataset(Path::new(&a.input)) {
        let data = Dataset::read(Path::new(&a.input))?;
        if !data.is_full() {
            return Err(format!("{} does not have all {} feature columns", a.input, FeatureSchema::All114.len()).into());
        }
        let mut correct = vec![0usize; a.methods.len()];
        for (i, (row, &k)) in data.rows.iter().zip(&data.labels).enumerate() {
            let table = IndexTable::from_features(row)?;
            for (mi, &m) in a.methods.iter().enumerate() {
                let p = table.predict(m, &domain)?;
                correct[mi] += p.is_correct(k) as usize;
                rows.push((i.to_string(), p, Some(k)));
            }
        }
        writeln!(out, "{} samples", data.len())?;
        for (m, c) in a.methods.iter().zip(&correct) {
            let acc = if data.is_empty() { 0.0 } else { *c as f64 / data.len() as f64 };
            writeln!(out, "{:<12} {:.1}%", m.heading(), acc * 100.0)?;
        }
    } else {
        let (raw, _) = text_or_file(&a.input)?;
        let cipher = clean_text(&raw);
        if cipher.len() < raw.chars().count() {
            eprintln!("warning: removed {} non-letter characters before analysis", raw.chars().count() - cipher.len());
        }
        let table = IndexTable::from_text(&cipher, domain.m_max);
        for &m in &a.methods {
            let p = table.predict(m, &domain)?;
            let shown = p.predicted_k.map_or("none".to_string(), |k| k.to_string());
            writeln!(out, "{:<12} {shown}", m.heading())?;
            rows.push(("0".to_string(), p, None));
        }
    }
    let file = fs::File::create(&a.output)?;
    write_predictions(io::BufWriter::new(file), &rows)?;
    writeln!(out, "wrote {}", a.output.display())?;
    Ok(())
}
