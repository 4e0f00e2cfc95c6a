//! `moodfuse` command-line tool.
//!
//! Exit codes: 0 success, 1 output could not be written, 2 usage or
//! configuration error (including unreadable inputs), 3 malformed data,
//! 4 numerical failure.

mod config;

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moodfuse::corpus::{parse_corpus, split_dataset, UserRecord};
use moodfuse::features::{LexiconScorer, DEFAULT_NEGATIVITY_THRESHOLD};
use moodfuse::model::{load_checkpoint, Fusion, FusionQuery, TextEncoder, ValueProjection};
use moodfuse::pipeline::{
    ablation_csv, examples_for_model, features_csv, featurize, predictions_csv, run_ablation,
    run_training, RunOutput,
};
use moodfuse::synth::{generate_dataset, SynthDatasetSpec};
use moodfuse::text::{load_precomputed, PrecomputedEmbeddings};
use moodfuse::train::evaluate;
use moodfuse::{Error, Result, SplitSpec};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "moodfuse",
    version,
    about = "Depression screening from user timelines"
)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG also works.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled synthetic corpus plus a `.spec.json` sidecar.
    GenSynth {
        #[command(flatten)]
        common: Common,
        /// Users per class.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Compute the six behavioral features per user as CSV.
    Featurize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// A tweet counts as negative when its score exceeds this.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Split, train and evaluate; writes checkpoint.json, history.csv and metrics.json into --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Train the fusion x refinement grid (concat / cross_attention, 0 / 2 blocks) into --out.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Evaluate a checkpoint on a corpus and write the metrics JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which users to evaluate; `train`/`validation` re-create the training split from --seed and --split-ratio.
        #[arg(long, value_enum, default_value = "all")]
        subset: Subset,
        #[arg(long)]
        split_ratio: Option<f64>,
    },
    /// Write `user_id,prob_depressed,prediction` for every user.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file of `key = value` settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Negative-term list, one per line; defaults to the built-in lexicon.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Precomputed token embeddings (`user_id d1 L` header, then L rows).
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    encoder: Option<TextEncoder>,
    #[arg(long)]
    fusion: Option<Fusion>,
    #[arg(long)]
    value_projection: Option<ValueProjection>,
    #[arg(long)]
    fusion_query: Option<FusionQuery>,
    #[arg(long)]
    refine_layers: Option<usize>,
    #[arg(long)]
    refine_heads: Option<usize>,
    #[arg(long)]
    d1: Option<usize>,
    #[arg(long)]
    d2: Option<usize>,
    #[arg(long)]
    d_k: Option<usize>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    /// Apply ReLU to the logits.
    #[arg(long)]
    outer_relu: bool,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    min_freq: Option<usize>,
    #[arg(long)]
    split_ratio: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Keep the batch order fixed across epochs.
    #[arg(long)]
    no_shuffle: bool,
    /// Record per-epoch wall-clock seconds (history is then not reproducible byte for byte).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Subset {
    All,
    Train,
    Validation,
}

impl RunFlags {
    fn to_config(&self) -> RunConfig {
        RunConfig {
            encoder: self.encoder,
            fusion: self.fusion,
            value_projection: self.value_projection,
            fusion_query: self.fusion_query,
            refine_layers: self.refine_layers,
            refine_heads: self.refine_heads,
            d1: self.d1,
            d2: self.d2,
            d_k: self.d_k,
            mlp_hidden: self.mlp_hidden,
            outer_relu: self.outer_relu.then_some(true),
            max_len: self.max_len,
            min_freq: self.min_freq,
            split_ratio: self.split_ratio,
            negativity_threshold: self.threshold,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            early_stop_patience: self.patience,
            shuffle_each_epoch: self.no_shuffle.then_some(false),
            record_wall_clock: self.wall_clock.then_some(true),
            ..RunConfig::default()
        }
    }
}

/// Defaults, then the config file, then flags.
fn resolve(common: &Common, inputs: Option<&Inputs>, flags: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cli = flags;
    cli.seed = common.seed;
    cli.out = common.out.clone();
    if let Some(i) = inputs {
        cli.corpus = i.corpus.clone();
        cli.lexicon = i.lexicon.clone();
        cli.embeddings = i.embeddings.clone();
    }
    cfg.overlay(&cli);
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Format(_) | Error::Dimension(_) | Error::Checkpoint(_) | Error::Feature { .. } => 3,
        Error::Numerical(_) => 4,
        Error::Io(_) => 1,
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| {
        Error::Usage(format!(
            "missing required --{flag} (or `{flag}` in the config file)"
        ))
    })
}

fn open(path: &Path, what: &str) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Usage(format!("cannot open {what} {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Write to `path`, or to standard output when no path is given.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Valid records of the corpus; each parse issue is reported on stderr.
fn read_corpus(path: &Path) -> Result<Vec<UserRecord>> {
    let (records, issues) = parse_corpus(open(path, "corpus")?)?;
    for issue in &issues {
        eprintln!("{}: {issue}", path.display());
    }
    if !issues.is_empty() {
        eprintln!(
            "{}: skipped {} malformed line(s)",
            path.display(),
            issues.len()
        );
    }
    if records.is_empty() {
        return Err(Error::Format(format!(
            "{} contains no valid user records",
            path.display()
        )));
    }
    Ok(records)
}

fn scorer(cfg: &RunConfig) -> Result<LexiconScorer> {
    match &cfg.lexicon {
        None => Ok(LexiconScorer::default_lexicon()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::Usage(format!("cannot read lexicon {}: {e}", path.display()))
            })?;
            LexiconScorer::from_lexicon_text(&path.display().to_string(), &text)
        }
    }
}

fn embeddings(cfg: &RunConfig) -> Result<Option<PrecomputedEmbeddings>> {
    cfg.embeddings
        .as_deref()
        .map(|p| load_precomputed(open(p, "embeddings")?))
        .transpose()
}

fn gen_synth(common: &Common, n: Option<usize>) -> Result<()> {
    let cfg = resolve(
        common,
        None,
        RunConfig {
            n_per_class: n,
            ..RunConfig::default()
        },
    )?;
    let n = cfg
        .n_per_class
        .ok_or_else(|| Error::Usage("missing required --n (users per class)".into()))?;
    if n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let spec = SynthDatasetSpec::new(n, cfg.seed.unwrap_or(0));
    let records = generate_dataset(&spec)?;
    let out = cfg.out.unwrap_or_else(|| PathBuf::from("synth.jsonl"));
    let mut corpus = Vec::new();
    moodfuse::corpus::write_corpus(&mut corpus, &records)?;
    write_file(&out, &corpus)?;
    let sidecar = PathBuf::from(format!("{}.spec.json", out.display()));
    let spec_json =
        serde_json::to_string_pretty(&spec).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&sidecar, format!("{spec_json}\n").as_bytes())?;
    println!(
        "wrote {} users ({n} per class) to {} and spec to {}",
        records.len(),
        out.display(),
        sidecar.display()
    );
    Ok(())
}

fn featurize_cmd(common: &Common, inputs: &Inputs, threshold: Option<f64>) -> Result<()> {
    let cfg = resolve(
        common,
        Some(inputs),
        RunConfig {
            negativity_threshold: threshold,
            ..RunConfig::default()
        },
    )?;
    let records = read_corpus(required(&cfg.corpus, "corpus")?)?;
    let threshold = cfg
        .negativity_threshold
        .unwrap_or(DEFAULT_NEGATIVITY_THRESHOLD);
    let rows = featurize(&records, &scorer(&cfg)?, threshold)?;
    emit(cfg.out.as_deref(), &features_csv(&rows))
}

fn write_run(dir: &Path, run: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(&dir.join("checkpoint.json"), &run.checkpoint_bytes()?)?;
    write_file(&dir.join("history.csv"), run.history_csv().as_bytes())?;
    write_file(
        &dir.join("metrics.json"),
        format!("{}\n", run.metrics_json()).as_bytes(),
    )?;
    Ok(())
}

fn train_cmd(common: &Common, inputs: &Inputs, run: &RunFlags) -> Result<()> {
    let cfg = resolve(common, Some(inputs), run.to_config())?;
    let records = read_corpus(required(&cfg.corpus, "corpus")?)?;
    let emb = embeddings(&cfg)?;
    let output = run_training(&records, &cfg.pipeline(), &scorer(&cfg)?, emb.as_ref())?;
    let dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("moodfuse-run"));
    write_run(&dir, &output)?;
    println!("{}", output.metrics_json());
    log::info!("wrote checkpoint, history and metrics to {}", dir.display());
    Ok(())
}

fn ablate_cmd(common: &Common, inputs: &Inputs, run: &RunFlags) -> Result<()> {
    let cfg = resolve(common, Some(inputs), run.to_config())?;
    let records = read_corpus(required(&cfg.corpus, "corpus")?)?;
    let emb = embeddings(&cfg)?;
    let results = run_ablation(&records, &cfg.pipeline(), &scorer(&cfg)?, emb.as_ref())?;
    let dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("moodfuse-ablation"));
    for (variant, output) in &results {
        write_run(&dir.join(variant.label()), output)?;
    }
    let summary = ablation_csv(&results);
    write_file(&dir.join("summary.csv"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn eval_cmd(
    common: &Common,
    inputs: &Inputs,
    checkpoint: &Option<PathBuf>,
    subset: Subset,
    split_ratio: Option<f64>,
) -> Result<()> {
    let cfg = resolve(
        common,
        Some(inputs),
        RunConfig {
            checkpoint: checkpoint.clone(),
            split_ratio,
            ..RunConfig::default()
        },
    )?;
    let model = load_checkpoint(open(
        required(&cfg.checkpoint, "checkpoint")?,
        "checkpoint",
    )?)?;
    let mut records = read_corpus(required(&cfg.corpus, "corpus")?)?;
    if subset != Subset::All {
        let p = cfg.pipeline();
        let (train, val) = split_dataset(
            &records,
            &SplitSpec {
                ratio: p.split_ratio,
                seed: p.seed,
            },
        )?;
        records = if subset == Subset::Train { train } else { val };
    }
    let emb = embeddings(&cfg)?;
    let examples = examples_for_model(&model, &records, &scorer(&cfg)?, emb.as_ref())?;
    let report = evaluate(&model, &examples)?;
    emit(cfg.out.as_deref(), &format!("{}\n", report.to_json()))
}

fn predict_cmd(common: &Common, inputs: &Inputs, checkpoint: &Option<PathBuf>) -> Result<()> {
    let cfg = resolve(
        common,
        Some(inputs),
        RunConfig {
            checkpoint: checkpoint.clone(),
            ..RunConfig::default()
        },
    )?;
    let model = load_checkpoint(open(
        required(&cfg.checkpoint, "checkpoint")?,
        "checkpoint",
    )?)?;
    let records = read_corpus(required(&cfg.corpus, "corpus")?)?;
    let emb = embeddings(&cfg)?;
    let examples = examples_for_model(&model, &records, &scorer(&cfg)?, emb.as_ref())?;
    emit(cfg.out.as_deref(), &predictions_csv(&model, &examples)?)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth { common, n } => gen_synth(common, *n),
        Command::Featurize {
            common,
            inputs,
            threshold,
        } => featurize_cmd(common, inputs, *threshold),
        Command::Train {
            common,
            inputs,
            run,
        } => train_cmd(common, inputs, run),
        Command::Ablate {
            common,
            inputs,
            run,
        } => ablate_cmd(common, inputs, run),
        Command::Eval {
            common,
            inputs,
            checkpoint,
            subset,
            split_ratio,
        } => eval_cmd(common, inputs, checkpoint, *subset, *split_ratio),
        Command::Predict {
            common,
            inputs,
            checkpoint,
        } => predict_cmd(common, inputs, checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
