//! `tcap`: synthetic data, training, decoding, scoring, gradient checks and
//! mask analysis for guided-LSTM captioners.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use tcap_core::analysis::{nearest_words, neighbor_table};
use tcap_core::data::{load_dataset, save_dataset, synth_dataset, Dataset};
use tcap_core::decode::{decode_dataset, read_jsonl, write_jsonl};
use tcap_core::metrics::evaluate;
use tcap_core::model::{GuidanceMode, GuidanceVariant, ModelParams};
use tcap_core::numerics::Vector;
use tcap_core::training::{gradient_check, loss_csv, train_with_observer, Checkpoint, GradCheckReport};

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] tcap_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Core(tcap_core::Error::NonFiniteLoss { .. } | tcap_core::Error::NumericDomain(_)) => 4,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tcap", version, about = "Guided-LSTM caption experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (dataset.json + features.bin).
    Synth(Common),
    /// Run the three-stage schedule; writes checkpoint.tcg and losses.csv.
    Train(Common),
    /// Decode every image of the dataset; writes captions.jsonl.
    Generate(Common),
    /// Score captions against the dataset references; writes metrics.json.
    Eval(Common),
    /// Finite-difference check of the analytic gradients; writes gradcheck.json.
    Gradcheck(Common),
    /// Nearest neighbours of word masks; writes neighbors.txt and neighbors.json.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config; omitted fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Config overrides as `--dot.path value`, e.g. `--train.lr_lm 1e-3
    /// --output_dir runs/a`. Must come after the other flags.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Word to list; repeatable. Defaults to every vocabulary word.
    #[arg(long)]
    word: Vec<String>,
    /// Neighbours per word.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    common: Common,
}

impl Common {
    fn resolve(&self, extra: Vec<(String, String)>) -> Result<RunConfig, CliError> {
        let mut pairs = config::parse_overrides(&self.overrides)?;
        pairs.extend(extra);
        if let Some(seed) = self.seed {
            pairs.push(("seed".into(), seed.to_string()));
        }
        if let Some(threads) = self.threads {
            pairs.push(("threads".into(), threads.to_string()));
        }
        if let Some(path) = &self.checkpoint {
            pairs.push(("checkpoint".into(), json_string(&path.to_string_lossy())));
        }
        let cfg = config::load(self.config.as_deref(), &pairs)?;
        println!(
            "resolved config:\n{}",
            serde_json::to_string_pretty(&cfg).expect("config serializes")
        );
        Ok(cfg)
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} {} not found", path.display())))
    }
}

fn output_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = cfg.checkpoint_path();
    require_file(&path, "checkpoint")?;
    Ok(Checkpoint::load(&path)?)
}

fn load_input_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = cfg.dataset_path()?;
    require_file(path, "dataset manifest")?;
    Ok(load_dataset(path)?)
}

fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let dataset = synth_dataset(&cfg.synth)?;
    let manifest = output_dir(cfg)?.join("dataset.json");
    save_dataset(&dataset, &manifest, "features.bin")?;
    println!(
        "wrote {} examples, {} vocabulary ids, {}-dim features to {}",
        dataset.examples.len(),
        dataset.vocab.len(),
        dataset.features.dim(),
        manifest.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let dataset = load_input_dataset(cfg)?;
    let dir = output_dir(cfg)?;
    let total: usize = cfg.train.iterations.iter().sum();
    let checkpoint = train_with_observer(&dataset, &cfg.train, &cfg.model, cfg.mode, |r| {
        if r.iteration % 500 == 0 || r.iteration == total {
            eprintln!("stage {} iteration {} loss {:.6}", r.stage, r.iteration, r.loss);
        }
    })?;
    let ck_path = dir.join("checkpoint.tcg");
    checkpoint.save(&ck_path)?;
    write_text(&dir.join("losses.csv"), &loss_csv(&checkpoint.metadata.losses))?;
    println!(
        "trained {} parameters for {total} iterations; wrote {} and losses.csv",
        checkpoint.params.num_parameters(),
        ck_path.display()
    );
    Ok(())
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Input(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let checkpoint = load_checkpoint(cfg)?;
    let dataset = load_input_dataset(cfg)?;
    if dataset.vocab.ordinary_words() != checkpoint.vocab.as_slice() {
        return Err(CliError::Input("dataset vocabulary differs from the checkpoint's".into()));
    }
    let decode = cfg.decode_config(checkpoint.mode);
    let captions = with_threads(cfg.threads, || {
        decode_dataset(&checkpoint.params, &dataset, &decode, cfg.threads > 1)
    })??;
    let path = output_dir(cfg)?.join("captions.jsonl");
    write_jsonl(&path, &captions)?;
    for c in captions.iter().take(5) {
        println!("{:>4}  {}", c.feature_id, c.tokens.join(" "));
    }
    println!(
        "decoded {} images with {} (beam {}); wrote {}",
        captions.len(),
        checkpoint.mode.label(),
        decode.beam_size,
        path.display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let dataset = load_input_dataset(cfg)?;
    let path = cfg.captions_path();
    require_file(&path, "captions")?;
    let captions = read_jsonl(&path)?;
    let references: BTreeMap<usize, Vec<Vec<String>>> = dataset.references().into_iter().collect();
    let mut ids = Vec::with_capacity(captions.len());
    let mut cands = Vec::with_capacity(captions.len());
    let mut refs = Vec::with_capacity(captions.len());
    for c in captions {
        let r = references.get(&c.feature_id).ok_or_else(|| {
            CliError::Input(format!("caption for feature {} has no reference in the dataset", c.feature_id))
        })?;
        ids.push(c.feature_id);
        refs.push(r.clone());
        cands.push(c.tokens);
    }
    let report = evaluate(&ids, &cands, &refs)?;
    let out = output_dir(cfg)?.join("metrics.json");
    write_json(&out, &report)?;
    for (n, b) in report.bleu.iter().enumerate() {
        println!("BLEU-{} {:.4}", n + 1, b);
    }
    println!("CIDEr-D {:.4}", report.cider);
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct ModeReport {
    mode: GuidanceMode,
    label: String,
    report: GradCheckReport,
}

fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let g = &cfg.gradcheck;
    let with_tensor = g.variants.contains(&GuidanceVariant::FullTensor);
    let params = ModelParams::random(g.dims, with_tensor, g.stddev, g.seed)?;
    let raw = Vector::new(g.raw.clone())?;
    let mut reports = Vec::new();
    for &variant in &g.variants {
        for &transfer in &g.transfers {
            let mode = GuidanceMode::new(variant, transfer);
            let report = gradient_check(&params, &raw, &g.caption, mode, &g.options)?;
            println!(
                "{:<24} max rel error {:.3e}  {}",
                mode.label(),
                report.max_rel_error,
                if report.passed { "ok" } else { "FAIL" }
            );
            reports.push(ModeReport { mode, label: mode.label(), report });
        }
    }
    write_json(&output_dir(cfg)?.join("gradcheck.json"), &reports)?;
    let worst = reports.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.report.passed).map(|r| r.label.as_str()).collect();
    if failed.is_empty() {
        println!("gradient check passed: max rel error {worst:.3e} < {:e}", g.options.tolerance);
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn analyze(cfg: &RunConfig) -> Result<(), CliError> {
    let checkpoint = load_checkpoint(cfg)?;
    let vocab = checkpoint.vocabulary()?;
    let words = if cfg.analyze.words.is_empty() {
        checkpoint.vocab.clone()
    } else {
        cfg.analyze.words.clone()
    };
    let rows = words
        .iter()
        .map(|w| nearest_words(&checkpoint.params.cond_embed, &vocab, w, cfg.analyze.k))
        .collect::<tcap_core::Result<Vec<_>>>()?;
    let table = neighbor_table(&rows);
    print!("{table}");
    let dir = output_dir(cfg)?;
    write_text(&dir.join("neighbors.txt"), &table)?;
    write_json(&dir.join("neighbors.json"), &rows)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => synth(&c.resolve(Vec::new())?),
        Command::Train(c) => train(&c.resolve(Vec::new())?),
        Command::Generate(c) => generate(&c.resolve(Vec::new())?),
        Command::Eval(c) => eval(&c.resolve(Vec::new())?),
        Command::Gradcheck(c) => gradcheck(&c.resolve(Vec::new())?),
        Command::Analyze(a) => {
            let mut extra = Vec::new();
            if !a.word.is_empty() {
                extra.push(("analyze.words".into(), serde_json::to_string(&a.word).expect("words serialize")));
            }
            if let Some(k) = a.k {
                extra.push(("analyze.k".into(), k.to_string()));
            }
            analyze(&a.common.resolve(extra)?)
        }
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
