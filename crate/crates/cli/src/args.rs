use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dbvae::model::{LatentInjection, Mode};
use dbvae::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dbvae", version, about = "Discretized-bottleneck VAE for token sequences")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics, checkpoints and the vocabulary to --out.
    Train(TrainArgs),
    /// Perplexity and code perplexity of a checkpoint on a corpus (JSON).
    Eval(EvalArgs),
    /// Decode λ·z₁ + (1−λ)·z₂ for λ from 0 to 1 (JSON lines).
    Interpolate(InterpolateArgs),
    /// Decode the k nearest-atom candidates of a sentence (JSON lines).
    Topk(TopkArgs),
    /// One latent row per sentence (CSV).
    ExportLatents(ExportArgs),
    /// Codebook usage histogram over a corpus (CSV).
    ExportUsage(ExportArgs),
    /// Write a seeded synthetic train/test corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// File of `key=value` lines supplying any flag below; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long = "K", alias = "codebook-size")]
    pub codebook_size: Option<usize>,
    #[arg(long = "D", alias = "latent-dim")]
    pub latent_dim: Option<usize>,
    #[arg(long = "S", alias = "slices")]
    pub slices: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Absolute code-perplexity threshold for leaving pretraining.
    #[arg(long, conflicts_with = "sigma_frac")]
    pub sigma: Option<f64>,
    /// Threshold as a fraction of K (default 0.05).
    #[arg(long)]
    pub sigma_frac: Option<f64>,
    #[arg(long = "m", alias = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_init: Option<f64>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub patience_epochs: Option<usize>,
    #[arg(long)]
    pub max_decays: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Defaults to $DBVAE_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "dropout", alias = "dropout-p")]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub latent_injection: Option<LatentInjection>,
    /// Also map the latent to the decoder's initial state.
    #[arg(long)]
    pub latent_init_state: bool,
    /// Start directly in the joint phase.
    #[arg(long)]
    pub skip_pretrain: bool,
    #[arg(long, default_value_t = 50_000)]
    pub max_vocab: usize,
    /// Record real wall-clock seconds in the metrics log (otherwise 0.0,
    /// keeping logs byte-reproducible).
    #[arg(long)]
    pub log_timing: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to vocab.txt next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

impl ModelArgs {
    pub fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| {
            self.checkpoint
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join("vocab.txt")
        })
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Defaults to the batch size the checkpoint was trained with.
    #[arg(long = "m", alias = "batch-size")]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// z₁: decoded at λ = 1.
    #[arg(long)]
    pub sentence1: String,
    /// z₂: decoded at λ = 0.
    #[arg(long)]
    pub sentence2: String,
    #[arg(long, default_value_t = 11)]
    pub steps: usize,
    /// Snap each interpolated latent to its nearest atoms before decoding.
    #[arg(long)]
    pub requantize: bool,
    #[arg(long, default_value_t = dbvae::model::DEFAULT_MAX_DECODE)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct TopkArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub sentence: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = dbvae::model::DEFAULT_MAX_DECODE)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "m", alias = "batch-size", default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16_000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 4_000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 16)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    /// Defaults to $DBVAE_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Splices `--config` file entries into `argv` right after the subcommand,
/// so explicit flags (which come later) override them.
pub fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    let pos = argv
        .iter()
        .position(|a| a == "--config" || a.starts_with("--config="));
    let Some(pos) = pos else { return Ok(argv) };
    let path = match argv[pos].strip_prefix("--config=") {
        Some(p) => PathBuf::from(p),
        None => match argv.get(pos + 1) {
            Some(p) => PathBuf::from(p),
            None => return Err(Error::Usage("--config requires a path".into())),
        },
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut injected = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Usage(format!("{}:{}: expected key=value, got {line:?}", path.display(), n + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let flag = match key {
            "K" | "D" | "S" | "m" => format!("--{key}"),
            _ => format!("--{}", key.replace('_', "-")),
        };
        match value {
            "true" => injected.push(flag),
            "false" => {}
            _ => {
                injected.push(flag);
                injected.push(value.to_string());
            }
        }
    }
    let sub = argv.iter().skip(1).position(|a| !a.starts_with('-')).map_or(1, |i| i + 2);
    let mut out = argv[..sub].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[sub..]);
    Ok(out)
}

/// `--seed`, else `$DBVAE_SEED`, else 0.
pub fn resolve_seed(explicit: Option<u64>) -> Result<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var("DBVAE_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("DBVAE_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}
