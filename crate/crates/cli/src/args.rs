//! Argument definitions and `--config` file expansion.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nmt_core::attention::{AttentionConfig, Mechanism, ScoreKind, DEFAULT_WINDOW};
use nmt_core::evaluation::DEFAULT_BUCKET_EDGES;
use nmt_core::model::ModelConfig;
use nmt_core::training::TrainerConfig;
use nmt_core::NmtError;

use crate::{echo_config, CliError, Resolved};

#[derive(Debug, Parser)]
#[command(name = "nmt", version, about = "Attention-based neural machine translation")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a frequency-ranked vocabulary from a tokenized corpus.
    BuildVocab(BuildVocabArgs),
    /// Train a model, writing a checkpoint per epoch.
    Train(Box<TrainArgs>),
    /// Greedy-translate one sentence per line.
    Translate(TranslateArgs),
    /// Force-decode references and write argmax alignment links.
    ForceAlign(ForceAlignArgs),
    /// Corpus BLEU of hypotheses against references.
    ScoreBleu(ScoreBleuArgs),
    /// Alignment error rate against sure/possible gold links.
    ScoreAer(ScoreAerArgs),
    /// BLEU per source-length bucket.
    LengthReport(LengthReportArgs),
    /// Render attention dumps as grayscale heatmaps.
    PlotAttn(PlotAttnArgs),
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary size including the unknown and terminator tokens.
    #[arg(long, default_value_t = 50_000)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train_src: PathBuf,
    #[arg(long)]
    pub train_tgt: PathBuf,
    #[arg(long)]
    pub eval_src: Option<PathBuf>,
    #[arg(long)]
    pub eval_tgt: Option<PathBuf>,
    #[arg(long)]
    pub src_vocab: PathBuf,
    #[arg(long)]
    pub tgt_vocab: PathBuf,
    /// Receives checkpoints, the training log and the resolved config.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 1000)]
    pub cells: usize,
    /// global, local-m, local-p or none.
    #[arg(long, default_value = "global")]
    pub attention: String,
    /// dot, general, concat or location.
    #[arg(long, default_value = "general")]
    pub score: String,
    /// Half-width D of the local window.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Longest source (terminator included) the location score can address;
    /// defaults to max-len + 1.
    #[arg(long)]
    pub max_source_len: Option<usize>,
    /// Parameters are drawn uniformly from `[-init-scale, init-scale]`.
    #[arg(long, default_value_t = nmt_core::lstm::INIT_SCALE)]
    pub init_scale: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub input_feeding: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub reverse_source: bool,
    /// Dropout probability; a positive value switches the epoch and halving
    /// defaults to 12 and 8.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub learning_rate: f64,
    #[arg(long)]
    pub halve_after: Option<usize>,
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
    /// Store checkpoints with 32-bit floats.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub f32: bool,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let attention = match self.attention.as_str() {
            "none" => None,
            m => {
                let mechanism: Mechanism = m.parse()?;
                let score: ScoreKind = self.score.parse()?;
                let cfg = AttentionConfig::new(mechanism, score)
                    .with_window(self.window)
                    .with_max_source_len(self.max_source_len.unwrap_or(self.max_len + 1));
                cfg.validate()?;
                Some(cfg)
            }
        };
        let dropout = self.dropout.unwrap_or(0.0);
        let base = if dropout > 0.0 {
            TrainerConfig::with_dropout()
        } else {
            TrainerConfig::default()
        };
        let trainer = TrainerConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            learning_rate: self.learning_rate,
            halve_after: self.halve_after.unwrap_or(base.halve_after),
            clip_norm: self.clip_norm,
            batch_size: self.batch_size,
            dropout,
            max_len: self.max_len,
            seed: self.seed,
        };
        trainer.validate()?;
        let model = ModelConfig {
            layers: self.layers,
            cells: self.cells,
            src_vocab: 2,
            tgt_vocab: 2,
            attention,
            input_feeding: self.input_feeding,
            reverse_source: self.reverse_source,
        };
        model.validate()?;
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(NmtError::Config(format!("init scale must be positive, got {}", self.init_scale)).into());
        }
        let echo = echo_config(self, &model, &trainer);
        Ok(Resolved { model, trainer, echo })
    }
}

#[derive(Debug, Args)]
pub struct ModelFiles {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub src_vocab: PathBuf,
    #[arg(long)]
    pub tgt_vocab: PathBuf,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub files: ModelFiles,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Maximum output length before decoding stops.
    #[arg(long, default_value_t = 100)]
    pub max_len: usize,
    /// Replace `<unk>` outputs with their aligned source words.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub unk_replace: bool,
    /// Also write attention weights for `plot-attn`.
    #[arg(long)]
    pub attention_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForceAlignArgs {
    #[command(flatten)]
    pub files: ModelFiles,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Pharaoh `t-s` links, one sentence per line.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub attention_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreBleuArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreAerArgs {
    #[arg(long)]
    pub predicted: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
}

#[derive(Debug, Args)]
pub struct LengthReportArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Lower bucket edges; the last bucket is open-ended.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUCKET_EDGES)]
    pub edges: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct PlotAttnArgs {
    /// Attention dump written by `translate` or `force-align`.
    #[arg(long)]
    pub attention: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Pixels per matrix cell.
    #[arg(long, default_value_t = 8)]
    pub cell: usize,
    /// Also write an SVG with token labels.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub svg: bool,
}

/// Replaces `--config PATH` with the file's `key=value` lines as `--key=value`
/// flags placed right after the subcommand, so explicit flags win.
pub fn expand_config(argv: Vec<String>) -> Result<Vec<String>, CliError> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut iter = argv.into_iter();
    while let Some(arg) = iter.next() {
        if arg == "--config" {
            let path = iter
                .next()
                .ok_or_else(|| CliError::Usage("--config needs a file path".into()))?;
            config = Some(path);
        } else if let Some(path) = arg.strip_prefix("--config=") {
            config = Some(path.to_string());
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let text = fs::read_to_string(&path).map_err(|e| NmtError::io(&path, e))?;
    let mut flags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| NmtError::Parse {
            path: PathBuf::from(&path),
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        flags.push(format!("--{}={}", key.trim(), value.trim()));
    }
    // Program name, subcommand, then config flags ahead of the explicit ones.
    let split = rest.len().min(2);
    let tail = rest.split_off(split);
    rest.extend(flags);
    rest.extend(tail);
    Ok(rest)
}
