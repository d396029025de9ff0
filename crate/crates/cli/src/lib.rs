//! Command-line front end: vocabulary building, training, translation, forced
//! alignment, scoring and attention heatmaps.

mod args;
mod attn_file;
pub mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use clap::Parser;
use nmt_core::attention::{AttentionConfig, Mechanism};
use nmt_core::container::{self, ScalarWidth};
use nmt_core::data::{build_vocab, encode_pair, read_corpus, read_parallel, Vocabulary, EOS};
use nmt_core::decoding::{attribute_alignments, force_decode, format_links, greedy_translate, unk_replace};
use nmt_core::evaluation::{aer, bleu, format_buckets, length_buckets, read_gold, read_links};
use nmt_core::model::{ModelConfig, NmtModel};
use nmt_core::training::{train, Checkpoints, TrainerConfig};
use nmt_core::NmtError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use args::{Cli, Command};
pub use attn_file::{read_attention, write_attention, AttentionEntry};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// File in the training output directory holding the resolved settings.
pub const CONFIG_ECHO: &str = "config.txt";
pub const TRAIN_LOG: &str = "train_log.tsv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] NmtError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(NmtError::Config(_)) => EXIT_USAGE,
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status. Diagnostics go to stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let expanded = match args::expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(expanded) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| NmtError::io(path, e).into())
}

fn load_model(path: &Path, src_vocab: &Path, tgt_vocab: &Path) -> Result<(NmtModel, Vocabulary, Vocabulary)> {
    let model = container::load(path)?;
    let sv = Vocabulary::load(src_vocab)?;
    let tv = Vocabulary::load(tgt_vocab)?;
    if sv.len() != model.config.src_vocab || tv.len() != model.config.tgt_vocab {
        return Err(NmtError::Config(format!(
            "vocabulary sizes {}/{} do not match the model's {}/{}",
            sv.len(),
            tv.len(),
            model.config.src_vocab,
            model.config.tgt_vocab
        ))
        .into());
    }
    Ok((model, sv, tv))
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::BuildVocab(a) => {
            let vocab = build_vocab(&a.corpus, a.size)?;
            vocab.save(&a.out)?;
            eprintln!("wrote {} types to {}", vocab.len(), a.out.display());
        }
        Command::Train(a) => run_train(*a)?,
        Command::Translate(a) => {
            let (model, sv, tv) = load_model(&a.files.model, &a.files.src_vocab, &a.files.tgt_vocab)?;
            let sources = read_corpus(&a.input)?;
            let mut out = String::new();
            let mut dumps = Vec::new();
            for (i, src) in sources.iter().enumerate() {
                let tr = greedy_translate(&model, &sv, &tv, src, a.max_len)?;
                if tr.truncated {
                    log::warn!("sentence {i}: no terminator within {} tokens", a.max_len);
                }
                let mut tokens = tr.tokens.clone();
                if a.unk_replace || a.attention_out.is_some() {
                    let kind = model
                        .config
                        .attention
                        .map(|c| c.score)
                        .ok_or_else(|| NmtError::Config("this needs an attentional model".into()))?;
                    let matrix = attribute_alignments(&tr.records, kind, src.len(), model.config.reverse_source)?;
                    if a.unk_replace {
                        tokens = unk_replace(&tokens, &matrix, src);
                    }
                    let row_words = tv.decode(&matrix.row_tokens);
                    dumps.push(AttentionEntry::new(src, &row_words, matrix.rows));
                }
                out.push_str(&tokens.join(" "));
                out.push('\n');
            }
            write_text(&a.output, &out)?;
            if let Some(path) = &a.attention_out {
                write_attention(path, &dumps)?;
            }
        }
        Command::ForceAlign(a) => {
            let (model, sv, tv) = load_model(&a.files.model, &a.files.src_vocab, &a.files.tgt_vocab)?;
            let kind = model
                .config
                .attention
                .map(|c| c.score)
                .ok_or_else(|| NmtError::Config("force-align needs an attentional model".into()))?;
            let pairs = read_parallel(&a.src, &a.tgt)?;
            let mut links = String::new();
            let mut dumps = Vec::new();
            for (src, tgt) in &pairs {
                let records = force_decode(&model, &sv, &tv, src, tgt)?;
                let matrix = attribute_alignments(&records, kind, src.len(), model.config.reverse_source)?;
                links.push_str(&format_links(&matrix.links));
                links.push('\n');
                let row_words = tv.decode(&matrix.row_tokens);
                dumps.push(AttentionEntry::new(src, &row_words, matrix.rows));
            }
            write_text(&a.output, &links)?;
            if let Some(path) = &a.attention_out {
                write_attention(path, &dumps)?;
            }
        }
        Command::ScoreBleu(a) => {
            let report = bleu(&read_corpus(&a.hyp)?, &read_corpus(&a.reference)?)?;
            println!("{report}");
        }
        Command::ScoreAer(a) => {
            let value = aer(&read_links(&a.predicted)?, &read_gold(&a.gold)?)?;
            println!("AER = {value:.4}");
        }
        Command::LengthReport(a) => {
            let buckets = length_buckets(
                &read_corpus(&a.src)?,
                &read_corpus(&a.hyp)?,
                &read_corpus(&a.reference)?,
                &a.edges,
            )?;
            print!("{}", format_buckets(&buckets));
        }
        Command::PlotAttn(a) => {
            let entries = read_attention(&a.attention)?;
            fs::create_dir_all(&a.out_dir).map_err(|e| NmtError::io(&a.out_dir, e))?;
            for (i, entry) in entries.iter().enumerate() {
                let image = plot::plot_attn(&entry.rows, &entry.columns(), &entry.targets, a.cell)?;
                let stem = a.out_dir.join(format!("sent{i:04}"));
                image.write_pgm(&stem.with_extension("pgm"))?;
                write_text(&stem.with_extension("txt"), &image.legend())?;
                if a.svg {
                    write_text(&stem.with_extension("svg"), &image.svg())?;
                }
            }
            eprintln!("wrote {} heatmaps to {}", entries.len(), a.out_dir.display());
        }
    }
    Ok(())
}

fn run_train(a: args::TrainArgs) -> Result<()> {
    let resolved = a.resolve()?;
    let (model_cfg, trainer) = (&resolved.model, &resolved.trainer);
    fs::create_dir_all(&a.out_dir).map_err(|e| NmtError::io(&a.out_dir, e))?;
    write_text(&a.out_dir.join(CONFIG_ECHO), &resolved.echo)?;

    let sv = Vocabulary::load(&a.src_vocab)?;
    let tv = Vocabulary::load(&a.tgt_vocab)?;
    sv.save(&a.out_dir.join("src.vocab"))?;
    tv.save(&a.out_dir.join("tgt.vocab"))?;
    let encode = |raw: Vec<(Vec<String>, Vec<String>)>| {
        raw.iter()
            .map(|(s, t)| encode_pair(s, t, &sv, &tv, model_cfg.reverse_source))
            .collect::<Vec<_>>()
    };
    let train_pairs = encode(read_parallel(&a.train_src, &a.train_tgt)?);
    let eval_pairs = match (&a.eval_src, &a.eval_tgt) {
        (Some(s), Some(t)) => encode(read_parallel(s, t)?),
        (None, None) => Vec::new(),
        _ => return Err(CliError::Usage("--eval-src and --eval-tgt go together".into())),
    };
    let config = ModelConfig {
        src_vocab: sv.len(),
        tgt_vocab: tv.len(),
        ..model_cfg.clone()
    };
    let mut model = NmtModel::with_init_scale(config, a.init_scale, &mut ChaCha8Rng::seed_from_u64(trainer.seed))?;
    log::info!("{} parameters, {} training pairs", model.param_count(), train_pairs.len());
    let width = if a.f32 { ScalarWidth::F32 } else { ScalarWidth::F64 };
    let log = train(
        &mut model,
        &train_pairs,
        &eval_pairs,
        trainer,
        Some(Checkpoints {
            dir: &a.out_dir,
            width,
        }),
    )?;
    write_text(&a.out_dir.join(TRAIN_LOG), &log.to_tsv())?;
    print!("{}", log.to_tsv());
    Ok(())
}

/// Settings resolved from flags, config file and defaults.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    /// `key=value` lines accepted back by `--config`.
    pub echo: String,
}

pub(crate) fn echo_config(a: &args::TrainArgs, model: &ModelConfig, trainer: &TrainerConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k}={v}");
    };
    kv("train-src", a.train_src.display().to_string());
    kv("train-tgt", a.train_tgt.display().to_string());
    if let (Some(s), Some(t)) = (&a.eval_src, &a.eval_tgt) {
        kv("eval-src", s.display().to_string());
        kv("eval-tgt", t.display().to_string());
    }
    kv("src-vocab", a.src_vocab.display().to_string());
    kv("tgt-vocab", a.tgt_vocab.display().to_string());
    kv("layers", model.layers.to_string());
    kv("cells", model.cells.to_string());
    match &model.attention {
        Some(AttentionConfig {
            mechanism,
            score,
            window,
            max_source_len,
        }) => {
            kv("attention", mechanism.to_string());
            kv("score", score.to_string());
            if *mechanism != Mechanism::Global {
                kv("window", window.to_string());
            }
            kv("max-source-len", max_source_len.to_string());
        }
        None => kv("attention", "none".into()),
    }
    kv("init-scale", a.init_scale.to_string());
    kv("input-feeding", model.input_feeding.to_string());
    kv("reverse-source", model.reverse_source.to_string());
    kv("dropout", trainer.dropout.to_string());
    kv("epochs", trainer.epochs.to_string());
    kv("learning-rate", trainer.learning_rate.to_string());
    kv("halve-after", trainer.halve_after.to_string());
    kv("clip-norm", trainer.clip_norm.to_string());
    kv("batch-size", trainer.batch_size.to_string());
    kv("max-len", trainer.max_len.to_string());
    kv("seed", trainer.seed.to_string());
    kv("f32", a.f32.to_string());
    out
}

/// Source tokens with the terminator column appended.
pub(crate) fn with_terminator(source: &[String]) -> Vec<String> {
    source.iter().cloned().chain(std::iter::once(EOS.to_string())).collect()
}
