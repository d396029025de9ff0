//! Plain SGD with a halving learning-rate schedule and global-norm clipping.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{self, ScalarWidth};
use crate::data::{batches_in_order, make_batches, SentencePair};
use crate::error::{NmtError, Result};
use crate::model::{corpus_loss, loss_and_gradients, Mode, NmtModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Last epoch at the initial rate; the rate halves every epoch after it.
    pub halve_after: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// Pairs with either side longer than this are skipped.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: 10,
            learning_rate: 1.0,
            halve_after: 5,
            clip_norm: 5.0,
            batch_size: 128,
            dropout: 0.0,
            max_len: 50,
            seed: 1234,
        }
    }
}

impl TrainerConfig {
    /// The dropout recipe: p = 0.2, 12 epochs, halving after epoch 8.
    pub fn with_dropout() -> Self {
        TrainerConfig {
            epochs: 12,
            halve_after: 8,
            dropout: 0.2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.max_len == 0 {
            return Err(NmtError::Config("epochs, batch size and max length must be positive".into()));
        }
        if self.halve_after == 0 || self.halve_after >= self.epochs {
            return Err(NmtError::Config(format!(
                "halve_after must lie in [1, epochs), got {} with {} epochs",
                self.halve_after, self.epochs
            )));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return Err(NmtError::Config("learning rate and clip norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NmtError::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Learning rate for 1-based `epoch`.
pub fn lr_at(config: &TrainerConfig, epoch: usize) -> Result<f64> {
    if epoch == 0 || epoch > config.epochs {
        return Err(NmtError::InvalidArgument(format!(
            "epoch {epoch} outside 1..={}",
            config.epochs
        )));
    }
    let halvings = epoch.saturating_sub(config.halve_after) as i32;
    Ok(config.learning_rate * 0.5f64.powi(halvings))
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Global gradient norm before and after clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub norm: f64,
    pub clipped_norm: f64,
}

/// Rescales `grads` jointly to norm `clip_norm` when their global norm
/// exceeds it, then applies `θ ← θ − lr·g`.
pub fn clip_and_step(params: Vec<&mut Tensor>, grads: &mut [Tensor], lr: f64, clip_norm: f64) -> Result<StepStats> {
    if params.len() != grads.len() {
        return Err(NmtError::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.shape() != g.shape() {
            return Err(NmtError::shape("clip_and_step", p.shape(), g.shape()));
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(NmtError::NonFinite(format!("gradient norm {norm}")));
    }
    if norm > clip_norm {
        let factor = clip_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    let clipped_norm = global_norm(grads);
    for (p, g) in params.into_iter().zip(grads.iter()) {
        p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
    }
    Ok(StepStats { norm, clipped_norm })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training negative log-likelihood per target token.
    pub train_loss: f64,
    pub eval_perplexity: f64,
    pub eval_ln_perplexity: f64,
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch\tloss\tppl\tln_ppl\tlr\tseconds";

    /// Tab-separated table, one row per epoch.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.2}",
                r.epoch, r.train_loss, r.eval_perplexity, r.eval_ln_perplexity, r.learning_rate, r.seconds
            )
            .expect("write to string");
        }
        out
    }

    /// Equal in every column except wall time.
    pub fn same_numbers(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.eval_perplexity.to_bits() == b.eval_perplexity.to_bits()
                    && a.eval_ln_perplexity.to_bits() == b.eval_ln_perplexity.to_bits()
                    && a.learning_rate.to_bits() == b.learning_rate.to_bits()
            })
    }
}

/// Where and how often to write checkpoints.
#[derive(Debug, Clone, Copy)]
pub struct Checkpoints<'a> {
    pub dir: &'a Path,
    pub width: ScalarWidth,
}

pub const LATEST_MARKER: &str = "latest";

/// Trains `model` in place. Each epoch shuffles `train` into batches, takes one
/// clipped SGD step per batch on the summed loss divided by the batch size,
/// then measures perplexity on `eval`. Deterministic given `config.seed`.
pub fn train(
    model: &mut NmtModel,
    train: &[SentencePair],
    eval: &[SentencePair],
    config: &TrainerConfig,
    checkpoints: Option<Checkpoints<'_>>,
) -> Result<TrainLog> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let eval_batches = batches_in_order(eval.to_vec(), config.batch_size)?;
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let lr = lr_at(config, epoch)?;
        let batches = make_batches(train, config.batch_size, config.max_len, &mut rng)?;
        let (mut nll, mut tokens) = (0.0, 0usize);
        for (i, batch) in batches.iter().enumerate() {
            let scale = 1.0 / batch.size() as f64;
            let mut mode = Mode::Train {
                dropout: config.dropout,
                rng: &mut rng,
            };
            let (loss, n, mut grads) = loss_and_gradients(model, batch, &mut mode, scale)
                .map_err(|e| at_batch(e, epoch, i))?;
            clip_and_step(model.params_mut(), &mut grads, lr, config.clip_norm).map_err(|e| at_batch(e, epoch, i))?;
            nll += loss;
            tokens += n;
        }
        let (eval_nll, eval_tokens) = if eval_batches.is_empty() {
            (f64::NAN, 1)
        } else {
            corpus_loss(model, &eval_batches)?
        };
        let ln_ppl = eval_nll / eval_tokens as f64;
        let record = EpochRecord {
            epoch,
            train_loss: nll / tokens.max(1) as f64,
            eval_perplexity: ln_ppl.exp(),
            eval_ln_perplexity: ln_ppl,
            learning_rate: lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} eval ppl {:.4} lr {lr} ({:.1}s)",
            record.train_loss,
            record.eval_perplexity,
            record.seconds
        );
        log.records.push(record);
        if let Some(ck) = checkpoints {
            let name = format!("epoch{epoch:02}.nmt");
            container::save(model, &ck.dir.join(&name), ck.width)?;
            fs::write(ck.dir.join(LATEST_MARKER), format!("{name}\n"))
                .map_err(|e| NmtError::io(ck.dir.join(LATEST_MARKER), e))?;
        }
    }
    Ok(log)
}

fn at_batch(e: NmtError, epoch: usize, batch: usize) -> NmtError {
    match e {
        NmtError::NonFinite(msg) => NmtError::NonFinite(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_without_dropout() {
        let c = TrainerConfig::default();
        for e in 1..=5 {
            assert_eq!(lr_at(&c, e).unwrap(), 1.0);
        }
        assert_eq!(lr_at(&c, 6).unwrap(), 0.5);
        assert_eq!(lr_at(&c, 8).unwrap(), 0.125);
        assert_eq!(lr_at(&c, 10).unwrap(), 1.0 / 32.0);
        assert!(lr_at(&c, 0).is_err());
        assert!(lr_at(&c, 11).is_err());
    }

    #[test]
    fn schedule_with_dropout() {
        let c = TrainerConfig::with_dropout();
        assert_eq!(lr_at(&c, 8).unwrap(), 1.0);
        assert_eq!(lr_at(&c, 9).unwrap(), 0.5);
        assert_eq!(c.dropout, 0.2);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainerConfig {
            halve_after: 10,
            ..TrainerConfig::default()
        };
        assert!(c.validate().is_err());
        c = TrainerConfig::default();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    fn grads(values: &[f64]) -> Vec<Tensor> {
        values.iter().map(|&v| Tensor::vector(vec![v])).collect()
    }

    #[test]
    fn small_gradient_not_clipped() {
        let mut p = [Tensor::vector(vec![1.0]), Tensor::vector(vec![1.0])];
        let mut g = grads(&[3.0, 0.0]);
        let s = clip_and_step(p.iter_mut().collect(), &mut g, 0.1, 5.0).unwrap();
        assert_eq!(s.norm, 3.0);
        assert_eq!(s.clipped_norm, 3.0);
        assert!((p[0].data()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn large_gradient_clipped_to_threshold() {
        let mut p = [Tensor::vector(vec![0.0]), Tensor::vector(vec![0.0])];
        let mut g = grads(&[6.0, 8.0]);
        let s = clip_and_step(p.iter_mut().collect(), &mut g, 1.0, 5.0).unwrap();
        assert_eq!(s.norm, 10.0);
        assert!((s.clipped_norm - 5.0).abs() < 1e-12);
        assert!((p[0].data()[0] + 3.0).abs() < 1e-12);
        assert!((p[1].data()[0] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![Tensor::vector(vec![0.25, -1.5])];
        let before = p.clone();
        let mut g = vec![Tensor::zeros(&[2])];
        clip_and_step(p.iter_mut().collect(), &mut g, 1.0, 5.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = [Tensor::vector(vec![0.0])];
        let mut g = grads(&[f64::NAN]);
        let e = clip_and_step(p.iter_mut().collect(), &mut g, 1.0, 5.0).unwrap_err();
        assert!(e.is_numeric());
    }

    #[test]
    fn tsv_has_one_row_per_epoch() {
        let log = TrainLog {
            records: (1..=3)
                .map(|e| EpochRecord {
                    epoch: e,
                    train_loss: 1.0,
                    eval_perplexity: 2.0,
                    eval_ln_perplexity: 2f64.ln(),
                    learning_rate: 1.0,
                    seconds: 0.5,
                })
                .collect(),
        };
        let tsv = log.to_tsv();
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.starts_with("epoch\tloss\tppl\tln_ppl\tlr\tseconds\n1\t"));
    }
}
