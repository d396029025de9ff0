//! Encoder–decoder network with optional attention and input feeding.
//!
//! The encoder reads the (optionally reversed) source followed by the
//! end-of-sentence id. The decoder starts from the encoder's final state at
//! every layer, consumes the end-of-sentence id as its first input, and at
//! step `t` predicts `y_t` from `softmax(W_s h̃_t)`, where `h̃_t` is the
//! attentional hidden state (or the top hidden state without attention).
//! With input feeding, `h̃_{t−1}` is concatenated to the embedding of
//! `y_{t−1}`, so the first decoder layer reads `2n` inputs.

use rand::{Rng, RngCore};

use crate::attention::{attend, AttendStep, AttentionConfig, AttentionParams, AttentionVars, EncoderMemory};
use crate::data::{Batch, EOS_ID};
use crate::error::{NmtError, Result};
use crate::lstm::{init_params, lstm_step, LstmLayerVars, LstmState, StackedLstm, INIT_SCALE};
use crate::tape::{dropout_mask, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    /// Cell count n; also the embedding width.
    pub cells: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub attention: Option<AttentionConfig>,
    pub input_feeding: bool,
    pub reverse_source: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.cells == 0 {
            return Err(NmtError::Config("layers and cells must be at least 1".into()));
        }
        if self.src_vocab < 2 || self.tgt_vocab < 2 {
            return Err(NmtError::Config(
                "vocabularies must contain the two reserved tokens".into(),
            ));
        }
        if let Some(a) = &self.attention {
            a.validate()?;
        }
        Ok(())
    }

    /// Input width of the first decoder layer.
    pub fn decoder_input_width(&self) -> usize {
        if self.input_feeding {
            2 * self.cells
        } else {
            self.cells
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmtModel {
    pub config: ModelConfig,
    /// `[V_src × n]`
    pub src_embed: Tensor,
    /// `[V_tgt × n]`
    pub tgt_embed: Tensor,
    pub encoder: StackedLstm,
    pub decoder: StackedLstm,
    pub attention: Option<AttentionParams>,
    /// Output projection `[V_tgt × n]`.
    pub w_s: Tensor,
}

/// Forward-pass mode. Dropout masks are drawn from `rng` only in training.
pub enum Mode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut dyn RngCore },
}

impl Mode<'_> {
    fn mask(&mut self, shape: &[usize]) -> Result<Option<Tensor>> {
        match self {
            Mode::Train { dropout, rng } if *dropout > 0.0 => {
                Ok(Some(dropout_mask(shape, *dropout, &mut **rng, true)?))
            }
            Mode::Train { dropout, .. } if !(0.0..1.0).contains(dropout) => Err(NmtError::InvalidArgument(format!(
                "dropout probability must lie in [0, 1), got {dropout}"
            ))),
            _ => Ok(None),
        }
    }

    fn layer_masks(&mut self, batch: usize, widths: &[usize]) -> Result<Option<Vec<Tensor>>> {
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            match self.mask(&[batch, w])? {
                Some(m) => out.push(m),
                None => return Ok(None),
            }
        }
        Ok(Some(out))
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        match self.mask(&shape)? {
            Some(m) => tape.mul_const(x, m.into_data()),
            None => Ok(x),
        }
    }
}

/// Model parameters bound to a tape, in [`NmtModel::named_params`] order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub src_embed: Var,
    pub tgt_embed: Var,
    pub encoder: Vec<LstmLayerVars>,
    pub decoder: Vec<LstmLayerVars>,
    pub attention: Option<AttentionVars>,
    pub w_s: Var,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.src_embed, self.tgt_embed];
        v.extend(self.encoder.iter().flat_map(|l| l.vars()));
        v.extend(self.decoder.iter().flat_map(|l| l.vars()));
        if let Some(a) = &self.attention {
            v.extend(a.vars());
        }
        v.push(self.w_s);
        v
    }
}

fn lstm_names(prefix: &str, stack: &StackedLstm) -> Vec<String> {
    (0..stack.depth())
        .flat_map(|l| ["w_x", "w_h", "bias"].map(|n| format!("{prefix}.{l}.{n}")))
        .collect()
}

impl NmtModel {
    /// Uniform `[−0.1, 0.1]` initialization of every parameter.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = config.cells;
        let src_embed = Tensor::uniform(&[config.src_vocab, n], INIT_SCALE, rng);
        let tgt_embed = Tensor::uniform(&[config.tgt_vocab, n], INIT_SCALE, rng);
        let encoder = init_params(config.layers, n, n, rng)?;
        let decoder = init_params(config.layers, n, config.decoder_input_width(), rng)?;
        let attention = config
            .attention
            .as_ref()
            .map(|a| AttentionParams::init(a, n, rng))
            .transpose()?;
        let w_s = Tensor::uniform(&[config.tgt_vocab, n], INIT_SCALE, rng);
        Ok(NmtModel {
            config,
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            attention,
            w_s,
        })
    }

    /// Like [`NmtModel::new`] but drawing every parameter from `[−scale, scale]`.
    pub fn with_init_scale<R: Rng + ?Sized>(config: ModelConfig, scale: f64, rng: &mut R) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(NmtError::Config(format!("init scale must be positive, got {scale}")));
        }
        let mut model = Self::new(config, rng)?;
        let factor = scale / INIT_SCALE;
        for p in model.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        Ok(model)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("src_embed".into(), &self.src_embed),
            ("tgt_embed".into(), &self.tgt_embed),
        ];
        out.extend(lstm_names("encoder", &self.encoder).into_iter().zip(self.encoder.tensors()));
        out.extend(lstm_names("decoder", &self.decoder).into_iter().zip(self.decoder.tensors()));
        if let Some(a) = &self.attention {
            out.extend(a.named().into_iter().map(|(n, t)| (format!("attention.{n}"), t)));
        }
        out.push(("output.w_s".into(), &self.w_s));
        out
    }

    /// Mutable parameters in [`NmtModel::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.src_embed, &mut self.tgt_embed];
        out.extend(self.encoder.tensors_mut());
        out.extend(self.decoder.tensors_mut());
        if let Some(a) = &mut self.attention {
            out.extend(a.tensors_mut());
        }
        out.push(&mut self.w_s);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            src_embed: tape.leaf(self.src_embed.clone()),
            tgt_embed: tape.leaf(self.tgt_embed.clone()),
            encoder: self.encoder.bind(tape),
            decoder: self.decoder.bind(tape),
            attention: self.attention.as_ref().map(|a| a.bind(tape)),
            w_s: tape.leaf(self.w_s.clone()),
        }
    }
}

/// Encoder output for a batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Top-layer state per source position, each `[B × n]`.
    pub states: Vec<Var>,
    /// State after each row's last valid position.
    pub final_state: LstmState,
    /// Attention memory, present for attentional models.
    pub memory: Option<EncoderMemory>,
}

/// Runs the encoder over a padded `[B × width]` id matrix.
pub fn encode(
    tape: &mut Tape,
    model: &NmtModel,
    vars: &ModelVars,
    src_ids: &[usize],
    src_mask: &[bool],
    width: usize,
    mode: &mut Mode<'_>,
) -> Result<Encoded> {
    if width == 0 || src_ids.is_empty() {
        return Err(NmtError::InvalidArgument("empty source".into()));
    }
    let b = src_ids.len() / width;
    let n = model.config.cells;
    let lens: Vec<usize> = (0..b)
        .map(|i| src_mask[i * width..(i + 1) * width].iter().filter(|m| **m).count())
        .collect();
    if lens.contains(&0) {
        return Err(NmtError::InvalidArgument("empty source sentence in batch".into()));
    }
    let mut state = LstmState::zeros(tape, model.config.layers, b, n);
    let mut states = Vec::with_capacity(width);
    let widths = vec![n; model.config.layers];
    for s in 0..width {
        let ids: Vec<usize> = (0..b).map(|i| src_ids[i * width + s]).collect();
        let valid: Vec<bool> = (0..b).map(|i| src_mask[i * width + s]).collect();
        let x = tape.gather(vars.src_embed, &ids)?;
        let masks = mode.layer_masks(b, &widths)?;
        let (next, _) = lstm_step(tape, &vars.encoder, &state, x, masks.as_deref())?;
        state = if valid.iter().all(|v| *v) {
            next
        } else {
            next.select(tape, &valid, &state)?
        };
        let top = mode.apply(tape, state.top())?;
        states.push(top);
    }
    let memory = match (&vars.attention, &model.config.attention) {
        (Some(av), Some(cfg)) => {
            let stacked = tape.stack(&states)?;
            Some(EncoderMemory::new(tape, stacked, &lens, av, cfg)?)
        }
        _ => None,
    };
    Ok(Encoded {
        states,
        final_state: state,
        memory,
    })
}

/// Output of one decoder step for a batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `[B × V_tgt]` log-probabilities.
    pub log_probs: Var,
    pub attention: Option<AttendStep>,
    pub state: LstmState,
    /// `h̃_t`, fed to the next step under input feeding.
    pub feed: Var,
}

/// One decoder step. `prev_feed` is `h̃_{t−1}` (zeros at `t = 0`).
#[allow(clippy::too_many_arguments)]
pub fn decode_step(
    tape: &mut Tape,
    model: &NmtModel,
    vars: &ModelVars,
    state: &LstmState,
    prev_ids: &[usize],
    prev_feed: Var,
    memory: Option<&EncoderMemory>,
    t: usize,
    mode: &mut Mode<'_>,
) -> Result<StepOutput> {
    let b = prev_ids.len();
    let n = model.config.cells;
    let emb = tape.gather(vars.tgt_embed, prev_ids)?;
    let x = if model.config.input_feeding {
        tape.concat(emb, prev_feed, 1)?
    } else {
        emb
    };
    let mut widths = vec![n; model.config.layers];
    widths[0] = model.config.decoder_input_width();
    let masks = mode.layer_masks(b, &widths)?;
    let (state, top) = lstm_step(tape, &vars.decoder, state, x, masks.as_deref())?;
    let top = mode.apply(tape, top)?;
    let (attention, feed) = match (&vars.attention, &model.config.attention, memory) {
        (Some(av), Some(cfg), Some(mem)) => {
            let step = attend(tape, av, cfg, top, mem, t)?;
            let feed = step.attentional;
            (Some(step), feed)
        }
        (None, None, _) => (None, top),
        _ => {
            return Err(NmtError::InvalidArgument(
                "attentional decode step needs the encoder memory".into(),
            ))
        }
    };
    let logits = tape.linear(feed, vars.w_s)?;
    let log_probs = tape.log_softmax(logits);
    Ok(StepOutput {
        log_probs,
        attention,
        state,
        feed,
    })
}

/// Attention recorded at one target step of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Weights over the sentence's source positions (terminator included),
    /// in encoder order.
    pub weights: Vec<f64>,
    /// local-p aligned position.
    pub position: Option<f64>,
}

/// Teacher-forced forward pass recorded on `tape`.
pub struct BatchForward {
    /// Summed negative log-likelihood (scalar).
    pub loss: Var,
    pub tokens: usize,
    /// Per sentence, one record per target step; empty unless requested.
    pub records: Vec<Vec<StepRecord>>,
    /// `h̃_t` per step, `[B × n]` each.
    pub feeds: Vec<Var>,
}

pub fn forward_batch(
    tape: &mut Tape,
    model: &NmtModel,
    vars: &ModelVars,
    batch: &Batch,
    mode: &mut Mode<'_>,
    record: bool,
) -> Result<BatchForward> {
    let b = batch.size();
    let n = model.config.cells;
    let enc = encode(tape, model, vars, &batch.src_ids, &batch.src_mask, batch.src_width, mode)?;
    let lens = batch.src_lens();
    let mut state = enc.final_state.clone();
    let mut feed = tape.constant(Tensor::zeros(&[b, n]));
    let mut step_losses = Vec::with_capacity(batch.tgt_width);
    let mut records = vec![Vec::new(); if record { b } else { 0 }];
    let mut feeds = Vec::with_capacity(batch.tgt_width);
    for t in 0..batch.tgt_width {
        let prev: Vec<usize> = if t == 0 {
            vec![EOS_ID; b]
        } else {
            batch.tgt_column(t - 1).0
        };
        let (targets, valid) = batch.tgt_column(t);
        let out = decode_step(tape, model, vars, &state, &prev, feed, enc.memory.as_ref(), t, mode)?;
        let weights: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        step_losses.push(tape.nll(out.log_probs, &targets, &weights)?);
        if record {
            if let Some(att) = &out.attention {
                let w = tape.value(att.weights);
                let pos = att.position.map(|p| tape.value(p).data().to_vec());
                for i in (0..b).filter(|&i| valid[i]) {
                    records[i].push(StepRecord {
                        weights: w.row(i)[..lens[i]].to_vec(),
                        position: pos.as_ref().map(|p| p[i]),
                    });
                }
            }
        }
        state = out.state;
        feed = out.feed;
        feeds.push(feed);
    }
    let mut loss = step_losses[0];
    for &l in &step_losses[1..] {
        loss = tape.add(loss, l)?;
    }
    Ok(BatchForward {
        loss,
        tokens: batch.target_tokens(),
        records,
        feeds,
    })
}

#[derive(Debug, Clone)]
pub struct SequenceLoss {
    pub nll: f64,
    pub tokens: usize,
    pub records: Vec<Vec<StepRecord>>,
}

impl SequenceLoss {
    pub fn perplexity(&self) -> f64 {
        (self.nll / self.tokens as f64).exp()
    }
}

/// Teacher-forced summed negative log-likelihood of a batch, with attention records.
pub fn sequence_loss(model: &NmtModel, batch: &Batch, mode: &mut Mode<'_>) -> Result<SequenceLoss> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let fwd = forward_batch(&mut tape, model, &vars, batch, mode, true)?;
    Ok(SequenceLoss {
        nll: tape.value(fwd.loss).data()[0],
        tokens: fwd.tokens,
        records: fwd.records,
    })
}

/// Summed loss of a batch and the gradient of `scale · loss` for every
/// parameter, in [`NmtModel::named_params`] order.
pub fn loss_and_gradients(
    model: &NmtModel,
    batch: &Batch,
    mode: &mut Mode<'_>,
    scale: f64,
) -> Result<(f64, usize, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let fwd = forward_batch(&mut tape, model, &vars, batch, mode, false)?;
    let nll = tape.value(fwd.loss).data()[0];
    if !nll.is_finite() {
        return Err(NmtError::NonFinite(format!("loss {nll}")));
    }
    let scaled = tape.scale(fwd.loss, scale);
    tape.backward(scaled)?;
    let grads = vars.all().into_iter().map(|v| tape.grad_tensor(v)).collect();
    Ok((nll, fwd.tokens, grads))
}

/// Total teacher-forced loss and token count over many batches (no dropout).
pub fn corpus_loss(model: &NmtModel, batches: &[Batch]) -> Result<(f64, usize)> {
    let mut nll = 0.0;
    let mut tokens = 0;
    for b in batches {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let fwd = forward_batch(&mut tape, model, &vars, b, &mut Mode::Eval, false)?;
        nll += tape.value(fwd.loss).data()[0];
        tokens += fwd.tokens;
    }
    Ok((nll, tokens))
}

/// Compares [`loss_and_gradients`] with central differences of
/// [`sequence_loss`] for every parameter group. Each group's error is
/// `‖a − n‖ / max(1e-8, ‖a‖ + ‖n‖)` over all of its entries.
pub fn gradient_check(model: &NmtModel, batch: &Batch, eps: f64) -> Result<Vec<(String, f64)>> {
    let (_, _, grads) = loss_and_gradients(model, batch, &mut Mode::Eval, 1.0)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(names.len());
    for (k, name) in names.into_iter().enumerate() {
        let (mut diff, mut a_norm, mut n_norm) = (0.0, 0.0, 0.0);
        for i in 0..grads[k].len() {
            let orig = probe.params_mut()[k].data()[i];
            probe.params_mut()[k].data_mut()[i] = orig + eps;
            let up = sequence_loss(&probe, batch, &mut Mode::Eval)?.nll;
            probe.params_mut()[k].data_mut()[i] = orig - eps;
            let down = sequence_loss(&probe, batch, &mut Mode::Eval)?.nll;
            probe.params_mut()[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads[k].data()[i];
            diff += (analytic - numeric).powi(2);
            a_norm += analytic * analytic;
            n_norm += numeric * numeric;
        }
        out.push((name, diff.sqrt() / (a_norm.sqrt() + n_norm.sqrt()).max(1e-8)));
    }
    Ok(out)
}
