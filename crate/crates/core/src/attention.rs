//! Global and local attention over encoder states.
//!
//! Given the decoder's top hidden state `h_t` and the encoder's top-layer
//! states `h̄_1..h̄_S`, an attention step produces alignment weights `a_t`,
//! the context `c_t = Σ_s a_t(s)·h̄_s`, and the attentional hidden state
//! `h̃_t = tanh(W_c [c_t; h_t])`.
//!
//! * global: softmax of a score over every source position.
//! * local-m: `p_t = t`, softmax restricted to the window `[p_t − D, p_t + D]`.
//! * local-p: `p_t = S·sigmoid(v_pᵀ tanh(W_p h_t))`; the window softmax is
//!   multiplied by `exp(−(s − p_t)² / 2σ²)` with `σ = D/2` and not renormalized.
//!
//! Scores: `dot` = `h_tᵀ h̄_s`, `general` = `h_tᵀ W_a h̄_s`,
//! `concat` = `v_aᵀ tanh(W_a [h_t; h̄_s])` (full `W_a`, inner width `n`), and
//! `location` = `softmax(W_a h_t)` truncated or masked to the sentence length.
//!
//! Source positions are 0-based and include the end-of-sentence state.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{NmtError, Result};
use crate::lstm::INIT_SCALE;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Global,
    LocalM,
    LocalP,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    Dot,
    General,
    Concat,
    Location,
}

impl ScoreKind {
    pub fn is_content(self) -> bool {
        self != ScoreKind::Location
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Global => "global",
            Mechanism::LocalM => "local-m",
            Mechanism::LocalP => "local-p",
        })
    }
}

impl FromStr for Mechanism {
    type Err = NmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Mechanism::Global),
            "local-m" | "local_m" => Ok(Mechanism::LocalM),
            "local-p" | "local_p" => Ok(Mechanism::LocalP),
            _ => Err(NmtError::Config(format!(
                "unknown attention mechanism '{s}' (global, local-m, local-p)"
            ))),
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Dot => "dot",
            ScoreKind::General => "general",
            ScoreKind::Concat => "concat",
            ScoreKind::Location => "location",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = NmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(ScoreKind::Dot),
            "general" => Ok(ScoreKind::General),
            "concat" => Ok(ScoreKind::Concat),
            "location" => Ok(ScoreKind::Location),
            _ => Err(NmtError::Config(format!(
                "unknown score function '{s}' (dot, general, concat, location)"
            ))),
        }
    }
}

pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    pub score: ScoreKind,
    /// Window half-width D for the local mechanisms.
    pub window: usize,
    /// Output width of the location score's `W_a`.
    pub max_source_len: usize,
}

impl AttentionConfig {
    pub fn new(mechanism: Mechanism, score: ScoreKind) -> Self {
        AttentionConfig {
            mechanism,
            score,
            window: DEFAULT_WINDOW,
            max_source_len: 51,
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn with_max_source_len(mut self, max_source_len: usize) -> Self {
        self.max_source_len = max_source_len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.mechanism != Mechanism::Global {
            if !self.score.is_content() {
                return Err(NmtError::Config(format!(
                    "{} attention requires a content score (dot, general or concat), not location",
                    self.mechanism
                )));
            }
            if self.window < 1 {
                return Err(NmtError::Config("local attention requires window D >= 1".into()));
            }
        }
        if self.score == ScoreKind::Location && self.max_source_len < 1 {
            return Err(NmtError::Config(
                "location score requires a maximum source length >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.window as f64 / 2.0
    }
}

/// Learned attention parameters; only those the configuration uses exist.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// general `[n × n]`, concat `[n × 2n]`, location `[S_max × n]`.
    pub w_a: Option<Tensor>,
    /// concat `[n]`.
    pub v_a: Option<Tensor>,
    /// `[n × 2n]`
    pub w_c: Tensor,
    /// local-p `[n × n]`.
    pub w_p: Option<Tensor>,
    /// local-p `[n]`.
    pub v_p: Option<Tensor>,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, n: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w_a = match cfg.score {
            ScoreKind::Dot => None,
            ScoreKind::General => Some(Tensor::uniform(&[n, n], INIT_SCALE, rng)),
            ScoreKind::Concat => Some(Tensor::uniform(&[n, 2 * n], INIT_SCALE, rng)),
            ScoreKind::Location => Some(Tensor::uniform(&[cfg.max_source_len, n], INIT_SCALE, rng)),
        };
        let v_a = (cfg.score == ScoreKind::Concat).then(|| Tensor::uniform(&[n], INIT_SCALE, rng));
        let w_c = Tensor::uniform(&[n, 2 * n], INIT_SCALE, rng);
        let (w_p, v_p) = if cfg.mechanism == Mechanism::LocalP {
            (
                Some(Tensor::uniform(&[n, n], INIT_SCALE, rng)),
                Some(Tensor::uniform(&[n], INIT_SCALE, rng)),
            )
        } else {
            (None, None)
        };
        Ok(AttentionParams {
            w_a,
            v_a,
            w_c,
            w_p,
            v_p,
        })
    }

    pub fn cells(&self) -> usize {
        self.w_c.shape()[0]
    }

    /// `(name, tensor)` for every present parameter, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        [
            ("w_a", self.w_a.as_ref()),
            ("v_a", self.v_a.as_ref()),
            ("w_c", Some(&self.w_c)),
            ("w_p", self.w_p.as_ref()),
            ("v_p", self.v_p.as_ref()),
        ]
        .into_iter()
        .filter_map(|(n, t)| t.map(|t| (n, t)))
        .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        [
            self.w_a.as_mut(),
            self.v_a.as_mut(),
            Some(&mut self.w_c),
            self.w_p.as_mut(),
            self.v_p.as_mut(),
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            w_a: self.w_a.as_ref().map(|t| tape.leaf(t.clone())),
            v_a: self.v_a.as_ref().map(|t| tape.leaf(t.clone())),
            w_c: tape.leaf(self.w_c.clone()),
            w_p: self.w_p.as_ref().map(|t| tape.leaf(t.clone())),
            v_p: self.v_p.as_ref().map(|t| tape.leaf(t.clone())),
        }
    }

    fn check(&self, cfg: &AttentionConfig) -> Result<()> {
        let missing = |what: &str| NmtError::Config(format!("{} {} attention needs {what}", cfg.mechanism, cfg.score));
        if cfg.score != ScoreKind::Dot && self.w_a.is_none() {
            return Err(missing("w_a"));
        }
        if cfg.score == ScoreKind::Concat && self.v_a.is_none() {
            return Err(missing("v_a"));
        }
        if cfg.mechanism == Mechanism::LocalP && (self.w_p.is_none() || self.v_p.is_none()) {
            return Err(missing("w_p and v_p"));
        }
        Ok(())
    }
}

/// Attention parameters bound to a tape, in the order of [`AttentionParams::named`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_a: Option<Var>,
    pub v_a: Option<Var>,
    pub w_c: Var,
    pub w_p: Option<Var>,
    pub v_p: Option<Var>,
}

impl AttentionVars {
    pub fn vars(&self) -> Vec<Var> {
        [self.w_a, self.v_a, Some(self.w_c), self.w_p, self.v_p]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// Encoder top-layer states for a batch, `[B × S × n]`, with per-sentence
/// lengths (terminator included).
#[derive(Debug, Clone)]
pub struct EncoderMemory {
    pub states: Var,
    pub mask: Vec<bool>,
    pub lens: Vec<usize>,
    pub width: usize,
    /// concat only: `W_a[:, n..] h̄_s` for every position, `[B × S × n]`.
    keys: Option<Var>,
}

impl EncoderMemory {
    /// `states` is `[B × S × n]`; `lens[b] ≤ S` valid positions per row.
    pub fn new(
        tape: &mut Tape,
        states: Var,
        lens: &[usize],
        vars: &AttentionVars,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        let shape = tape.shape(states).to_vec();
        if shape.len() != 3 || shape[0] != lens.len() {
            return Err(NmtError::shape("encoder memory", &shape, &[lens.len()]));
        }
        let (b, s, n) = (shape[0], shape[1], shape[2]);
        if lens.iter().any(|&l| l == 0 || l > s) {
            return Err(NmtError::InvalidArgument(format!(
                "source lengths {lens:?} must lie in [1, {s}]"
            )));
        }
        let mask = (0..b).flat_map(|i| (0..s).map(move |j| j < lens[i])).collect();
        let keys = if cfg.score == ScoreKind::Concat {
            let w_a = vars.w_a.ok_or_else(|| NmtError::Config("concat score needs w_a".into()))?;
            let w_src = tape.slice(w_a, 1, n, n)?;
            let flat = tape.reshape(states, &[b * s, n])?;
            let k = tape.linear(flat, w_src)?;
            let na = tape.shape(k)[1];
            Some(tape.reshape(k, &[b, s, na])?)
        } else {
            None
        };
        Ok(EncoderMemory {
            states,
            mask,
            lens: lens.to_vec(),
            width: s,
            keys,
        })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }
}

/// One batched attention step; `weights` is `[B × S]`, `context` and
/// `attentional` are `[B × n]`.
#[derive(Debug, Clone)]
pub struct AttendStep {
    pub weights: Var,
    pub context: Var,
    pub attentional: Var,
    /// local-p aligned positions `p_t`, `[B × 1]`.
    pub position: Option<Var>,
}

/// Row-wise content scores `[B × S]` of `h` (`[B × n]`) against the memory.
pub fn content_scores(
    tape: &mut Tape,
    vars: &AttentionVars,
    kind: ScoreKind,
    h: Var,
    mem: &EncoderMemory,
) -> Result<Var> {
    match kind {
        ScoreKind::Dot => tape.batch_dot(h, mem.states),
        ScoreKind::General => {
            let w_a = vars.w_a.ok_or_else(|| NmtError::Config("general score needs w_a".into()))?;
            let q = tape.matmul(h, w_a)?;
            tape.batch_dot(q, mem.states)
        }
        ScoreKind::Concat => {
            let w_a = vars.w_a.ok_or_else(|| NmtError::Config("concat score needs w_a".into()))?;
            let v_a = vars.v_a.ok_or_else(|| NmtError::Config("concat score needs v_a".into()))?;
            let keys = mem
                .keys
                .ok_or_else(|| NmtError::Config("memory built without concat keys".into()))?;
            let n = tape.shape(h)[1];
            let w_tgt = tape.slice(w_a, 1, 0, n)?;
            let q = tape.linear(h, w_tgt)?;
            let hidden = tape.add_mid(keys, q)?;
            let hidden = tape.tanh(hidden);
            let sh = tape.shape(hidden).to_vec();
            let flat = tape.reshape(hidden, &[sh[0] * sh[1], sh[2]])?;
            let v = tape.reshape(v_a, &[sh[2], 1])?;
            let scores = tape.matmul(flat, v)?;
            tape.reshape(scores, &[sh[0], sh[1]])
        }
        ScoreKind::Location => Err(NmtError::Config(
            "location is not a content score".into(),
        )),
    }
}

/// Source window `[center − D, center + D] ∩ [0, len − 1]` as a mask row.
fn window_row(center: usize, window: usize, len: usize, width: usize) -> impl Iterator<Item = bool> {
    (0..width).map(move |s| s < len && s.abs_diff(center) <= window)
}

/// Window center for local-p: `round(p_t)`, halves rounded up.
pub fn window_center(p: f64) -> usize {
    (p + 0.5).floor().max(0.0) as usize
}

/// Attention at decoder step `t` (0-based) for the batch.
pub fn attend(
    tape: &mut Tape,
    vars: &AttentionVars,
    cfg: &AttentionConfig,
    h: Var,
    mem: &EncoderMemory,
    t: usize,
) -> Result<AttendStep> {
    let (b, s) = (mem.batch(), mem.width);
    let hs = tape.shape(h);
    if hs.len() != 2 || hs[0] != b {
        return Err(NmtError::shape("attend", hs, &[b, s]));
    }
    let mut position = None;
    let weights = match (cfg.mechanism, cfg.score) {
        (Mechanism::Global, ScoreKind::Location) => {
            let w_a = vars
                .w_a
                .ok_or_else(|| NmtError::Config("location score needs w_a".into()))?;
            let logits = tape.linear(h, w_a)?;
            let s_max = tape.shape(logits)[1];
            let fitted = if s <= s_max {
                tape.slice(logits, 1, 0, s)?
            } else {
                let pad = tape.constant(Tensor::zeros(&[b, s - s_max]));
                tape.concat(logits, pad, 1)?
            };
            let mask: Vec<bool> = mem
                .mask
                .iter()
                .enumerate()
                .map(|(k, &m)| m && k % s < s_max)
                .collect();
            tape.softmax(fitted, Some(&mask))?
        }
        (Mechanism::Global, kind) => {
            let scores = content_scores(tape, vars, kind, h, mem)?;
            tape.softmax(scores, Some(&mem.mask))?
        }
        (Mechanism::LocalM, kind) => {
            let mask: Vec<bool> = mem
                .lens
                .iter()
                .flat_map(|&len| window_row(t.min(len - 1), cfg.window, len, s))
                .collect();
            let scores = content_scores(tape, vars, kind, h, mem)?;
            tape.softmax(scores, Some(&mask))?
        }
        (Mechanism::LocalP, kind) => {
            let (w_p, v_p) = match (vars.w_p, vars.v_p) {
                (Some(w), Some(v)) => (w, v),
                _ => return Err(NmtError::Config("local-p needs w_p and v_p".into())),
            };
            let z = tape.linear(h, w_p)?;
            let z = tape.tanh(z);
            let np = tape.shape(v_p)[0];
            let v = tape.reshape(v_p, &[np, 1])?;
            let u = tape.matmul(z, v)?;
            let u = tape.sigmoid(u);
            let p = tape.mul_const(u, mem.lens.iter().map(|&l| l as f64).collect())?;
            let centers: Vec<usize> = tape.value(p).data().iter().map(|&v| window_center(v)).collect();
            let mask: Vec<bool> = mem
                .lens
                .iter()
                .zip(&centers)
                .flat_map(|(&len, &c)| window_row(c, cfg.window, len, s))
                .collect();
            let scores = content_scores(tape, vars, kind, h, mem)?;
            let align = tape.softmax(scores, Some(&mask))?;
            let gauss = tape.gaussian(p, s, cfg.sigma())?;
            position = Some(p);
            tape.mul(align, gauss)?
        }
    };
    let context = tape.weighted_sum(weights, mem.states)?;
    let joined = tape.concat(context, h, 1)?;
    let pre = tape.linear(joined, vars.w_c)?;
    let attentional = tape.tanh(pre);
    Ok(AttendStep {
        weights,
        context,
        attentional,
        position,
    })
}

/// Result of attending for a single target state.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub weights: Vec<f64>,
    pub context: Tensor,
    pub attentional: Tensor,
    pub position: Option<f64>,
}

fn row(t: &Tensor) -> Result<Tensor> {
    Tensor::new(&[1, t.len()], t.data().to_vec())
}

fn single(
    h_t: &Tensor,
    states: &[Tensor],
    params: &AttentionParams,
    cfg: &AttentionConfig,
    mask: Option<&[bool]>,
    t: usize,
) -> Result<AttentionOutput> {
    if states.is_empty() {
        return Err(NmtError::InvalidArgument("attention over zero source states".into()));
    }
    cfg.validate()?;
    params.check(cfg)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let h = tape.constant(row(h_t)?);
    let parts = states
        .iter()
        .map(|s| Ok(tape.constant(row(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack(&parts)?;
    let mut mem = EncoderMemory::new(&mut tape, stacked, &[states.len()], &vars, cfg)?;
    if let Some(m) = mask {
        if m.len() != states.len() {
            return Err(NmtError::shape("attention mask", &[states.len()], &[m.len()]));
        }
        mem.mask = m.to_vec();
    }
    let step = attend(&mut tape, &vars, cfg, h, &mem, t)?;
    Ok(AttentionOutput {
        weights: tape.value(step.weights).data().to_vec(),
        context: Tensor::vector(tape.value(step.context).data().to_vec()),
        attentional: Tensor::vector(tape.value(step.attentional).data().to_vec()),
        position: step.position.map(|p| tape.value(p).data()[0]),
    })
}

/// Content score between one target state and one source state.
pub fn score(h_t: &Tensor, h_s: &Tensor, params: &AttentionParams, kind: ScoreKind) -> Result<f64> {
    if h_t.len() != h_s.len() {
        return Err(NmtError::shape("score", h_t.shape(), h_s.shape()));
    }
    let cfg = AttentionConfig::new(Mechanism::Global, kind);
    params.check(&cfg)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let h = tape.constant(row(h_t)?);
    let s = tape.constant(Tensor::new(&[1, 1, h_s.len()], h_s.data().to_vec())?);
    let mem = EncoderMemory::new(&mut tape, s, &[1], &vars, &cfg)?;
    let out = content_scores(&mut tape, &vars, kind, h, &mem)?;
    Ok(tape.value(out).data()[0])
}

/// Global attention over all `states` (optionally masked).
pub fn global_attend(
    h_t: &Tensor,
    states: &[Tensor],
    params: &AttentionParams,
    kind: ScoreKind,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let s_max = match kind {
        ScoreKind::Location => params.w_a.as_ref().map_or(1, |w| w.shape()[0]),
        _ => 1,
    };
    let cfg = AttentionConfig::new(Mechanism::Global, kind).with_max_source_len(s_max);
    single(h_t, states, params, &cfg, mask, 0)
}

/// Local attention (local-m or local-p) at target step `t` with window `window`.
pub fn local_attend(
    h_t: &Tensor,
    states: &[Tensor],
    params: &AttentionParams,
    kind: ScoreKind,
    variant: Mechanism,
    t: usize,
    window: usize,
) -> Result<AttentionOutput> {
    if variant == Mechanism::Global {
        return Err(NmtError::Config("local_attend needs local-m or local-p".into()));
    }
    let cfg = AttentionConfig::new(variant, kind).with_window(window);
    single(h_t, states, params, &cfg, None, t)
}
