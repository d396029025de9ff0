//! Stacked LSTM cells.
//!
//! Gate blocks of the `4n` dimension are laid out as
//! `[input | forget | candidate | output]`.

use rand::Rng;

use crate::error::{NmtError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Range of the uniform parameter initialization.
pub const INIT_SCALE: f64 = 0.1;

/// Gate order inside each `4n` block, as recorded in saved models.
pub const GATE_ORDER: [&str; 4] = ["input", "forget", "candidate", "output"];

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    /// `[4n × in_dim]`
    pub w_x: Tensor,
    /// `[4n × n]`
    pub w_h: Tensor,
    /// `[4n]`
    pub bias: Tensor,
}

impl LstmLayerParams {
    pub fn init<R: Rng + ?Sized>(n: usize, in_dim: usize, rng: &mut R) -> Self {
        LstmLayerParams {
            w_x: Tensor::uniform(&[4 * n, in_dim], INIT_SCALE, rng),
            w_h: Tensor::uniform(&[4 * n, n], INIT_SCALE, rng),
            bias: Tensor::uniform(&[4 * n], INIT_SCALE, rng),
        }
    }

    pub fn cells(&self) -> usize {
        self.w_h.shape()[1]
    }

    pub fn in_dim(&self) -> usize {
        self.w_x.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedLstm {
    pub layers: Vec<LstmLayerParams>,
}

/// Uniform `[−0.1, 0.1]` initialization of a `layers`-deep stack whose first
/// layer reads `in_dim` inputs and the rest read `n`.
pub fn init_params<R: Rng + ?Sized>(layers: usize, n: usize, in_dim: usize, rng: &mut R) -> Result<StackedLstm> {
    if layers == 0 || n == 0 || in_dim == 0 {
        return Err(NmtError::InvalidArgument(format!(
            "lstm needs layers, cells and input width >= 1 (got {layers}, {n}, {in_dim})"
        )));
    }
    Ok(StackedLstm {
        layers: (0..layers)
            .map(|l| LstmLayerParams::init(n, if l == 0 { in_dim } else { n }, rng))
            .collect(),
    })
}

impl StackedLstm {
    pub fn cells(&self) -> usize {
        self.layers[0].cells()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<LstmLayerVars> {
        self.layers
            .iter()
            .map(|l| LstmLayerVars {
                w_x: tape.leaf(l.w_x.clone()),
                w_h: tape.leaf(l.w_h.clone()),
                bias: tape.leaf(l.bias.clone()),
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w_x, &l.w_h, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w_x, &mut l.w_h, &mut l.bias])
            .collect()
    }
}

/// Parameters of one layer bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmLayerVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

impl LstmLayerVars {
    pub fn vars(&self) -> [Var; 3] {
        [self.w_x, self.w_h, self.bias]
    }
}

/// Hidden and cell state of one layer, each `[B × n]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerState {
    pub h: Var,
    pub c: Var,
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub layers: Vec<LayerState>,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, layers: usize, batch: usize, n: usize) -> Self {
        LstmState {
            layers: (0..layers)
                .map(|_| LayerState {
                    h: tape.constant(Tensor::zeros(&[batch, n])),
                    c: tape.constant(Tensor::zeros(&[batch, n])),
                })
                .collect(),
        }
    }

    pub fn top(&self) -> Var {
        self.layers[self.layers.len() - 1].h
    }

    /// Per row, keeps `self` where `keep_new` and `old` elsewhere.
    pub fn select(&self, tape: &mut Tape, keep_new: &[bool], old: &LstmState) -> Result<LstmState> {
        let layers = self
            .layers
            .iter()
            .zip(&old.layers)
            .map(|(n, o)| {
                Ok(LayerState {
                    h: tape.select_rows(keep_new, n.h, o.h)?,
                    c: tape.select_rows(keep_new, n.c, o.c)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(LstmState { layers })
    }
}

/// One LSTM cell on a batch: `x` is `[B × in]`, states `[B × n]`.
pub fn cell_step(tape: &mut Tape, p: &LstmLayerVars, prev: LayerState, x: Var) -> Result<LayerState> {
    let n = tape.shape(p.w_h)[1];
    let gx = tape.linear(x, p.w_x)?;
    let gh = tape.linear(prev.h, p.w_h)?;
    let pre = tape.add(gx, gh)?;
    let pre = tape.add_row(pre, p.bias)?;
    let i = tape.slice(pre, 1, 0, n)?;
    let f = tape.slice(pre, 1, n, n)?;
    let g = tape.slice(pre, 1, 2 * n, n)?;
    let o = tape.slice(pre, 1, 3 * n, n)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, prev.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LayerState { h, c })
}

/// Advances the whole stack by one time step. `dropout`, when given, holds
/// one mask per layer applied to that layer's input (the non-recurrent
/// connections); pass `None` outside training.
pub fn lstm_step(
    tape: &mut Tape,
    params: &[LstmLayerVars],
    prev: &LstmState,
    x: Var,
    dropout: Option<&[Tensor]>,
) -> Result<(LstmState, Var)> {
    if params.len() != prev.layers.len() {
        return Err(NmtError::InvalidArgument(format!(
            "{} layers of parameters but {} of state",
            params.len(),
            prev.layers.len()
        )));
    }
    let want = tape.shape(params[0].w_x)[1];
    let got = tape.shape(x);
    if got.len() != 2 || got[1] != want {
        return Err(NmtError::shape("lstm_step input", got, &[got[0], want]));
    }
    let mut input = x;
    let mut layers = Vec::with_capacity(params.len());
    for (l, (p, s)) in params.iter().zip(&prev.layers).enumerate() {
        if let Some(masks) = dropout {
            input = tape.mul_const(input, masks[l].data().to_vec())?;
        }
        let next = cell_step(tape, p, *s, input)?;
        input = next.h;
        layers.push(next);
    }
    Ok((LstmState { layers }, input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_step(stack: &StackedLstm, h0: &Tensor, c0: &Tensor, x: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let vars = stack.bind(&mut tape);
        let prev = LstmState {
            layers: vec![LayerState {
                h: tape.constant(h0.clone()),
                c: tape.constant(c0.clone()),
            }],
        };
        let xv = tape.constant(x.clone());
        let (s, top) = lstm_step(&mut tape, &vars, &prev, xv, None).unwrap();
        (tape.value(top).clone(), tape.value(s.layers[0].c).clone())
    }

    fn zero_stack(n: usize, in_dim: usize) -> StackedLstm {
        StackedLstm {
            layers: vec![LstmLayerParams {
                w_x: Tensor::zeros(&[4 * n, in_dim]),
                w_h: Tensor::zeros(&[4 * n, n]),
                bias: Tensor::zeros(&[4 * n]),
            }],
        }
    }

    #[test]
    fn zero_params_zero_state() {
        let stack = zero_stack(3, 2);
        let (h, c) = run_step(
            &stack,
            &Tensor::zeros(&[1, 3]),
            &Tensor::zeros(&[1, 3]),
            &Tensor::filled(&[1, 2], 0.7),
        );
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let n = 2;
        let mut stack = zero_stack(n, 2);
        let bias = stack.layers[0].bias.data_mut();
        for (k, b) in bias.iter_mut().enumerate() {
            *b = if (n..2 * n).contains(&k) { 1e3 } else { -1e3 };
        }
        let c0 = Tensor::matrix(&[vec![0.4, -2.0]]);
        let (_, c) = run_step(&stack, &Tensor::zeros(&[1, n]), &c0, &Tensor::filled(&[1, 2], 0.3));
        assert!(c.max_abs_diff(&c0) < 1e-12);
    }

    #[test]
    fn init_range_mean_and_determinism() {
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let a = init_params(2, 50, 100, &mut r1).unwrap();
        let b = init_params(2, 50, 100, &mut r2).unwrap();
        assert_eq!(a, b);
        let all: Vec<f64> = a.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        assert!(all.len() >= 50_000);
        assert!(all.iter().all(|v| (-0.1..=0.1).contains(v)));
        let big = init_params(1, 100, 150, &mut r1).unwrap();
        let all: Vec<f64> = big.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        assert!(all.len() >= 100_000);
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn init_rejects_zero_layers() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(init_params(0, 4, 4, &mut r).is_err());
    }

    #[test]
    fn input_width_checked() {
        let stack = zero_stack(3, 2);
        let mut tape = Tape::new();
        let vars = stack.bind(&mut tape);
        let prev = LstmState::zeros(&mut tape, 1, 1, 3);
        let x = tape.constant(Tensor::zeros(&[1, 5]));
        assert!(matches!(
            lstm_step(&mut tape, &vars, &prev, x, None),
            Err(NmtError::Shape { .. })
        ));
    }

    #[test]
    fn hidden_bounded_and_cell_growth_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut stack = init_params(1, 6, 4, &mut rng).unwrap();
        for t in stack.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 5.0);
        }
        for _ in 0..20 {
            let h0 = Tensor::uniform(&[1, 6], 1.0, &mut rng);
            let c0 = Tensor::uniform(&[1, 6], 3.0, &mut rng);
            let x = Tensor::uniform(&[1, 4], 5.0, &mut rng);
            let (h, c) = run_step(&stack, &h0, &c0, &x);
            assert!(h.data().iter().all(|v| v.abs() < 1.0));
            for (c1, c0) in c.data().iter().zip(c0.data()) {
                assert!(c1.abs() <= c0.abs() + 1.0 + 1e-12);
            }
        }
    }
}
