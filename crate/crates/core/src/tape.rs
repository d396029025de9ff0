//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every operation appends a node holding its forward value and the operand
//! references needed by its backward rule. `backward` walks the nodes in exact
//! reverse order, so gradients of a node are complete before they are
//! propagated to its operands. Gradients accumulate additively across fan-out.
//!
//! Most model quantities are batched matrices `[B × d]`; encoder memories are
//! `[B × S × n]`. Row-wise operations (softmax, log-softmax, nll) act on the
//! last axis.

use rand::Rng;

use crate::error::{NmtError, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    AddRow { x: Var, row: Var },
    MulConst { x: Var, factor: Vec<f64> },
    Concat { a: Var, b: Var, outer: usize, ia: usize, ib: usize },
    Slice { x: Var, outer: usize, inner: usize, start: usize, len: usize },
    Reshape(Var),
    Sum(Var),
    Softmax { x: Var },
    LogSoftmax { x: Var },
    Gather { table: Var, ids: Vec<usize> },
    Nll { logp: Var, targets: Vec<usize>, weights: Vec<f64> },
    SelectRows { keep_new: Vec<bool>, new: Var, old: Var },
    Stack(Vec<Var>),
    BatchDot { q: Var, keys: Var },
    WeightedSum { w: Var, vals: Var },
    AddMid { x: Var, q: Var },
    Gaussian { p: Var, sigma: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Elementwise operations, dispatched through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Scale(f64),
}

/// Ordered record of operations with their forward values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NmtError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated at `v` by the last [`Tape::backward`], if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradient at `v` as a tensor, zeros if nothing reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match value.grad() {
            Some(g) => Tensor::new(value.shape(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(NmtError::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `op(a)·op(b)`; `ta`/`tb` select the transpose of the stored operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.mat_dims(a, "matmul")?;
        let (br, bc) = self.mat_dims(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(NmtError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            ta,
            tb,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x·wᵀ`, the layout used for all `[out × in]` weight matrices.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_t(x, w, false, true)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(va.shape(), va.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.unary(a, |x| x * factor);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(NmtError::InvalidArgument(format!(
                "{op:?} takes {arity} operand(s), got {}",
                args.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Tanh => Ok(self.tanh(args[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(args[0])),
            Elementwise::Scale(f) => Ok(self.scale(args[0], f)),
        }
    }

    /// Adds the vector `row` (length C) to every row of `x` (`[R × C]`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        let c = vx.shape()[vx.shape().len() - 1];
        if vr.len() != c {
            return Err(NmtError::shape("add_row", vx.shape(), vr.shape()));
        }
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(c) {
            chunk.iter_mut().zip(vr.data()).for_each(|(a, b)| *a += b);
        }
        let t = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(t, Op::AddRow { x, row }, rg))
    }

    /// Multiplies by a constant of the same size (dropout masks, fixed weights).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let vx = self.value(x);
        if factor.len() != vx.len() {
            return Err(NmtError::shape("mul_const", vx.shape(), &[factor.len()]));
        }
        let data = vx.data().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let t = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MulConst { x, factor }, rg))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa.iter().zip(&sb).enumerate().any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(NmtError::shape("concat", &sa, &sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let ia: usize = sa[axis..].iter().product();
        let ib: usize = sb[axis..].iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(outer * (ia + ib));
        for o in 0..outer {
            data.extend_from_slice(&da[o * ia..(o + 1) * ia]);
            data.extend_from_slice(&db[o * ib..(o + 1) * ib]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Concat { a, b, outer, ia, ib }, rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(NmtError::InvalidArgument(format!(
                "slice [{start}, {}) of axis {axis} out of range for {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let step: usize = s[axis + 1..].iter().product();
        let inner = s[axis] * step;
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * step);
        for o in 0..outer {
            let base = o * inner + start * step;
            data.extend_from_slice(&d[base..base + len * step]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Slice {
                x,
                outer,
                inner,
                start: start * step,
                len: len * step,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    /// Row-wise softmax over the last axis. Entries with `mask == false` get an
    /// effective logit of −∞: output and gradient are exactly zero there.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.shape()[vx.shape().len() - 1];
        if let Some(m) = mask {
            if m.len() != vx.len() {
                return Err(NmtError::shape("softmax mask", vx.shape(), &[m.len()]));
            }
        }
        let mut out = vec![0.0; vx.len()];
        for (r, (row, o)) in vx.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let valid = |j: usize| mask.is_none_or(|m| m[r * c + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if valid(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(NmtError::EmptyMask { row: r });
            }
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if valid(j) {
                    let e = (v - max).exp();
                    o[j] = e;
                    z += e;
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x }, rg))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.shape()[vx.shape().len() - 1];
        let mut out = vec![0.0; vx.len()];
        for (row, o) in vx.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            o.iter_mut().zip(row).for_each(|(o, v)| *o = v - lse);
        }
        let t = Tensor::new(vx.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::LogSoftmax { x }, rg)
    }

    /// Rows `ids` of `table` (`[V × n]`), giving `[ids.len() × n]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (v, n) = (vt.rows(), vt.row_len());
        if ids.is_empty() {
            return Err(NmtError::InvalidArgument("gather with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= v {
                return Err(NmtError::InvalidArgument(format!("id {id} out of range for {v} rows")));
            }
            data.extend_from_slice(vt.row(id));
        }
        let t = Tensor::new(&[ids.len(), n], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(t, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// `−Σ_b weights[b]·logp[b, targets[b]]` as a scalar.
    pub fn nll(&mut self, logp: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let vl = self.value(logp);
        let (b, v) = (vl.rows(), vl.row_len());
        if targets.len() != b || weights.len() != b || targets.iter().any(|&t| t >= v) {
            return Err(NmtError::shape("nll", vl.shape(), &[targets.len()]));
        }
        let total: f64 = (0..b)
            .filter(|&i| weights[i] != 0.0)
            .map(|i| -weights[i] * vl.at2(i, targets[i]))
            .sum();
        let rg = self.rg(&[logp]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Row `b` of the result is row `b` of `new` where `keep_new[b]`, else of `old`.
    pub fn select_rows(&mut self, keep_new: &[bool], new: Var, old: Var) -> Result<Var> {
        let (vn, vo) = (self.value(new), self.value(old));
        check_same("select_rows", vn, vo)?;
        if keep_new.len() != vn.rows() {
            return Err(NmtError::shape("select_rows", vn.shape(), &[keep_new.len()]));
        }
        let mut data = Vec::with_capacity(vn.len());
        for (b, &k) in keep_new.iter().enumerate() {
            data.extend_from_slice(if k { vn.row(b) } else { vo.row(b) });
        }
        let t = Tensor::new(vn.shape(), data)?;
        let rg = self.rg(&[new, old]);
        Ok(self.push(
            t,
            Op::SelectRows {
                keep_new: keep_new.to_vec(),
                new,
                old,
            },
            rg,
        ))
    }

    /// Stacks S matrices `[B × n]` into `[B × S × n]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NmtError::InvalidArgument("stack of nothing".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 2 {
            return Err(NmtError::shape("stack", &s0, &[0, 0]));
        }
        for p in parts {
            if self.shape(*p) != s0.as_slice() {
                return Err(NmtError::shape("stack", &s0, self.shape(*p)));
            }
        }
        let (b, n, s) = (s0[0], s0[1], parts.len());
        let mut data = vec![0.0; b * s * n];
        for (j, p) in parts.iter().enumerate() {
            let d = self.value(*p).data();
            for i in 0..b {
                data[(i * s + j) * n..(i * s + j + 1) * n].copy_from_slice(&d[i * n..(i + 1) * n]);
            }
        }
        let t = Tensor::new(&[b, s, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Stack(parts.to_vec()), rg))
    }

    fn batch_dims(&self, q: Var, keys: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let (sq, sk) = (self.shape(q), self.shape(keys));
        if sq.len() != 2 || sk.len() != 3 || sq[0] != sk[0] || sq[1] != sk[2] {
            return Err(NmtError::shape(op, sq, sk));
        }
        Ok((sk[0], sk[1], sk[2]))
    }

    /// `out[b, s] = Σ_k q[b, k]·keys[b, s, k]`.
    pub fn batch_dot(&mut self, q: Var, keys: Var) -> Result<Var> {
        let (b, s, n) = self.batch_dims(q, keys, "batch_dot")?;
        let (dq, dk) = (self.value(q).data(), self.value(keys).data());
        let mut out = vec![0.0; b * s];
        for i in 0..b {
            let qi = &dq[i * n..(i + 1) * n];
            for j in 0..s {
                let kj = &dk[(i * s + j) * n..(i * s + j + 1) * n];
                out[i * s + j] = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
            }
        }
        let t = Tensor::new(&[b, s], out)?;
        let rg = self.rg(&[q, keys]);
        Ok(self.push(t, Op::BatchDot { q, keys }, rg))
    }

    /// `out[b, k] = Σ_s w[b, s]·vals[b, s, k]`.
    pub fn weighted_sum(&mut self, w: Var, vals: Var) -> Result<Var> {
        let (sw, sv) = (self.shape(w).to_vec(), self.shape(vals).to_vec());
        if sw.len() != 2 || sv.len() != 3 || sw[0] != sv[0] || sw[1] != sv[1] {
            return Err(NmtError::shape("weighted_sum", &sw, &sv));
        }
        let (b, s, n) = (sv[0], sv[1], sv[2]);
        let (dw, dv) = (self.value(w).data(), self.value(vals).data());
        let mut out = vec![0.0; b * n];
        for i in 0..b {
            let o = &mut out[i * n..(i + 1) * n];
            for j in 0..s {
                let a = dw[i * s + j];
                if a != 0.0 {
                    let v = &dv[(i * s + j) * n..(i * s + j + 1) * n];
                    o.iter_mut().zip(v).for_each(|(o, v)| *o += a * v);
                }
            }
        }
        let t = Tensor::new(&[b, n], out)?;
        let rg = self.rg(&[w, vals]);
        Ok(self.push(t, Op::WeightedSum { w, vals }, rg))
    }

    /// `out[b, s, k] = x[b, s, k] + q[b, k]`.
    pub fn add_mid(&mut self, x: Var, q: Var) -> Result<Var> {
        let (b, s, n) = self.batch_dims(q, x, "add_mid")?;
        let (dx, dq) = (self.value(x).data(), self.value(q).data());
        let mut out = dx.to_vec();
        for i in 0..b {
            for j in 0..s {
                out[(i * s + j) * n..(i * s + j + 1) * n]
                    .iter_mut()
                    .zip(&dq[i * n..(i + 1) * n])
                    .for_each(|(o, v)| *o += v);
            }
        }
        let t = Tensor::new(&[b, s, n], out)?;
        let rg = self.rg(&[x, q]);
        Ok(self.push(t, Op::AddMid { x, q }, rg))
    }

    /// `out[b, s] = exp(−(s − p[b])² / 2σ²)` for `s = 0..cols`.
    pub fn gaussian(&mut self, p: Var, cols: usize, sigma: f64) -> Result<Var> {
        let sp = self.shape(p);
        if sp.len() != 2 || sp[1] != 1 || cols == 0 {
            return Err(NmtError::shape("gaussian", sp, &[cols]));
        }
        let b = sp[0];
        let dp = self.value(p).data();
        let mut out = vec![0.0; b * cols];
        for i in 0..b {
            for s in 0..cols {
                let d = s as f64 - dp[i];
                out[i * cols + s] = (-d * d / (2.0 * sigma * sigma)).exp();
            }
        }
        let t = Tensor::new(&[b, cols], out)?;
        let rg = self.rg(&[p]);
        Ok(self.push(t, Op::Gaussian { p, sigma }, rg))
    }

    /// Back-propagates from scalar `output` with seed gradient 1, clearing
    /// gradients from any previous pass first.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(NmtError::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.nodes[output.0].value.accumulate_grad(&[1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let contributions = self.backward_rule(i, &g);
            self.nodes[i].value.accumulate_grad(&g);
            for (v, dv) in contributions {
                if self.nodes[v.0].requires_grad {
                    self.nodes[v.0].value.accumulate_grad(&dv);
                }
            }
        }
        Ok(())
    }

    fn backward_rule(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, ta, tb } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                let mut res = Vec::new();
                if needs(*a) {
                    // y = A·B  =>  dA = dY·Bᵀ, stored in A's layout.
                    let mut da = vec![0.0; m * k];
                    if *ta {
                        // stored Aᵀ [k×m]: d(Aᵀ) = op(B)·dYᵀ
                        gemm(*tb, true, k, n, m, val(*b), g, &mut da, 0.0);
                    } else {
                        gemm(false, !*tb, m, n, k, g, val(*b), &mut da, 0.0);
                    }
                    res.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    if *tb {
                        // stored Bᵀ [n×k]: d(Bᵀ) = dYᵀ·op(A)
                        gemm(true, *ta, n, m, k, g, val(*a), &mut db, 0.0);
                    } else {
                        gemm(!*ta, false, k, m, n, val(*a), g, &mut db, 0.0);
                    }
                    res.push((*b, db));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(va).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
            Op::Tanh(a) => vec![(*a, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect())],
            Op::Sigmoid(a) => vec![(*a, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect())],
            Op::Exp(a) => vec![(*a, g.iter().zip(out).map(|(g, y)| g * y).collect())],
            Op::AddRow { x, row } => {
                let c = self.value(*row).len();
                let mut dr = vec![0.0; c];
                for chunk in g.chunks(c) {
                    dr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![(*x, g.to_vec()), (*row, dr)]
            }
            Op::MulConst { x, factor } => {
                vec![(*x, g.iter().zip(factor).map(|(g, f)| g * f).collect())]
            }
            Op::Concat { a, b, outer, ia, ib } => {
                let mut da = Vec::with_capacity(outer * ia);
                let mut db = Vec::with_capacity(outer * ib);
                for o in 0..*outer {
                    let base = o * (ia + ib);
                    da.extend_from_slice(&g[base..base + ia]);
                    db.extend_from_slice(&g[base + ia..base + ia + ib]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Slice {
                x,
                outer,
                inner,
                start,
                len,
            } => {
                let mut dx = vec![0.0; outer * inner];
                for o in 0..*outer {
                    dx[o * inner + start..o * inner + start + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Softmax { x } => {
                let c = node.value.shape()[node.value.shape().len() - 1];
                let mut dx = vec![0.0; out.len()];
                for ((y, gy), d) in out.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    d.iter_mut()
                        .zip(y.iter().zip(gy))
                        .for_each(|(d, (y, gy))| *d = y * (gy - dot));
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmax { x } => {
                let c = node.value.shape()[node.value.shape().len() - 1];
                let mut dx = vec![0.0; out.len()];
                for ((y, gy), d) in out.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s: f64 = gy.iter().sum();
                    d.iter_mut()
                        .zip(y.iter().zip(gy))
                        .for_each(|(d, (y, gy))| *d = gy - y.exp() * s);
                }
                vec![(*x, dx)]
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let n = vt.row_len();
                let mut dt = vec![0.0; vt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * n..(id + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(a, b)| *a += b);
                }
                vec![(*table, dt)]
            }
            Op::Nll {
                logp,
                targets,
                weights,
            } => {
                let vl = self.value(*logp);
                let v = vl.row_len();
                let mut dl = vec![0.0; vl.len()];
                for (b, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    dl[b * v + t] = -w * g[0];
                }
                vec![(*logp, dl)]
            }
            Op::SelectRows { keep_new, new, old } => {
                let n = node.value.row_len();
                let mut dn = vec![0.0; g.len()];
                let mut d_old = vec![0.0; g.len()];
                for (b, &k) in keep_new.iter().enumerate() {
                    let target = if k { &mut dn } else { &mut d_old };
                    target[b * n..(b + 1) * n].copy_from_slice(&g[b * n..(b + 1) * n]);
                }
                vec![(*new, dn), (*old, d_old)]
            }
            Op::Stack(parts) => {
                let sh = node.value.shape();
                let (b, s, n) = (sh[0], sh[1], sh[2]);
                parts
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| needs(**p))
                    .map(|(j, p)| {
                        let mut dp = vec![0.0; b * n];
                        for i in 0..b {
                            dp[i * n..(i + 1) * n].copy_from_slice(&g[(i * s + j) * n..(i * s + j + 1) * n]);
                        }
                        (*p, dp)
                    })
                    .collect()
            }
            Op::BatchDot { q, keys } => {
                let sk = self.shape(*keys);
                let (b, s, n) = (sk[0], sk[1], sk[2]);
                let (dq_v, dk_v) = (val(*q), val(*keys));
                let mut dq = vec![0.0; b * n];
                let mut dk = vec![0.0; b * s * n];
                for i in 0..b {
                    for j in 0..s {
                        let gij = g[i * s + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let kr = (i * s + j) * n..(i * s + j + 1) * n;
                        dq[i * n..(i + 1) * n]
                            .iter_mut()
                            .zip(&dk_v[kr.clone()])
                            .for_each(|(d, k)| *d += gij * k);
                        dk[kr]
                            .iter_mut()
                            .zip(&dq_v[i * n..(i + 1) * n])
                            .for_each(|(d, q)| *d += gij * q);
                    }
                }
                vec![(*q, dq), (*keys, dk)]
            }
            Op::WeightedSum { w, vals } => {
                let sv = self.shape(*vals);
                let (b, s, n) = (sv[0], sv[1], sv[2]);
                let (dw_v, dv_v) = (val(*w), val(*vals));
                let mut dw = vec![0.0; b * s];
                let mut dv = vec![0.0; b * s * n];
                for i in 0..b {
                    let gi = &g[i * n..(i + 1) * n];
                    for j in 0..s {
                        let vr = (i * s + j) * n..(i * s + j + 1) * n;
                        dw[i * s + j] = gi.iter().zip(&dv_v[vr.clone()]).map(|(a, b)| a * b).sum();
                        let a = dw_v[i * s + j];
                        if a != 0.0 {
                            dv[vr].iter_mut().zip(gi).for_each(|(d, g)| *d += a * g);
                        }
                    }
                }
                vec![(*w, dw), (*vals, dv)]
            }
            Op::AddMid { x, q } => {
                let sx = self.shape(*x);
                let (b, s, n) = (sx[0], sx[1], sx[2]);
                let mut dq = vec![0.0; b * n];
                for i in 0..b {
                    for j in 0..s {
                        dq[i * n..(i + 1) * n]
                            .iter_mut()
                            .zip(&g[(i * s + j) * n..(i * s + j + 1) * n])
                            .for_each(|(d, g)| *d += g);
                    }
                }
                vec![(*x, g.to_vec()), (*q, dq)]
            }
            Op::Gaussian { p, sigma } => {
                let cols = node.value.shape()[1];
                let dp_v = val(*p);
                let dp = dp_v
                    .iter()
                    .enumerate()
                    .map(|(i, &pi)| {
                        (0..cols)
                            .map(|s| {
                                let k = i * cols + s;
                                g[k] * out[k] * (s as f64 - pi) / (sigma * sigma)
                            })
                            .sum()
                    })
                    .collect();
                vec![(*p, dp)]
            }
        }
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1−p)`.
/// Outside training the mask is all ones.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R, train: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(NmtError::InvalidArgument(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    let mut t = Tensor::ones(shape);
    if train && p > 0.0 {
        let keep = 1.0 / (1.0 - p);
        for v in t.data_mut() {
            *v = if rng.gen::<f64>() < p { 0.0 } else { keep };
        }
    }
    Ok(t)
}

/// Largest relative error between the reverse-mode gradient of `f` at `x`
/// and central differences `(f(x+εe) − f(x−εe)) / 2ε`, with relative error
/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn check_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point.clone());
        let y = f(&mut tape, v)?;
        let out = tape.value(y).data()[0];
        if !out.is_finite() {
            return Err(NmtError::NonFinite(format!("f(x) = {out}")));
        }
        Ok(out)
    };
    eval(x)?;
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = f(&mut tape, v)?;
    tape.backward(y)?;
    let analytic = tape.grad_tensor(v);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}
