//! Sequence building blocks: unidirectional LSTM, time max-pooling, projection
//! heads, maxout, batch normalization and dropout.
//!
//! Inside a [`Graph`], sequences are carried as [`SeqVar`]: a `(time·batch, dim)`
//! matrix in time-major order (row `t·B + b`) plus per-sequence lengths. Rows at
//! or beyond a sequence's length are padding; every op here keeps them from
//! influencing valid rows.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::numerics::tensor::{log_softmax_into, matmul_xwt, sigmoid};
use crate::numerics::{CustomOp, Graph, ParamStore, Tensor, Var};

/// Train or inference behaviour for stochastic and statistics-dependent layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Padded `(batch, time, dim)` features with per-sequence valid lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub data: Tensor,
    pub lengths: Vec<usize>,
    /// Product of all pooling factors applied so far.
    pub subsampling: usize,
}

impl SequenceBatch {
    pub fn new(data: Tensor, lengths: Vec<usize>, subsampling: usize) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("sequence batch must be 3-D, got {s:?}")));
        }
        if lengths.len() != s[0] || lengths.iter().any(|&l| l > s[1]) {
            return Err(Error::shape(format!(
                "lengths {lengths:?} invalid for shape {s:?}"
            )));
        }
        if subsampling == 0 {
            return Err(Error::contract("subsampling factor must be positive"));
        }
        Ok(SequenceBatch {
            data,
            lengths,
            subsampling,
        })
    }

    /// Packs variable-length `(T_i, D)` matrices, zero padding to the longest.
    pub fn from_sequences(seqs: &[&Tensor]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let d = seqs[0].cols();
        let time = seqs.iter().map(|s| s.rows()).max().unwrap_or(0);
        let mut data = vec![0.0; seqs.len() * time * d];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            if s.cols() != d {
                return Err(Error::shape("feature dimension differs within a batch"));
            }
            data[b * time * d..b * time * d + s.len()].copy_from_slice(s.data());
            lengths.push(s.rows());
        }
        Self::new(Tensor::new(vec![seqs.len(), time, d], data)?, lengths, 1)
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn time(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    /// Valid frames of sequence `b` as a `(len, dim)` slice.
    pub fn sequence(&self, b: usize) -> &[f64] {
        let (t, d) = (self.time(), self.dim());
        &self.data.data()[b * t * d..b * t * d + self.lengths[b] * d]
    }

    pub fn to_time_major(&self) -> Tensor {
        let (bn, t, d) = (self.batch(), self.time(), self.dim());
        let mut out = vec![0.0; bn * t * d];
        for b in 0..bn {
            for ti in 0..t {
                let src = &self.data.data()[(b * t + ti) * d..(b * t + ti + 1) * d];
                out[(ti * bn + b) * d..(ti * bn + b + 1) * d].copy_from_slice(src);
            }
        }
        Tensor::matrix(t * bn, d, out).expect("non-empty batch")
    }

    /// Inverse of [`to_time_major`](Self::to_time_major); padded frames become zero.
    pub fn from_time_major(tm: &Tensor, batch: usize, lengths: Vec<usize>, subsampling: usize) -> Result<Self> {
        let d = tm.cols();
        let t = tm.rows() / batch;
        let mut out = vec![0.0; batch * t * d];
        for (b, &len) in lengths.iter().enumerate() {
            for ti in 0..len {
                let src = &tm.data()[(ti * batch + b) * d..(ti * batch + b + 1) * d];
                out[(b * t + ti) * d..(b * t + ti + 1) * d].copy_from_slice(src);
            }
        }
        Self::new(Tensor::new(vec![batch, t, d], out)?, lengths, subsampling)
    }
}

/// A time-major sequence batch living in a graph.
#[derive(Clone, Debug)]
pub struct SeqVar {
    pub var: Var,
    pub time: usize,
    pub batch: usize,
    pub lengths: Vec<usize>,
    pub subsampling: usize,
}

impl SeqVar {
    pub fn from_batch(g: &mut Graph, batch: &SequenceBatch) -> Self {
        let var = g.input(batch.to_time_major());
        SeqVar {
            var,
            time: batch.time(),
            batch: batch.batch(),
            lengths: batch.lengths.clone(),
            subsampling: batch.subsampling,
        }
    }

    pub fn with_var(&self, var: Var) -> Self {
        SeqVar {
            var,
            ..self.clone()
        }
    }

    /// 1.0 for valid rows, 0.0 for padding, in time-major row order.
    pub fn mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.time * self.batch];
        for t in 0..self.time {
            for (b, &len) in self.lengths.iter().enumerate() {
                if t < len {
                    m[t * self.batch + b] = 1.0;
                }
            }
        }
        m
    }

    pub fn to_batch(&self, g: &Graph) -> Result<SequenceBatch> {
        SequenceBatch::from_time_major(g.value(self.var), self.batch, self.lengths.clone(), self.subsampling)
    }
}

/// Fresh weights uniform in (−0.05, 0.05).
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let dist = Uniform::new(-0.05, 0.05).expect("valid range");
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    t
}

/// Unidirectional LSTM layer.
///
/// Gates are stacked in the order input, forget, cell, output: rows
/// `[0,H)`, `[H,2H)`, `[2H,3H)`, `[3H,4H)` of `w_ih` (4H×D), `w_hh` (4H×H)
/// and the single coupled bias `b` (4H).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UlstmLayer {
    pub name: String,
    pub input_dim: usize,
    pub hidden: usize,
}

/// `(h, c)` per batch entry, each `(batch, hidden)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[batch, hidden]),
            c: Tensor::zeros(&[batch, hidden]),
        }
    }
}

impl UlstmLayer {
    pub fn new(name: impl Into<String>, input_dim: usize, hidden: usize) -> Self {
        UlstmLayer {
            name: name.into(),
            input_dim,
            hidden,
        }
    }

    pub fn w_ih(&self) -> String {
        format!("{}.w_ih", self.name)
    }

    pub fn w_hh(&self) -> String {
        format!("{}.w_hh", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Uniform weights, zero biases except +1 on the forget gate.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let h = self.hidden;
        store.insert(self.w_ih(), init_uniform(rng, &[4 * h, self.input_dim]), true)?;
        store.insert(self.w_hh(), init_uniform(rng, &[4 * h, h]), true)?;
        let mut b = Tensor::zeros(&[4 * h]);
        b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        store.insert(self.bias(), b, true)
    }

    /// Runs the layer over a whole sequence batch inside `g`.
    pub fn forward_seq(&self, g: &mut Graph, store: &ParamStore, x: &SeqVar, init: Option<(Var, Var)>) -> Result<(SeqVar, Var, Var)> {
        let d = g.value(x.var).cols();
        if d != self.input_dim {
            return Err(Error::shape(format!(
                "{}: input dim {d}, layer expects {}",
                self.name, self.input_dim
            )));
        }
        let (bn, hdim) = (x.batch, self.hidden);
        let w_ih = g.param(store, &self.w_ih())?;
        let w_hh = g.param(store, &self.w_hh())?;
        let b = g.param(store, &self.bias())?;
        let xw = g.linear(x.var, w_ih, Some(b))?;
        let (mut h, mut c) = match init {
            Some(s) => s,
            None => (
                g.input(Tensor::zeros(&[bn, hdim])),
                g.input(Tensor::zeros(&[bn, hdim])),
            ),
        };
        let mut outs = Vec::with_capacity(x.time);
        // per-sequence final state, taken at each sequence's own last valid frame
        let mut last_h = vec![None; bn];
        for t in 0..x.time {
            let xt = g.rows(xw, t * bn, bn)?;
            let hw = g.linear(h, w_hh, None)?;
            let gates = g.add(xt, hw)?;
            let out = lstm_cell(g, gates, c)?;
            h = g.slice_cols(out, 0, hdim)?;
            c = g.slice_cols(out, hdim, hdim)?;
            outs.push(h);
            for (bi, &len) in x.lengths.iter().enumerate() {
                if len > 0 && t + 1 == len {
                    last_h[bi] = Some(out);
                }
            }
        }
        let y = g.concat_rows(&outs)?;
        let (fh, fc) = final_state(g, &last_h, hdim)?;
        Ok((x.with_var(y), fh, fc))
    }

    /// Convenience wrapper over [`forward_seq`](Self::forward_seq) for plain tensors.
    pub fn forward(&self, store: &ParamStore, batch: &SequenceBatch, init: Option<&LstmState>) -> Result<(SequenceBatch, LstmState)> {
        let mut g = Graph::new();
        let x = SeqVar::from_batch(&mut g, batch);
        let init = init.map(|s| (g.input(s.h.clone()), g.input(s.c.clone())));
        let (y, h, c) = self.forward_seq(&mut g, store, &x, init)?;
        let state = LstmState {
            h: g.value(h).clone(),
            c: g.value(c).clone(),
        };
        Ok((y.to_batch(&g)?, state))
    }

    /// One step over a `(batch, input_dim)` input without recording a graph.
    pub fn step(&self, store: &ParamStore, x: &Tensor, state: &LstmState) -> Result<LstmState> {
        let (bn, hd) = (x.rows(), self.hidden);
        if x.cols() != self.input_dim {
            return Err(Error::shape(format!("{}: step input dim {}", self.name, x.cols())));
        }
        let w_ih = store.value(&self.w_ih())?;
        let w_hh = store.value(&self.w_hh())?;
        let b = store.value(&self.bias())?;
        let mut gates = vec![0.0; bn * 4 * hd];
        matmul_xwt(x.data(), w_ih.data(), &mut gates, bn, self.input_dim, 4 * hd);
        let mut hw = vec![0.0; bn * 4 * hd];
        matmul_xwt(state.h.data(), w_hh.data(), &mut hw, bn, hd, 4 * hd);
        for (r, row) in gates.chunks_mut(4 * hd).enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v += hw[r * 4 * hd + k] + b.data()[k];
            }
        }
        let mut h = vec![0.0; bn * hd];
        let mut c = vec![0.0; bn * hd];
        for r in 0..bn {
            cell_forward(
                &gates[r * 4 * hd..(r + 1) * 4 * hd],
                &state.c.data()[r * hd..(r + 1) * hd],
                &mut h[r * hd..(r + 1) * hd],
                &mut c[r * hd..(r + 1) * hd],
            );
        }
        Ok(LstmState {
            h: Tensor::matrix(bn, hd, h)?,
            c: Tensor::matrix(bn, hd, c)?,
        })
    }
}

fn final_state(g: &mut Graph, last: &[Option<Var>], hdim: usize) -> Result<(Var, Var)> {
    let mut hs = Vec::with_capacity(last.len());
    let mut cs = Vec::with_capacity(last.len());
    for (bi, out) in last.iter().enumerate() {
        match out {
            Some(o) => {
                let row = g.rows(*o, bi, 1)?;
                hs.push(g.slice_cols(row, 0, hdim)?);
                cs.push(g.slice_cols(row, hdim, hdim)?);
            }
            None => {
                hs.push(g.input(Tensor::zeros(&[1, hdim])));
                cs.push(g.input(Tensor::zeros(&[1, hdim])));
            }
        }
    }
    Ok((g.concat_rows(&hs)?, g.concat_rows(&cs)?))
}

fn cell_forward(gates: &[f64], c_prev: &[f64], h: &mut [f64], c: &mut [f64]) {
    let hd = c_prev.len();
    for k in 0..hd {
        let i = sigmoid(gates[k]);
        let f = sigmoid(gates[hd + k]);
        let gg = gates[2 * hd + k].tanh();
        let o = sigmoid(gates[3 * hd + k]);
        c[k] = f * c_prev[k] + i * gg;
        h[k] = o * c[k].tanh();
    }
}

struct LstmCellOp;

impl CustomOp for LstmCellOp {
    fn name(&self) -> &'static str {
        "lstm_cell"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (gates, c_prev) = (inputs[0], inputs[1]);
        let hd = c_prev.cols();
        let bn = c_prev.rows();
        let mut g_gates = Tensor::zeros(gates.shape());
        let mut g_cprev = Tensor::zeros(c_prev.shape());
        for r in 0..bn {
            let a = &gates.data()[r * 4 * hd..(r + 1) * 4 * hd];
            let cp = &c_prev.data()[r * hd..(r + 1) * hd];
            let out = &output.data()[r * 2 * hd..(r + 1) * 2 * hd];
            let go = &grad.data()[r * 2 * hd..(r + 1) * 2 * hd];
            let dg = &mut g_gates.data_mut()[r * 4 * hd..(r + 1) * 4 * hd];
            for k in 0..hd {
                let i = sigmoid(a[k]);
                let f = sigmoid(a[hd + k]);
                let gg = a[2 * hd + k].tanh();
                let o = sigmoid(a[3 * hd + k]);
                let tc = out[hd + k].tanh();
                let dh = go[k];
                let dc = go[hd + k] + dh * o * (1.0 - tc * tc);
                dg[k] = dc * gg * i * (1.0 - i);
                dg[hd + k] = dc * cp[k] * f * (1.0 - f);
                dg[2 * hd + k] = dc * i * (1.0 - gg * gg);
                dg[3 * hd + k] = dh * tc * o * (1.0 - o);
                g_cprev.data_mut()[r * hd + k] = dc * f;
            }
        }
        vec![Some(g_gates), Some(g_cprev)]
    }
}

/// Fused LSTM cell: `gates (B,4H)` pre-activations and `c_prev (B,H)` give `[h | c]` as `(B,2H)`.
pub fn lstm_cell(g: &mut Graph, gates: Var, c_prev: Var) -> Result<Var> {
    let (gv, cv) = (g.value(gates), g.value(c_prev));
    let (bn, hd) = (cv.rows(), cv.cols());
    if gv.rows() != bn || gv.cols() != 4 * hd {
        return Err(Error::shape(format!(
            "lstm_cell: gates {:?} with cell {:?}",
            gv.shape(),
            cv.shape()
        )));
    }
    let mut out = vec![0.0; bn * 2 * hd];
    for r in 0..bn {
        let (h, c) = out[r * 2 * hd..(r + 1) * 2 * hd].split_at_mut(hd);
        cell_forward(
            &gv.data()[r * 4 * hd..(r + 1) * 4 * hd],
            &cv.data()[r * hd..(r + 1) * hd],
            h,
            c,
        );
    }
    let value = Tensor::matrix(bn, 2 * hd, out)?;
    Ok(g.custom(&[gates, c_prev], value, Box::new(LstmCellOp)))
}

/// Routes each output entry's gradient back to one source entry.
struct ArgmaxOp {
    name: &'static str,
    /// Flat source index per output entry; `usize::MAX` for constant outputs.
    src: Vec<usize>,
}

impl CustomOp for ArgmaxOp {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        for (&s, &gg) in self.src.iter().zip(grad.data()) {
            if s != usize::MAX {
                gx.data_mut()[s] += gg;
            }
        }
        vec![Some(gx)]
    }
}

/// Output length after pooling `len` frames by `factor` (partial last window kept).
pub fn pooled_len(len: usize, factor: usize) -> usize {
    len.div_ceil(factor)
}

/// Max over non-overlapping time windows of `factor` frames.
///
/// Windows never reach past a sequence's valid length, so the last window may
/// be partial; output lengths are `ceil(len / factor)`. Ties go to the earliest frame.
pub fn maxpool_time_seq(g: &mut Graph, x: &SeqVar, factor: usize) -> Result<SeqVar> {
    if factor < 2 {
        return Err(Error::contract(format!("pool factor must be ≥ 2, got {factor}")));
    }
    let xv = g.value(x.var);
    let d = xv.cols();
    let bn = x.batch;
    let new_time = pooled_len(x.time, factor);
    let new_lengths: Vec<usize> = x.lengths.iter().map(|&l| pooled_len(l, factor)).collect();
    let mut out = vec![0.0; new_time * bn * d];
    let mut src = vec![usize::MAX; new_time * bn * d];
    for (b, &len) in x.lengths.iter().enumerate() {
        for j in 0..new_lengths[b] {
            let lo = j * factor;
            let hi = (lo + factor).min(len);
            for k in 0..d {
                let mut best = lo;
                let mut bv = xv.data()[(lo * bn + b) * d + k];
                for t in lo + 1..hi {
                    let v = xv.data()[(t * bn + b) * d + k];
                    if v > bv {
                        bv = v;
                        best = t;
                    }
                }
                let o = (j * bn + b) * d + k;
                out[o] = bv;
                src[o] = (best * bn + b) * d + k;
            }
        }
    }
    let value = Tensor::matrix(new_time * bn, d, out)?;
    let var = g.custom(&[x.var], value, Box::new(ArgmaxOp { name: "maxpool_time", src }));
    Ok(SeqVar {
        var,
        time: new_time,
        batch: bn,
        lengths: new_lengths,
        subsampling: x.subsampling * factor,
    })
}

/// [`maxpool_time_seq`] on a plain batch.
pub fn maxpool_time(batch: &SequenceBatch, factor: usize) -> Result<SequenceBatch> {
    let mut g = Graph::new();
    let x = SeqVar::from_batch(&mut g, batch);
    let y = maxpool_time_seq(&mut g, &x, factor)?;
    y.to_batch(&g)
}

/// Elementwise max over consecutive groups of `groups` columns.
pub fn maxout_var(g: &mut Graph, x: Var, groups: usize) -> Result<Var> {
    let xv = g.value(x);
    let (m, c) = (xv.rows(), xv.cols());
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!("maxout: width {c} not divisible by {groups}")));
    }
    let oc = c / groups;
    let mut out = vec![0.0; m * oc];
    let mut src = vec![0; m * oc];
    for r in 0..m {
        for j in 0..oc {
            let base = r * c + j * groups;
            let mut best = base;
            for k in base + 1..base + groups {
                if xv.data()[k] > xv.data()[best] {
                    best = k;
                }
            }
            out[r * oc + j] = xv.data()[best];
            src[r * oc + j] = best;
        }
    }
    let value = Tensor::matrix(m, oc, out)?;
    Ok(g.custom(&[x], value, Box::new(ArgmaxOp { name: "maxout", src })))
}

pub fn maxout(t: &Tensor, groups: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(t.clone());
    let y = maxout_var(&mut g, x, groups)?;
    Ok(g.value(y).clone())
}

/// Feed-forward projection followed by a log-softmax.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectionHead {
    pub name: String,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ProjectionHead {
    pub fn new(name: impl Into<String>, input_dim: usize, output_dim: usize) -> Self {
        ProjectionHead {
            name: name.into(),
            input_dim,
            output_dim,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        store.insert(self.weight(), init_uniform(rng, &[self.output_dim, self.input_dim]), true)?;
        store.insert(self.bias(), Tensor::zeros(&[self.output_dim]), true)
    }

    /// Pre-softmax scores, `(rows, output_dim)`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight())?;
        let b = g.param(store, &self.bias())?;
        g.linear(x, w, Some(b))
    }

    /// Row-wise log probabilities.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let z = self.logits(g, store, x)?;
        g.log_softmax(z)
    }

    /// Log probabilities for a plain `(rows, input_dim)` matrix.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim {
            return Err(Error::shape(format!("{}: input dim {}", self.name, x.cols())));
        }
        let w = store.value(&self.weight())?;
        let b = store.value(&self.bias())?;
        let (m, n) = (x.rows(), self.output_dim);
        let mut z = vec![0.0; m * n];
        matmul_xwt(x.data(), w.data(), &mut z, m, self.input_dim, n);
        let mut out = vec![0.0; m * n];
        for (r, row) in z.chunks_mut(n).enumerate() {
            row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
            log_softmax_into(row, &mut out[r * n..(r + 1) * n]);
        }
        Tensor::matrix(m, n, out)
    }
}

/// `ff_softmax` on a sequence batch: per-frame log-probability rows in time-major order.
pub fn ff_softmax(head: &ProjectionHead, store: &ParamStore, batch: &SequenceBatch) -> Result<Tensor> {
    if batch.dim() != head.input_dim {
        return Err(Error::shape(format!("{}: input dim {}", head.name, batch.dim())));
    }
    head.apply(store, &batch.to_time_major())
}

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;

/// Per-feature batch normalization with learned scale/shift and running statistics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchNormLayer {
    pub name: String,
    pub dim: usize,
}

/// Batch statistics from a train-mode pass, to be folded into the running averages.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormLayer {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        BatchNormLayer {
            name: name.into(),
            dim,
        }
    }

    pub fn gamma(&self) -> String {
        format!("{}.gamma", self.name)
    }

    pub fn beta(&self) -> String {
        format!("{}.beta", self.name)
    }

    pub fn running_mean(&self) -> String {
        format!("{}.running_mean", self.name)
    }

    pub fn running_var(&self) -> String {
        format!("{}.running_var", self.name)
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(self.gamma(), Tensor::filled(&[self.dim], 1.0), true)?;
        store.insert(self.beta(), Tensor::zeros(&[self.dim]), true)?;
        store.insert(self.running_mean(), Tensor::zeros(&[self.dim]), false)?;
        store.insert(self.running_var(), Tensor::filled(&[self.dim], 1.0), false)
    }

    /// Normalizes valid frames; padded rows come out as zero.
    ///
    /// Train mode pools statistics over all valid frames of the batch and
    /// returns them for [`update_running`](Self::update_running); infer mode
    /// uses the running statistics only.
    pub fn forward_seq(&self, g: &mut Graph, store: &ParamStore, x: &SeqVar, mode: Mode) -> Result<(SeqVar, Option<BnStats>)> {
        let xv = g.value(x.var);
        let d = xv.cols();
        if d != self.dim {
            return Err(Error::shape(format!("{}: input dim {d}", self.name)));
        }
        let mask = x.mask();
        let n_valid = mask.iter().filter(|&&m| m > 0.0).count();
        let (mean, var) = match mode {
            Mode::Train => {
                if n_valid < 2 {
                    return Err(Error::contract(format!(
                        "{}: batch norm needs ≥ 2 valid frames, got {n_valid}",
                        self.name
                    )));
                }
                let mut mean = vec![0.0; d];
                for (row, &m) in xv.data().chunks(d).zip(&mask) {
                    if m > 0.0 {
                        mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
                mean.iter_mut().for_each(|a| *a /= n_valid as f64);
                let mut var = vec![0.0; d];
                for (row, &m) in xv.data().chunks(d).zip(&mask) {
                    if m > 0.0 {
                        for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                            *a += (v - mu) * (v - mu);
                        }
                    }
                }
                var.iter_mut().for_each(|a| *a /= n_valid as f64);
                (mean, var)
            }
            Mode::Infer => (
                store.value(&self.running_mean())?.data().to_vec(),
                store.value(&self.running_var())?.data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = store.value(&self.gamma())?.data().to_vec();
        let beta = store.value(&self.beta())?.data().to_vec();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.data().chunks(d).enumerate() {
            if mask[r] == 0.0 {
                continue;
            }
            for k in 0..d {
                let xh = (row[k] - mean[k]) * inv_std[k];
                xhat[r * d + k] = xh;
                out[r * d + k] = gamma[k] * xh + beta[k];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let gv = g.param(store, &self.gamma())?;
        let bv = g.param(store, &self.beta())?;
        let op = BatchNormOp {
            xhat,
            inv_std,
            mask,
            n_valid,
            train: mode == Mode::Train,
        };
        let y = g.custom(&[x.var, gv, bv], value, Box::new(op));
        let stats = (mode == Mode::Train).then(|| BnStats {
            name: self.name.clone(),
            mean,
            var,
        });
        Ok((x.with_var(y), stats))
    }

    /// `running ← 0.99·running + 0.01·batch`.
    pub fn update_running(store: &mut ParamStore, stats: &BnStats) -> Result<()> {
        Self::update_running_with(store, stats, BN_MOMENTUM)
    }

    /// `running ← m·running + (1 − m)·batch`.
    pub fn update_running_with(store: &mut ParamStore, stats: &BnStats, momentum: f64) -> Result<()> {
        let l = BatchNormLayer::new(stats.name.clone(), stats.mean.len());
        for (name, batch) in [(l.running_mean(), &stats.mean), (l.running_var(), &stats.var)] {
            let mut t = store.value(&name)?.clone();
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            store.set_value(&name, t)?;
        }
        Ok(())
    }

    /// Plain-tensor batch norm; train mode also updates the running statistics in `store`.
    pub fn apply(&self, store: &mut ParamStore, batch: &SequenceBatch, mode: Mode) -> Result<SequenceBatch> {
        let mut g = Graph::new();
        let x = SeqVar::from_batch(&mut g, batch);
        let (y, stats) = self.forward_seq(&mut g, store, &x, mode)?;
        let out = y.to_batch(&g)?;
        if let Some(s) = stats {
            Self::update_running(store, &s)?;
        }
        Ok(out)
    }
}

struct BatchNormOp {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mask: Vec<f64>,
    n_valid: usize,
    train: bool,
}

impl CustomOp for BatchNormOp {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let d = gamma.len();
        let gd = grad.data();
        let mut ggamma = vec![0.0; d];
        let mut gbeta = vec![0.0; d];
        for (r, row) in gd.chunks(d).enumerate() {
            if self.mask[r] == 0.0 {
                continue;
            }
            for k in 0..d {
                ggamma[k] += row[k] * self.xhat[r * d + k];
                gbeta[k] += row[k];
            }
        }
        let mut gx = Tensor::zeros(x.shape());
        let n = self.n_valid as f64;
        for (r, row) in gd.chunks(d).enumerate() {
            if self.mask[r] == 0.0 {
                continue;
            }
            for k in 0..d {
                let dxh = row[k] * gamma.data()[k];
                gx.data_mut()[r * d + k] = if self.train {
                    // Σ dxh = γ·Σg and Σ dxh·x̂ = γ·Σ g·x̂ per feature
                    self.inv_std[k] / n
                        * (n * dxh
                            - gamma.data()[k] * gbeta[k]
                            - self.xhat[r * d + k] * gamma.data()[k] * ggamma[k])
                } else {
                    dxh * self.inv_std[k]
                };
            }
        }
        vec![
            Some(gx),
            Some(Tensor::vector(ggamma)),
            Some(Tensor::vector(gbeta)),
        ]
    }
}

/// Inverted dropout mask: each entry is 0 with probability `rate`, else `1/(1−rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

pub fn dropout(t: &Tensor, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(t.clone());
    }
    let mask = dropout_mask(t.len(), rate, rng)?;
    let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Graph version of [`dropout`]; the mask is a constant input.
pub fn dropout_var(g: &mut Graph, x: Var, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let mask = dropout_mask(g.value(x).len(), rate, rng)?;
    let m = g.input(Tensor::new(shape, mask)?);
    g.mul(x, m)
}
