//! Monotonic chunkwise attention (MoChA).
//!
//! Training uses the expected alignment: for output step `l`, with selection
//! probabilities `p_j` and the previous alignment `α'`,
//!
//! ```text
//! q_1 = α'_1,  q_j = (1 − p_{j−1})·q_{j−1} + α'_j,  α_j = p_j·q_j
//! ```
//!
//! and the chunk weights spread each `α_k` over the `w` frames ending at `k`
//! with a softmax of the chunk energies `u`. Inference scans forward from the
//! previous attend point and stops at the first frame with `p_j ≥ 0.5`.
//!
//! Energies: `e_j = g·(v/‖v‖)ᵀ tanh(W_s s + W_h h_j + b) + r` for selection,
//! `u_j = v_cᵀ tanh(W_cs s + W_ch h_j + b_c)` for the chunk.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::layers::{init_uniform, Mode};
use crate::numerics::tensor::{lse, matmul_xwt, sigmoid};
use crate::numerics::{CustomOp, Graph, ParamStore, Tensor, Var};

/// Probability threshold for a hard attend decision.
pub const ATTEND_THRESHOLD: f64 = 0.5;
/// Initial selection-energy offset `r`.
pub const INIT_OFFSET: f64 = -1.0;

fn check_probs(p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("selection probabilities must lie in [0, 1]"));
    }
    Ok(())
}

/// Expected alignment by the cumulative recurrence.
pub fn expected_alignment(p: &[f64], alpha_prev: &[f64]) -> Result<Vec<f64>> {
    if p.len() != alpha_prev.len() || p.is_empty() {
        return Err(Error::shape(format!(
            "expected_alignment: {} probabilities, {} previous weights",
            p.len(),
            alpha_prev.len()
        )));
    }
    check_probs(p)?;
    let mut alpha = vec![0.0; p.len()];
    align_forward(p, alpha_prev, 0, 1, p.len(), &mut alpha, &mut vec![0.0; p.len()]);
    Ok(alpha)
}

/// One-hot previous alignment used before the first output step.
pub fn initial_alignment(frames: usize) -> Vec<f64> {
    let mut a = vec![0.0; frames];
    if frames > 0 {
        a[0] = 1.0;
    }
    a
}

/// Strided kernel: sequence entries live at `off + t·stride`; writes `alpha` and the running `q`.
fn align_forward(p: &[f64], prev: &[f64], off: usize, stride: usize, frames: usize, alpha: &mut [f64], q: &mut [f64]) {
    let mut qj = 0.0;
    for t in 0..frames {
        let i = off + t * stride;
        qj = if t == 0 {
            prev[i]
        } else {
            (1.0 - p[i - stride]) * qj + prev[i]
        };
        q[i] = qj;
        alpha[i] = p[i] * qj;
    }
}

#[allow(clippy::too_many_arguments)]
fn align_backward(
    p: &[f64],
    q: &[f64],
    g_alpha: &[f64],
    off: usize,
    stride: usize,
    frames: usize,
    gp: &mut [f64],
    gprev: &mut [f64],
) {
    // gq_{j} = gα_j·p_j + gq_{j+1}·(1 − p_j)
    let mut gq_next = 0.0;
    for t in (0..frames).rev() {
        let i = off + t * stride;
        let mut gpi = g_alpha[i] * q[i];
        if t + 1 < frames {
            gpi -= gq_next * q[i];
        }
        let gq = g_alpha[i] * p[i] + if t + 1 < frames { gq_next * (1.0 - p[i]) } else { 0.0 };
        gp[i] += gpi;
        gprev[i] += gq;
        gq_next = gq;
    }
}

/// Chunk weights: `β_j = Σ_{k=j}^{min(j+w−1,T)} α_k · exp(u_j) / Σ_{m=max(1,k−w+1)}^{k} exp(u_m)`.
pub fn chunk_weights(alpha: &[f64], u: &[f64], w: usize) -> Result<Vec<f64>> {
    if w == 0 {
        return Err(Error::contract("chunk width must be ≥ 1"));
    }
    if alpha.len() != u.len() || alpha.is_empty() {
        return Err(Error::shape("chunk_weights: alignment and energy lengths differ"));
    }
    let mut beta = vec![0.0; alpha.len()];
    let mut lse_buf = vec![0.0; alpha.len()];
    chunk_forward(alpha, u, w, 0, 1, alpha.len(), &mut beta, &mut lse_buf);
    Ok(beta)
}

/// `log Σ exp(u_m)` over the window ending at `k`, for each `k`.
#[allow(clippy::too_many_arguments)]
fn chunk_forward(alpha: &[f64], u: &[f64], w: usize, off: usize, stride: usize, frames: usize, beta: &mut [f64], lse_out: &mut [f64]) {
    let mut win = Vec::with_capacity(w);
    for k in 0..frames {
        win.clear();
        let lo = (k + 1).saturating_sub(w);
        win.extend((lo..=k).map(|m| u[off + m * stride]));
        lse_out[off + k * stride] = lse(&win);
    }
    for j in 0..frames {
        let uj = u[off + j * stride];
        let hi = (j + w).min(frames);
        let mut s = 0.0;
        for k in j..hi {
            let i = off + k * stride;
            s += alpha[i] * (uj - lse_out[i]).exp();
        }
        beta[off + j * stride] = s;
    }
}

#[allow(clippy::too_many_arguments)]
fn chunk_backward(
    alpha: &[f64],
    u: &[f64],
    lse_k: &[f64],
    g_beta: &[f64],
    w: usize,
    off: usize,
    stride: usize,
    frames: usize,
    g_alpha: &mut [f64],
    g_u: &mut [f64],
) {
    for k in 0..frames {
        let ik = off + k * stride;
        let lo = (k + 1).saturating_sub(w);
        // softmax within window k: P_m = exp(u_m − lse_k)
        let mut dot = 0.0;
        for m in lo..=k {
            let im = off + m * stride;
            dot += (u[im] - lse_k[ik]).exp() * g_beta[im];
        }
        g_alpha[ik] += dot;
        for m in lo..=k {
            let im = off + m * stride;
            let pm = (u[im] - lse_k[ik]).exp();
            g_u[im] += alpha[ik] * pm * (g_beta[im] - dot);
        }
    }
}

/// `c = Σ_j β_j h_j` for `h` shaped `(T, H)`.
pub fn mocha_context(beta: &[f64], h: &Tensor) -> Result<Vec<f64>> {
    if beta.len() != h.rows() {
        return Err(Error::shape("mocha_context: weight count differs from frame count"));
    }
    let d = h.cols();
    let mut c = vec![0.0; d];
    for (b, row) in beta.iter().zip(h.data().chunks(d)) {
        for (ci, x) in c.iter_mut().zip(row) {
            *ci += b * x;
        }
    }
    Ok(c)
}

/// Outcome of a hard monotonic scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HardAttend {
    /// Attend point (0-based frame index).
    Frame(usize),
    /// No frame from the scan start to the end of input passed the threshold.
    Exhausted,
}

/// Scans frames `start, start+1, …, frames−1`, asking `prob` for each, and
/// stops at the first with probability ≥ 0.5. Frames after the chosen one are
/// never queried.
pub fn mocha_decode_step(start: usize, frames: usize, mut prob: impl FnMut(usize) -> Result<f64>) -> Result<HardAttend> {
    for j in start..frames {
        if prob(j)? >= ATTEND_THRESHOLD {
            return Ok(HardAttend::Frame(j));
        }
    }
    Ok(HardAttend::Exhausted)
}

struct AlignOp {
    batch: usize,
    q: Vec<f64>,
}

impl CustomOp for AlignOp {
    fn name(&self) -> &'static str {
        "expected_alignment"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (p, prev) = (inputs[0], inputs[1]);
        let frames = p.len() / self.batch;
        let mut gp = Tensor::zeros(p.shape());
        let mut gprev = Tensor::zeros(prev.shape());
        for b in 0..self.batch {
            align_backward(
                p.data(),
                &self.q,
                grad.data(),
                b,
                self.batch,
                frames,
                gp.data_mut(),
                gprev.data_mut(),
            );
        }
        vec![Some(gp), Some(gprev)]
    }
}

/// Graph version of [`expected_alignment`] over time-major `(T·B, 1)` columns.
pub fn expected_alignment_var(g: &mut Graph, p: Var, alpha_prev: Var, batch: usize) -> Result<Var> {
    let (pv, av) = (g.value(p), g.value(alpha_prev));
    if pv.len() != av.len() || pv.len() % batch != 0 {
        return Err(Error::shape("expected_alignment_var: shape mismatch"));
    }
    check_probs(pv.data())?;
    let frames = pv.len() / batch;
    let mut alpha = vec![0.0; pv.len()];
    let mut q = vec![0.0; pv.len()];
    for b in 0..batch {
        align_forward(pv.data(), av.data(), b, batch, frames, &mut alpha, &mut q);
    }
    let value = Tensor::new(pv.shape().to_vec(), alpha)?;
    Ok(g.custom(&[p, alpha_prev], value, Box::new(AlignOp { batch, q })))
}

struct ChunkOp {
    batch: usize,
    width: usize,
    lse: Vec<f64>,
}

impl CustomOp for ChunkOp {
    fn name(&self) -> &'static str {
        "chunk_weights"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (alpha, u) = (inputs[0], inputs[1]);
        let frames = alpha.len() / self.batch;
        let mut ga = Tensor::zeros(alpha.shape());
        let mut gu = Tensor::zeros(u.shape());
        for b in 0..self.batch {
            chunk_backward(
                alpha.data(),
                u.data(),
                &self.lse,
                grad.data(),
                self.width,
                b,
                self.batch,
                frames,
                ga.data_mut(),
                gu.data_mut(),
            );
        }
        vec![Some(ga), Some(gu)]
    }
}

/// Graph version of [`chunk_weights`] over time-major `(T·B, 1)` columns.
pub fn chunk_weights_var(g: &mut Graph, alpha: Var, u: Var, width: usize, batch: usize) -> Result<Var> {
    if width == 0 {
        return Err(Error::contract("chunk width must be ≥ 1"));
    }
    let (av, uv) = (g.value(alpha), g.value(u));
    if av.len() != uv.len() || av.len() % batch != 0 {
        return Err(Error::shape("chunk_weights_var: shape mismatch"));
    }
    let frames = av.len() / batch;
    let mut beta = vec![0.0; av.len()];
    let mut lse_k = vec![0.0; av.len()];
    for b in 0..batch {
        chunk_forward(av.data(), uv.data(), width, b, batch, frames, &mut beta, &mut lse_k);
    }
    let value = Tensor::new(av.shape().to_vec(), beta)?;
    Ok(g.custom(
        &[alpha, u],
        value,
        Box::new(ChunkOp {
            batch,
            width,
            lse: lse_k,
        }),
    ))
}

/// Parameter layout and wiring of one MoChA block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MochaAttention {
    pub prefix: String,
    pub state_dim: usize,
    pub enc_dim: usize,
    pub att_dim: usize,
    pub chunk_width: usize,
}

/// Per-utterance projections of the encoder frames, computed once.
#[derive(Clone, Debug)]
pub struct MemoryKeys {
    pub mono: Var,
    pub chunk: Var,
}

/// Encoder memory for hard-attention decoding of one utterance.
#[derive(Clone, Debug)]
pub struct EncoderMemory {
    pub frames: Tensor,
    mono_keys: Tensor,
    chunk_keys: Tensor,
}

impl EncoderMemory {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

impl MochaAttention {
    pub fn new(prefix: impl Into<String>, state_dim: usize, enc_dim: usize, att_dim: usize, chunk_width: usize) -> Self {
        MochaAttention {
            prefix: prefix.into(),
            state_dim,
            enc_dim,
            att_dim,
            chunk_width,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let (a, s, h) = (self.att_dim, self.state_dim, self.enc_dim);
        store.insert(self.name("mono.w_s"), init_uniform(rng, &[a, s]), true)?;
        store.insert(self.name("mono.w_h"), init_uniform(rng, &[a, h]), true)?;
        store.insert(self.name("mono.b"), Tensor::zeros(&[a]), true)?;
        store.insert(self.name("mono.v"), init_uniform(rng, &[a]), true)?;
        store.insert(self.name("mono.g"), Tensor::scalar(1.0 / (a as f64).sqrt()), true)?;
        store.insert(self.name("mono.r"), Tensor::scalar(INIT_OFFSET), true)?;
        store.insert(self.name("chunk.w_s"), init_uniform(rng, &[a, s]), true)?;
        store.insert(self.name("chunk.w_h"), init_uniform(rng, &[a, h]), true)?;
        store.insert(self.name("chunk.b"), Tensor::zeros(&[a]), true)?;
        store.insert(self.name("chunk.v"), init_uniform(rng, &[1, a]), true)
    }

    /// `W_h h + b` for both energy functions; `h` is `(T·B, H)`.
    pub fn keys(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<MemoryKeys> {
        let w = g.param(store, &self.name("mono.w_h"))?;
        let b = g.param(store, &self.name("mono.b"))?;
        let mono = g.linear(h, w, Some(b))?;
        let w = g.param(store, &self.name("chunk.w_h"))?;
        let b = g.param(store, &self.name("chunk.b"))?;
        let chunk = g.linear(h, w, Some(b))?;
        Ok(MemoryKeys { mono, chunk })
    }

    /// Selection energies `e` as a `(T·B, 1)` column.
    pub fn mono_energy(&self, g: &mut Graph, store: &ParamStore, keys: &MemoryKeys, s_prev: Var) -> Result<Var> {
        let ws = g.param(store, &self.name("mono.w_s"))?;
        let q = g.linear(s_prev, ws, None)?;
        let pre = g.tile_add(keys.mono, q)?;
        let act = g.tanh(pre);
        let v = g.param(store, &self.name("mono.v"))?;
        let dot = g.norm_dot(act, v)?;
        let gain = g.param(store, &self.name("mono.g"))?;
        let scaled = g.mul_scalar(dot, gain)?;
        let r = g.param(store, &self.name("mono.r"))?;
        g.add_scalar(scaled, r)
    }

    /// Chunk energies `u` as a `(T·B, 1)` column.
    pub fn chunk_energy(&self, g: &mut Graph, store: &ParamStore, keys: &MemoryKeys, s_prev: Var) -> Result<Var> {
        let ws = g.param(store, &self.name("chunk.w_s"))?;
        let q = g.linear(s_prev, ws, None)?;
        let pre = g.tile_add(keys.chunk, q)?;
        let act = g.tanh(pre);
        let v = g.param(store, &self.name("chunk.v"))?;
        g.linear(act, v, None)
    }

    /// One soft (expected-alignment) attention step.
    ///
    /// `mask` zeroes selection probabilities on padded frames; `noise`, when
    /// given, is added to the energies before the sigmoid. Returns the context
    /// `(B, H)` and the new alignment `(T·B, 1)`.
    #[allow(clippy::too_many_arguments)]
    pub fn soft_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        keys: &MemoryKeys,
        h: Var,
        s_prev: Var,
        alpha_prev: Var,
        mask: Var,
        noise: Option<Tensor>,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let mut e = self.mono_energy(g, store, keys, s_prev)?;
        if let Some(n) = noise {
            let nv = g.input(n);
            e = g.add(e, nv)?;
        }
        let p = g.sigmoid(e);
        let p = g.mul(p, mask)?;
        let alpha = expected_alignment_var(g, p, alpha_prev, batch)?;
        let u = self.chunk_energy(g, store, keys, s_prev)?;
        let beta = chunk_weights_var(g, alpha, u, self.chunk_width, batch)?;
        let ctx = g.weighted_sum_time(beta, h, batch)?;
        Ok((ctx, alpha))
    }

    /// Selection probabilities for one decoder state over `h` (`(T, H)`).
    pub fn monotonic_probs(&self, store: &ParamStore, s_prev: &[f64], h: &Tensor, mode: Mode, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mem = self.memory(store, h)?;
        let mut out = Vec::with_capacity(h.rows());
        let q = self.state_query(store, "mono", s_prev)?;
        for j in 0..h.rows() {
            let e = self.mono_energy_at(store, &mem, &q, j)?;
            let n: f64 = match mode {
                Mode::Train => rng.sample(StandardNormal),
                Mode::Infer => 0.0,
            };
            out.push(sigmoid(e + n));
        }
        Ok(out)
    }

    /// Precomputes key projections for hard decoding of a `(T, H)` encoder output.
    pub fn memory(&self, store: &ParamStore, h: &Tensor) -> Result<EncoderMemory> {
        if h.cols() != self.enc_dim {
            return Err(Error::shape(format!("attention memory dim {} ≠ {}", h.cols(), self.enc_dim)));
        }
        let project = |part: &str| -> Result<Tensor> {
            let w = store.value(&self.name(&format!("{part}.w_h")))?;
            let b = store.value(&self.name(&format!("{part}.b")))?;
            let (t, a) = (h.rows(), self.att_dim);
            let mut out = vec![0.0; t * a];
            matmul_xwt(h.data(), w.data(), &mut out, t, self.enc_dim, a);
            for row in out.chunks_mut(a) {
                row.iter_mut().zip(b.data()).for_each(|(o, bb)| *o += bb);
            }
            Tensor::matrix(t, a, out)
        };
        Ok(EncoderMemory {
            frames: h.clone(),
            mono_keys: project("mono")?,
            chunk_keys: project("chunk")?,
        })
    }

    fn state_query(&self, store: &ParamStore, part: &str, s_prev: &[f64]) -> Result<Vec<f64>> {
        if s_prev.len() != self.state_dim {
            return Err(Error::shape(format!("attention state dim {} ≠ {}", s_prev.len(), self.state_dim)));
        }
        let w = store.value(&self.name(&format!("{part}.w_s")))?;
        let mut q = vec![0.0; self.att_dim];
        matmul_xwt(s_prev, w.data(), &mut q, 1, self.state_dim, self.att_dim);
        Ok(q)
    }

    fn mono_energy_at(&self, store: &ParamStore, mem: &EncoderMemory, q: &[f64], j: usize) -> Result<f64> {
        let v = store.value(&self.name("mono.v"))?;
        let norm = v.sq_norm().sqrt();
        if norm == 0.0 {
            return Err(Error::contract("energy vector has zero norm"));
        }
        let g = store.value(&self.name("mono.g"))?.item();
        let r = store.value(&self.name("mono.r"))?.item();
        let dot: f64 = mem
            .mono_keys
            .row(j)
            .iter()
            .zip(q)
            .zip(v.data())
            .map(|((k, qq), vv)| (k + qq).tanh() * vv)
            .sum();
        Ok(g * dot / norm + r)
    }

    fn chunk_energy_at(&self, store: &ParamStore, mem: &EncoderMemory, qc: &[f64], m: usize) -> Result<f64> {
        let vc = store.value(&self.name("chunk.v"))?;
        Ok(mem
            .chunk_keys
            .row(m)
            .iter()
            .zip(qc)
            .zip(vc.data())
            .map(|((k, qq), vv)| (k + qq).tanh() * vv)
            .sum())
    }

    /// Expected-alignment step without a graph: returns the new alignment and the context.
    pub fn soft_step_plain(&self, store: &ParamStore, mem: &EncoderMemory, s_prev: &[f64], alpha_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let q = self.state_query(store, "mono", s_prev)?;
        let qc = self.state_query(store, "chunk", s_prev)?;
        let mut p = Vec::with_capacity(mem.len());
        let mut u = Vec::with_capacity(mem.len());
        for j in 0..mem.len() {
            p.push(sigmoid(self.mono_energy_at(store, mem, &q, j)?));
            u.push(self.chunk_energy_at(store, mem, &qc, j)?);
        }
        let alpha = expected_alignment(&p, alpha_prev)?;
        let beta = chunk_weights(&alpha, &u, self.chunk_width)?;
        let ctx = mocha_context(&beta, &mem.frames)?;
        Ok((alpha, ctx))
    }

    /// Hard monotonic attention for inference.
    ///
    /// Scans from `start`; on an attend at `j`, the context is the softmax of
    /// chunk energies over frames `[j−w+1, j]` applied to those frames. An
    /// exhausted scan yields a zero context.
    pub fn hard_step(&self, store: &ParamStore, mem: &EncoderMemory, s_prev: &[f64], start: usize) -> Result<(HardAttend, Vec<f64>)> {
        let q = self.state_query(store, "mono", s_prev)?;
        let decision = mocha_decode_step(start, mem.len(), |j| {
            Ok(sigmoid(self.mono_energy_at(store, mem, &q, j)?))
        })?;
        let d = self.enc_dim;
        let HardAttend::Frame(j) = decision else {
            return Ok((decision, vec![0.0; d]));
        };
        let qc = self.state_query(store, "chunk", s_prev)?;
        let lo = (j + 1).saturating_sub(self.chunk_width);
        let u = (lo..=j)
            .map(|m| self.chunk_energy_at(store, mem, &qc, m))
            .collect::<Result<Vec<f64>>>()?;
        let z = lse(&u);
        let mut ctx = vec![0.0; d];
        for (m, um) in (lo..=j).zip(&u) {
            let w = (um - z).exp();
            for (c, x) in ctx.iter_mut().zip(mem.frames.row(m)) {
                *c += w * x;
            }
        }
        Ok((decision, ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct O(T²) evaluation of the expected alignment.
    fn naive_alignment(p: &[f64], prev: &[f64]) -> Vec<f64> {
        (0..p.len())
            .map(|j| {
                let s: f64 = (0..=j)
                    .map(|k| prev[k] * (k..j).map(|m| 1.0 - p[m]).product::<f64>())
                    .sum();
                p[j] * s
            })
            .collect()
    }

    #[test]
    fn alignment_examples() {
        let prev = [0.2, 0.5, 0.3, 0.0];
        assert_eq!(expected_alignment(&[1.0; 4], &prev).unwrap(), prev.to_vec());
        assert!(expected_alignment(&[0.0; 4], &prev).unwrap().iter().all(|&a| a == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        let a = expected_alignment(&p, &initial_alignment(6)).unwrap();
        for (x, y) in a.iter().zip(naive_alignment(&p, &initial_alignment(6))) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(expected_alignment(&[1.5], &[1.0]).is_err());
    }

    #[test]
    fn chunk_examples() {
        let alpha = [0.1, 0.6, 0.2, 0.05];
        let u = [0.3, -1.0, 2.0, 0.5];
        assert_eq!(chunk_weights(&alpha, &u, 1).unwrap(), alpha.to_vec());
        let b = chunk_weights(&[0.0, 0.0, 1.0, 0.0], &[0.7; 4], 2).unwrap();
        assert!((b[1] - 0.5).abs() < 1e-15 && (b[2] - 0.5).abs() < 1e-15);
        assert_eq!(b[0] + b[3], 0.0);
        let b = chunk_weights(&alpha, &u, 3).unwrap();
        let (sa, sb): (f64, f64) = (alpha.iter().sum(), b.iter().sum());
        assert!((sa - sb).abs() < 1e-12);
        assert!(chunk_weights(&alpha, &u, 0).is_err());
    }

    #[test]
    fn context_examples() {
        let h = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(mocha_context(&[0.0, 1.0, 0.0], &h).unwrap(), vec![3.0, 4.0]);
        assert_eq!(mocha_context(&[0.0; 3], &h).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn decode_step_examples() {
        let p = [0.3, 0.7, 0.9];
        let mut seen = Vec::new();
        let r = mocha_decode_step(0, 3, |j| {
            seen.push(j);
            Ok(p[j])
        })
        .unwrap();
        assert_eq!(r, HardAttend::Frame(1));
        assert_eq!(seen, vec![0, 1]);
        assert_eq!(mocha_decode_step(0, 3, |_| Ok(0.2)).unwrap(), HardAttend::Exhausted);
        assert_eq!(mocha_decode_step(2, 3, |j| Ok(p[j])).unwrap(), HardAttend::Frame(2));
    }

    fn attention_store(seed: u64) -> (MochaAttention, ParamStore) {
        let att = MochaAttention::new("att", 3, 4, 5, 2);
        let mut s = ParamStore::new();
        att.init(&mut s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (att, s)
    }

    #[test]
    fn probs_saturate_and_are_reproducible() {
        let (att, mut s) = attention_store(1);
        let h = Tensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        s.set_value("att.mono.r", Tensor::scalar(50.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = att.monotonic_probs(&s, &[0.1, 0.2, 0.3], &h, Mode::Infer, &mut rng).unwrap();
        assert!(p.iter().all(|&x| x > 1.0 - 1e-15));

        for name in ["att.mono.w_s", "att.mono.w_h"] {
            let z = Tensor::zeros(s.value(name).unwrap().shape());
            s.set_value(name, z).unwrap();
        }
        s.set_value("att.mono.r", Tensor::scalar(0.0)).unwrap();
        let p = att.monotonic_probs(&s, &[0.1, 0.2, 0.3], &h, Mode::Infer, &mut rng).unwrap();
        assert!(p.iter().all(|&x| x == 0.5));

        let a = att.monotonic_probs(&s, &[0.0; 3], &h, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = att.monotonic_probs(&s, &[0.0; 3], &h, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|&x| x != 0.5));

        s.set_value("att.mono.v", Tensor::zeros(&[5])).unwrap();
        assert!(att.monotonic_probs(&s, &[0.0; 3], &h, Mode::Infer, &mut rng).is_err());
    }

    #[test]
    fn graph_ops_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (t, b) = (5, 2);
        let mut s = ParamStore::new();
        let rand_col = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            Tensor::matrix(t * b, 1, (0..t * b).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
        };
        s.insert("p_logit", rand_col(&mut rng, -2.0, 2.0), true).unwrap();
        s.insert("prev", rand_col(&mut rng, 0.0, 0.3), true).unwrap();
        s.insert("u", rand_col(&mut rng, -1.0, 1.0), true).unwrap();
        let weights = rand_col(&mut rng, -1.0, 1.0);
        let r = finite_diff_check(&s, None, |s, g| {
            let pl = g.param(s, "p_logit")?;
            let p = g.sigmoid(pl);
            let prev = g.param(s, "prev")?;
            let alpha = expected_alignment_var(g, p, prev, b)?;
            let u = g.param(s, "u")?;
            let beta = chunk_weights_var(g, alpha, u, 3, b)?;
            let w = g.input(weights.clone());
            let wb = g.mul(beta, w)?;
            Ok(g.sum_all(wb))
        })
        .unwrap();
        assert!(r.max_rel_error() < 1e-6, "{}", r.max_rel_error());
    }

    #[test]
    fn hard_step_context_uses_chunk_softmax() {
        let (att, mut s) = attention_store(3);
        s.set_value("att.mono.r", Tensor::scalar(50.0)).unwrap();
        let h = Tensor::matrix(4, 4, (0..16).map(|v| (v as f64 * 0.3).cos()).collect()).unwrap();
        let mem = att.memory(&s, &h).unwrap();
        let (d, ctx) = att.hard_step(&s, &mem, &[0.2, -0.1, 0.4], 2).unwrap();
        assert_eq!(d, HardAttend::Frame(2));
        // weights over frames 1 and 2 sum to one: ctx lies between the two rows
        for k in 0..4 {
            let (a, c) = (h.row(1)[k], h.row(2)[k]);
            assert!(ctx[k] >= a.min(c) - 1e-12 && ctx[k] <= a.max(c) + 1e-12);
        }
        s.set_value("att.mono.r", Tensor::scalar(-50.0)).unwrap();
        let (d, ctx) = att.hard_step(&s, &mem, &[0.2, -0.1, 0.4], 0).unwrap();
        assert_eq!(d, HardAttend::Exhausted);
        assert!(ctx.iter().all(|&c| c == 0.0));
    }
}
