//! Connectionist temporal classification: loss, exact gradient, greedy
//! decoding and a brute-force reference.
//!
//! Rows are per-frame log distributions over `V` labels plus the blank, which
//! always sits at the last index `V`.

use crate::error::{Error, Result};
use crate::numerics::tensor::{lse, lse2};
use crate::numerics::{CustomOp, Graph, Tensor, Var};

/// Removes consecutive duplicates, then blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Fewest frames any alignment of `target` needs: one per label plus a blank
/// between each pair of equal neighbours.
pub fn min_alignment_len(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Frame `t` of one sequence inside a (possibly batched, time-major) row buffer.
#[derive(Clone, Copy)]
struct Lattice<'a> {
    data: &'a [f64],
    offset: usize,
    stride: usize,
    frames: usize,
}

impl Lattice<'_> {
    #[inline]
    fn at(&self, t: usize, c: usize) -> f64 {
        self.data[self.offset + t * self.stride + c]
    }

    #[inline]
    fn index(&self, t: usize, c: usize) -> usize {
        self.offset + t * self.stride + c
    }
}

/// Log-domain forward table over the blank-interleaved target.
struct ForwardTable {
    ext: Vec<usize>,
    alpha: Vec<f64>,
    loss: f64,
}

fn expand(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

#[inline]
fn skip_allowed(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn forward(lat: Lattice<'_>, target: &[usize], blank: usize) -> Result<ForwardTable> {
    let needed = min_alignment_len(target);
    if lat.frames < needed || lat.frames == 0 {
        return Err(Error::NoFeasibleAlignment {
            frames: lat.frames,
            needed: needed.max(1),
        });
    }
    let ext = expand(target, blank);
    let s_len = ext.len();
    let t_len = lat.frames;
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = lat.at(0, blank);
    if s_len > 1 {
        alpha[1] = lat.at(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if skip_allowed(&ext, s, blank) {
                acc = lse2(acc, prev[s - 2]);
            }
            cur[s] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + lat.at(t, ext[s])
            };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let total = if s_len > 1 {
        lse2(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if total.is_nan() {
        return Err(Error::NonFinite("CTC forward produced NaN".into()));
    }
    Ok(ForwardTable {
        ext,
        alpha,
        loss: -total,
    })
}

/// Reverse-mode sweep through the forward recursion: accumulates
/// `upstream · ∂loss/∂log_probs` into `grad` (same indexing as the lattice).
fn backward(lat: Lattice<'_>, table: &ForwardTable, blank: usize, upstream: f64, grad: &mut [f64]) {
    let ext = &table.ext;
    let s_len = ext.len();
    let t_len = lat.frames;
    let alpha = &table.alpha;
    let total = -table.loss;
    if total == f64::NEG_INFINITY {
        return;
    }
    let mut adj = vec![0.0; t_len * s_len];
    let base = (t_len - 1) * s_len;
    adj[base + s_len - 1] = -upstream * (alpha[base + s_len - 1] - total).exp();
    if s_len > 1 {
        adj[base + s_len - 2] = -upstream * (alpha[base + s_len - 2] - total).exp();
    }
    for t in (1..t_len).rev() {
        for s in 0..s_len {
            let a = adj[t * s_len + s];
            if a == 0.0 {
                continue;
            }
            let y = lat.at(t, ext[s]);
            grad[lat.index(t, ext[s])] += a;
            // alpha_t(s) = y + lse(preds); d/d pred = exp(alpha_{t-1}(p) − (alpha_t(s) − y))
            let z = alpha[t * s_len + s] - y;
            let prev = (t - 1) * s_len;
            adj[prev + s] += a * (alpha[prev + s] - z).exp();
            if s >= 1 {
                adj[prev + s - 1] += a * (alpha[prev + s - 1] - z).exp();
            }
            if skip_allowed(ext, s, blank) {
                adj[prev + s - 2] += a * (alpha[prev + s - 2] - z).exp();
            }
        }
    }
    for s in 0..s_len.min(2) {
        let a = adj[s];
        if a != 0.0 {
            grad[lat.index(0, ext[s])] += a;
        }
    }
}

fn check_rows(log_probs: &Tensor, target: &[usize]) -> Result<usize> {
    let classes = log_probs.cols();
    if classes < 2 {
        return Err(Error::shape("CTC needs at least one label plus the blank"));
    }
    let blank = classes - 1;
    if let Some(&bad) = target.iter().find(|&&l| l >= blank) {
        return Err(Error::contract(format!("target label {bad} outside [0, {blank})")));
    }
    if log_probs.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("CTC input contains NaN".into()));
    }
    Ok(blank)
}

/// `−log Σ_paths Π_t P(path_t)` over every path collapsing to `target`, with
/// its gradient with respect to `log_probs` (`(T, V+1)`).
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<(f64, Tensor)> {
    let blank = check_rows(log_probs, target)?;
    let lat = Lattice {
        data: log_probs.data(),
        offset: 0,
        stride: log_probs.cols(),
        frames: log_probs.rows(),
    };
    let table = forward(lat, target, blank)?;
    let mut grad = Tensor::zeros(log_probs.shape());
    backward(lat, &table, blank, 1.0, grad.data_mut());
    Ok((table.loss, grad))
}

/// Reference loss by enumerating all `(V+1)^T` paths. Returns `+inf` when no
/// path collapses to `target`.
pub fn ctc_brute_force(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    let blank = check_rows(log_probs, target)?;
    let (t_len, classes) = (log_probs.rows(), log_probs.cols());
    let count = (classes as f64).powi(t_len as i32);
    if count > 1e7 {
        return Err(Error::contract(format!("{count} paths exceed the enumeration limit")));
    }
    let mut path = vec![0usize; t_len];
    let mut hits = Vec::new();
    loop {
        if collapse(&path, blank) == target {
            hits.push(path.iter().enumerate().map(|(t, &c)| log_probs.row(t)[c]).sum::<f64>());
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == t_len {
                return Ok(if hits.is_empty() { f64::INFINITY } else { -lse(&hits) });
            }
            path[k] += 1;
            if path[k] < classes {
                break;
            }
            path[k] = 0;
            k += 1;
        }
    }
}

/// Per-frame argmax (lowest index on ties), then [`collapse`].
pub fn ctc_greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let classes = log_probs.cols();
    let path: Vec<usize> = (0..log_probs.rows())
        .map(|t| argmax(log_probs.row(t)))
        .collect();
    collapse(&path, classes - 1)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decode of sequence `b` in a time-major `(T·B, V+1)` matrix.
pub fn ctc_greedy_decode_batched(log_probs: &Tensor, batch: usize, b: usize, len: usize) -> Vec<usize> {
    let classes = log_probs.cols();
    let path: Vec<usize> = (0..len).map(|t| argmax(log_probs.row(t * batch + b))).collect();
    collapse(&path, classes - 1)
}

struct CtcOp {
    batch: usize,
    scale: f64,
    tables: Vec<Option<(ForwardTable, usize)>>,
}

impl CustomOp for CtcOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let lp = inputs[0];
        let classes = lp.cols();
        let mut g = Tensor::zeros(lp.shape());
        let upstream = grad.item() * self.scale;
        for (b, entry) in self.tables.iter().enumerate() {
            if let Some((table, frames)) = entry {
                let lat = Lattice {
                    data: lp.data(),
                    offset: b * classes,
                    stride: self.batch * classes,
                    frames: *frames,
                };
                backward(lat, table, classes - 1, upstream, g.data_mut());
            }
        }
        vec![Some(g)]
    }
}

/// Batched CTC loss in a graph: `scale · Σ_b loss_b`.
///
/// `log_probs` is time-major `(T·B, V+1)`; `targets[b] = None` leaves sequence
/// `b` out of the sum.
pub fn ctc_loss_var(
    g: &mut Graph,
    log_probs: Var,
    lengths: &[usize],
    targets: &[Option<&[usize]>],
    scale: f64,
) -> Result<Var> {
    let lp = g.value(log_probs);
    let batch = lengths.len();
    if targets.len() != batch || lp.rows() % batch != 0 {
        return Err(Error::shape("ctc_loss_var: batch size mismatch"));
    }
    let classes = lp.cols();
    let blank = classes - 1;
    let mut total = 0.0;
    let mut tables = Vec::with_capacity(batch);
    for (b, (tgt, &len)) in targets.iter().zip(lengths).enumerate() {
        let Some(tgt) = tgt else {
            tables.push(None);
            continue;
        };
        if let Some(&bad) = tgt.iter().find(|&&l| l >= blank) {
            return Err(Error::contract(format!("target label {bad} outside [0, {blank})")));
        }
        let lat = Lattice {
            data: lp.data(),
            offset: b * classes,
            stride: batch * classes,
            frames: len,
        };
        let table = forward(lat, tgt, blank)?;
        total += table.loss;
        tables.push(Some((table, len)));
    }
    let value = Tensor::scalar(total * scale);
    Ok(g.custom(
        &[log_probs],
        value,
        Box::new(CtcOp {
            batch,
            scale,
            tables,
        }),
    ))
}
