//! Reverse-mode differentiation over an explicit recorded graph.
//!
//! Every operation appends a node holding its forward value and the indices of
//! its parents, so nodes are topologically ordered by construction. `backward`
//! walks the node list once in reverse.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{
    log_softmax_into, matmul_acc_gtx, matmul_acc_gw, matmul_xwt, sigmoid,
};
use crate::numerics::{ParamStore, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// An operation whose forward value is computed by its author and whose
/// backward rule is supplied here. Used for the fused kernels (LSTM cell,
/// CTC, monotonic attention, batch norm, pooling).
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one optional adjoint per input, shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param(String),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Rows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SumAll(Var),
    LogSoftmax(Var),
    PickSum { x: Var, picks: Vec<usize>, scale: f64 },
    MulScalar { x: Var, s: Var },
    AddScalar { x: Var, s: Var },
    NormDot { x: Var, v: Var },
    TileAdd { x: Var, y: Var },
    WeightedSumTime { beta: Var, h: Var },
    Gather { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
}

/// Append-only operation record.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    params: Vec<(usize, String)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints[v.0].as_ref()
    }

    /// `(name, grad)` for every parameter leaf that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(i, n)| self.adjoints[*i].as_ref().map(|g| (n.as_str(), g)))
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.push_arc(op, Arc::new(value))
    }

    fn push_arc(&mut self, op: Op, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; receives an adjoint but is not a parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.input(Tensor::scalar(x))
    }

    /// Leaf bound to a named parameter of `store`. The value is shared, not copied.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let p = store.get(name)?;
        Ok(self.push_arc(Op::Param(name.to_string()), Arc::clone(&p.value)))
    }

    /// `x (m,k) · wᵀ + b` with `w` shaped (n,k) and `b` shaped (n).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.shape().len() != 2 {
            return Err(Error::shape(format!("linear weight must be 2-D, got {:?}", wv.shape())));
        }
        let (m, k) = (xv.rows(), xv.cols());
        let n = wv.shape()[0];
        if wv.shape()[1] != k {
            return Err(Error::shape(format!(
                "linear: input has {k} columns, weight is {:?}",
                wv.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_xwt(xv.data(), wv.data(), &mut out, m, k, n);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(Error::shape(format!("linear bias has {} entries, want {n}", bv.len())));
            }
            for row in out.chunks_mut(n) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::Linear { x, w, b }, t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "add")?;
        let t = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "sub")?;
        let t = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "mul")?;
        let t = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), t)
    }

    /// Rows `[start, start+count)` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + count > xv.rows() || count == 0 {
            return Err(Error::shape(format!(
                "rows {start}..{} of a {}-row matrix",
                start + count,
                xv.rows()
            )));
        }
        let t = Tensor::matrix(count, c, xv.data()[start * c..(start + count) * c].to_vec())?;
        Ok(self.push(Op::Rows { x, start }, t))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::shape("concat_rows: column count differs"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::matrix(rows, c, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), t))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::shape("concat_cols: row count differs"));
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for r in 0..m {
                data[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::matrix(m, total, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, c) = (xv.rows(), xv.cols());
        if start + len > c || len == 0 {
            return Err(Error::shape(format!("columns {start}..{} of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        let t = Tensor::matrix(m, len, data)?;
        Ok(self.push(Op::SliceCols { x, start }, t))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_finite() {
            return Err(Error::NonFinite("log_softmax input".into()));
        }
        let c = av.cols();
        let mut out = vec![0.0; av.len()];
        for (src, dst) in av.data().chunks(c).zip(out.chunks_mut(c)) {
            log_softmax_into(src, dst);
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(Op::LogSoftmax(a), t))
    }

    /// `scale · Σ x[flat index]` over `picks`.
    pub fn pick_sum(&mut self, x: Var, picks: Vec<usize>, scale: f64) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = picks.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape(format!("pick index {bad} out of {}", xv.len())));
        }
        let s: f64 = picks.iter().map(|&i| xv.data()[i]).sum::<f64>() * scale;
        Ok(self.push(Op::PickSum { x, picks, scale }, Tensor::scalar(s)))
    }

    /// Multiplies every entry of `x` by the single-entry tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar: factor must have one entry"));
        }
        let sv = self.value(s).item();
        let t = self.value(x).map(|v| v * sv);
        Ok(self.push(Op::MulScalar { x, s }, t))
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("add_scalar: shift must have one entry"));
        }
        let sv = self.value(s).item();
        let t = self.value(x).map(|v| v + sv);
        Ok(self.push(Op::AddScalar { x, s }, t))
    }

    /// Row-wise `x_n · v / ‖v‖`, shaped (N, 1).
    pub fn norm_dot(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        let a = vv.len();
        if xv.cols() != a {
            return Err(Error::shape(format!("norm_dot: {} columns vs vector of {a}", xv.cols())));
        }
        let norm = vv.sq_norm().sqrt();
        if norm == 0.0 {
            return Err(Error::contract("energy vector has zero norm"));
        }
        let out: Vec<f64> = xv
            .data()
            .chunks(a)
            .map(|row| row.iter().zip(vv.data()).map(|(p, q)| p * q).sum::<f64>() / norm)
            .collect();
        let t = Tensor::matrix(xv.rows(), 1, out)?;
        Ok(self.push(Op::NormDot { x, v }, t))
    }

    /// `x` is (T·B, A) in time-major order, `y` is (B, A); adds `y[b]` to every row of batch entry `b`.
    pub fn tile_add(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let (b, a) = (yv.rows(), yv.cols());
        if xv.cols() != a || xv.rows() % b != 0 {
            return Err(Error::shape(format!(
                "tile_add: {:?} with {:?}",
                xv.shape(),
                yv.shape()
            )));
        }
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(a).enumerate() {
            let src = &yv.data()[(r % b) * a..(r % b + 1) * a];
            for (o, s) in row.iter_mut().zip(src) {
                *o += s;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(Op::TileAdd { x, y }, t))
    }

    /// `c[b] = Σ_t beta[t·B+b] · h[t·B+b]`, where `beta` has one entry per row of `h`.
    pub fn weighted_sum_time(&mut self, beta: Var, h: Var, batch: usize) -> Result<Var> {
        let (bv, hv) = (self.value(beta), self.value(h));
        if bv.len() != hv.rows() || hv.rows() % batch != 0 {
            return Err(Error::shape("weighted_sum_time: weight/frame count mismatch"));
        }
        let d = hv.cols();
        let mut out = vec![0.0; batch * d];
        for (r, (&w, row)) in bv.data().iter().zip(hv.data().chunks(d)).enumerate() {
            let dst = &mut out[(r % batch) * d..(r % batch + 1) * d];
            for (o, x) in dst.iter_mut().zip(row) {
                *o += w * x;
            }
        }
        let t = Tensor::matrix(batch, d, out)?;
        Ok(self.push(Op::WeightedSumTime { beta, h }, t))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let e = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            if i >= tv.rows() {
                return Err(Error::contract(format!("token id {i} outside table of {}", tv.rows())));
            }
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::matrix(ids.len(), e, data)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            t,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), t))
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            value,
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        if !rv.is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", rv.item())));
        }
        let n = root.0 + 1;
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::filled(rv.shape(), 1.0));
        let mut params = Vec::new();

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if let Op::Param(name) = &node.op {
                params.push((i, name.clone()));
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj, params })
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.shape()[0]);
                matmul_acc_gw(gd, wv.data(), acc(adj, *x, xv), m, k, n);
                matmul_acc_gtx(gd, xv.data(), acc(adj, *w, wv), m, k, n);
                if let Some(b) = b {
                    let gb = acc(adj, *b, self.value(*b));
                    for row in gd.chunks(n) {
                        for (a, r) in gb.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(adj, *a, self.value(*a)), gd, 1.0);
                add_into(acc(adj, *b, self.value(*b)), gd, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc(adj, *a, self.value(*a)), gd, 1.0);
                add_into(acc(adj, *b, self.value(*b)), gd, -1.0);
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data().to_vec();
                let av = self.value(*a).data().to_vec();
                for ((d, gg), o) in acc(adj, *a, self.value(*a)).iter_mut().zip(gd).zip(&bv) {
                    *d += gg * o;
                }
                for ((d, gg), o) in acc(adj, *b, self.value(*b)).iter_mut().zip(gd).zip(&av) {
                    *d += gg * o;
                }
            }
            Op::Scale(a, c) => add_into(acc(adj, *a, self.value(*a)), gd, *c),
            Op::Sigmoid(a) => {
                for ((d, gg), s) in acc(adj, *a, self.value(*a)).iter_mut().zip(gd).zip(y.data()) {
                    *d += gg * s * (1.0 - s);
                }
            }
            Op::Tanh(a) => {
                for ((d, gg), t) in acc(adj, *a, self.value(*a)).iter_mut().zip(gd).zip(y.data()) {
                    *d += gg * (1.0 - t * t);
                }
            }
            Op::Exp(a) => {
                for ((d, gg), e) in acc(adj, *a, self.value(*a)).iter_mut().zip(gd).zip(y.data()) {
                    *d += gg * e;
                }
            }
            Op::Rows { x, start } => {
                let c = y.cols();
                let gx = acc(adj, *x, self.value(*x));
                add_into(&mut gx[start * c..start * c + gd.len()], gd, 1.0);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    add_into(acc(adj, *p, self.value(*p)), &gd[off..off + len], 1.0);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (y.rows(), y.cols());
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let gp = acc(adj, *p, self.value(*p));
                    for r in 0..m {
                        add_into(
                            &mut gp[r * w..(r + 1) * w],
                            &gd[r * total + off..r * total + off + w],
                            1.0,
                        );
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (m, c, len) = (y.rows(), xv.cols(), y.cols());
                let gx = acc(adj, *x, xv);
                for r in 0..m {
                    add_into(
                        &mut gx[r * c + start..r * c + start + len],
                        &gd[r * len..(r + 1) * len],
                        1.0,
                    );
                }
            }
            Op::SumAll(a) => {
                let g0 = gd[0];
                acc(adj, *a, self.value(*a)).iter_mut().for_each(|d| *d += g0);
            }
            Op::LogSoftmax(a) => {
                let c = y.cols();
                let gx = acc(adj, *a, self.value(*a));
                for ((dst, grow), yrow) in gx.chunks_mut(c).zip(gd.chunks(c)).zip(y.data().chunks(c)) {
                    let s: f64 = grow.iter().sum();
                    for ((d, gg), l) in dst.iter_mut().zip(grow).zip(yrow) {
                        *d += gg - l.exp() * s;
                    }
                }
            }
            Op::PickSum { x, picks, scale } => {
                let gx = acc(adj, *x, self.value(*x));
                for &p in picks {
                    gx[p] += scale * gd[0];
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).item();
                let xv = self.value(*x).data().to_vec();
                add_into(acc(adj, *x, self.value(*x)), gd, sv);
                let gs: f64 = gd.iter().zip(&xv).map(|(a, b)| a * b).sum();
                acc(adj, *s, self.value(*s))[0] += gs;
            }
            Op::AddScalar { x, s } => {
                add_into(acc(adj, *x, self.value(*x)), gd, 1.0);
                acc(adj, *s, self.value(*s))[0] += gd.iter().sum::<f64>();
            }
            Op::NormDot { x, v } => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                let a = vv.len();
                let norm = vv.sq_norm().sqrt();
                let u: Vec<f64> = vv.data().iter().map(|q| q / norm).collect();
                {
                    let gx = acc(adj, *x, xv);
                    for (row, gg) in gx.chunks_mut(a).zip(gd) {
                        for (d, uu) in row.iter_mut().zip(&u) {
                            *d += gg * uu;
                        }
                    }
                }
                let mut gv = vec![0.0; a];
                for ((row, gg), yy) in xv.data().chunks(a).zip(gd).zip(y.data()) {
                    for ((d, xx), uu) in gv.iter_mut().zip(row).zip(&u) {
                        *d += gg * (xx - yy * uu) / norm;
                    }
                }
                add_into(acc(adj, *v, vv), &gv, 1.0);
            }
            Op::TileAdd { x, y: yv } => {
                add_into(acc(adj, *x, self.value(*x)), gd, 1.0);
                let ys = self.value(*yv);
                let (b, a) = (ys.rows(), ys.cols());
                let gy = acc(adj, *yv, ys);
                for (r, row) in gd.chunks(a).enumerate() {
                    add_into(&mut gy[(r % b) * a..(r % b + 1) * a], row, 1.0);
                }
            }
            Op::WeightedSumTime { beta, h } => {
                let (bv, hv) = (self.value(*beta), self.value(*h));
                let batch = y.rows();
                let d = hv.cols();
                let mut gb = vec![0.0; bv.len()];
                for (r, row) in hv.data().chunks(d).enumerate() {
                    let gr = &gd[(r % batch) * d..(r % batch + 1) * d];
                    gb[r] = gr.iter().zip(row).map(|(a, b)| a * b).sum();
                }
                let betas = bv.data().to_vec();
                {
                    let gh = acc(adj, *h, hv);
                    for (r, row) in gh.chunks_mut(d).enumerate() {
                        let gr = &gd[(r % batch) * d..(r % batch + 1) * d];
                        add_into(row, gr, betas[r]);
                    }
                }
                add_into(acc(adj, *beta, bv), &gb, 1.0);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let e = tv.cols();
                let gt = acc(adj, *table, tv);
                for (k, &i) in ids.iter().enumerate() {
                    add_into(&mut gt[i * e..(i + 1) * e], &gd[k * e..(k + 1) * e], 1.0);
                }
            }
            Op::Reshape(x) => add_into(acc(adj, *x, self.value(*x)), gd, 1.0),
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&ins, y, g);
                if grads.len() != inputs.len() {
                    return Err(Error::contract(format!(
                        "{} returned {} adjoints for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&v, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        add_into(acc(adj, v, self.value(v)), gi.data(), 1.0);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Mutable adjoint buffer for `v`, zero-initialised on first touch.
fn acc<'a>(adj: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut [f64] {
    adj[v.0]
        .get_or_insert_with(|| Tensor::zeros(like.shape()))
        .data_mut()
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}
