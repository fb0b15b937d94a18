use crate::error::{Error, Result};

/// Dense row-major f64 array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "extents must be positive, got {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent; a 1-D tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            self.shape[0]
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Shift-stable `log(sum(exp(xs)))`. Returns `-inf` iff every entry is `-inf`.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::contract("logsumexp of an empty slice"));
    }
    if xs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("logsumexp input contains NaN or +inf".into()));
    }
    Ok(lse(xs))
}

/// Unchecked variant for hot loops; inputs must be NaN-free and non-empty.
#[inline]
pub(crate) fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
pub(crate) fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Writes the log-softmax of `row` into `out`.
pub(crate) fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let z = lse(row);
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - z;
    }
}

/// Softmax over one axis of `t`.
pub fn softmax_rows(t: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = t.shape();
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = t.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = data[base + k * inner];
            }
            let m = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - m).exp();
                s += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                data[base + k * inner] = b / s;
            }
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out (m,n) = x (m,k) · wᵀ` with `w` stored as (n,k), overwriting `out`.
pub(crate) fn matmul_xwt(x: &[f64], w: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    // SAFETY: slice lengths checked above; strides describe row-major (m,k), transposed (n,k), (m,n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            x.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `gx (m,k) += g (m,n) · w (n,k)`.
pub(crate) fn matmul_acc_gw(g: &[f64], w: &[f64], gx: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(gx.len(), m * k);
    // SAFETY: as above; all three operands are plain row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            g.as_ptr(),
            n as isize,
            1,
            w.as_ptr(),
            k as isize,
            1,
            1.0,
            gx.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `gw (n,k) += gᵀ (n,m) · x (m,k)`.
pub(crate) fn matmul_acc_gtx(g: &[f64], x: &[f64], gw: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(gw.len(), n * k);
    // SAFETY: g is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            k,
            1.0,
            g.as_ptr(),
            1,
            n as isize,
            x.as_ptr(),
            k as isize,
            1,
            1.0,
            gw.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_examples() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, 1.5]).unwrap(), 1.5);
        let big = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(logsumexp(&[]).is_err());
        assert!(logsumexp(&[f64::NAN]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let s = softmax_rows(&t, 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = Tensor::matrix(2, 3, vec![0.1, -2.0, 3.0, 4.0, 4.0, -1.0]).unwrap();
        let b = a.map(|v| v + 17.25);
        let sa = softmax_rows(&a, 1).unwrap();
        let sb = softmax_rows(&b, 1).unwrap();
        for (x, y) in sa.data().iter().zip(sb.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        // axis 0 sums down columns
        let sc = softmax_rows(&a, 0).unwrap();
        for c in 0..3 {
            let s: f64 = (0..2).map(|r| sc.data()[r * 3 + c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let t = Tensor::new(vec![2, 3, 4], vec![0.0; 24]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 12));
    }

    #[test]
    fn matmul_helpers_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let x: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; m * n];
        matmul_xwt(&x, &w, &mut out, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let e: f64 = (0..k).map(|p| x[i * k + p] * w[j * k + p]).sum();
                assert!((out[i * n + j] - e).abs() < 1e-12);
            }
        }
        let g: Vec<f64> = (0..m * n).map(|i| i as f64 * 0.01 - 0.1).collect();
        let mut gx = vec![1.0; m * k];
        matmul_acc_gw(&g, &w, &mut gx, m, k, n);
        for i in 0..m {
            for p in 0..k {
                let e: f64 = 1.0 + (0..n).map(|j| g[i * n + j] * w[j * k + p]).sum::<f64>();
                assert!((gx[i * k + p] - e).abs() < 1e-12);
            }
        }
        let mut gw = vec![0.0; n * k];
        matmul_acc_gtx(&g, &x, &mut gw, m, k, n);
        for j in 0..n {
            for p in 0..k {
                let e: f64 = (0..m).map(|i| g[i * n + j] * x[i * k + p]).sum();
                assert!((gw[j * k + p] - e).abs() < 1e-12);
            }
        }
    }
}
