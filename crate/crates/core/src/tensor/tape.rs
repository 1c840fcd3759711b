//! Wengert-list reverse-mode differentiation.
//!
//! Ops append nodes to the tape, so node order is already topological and
//! the backward pass is a single reverse sweep that visits each op exactly
//! once. Parents always precede children. A tape is single-threaded by
//! contract; parallelism happens across independent tapes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<(usize, Tensor<T>)> + Send>;

struct Node<T> {
    value: Tensor<T>,
    back: Option<BackFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    /// Persistent gradient accumulators for leaf nodes (parameter identity =
    /// leaf Var). Backward passes add into these, so two passes accumulate
    /// exactly twice one pass.
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, back: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Register a leaf (parameter or constant input). Leaves receive
    /// gradient accumulation; constants simply never get read back.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    /// Unused parameters have no entry, i.e. a zero gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Backward from a scalar node, seeded with 1.
    pub fn backward(&mut self, v: Var) -> Result<()> {
        if self.nodes[v.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[v.0].value.shape()
            )));
        }
        self.backward_seeded(v, Tensor::scalar(T::one()))
    }

    /// Backward from any node, seeded with an explicit cotangent.
    pub fn backward_seeded(&mut self, v: Var, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.nodes[v.0].value.shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match node shape {:?}",
                seed.shape(),
                self.nodes[v.0].value.shape()
            )));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        let mut local: Vec<Option<Tensor<T>>> = Vec::new();
        local.resize_with(v.0 + 1, || None);
        local[v.0] = Some(seed);
        for id in (0..=v.0).rev() {
            let Some(g) = local[id].take() else { continue };
            match &self.nodes[id].back {
                Some(back) => {
                    for (pid, contrib) in back(&g) {
                        accumulate(&mut local[pid], contrib);
                    }
                }
                None => {
                    // Leaf: fold into the persistent accumulator.
                    accumulate(&mut self.grads[id], g);
                }
            }
        }
        Ok(())
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        same_shape("add", &ta, &tb)?;
        let out = zip(&ta, &tb, |x, y| x + y);
        Ok(self.push(
            out,
            Some(Box::new(move |g| vec![(a.0, g.clone()), (b.0, g.clone())])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        same_shape("sub", &ta, &tb)?;
        let out = zip(&ta, &tb, |x, y| x - y);
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.0, g.clone()), (b.0, g.map(|x| -x))]
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        same_shape("mul", &ta, &tb)?;
        let out = zip(&ta, &tb, |x, y| x * y);
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.0, zip(g, &tb, |x, y| x * y)), (b.0, zip(g, &ta, |x, y| x * y))]
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Some(Box::new(move |g| vec![(a.0, g.map(|x| x * c))])))
    }

    /// Add a constant tensor (not a tape node) elementwise; used for masks.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let ta = self.value(a).clone();
        same_shape("add_const", &ta, c)?;
        let out = zip(&ta, c, |x, y| x + y);
        Ok(self.push(out, Some(Box::new(move |g| vec![(a.0, g.clone())]))))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a).clone();
        let out = ta.map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(
                    a.0,
                    zip(g, &ta, |gx, x| if x > T::zero() { gx } else { T::zero() }),
                )]
            })),
        )
    }

    /// Elementwise clamp; gradient passes only inside [lo, hi].
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let ta = self.value(a).clone();
        let out = ta.map(|x| x.max(lo).min(hi));
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(
                    a.0,
                    zip(g, &ta, |gx, x| if x >= lo && x <= hi { gx } else { T::zero() }),
                )]
            })),
        )
    }

    // ── matrix ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul dimension mismatch: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(vec![m, n], mm(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                // dA = g · Bᵀ, dB = Aᵀ · g
                let da = Tensor::new(vec![m, k], mm_nt(g.data(), tb.data(), m, n, k)).unwrap();
                let db = Tensor::new(vec![k, n], mm_tn(ta.data(), g.data(), m, k, n)).unwrap();
                vec![(a.0, da), (b.0, db)]
            })),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a).clone();
        if ta.rank() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {:?}", ta.shape())));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let out = Tensor::new(vec![n, m], transpose_data(ta.data(), m, n))?;
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a.0, Tensor::new(vec![m, n], transpose_data(g.data(), n, m)).unwrap())]
            })),
        ))
    }

    /// Numerically stable row softmax (max subtraction).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a).clone();
        if ta.rank() != 2 {
            return Err(Error::Shape(format!("softmax_rows needs rank 2, got {:?}", ta.shape())));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let mx = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let mut sum = T::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum = sum + e;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] / sum;
            }
        }
        let y = Tensor::new(vec![m, n], out)?;
        let ycap = y.clone();
        Ok(self.push(
            y,
            Some(Box::new(move |g| {
                // dx = y ∘ (g − Σ_j g_j y_j) per row
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let yr = &ycap.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let mut s = T::zero();
                    for j in 0..n {
                        s = s + gr[j] * yr[j];
                    }
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![(a.0, Tensor::new(vec![m, n], dx).unwrap())]
            })),
        ))
    }

    /// Per-row log-sum-exp of a rank-2 tensor, returning a rank-1 vector.
    pub fn row_logsumexp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a).clone();
        if ta.rank() != 2 {
            return Err(Error::Shape(format!("row_logsumexp needs rank 2, got {:?}", ta.shape())));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![T::zero(); m];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let mx = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let mut sum = T::zero();
            for j in 0..n {
                sum = sum + (row[j] - mx).exp();
            }
            out[i] = mx + sum.ln();
        }
        let y = Tensor::vector(out);
        let ycap = y.clone();
        Ok(self.push(
            y,
            Some(Box::new(move |g| {
                // d/dx_ij = softmax(row_i)_j · g_i = exp(x_ij − lse_i) · g_i
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = (ta.data()[i * n + j] - ycap.data()[i]).exp() * g.data()[i];
                    }
                }
                vec![(a.0, Tensor::new(vec![m, n], dx).unwrap())]
            })),
        ))
    }

    /// out[i] = a[i][idx[i]]; one element picked per row.
    pub fn gather_rowwise(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a).clone();
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        if idx.len() != m {
            return Err(Error::Shape(format!(
                "gather_rowwise needs one index per row: {} indices for {} rows",
                idx.len(),
                m
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::Index(format!("column index {bad} out of range (cols {n})")));
        }
        let idx: Arc<Vec<usize>> = Arc::new(idx.to_vec());
        let icap = Arc::clone(&idx);
        let out = Tensor::vector((0..m).map(|i| ta.data()[i * n + idx[i]]).collect());
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    dx[i * n + icap[i]] = g.data()[i];
                }
                vec![(a.0, Tensor::new(vec![m, n], dx).unwrap())]
            })),
        ))
    }

    /// Add a rank-1 row vector to every row of a rank-2 tensor.
    pub fn add_row_broadcast(&mut self, a: Var, r: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a).clone(), self.value(r).clone());
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        if tr.rank() != 1 || tr.len() != n {
            return Err(Error::Shape(format!(
                "add_row_broadcast: row shape {:?} does not match cols of {:?}",
                tr.shape(),
                ta.shape()
            )));
        }
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + tr.data()[j];
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Some(Box::new(move |g| {
                let mut dr = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] = dr[j] + g.data()[i * n + j];
                    }
                }
                vec![(a.0, g.clone()), (r.0, Tensor::vector(dr))]
            })),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_cols of zero tensors".into()));
        }
        let ts: Vec<Tensor<T>> = parts.iter().map(|&v| self.value(v).clone()).collect();
        let m = ts[0].shape()[0];
        for t in &ts {
            if t.rank() != 2 || t.shape()[0] != m {
                return Err(Error::Shape(format!(
                    "concat_cols: inconsistent shapes {:?}",
                    ts.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
                )));
            }
        }
        let widths: Vec<usize> = ts.iter().map(|t| t.shape()[1]).collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * n];
        let mut off = 0;
        for (t, &w) in ts.iter().zip(&widths) {
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let parents: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Some(Box::new(move |g| {
                let mut res = Vec::with_capacity(parents.len());
                let mut off = 0;
                for (&pid, &w) in parents.iter().zip(&widths) {
                    let mut dp = vec![T::zero(); m * w];
                    for i in 0..m {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data()[i * n + off..i * n + off + w]);
                    }
                    res.push((pid, Tensor::new(vec![m, w], dp).unwrap()));
                    off += w;
                }
                res
            })),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_rows of zero tensors".into()));
        }
        let ts: Vec<Tensor<T>> = parts.iter().map(|&v| self.value(v).clone()).collect();
        let n = ts[0].shape().last().copied().unwrap_or(0);
        for t in &ts {
            if t.rank() != 2 || t.shape()[1] != n {
                return Err(Error::Shape(format!(
                    "concat_rows: inconsistent shapes {:?}",
                    ts.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
                )));
            }
        }
        let heights: Vec<usize> = ts.iter().map(|t| t.shape()[0]).collect();
        let m: usize = heights.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for t in &ts {
            out.extend_from_slice(t.data());
        }
        let parents: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Some(Box::new(move |g| {
                let mut res = Vec::with_capacity(parents.len());
                let mut off = 0;
                for (&pid, &h) in parents.iter().zip(&heights) {
                    let dp = g.data()[off * n..(off + h) * n].to_vec();
                    res.push((pid, Tensor::new(vec![h, n], dp).unwrap()));
                    off += h;
                }
                res
            })),
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a).clone();
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        if start + len > n {
            return Err(Error::Index(format!(
                "slice_cols [{start}, {}) out of range for {n} cols",
                start + len
            )));
        }
        let mut out = vec![T::zero(); m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&ta.data()[i * n + start..i * n + start + len]);
        }
        Ok(self.push(
            Tensor::new(vec![m, len], out)?,
            Some(Box::new(move |g| {
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                vec![(a.0, Tensor::new(vec![m, n], dx).unwrap())]
            })),
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a).clone();
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        if start + len > m {
            return Err(Error::Index(format!(
                "slice_rows [{start}, {}) out of range for {m} rows",
                start + len
            )));
        }
        let out = ta.data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(
            Tensor::new(vec![len, n], out)?,
            Some(Box::new(move |g| {
                let mut dx = vec![T::zero(); m * n];
                dx[start * n..(start + len) * n].copy_from_slice(g.data());
                vec![(a.0, Tensor::new(vec![m, n], dx).unwrap())]
            })),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ta = self.value(a).clone();
        let old = ta.shape().to_vec();
        let out = ta.reshaped(shape)?;
        Ok(self.push(
            out,
            Some(Box::new(move |g| vec![(a.0, g.reshaped(old.clone()).unwrap())])),
        ))
    }

    /// Sum all rows of a rank-2 tensor into a single rank-1 vector,
    /// accumulating in ascending row order.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a).clone();
        if ta.rank() != 2 {
            return Err(Error::Shape(format!("sum_rows needs rank 2, got {:?}", ta.shape())));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] = out[j] + ta.data()[i * n + j];
            }
        }
        Ok(self.push(
            Tensor::vector(out),
            Some(Box::new(move |g| {
                let mut dx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    dx.extend_from_slice(g.data());
                }
                vec![(a.0, Tensor::new(vec![m, n], dx).unwrap())]
            })),
        ))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = self.value(a).clone();
        let len = ta.len();
        let inv = T::one() / T::from_usize(len);
        let mut acc = T::zero();
        for &x in ta.data() {
            acc = acc + x;
        }
        self.push(
            Tensor::scalar(acc * inv),
            Some(Box::new(move |g| {
                let gv = g.data()[0] * inv;
                vec![(a.0, Tensor::filled(ta.shape().to_vec(), gv))]
            })),
        )
    }

    /// Gather rows of a rank-2 tensor; duplicate indices are allowed and
    /// their gradients scatter-add.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a).clone();
        if ta.rank() != 2 {
            return Err(Error::Shape(format!("gather_rows needs rank 2, got {:?}", ta.shape())));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index(format!("row index {bad} out of range (rows {m})")));
        }
        let k = idx.len();
        let mut out = Vec::with_capacity(k * n);
        for &i in idx {
            out.extend_from_slice(&ta.data()[i * n..(i + 1) * n]);
        }
        let idx: Arc<Vec<usize>> = Arc::new(idx.to_vec());
        Ok(self.push(
            Tensor::new(vec![k, n], out)?,
            Some(Box::new(move |g| {
                let mut dx = vec![T::zero(); m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[i * n + j] = dx[i * n + j] + g.data()[r * n + j];
                    }
                }
                vec![(a.0, Tensor::new(vec![m, n], dx).unwrap())]
            })),
        ))
    }

    /// Scale row i of `a` by `c[i]` where `c` is a tape variable.
    pub fn rows_scale(&mut self, a: Var, c: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a).clone(), self.value(c).clone());
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        if tc.rank() != 1 || tc.len() != m {
            return Err(Error::Shape(format!(
                "rows_scale: coeff shape {:?} does not match rows of {:?}",
                tc.shape(),
                ta.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = ta.data()[i * n + j] * tc.data()[i];
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Some(Box::new(move |g| {
                let mut da = vec![T::zero(); m * n];
                let mut dc = vec![T::zero(); m];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g.data()[i * n + j] * tc.data()[i];
                        dc[i] = dc[i] + g.data()[i * n + j] * ta.data()[i * n + j];
                    }
                }
                vec![
                    (a.0, Tensor::new(vec![m, n], da).unwrap()),
                    (c.0, Tensor::vector(dc)),
                ]
            })),
        ))
    }

    /// Scale row i of `a` by the constant `coeffs[i]`.
    pub fn rows_scale_const(&mut self, a: Var, coeffs: &[T]) -> Result<Var> {
        let ta = self.value(a).clone();
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        if coeffs.len() != m {
            return Err(Error::Shape(format!(
                "rows_scale_const: {} coeffs for {} rows",
                coeffs.len(),
                m
            )));
        }
        let cs: Arc<Vec<T>> = Arc::new(coeffs.to_vec());
        let ccap = Arc::clone(&cs);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = ta.data()[i * n + j] * cs[i];
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Some(Box::new(move |g| {
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g.data()[i * n + j] * ccap[i];
                    }
                }
                vec![(a.0, Tensor::new(vec![m, n], da).unwrap())]
            })),
        ))
    }

    /// Stack rank-1 vectors of equal length into a rank-2 matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("stack_rows of zero vectors".into()));
        }
        let ts: Vec<Tensor<T>> = parts.iter().map(|&v| self.value(v).clone()).collect();
        let n = ts[0].len();
        for t in &ts {
            if t.rank() != 1 || t.len() != n {
                return Err(Error::Shape(format!(
                    "stack_rows: inconsistent shapes {:?}",
                    ts.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
                )));
            }
        }
        let m = ts.len();
        let mut out = Vec::with_capacity(m * n);
        for t in &ts {
            out.extend_from_slice(t.data());
        }
        let parents: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Some(Box::new(move |g| {
                parents
                    .iter()
                    .enumerate()
                    .map(|(r, &pid)| {
                        (pid, Tensor::vector(g.data()[r * n..(r + 1) * n].to_vec()))
                    })
                    .collect()
            })),
        ))
    }

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let eps = T::from_f64(1e-5);
        let (ta, tg, tb) = (
            self.value(a).clone(),
            self.value(gamma).clone(),
            self.value(beta).clone(),
        );
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        if tg.len() != n || tb.len() != n {
            return Err(Error::Shape(format!(
                "layer_norm: gain/bias length {}/{} does not match cols {}",
                tg.len(),
                tb.len(),
                n
            )));
        }
        let nf = T::from_usize(n);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let mut mean = T::zero();
            for &x in row {
                mean = mean + x;
            }
            mean = mean / nf;
            let mut var = T::zero();
            for &x in row {
                var = var + (x - mean) * (x - mean);
            }
            var = var / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = tg.data()[j] * xh + tb.data()[j];
            }
        }
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        let (xc, ic) = (Arc::clone(&xhat), Arc::clone(&inv_std));
        let (av, gv, bv) = (a.0, gamma.0, beta.0);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Some(Box::new(move |g| {
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let xr = &xc[i * n..(i + 1) * n];
                    // dxhat = g ∘ gamma; means reduce the row
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..n {
                        dgamma[j] = dgamma[j] + gr[j] * xr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        let dxh = gr[j] * tg.data()[j];
                        mean_dxhat = mean_dxhat + dxh;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xr[j];
                    }
                    mean_dxhat = mean_dxhat / nf;
                    mean_dxhat_xhat = mean_dxhat_xhat / nf;
                    for j in 0..n {
                        let dxh = gr[j] * tg.data()[j];
                        dx[i * n + j] = ic[i] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                    }
                }
                vec![
                    (av, Tensor::new(vec![m, n], dx).unwrap()),
                    (gv, Tensor::vector(dgamma)),
                    (bv, Tensor::vector(dbeta)),
                ]
            })),
        ))
    }

    /// L2-normalize a rank-1 vector to unit norm. Errors if the norm is
    /// below 1e-12 (degenerate direction).
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a).clone();
        if ta.rank() != 1 {
            return Err(Error::Shape(format!("l2_normalize needs rank 1, got {:?}", ta.shape())));
        }
        let norm = ta.norm();
        if norm.as_f64() < 1e-12 {
            return Err(Error::Degenerate(format!(
                "cannot normalize vector with norm {:e}",
                norm.as_f64()
            )));
        }
        let y = ta.map(|x| x / norm);
        let ycap = y.clone();
        Ok(self.push(
            y,
            Some(Box::new(move |g| {
                // dx = (g − y (g·y)) / ‖x‖
                let mut gy = T::zero();
                for j in 0..g.len() {
                    gy = gy + g.data()[j] * ycap.data()[j];
                }
                let dx: Vec<T> = (0..g.len())
                    .map(|j| (g.data()[j] - ycap.data()[j] * gy) / norm)
                    .collect();
                vec![(a.0, Tensor::vector(dx))]
            })),
        ))
    }

    /// Multiply every element of `a` by the scalar tape variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a).clone(), self.value(s).clone());
        if ts.len() != 1 {
            return Err(Error::Shape(format!("mul_scalar needs a scalar, got {:?}", ts.shape())));
        }
        let sv = ts.data()[0];
        let out = ta.map(|x| x * sv);
        Ok(self.push(
            out,
            Some(Box::new(move |g| {
                let mut ds = T::zero();
                for j in 0..g.len() {
                    ds = ds + g.data()[j] * ta.data()[j];
                }
                vec![(a.0, g.map(|x| x * sv)), (s.0, Tensor::scalar(ds))]
            })),
        ))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) {
    match slot {
        Some(t) => {
            let dst = t.data_mut();
            for (d, s) in dst.iter_mut().zip(contrib.data()) {
                *d = *d + *s;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip<T: Scalar, F: Fn(T, T) -> T>(a: &Tensor<T>, b: &Tensor<T>, f: F) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

/// c[m×n] = a[m×k] · b[k×n]
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
    c
}

/// c[m×k] = a[m×n] · b[k×n]ᵀ  (rows-by-rows dot products)
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + arow[j] * brow[j];
            }
            c[i * k + p] = acc;
        }
    }
    c
}

/// c[k×n] = a[m×k]ᵀ · b[m×n]
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
    c
}

fn transpose_data<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
