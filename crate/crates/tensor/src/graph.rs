//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into leaf nodes; [`Graph::accumulate_into`] then adds parameter gradients
//! to a [`ParamStore`]. A graph is built per forward pass and dropped after.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPadding {
    /// Centered taps; kernel width must be odd.
    Same,
    /// Taps at offsets `-(K-1)..=0`.
    LeftCausal,
}

impl ConvPadding {
    pub fn offsets(self, kernel: usize) -> Vec<isize> {
        let k = kernel as isize;
        match self {
            ConvPadding::Same => (-(k - 1) / 2..=(k - 1) / 2).collect(),
            ConvPadding::LeftCausal => (-(k - 1)..=0).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
    /// Sum divided by a caller-supplied count.
    SumOver(usize),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Embedding(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
        offsets: Vec<isize>,
        allow: Option<Arc<[bool]>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        divisor: f64,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    LstmCell {
        gates: Var,
        c: Var,
        acts: Vec<f64>,
        tanh_c: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf backed by a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.shared(id),
            grad: None,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn d2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.d2(a, "matmul")?;
        let (k2, n) = self.d2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.d2(a, "matmul_nt")?;
        let (n, k2) = self.d2(b, "matmul_nt")?;
        if k != k2 {
            return Err(TensorError::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.d2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, op_name)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    /// Same data under a new shape of equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::clone(self.value(a)).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| x * s).collect()).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Adds a `[1 × n]` (or `[n]`) row to every row of an `[m × n]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.d2(a, "add_row")?;
        if self.value(row).numel() != n {
            return Err(TensorError::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n].iter_mut().zip(r).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::AddRow(a, row), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::arg("concat_rows", "no inputs"))?;
        let (_, n) = self.d2(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.d2(p, "concat_rows")?;
            if pn != n {
                return Err(TensorError::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::arg("concat_cols", "no inputs"))?;
        let (m, _) = self.d2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.d2(p, "concat_cols")?;
            if pm != m {
                return Err(TensorError::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.d2(a, "slice_rows")?;
        if start > end || end > m {
            return Err(TensorError::arg("slice_rows", format!("range {start}..{end} outside {m} rows")));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[end - start, n], data)?, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.d2(a, "slice_cols")?;
        if start > end || end > n {
            return Err(TensorError::arg("slice_cols", format!("range {start}..{end} outside {n} cols")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[m, end - start], data)?, Op::SliceCols(a, start), rg))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.d2(table, "embedding")?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::arg("embedding", format!("id {id} outside table of {v} rows")));
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(&[ids.len(), d], data)?, Op::Embedding(table, ids.to_vec()), rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Row-wise softmax restricted to entries where `allow` is true.
    /// Disallowed entries are exactly zero and never read.
    pub fn masked_softmax(&mut self, a: Var, allow: Arc<[bool]>) -> Result<Var> {
        if allow.len() != self.value(a).numel() {
            return Err(TensorError::dim("masked_softmax", self.shape(a), &[allow.len()]));
        }
        self.softmax_impl(a, Some(allow))
    }

    fn softmax_impl(&mut self, a: Var, allow: Option<Arc<[bool]>>) -> Result<Var> {
        let (m, n) = self.d2(a, "softmax")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        let ok = |idx: usize| allow.as_ref().is_none_or(|al| al[idx]);
        for i in 0..m {
            let row = i * n..(i + 1) * n;
            let mut max = f64::NEG_INFINITY;
            for j in row.clone() {
                if ok(j) && src[j] > max {
                    max = src[j];
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in row.clone() {
                if ok(j) {
                    let e = (src[j] - max).exp();
                    out[j] = e;
                    sum += e;
                }
            }
            for j in row {
                out[j] /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Softmax(a), rg))
    }

    /// Row-wise normalization followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.d2(x, "layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(TensorError::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| f(*x)).collect()).expect("same shape");
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Inverted dropout with a mask drawn from `rng`. `p == 0` is the identity.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut crate::rng::SplitMix64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::arg("dropout", format!("rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let shape = self.shape(a).to_vec();
        let n = self.value(a).numel();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n).map(|_| if rng.next_f64() < p { 0.0 } else { keep }).collect();
        let m = self.constant(Tensor::new(&shape, mask)?);
        self.mul(a, m)
    }

    /// 1-D convolution over the row (time) axis of `x: [len × c_in]`.
    ///
    /// `w` is `[kernel·c_in × c_out]`, tap-major: row `t·c_in + c` holds the
    /// weights for input channel `c` at tap `t`. `allow`, when given, is a
    /// `[len × kernel]` table; a tap whose entry is false contributes nothing
    /// to that output position.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        padding: ConvPadding,
        allow: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        let (len, cin) = self.d2(x, "conv1d")?;
        let (wr, cout) = self.d2(w, "conv1d")?;
        if kernel == 0 || wr != kernel * cin {
            return Err(TensorError::dim("conv1d", self.shape(x), self.shape(w)));
        }
        if padding == ConvPadding::Same && kernel.is_multiple_of(2) {
            return Err(TensorError::arg("conv1d", "same padding needs an odd kernel width"));
        }
        if self.value(b).numel() != cout {
            return Err(TensorError::dim("conv1d", self.shape(w), self.shape(b)));
        }
        if let Some(al) = &allow {
            if al.len() != len * kernel {
                return Err(TensorError::dim("conv1d", &[len, kernel], &[al.len()]));
            }
        }
        let offsets = padding.offsets(kernel);
        let src = self.value(x).data();
        let width = kernel * cin;
        let mut cols = vec![0.0; len * width];
        for i in 0..len {
            for (t, off) in offsets.iter().enumerate() {
                let j = i as isize + off;
                if j < 0 || j >= len as isize {
                    continue;
                }
                if let Some(al) = &allow {
                    if !al[i * kernel + t] {
                        continue;
                    }
                }
                let j = j as usize;
                cols[i * width + t * cin..i * width + (t + 1) * cin].copy_from_slice(&src[j * cin..(j + 1) * cin]);
            }
        }
        let mut out = vec![0.0; len * cout];
        let bias = self.value(b).data();
        for i in 0..len {
            out[i * cout..(i + 1) * cout].copy_from_slice(bias);
        }
        gemm(len, width, cout, &cols, false, self.value(w).data(), false, &mut out, 1.0);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[len, cout], out)?,
            Op::Conv1d { x, w, b, cols, offsets, allow },
            rg,
        ))
    }

    /// Cross-entropy of row-wise logits against class targets. Rows whose
    /// target equals `ignore_index` contribute neither loss nor gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: Option<usize>,
        reduction: Reduction,
    ) -> Result<Var> {
        let (m, v) = self.d2(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(TensorError::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(ig) = ignore_index {
            if ig >= v {
                return Err(TensorError::arg(
                    "cross_entropy",
                    format!("ignore_index {ig} outside vocabulary of {v}"),
                ));
            }
        }
        let mut resolved = Vec::with_capacity(m);
        for &t in targets {
            if Some(t) == ignore_index {
                resolved.push(None);
            } else if t >= v {
                return Err(TensorError::arg("cross_entropy", format!("target {t} outside vocabulary of {v}")));
            } else {
                resolved.push(Some(t));
            }
        }
        let counted = resolved.iter().filter(|t| t.is_some()).count();
        let divisor = match reduction {
            Reduction::Mean => {
                if counted == 0 {
                    return Err(TensorError::arg("cross_entropy", "every target is ignored"));
                }
                counted as f64
            }
            Reduction::Sum => 1.0,
            Reduction::SumOver(n) => {
                if n == 0 {
                    return Err(TensorError::arg("cross_entropy", "zero normalizer"));
                }
                n as f64
            }
        };
        let src = self.value(logits).data();
        let mut probs = vec![0.0; m * v];
        let mut total = 0.0;
        for i in 0..m {
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            if let Some(t) = resolved[i] {
                total += lse - row[t];
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / divisor),
            Op::CrossEntropy { logits, targets: resolved, probs, divisor },
            rg,
        ))
    }

    /// Per-block, per-channel maximum over consecutive row blocks.
    /// Ties resolve to the first row of the block.
    pub fn segment_max(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let (len, c) = self.d2(x, "segment_max")?;
        if lengths.contains(&0) {
            return Err(TensorError::arg("segment_max", "zero-length block"));
        }
        let total: usize = lengths.iter().sum();
        if total != len {
            return Err(TensorError::dim("segment_max", self.shape(x), &[total]));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; lengths.len() * c];
        let mut argmax = vec![0; lengths.len() * c];
        let mut start = 0;
        for (b, &l) in lengths.iter().enumerate() {
            for ch in 0..c {
                let mut best = start;
                for r in start + 1..start + l {
                    if src[r * c + ch] > src[best * c + ch] {
                        best = r;
                    }
                }
                out[b * c + ch] = src[best * c + ch];
                argmax[b * c + ch] = best;
            }
            start += l;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[lengths.len(), c], out)?, Op::SegmentMax { x, argmax }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// LSTM nonlinearity. `gates` holds pre-activations `[n × 4H]` in the
    /// order input, forget, cell candidate, output; `c` is `[n × H]`.
    /// Returns `[n × 2H]` = `[h' | c']`.
    pub fn lstm_gates(&mut self, gates: Var, c: Var) -> Result<Var> {
        let (n, g4) = self.d2(gates, "lstm_cell")?;
        let (cn, h) = self.d2(c, "lstm_cell")?;
        if cn != n || g4 != 4 * h {
            return Err(TensorError::dim("lstm_cell", self.shape(gates), self.shape(c)));
        }
        let gs = self.value(gates).data();
        let cs = self.value(c).data();
        let mut acts = vec![0.0; n * 4 * h];
        let mut tanh_c = vec![0.0; n * h];
        let mut out = vec![0.0; n * 2 * h];
        for r in 0..n {
            for j in 0..h {
                let base = r * 4 * h;
                let i = sigmoid(gs[base + j]);
                let f = sigmoid(gs[base + h + j]);
                let g = gs[base + 2 * h + j].tanh();
                let o = sigmoid(gs[base + 3 * h + j]);
                let cnew = f * cs[r * h + j] + i * g;
                let tc = cnew.tanh();
                acts[base + j] = i;
                acts[base + h + j] = f;
                acts[base + 2 * h + j] = g;
                acts[base + 3 * h + j] = o;
                tanh_c[r * h + j] = tc;
                out[r * 2 * h + j] = o * tc;
                out[r * 2 * h + h + j] = cnew;
            }
        }
        let rg = self.rg(gates) || self.rg(c);
        Ok(self.push(Tensor::new(&[n, 2 * h], out)?, Op::LstmCell { gates, c, acts, tanh_c }, rg))
    }

    /// Runs backpropagation from a scalar. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                add_into(&mut self.nodes[idx].grad, &g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        let mut send = |v: Var, d: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, &mut da, 0.0);
                    send(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, &mut db, 0.0);
                    send(*b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), false, &mut da, 0.0);
                    send(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g, true, self.value(*a).data(), false, &mut db, 0.0);
                    send(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                send(*a, d);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if self.rg(*a) {
                    send(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    send(*b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|x| x * s).collect()),
            Op::AddRow(a, row) => {
                let n = out_shape[1];
                send(*a, g.to_vec());
                if self.rg(*row) {
                    let mut dr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        dr.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    send(*row, dr);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    send(*p, g[start..start + len].to_vec());
                    start += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = out_shape[0];
                let n = out_shape[1];
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&g[i * n + off..i * n + off + w]);
                    }
                    send(*p, d);
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let n = src.cols();
                let mut d = vec![0.0; src.numel()];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                send(*a, d);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (m, n) = (src.rows(), src.cols());
                let w = out_shape[1];
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send(*a, d);
            }
            Op::Embedding(table, ids) => {
                let t = self.value(*table);
                let d_model = t.cols();
                let mut d = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    d[id * d_model..(id + 1) * d_model]
                        .iter_mut()
                        .zip(&g[r * d_model..(r + 1) * d_model])
                        .for_each(|(a, b)| *a += b);
                }
                send(*table, d);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = out_shape[1];
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                send(*a, d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = out_shape[1];
                let gv = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    send(*gain, dg);
                    send(*bias, db);
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (i, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[i * n + j] = rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                send(*a, g.iter().zip(x).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }).collect());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(d, t)| d * (1.0 - t * t)).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect());
            }
            Op::Conv1d { x, w, b, cols, offsets, allow } => {
                let (len, cout) = (out_shape[0], out_shape[1]);
                let cin = self.value(*x).cols();
                let kernel = offsets.len();
                let width = kernel * cin;
                if self.rg(*w) {
                    let mut dw = vec![0.0; width * cout];
                    gemm(width, len, cout, cols, true, g, false, &mut dw, 0.0);
                    send(*w, dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; cout];
                    for chunk in g.chunks(cout) {
                        db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    send(*b, db);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; len * width];
                    gemm(len, cout, width, g, false, self.value(*w).data(), true, &mut dcols, 0.0);
                    let mut dx = vec![0.0; len * cin];
                    for i in 0..len {
                        for (t, off) in offsets.iter().enumerate() {
                            let j = i as isize + off;
                            if j < 0 || j >= len as isize {
                                continue;
                            }
                            if let Some(al) = allow {
                                if !al[i * kernel + t] {
                                    continue;
                                }
                            }
                            let j = j as usize;
                            let src = &dcols[i * width + t * cin..i * width + (t + 1) * cin];
                            dx[j * cin..(j + 1) * cin].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::CrossEntropy { logits, targets, probs, divisor } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / divisor;
                let mut d = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..v {
                            d[i * v + j] = probs[i * v + j] * scale;
                        }
                        d[i * v + t] -= scale;
                    }
                }
                send(*logits, d);
            }
            Op::SegmentMax { x, argmax } => {
                let c = out_shape[1];
                let mut d = vec![0.0; self.value(*x).numel()];
                for (k, &row) in argmax.iter().enumerate() {
                    d[row * c + k % c] += g[k];
                }
                send(*x, d);
            }
            Op::Sum(a) => {
                send(*a, vec![g[0]; self.value(*a).numel()]);
            }
            Op::LstmCell { gates, c, acts, tanh_c } => {
                let h = out_shape[1] / 2;
                let n = out_shape[0];
                let cprev = self.value(*c).data();
                let mut dgates = vec![0.0; n * 4 * h];
                let mut dc = vec![0.0; n * h];
                for r in 0..n {
                    for j in 0..h {
                        let base = r * 4 * h;
                        let (i, f, gg, o) = (acts[base + j], acts[base + h + j], acts[base + 2 * h + j], acts[base + 3 * h + j]);
                        let tc = tanh_c[r * h + j];
                        let dh = g[r * 2 * h + j];
                        let dcn = g[r * 2 * h + h + j] + dh * o * (1.0 - tc * tc);
                        let d_o = dh * tc;
                        let d_i = dcn * gg;
                        let d_g = dcn * i;
                        let d_f = dcn * cprev[r * h + j];
                        dc[r * h + j] = dcn * f;
                        dgates[base + j] = d_i * i * (1.0 - i);
                        dgates[base + h + j] = d_f * f * (1.0 - f);
                        dgates[base + 2 * h + j] = d_g * (1.0 - gg * gg);
                        dgates[base + 3 * h + j] = d_o * o * (1.0 - o);
                    }
                }
                send(*gates, dgates);
                send(*c, dc);
            }
        }
    }

    /// Adds every parameter gradient computed on this tape into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (id, var) in ids {
            if let Some(g) = &self.nodes[var.0].grad {
                store.grad_mut(*id).iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
}
