//! Computation tape.
//!
//! Operations are recorded in execution order. [`Tape::backward`] walks the
//! record in reverse and visits every op once. A node only takes part in the
//! backward pass when one of its inputs is trainable, so frozen subgraphs
//! (the backbone weights, the input images) cost nothing and receive no
//! gradient.

use super::kernels::{gemm, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which part of the network a multiply-accumulate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostScope {
    Embed,
    Block,
    Head,
}

/// Multiply-accumulate counts gathered while recording, split by scope.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounters {
    pub embed: u64,
    pub block: u64,
    pub head: u64,
}

impl MacCounters {
    pub fn total(&self) -> u64 {
        self.embed + self.block + self.head
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    ConcatRows(Var, Var),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    AddToRow { x: Var, p: Var, row: usize },
    Expand(Var),
    GatherRows { x: Var, index: Vec<usize> },
    SliceCols { x: Var, start: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records differentiable operations and replays them backwards.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    scope: CostScope,
    macs: MacCounters,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            scope: CostScope::Block,
            macs: MacCounters::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn set_scope(&mut self, scope: CostScope) {
        self.scope = scope;
    }

    pub fn macs(&self) -> MacCounters {
        self.macs
    }

    fn count_macs(&mut self, n: u64) {
        match self.scope {
            CostScope::Embed => self.macs.embed += n,
            CostScope::Block => self.macs.block += n,
            CostScope::Head => self.macs.head += n,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are consistent")
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient held for `v` into `target`'s buffer. Frozen targets
    /// are left untouched.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    /// Records a tensor as a leaf. It is trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    /// `a: [.., k] · b: [k, n] -> [.., n]`; leading dimensions of `a` act as
    /// rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = rows_cols(sa);
        let n = sb[1];
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let out = gemm_nn(self.value(a), self.value(b), m, k, n);
        self.count_macs((m * k * n) as u64);
        Ok(self.push(shape, out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched matmul `[g, m, k] · [g, k, n]`, or `[g, m, k] · [g, n, k]ᵀ`
    /// when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; g * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..g {
                let ab = &va[i * m * k..(i + 1) * m * k];
                let bb = &vb[i * k * n..(i + 1) * k * n];
                let ob = &mut out[i * m * n..(i + 1) * m * n];
                if transpose_b {
                    ob.copy_from_slice(&gemm_nt(ab, bb, m, k, n));
                } else {
                    gemm(ab, bb, ob, m, k, n);
                }
            }
        }
        self.count_macs((g * m * k * n) as u64);
        Ok(self.push(vec![g, m, n], out, Op::Bmm { a, b, transpose_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s (bias rows, positional
    /// tables).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::shape("add_broadcast", sx, sy));
        }
        let block = self.value(y).len();
        let yv = self.value(y);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + yv[i % block])
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBroadcast(x, y), &[x, y]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v + s).collect();
        self.push(self.shape(x).to_vec(), out, Op::AddScalar(x), &[x])
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x);
        if xv.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows"));
        }
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            softmax_into(&xv[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), &[x]))
    }

    /// Layer normalisation over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layernorm", self.shape(x), self.shape(gamma)));
        }
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![0.0; xv.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, &[x, gamma, beta]))
    }

    /// Concatenates along the second-to-last axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 1] {
            return Err(Error::shape("concat_rows", &sa, &sb));
        }
        let cols = sa[r - 1];
        let (ra, rb) = (sa[r - 2], sb[r - 2]);
        let groups: usize = sa[..r - 2].iter().product();
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for g in 0..groups {
            out.extend_from_slice(&va[g * ra * cols..(g + 1) * ra * cols]);
            out.extend_from_slice(&vb[g * rb * cols..(g + 1) * rb * cols]);
        }
        let mut shape = sa.clone();
        shape[r - 2] = ra + rb;
        Ok(self.push(shape, out, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Rows `start..end` along the second-to-last axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let r = sx.len();
        if r < 2 || start >= end || end > sx[r - 2] {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{end} out of range for shape {sx:?}"
            )));
        }
        let (rows, cols) = (sx[r - 2], sx[r - 1]);
        let groups: usize = sx[..r - 2].iter().product();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(groups * (end - start) * cols);
        for g in 0..groups {
            out.extend_from_slice(&xv[(g * rows + start) * cols..(g * rows + end) * cols]);
        }
        let mut shape = sx;
        shape[r - 2] = end - start;
        Ok(self.push(shape, out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    /// `[b, n, h·e] -> [b·h, n, e]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", &s, &[heads]));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let e = d / heads;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let src = (bi * n + t) * d + h * e;
                    let dst = ((bi * heads + h) * n + t) * e;
                    out[dst..dst + e].copy_from_slice(&xv[src..src + e]);
                }
            }
        }
        Ok(self.push(vec![b * heads, n, e], out, Op::SplitHeads { x, heads }, &[x]))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[0].is_multiple_of(heads) {
            return Err(Error::shape("merge_heads", &s, &[heads]));
        }
        let (b, n, e) = (s[0] / heads, s[1], s[2]);
        let d = e * heads;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let dst = (bi * n + t) * d + h * e;
                    let src = ((bi * heads + h) * n + t) * e;
                    out[dst..dst + e].copy_from_slice(&xv[src..src + e]);
                }
            }
        }
        Ok(self.push(vec![b, n, d], out, Op::MergeHeads { x, heads }, &[x]))
    }

    /// Adds the vector `p: [d]` to row `row` of every `[n, d]` block of `x`.
    pub fn add_to_row(&mut self, x: Var, row: usize, p: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let r = s.len();
        if r < 2 || self.shape(p) != [s[r - 1]] || row >= s[r - 2] {
            return Err(Error::shape("add_to_row", &s, self.shape(p)));
        }
        let (n, d) = (s[r - 2], s[r - 1]);
        let groups = self.value(x).len() / (n * d);
        let mut out = self.value(x).to_vec();
        let pv = self.value(p);
        for g in 0..groups {
            let base = (g * n + row) * d;
            for j in 0..d {
                out[base + j] += pv[j];
            }
        }
        Ok(self.push(s, out, Op::AddToRow { x, p, row }, &[x, p]))
    }

    /// Repeats `x` along a new leading axis of size `batch`.
    pub fn expand(&mut self, x: Var, batch: usize) -> Var {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(xv);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        self.push(shape, out, Op::Expand(x), &[x])
    }

    /// Picks rows of a rank-2 tensor: `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || index.iter().any(|&i| i >= s[0]) || index.is_empty() {
            return Err(Error::Contract(format!("gather_rows: bad index for shape {s:?}")));
        }
        let cols = s[1];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        let op = Op::GatherRows {
            x,
            index: index.to_vec(),
        };
        Ok(self.push(vec![index.len(), cols], out, op, &[x]))
    }

    /// Columns `start..end` along the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&s);
        if start >= end || end > cols {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{end} out of range for shape {s:?}"
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + end]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = end - start;
        Ok(self.push(shape, out, Op::SliceCols { x, start }, &[x]))
    }

    /// Mean cross-entropy of `logits: [b, c]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &s, &[targets.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!("target {t} outside {c} classes")));
        }
        let lv = self.value(logits);
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cross_entropy"));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[targets[r]];
            softmax_into(row, &mut probs[r * c..(r + 1) * c]);
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![loss / b as f64], op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// Back-propagates from a scalar `loss`. Returns the number of recorded
    /// ops visited.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            visited += 1;
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        // Intermediate gradients stay readable through `grad`.
        self.grads = grads;
        Ok(visited)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    acc(grads, *a, &gemm_nt(g, self.value(*b), m, n, k));
                }
                if self.wants(*b) {
                    acc(grads, *b, &gemm_tn(self.value(*a), g, m, k, n));
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (gn, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *transpose_b { sb[1] } else { sb[2] };
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = vec![0.0; va.len()];
                    for i in 0..gn {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        let out = if *transpose_b {
                            gemm_nn(gi, bi, m, n, k)
                        } else {
                            gemm_nt(gi, bi, m, n, k)
                        };
                        da[i * m * k..(i + 1) * m * k].copy_from_slice(&out);
                    }
                    acc(grads, *a, &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; vb.len()];
                    for i in 0..gn {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let out = if *transpose_b {
                            gemm_tn(gi, ai, m, n, k)
                        } else {
                            gemm_tn(ai, gi, m, k, n)
                        };
                        db[i * k * n..(i + 1) * k * n].copy_from_slice(&out);
                    }
                    acc(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g);
                }
                if self.wants(*b) {
                    acc(grads, *b, g);
                }
            }
            Op::AddBroadcast(x, y) => {
                if self.wants(*x) {
                    acc(grads, *x, g);
                }
                if self.wants(*y) {
                    let block = self.value(*y).len();
                    let mut dy = vec![0.0; block];
                    for chunk in g.chunks(block) {
                        for (d, v) in dy.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(grads, *y, &dy);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b)).map(|(g, v)| g * v).collect();
                    acc(grads, *a, &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a)).map(|(g, v)| g * v).collect();
                    acc(grads, *b, &d);
                }
            }
            Op::Scale(x, s) => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                acc(grads, *x, &d);
            }
            Op::AddScalar(x) | Op::Reshape(x) => acc(grads, *x, g),
            Op::Gelu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                acc(grads, *x, &d);
            }
            Op::Softmax(x) => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (rows, d) = rows_cols(&node.shape);
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (xv[r * d + j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * gv[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.wants(*x) {
                    acc(grads, *x, &dx);
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, &dgamma);
                }
                if self.wants(*beta) {
                    acc(grads, *beta, &dbeta);
                }
            }
            Op::ConcatRows(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let r = sa.len();
                let cols = sa[r - 1];
                let (ra, rb) = (sa[r - 2], sb[r - 2]);
                let groups: usize = sa[..r - 2].iter().product();
                let mut da = Vec::with_capacity(groups * ra * cols);
                let mut db = Vec::with_capacity(groups * rb * cols);
                for gi in 0..groups {
                    let base = gi * (ra + rb) * cols;
                    da.extend_from_slice(&g[base..base + ra * cols]);
                    db.extend_from_slice(&g[base + ra * cols..base + (ra + rb) * cols]);
                }
                if self.wants(*a) {
                    acc(grads, *a, &da);
                }
                if self.wants(*b) {
                    acc(grads, *b, &db);
                }
            }
            Op::SliceRows { x, start } => {
                let sx = self.shape(*x);
                let r = sx.len();
                let (rows, cols) = (sx[r - 2], sx[r - 1]);
                let take = node.shape[r - 2];
                let groups: usize = sx[..r - 2].iter().product();
                let mut dx = vec![0.0; self.value(*x).len()];
                for gi in 0..groups {
                    let dst = (gi * rows + start) * cols;
                    dx[dst..dst + take * cols]
                        .copy_from_slice(&g[gi * take * cols..(gi + 1) * take * cols]);
                }
                acc(grads, *x, &dx);
            }
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                let (b, n, d) = (s[0], s[1], s[2]);
                let e = d / heads;
                let mut dx = vec![0.0; g.len()];
                for bi in 0..b {
                    for t in 0..n {
                        for h in 0..*heads {
                            let src = ((bi * heads + h) * n + t) * e;
                            let dst = (bi * n + t) * d + h * e;
                            dx[dst..dst + e].copy_from_slice(&g[src..src + e]);
                        }
                    }
                }
                acc(grads, *x, &dx);
            }
            Op::MergeHeads { x, heads } => {
                let s = self.shape(*x);
                let (b, n, e) = (s[0] / heads, s[1], s[2]);
                let d = e * heads;
                let mut dx = vec![0.0; g.len()];
                for bi in 0..b {
                    for t in 0..n {
                        for h in 0..*heads {
                            let src = (bi * n + t) * d + h * e;
                            let dst = ((bi * heads + h) * n + t) * e;
                            dx[dst..dst + e].copy_from_slice(&g[src..src + e]);
                        }
                    }
                }
                acc(grads, *x, &dx);
            }
            Op::AddToRow { x, p, row } => {
                if self.wants(*x) {
                    acc(grads, *x, g);
                }
                if self.wants(*p) {
                    let r = node.shape.len();
                    let (n, d) = (node.shape[r - 2], node.shape[r - 1]);
                    let groups = g.len() / (n * d);
                    let mut dp = vec![0.0; d];
                    for gi in 0..groups {
                        let base = (gi * n + row) * d;
                        for j in 0..d {
                            dp[j] += g[base + j];
                        }
                    }
                    acc(grads, *p, &dp);
                }
            }
            Op::Expand(x) => {
                let block = self.value(*x).len();
                let mut dx = vec![0.0; block];
                for chunk in g.chunks(block) {
                    for (d, v) in dx.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(grads, *x, &dx);
            }
            Op::GatherRows { x, index } => {
                let cols = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i, &src) in index.iter().enumerate() {
                    for j in 0..cols {
                        dx[src * cols + j] += g[i * cols + j];
                    }
                }
                acc(grads, *x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = rows_cols(self.shape(*x));
                let w = *node.shape.last().unwrap();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(grads, *x, &dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = targets.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                acc(grads, *logits, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                acc(grads, *x, &d);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

// 0.5·(1 + tanh(u)) equals sigmoid(2u), which is cheaper to evaluate.
fn gelu_gate(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + x * s * (1.0 - s) * 2.0 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
