//! Tape-based reverse-mode differentiation over a closed set of dense ops.
//!
//! A [`Graph`] borrows its parameter tensors for its whole lifetime; after
//! [`Graph::backward`] the gradient of every `requires_grad` leaf has been
//! accumulated into that tensor's gradient slot.

use crate::error::{MktError, Result};
use crate::numerics::tensor::Tensor;

/// LayerNorm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    Transpose(usize),
    Reshape(usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(usize),
    TopkMean { x: usize, k: usize, selected: Vec<usize> },
    L1 { x: usize, target: Vec<f64> },
    Hinge { x: usize, positive: Vec<bool> },
    Sum(usize),
    Mean(usize),
    MeanOf(Vec<usize>),
    L2NormalizeRows { x: usize, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<'p> {
    nodes: Vec<Node>,
    leaves: Vec<(usize, &'p Tensor)>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let c = shape[shape.len() - 1];
            (shape.iter().product::<usize>() / c, c)
        }
    }
}

/// `a[m×k] · b[k×n]`
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ`
fn mm_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`
fn mm_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Indices of the `k` largest entries of `v` (ties to the lower index),
/// returned in ascending index order so sums match a plain left-to-right sum.
pub(crate) fn topk_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, g: Vec<f64>) {
    match grads[i].as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => grads[i] = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), leaves: Vec::new(), grads: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(MktError::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node { shape, value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Registers a parameter; its gradient slot is filled by `backward` when
    /// `requires_grad` is set.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        let id = self.nodes.len() - 1;
        if t.requires_grad() {
            self.leaves.push((id, t));
        }
        Var(id)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    /// Gradient of the loss w.r.t. any recorded node, available after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(MktError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(vec![m, n], out, Op::Matmul(a.0, b.0), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(MktError::shape("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Add(a.0, b.0), ng)
    }

    /// Adds a `[n]` bias to every row of `a[..×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(a));
        if self.shape(bias) != [c] {
            return Err(MktError::shape("add_bias", format!("{:?} + {:?}", self.shape(a), self.shape(bias))));
        }
        let b = self.value(bias);
        let out = self.value(a).chunks(c).flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y)).collect();
        let ng = self.ng(&[a, bias]);
        self.push(self.shape(a).to_vec(), out, Op::AddBias(a.0, bias.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.ng(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a.0, c), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| MktError::shape("concat_rows", "no inputs"))?;
        let cols = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(MktError::shape("concat_rows", format!("{s:?} vs {cols} columns")));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let ng = self.ng(parts);
        self.push(vec![rows, cols], out, Op::ConcatRows(parts.iter().map(|v| v.0).collect()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| MktError::shape("concat_cols", "no inputs"))?;
        let rows = self.shape(*first).first().copied().unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(MktError::shape("concat_cols", format!("{s:?} vs {rows} rows")));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = self.ng(parts);
        self.push(vec![rows, total], out, Op::ConcatCols(parts.iter().map(|v| v.0).collect()), ng)
    }

    /// Rows `start..end` of a 2-D node.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[0] {
            return Err(MktError::shape("slice_rows", format!("{s:?}[{start}..{end}]")));
        }
        let c = s[1];
        let out = self.value(x)[start * c..end * c].to_vec();
        let ng = self.ng(&[x]);
        self.push(vec![end - start, c], out, Op::SliceRows { x: x.0, start }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(MktError::shape("transpose", format!("{s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let ng = self.ng(&[x]);
        self.push(vec![n, m], out, Op::Transpose(x.0), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(MktError::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(shape.to_vec(), out, Op::Reshape(x.0), ng)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (_, c) = rows_cols(&s);
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(MktError::NonFinite("softmax_rows"));
        }
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &v in row {
                let e = (v - max).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= z);
        }
        let ng = self.ng(&[x]);
        self.push(s, out, Op::SoftmaxRows(x.0), ng)
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (_, d) = rows_cols(&s);
        if s.is_empty() || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(MktError::shape(
                "layer_norm",
                format!("{s:?} with gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(self.value(x).len());
        let mut rstd = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        self.push(s, out, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, rstd }, ng)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x.0), ng)
    }

    /// Mean of the `k` largest entries of `v` (all entries, any shape) as a scalar.
    pub fn topk_mean(&mut self, v: Var, k: usize) -> Result<Var> {
        let n = self.value(v).len();
        if k == 0 || k > n {
            return Err(MktError::KOutOfRange { k, n });
        }
        let selected = topk_indices(self.value(v), k);
        let mean = selected.iter().map(|&i| self.value(v)[i]).sum::<f64>() / k as f64;
        let ng = self.ng(&[v]);
        self.push(vec![], vec![mean], Op::TopkMean { x: v.0, k, selected }, ng)
    }

    /// Row-wise top-k mean of a `[r×n]` node, giving `[r]`.
    pub fn topk_mean_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(MktError::shape("topk_mean_rows", format!("{s:?}")));
        }
        let (r, n) = (s[0], s[1]);
        if k == 0 || k > n {
            return Err(MktError::KOutOfRange { k, n });
        }
        let mut selected = Vec::with_capacity(r * k);
        let mut out = Vec::with_capacity(r);
        for (i, row) in self.value(x).chunks(n).enumerate() {
            let idx = topk_indices(row, k);
            out.push(idx.iter().map(|&j| row[j]).sum::<f64>() / k as f64);
            selected.extend(idx.into_iter().map(|j| i * n + j));
        }
        let ng = self.ng(&[x]);
        self.push(vec![r], out, Op::TopkMean { x: x.0, k, selected }, ng)
    }

    /// `Σ |x − target|` as a scalar; `target` never receives a gradient.
    pub fn l1_distance(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        if self.value(x).len() != target.len() {
            return Err(MktError::shape("l1_distance", format!("{:?} vs {}", self.shape(x), target.len())));
        }
        let s = self.value(x).iter().zip(target).map(|(a, b)| (a - b).abs()).sum();
        let ng = self.ng(&[x]);
        self.push(vec![], vec![s], Op::L1 { x: x.0, target: target.to_vec() }, ng)
    }

    /// `Σ_{p ∈ pos, n ∉ pos} max(1 + x_n − x_p, 0)` over a score vector.
    pub fn pairwise_hinge(&mut self, x: Var, positive: &[bool]) -> Result<Var> {
        let v = self.value(x);
        if v.len() != positive.len() {
            return Err(MktError::shape("pairwise_hinge", format!("{} scores, {} flags", v.len(), positive.len())));
        }
        let mut loss = 0.0;
        for p in (0..v.len()).filter(|&i| positive[i]) {
            for n in (0..v.len()).filter(|&i| !positive[i]) {
                loss += (1.0 + v[n] - v[p]).max(0.0);
            }
        }
        let ng = self.ng(&[x]);
        self.push(vec![], vec![loss], Op::Hinge { x: x.0, positive: positive.to_vec() }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(vec![], vec![s], Op::Sum(x.0), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[x]);
        self.push(vec![], vec![s], Op::Mean(x.0), ng)
    }

    /// Elementwise mean of same-shape nodes.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| MktError::shape("mean_of", "no inputs"))?;
        let shape = self.shape(*first).to_vec();
        let mut out = vec![0.0; self.value(*first).len()];
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(MktError::shape("mean_of", format!("{:?} vs {shape:?}", self.shape(x))));
            }
            out.iter_mut().zip(self.value(x)).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / xs.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(xs);
        self.push(shape, out, Op::MeanOf(xs.iter().map(|v| v.0).collect()), ng)
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (_, c) = rows_cols(&s);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(MktError::NonFinite("l2_normalize_rows"));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let ng = self.ng(&[x]);
        self.push(s, out, Op::L2NormalizeRows { x: x.0, norms }, ng)
    }

    /// Back-propagates from a scalar `loss` with seed gradient 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(MktError::DoubleBackward);
        }
        if self.node(loss).value.len() != 1 {
            return Err(MktError::NotScalar(self.node(loss).shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_node(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }

        for &(id, t) in &self.leaves {
            match &grads[id] {
                Some(g) => t.accumulate_grad(g),
                None => t.accumulate_grad(&vec![0.0; t.numel()]),
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn backprop_node(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |i: usize| nodes[i].needs_grad;
        let node = &nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                if needs(*a) {
                    accumulate(grads, *a, mm_bt(dy, &nodes[*b].value, m, n, k));
                }
                if needs(*b) {
                    accumulate(grads, *b, mm_at(&nodes[*a].value, dy, m, k, n));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, dy.to_vec());
                }
            }
            Op::AddBias(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if needs(*b) {
                    let c = nodes[*b].value.len();
                    let mut gb = vec![0.0; c];
                    for row in dy.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    accumulate(grads, *a, dy.iter().map(|d| d * c).collect());
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if needs(p) {
                        accumulate(grads, p, dy[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p].shape[1];
                    if needs(p) {
                        let mut g = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            g.extend_from_slice(&dy[r * total + off..r * total + off + c]);
                        }
                        accumulate(grads, p, g);
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                if needs(*x) {
                    let c = nodes[*x].shape[1];
                    let mut g = vec![0.0; nodes[*x].value.len()];
                    g[start * c..start * c + dy.len()].copy_from_slice(dy);
                    accumulate(grads, *x, g);
                }
            }
            Op::Transpose(x) => {
                if needs(*x) {
                    let (m, n) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                    let mut g = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] = dy[j * m + i];
                        }
                    }
                    accumulate(grads, *x, g);
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    accumulate(grads, *x, dy.to_vec());
                }
            }
            Op::SoftmaxRows(x) => {
                if needs(*x) {
                    let (_, c) = rows_cols(&node.shape);
                    let mut g = Vec::with_capacity(dy.len());
                    for (yr, dr) in node.value.chunks(c).zip(dy.chunks(c)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        g.extend(yr.iter().zip(dr).map(|(y, d)| y * (d - dot)));
                    }
                    accumulate(grads, *x, g);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (_, d) = rows_cols(&node.shape);
                let gv = &nodes[*gain].value;
                if needs(*x) {
                    let mut g = Vec::with_capacity(dy.len());
                    for ((dr, hr), &r) in dy.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let dxh: Vec<f64> = dr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(hr).map(|(a, h)| a * h).sum();
                        let df = d as f64;
                        g.extend(dxh.iter().zip(hr).map(|(a, h)| r / df * (df * a - s1 - h * s2)));
                    }
                    accumulate(grads, *x, g);
                }
                if needs(*gain) {
                    let mut g = vec![0.0; d];
                    for (dr, hr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gain, g);
                }
                if needs(*bias) {
                    let mut g = vec![0.0; d];
                    for dr in dy.chunks(d) {
                        g.iter_mut().zip(dr).for_each(|(a, b)| *a += b);
                    }
                    accumulate(grads, *bias, g);
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    let g = nodes[*x].value.iter().zip(dy).map(|(&v, d)| gelu_grad_scalar(v) * d).collect();
                    accumulate(grads, *x, g);
                }
            }
            Op::TopkMean { x, k, selected } => {
                if needs(*x) {
                    let mut g = vec![0.0; nodes[*x].value.len()];
                    let inv = 1.0 / *k as f64;
                    for (row, chunk) in selected.chunks(*k).enumerate() {
                        for &i in chunk {
                            g[i] += dy[row] * inv;
                        }
                    }
                    accumulate(grads, *x, g);
                }
            }
            Op::L1 { x, target } => {
                if needs(*x) {
                    let g = nodes[*x]
                        .value
                        .iter()
                        .zip(target)
                        .map(|(a, b)| {
                            let diff = a - b;
                            if diff > 0.0 {
                                dy[0]
                            } else if diff < 0.0 {
                                -dy[0]
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(grads, *x, g);
                }
            }
            Op::Hinge { x, positive } => {
                if needs(*x) {
                    let v = &nodes[*x].value;
                    let mut g = vec![0.0; v.len()];
                    for p in (0..v.len()).filter(|&i| positive[i]) {
                        for n in (0..v.len()).filter(|&i| !positive[i]) {
                            if 1.0 + v[n] - v[p] > 0.0 {
                                g[n] += dy[0];
                                g[p] -= dy[0];
                            }
                        }
                    }
                    accumulate(grads, *x, g);
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    accumulate(grads, *x, vec![dy[0]; nodes[*x].value.len()]);
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let n = nodes[*x].value.len();
                    accumulate(grads, *x, vec![dy[0] / n as f64; n]);
                }
            }
            Op::MeanOf(xs) => {
                let inv = 1.0 / xs.len() as f64;
                for &x in xs {
                    if needs(x) {
                        accumulate(grads, x, dy.iter().map(|d| d * inv).collect());
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if needs(*x) {
                    let (_, c) = rows_cols(&node.shape);
                    let mut g = Vec::with_capacity(dy.len());
                    for ((yr, dr), &n) in node.value.chunks(c).zip(dy.chunks(c)).zip(norms) {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        g.extend(yr.iter().zip(dr).map(|(y, d)| (d - y * dot) / n));
                    }
                    accumulate(grads, *x, g);
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Scale(..) => "scale",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(_) => "gelu",
        Op::TopkMean { .. } => "topk_mean",
        Op::L1 { .. } => "l1_distance",
        Op::Hinge { .. } => "pairwise_hinge",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::MeanOf(_) => "mean_of",
        Op::L2NormalizeRows { .. } => "l2_normalize_rows",
    }
}
