use rand::Rng;

use crate::error::{MktError, Result};
use crate::numerics::{Graph, Parameters, Tensor, Var};

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    /// Per-head `D × d_h` projections.
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    /// `D × D` output projection.
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

impl BlockParams {
    /// Normal(0, `std`) weights, unit norm gains, zero biases.
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, mlp_hidden: usize, std: f64, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(MktError::Config(format!("width {dim} is not divisible into {heads} heads")));
        }
        let dh = dim / heads;
        let per_head = |rng: &mut R| (0..heads).map(|_| Tensor::randn(&[dim, dh], std, rng)).collect::<Vec<_>>();
        let wq = per_head(rng);
        let wk = per_head(rng);
        let wv = per_head(rng);
        Ok(BlockParams {
            ln1_gain: Tensor::ones(&[dim]),
            ln1_bias: Tensor::zeros(&[dim]),
            wq,
            wk,
            wv,
            wo: Tensor::randn(&[dim, dim], std, rng),
            ln2_gain: Tensor::ones(&[dim]),
            ln2_bias: Tensor::zeros(&[dim]),
            mlp_w1: Tensor::randn(&[dim, mlp_hidden], std, rng),
            mlp_b1: Tensor::zeros(&[mlp_hidden]),
            mlp_w2: Tensor::randn(&[mlp_hidden, dim], std, rng),
            mlp_b2: Tensor::zeros(&[dim]),
        })
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> BlockVars {
        BlockVars {
            ln1: (g.param(&self.ln1_gain), g.param(&self.ln1_bias)),
            attn: AttentionVars {
                wq: self.wq.iter().map(|t| g.param(t)).collect(),
                wk: self.wk.iter().map(|t| g.param(t)).collect(),
                wv: self.wv.iter().map(|t| g.param(t)).collect(),
                wo: g.param(&self.wo),
            },
            ln2: (g.param(&self.ln2_gain), g.param(&self.ln2_bias)),
            mlp: (g.param(&self.mlp_w1), g.param(&self.mlp_b1), g.param(&self.mlp_w2), g.param(&self.mlp_b2)),
        }
    }
}

impl Parameters for BlockParams {
    fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("ln1_gain".into(), &self.ln1_gain);
        f("ln1_bias".into(), &self.ln1_bias);
        for (i, t) in self.wq.iter().enumerate() {
            f(format!("wq.{i}"), t);
        }
        for (i, t) in self.wk.iter().enumerate() {
            f(format!("wk.{i}"), t);
        }
        for (i, t) in self.wv.iter().enumerate() {
            f(format!("wv.{i}"), t);
        }
        f("wo".into(), &self.wo);
        f("ln2_gain".into(), &self.ln2_gain);
        f("ln2_bias".into(), &self.ln2_bias);
        f("mlp_w1".into(), &self.mlp_w1);
        f("mlp_b1".into(), &self.mlp_b1);
        f("mlp_w2".into(), &self.mlp_w2);
        f("mlp_b2".into(), &self.mlp_b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("ln1_gain".into(), &mut self.ln1_gain);
        f("ln1_bias".into(), &mut self.ln1_bias);
        for (i, t) in self.wq.iter_mut().enumerate() {
            f(format!("wq.{i}"), t);
        }
        for (i, t) in self.wk.iter_mut().enumerate() {
            f(format!("wk.{i}"), t);
        }
        for (i, t) in self.wv.iter_mut().enumerate() {
            f(format!("wv.{i}"), t);
        }
        f("wo".into(), &mut self.wo);
        f("ln2_gain".into(), &mut self.ln2_gain);
        f("ln2_bias".into(), &mut self.ln2_bias);
        f("mlp_w1".into(), &mut self.mlp_w1);
        f("mlp_b1".into(), &mut self.mlp_b1);
        f("mlp_w2".into(), &mut self.mlp_w2);
        f("mlp_b2".into(), &mut self.mlp_b2);
    }
}

#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub attn: AttentionVars,
    pub ln2: (Var, Var),
    pub mlp: (Var, Var, Var, Var),
}

/// Multi-head scaled dot-product self-attention over the rows of `x[T×D]`:
/// `[head_1, …, head_H]·W_O` with `head_i = softmax(Q_i K_iᵀ/√d_h)·V_i`.
pub fn msa(g: &mut Graph<'_>, x: Var, w: &AttentionVars) -> Result<Var> {
    let mut heads = Vec::with_capacity(w.wq.len());
    for h in 0..w.wq.len() {
        let q = g.matmul(x, w.wq[h])?;
        let k = g.matmul(x, w.wk[h])?;
        let v = g.matmul(x, w.wv[h])?;
        let dh = g.shape(q)[1];
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax_rows(logits)?;
        heads.push(g.matmul(attn, v)?);
    }
    let cat = g.concat_cols(&heads)?;
    g.matmul(cat, w.wo)
}

/// `y = x + MSA(LN(x)); out = y + MLP(LN(y))`
pub fn block_forward(g: &mut Graph<'_>, x: Var, b: &BlockVars) -> Result<Var> {
    let n1 = g.layer_norm(x, b.ln1.0, b.ln1.1)?;
    let a = msa(g, n1, &b.attn)?;
    let y = g.add(x, a)?;
    let n2 = g.layer_norm(y, b.ln2.0, b.ln2.1)?;
    let (w1, b1, w2, b2) = b.mlp;
    let h = g.matmul(n2, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, w2)?;
    let m = g.add_bias(h, b2)?;
    g.add(y, m)
}
