use crate::encoders::block::{block_forward, BlockParams, BlockVars};
use crate::error::{MktError, Result};
use crate::numerics::{visit_child, visit_child_mut, Graph, Parameters, Tensor, Var};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextSurrogateConfig {
    /// Token width `D_t`.
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Output embedding width `D_e`.
    pub embed_dim: usize,
    /// Context length `M`.
    pub prompt_len: usize,
    pub mlp_hidden: usize,
}

impl Default for TextSurrogateConfig {
    fn default() -> Self {
        TextSurrogateConfig { width: 16, blocks: 1, heads: 2, embed_dim: 8, prompt_len: 4, mlp_hidden: 32 }
    }
}

/// Frozen stand-in for a pretrained text tower: a small transformer over
/// `[context…, label token]`, pooled at the last position and projected
/// to the embedding space. Weights depend only on the seed.
#[derive(Debug, Clone)]
pub struct TextSurrogateParams {
    pub config: TextSurrogateConfig,
    pub seed: u64,
    pub blocks: Vec<BlockParams>,
    /// `D_t × D_e`
    pub proj: Tensor,
    /// Per-label token vectors, `d × D_t`.
    pub tokens: Tensor,
}

impl TextSurrogateParams {
    pub fn new(config: TextSurrogateConfig, seed: u64, tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[1] != config.width {
            return Err(MktError::shape(
                "text_surrogate",
                format!("tokens {:?} vs width {}", tokens.shape(), config.width),
            ));
        }
        let mut rng = stream(seed, "text-surrogate");
        let std = 1.0 / (config.width as f64).sqrt();
        let blocks = (0..config.blocks)
            .map(|_| BlockParams::init(config.width, config.heads, config.mlp_hidden, std, &mut rng))
            .collect::<Result<_>>()?;
        let proj = Tensor::randn(&[config.width, config.embed_dim], std, &mut rng);
        Ok(TextSurrogateParams { config, seed, blocks, proj, tokens })
    }

    pub fn num_labels(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> SurrogateVars {
        SurrogateVars {
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
            proj: g.param(&self.proj),
            tokens: g.param(&self.tokens),
        }
    }

    /// Embeds every label listed in `labels` (row indices into `tokens`)
    /// under `context`, outside of any training graph.
    pub fn embed(&self, context: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let ctx = g.constant(context);
        let mut rows = Vec::with_capacity(labels.len());
        for &l in labels {
            let t = token_row(&mut g, &w, l)?;
            rows.push(text_surrogate_encode(&mut g, ctx, t, &w)?);
        }
        let z = g.concat_rows(&rows)?;
        Ok(g.tensor(z))
    }
}

impl Parameters for TextSurrogateParams {
    fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            visit_child(b, &format!("blocks.{i}"), f);
        }
        f("proj".into(), &self.proj);
        f("tokens".into(), &self.tokens);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_mut(b, &format!("blocks.{i}"), f);
        }
        f("proj".into(), &mut self.proj);
        f("tokens".into(), &mut self.tokens);
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateVars {
    pub blocks: Vec<BlockVars>,
    pub proj: Var,
    pub tokens: Var,
}

/// Token vector of label row `label` as a `1 × D_t` node.
pub fn token_row(g: &mut Graph<'_>, w: &SurrogateVars, label: usize) -> Result<Var> {
    g.slice_rows(w.tokens, label, label + 1)
}

/// Runs the frozen transformer over `[context; token]`, takes the last
/// position, projects and L2-normalizes. Returns `1 × D_e`.
pub fn text_surrogate_encode(g: &mut Graph<'_>, context: Var, token: Var, w: &SurrogateVars) -> Result<Var> {
    let width = g.shape(w.proj)[0];
    let cs = g.shape(context);
    if cs.len() != 2 || cs[1] != width || g.shape(token) != [1, width] {
        return Err(MktError::shape(
            "text_surrogate_encode",
            format!("context {:?}, token {:?}, width {width}", g.shape(context), g.shape(token)),
        ));
    }
    let m = cs[0];
    let mut x = g.concat_rows(&[context, token])?;
    for b in &w.blocks {
        x = block_forward(g, x, b)?;
    }
    let last = g.slice_rows(x, m, m + 1)?;
    let e = g.matmul(last, w.proj)?;
    g.l2_normalize_rows(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::GRAD_TOL;

    fn surrogate(seed: u64) -> TextSurrogateParams {
        let cfg = TextSurrogateConfig::default();
        let tokens = Tensor::randn(&[5, cfg.width], 1.0, &mut stream(seed, "tokens"));
        TextSurrogateParams::new(cfg, seed, tokens).unwrap()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let s = surrogate(3);
        let ctx = Tensor::randn(&[4, 16], 1.0, &mut stream(3, "ctx"));
        let a = s.embed(&ctx, &[0, 1, 2, 3, 4]).unwrap();
        let b = surrogate(3).embed(&ctx, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(s.fingerprint(), surrogate(3).fingerprint());
        for r in 0..5 {
            let n: f64 = a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_context_width() {
        let s = surrogate(1);
        let ctx = Tensor::zeros(&[4, 8]);
        assert!(matches!(s.embed(&ctx, &[0]), Err(MktError::ShapeMismatch { .. })));
    }

    #[test]
    fn gradient_reaches_context_only() {
        for seed in 0..3 {
            let r = crate::selfcheck::surrogate_case(seed).unwrap();
            assert!(r.passed(GRAD_TOL), "{:?}", r.worst());
        }
        let s = surrogate(2);
        let ctx = Tensor::randn(&[4, 16], 1.0, &mut stream(2, "ctx")).with_requires_grad(true);
        let mut g = Graph::new();
        let w = s.bind(&mut g);
        let c = g.param(&ctx);
        let t = token_row(&mut g, &w, 1).unwrap();
        let e = text_surrogate_encode(&mut g, c, t, &w).unwrap();
        let l = g.sum(e).unwrap();
        g.backward(l).unwrap();
        assert!(ctx.has_grad());
        assert!(s.with_grad().is_empty());
    }
}
