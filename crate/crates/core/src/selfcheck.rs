//! Finite-difference checks of every differentiable operation, on small
//! random instances seeded per case.

use rand::Rng;
use rayon::prelude::*;

use crate::encoders::{
    msa, text_surrogate_encode, vit_forward, AttentionVars, TextSurrogateConfig, TextSurrogateParams, VitConfig,
    VitParams,
};
use crate::error::Result;
use crate::head::{score, two_stream, EmbeddingPair, HeadMode, TwoStreamParams, TwoStreamVars};
use crate::labelspace::label_table_node;
use crate::model::{encode_image, Model};
use crate::numerics::gradcheck::{check_fn, check_gradients, GradReport, GRAD_TOL};
use crate::numerics::{visit_child, visit_child_mut, Graph, Parameters, Tensor, Var};
use crate::objectives::{distill_loss, ranking_loss, stage1_loss, stage2_loss};
use crate::rng::{stream, StreamRng};

/// Every checked operation, in report order.
pub const OPS: &[&str] = &[
    "matmul",
    "softmax",
    "layernorm",
    "gelu",
    "topk_mean",
    "msa",
    "vit_forward",
    "two_stream",
    "score",
    "ranking_loss",
    "distill_loss",
    "text_surrogate_encode",
    "stage1_loss",
    "stage2_loss",
];

fn rng(op: &str, seed: u64) -> StreamRng {
    stream(seed, &format!("selfcheck-{op}"))
}

fn randn(shape: &[usize], std: f64, rng: &mut StreamRng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

/// `Σ x ⊙ w` as a scalar node, for a constant `w` of `x`'s size.
fn readout(g: &mut Graph<'_>, x: Var, w: &Tensor) -> Result<Var> {
    let n = g.value(x).len();
    let flat = g.reshape(x, &[1, n])?;
    let wv = g.constant(w);
    let y = g.matmul(flat, wv)?;
    g.sum(y)
}

fn weights(n: usize, rng: &mut StreamRng) -> Tensor {
    randn(&[n, 1], 1.0, rng)
}

/// Adds `N(0, std)` to every tensor so gradients are not dominated by the
/// small initialization.
fn perturb<P: Parameters>(p: &mut P, std: f64, rng: &mut StreamRng) {
    p.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v += std * crate::numerics::Tensor::randn(&[1], 1.0, rng).item();
        }
    });
}

fn tiny_vit() -> VitConfig {
    VitConfig { channels: 1, image_size: 4, patch: 2, dim: 8, heads: 2, blocks: 2, mlp_hidden: 16 }
}

fn tiny_surrogate() -> TextSurrogateConfig {
    TextSurrogateConfig { width: 8, blocks: 1, heads: 2, embed_dim: 6, prompt_len: 3, mlp_hidden: 16 }
}

/// Backbone gradients for a readout touching both class and patch rows.
pub fn vit_case(seed: u64) -> Result<GradReport> {
    let mut r = rng("vit_forward", seed);
    let cfg = tiny_vit();
    let mut p = VitParams::init(&cfg, &mut r)?;
    perturb(&mut p, 0.3, &mut r);
    p.set_requires_grad(true);
    let patches = randn(&[cfg.num_patches(), cfg.patch_dim()], 1.0, &mut r);
    let w = weights((1 + cfg.num_patches()) * cfg.dim, &mut r);
    check_gradients(&p, |g, p: &VitParams| {
        let vw = p.bind(g);
        let x = g.constant(&patches);
        let out = vit_forward(g, &vw, x)?;
        let all = g.concat_rows(&[out.cls, out.patches])?;
        readout(g, all, &w)
    })
}

#[derive(Debug, Clone)]
struct SurrogateCase {
    context: Tensor,
    surrogate: TextSurrogateParams,
}

impl Parameters for SurrogateCase {
    fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("context".into(), &self.context);
        visit_child(&self.surrogate, "surrogate", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("context".into(), &mut self.context);
        visit_child_mut(&mut self.surrogate, "surrogate", f);
    }
}

/// Label embeddings differentiated with respect to the context only; the
/// surrogate weights stay frozen.
pub fn surrogate_case(seed: u64) -> Result<GradReport> {
    let mut r = rng("text_surrogate_encode", seed);
    let cfg = tiny_surrogate();
    let tokens = randn(&[3, cfg.width], 1.0, &mut r);
    let case = SurrogateCase {
        context: randn(&[cfg.prompt_len, cfg.width], 1.0, &mut r).with_requires_grad(true),
        surrogate: TextSurrogateParams::new(cfg, seed, tokens)?,
    };
    let w = weights(3 * cfg.embed_dim, &mut r);
    check_gradients(&case, |g, p: &SurrogateCase| {
        let sv = p.surrogate.bind(g);
        let ctx = g.param(&p.context);
        let mut rows = Vec::new();
        for l in 0..3 {
            let t = g.slice_rows(sv.tokens, l, l + 1)?;
            rows.push(text_surrogate_encode(g, ctx, t, &sv)?);
        }
        let z = g.concat_rows(&rows)?;
        readout(g, z, &w)
    })
}

fn tiny_model(r: &mut StreamRng, context: &Tensor) -> Result<Model> {
    let mut m = Model::init(tiny_vit(), tiny_surrogate().embed_dim, context, r.random())?;
    perturb(&mut m.vit, 0.3, r);
    perturb(&mut m.heads, 0.3, r);
    Ok(m)
}

fn positives(d: usize, r: &mut StreamRng) -> Vec<bool> {
    let mut p: Vec<bool> = (0..d).map(|_| r.random_bool(0.5)).collect();
    p[0] = true;
    p[d - 1] = false;
    p
}

/// Full stage-1 objective through backbone and heads for two images.
pub fn stage1_case(seed: u64) -> Result<GradReport> {
    let mut r = rng("stage1_loss", seed);
    let vc = tiny_vit();
    let de = tiny_surrogate().embed_dim;
    let ctx = Tensor::zeros(&[1, 1]);
    let mut m = tiny_model(&mut r, &ctx)?;
    m.for_stage1();
    let d = 5;
    let labels = randn(&[d, de], 1.0, &mut r);
    let images: Vec<Tensor> = (0..2).map(|_| randn(&[vc.num_patches(), vc.patch_dim()], 1.0, &mut r)).collect();
    let teachers: Vec<Vec<f64>> = (0..2).map(|_| randn(&[de], 1.0, &mut r).into_data()).collect();
    let pos: Vec<Vec<bool>> = (0..2).map(|_| positives(d, &mut r)).collect();
    let k = r.random_range(1..=vc.num_patches());
    check_gradients(&m, |g, m: &Model| {
        let w = m.bind(g);
        let z = g.constant(&labels);
        let mut scores = Vec::new();
        let mut students = Vec::new();
        for img in &images {
            let x = g.constant(img);
            let (_, emb) = encode_image(g, &w, x)?;
            scores.push(score(g, &emb, z, k, HeadMode::Both)?);
            students.push(emb.cls);
        }
        let t: Vec<&[f64]> = teachers.iter().map(Vec::as_slice).collect();
        Ok(stage1_loss(g, &scores, &pos, &students, &t, 1.0)?.total)
    })
}

#[derive(Debug, Clone)]
struct Stage2Case {
    model: Model,
    surrogate: TextSurrogateParams,
}

impl Parameters for Stage2Case {
    fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        visit_child(&self.model, "model", f);
        visit_child(&self.surrogate, "surrogate", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        visit_child_mut(&mut self.model, "model", f);
        visit_child_mut(&mut self.surrogate, "surrogate", f);
    }
}

/// Stage-2 objective: label table regenerated from the context in-graph,
/// everything else frozen.
pub fn stage2_case(seed: u64) -> Result<GradReport> {
    let mut r = rng("stage2_loss", seed);
    let vc = tiny_vit();
    let sc = tiny_surrogate();
    let d = 4;
    let context = randn(&[sc.prompt_len, sc.width], 1.0, &mut r);
    let mut model = tiny_model(&mut r, &context)?;
    model.for_stage2();
    let case = Stage2Case { model, surrogate: TextSurrogateParams::new(sc, seed, randn(&[d, sc.width], 1.0, &mut r))? };
    let images: Vec<Tensor> = (0..2).map(|_| randn(&[vc.num_patches(), vc.patch_dim()], 1.0, &mut r)).collect();
    let pos: Vec<Vec<bool>> = (0..2).map(|_| positives(d, &mut r)).collect();
    let k = r.random_range(1..=vc.num_patches());
    let rows: Vec<usize> = (0..d).collect();
    check_gradients(&case, |g, c: &Stage2Case| {
        let w = c.model.bind(g);
        let sv = c.surrogate.bind(g);
        let z = label_table_node(g, w.context, &sv, &rows)?;
        let mut scores = Vec::new();
        for img in &images {
            let x = g.constant(img);
            let (_, emb) = encode_image(g, &w, x)?;
            scores.push(score(g, &emb, z, k, HeadMode::Both)?);
        }
        Ok(stage2_loss(g, &scores, &pos)?.total)
    })
}

/// Runs instance `seed` of the named check.
pub fn run_case(op: &str, seed: u64) -> Result<GradReport> {
    let mut r = rng(op, seed);
    match op {
        "matmul" => {
            let (a, b) = (randn(&[3, 4], 1.0, &mut r), randn(&[4, 2], 1.0, &mut r));
            let w = weights(6, &mut r);
            check_fn(&[a, b], |g, v| {
                let y = g.matmul(v[0], v[1])?;
                readout(g, y, &w)
            })
        }
        "softmax" => {
            let x = randn(&[3, 4], 2.0, &mut r);
            let w = weights(12, &mut r);
            check_fn(&[x], |g, v| {
                let y = g.softmax_rows(v[0])?;
                readout(g, y, &w)
            })
        }
        "layernorm" => {
            let x = randn(&[3, 5], 1.5, &mut r);
            let gain = Tensor::from_fn(&[5], |_| 1.0 + 0.3 * r.random::<f64>());
            let bias = randn(&[5], 0.5, &mut r);
            let w = weights(15, &mut r);
            check_fn(&[x, gain, bias], |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                readout(g, y, &w)
            })
        }
        "gelu" => {
            let x = randn(&[4, 3], 2.0, &mut r);
            let w = weights(12, &mut r);
            check_fn(&[x], |g, v| {
                let y = g.gelu(v[0])?;
                readout(g, y, &w)
            })
        }
        "topk_mean" => {
            let x = randn(&[9], 1.0, &mut r);
            let k = r.random_range(1..=9);
            check_fn(&[x], |g, v| g.topk_mean(v[0], k))
        }
        "msa" => {
            let mut inputs = vec![randn(&[3, 8], 1.0, &mut r)];
            inputs.extend((0..6).map(|_| randn(&[8, 4], 0.5, &mut r)));
            inputs.push(randn(&[8, 8], 0.5, &mut r));
            let w = weights(24, &mut r);
            check_fn(&inputs, |g, v| {
                let att = AttentionVars { wq: v[1..3].to_vec(), wk: v[3..5].to_vec(), wv: v[5..7].to_vec(), wo: v[7] };
                let y = msa(g, v[0], &att)?;
                readout(g, y, &w)
            })
        }
        "vit_forward" => vit_case(seed),
        "two_stream" => {
            let mut p = TwoStreamParams::init(8, 6, &mut r);
            perturb(&mut p, 0.5, &mut r);
            let inputs = vec![
                randn(&[1, 8], 1.0, &mut r),
                randn(&[4, 8], 1.0, &mut r),
                p.global_w,
                p.local_w1,
                p.local_b1,
                p.local_w2,
                p.local_b2,
            ];
            let w = weights(30, &mut r);
            check_fn(&inputs, |g, v| {
                let hw = TwoStreamVars { global_w: v[2], local_w1: v[3], local_b1: v[4], local_w2: v[5], local_b2: v[6] };
                let out = crate::encoders::BackboneOutput { cls: v[0], patches: v[1] };
                let e = two_stream(g, &out, &hw)?;
                let all = g.concat_rows(&[e.cls, e.patches])?;
                readout(g, all, &w)
            })
        }
        "score" => {
            let inputs = vec![randn(&[1, 6], 1.0, &mut r), randn(&[5, 6], 1.0, &mut r), randn(&[4, 6], 1.0, &mut r)];
            let k = r.random_range(1..=5);
            let w = weights(4, &mut r);
            check_fn(&inputs, |g, v| {
                let s = score(g, &EmbeddingPair { cls: v[0], patches: v[1] }, v[2], k, HeadMode::Both)?;
                readout(g, s, &w)
            })
        }
        "ranking_loss" => {
            let s = randn(&[7], 0.8, &mut r);
            let pos = positives(7, &mut r);
            check_fn(&[s], |g, v| Ok(ranking_loss(g, v[0], &pos)?.0))
        }
        "distill_loss" => {
            let s = randn(&[1, 6], 1.0, &mut r);
            let t = randn(&[6], 1.0, &mut r).into_data();
            check_fn(&[s], |g, v| distill_loss(g, v[0], &t))
        }
        "text_surrogate_encode" => surrogate_case(seed),
        "stage1_loss" => stage1_case(seed),
        "stage2_loss" => stage2_case(seed),
        other => Err(crate::error::MktError::Config(format!("unknown gradient check {other:?}"))),
    }
}

#[derive(Debug, Clone)]
pub struct CaseSummary {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub checked_values: usize,
}

impl CaseSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_TOL
    }
}

/// `instances` seeds of every operation in [`OPS`].
pub fn run_suite(instances: usize) -> Result<Vec<CaseSummary>> {
    let jobs: Vec<(usize, u64)> = (0..OPS.len()).flat_map(|o| (0..instances as u64).map(move |s| (o, s))).collect();
    let reports: Vec<(usize, GradReport)> =
        jobs.par_iter().map(|&(o, s)| Ok((o, run_case(OPS[o], s)?))).collect::<Result<_>>()?;
    Ok(OPS
        .iter()
        .enumerate()
        .map(|(o, &op)| {
            let mine: Vec<&GradReport> = reports.iter().filter(|(i, _)| *i == o).map(|(_, r)| r).collect();
            CaseSummary {
                op,
                instances: mine.len(),
                max_rel_err: mine.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max),
                checked_values: mine.iter().map(|r| r.checked_values).sum(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_cases_pass() {
        for seed in 0..2 {
            for op in ["stage1_loss", "stage2_loss"] {
                let r = run_case(op, seed).unwrap();
                assert!(r.passed(GRAD_TOL), "{op} seed {seed}: {:?}", r.worst());
            }
        }
    }

    #[test]
    fn stage2_checks_only_the_context() {
        let r = stage2_case(0).unwrap();
        let names: Vec<&str> = r.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, vec!["model.context"]);
        assert!(r.tensors[0].analytic_norm > 0.0);
    }

    #[test]
    fn unknown_case_is_rejected() {
        assert!(run_case("conv2d", 0).is_err());
    }
}
