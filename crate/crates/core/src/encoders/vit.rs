use rand::Rng;

use crate::encoders::block::{block_forward, BlockParams, BlockVars};
use crate::error::{MktError, Result};
use crate::numerics::{visit_child, visit_child_mut, Graph, Parameters, Tensor, Var};

/// Init std for projections, attention weights and token/position embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitConfig {
    pub channels: usize,
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig { channels: 1, image_size: 12, patch: 4, dim: 16, heads: 2, blocks: 2, mlp_hidden: 64 }
    }
}

impl VitConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(MktError::BadPatchSize { extent: self.image_size, patch: self.patch });
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(MktError::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// Flattened image patches `[N × P²·C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patches: Tensor,
    pub patch: usize,
    pub channels: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits a `C×H×W` image into raster-ordered patches, each flattened
/// channel-major (channel, then patch row, then patch column).
pub fn patchify(image: &Tensor, patch: usize) -> Result<PatchSequence> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(MktError::shape("patchify", format!("expected C×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    for extent in [h, w] {
        if patch == 0 || extent % patch != 0 {
            return Err(MktError::BadPatchSize { extent, patch });
        }
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let px = image.data();
    let mut out = Vec::with_capacity(gh * gw * pd);
    for py in 0..gh {
        for pxi in 0..gw {
            for ch in 0..c {
                for y in 0..patch {
                    let row = (ch * h + py * patch + y) * w + pxi * patch;
                    out.extend_from_slice(&px[row..row + patch]);
                }
            }
        }
    }
    Ok(PatchSequence { patches: Tensor::new(vec![gh * gw, pd], out)?, patch, channels: c })
}

#[derive(Debug, Clone)]
pub struct VitParams {
    /// `(P²·C) × D`
    pub patch_proj: Tensor,
    /// `1 × D`
    pub cls_token: Tensor,
    /// `(1+N) × D`
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
}

impl VitParams {
    pub fn init<R: Rng + ?Sized>(cfg: &VitConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let patch_proj = Tensor::randn(&[cfg.patch_dim(), cfg.dim], INIT_STD, rng);
        let cls_token = Tensor::randn(&[1, cfg.dim], INIT_STD, rng);
        let pos_embed = Tensor::randn(&[1 + cfg.num_patches(), cfg.dim], INIT_STD, rng);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams::init(cfg.dim, cfg.heads, cfg.mlp_hidden, INIT_STD, rng))
            .collect::<Result<_>>()?;
        Ok(VitParams { patch_proj, cls_token, pos_embed, blocks })
    }

    pub fn dim(&self) -> usize {
        self.cls_token.shape()[1]
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> VitVars {
        VitVars {
            patch_proj: g.param(&self.patch_proj),
            cls_token: g.param(&self.cls_token),
            pos_embed: g.param(&self.pos_embed),
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
        }
    }
}

impl Parameters for VitParams {
    fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("patch_proj".into(), &self.patch_proj);
        f("cls_token".into(), &self.cls_token);
        f("pos_embed".into(), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            visit_child(b, &format!("blocks.{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("patch_proj".into(), &mut self.patch_proj);
        f("cls_token".into(), &mut self.cls_token);
        f("pos_embed".into(), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_mut(b, &format!("blocks.{i}"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct VitVars {
    pub patch_proj: Var,
    pub cls_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
}

/// Final token states split into the class row and the patch rows.
#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput {
    /// `1 × D`
    pub cls: Var,
    /// `N × D`
    pub patches: Var,
}

/// `x₀ = [E_cls, patches·W_p] + E_pos`, then the pre-norm blocks.
pub fn vit_forward(g: &mut Graph<'_>, w: &VitVars, patches: Var) -> Result<BackboneOutput> {
    let n = g.shape(patches)[0];
    if g.shape(w.pos_embed)[0] != n + 1 {
        return Err(MktError::shape(
            "vit_forward",
            format!("{n} patches but position embedding has {} rows", g.shape(w.pos_embed)[0]),
        ));
    }
    let projected = g.matmul(patches, w.patch_proj)?;
    let tokens = g.concat_rows(&[w.cls_token, projected])?;
    let mut x = g.add(tokens, w.pos_embed)?;
    for b in &w.blocks {
        x = block_forward(g, x, b)?;
    }
    let cls = g.slice_rows(x, 0, 1)?;
    let patches = g.slice_rows(x, 1, n + 1)?;
    Ok(BackboneOutput { cls, patches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::block::msa;
    use crate::numerics::gradcheck::GRAD_TOL;
    use crate::numerics::LN_EPS;
    use crate::rng::stream;

    fn image(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| i as f64)
    }

    #[test]
    fn patchify_single_patch() {
        let seq = patchify(&image(1, 2, 2), 2).unwrap();
        assert_eq!(seq.patches.shape(), &[1, 4]);
        assert_eq!(seq.patches.data(), &[0., 1., 2., 3.]);
    }

    #[test]
    fn patchify_matches_index_arithmetic() {
        let img = image(1, 4, 4);
        let seq = patchify(&img, 2).unwrap();
        assert_eq!(seq.len(), 4);
        // Patch (py, px), offset (y, x) lives at pixel (2py+y, 2px+x).
        for py in 0..2 {
            for px in 0..2 {
                let n = py * 2 + px;
                for y in 0..2 {
                    for x in 0..2 {
                        let pixel = ((2 * py + y) * 4 + 2 * px + x) as f64;
                        assert_eq!(seq.patches.row(n)[y * 2 + x], pixel);
                    }
                }
            }
        }
    }

    #[test]
    fn patchify_multichannel_shape() {
        let seq = patchify(&image(3, 8, 8), 4).unwrap();
        assert_eq!(seq.patches.shape(), &[4, 48]);
        // Channel-major: second channel's first pixel of patch 0 at offset 16.
        assert_eq!(seq.patches.row(0)[16], 64.0);
        assert!(matches!(patchify(&image(1, 6, 6), 4), Err(MktError::BadPatchSize { .. })));
    }

    fn tiny_cfg() -> VitConfig {
        VitConfig { channels: 1, image_size: 4, patch: 2, dim: 8, heads: 2, blocks: 2, mlp_hidden: 16 }
    }

    #[test]
    fn empty_backbone_is_projection_plus_position() {
        let cfg = VitConfig { blocks: 0, ..tiny_cfg() };
        let mut rng = stream(1, "t");
        let p = VitParams::init(&cfg, &mut rng).unwrap();
        let x = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let w = p.bind(&mut g);
        let xv = g.constant(&x);
        let out = vit_forward(&mut g, &w, xv).unwrap();
        assert_eq!(g.value(out.cls), p.cls_token.row(0).iter().zip(p.pos_embed.row(0)).map(|(a, b)| a + b).collect::<Vec<_>>());
        for r in 0..4 {
            for c in 0..8 {
                let proj: f64 = (0..4).map(|k| x.row(r)[k] * p.patch_proj.row(k)[c]).sum();
                let want = proj + p.pos_embed.row(r + 1)[c];
                assert_eq!(g.value(out.patches)[r * 8 + c], want);
            }
        }
    }

    fn identity_block(dim: usize) -> BlockParams {
        BlockParams {
            ln1_gain: Tensor::ones(&[dim]),
            ln1_bias: Tensor::zeros(&[dim]),
            wq: vec![Tensor::eye(dim)],
            wk: vec![Tensor::eye(dim)],
            wv: vec![Tensor::eye(dim)],
            wo: Tensor::eye(dim),
            ln2_gain: Tensor::ones(&[dim]),
            ln2_bias: Tensor::zeros(&[dim]),
            mlp_w1: Tensor::zeros(&[dim, 4]),
            mlp_b1: Tensor::zeros(&[4]),
            mlp_w2: Tensor::zeros(&[4, dim]),
            mlp_b2: Tensor::zeros(&[dim]),
        }
    }

    #[test]
    fn identity_weights_trace() {
        // One token, one head, identity Q/K/V/O and zero MLP:
        // softmax over a single key is 1, so x₁ = x₀ + LN(x₀).
        let dim = 3;
        let block = identity_block(dim);
        let patch = Tensor::new(vec![1, dim], vec![1.0, 2.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let b = block.bind(&mut g);
        let x = g.constant(&patch);
        let a = msa(&mut g, x, &b.attn).unwrap();
        assert_eq!(g.value(a), patch.data());

        let y = crate::encoders::block::block_forward(&mut g, x, &b).unwrap();
        let v = patch.data();
        let mean = v.iter().sum::<f64>() / 3.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        let want: Vec<f64> = v.iter().map(|x| x + (x - mean) / (var + LN_EPS).sqrt()).collect();
        for (a, b) in g.value(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn msa_identical_tokens_identical_rows() {
        let mut rng = stream(2, "t");
        let b = BlockParams::init(8, 2, 8, 0.5, &mut rng).unwrap();
        let row = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let bv = b.bind(&mut g);
        let r = g.constant(&row);
        let x = g.concat_rows(&[r, r]).unwrap();
        let y = msa(&mut g, x, &bv.attn).unwrap();
        let v = g.value(y);
        assert_eq!(&v[..8], &v[8..]);
    }

    /// Straightforward per-head loops, independent of the graph ops.
    fn naive_msa(x: &Tensor, b: &BlockParams) -> Vec<f64> {
        let (t, d) = (x.shape()[0], x.shape()[1]);
        let proj = |w: &Tensor| {
            let dh = w.shape()[1];
            let mut out = vec![vec![0.0; dh]; t];
            for i in 0..t {
                for j in 0..dh {
                    for k in 0..d {
                        out[i][j] += x.row(i)[k] * w.data()[k * dh + j];
                    }
                }
            }
            out
        };
        let mut cat = vec![Vec::<f64>::new(); t];
        for h in 0..b.heads() {
            let (q, k, v) = (proj(&b.wq[h]), proj(&b.wk[h]), proj(&b.wv[h]));
            let dh = q[0].len();
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    cat[i].push((0..t).map(|j| e[j] / z * v[j][c]).sum());
                }
            }
        }
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|k| cat[i][k] * b.wo.data()[k * d + j]).sum();
            }
        }
        out
    }

    #[test]
    fn msa_matches_naive_loops() {
        for seed in 0..10 {
            let mut rng = stream(seed, "msa");
            let b = BlockParams::init(8, 2, 8, 0.4, &mut rng).unwrap();
            let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
            let mut g = Graph::new();
            let bv = b.bind(&mut g);
            let xv = g.constant(&x);
            let y = msa(&mut g, xv, &bv.attn).unwrap();
            for (a, b) in g.value(y).iter().zip(naive_msa(&x, &b)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_shapes() {
        let cfg = VitConfig::default();
        let p = VitParams::init(&cfg, &mut stream(0, "t")).unwrap();
        let img = Tensor::randn(&[1, 12, 12], 1.0, &mut stream(1, "t"));
        let seq = patchify(&img, cfg.patch).unwrap();
        let mut g = Graph::new();
        let w = p.bind(&mut g);
        let x = g.constant(&seq.patches);
        let out = vit_forward(&mut g, &w, x).unwrap();
        assert_eq!(g.shape(out.cls), &[1, 16]);
        assert_eq!(g.shape(out.patches), &[9, 16]);
    }

    #[test]
    fn patch_permutation_equivariance_without_positions() {
        let cfg = tiny_cfg();
        let mut rng = stream(5, "t");
        let mut p = VitParams::init(&cfg, &mut rng).unwrap();
        p.blocks = (0..2).map(|_| BlockParams::init(8, 2, 16, 0.3, &mut rng).unwrap()).collect();
        p.pos_embed = Tensor::zeros(&[5, 8]);
        let x = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor::new(vec![4, 4], perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
        let run = |inp: &Tensor| {
            let mut g = Graph::new();
            let w = p.bind(&mut g);
            let v = g.constant(inp);
            let out = vit_forward(&mut g, &w, v).unwrap();
            (g.value(out.cls).to_vec(), g.tensor(out.patches))
        };
        let (c0, o0) = run(&x);
        let (c1, o1) = run(&xp);
        for (a, b) in c0.iter().zip(&c1) {
            assert!((a - b).abs() < 1e-12);
        }
        for (r, &src) in perm.iter().enumerate() {
            for (a, b) in o1.row(r).iter().zip(o0.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vit_gradients_match_finite_differences() {
        for seed in 0..3 {
            let r = crate::selfcheck::vit_case(seed).unwrap();
            assert!(r.passed(GRAD_TOL), "seed {seed}: {:?}", r.worst());
            assert!(r.tensors.iter().all(|t| t.analytic_norm > 0.0), "a parameter got no gradient");
        }
    }
}
