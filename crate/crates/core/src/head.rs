//! Two-stream head and per-label scoring.
//!
//! The global head projects the class token, the local head projects each
//! patch token, and a label's score is its inner product with the global
//! embedding plus the top-k mean of its inner products with the patch
//! embeddings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::encoders::{patchify, vit_forward, BackboneOutput, VitParams, INIT_STD};
use crate::error::{MktError, Result};
use crate::labelspace::LabelEmbeddingTable;
use crate::numerics::format::{read_tensor, write_tensor};
use crate::numerics::{Graph, Parameters, Tensor, Var};

/// Which score terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadMode {
    #[default]
    Both,
    GlobalOnly,
    LocalOnly,
}

impl FromStr for HeadMode {
    type Err = MktError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(HeadMode::Both),
            "global" => Ok(HeadMode::GlobalOnly),
            "local" => Ok(HeadMode::LocalOnly),
            other => Err(MktError::Config(format!("head_mode must be both|global|local, got {other:?}"))),
        }
    }
}

impl HeadMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadMode::Both => "both",
            HeadMode::GlobalOnly => "global",
            HeadMode::LocalOnly => "local",
        }
    }
}

/// Global head: one linear map `D → D_e`. Local head: `D → D → D_e` with
/// GELU in between.
#[derive(Debug, Clone)]
pub struct TwoStreamParams {
    pub global_w: Tensor,
    pub local_w1: Tensor,
    pub local_b1: Tensor,
    pub local_w2: Tensor,
    pub local_b2: Tensor,
}

impl TwoStreamParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        TwoStreamParams {
            global_w: Tensor::randn(&[dim, embed_dim], INIT_STD, rng),
            local_w1: Tensor::randn(&[dim, dim], INIT_STD, rng),
            local_b1: Tensor::zeros(&[dim]),
            local_w2: Tensor::randn(&[dim, embed_dim], INIT_STD, rng),
            local_b2: Tensor::zeros(&[embed_dim]),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.global_w.shape()[1]
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> TwoStreamVars {
        TwoStreamVars {
            global_w: g.param(&self.global_w),
            local_w1: g.param(&self.local_w1),
            local_b1: g.param(&self.local_b1),
            local_w2: g.param(&self.local_w2),
            local_b2: g.param(&self.local_b2),
        }
    }
}

impl Parameters for TwoStreamParams {
    fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("global_w".into(), &self.global_w);
        f("local_w1".into(), &self.local_w1);
        f("local_b1".into(), &self.local_b1);
        f("local_w2".into(), &self.local_w2);
        f("local_b2".into(), &self.local_b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("global_w".into(), &mut self.global_w);
        f("local_w1".into(), &mut self.local_w1);
        f("local_b1".into(), &mut self.local_b1);
        f("local_w2".into(), &mut self.local_w2);
        f("local_b2".into(), &mut self.local_b2);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TwoStreamVars {
    pub global_w: Var,
    pub local_w1: Var,
    pub local_b1: Var,
    pub local_w2: Var,
    pub local_b2: Var,
}

/// `e_cls` is `1 × D_e`, `e_patch` is `N × D_e`.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingPair {
    pub cls: Var,
    pub patches: Var,
}

pub fn two_stream(g: &mut Graph<'_>, out: &BackboneOutput, w: &TwoStreamVars) -> Result<EmbeddingPair> {
    let cls = g.matmul(out.cls, w.global_w)?;
    let h = g.matmul(out.patches, w.local_w1)?;
    let h = g.add_bias(h, w.local_b1)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, w.local_w2)?;
    let patches = g.add_bias(h, w.local_b2)?;
    Ok(EmbeddingPair { cls, patches })
}

/// Scores for every row of `labels[d × D_e]`:
/// `s_i = ⟨z_i, e_cls⟩ + topk_mean_j ⟨z_i, e_j⟩`, restricted by `mode`.
pub fn score(g: &mut Graph<'_>, emb: &EmbeddingPair, labels: Var, k: usize, mode: HeadMode) -> Result<Var> {
    let (ls, cs, ps) = (g.shape(labels), g.shape(emb.cls), g.shape(emb.patches));
    if ls.len() != 2 || cs.len() != 2 || ps.len() != 2 || ls[1] != cs[1] || ls[1] != ps[1] || cs[0] != 1 {
        return Err(MktError::shape("score", format!("labels {ls:?}, e_cls {cs:?}, e_patch {ps:?}")));
    }
    let (d, n) = (ls[0], ps[0]);
    if k == 0 || k > n {
        return Err(MktError::KOutOfRange { k, n });
    }
    let global = match mode {
        HeadMode::LocalOnly => None,
        _ => {
            let ct = g.transpose(emb.cls)?;
            let s = g.matmul(labels, ct)?;
            Some(g.reshape(s, &[d])?)
        }
    };
    let local = match mode {
        HeadMode::GlobalOnly => None,
        _ => {
            let pt = g.transpose(emb.patches)?;
            let sims = g.matmul(labels, pt)?;
            Some(g.topk_mean_rows(sims, k)?)
        }
    };
    match (global, local) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(b),
        (None, None) => unreachable!("every head mode keeps at least one term"),
    }
}

/// Per-image per-label scores; column order follows `label_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    /// `B × d`
    pub scores: Tensor,
    pub label_ids: Vec<String>,
}

impl ScoreMatrix {
    pub fn new(scores: Tensor, label_ids: Vec<String>) -> Result<Self> {
        if scores.rank() != 2 || scores.shape()[1] != label_ids.len() {
            return Err(MktError::shape("score_matrix", format!("{:?} vs {} labels", scores.shape(), label_ids.len())));
        }
        Ok(ScoreMatrix { scores, label_ids })
    }

    pub fn images(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn labels(&self) -> usize {
        self.label_ids.len()
    }

    pub fn get(&self, image: usize, label: usize) -> f64 {
        self.scores.data()[image * self.labels() + label]
    }

    pub fn column(&self, label: usize) -> Vec<f64> {
        (0..self.images()).map(|i| self.get(i, label)).collect()
    }

    /// Header of label ids, then one comma-separated row per image.
    pub fn to_csv(&self) -> String {
        let mut out = self.label_ids.join(",");
        out.push('\n');
        for r in 0..self.images() {
            let row: Vec<String> = self.scores.row(r).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| MktError::Format("empty score CSV".into()))?;
        let label_ids: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut data = Vec::new();
        let mut rows = 0;
        for line in lines {
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| MktError::Format(format!("score CSV: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != label_ids.len() {
                return Err(MktError::Format(format!("row {rows} has {} values", vals.len())));
            }
            data.extend(vals);
            rows += 1;
        }
        ScoreMatrix::new(Tensor::new(vec![rows, label_ids.len()], data)?, label_ids)
    }

    /// Writes `<stem>.csv`, `<stem>.mkt` and `<stem>.labels`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| MktError::io(&csv, e))?;
        write_tensor(dir.join(format!("{stem}.mkt")), &self.scores)?;
        let labels = dir.join(format!("{stem}.labels"));
        fs::write(&labels, self.label_ids.join("\n") + "\n").map_err(|e| MktError::io(&labels, e))
    }

    /// Loads the binary twin written by [`ScoreMatrix::save`].
    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let scores = read_tensor(dir.join(format!("{stem}.mkt")))?;
        let labels = dir.join(format!("{stem}.labels"));
        let text = fs::read_to_string(&labels).map_err(|e| MktError::io(&labels, e))?;
        ScoreMatrix::new(scores, text.lines().map(str::to_string).collect())
    }
}

/// Encodes, projects and scores every image against `labels`. Images are
/// independent, so they are processed in parallel over shared frozen weights.
pub fn score_batch(
    images: &[Tensor],
    vit: &VitParams,
    heads: &TwoStreamParams,
    labels: &LabelEmbeddingTable,
    patch: usize,
    k: usize,
    mode: HeadMode,
) -> Result<ScoreMatrix> {
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| {
            let seq = patchify(img, patch)?;
            let mut g = Graph::new();
            let vw = vit.bind(&mut g);
            let hw = heads.bind(&mut g);
            let x = g.constant(&seq.patches);
            let z = g.constant(&labels.z);
            let out = vit_forward(&mut g, &vw, x)?;
            let emb = two_stream(&mut g, &out, &hw)?;
            let s = score(&mut g, &emb, z, k, mode)?;
            Ok(g.value(s).to_vec())
        })
        .collect::<Result<_>>()?;
    let d = labels.label_ids.len();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    ScoreMatrix::new(Tensor::new(vec![images.len(), d], data)?, labels.label_ids.clone())
}
