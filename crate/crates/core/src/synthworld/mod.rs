//! Seeded synthetic world: label tokens and categories, pixel prototypes
//! tied to the label embeddings through a frozen linear teacher, image
//! sampling, and dataset directories.

mod dataset;

pub use dataset::{content_hash, Dataset};

use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::encoders::{patchify, TextSurrogateConfig, TextSurrogateParams};
use crate::error::{MktError, Result};
use crate::labelspace::{build_label_table, LabelEmbeddingTable, LabelSplit, PromptState, Vocabulary};
use crate::numerics::Tensor;
use crate::rng::stream;

/// Largest allowed `‖flatten(q_c)·W_T − z_c‖`.
pub const CONSTRUCTION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    Zero,
    /// Unit-variance Gaussian clutter before the global noise.
    Noise,
}

impl FromStr for Background {
    type Err = MktError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Background::Zero),
            "noise" => Ok(Background::Noise),
            other => Err(MktError::Config(format!("background must be zero|noise, got {other:?}"))),
        }
    }
}

impl Background {
    pub fn as_str(&self) -> &'static str {
        match self {
            Background::Zero => "zero",
            Background::Noise => "noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub labels: usize,
    pub seen_fraction: f64,
    pub categories: usize,
    pub channels: usize,
    pub image_size: usize,
    pub patch: usize,
    pub surrogate: TextSurrogateConfig,
    /// Within-category spread of token vectors around the category center.
    pub token_spread: f64,
    pub sigma: f64,
    pub max_labels: usize,
    /// Chance that a cell not reserved for a positive shows background.
    pub background_prob: f64,
    pub background: Background,
    pub train_images: usize,
    pub test_images: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            labels: 20,
            seen_fraction: 0.8,
            categories: 4,
            channels: 1,
            image_size: 12,
            patch: 4,
            surrogate: TextSurrogateConfig::default(),
            token_spread: 0.5,
            sigma: 0.1,
            max_labels: 3,
            background_prob: 0.5,
            background: Background::Zero,
            train_images: 600,
            test_images: 200,
        }
    }
}

impl WorldConfig {
    pub fn embed_dim(&self) -> usize {
        self.surrogate.embed_dim
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn num_seen(&self) -> usize {
        (self.labels as f64 * self.seen_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(MktError::BadPatchSize { extent: self.image_size, patch: self.patch });
        }
        if !(0.0..=1.0).contains(&self.seen_fraction) {
            return Err(MktError::Config(format!("seen_fraction must be in [0, 1], got {}", self.seen_fraction)));
        }
        if self.labels == 0 || self.categories == 0 || self.channels == 0 {
            return Err(MktError::Config("labels, categories and channels must be positive".into()));
        }
        if self.max_labels == 0 || self.max_labels > self.num_patches() {
            return Err(MktError::Config(format!(
                "max_labels must be in 1..={} (one cell per positive)",
                self.num_patches()
            )));
        }
        if self.train_images == 0 || self.test_images == 0 {
            return Err(MktError::Config("train_images and test_images must be positive".into()));
        }
        if !(self.sigma >= 0.0) || !(0.0..=1.0).contains(&self.background_prob) {
            return Err(MktError::Config("sigma must be >= 0 and background_prob in [0, 1]".into()));
        }
        Ok(())
    }

    /// `key=value` pairs for every field, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let s = &self.surrogate;
        vec![
            ("labels", self.labels.to_string()),
            ("seen_fraction", format!("{:?}", self.seen_fraction)),
            ("categories", self.categories.to_string()),
            ("channels", self.channels.to_string()),
            ("image_size", self.image_size.to_string()),
            ("patch", self.patch.to_string()),
            ("embed_dim", s.embed_dim.to_string()),
            ("text_width", s.width.to_string()),
            ("text_blocks", s.blocks.to_string()),
            ("text_heads", s.heads.to_string()),
            ("text_mlp_hidden", s.mlp_hidden.to_string()),
            ("prompt_len", s.prompt_len.to_string()),
            ("token_spread", format!("{:?}", self.token_spread)),
            ("sigma", format!("{:?}", self.sigma)),
            ("max_labels", self.max_labels.to_string()),
            ("background_prob", format!("{:?}", self.background_prob)),
            ("background", self.background.as_str().to_string()),
            ("train_images", self.train_images.to_string()),
            ("test_images", self.test_images.to_string()),
        ]
    }

    /// Sets one field; `Ok(false)` if `key` is not a world key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| MktError::Config(format!("bad value {v:?} for {key}")))
        }
        let s = &mut self.surrogate;
        match key {
            "labels" => self.labels = p(key, value)?,
            "seen_fraction" => self.seen_fraction = p(key, value)?,
            "categories" => self.categories = p(key, value)?,
            "channels" => self.channels = p(key, value)?,
            "image_size" => self.image_size = p(key, value)?,
            "patch" => self.patch = p(key, value)?,
            "embed_dim" => s.embed_dim = p(key, value)?,
            "text_width" => s.width = p(key, value)?,
            "text_blocks" => s.blocks = p(key, value)?,
            "text_heads" => s.heads = p(key, value)?,
            "text_mlp_hidden" => s.mlp_hidden = p(key, value)?,
            "prompt_len" => s.prompt_len = p(key, value)?,
            "token_spread" => self.token_spread = p(key, value)?,
            "sigma" => self.sigma = p(key, value)?,
            "max_labels" => self.max_labels = p(key, value)?,
            "background_prob" => self.background_prob = p(key, value)?,
            "background" => self.background = value.parse()?,
            "train_images" => self.train_images = p(key, value)?,
            "test_images" => self.test_images = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Everything the generator knows about labels, prototypes and the teacher.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub split: LabelSplit,
    pub surrogate: TextSurrogateParams,
    /// Initial prompt context.
    pub prompt: PromptState,
    /// Label embeddings under the initial prompt, vocabulary order.
    pub table: LabelEmbeddingTable,
    /// Teacher map `W_T`, `(P²·C) × D_e`.
    pub teacher_map: Tensor,
    /// Flattened prototypes, `d × (P²·C)`, vocabulary order.
    pub prototypes: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `C × H × W`
    pub image: Tensor,
    pub positives: Vec<String>,
    /// Teacher embedding `o_dist`, length `D_e`.
    pub teacher: Vec<f64>,
}

fn normal(rng: &mut impl Rng, std: f64) -> f64 {
    Normal::new(0.0, std).expect("finite std").sample(rng)
}

/// Tokens: each seen label is its category center plus spread noise; each
/// unseen label is a convex combination of two seen labels of its category.
fn build_tokens(cfg: &WorldConfig, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
    let (d, w) = (cfg.labels, cfg.surrogate.width);
    let seen = cfg.num_seen();
    let centers: Vec<Vec<f64>> = (0..cfg.categories).map(|_| (0..w).map(|_| normal(rng, 1.0)).collect()).collect();
    let category: Vec<usize> = (0..d).map(|i| (if i < seen { i } else { i - seen }) % cfg.categories).collect();
    let mut tokens = vec![0.0; d * w];
    for i in 0..seen {
        let c = &centers[category[i]];
        for j in 0..w {
            tokens[i * w + j] = c[j] + cfg.token_spread * normal(rng, 1.0);
        }
    }
    for i in seen..d {
        let members: Vec<usize> = (0..seen).filter(|&s| category[s] == category[i]).collect();
        if members.len() < 2 {
            return Err(MktError::Config(format!(
                "category {} has {} seen labels; unseen labels need two",
                category[i],
                members.len()
            )));
        }
        let pick = sample_indices(rng, members.len(), 2);
        let (a, b) = (members[pick.index(0)], members[pick.index(1)]);
        let alpha = rng.random_range(0.3..=0.7);
        for j in 0..w {
            tokens[i * w + j] = alpha * tokens[a * w + j] + (1.0 - alpha) * tokens[b * w + j];
        }
    }
    Ok((Tensor::new(vec![d, w], tokens)?, category))
}

/// Minimum-norm `q_c` with `q_c·W_T = z_c` for every label row of `z`.
fn solve_prototypes(teacher_map: &Tensor, z: &Tensor) -> Result<Tensor> {
    let (rows, cols) = (teacher_map.shape()[0], teacher_map.shape()[1]);
    let w = DMatrix::from_row_slice(rows, cols, teacher_map.data());
    let svd = w.clone().svd(true, true);
    let tol = 1e-10 * svd.singular_values.max();
    let rank = svd.rank(tol);
    if rank < cols {
        return Err(MktError::InfeasibleConstraint { rank, needed: cols });
    }
    let pinv = svd.pseudo_inverse(tol).map_err(|e| MktError::Config(e.to_string()))?;
    let d = z.shape()[0];
    let zm = DMatrix::from_row_slice(d, cols, z.data());
    let q = &zm * &pinv;
    let residual = (&q * &w - &zm).row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    if residual > CONSTRUCTION_TOL {
        return Err(MktError::InfeasibleConstraint { rank, needed: cols });
    }
    let mut data = Vec::with_capacity(d * rows);
    for r in 0..d {
        data.extend(q.row(r).iter());
    }
    Tensor::new(vec![d, rows], data)
}

pub fn label_id(i: usize) -> String {
    format!("label{i:02}")
}

pub fn category_id(i: usize) -> String {
    format!("cat{i}")
}

impl SynthWorld {
    /// Deterministic in `(config, seed)`.
    pub fn build(config: WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "world");
        let (tokens, category) = build_tokens(&config, &mut rng)?;
        let ids: Vec<String> = (0..config.labels).map(label_id).collect();
        let vocab = Vocabulary::new(ids.clone(), category.iter().map(|&c| category_id(c)).collect())?;
        let seen = config.num_seen();
        let split = LabelSplit::new(ids[..seen].to_vec(), ids[seen..].to_vec())?;

        let surrogate = TextSurrogateParams::new(config.surrogate, seed, tokens)?;
        let mut prng = stream(seed, "prompt");
        let prompt = PromptState {
            context: Tensor::randn(&[config.surrogate.prompt_len, config.surrogate.width], 1.0, &mut prng),
            template_name: "seeded-context".into(),
        };
        let table = build_label_table(&ids, &vocab, &prompt, &surrogate)?;

        let pd = config.patch_dim();
        let mut trng = stream(seed, "teacher");
        let teacher_map = Tensor::randn(&[pd, config.embed_dim()], 1.0 / (pd as f64).sqrt(), &mut trng);
        let prototypes = solve_prototypes(&teacher_map, &table.z)?;
        Ok(SynthWorld { config, seed, vocab, split, surrogate, prompt, table, teacher_map, prototypes })
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.vocab.to_tsv().as_bytes());
        h.update(self.split.seen.join(",").as_bytes());
        h.update(b"|");
        h.update(self.split.unseen.join(",").as_bytes());
        for t in [&self.surrogate.tokens, &self.prompt.context, &self.table.z, &self.teacher_map, &self.prototypes] {
            t.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// `o_dist`: the mean flattened patch mapped through `W_T`.
    pub fn teacher_embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        let seq = patchify(image, self.config.patch)?;
        let (n, pd) = (seq.patches.shape()[0], seq.patches.shape()[1]);
        let de = self.config.embed_dim();
        let mut mean = vec![0.0; pd];
        for r in 0..n {
            mean.iter_mut().zip(seq.patches.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let w = self.teacher_map.data();
        Ok((0..de).map(|j| (0..pd).map(|i| mean[i] * w[i * de + j]).sum()).collect())
    }

    /// Paints label prototypes into grid cells (`None` is background), then
    /// adds pixel noise.
    pub fn render(&self, cells: &[Option<usize>], rng: &mut impl Rng) -> Result<Tensor> {
        let cfg = &self.config;
        let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch);
        let grid = s / p;
        if cells.len() != grid * grid {
            return Err(MktError::shape("render", format!("{} cells for a {grid}×{grid} grid", cells.len())));
        }
        let mut img = vec![0.0; c * s * s];
        for (cell, label) in cells.iter().enumerate() {
            let (gr, gc) = (cell / grid, cell % grid);
            for ch in 0..c {
                for r in 0..p {
                    for col in 0..p {
                        let v = match label {
                            Some(l) => self.prototypes.row(*l)[ch * p * p + r * p + col],
                            None => match cfg.background {
                                Background::Zero => 0.0,
                                Background::Noise => normal(rng, 1.0),
                            },
                        };
                        img[ch * s * s + (gr * p + r) * s + gc * p + col] = v;
                    }
                }
            }
        }
        if cfg.sigma > 0.0 {
            img.iter_mut().for_each(|v| *v += normal(rng, cfg.sigma));
        }
        Tensor::new(vec![c, s, s], img)
    }

    /// `n` images whose positives come from `pool`. Every positive owns at
    /// least one cell; the remaining cells are background with probability
    /// `background_prob`, else a random positive.
    pub fn sample(&self, n: usize, pool: &[String], rng: &mut impl Rng) -> Result<Vec<SynthSample>> {
        let cfg = &self.config;
        if pool.len() < cfg.max_labels {
            return Err(MktError::PoolTooSmall { pool: pool.len(), need: cfg.max_labels });
        }
        let rows = pool.iter().map(|id| self.vocab.index_of(id)).collect::<Result<Vec<_>>>()?;
        let cells_n = cfg.num_patches();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let m = rng.random_range(1..=cfg.max_labels);
            let chosen: Vec<usize> = sample_indices(rng, pool.len(), m).into_iter().collect();
            let order: Vec<usize> = sample_indices(rng, cells_n, cells_n).into_iter().collect();
            let mut cells = vec![None; cells_n];
            for (slot, &cell) in order.iter().enumerate() {
                cells[cell] = if slot < m {
                    Some(rows[chosen[slot]])
                } else if rng.random_bool(cfg.background_prob) {
                    None
                } else {
                    Some(rows[chosen[rng.random_range(0..m)]])
                };
            }
            let image = self.render(&cells, rng)?;
            let teacher = self.teacher_embed(&image)?;
            let mut positives: Vec<usize> = chosen.iter().map(|&i| rows[i]).collect();
            positives.sort_unstable();
            let positives = positives.into_iter().map(|r| self.vocab.ids[r].clone()).collect();
            out.push(SynthSample { image, positives, teacher });
        }
        Ok(out)
    }

    /// Train images over seen labels and test images over all labels, from
    /// separate named streams.
    pub fn generate(&self) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
        let train = self.sample(self.config.train_images, &self.split.seen, &mut stream(self.seed, "train-images"))?;
        let test = self.sample(self.config.test_images, &self.vocab.ids, &mut stream(self.seed, "test-images"))?;
        Ok((train, test))
    }
}
