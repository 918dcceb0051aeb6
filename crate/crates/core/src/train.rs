//! Two-stage training and test-set scoring.
//!
//! Stage 1 fits backbone and heads with ranking plus distillation against
//! a fixed seen-label table. Stage 2 freezes them and tunes the prompt
//! context, regenerating the label table inside every step's graph.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::encoders::patchify;
use crate::error::{MktError, Result};
use crate::head::{score, EmbeddingPair, HeadMode, ScoreMatrix};
use crate::labelspace::{build_label_table, label_table_node, LabelEmbeddingTable, PromptState};
use crate::metrics::{evaluate, GroundTruthMatrix, MetricsReport, TaskMode};
use crate::model::{encode_image, Model, CONTEXT};
use crate::numerics::{Graph, Parameters, Tensor, Var};
use crate::objectives::{check_frozen, stage1_loss, stage2_loss, AdamW, StageLoss, TrainConfig};
use crate::rng::stream;
use crate::synthworld::{Dataset, SynthSample, SynthWorld};

/// One optimizer step. `loss_dist` is absent in stage 2.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub loss_rank: f64,
    pub loss_dist: Option<f64>,
    pub loss_total: f64,
    pub lr: f64,
    pub degenerate: usize,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

/// Patch matrices, per-label positive flags and teacher targets.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub patches: Vec<Tensor>,
    pub positives: Vec<Vec<bool>>,
    pub teachers: Vec<Vec<f64>>,
}

impl Prepared {
    pub fn new(samples: &[SynthSample], labels: &[String], patch: usize) -> Result<Self> {
        let patches = samples.iter().map(|s| Ok(patchify(&s.image, patch)?.patches)).collect::<Result<_>>()?;
        let positives = samples.iter().map(|s| labels.iter().map(|l| s.positives.contains(l)).collect()).collect();
        let teachers = samples.iter().map(|s| s.teacher.clone()).collect();
        Ok(Prepared { patches, positives, teachers })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

fn batches(n: usize, size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn non_finite(stage: u8, epoch: usize, step: usize) -> impl Fn(MktError) -> MktError {
    move |e| match e {
        MktError::NonFinite(_) => MktError::NonFiniteLoss { stage, epoch, step },
        other => other,
    }
}

fn record(g: &Graph<'_>, l: &StageLoss, stage: u8, epoch: usize, step: usize, lr: f64) -> Result<LogRecord> {
    let r = LogRecord {
        stage,
        epoch,
        step,
        loss_rank: g.item(l.rank),
        loss_dist: l.dist.map(|d| g.item(d)),
        loss_total: g.item(l.total),
        lr,
        degenerate: l.degenerate,
    };
    if !r.loss_total.is_finite() {
        return Err(MktError::NonFiniteLoss { stage, epoch, step });
    }
    Ok(r)
}

/// Table for `labels` under the model's current context.
pub fn label_table(model: &Model, world: &SynthWorld, labels: &[String]) -> Result<LabelEmbeddingTable> {
    let prompt = PromptState { context: model.context.clone(), template_name: world.prompt.template_name.clone() };
    build_label_table(labels, &world.vocab, &prompt, &world.surrogate)
}

/// Stage 1: `L_rank + λ·L_dist` on seen labels; updates backbone and heads.
pub fn train_stage1(model: &mut Model, ds: &Dataset, cfg: &TrainConfig, log: &mut dyn FnMut(&LogRecord)) -> Result<()> {
    cfg.validate()?;
    let seen = &ds.world.split.seen;
    let table = label_table(model, &ds.world, seen)?;
    let data = Prepared::new(&ds.train, seen, model.vit_config.patch)?;
    model.for_stage1();
    let mut opt = AdamW::new();
    let mut rng = stream(cfg.seed, "batching-stage1");
    let mut step = 0;
    for epoch in 0..cfg.epochs_stage1 {
        for batch in batches(data.len(), cfg.batch_size, &mut rng) {
            let rec = {
                let mut g = Graph::new();
                let w = model.bind(&mut g);
                let z = g.constant(&table.z);
                let mut scores = Vec::with_capacity(batch.len());
                let mut students = Vec::with_capacity(batch.len());
                let wrap = non_finite(1, epoch, step);
                for &i in &batch {
                    let x = g.constant(&data.patches[i]);
                    let (_, emb) = encode_image(&mut g, &w, x).map_err(&wrap)?;
                    scores.push(score(&mut g, &emb, z, cfg.k, cfg.head_mode).map_err(&wrap)?);
                    students.push(emb.cls);
                }
                let pos: Vec<Vec<bool>> = batch.iter().map(|&i| data.positives[i].clone()).collect();
                let teachers: Vec<&[f64]> = batch.iter().map(|&i| data.teachers[i].as_slice()).collect();
                let l = stage1_loss(&mut g, &scores, &pos, &students, &teachers, cfg.lambda).map_err(&wrap)?;
                let rec = record(&g, &l, 1, epoch, step, cfg.lr_stage1)?;
                g.backward(l.total)?;
                rec
            };
            check_not(model, CONTEXT)?;
            opt.step(model, cfg.lr_stage1, cfg.weight_decay)?;
            log(&rec);
            step += 1;
        }
    }
    Ok(())
}

fn check_not(model: &Model, frozen: &str) -> Result<()> {
    if model.with_grad().iter().any(|n| n == frozen) {
        return Err(MktError::FrozenViolation(frozen.to_string()));
    }
    Ok(())
}

/// Frozen image embeddings `(e_cls, e_patch)` for every patch matrix.
pub fn embed_all(model: &Model, patches: &[Tensor]) -> Result<Vec<(Tensor, Tensor)>> {
    patches
        .par_iter()
        .map(|p| {
            let mut g = Graph::new();
            let w = model.bind(&mut g);
            let x = g.constant(p);
            let (_, emb) = encode_image(&mut g, &w, x)?;
            Ok((g.tensor(emb.cls), g.tensor(emb.patches)))
        })
        .collect()
}

fn stage2_graph<'p>(
    g: &mut Graph<'p>,
    model: &'p Model,
    world: &'p SynthWorld,
    rows: &[usize],
    cached: &[(Tensor, Tensor)],
    positives: &[Vec<bool>],
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<StageLoss> {
    let ctx = g.param(&model.context);
    let sv = world.surrogate.bind(g);
    let z = label_table_node(g, ctx, &sv, rows)?;
    let mut scores: Vec<Var> = Vec::with_capacity(idx.len());
    for &i in idx {
        let emb = EmbeddingPair { cls: g.constant(&cached[i].0), patches: g.constant(&cached[i].1) };
        scores.push(score(g, &emb, z, cfg.k, cfg.head_mode)?);
    }
    let pos: Vec<Vec<bool>> = idx.iter().map(|&i| positives[i].clone()).collect();
    stage2_loss(g, &scores, &pos)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Summary {
    /// Full-train-set ranking loss before the first and after the last step.
    pub start_loss: f64,
    pub end_loss: f64,
}

/// Mean ranking loss over the whole train set under the current context.
pub fn train_ranking_loss(model: &Model, ds: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let seen = &ds.world.split.seen;
    let data = Prepared::new(&ds.train, seen, model.vit_config.patch)?;
    let cached = embed_all(model, &data.patches)?;
    let rows: Vec<usize> = seen.iter().map(|l| ds.world.vocab.index_of(l)).collect::<Result<_>>()?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut g = Graph::new();
    let l = stage2_graph(&mut g, model, &ds.world, &rows, &cached, &data.positives, &all, cfg)?;
    Ok(g.item(l.total))
}

/// Stage 2: ranking loss only, gradients reach the context alone.
pub fn train_stage2(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<Stage2Summary> {
    cfg.validate()?;
    let start_loss = train_ranking_loss(model, ds, cfg)?;
    let seen = &ds.world.split.seen;
    let data = Prepared::new(&ds.train, seen, model.vit_config.patch)?;
    let cached = embed_all(model, &data.patches)?;
    let rows: Vec<usize> = seen.iter().map(|l| ds.world.vocab.index_of(l)).collect::<Result<_>>()?;
    model.for_stage2();
    let mut opt = AdamW::new();
    let mut rng = stream(cfg.seed, "batching-stage2");
    let mut step = 0;
    for epoch in 0..cfg.epochs_stage2 {
        for batch in batches(data.len(), cfg.batch_size, &mut rng) {
            let rec = {
                let mut g = Graph::new();
                let l = stage2_graph(&mut g, model, &ds.world, &rows, &cached, &data.positives, &batch, cfg)
                    .map_err(non_finite(2, epoch, step))?;
                let rec = record(&g, &l, 2, epoch, step, cfg.lr_stage2)?;
                g.backward(l.total)?;
                rec
            };
            check_frozen(model, &[CONTEXT])?;
            check_frozen(&ds.world.surrogate, &[])?;
            opt.step(model, cfg.lr_stage2, cfg.weight_decay)?;
            log(&rec);
            step += 1;
        }
    }
    model.set_requires_grad(false);
    let end_loss = train_ranking_loss(model, ds, cfg)?;
    Ok(Stage2Summary { start_loss, end_loss })
}

/// Scores `samples` against every vocabulary label, vocabulary order.
pub fn score_samples(model: &Model, world: &SynthWorld, samples: &[SynthSample], k: usize, mode: HeadMode) -> Result<ScoreMatrix> {
    let table = label_table(model, world, &world.vocab.ids)?;
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    crate::head::score_batch(&images, &model.vit, &model.heads, &table, model.vit_config.patch, k, mode)
}

pub fn ground_truth(world: &SynthWorld, samples: &[SynthSample]) -> GroundTruthMatrix {
    let pos: Vec<Vec<String>> = samples.iter().map(|s| s.positives.clone()).collect();
    GroundTruthMatrix::from_positives(&pos, &world.vocab.ids)
}

/// Test-set reports for each mode.
pub fn evaluate_model(
    model: &Model,
    ds: &Dataset,
    k: usize,
    head_mode: HeadMode,
    modes: &[TaskMode],
    ks: &[usize],
) -> Result<Vec<MetricsReport>> {
    let scores = score_samples(model, &ds.world, &ds.test, k, head_mode)?;
    let gt = ground_truth(&ds.world, &ds.test);
    modes.iter().map(|&m| evaluate(&scores, &gt, &ds.world.split, m, ks)).collect()
}
