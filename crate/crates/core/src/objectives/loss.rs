use crate::error::{MktError, Result};
use crate::head::HeadMode;
use crate::numerics::{Graph, Parameters, Var};

/// Optimization settings shared by both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Distillation weight λ.
    pub lambda: f64,
    pub k: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub weight_decay: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub head_mode: HeadMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            k: 3,
            lr_stage1: 1e-3,
            lr_stage2: 3e-5,
            weight_decay: 5e-3,
            epochs_stage1: 50,
            epochs_stage2: 20,
            batch_size: 16,
            head_mode: HeadMode::Both,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(MktError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.k == 0 {
            return Err(MktError::Config("k must be >= 1".into()));
        }
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return Err(MktError::Config("learning rates must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(MktError::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(MktError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Set when an image has no positive or no negative label: it contributes
/// zero loss but still counts toward the batch mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Degenerate(pub bool);

/// Sum over every (positive, negative) pair of `max(1 + s_n − s_p, 0)`.
pub fn ranking_loss(g: &mut Graph<'_>, scores: Var, positive: &[bool]) -> Result<(Var, Degenerate)> {
    let npos = positive.iter().filter(|&&p| p).count();
    let degenerate = Degenerate(npos == 0 || npos == positive.len());
    Ok((g.pairwise_hinge(scores, positive)?, degenerate))
}

/// `‖teacher − student‖₁`. The teacher is a constant.
pub fn distill_loss(g: &mut Graph<'_>, student: Var, teacher: &[f64]) -> Result<Var> {
    g.l1_distance(student, teacher)
}

/// Batch-mean loss terms of one step. `dist` is recorded even when λ = 0.
#[derive(Debug, Clone, Copy)]
pub struct StageLoss {
    pub rank: Var,
    pub dist: Option<Var>,
    pub total: Var,
    pub degenerate: usize,
}

fn batch_rank(g: &mut Graph<'_>, scores: &[Var], positives: &[Vec<bool>]) -> Result<(Var, usize)> {
    if scores.len() != positives.len() || scores.is_empty() {
        return Err(MktError::shape("ranking_loss", format!("{} score rows, {} label sets", scores.len(), positives.len())));
    }
    let mut terms = Vec::with_capacity(scores.len());
    let mut degenerate = 0;
    for (&s, pos) in scores.iter().zip(positives) {
        let (l, d) = ranking_loss(g, s, pos)?;
        degenerate += d.0 as usize;
        terms.push(l);
    }
    Ok((g.mean_of(&terms)?, degenerate))
}

/// `L_rank + λ·L_dist`, each averaged over the batch.
pub fn stage1_loss(
    g: &mut Graph<'_>,
    scores: &[Var],
    positives: &[Vec<bool>],
    students: &[Var],
    teachers: &[&[f64]],
    lambda: f64,
) -> Result<StageLoss> {
    let (rank, degenerate) = batch_rank(g, scores, positives)?;
    if students.len() != scores.len() || teachers.len() != scores.len() {
        return Err(MktError::shape("distill_loss", format!("{} students, {} teachers", students.len(), teachers.len())));
    }
    let mut terms = Vec::with_capacity(students.len());
    for (&s, t) in students.iter().zip(teachers) {
        terms.push(distill_loss(g, s, t)?);
    }
    let dist = g.mean_of(&terms)?;
    let total = if lambda == 0.0 {
        rank
    } else {
        let weighted = g.scale(dist, lambda)?;
        g.add(rank, weighted)?
    };
    Ok(StageLoss { rank, dist: Some(dist), total, degenerate })
}

/// Ranking loss alone; the caller regenerates the label table in-graph.
pub fn stage2_loss(g: &mut Graph<'_>, scores: &[Var], positives: &[Vec<bool>]) -> Result<StageLoss> {
    let (rank, degenerate) = batch_rank(g, scores, positives)?;
    Ok(StageLoss { rank, dist: None, total: rank, degenerate })
}

/// Fails if any tensor of `params` other than those named in `trainable`
/// holds a gradient.
pub fn check_frozen<P: Parameters + ?Sized>(params: &P, trainable: &[&str]) -> Result<()> {
    match params.with_grad().into_iter().find(|n| !trainable.contains(&n.as_str())) {
        Some(name) => Err(MktError::FrozenViolation(name)),
        None => Ok(()),
    }
}
