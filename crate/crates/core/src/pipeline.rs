//! Command implementations shared by the binary and the end-to-end tests.
//! Each command reads a [`RunConfig`] and writes its artifacts, plus the
//! resolved config, into one output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, SweepAxis};
use crate::error::{MktError, Result};
use crate::labelspace::{random_retrieval_accuracy, retrieval_accuracy, retrieve};
use crate::metrics::{MetricsReport, TaskMode};
use crate::model::Model;
use crate::objectives::TrainConfig;
use crate::selfcheck::{run_suite, CaseSummary};
use crate::synthworld::{content_hash, Dataset};
use crate::train::{evaluate_model, label_table, train_stage1, train_stage2, LogRecord, Stage2Summary};

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MktError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MktError::io(dir, e))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| MktError::Config(format!("{key} must be set")))
}

/// Generates the synthetic dataset into `out`; returns its content hash.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<String> {
    let ds = Dataset::generate(cfg.world, cfg.seed)?;
    let hash = ds.save(out)?;
    cfg.save(&out.join("run.cfg"))?;
    Ok(hash)
}

/// Result of both training stages.
#[derive(Debug, Clone)]
pub struct Trained {
    pub init: Model,
    pub stage1: Model,
    pub stage2: Model,
    pub summary: Stage2Summary,
    pub log: Vec<LogRecord>,
}

/// Stage 1 then stage 2, starting from `init` or from a fresh seeded model.
pub fn run_training(cfg: &RunConfig, ds: &Dataset, init: Option<Model>) -> Result<Trained> {
    let init = match init {
        Some(m) => m,
        None => Model::init(cfg.vit_config(), ds.world.config.embed_dim(), &ds.world.prompt.context, cfg.seed)?,
    };
    let tc = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let mut log = Vec::new();
    let mut model = init.clone();
    train_stage1(&mut model, ds, &tc, &mut |r| log.push(r.clone()))?;
    let stage1 = model.clone();
    let summary = train_stage2(&mut model, ds, &tc, &mut |r| log.push(r.clone()))?;
    Ok(Trained { init, stage1, stage2: model, summary, log })
}

/// Trains on `cfg.dataset`, starting from `cfg.checkpoint` when set. Writes
/// `init/`, `stage1/` and `stage2/` checkpoints, `train.jsonl` and
/// `summary.txt`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Trained> {
    let data_dir = required(&cfg.dataset, "dataset")?;
    let ds = Dataset::load(data_dir)?;
    let init = cfg.checkpoint.as_deref().map(Model::load).transpose()?;
    ensure_dir(out)?;
    cfg.save(&out.join("run.cfg"))?;
    let trained = run_training(cfg, &ds, init)?;
    trained.init.save(&out.join("init"))?;
    trained.stage1.save(&out.join("stage1"))?;
    trained.stage2.save(&out.join("stage2"))?;
    let log: String = trained.log.iter().map(|r| r.to_json() + "\n").collect();
    write(&out.join("train.jsonl"), &log)?;
    let summary = format!(
        "dataset_hash={}\nsteps={}\nstage2_start_loss={:?}\nstage2_end_loss={:?}\n",
        content_hash(data_dir)?,
        trained.log.len(),
        trained.summary.start_loss,
        trained.summary.end_loss
    );
    write(&out.join("summary.txt"), &summary)?;
    Ok(trained)
}

/// Scores the test split with `cfg.checkpoint` and writes one JSON and one
/// text report per task mode, plus the score matrix.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<Vec<MetricsReport>> {
    let ds = Dataset::load(required(&cfg.dataset, "dataset")?)?;
    let model = Model::load(required(&cfg.checkpoint, "checkpoint")?)?;
    ensure_dir(out)?;
    cfg.save(&out.join("run.cfg"))?;
    let scores =
        crate::train::score_samples(&model, &ds.world, &ds.test, cfg.train.k, cfg.train.head_mode)?;
    scores.save(out, "scores")?;
    let reports = evaluate_model(&model, &ds, cfg.train.k, cfg.train.head_mode, &cfg.task_modes, &cfg.eval_ks)?;
    for r in &reports {
        write(&out.join(format!("metrics_{}.json", r.mode.as_str())), &r.to_json())?;
        write(&out.join(format!("metrics_{}.txt", r.mode.as_str())), &r.to_text())?;
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub neighbors: Vec<(String, Vec<(String, f64)>)>,
    pub accuracy: f64,
    /// Expected accuracy of uniform random retrieval.
    pub chance: f64,
}

impl RetrievalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "accuracy {:.6}", self.accuracy);
        let _ = writeln!(out, "chance   {:.6}", self.chance);
        for (q, ns) in &self.neighbors {
            let list: Vec<String> = ns.iter().map(|(l, s)| format!("{l}:{s:.4}")).collect();
            let _ = writeln!(out, "{q}\t{}", list.join(" "));
        }
        out
    }
}

/// Top-`topn` neighbors of every label under `model`'s context.
pub fn retrieval_report(model: &Model, ds: &Dataset, topn: usize) -> Result<RetrievalReport> {
    let table = label_table(model, &ds.world, &ds.world.vocab.ids)?;
    let cats = ds.world.vocab.category_map();
    let neighbors = table
        .label_ids
        .iter()
        .map(|q| Ok((q.clone(), retrieve(q, &table, topn)?)))
        .collect::<Result<_>>()?;
    Ok(RetrievalReport {
        neighbors,
        accuracy: retrieval_accuracy(&table, &cats, topn)?,
        chance: random_retrieval_accuracy(&table.label_ids, &cats)?,
    })
}

pub fn cmd_retrieve(cfg: &RunConfig, out: &Path) -> Result<RetrievalReport> {
    let ds = Dataset::load(required(&cfg.dataset, "dataset")?)?;
    let model = Model::load(required(&cfg.checkpoint, "checkpoint")?)?;
    let report = retrieval_report(&model, &ds, cfg.topn)?;
    ensure_dir(out)?;
    cfg.save(&out.join("run.cfg"))?;
    write(&out.join("retrieval.txt"), &report.to_text())?;
    Ok(report)
}

/// One row of sweep output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub zsl_map: f64,
    pub gzsl_f1: f64,
}

/// Trains and evaluates once per value of the swept hyper-parameter, all
/// from the same seed.
pub fn sweep(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<SweepPoint>> {
    cfg.sweep_values
        .iter()
        .map(|&value| {
            let mut c = cfg.clone();
            match cfg.sweep_axis {
                SweepAxis::Lambda => c.train.lambda = value,
                SweepAxis::K => {
                    if value < 1.0 || value.fract() != 0.0 {
                        return Err(MktError::Config(format!("k sweep value {value} is not a positive integer")));
                    }
                    c.train.k = value as usize;
                }
            }
            c.validate()?;
            let t = run_training(&c, ds, None)?;
            let modes = [TaskMode::Zsl, TaskMode::Gzsl];
            let r = evaluate_model(&t.stage2, ds, c.train.k, c.train.head_mode, &modes, &[cfg.sweep_f1_k])?;
            Ok(SweepPoint { value, zsl_map: r[0].map, gzsl_f1: r[1].topk[0].f1 })
        })
        .collect()
}

pub fn sweep_csv(cfg: &RunConfig, points: &[SweepPoint]) -> String {
    let mut out = format!("{},zsl_map,gzsl_f1_at_{}\n", cfg.sweep_axis.as_str(), cfg.sweep_f1_k);
    for p in points {
        let _ = writeln!(out, "{:?},{:?},{:?}", p.value, p.zsl_map, p.gzsl_f1);
    }
    out
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<Vec<SweepPoint>> {
    let ds = Dataset::load(required(&cfg.dataset, "dataset")?)?;
    let points = sweep(cfg, &ds)?;
    ensure_dir(out)?;
    cfg.save(&out.join("run.cfg"))?;
    write(&out.join("sweep.csv"), &sweep_csv(cfg, &points))?;
    Ok(points)
}

/// Runs the finite-difference suite; the summary has one line per operation.
pub fn cmd_gradcheck(instances: usize) -> Result<(Vec<CaseSummary>, String)> {
    let cases = run_suite(instances)?;
    let mut text = String::new();
    for c in &cases {
        let _ = writeln!(
            text,
            "{:<22} {:>3} instances  max rel err {:.3e}  {}",
            c.op,
            c.instances,
            c.max_rel_err,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok((cases, text))
}
