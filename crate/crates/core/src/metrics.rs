//! Multi-label evaluation: per-class average precision, mAP, WmAP,
//! top-K precision/recall/F1 and zero-shot task masking.
//!
//! Every ranking uses a stable descending sort, so equal scores keep their
//! original order (lower index first).

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{MktError, Result};
use crate::head::ScoreMatrix;
use crate::labelspace::LabelSplit;
use crate::numerics::Tensor;

/// Binary relevance aligned with a [`ScoreMatrix`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMatrix {
    /// Row-major `B × d`.
    pub y: Vec<bool>,
    pub images: usize,
    pub label_ids: Vec<String>,
}

impl GroundTruthMatrix {
    pub fn new(y: Vec<bool>, images: usize, label_ids: Vec<String>) -> Result<Self> {
        if y.len() != images * label_ids.len() {
            return Err(MktError::shape("ground_truth", format!("{} entries for {images}×{}", y.len(), label_ids.len())));
        }
        Ok(GroundTruthMatrix { y, images, label_ids })
    }

    /// One row per image from its positive label ids. Ids outside
    /// `label_ids` are ignored.
    pub fn from_positives(positives: &[Vec<String>], label_ids: &[String]) -> Self {
        let mut y = Vec::with_capacity(positives.len() * label_ids.len());
        for pos in positives {
            y.extend(label_ids.iter().map(|l| pos.contains(l)));
        }
        GroundTruthMatrix { y, images: positives.len(), label_ids: label_ids.to_vec() }
    }

    pub fn labels(&self) -> usize {
        self.label_ids.len()
    }

    pub fn get(&self, image: usize, label: usize) -> bool {
        self.y[image * self.labels() + label]
    }

    pub fn column(&self, label: usize) -> Vec<bool> {
        (0..self.images).map(|i| self.get(i, label)).collect()
    }

    pub fn positives(&self, label: usize) -> usize {
        (0..self.images).filter(|&i| self.get(i, label)).count()
    }
}

fn check_aligned(scores: &ScoreMatrix, gt: &GroundTruthMatrix) -> Result<()> {
    if scores.images() != gt.images || scores.label_ids != gt.label_ids {
        return Err(MktError::shape(
            "metrics",
            format!("scores {}×{} vs ground truth {}×{}", scores.images(), scores.labels(), gt.images, gt.labels()),
        ));
    }
    Ok(())
}

/// Indices sorted by descending score, ties by lower index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// `Σ_n P(n)·rel(n) / N_c` over images ranked by descending score.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Result<f64> {
    if scores.len() != relevant.len() {
        return Err(MktError::shape("average_precision", format!("{} scores, {} flags", scores.len(), relevant.len())));
    }
    let npos = relevant.iter().filter(|&&r| r).count();
    if npos == 0 {
        return Err(MktError::NoPositives);
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, i) in ranking(scores).into_iter().enumerate() {
        if relevant[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / npos as f64)
}

/// Per-class AP, with `None` for classes that have no positives.
pub fn class_aps(scores: &ScoreMatrix, gt: &GroundTruthMatrix) -> Result<Vec<Option<f64>>> {
    check_aligned(scores, gt)?;
    (0..gt.labels())
        .map(|c| match average_precision(&scores.column(c), &gt.column(c)) {
            Ok(ap) => Ok(Some(ap)),
            Err(MktError::NoPositives) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Mean AP over classes with positives. With `weights`, the weighted mean
/// `Σ w_c AP_c / Σ w_c` over the same classes.
pub fn mean_ap(scores: &ScoreMatrix, gt: &GroundTruthMatrix, weights: Option<&[f64]>) -> Result<f64> {
    let aps = class_aps(scores, gt)?;
    if let Some(w) = weights {
        if w.len() != aps.len() {
            return Err(MktError::shape("mean_ap", format!("{} weights for {} classes", w.len(), aps.len())));
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, ap) in aps.iter().enumerate() {
        if let Some(ap) = ap {
            let w = weights.map_or(1.0, |w| w[c]);
            num += w * ap;
            den += w;
        }
    }
    if den == 0.0 {
        return Err(MktError::NoPositives);
    }
    Ok(num / den)
}

/// `N_c / Σ N_c` for every class.
pub fn positive_count_weights(gt: &GroundTruthMatrix) -> Vec<f64> {
    let counts: Vec<f64> = (0..gt.labels()).map(|c| gt.positives(c) as f64).collect();
    let total: f64 = counts.iter().sum();
    counts.iter().map(|n| if total > 0.0 { n / total } else { 0.0 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Assigns each image its `k` highest-scoring labels (ties to the lower
/// label index) and pools hits over all labels.
pub fn topk_prf(scores: &ScoreMatrix, gt: &GroundTruthMatrix, k: usize) -> Result<Prf> {
    check_aligned(scores, gt)?;
    let d = gt.labels();
    if k == 0 || k > d {
        return Err(MktError::KOutOfRange { k, n: d });
    }
    let mut hits = 0usize;
    for i in 0..gt.images {
        for &c in ranking(scores.scores.row(i)).iter().take(k) {
            hits += gt.get(i, c) as usize;
        }
    }
    let predicted = gt.images * k;
    let positives = gt.y.iter().filter(|&&v| v).count();
    let precision = if predicted > 0 { hits as f64 / predicted as f64 } else { 0.0 };
    let recall = if positives > 0 { hits as f64 / positives as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(Prf { k, precision, recall, f1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TaskMode {
    #[serde(rename = "zsl")]
    Zsl,
    #[serde(rename = "gzsl")]
    Gzsl,
}

impl FromStr for TaskMode {
    type Err = MktError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zsl" => Ok(TaskMode::Zsl),
            "gzsl" => Ok(TaskMode::Gzsl),
            other => Err(MktError::Config(format!("task mode must be zsl|gzsl, got {other:?}"))),
        }
    }
}

impl TaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskMode::Zsl => "zsl",
            TaskMode::Gzsl => "gzsl",
        }
    }
}

/// Restricts scores and ground truth to the task vocabulary. ZSL keeps the
/// unseen columns in split order; GZSL keeps every column that is seen or
/// unseen, in matrix order.
pub fn mask_task(
    scores: &ScoreMatrix,
    gt: &GroundTruthMatrix,
    split: &LabelSplit,
    mode: TaskMode,
) -> Result<(ScoreMatrix, GroundTruthMatrix)> {
    check_aligned(scores, gt)?;
    let keep: Vec<usize> = match mode {
        TaskMode::Zsl => split
            .unseen
            .iter()
            .map(|id| scores.label_ids.iter().position(|l| l == id).ok_or_else(|| MktError::UnknownLabel(id.clone())))
            .collect::<Result<_>>()?,
        TaskMode::Gzsl => (0..scores.labels())
            .filter(|&c| {
                let id = &scores.label_ids[c];
                split.seen.contains(id) || split.unseen.contains(id)
            })
            .collect(),
    };
    if keep.is_empty() {
        return Err(MktError::EmptyTaskVocabulary);
    }
    let ids: Vec<String> = keep.iter().map(|&c| scores.label_ids[c].clone()).collect();
    let mut s = Vec::with_capacity(gt.images * keep.len());
    let mut y = Vec::with_capacity(gt.images * keep.len());
    for i in 0..gt.images {
        for &c in &keep {
            s.push(scores.get(i, c));
            y.push(gt.get(i, c));
        }
    }
    Ok((
        ScoreMatrix::new(Tensor::new(vec![gt.images, keep.len()], s)?, ids.clone())?,
        GroundTruthMatrix::new(y, gt.images, ids)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub label: String,
    pub ap: Option<f64>,
    pub positives: usize,
}

/// Everything computed for one task mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mode: TaskMode,
    pub images: usize,
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    pub wmap: f64,
    pub skipped_classes: Vec<String>,
    pub topk: Vec<Prf>,
}

impl MetricsReport {
    pub fn f1_at(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|p| p.k == k).map(|p| p.f1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode   {}", self.mode.as_str());
        let _ = writeln!(out, "images {}", self.images);
        let _ = writeln!(out, "mAP    {:.6}", self.map);
        let _ = writeln!(out, "WmAP   {:.6}", self.wmap);
        if !self.skipped_classes.is_empty() {
            let _ = writeln!(out, "skipped {}", self.skipped_classes.join(" "));
        }
        let _ = writeln!(out, "\n{:>4}  {:>10}  {:>10}  {:>10}", "K", "P", "R", "F1");
        for p in &self.topk {
            let _ = writeln!(out, "{:>4}  {:>10.6}  {:>10.6}  {:>10.6}", p.k, p.precision, p.recall, p.f1);
        }
        let width = self.per_class.iter().map(|c| c.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "\n{:<width$}  {:>5}  {:>10}", "label", "pos", "AP");
        for c in &self.per_class {
            let ap = c.ap.map_or("-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "{:<width$}  {:>5}  {:>10}", c.label, c.positives, ap);
        }
        out
    }
}

/// Masks to `mode`, then computes AP, mAP, WmAP and F1 at every K in `ks`.
pub fn evaluate(
    scores: &ScoreMatrix,
    gt: &GroundTruthMatrix,
    split: &LabelSplit,
    mode: TaskMode,
    ks: &[usize],
) -> Result<MetricsReport> {
    let (s, y) = mask_task(scores, gt, split, mode)?;
    let aps = class_aps(&s, &y)?;
    let per_class: Vec<ClassAp> = aps
        .iter()
        .enumerate()
        .map(|(c, ap)| ClassAp { label: y.label_ids[c].clone(), ap: *ap, positives: y.positives(c) })
        .collect();
    let skipped_classes = per_class.iter().filter(|c| c.ap.is_none()).map(|c| c.label.clone()).collect();
    let map = mean_ap(&s, &y, None)?;
    let wmap = mean_ap(&s, &y, Some(&positive_count_weights(&y)))?;
    let topk = ks.iter().map(|&k| topk_prf(&s, &y, k)).collect::<Result<_>>()?;
    Ok(MetricsReport { mode, images: y.images, per_class, map, wmap, skipped_classes, topk })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn matrix(b: usize, d: usize, s: Vec<f64>, y: Vec<bool>) -> (ScoreMatrix, GroundTruthMatrix) {
        (
            ScoreMatrix::new(Tensor::new(vec![b, d], s).unwrap(), ids(d)).unwrap(),
            GroundTruthMatrix::new(y, b, ids(d)).unwrap(),
        )
    }

    /// Four images A..D against Dog, Cat, White, Black.
    fn worked_example() -> (ScoreMatrix, GroundTruthMatrix) {
        let s = vec![
            0.8, 0.4, 0.6, 0.7, // A
            0.3, 0.6, 0.5, 0.2, // B
            0.5, 0.8, 0.4, 0.6, // C
            0.6, 0.1, 0.2, 0.4, // D
        ];
        let y = [[1, 0, 1, 0], [1, 0, 0, 1], [0, 1, 1, 1], [0, 1, 1, 1]];
        let y = y.iter().flatten().map(|&v| v == 1).collect();
        matrix(4, 4, s, y)
    }

    fn oracle_ap(s: &[f64], r: &[bool]) -> f64 {
        // Precision at each relevant image's rank, counting images that
        // beat it or tie with a lower index.
        let n = s.len();
        let npos = r.iter().filter(|&&v| v).count() as f64;
        let mut total = 0.0;
        for i in (0..n).filter(|&i| r[i]) {
            let ahead = |j: usize| s[j] > s[i] || (s[j] == s[i] && j < i);
            let rank = 1 + (0..n).filter(|&j| ahead(j)).count();
            let rel_at_or_above = 1 + (0..n).filter(|&j| r[j] && ahead(j)).count();
            total += rel_at_or_above as f64 / rank as f64;
        }
        total / npos
    }

    fn oracle_prf(s: &ScoreMatrix, y: &GroundTruthMatrix, k: usize) -> (f64, f64, f64) {
        let d = y.labels();
        let mut hits = 0.0;
        for i in 0..y.images {
            for c in 0..d {
                let better = (0..d).filter(|&o| s.get(i, o) > s.get(i, c) || (s.get(i, o) == s.get(i, c) && o < c)).count();
                if better < k && y.get(i, c) {
                    hits += 1.0;
                }
            }
        }
        let p = hits / (y.images * k) as f64;
        let npos = y.y.iter().filter(|&&v| v).count() as f64;
        let r = if npos > 0.0 { hits / npos } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    }

    #[test]
    fn worked_example_aps() {
        let (s, y) = worked_example();
        let aps: Vec<f64> = class_aps(&s, &y).unwrap().into_iter().map(Option::unwrap).collect();
        assert!((aps[0] - 0.75).abs() < 1e-12);
        assert!((aps[1] - 0.75).abs() < 1e-12);
        assert!((aps[2] - 29.0 / 36.0).abs() < 1e-12);
        assert!((aps[3] - 23.0 / 36.0).abs() < 1e-12);
        assert!((mean_ap(&s, &y, None).unwrap() - 53.0 / 72.0).abs() < 1e-12);
    }

    #[test]
    fn ap_requires_a_positive() {
        assert!(matches!(average_precision(&[0.1, 0.2], &[false, false]), Err(MktError::NoPositives)));
    }

    #[test]
    fn ap_ties_keep_index_order() {
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn perfect_separation_is_one() {
        let (s, y) = matrix(3, 2, vec![0.9, 0.1, 0.2, 0.8, 0.7, 0.6], vec![true, false, false, true, true, true]);
        assert_eq!(mean_ap(&s, &y, None).unwrap(), 1.0);
    }

    #[test]
    fn classes_without_positives_are_skipped() {
        let (s, y) = matrix(2, 2, vec![0.9, 0.1, 0.2, 0.8], vec![true, false, true, false]);
        let split = LabelSplit::new(ids(2), vec![]).unwrap();
        let r = evaluate(&s, &y, &split, TaskMode::Gzsl, &[1]).unwrap();
        assert_eq!(r.skipped_classes, vec!["c1".to_string()]);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn topk_hand_count() {
        let (s, y) = matrix(2, 3, vec![0.9, 0.1, 0.0, 0.2, 0.7, 0.1], vec![true, false, false, false, false, true]);
        let p = topk_prf(&s, &y, 1).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
        assert!(matches!(topk_prf(&s, &y, 4), Err(MktError::KOutOfRange { .. })));
    }

    #[test]
    fn topk_all_positive_is_perfect() {
        let (s, y) = matrix(2, 3, vec![0.3, 0.2, 0.1, 0.0, 0.5, 0.4], vec![true; 6]);
        let p = topk_prf(&s, &y, 3).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn mask_modes() {
        let (s, y) = matrix(1, 8, (0..8).map(|v| v as f64).collect(), vec![true; 8]);
        let split = LabelSplit::new(ids(8)[..5].to_vec(), vec!["c7".into(), "c5".into(), "c6".into()]).unwrap();
        let (gs, _) = mask_task(&s, &y, &split, TaskMode::Gzsl).unwrap();
        assert_eq!(gs, s);
        let (zs, zy) = mask_task(&s, &y, &split, TaskMode::Zsl).unwrap();
        assert_eq!(zs.label_ids, vec!["c7", "c5", "c6"]);
        assert_eq!(zs.scores.data(), &[7.0, 5.0, 6.0]);
        assert_eq!(zy.label_ids, zs.label_ids);

        let all_unseen = LabelSplit::new(vec![], ids(8)).unwrap();
        assert_eq!(mask_task(&s, &y, &all_unseen, TaskMode::Zsl).unwrap().0, s);
        let none_unseen = LabelSplit::new(ids(8), vec![]).unwrap();
        assert!(matches!(mask_task(&s, &y, &none_unseen, TaskMode::Zsl), Err(MktError::EmptyTaskVocabulary)));
    }

    #[test]
    fn random_matrices_match_brute_force() {
        let mut rng = stream(11, "metrics-oracle");
        for _ in 0..100 {
            let b = rng.random_range(2..=50);
            let d = rng.random_range(2..=20);
            // Coarse grid so ties occur.
            let s: Vec<f64> = (0..b * d).map(|_| rng.random_range(0..20) as f64 / 10.0).collect();
            let y: Vec<bool> = (0..b * d).map(|_| rng.random_bool(0.3)).collect();
            let (sm, gt) = matrix(b, d, s, y);
            let mut sum = 0.0;
            let mut n = 0.0;
            for c in 0..d {
                if gt.positives(c) > 0 {
                    sum += oracle_ap(&sm.column(c), &gt.column(c));
                    n += 1.0;
                }
            }
            if n > 0.0 {
                assert!((mean_ap(&sm, &gt, None).unwrap() - sum / n).abs() < 1e-10);
            }
            let k = rng.random_range(1..=d);
            let p = topk_prf(&sm, &gt, k).unwrap();
            let (op, or, of) = oracle_prf(&sm, &gt, k);
            assert!((p.precision - op).abs() < 1e-10);
            assert!((p.recall - or).abs() < 1e-10);
            assert!((p.f1 - of).abs() < 1e-10);
        }
    }

    #[test]
    fn false_positive_above_all_positives_lowers_ap_only() {
        let (s, y) = worked_example();
        // B is a White negative; lift it above every White positive. It was
        // already in B's top 3 and stays there.
        let mut data = s.scores.data().to_vec();
        data[4 + 2] = 0.65;
        let lifted = ScoreMatrix::new(Tensor::new(vec![4, 4], data).unwrap(), s.label_ids.clone()).unwrap();
        let before = class_aps(&s, &y).unwrap()[2].unwrap();
        let after = class_aps(&lifted, &y).unwrap()[2].unwrap();
        assert!(after < before);
        assert_eq!(topk_prf(&s, &y, 3).unwrap(), topk_prf(&lifted, &y, 3).unwrap());
    }

    #[test]
    fn report_formats() {
        let (s, y) = worked_example();
        let split = LabelSplit::new(ids(4), vec![]).unwrap();
        let r = evaluate(&s, &y, &split, TaskMode::Gzsl, &[1, 3]).unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["mode"], "gzsl");
        assert_eq!(json["topk"].as_array().unwrap().len(), 2);
        assert!(r.to_text().contains("WmAP"));
        assert_eq!(r.f1_at(3), Some(r.topk[1].f1));
    }

    proptest! {
        #[test]
        fn ap_invariant_under_monotone_transform(
            s in prop::collection::vec(-5.0f64..5.0, 2..30),
            mask in prop::collection::vec(any::<bool>(), 30),
        ) {
            let r = &mask[..s.len()];
            prop_assume!(r.iter().any(|&v| v));
            let t: Vec<f64> = s.iter().map(|v| (0.7 * v).exp() + 3.0).collect();
            prop_assert_eq!(average_precision(&s, r).unwrap(), average_precision(&t, r).unwrap());
        }

        #[test]
        fn uniform_weights_match_wmap_for_equal_counts(seed in 0u64..500) {
            let mut rng = stream(seed, "wmap");
            let (b, d) = (6, 4);
            let s: Vec<f64> = (0..b * d).map(|_| rng.random::<f64>()).collect();
            // Each class gets exactly two positives.
            let mut y = vec![false; b * d];
            for c in 0..d {
                y[c] = true;
                y[(2 + c) % b * d + c] = true;
            }
            let (sm, gt) = matrix(b, d, s, y);
            let w = positive_count_weights(&gt);
            prop_assert!((mean_ap(&sm, &gt, None).unwrap() - mean_ap(&sm, &gt, Some(&w)).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn metrics_are_permutation_invariant(seed in 0u64..500) {
            let mut rng = stream(seed, "perm");
            let (b, d) = (10, 5);
            let s: Vec<f64> = (0..b * d).map(|_| rng.random::<f64>()).collect();
            let y: Vec<bool> = (0..b * d).map(|_| rng.random_bool(0.4)).collect();
            let mut order: Vec<usize> = (0..b).collect();
            order.reverse();
            order.swap(1, 7);
            let ps: Vec<f64> = order.iter().flat_map(|&i| s[i * d..(i + 1) * d].to_vec()).collect();
            let py: Vec<bool> = order.iter().flat_map(|&i| y[i * d..(i + 1) * d].to_vec()).collect();
            let (s1, y1) = matrix(b, d, s, y);
            let (s2, y2) = matrix(b, d, ps, py);
            prop_assert_eq!(class_aps(&s1, &y1).unwrap(), class_aps(&s2, &y2).unwrap());
            prop_assert_eq!(topk_prf(&s1, &y1, 2).unwrap(), topk_prf(&s2, &y2, 2).unwrap());
        }

        #[test]
        fn hits_bounded(seed in 0u64..500, k in 1usize..6) {
            let mut rng = stream(seed, "bound");
            let (b, d) = (8, 6);
            let s: Vec<f64> = (0..b * d).map(|_| rng.random::<f64>()).collect();
            let y: Vec<bool> = (0..b * d).map(|_| rng.random_bool(0.3)).collect();
            let npos = y.iter().filter(|&&v| v).count();
            let (sm, gt) = matrix(b, d, s, y);
            let p = topk_prf(&sm, &gt, k).unwrap();
            let hits = (p.precision * (b * k) as f64).round() as usize;
            prop_assert!(hits <= npos.min(b * k));
            prop_assert!(p.f1 <= 1.0 && p.f1 >= 0.0);
        }
    }
}
