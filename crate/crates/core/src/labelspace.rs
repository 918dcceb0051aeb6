//! Label vocabulary, tunable prompt context, label-embedding tables and
//! cosine-similarity label retrieval.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::encoders::{text_surrogate_encode, SurrogateVars, TextSurrogateParams};
use crate::error::{MktError, Result};
use crate::numerics::format::{read_tensor, write_tensor};
use crate::numerics::{Graph, Tensor, Var};

/// Ordered label ids with their major category. Row `i` of the surrogate
/// token table belongs to `ids[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub ids: Vec<String>,
    pub categories: Vec<String>,
}

impl Vocabulary {
    pub fn new(ids: Vec<String>, categories: Vec<String>) -> Result<Self> {
        if ids.len() != categories.len() {
            return Err(MktError::Format(format!("{} ids but {} categories", ids.len(), categories.len())));
        }
        let unique: HashSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(MktError::Format("duplicate label id in vocabulary".into()));
        }
        Ok(Vocabulary { ids, categories })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.ids.iter().position(|x| x == id).ok_or_else(|| MktError::UnknownLabel(id.to_string()))
    }

    pub fn category_map(&self) -> CategoryMap {
        CategoryMap(self.ids.iter().cloned().zip(self.categories.iter().cloned()).collect())
    }

    /// `label_id<TAB>category_id` per line.
    pub fn to_tsv(&self) -> String {
        self.ids.iter().zip(&self.categories).map(|(i, c)| format!("{i}\t{c}\n")).collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut ids = Vec::new();
        let mut cats = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (id, cat) = line
                .split_once('\t')
                .ok_or_else(|| MktError::Format(format!("vocabulary line {}: expected id<TAB>category", n + 1)))?;
            ids.push(id.to_string());
            cats.push(cat.to_string());
        }
        Vocabulary::new(ids, cats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| MktError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MktError::io(path, e))?;
        Self::from_tsv(&text)
    }
}

/// Seen and unseen label ids; the two sets are disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSplit {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl LabelSplit {
    pub fn new(seen: Vec<String>, unseen: Vec<String>) -> Result<Self> {
        let s: HashSet<&String> = seen.iter().collect();
        if let Some(dup) = unseen.iter().find(|u| s.contains(u)) {
            return Err(MktError::Config(format!("label {dup} is both seen and unseen")));
        }
        Ok(LabelSplit { seen, unseen })
    }

    /// Seen followed by unseen.
    pub fn all(&self) -> Vec<String> {
        self.seen.iter().chain(&self.unseen).cloned().collect()
    }
}

/// Shared context vectors prepended to every label token.
#[derive(Debug, Clone)]
pub struct PromptState {
    /// `M × D_t`
    pub context: Tensor,
    pub template_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Fixed,
    FromPrompt,
}

/// Unit-norm label embeddings, one row per id in `label_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddingTable {
    /// `d × D_e`
    pub z: Tensor,
    pub label_ids: Vec<String>,
    pub provenance: Provenance,
}

impl LabelEmbeddingTable {
    /// Wraps fixed embeddings, normalizing each row.
    pub fn fixed(z: Tensor, label_ids: Vec<String>) -> Result<Self> {
        if z.rank() != 2 || z.shape()[0] != label_ids.len() {
            return Err(MktError::shape("label_table", format!("{:?} vs {} ids", z.shape(), label_ids.len())));
        }
        let cols = z.shape()[1];
        let mut data = z.into_data();
        for row in data.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(MktError::NonFinite("label_table"));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(LabelEmbeddingTable {
            z: Tensor::new(vec![label_ids.len(), cols], data)?,
            label_ids,
            provenance: Provenance::Fixed,
        })
    }

    pub fn len(&self) -> usize {
        self.label_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.label_ids.iter().position(|x| x == id).ok_or_else(|| MktError::UnknownLabel(id.to_string()))
    }

    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<Self> {
        let cols = self.z.shape()[1];
        let mut data = Vec::with_capacity(ids.len() * cols);
        for id in ids {
            data.extend_from_slice(self.z.row(self.index_of(id)?));
        }
        Ok(LabelEmbeddingTable {
            z: Tensor::new(vec![ids.len(), cols], data)?,
            label_ids: ids.to_vec(),
            provenance: self.provenance,
        })
    }

    /// Writes `<stem>.mkt` plus a `<stem>.labels` id manifest.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_tensor(dir.join(format!("{stem}.mkt")), &self.z)?;
        let p = dir.join(format!("{stem}.labels"));
        fs::write(&p, self.label_ids.join("\n") + "\n").map_err(|e| MktError::io(&p, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let z = read_tensor(dir.join(format!("{stem}.mkt")))?;
        let p = dir.join(format!("{stem}.labels"));
        let text = fs::read_to_string(&p).map_err(|e| MktError::io(&p, e))?;
        let t = LabelEmbeddingTable::fixed(z, text.lines().map(str::to_string).collect())?;
        Ok(t)
    }
}

/// Label id → major category id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CategoryMap(pub BTreeMap<String, String>);

impl CategoryMap {
    pub fn get(&self, id: &str) -> Result<&str> {
        self.0.get(id).map(String::as_str).ok_or_else(|| MktError::UnknownLabel(id.to_string()))
    }
}

/// Records the label table for `labels` on `g`, as a `d × D_e` node whose
/// gradient reaches `context` through the frozen surrogate.
pub fn label_table_node(
    g: &mut Graph<'_>,
    context: Var,
    surrogate: &SurrogateVars,
    rows: &[usize],
) -> Result<Var> {
    let mut out = Vec::with_capacity(rows.len());
    for &r in rows {
        let tok = g.slice_rows(surrogate.tokens, r, r + 1)?;
        out.push(text_surrogate_encode(g, context, tok, surrogate)?);
    }
    g.concat_rows(&out)
}

/// Row `c` is the surrogate encoding of label `c`'s token under the shared
/// prompt context.
pub fn build_label_table(
    labels: &[String],
    vocab: &Vocabulary,
    prompt: &PromptState,
    surrogate: &TextSurrogateParams,
) -> Result<LabelEmbeddingTable> {
    let rows = labels.iter().map(|id| vocab.index_of(id)).collect::<Result<Vec<_>>>()?;
    if let Some(&r) = rows.iter().find(|&&r| r >= surrogate.num_labels()) {
        return Err(MktError::UnknownLabel(vocab.ids[r].clone()));
    }
    let z = surrogate.embed(&prompt.context, &rows)?;
    Ok(LabelEmbeddingTable { z, label_ids: labels.to_vec(), provenance: Provenance::FromPrompt })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// The `topn` labels most cosine-similar to `query`, excluding the query,
/// descending, ties to the lower table index.
pub fn retrieve(query: &str, table: &LabelEmbeddingTable, topn: usize) -> Result<Vec<(String, f64)>> {
    let q = table.index_of(query)?;
    let d = table.len();
    if topn >= d {
        return Err(MktError::TopNOutOfRange { topn, d });
    }
    let qrow = table.z.row(q);
    let mut sims: Vec<(usize, f64)> = (0..d).filter(|&i| i != q).map(|i| (i, cosine(qrow, table.z.row(i)))).collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(sims.into_iter().take(topn).map(|(i, s)| (table.label_ids[i].clone(), s)).collect())
}

/// Fraction of all retrieved slots (every query × `topn`) whose label
/// shares the query's category.
pub fn retrieval_accuracy(table: &LabelEmbeddingTable, categories: &CategoryMap, topn: usize) -> Result<f64> {
    let mut hits = 0usize;
    let mut slots = 0usize;
    for id in &table.label_ids {
        let cat = categories.get(id)?;
        for (other, _) in retrieve(id, table, topn)? {
            slots += 1;
            if categories.get(&other)? == cat {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / slots as f64)
}

/// Expected [`retrieval_accuracy`] when every retrieved label is drawn
/// uniformly from the other labels: mean over queries of `(s_q − 1)/(d − 1)`.
pub fn random_retrieval_accuracy(labels: &[String], categories: &CategoryMap) -> Result<f64> {
    let d = labels.len();
    let mut sizes: HashMap<&str, usize> = HashMap::new();
    for id in labels {
        *sizes.entry(categories.get(id)?).or_default() += 1;
    }
    let mut total = 0.0;
    for id in labels {
        total += (sizes[categories.get(id)?] - 1) as f64 / (d - 1) as f64;
    }
    Ok(total / d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::TextSurrogateConfig;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    fn table(z: Tensor) -> LabelEmbeddingTable {
        let n = z.shape()[0];
        LabelEmbeddingTable::fixed(z, ids(n)).unwrap()
    }

    #[test]
    fn split_must_be_disjoint() {
        assert!(LabelSplit::new(ids(3), vec!["l1".into()]).is_err());
        assert!(LabelSplit::new(ids(3), vec!["x".into()]).is_ok());
    }

    #[test]
    fn vocabulary_tsv_roundtrip() {
        let v = Vocabulary::new(ids(3), vec!["a".into(), "b".into(), "a".into()]).unwrap();
        assert_eq!(Vocabulary::from_tsv(&v.to_tsv()).unwrap(), v);
        assert!(Vocabulary::from_tsv("x y\n").is_err());
    }

    fn surrogate_world() -> (Vocabulary, PromptState, TextSurrogateParams) {
        let cfg = TextSurrogateConfig::default();
        let mut rng = stream(4, "ls");
        let mut tokens = Tensor::randn(&[4, cfg.width], 1.0, &mut rng);
        // Labels 2 and 3 share a token vector.
        let row2 = tokens.row(2).to_vec();
        tokens.data_mut()[3 * cfg.width..4 * cfg.width].copy_from_slice(&row2);
        let s = TextSurrogateParams::new(cfg, 4, tokens).unwrap();
        let prompt = PromptState { context: Tensor::randn(&[4, cfg.width], 1.0, &mut rng), template_name: "t".into() };
        let vocab = Vocabulary::new(ids(4), vec!["c".into(); 4]).unwrap();
        (vocab, prompt, s)
    }

    #[test]
    fn build_table_properties() {
        let (vocab, prompt, s) = surrogate_world();
        let t = build_label_table(&vocab.ids, &vocab, &prompt, &s).unwrap();
        assert_eq!(t.z.row(2), t.z.row(3));
        for r in 0..4 {
            let n: f64 = t.z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
        let again = build_label_table(&vocab.ids, &vocab, &prompt, &s).unwrap();
        assert_eq!(again.z.fingerprint(), t.z.fingerprint());

        let mut changed = prompt.clone();
        changed.context.data_mut()[0] += 0.5;
        let t2 = build_label_table(&vocab.ids, &vocab, &changed, &s).unwrap();
        for r in 0..4 {
            assert_ne!(t.z.row(r), t2.z.row(r));
        }
        assert!(matches!(
            build_label_table(&["nope".to_string()], &vocab, &prompt, &s),
            Err(MktError::UnknownLabel(_))
        ));
    }

    #[test]
    fn retrieve_tie_break_and_duplicates() {
        let t = table(Tensor::eye(4));
        let r = retrieve("l2", &t, 2).unwrap();
        assert_eq!(r.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["l0", "l1"]);
        assert!(r.iter().all(|x| x.1 == 0.0));

        let z = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0]).unwrap();
        let r = retrieve("l0", &table(z), 1).unwrap();
        assert_eq!(r[0].0, "l2");
        assert!((r[0].1 - 1.0).abs() < 1e-15);

        assert!(matches!(retrieve("l0", &t, 4), Err(MktError::TopNOutOfRange { .. })));
        assert!(matches!(retrieve("zz", &t, 1), Err(MktError::UnknownLabel(_))));
    }

    #[test]
    fn retrieve_matches_brute_force() {
        for seed in 0..10 {
            let z = Tensor::randn(&[10, 8], 1.0, &mut stream(seed, "rt"));
            let t = table(z.clone());
            for q in 0..10 {
                // Brute force: count labels strictly more similar (or equal with lower index).
                let sim = |i: usize| {
                    let (a, b) = (z.row(q), z.row(i));
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
                };
                let mut expected = Vec::new();
                let mut used = vec![false; 10];
                used[q] = true;
                for _ in 0..4 {
                    let mut best: Option<usize> = None;
                    for i in 0..10 {
                        if !used[i] && best.is_none_or(|b| sim(i) > sim(b)) {
                            best = Some(i);
                        }
                    }
                    used[best.unwrap()] = true;
                    expected.push(format!("l{}", best.unwrap()));
                }
                let got: Vec<String> = retrieve(&format!("l{q}"), &t, 4).unwrap().into_iter().map(|x| x.0).collect();
                assert_eq!(got, expected);
            }
        }
    }

    #[test]
    fn retrieval_accuracy_extremes_and_hand_count() {
        let t = table(Tensor::randn(&[5, 3], 1.0, &mut stream(1, "acc")));
        let own = CategoryMap(t.label_ids.iter().map(|i| (i.clone(), i.clone())).collect());
        assert_eq!(retrieval_accuracy(&t, &own, 2).unwrap(), 0.0);
        let one = CategoryMap(t.label_ids.iter().map(|i| (i.clone(), "x".into())).collect());
        assert_eq!(retrieval_accuracy(&t, &one, 2).unwrap(), 1.0);

        // Category a = {l0, l1, l2} near +x, category b = {l3, l4, l5} near +y,
        // except l2, which sits with category b.
        let z = Tensor::new(
            vec![6, 2],
            vec![1.0, 0.1, 1.0, 0.2, 0.3, 1.0, 0.1, 1.0, 0.2, 1.0, 0.25, 1.0],
        )
        .unwrap();
        let t = table(z);
        let cats = CategoryMap(
            t.label_ids.iter().enumerate().map(|(i, id)| (id.clone(), if i < 3 { "a" } else { "b" }.into())).collect(),
        );
        // topn = 1 neighbours: l0→l1 (hit), l1→l0 (hit), l2→l5 (miss), l3→l4,
        // l4→l5, l5→l2 (miss): 4 / 6.
        let acc = retrieval_accuracy(&t, &cats, 1).unwrap();
        assert!((acc - 4.0 / 6.0).abs() < 1e-15, "{acc}");
        assert!((random_retrieval_accuracy(&t.label_ids, &cats).unwrap() - 2.0 / 5.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn retrieval_never_returns_query_and_is_rotation_invariant(seed in any::<u64>(), angle in 0.0f64..6.28) {
            let mut rng = stream(seed, "rp");
            let z = Tensor::randn(&[7, 2], 1.0, &mut rng);
            let t = table(z.clone());
            for q in &t.label_ids {
                prop_assert!(retrieve(q, &t, 3).unwrap().iter().all(|(id, _)| id != q));
            }
            let (c, s) = (angle.cos(), angle.sin());
            let rot: Vec<f64> = z.data().chunks(2).flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1]]).collect();
            let tr = table(Tensor::new(vec![7, 2], rot).unwrap());
            let cats = CategoryMap(t.label_ids.iter().enumerate().map(|(i, id)| (id.clone(), (i % 3).to_string())).collect());
            let a = retrieval_accuracy(&t, &cats, 2).unwrap();
            let b = retrieval_accuracy(&tr, &cats, 2).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
