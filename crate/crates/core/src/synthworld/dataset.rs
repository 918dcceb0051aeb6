use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoders::TextSurrogateParams;
use crate::error::{MktError, Result};
use crate::labelspace::{build_label_table, LabelSplit, PromptState, Vocabulary};
use crate::numerics::format::{read_tensor, write_tensor};
use crate::numerics::Tensor;
use crate::synthworld::{SynthSample, SynthWorld, WorldConfig};

/// Data files in hashing order. `manifest.txt` lists them with the hash.
const FILES: &[&str] = &[
    "world.cfg",
    "vocab.tsv",
    "split.txt",
    "tokens.mkt",
    "context.mkt",
    "teacher_map.mkt",
    "prototypes.mkt",
    "train_images.mkt",
    "train_teacher.mkt",
    "train_positives.txt",
    "test_images.mkt",
    "test_teacher.mkt",
    "test_positives.txt",
];

/// A generated world with its train and test images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub world: SynthWorld,
    pub train: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

/// sha256 over every data file's name and bytes, in a fixed order.
pub fn content_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in FILES {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| MktError::io(&p, e))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MktError::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| MktError::io(path, e))
}

fn stack(samples: &[SynthSample], world: &WorldConfig) -> Result<(Tensor, Tensor)> {
    let (c, s, de) = (world.channels, world.image_size, world.embed_dim());
    let n = samples.len();
    let images = samples.iter().flat_map(|x| x.image.data().iter().copied()).collect();
    let teacher = samples.iter().flat_map(|x| x.teacher.iter().copied()).collect();
    Ok((Tensor::new(vec![n, c, s, s], images)?, Tensor::new(vec![n, de], teacher)?))
}

fn positives_text(samples: &[SynthSample]) -> String {
    samples.iter().map(|s| s.positives.join(" ") + "\n").collect()
}

fn unstack(images: &Tensor, teacher: &Tensor, positives: &str, cfg: &WorldConfig) -> Result<Vec<SynthSample>> {
    let (c, s) = (cfg.channels, cfg.image_size);
    let lines: Vec<&str> = positives.lines().collect();
    let n = lines.len();
    if n > 0 && (images.shape() != [n, c, s, s] || teacher.shape() != [n, cfg.embed_dim()]) {
        return Err(MktError::Format(format!(
            "{n} label lines but images {:?} and teacher {:?}",
            images.shape(),
            teacher.shape()
        )));
    }
    let px = c * s * s;
    let de = cfg.embed_dim();
    (0..n)
        .map(|i| {
            Ok(SynthSample {
                image: Tensor::new(vec![c, s, s], images.data()[i * px..(i + 1) * px].to_vec())?,
                positives: lines[i].split_whitespace().map(str::to_string).collect(),
                teacher: teacher.data()[i * de..(i + 1) * de].to_vec(),
            })
        })
        .collect()
}

impl Dataset {
    pub fn generate(config: WorldConfig, seed: u64) -> Result<Self> {
        let world = SynthWorld::build(config, seed)?;
        let (train, test) = world.generate()?;
        Ok(Dataset { world, train, test })
    }

    /// Writes the dataset files plus `manifest.txt`; returns the content hash.
    pub fn save(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir).map_err(|e| MktError::io(dir, e))?;
        let w = &self.world;
        let mut cfg = format!("seed={}\n", w.seed);
        for (k, v) in w.config.to_pairs() {
            cfg += &format!("{k}={v}\n");
        }
        write(&dir.join("world.cfg"), &cfg)?;
        w.vocab.save(&dir.join("vocab.tsv"))?;
        write(
            &dir.join("split.txt"),
            &format!("seen\t{}\nunseen\t{}\n", w.split.seen.join(" "), w.split.unseen.join(" ")),
        )?;
        write_tensor(dir.join("tokens.mkt"), &w.surrogate.tokens)?;
        write_tensor(dir.join("context.mkt"), &w.prompt.context)?;
        write_tensor(dir.join("teacher_map.mkt"), &w.teacher_map)?;
        write_tensor(dir.join("prototypes.mkt"), &w.prototypes)?;
        for (name, samples) in [("train", &self.train), ("test", &self.test)] {
            let (images, teacher) = stack(samples, &w.config)?;
            write_tensor(dir.join(format!("{name}_images.mkt")), &images)?;
            write_tensor(dir.join(format!("{name}_teacher.mkt")), &teacher)?;
            write(&dir.join(format!("{name}_positives.txt")), &positives_text(samples))?;
        }
        let hash = content_hash(dir)?;
        let mut manifest = format!("content_hash={hash}\n");
        for f in FILES {
            manifest += &format!("file={f}\n");
        }
        write(&dir.join("manifest.txt"), &manifest)?;
        Ok(hash)
    }

    /// Reads a dataset directory, verifying its content hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read(&dir.join("manifest.txt"))?;
        let recorded = manifest
            .lines()
            .find_map(|l| l.strip_prefix("content_hash="))
            .ok_or_else(|| MktError::Format("manifest has no content_hash".into()))?;
        let actual = content_hash(dir)?;
        if recorded != actual {
            return Err(MktError::Format(format!("dataset content hash {actual} does not match manifest {recorded}")));
        }

        let mut config = WorldConfig::default();
        let mut seed = None;
        for line in read(&dir.join("world.cfg"))?.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| MktError::Format(format!("world.cfg: {line:?}")))?;
            if k == "seed" {
                seed = Some(v.parse().map_err(|_| MktError::Format(format!("world.cfg seed {v:?}")))?);
            } else if !config.set(k, v)? {
                return Err(MktError::Format(format!("world.cfg: unknown key {k}")));
            }
        }
        let seed = seed.ok_or_else(|| MktError::Format("world.cfg has no seed".into()))?;

        let vocab = Vocabulary::load(&dir.join("vocab.tsv"))?;
        let split_text = read(&dir.join("split.txt"))?;
        let field = |name: &str| -> Vec<String> {
            split_text
                .lines()
                .find_map(|l| l.strip_prefix(&format!("{name}\t")))
                .map(|s| s.split_whitespace().map(str::to_string).collect())
                .unwrap_or_default()
        };
        let split = LabelSplit::new(field("seen"), field("unseen"))?;
        let surrogate = TextSurrogateParams::new(config.surrogate, seed, read_tensor(dir.join("tokens.mkt"))?)?;
        let prompt = PromptState { context: read_tensor(dir.join("context.mkt"))?, template_name: "seeded-context".into() };
        let table = build_label_table(&vocab.ids, &vocab, &prompt, &surrogate)?;
        let world = SynthWorld {
            config,
            seed,
            vocab,
            split,
            surrogate,
            prompt,
            table,
            teacher_map: read_tensor(dir.join("teacher_map.mkt"))?,
            prototypes: read_tensor(dir.join("prototypes.mkt"))?,
        };
        let mut parts = Vec::new();
        for name in ["train", "test"] {
            parts.push(unstack(
                &read_tensor(dir.join(format!("{name}_images.mkt")))?,
                &read_tensor(dir.join(format!("{name}_teacher.mkt")))?,
                &read(&dir.join(format!("{name}_positives.txt")))?,
                &world.config,
            )?);
        }
        let test = parts.pop().expect("two parts");
        let train = parts.pop().expect("two parts");
        Ok(Dataset { world, train, test })
    }
}
