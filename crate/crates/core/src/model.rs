//! The trainable model: backbone, two-stream heads and the prompt context,
//! with directory checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::encoders::{vit_forward, BackboneOutput, VitConfig, VitParams, VitVars};
use crate::error::{MktError, Result};
use crate::head::{two_stream, EmbeddingPair, TwoStreamParams, TwoStreamVars};
use crate::numerics::format::{read_tensor, write_tensor};
use crate::numerics::{visit_child, visit_child_mut, Graph, Parameters, Tensor, Var};
use crate::rng::stream;

/// Name of the only tensor prompt tuning may change.
pub const CONTEXT: &str = "context";

#[derive(Debug, Clone)]
pub struct Model {
    pub vit_config: VitConfig,
    pub vit: VitParams,
    pub heads: TwoStreamParams,
    /// Prompt context `M × D_t`.
    pub context: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub vit: VitVars,
    pub heads: TwoStreamVars,
    pub context: Var,
}

impl Model {
    /// Backbone and heads from the `init` stream of `seed`; the context is
    /// copied from the initial prompt.
    pub fn init(vit_config: VitConfig, embed_dim: usize, context: &Tensor, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "init");
        let vit = VitParams::init(&vit_config, &mut rng)?;
        let heads = TwoStreamParams::init(vit_config.dim, embed_dim, &mut rng);
        Ok(Model { vit_config, vit, heads, context: context.clone() })
    }

    pub fn embed_dim(&self) -> usize {
        self.heads.embed_dim()
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> ModelVars {
        ModelVars { vit: self.vit.bind(g), heads: self.heads.bind(g), context: g.param(&self.context) }
    }

    /// Only backbone and heads are trainable.
    pub fn for_stage1(&mut self) {
        self.set_requires_grad(true);
        self.context.set_requires_grad(false);
    }

    /// Only the context is trainable.
    pub fn for_stage2(&mut self) {
        self.set_requires_grad(false);
        self.context.set_requires_grad(true);
    }

    /// Writes one `MKT1` file per tensor, `model.cfg`, and a `manifest.txt`
    /// of `name -> file` lines.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| MktError::io(dir, e))?;
        let c = &self.vit_config;
        let cfg = format!(
            "channels={}\nimage_size={}\npatch={}\ndim={}\nheads={}\nblocks={}\nmlp_hidden={}\nembed_dim={}\n",
            c.channels,
            c.image_size,
            c.patch,
            c.dim,
            c.heads,
            c.blocks,
            c.mlp_hidden,
            self.embed_dim()
        );
        let p = dir.join("model.cfg");
        fs::write(&p, cfg).map_err(|e| MktError::io(&p, e))?;
        let mut manifest = String::new();
        let mut err = None;
        self.visit(&mut |name, t| {
            let file = format!("{name}.mkt");
            manifest += &format!("{name} -> {file}\n");
            if err.is_none() {
                err = write_tensor(dir.join(&file), t).err();
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let p = dir.join("manifest.txt");
        fs::write(&p, manifest).map_err(|e| MktError::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("model.cfg");
        let text = fs::read_to_string(&p).map_err(|e| MktError::io(&p, e))?;
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| MktError::Format(format!("model.cfg: {line:?}")))?;
            let v: usize = v.trim().parse().map_err(|_| MktError::Format(format!("model.cfg: {line:?}")))?;
            kv.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| MktError::Format(format!("model.cfg: missing {k}")));
        let vit_config = VitConfig {
            channels: get("channels")?,
            image_size: get("image_size")?,
            patch: get("patch")?,
            dim: get("dim")?,
            heads: get("heads")?,
            blocks: get("blocks")?,
            mlp_hidden: get("mlp_hidden")?,
        };

        let p = dir.join("manifest.txt");
        let manifest = fs::read_to_string(&p).map_err(|e| MktError::io(&p, e))?;
        let files: BTreeMap<String, String> = manifest
            .lines()
            .filter_map(|l| l.split_once(" -> "))
            .map(|(n, f)| (n.to_string(), f.to_string()))
            .collect();
        let context = read_tensor(dir.join(files.get(CONTEXT).ok_or_else(|| MktError::Format("no context".into()))?))?;
        let mut model = Model::init(vit_config, get("embed_dim")?, &context, 0)?;
        let mut err = None;
        model.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let loaded = match files.get(&name) {
                Some(f) => read_tensor(dir.join(f)),
                None => Err(MktError::Format(format!("checkpoint has no tensor {name}"))),
            };
            match loaded {
                Ok(l) if l.shape() == t.shape() => *t = l,
                Ok(l) => err = Some(MktError::shape("checkpoint", format!("{name}: {:?} vs {:?}", l.shape(), t.shape()))),
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }
}

impl Parameters for Model {
    fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        visit_child(&self.vit, "vit", f);
        visit_child(&self.heads, "heads", f);
        f(CONTEXT.into(), &self.context);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        visit_child_mut(&mut self.vit, "vit", f);
        visit_child_mut(&mut self.heads, "heads", f);
        f(CONTEXT.into(), &mut self.context);
    }
}

/// Backbone then heads for one image's patch matrix.
pub fn encode_image(g: &mut Graph<'_>, w: &ModelVars, patches: Var) -> Result<(BackboneOutput, EmbeddingPair)> {
    let out = vit_forward(g, &w.vit, patches)?;
    let emb = two_stream(g, &out, &w.heads)?;
    Ok((out, emb))
}
