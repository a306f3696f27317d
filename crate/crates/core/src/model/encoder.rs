//! Object encoder (patch MLP + bbox MLP + fusion MLP) and the multimodal
//! prompt encoder with optional residual connection.

use std::collections::HashMap;

use rand::Rng;

use super::layers::{Block, Dropout, LayerNorm, Mlp};
use super::vocab::{tokenize_prompt, PromptToken, Vocabulary};
use super::{ModelError, PromptMode, Result};
use crate::sim::{Asset, BBox, RenderCache, SimConfig};
use crate::tasks::{Appearance, Prompt};
use crate::tensor::{Graph, ParamId, ParamSet, Scalar, Tensor, Var};

/// Bounding-box features: normalized box plus a presence flag.
pub(crate) const BBOX_FEATURES: usize = 5;

fn bbox_features(cfg: &SimConfig, bbox: Option<BBox>) -> [f32; BBOX_FEATURES] {
    match bbox {
        Some(b) => {
            let n = b.normalized(cfg);
            [n[0], n[1], n[2], n[3], 1.0]
        }
        None => [0.0; BBOX_FEATURES],
    }
}

type PatchKey = (Asset, [u32; 3], bool);

/// Objects to encode in one pass. Identical patches are stored once and
/// gathered back per object.
#[derive(Default)]
pub(crate) struct ObjectBatch {
    keys: HashMap<PatchKey, usize>,
    patches: Vec<Vec<f32>>,
    patch_idx: Vec<usize>,
    bboxes: Vec<[f32; BBOX_FEATURES]>,
}

impl ObjectBatch {
    pub fn len(&self) -> usize {
        self.patch_idx.len()
    }

    pub fn push_asset(&mut self, cache: &RenderCache, asset: Asset, appearance: &Appearance, bbox: Option<BBox>) -> usize {
        let key = (
            asset,
            [appearance.brightness.to_bits(), appearance.contrast.to_bits(), appearance.saturation.to_bits()],
            appearance.grayscale,
        );
        let next = self.patches.len();
        let idx = *self.keys.entry(key).or_insert(next);
        if idx == next {
            self.patches.push(appearance.apply(&cache.get(asset)));
        }
        self.patch_idx.push(idx);
        self.bboxes.push(bbox_features(cache.config(), bbox));
        self.patch_idx.len() - 1
    }

    pub fn push_raw(&mut self, cfg: &SimConfig, patch: Vec<f32>, bbox: Option<BBox>) -> usize {
        self.patch_idx.push(self.patches.len());
        self.patches.push(patch);
        self.bboxes.push(bbox_features(cfg, bbox));
        self.patch_idx.len() - 1
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ObjectEncoder {
    patch: Mlp,
    bbox: Mlp,
    fusion: Mlp,
    patch_len: usize,
}

impl ObjectEncoder {
    pub fn new<R: Rng>(p: &mut ParamSet<f32>, patch_len: usize, patch_hidden: usize, bbox_hidden: usize, d: usize, rng: &mut R) -> Self {
        Self {
            patch: Mlp::new(p, "obj.patch", patch_len, patch_hidden, d, rng),
            bbox: Mlp::new(p, "obj.bbox", BBOX_FEATURES, bbox_hidden, d, rng),
            fusion: Mlp::new(p, "obj.fusion", 2 * d, d, d, rng),
            patch_len,
        }
    }

    /// `[N, d]` tokens, one per pushed object.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, batch: &ObjectBatch) -> Result<Var> {
        for p in &batch.patches {
            if p.len() != self.patch_len {
                return Err(ModelError::ShapeMismatch {
                    what: "object patch",
                    expected: self.patch_len,
                    got: p.len(),
                });
            }
        }
        let u = batch.patches.len();
        let data: Vec<T> = batch.patches.iter().flatten().map(|&v| T::from_f64(v as f64)).collect();
        let patches = g.input(Tensor::new(vec![u, self.patch_len], data)?);
        let pe = self.patch.forward(g, patches);
        let pe = g.gather_rows(pe, &batch.patch_idx);
        let bdata: Vec<T> = batch.bboxes.iter().flatten().map(|&v| T::from_f64(v as f64)).collect();
        let boxes = g.input(Tensor::new(vec![batch.len(), BBOX_FEATURES], bdata)?);
        let be = self.bbox.forward(g, boxes);
        let both = g.concat_cols(&[pe, be]);
        Ok(self.fusion.forward(g, both))
    }
}

/// Prompt positions after image expansion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum PromptPos {
    Word(usize),
    /// Row in the object batch.
    Visual(usize),
}

/// Output of [`PromptEncoder::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoding {
    /// `[P, d]` contextual embeddings, row-major.
    pub embeddings: Tensor<f32>,
    /// `true` at visual positions.
    pub visual: Vec<bool>,
}

/// Adds the prompt's visual items to `batch` and returns the position list.
pub(crate) fn layout_prompt(prompt: &Prompt, vocab: &Vocabulary, cache: &RenderCache, batch: &mut ObjectBatch) -> Vec<PromptPos> {
    let images: Vec<_> = prompt.elements.iter().collect();
    tokenize_prompt(prompt, vocab)
        .into_iter()
        .map(|t| match t {
            PromptToken::Word(id) => PromptPos::Word(id),
            PromptToken::Image { element, view, .. } => {
                let crate::tasks::PromptElement::Image(img) = images[element] else {
                    unreachable!("image token points at an image element")
                };
                let v = &img.views[view];
                PromptPos::Visual(batch.push_asset(cache, v.asset, &img.appearance, v.bbox))
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub(crate) struct PromptEncoder {
    pub word: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl PromptEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(p: &mut ParamSet<f32>, vocab: usize, max_len: usize, d: usize, layers: usize, heads: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            word: p.normal("lm.word", &[vocab, d], 0.5, rng),
            pos: p.normal("lm.pos", &[max_len, d], 0.1, rng),
            blocks: (0..layers)
                .map(|i| Block::new(p, &format!("lm.block{i}"), d, heads, ff, rng))
                .collect(),
            ln_f: LayerNorm::new(p, "lm.ln_f", d),
        }
    }

    /// `[P, d]` prompt encoding. `objects` holds the visual tokens referenced
    /// by [`PromptPos::Visual`].
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, positions: &[PromptPos], objects: Var, mode: PromptMode, drop: &mut Dropout) -> Var {
        let d = g.shape(objects)[1];
        let words: Vec<usize> = positions
            .iter()
            .filter_map(|p| match p {
                PromptPos::Word(id) => Some(*id),
                PromptPos::Visual(_) => None,
            })
            .collect();
        let visual: Vec<usize> = positions
            .iter()
            .filter_map(|p| match p {
                PromptPos::Visual(r) => Some(*r),
                PromptPos::Word(_) => None,
            })
            .collect();
        // rows: [zero | words | visual tokens]
        let zero = g.input(Tensor::zeros(&[1, d]));
        let mut parts = vec![zero];
        if !words.is_empty() {
            let table = g.param(self.word);
            parts.push(g.gather_rows(table, &words));
        }
        if !visual.is_empty() {
            parts.push(g.gather_rows(objects, &visual));
        }
        let pool = g.concat_rows(&parts);
        let (mut wi, mut vi) = (0, 0);
        let mut order = Vec::with_capacity(positions.len());
        let mut residual = Vec::with_capacity(positions.len());
        for p in positions {
            match p {
                PromptPos::Word(_) => {
                    wi += 1;
                    order.push(wi);
                    residual.push(0);
                }
                PromptPos::Visual(_) => {
                    vi += 1;
                    order.push(words.len() + vi);
                    residual.push(words.len() + vi);
                }
            }
        }
        let x = g.gather_rows(pool, &order);
        let pos_table = g.param(self.pos);
        let pos = g.gather_rows(pos_table, &(0..positions.len()).collect::<Vec<_>>());
        let mut h = g.add(x, pos);
        for b in &self.blocks {
            h = b.forward(g, h, None, drop);
        }
        let out = self.ln_f.forward(g, h);
        match mode {
            PromptMode::LmOnly => out,
            PromptMode::LmPlusRc => {
                let r = g.gather_rows(pool, &residual);
                g.add(out, r)
            }
        }
    }
}
