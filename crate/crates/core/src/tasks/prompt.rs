//! Multimodal prompts: interleaved words and images.
//!
//! Images are stored by the assets they depict plus their geometry; pixels
//! are produced on demand by rendering and then applying the element's
//! [`Appearance`]. This keeps prompts compact and makes augmentation a
//! parameter change rather than a pixel copy.

use serde::{Deserialize, Serialize};

use crate::sim::{scene_items, Asset, BBox, RenderCache, Scene, SimConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImageKind {
    /// Crop of a single object; carries no bounding box.
    ObjectPatch,
    /// Whole-scene frame; one bounding box per depicted object.
    SceneFrame,
}

/// Photometric transform applied to rendered prompt pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub grayscale: bool,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            grayscale: false,
        }
    }
}

fn luminance(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

impl Appearance {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, patch: &[f32]) -> Vec<f32> {
        if self.is_identity() {
            return patch.to_vec();
        }
        let n = (patch.len() / 3).max(1) as f32;
        let mean = patch.chunks(3).map(luminance).sum::<f32>() / n;
        let mut out = Vec::with_capacity(patch.len());
        for px in patch.chunks(3) {
            let mut rgb = [px[0], px[1], px[2]];
            for v in &mut rgb {
                *v *= self.brightness;
            }
            for v in &mut rgb {
                *v = (*v - mean) * self.contrast + mean;
            }
            let gray = luminance(&rgb);
            for v in &mut rgb {
                *v = gray + (*v - gray) * self.saturation;
            }
            if self.grayscale {
                let g = luminance(&rgb);
                rgb = [g; 3];
            }
            out.extend(rgb.iter().map(|v| v.clamp(0.0, 1.0)));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptView {
    pub uid: u32,
    pub asset: Asset,
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageElement {
    pub kind: ImageKind,
    pub views: Vec<PromptView>,
    pub appearance: Appearance,
}

impl ImageElement {
    pub fn object_patch(uid: u32, asset: Asset) -> Self {
        Self {
            kind: ImageKind::ObjectPatch,
            views: vec![PromptView {
                uid,
                asset,
                bbox: None,
            }],
            appearance: Appearance::default(),
        }
    }

    pub fn scene_frame(cfg: &SimConfig, scene: &Scene) -> Self {
        Self {
            kind: ImageKind::SceneFrame,
            views: scene_items(cfg, scene)
                .into_iter()
                .map(|(uid, asset, bbox)| PromptView {
                    uid,
                    asset,
                    bbox: Some(bbox),
                })
                .collect(),
            appearance: Appearance::default(),
        }
    }

    /// Rendered pixels of view `i` after the appearance transform.
    pub fn pixels(&self, cache: &RenderCache, i: usize) -> Vec<f32> {
        self.appearance.apply(&cache.get(self.views[i].asset))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PromptElement {
    Word(String),
    Image(ImageElement),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub elements: Vec<PromptElement>,
}

impl Prompt {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn words(mut self, text: &str) -> Self {
        self.elements
            .extend(text.split_whitespace().map(|w| PromptElement::Word(w.to_string())));
        self
    }

    pub fn image(mut self, image: ImageElement) -> Self {
        self.elements.push(PromptElement::Image(image));
        self
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageElement> {
        self.elements.iter().filter_map(|e| match e {
            PromptElement::Image(i) => Some(i),
            PromptElement::Word(_) => None,
        })
    }

    pub fn images_mut(&mut self) -> impl Iterator<Item = &mut ImageElement> {
        self.elements.iter_mut().filter_map(|e| match e {
            PromptElement::Image(i) => Some(i),
            PromptElement::Word(_) => None,
        })
    }

    /// Human-readable rendering with `{frame}` / `{object}` placeholders.
    pub fn text(&self) -> String {
        self.elements
            .iter()
            .map(|e| match e {
                PromptElement::Word(w) => w.as_str(),
                PromptElement::Image(i) => match i.kind {
                    ImageKind::ObjectPatch => "{object}",
                    ImageKind::SceneFrame => "{frame}",
                },
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn leading_words(&self) -> Vec<&str> {
        self.elements
            .iter()
            .map_while(|e| match e {
                PromptElement::Word(w) => Some(w.as_str()),
                PromptElement::Image(_) => None,
            })
            .collect()
    }
}
