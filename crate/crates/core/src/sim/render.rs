//! Procedural object glyphs.
//!
//! Each shape is a silhouette defined on normalized coordinates
//! `(u, v) ∈ [-1, 1]²` (u to the right, v downwards) and painted with a
//! texture. Rotation by `bin · 360/R` degrees is applied clockwise; quarter
//! turns are exact pixel permutations.

use std::sync::Arc;

use super::{Asset, AssetKind, SimConfig};

/// Names used in text descriptions, indexed by shape id.
pub const SHAPE_NAMES: [&str; 8] = ["L", "T", "arrow", "F", "crescent", "flag", "V", "zigzag"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pattern {
    Solid,
    Striped,
}

struct Texture {
    name: &'static str,
    primary: [u8; 3],
    secondary: [u8; 3],
    pattern: Pattern,
}

const TEXTURES: [Texture; 8] = [
    Texture { name: "red", primary: [220, 40, 40], secondary: [0, 0, 0], pattern: Pattern::Solid },
    Texture { name: "green", primary: [40, 190, 60], secondary: [0, 0, 0], pattern: Pattern::Solid },
    Texture { name: "blue", primary: [50, 80, 230], secondary: [0, 0, 0], pattern: Pattern::Solid },
    Texture { name: "yellow", primary: [235, 215, 40], secondary: [0, 0, 0], pattern: Pattern::Solid },
    Texture { name: "purple", primary: [150, 60, 200], secondary: [0, 0, 0], pattern: Pattern::Solid },
    Texture { name: "orange", primary: [245, 140, 30], secondary: [0, 0, 0], pattern: Pattern::Solid },
    Texture { name: "cyan and red striped", primary: [40, 220, 220], secondary: [220, 40, 40], pattern: Pattern::Striped },
    Texture { name: "white and purple striped", primary: [250, 250, 250], secondary: [150, 60, 200], pattern: Pattern::Striped },
];

pub fn texture_name(texture: u16) -> &'static str {
    TEXTURES[texture as usize % TEXTURES.len()].name
}

pub fn shape_name(shape: u16) -> &'static str {
    SHAPE_NAMES[shape as usize % SHAPE_NAMES.len()]
}

fn in_rect(u: f64, v: f64, u0: f64, u1: f64, v0: f64, v1: f64) -> bool {
    u >= u0 && u <= u1 && v >= v0 && v <= v1
}

fn silhouette(shape: u16, u: f64, v: f64) -> bool {
    match shape % 8 {
        // L
        0 => in_rect(u, v, -0.7, -0.2, -0.8, 0.8) || in_rect(u, v, -0.7, 0.7, 0.3, 0.8),
        // T
        1 => in_rect(u, v, -0.8, 0.8, -0.8, -0.3) || in_rect(u, v, -0.25, 0.25, -0.8, 0.8),
        // arrow pointing right
        2 => (-0.8..=0.8).contains(&u) && v.abs() <= 0.8 * (0.8 - u) / 1.6 + 0.05,
        // F
        3 => {
            in_rect(u, v, -0.7, -0.25, -0.8, 0.8)
                || in_rect(u, v, -0.7, 0.7, -0.8, -0.4)
                || in_rect(u, v, -0.7, 0.3, -0.1, 0.25)
        }
        // crescent opening to the right
        4 => u * u + v * v <= 0.64 && (u - 0.35).powi(2) + v * v > 0.36,
        // flag
        5 => in_rect(u, v, -0.7, -0.4, -0.8, 0.8) || in_rect(u, v, -0.4, 0.7, -0.8, -0.1),
        // V opening upwards
        6 => (-0.8..=0.8).contains(&v) && (u.abs() - (0.8 - v) * 0.45).abs() <= 0.2,
        // zigzag
        _ => {
            in_rect(u, v, -0.8, 0.0, -0.8, -0.35)
                || in_rect(u, v, -0.3, 0.3, -0.8, 0.8)
                || in_rect(u, v, 0.0, 0.55, 0.45, 0.8)
        }
    }
}

fn receptacle_mask(k: usize, x: usize, y: usize) -> bool {
    let border = (k / 8).max(1);
    x < border || y < border || x >= k - border || y >= k - border
}

/// Glyph at rotation 0, as `K×K×3` values in `[0, 1]`.
fn base_glyph(cfg: &SimConfig, kind: AssetKind, shape: u16, texture: u16) -> Vec<f32> {
    let k = cfg.patch;
    let tex = &TEXTURES[texture as usize % TEXTURES.len()];
    let stripe = (k / 4).max(1);
    let mut out = vec![0.0f32; k * k * 3];
    for y in 0..k {
        for x in 0..k {
            let on = match kind {
                AssetKind::Object => {
                    let u = (x as f64 + 0.5) / k as f64 * 2.0 - 1.0;
                    let v = (y as f64 + 0.5) / k as f64 * 2.0 - 1.0;
                    silhouette(shape, u, v)
                }
                AssetKind::Receptacle => receptacle_mask(k, x, y),
            };
            if !on {
                continue;
            }
            let color = match tex.pattern {
                Pattern::Striped if (y / stripe) % 2 == 1 => tex.secondary,
                _ => tex.primary,
            };
            for c in 0..3 {
                out[(y * k + x) * 3 + c] = color[c] as f32 / 255.0;
            }
        }
    }
    out
}

/// Rotates a `K×K×3` patch clockwise by `quarters` quarter turns.
pub(crate) fn rotate_quarters(patch: &[f32], k: usize, quarters: usize) -> Vec<f32> {
    let mut cur = patch.to_vec();
    for _ in 0..quarters % 4 {
        let mut next = vec![0.0f32; cur.len()];
        for y in 0..k {
            for x in 0..k {
                // clockwise: new(x, y) = old(y, k-1-x) in (x, y) = (col, row)
                let (sx, sy) = (y, k - 1 - x);
                for c in 0..3 {
                    next[(y * k + x) * 3 + c] = cur[(sy * k + sx) * 3 + c];
                }
            }
        }
        cur = next;
    }
    cur
}

fn rotate_general(patch: &[f32], k: usize, angle: f64) -> Vec<f32> {
    let mut out = vec![0.0f32; patch.len()];
    let half = k as f64 / 2.0;
    let (s, c) = angle.sin_cos();
    for y in 0..k {
        for x in 0..k {
            let (px, py) = (x as f64 + 0.5 - half, y as f64 + 0.5 - half);
            // inverse of a clockwise rotation in y-down image coordinates
            let sx = c * px + s * py;
            let sy = -s * px + c * py;
            let (ix, iy) = ((sx + half).floor(), (sy + half).floor());
            if ix < 0.0 || iy < 0.0 || ix >= k as f64 || iy >= k as f64 {
                continue;
            }
            let (ix, iy) = (ix as usize, iy as usize);
            for ch in 0..3 {
                out[(y * k + x) * 3 + ch] = patch[(iy * k + ix) * 3 + ch];
            }
        }
    }
    out
}

/// Renders one asset. Deterministic; distinct (shape, texture) pairs give
/// distinct images.
pub fn render(cfg: &SimConfig, asset: Asset) -> Vec<f32> {
    let base = base_glyph(cfg, asset.kind, asset.shape, asset.texture);
    let r = cfg.rotations;
    let bin = asset.rotation as usize % r;
    if bin == 0 {
        return base;
    }
    if (bin * 4).is_multiple_of(r) {
        return rotate_quarters(&base, cfg.patch, bin * 4 / r);
    }
    rotate_general(&base, cfg.patch, bin as f64 * std::f64::consts::TAU / r as f64)
}

/// Memoized rendering shared across threads.
#[derive(Debug, Default)]
pub struct RenderCache {
    cfg: SimConfig,
    entries: std::sync::RwLock<std::collections::HashMap<Asset, Arc<[f32]>>>,
}

impl RenderCache {
    pub fn new(cfg: SimConfig) -> Self {
        Self {
            cfg,
            entries: Default::default(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn get(&self, asset: Asset) -> Arc<[f32]> {
        if let Some(hit) = self.entries.read().expect("render cache").get(&asset) {
            return hit.clone();
        }
        let patch: Arc<[f32]> = render(&self.cfg, asset).into();
        self.entries
            .write()
            .expect("render cache")
            .entry(asset)
            .or_insert(patch)
            .clone()
    }
}
