//! Deterministic grid tabletop with pick-and-place dynamics.
//!
//! Scenes are immutable values: [`step`] returns a new scene. Observations
//! are object-centric: one rendered patch plus a pixel bounding box per
//! object (and per receptacle), mirroring ground-truth segmentation.
//!
//! Cell `(row, col)` occupies the pixel box
//! `[col·K, row·K, (col+1)·K, (row+1)·K]` where `K` is the patch size.

pub mod render;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use render::{render, shape_name, texture_name, RenderCache};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("cell ({row}, {col}) is outside the {height}x{width} board")]
    OutOfBounds {
        row: u16,
        col: u16,
        width: u16,
        height: u16,
    },
    #[error("rotation bin {0} out of range")]
    BadRotation(u16),
    #[error("{requested} items do not fit on a board with {capacity} cells")]
    OverCapacity { requested: usize, capacity: usize },
    #[error("invalid scene spec: {0}")]
    BadSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimConfig {
    pub width: usize,
    pub height: usize,
    /// Patch side length `K` in pixels; also the cell size on the board.
    pub patch: usize,
    pub rotations: usize,
    pub shapes: usize,
    pub textures: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            patch: 16,
            rotations: 4,
            shapes: 8,
            textures: 8,
        }
    }
}

impl SimConfig {
    pub fn board_pixels(&self) -> (f32, f32) {
        ((self.width * self.patch) as f32, (self.height * self.patch) as f32)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn bbox(&self, cell: Cell) -> BBox {
        let k = self.patch as f32;
        BBox([
            cell.col as f32 * k,
            cell.row as f32 * k,
            (cell.col + 1) as f32 * k,
            (cell.row + 1) as f32 * k,
        ])
    }

    pub fn in_bounds(&self, cell: Cell) -> bool {
        (cell.row as usize) < self.height && (cell.col as usize) < self.width
    }

    fn check_cell(&self, cell: Cell) -> Result<(), SimError> {
        if self.in_bounds(cell) {
            Ok(())
        } else {
            Err(SimError::OutOfBounds {
                row: cell.row,
                col: cell.col,
                width: self.width as u16,
                height: self.height as u16,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: u16,
    pub col: u16,
}

impl Cell {
    pub fn new(row: u16, col: u16) -> Self {
        Self { row, col }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AssetKind {
    Object,
    Receptacle,
}

/// Everything that determines a rendered patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Asset {
    pub kind: AssetKind,
    pub shape: u16,
    pub texture: u16,
    pub rotation: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub uid: u32,
    pub shape: u16,
    pub texture: u16,
    pub rotation: u16,
    pub cell: Cell,
}

impl ObjectSpec {
    pub fn asset(&self) -> Asset {
        Asset {
            kind: AssetKind::Object,
            shape: self.shape,
            texture: self.texture,
            rotation: self.rotation,
        }
    }
}

/// Marked cell that accepts objects; rendered as a hollow square.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Receptacle {
    pub uid: u32,
    pub texture: u16,
    pub cell: Cell,
}

impl Receptacle {
    pub fn asset(&self) -> Asset {
        Asset {
            kind: AssetKind::Receptacle,
            shape: 0,
            texture: self.texture,
            rotation: 0,
        }
    }
}

/// Receptacle uids start here so they never collide with object uids.
pub const RECEPTACLE_UID_BASE: u32 = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub width: u16,
    pub height: u16,
    /// Sorted by uid.
    pub objects: Vec<ObjectSpec>,
    pub receptacles: Vec<Receptacle>,
}

impl Scene {
    pub fn empty(cfg: &SimConfig) -> Self {
        Self {
            width: cfg.width as u16,
            height: cfg.height as u16,
            objects: Vec::new(),
            receptacles: Vec::new(),
        }
    }

    pub fn object_at(&self, cell: Cell) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    pub fn object(&self, uid: u32) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.uid == uid)
    }

    pub fn receptacle_at(&self, cell: Cell) -> Option<&Receptacle> {
        self.receptacles.iter().find(|r| r.cell == cell)
    }

    /// Multiset of `(shape, texture)` pairs, sorted.
    pub fn asset_multiset(&self) -> Vec<(u16, u16)> {
        let mut v: Vec<_> = self.objects.iter().map(|o| (o.shape, o.texture)).collect();
        v.sort_unstable();
        v
    }

    pub fn is_valid(&self) -> bool {
        let mut cells: Vec<Cell> = self.objects.iter().map(|o| o.cell).collect();
        cells.sort_unstable();
        let unique = cells.windows(2).all(|w| w[0] != w[1]);
        let sorted = self.objects.windows(2).all(|w| w[0].uid < w[1].uid);
        unique && sorted
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                let c = Cell::new(row, col);
                if self.object_at(c).is_none() {
                    out.push(c);
                }
            }
        }
        out
    }
}

/// Parameters for [`reset`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: usize,
    pub receptacles: usize,
    pub shapes: Vec<u16>,
    pub textures: Vec<u16>,
    /// When set, `(shape, texture)` pairs are drawn uniformly from this list
    /// instead of independently from the two pools.
    pub combos: Option<Vec<(u16, u16)>>,
    pub random_rotation: bool,
}

impl SceneSpec {
    pub fn uniform(cfg: &SimConfig, objects: usize) -> Self {
        Self {
            objects,
            receptacles: 0,
            shapes: (0..cfg.shapes as u16).collect(),
            textures: (0..cfg.textures as u16).collect(),
            combos: None,
            random_rotation: true,
        }
    }

    pub(crate) fn draw_asset<R: Rng>(&self, rng: &mut R) -> (u16, u16) {
        match &self.combos {
            Some(c) => c[rng.gen_range(0..c.len())],
            None => (
                self.shapes[rng.gen_range(0..self.shapes.len())],
                self.textures[rng.gen_range(0..self.textures.len())],
            ),
        }
    }
}

/// Builds a scene deterministically from `(seed, spec)`.
pub fn reset(cfg: &SimConfig, seed: u64, spec: &SceneSpec) -> Result<Scene, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    reset_with(cfg, &mut rng, spec)
}

pub fn reset_with<R: Rng>(cfg: &SimConfig, rng: &mut R, spec: &SceneSpec) -> Result<Scene, SimError> {
    let capacity = cfg.width * cfg.height;
    let requested = spec.objects + spec.receptacles;
    if requested > capacity {
        return Err(SimError::OverCapacity { requested, capacity });
    }
    if spec.objects > 0 {
        let empty_pools = match &spec.combos {
            Some(c) => c.is_empty(),
            None => spec.shapes.is_empty() || spec.textures.is_empty(),
        };
        if empty_pools {
            return Err(SimError::BadSpec("empty asset pool".into()));
        }
    }
    let mut cells: Vec<Cell> = (0..cfg.height as u16)
        .flat_map(|r| (0..cfg.width as u16).map(move |c| Cell::new(r, c)))
        .collect();
    cells.shuffle(rng);
    let mut scene = Scene::empty(cfg);
    for (i, &cell) in cells[..spec.receptacles].iter().enumerate() {
        scene.receptacles.push(Receptacle {
            uid: RECEPTACLE_UID_BASE + i as u32,
            texture: rng.gen_range(0..cfg.textures as u16),
            cell,
        });
    }
    for (i, &cell) in cells[spec.receptacles..requested].iter().enumerate() {
        let (shape, texture) = spec.draw_asset(rng);
        let rotation = if spec.random_rotation {
            rng.gen_range(0..cfg.rotations as u16)
        } else {
            0
        };
        scene.objects.push(ObjectSpec {
            uid: i as u32,
            shape,
            texture,
            rotation,
            cell,
        });
    }
    Ok(scene)
}

/// Two-pose pick-and-place primitive with `N_a = 6` token dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionPrim {
    pub pick: Cell,
    /// Always 0 for scripted actions; ignored by the dynamics.
    pub pick_rot: u16,
    pub place: Cell,
    pub place_rot: u16,
}

/// Number of token dimensions of an [`ActionPrim`].
pub const ACTION_DIMS: usize = 6;

impl ActionPrim {
    pub fn new(pick: Cell, place: Cell, place_rot: u16) -> Self {
        Self {
            pick,
            pick_rot: 0,
            place,
            place_rot,
        }
    }

    /// Tokens in decoding order: pick_row, pick_col, pick_rot, place_row,
    /// place_col, place_rot.
    pub fn tokens(&self) -> [usize; ACTION_DIMS] {
        [
            self.pick.row as usize,
            self.pick.col as usize,
            self.pick_rot as usize,
            self.place.row as usize,
            self.place.col as usize,
            self.place_rot as usize,
        ]
    }

    pub fn from_tokens(t: &[usize]) -> Self {
        assert_eq!(t.len(), ACTION_DIMS, "action needs {ACTION_DIMS} tokens");
        Self {
            pick: Cell::new(t[0] as u16, t[1] as u16),
            pick_rot: t[2] as u16,
            place: Cell::new(t[3] as u16, t[4] as u16),
            place_rot: t[5] as u16,
        }
    }

    /// Bin count per token dimension.
    pub fn bins(cfg: &SimConfig) -> [usize; ACTION_DIMS] {
        [
            cfg.height,
            cfg.width,
            cfg.rotations,
            cfg.height,
            cfg.width,
            cfg.rotations,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepFlag {
    Ok,
    EmptyPick,
    BlockedPlace,
}

/// Applies one pick-and-place. Illegal moves leave the scene unchanged and
/// are reported through the flag; malformed actions are errors.
pub fn step(cfg: &SimConfig, scene: &Scene, action: &ActionPrim) -> Result<(Scene, StepFlag), SimError> {
    cfg.check_cell(action.pick)?;
    cfg.check_cell(action.place)?;
    for rot in [action.pick_rot, action.place_rot] {
        if rot as usize >= cfg.rotations {
            return Err(SimError::BadRotation(rot));
        }
    }
    let Some(idx) = scene.objects.iter().position(|o| o.cell == action.pick) else {
        return Ok((scene.clone(), StepFlag::EmptyPick));
    };
    if let Some(other) = scene.object_at(action.place) {
        if other.uid != scene.objects[idx].uid {
            return Ok((scene.clone(), StepFlag::BlockedPlace));
        }
    }
    let mut next = scene.clone();
    let obj = &mut next.objects[idx];
    obj.cell = action.place;
    obj.rotation = ((obj.rotation as usize + action.place_rot as usize) % cfg.rotations) as u16;
    Ok((next, StepFlag::Ok))
}

/// Axis-aligned box `(x_min, y_min, x_max, y_max)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox(pub [f32; 4]);

impl BBox {
    pub fn shifted(&self, dx: f32, dy: f32) -> Self {
        let b = self.0;
        BBox([b[0] + dx, b[1] + dy, b[2] + dx, b[3] + dy])
    }

    /// Coordinates divided by the board pixel extent.
    pub fn normalized(&self, cfg: &SimConfig) -> [f32; 4] {
        let (w, h) = cfg.board_pixels();
        let b = self.0;
        [b[0] / w, b[1] / h, b[2] / w, b[3] / h]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectView {
    pub uid: u32,
    pub asset: Asset,
    pub bbox: BBox,
    pub patch: Arc<[f32]>,
}

/// Object views sorted by uid, followed by receptacle views.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub views: Vec<ObjectView>,
}

impl Observation {
    pub fn object_views(&self) -> impl Iterator<Item = &ObjectView> {
        self.views.iter().filter(|v| v.asset.kind == AssetKind::Object)
    }
}

/// Placed assets of a scene in observation order, without pixels.
pub fn scene_items(cfg: &SimConfig, scene: &Scene) -> Vec<(u32, Asset, BBox)> {
    let objects = scene.objects.iter().map(|o| (o.uid, o.asset(), cfg.bbox(o.cell)));
    let receptacles = scene.receptacles.iter().map(|r| (r.uid, r.asset(), cfg.bbox(r.cell)));
    objects.chain(receptacles).collect()
}

pub fn observe(cache: &RenderCache, scene: &Scene) -> Observation {
    let cfg = cache.config();
    Observation {
        views: scene_items(cfg, scene)
            .into_iter()
            .map(|(uid, asset, bbox)| ObjectView {
                uid,
                asset,
                bbox,
                patch: cache.get(asset),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    fn place_object(scene: &mut Scene, uid: u32, cell: Cell, rotation: u16) {
        scene.objects.push(ObjectSpec {
            uid,
            shape: 1,
            texture: 2,
            rotation,
            cell,
        });
        scene.objects.sort_by_key(|o| o.uid);
    }

    #[test]
    fn reset_is_deterministic() {
        let spec = SceneSpec::uniform(&cfg(), 5);
        assert_eq!(reset(&cfg(), 11, &spec).unwrap(), reset(&cfg(), 11, &spec).unwrap());
        assert_ne!(reset(&cfg(), 11, &spec).unwrap(), reset(&cfg(), 12, &spec).unwrap());
    }

    #[test]
    fn reset_empty_and_capacity() {
        let scene = reset(&cfg(), 0, &SceneSpec::uniform(&cfg(), 0)).unwrap();
        assert!(scene.objects.is_empty());
        let err = reset(&cfg(), 0, &SceneSpec::uniform(&cfg(), 65)).unwrap_err();
        assert!(matches!(err, SimError::OverCapacity { requested: 65, capacity: 64 }));
    }

    #[test]
    fn reset_respects_pools() {
        let mut spec = SceneSpec::uniform(&cfg(), 6);
        spec.shapes = vec![2, 5];
        spec.textures = vec![7];
        for seed in 0..50 {
            let s = reset(&cfg(), seed, &spec).unwrap();
            assert!(s.is_valid());
            assert!(s.objects.iter().all(|o| [2, 5].contains(&o.shape) && o.texture == 7));
        }
    }

    #[test]
    fn asset_draws_are_uniform() {
        // 10,000 single-object scenes; each of the 8 shapes should appear
        // 1250 times with sd sqrt(10000 * 1/8 * 7/8) ≈ 33.1.
        let spec = SceneSpec::uniform(&cfg(), 1);
        let mut shape_counts = [0usize; 8];
        let mut texture_counts = [0usize; 8];
        for seed in 0..10_000 {
            let o = reset(&cfg(), seed, &spec).unwrap().objects[0];
            shape_counts[o.shape as usize] += 1;
            texture_counts[o.texture as usize] += 1;
        }
        let sd = (10_000.0f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for c in shape_counts.iter().chain(&texture_counts) {
            assert!((*c as f64 - 1250.0).abs() < 3.0 * sd, "count {c}");
        }
    }

    #[test]
    fn empty_pick_is_a_no_op() {
        let mut scene = Scene::empty(&cfg());
        place_object(&mut scene, 0, Cell::new(1, 1), 0);
        let a = ActionPrim::new(Cell::new(0, 0), Cell::new(3, 3), 1);
        let (next, flag) = step(&cfg(), &scene, &a).unwrap();
        assert_eq!(flag, StepFlag::EmptyPick);
        assert_eq!(next, scene);
    }

    #[test]
    fn move_and_rotate() {
        let mut scene = Scene::empty(&cfg());
        place_object(&mut scene, 0, Cell::new(2, 3), 3);
        place_object(&mut scene, 1, Cell::new(0, 0), 0);
        let a = ActionPrim::new(Cell::new(2, 3), Cell::new(4, 4), 1);
        let (next, flag) = step(&cfg(), &scene, &a).unwrap();
        assert_eq!(flag, StepFlag::Ok);
        let moved = next.object(0).unwrap();
        assert_eq!(moved.cell, Cell::new(4, 4));
        assert_eq!(moved.rotation, 0); // (3 + 1) mod 4
        assert!(next.object_at(Cell::new(2, 3)).is_none());
        assert_eq!(next.object(1), scene.object(1));
    }

    #[test]
    fn blocked_place_leaves_scene() {
        let mut scene = Scene::empty(&cfg());
        place_object(&mut scene, 0, Cell::new(2, 3), 0);
        place_object(&mut scene, 1, Cell::new(4, 4), 0);
        let a = ActionPrim::new(Cell::new(2, 3), Cell::new(4, 4), 2);
        let (next, flag) = step(&cfg(), &scene, &a).unwrap();
        assert_eq!(flag, StepFlag::BlockedPlace);
        assert_eq!(next, scene);
    }

    #[test]
    fn in_place_rotation_is_legal() {
        let mut scene = Scene::empty(&cfg());
        place_object(&mut scene, 0, Cell::new(2, 3), 0);
        let a = ActionPrim::new(Cell::new(2, 3), Cell::new(2, 3), 2);
        let (next, flag) = step(&cfg(), &scene, &a).unwrap();
        assert_eq!(flag, StepFlag::Ok);
        assert_eq!(next.object(0).unwrap().rotation, 2);
    }

    #[test]
    fn out_of_bounds_is_an_error() {
        let scene = Scene::empty(&cfg());
        let a = ActionPrim::new(Cell::new(8, 0), Cell::new(0, 0), 0);
        assert!(matches!(step(&cfg(), &scene, &a), Err(SimError::OutOfBounds { .. })));
        let a = ActionPrim::new(Cell::new(0, 0), Cell::new(0, 0), 4);
        assert!(matches!(step(&cfg(), &scene, &a), Err(SimError::BadRotation(4))));
    }

    #[test]
    fn observe_geometry_and_patches() {
        let cache = RenderCache::new(cfg());
        let scene = reset(&cfg(), 3, &SceneSpec { receptacles: 1, ..SceneSpec::uniform(&cfg(), 4) }).unwrap();
        let obs = observe(&cache, &scene);
        assert_eq!(obs.object_views().count(), 4);
        assert_eq!(obs.views.len(), 5);
        for (view, o) in obs.object_views().zip(&scene.objects) {
            let k = 16.0;
            let (r, c) = (o.cell.row as f32, o.cell.col as f32);
            assert_eq!(view.bbox.0, [c * k, r * k, c * k + k, r * k + k]);
            assert_eq!(&*view.patch, &render(&cfg(), o.asset())[..]);
        }
        assert!(observe(&cache, &Scene::empty(&cfg())).views.is_empty());
    }

    #[test]
    fn action_tokens_round_trip() {
        let a = ActionPrim::new(Cell::new(3, 5), Cell::new(7, 0), 2);
        assert_eq!(ActionPrim::from_tokens(&a.tokens()), a);
    }

    fn arb_action() -> impl Strategy<Value = ActionPrim> {
        (0u16..8, 0u16..8, 0u16..8, 0u16..8, 0u16..4)
            .prop_map(|(a, b, c, d, r)| ActionPrim::new(Cell::new(a, b), Cell::new(c, d), r))
    }

    proptest! {
        #[test]
        fn steps_conserve_objects(seed in 0u64..500, actions in proptest::collection::vec(arb_action(), 0..20)) {
            let scene = reset(&cfg(), seed, &SceneSpec::uniform(&cfg(), 6)).unwrap();
            let before = scene.asset_multiset();
            let mut cur = scene;
            for a in &actions {
                cur = step(&cfg(), &cur, a).unwrap().0;
                prop_assert!(cur.is_valid());
                prop_assert_eq!(cur.asset_multiset(), before.clone());
            }
        }

        #[test]
        fn r_rotations_are_identity(seed in 0u64..500) {
            let scene = reset(&cfg(), seed, &SceneSpec::uniform(&cfg(), 3)).unwrap();
            let o = scene.objects[0];
            let mut cur = scene.clone();
            for _ in 0..cfg().rotations {
                cur = step(&cfg(), &cur, &ActionPrim::new(o.cell, o.cell, 1)).unwrap().0;
            }
            prop_assert_eq!(cur, scene);
        }
    }
}
