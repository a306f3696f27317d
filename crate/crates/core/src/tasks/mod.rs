//! Task families, generalization levels, scripted experts and datasets.
//!
//! Five families are provided. Each instance carries a multimodal prompt, an
//! initial scene and a [`Goal`] whose satisfaction is a pure function of the
//! final scene.

mod expert;
mod generate;
pub mod prompt;
pub mod shard;
mod transform;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{ActionPrim, Cell, Scene, SimConfig, SimError, StepFlag};

pub use expert::scripted_expert;
pub use generate::{generate_dataset, TaskSuite};
pub use prompt::{Appearance, ImageElement, ImageKind, Prompt, PromptElement, PromptView};
pub use shard::{read_shard, write_shard, DatasetShard, Record};
pub use transform::{
    augment_sample, description_words, edit_holdout_prompt, make_pretrain_sample, modified_ft_transform,
    AugmentConfig, Sample,
};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task {task} is not available at level {level}")]
    LevelMismatch { task: TaskType, level: Level },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("expert failed on {task} seed {seed}: {reason}")]
    Planner {
        task: TaskType,
        seed: u64,
        reason: String,
    },
    #[error("prompt editing is not defined for {0}")]
    Unsupported(TaskType),
    #[error("invalid task config: {0}")]
    Config(String),
    #[error("shard format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt shard: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TaskError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskType {
    PutInto,
    RearrangeRestore,
    Twist,
    FollowMotion,
    FollowOrder,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [
        TaskType::PutInto,
        TaskType::RearrangeRestore,
        TaskType::Twist,
        TaskType::FollowMotion,
        TaskType::FollowOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskType::PutInto => "put_into",
            TaskType::RearrangeRestore => "rearrange_restore",
            TaskType::Twist => "twist",
            TaskType::FollowMotion => "follow_motion",
            TaskType::FollowOrder => "follow_order",
        }
    }

    pub fn index(self) -> usize {
        TaskType::ALL.iter().position(|&t| t == self).expect("listed")
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskType {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
    L4,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::L1, Level::L2, Level::L3, Level::L4];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.index() + 1)
    }
}

impl FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "L1" => Ok(Level::L1),
            "L2" => Ok(Level::L2),
            "L3" => Ok(Level::L3),
            "L4" => Ok(Level::L4),
            _ => Err(format!("unknown level `{s}`")),
        }
    }
}

/// Which families are trained on and which are held out as L4.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskSplit {
    /// Train on everything but FOLLOW_MOTION.
    #[default]
    Standard,
    /// Hold out TWIST and FOLLOW_ORDER.
    InContext,
}

impl TaskSplit {
    pub fn holdout(self) -> &'static [TaskType] {
        match self {
            TaskSplit::Standard => &[TaskType::FollowMotion],
            TaskSplit::InContext => &[TaskType::Twist, TaskType::FollowOrder],
        }
    }

    pub fn train(self) -> Vec<TaskType> {
        TaskType::ALL
            .into_iter()
            .filter(|t| !self.holdout().contains(t))
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskSplit::Standard => "standard",
            TaskSplit::InContext => "in_context",
        }
    }
}

impl FromStr for TaskSplit {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "standard" => Ok(TaskSplit::Standard),
            "in_context" => Ok(TaskSplit::InContext),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

/// Generator settings shared by all families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub sim: SimConfig,
    pub min_objects: usize,
    pub max_objects: usize,
    pub split: TaskSplit,
    /// In-context before/after pairs in a TWIST prompt.
    pub twist_examples: usize,
    pub max_motion_steps: usize,
    pub max_order_len: usize,
    pub restore_displaced: usize,
    /// Restore displaced objects in a seeded random order instead of by uid.
    pub randomized_restore: bool,
    /// Chance that a displaced object is rotated in place instead of moved.
    pub restore_rotate_prob: f64,
    pub put_into_receptacles: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            min_objects: 2,
            max_objects: 3,
            split: TaskSplit::Standard,
            twist_examples: 3,
            max_motion_steps: 2,
            max_order_len: 3,
            restore_displaced: 2,
            randomized_restore: false,
            restore_rotate_prob: 0.5,
            put_into_receptacles: 2,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.sim;
        let fail = |m: &str| Err(TaskError::Config(m.to_string()));
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return fail("need 2 <= min_objects <= max_objects");
        }
        if s.shapes < 3 || s.textures < 3 {
            return fail("need at least 3 shapes and 3 textures");
        }
        if s.rotations < 2 {
            return fail("need at least 2 rotation bins");
        }
        if s.width < self.max_order_len.max(2) {
            return fail("board narrower than the FOLLOW_ORDER lane");
        }
        let extra = self.max_motion_steps.max(self.max_order_len).max(self.put_into_receptacles)
            + self.restore_displaced;
        if s.width * s.height < self.max_objects + extra {
            return fail("board too small for the object count");
        }
        if !(0.0..=1.0).contains(&self.restore_rotate_prob) {
            return fail("restore_rotate_prob must be in [0, 1]");
        }
        if self.twist_examples == 0 || self.max_motion_steps == 0 || self.max_order_len < 2 {
            return fail("twist_examples, max_motion_steps must be >= 1 and max_order_len >= 2");
        }
        if self.put_into_receptacles == 0 || self.put_into_receptacles > s.textures - 1 {
            return fail("put_into_receptacles out of range");
        }
        if AssetSplit::new(s).train_combos().len() < self.max_objects {
            return fail("too few training combinations for max_objects");
        }
        Ok(())
    }
}

/// Seen/held-out partition of shapes, textures and their combinations.
///
/// The last shape and the last texture are never used for training (L3).
/// Among seen pairs, those with `(shape + texture) % 4 == 3` are held out as
/// novel combinations (L2).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetSplit {
    pub seen_shapes: Vec<u16>,
    pub seen_textures: Vec<u16>,
    pub novel_shape: u16,
    pub novel_texture: u16,
}

impl AssetSplit {
    pub fn new(cfg: &SimConfig) -> Self {
        Self {
            seen_shapes: (0..cfg.shapes as u16 - 1).collect(),
            seen_textures: (0..cfg.textures as u16 - 1).collect(),
            novel_shape: cfg.shapes as u16 - 1,
            novel_texture: cfg.textures as u16 - 1,
        }
    }

    fn is_heldout_combo(s: u16, t: u16) -> bool {
        (s + t) % 4 == 3
    }

    pub fn train_combos(&self) -> Vec<(u16, u16)> {
        self.seen_pairs().filter(|&(s, t)| !Self::is_heldout_combo(s, t)).collect()
    }

    pub fn heldout_combos(&self) -> Vec<(u16, u16)> {
        self.seen_pairs().filter(|&(s, t)| Self::is_heldout_combo(s, t)).collect()
    }

    /// Pairs using the held-out shape or the held-out texture.
    pub fn novel_asset_combos(&self) -> Vec<(u16, u16)> {
        let shapes = self.seen_shapes.iter().copied().chain([self.novel_shape]);
        shapes
            .flat_map(|s| {
                self.seen_textures
                    .iter()
                    .copied()
                    .chain([self.novel_texture])
                    .map(move |t| (s, t))
            })
            .filter(|&(s, t)| s == self.novel_shape || t == self.novel_texture)
            .collect()
    }

    fn seen_pairs(&self) -> impl Iterator<Item = (u16, u16)> + '_ {
        self.seen_shapes
            .iter()
            .flat_map(move |&s| self.seen_textures.iter().map(move |&t| (s, t)))
    }

    /// Pairs that must include at least one member at `level`, if any.
    pub fn required(&self, level: Level) -> Option<Vec<(u16, u16)>> {
        match level {
            Level::L1 | Level::L4 => None,
            Level::L2 => Some(self.heldout_combos()),
            Level::L3 => Some(self.novel_asset_combos()),
        }
    }
}

/// Target state of one object. `rotation: None` accepts any orientation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub uid: u32,
    pub cell: Cell,
    pub rotation: Option<u16>,
}

/// Conjunction of placements; the success predicate of every family.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Goal {
    pub placements: Vec<Placement>,
}

impl Goal {
    pub fn holds(p: &Placement, scene: &Scene) -> bool {
        scene
            .object(p.uid)
            .is_some_and(|o| o.cell == p.cell && p.rotation.is_none_or(|r| r == o.rotation))
    }

    pub fn satisfied(&self, scene: &Scene) -> bool {
        self.placements.iter().all(|p| Self::holds(p, scene))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task: TaskType,
    pub level: Level,
    pub seed: u64,
    pub prompt: Prompt,
    pub scene: Scene,
    pub goal: Goal,
}

impl TaskInstance {
    pub fn success(&self, scene: &Scene) -> bool {
        self.goal.satisfied(scene)
    }

    /// Every `(shape, texture)` pair appearing in the scene or the prompt.
    pub fn object_assets(&self) -> Vec<(u16, u16)> {
        let mut out: Vec<(u16, u16)> = self.scene.objects.iter().map(|o| (o.shape, o.texture)).collect();
        for img in self.prompt.images() {
            for v in &img.views {
                if v.asset.kind == crate::sim::AssetKind::Object {
                    out.push((v.asset.shape, v.asset.texture));
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Observations are implied by `scenes`; `scenes.len() == actions.len() + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scenes: Vec<Scene>,
    pub actions: Vec<ActionPrim>,
}

impl Trajectory {
    pub fn new(initial: Scene) -> Self {
        Self {
            scenes: vec![initial],
            actions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn last(&self) -> &Scene {
        self.scenes.last().expect("trajectory has an initial scene")
    }

    /// Applies `action`; illegal moves are recorded with an unchanged scene.
    pub fn push(&mut self, cfg: &SimConfig, action: ActionPrim) -> Result<StepFlag> {
        let (next, flag) = crate::sim::step(cfg, self.last(), &action)?;
        self.scenes.push(next);
        self.actions.push(action);
        Ok(flag)
    }

    /// Whether replaying the actions from the first scene reproduces every
    /// later scene exactly.
    pub fn replay_valid(&self, cfg: &SimConfig) -> bool {
        if self.scenes.len() != self.actions.len() + 1 {
            return false;
        }
        self.actions.iter().enumerate().all(|(t, a)| {
            crate::sim::step(cfg, &self.scenes[t], a).is_ok_and(|(next, _)| next == self.scenes[t + 1])
        })
    }
}

/// SplitMix64 finalizer; used to derive independent stream seeds.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
