//! Experiment configuration as line-oriented `key = value` text.
//!
//! `#` starts a comment. `include = other.cfg` loads another file (relative
//! to the including file) at that point; later lines override earlier ones.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{PipelineError, Result};
use crate::model::PolicyConfig;
use crate::tasks::{AugmentConfig, Level, TaskConfig};
use crate::tensor::{AdamWConfig, LrScheduleConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PretrainMode {
    None,
    #[default]
    MotionFollowing,
    Masked,
}

impl PretrainMode {
    pub fn name(self) -> &'static str {
        match self {
            PretrainMode::None => "none",
            PretrainMode::MotionFollowing => "motion_following",
            PretrainMode::Masked => "masked",
        }
    }
}

impl FromStr for PretrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "motion_following" => Ok(Self::MotionFollowing),
            "masked" => Ok(Self::Masked),
            _ => Err(format!("unknown pretrain mode `{s}`")),
        }
    }
}

/// `auto` or an explicit count.
fn parse_auto(v: &str) -> std::result::Result<Option<u64>, String> {
    if v == "auto" {
        Ok(None)
    } else {
        v.parse().map(Some).map_err(|_| format!("expected `auto` or an integer, got `{v}`"))
    }
}

fn show_auto(v: Option<u64>) -> String {
    v.map_or_else(|| "auto".to_string(), |n| n.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: TaskConfig,
    /// `policy.sim` always mirrors `task.sim`.
    pub policy: PolicyConfig,
    pub demos_per_task: usize,
    pub data_seed: u64,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub batch_size: usize,
    pub pretrain_mode: PretrainMode,
    pub pretrain_epochs: usize,
    pub two_step_pretrain: bool,
    pub second_stage_epochs: usize,
    pub finetune_epochs: usize,
    /// Iteration overrides; `None` derives them from epochs.
    pub n_pretrain: Option<u64>,
    pub n_ft: Option<u64>,
    pub lr: f64,
    pub min_lr: f64,
    /// `None` uses the reference warmup share of the phase length.
    pub warmup_steps: Option<u64>,
    pub anneal_steps: Option<u64>,
    pub adam: AdamWConfig,
    pub modified_ft_probability: f64,
    pub augment: AugmentConfig,
    pub eval_episodes: usize,
    pub eval_levels: Vec<Level>,
    pub eval_seed: u64,
    pub prompt_edit: bool,
    /// Save a checkpoint every this many optimizer steps; 0 disables.
    pub checkpoint_every: u64,
    /// Log one curve point every this many steps.
    pub log_every: u64,
}

/// Reference schedule: 7,000 warmup steps out of 103,160 iterations.
pub const WARMUP_SHARE: f64 = 7_000.0 / 103_160.0;

impl Default for TrainConfig {
    fn default() -> Self {
        let task = TaskConfig::default();
        Self {
            policy: PolicyConfig {
                sim: task.sim,
                ..PolicyConfig::default()
            },
            task,
            demos_per_task: 2_000,
            data_seed: 1,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            batch_size: 64,
            pretrain_mode: PretrainMode::MotionFollowing,
            pretrain_epochs: 20,
            two_step_pretrain: false,
            second_stage_epochs: 5,
            finetune_epochs: 10,
            n_pretrain: None,
            n_ft: None,
            lr: 1e-4,
            min_lr: 1e-7,
            warmup_steps: None,
            anneal_steps: None,
            adam: AdamWConfig::default(),
            modified_ft_probability: 0.0,
            augment: AugmentConfig::default(),
            eval_episodes: 200,
            eval_levels: Level::ALL.to_vec(),
            eval_seed: 7,
            prompt_edit: false,
            checkpoint_every: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    /// The desk-scale preset used by the shipped configs and the end-to-end
    /// budget check.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.apply_text(DESK_PRESET, None).expect("desk preset parses");
        c
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PipelineError::Config(m));
        self.task.validate()?;
        self.policy.validate()?;
        if self.policy.sim != self.task.sim {
            return fail("policy sim differs from task sim".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.modified_ft_probability) {
            return fail("modified_ft_probability must be in [0, 1]".into());
        }
        let a = &self.augment;
        if a.jitter < 0.0 || a.max_shift < 0.0 || !(0.0..=1.0).contains(&a.grayscale_prob) {
            return fail("augmentation strengths out of range".into());
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr) {
            return fail("need 0 < min_lr <= lr".into());
        }
        if self.eval_levels.is_empty() {
            return fail("eval_levels is empty".into());
        }
        Ok(())
    }

    /// Optimizer steps for a phase over `n` samples and `epochs` passes.
    pub fn iterations(&self, n: usize, epochs: usize, explicit: Option<u64>) -> u64 {
        explicit.unwrap_or_else(|| (epochs * n.div_ceil(self.batch_size)) as u64)
    }

    /// Warmup then cosine over a phase of `total` steps.
    pub fn schedule(&self, total: u64) -> LrScheduleConfig {
        let warmup = self
            .warmup_steps
            .unwrap_or_else(|| (total as f64 * WARMUP_SHARE).round() as u64);
        LrScheduleConfig {
            base_lr: self.lr,
            min_lr: self.min_lr,
            warmup_steps: warmup,
            anneal_steps: self.anneal_steps.unwrap_or(total.saturating_sub(warmup)).max(1),
        }
    }

    pub fn shard_path(&self) -> PathBuf {
        self.data_dir.join("train.shard")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut c = Self::default();
        c.apply_file(path.as_ref(), 0)?;
        c.validate()?;
        Ok(c)
    }

    fn apply_file(&mut self, path: &Path, depth: usize) -> Result<()> {
        if depth > 16 {
            return Err(PipelineError::Config(format!("include depth exceeded at {}", path.display())));
        }
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_lines(&text, path.parent(), depth)
    }

    /// Applies `key = value` lines. Includes resolve against `base`.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        self.apply_lines(text, base, 0)
    }

    fn apply_lines(&mut self, text: &str, base: Option<&Path>, depth: usize) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "include" {
                let p = base.map_or_else(|| PathBuf::from(v), |b| b.join(v));
                self.apply_file(&p, depth + 1)?;
            } else {
                self.set(k, v)
                    .map_err(|e| PipelineError::Config(format!("line {}: {e}", no + 1)))?;
            }
        }
        Ok(())
    }

    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn p<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}`"))
        }
        let pc = &mut self.policy;
        let tc = &mut self.task;
        match key {
            "board_width" => tc.sim.width = p(v)?,
            "board_height" => tc.sim.height = p(v)?,
            "patch" => tc.sim.patch = p(v)?,
            "rotations" => tc.sim.rotations = p(v)?,
            "num_shapes" => tc.sim.shapes = p(v)?,
            "num_textures" => tc.sim.textures = p(v)?,
            "min_objects" => tc.min_objects = p(v)?,
            "max_objects" => tc.max_objects = p(v)?,
            "split" => tc.split = v.parse()?,
            "twist_examples" => tc.twist_examples = p(v)?,
            "max_motion_steps" => tc.max_motion_steps = p(v)?,
            "max_order_len" => tc.max_order_len = p(v)?,
            "restore_displaced" => tc.restore_displaced = p(v)?,
            "randomized_restore" => tc.randomized_restore = p(v)?,
            "restore_rotate_prob" => tc.restore_rotate_prob = p(v)?,
            "put_into_receptacles" => tc.put_into_receptacles = p(v)?,
            "d_model" => pc.d = p(v)?,
            "layers" => pc.layers = p(v)?,
            "heads" => pc.heads = p(v)?,
            "encoder_layers" => pc.enc_layers = p(v)?,
            "ff_mult" => pc.ff_mult = p(v)?,
            "patch_hidden" => pc.patch_hidden = p(v)?,
            "bbox_hidden" => pc.bbox_hidden = p(v)?,
            "action_dims" => pc.n_a = p(v)?,
            "max_len" => pc.max_len = p(v)?,
            "max_prompt_len" => pc.max_prompt_len = p(v)?,
            "max_steps" => pc.max_steps = p(v)?,
            "dropout" => pc.dropout = p(v)?,
            "decode_mode" => pc.decode_mode = v.parse()?,
            "prompt_mode" => pc.prompt_mode = v.parse()?,
            "freeze_lm" => pc.freeze_lm = p(v)?,
            "demos_per_task" => self.demos_per_task = p(v)?,
            "data_seed" => self.data_seed = p(v)?,
            "seed" => self.seed = p(v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "batch_size" => self.batch_size = p(v)?,
            "pretrain_mode" => self.pretrain_mode = v.parse()?,
            "pretrain_epochs" => self.pretrain_epochs = p(v)?,
            "two_step_pretrain" => self.two_step_pretrain = p(v)?,
            "second_stage_epochs" => self.second_stage_epochs = p(v)?,
            "finetune_epochs" => self.finetune_epochs = p(v)?,
            "n_pretrain" => self.n_pretrain = parse_auto(v)?,
            "n_ft" => self.n_ft = parse_auto(v)?,
            "lr" => self.lr = p(v)?,
            "min_lr" => self.min_lr = p(v)?,
            "warmup_steps" => self.warmup_steps = parse_auto(v)?,
            "anneal_steps" => self.anneal_steps = parse_auto(v)?,
            "beta1" => self.adam.beta1 = p(v)?,
            "beta2" => self.adam.beta2 = p(v)?,
            "eps" => self.adam.eps = p(v)?,
            "weight_decay" => self.adam.weight_decay = p(v)?,
            "clip_norm" => self.adam.clip_norm = if v == "none" { None } else { Some(p(v)?) },
            "modified_ft_probability" => self.modified_ft_probability = p(v)?,
            "augment_jitter" => self.augment.jitter = p(v)?,
            "augment_grayscale" => self.augment.grayscale_prob = p(v)?,
            "augment_shift" => self.augment.max_shift = p(v)?,
            "eval_episodes" => self.eval_episodes = p(v)?,
            "eval_levels" => {
                self.eval_levels = v
                    .split(',')
                    .map(|s| s.trim().parse::<Level>())
                    .collect::<std::result::Result<_, _>>()?
            }
            "eval_seed" => self.eval_seed = p(v)?,
            "prompt_edit" => self.prompt_edit = p(v)?,
            "checkpoint_every" => self.checkpoint_every = p(v)?,
            "log_every" => self.log_every = p(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        self.policy.sim = self.task.sim;
        Ok(())
    }

    /// Every key with its current value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.task;
        let pc = &self.policy;
        let levels: Vec<String> = self.eval_levels.iter().map(Level::to_string).collect();
        let entries: Vec<(&str, String)> = vec![
            ("board_width", t.sim.width.to_string()),
            ("board_height", t.sim.height.to_string()),
            ("patch", t.sim.patch.to_string()),
            ("rotations", t.sim.rotations.to_string()),
            ("num_shapes", t.sim.shapes.to_string()),
            ("num_textures", t.sim.textures.to_string()),
            ("min_objects", t.min_objects.to_string()),
            ("max_objects", t.max_objects.to_string()),
            ("split", t.split.name().to_string()),
            ("twist_examples", t.twist_examples.to_string()),
            ("max_motion_steps", t.max_motion_steps.to_string()),
            ("max_order_len", t.max_order_len.to_string()),
            ("restore_displaced", t.restore_displaced.to_string()),
            ("randomized_restore", t.randomized_restore.to_string()),
            ("restore_rotate_prob", t.restore_rotate_prob.to_string()),
            ("put_into_receptacles", t.put_into_receptacles.to_string()),
            ("d_model", pc.d.to_string()),
            ("layers", pc.layers.to_string()),
            ("heads", pc.heads.to_string()),
            ("encoder_layers", pc.enc_layers.to_string()),
            ("ff_mult", pc.ff_mult.to_string()),
            ("patch_hidden", pc.patch_hidden.to_string()),
            ("bbox_hidden", pc.bbox_hidden.to_string()),
            ("action_dims", pc.n_a.to_string()),
            ("max_len", pc.max_len.to_string()),
            ("max_prompt_len", pc.max_prompt_len.to_string()),
            ("max_steps", pc.max_steps.to_string()),
            ("dropout", pc.dropout.to_string()),
            ("decode_mode", pc.decode_mode.name().to_string()),
            ("prompt_mode", pc.prompt_mode.name().to_string()),
            ("freeze_lm", pc.freeze_lm.to_string()),
            ("demos_per_task", self.demos_per_task.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("seed", self.seed.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("pretrain_mode", self.pretrain_mode.name().to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("two_step_pretrain", self.two_step_pretrain.to_string()),
            ("second_stage_epochs", self.second_stage_epochs.to_string()),
            ("finetune_epochs", self.finetune_epochs.to_string()),
            ("n_pretrain", show_auto(self.n_pretrain)),
            ("n_ft", show_auto(self.n_ft)),
            ("lr", self.lr.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("warmup_steps", show_auto(self.warmup_steps)),
            ("anneal_steps", show_auto(self.anneal_steps)),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("eps", self.adam.eps.to_string()),
            ("weight_decay", self.adam.weight_decay.to_string()),
            ("clip_norm", self.adam.clip_norm.map_or_else(|| "none".into(), |c| c.to_string())),
            ("modified_ft_probability", self.modified_ft_probability.to_string()),
            ("augment_jitter", self.augment.jitter.to_string()),
            ("augment_grayscale", self.augment.grayscale_prob.to_string()),
            ("augment_shift", self.augment.max_shift.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("eval_levels", levels.join(",")),
            ("eval_seed", self.eval_seed.to_string()),
            ("prompt_edit", self.prompt_edit.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
        ];
        let width = entries.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k:<width$} = {v}");
        }
        out
    }

    /// Hex SHA-256 of [`to_text`](Self::to_text), truncated to 16 digits.
    pub fn hash(&self) -> String {
        crate::model::checkpoint::hex_digest(self.to_text().as_bytes())[..16].to_string()
    }
}

/// Overrides applied on top of the defaults by [`TrainConfig::desk`].
pub const DESK_PRESET: &str = include_str!("desk.cfg");
