//! Four-level evaluation harness.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::exec::{batch_map, ExecMode};
use crate::model::{DecodeStrategy, Policy};
use crate::sim::{step, ActionPrim, Cell, StepFlag, ACTION_DIMS};
use crate::tasks::shard::Manifest;
use crate::tasks::{derive_seed, edit_holdout_prompt, scripted_expert, Level, TaskInstance, TaskSuite, TaskType};

/// Anything that can act in an episode.
#[derive(Clone, Copy)]
pub enum Agent<'a> {
    Policy(&'a Policy, DecodeStrategy),
    /// Open-loop replay of the scripted expert's plan.
    Expert,
    /// Uniform tokens over every action dimension.
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub level: Level,
    pub task: TaskType,
    pub seed: u64,
    pub steps: usize,
    pub illegal: usize,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub level: Level,
    pub task: TaskType,
    pub episodes: usize,
    pub successes: usize,
    /// `successes / episodes`.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub episodes: usize,
    pub prompt_edit: bool,
    pub results: Vec<TaskResult>,
    pub logs: Vec<EpisodeLog>,
}

impl EvalReport {
    pub fn rate(&self, level: Level, task: TaskType) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.level == level && r.task == task)
            .map(|r| r.rate)
    }

    /// Mean success rate over the tasks of one level.
    pub fn level_mean(&self, level: Level) -> Option<f64> {
        let rs: Vec<f64> = self.results.iter().filter(|r| r.level == level).map(|r| r.rate).collect();
        (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| PipelineError::Config(format!("bad report: {e}")))
    }

    /// Aligned plain-text table, one row per (level, task).
    pub fn to_table(&self) -> String {
        let rows: Vec<[String; 5]> = self
            .results
            .iter()
            .map(|r| {
                [
                    r.level.to_string(),
                    r.task.name().to_string(),
                    r.successes.to_string(),
                    r.episodes.to_string(),
                    format!("{:.1}%", 100.0 * r.rate),
                ]
            })
            .collect();
        let header = ["level", "task", "successes", "episodes", "success"];
        let mut w = header.map(str::len);
        for r in &rows {
            for (i, c) in r.iter().enumerate() {
                w[i] = w[i].max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, c: &[String; 5]| {
            let _ = writeln!(
                out,
                "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}  {:>w4$}",
                c[0], c[1], c[2], c[3], c[4],
                w0 = w[0], w1 = w[1], w2 = w[2], w3 = w[3], w4 = w[4]
            );
        };
        line(&mut out, &header.map(String::from));
        for r in &rows {
            line(&mut out, r);
        }
        let _ = writeln!(out, "config {}  episodes/task {}", self.config_hash, self.episodes);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub levels: Vec<Level>,
    /// Restrict to these families; `None` evaluates every family valid at each level.
    pub tasks: Option<Vec<TaskType>>,
    pub episodes: usize,
    pub seed: u64,
    pub prompt_edit: bool,
}

/// Episode seed for `(level, task, index)`.
pub fn episode_seed(master: u64, level: Level, task: TaskType, i: usize) -> u64 {
    derive_seed(master, ((level.index() as u64) << 48) | ((task.index() as u64) << 40) | i as u64)
}

fn tokens_to_action(tokens: &[usize]) -> ActionPrim {
    let mut t = [0usize; ACTION_DIMS];
    t[..tokens.len()].copy_from_slice(tokens);
    ActionPrim {
        pick: Cell::new(t[0] as u16, t[1] as u16),
        pick_rot: t[2] as u16,
        place: Cell::new(t[3] as u16, t[4] as u16),
        place_rot: t[5] as u16,
    }
}

/// Runs one episode: up to twice the expert's length in steps; illegal
/// actions consume a step.
pub fn run_episode(agent: Agent, suite: &TaskSuite, instance: &TaskInstance, prompt_edit: bool) -> Result<EpisodeLog> {
    let sim = &suite.cfg.sim;
    let plan = scripted_expert(&suite.cfg, instance)?;
    let limit = 2 * plan.len();
    let shown = if prompt_edit && suite.cfg.split.holdout().contains(&instance.task) {
        edit_holdout_prompt(instance)?
    } else {
        instance.clone()
    };
    let mut scene = instance.scene.clone();
    let mut log = EpisodeLog {
        level: instance.level,
        task: instance.task,
        seed: instance.seed,
        steps: 0,
        illegal: 0,
        success: instance.success(&scene),
    };
    let mut ctx = match agent {
        Agent::Policy(p, _) => Some(p.begin_episode(&shown.prompt)?),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(instance.seed, 0x5eed));
    let bins = ActionPrim::bins(sim);
    while !log.success && log.steps < limit {
        let action = match agent {
            Agent::Policy(p, strategy) => {
                let ctx = ctx.as_mut().expect("policy context");
                p.push_observation(ctx, &scene)?;
                let strategy = match strategy {
                    DecodeStrategy::Sample(s) => DecodeStrategy::Sample(derive_seed(s ^ instance.seed, log.steps as u64)),
                    g => g,
                };
                let toks = p.decode_action(ctx, p.config.decode_mode, strategy)?;
                p.push_action(ctx, &toks);
                tokens_to_action(&toks)
            }
            Agent::Expert => plan.actions[log.steps.min(plan.len() - 1)],
            Agent::Random => {
                let toks: Vec<usize> = bins.iter().map(|&b| rng.gen_range(0..b)).collect();
                tokens_to_action(&toks)
            }
        };
        let (next, flag) = step(sim, &scene, &action)?;
        scene = next;
        log.steps += 1;
        log.illegal += usize::from(flag != StepFlag::Ok);
        log.success = instance.success(&scene);
    }
    Ok(log)
}

/// Checks that a training manifest describes the same board, split and
/// seen-asset pools as `suite`.
pub fn check_manifest(suite: &TaskSuite, manifest_text: &str) -> Result<()> {
    let m = Manifest::from_text(manifest_text).map_err(PipelineError::ManifestMismatch)?;
    let ours = suite.manifest(m.level, m.seed);
    let mismatch = |what: &str| Err(PipelineError::ManifestMismatch(format!("{what} differs between checkpoint and evaluation suite")));
    if m.sim != ours.sim {
        return mismatch("board/asset configuration");
    }
    if m.split != ours.split {
        return mismatch("task split");
    }
    if m.combos != ours.combos || m.shapes != ours.shapes || m.textures != ours.textures {
        return mismatch("asset pool");
    }
    Ok(())
}

/// Evaluates `agent` over `E` seeded episodes for each valid (level, task).
/// Episodes are independent and may run in parallel; logs keep job order.
pub fn evaluate(
    agent: Agent,
    suite: &TaskSuite,
    cfg: &EvalConfig,
    manifest: Option<&str>,
    config_hash: &str,
    exec: ExecMode,
) -> Result<EvalReport> {
    if let Some(m) = manifest {
        check_manifest(suite, m)?;
    }
    let mut cells = Vec::new();
    for &level in &cfg.levels {
        let family: Vec<TaskType> = if level == Level::L4 {
            suite.cfg.split.holdout().to_vec()
        } else {
            suite.cfg.split.train().to_vec()
        };
        for task in family {
            if cfg.tasks.as_ref().is_none_or(|t| t.contains(&task)) {
                cells.push((level, task));
            }
        }
    }
    let jobs: Vec<(Level, TaskType, u64)> = cells
        .iter()
        .flat_map(|&(l, t)| (0..cfg.episodes).map(move |i| (l, t, episode_seed(cfg.seed, l, t, i))))
        .collect();
    let logs = batch_map(exec, &jobs, |_, &(level, task, seed)| -> Result<EpisodeLog> {
        let inst = suite.generate(task, level, seed)?;
        run_episode(agent, suite, &inst, cfg.prompt_edit)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let results = cells
        .iter()
        .map(|&(level, task)| {
            let successes = logs.iter().filter(|l| l.level == level && l.task == task && l.success).count();
            TaskResult {
                level,
                task,
                episodes: cfg.episodes,
                successes,
                rate: if cfg.episodes == 0 { 0.0 } else { successes as f64 / cfg.episodes as f64 },
            }
        })
        .collect();
    Ok(EvalReport {
        config_hash: config_hash.to_string(),
        episodes: cfg.episodes,
        prompt_edit: cfg.prompt_edit,
        results,
        logs,
    })
}
