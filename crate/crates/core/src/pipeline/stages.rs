//! File-backed pipeline stages shared by the command line and the end-to-end
//! tests. Every stage reads and writes under the config's `data_dir` and
//! `out_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use super::eval::{evaluate, Agent, EvalConfig, EvalReport};
use super::train::{run_finetune, run_pretrain, write_curve, TrainOutcome};
use super::{PipelineError, Result, TrainConfig};
use crate::exec::ExecMode;
use crate::model::{Checkpoint, DecodeStrategy};
use crate::tasks::{generate_dataset, read_shard, write_shard, DatasetShard, Level, TaskSuite};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";
pub const REPORT_JSON: &str = "eval_report.json";
pub const REPORT_TABLE: &str = "eval_report.txt";

/// Generates the L1 training demonstrations for every training family and
/// writes the shard.
pub fn gen_data(cfg: &TrainConfig, exec: ExecMode) -> Result<DatasetShard> {
    cfg.validate()?;
    let suite = TaskSuite::new(cfg.task.clone())?;
    let shard = generate_dataset(&suite, Level::L1, &cfg.task.split.train(), cfg.demos_per_task, cfg.data_seed, exec)?;
    fs::create_dir_all(&cfg.data_dir)?;
    write_shard(&shard, &cfg.shard_path())?;
    Ok(shard)
}

pub fn load_shard(cfg: &TrainConfig) -> Result<DatasetShard> {
    let path = cfg.shard_path();
    if !path.exists() {
        return Err(PipelineError::MissingData(format!("{} not found; run gen-data first", path.display())));
    }
    Ok(read_shard(&path)?)
}

fn save_outcome(cfg: &TrainConfig, out: &TrainOutcome, ckpt: &str, curve: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(ckpt);
    out.checkpoint.save(&path)?;
    write_curve(&cfg.out_dir.join(curve), &out.curve)?;
    Ok(path)
}

pub fn pretrain(cfg: &TrainConfig, exec: ExecMode) -> Result<TrainOutcome> {
    let shard = load_shard(cfg)?;
    let out = run_pretrain(cfg, &shard, exec)?;
    save_outcome(cfg, &out, PRETRAIN_CHECKPOINT, "pretrain_curve.tsv")?;
    Ok(out)
}

/// Finetunes from `start`, or from a fresh initialization when `None`.
pub fn finetune(cfg: &TrainConfig, start: Option<&Path>, exec: ExecMode) -> Result<TrainOutcome> {
    let shard = load_shard(cfg)?;
    let start = match start {
        Some(p) => Checkpoint::load(p)?,
        None => {
            let fresh = TrainConfig {
                pretrain_mode: super::PretrainMode::None,
                ..cfg.clone()
            };
            run_pretrain(&fresh, &shard, exec)?.checkpoint
        }
    };
    let out = run_finetune(cfg, &start, &shard, exec)?;
    save_outcome(cfg, &out, FINETUNE_CHECKPOINT, "finetune_curve.tsv")?;
    Ok(out)
}

pub fn eval_config(cfg: &TrainConfig) -> EvalConfig {
    EvalConfig {
        levels: cfg.eval_levels.clone(),
        tasks: None,
        episodes: cfg.eval_episodes,
        seed: cfg.eval_seed,
        prompt_edit: cfg.prompt_edit,
    }
}

/// Greedy evaluation of a checkpoint; writes the JSON report and the table
/// into `out_dir`.
pub fn eval(cfg: &TrainConfig, checkpoint: &Path, exec: ExecMode) -> Result<EvalReport> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let suite = TaskSuite::new(cfg.task.clone())?;
    let report = evaluate(
        Agent::Policy(&ck.policy, DecodeStrategy::Greedy),
        &suite,
        &eval_config(cfg),
        ck.manifest.as_deref(),
        &cfg.hash(),
        exec,
    )?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(REPORT_JSON), report.to_json())?;
    fs::write(cfg.out_dir.join(REPORT_TABLE), report.to_table())?;
    Ok(report)
}
