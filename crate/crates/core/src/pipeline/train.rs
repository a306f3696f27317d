//! The two training phases: pretraining on motion-following samples, then
//! multi-task imitation finetuning.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{PretrainMode, TrainConfig};
use super::{PipelineError, Result};
use crate::exec::ExecMode;
use crate::model::{AttentionMode, Checkpoint, LossOptions, Policy, TrainingMeta, Vocabulary};
use crate::tasks::{augment_sample, derive_seed, make_pretrain_sample, modified_ft_transform, DatasetShard, Sample};
use crate::tensor::{lr_at_step, AdamW, LrScheduleConfig, TensorError};

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub phase: String,
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
    /// Mean batch loss of every completed or partial epoch, per phase.
    pub epoch_losses: Vec<(String, Vec<f64>)>,
    /// Per-dimension token accuracy over each epoch of the last phase.
    pub epoch_accuracy: Vec<Vec<f64>>,
}

/// Tab-separated training curve with a header row.
pub fn curve_tsv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("phase\tstep\tepoch\tloss\tlr\tgrad_norm\n");
    for p in curve {
        let _ = writeln!(out, "{}\t{}\t{}\t{:.6}\t{:.6e}\t{:.6}", p.phase, p.step, p.epoch, p.loss, p.lr, p.grad_norm);
    }
    out
}

pub fn pretrain_samples(shard: &DatasetShard) -> Vec<Sample> {
    shard
        .records
        .iter()
        .map(|r| make_pretrain_sample(&shard.manifest.sim, &r.trajectory))
        .collect()
}

pub fn finetune_samples(shard: &DatasetShard) -> Vec<Sample> {
    shard
        .records
        .iter()
        .map(|r| Sample {
            prompt: r.instance.prompt.clone(),
            trajectory: r.trajectory.clone(),
        })
        .collect()
}

struct Phase<'a> {
    name: &'a str,
    tag: u64,
    iterations: u64,
    schedule: LrScheduleConfig,
    opts: LossOptions,
    transform: &'a (dyn Fn(&Sample, u64) -> Sample + Sync),
}

fn dump(cfg: &TrainConfig, ck: &Checkpoint, name: &str) -> Option<PathBuf> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).ok()?;
    let path = dir.join(name);
    ck.save(&path).ok()?;
    Some(path)
}

/// Runs one phase of `iterations` steps over shuffled epochs of `samples`.
fn run_phase(
    cfg: &TrainConfig,
    policy: &mut Policy,
    samples: &[Sample],
    phase: &Phase,
    manifest: &Option<String>,
    exec: ExecMode,
    out: &mut TrainOutcome,
) -> Result<()> {
    if samples.is_empty() {
        return Err(PipelineError::MissingData("no training samples".into()));
    }
    let mut opt = AdamW::new(cfg.adam, &policy.params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let n_a = policy.config.n_a;
    let mut epoch_losses = Vec::new();
    let mut accuracy = Vec::new();
    let (mut sum, mut count) = (0.0, 0usize);
    let (mut hits, mut toks) = (vec![0usize; n_a], vec![0usize; n_a]);
    for step in 0..phase.iterations {
        let epoch = (step / per_epoch as u64) as usize;
        let k = (step % per_epoch as u64) as usize;
        if k == 0 {
            if count > 0 {
                epoch_losses.push(sum / count as f64);
                accuracy.push((0..n_a).map(|d| hits[d] as f64 / toks[d].max(1) as f64).collect());
            }
            (sum, count) = (0.0, 0);
            hits.iter_mut().chain(toks.iter_mut()).for_each(|x| *x = 0);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, (phase.tag << 32) | epoch as u64));
            order.shuffle(&mut rng);
        }
        let idx = &order[k * cfg.batch_size..((k + 1) * cfg.batch_size).min(samples.len())];
        let step_seed = derive_seed(cfg.seed, (phase.tag << 40) | step);
        let batch: Vec<Sample> = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| (phase.transform)(&samples[i], derive_seed(step_seed, j as u64)))
            .collect();
        let opts = LossOptions {
            dropout_seed: Some(step_seed),
            ..phase.opts
        };
        let abort = |policy: &Policy, what: String| {
            let ck = Checkpoint::new(
                policy.clone(),
                TrainingMeta {
                    phase: phase.name.into(),
                    step,
                    seed: cfg.seed,
                },
                manifest.clone(),
            );
            PipelineError::NonFinite {
                phase: phase.name.into(),
                step,
                what,
                dump: dump(cfg, &ck, &format!("abort_{}_{step}.ckpt", phase.name)),
            }
        };
        let (grads, stats) = match policy.batch_gradients(&batch, &opts, exec) {
            Ok(r) => r,
            Err(crate::model::ModelError::Tensor(TensorError::NonFinite { op, .. })) => {
                return Err(abort(policy, format!("gradient of {op}")));
            }
            Err(e) => return Err(e.into()),
        };
        if !stats.loss.is_finite() {
            return Err(abort(policy, "loss".into()));
        }
        let lr = lr_at_step(&phase.schedule, step);
        let st = opt.step(&mut policy.params, &grads, lr)?;
        sum += stats.loss;
        count += 1;
        for d in 0..n_a {
            hits[d] += stats.correct[d];
            toks[d] += stats.tokens[d];
        }
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == phase.iterations) {
            out.curve.push(CurvePoint {
                phase: phase.name.into(),
                step,
                epoch,
                loss: stats.loss,
                lr,
                grad_norm: st.grad_norm,
            });
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            let ck = Checkpoint::new(
                policy.clone(),
                TrainingMeta {
                    phase: phase.name.into(),
                    step: step + 1,
                    seed: cfg.seed,
                },
                manifest.clone(),
            );
            dump(cfg, &ck, &format!("{}_step{}.ckpt", phase.name, step + 1));
        }
    }
    if count > 0 {
        epoch_losses.push(sum / count as f64);
        accuracy.push((0..n_a).map(|d| hits[d] as f64 / toks[d].max(1) as f64).collect());
    }
    out.epoch_losses.push((phase.name.to_string(), epoch_losses));
    out.epoch_accuracy = accuracy;
    Ok(())
}

fn identity(s: &Sample, _: u64) -> Sample {
    s.clone()
}

/// Pretraining phase. With `PretrainMode::None` or zero iterations the
/// freshly initialized policy is returned unchanged.
pub fn run_pretrain(cfg: &TrainConfig, shard: &DatasetShard, exec: ExecMode) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_shard(cfg, shard)?;
    let manifest = Some(shard.manifest.to_text());
    let mut policy = Policy::new(cfg.policy.clone(), Vocabulary::standard(&cfg.task.sim), cfg.seed)?;
    let mut out = TrainOutcome {
        checkpoint: Checkpoint::new(
            policy.clone(),
            TrainingMeta {
                phase: "init".into(),
                step: 0,
                seed: cfg.seed,
            },
            manifest.clone(),
        ),
        curve: Vec::new(),
        epoch_losses: Vec::new(),
        epoch_accuracy: Vec::new(),
    };
    let samples = pretrain_samples(shard);
    let iterations = cfg.iterations(samples.len(), cfg.pretrain_epochs, cfg.n_pretrain);
    if cfg.pretrain_mode == PretrainMode::None || iterations == 0 {
        return Ok(out);
    }
    let masked = cfg.pretrain_mode == PretrainMode::Masked;
    let opts = LossOptions {
        decode_mode: cfg.policy.decode_mode,
        attention: if masked { AttentionMode::MaskedPretrain } else { AttentionMode::Causal },
        trailing_obs: masked,
        dropout_seed: None,
    };
    let first = Phase {
        name: "pretrain",
        tag: 1,
        iterations,
        schedule: cfg.schedule(iterations),
        opts,
        transform: &identity,
    };
    run_phase(cfg, &mut policy, &samples, &first, &manifest, exec, &mut out)?;
    let mut phase_name = "pretrain";
    let mut steps = iterations;
    if cfg.two_step_pretrain {
        // keep the object encoder, restart everything else and the schedule
        policy = policy.reinit_except_object_encoder(derive_seed(cfg.seed, 2))?;
        let second = cfg.iterations(samples.len(), cfg.second_stage_epochs, None);
        let phase = Phase {
            name: "pretrain2",
            tag: 2,
            iterations: second,
            schedule: cfg.schedule(second),
            opts,
            transform: &identity,
        };
        run_phase(cfg, &mut policy, &samples, &phase, &manifest, exec, &mut out)?;
        phase_name = "pretrain2";
        steps = second;
    }
    out.checkpoint = Checkpoint::new(
        policy,
        TrainingMeta {
            phase: phase_name.into(),
            step: steps,
            seed: cfg.seed,
        },
        manifest,
    );
    Ok(out)
}

/// Per-sample finetuning transform: Modified FT replacement, then prompt
/// augmentation.
pub fn finetune_transform(cfg: &TrainConfig, sample: &Sample, seed: u64) -> Sample {
    let mut s = Sample {
        prompt: modified_ft_transform(&sample.prompt, derive_seed(seed, 1), cfg.modified_ft_probability),
        trajectory: sample.trajectory.clone(),
    };
    if !cfg.augment.is_identity() {
        s = augment_sample(&s, derive_seed(seed, 2), &cfg.augment);
    }
    s
}

/// Multi-task imitation finetuning starting from `start`.
pub fn run_finetune(cfg: &TrainConfig, start: &Checkpoint, shard: &DatasetShard, exec: ExecMode) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_shard(cfg, shard)?;
    if start.policy.config.sim != cfg.task.sim {
        return Err(PipelineError::Config("checkpoint sim differs from config".into()));
    }
    let manifest = Some(shard.manifest.to_text());
    let mut policy = start.policy.clone();
    // decoding / freezing switches may differ from the pretraining run
    policy.config.decode_mode = cfg.policy.decode_mode;
    policy.config.prompt_mode = cfg.policy.prompt_mode;
    policy.config.dropout = cfg.policy.dropout;
    policy.config.freeze_lm = cfg.policy.freeze_lm;
    policy.params.set_trainable_prefix("lm.", !cfg.policy.freeze_lm);
    let samples = finetune_samples(shard);
    let iterations = cfg.iterations(samples.len(), cfg.finetune_epochs, cfg.n_ft);
    let mut out = TrainOutcome {
        checkpoint: start.clone(),
        curve: Vec::new(),
        epoch_losses: Vec::new(),
        epoch_accuracy: Vec::new(),
    };
    let transform = |s: &Sample, seed: u64| finetune_transform(cfg, s, seed);
    let phase = Phase {
        name: "finetune",
        tag: 3,
        iterations,
        schedule: cfg.schedule(iterations),
        opts: LossOptions::eval(cfg.policy.decode_mode),
        transform: &transform,
    };
    if iterations > 0 {
        run_phase(cfg, &mut policy, &samples, &phase, &manifest, exec, &mut out)?;
    }
    out.checkpoint = Checkpoint::new(
        policy,
        TrainingMeta {
            phase: "finetune".into(),
            step: iterations,
            seed: cfg.seed,
        },
        manifest,
    );
    Ok(out)
}

fn check_shard(cfg: &TrainConfig, shard: &DatasetShard) -> Result<()> {
    if shard.records.is_empty() {
        return Err(PipelineError::MissingData("dataset shard is empty".into()));
    }
    if shard.manifest.sim != cfg.task.sim || shard.manifest.split != cfg.task.split {
        return Err(PipelineError::ManifestMismatch("shard was generated for a different board or split".into()));
    }
    Ok(())
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, curve_tsv(curve))?;
    Ok(())
}
