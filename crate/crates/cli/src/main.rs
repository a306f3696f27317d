use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use tabletop_core::exec::ExecMode;
use tabletop_core::model::Checkpoint;
use tabletop_core::pipeline::stages::{self, FINETUNE_CHECKPOINT, PRETRAIN_CHECKPOINT};
use tabletop_core::pipeline::TrainConfig;
use tabletop_core::tasks::read_shard;

#[derive(Parser)]
#[command(name = "tabletop", version, about = "Train and evaluate multimodal-prompt tabletop policies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines); defaults to the desk preset.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run batches on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn load(&self) -> Result<TrainConfig, String> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).map_err(|e| e.to_string())?,
            None => TrainConfig::desk(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    fn exec(&self) -> ExecMode {
        if self.sequential {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the training demonstration shard.
    GenData(Common),
    /// Pretrain on motion-following samples.
    Pretrain(Common),
    /// Finetune from a checkpoint (or from scratch with --scratch).
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint; defaults to `<out_dir>/pretrain.ckpt`.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Start from a fresh initialization instead.
        #[arg(long, conflicts_with = "from")]
        scratch: bool,
    },
    /// Evaluate a checkpoint over the configured levels.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out_dir>/finetune.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the effective configuration.
    PrintConfig(Common),
    /// Summarize a dataset shard.
    InspectShard {
        path: PathBuf,
        /// Dump every record as JSON lines.
        #[arg(long)]
        json: bool,
    },
    /// Summarize a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

fn run(cli: Cli) -> Result<(), String> {
    let err = |e: tabletop_core::pipeline::PipelineError| e.to_string();
    match cli.cmd {
        Cmd::GenData(c) => {
            let cfg = c.load()?;
            let t = Instant::now();
            let shard = stages::gen_data(&cfg, c.exec()).map_err(err)?;
            println!(
                "wrote {} records to {} in {:.1?}",
                shard.records.len(),
                cfg.shard_path().display(),
                t.elapsed()
            );
        }
        Cmd::Pretrain(c) => {
            let cfg = c.load()?;
            let t = Instant::now();
            let out = stages::pretrain(&cfg, c.exec()).map_err(err)?;
            print_epochs(&out.epoch_losses);
            println!(
                "{} after {} steps in {:.1?}",
                cfg.out_dir.join(PRETRAIN_CHECKPOINT).display(),
                out.checkpoint.meta.step,
                t.elapsed()
            );
        }
        Cmd::Finetune { common, from, scratch } => {
            let cfg = common.load()?;
            let start = if scratch {
                None
            } else {
                Some(from.unwrap_or_else(|| cfg.out_dir.join(PRETRAIN_CHECKPOINT)))
            };
            let t = Instant::now();
            let out = stages::finetune(&cfg, start.as_deref(), common.exec()).map_err(err)?;
            print_epochs(&out.epoch_losses);
            println!(
                "{} after {} steps in {:.1?}",
                cfg.out_dir.join(FINETUNE_CHECKPOINT).display(),
                out.checkpoint.meta.step,
                t.elapsed()
            );
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join(FINETUNE_CHECKPOINT));
            let report = stages::eval(&cfg, &path, common.exec()).map_err(err)?;
            print!("{}", report.to_table());
        }
        Cmd::PrintConfig(c) => print!("{}", c.load()?.to_text()),
        Cmd::InspectShard { path, json } => inspect_shard(&path, json)?,
        Cmd::InspectCheckpoint { path } => inspect_checkpoint(&path)?,
    }
    Ok(())
}

fn print_epochs(losses: &[(String, Vec<f64>)]) {
    for (phase, ls) in losses {
        let shown: Vec<String> = ls.iter().map(|l| format!("{l:.3}")).collect();
        println!("{phase} epoch loss: {}", shown.join(" "));
    }
}

fn inspect_shard(path: &Path, json: bool) -> Result<(), String> {
    let shard = read_shard(path).map_err(|e| e.to_string())?;
    if json {
        print!("{}", shard.export_text());
        return Ok(());
    }
    print!("{}", shard.manifest.to_text());
    let mut per_task: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in &shard.records {
        let e = per_task.entry(r.instance.task.name()).or_default();
        e.0 += 1;
        e.1 += r.trajectory.actions.len();
    }
    println!("records {}", shard.records.len());
    for (task, (n, steps)) in per_task {
        println!("  {task:<20} {n:>6} demos  {:.2} steps/demo", steps as f64 / n as f64);
    }
    Ok(())
}

fn inspect_checkpoint(path: &Path) -> Result<(), String> {
    let ck = Checkpoint::load(path).map_err(|e| e.to_string())?;
    let p = &ck.policy;
    println!("phase {}  step {}  seed {}", ck.meta.phase, ck.meta.step, ck.meta.seed);
    println!("sha256 {}", ck.digest());
    println!(
        "d {}  layers {}  heads {}  encoder layers {}  decode {:?}  prompt {:?}",
        p.config.d, p.config.layers, p.config.heads, p.config.enc_layers, p.config.decode_mode, p.config.prompt_mode
    );
    let mut total = 0;
    let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, param) in p.params.iter() {
        let n = param.value.len();
        total += n;
        let g = param.name.split('.').next().unwrap_or("");
        *groups.entry(g).or_default() += n;
    }
    println!("parameters {total}");
    for (g, n) in groups {
        println!("  {g:<10} {n:>10}");
    }
    println!("manifest {}", if ck.manifest.is_some() { "present" } else { "absent" });
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
