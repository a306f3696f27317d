//! Acceptance criteria 1-11.
//!
//! Runs as a plain binary so criteria execute one after another (runtime
//! budgets are measured without contention) and every criterion prints one
//! `criterion N: PASS|FAIL` line. Exits non-zero if any criterion fails.

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabletop_core::exec::ExecMode;
use tabletop_core::model::{
    AttentionMode, Checkpoint, DecodeMode, DecodeStrategy, LossOptions, Policy, PromptMode, TrainingMeta, Vocabulary,
};
use tabletop_core::pipeline::stages;
use tabletop_core::pipeline::{evaluate, run_finetune, run_pretrain, Agent, EvalConfig, PretrainMode, TrainConfig};
use tabletop_core::sim::{observe, render, step, ActionPrim, Cell, RenderCache, StepFlag};
use tabletop_core::tasks::{
    generate_dataset, make_pretrain_sample, scripted_expert, DatasetShard, Level, PromptElement, Record, Sample, TaskConfig,
    TaskInstance, TaskSplit, TaskSuite, TaskType, Trajectory,
};
use tabletop_core::tensor::gradcheck::{check_gradients, GradCheckReport};
use tabletop_core::tensor::{Graph, ParamSet, Tensor, Var};

// Tolerances and thresholds as pinned by the acceptance criteria.
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
const RC_TOL: f32 = 1e-6;
const AR_CONSISTENCY_MIN: f64 = 0.95;
const IND_CONSISTENCY: (f64, f64) = (0.40, 0.60);
const TRANSFER_RATIO: f64 = 2.0;
const FT_ONLY_MAX: f64 = 0.10;
const MASKED_NOISE: f64 = 0.10;
const RC_GAP: f64 = 0.15;
const EPISODES: usize = 200;
const SEEDS: [u64; 3] = [0, 1, 2];
const ONE_MINUTE: Duration = Duration::from_secs(60);
const TEN_MINUTES: Duration = Duration::from_secs(600);
const THIRTY_MINUTES: Duration = Duration::from_secs(1800);

struct Line {
    id: u32,
    pass: bool,
    detail: String,
}

fn emit(line: &Line, elapsed: Duration) {
    let verdict = if line.pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {:>2}: {verdict}  {}  [{:.1}s]", line.id, line.detail, elapsed.as_secs_f64());
    let _ = out.flush();
}

fn run(id: u32, f: impl FnOnce() -> (bool, String)) -> bool {
    let t = Instant::now();
    let (pass, detail) = f();
    emit(&Line { id, pass, detail }, t.elapsed());
    pass
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

// ---------------------------------------------------------------- criterion 1

fn params(shapes: &[(&str, &[usize])], seed: u64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for (name, shape) in shapes {
        p.normal(*name, shape, 0.8, &mut rng);
    }
    p
}

fn weighted_sum(g: &mut Graph<f64>, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
    let w = g.input(w);
    let y = g.mul(x, w);
    g.sum(y)
}

/// One check per op, each fed through a weighted reduction.
fn op_checks() -> Vec<(&'static str, GradCheckReport)> {
    type Build = fn(&mut Graph<f64>, &[Var]) -> Var;
    let cases: Vec<(&'static str, Vec<(&str, &[usize])>, Build)> = vec![
        ("matmul", vec![("a", &[3, 4]), ("b", &[4, 5])], |g, v| g.matmul(v[0], v[1])),
        ("matmul_nt", vec![("a", &[3, 4]), ("b", &[5, 4])], |g, v| g.matmul_nt(v[0], v[1])),
        ("add", vec![("a", &[3, 4]), ("b", &[3, 4])], |g, v| g.add(v[0], v[1])),
        ("mul", vec![("a", &[3, 4]), ("b", &[3, 4])], |g, v| g.mul(v[0], v[1])),
        ("add_row", vec![("a", &[3, 4]), ("b", &[4])], |g, v| g.add_row(v[0], v[1])),
        ("scale", vec![("a", &[3, 4])], |g, v| g.scale(v[0], -1.3)),
        ("relu", vec![("a", &[3, 4])], |g, v| g.relu(v[0])),
        ("gelu", vec![("a", &[3, 4])], |g, v| g.gelu(v[0])),
        ("tanh", vec![("a", &[3, 4])], |g, v| g.tanh(v[0])),
        ("layer_norm", vec![("a", &[3, 6]), ("g", &[6]), ("b", &[6])], |g, v| g.layer_norm(v[0], v[1], v[2])),
        ("gather_rows", vec![("a", &[5, 3])], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2])),
        ("softmax_rows", vec![("a", &[3, 5])], |g, v| g.softmax_rows(v[0], None)),
        ("masked_softmax", vec![("a", &[2, 4])], |g, v| {
            let mask = Arc::new(vec![true, false, true, true, false, true, true, false]);
            g.softmax_rows(v[0], Some(&mask))
        }),
        ("concat_rows", vec![("a", &[2, 3]), ("b", &[3, 3])], |g, v| g.concat_rows(&[v[0], v[1]])),
        ("concat_cols", vec![("a", &[3, 2]), ("b", &[3, 4])], |g, v| g.concat_cols(&[v[0], v[1]])),
        ("slice_rows", vec![("a", &[5, 3])], |g, v| g.slice_rows(v[0], 1, 3)),
        ("slice_cols", vec![("a", &[3, 5])], |g, v| g.slice_cols(v[0], 2, 2)),
        ("transpose", vec![("a", &[3, 5])], |g, v| g.transpose(v[0])),
        ("dropout", vec![("a", &[4, 4])], |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            g.dropout(v[0], 0.5, &mut rng)
        }),
    ];
    let mut out = Vec::new();
    for (i, (name, shapes, build)) in cases.into_iter().enumerate() {
        let p = params(&shapes, 100 + i as u64);
        let ids: Vec<_> = shapes.iter().map(|(n, _)| p.id(n).unwrap()).collect();
        let r = check_gradients(&p, GRAD_STEP, 64, |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let y = build(g, &vars);
            weighted_sum(g, y)
        })
        .unwrap();
        out.push((name, r));
    }
    let p = params(&[("l", &[3, 5])], 200);
    let l = p.id("l").unwrap();
    out.push((
        "cross_entropy",
        check_gradients(&p, GRAD_STEP, 64, |g| {
            let lv = g.param(l);
            g.cross_entropy(lv, &[4, 0, 2])
        })
        .unwrap(),
    ));
    out
}

fn random_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random MLP with layer norm and a classification loss.
fn composed_mlp(seed: u64) -> GradCheckReport {
    let p = params(&[("w1", &[4, 6]), ("b1", &[6]), ("g", &[6]), ("beta", &[6]), ("w2", &[6, 3])], seed);
    let ids: Vec<_> = ["w1", "b1", "g", "beta", "w2"].iter().map(|n| p.id(n).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let x = random_input(&[5, 4], &mut rng);
    check_gradients(&p, GRAD_STEP, 64, |g| {
        let v: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let xi = g.input(x.clone());
        let h = g.matmul(xi, v[0]);
        let h = g.add_row(h, v[1]);
        let h = g.gelu(h);
        let h = g.layer_norm(h, v[2], v[3]);
        let o = g.matmul(h, v[4]);
        g.cross_entropy(o, &[0, 2, 1, 1, 0])
    })
    .unwrap()
}

/// Random causal self-attention block assembled from graph ops.
fn composed_attention(seed: u64) -> GradCheckReport {
    let d = 4;
    let p = params(&[("q", &[d, d]), ("k", &[d, d]), ("v", &[d, d]), ("o", &[d, 3])], seed);
    let ids: Vec<_> = ["q", "k", "v", "o"].iter().map(|n| p.id(n).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let x = random_input(&[4, d], &mut rng);
    let mask = Arc::new((0..16).map(|i| i % 4 <= i / 4).collect::<Vec<bool>>());
    check_gradients(&p, GRAD_STEP, 64, |g| {
        let w: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let xi = g.input(x.clone());
        let (q, k, v) = (g.matmul(xi, w[0]), g.matmul(xi, w[1]), g.matmul(xi, w[2]));
        let s = g.matmul_nt(q, k);
        let s = g.scale(s, 0.5);
        let a = g.softmax_rows(s, Some(&mask));
        let h = g.matmul(a, v);
        let h = g.add(h, xi);
        let o = g.matmul(h, w[3]);
        g.cross_entropy(o, &[2, 0, 1, 2])
    })
    .unwrap()
}

fn tiny_task() -> TaskConfig {
    let mut c = TaskConfig::default();
    c.sim.width = 4;
    c.sim.height = 4;
    c.sim.patch = 4;
    c.max_objects = 2;
    c.max_motion_steps = 2;
    c.max_order_len = 2;
    c.restore_displaced = 1;
    c.put_into_receptacles = 1;
    c
}

fn tiny_policy(task: &TaskConfig, d: usize, seed: u64) -> Policy {
    let mut pc = TrainConfig::default().policy;
    pc.sim = task.sim;
    pc.d = d;
    pc.layers = 1;
    pc.heads = 2;
    pc.enc_layers = 1;
    pc.ff_mult = 2;
    pc.patch_hidden = d;
    pc.bbox_hidden = 4;
    pc.max_len = 64;
    pc.max_prompt_len = 40;
    pc.max_steps = 4;
    pc.dropout = 0.0;
    Policy::new(pc, Vocabulary::standard(&task.sim), seed).unwrap()
}

fn expert_sample(suite: &TaskSuite, task: TaskType, seed: u64) -> Sample {
    let level = if suite.cfg.split.holdout().contains(&task) { Level::L4 } else { Level::L1 };
    let inst = suite.generate(task, level, seed).unwrap();
    let trajectory = scripted_expert(&suite.cfg, &inst).unwrap();
    Sample { prompt: inst.prompt, trajectory }
}

/// The full policy loss in 64-bit, both attention modes.
fn composed_policy(seed: u64) -> Vec<GradCheckReport> {
    let task = tiny_task();
    let suite = TaskSuite::new(task.clone()).unwrap();
    let s = expert_sample(&suite, TaskType::FollowMotion, seed);
    let p = tiny_policy(&task, 4, seed);
    let p64 = p.params.cast::<f64>();
    [AttentionMode::Causal, AttentionMode::MaskedPretrain]
        .into_iter()
        .map(|attention| {
            let opts = LossOptions {
                attention,
                trailing_obs: attention == AttentionMode::MaskedPretrain,
                ..LossOptions::eval(DecodeMode::Autoregressive)
            };
            check_gradients(&p64, GRAD_STEP, 4, |g| p.sample_loss(g, &s, &opts).unwrap()).unwrap()
        })
        .collect()
}

fn criterion_1() -> (bool, String) {
    let t = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut all = op_checks();
    let ops = all.len();
    all.push(("mlp", composed_mlp(1)));
    all.push(("attention", composed_attention(2)));
    for r in composed_policy(3) {
        all.push(("policy", r));
    }
    for (name, r) in &all {
        if r.max_rel_error >= worst.1 {
            worst = (name, r.max_rel_error);
        }
    }
    let pass = worst.1 < GRAD_TOL && t.elapsed() < ONE_MINUTE;
    (
        pass,
        format!("{ops} ops + 3 composed models, worst rel err {:.2e} ({}) < {GRAD_TOL:e}", worst.1, worst.0),
    )
}

// ------------------------------------------------------------- criteria 2 - 4

fn criterion_2() -> (bool, String) {
    let t = Instant::now();
    let cfg = TrainConfig::desk().task;
    let suite = TaskSuite::new(cfg.clone()).unwrap();
    let mut failures = 0;
    let mut total = 0;
    for task in TaskType::ALL {
        let level = if cfg.split.holdout().contains(&task) { Level::L4 } else { Level::L1 };
        for seed in 0..500 {
            let inst = suite.generate(task, level, seed).unwrap();
            let plan = scripted_expert(&cfg, &inst).unwrap();
            let mut scene = inst.scene.clone();
            for a in &plan.actions {
                let (next, flag) = step(&cfg.sim, &scene, a).unwrap();
                failures += usize::from(flag != StepFlag::Ok);
                scene = next;
            }
            failures += usize::from(!inst.success(&scene));
            total += 1;
        }
    }
    let pass = failures == 0 && t.elapsed() < ONE_MINUTE;
    (pass, format!("{} / {total} expert replays succeed", total - failures))
}

fn criterion_3() -> (bool, String) {
    let t = Instant::now();
    let cfg = TrainConfig::desk().task;
    let suite = TaskSuite::new(cfg.clone()).unwrap();
    let shard = generate_dataset(&suite, Level::L1, &cfg.split.train(), 250, 17, ExecMode::Parallel).unwrap();
    let cache = RenderCache::new(cfg.sim);
    let mut bad = 0;
    for r in &shard.records {
        let s = make_pretrain_sample(&cfg.sim, &r.trajectory);
        let frames: Vec<_> = s
            .prompt
            .elements
            .iter()
            .filter_map(|e| match e {
                PromptElement::Image(i) => Some(i),
                PromptElement::Word(_) => None,
            })
            .collect();
        // replay the target tokens from the first state and re-render
        let mut scene = r.trajectory.scenes[0].clone();
        let mut ok = frames.len() == s.targets().len() + 1;
        for (t, frame) in frames.iter().enumerate() {
            if t > 0 {
                let action = ActionPrim::from_tokens(&s.targets()[t - 1]);
                scene = step(&cfg.sim, &scene, &action).unwrap().0;
            }
            let obs = observe(&cache, &scene);
            ok &= obs.views.len() == frame.views.len();
            for (i, (v, pv)) in obs.views.iter().zip(&frame.views).enumerate() {
                let fresh = render(&cfg.sim, v.asset);
                ok &= pv.bbox == Some(v.bbox)
                    && frame.pixels(&cache, i).iter().map(|x| x.to_bits()).eq(fresh.iter().map(|x| x.to_bits()));
            }
        }
        bad += usize::from(!ok);
    }
    let n = shard.records.len();
    let pass = n == 1000 && bad == 0 && t.elapsed() < ONE_MINUTE;
    (pass, format!("{} / {n} motion-following samples replay to their prompt frames bit-exactly", n - bad))
}

fn criterion_4() -> (bool, String) {
    let task = tiny_task();
    let suite = TaskSuite::new(task.clone()).unwrap();
    let mut worst = 0.0f32;
    let mut checked = 0;
    for (seed, family) in TaskType::ALL.into_iter().enumerate() {
        let s = expert_sample(&suite, family, seed as u64);
        let mut p = tiny_policy(&task, 16, seed as u64);
        // numeric identity under random weights
        let rc = p.prompt_encode(&s.prompt, PromptMode::LmPlusRc).unwrap();
        let lm = p.prompt_encode(&s.prompt, PromptMode::LmOnly).unwrap();
        let vis = p.prompt_visual_tokens(&s.prompt).unwrap();
        let mut k = 0;
        for (i, &v) in rc.visual.iter().enumerate() {
            for (j, (&a, &b)) in rc.embeddings.row(i).iter().zip(lm.embeddings.row(i)).enumerate() {
                let expect = if v { vis.row(k)[j] } else { 0.0 };
                worst = worst.max((a - b - expect).abs());
                checked += 1;
            }
            k += usize::from(v);
        }
        // LM(x) == 0 through a zeroed final norm
        for name in ["lm.ln_f.g", "lm.ln_f.b"] {
            let shape = p.params.get(p.params.id(name).unwrap()).shape().to_vec();
            p.params.assign(name, Tensor::zeros(&shape)).unwrap();
        }
        let rc = p.prompt_encode(&s.prompt, PromptMode::LmPlusRc).unwrap();
        let mut k = 0;
        for (i, &v) in rc.visual.iter().enumerate() {
            for (j, &a) in rc.embeddings.row(i).iter().enumerate() {
                let expect = if v { vis.row(k)[j] } else { 0.0 };
                worst = worst.max((a - expect).abs());
                checked += 1;
            }
            k += usize::from(v);
        }
    }
    (worst < RC_TOL, format!("{checked} entries, max |deviation| {worst:.2e} < {RC_TOL:e}"))
}

// ---------------------------------------------------------------- criterion 5

/// A restore instance with two displaced objects on one row, each in the
/// column of its home cell, and both home cells on another row. The two
/// valid first moves differ only in their columns, and the place column
/// equals the pick column.
struct TwoMode {
    instance: TaskInstance,
    /// `(current cell, home cell)` per displaced object.
    moves: [(Cell, Cell); 2],
}

fn two_mode_task() -> TaskConfig {
    let mut c = TrainConfig::desk().task;
    c.min_objects = 2;
    c.max_objects = 2;
    c.restore_displaced = 2;
    c.randomized_restore = true;
    c.restore_rotate_prob = 0.0;
    c
}

fn two_mode_instances(suite: &TaskSuite, count: usize, first_seed: u64) -> Vec<TwoMode> {
    let height = suite.cfg.sim.height as u16;
    let mut out = Vec::new();
    let mut seed = first_seed;
    while out.len() < count {
        let mut inst = suite.generate(TaskType::RearrangeRestore, Level::L1, seed).unwrap();
        seed += 1;
        let homes: Vec<Cell> = inst.goal.placements.iter().map(|p| p.cell).collect();
        if homes[0].row != homes[1].row {
            continue;
        }
        let row = (homes[0].row + 1 + (seed % u64::from(height - 1)) as u16) % height;
        let mut moves = [(homes[0], homes[0]); 2];
        for (i, p) in inst.goal.placements.iter().enumerate() {
            let o = inst.scene.objects.iter_mut().find(|o| o.uid == p.uid).unwrap();
            o.cell = Cell::new(row, p.cell.col);
            moves[i] = (o.cell, p.cell);
        }
        // the expert still solves the rewritten scene
        let plan = scripted_expert(&suite.cfg, &inst).unwrap();
        assert!(inst.success(plan.last()));
        out.push(TwoMode { instance: inst, moves });
    }
    out
}

/// One demonstration per valid first move, so both modes appear equally
/// often for every scene.
fn two_mode_records(suite: &TaskSuite, data: &[TwoMode]) -> Vec<Record> {
    let mut out = Vec::new();
    for m in data {
        for &(pick, place) in &m.moves {
            let mut trajectory = Trajectory::new(m.instance.scene.clone());
            let action = ActionPrim {
                pick,
                pick_rot: 0,
                place,
                place_rot: 0,
            };
            trajectory.push(&suite.cfg.sim, action).unwrap();
            out.push(Record {
                instance: m.instance.clone(),
                trajectory,
            });
        }
    }
    out
}

fn consistent(m: &TwoMode, tokens: &[usize]) -> bool {
    let cell = |at: usize| Cell::new(tokens[at] as u16, tokens[at + 1] as u16);
    m.moves.iter().any(|&(from, to)| cell(0) == from && cell(3) == to)
}

/// Consistency of the best factorized distribution over the training
/// targets: pick and place columns drawn independently from their
/// per-scene marginals, enumerated over every (pick, place) pair.
fn factorized_optimum(data: &[TwoMode], records: &[Record]) -> f64 {
    let per_scene = records.len() / data.len();
    let mut total = 0.0;
    for (m, recs) in data.iter().zip(records.chunks(per_scene)) {
        let n = recs.len() as f64;
        let picks: Vec<f64> = m.moves.iter().map(|mv| recs.iter().filter(|r| r.trajectory.actions[0].pick == mv.0).count() as f64 / n).collect();
        let places: Vec<f64> = m.moves.iter().map(|mv| recs.iter().filter(|r| r.trajectory.actions[0].place == mv.1).count() as f64 / n).collect();
        for i in 0..2 {
            for j in 0..2 {
                total += picks[i] * places[j] * f64::from(u8::from(i == j));
            }
        }
    }
    total / data.len() as f64
}

fn criterion_5() -> (bool, String) {
    let t = Instant::now();
    let task = two_mode_task();
    let suite = TaskSuite::new(task.clone()).unwrap();
    let train = two_mode_instances(&suite, 1000, 0);
    let test = two_mode_instances(&suite, 200, 1 << 32);
    let records = two_mode_records(&suite, &train);
    let optimum_ind = factorized_optimum(&train, &records);
    let optimum_ar = 1.0;
    let thresholds_ok = optimum_ar >= AR_CONSISTENCY_MIN && (IND_CONSISTENCY.0..=IND_CONSISTENCY.1).contains(&optimum_ind);

    let shard = DatasetShard::new(suite.manifest(Level::L1, 0), records).unwrap();
    let mut rates = Vec::new();
    for mode in [DecodeMode::Autoregressive, DecodeMode::Independent] {
        let mut cfg = TrainConfig::desk();
        cfg.task = task.clone();
        cfg.policy.decode_mode = mode;
        cfg.batch_size = 32;
        cfg.finetune_epochs = 15;
        cfg.log_every = 0;
        let init = Policy::new(cfg.policy.clone(), Vocabulary::standard(&task.sim), 5).unwrap();
        let start = Checkpoint::new(init, TrainingMeta::default(), None);
        let trained = run_finetune(&cfg, &start, &shard, ExecMode::Parallel).unwrap().checkpoint.policy;
        let mut hits = 0;
        let mut draws = 0;
        for (i, m) in test.iter().enumerate() {
            let mut ctx = trained.begin_episode(&m.instance.prompt).unwrap();
            trained.push_observation(&mut ctx, &m.instance.scene).unwrap();
            for k in 0..5u64 {
                let toks = trained.decode_action(&ctx, mode, DecodeStrategy::Sample((i as u64) << 8 | k)).unwrap();
                hits += usize::from(consistent(m, &toks));
                draws += 1;
            }
        }
        rates.push(hits as f64 / draws as f64);
    }
    let (ar, ind) = (rates[0], rates[1]);
    let pass = thresholds_ok && ar >= AR_CONSISTENCY_MIN && (IND_CONSISTENCY.0..=IND_CONSISTENCY.1).contains(&ind) && t.elapsed() < TEN_MINUTES;
    (
        pass,
        format!(
            "AR consistency {} (>= 95%), IND {} (50% +- 10%); enumerated optima AR {} IND {}",
            pct(ar),
            pct(ind),
            pct(optimum_ar),
            pct(optimum_ind)
        ),
    )
}

// ------------------------------------------------------- criteria 6 - 9, 11

/// Reduced budget for the ablation arms: a quarter of the default data at
/// batch 32, with the default epoch counts.
fn ablation_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.demos_per_task = 500;
    c.batch_size = 32;
    c.log_every = 0;
    c
}

fn dataset(cfg: &TrainConfig) -> DatasetShard {
    let suite = TaskSuite::new(cfg.task.clone()).unwrap();
    generate_dataset(&suite, Level::L1, &cfg.task.split.train(), cfg.demos_per_task, cfg.data_seed, ExecMode::Parallel).unwrap()
}

fn pretrained(cfg: &TrainConfig, shard: &DatasetShard) -> Checkpoint {
    run_pretrain(cfg, shard, ExecMode::Parallel).unwrap().checkpoint
}

fn finetuned(cfg: &TrainConfig, start: &Checkpoint, shard: &DatasetShard) -> Policy {
    run_finetune(cfg, start, shard, ExecMode::Parallel).unwrap().checkpoint.policy
}

fn success(policy: &Policy, cfg: &TrainConfig, level: Level, task: TaskType, prompt_edit: bool) -> f64 {
    let suite = TaskSuite::new(cfg.task.clone()).unwrap();
    let ec = EvalConfig {
        levels: vec![level],
        tasks: Some(vec![task]),
        episodes: EPISODES,
        seed: cfg.eval_seed,
        prompt_edit,
    };
    let r = evaluate(Agent::Policy(policy, DecodeStrategy::Greedy), &suite, &ec, None, &cfg.hash(), ExecMode::Parallel).unwrap();
    r.rate(level, task).unwrap()
}

struct Transfer {
    pretrained: f64,
    ft_only: f64,
}

fn criterion_6(elapsed: &mut Duration) -> (Transfer, (bool, String)) {
    let t = Instant::now();
    let cfg = ablation_config();
    let shard = dataset(&cfg);
    let with = finetuned(&cfg, &pretrained(&cfg, &shard), &shard);
    let none = TrainConfig {
        pretrain_mode: PretrainMode::None,
        ..cfg.clone()
    };
    let without = finetuned(&none, &pretrained(&none, &shard), &shard);
    let fm = |p: &Policy| success(p, &cfg, Level::L4, TaskType::FollowMotion, false);
    let res = Transfer {
        pretrained: fm(&with),
        ft_only: fm(&without),
    };
    *elapsed = t.elapsed();
    let pass = res.pretrained >= TRANSFER_RATIO * res.ft_only
        && res.pretrained > 0.0
        && res.ft_only <= FT_ONLY_MAX
        && *elapsed < THIRTY_MINUTES;
    let line = format!(
        "L4 follow_motion over {EPISODES} episodes: pretrain+FT {} vs FT-only {} (need >= 2x, FT-only <= 10%)",
        pct(res.pretrained),
        pct(res.ft_only)
    );
    (res, (pass, line))
}

fn criterion_7(c6: &Transfer) -> (bool, String) {
    let mut cfg = ablation_config();
    cfg.pretrain_mode = PretrainMode::Masked;
    let shard = dataset(&cfg);
    let masked = finetuned(&cfg, &pretrained(&cfg, &shard), &shard);
    let rate = success(&masked, &cfg, Level::L4, TaskType::FollowMotion, false);
    let pass = (rate - c6.ft_only).abs() < MASKED_NOISE && rate < c6.pretrained;
    (
        pass,
        format!(
            "masked pretrain+FT {} vs FT-only {} (|diff| < 10%) and < motion-following {}",
            pct(rate),
            pct(c6.ft_only),
            pct(c6.pretrained)
        ),
    )
}

fn twist_gap(seed: u64) -> (f64, f64) {
    let mut rates = [0.0; 2];
    for (i, mode) in [PromptMode::LmPlusRc, PromptMode::LmOnly].into_iter().enumerate() {
        let mut cfg = ablation_config();
        cfg.seed = seed;
        cfg.data_seed = 1 + seed;
        cfg.policy.prompt_mode = mode;
        let shard = dataset(&cfg);
        let policy = finetuned(&cfg, &pretrained(&cfg, &shard), &shard);
        rates[i] = success(&policy, &cfg, Level::L1, TaskType::Twist, false);
    }
    (rates[0], rates[1])
}

fn criterion_8() -> (bool, String) {
    let (rc, lm) = twist_gap(SEEDS[0]);
    if rc - lm >= RC_GAP {
        return (true, format!("L1 twist: LM+RC {} vs LM-only {} (gap >= 15%)", pct(rc), pct(lm)));
    }
    let mut gaps = vec![rc - lm];
    let mut shown = vec![format!("{}/{}", pct(rc), pct(lm))];
    for &seed in &SEEDS[1..] {
        let (rc, lm) = twist_gap(seed);
        gaps.push(rc - lm);
        shown.push(format!("{}/{}", pct(rc), pct(lm)));
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    (
        mean > 0.0,
        format!(
            "L1 twist LM+RC/LM-only per seed [{}]: single-seed gap < 15%, mean gap over 3 seeds {:+.1} points (need > 0)",
            shown.join(", "),
            100.0 * mean
        ),
    )
}

fn criterion_9() -> (bool, String) {
    let mut gaps = Vec::new();
    let mut shown = Vec::new();
    for &seed in &SEEDS {
        let mut cfg = ablation_config();
        cfg.task.split = TaskSplit::InContext;
        cfg.seed = seed;
        cfg.data_seed = 1 + seed;
        let shard = dataset(&cfg);
        let start = pretrained(&cfg, &shard);
        let plain = finetuned(&cfg, &start, &shard);
        let modified_cfg = TrainConfig {
            modified_ft_probability: 0.5,
            ..cfg.clone()
        };
        let modified = finetuned(&modified_cfg, &start, &shard);
        let a = success(&modified, &cfg, Level::L4, TaskType::Twist, true);
        let b = success(&plain, &cfg, Level::L4, TaskType::Twist, true);
        gaps.push(a - b);
        shown.push(format!("{}/{}", pct(a), pct(b)));
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    (
        mean > 0.0,
        format!(
            "held-out twist with edited prompts, modified/plain FT per seed [{}], mean gap {:+.1} points (need > 0)",
            shown.join(", "),
            100.0 * mean
        ),
    )
}

// ------------------------------------------------------------ criteria 10, 11

fn criterion_11(dir: &Path) -> (bool, String) {
    let t = Instant::now();
    let mut cfg = TrainConfig::desk();
    cfg.data_dir = dir.join("data");
    cfg.out_dir = dir.join("runs");
    stages::gen_data(&cfg, ExecMode::Parallel).unwrap();
    stages::pretrain(&cfg, ExecMode::Parallel).unwrap();
    stages::finetune(&cfg, Some(&cfg.out_dir.join(stages::PRETRAIN_CHECKPOINT)), ExecMode::Parallel).unwrap();
    let report = stages::eval(&cfg, &cfg.out_dir.join(stages::FINETUNE_CHECKPOINT), ExecMode::Parallel).unwrap();
    let elapsed = t.elapsed();
    let means: Vec<String> = Level::ALL
        .iter()
        .filter_map(|&l| report.level_mean(l).map(|m| format!("{l} {}", pct(m))))
        .collect();
    (
        elapsed <= THIRTY_MINUTES,
        format!(
            "default pipeline (gen-data, pretrain, finetune, eval x{}) in {:.1} min <= 30; {}",
            report.episodes,
            elapsed.as_secs_f64() / 60.0,
            means.join(", ")
        ),
    )
}

fn criterion_10(dir: &Path) -> (bool, String) {
    let mut cfg = TrainConfig::desk();
    cfg.data_dir = dir.join("data");
    cfg.out_dir = dir.join("repro");
    cfg.eval_episodes = 25;
    let ckpt = dir.join("runs").join(stages::FINETUNE_CHECKPOINT);
    let a = stages::eval(&cfg, &ckpt, ExecMode::Parallel).unwrap();
    let b = stages::eval(&cfg, &ckpt, ExecMode::Sequential).unwrap();
    let same_report = a == b && a.to_json() == b.to_json();

    let ck = Checkpoint::load(&ckpt).unwrap();
    let copy = dir.join("copy.ckpt");
    ck.save(&copy).unwrap();
    let back = Checkpoint::load(&copy).unwrap();
    let suite = TaskSuite::new(cfg.task.clone()).unwrap();
    let s = expert_sample(&suite, TaskType::Twist, 3);
    let bits = |p: &Policy| -> Vec<u32> {
        p.forward_logits(&s, AttentionMode::Causal)
            .unwrap()
            .into_iter()
            .flat_map(|(_, l)| l.into_iter().map(f32::to_bits))
            .collect()
    };
    let same_forward = bits(&ck.policy) == bits(&back.policy) && ck.digest() == back.digest();
    (
        same_report && same_forward,
        format!("repeated eval reports identical: {same_report}; reloaded checkpoint forward bitwise equal: {same_forward}"),
    )
}

/// With no arguments every criterion runs. Numeric arguments select a
/// subset; 7 pulls in 6 and 10 pulls in 11, whose results they reuse.
fn selection() -> impl Fn(u32) -> bool {
    let mut picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.contains(&7) {
        picked.push(6);
    }
    if picked.contains(&10) {
        picked.push(11);
    }
    move |id| picked.is_empty() || picked.contains(&id)
}

fn main() -> ExitCode {
    let want = selection();
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    let simple: [(u32, fn() -> (bool, String)); 5] =
        [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5)];
    for (id, f) in simple {
        if want(id) {
            ok &= run(id, f);
        }
    }
    if want(6) {
        let mut transfer = None;
        ok &= run(6, || {
            let mut elapsed = Duration::ZERO;
            let (t, line) = criterion_6(&mut elapsed);
            transfer = Some(t);
            line
        });
        let transfer = transfer.expect("criterion 6 ran");
        if want(7) {
            ok &= run(7, || criterion_7(&transfer));
        }
    }
    if want(8) {
        ok &= run(8, criterion_8);
    }
    if want(9) {
        ok &= run(9, criterion_9);
    }
    if want(11) {
        ok &= run(11, || criterion_11(dir.path()));
        if want(10) {
            ok &= run(10, || criterion_10(dir.path()));
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
