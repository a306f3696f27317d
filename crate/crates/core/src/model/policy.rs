//! Decoder-only policy over `[prompt | o_0, a_0 | o_1, a_1 | ...]`.

use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encoder::{layout_prompt, ObjectBatch, ObjectEncoder, PromptEncoder, PromptEncoding, PromptPos};
use super::layers::{init_matrix, Block, Dropout, LayerNorm, Linear};
use super::stream::{Slot, StreamLayout};
use super::vocab::Vocabulary;
use super::{AttentionMode, DecodeMode, ModelError, PolicyConfig, PromptMode, Result};
use crate::exec::{batch_map, ExecMode};
use crate::sim::{scene_items, BBox, RenderCache, Scene};
use crate::tasks::{derive_seed, Appearance, Prompt, Sample};
use crate::tensor::{Gradients, Graph, ParamId, ParamSet, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
struct Decoder {
    pos: ParamId,
    typ: ParamId,
    step: ParamId,
    act_q: ParamId,
    /// Table `n` embeds the token of dimension `n`, fed to slot `n + 1`.
    act_emb: Vec<ParamId>,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    heads: Vec<Linear>,
}

#[derive(Clone, Debug)]
struct Net {
    obj: ObjectEncoder,
    lm: PromptEncoder,
    dec: Decoder,
}

/// How a loss is computed for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub decode_mode: DecodeMode,
    pub attention: AttentionMode,
    /// Append the final observation `o_T` to the stream.
    pub trailing_obs: bool,
    /// Seed for dropout; `None` evaluates without dropout.
    pub dropout_seed: Option<u64>,
}

impl LossOptions {
    pub fn eval(decode_mode: DecodeMode) -> Self {
        Self {
            decode_mode,
            attention: AttentionMode::Causal,
            trailing_obs: false,
            dropout_seed: None,
        }
    }
}

/// Aggregates of one batch under teacher forcing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    /// Mean over samples of the per-sample summed cross-entropy.
    pub loss: f64,
    pub samples: usize,
    /// Per-dimension argmax hits and token counts.
    pub correct: Vec<usize>,
    pub tokens: Vec<usize>,
}

impl BatchStats {
    pub fn accuracy(&self, dim: usize) -> f64 {
        self.correct[dim] as f64 / self.tokens[dim].max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeStrategy {
    Greedy,
    Sample(u64),
}

/// Cached encodings for step-by-step decoding of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeContext {
    prompt: Tensor<f32>,
    obs: Vec<Tensor<f32>>,
    tokens: Vec<Vec<usize>>,
}

impl EpisodeContext {
    pub fn steps(&self) -> usize {
        self.tokens.len()
    }
}

/// Policy parameters plus the structure that interprets them.
#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet<f32>,
    net: Net,
    cache: Arc<RenderCache>,
}

struct Stream {
    hidden: Var,
    layout: StreamLayout,
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Policy {
    pub fn new(config: PolicyConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let c = &config;
        let d = c.d;
        let obj = ObjectEncoder::new(&mut p, c.sim.patch_len(), c.patch_hidden, c.bbox_hidden, d, &mut rng);
        let lm = PromptEncoder::new(&mut p, vocab.len(), c.max_prompt_len, d, c.enc_layers, c.heads, d * c.ff_mult, &mut rng);
        let bins = c.bins();
        let dec = Decoder {
            pos: p.normal("dec.pos", &[c.max_len, d], 0.1, &mut rng),
            typ: p.normal("dec.type", &[3, d], 0.1, &mut rng),
            step: p.normal("dec.step", &[c.max_steps + 2, d], 0.1, &mut rng),
            act_q: p.normal("dec.act_q", &[c.n_a, d], 0.5, &mut rng),
            act_emb: (0..c.n_a.saturating_sub(1))
                .map(|n| p.normal(format!("dec.act_emb{n}"), &[bins[n], d], 0.5, &mut rng))
                .collect(),
            blocks: (0..c.layers)
                .map(|i| Block::new(&mut p, &format!("dec.block{i}"), d, c.heads, d * c.ff_mult, &mut rng))
                .collect(),
            ln_f: LayerNorm::new(&mut p, "dec.ln_f", d),
            heads: bins
                .iter()
                .enumerate()
                .map(|(n, &b)| Linear {
                    w: init_matrix(&mut p, &format!("head{n}.w"), d, b, &mut rng),
                    b: p.zeros(format!("head{n}.b"), &[b]),
                })
                .collect(),
        };
        if c.freeze_lm {
            p.set_trainable_prefix("lm.", false);
        }
        Ok(Self {
            cache: Arc::new(RenderCache::new(config.sim)),
            config,
            vocab,
            params: p,
            net: Net { obj, lm, dec },
        })
    }

    /// Rebuilds a policy around stored parameter values.
    pub fn from_parts(config: PolicyConfig, vocab: Vocabulary, params: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut policy = Self::new(config, vocab, 0)?;
        if params.len() != policy.params.len() {
            return Err(ModelError::Corrupt(format!(
                "expected {} parameters, found {}",
                policy.params.len(),
                params.len()
            )));
        }
        for (name, value) in params {
            policy
                .params
                .assign(&name, value)
                .map_err(|e| ModelError::Corrupt(e.to_string()))?;
        }
        Ok(policy)
    }

    pub fn render_cache(&self) -> &RenderCache {
        &self.cache
    }

    /// Fresh parameters everywhere except the object encoder.
    pub fn reinit_except_object_encoder(&self, seed: u64) -> Result<Self> {
        let mut fresh = Self::new(self.config.clone(), self.vocab.clone(), seed)?;
        for (id, p) in self.params.iter() {
            if p.name.starts_with("obj.") {
                fresh
                    .params
                    .assign(&p.name, self.params.get(id).clone())
                    .map_err(|e| ModelError::Corrupt(e.to_string()))?;
            }
        }
        Ok(fresh)
    }

    // ---- graph construction -------------------------------------------

    fn push_scene(&self, batch: &mut ObjectBatch, scene: &Scene) -> Vec<usize> {
        scene_items(&self.config.sim, scene)
            .into_iter()
            .map(|(_, asset, bbox)| batch.push_asset(&self.cache, asset, &Appearance::default(), Some(bbox)))
            .collect()
    }

    fn prompt_positions(&self, prompt: &Prompt, batch: &mut ObjectBatch) -> Result<Vec<PromptPos>> {
        let positions = layout_prompt(prompt, &self.vocab, &self.cache, batch);
        if positions.len() > self.config.max_prompt_len {
            return Err(ModelError::PromptTooLong {
                len: positions.len(),
                max: self.config.max_prompt_len,
            });
        }
        if positions.is_empty() {
            return Err(ModelError::Config("empty prompt".into()));
        }
        Ok(positions)
    }

    /// Decoder pass. `obs_rows[t]` index rows of `obs_pool`; the trailing
    /// observation, when present, is the last entry of `obs_rows` and gets
    /// no action slots.
    #[allow(clippy::too_many_arguments)]
    fn decode_stream<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        prompt: Var,
        obs_pool: Var,
        obs_rows: &[Vec<usize>],
        trailing: bool,
        tokens: &[Vec<usize>],
        last_slots: usize,
        attention: AttentionMode,
        drop: &mut Dropout,
    ) -> Result<Stream> {
        let c = &self.config;
        let dec = &self.net.dec;
        let p_len = g.shape(prompt)[0];
        let stepped = if trailing { &obs_rows[..obs_rows.len() - 1] } else { obs_rows };
        let counts: Vec<usize> = stepped.iter().map(Vec::len).collect();
        let layout = StreamLayout::build(p_len, &counts, c.n_a, last_slots, trailing.then(|| obs_rows.last().map_or(0, Vec::len)));
        if layout.len() > c.max_len {
            return Err(ModelError::SequenceTooLong {
                len: layout.len(),
                max: c.max_len,
            });
        }
        if obs_rows.len() > c.max_steps {
            return Err(ModelError::TooManySteps {
                steps: obs_rows.len(),
                max: c.max_steps,
            });
        }
        let obs_len = g.shape(obs_pool)[0];

        let mut q_idx = Vec::new();
        let mut emb_idx = Vec::new();
        let bins = c.bins();
        let offsets: Vec<usize> = (0..c.n_a)
            .scan(1usize, |acc, n| {
                let o = *acc;
                *acc += if n + 1 < c.n_a { bins[n] } else { 0 };
                Some(o)
            })
            .collect();
        let mut order = Vec::with_capacity(layout.len());
        let mut types = Vec::with_capacity(layout.len());
        let mut steps = Vec::with_capacity(layout.len());
        for &s in &layout.slots {
            match s {
                Slot::Prompt(i) => {
                    order.push(i);
                    types.push(0);
                    steps.push(0);
                }
                Slot::Obs { step, item } => {
                    order.push(p_len + obs_rows[step][item]);
                    types.push(1);
                    steps.push(step + 1);
                }
                Slot::Action { step, dim } => {
                    order.push(p_len + obs_len + q_idx.len());
                    q_idx.push(dim);
                    emb_idx.push(if dim == 0 {
                        0
                    } else {
                        let tok = tokens[step][dim - 1];
                        if tok >= bins[dim - 1] {
                            return Err(ModelError::ShapeMismatch {
                                what: "action token",
                                expected: bins[dim - 1],
                                got: tok,
                            });
                        }
                        offsets[dim - 1] + tok
                    });
                    types.push(2);
                    steps.push(step + 1);
                }
            }
        }
        let mut parts = vec![prompt, obs_pool];
        if !q_idx.is_empty() {
            let q_table = g.param(dec.act_q);
            let q = g.gather_rows(q_table, &q_idx);
            let mut emb_parts = vec![g.input(Tensor::zeros(&[1, c.d]))];
            for &t in &dec.act_emb {
                emb_parts.push(g.param(t));
            }
            let emb_pool = g.concat_rows(&emb_parts);
            let e = g.gather_rows(emb_pool, &emb_idx);
            parts.push(g.add(q, e));
        }
        let pool = g.concat_rows(&parts);
        let x = g.gather_rows(pool, &order);
        let typ = g.param(dec.typ);
        let typ = g.gather_rows(typ, &types);
        let stp = g.param(dec.step);
        let stp = g.gather_rows(stp, &steps);
        let pos = g.param(dec.pos);
        let pos = g.gather_rows(pos, &(0..layout.len()).collect::<Vec<_>>());
        let x = g.add(x, typ);
        let x = g.add(x, stp);
        let mut h = g.add(x, pos);
        let mask = layout.mask(attention);
        for b in &dec.blocks {
            h = b.forward(g, h, Some(&mask), drop);
        }
        let hidden = dec.ln_f.forward(g, h);
        Ok(Stream { hidden, layout })
    }

    fn head_logits<T: Scalar>(&self, g: &mut Graph<T>, hidden: Var, rows: &[usize], dim: usize) -> Var {
        let h = g.gather_rows(hidden, rows);
        self.net.dec.heads[dim].forward(g, h)
    }

    /// Position read by head `dim` at `step`.
    fn read_slot(mode: DecodeMode, step: usize, dim: usize) -> Slot {
        match mode {
            DecodeMode::Autoregressive => Slot::Action { step, dim },
            DecodeMode::Independent => Slot::Action { step, dim: 0 },
        }
    }

    fn sample_tokens(&self, sample: &Sample) -> Vec<Vec<usize>> {
        sample
            .trajectory
            .actions
            .iter()
            .map(|a| a.tokens()[..self.config.n_a].to_vec())
            .collect()
    }

    /// Full teacher-forced stream of a sample.
    fn sample_stream<T: Scalar>(&self, g: &mut Graph<T>, sample: &Sample, opts: &LossOptions, drop: &mut Dropout) -> Result<Stream> {
        let traj = &sample.trajectory;
        let t_len = traj.actions.len();
        let mut batch = ObjectBatch::default();
        let positions = self.prompt_positions(&sample.prompt, &mut batch)?;
        let n_prompt_items = batch.len();
        let shown = if opts.trailing_obs { t_len + 1 } else { t_len };
        let obs_rows: Vec<Vec<usize>> = traj.scenes[..shown]
            .iter()
            .map(|s| self.push_scene(&mut batch, s).into_iter().map(|r| r - n_prompt_items).collect())
            .collect();
        let objects = self.net.obj.forward(g, &batch)?;
        let prompt_objs = g.slice_rows(objects, 0, n_prompt_items);
        let prompt = self.net.lm.forward(g, &positions, prompt_objs, self.config.prompt_mode, drop);
        let obs_pool = g.slice_rows(objects, n_prompt_items, batch.len() - n_prompt_items);
        let tokens = self.sample_tokens(sample);
        self.decode_stream(g, prompt, obs_pool, &obs_rows, opts.trailing_obs, &tokens, self.config.n_a, opts.attention, drop)
    }

    fn dropout(&self, seed: Option<u64>) -> Dropout {
        match seed {
            Some(s) => Dropout {
                p: self.config.dropout,
                rng: Some(ChaCha8Rng::seed_from_u64(s)),
            },
            None => Dropout::off(),
        }
    }

    /// Summed cross-entropy of one sample plus per-dimension argmax hits.
    fn sample_loss_graph<T: Scalar>(&self, g: &mut Graph<T>, sample: &Sample, opts: &LossOptions) -> Result<(Var, Vec<usize>)> {
        let n_a = self.config.n_a;
        if sample.trajectory.actions.is_empty() {
            return Ok((g.input(Tensor::scalar(T::zero())), vec![0; n_a]));
        }
        let mut drop = self.dropout(opts.dropout_seed);
        let stream = self.sample_stream(g, sample, opts, &mut drop)?;
        let tokens = self.sample_tokens(sample);
        let mut terms = Vec::with_capacity(n_a);
        let mut correct = vec![0; n_a];
        for dim in 0..n_a {
            let rows: Vec<usize> = (0..tokens.len())
                .map(|t| stream.layout.position(Self::read_slot(opts.decode_mode, t, dim)).expect("slot in layout"))
                .collect();
            let targets: Vec<usize> = tokens.iter().map(|t| t[dim]).collect();
            let logits = self.head_logits(g, stream.hidden, &rows, dim);
            let lv = g.value(logits);
            for (r, &tgt) in targets.iter().enumerate() {
                let row: Vec<f32> = lv.row(r).iter().map(|v| Scalar::to_f64(*v) as f32).collect();
                correct[dim] += usize::from(argmax(&row) == tgt);
            }
            terms.push(g.cross_entropy(logits, &targets));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t);
        }
        Ok((total, correct))
    }

    /// Builds the summed cross-entropy of one sample into `g`.
    pub fn sample_loss<T: Scalar>(&self, g: &mut Graph<T>, sample: &Sample, opts: &LossOptions) -> Result<Var> {
        Ok(self.sample_loss_graph(g, sample, opts)?.0)
    }

    /// Loss and gradients of one sample in precision `T`.
    pub fn sample_gradients<T: Scalar>(&self, params: &ParamSet<T>, sample: &Sample, opts: &LossOptions) -> Result<(f64, Gradients<T>)> {
        let mut g = Graph::new(params);
        let (loss, _) = self.sample_loss_graph(&mut g, sample, opts)?;
        let value = Scalar::to_f64(g.value(loss).data()[0]);
        Ok((value, g.backward(loss)?))
    }

    /// Mean-over-samples loss gradients. Samples are processed independently
    /// and reduced in index order, so the result does not depend on `exec`.
    pub fn batch_gradients(&self, samples: &[Sample], opts: &LossOptions, exec: ExecMode) -> Result<(Gradients<f32>, BatchStats)> {
        let n_a = self.config.n_a;
        let per = batch_map(exec, samples, |i, s| -> Result<_> {
            let mut o = *opts;
            o.dropout_seed = opts.dropout_seed.map(|seed| derive_seed(seed, i as u64));
            let mut g = Graph::new(&self.params);
            let (loss, correct) = self.sample_loss_graph(&mut g, s, &o)?;
            let value = Scalar::to_f64(g.value(loss).data()[0]);
            Ok((value, g.backward(loss)?, correct, s.trajectory.actions.len()))
        });
        let mut grads = Gradients::zeros_like(&self.params);
        let mut stats = BatchStats {
            correct: vec![0; n_a],
            tokens: vec![0; n_a],
            ..Default::default()
        };
        for r in per {
            let (loss, g, correct, steps) = r?;
            grads.accumulate(&g);
            stats.loss += loss;
            stats.samples += 1;
            for d in 0..n_a {
                stats.correct[d] += correct[d];
                stats.tokens[d] += steps;
            }
        }
        if !samples.is_empty() {
            grads.scale(1.0 / samples.len() as f64);
            stats.loss /= samples.len() as f64;
        }
        Ok((grads, stats))
    }

    /// Loss statistics without gradients or dropout.
    pub fn evaluate_loss(&self, samples: &[Sample], opts: &LossOptions, exec: ExecMode) -> Result<BatchStats> {
        let n_a = self.config.n_a;
        let mut o = *opts;
        o.dropout_seed = None;
        let per = batch_map(exec, samples, |_, s| -> Result<_> {
            let mut g = Graph::new(&self.params);
            let (loss, correct) = self.sample_loss_graph(&mut g, s, &o)?;
            Ok((Scalar::to_f64(g.value(loss).data()[0]), correct, s.trajectory.actions.len()))
        });
        let mut stats = BatchStats {
            correct: vec![0; n_a],
            tokens: vec![0; n_a],
            ..Default::default()
        };
        for r in per {
            let (loss, correct, steps) = r?;
            stats.loss += loss;
            stats.samples += 1;
            for d in 0..n_a {
                stats.correct[d] += correct[d];
                stats.tokens[d] += steps;
            }
        }
        if !samples.is_empty() {
            stats.loss /= samples.len() as f64;
        }
        Ok(stats)
    }

    /// Imitation loss: mean over the batch of summed per-step, per-dimension
    /// cross-entropies.
    pub fn action_loss(&self, samples: &[Sample], mode: DecodeMode) -> Result<f64> {
        Ok(self.evaluate_loss(samples, &LossOptions::eval(mode), ExecMode::default())?.loss)
    }

    /// Motion-following loss with the final observation in the stream.
    pub fn pretrain_loss(&self, samples: &[Sample], attention: AttentionMode) -> Result<f64> {
        let opts = LossOptions {
            decode_mode: self.config.decode_mode,
            attention,
            trailing_obs: true,
            dropout_seed: None,
        };
        Ok(self.evaluate_loss(samples, &opts, ExecMode::default())?.loss)
    }

    /// Final hidden states of a teacher-forced stream, one row per position.
    pub fn stream_outputs(&self, sample: &Sample, attention: AttentionMode, trailing_obs: bool) -> Result<(StreamLayout, Tensor<f32>)> {
        let mut g = Graph::new(&self.params);
        let opts = LossOptions {
            decode_mode: self.config.decode_mode,
            attention,
            trailing_obs,
            dropout_seed: None,
        };
        let s = self.sample_stream(&mut g, sample, &opts, &mut Dropout::off())?;
        Ok((s.layout, g.value(s.hidden).clone()))
    }

    /// Logits of head `dim` at every action slot `(step, dim)` of the stream.
    pub fn forward_logits(&self, sample: &Sample, attention: AttentionMode) -> Result<Vec<(Slot, Vec<f32>)>> {
        let mut g = Graph::new(&self.params);
        let opts = LossOptions {
            decode_mode: self.config.decode_mode,
            attention,
            trailing_obs: false,
            dropout_seed: None,
        };
        let s = self.sample_stream(&mut g, sample, &opts, &mut Dropout::off())?;
        let mut out = Vec::new();
        for (i, &slot) in s.layout.slots.iter().enumerate() {
            if let Slot::Action { dim, .. } = slot {
                let l = self.head_logits(&mut g, s.hidden, &[i], dim);
                out.push((slot, g.value(l).data().to_vec()));
            }
        }
        Ok(out)
    }

    // ---- encoders in isolation ----------------------------------------

    /// Object token for one patch and optional pixel bounding box.
    pub fn encode_object(&self, patch: &[f32], bbox: Option<BBox>) -> Result<Vec<f32>> {
        let mut batch = ObjectBatch::default();
        batch.push_raw(&self.config.sim, patch.to_vec(), bbox);
        let mut g = Graph::new(&self.params);
        let v = self.net.obj.forward(&mut g, &batch)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Prompt encoding under `mode` with the policy's parameters.
    pub fn prompt_encode(&self, prompt: &Prompt, mode: PromptMode) -> Result<PromptEncoding> {
        self.prompt_encode_with(&self.params, prompt, mode)
    }

    pub fn prompt_encode_with(&self, params: &ParamSet<f32>, prompt: &Prompt, mode: PromptMode) -> Result<PromptEncoding> {
        let mut batch = ObjectBatch::default();
        let positions = self.prompt_positions(prompt, &mut batch)?;
        let mut g = Graph::new(params);
        let objects = self.net.obj.forward(&mut g, &batch)?;
        let h = self.net.lm.forward(&mut g, &positions, objects, mode, &mut Dropout::off());
        Ok(PromptEncoding {
            embeddings: g.value(h).clone(),
            visual: positions.iter().map(|p| matches!(p, PromptPos::Visual(_))).collect(),
        })
    }

    /// Visual input tokens of a prompt, one row per visual position.
    pub fn prompt_visual_tokens(&self, prompt: &Prompt) -> Result<Tensor<f32>> {
        let mut batch = ObjectBatch::default();
        let positions = self.prompt_positions(prompt, &mut batch)?;
        let rows: Vec<usize> = positions
            .iter()
            .filter_map(|p| match p {
                PromptPos::Visual(r) => Some(*r),
                PromptPos::Word(_) => None,
            })
            .collect();
        let mut g = Graph::new(&self.params);
        let objects = self.net.obj.forward(&mut g, &batch)?;
        let v = g.gather_rows(objects, &rows);
        Ok(g.value(v).clone())
    }

    // ---- decoding ------------------------------------------------------

    pub fn begin_episode(&self, prompt: &Prompt) -> Result<EpisodeContext> {
        let enc = self.prompt_encode(prompt, self.config.prompt_mode)?;
        Ok(EpisodeContext {
            prompt: enc.embeddings,
            obs: Vec::new(),
            tokens: Vec::new(),
        })
    }

    pub fn push_observation(&self, ctx: &mut EpisodeContext, scene: &Scene) -> Result<()> {
        let mut batch = ObjectBatch::default();
        self.push_scene(&mut batch, scene);
        let mut g = Graph::new(&self.params);
        let v = self.net.obj.forward(&mut g, &batch)?;
        ctx.obs.push(g.value(v).clone());
        Ok(())
    }

    pub fn push_action(&self, ctx: &mut EpisodeContext, tokens: &[usize]) {
        ctx.tokens.push(tokens.to_vec());
    }

    /// Next action tokens given the observations and actions so far.
    pub fn decode_action(&self, ctx: &EpisodeContext, mode: DecodeMode, strategy: DecodeStrategy) -> Result<Vec<usize>> {
        let n_a = self.config.n_a;
        if ctx.obs.len() != ctx.tokens.len() + 1 {
            return Err(ModelError::Config("decode_action needs one more observation than actions".into()));
        }
        let step = ctx.tokens.len();
        let mut rng = match strategy {
            DecodeStrategy::Sample(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            DecodeStrategy::Greedy => None,
        };
        let pick = |logits: &[f32], rng: &mut Option<ChaCha8Rng>| -> usize {
            match rng {
                None => argmax(logits),
                Some(r) => {
                    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let w: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64).exp()).collect();
                    WeightedIndex::new(&w).map_or_else(|_| argmax(logits), |d| d.sample(r))
                }
            }
        };
        let mut cur: Vec<usize> = Vec::with_capacity(n_a);
        let passes = match mode {
            DecodeMode::Autoregressive => n_a,
            DecodeMode::Independent => 1,
        };
        for pass in 0..passes {
            let mut g = Graph::new(&self.params);
            let prompt = g.input(ctx.prompt.clone());
            let mut rows = Vec::with_capacity(ctx.obs.len());
            let mut off = 0;
            let mut parts = Vec::with_capacity(ctx.obs.len());
            for o in &ctx.obs {
                rows.push((off..off + o.rows()).collect::<Vec<_>>());
                off += o.rows();
                parts.push(g.input(o.clone()));
            }
            let obs_pool = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
            let mut tokens = ctx.tokens.clone();
            tokens.push(cur.clone());
            let stream = self.decode_stream(&mut g, prompt, obs_pool, &rows, false, &tokens, pass + 1, AttentionMode::Causal, &mut Dropout::off())?;
            let at = stream.layout.position(Slot::Action { step, dim: pass }).expect("slot present");
            match mode {
                DecodeMode::Autoregressive => {
                    let l = self.head_logits(&mut g, stream.hidden, &[at], pass);
                    let logits = g.value(l).data().to_vec();
                    cur.push(pick(&logits, &mut rng));
                }
                DecodeMode::Independent => {
                    for dim in 0..n_a {
                        let l = self.head_logits(&mut g, stream.hidden, &[at], dim);
                        let logits = g.value(l).data().to_vec();
                        cur.push(pick(&logits, &mut rng));
                    }
                }
            }
        }
        Ok(cur)
    }

    /// Parameter-name prefixes of the four groups.
    pub const GROUPS: [&'static str; 4] = ["obj.", "lm.", "dec.", "head"];

    /// Global L2 norm of `grads` restricted to parameters starting with `prefix`.
    pub fn group_norm(&self, grads: &Gradients<f32>, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| grads.get(id).sum_sq())
            .sum::<f64>()
            .sqrt()
    }
}
