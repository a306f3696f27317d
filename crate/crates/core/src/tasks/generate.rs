use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::prompt::{ImageElement, Prompt};
use super::shard::{DatasetShard, Manifest, Record};
use super::{derive_seed, scripted_expert, AssetSplit, Goal, Level, Placement, Result, TaskConfig, TaskError, TaskInstance, TaskType};
use crate::exec::{batch_map, ExecMode};
use crate::sim::{shape_name, texture_name, Asset, AssetKind, Cell, ObjectSpec, Receptacle, Scene, RECEPTACLE_UID_BASE};

/// Example objects in TWIST prompts use uids from here on.
const EXAMPLE_UID_BASE: u32 = 500;

/// Instance generator for one configuration.
#[derive(Clone, Debug)]
pub struct TaskSuite {
    pub cfg: TaskConfig,
    pub assets: AssetSplit,
}

impl TaskSuite {
    pub fn new(cfg: TaskConfig) -> Result<Self> {
        cfg.validate()?;
        let assets = AssetSplit::new(&cfg.sim);
        Ok(Self { cfg, assets })
    }

    pub fn check_level(&self, task: TaskType, level: Level) -> Result<()> {
        let held_out = self.cfg.split.holdout().contains(&task);
        if held_out != (level == Level::L4) {
            return Err(TaskError::LevelMismatch { task, level });
        }
        Ok(())
    }

    /// Manifest describing what a level may contain.
    pub fn manifest(&self, level: Level, seed: u64) -> Manifest {
        let a = &self.assets;
        let mut combos = a.train_combos();
        if let Some(extra) = a.required(level) {
            combos.extend(extra);
        }
        combos.sort_unstable();
        let mut shapes: Vec<u16> = combos.iter().map(|c| c.0).collect();
        let mut textures: Vec<u16> = combos.iter().map(|c| c.1).collect();
        shapes.sort_unstable();
        shapes.dedup();
        textures.sort_unstable();
        textures.dedup();
        let tasks = match level {
            Level::L4 => self.cfg.split.holdout().to_vec(),
            _ => self.cfg.split.train(),
        };
        Manifest {
            level,
            split: self.cfg.split,
            sim: self.cfg.sim,
            shapes,
            textures,
            combos,
            tasks,
            seed,
        }
    }

    pub fn generate(&self, task: TaskType, level: Level, seed: u64) -> Result<TaskInstance> {
        self.check_level(task, level)?;
        let stream = ((task.index() as u64) << 8) | level.index() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
        let mut g = Gen {
            suite: self,
            level,
            rng: &mut rng,
        };
        let (prompt, scene, goal) = match task {
            TaskType::PutInto => g.put_into()?,
            TaskType::RearrangeRestore => g.rearrange_restore()?,
            TaskType::Twist => g.twist()?,
            TaskType::FollowMotion => g.follow_motion()?,
            TaskType::FollowOrder => g.follow_order()?,
        };
        Ok(TaskInstance {
            task,
            level,
            seed,
            prompt,
            scene,
            goal,
        })
    }
}

struct Gen<'a, R: Rng> {
    suite: &'a TaskSuite,
    level: Level,
    rng: &'a mut R,
}

impl<R: Rng> Gen<'_, R> {
    fn cfg(&self) -> &TaskConfig {
        &self.suite.cfg
    }

    fn rotations(&self) -> u16 {
        self.cfg().sim.rotations as u16
    }

    fn object_count(&mut self) -> usize {
        let (lo, hi) = (self.cfg().min_objects, self.cfg().max_objects);
        self.rng.gen_range(lo..=hi)
    }

    fn shuffled_cells(&mut self) -> Vec<Cell> {
        let sim = self.cfg().sim;
        let mut cells: Vec<Cell> = (0..sim.height as u16)
            .flat_map(|r| (0..sim.width as u16).map(move |c| Cell::new(r, c)))
            .collect();
        cells.shuffle(self.rng);
        cells
    }

    /// `n` distinct pairs; at L2/L3 at least one comes from the level's
    /// required pool.
    fn scene_assets(&mut self, n: usize) -> Vec<(u16, u16)> {
        let train = self.suite.assets.train_combos();
        let mut out = Vec::with_capacity(n);
        if let Some(required) = self.suite.assets.required(self.level) {
            out.push(*required.choose(self.rng).expect("non-empty pool"));
        }
        let rest: Vec<_> = train.choose_multiple(self.rng, n - out.len()).copied().collect();
        out.extend(rest);
        out.shuffle(self.rng);
        out
    }

    fn receptacle_textures(&mut self, n: usize) -> Vec<u16> {
        let pool = self.suite.assets.seen_textures.clone();
        pool.choose_multiple(self.rng, n).copied().collect()
    }

    fn place_objects(&mut self, scene: &mut Scene, assets: &[(u16, u16)], cells: &[Cell]) {
        for (i, (&(shape, texture), &cell)) in assets.iter().zip(cells).enumerate() {
            let rotation = self.rng.gen_range(0..self.rotations());
            scene.objects.push(ObjectSpec {
                uid: i as u32,
                shape,
                texture,
                rotation,
                cell,
            });
        }
    }

    fn frame(&self, scene: &Scene) -> ImageElement {
        ImageElement::scene_frame(&self.cfg().sim, scene)
    }

    fn put_into(&mut self) -> Result<(Prompt, Scene, Goal)> {
        let n = self.object_count();
        let k = self.cfg().put_into_receptacles;
        let cells = self.shuffled_cells();
        let textures = self.receptacle_textures(k);
        let mut scene = Scene::empty(&self.cfg().sim);
        for (i, (&texture, &cell)) in textures.iter().zip(&cells).enumerate() {
            scene.receptacles.push(Receptacle {
                uid: RECEPTACLE_UID_BASE + i as u32,
                texture,
                cell,
            });
        }
        let assets = self.scene_assets(n);
        self.place_objects(&mut scene, &assets, &cells[k..]);
        let target = scene.objects[self.rng.gen_range(0..n)];
        let rec = scene.receptacles[self.rng.gen_range(0..k)];
        let prompt = Prompt::new()
            .words("Put")
            .image(ImageElement::object_patch(target.uid, target.asset()))
            .words("into")
            .image(ImageElement::object_patch(rec.uid, rec.asset()))
            .words(".");
        let goal = Goal {
            placements: vec![Placement {
                uid: target.uid,
                cell: rec.cell,
                rotation: None,
            }],
        };
        Ok((prompt, scene, goal))
    }

    fn rearrange_restore(&mut self) -> Result<(Prompt, Scene, Goal)> {
        let n = self.object_count();
        let cells = self.shuffled_cells();
        let assets = self.scene_assets(n);
        let mut target = Scene::empty(&self.cfg().sim);
        self.place_objects(&mut target, &assets, &cells);
        let k = self.cfg().restore_displaced.min(n);
        let mut moved: Vec<usize> = (0..n).collect();
        moved.shuffle(self.rng);
        let mut scene = target.clone();
        let r = self.rotations();
        let p_rotate = self.cfg().restore_rotate_prob;
        // displaced positions come after the n goal cells, so they never
        // block a restore move; rotated objects stay in place
        for (j, &i) in moved[..k].iter().enumerate() {
            if p_rotate > 0.0 && self.rng.gen_bool(p_rotate) {
                let o = &mut scene.objects[i];
                o.rotation = (o.rotation + self.rng.gen_range(1..r)) % r;
            } else {
                scene.objects[i].cell = cells[n + j];
            }
        }
        let prompt = Prompt::new()
            .words("Restore objects to this arrangement :")
            .image(self.frame(&target))
            .words(".");
        let goal = Goal {
            placements: target
                .objects
                .iter()
                .map(|o| Placement {
                    uid: o.uid,
                    cell: o.cell,
                    rotation: Some(o.rotation),
                })
                .collect(),
        };
        Ok((prompt, scene, goal))
    }

    fn twist(&mut self) -> Result<(Prompt, Scene, Goal)> {
        let n = self.object_count();
        let r = self.rotations();
        let cells = self.shuffled_cells();
        let assets = self.scene_assets(n);
        let mut scene = Scene::empty(&self.cfg().sim);
        self.place_objects(&mut scene, &assets, &cells);
        let target = scene.objects[self.rng.gen_range(0..n)];
        let delta = self.rng.gen_range(1..r);

        let mut prompt = Prompt::new().words("Twist is defined as rotating object a specific angle . For examples :");
        let train = self.suite.assets.train_combos();
        for i in 0..self.cfg().twist_examples {
            let (shape, texture) = *train.choose(self.rng).expect("non-empty");
            let cell = *self.shuffled_cells().first().expect("non-empty board");
            let rotation = self.rng.gen_range(0..r);
            let mut before = Scene::empty(&self.cfg().sim);
            before.objects.push(ObjectSpec {
                uid: EXAMPLE_UID_BASE + i as u32,
                shape,
                texture,
                rotation,
                cell,
            });
            let mut after = before.clone();
            after.objects[0].rotation = (rotation + delta) % r;
            prompt = prompt
                .words("From")
                .image(self.frame(&before))
                .words("to")
                .image(self.frame(&after))
                .words(".");
        }
        let desc = format!("{} {}", texture_name(target.texture), shape_name(target.shape));
        prompt = prompt.words("Now twist all").words(&desc).words("objects .");
        let goal = Goal {
            placements: vec![Placement {
                uid: target.uid,
                cell: target.cell,
                rotation: Some((target.rotation + delta) % r),
            }],
        };
        Ok((prompt, scene, goal))
    }

    fn follow_motion(&mut self) -> Result<(Prompt, Scene, Goal)> {
        let n = self.object_count();
        let steps = self.rng.gen_range(1..=self.cfg().max_motion_steps);
        let cells = self.shuffled_cells();
        let assets = self.scene_assets(n);
        let mut scene = Scene::empty(&self.cfg().sim);
        self.place_objects(&mut scene, &assets, &cells);
        let mover = self.rng.gen_range(0..n);
        let mut frames = vec![scene.clone()];
        let mut cur = scene.clone();
        // one object travels a path of cells that were all free initially,
        // so every frame differs from the others
        let mut free = cells[n..].to_vec();
        for _ in 0..steps {
            let dest = free.swap_remove(self.rng.gen_range(0..free.len()));
            cur.objects[mover].cell = dest;
            frames.push(cur.clone());
        }
        let mut prompt = Prompt::new().words("Follow this motion :");
        for f in &frames {
            prompt = prompt.image(self.frame(f));
        }
        let goal = Goal {
            placements: cur
                .objects
                .iter()
                .map(|o| Placement {
                    uid: o.uid,
                    cell: o.cell,
                    rotation: Some(o.rotation),
                })
                .collect(),
        };
        Ok((prompt, scene, goal))
    }

    fn follow_order(&mut self) -> Result<(Prompt, Scene, Goal)> {
        let n = self.object_count();
        let sim = self.cfg().sim;
        let len = self.rng.gen_range(2..=self.cfg().max_order_len.min(n));
        let row = self.rng.gen_range(0..sim.height as u16);
        let col0 = self.rng.gen_range(0..=(sim.width - len) as u16);
        let lane: Vec<Cell> = (0..len as u16).map(|j| Cell::new(row, col0 + j)).collect();
        let textures = self.receptacle_textures(len);
        let mut scene = Scene::empty(&sim);
        for (j, (&texture, &cell)) in textures.iter().zip(&lane).enumerate() {
            scene.receptacles.push(Receptacle {
                uid: RECEPTACLE_UID_BASE + j as u32,
                texture,
                cell,
            });
        }
        let cells: Vec<Cell> = self.shuffled_cells().into_iter().filter(|c| !lane.contains(c)).collect();
        let assets = self.scene_assets(n);
        self.place_objects(&mut scene, &assets, &cells);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(self.rng);
        let mut prompt = Prompt::new().words("Stack objects in this order");
        let mut cur = scene.clone();
        let mut placements = Vec::with_capacity(len);
        for (&i, &cell) in order.iter().zip(&lane) {
            cur.objects[i].cell = cell;
            prompt = prompt.image(self.frame(&cur));
            placements.push(Placement {
                uid: cur.objects[i].uid,
                cell,
                rotation: None,
            });
        }
        Ok((prompt, scene, Goal { placements }))
    }
}

/// Text of an asset as used in descriptions (without article).
pub(crate) fn asset_phrase(asset: &Asset) -> String {
    match asset.kind {
        AssetKind::Object => format!("{} {}", texture_name(asset.texture), shape_name(asset.shape)),
        AssetKind::Receptacle => format!("{} container", texture_name(asset.texture)),
    }
}

/// Generates `per_task` demonstrations for every task in `tasks` at `level`.
///
/// Instance seeds are derived from `(master_seed, task, index)` so any
/// subset can be regenerated independently; workers share nothing.
pub fn generate_dataset(
    suite: &TaskSuite,
    level: Level,
    tasks: &[TaskType],
    per_task: usize,
    master_seed: u64,
    mode: ExecMode,
) -> Result<DatasetShard> {
    let jobs: Vec<(TaskType, u64)> = tasks
        .iter()
        .flat_map(|&t| (0..per_task as u64).map(move |i| (t, derive_seed(master_seed, ((t.index() as u64) << 40) | i))))
        .collect();
    let records = batch_map(mode, &jobs, |_, &(task, seed)| -> Result<Record> {
        let instance = suite.generate(task, level, seed)?;
        let trajectory = scripted_expert(&suite.cfg, &instance)?;
        Ok(Record { instance, trajectory })
    });
    let mut manifest = suite.manifest(level, master_seed);
    manifest.tasks = tasks.to_vec();
    DatasetShard::new(manifest, records.into_iter().collect::<Result<Vec<_>>>()?)
}
