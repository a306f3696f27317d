use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::prompt::{ImageKind, Prompt};
use super::{derive_seed, Placement, Result, TaskConfig, TaskError, TaskInstance, TaskType, Trajectory};
use crate::sim::{ActionPrim, AssetKind, Cell, Scene, SimConfig, StepFlag};

/// Object states `(uid, cell, rotation)` depicted by each scene frame.
fn frame_states(cfg: &SimConfig, prompt: &Prompt) -> Vec<Vec<(u32, Cell, u16)>> {
    let k = cfg.patch as f32;
    prompt
        .images()
        .filter(|i| i.kind == ImageKind::SceneFrame)
        .map(|img| {
            let mut v: Vec<_> = img
                .views
                .iter()
                .filter(|v| v.asset.kind == AssetKind::Object)
                .filter_map(|v| {
                    let b = v.bbox?.0;
                    let cell = Cell::new((b[1] / k).round() as u16, (b[0] / k).round() as u16);
                    Some((v.uid, cell, v.asset.rotation))
                })
                .collect();
            v.sort_unstable_by_key(|s| s.0);
            v
        })
        .collect()
}

fn scene_states(scene: &Scene) -> Vec<(u32, Cell, u16)> {
    scene.objects.iter().map(|o| (o.uid, o.cell, o.rotation)).collect()
}

/// Action turning state `a` into state `b`, which must differ in exactly one
/// object.
fn diff_action(rotations: usize, a: &[(u32, Cell, u16)], b: &[(u32, Cell, u16)]) -> std::result::Result<ActionPrim, String> {
    if a.len() != b.len() {
        return Err("frames depict different object sets".into());
    }
    let changed: Vec<_> = a.iter().zip(b).filter(|(x, y)| x != y).collect();
    match changed.as_slice() {
        [(x, y)] if x.0 == y.0 => {
            let rot = (y.2 as usize + rotations - x.2 as usize) % rotations;
            Ok(ActionPrim::new(x.1, y.1, rot as u16))
        }
        [] => Err("consecutive frames are identical".into()),
        _ => Err("consecutive frames differ in more than one object".into()),
    }
}

fn move_for(cfg: &SimConfig, scene: &Scene, p: &Placement) -> Option<ActionPrim> {
    let obj = scene.object(p.uid)?;
    let rot = p
        .rotation
        .map_or(0, |r| (r as usize + cfg.rotations - obj.rotation as usize) % cfg.rotations);
    Some(ActionPrim::new(obj.cell, p.cell, rot as u16))
}

/// Demonstration for `instance`, verified against its success predicate.
pub fn scripted_expert(cfg: &TaskConfig, instance: &TaskInstance) -> Result<Trajectory> {
    let sim = &cfg.sim;
    let fail = |reason: String| TaskError::Planner {
        task: instance.task,
        seed: instance.seed,
        reason,
    };
    let mut traj = Trajectory::new(instance.scene.clone());
    if instance.success(&instance.scene) {
        return Ok(traj);
    }
    let actions: Vec<ActionPrim> = match instance.task {
        TaskType::FollowMotion | TaskType::FollowOrder => {
            let mut states = frame_states(sim, &instance.prompt);
            let initial = scene_states(&instance.scene);
            if instance.task == TaskType::FollowOrder || states.first() != Some(&initial) {
                states.insert(0, initial);
            }
            states
                .windows(2)
                .map(|w| diff_action(sim.rotations, &w[0], &w[1]))
                .collect::<std::result::Result<_, _>>()
                .map_err(fail)?
        }
        TaskType::PutInto | TaskType::RearrangeRestore | TaskType::Twist => {
            let mut pending: Vec<Placement> = instance
                .goal
                .placements
                .iter()
                .filter(|p| !super::Goal::holds(p, &instance.scene))
                .copied()
                .collect();
            if instance.task == TaskType::RearrangeRestore && cfg.randomized_restore {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(instance.seed, 0x5e57_0e));
                pending.shuffle(&mut rng);
            } else {
                pending.sort_by_key(|p| p.uid);
            }
            // placements are independent single moves; scenes are re-read
            // as actions accumulate
            let mut scene = instance.scene.clone();
            let mut out = Vec::with_capacity(pending.len());
            for p in &pending {
                let a = move_for(sim, &scene, p).ok_or_else(|| fail(format!("object {} missing", p.uid)))?;
                scene = crate::sim::step(sim, &scene, &a)?.0;
                out.push(a);
            }
            out
        }
    };
    for a in actions {
        let flag = traj.push(sim, a)?;
        if flag != StepFlag::Ok {
            return Err(fail(format!("illegal step {a:?}: {flag:?}")));
        }
    }
    if !instance.success(traj.last()) {
        return Err(fail("final scene does not satisfy the goal".into()));
    }
    Ok(traj)
}
