use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::asset_phrase;
use super::prompt::{Appearance, ImageElement, ImageKind, Prompt, PromptElement};
use super::{Result, TaskError, TaskInstance, TaskType, Trajectory};
use crate::sim::{ActionPrim, Asset, SimConfig, ACTION_DIMS};

/// A prompt together with the demonstration it conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: Prompt,
    pub trajectory: Trajectory,
}

impl Sample {
    pub fn targets(&self) -> Vec<[usize; ACTION_DIMS]> {
        self.trajectory.actions.iter().map(ActionPrim::tokens).collect()
    }
}

/// Motion-following sample: "Follow this motion :" then one frame per state.
pub fn make_pretrain_sample(cfg: &SimConfig, trajectory: &Trajectory) -> Sample {
    let mut prompt = Prompt::new().words("Follow this motion :");
    for s in &trajectory.scenes {
        prompt = prompt.image(ImageElement::scene_frame(cfg, s));
    }
    Sample {
        prompt,
        trajectory: trajectory.clone(),
    }
}

/// Strengths for prompt-image augmentation. All zeros is the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Brightness, contrast and saturation factors are drawn from `1 ± jitter`.
    pub jitter: f32,
    pub grayscale_prob: f32,
    /// Bounding boxes shift by a constant drawn from `±max_shift` pixels.
    pub max_shift: f32,
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.jitter == 0.0 && self.grayscale_prob == 0.0 && self.max_shift == 0.0
    }
}

fn symmetric<R: Rng>(rng: &mut R, half: f32) -> f32 {
    if half > 0.0 {
        rng.gen_range(-half..=half)
    } else {
        0.0
    }
}

/// Jitters prompt images and shifts every prompt bounding box by one
/// constant offset. The trajectory is left untouched.
pub fn augment_sample(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Sample {
    let mut out = sample.clone();
    if cfg.is_identity() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let appearance = Appearance {
        brightness: 1.0 + symmetric(&mut rng, cfg.jitter),
        contrast: 1.0 + symmetric(&mut rng, cfg.jitter),
        saturation: 1.0 + symmetric(&mut rng, cfg.jitter),
        grayscale: cfg.grayscale_prob > 0.0 && rng.gen::<f32>() < cfg.grayscale_prob,
    };
    let (dx, dy) = (symmetric(&mut rng, cfg.max_shift), symmetric(&mut rng, cfg.max_shift));
    for img in out.prompt.images_mut() {
        img.appearance = appearance;
        for v in &mut img.views {
            v.bbox = v.bbox.map(|b| b.shifted(dx, dy));
        }
    }
    out
}

/// "the {texture} {shape}" for objects, "the {texture} container" for
/// receptacles.
pub fn description_words(asset: &Asset) -> String {
    format!("the {}", asset_phrase(asset))
}

/// Replaces each object patch by its text description with probability
/// `p_replace`. Scene frames are never replaced.
pub fn modified_ft_transform(prompt: &Prompt, seed: u64, p_replace: f64) -> Prompt {
    if p_replace <= 0.0 {
        return prompt.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Prompt::new();
    for e in &prompt.elements {
        match e {
            PromptElement::Image(img) if img.kind == ImageKind::ObjectPatch => {
                if rng.gen_bool(p_replace.min(1.0)) {
                    out = out.words(&description_words(&img.views[0].asset));
                } else {
                    out.elements.push(e.clone());
                }
            }
            _ => out.elements.push(e.clone()),
        }
    }
    out
}

/// Rewrites held-out prompts into the motion-following form.
pub fn edit_holdout_prompt(instance: &TaskInstance) -> Result<TaskInstance> {
    let mut out = instance.clone();
    match instance.task {
        TaskType::FollowMotion => {}
        TaskType::FollowOrder => {
            let mut p = Prompt::new().words("Follow this motion :");
            for img in instance.prompt.images() {
                p = p.image(img.clone());
            }
            out.prompt = p;
        }
        TaskType::Twist => {
            let els = &instance.prompt.elements;
            let mut frames = instance.prompt.images();
            let (before, after) = match (frames.next(), frames.next()) {
                (Some(b), Some(a)) => (b.clone(), a.clone()),
                _ => return Err(TaskError::Unsupported(instance.task)),
            };
            let last_image = els
                .iter()
                .rposition(|e| matches!(e, PromptElement::Image(_)))
                .unwrap_or(0);
            let tail: Vec<&str> = els[last_image + 1..]
                .iter()
                .filter_map(|e| match e {
                    PromptElement::Word(w) => Some(w.as_str()),
                    PromptElement::Image(_) => None,
                })
                .collect();
            let start = tail.iter().position(|&w| w == "all").map(|i| i + 1);
            let end = tail.iter().rposition(|&w| w == "objects");
            let desc = match (start, end) {
                (Some(s), Some(e)) if s < e => tail[s..e].join(" "),
                _ => return Err(TaskError::Unsupported(instance.task)),
            };
            out.prompt = Prompt::new()
                .words("Follow this motion :")
                .image(before)
                .words("to")
                .image(after)
                .words("for all")
                .words(&desc)
                .words("objects .");
        }
        other => return Err(TaskError::Unsupported(other)),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{AssetKind, Cell, ObjectSpec, Scene};
    use crate::tasks::{scripted_expert, Level, TaskConfig, TaskSuite};

    fn sample(seed: u64) -> Sample {
        let suite = TaskSuite::new(TaskConfig::default()).unwrap();
        let inst = suite.generate(TaskType::RearrangeRestore, Level::L1, seed).unwrap();
        let traj = scripted_expert(&suite.cfg, &inst).unwrap();
        Sample {
            prompt: inst.prompt,
            trajectory: traj,
        }
    }

    #[test]
    fn pretrain_sample_minimal_case() {
        let cfg = SimConfig::default();
        let mut scene = Scene::empty(&cfg);
        scene.objects.push(ObjectSpec {
            uid: 0,
            shape: 1,
            texture: 2,
            rotation: 0,
            cell: Cell::new(0, 0),
        });
        let mut t = Trajectory::new(scene);
        t.push(&cfg, ActionPrim::new(Cell::new(0, 0), Cell::new(1, 1), 1)).unwrap();
        let s = make_pretrain_sample(&cfg, &t);
        assert_eq!(s.prompt.images().count(), 2);
        assert_eq!(s.targets(), vec![[0, 0, 0, 1, 1, 1]]);
        assert_eq!(s.prompt.text(), "Follow this motion : {frame} {frame}");
    }

    #[test]
    fn identity_augmentation_is_a_no_op() {
        let s = sample(1);
        assert_eq!(augment_sample(&s, 5, &AugmentConfig::default()), s);
    }

    #[test]
    fn augmentation_shifts_all_boxes_equally() {
        let s = sample(2);
        let cfg = AugmentConfig {
            jitter: 0.3,
            grayscale_prob: 0.5,
            max_shift: 3.0,
        };
        let a = augment_sample(&s, 11, &cfg);
        assert_eq!(a.trajectory, s.trajectory);
        let mut offsets = Vec::new();
        for (x, y) in s.prompt.images().zip(a.prompt.images()) {
            for (u, v) in x.views.iter().zip(&y.views) {
                let (b0, b1) = (u.bbox.unwrap().0, v.bbox.unwrap().0);
                offsets.push((b1[0] - b0[0], b1[1] - b0[1]));
                assert!(((b1[2] - b0[2]) - (b1[0] - b0[0])).abs() < 1e-5);
            }
        }
        assert!(offsets.len() > 1);
        assert!(offsets.iter().all(|o| (o.0 - offsets[0].0).abs() < 1e-5 && (o.1 - offsets[0].1).abs() < 1e-5));
    }

    #[test]
    fn modified_ft_phrasing() {
        let v = Asset {
            kind: AssetKind::Object,
            shape: 6,
            texture: 7,
            rotation: 0,
        };
        let p = Prompt::new()
            .words("Follow this motion for")
            .image(ImageElement::object_patch(0, v))
            .words(":")
            .image(ImageElement::scene_frame(&SimConfig::default(), &Scene::empty(&SimConfig::default())));
        let out = modified_ft_transform(&p, 0, 1.0);
        assert_eq!(out.text(), "Follow this motion for the white and purple striped V : {frame}");
        assert_eq!(modified_ft_transform(&p, 0, 0.0), p);
    }

    #[test]
    fn edited_prompts_follow_templates() {
        let suite = TaskSuite::new(TaskConfig::default()).unwrap();
        let twist = suite.generate(TaskType::Twist, Level::L1, 4).unwrap();
        let e = edit_holdout_prompt(&twist).unwrap();
        let target = twist.scene.object(twist.goal.placements[0].uid).unwrap();
        assert_eq!(
            e.prompt.text(),
            format!("Follow this motion : {{frame}} to {{frame}} for all {} objects .", asset_phrase(&target.asset()))
        );
        assert_eq!((e.scene.clone(), e.goal.clone()), (twist.scene.clone(), twist.goal.clone()));

        let order = suite.generate(TaskType::FollowOrder, Level::L1, 4).unwrap();
        let e = edit_holdout_prompt(&order).unwrap();
        assert!(order.prompt.text().starts_with("Stack objects in this order {frame}"));
        assert_eq!(e.prompt.leading_words(), ["Follow", "this", "motion", ":"]);
        assert_eq!(e.prompt.images().count(), order.prompt.images().count());

        let motion = suite.generate(TaskType::FollowMotion, Level::L4, 4).unwrap();
        assert_eq!(edit_holdout_prompt(&motion).unwrap(), motion);

        let put = suite.generate(TaskType::PutInto, Level::L1, 4).unwrap();
        assert!(matches!(edit_holdout_prompt(&put), Err(TaskError::Unsupported(_))));
    }
}
