use serde::{Deserialize, Serialize};

use super::{Gradients, ParamSet, Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

/// First and second moments per parameter plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// AdamW with decoupled weight decay and global-norm clipping applied
/// before the moment updates.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Self {
        Self {
            config,
            state: OptimizerState::new(params),
        }
    }

    /// Applies one update. Frozen parameters keep their values and moments.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>, lr: f64) -> Result<StepStats> {
        if grads.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                expected: vec![params.len()],
                got: vec![grads.len()],
            });
        }
        for (id, g) in grads.iter() {
            if g.shape() != params.get(id).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    expected: params.get(id).shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        let norm = grads.global_norm();
        let clip_scale = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        if !(norm * clip_scale).is_finite() {
            return Err(TensorError::NonFinite {
                op: "adamw_step",
                node: 0,
            });
        }

        self.state.step += 1;
        let t = self.state.step as f64;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one, eps) = (T::one(), T::from_f64(c.eps));
        let scale = T::from_f64(clip_scale);
        let step_size = T::from_f64(lr);
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        let (inv_b1, inv_b2) = (T::from_f64(1.0 / bias1), T::from_f64(1.0 / bias2));

        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let g = grads.get(id).data();
            let m = self.state.first[id.0].data_mut();
            let v = self.state.second[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] * inv_b1;
                let v_hat = v[i] * inv_b2;
                p[i] = p[i] * decay - step_size * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepStats {
            grad_norm: norm,
            clipped: clip_scale < 1.0,
        })
    }
}
