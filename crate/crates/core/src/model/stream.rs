//! Token-stream layout and attention masks.
//!
//! ```text
//! [ prompt (P) | o_0 items, a_0 slots (N_a) | o_1 items, a_1 slots | ... ]
//! ```
//!
//! The layout is a pure function of the prompt length, per-step item counts,
//! `N_a` and the decode point.

use std::sync::Arc;

use super::AttentionMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Prompt(usize),
    Obs { step: usize, item: usize },
    Action { step: usize, dim: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamLayout {
    pub slots: Vec<Slot>,
}

impl StreamLayout {
    /// `obs_counts[t]` items for each observed step. Every step but the last
    /// gets `n_a` action slots, the last gets `last_slots`. A trailing
    /// observation (no action slots) is appended when `trailing` is set.
    pub fn build(prompt_len: usize, obs_counts: &[usize], n_a: usize, last_slots: usize, trailing: Option<usize>) -> Self {
        let mut slots: Vec<Slot> = (0..prompt_len).map(Slot::Prompt).collect();
        let steps = obs_counts.len();
        for (step, &n) in obs_counts.iter().enumerate() {
            slots.extend((0..n).map(|item| Slot::Obs { step, item }));
            let k = if step + 1 == steps { last_slots } else { n_a };
            slots.extend((0..k).map(|dim| Slot::Action { step, dim }));
        }
        if let Some(n) = trailing {
            slots.extend((0..n).map(|item| Slot::Obs { step: steps, item }));
        }
        Self { slots }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn position(&self, slot: Slot) -> Option<usize> {
        self.slots.iter().position(|&s| s == slot)
    }

    fn visible(mode: AttentionMode, i: usize, qi: Slot, j: usize, kj: Slot) -> bool {
        match mode {
            AttentionMode::Causal => j <= i,
            AttentionMode::MaskedPretrain => match (qi, kj) {
                (Slot::Prompt(_), Slot::Prompt(_)) => j <= i,
                (Slot::Prompt(_), _) => false,
                (_, Slot::Prompt(_)) => false,
                (Slot::Obs { .. }, Slot::Obs { .. }) => true,
                (Slot::Obs { .. }, Slot::Action { .. }) => false,
                (Slot::Action { .. }, Slot::Obs { .. }) => true,
                (Slot::Action { .. }, Slot::Action { .. }) => j <= i,
            },
        }
    }

    /// Row-major `len × len` visibility matrix.
    pub fn mask(&self, mode: AttentionMode) -> Arc<Vec<bool>> {
        let n = self.len();
        let mut m = vec![false; n * n];
        for (i, &qi) in self.slots.iter().enumerate() {
            for (j, &kj) in self.slots.iter().enumerate() {
                m[i * n + j] = Self::visible(mode, i, qi, j, kj);
            }
        }
        Arc::new(m)
    }
}
