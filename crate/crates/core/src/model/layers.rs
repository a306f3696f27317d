use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, ParamId, ParamSet, Scalar, Var};

/// Dropout state for one forward pass; `rng: None` disables dropout.
pub(crate) struct Dropout {
    pub p: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        match &mut self.rng {
            Some(rng) if self.p > 0.0 => g.dropout(x, self.p, rng),
            _ => x,
        }
    }
}

pub(crate) fn init_matrix<R: Rng>(p: &mut ParamSet<f32>, name: &str, rows: usize, cols: usize, rng: &mut R) -> ParamId {
    p.normal(name, &[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(p: &mut ParamSet<f32>, name: &str, i: usize, o: usize, rng: &mut R) -> Self {
        Self {
            w: init_matrix(p, &format!("{name}.w"), i, o, rng),
            b: p.zeros(format!("{name}.b"), &[o]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(p: &mut ParamSet<f32>, name: &str, i: usize, h: usize, o: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(p, &format!("{name}.l1"), i, h, rng),
            l2: Linear::new(p, &format!("{name}.l2"), h, o, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.gelu(h);
        self.l2.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new(p: &mut ParamSet<f32>, name: &str, d: usize) -> Self {
        Self {
            g: p.ones(format!("{name}.g"), &[d]),
            b: p.zeros(format!("{name}.b"), &[d]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gamma = g.param(self.g);
        let beta = g.param(self.b);
        g.layer_norm(x, gamma, beta)
    }
}

/// Pre-LN transformer block.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    ln1: LayerNorm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

impl Block {
    pub fn new<R: Rng>(p: &mut ParamSet<f32>, name: &str, d: usize, heads: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(p, &format!("{name}.ln1"), d),
            wq: init_matrix(p, &format!("{name}.attn.wq"), d, d, rng),
            wk: init_matrix(p, &format!("{name}.attn.wk"), d, d, rng),
            wv: init_matrix(p, &format!("{name}.attn.wv"), d, d, rng),
            wo: init_matrix(p, &format!("{name}.attn.wo"), d, d, rng),
            ln2: LayerNorm::new(p, &format!("{name}.ln2"), d),
            mlp: Mlp::new(p, &format!("{name}.mlp"), d, ff, d, rng),
            heads,
        }
    }

    fn attention<T: Scalar>(&self, g: &mut Graph<T>, x: Var, mask: Option<&Arc<Vec<bool>>>) -> Var {
        let d = g.shape(x)[1];
        let dh = d / self.heads;
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax_rows(s, mask);
            outs.push(g.matmul(a, vh));
        }
        let o = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        g.matmul(o, wo)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, mask: Option<&Arc<Vec<bool>>>, drop: &mut Dropout) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attention(g, h, mask);
        let a = drop.apply(g, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let m = self.mlp.forward(g, h);
        let m = drop.apply(g, m);
        g.add(x, m)
    }
}
