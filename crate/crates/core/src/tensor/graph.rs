//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes
//! are appended in evaluation order, so walking the tape backwards visits
//! every node after all of its consumers. Parameters are borrowed from a
//! [`ParamSet`] rather than copied.
//!
//! Shape errors inside the graph are programming errors and panic; numerical
//! failures (non-finite values) are reported by [`Graph::backward`] together
//! with the name of the offending operation.

use std::sync::Arc;

use rand::Rng;

use super::ops::softmax_unchecked;
use super::{ParamId, ParamSet, Result, Scalar, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale { x: Var, c: T },
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { src: Var, idx: Vec<usize> },
    SoftmaxRows { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Dropout { x: Var, mask: Vec<T> },
    Transpose(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather_rows",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum(_) => "sum",
            Op::Dropout { .. } => "dropout",
            Op::Transpose(_) => "transpose",
        }
    }
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// Recording of one forward pass.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let one = T::one();
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (one + t);
    let d_inner = c * (one + T::from_f64(3.0) * k * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * d_inner;
    (value, deriv)
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("node value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn matmul_general(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions differ ({m}x{k} * {k2}x{n})");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out).expect("matmul shape");
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_general(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_general(a, b, false, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let cols = vx.cols();
        assert_eq!(vb.len(), cols, "add_row bias length");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape");
        self.push(value, Op::AddRow { x, bias })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape");
        self.push(value, Op::Scale { x, c })
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape");
        self.push(value, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Normalizes each row, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert!(g.len() == cols && b.len() == cols, "layer_norm affine length");
        let n = T::from_f64(cols as f64);
        let eps = T::from_f64(LN_EPS);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in vx.data().chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out).expect("shape");
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Selects rows of `src` (embedding lookup when `src` is a table).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let vs = self.value(src);
        let (rows, cols) = (vs.rows(), vs.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < rows, "gather_rows index {i} out of range {rows}");
            data.extend_from_slice(vs.row(i));
        }
        let value = Tensor::new(vec![idx.len(), cols], data).expect("shape");
        self.push(
            value,
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
        )
    }

    /// Row-wise softmax. `mask[i * cols + j] == false` hides entry `(i, j)`;
    /// hidden entries get probability exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Arc<Vec<bool>>>) -> Var {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let visible = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if visible(j) && v > max {
                    max = v;
                }
            }
            assert!(
                max > T::neg_infinity() || row.iter().any(|v| v.is_nan()),
                "softmax_rows: row {r} has no visible entry"
            );
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if visible(j) {
                    let e = (v - max).exp();
                    out[r * cols + j] = e;
                    total += e;
                }
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o = *o / total;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out).expect("shape");
        self.push(value, Op::SoftmaxRows { x })
    }

    /// Sum over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let vl = self.value(logits);
        let (rows, cols) = (vl.rows(), vl.cols());
        assert_eq!(rows, targets.len(), "cross_entropy target count");
        let mut probs = Vec::with_capacity(rows * cols);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < cols, "cross_entropy target {t} out of range {cols}");
            let row = vl.row(r);
            let p = softmax_unchecked(row);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[t];
            probs.extend(p);
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, cols], data).expect("shape");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                v.cols()
            })
            .collect();
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, cols], data).expect("shape");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let cols = vx.cols();
        assert!(start + len <= vx.rows(), "slice_rows out of range");
        let data = vx.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data).expect("shape");
        self.push(value, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data).expect("shape");
        self.push(value, Op::SliceCols { x, start })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = vx.data()[r * cols + c];
            }
        }
        let value = Tensor::new(vec![cols, rows], data).expect("shape");
        self.push(value, Op::Transpose(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let vx = self.value(x);
        let mask: Vec<T> = (0..vx.len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape");
        self.push(value, Op::Dropout { x, mask })
    }

    /// Reverse pass from a scalar node. Returns one gradient per parameter of
    /// the borrowed [`ParamSet`]; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(v) = &node.value {
                if !v.is_finite() {
                    return Err(TensorError::NonFinite {
                        op: node.op.name(),
                        node: i,
                    });
                }
            }
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![T::one()]).expect("shape"));
        let mut out: Vec<Tensor<T>> = self
            .params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => out[id.0].add_assign(&g),
                op => self.backprop_op(op, Var(i), &g, &mut grads),
            }
        }

        for (idx, g) in out.iter().enumerate() {
            if !g.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "backward",
                    node: idx,
                });
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_op(&self, op: &Op<T>, this: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut accum = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = (g.rows(), g.cols());
                let k = if *ta { va.rows() } else { va.cols() };
                // dA
                let mut da = vec![T::zero(); va.len()];
                if *ta {
                    // dA = op(B) · dCᵀ  -> [k, m]
                    T::gemm(k, n, m, vb.data(), *tb, g.data(), true, T::zero(), &mut da);
                } else {
                    // dA = dC · op(B)ᵀ -> [m, k]
                    T::gemm(m, n, k, g.data(), false, vb.data(), !*tb, T::zero(), &mut da);
                }
                let mut db = vec![T::zero(); vb.len()];
                if *tb {
                    // dB = dCᵀ · op(A) -> [n, k]
                    T::gemm(n, m, k, g.data(), true, va.data(), *ta, T::zero(), &mut db);
                } else {
                    // dB = op(A)ᵀ · dC -> [k, n]
                    T::gemm(k, m, n, va.data(), !*ta, g.data(), false, T::zero(), &mut db);
                }
                let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
                accum(*a, Tensor::new(sa, da).expect("shape"));
                accum(*b, Tensor::new(sb, db).expect("shape"));
            }
            Op::Add(a, b) => {
                accum(*a, g.clone());
                accum(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                let gb = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                accum(*a, Tensor::new(g.shape().to_vec(), ga).expect("shape"));
                accum(*b, Tensor::new(g.shape().to_vec(), gb).expect("shape"));
            }
            Op::AddRow { x, bias } => {
                let cols = g.cols();
                let mut gb = vec![T::zero(); cols];
                for row in g.data().chunks(cols) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accum(*x, g.clone());
                let shape = self.value(*bias).shape().to_vec();
                accum(*bias, Tensor::new(shape, gb).expect("shape"));
            }
            Op::Scale { x, c } => {
                let data = g.data().iter().map(|&v| v * *c).collect();
                accum(*x, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                accum(*x, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&d, &v)| d * gelu_parts(v).1)
                    .collect();
                accum(*x, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Tanh(x) => {
                let y = self.value(this);
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&d, &t)| d * (T::one() - t * t))
                    .collect();
                accum(*x, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = g.cols();
                let gam = self.value(*gamma).data();
                let n = T::from_f64(cols as f64);
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                let mut dx = vec![T::zero(); g.len()];
                for (r, grow) in g.data().chunks(cols).enumerate() {
                    let h = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..cols {
                        dgamma[j] += grow[j] * h[j];
                        dbeta[j] += grow[j];
                        let dh = grow[j] * gam[j];
                        mean_d += dh;
                        mean_dh += dh * h[j];
                    }
                    mean_d = mean_d / n;
                    mean_dh = mean_dh / n;
                    for j in 0..cols {
                        let dh = grow[j] * gam[j];
                        dx[r * cols + j] = rstd[r] * (dh - mean_d - h[j] * mean_dh);
                    }
                }
                accum(*x, Tensor::new(g.shape().to_vec(), dx).expect("shape"));
                let gs = self.value(*gamma).shape().to_vec();
                let bs = self.value(*beta).shape().to_vec();
                accum(*gamma, Tensor::new(gs, dgamma).expect("shape"));
                accum(*beta, Tensor::new(bs, dbeta).expect("shape"));
            }
            Op::Gather { src, idx } => {
                let vs = self.value(*src);
                let cols = vs.cols();
                let mut d = vec![T::zero(); vs.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        d[i * cols + j] += g.data()[r * cols + j];
                    }
                }
                accum(*src, Tensor::new(vs.shape().to_vec(), d).expect("shape"));
            }
            Op::SoftmaxRows { x } => {
                let y = self.value(this);
                let cols = y.cols();
                let mut d = vec![T::zero(); y.len()];
                for r in 0..y.rows() {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accum(*x, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.data()[0];
                let vl = self.value(*logits);
                let cols = vl.cols();
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] = d[r * cols + t] - scale;
                }
                accum(*logits, Tensor::new(vl.shape().to_vec(), d).expect("shape"));
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let n = vp.rows() * cols;
                    let data = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    accum(p, Tensor::new(vp.shape().to_vec(), data).expect("shape"));
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    accum(p, Tensor::new(vp.shape().to_vec(), data).expect("shape"));
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let cols = vx.cols();
                let mut d = vec![T::zero(); vx.len()];
                d[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                accum(*x, Tensor::new(vx.shape().to_vec(), d).expect("shape"));
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let cols = vx.cols();
                let w = g.cols();
                let mut d = vec![T::zero(); vx.len()];
                for r in 0..vx.rows() {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                accum(*x, Tensor::new(vx.shape().to_vec(), d).expect("shape"));
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                accum(*x, Tensor::full(vx.shape(), g.data()[0]));
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                accum(*x, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Transpose(x) => {
                let (rows, cols) = (g.rows(), g.cols());
                let mut d = vec![T::zero(); g.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        d[c * rows + r] = g.data()[r * cols + c];
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                accum(*x, Tensor::new(shape, d).expect("shape"));
            }
        }
    }
}

/// One gradient tensor per parameter, in [`ParamSet`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        let c = T::from_f64(c);
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v = *v * c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }
}
