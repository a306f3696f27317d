//! Central finite-difference verification of reverse-mode gradients.
//!
//! The numerical side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it checks.

use super::{Graph, ParamId, ParamSet, Result, Scalar, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that entries whose true
/// gradient is ~0 are judged by absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn eval<T: Scalar>(params: &ParamSet<T>, f: &impl Fn(&mut Graph<T>) -> Var) -> f64 {
    let mut g = Graph::new(params);
    let out = f(&mut g);
    g.value(out).data()[0].to_f64()
}

/// Compares `backward` against central differences with step `h`.
///
/// At most `max_entries` entries per parameter are probed (evenly strided),
/// which keeps checks of larger models affordable.
pub fn check_gradients<T: Scalar>(
    params: &ParamSet<T>,
    h: f64,
    max_entries: usize,
    f: impl Fn(&mut Graph<T>) -> Var,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut g = Graph::new(params);
        let loss = f(&mut g);
        g.backward(loss)?
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    for id in params.ids().collect::<Vec<ParamId>>() {
        let n = params.get(id).len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + T::from_f64(h);
            let plus = eval(&probe, &f);
            probe.get_mut(id).data_mut()[i] = orig - T::from_f64(h);
            let minus = eval(&probe, &f);
            probe.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).data()[i].to_f64();
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn params(shapes: &[(&str, &[usize])], seed: u64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        for (name, shape) in shapes {
            p.normal(*name, shape, 0.8, &mut rng);
        }
        p
    }

    fn assert_ok(report: GradCheckReport) {
        assert!(
            report.max_rel_error < TOL,
            "max rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }

    /// Reduces a matrix to a scalar with non-uniform weights so that every
    /// output entry matters differently.
    fn weighted_sum(g: &mut Graph<f64>, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
        let w = g.input(w);
        let y = g.mul(x, w);
        g.sum(y)
    }

    #[test]
    fn linear_case_is_analytic() {
        let mut p = ParamSet::<f64>::new();
        let w = p.insert("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let unused = p.insert("unused", Tensor::full(&[2, 2], 3.0));
        let mut g = Graph::new(&p);
        let wv = g.param(w);
        let x = g.input(Tensor::new(vec![2, 1], vec![0.5, -2.0]).unwrap());
        let y = g.matmul(wv, x);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        // d/dW sum(W x) = 1 · xᵀ
        assert_eq!(grads.get(w).data(), &[0.5, -2.0, 0.5, -2.0, 0.5, -2.0]);
        assert!(grads.get(unused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_variants() {
        let p = params(&[("a", &[3, 4]), ("b", &[4, 5]), ("c", &[5, 4])], 1);
        let (a, b, c) = (p.id("a").unwrap(), p.id("b").unwrap(), p.id("c").unwrap());
        assert_ok(
            check_gradients(&p, H, 64, |g| {
                let (a, b, c) = (g.param(a), g.param(b), g.param(c));
                let ab = g.matmul(a, b);
                let abc = g.matmul(ab, c);
                let nt = g.matmul_nt(abc, a);
                let t = g.transpose(nt);
                weighted_sum(g, t)
            })
            .unwrap(),
        );
    }

    #[test]
    fn elementwise_ops() {
        let p = params(&[("x", &[3, 5]), ("y", &[3, 5]), ("b", &[5])], 2);
        let (x, y, b) = (p.id("x").unwrap(), p.id("y").unwrap(), p.id("b").unwrap());
        assert_ok(
            check_gradients(&p, H, 64, |g| {
                let (x, y, b) = (g.param(x), g.param(y), g.param(b));
                let s = g.add(x, y);
                let m = g.mul(s, x);
                let r = g.add_row(m, b);
                let a = g.gelu(r);
                let t = g.tanh(a);
                let sc = g.scale(t, -1.7);
                let rl = g.relu(y);
                let out = g.add(sc, rl);
                weighted_sum(g, out)
            })
            .unwrap(),
        );
    }

    #[test]
    fn layer_norm_op() {
        let p = params(&[("x", &[4, 6]), ("g", &[6]), ("b", &[6])], 3);
        let (x, gm, b) = (p.id("x").unwrap(), p.id("g").unwrap(), p.id("b").unwrap());
        assert_ok(
            check_gradients(&p, H, 64, |g| {
                let (x, gm, b) = (g.param(x), g.param(gm), g.param(b));
                let y = g.layer_norm(x, gm, b);
                weighted_sum(g, y)
            })
            .unwrap(),
        );
    }

    #[test]
    fn gather_concat_slice() {
        let p = params(&[("table", &[5, 3]), ("z", &[2, 3]), ("w", &[5, 2])], 4);
        let (t, z, w) = (p.id("table").unwrap(), p.id("z").unwrap(), p.id("w").unwrap());
        assert_ok(
            check_gradients(&p, H, 64, |g| {
                let (t, z, w) = (g.param(t), g.param(z), g.param(w));
                let e = g.gather_rows(t, &[4, 0, 4, 2]);
                let c = g.concat_rows(&[e, z]);
                let s = g.slice_rows(c, 1, 4);
                let sc = g.slice_cols(s, 1, 2);
                let wide = g.concat_cols(&[s, sc]);
                let r = g.slice_rows(w, 0, 4);
                let both = g.concat_cols(&[wide, r]);
                weighted_sum(g, both)
            })
            .unwrap(),
        );
    }

    #[test]
    fn masked_softmax_and_cross_entropy() {
        let p = params(&[("x", &[3, 4]), ("l", &[3, 5])], 5);
        let (x, l) = (p.id("x").unwrap(), p.id("l").unwrap());
        let mask = Arc::new(vec![
            true, false, true, true, //
            true, true, true, true, //
            false, false, true, false,
        ]);
        assert_ok(
            check_gradients(&p, H, 64, |g| {
                let (x, l) = (g.param(x), g.param(l));
                let s = g.softmax_rows(x, Some(&mask));
                let a = weighted_sum(g, s);
                let ce = g.cross_entropy(l, &[4, 0, 2]);
                let a2 = g.scale(a, 0.3);
                let both = g.concat_rows(&[a2, ce]);
                g.sum(both)
            })
            .unwrap(),
        );
    }

    #[test]
    fn masked_entries_are_exact_zero() {
        let p = ParamSet::<f64>::new();
        let mut g = Graph::new(&p);
        let x = g.input(Tensor::new(vec![1, 3], vec![5.0, 1.0, 2.0]).unwrap());
        let mask = Arc::new(vec![false, true, true]);
        let s = g.softmax_rows(x, Some(&mask));
        assert_eq!(g.value(s).data()[0], 0.0);
    }

    #[test]
    fn dropout_backward_uses_mask() {
        let p = params(&[("x", &[4, 4])], 6);
        let x = p.id("x").unwrap();
        assert_ok(
            check_gradients(&p, H, 64, |g| {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let xv = g.param(x);
                let d = g.dropout(xv, 0.5, &mut rng);
                weighted_sum(g, d)
            })
            .unwrap(),
        );
    }

    #[test]
    fn non_finite_is_reported_with_op() {
        let mut p = ParamSet::<f64>::new();
        let w = p.insert("w", Tensor::new(vec![1, 2], vec![1e308, 1e308]).unwrap());
        let mut g = Graph::new(&p);
        let wv = g.param(w);
        let y = g.add(wv, wv);
        let s = g.sum(y);
        let err = g.backward(s).unwrap_err();
        assert!(matches!(err, crate::tensor::TensorError::NonFinite { op: "add", .. }), "{err}");
    }

    #[test]
    fn random_two_layer_network() {
        let p = params(&[("w1", &[2, 4]), ("b1", &[4]), ("w2", &[4, 2])], 7);
        assert_eq!(p.num_scalars(), 20);
        let (w1, b1, w2) = (p.id("w1").unwrap(), p.id("b1").unwrap(), p.id("w2").unwrap());
        let report = check_gradients(&p, H, 64, |g| {
            let x = g.input(Tensor::new(vec![3, 2], vec![0.3, -1.2, 0.8, 0.1, -0.5, 0.9]).unwrap());
            let (w1, b1, w2) = (g.param(w1), g.param(b1), g.param(w2));
            let h = g.matmul(x, w1);
            let h = g.add_row(h, b1);
            let h = g.tanh(h);
            let o = g.matmul(h, w2);
            g.cross_entropy(o, &[1, 0, 1])
        })
        .unwrap();
        assert_eq!(report.checked, 20);
        assert_ok(report);
    }
}
