use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Array::from_f64(&[1, 3], &[0.0, 0.0, 0.0]).unwrap());
    let y = g.softmax(x);
    for &p in g.value(y).data() {
        assert_eq!(p, 1.0 / 3.0);
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut store = ParamStore::<f64>::new();
    let z = store
        .add("z", Array::from_f64(&[1, 4], &[0.3, -1.2, 2.0, 0.1]).unwrap())
        .unwrap();
    let mut g = Graph::new(&store);
    let zv = g.param(z);
    let loss = g.cross_entropy(zv, &[Some(2)]).unwrap();
    let grads = g.backward(loss);
    let p = graph::softmax_rows(store.value(z));
    let dz = grads.param(z).unwrap();
    for c in 0..4 {
        let expected = p.data()[c] - if c == 2 { 1.0 } else { 0.0 };
        assert!((dz.data()[c] - expected).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_masks_rows_and_handles_empty() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let z = g.constant(Array::from_f64(&[2, 2], &[0.0, 0.0, 5.0, -5.0]).unwrap());
    let l = g.cross_entropy(z, &[Some(0), None]).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
    let empty = g.cross_entropy(z, &[None, None]).unwrap();
    assert_eq!(g.value(empty).item(), 0.0);
    assert!(g.cross_entropy(z, &[Some(2), None]).is_err());
}

#[test]
fn lstm_cell_with_zero_weights_and_state_outputs_zero() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let hidden = 3;
    let x = g.constant(Array::from_f64(&[1, 2], &[0.7, -0.4]).unwrap());
    let h = g.constant(Array::zeros(&[1, hidden]));
    let c = g.constant(Array::zeros(&[1, hidden]));
    let w_ih = g.constant(Array::zeros(&[4 * hidden, 2]));
    let w_hh = g.constant(Array::zeros(&[4 * hidden, hidden]));
    let b = g.constant(Array::zeros(&[4 * hidden]));
    let (h1, c1) = lstm_cell(&mut g, x, h, c, w_ih, w_hh, b).unwrap();
    // every gate is sigmoid(0) = 0.5 and the candidate is tanh(0) = 0
    assert!(g.value(c1).data().iter().all(|&v| v == 0.0));
    assert!(g.value(h1).data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_check_square_at_three() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Array::scalar(3.0)).unwrap();
    let f = |g: &mut Graph<'_, f64>| -> Result<Var, AutodiffError> {
        let v = g.param(x);
        let sq = g.mul(v, v)?;
        Ok(g.sum(sq))
    };
    let grads = {
        let mut g = Graph::new(&store);
        let l = f(&mut g).unwrap();
        g.backward(l).param(x).unwrap().item()
    };
    assert_eq!(grads, 6.0);
    let report = grad_check(&mut store, f, 1e-5, 0).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_affine_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", xavier_uniform(&[2, 3], 3, 2, &mut rng)).unwrap();
    let b = store.add("b", randn(&mut rng, &[2])).unwrap();
    let x = randn(&mut rng, &[4, 3]);
    let f = |g: &mut Graph<'_, f64>| -> Result<Var, AutodiffError> {
        let xv = g.constant(x.clone());
        let z = g.linear(xv, w, b)?;
        g.cross_entropy(z, &[Some(0), Some(1), Some(1), None])
    };
    let report = grad_check(&mut store, f, 1e-5, 0).unwrap();
    assert_eq!(report.coords_checked, 8);
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn grad_check_rejects_non_finite_objective() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Array::scalar(f64::NAN)).unwrap();
    let f = |g: &mut Graph<'_, f64>| -> Result<Var, AutodiffError> { Ok(g.param(x)) };
    assert!(matches!(
        grad_check(&mut store, f, 1e-5, 0),
        Err(AutodiffError::NonFinite(_))
    ));
}

/// Every kernel in one objective, checked against finite differences.
#[test]
fn grad_check_kernel_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", randn(&mut rng, &[3, 4])).unwrap();
    let m = store.add("m", randn(&mut rng, &[4, 4])).unwrap();
    let bias = store.add("bias", randn(&mut rng, &[4])).unwrap();
    let gamma = store.add("gamma", randn(&mut rng, &[4])).unwrap();
    let beta = store.add("beta", randn(&mut rng, &[4])).unwrap();
    let table = store.add("table", randn(&mut rng, &[5, 4])).unwrap();
    let w_ih = store.add("w_ih", randn(&mut rng, &[8, 4])).unwrap();
    let w_hh = store.add("w_hh", randn(&mut rng, &[8, 2])).unwrap();
    let b_l = store.add("b_l", randn(&mut rng, &[8])).unwrap();
    let u = store.add("u", randn(&mut rng, &[2, 2, 2])).unwrap();

    let f = |g: &mut Graph<'_, f64>| -> Result<Var, AutodiffError> {
        let a = g.param(a);
        let m = g.param(m);
        let am = g.matmul(a, m)?;
        let mt = g.transpose(m)?;
        let amt = g.matmul(a, mt)?;
        let bias = g.param(bias);
        let s = g.add(am, bias)?;
        let d = g.sub(s, amt)?;
        let t = g.tanh(d);
        let sg = g.sigmoid(amt);
        let p = g.mul(t, sg)?;
        let gamma = g.param(gamma);
        let beta = g.param(beta);
        let ln = g.layer_norm(p, gamma, beta, 1e-5)?;
        let r = g.relu(ln);
        let e = g.embedding(table, &[4, 0, 4])?;
        let both = g.concat_cols(&[r, e])?;
        let sl = g.slice_cols(both, 2, 4)?;
        let stacked = g.stack_rows(&[sl, e])?;
        let pooled = g.mean_groups(stacked, &[vec![0, 1], vec![2, 3, 4, 5], vec![5]])?;
        let sm = g.softmax(pooled);
        let scaled = g.scale(sm, 3.0);
        let sel = g.select_rows(scaled, &[2, 0])?;
        let (w_ih, w_hh, b_l) = (g.param(w_ih), g.param(w_hh), g.param(b_l));
        let h0 = g.constant(Array::zeros(&[2, 2]));
        let c0 = g.constant(Array::zeros(&[2, 2]));
        let (h1, c1) = lstm_cell(g, sel, h0, c0, w_ih, w_hh, b_l)?;
        let (h2, _) = lstm_cell(g, sel, h1, c1, w_ih, w_hh, b_l)?;
        let u = g.param(u);
        let u2 = g.reshape(u, &[2, 4])?;
        let mu = g.matmul(h2, u2)?;
        let bil = g.bilinear_rows(mu, h2, 2)?;
        let ce = g.cross_entropy(bil, &[Some(1), Some(0)])?;
        let ce2 = g.cross_entropy(pooled, &[Some(3), None, Some(1)])?;
        let tot = g.add(ce, ce2)?;
        let extra = g.sum(h2);
        g.add(tot, extra)
    };
    let report = grad_check(&mut store, f, 1e-5, 3).unwrap();
    assert!(report.coords_checked >= 50);
    // roundoff alone reaches ~1e-6 on coordinates whose gradient is ~1e-5
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn concat_backward_splits_upstream_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", randn(&mut rng, &[2, 3])).unwrap();
    let b = store.add("b", randn(&mut rng, &[2, 2])).unwrap();
    let weights = randn(&mut rng, &[2, 5]);
    let mut g = Graph::new(&store);
    let (av, bv) = (g.param(a), g.param(b));
    let cat = g.concat_cols(&[av, bv]).unwrap();
    let wv = g.constant(weights);
    let prod = g.mul(cat, wv).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss);
    let up = grads.wrt(cat).unwrap();
    let (ga, gb) = (grads.param(a).unwrap(), grads.param(b).unwrap());
    for r in 0..2 {
        let mut joined = ga.row(r).to_vec();
        joined.extend_from_slice(gb.row(r));
        assert_eq!(joined, up.row(r));
    }
}

#[test]
fn shape_mismatch_names_operand_shapes() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let a = g.constant(Array::zeros(&[2, 3]));
    let b = g.constant(Array::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn non_finite_outputs_are_counted() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let a = g.constant(Array::from_f64(&[1, 2], &[f64::INFINITY, 1.0]).unwrap());
    let b = g.constant(Array::from_f64(&[1, 2], &[f64::NEG_INFINITY, 1.0]).unwrap());
    assert_eq!(g.nonfinite_count(), 0);
    g.add(a, b).unwrap();
    assert_eq!(g.nonfinite_count(), 1);
}

#[test]
fn dropout_is_identity_in_eval_and_scales_in_training() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Array::full(&[10, 10], 1.0));
    assert_eq!(g.dropout(x, 0.1), x);

    let mut t = Graph::training(&store, 5);
    let x = t.constant(Array::full(&[10, 10], 1.0));
    let y = t.dropout(x, 0.5);
    assert_ne!(x, y);
    for &v in t.value(y).data() {
        assert!(v == 0.0 || v == 2.0);
    }
}

#[test]
fn param_leaf_is_shared() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Array::scalar(2.0)).unwrap();
    assert!(store.add("p", Array::scalar(1.0)).is_err());
    let mut g = Graph::new(&store);
    let a = g.param(p);
    let b = g.param(p);
    assert_eq!(a, b);
    let prod = g.mul(a, b).unwrap();
    let grads = g.backward(prod);
    assert_eq!(grads.param(p).unwrap().item(), 4.0);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 1..40), cols in 1usize..8) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let data = values[..rows * cols].to_vec();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Array::new(vec![rows, cols], data).unwrap());
        let y = g.softmax(x);
        for r in 0..rows {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_of_copies_is_exact(v in prop::collection::vec(-1e6f64..1e6, 1..10), n in 1usize..20) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| v.clone()).collect();
        let x = g.constant(Array::from_rows(&rows).unwrap());
        let pooled = g.mean_groups(x, &[(0..n).collect()]).unwrap();
        prop_assert_eq!(g.value(pooled).data(), &v[..]);
    }

    /// The gradient of a sum of losses equals the sum of the gradients.
    #[test]
    fn gradients_are_linear_in_the_objective(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", randn(&mut rng, &[3, 4])).unwrap();
        let b = store.add("b", randn(&mut rng, &[3])).unwrap();
        let x = randn(&mut rng, &[5, 4]);
        let targets: Vec<Option<usize>> = (0..5).map(|_| Some(rng.gen_range(0..3))).collect();

        let loss_a = |g: &mut Graph<'_, f64>| -> Result<Var, AutodiffError> {
            let xv = g.constant(x.clone());
            let z = g.linear(xv, w, b)?;
            g.cross_entropy(z, &targets)
        };
        let loss_b = |g: &mut Graph<'_, f64>| -> Result<Var, AutodiffError> {
            let xv = g.constant(x.clone());
            let z = g.linear(xv, w, b)?;
            let t = g.tanh(z);
            Ok(g.sum(t))
        };
        let grad_of = |which: u8| {
            let mut g = Graph::new(&store);
            let l = match which {
                0 => loss_a(&mut g).unwrap(),
                1 => loss_b(&mut g).unwrap(),
                _ => {
                    let la = loss_a(&mut g).unwrap();
                    let lb = loss_b(&mut g).unwrap();
                    g.add(la, lb).unwrap()
                }
            };
            let grads = g.backward(l);
            grads.param(w).unwrap().clone()
        };
        let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..gs.len() {
            prop_assert!((gs.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-12);
        }
    }
}
