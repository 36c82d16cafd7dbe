use blockpool_tensor::gradcheck::{check_params, op_suite, GradCheckOptions};
use blockpool_tensor::*;

fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        store.add(*name, rng_normal(&mut rng, shape, 1.0).unwrap()).unwrap();
    }
    store
}

/// Contracts an output against fixed random weights so every output entry
/// carries a distinct gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = rng_normal(&mut SplitMix64::new(seed ^ 0xABCD), &shape, 1.0)?;
    let w = g.constant(w);
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

fn assert_grad<F>(shapes: &[(&str, &[usize])], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut store = store_with(shapes, 11);
    let ids: Vec<ParamId> = store.ids().collect();
    let opts = GradCheckOptions {
        samples_per_param: 64,
        ..Default::default()
    };
    let report = check_params(&mut store, &opts, |g, s| {
        let vars: Vec<Var> = ids.iter().map(|id| g.param(s, *id)).collect();
        let out = f(g, &vars)?;
        project(g, out, 5)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn every_op_passes_finite_differences() {
    let reports = op_suite(11).unwrap();
    assert!(reports.len() >= 30);
    for (name, r) in reports {
        assert!(r.checked > 0, "{name}");
        assert!(r.passes(1e-4), "{name}: {r:?}");
    }
}

#[test]
fn op_suite_detects_a_wrong_gradient() {
    // a loss whose tape gradient is deliberately halved
    let mut store = ParamStore::new();
    let id = store.add("a", Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap()).unwrap();
    let report = check_params(&mut store, &GradCheckOptions::default(), |g, s| {
        let a = g.param(s, id);
        let sq = g.mul(a, a)?;
        let half = g.scale(sq, 0.5);
        let k = g.constant(Tensor::new(&[1, 2], s.value(id).data().iter().map(|x| 0.5 * x * x).collect()).unwrap());
        let t = g.add(half, k)?;
        Ok(g.sum(t))
    })
    .unwrap();
    assert!(!report.passes(1e-4));
}

#[test]
fn grad_composed_graph() {
    assert_grad(&[("x", &[5, 4]), ("w", &[4, 4]), ("g", &[1, 4]), ("b", &[1, 4])], |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.tanh(h);
        let n = g.layer_norm(h, v[2], v[3], 1e-5)?;
        let s = g.matmul_nt(n, n)?;
        let p = g.softmax(s)?;
        g.matmul(p, v[0])
    });
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(2));
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
    let out = g.matmul(i, a).unwrap();
    assert_eq!(g.value(out), g.value(a));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::row_vector(vec![0.0, 0.0]));
    let s = g.softmax(a).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::new();
    let a = g.constant(rng_normal(&mut SplitMix64::new(3), &[6, 9], 4.0).unwrap());
    let s = g.softmax(a).unwrap();
    for r in 0..6 {
        let sum: f64 = g.value(s).row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut g = Graph::new();
    let x = g.constant(rng_normal(&mut SplitMix64::new(4), &[5, 16], 3.0).unwrap());
    let gain = g.constant(Tensor::full(&[1, 16], 1.0));
    let bias = g.constant(Tensor::zeros(&[1, 16]));
    let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
    for r in 0..5 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(TensorError::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn ignore_index_outside_vocab_rejected() {
    let mut g = Graph::new();
    let l = g.input(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        g.cross_entropy(l, &[0, 1], Some(3), Reduction::Mean),
        Err(TensorError::Argument { .. })
    ));
}

#[test]
fn backward_simple_square() {
    let mut g = Graph::new();
    let x = g.input(Tensor::row_vector(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    // a second pass without reset accumulates
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn independent_parameter_gets_zero_grad() {
    let mut store = ParamStore::new();
    let used = store.add("used", Tensor::row_vector(vec![1.0, 2.0])).unwrap();
    let unused = store.add("unused", Tensor::row_vector(vec![3.0])).unwrap();
    let mut g = Graph::new();
    let u = g.param(&store, used);
    let _ = g.param(&store, unused);
    let loss = g.sum(u);
    g.backward(loss).unwrap();
    g.accumulate_into(&mut store);
    assert_eq!(store.grad(unused), &[0.0]);
    assert_eq!(store.grad(used), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut g = Graph::new();
    let l = g.input(Tensor::zeros(&[3, 7]));
    let loss = g.cross_entropy(l, &[0, 4, 6], None, Reduction::Mean).unwrap();
    assert!((g.value(loss).item() - 7f64.ln()).abs() < 1e-9);
}

#[test]
fn segment_max_routes_to_argmax() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[3, 1], vec![1.0, 5.0, 2.0]).unwrap());
    let m = g.segment_max(x, &[3]).unwrap();
    assert_eq!(g.value(m).data(), &[5.0]);
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);

    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[3, 1], 2.0));
    let m = g.segment_max(x, &[3]).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn segment_max_rejects_zero_length() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 1]));
    assert!(g.segment_max(x, &[2, 0]).is_err());
}

#[test]
fn lstm_zero_weights_give_zero_state() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 3], 0.7));
    let h = g.constant(Tensor::full(&[1, 2], 0.3));
    let c = g.constant(Tensor::zeros(&[1, 2]));
    let w = LstmWeights {
        w_ih: g.constant(Tensor::zeros(&[3, 8])),
        w_hh: g.constant(Tensor::zeros(&[2, 8])),
        bias: g.constant(Tensor::zeros(&[1, 8])),
    };
    let (h2, c2) = lstm_cell(&mut g, x, h, c, &w).unwrap();
    assert!(g.value(h2).data().iter().all(|v| *v == 0.0));
    assert!(g.value(c2).data().iter().all(|v| *v == 0.0));
}

#[test]
fn lstm_saturated_forget_gate_keeps_cell() {
    // forget bias -> large: c' ≈ c + i ⊙ g
    let hdim = 3;
    let mut rng = SplitMix64::new(9);
    let x_t = rng_normal(&mut rng, &[1, 2], 1.0).unwrap();
    let c_t = rng_normal(&mut rng, &[1, hdim], 1.0).unwrap();
    let wi_t = rng_normal(&mut rng, &[2, 4 * hdim], 0.5).unwrap();
    let mut b = vec![0.0; 4 * hdim];
    b[hdim..2 * hdim].iter_mut().for_each(|v| *v = 40.0);
    let mut g = Graph::new();
    let x = g.constant(x_t.clone());
    let h = g.constant(Tensor::zeros(&[1, hdim]));
    let c = g.constant(c_t.clone());
    let w = LstmWeights {
        w_ih: g.constant(wi_t.clone()),
        w_hh: g.constant(Tensor::zeros(&[hdim, 4 * hdim])),
        bias: g.constant(Tensor::row_vector(b)),
    };
    let (_, c2) = lstm_cell(&mut g, x, h, c, &w).unwrap();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    for j in 0..hdim {
        let pre = |gate: usize| (0..2).map(|k| x_t.data()[k] * wi_t.get(k, gate * hdim + j)).sum::<f64>();
        let expected = c_t.data()[j] + sig(pre(0)) * pre(2).tanh();
        assert!((g.value(c2).data()[j] - expected).abs() < 1e-12);
    }
}

#[test]
fn lstm_input_gradient_matches_finite_differences() {
    let mut rng = SplitMix64::new(21);
    let x0 = rng_normal(&mut rng, &[1, 4], 1.0).unwrap();
    let h0 = rng_normal(&mut rng, &[1, 3], 1.0).unwrap();
    let c0 = rng_normal(&mut rng, &[1, 3], 1.0).unwrap();
    let wi = rng_normal(&mut rng, &[4, 12], 0.5).unwrap();
    let wh = rng_normal(&mut rng, &[3, 12], 0.5).unwrap();
    let bias = rng_normal(&mut rng, &[1, 12], 0.5).unwrap();
    let run = |x_val: &Tensor, grad: bool| {
        let mut g = Graph::new();
        let x = g.input(x_val.clone());
        let h = g.constant(h0.clone());
        let c = g.constant(c0.clone());
        let w = LstmWeights {
            w_ih: g.constant(wi.clone()),
            w_hh: g.constant(wh.clone()),
            bias: g.constant(bias.clone()),
        };
        let (h2, _) = lstm_cell(&mut g, x, h, c, &w).unwrap();
        let loss = g.sum(h2);
        let v = g.value(loss).item();
        if grad {
            g.backward(loss).unwrap();
            (v, g.grad(x).unwrap().to_vec())
        } else {
            (v, vec![])
        }
    };
    let (_, analytic) = run(&x0, true);
    let step = 1e-5;
    for k in 0..4 {
        let mut up = x0.clone();
        up.data_mut()[k] += step;
        let mut down = x0.clone();
        down.data_mut()[k] -= step;
        let numeric = (run(&up, false).0 - run(&down, false).0) / (2.0 * step);
        let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs());
        assert!(rel < 1e-6, "coordinate {k}: {} vs {numeric}", analytic[k]);
    }
}
