use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check;
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_grad_ok<F>(inputs: &[Tensor], tol: f64, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let reports = check(inputs, 1e-5, f).unwrap();
    for (i, r) in reports.iter().enumerate() {
        assert!(
            r.max_rel_error < tol,
            "input {i}: rel error {} (analytic {:?}, numeric {:?})",
            r.max_rel_error,
            r.analytic,
            r.numeric
        );
    }
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::new();
    let i2 = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = g.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let c = g.matmul(i2, b).unwrap();
    assert_eq!(g.value(c), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let b = g.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, AutodiffError::Dimension(_)));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [
        rand_tensor(&mut rng, vec![4, 5]),
        rand_tensor(&mut rng, vec![5, 3]),
    ];
    let w = rand_tensor(&mut rng, vec![4, 3]).data;
    assert_grad_ok(&inputs, 1e-6, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        g.weighted_sum(c, &w)
    });
}

#[test]
fn softmax_values() {
    let mut g = Graph::new();
    let x = g.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);

    let x = g.constant(vec![2], vec![1000.0, 0.0]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert!((g.value(y)[0] - 1.0).abs() < 1e-12);
    assert!(g.value(y)[1].abs() < 1e-12);
}

#[test]
fn softmax_empty_axis_is_dimension_error() {
    let mut g = Graph::new();
    let x = g.constant(vec![3, 0], vec![]).unwrap();
    assert!(matches!(g.softmax(x, 1), Err(AutodiffError::Dimension(_))));
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [rand_tensor(&mut rng, vec![6])];
    let w = rand_tensor(&mut rng, vec![6]).data;
    assert_grad_ok(&inputs, 1e-6, |g, v| {
        let s = g.softmax(v[0], 0)?;
        g.weighted_sum(s, &w)
    });
    // middle axis of a 3-d tensor
    let inputs = [rand_tensor(&mut rng, vec![2, 3, 4])];
    let w = rand_tensor(&mut rng, vec![24]).data;
    assert_grad_ok(&inputs, 1e-6, |g, v| {
        let s = g.softmax(v[0], 1)?;
        g.weighted_sum(s, &w)
    });
}

#[test]
fn bilinear_exact_at_integer_and_average_of_corners() {
    let mut g = Graph::new();
    let map = g
        .constant(
            vec![2, 2, 3],
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0],
        )
        .unwrap();
    let uv = g.constant(vec![2], vec![1.0, 0.0]).unwrap();
    let s = g.bilinear_sample(map, uv).unwrap();
    assert_eq!(g.value(s), &[1.0, 7.0]);

    let map = g.constant(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let uv = g.constant(vec![2], vec![0.5, 0.5]).unwrap();
    let s = g.bilinear_sample(map, uv).unwrap();
    assert_eq!(g.value(s), &[1.5]);

    // last row / column are reachable
    let uv = g.constant(vec![2], vec![1.0, 1.0]).unwrap();
    let s = g.bilinear_sample(map, uv).unwrap();
    assert_eq!(g.value(s), &[3.0]);
}

#[test]
fn bilinear_out_of_bounds_errors() {
    let mut g = Graph::new();
    let map = g.constant(vec![1, 2, 2], vec![0.0; 4]).unwrap();
    for (u, v) in [(-0.01, 0.0), (1.01, 0.0), (0.0, 1.5)] {
        let uv = g.constant(vec![2], vec![u, v]).unwrap();
        assert!(matches!(
            g.bilinear_sample(map, uv),
            Err(AutodiffError::OutOfBounds { .. })
        ));
    }
}

#[test]
fn bilinear_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        rand_tensor(&mut rng, vec![3, 4, 4]),
        Tensor::new(vec![2], vec![1.3, 2.7]).unwrap(),
    ];
    let w = rand_tensor(&mut rng, vec![3]).data;
    assert_grad_ok(&inputs, 1e-5, |g, v| {
        let s = g.bilinear_sample(v[0], v[1])?;
        g.weighted_sum(s, &w)
    });
}

#[test]
fn bilinear_gather_matches_single_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // [views=2, h=3, w=4, c=2]
    let hwc = rand_tensor(&mut rng, vec![2, 3, 4, 2]);
    let points = vec![
        SamplePoint {
            view: 1,
            x: 2.25,
            y: 0.5,
            row: 0,
            weight: 0.5,
        },
        SamplePoint {
            view: 0,
            x: 3.0,
            y: 2.0,
            row: 0,
            weight: 0.5,
        },
        SamplePoint {
            view: 0,
            x: 0.0,
            y: 1.75,
            row: 1,
            weight: 1.0,
        },
    ];
    let mut g = Graph::new();
    let m = g.variable(&hwc);
    let out = g.bilinear_gather(m, points.clone(), 2).unwrap();
    let got = g.value(out).to_vec();
    // Re-derive each point through the [C, H, W] op.
    let mut expected = vec![0.0; 4];
    for p in &points {
        let mut chw = vec![0.0; 2 * 3 * 4];
        for y in 0..3 {
            for x in 0..4 {
                for c in 0..2 {
                    chw[c * 12 + y * 4 + x] = hwc.data[((p.view * 3 + y) * 4 + x) * 2 + c];
                }
            }
        }
        let map = g.constant(vec![2, 3, 4], chw).unwrap();
        let uv = g.constant(vec![2], vec![p.x, p.y]).unwrap();
        let s = g.bilinear_sample(map, uv).unwrap();
        for c in 0..2 {
            expected[p.row * 2 + c] += p.weight * g.value(s)[c];
        }
    }
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }

    let w = rand_tensor(&mut rng, vec![4]).data;
    assert_grad_ok(&[hwc], 1e-6, |g, v| {
        let s = g.bilinear_gather(v[0], points.clone(), 2)?;
        g.weighted_sum(s, &w)
    });
}

#[test]
fn elementwise_values() {
    let mut g = Graph::new();
    let a = g.constant(vec![2], vec![2.0, 3.0]).unwrap();
    let b = g.constant(vec![2], vec![4.0, 5.0]).unwrap();
    let c = g.hadamard(a, b).unwrap();
    assert_eq!(g.value(c), &[8.0, 15.0]);

    let x = g.constant(vec![2, 1], vec![0.2, 0.6]).unwrap();
    let m = g.reduce_max(x, 0).unwrap();
    assert_eq!(g.value(m), &[0.6]);
}

#[test]
fn reduce_max_routes_gradient_to_first_argmax() {
    let mut g = Graph::new();
    let x = g.variable(&Tensor::new(vec![4], vec![1.0, 3.0, 3.0, 2.0]).unwrap());
    let m = g.reduce_max(x, 0).unwrap();
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, vec![3, 4]);
    let b = rand_tensor(&mut rng, vec![3, 4]);
    let row = rand_tensor(&mut rng, vec![4]);
    let w = rand_tensor(&mut rng, vec![12]).data;
    let pos = Tensor::new(vec![3, 4], a.data.iter().map(|v| v.abs() + 0.5).collect()).unwrap();

    type Unary = fn(&mut Graph, Var) -> Result<Var, AutodiffError>;
    let unaries: Vec<(&str, Unary)> = vec![
        ("scale", |g, x| Ok(g.scale(x, -1.7))),
        ("sigmoid", |g, x| Ok(g.sigmoid(x))),
        ("relu", |g, x| Ok(g.relu(x))),
        ("exp", |g, x| Ok(g.exp(x))),
        ("abs", |g, x| Ok(g.abs(x))),
        ("transpose", |g, x| g.transpose(x)),
        ("reshape", |g, x| {
            let y = g.reshape(x, vec![2, 6])?;
            g.transpose(y)
        }),
        ("log_softmax", |g, x| g.log_softmax(x, 1)),
        ("reduce_max_axis0", |g, x| g.reduce_max(x, 0)),
    ];
    for (name, f) in unaries {
        let reports = check(std::slice::from_ref(&a), 1e-5, |g, v| {
            let y = f(g, v[0])?;
            let n = g.value(y).len();
            g.weighted_sum(y, &w[..n])
        })
        .unwrap();
        assert!(
            reports[0].max_rel_error < 1e-6,
            "{name}: {}",
            reports[0].max_rel_error
        );
    }

    let reports = check(&[pos], 1e-5, |g, v| {
        let y = g.log(v[0]);
        g.weighted_sum(y, &w)
    })
    .unwrap();
    assert!(reports[0].max_rel_error < 1e-6);

    type Binary = fn(&mut Graph, Var, Var) -> Result<Var, AutodiffError>;
    let binaries: Vec<(&str, Binary)> = vec![
        ("add", |g, x, y| g.add(x, y)),
        ("sub", |g, x, y| g.sub(x, y)),
        ("hadamard", |g, x, y| g.hadamard(x, y)),
        ("concat0", |g, x, y| g.concat(&[x, y], 0)),
        ("concat1", |g, x, y| g.concat(&[x, y], 1)),
    ];
    for (name, f) in binaries {
        let reports = check(&[a.clone(), b.clone()], 1e-5, |g, v| {
            let y = f(g, v[0], v[1])?;
            let n = g.value(y).len();
            let ww: Vec<f64> = (0..n).map(|i| w[i % w.len()] + 0.01 * i as f64).collect();
            g.weighted_sum(y, &ww)
        })
        .unwrap();
        for r in reports {
            assert!(r.max_rel_error < 1e-6, "{name}: {}", r.max_rel_error);
        }
    }

    assert_grad_ok(&[a.clone(), row], 1e-6, |g, v| {
        let y = g.add_row(v[0], v[1])?;
        g.weighted_sum(y, &w)
    });
    assert_grad_ok(std::slice::from_ref(&a), 1e-6, |g, v| {
        let y = g.slice(v[0], 1, 1, 2)?;
        let z = g.gather_rows(y, &[2, 0, 2])?;
        let p = g.pick(z, &[1, 0, 1])?;
        g.weighted_sum(p, &w[..3])
    });
    assert_grad_ok(std::slice::from_ref(&a), 1e-6, |g, v| {
        let y = g.reduce_max(v[0], 1)?;
        g.weighted_sum(y, &w[..3])
    });
    assert_grad_ok(std::slice::from_ref(&a), 1e-6, |g, v| g.reduce_mean(v[0]));
    assert_grad_ok(std::slice::from_ref(&a), 1e-6, |g, v| Ok(g.sum(v[0])));
}

#[test]
fn loss_op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, vec![10]);
    let x = Tensor::new(vec![10], x.data.iter().map(|v| v * 3.0).collect()).unwrap();
    let t: Vec<f64> = (0..10)
        .map(|i| if i % 3 == 0 { 1.0 } else { 0.0 })
        .collect();
    let soft: Vec<f64> = (0..10).map(|i| i as f64 / 9.0).collect();
    let wt: Vec<f64> = (0..10).map(|i| 0.5 + i as f64 * 0.1).collect();
    assert_grad_ok(std::slice::from_ref(&x), 1e-6, |g, v| {
        let l = g.sigmoid_focal(v[0], &t, 0.25, 2.0)?;
        Ok(g.sum(l))
    });
    assert_grad_ok(std::slice::from_ref(&x), 1e-6, |g, v| {
        let l = g.sigmoid_focal(v[0], &soft, 0.25, 2.0)?;
        Ok(g.sum(l))
    });
    assert_grad_ok(std::slice::from_ref(&x), 1e-6, |g, v| {
        let l = g.bce_with_logits(v[0], &soft)?;
        Ok(g.sum(l))
    });
    assert_grad_ok(std::slice::from_ref(&x), 1e-6, |g, v| {
        let l = g.smooth_l1(v[0], &soft, &wt, 1.0)?;
        Ok(g.sum(l))
    });
}

#[test]
fn avg_pool_gradient_and_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, vec![2, 4, 2, 3]);
    let mut g = Graph::new();
    let v = g.variable(&x);
    let p = g.avg_pool2x2(v).unwrap();
    assert_eq!(g.shape(p), &[2, 2, 1, 3]);
    let d = &x.data;
    let expected = (d[0] + d[3] + d[6] + d[9]) / 4.0;
    assert!((g.value(p)[0] - expected).abs() < 1e-15);
    let w = rand_tensor(&mut rng, vec![12]).data;
    assert_grad_ok(&[x], 1e-6, |g, v| {
        let p = g.avg_pool2x2(v[0])?;
        g.weighted_sum(p, &w)
    });
}

#[test]
fn backward_simple_cases_and_accumulation() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());

    let mut g = Graph::new();
    let p = g.param(&store, "p").unwrap();
    let s = g.sum(p);
    g.backward_into(s, &mut store).unwrap();
    assert_eq!(
        store.get("p").unwrap().grad.as_deref(),
        Some(&[1.0, 1.0, 1.0][..])
    );

    // a second call accumulates
    g.backward_into(s, &mut store).unwrap();
    assert_eq!(
        store.get("p").unwrap().grad.as_deref(),
        Some(&[2.0, 2.0, 2.0][..])
    );

    store.zero_grad();
    let mut g = Graph::new();
    let p = g.param(&store, "p").unwrap();
    let sq = g.hadamard(p, p).unwrap();
    let s = g.sum(sq);
    g.backward_into(s, &mut store).unwrap();
    assert_eq!(
        store.get("p").unwrap().grad.as_deref(),
        Some(&[2.0, -4.0, 1.0][..])
    );
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.variable(&Tensor::zeros(vec![2]));
    assert!(matches!(g.backward(x), Err(AutodiffError::Contract(_))));
}

#[test]
fn fan_out_accumulates_k_fold() {
    let t = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
    let mut g = Graph::new();
    let x = g.variable(&t);
    let e = g.exp(x);
    let mut total = g.sum(e);
    for _ in 0..3 {
        let e = g.exp(x);
        let s = g.sum(e);
        total = g.add(total, s).unwrap();
    }
    let grads = g.backward(total).unwrap();
    let fan = grads.wrt(x).unwrap().to_vec();

    let mut g = Graph::new();
    let x = g.variable(&t);
    let e = g.exp(x);
    let s = g.sum(e);
    let single = g.backward(s).unwrap().wrt(x).unwrap().to_vec();
    for (a, b) in fan.iter().zip(&single) {
        assert!((a - 4.0 * b).abs() < 1e-14);
    }
}

#[test]
fn adamw_zero_gradient_cases() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
    store.get_mut("w").unwrap().grad = Some(vec![0.0, 0.0]);
    let mut opt = AdamW::new(2e-4, 0.0);
    opt.step(&mut store).unwrap();
    assert_eq!(store.get("w").unwrap().data, vec![1.5, -2.0]);

    let mut opt = AdamW::new(2e-4, 0.01);
    opt.step(&mut store).unwrap();
    let f = 1.0 - 2e-6;
    assert_eq!(store.get("w").unwrap().data, vec![1.5 * f, -2.0 * f]);
}

#[test]
fn adamw_missing_gradient_is_contract_error() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::zeros(vec![2]));
    let mut opt = AdamW::new(1e-3, 0.0);
    assert!(matches!(
        opt.step(&mut store),
        Err(AutodiffError::Contract(_))
    ));
}

#[test]
fn adamw_descends_convex_quadratic() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap());
    let mut opt = AdamW::new(0.05, 0.01);
    let mut last = 1.0f64;
    for _ in 0..10 {
        store.zero_grad();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let sq = g.hadamard(w, w).unwrap();
        let l = g.sum(sq);
        g.backward_into(l, &mut store).unwrap();
        opt.step(&mut store).unwrap();
        let now = store.get("w").unwrap().data[0].abs();
        assert!(now < last);
        last = now;
    }
}

#[test]
fn checkpoint_round_trip_with_optimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    store.add_linear("layer", 3, 2, &mut rng);
    for (_, t) in store.iter_mut() {
        t.grad = Some(vec![0.1; t.len()]);
    }
    let mut opt = AdamW::new(1e-3, 0.01);
    opt.step(&mut store).unwrap();

    let doc = to_json(&store, Some(&opt));
    assert!(doc.get(OPTIM_KEY).is_some());
    assert!(doc["layer.w"]["shape"].is_array());
    let text = serde_json::to_string(&doc).unwrap();
    let (loaded, loaded_opt) = from_json(&serde_json::from_str(&text).unwrap()).unwrap();
    for (name, t) in store.iter() {
        assert_eq!(loaded.get(name).unwrap().data, t.data);
        assert_eq!(loaded.get(name).unwrap().shape, t.shape);
    }
    assert_eq!(loaded_opt.unwrap(), opt);
    check_layout(&store, &loaded).unwrap();
}

#[test]
fn checkpoint_layout_errors_list_offending_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut a = ParamStore::new();
    a.add_linear("x", 2, 2, &mut rng);
    let mut b = ParamStore::new();
    b.add_linear("x", 2, 3, &mut rng);
    b.insert("extra", Tensor::zeros(vec![1]));
    let msg = check_layout(&a, &b).unwrap_err().to_string();
    assert!(msg.contains("x.w"), "{msg}");
    assert!(msg.contains("extra"), "{msg}");
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let n = xs.len();
            let mut g = Graph::new();
            let x = g.constant(vec![n], xs.clone()).unwrap();
            let y = g.softmax(x, 0).unwrap();
            let s: f64 = g.value(y).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(g.value(y).iter().all(|v| *v >= 0.0));
            let shifted: Vec<f64> = xs.iter().map(|v| v + shift).collect();
            let x2 = g.constant(vec![n], shifted).unwrap();
            let y2 = g.softmax(x2, 0).unwrap();
            for (a, b) in g.value(y).iter().zip(g.value(y2)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn bilinear_is_linear_along_grid_axes(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            col in 0usize..3,
            row in 0usize..3,
            t in 0.0f64..1.0,
        ) {
            let mut g = Graph::new();
            let map = g.constant(vec![1, 3, 4], vals.clone()).unwrap();
            let uv = g.constant(vec![2], vec![col as f64 + t, row as f64]).unwrap();
            let s = g.bilinear_sample(map, uv).unwrap();
            let a = vals[row * 4 + col];
            let b = vals[row * 4 + col + 1];
            prop_assert!((g.value(s)[0] - (a + t * (b - a))).abs() < 1e-12);
        }
    }
}
