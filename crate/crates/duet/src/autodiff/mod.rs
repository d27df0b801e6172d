//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Graphs are rebuilt per minibatch (define-by-run). Parameters live in a
//! [`ParamStore`] and are pulled into a graph by name; [`Graph::backward`]
//! fills per-parameter gradients which [`ParamStore::sgd_step`] consumes.

mod array;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;

pub use array::Array;
pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use gradcheck::{
    finite_diff_check, rel_err, CheckMode, GradCheckError, GradCheckReport, LossEval, ParamCheck,
};
pub use graph::{sigmoid, Graph, GraphError, NodeId, Op};
pub use params::{ParamError, ParamStore, StepStats};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn rand_array(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Array {
        let n = shape.iter().product();
        Array::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(Array::row(vec![1.0, 2.0]));
        let b = g.constant(Array::row(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn log_softmax_symmetry() {
        let mut g = Graph::new();
        let a = g.constant(Array::row(vec![0.0, 0.0]));
        let c = g.log_softmax(a).unwrap();
        let ln2 = 2.0f64.ln();
        assert!((g.value(c).data()[0] + ln2).abs() < 1e-15);
        assert!((g.value(c).data()[1] + ln2).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let a = g.constant(rand_array(vec![5, 9], &mut rng));
        let c = g.log_softmax(a).unwrap();
        for r in 0..5 {
            let sum: f64 = g.value(c).data()[r * 9..(r + 1) * 9].iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", r, sum);
        }
    }

    #[test]
    fn matmul_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_array(vec![2, 3], &mut rng);
        let b = rand_array(vec![3, 2], &mut rng);
        let mut g = Graph::new();
        let na = g.constant(a.clone());
        let nb = g.constant(b.clone());
        let c = g.matmul(na, nb).unwrap();
        // independent per-cell dot products
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|p| a.data()[i * 3 + p] * b.data()[p * 2 + j]).sum();
                assert!((g.value(c).data()[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Array::zeros(vec![2, 3]));
        let b = g.constant(Array::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "got {msg}");
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param("x", Array::new(vec![2, 3], vec![0.5; 6]));
        let loss = g.reduce_sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param("x", Array::new(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.reduce_sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", Array::new(vec![1, 3], vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.backward(x), Err(GraphError::NonScalarLoss { .. })));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param("x", Array::scalar(2.0));
        let unused = g.param("unused", Array::row(vec![1.0, 1.0]));
        let loss = g.mul(x, x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
    }

    /// Build a small 3-layer net and compare backward against central
    /// differences, driven through `finite_diff_check`.
    #[test]
    fn three_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new(11);
        store.init_uniform("w1", vec![4, 6], 4, &mut rng).unwrap();
        store.init_uniform("w2", vec![6, 5], 6, &mut rng).unwrap();
        store.init_uniform("w3", vec![5, 1], 5, &mut rng).unwrap();
        let input = rand_array(vec![3, 4], &mut rng);

        let eval = |store: &ParamStore, want_grads: bool| -> Result<LossEval, String> {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let w1 = g.param("w1", store.get("w1").unwrap().clone());
            let w2 = g.param("w2", store.get("w2").unwrap().clone());
            let w3 = g.param("w3", store.get("w3").unwrap().clone());
            let h1m = g.matmul(x, w1).map_err(|e| e.to_string())?;
            let h1 = g.tanh(h1m).map_err(|e| e.to_string())?;
            let h2m = g.matmul(h1, w2).map_err(|e| e.to_string())?;
            let h2 = g.sigmoid(h2m).map_err(|e| e.to_string())?;
            let h3 = g.matmul(h2, w3).map_err(|e| e.to_string())?;
            let sq = g.mul(h3, h3).map_err(|e| e.to_string())?;
            let loss = g.reduce_sum(sq).map_err(|e| e.to_string())?;
            let value = g.value(loss).item();
            let mut grads = BTreeMap::new();
            if want_grads {
                g.backward(loss).map_err(|e| e.to_string())?;
                for (name, grad) in g.param_grads() {
                    grads.insert(name.to_string(), grad.clone());
                }
            }
            Ok(LossEval { value, grads })
        };

        let report =
            finite_diff_check(eval, &mut store, 1e-5, 1e-4, CheckMode::Exhaustive).unwrap();
        assert!(report.passed(), "{}", report.to_lines());
    }

    /// Per-op gradient checks on random inputs.
    #[test]
    fn every_op_matches_finite_differences() {
        let ops: Vec<(&str, fn(&mut Graph, NodeId) -> NodeId)> = vec![
            ("relu", |g, x| {
                let y = g.relu(x).unwrap();
                g.reduce_sum(y).unwrap()
            }),
            ("sigmoid", |g, x| {
                let y = g.sigmoid(x).unwrap();
                g.reduce_sum(y).unwrap()
            }),
            ("tanh", |g, x| {
                let y = g.tanh(x).unwrap();
                g.reduce_sum(y).unwrap()
            }),
            ("exp", |g, x| {
                let y = g.exp(x).unwrap();
                g.reduce_sum(y).unwrap()
            }),
            ("log_softmax", |g, x| {
                let y = g.log_softmax(x).unwrap();
                let w = g.constant(Array::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()));
                let m = g.mul(y, w).unwrap();
                g.reduce_sum(m).unwrap()
            }),
            ("logsumexp", |g, x| {
                let y = g.logsumexp(x).unwrap();
                g.reduce_sum(y).unwrap()
            }),
            ("rms_norm", |g, x| {
                let y = g.rms_norm(x, 1e-6).unwrap();
                let w = g.constant(Array::new(vec![3, 4], (0..12).map(|i| 0.3 - i as f64 * 0.05).collect()));
                let m = g.mul(y, w).unwrap();
                g.reduce_sum(m).unwrap()
            }),
            ("slice", |g, x| {
                let y = g.slice(x, vec![1, 1], vec![3, 3]).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.reduce_sum(sq).unwrap()
            }),
            ("reshape", |g, x| {
                let y = g.reshape(x, vec![2, 6]).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.reduce_sum(sq).unwrap()
            }),
            ("concat", |g, x| {
                let y = g.concat(1, &[x, x]).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.reduce_sum(sq).unwrap()
            }),
            ("outer_row_sum", |g, x| {
                let y = g.outer_row_sum(x, x).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.reduce_sum(sq).unwrap()
            }),
            ("gather_cols", |g, x| {
                let y = g.gather_cols(x, vec![0, 2, 3]).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.reduce_sum(sq).unwrap()
            }),
            ("add_col_broadcast", |g, x| {
                let c = g.constant(Array::new(vec![3, 1], vec![0.4, -0.3, 0.9]));
                let y = g.add(x, c).unwrap();
                let m = g.mul(y, y).unwrap();
                g.reduce_sum(m).unwrap()
            }),
            ("mul_col_broadcast", |g, x| {
                let c = g.constant(Array::new(vec![3, 1], vec![0.4, -0.3, 0.9]));
                let y = g.mul(x, c).unwrap();
                let m = g.mul(y, y).unwrap();
                g.reduce_sum(m).unwrap()
            }),
        ];

        for (name, build) in ops {
            // relu kink: keep entries away from zero
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let data: Vec<f64> = (0..12)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.2..1.4);
                    if rng.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let mut store = ParamStore::new(0);
            store.insert("x", Array::new(vec![3, 4], data)).unwrap();
            let eval = |store: &ParamStore, want_grads: bool| -> Result<LossEval, String> {
                let mut g = Graph::new();
                let x = g.param("x", store.get("x").unwrap().clone());
                let loss = build(&mut g, x);
                let value = g.value(loss).item();
                let mut grads = BTreeMap::new();
                if want_grads {
                    g.backward(loss).map_err(|e| e.to_string())?;
                    for (n, grad) in g.param_grads() {
                        grads.insert(n.to_string(), grad.clone());
                    }
                }
                Ok(LossEval { value, grads })
            };
            let report =
                finite_diff_check(eval, &mut store, 1e-5, 1e-4, CheckMode::Exhaustive).unwrap();
            assert!(report.passed(), "op {name}: {}", report.to_lines());
        }
    }

    #[test]
    fn matmul_add_mul_embedding_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new(5);
        store.insert("a", rand_array(vec![2, 3], &mut rng)).unwrap();
        store.insert("b", rand_array(vec![3, 4], &mut rng)).unwrap();
        store.insert("bias", rand_array(vec![4], &mut rng)).unwrap();
        store.insert("table", rand_array(vec![5, 4], &mut rng)).unwrap();
        let eval = |store: &ParamStore, want_grads: bool| -> Result<LossEval, String> {
            let mut g = Graph::new();
            let a = g.param("a", store.get("a").unwrap().clone());
            let b = g.param("b", store.get("b").unwrap().clone());
            let bias = g.param("bias", store.get("bias").unwrap().clone());
            let table = g.param("table", store.get("table").unwrap().clone());
            let mm = g.matmul(a, b).map_err(|e| e.to_string())?;
            let biased = g.add(mm, bias).map_err(|e| e.to_string())?;
            let emb = g.embed(table, vec![0, 3, 3]).map_err(|e| e.to_string())?;
            let esum = g.reduce_sum(emb).map_err(|e| e.to_string())?;
            let scaled = g.mul(biased, biased).map_err(|e| e.to_string())?;
            let s1 = g.reduce_sum(scaled).map_err(|e| e.to_string())?;
            let loss = g.add(s1, esum).map_err(|e| e.to_string())?;
            let value = g.value(loss).item();
            let mut grads = BTreeMap::new();
            if want_grads {
                g.backward(loss).map_err(|e| e.to_string())?;
                for (n, grad) in g.param_grads() {
                    grads.insert(n.to_string(), grad.clone());
                }
            }
            Ok(LossEval { value, grads })
        };
        let report = finite_diff_check(eval, &mut store, 1e-5, 1e-4, CheckMode::Exhaustive).unwrap();
        assert!(report.passed(), "{}", report.to_lines());
    }

    #[test]
    fn quadratic_finite_diff_is_tight() {
        let mut store = ParamStore::new(0);
        store.insert("x", Array::new(vec![1, 3], vec![1.0, -2.0, 0.5])).unwrap();
        let eval = |store: &ParamStore, want_grads: bool| -> Result<LossEval, String> {
            let mut g = Graph::new();
            let x = g.param("x", store.get("x").unwrap().clone());
            let sq = g.mul(x, x).unwrap();
            let loss = g.reduce_sum(sq).unwrap();
            let value = g.value(loss).item();
            let mut grads = BTreeMap::new();
            if want_grads {
                g.backward(loss).unwrap();
                for (n, grad) in g.param_grads() {
                    grads.insert(n.to_string(), grad.clone());
                }
            }
            Ok(LossEval { value, grads })
        };
        let report = finite_diff_check(eval, &mut store, 1e-5, 1e-7, CheckMode::Exhaustive).unwrap();
        assert!(report.passed(), "quadratic check should be far under 1e-7: {}", report.to_lines());
    }

    #[test]
    fn zero_parameter_model_passes_vacuously() {
        let mut store = ParamStore::new(0);
        let eval = |_: &ParamStore, _: bool| -> Result<LossEval, String> {
            Ok(LossEval { value: 1.0, grads: BTreeMap::new() })
        };
        let report = finite_diff_check(eval, &mut store, 1e-5, 1e-4, CheckMode::Exhaustive).unwrap();
        assert!(report.per_param.is_empty());
        assert!(report.passed());
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::new();
            let x = g.param("x", rand_array(vec![4, 4], &mut rng));
            let w = g.param("w", rand_array(vec![4, 4], &mut rng));
            let mm = g.matmul(x, w).unwrap();
            let t = g.tanh(mm).unwrap();
            let n = g.rms_norm(t, 1e-6).unwrap();
            let loss = g.reduce_sum(n).unwrap();
            g.backward(loss).unwrap();
            let v = g.value(loss).item();
            let gx: Vec<f64> = g.grad(x).unwrap().data().to_vec();
            (v, gx)
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1.len(), g2.len());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sgd_clips_at_global_norm() {
        let mut store = ParamStore::new(0);
        store.insert("x", Array::new(vec![1, 2], vec![0.0, 0.0])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Array::new(vec![1, 2], vec![30.0, 40.0]));
        let stats = store.sgd_step(&grads, 1.0, 5.0).unwrap();
        assert!(stats.clipped);
        assert!((stats.grad_norm - 50.0).abs() < 1e-12);
        // clipped direction: 5 * (0.6, 0.8)
        let x = store.get("x").unwrap();
        assert!((x.data()[0] + 3.0).abs() < 1e-12);
        assert!((x.data()[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new(17);
        store.init_uniform("layer.w", vec![3, 4], 3, &mut rng).unwrap();
        store.init_uniform("layer.b", vec![4], 4, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.rng_seed(), 17);
        for (name, arr) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), arr.shape());
            for (a, b) in l.data().iter().zip(arr.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // version byte is the first byte on disk
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes[0], CHECKPOINT_VERSION);
    }

    #[test]
    fn rnnt_forward_backward_matches_finite_differences() {
        let (t_len, u) = (4usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut store = ParamStore::new(77);
        store
            .insert(
                "blank",
                Array::new(
                    vec![t_len, u + 1],
                    (0..t_len * (u + 1)).map(|_| rng.gen_range(-2.5..-0.1)).collect(),
                ),
            )
            .unwrap();
        store
            .insert(
                "label",
                Array::new(vec![t_len, u], (0..t_len * u).map(|_| rng.gen_range(-2.5..-0.1)).collect()),
            )
            .unwrap();
        let eval = |store: &ParamStore, want_grads: bool| -> Result<LossEval, String> {
            let mut g = Graph::new();
            let b = g.param("blank", store.get("blank").unwrap().clone());
            let l = g.param("label", store.get("label").unwrap().clone());
            let loss = g.rnnt_forward_backward(b, l, 0.0).map_err(|e| e.to_string())?;
            let value = g.value(loss).item();
            let mut grads = BTreeMap::new();
            if want_grads {
                g.backward(loss).map_err(|e| e.to_string())?;
                for (n, grad) in g.param_grads() {
                    grads.insert(n.to_string(), grad.clone());
                }
            }
            Ok(LossEval { value, grads })
        };
        let report = finite_diff_check(eval, &mut store, 1e-6, 1e-4, CheckMode::Exhaustive).unwrap();
        assert!(report.passed(), "{}", report.to_lines());
    }

    #[test]
    fn log_sigmoid_helpers_match_direct_math() {
        for &z in &[-30.0, -2.0, 0.0, 1.5, 30.0] {
            let mut g = Graph::new();
            let x = g.constant(Array::scalar(z));
            let ls = g.log_sigmoid(x).unwrap();
            let lo = g.log_one_minus_sigmoid(x).unwrap();
            let total = g.value(ls).item().exp() + g.value(lo).item().exp();
            assert!((total - 1.0).abs() < 1e-12, "z={z}: sum {total}");
        }
    }
}
