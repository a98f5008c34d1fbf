//! Property tests for structural invariants.

use mlaan_core::analysis::{cka_linear, EpochRecord, MetricsSeries};
use mlaan_core::checkpoint::Checkpoint;
use mlaan_core::data::{resize, subsample_indices, synth_dataset, Resize, SynthSpec};
use mlaan_core::graph::Graph;
use mlaan_core::network::{BackboneSpec, HeadConfig, Machinery, Network, PartitionPlan};
use mlaan_core::optim::{align_flat, ema_update, CosineSchedule, UpdateForm};
use mlaan_core::params::ParamStore;
use mlaan_core::tensor::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
}

/// `Q = I − 2vvᵀ/‖v‖²`, a Householder reflection.
fn householder(v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let n2: f64 = v.iter().map(|x| x * x).sum();
    let mut q = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            q[i * d + j] = f64::from(u8::from(i == j)) - 2.0 * v[i] * v[j] / n2;
        }
    }
    q
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_is_sound(blocks in 1usize..40, k in 1usize..40) {
        prop_assume!(k <= blocks);
        let plan = PartitionPlan::new(blocks, k).unwrap();
        let sizes = plan.sizes();
        prop_assert_eq!(sizes.len(), k);
        prop_assert_eq!(sizes.iter().sum::<usize>(), blocks);
        prop_assert!(sizes.iter().all(|&s| s >= 1));
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }

    #[test]
    fn too_many_modules_is_an_error(blocks in 1usize..20, extra in 1usize..5) {
        prop_assert!(PartitionPlan::new(blocks, blocks + extra).is_err());
    }

    #[test]
    fn cascade_membership_matches_window_count(k_modules in 2usize..10, span_seed in 0usize..100) {
        let span = 2 + span_seed % (k_modules - 1);
        let spec = BackboneSpec { depth: k_modules + 2, width: 1, classes: 2, input_shape: [1, 2, 2] };
        let machinery = Machinery { independent_heads: true, cascade_span: Some(span), ..Machinery::default() };
        let net = Network::<f32>::assemble(&spec, k_modules, &HeadConfig::default(), &machinery, 0).unwrap();
        prop_assert_eq!(net.cascades.len(), k_modules - span + 1);
        for j in 0..k_modules {
            // 1-based: min(j, k, K−k+1, K−j+1)
            let one = j + 1;
            let want = one.min(span).min(k_modules - span + 1).min(k_modules - one + 1);
            prop_assert_eq!(net.cascade_membership(j), want);
        }
    }

    #[test]
    fn cka_axioms(n in 3usize..12, d in 1usize..5, seed_rows in matrix(12, 5), v in prop::collection::vec(0.1f64..2.0, 5), c in 0.1f64..10.0, neg in any::<bool>()) {
        let x: Vec<f64> = seed_rows[..n * d].to_vec();
        let xt = Tensor::<f64>::from_f64(vec![n, d], &x).unwrap();
        let var: f64 = {
            let mut total = 0.0;
            for col in 0..d {
                let mean = (0..n).map(|i| x[i * d + col]).sum::<f64>() / n as f64;
                total += (0..n).map(|i| (x[i * d + col] - mean).powi(2)).sum::<f64>();
            }
            total
        };
        prop_assume!(var > 1e-6);
        prop_assert!((cka_linear(&xt, &xt).unwrap() - 1.0).abs() < 1e-10);
        let q = householder(&v[..d]);
        let xq = Tensor::from_f64(vec![n, d], &matmul(&x, &q, n, d, d)).unwrap();
        prop_assert!((cka_linear(&xt, &xq).unwrap() - 1.0).abs() < 1e-10);
        let s = if neg { -c } else { c };
        let xs = Tensor::from_f64(vec![n, d], &x.iter().map(|v| v * s).collect::<Vec<_>>()).unwrap();
        prop_assert!((cka_linear(&xt, &xs).unwrap() - 1.0).abs() < 1e-10);
        let y = Tensor::from_f64(vec![n, 2], &seed_rows[seed_rows.len() - 2 * n..]).unwrap();
        if let (Ok(a), Ok(b)) = (cka_linear(&xt, &y), cka_linear(&y, &xt)) {
            prop_assert!((a - b).abs() < 1e-10);
            prop_assert!((-1e-12..=1.0 + 1e-10).contains(&a));
            // invariance against a transformed X, not only against X itself
            let c2 = cka_linear(&xq, &y).unwrap();
            prop_assert!((a - c2).abs() < 1e-10);
        }
    }

    #[test]
    fn ema_of_a_constant_follows_closed_form(r in 0.5f64..0.999, gamma in -5.0f64..5.0, n in 1usize..400) {
        let mut lambda = Tensor::<f64>::zeros(&[1]);
        let source = Tensor::from_f64(vec![1], &[gamma]).unwrap();
        for _ in 0..n {
            ema_update(&mut lambda, &source, r).unwrap();
        }
        let want = (1.0 - r.powi(n as i32)) * gamma;
        prop_assert!((lambda.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn update_forms_agree_bitwise(theta in prop::collection::vec(-10.0f64..10.0, 1..20), r in 0.0f64..1.0, eta in 0.0f64..2.0, salt in any::<u64>()) {
        let n = theta.len();
        let lambda: Vec<f64> = (0..n).map(|i| ((salt >> (i % 60)) as f64 * 1e-3).sin()).collect();
        let grad: Vec<f64> = (0..n).map(|i| ((salt.rotate_left(i as u32)) as f64 * 1e-4).cos()).collect();
        let (mut a, mut b) = (theta.clone(), theta);
        UpdateForm::expanded().apply(&mut a, &lambda, &grad, eta, r).unwrap();
        UpdateForm::collapsed().apply(&mut b, &lambda, &grad, eta, r).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn align_flat_pads_or_truncates(values in prop::collection::vec(-1.0f64..1.0, 0..10), len in 0usize..15) {
        let out = align_flat(&values, len);
        prop_assert_eq!(out.len(), len);
        for (i, got) in out.iter().enumerate() {
            let want = values.get(i).copied().unwrap_or(0.0);
            prop_assert_eq!(got.to_bits(), want.to_bits());
        }
    }

    #[test]
    fn cosine_schedule_is_bounded_and_monotone(lr in 1e-4f64..1.0, frac in 0.0f64..1.0, total in 1u64..500) {
        let s = CosineSchedule { initial_lr: lr, min_lr: lr * frac, total_steps: total };
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let v = s.lr_at(step).unwrap();
            prop_assert!(v <= prev + 1e-15);
            prop_assert!(v >= s.min_lr - 1e-15 && v <= lr + 1e-15);
            prev = v;
        }
        prop_assert_eq!(s.lr_at(0).unwrap(), lr);
        prop_assert!(s.lr_at(total + 1).is_err());
    }

    #[test]
    fn metrics_csv_round_trips_exactly(rows in prop::collection::vec((any::<f64>(), 0.0f64..1.0, 0.0f64..10.0, any::<u32>(), 0.0f64..1e4), 0..12)) {
        let mut m = MetricsSeries::default();
        for (i, (loss, err, lr, peak, wall)) in rows.into_iter().enumerate() {
            prop_assume!(loss.is_finite());
            m.record(EpochRecord { epoch: i as u64 + 1, train_loss: loss, test_error: err, lr, peak_elements: peak as u64, wall_time_s: wall }).unwrap();
        }
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = MetricsSeries::read_csv(buf.as_slice()).unwrap();
        prop_assert!(back.same_run(&m));
        prop_assert_eq!(back, m);
    }

    #[test]
    fn subsample_is_sorted_unique_and_sized(n in 1usize..300, size in 0usize..400, seed in any::<u64>()) {
        let idx = subsample_indices(n, size, seed);
        let want = if size == 0 || size >= n { n } else { size };
        prop_assert_eq!(idx.len(), want);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
        prop_assert_eq!(idx, subsample_indices(n, size, seed));
    }

    #[test]
    fn repeated_backward_accumulates_exactly(values in prop::collection::vec(-4.0f64..4.0, 1..8), times in 1usize..5) {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64(vec![values.len()], &values).unwrap(), true).unwrap();
        for _ in 0..times {
            let mut g = Graph::new();
            let x = g.param(&store, w);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq);
            g.backward(loss, &mut store).unwrap();
        }
        let p = store.param(w);
        prop_assert_eq!(p.accumulations, times as u64);
        for (gr, v) in p.grad.data().iter().zip(&values) {
            // a sum of identical powers-of-two-scaled terms
            let mut want = 0.0;
            for _ in 0..times {
                want += 2.0 * v;
            }
            prop_assert_eq!(gr.to_bits(), want.to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_data_is_deterministic_and_stratified(classes in 2usize..6, per_class in 5usize..15, seed in any::<u64>()) {
        let spec = SynthSpec { classes, per_class, shape: [1, 3, 3], noise: 0.7, shared: 0.3 };
        let (a, ta) = synth_dataset::<f64>(&spec, seed).unwrap();
        let (b, _) = synth_dataset::<f64>(&spec, seed).unwrap();
        prop_assert!(a.images.bit_eq(&b.images));
        prop_assert_eq!(&a.labels, &b.labels);
        for c in 0..classes {
            prop_assert_eq!(ta.labels.iter().filter(|&&l| l == c).count(), per_class / 5);
            prop_assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), per_class - per_class / 5);
        }
    }

    #[test]
    fn same_size_resize_is_identity(seed in any::<u64>()) {
        let spec = SynthSpec { classes: 2, per_class: 5, shape: [2, 4, 4], noise: 1.0, shared: 0.0 };
        let (d, _) = synth_dataset::<f32>(&spec, seed).unwrap();
        let same = resize(&d, [2, 4, 4], Resize::Nearest).unwrap();
        prop_assert!(same.images.bit_eq(&d.images));
        let area = resize(&d, [2, 2, 2], Resize::Area).unwrap();
        prop_assert_eq!(area.sample_shape(), [2, 2, 2]);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), lr in 0.01f64..0.2) {
        use mlaan_core::optim::OptimizerConfig;
        use mlaan_core::trainer::{Trainer, TrainerKind, TrainerMode};
        let spec = BackboneSpec { depth: 4, width: 2, classes: 2, input_shape: [1, 3, 3] };
        let mut mode = TrainerMode::new(TrainerKind::Mlaan);
        mode.k = 2;
        mode.p = 1;
        let net = Network::<f32>::assemble(&spec, 2, &HeadConfig::default(), &mode.machinery(), seed).unwrap();
        let mut t = Trainer::new(net, mode, OptimizerConfig::new(lr, 0.9, 1e-4, 10)).unwrap();
        let data = SynthSpec { classes: 2, per_class: 5, shape: [1, 3, 3], noise: 1.0, shared: 0.0 };
        let (train, _) = synth_dataset::<f32>(&data, seed).unwrap();
        t.step(&train.batch(&[0, 1, 2, 3, 4, 5, 6, 7])).unwrap();
        let c = Checkpoint::capture(&t);
        let back = Checkpoint::<f32>::from_bytes(&c.to_bytes(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.params.len(), c.params.len());
        for (a, b) in back.params.iter().zip(&c.params) {
            prop_assert!(a.value.bit_eq(&b.value) && a.velocity.bit_eq(&b.velocity));
        }
        prop_assert_eq!(back.digest, c.digest);
    }
}
