use super::*;
use ndarray::{Array, Array4};
use rand::Rng;

fn random_batch(n: usize, s: usize, seed: u64) -> Array4<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Array::from_shape_fn((n, 1, s, s), |_| rng.random::<f64>())
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        depth: 8,
        stage_widths: [2, 4, 8],
        in_channels: 1,
        num_classes: 2,
        input_size: 8,
        seed: 11,
    }
}

/// Reference layer summary: (layer, output shape, params) for depth 8 at input 200.
fn table_one() -> Vec<(&'static str, Vec<i64>, usize)> {
    let s1 = vec![-1, 16, 200, 200];
    let s2 = vec![-1, 32, 100, 100];
    let s3 = vec![-1, 64, 50, 50];
    vec![
        ("Conv2d", s1.clone(), 144),
        ("BatchNorm2d", s1.clone(), 32),
        ("ReLU", s1.clone(), 0),
        ("Conv2d", s1.clone(), 2304),
        ("BatchNorm2d", s1.clone(), 32),
        ("ReLU", s1.clone(), 0),
        ("Conv2d", s1.clone(), 2304),
        ("BatchNorm2d", s1.clone(), 32),
        ("ReLU", s1.clone(), 0),
        ("BasicBlock", s1, 0),
        ("Conv2d", s2.clone(), 4608),
        ("BatchNorm2d", s2.clone(), 64),
        ("ReLU", s2.clone(), 0),
        ("Conv2d", s2.clone(), 9216),
        ("BatchNorm2d", s2.clone(), 64),
        ("Conv2d", s2.clone(), 512),
        ("BatchNorm2d", s2.clone(), 64),
        ("ReLU", s2.clone(), 0),
        ("BasicBlock", s2, 0),
        ("Conv2d", s3.clone(), 18432),
        ("BatchNorm2d", s3.clone(), 128),
        ("ReLU", s3.clone(), 0),
        ("Conv2d", s3.clone(), 36864),
        ("BatchNorm2d", s3.clone(), 128),
        ("Conv2d", s3.clone(), 2048),
        ("BatchNorm2d", s3.clone(), 128),
        ("ReLU", s3.clone(), 0),
        ("BasicBlock", s3, 0),
        ("AdaptiveAvgPool2d", vec![-1, 64, 1, 1], 0),
        ("Linear", vec![-1, 2], 130),
    ]
}

#[test]
fn depth_eight_reproduces_layer_table() {
    let m = build_model::<f32>(&ModelConfig::default()).unwrap();
    let got: Vec<(&str, Vec<i64>, usize)> = m.summary().iter().map(|r| (r.layer.as_str(), r.output_shape.clone(), r.params)).collect();
    assert_eq!(got, table_one());
    assert_eq!(m.param_count(), 77_234);
    assert_eq!(table_one().iter().map(|r| r.2).sum::<usize>(), 77_234);
}

/// Closed-form count for `n` blocks per stage at widths 16/32/64.
fn closed_form_params(n: usize) -> usize {
    let conv = |ci: usize, co: usize, k: usize| co * ci * k * k;
    let bn = |c: usize| 2 * c;
    let mut total = conv(1, 16, 3) + bn(16);
    let mut c = 16;
    for w in [16, 32, 64] {
        for b in 0..n {
            total += conv(c, w, 3) + bn(w) + conv(w, w, 3) + bn(w);
            if b == 0 && w != c {
                total += conv(c, w, 1) + bn(w);
            }
            c = w;
        }
    }
    total + 64 * 2 + 2
}

#[test]
fn parameter_counts_for_all_depths() {
    for (depth, n) in [(8, 1), (14, 2), (20, 3)] {
        let m = build_model::<f32>(&ModelConfig::new(depth, 200, 0)).unwrap();
        assert_eq!(m.param_count(), closed_form_params(n), "depth {depth}");
        let from_rows: usize = m.summary().iter().map(|r| r.params).sum();
        assert_eq!(from_rows, m.param_count());
        let conv_rows = m.summary().iter().filter(|r| r.layer == "Conv2d").count();
        // Stem plus two per block plus two projections.
        assert_eq!(conv_rows, 1 + 6 * n + 2);
    }
    assert_eq!(closed_form_params(1), 77_234);
}

#[test]
fn unsupported_depths_rejected() {
    for depth in [0, 6, 9, 26, 32] {
        assert!(matches!(build_model::<f32>(&ModelConfig::new(depth, 200, 0)), Err(NetError::UnsupportedDepth(d)) if d == depth));
    }
}

#[test]
fn fifty_pixel_input_follows_ceil_rule() {
    let m = build_model::<f32>(&ModelConfig::new(8, 50, 0)).unwrap();
    let blocks: Vec<Vec<i64>> = m.summary().iter().filter(|r| r.layer == "BasicBlock").map(|r| r.output_shape.clone()).collect();
    assert_eq!(blocks, vec![vec![-1, 16, 50, 50], vec![-1, 32, 25, 25], vec![-1, 64, 13, 13]]);
    assert_eq!(m.param_count(), 77_234);
}

#[test]
fn forward_shapes_and_shape_errors() {
    let mut m = build_model::<f64>(&tiny_config()).unwrap();
    let x = random_batch(5, 8, 1);
    assert_eq!(m.forward_eval(x.view()).unwrap().dim(), (5, 2));
    assert_eq!(m.forward(x.view(), Mode::Train).unwrap().dim(), (5, 2));
    let wrong = random_batch(2, 9, 1);
    assert!(matches!(m.forward_eval(wrong.view()), Err(NetError::ShapeMismatch { .. })));
}

#[test]
fn full_size_batch_gives_one_logit_pair_per_tile() {
    // Few samples keep the test fast; the batch dimension is passed through unchanged.
    let m = build_model::<f32>(&ModelConfig::default()).unwrap();
    let x = Array4::<f32>::from_elem((3, 1, 200, 200), 0.5);
    assert_eq!(m.forward_eval(x.view()).unwrap().dim(), (3, 2));
}

#[test]
fn eval_is_deterministic_and_batch_independent() {
    let m = build_model::<f64>(&tiny_config()).unwrap();
    let x = random_batch(4, 8, 2);
    let a = m.forward_eval(x.view()).unwrap();
    assert_eq!(a, m.forward_eval(x.view()).unwrap());
    let single = m.forward_eval(x.slice(ndarray::s![2..3, .., .., ..])).unwrap();
    for j in 0..2 {
        assert!((single[[0, j]] - a[[2, j]]).abs() < 1e-12);
    }
}

#[test]
fn eval_chunking_does_not_change_results() {
    let m = build_model::<f64>(&tiny_config()).unwrap();
    let x = random_batch(EVAL_CHUNK + 7, 8, 3);
    let all = m.forward_eval(x.view()).unwrap();
    let tail = m.forward_eval(x.slice(ndarray::s![EVAL_CHUNK.., .., .., ..])).unwrap();
    for i in 0..7 {
        for j in 0..2 {
            assert!((tail[[i, j]] - all[[EVAL_CHUNK + i, j]]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_classifier_gives_half_probability() {
    let mut m = build_model::<f32>(&ModelConfig::new(8, 16, 3)).unwrap();
    m.zero_classifier();
    let x = Array4::<f32>::from_shape_fn((4, 1, 16, 16), |(b, _, i, j)| ((b + i * j) % 7) as f32 / 7.0);
    let logits = m.forward_eval(x.view()).unwrap();
    assert!(logits.iter().all(|&v| v == 0.0));
    assert!(m.predict_proba(x.view()).unwrap().iter().all(|&p| p == 0.5));
}

#[test]
fn probabilities_are_normalized() {
    let m = build_model::<f64>(&tiny_config()).unwrap();
    let x = random_batch(6, 8, 4);
    let p = softmax(m.forward_eval(x.view()).unwrap().view());
    for row in p.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
    assert_eq!(m.predict_proba(x.view()).unwrap(), p.column(WAVES_INDEX).to_vec());
}

#[test]
fn initialization_is_seeded() {
    let a = build_model::<f32>(&ModelConfig::new(8, 50, 5)).unwrap();
    let b = build_model::<f32>(&ModelConfig::new(8, 50, 5)).unwrap();
    let c = build_model::<f32>(&ModelConfig::new(8, 50, 6)).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    assert_eq!(a.parameter_hash(), b.parameter_hash());
    let gamma = &a.manifest()[1];
    assert_eq!(gamma.name, "stem.bn.weight");
    assert!(a.params()[gamma.range()].iter().all(|&g| g == 1.0));
    let stats = a.running_stats();
    assert!(stats[..16].iter().all(|&v| v == 0.0) && stats[16..32].iter().all(|&v| v == 1.0));
    let w = &a.manifest()[0];
    let vals = &a.params()[w.range()];
    let std = (vals.iter().map(|v| v * v).sum::<f32>() / vals.len() as f32).sqrt();
    assert!((std - (2.0f32 / 9.0).sqrt()).abs() < 0.15, "{std}");
}

fn batch_loss(m: &mut Model<f64>, x: &Array4<f64>, labels: &[usize]) -> f64 {
    let logits = m.forward_train(x.view()).unwrap();
    softmax_cross_entropy(logits.view(), labels).unwrap().0
}

fn check_gradients(mode: BnMode) {
    let mut m = build_model::<f64>(&tiny_config()).unwrap();
    m.set_bn_mode(mode);
    if mode == BnMode::Frozen {
        // Non-trivial running statistics.
        let s = m.running_stats_mut();
        let half = s.len() / 2;
        for (i, v) in s.iter_mut().enumerate() {
            *v = if (i / 2) % 2 == 0 && i < half { 0.1 } else { 1.5 };
        }
    }
    let x = random_batch(4, 8, 7);
    let labels = [0, 1, 1, 0];
    let logits = m.forward_train(x.view()).unwrap();
    let (_, d) = softmax_cross_entropy(logits.view(), &labels).unwrap();
    m.backward(d.view()).unwrap();
    let analytic = m.grads().to_vec();

    let h = 1e-5;
    let mut worst = (0.0, 0usize);
    for i in 0..m.param_count() {
        let orig = m.params()[i];
        m.params_mut()[i] = orig + h;
        let up = batch_loss(&mut m, &x, &labels);
        m.params_mut()[i] = orig - h;
        let dn = batch_loss(&mut m, &x, &labels);
        m.params_mut()[i] = orig;
        let fd = (up - dn) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    let name = m.manifest().iter().find(|e| e.range().contains(&worst.1)).map(|e| e.name.clone());
    assert!(worst.0 < 1e-3, "worst relative error {} at {:?}", worst.0, name);
}

#[test]
fn gradients_match_finite_differences_batch_statistics() {
    check_gradients(BnMode::Batch);
}

#[test]
fn gradients_match_finite_differences_frozen_norm() {
    check_gradients(BnMode::Frozen);
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let mut m = build_model::<f64>(&tiny_config()).unwrap();
    let x = random_batch(3, 8, 8);
    m.forward_train(x.view()).unwrap();
    m.backward(Array2::zeros((3, 2)).view()).unwrap();
    assert!(m.grads().iter().all(|&g| g == 0.0));
}

#[test]
fn backward_requires_forward() {
    let mut m = build_model::<f64>(&tiny_config()).unwrap();
    assert!(matches!(m.backward(Array2::zeros((1, 2)).view()), Err(NetError::NoForwardCache)));
    let x = random_batch(2, 8, 8);
    m.forward_eval(x.view()).unwrap();
    assert!(matches!(m.backward(Array2::zeros((2, 2)).view()), Err(NetError::NoForwardCache)));
}

#[test]
fn duplicated_samples_contribute_equally() {
    // With frozen normalization the loss is a sum of per-sample terms, so a
    // sample and its copy must receive identical logit gradients and the
    // parameter gradient must equal twice the single-copy contribution.
    let mut m = build_model::<f64>(&tiny_config()).unwrap();
    m.set_bn_mode(BnMode::Frozen);
    let one = random_batch(1, 8, 9);
    let two = ndarray::concatenate(ndarray::Axis(0), &[one.view(), one.view()]).unwrap();
    let logits = m.forward_train(two.view()).unwrap();
    let (_, d) = softmax_cross_entropy(logits.view(), &[1, 1]).unwrap();
    assert_eq!(d.row(0), d.row(1));
    m.backward(d.view()).unwrap();
    let g2 = m.grads().to_vec();
    let logits = m.forward_train(one.view()).unwrap();
    let (_, d) = softmax_cross_entropy(logits.view(), &[1]).unwrap();
    m.backward(d.view()).unwrap();
    for (a, b) in g2.iter().zip(m.grads()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn train_forward_updates_running_stats_only_in_batch_mode() {
    let mut m = build_model::<f64>(&tiny_config()).unwrap();
    let before = m.running_stats().to_vec();
    let x = random_batch(3, 8, 10);
    m.set_bn_mode(BnMode::Frozen);
    m.forward_train(x.view()).unwrap();
    assert_eq!(m.running_stats(), &before[..]);
    m.set_bn_mode(BnMode::Batch);
    m.forward_train(x.view()).unwrap();
    assert_ne!(m.running_stats(), &before[..]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut m = build_model::<f32>(&ModelConfig::new(8, 16, 21)).unwrap();
    let x = Array4::<f32>::from_shape_fn((3, 1, 16, 16), |(b, _, i, j)| ((b * 5 + i * 3 + j) % 11) as f32 / 11.0);
    m.forward_train(x.view()).unwrap();
    let history = vec![EpochMetrics {
        epoch: 1,
        train_loss: 0.5,
        train_acc: 0.75,
        val_acc: 0.8,
    }];
    let size = save_checkpoint(&m, 1, &history, &path).unwrap();
    let ck = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(ck.epoch, 1);
    assert_eq!(ck.history, history);
    assert_eq!(ck.model.params(), m.params());
    assert_eq!(ck.model.running_stats(), m.running_stats());
    assert_eq!(ck.model.forward_eval(x.view()).unwrap(), m.forward_eval(x.view()).unwrap());

    // Size = fixed prefix + header + 4 * (params + 2 * batch-norm channels).
    let bytes = std::fs::read(&path).unwrap();
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    assert_eq!(size, bytes.len() as u64);
    assert_eq!(size, 16 + header_len + 4 * (m.param_count() + 2 * m.bn_channels()) as u64);
    assert_eq!(m.bn_channels(), 16 + 2 * 16 + 3 * 32 + 3 * 64);
}

#[test]
fn checkpoint_guards() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = build_model::<f32>(&ModelConfig::new(8, 16, 0)).unwrap();
    save_checkpoint(&m, 0, &[], &path).unwrap();
    let three = ModelConfig {
        num_classes: 3,
        ..ModelConfig::new(8, 16, 0)
    };
    assert!(matches!(load_checkpoint_expecting::<f32>(&path, &three), Err(NetError::ConfigMismatch(_))));
    assert!(load_checkpoint_expecting::<f32>(&path, &ModelConfig::new(8, 16, 99)).is_ok());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 9;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint::<f32>(&path).unwrap_err().to_string().contains("unsupported version"));
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint::<f32>(&path).unwrap_err().to_string().contains("bad magic"));
    bytes[0] = b'D';
    bytes[4] = 1;
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint::<f32>(&path).unwrap_err().to_string().contains("payload"));
}
