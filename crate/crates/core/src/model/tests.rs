use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny_config(d_model: usize, n_layers: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        d_ff: 2 * d_model,
        n_layers,
        n_heads,
        vocab_size: 10,
        max_seq_len: 64,
        dropout: 0.0,
        embedding_mode: EmbeddingMode::Shared,
        precision: 3,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..10)).collect()
}

#[test]
fn table6_parameter_count_is_about_3_2m() {
    let cfg = ModelConfig::default();
    let count = param_count(&cfg);
    assert!((3_000_000..=3_400_000).contains(&count), "{count}");
}

#[test]
fn param_count_matches_enumerated_tensors() {
    let cfg = ModelConfig { d_model: 2, d_ff: 2, n_layers: 1, n_heads: 1, vocab_size: 2, ..tiny_config(2, 1, 1) };
    let params: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    // embedding 2·2, attention 4·(4+2), norms 2·4, ff (4+2)+(4+2), final norm 4, head 4+2
    assert_eq!(param_count(&cfg), 4 + 24 + 8 + 12 + 4 + 6);
    assert_eq!(params.num_params(), param_count(&cfg));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let heads = rng.random_range(1..4);
        let d_model = heads * 2 * rng.random_range(1..4);
        let cfg = ModelConfig {
            d_model,
            d_ff: rng.random_range(1..20),
            n_layers: rng.random_range(1..4),
            n_heads: heads,
            vocab_size: rng.random_range(2..12),
            precision: rng.random_range(1..4),
            embedding_mode: if rng.random() { EmbeddingMode::Shared } else { EmbeddingMode::PerPosition },
            ..tiny_config(4, 1, 1)
        };
        let params: Parameters<f32> = init_params(&cfg, &mut rng);
        assert_eq!(params.num_params(), param_count(&cfg), "{cfg:?}");
    }
}

#[test]
fn per_position_embeddings_add_rows() {
    let shared = tiny_config(8, 1, 2);
    let per = ModelConfig { embedding_mode: EmbeddingMode::PerPosition, ..shared.clone() };
    assert_eq!(param_count(&per) - param_count(&shared), (3 - 1) * 10 * 8);
}

#[test]
fn init_is_deterministic_with_unit_gains_and_zero_biases() {
    let cfg = tiny_config(8, 2, 2);
    let a: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
    let b: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
    assert_eq!(a, b);
    for t in a.tensors() {
        match t.kind {
            ParamKind::NormGain => assert!(t.data.iter().all(|&v| v == 1.0)),
            ParamKind::NormBias | ParamKind::Bias => assert!(t.data.iter().all(|&v| v == 0.0)),
            _ => assert!(t.data.iter().all(|&v| v.abs() <= 2.0 * INIT_STD)),
        }
    }
}

#[test]
fn rotary_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d_head = 16;
    let q: Array2<f64> = Array2::from_shape_fn((1, d_head), |_| rng.random_range(-1.0..1.0));
    let k: Array2<f64> = Array2::from_shape_fn((1, d_head), |_| rng.random_range(-1.0..1.0));
    assert_eq!(rotary_apply(q.view(), &[0]), q);

    let rotated = rotary_apply(q.view(), &[37]);
    for i in 0..d_head / 2 {
        let before = q[[0, 2 * i]].hypot(q[[0, 2 * i + 1]]);
        let after = rotated[[0, 2 * i]].hypot(rotated[[0, 2 * i + 1]]);
        assert!((before - after).abs() < 1e-12);
    }

    for _ in 0..20 {
        let m: usize = rng.random_range(0..200);
        let n = rng.random_range(0..=m);
        let lhs = rotary_apply(q.view(), &[m]).row(0).dot(&rotary_apply(k.view(), &[n]).row(0));
        let rhs = rotary_apply(q.view(), &[m - n]).row(0).dot(&k.row(0));
        assert!((lhs - rhs).abs() < 1e-10, "{m} {n}: {lhs} vs {rhs}");
    }
}

#[test]
fn gelu_values() {
    assert_eq!(gelu(0.0f64), 0.0);
    assert!((gelu(10.0f64) - 10.0).abs() < 1e-6);
    assert!(gelu(-10.0f64).abs() < 1e-6);
    let h = 1e-6f64;
    for &x in &[-2.0f64, -0.3, 0.0, 0.7, 3.1] {
        let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        assert!((fd - gelu_grad(x)).abs() < 1e-8);
    }
}

#[test]
fn zero_query_key_gives_uniform_attention_and_position_zero_is_self_only() {
    let cfg = tiny_config(8, 1, 2);
    let mut params: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    params.layers[0].query.weight.fill(0.0);
    params.layers[0].key.weight.fill(0.0);
    let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(2), 9);
    let cache = forward_with_cache(&params, &tokens, None).unwrap();
    for probs in &cache.layers[0].probs {
        for i in 0..tokens.len() {
            for j in 0..tokens.len() {
                let expect = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((probs[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    let params: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
    let cache = forward_with_cache(&params, &tokens, None).unwrap();
    for probs in &cache.layers[0].probs {
        assert!((probs[[0, 0]] - 1.0).abs() < 1e-15);
        assert!(probs.row(0).iter().skip(1).all(|&v| v == 0.0));
    }
}

#[test]
fn zero_weight_blocks_are_identity() {
    let cfg = tiny_config(8, 2, 2);
    let mut params: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
    for layer in &mut params.layers {
        for lin in [&mut layer.output, &mut layer.ff_out] {
            lin.weight.fill(0.0);
            lin.bias.fill(0.0);
        }
    }
    // With both residual branches silenced the hidden state is the embedding,
    // so logits equal head(final_norm(embedding)).
    let tokens = [3usize, 1, 4, 1, 5];
    let logits = forward_eval(&params, &tokens).unwrap();
    let mut only_head = params.clone();
    only_head.layers.clear();
    only_head.config.n_layers = 0;
    let expect = forward_eval(&only_head, &tokens).unwrap();
    assert!((&logits - &expect).iter().all(|v| v.abs() < 1e-14));
}

#[test]
fn forward_shapes_and_softmax_normalization() {
    let cfg = tiny_config(8, 2, 2);
    let params: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
    let logits = forward_eval(&params, &[4]).unwrap();
    assert_eq!(logits.dim(), (1, 10));
    let tokens = random_tokens(&mut ChaCha8Rng::seed_from_u64(3), 20);
    let logits = forward_eval(&params, &tokens).unwrap();
    for row in logits.outer_iter() {
        let p = softmax(row.as_slice().unwrap());
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let too_long = vec![0; cfg.max_seq_len + 1];
    assert!(matches!(forward_eval(&params, &too_long), Err(crate::Error::SequenceTooLong { .. })));
    assert!(forward_eval(&params, &[10]).is_err());
}

#[test]
fn logits_are_causal() {
    let cfg = tiny_config(8, 3, 4);
    let params: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(11));
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let n = rng.random_range(2..40);
        let tokens = random_tokens(&mut rng, n);
        let k = rng.random_range(0..n - 1);
        let mut edited = tokens.clone();
        for t in edited.iter_mut().skip(k + 1) {
            *t = rng.random_range(0..10);
        }
        let a = forward_eval(&params, &tokens).unwrap();
        let b = forward_eval(&params, &edited).unwrap();
        for i in 0..=k {
            for j in 0..10 {
                assert!((a[[i, j]] - b[[i, j]]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn fresh_model_is_near_uniform_and_deterministic() {
    let cfg = tiny_config(16, 2, 2);
    let params: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let prefix = [1usize, 2, 3, 4, 5, 6];
    let p = next_token_distribution(&params, &prefix).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(p.iter().all(|&v| v >= 0.0));
    let max = p.iter().copied().fold(f64::MIN, f64::max);
    let min = p.iter().copied().fold(f64::MAX, f64::min);
    assert!(max / min < 3.0);
    assert_eq!(p, next_token_distribution(&params, &prefix).unwrap());
}

#[test]
fn dropout_only_in_train_mode() {
    let cfg = ModelConfig { dropout: 0.5, ..tiny_config(8, 2, 2) };
    let params: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let tokens = [1usize, 2, 3, 4];
    let eval_a = forward_eval(&params, &tokens).unwrap();
    assert_eq!(eval_a, forward_eval(&params, &tokens).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train = forward(&params, &tokens, Some(&mut rng)).unwrap();
    assert_ne!(eval_a, train);
}

/// Loss `Σ w ⊙ logits` for a fixed random `w`, so `dlogits = w`.
fn linear_probe_loss(params: &Parameters<f64>, tokens: &[usize], w: &Array2<f64>) -> f64 {
    (forward_eval(params, tokens).unwrap() * w).sum()
}

#[test]
fn backward_matches_finite_differences() {
    let cfg = ModelConfig { embedding_mode: EmbeddingMode::PerPosition, ..tiny_config(8, 2, 2) };
    let params: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(21));
    // Larger weights than the init scale so every path carries signal.
    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for t in params.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let tokens = random_tokens(&mut rng, 12);
    let w = Array2::from_shape_fn((12, 10), |_| rng.random_range(-1.0..1.0));

    let cache = forward_with_cache(&params, &tokens, None).unwrap();
    let mut grads = params.zeros_like();
    backward(&params, &cache, w.view(), &mut grads);

    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].data.len();
        for i in 0..len {
            let orig = params.tensors()[ti].data[i];
            params.tensors_mut()[ti].data[i] = orig + step;
            let up = linear_probe_loss(&params, &tokens, &w);
            params.tensors_mut()[ti].data[i] = orig - step;
            let down = linear_probe_loss(&params, &tokens, &w);
            params.tensors_mut()[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.tensors()[ti].data[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn unused_embedding_rows_get_zero_gradient() {
    let cfg = tiny_config(8, 1, 2);
    let params: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let tokens = [1usize, 3, 3, 1];
    let cache = forward_with_cache(&params, &tokens, None).unwrap();
    let w = Array2::from_elem((4, 10), 0.1);
    let mut grads = params.zeros_like();
    backward(&params, &cache, w.view(), &mut grads);
    for row in [0usize, 2, 4, 5, 6, 7, 8, 9] {
        assert!(grads.embedding.row(row).iter().all(|&v| v == 0.0));
    }
    assert!(grads.embedding.row(1).iter().any(|&v| v != 0.0));

    let mut doubled = params.zeros_like();
    let w2 = &w * 2.0;
    backward(&params, &cache, w2.view(), &mut doubled);
    for (a, b) in grads.tensors().iter().zip(doubled.tensors()) {
        for (x, y) in a.data.iter().zip(b.data) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let cfg = ModelConfig { embedding_mode: EmbeddingMode::PerPosition, ..tiny_config(8, 2, 2) };
    let params: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(31));
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let prefix = random_tokens(&mut rng, 7);
    let batch = 3;
    let steps = 5;
    let decoder = Decoder::new(&params);
    let mut state = decoder.prefill(&prefix, batch, steps).unwrap();
    let mut seqs: Vec<Vec<usize>> = vec![prefix.clone(); batch];
    for _ in 0..steps {
        for (b, seq) in seqs.iter().enumerate() {
            let full = forward_eval(&params, seq).unwrap();
            let last = full.row(seq.len() - 1);
            for j in 0..10 {
                assert!((state.logits[[b, j]] - last[j]).abs() < 1e-10);
            }
        }
        let next: Vec<usize> = (0..batch).map(|_| rng.random_range(0..10)).collect();
        decoder.step(&mut state, &next).unwrap();
        for (seq, t) in seqs.iter_mut().zip(&next) {
            seq.push(*t);
        }
    }
    assert!(decoder.step(&mut state, &[0, 0, 0]).is_err());
}

#[test]
fn f32_and_f64_agree() {
    let cfg = tiny_config(8, 2, 2);
    let p64: Parameters<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
    let p32: Parameters<f32> = p64.cast();
    let tokens = [1usize, 5, 9, 2, 2, 0];
    let a = forward_eval(&p64, &tokens).unwrap();
    let b = forward_eval(&p32, &tokens).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - *y as f64).abs() < 1e-4);
    }
}
