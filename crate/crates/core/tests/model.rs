use circuitscope::model::{HookOverride, HookPoint, Layer, ModelConfig, ModelWeights, Positions, Site};
use circuitscope::{tensor, Error, Tensor};

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 4,
        d_model: 32,
        d_head: 8,
        d_mlp: 64,
        n_vocab: 101,
        n_ctx: 24,
        ln_eps: 1e-5,
    }
}

const TOKENS: [u32; 9] = [100, 7, 42, 42, 3, 99, 18, 0, 64];

fn all_hooks(c: &ModelConfig) -> Vec<HookPoint> {
    let mut hooks = vec![HookPoint::final_resid()];
    for l in 0..c.n_layers {
        for site in Site::ALL {
            if site.is_head_scoped() {
                hooks.extend((0..c.n_heads).map(|h| HookPoint::head(l, site, h)));
            } else {
                hooks.push(HookPoint::block(l, site));
            }
        }
    }
    hooks
}

#[test]
fn patching_a_site_with_its_own_value_changes_nothing() {
    let w = ModelWeights::synthetic(&small(), 1).unwrap();
    let cache = w.forward(&TOKENS, &[]).unwrap();
    for hook in all_hooks(&w.config) {
        for positions in [Positions::All, Positions::Subset(vec![2, 8])] {
            let value = cache.rows(&hook, &positions).unwrap();
            let patched = w.final_logits(&TOKENS, &[HookOverride::new(hook, positions, value)]).unwrap();
            assert_eq!(patched, cache.final_logits(), "{hook}");
        }
    }
}

#[test]
fn residual_stream_is_the_sum_of_its_writers() {
    let w = ModelWeights::synthetic(&small(), 2).unwrap();
    let cache = w.forward(&TOKENS, &[]).unwrap();
    let mut sum = w.embed(&TOKENS);
    assert_eq!(sum, cache.layer(0).resid_pre);
    for layer in cache.layers() {
        for (s, (a, m)) in sum
            .data_mut()
            .iter_mut()
            .zip(layer.attn_out.data().iter().zip(layer.mlp_out.data()))
        {
            *s += a + m;
        }
        assert!(sum.max_abs_diff(&layer.resid_post) <= 1e-4);
    }
    assert_eq!(cache.final_resid(), &cache.layers().last().unwrap().resid_post);
}

#[test]
fn attention_output_is_the_sum_of_head_results() {
    let w = ModelWeights::synthetic(&small(), 3).unwrap();
    let cache = w.forward(&TOKENS, &[]).unwrap();
    let c = w.config;
    for l in 0..c.n_layers {
        for pos in 0..TOKENS.len() {
            let mut total = w.layers[l].b_o.data().to_vec();
            for h in 0..c.n_heads {
                for (t, r) in total.iter_mut().zip(cache.head_result(&w, l, h, pos)) {
                    *t += r;
                }
            }
            let attn = cache.layer(l).attn_out.row(pos);
            let err = total.iter().zip(attn).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(err <= 1e-4, "layer {l} position {pos}: {err}");
        }
    }
}

#[test]
fn attention_patterns_are_causal_distributions() {
    let w = ModelWeights::synthetic(&small(), 4).unwrap();
    let cache = w.forward(&TOKENS, &[]).unwrap();
    for l in 0..4 {
        for h in 0..4 {
            let p = cache.pattern(l, h).unwrap();
            for i in 0..TOKENS.len() {
                let row = p.row(i);
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-5);
                assert!(row[..=i].iter().all(|&x| x >= 0.0));
                assert!(row[i + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }
    assert!(matches!(cache.pattern(4, 0), Err(Error::Range(_))));
    assert!(matches!(cache.pattern(0, 4), Err(Error::Range(_))));
}

#[test]
fn forward_is_deterministic() {
    let w = ModelWeights::synthetic(&small(), 5).unwrap();
    let a = w.forward(&TOKENS, &[]).unwrap();
    let b = w.forward(&TOKENS, &[]).unwrap();
    assert_eq!(a.logits(), b.logits());
    assert_eq!(ModelWeights::synthetic(&small(), 5).unwrap().final_logits(&TOKENS, &[]).unwrap(), a.final_logits());
}

#[test]
fn overrides_only_affect_downstream_activations() {
    let w = ModelWeights::synthetic(&small(), 6).unwrap();
    let base = w.forward(&TOKENS, &[]).unwrap();
    let noise = Tensor::new(vec![1, 32], (0..32).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let ov = HookOverride::new(HookPoint::block(2, Site::ResidMid), Positions::Subset(vec![4]), noise.clone());
    let patched = w.forward(&TOKENS, &[ov]).unwrap();

    for l in 0..2 {
        assert_eq!(base.layer(l).resid_post, patched.layer(l).resid_post);
    }
    assert_eq!(base.layer(2).attn_out, patched.layer(2).attn_out);
    assert_eq!(patched.layer(2).resid_mid.row(4), noise.row(0));
    for l in 2..4 {
        for pos in 0..4 {
            assert_eq!(base.layer(l).resid_post.row(pos), patched.layer(l).resid_post.row(pos));
        }
        assert_ne!(base.layer(l).resid_post.row(4), patched.layer(l).resid_post.row(4));
    }
    assert_ne!(base.final_logits(), patched.final_logits());
}

#[test]
fn head_overrides_touch_one_head() {
    let w = ModelWeights::synthetic(&small(), 7).unwrap();
    let base = w.forward(&TOKENS, &[]).unwrap();
    let zeros = Tensor::zeros(vec![TOKENS.len(), 8]);
    let ov = HookOverride::new(HookPoint::head(1, Site::AttnZ, 2), Positions::All, zeros.clone());
    let patched = w.forward(&TOKENS, &[ov]).unwrap();
    let z = patched.get(&HookPoint::head(1, Site::AttnZ, 2)).unwrap();
    assert_eq!(z, zeros);
    for h in [0, 1, 3] {
        let hook = HookPoint::head(1, Site::AttnZ, h);
        assert_eq!(base.get(&hook).unwrap(), patched.get(&hook).unwrap());
    }
}

#[test]
fn pattern_override_is_used_for_mixing() {
    let w = ModelWeights::synthetic(&small(), 8).unwrap();
    let seq = TOKENS.len();
    let base = w.forward(&TOKENS, &[]).unwrap();
    // all attention on the first position
    let mut uniform_first = Tensor::zeros(vec![seq, seq]);
    for i in 0..seq {
        uniform_first.row_mut(i)[0] = 1.0;
    }
    let hook = HookPoint::head(0, Site::AttnPattern, 1);
    let patched = w.forward(&TOKENS, &[HookOverride::new(hook, Positions::All, uniform_first)]).unwrap();
    let v = base.get(&HookPoint::head(0, Site::AttnV, 1)).unwrap();
    let z = patched.get(&HookPoint::head(0, Site::AttnZ, 1)).unwrap();
    for i in 0..seq {
        assert_eq!(z.row(i), v.row(0));
    }
}

#[test]
fn final_override_replaces_the_stream_read_by_the_unembedding() {
    let w = ModelWeights::synthetic(&small(), 9).unwrap();
    let seq = TOKENS.len();
    let stream = Tensor::new(vec![1, 32], (0..32).map(|i| i as f32 / 8.0).collect()).unwrap();
    let ov = HookOverride::new(HookPoint::final_resid(), Positions::Subset(vec![seq - 1]), stream.clone());
    let logits = w.final_logits(&TOKENS, &[ov]).unwrap();
    let (normed, _) = tensor::layer_norm_rows(&stream, w.ln_final_gain.data(), w.ln_final_bias.data(), 1e-5);
    let expected = tensor::matmul(&normed, &w.w_u).unwrap();
    assert_eq!(logits, expected.data());
}

#[test]
fn blocks_with_zero_outputs_leave_the_embedding() {
    let mut w = ModelWeights::synthetic(&small(), 10).unwrap();
    w.zero_block_outputs();
    let cache = w.forward(&TOKENS, &[]).unwrap();
    assert_eq!(cache.final_resid(), &w.embed(&TOKENS));
}

#[test]
fn invalid_overrides_are_rejected() {
    let w = ModelWeights::synthetic(&small(), 11).unwrap();
    let wrong_width = HookOverride::new(HookPoint::head(0, Site::AttnQ, 0), Positions::All, Tensor::zeros(vec![9, 32]));
    assert!(matches!(w.forward(&TOKENS, &[wrong_width]), Err(Error::Override(_))));
    let wrong_layer = HookOverride::new(HookPoint::resid_pre(4), Positions::All, Tensor::zeros(vec![9, 32]));
    assert!(matches!(w.forward(&TOKENS, &[wrong_layer]), Err(Error::Override(_))));
    assert!(HookPoint::new(Layer::Block(0), Site::AttnPattern, None).is_err());
}

#[test]
fn safetensors_round_trip_preserves_logits() {
    let w = ModelWeights::synthetic(&small(), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    w.save(&path).unwrap();
    let loaded = circuitscope::model::load_weights(&path, &small()).unwrap();
    assert_eq!(loaded.final_logits(&TOKENS, &[]).unwrap(), w.final_logits(&TOKENS, &[]).unwrap());

    let missing = w.to_safetensors_without(&["h.2.mlp.c_fc.weight"]).unwrap();
    match ModelWeights::from_safetensors(&missing, &small()) {
        Err(Error::MissingTensor(name)) => assert!(name.contains("h.2.mlp.c_fc.weight")),
        other => panic!("expected a missing-tensor error, got {other:?}"),
    }
}

#[test]
fn single_row_logits_match_batched_logits_at_full_size() {
    let w = ModelWeights::synthetic(&ModelConfig::gpt2_small(), 13).unwrap();
    let tokens: Vec<u32> = (0..20).map(|i| (i * 2503 + 11) % 50257).collect();
    let start = std::time::Instant::now();
    let cache = w.forward(&tokens, &[]).unwrap();
    eprintln!("full forward: {:?}", start.elapsed());
    let start = std::time::Instant::now();
    let last = w.final_logits(&tokens, &[]).unwrap();
    eprintln!("last-position forward: {:?}", start.elapsed());
    assert_eq!(last, cache.final_logits());
}
