use circuitscope::attribution::{
    accumulated_logit_lens, attention_bias_attribution, attention_patterns, ov_circuit, per_head_attribution,
    per_layer_attribution, qk_circuit, GridKind, LogitDiffDirection,
};
use circuitscope::metrics::{logit_diff_row, AnswerPair};
use circuitscope::model::{HookOverride, HookPoint, ModelConfig, ModelWeights, Positions, Site};
use circuitscope::{Error, Tensor};

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

const PROMPTS: [&[u32]; 3] = [&[100, 7, 42, 42, 3, 99, 18, 0, 64], &[5], &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]];

fn setup(seed: u64) -> (ModelWeights, LogitDiffDirection) {
    let w = ModelWeights::synthetic(&small(), seed).unwrap();
    let pair = AnswerPair::new(17, 23, ["a".into(), "b".into()]).unwrap();
    let dir = LogitDiffDirection::new(&w, &pair).unwrap();
    (w, dir)
}

#[test]
fn per_layer_entries_sum_to_the_logit_difference() {
    let (w, dir) = setup(1);
    for tokens in PROMPTS {
        let cache = w.forward(tokens, &[]).unwrap();
        let ld = logit_diff_row(cache.final_logits(), &dir.pair);
        let grid = per_layer_attribution(&w, &cache, &dir).unwrap();
        assert_eq!(grid.kind, GridKind::PerLayer);
        assert_eq!(grid.values.len(), 1 + 2 * 4);
        assert!((grid.total() - ld).abs() <= 1e-3, "{} vs {ld}", grid.total());

        let lens = accumulated_logit_lens(&w, &cache, &dir).unwrap();
        assert_eq!(lens.labels.first().unwrap(), "0-pre");
        assert_eq!(lens.labels.last().unwrap(), "final-post");
        assert_eq!(lens.values.len(), 2 * 4 + 1);
        assert!((lens.total() - ld).abs() <= 1e-3);
        for k in 0..lens.values.len() - 1 {
            let step = lens.values[k + 1] - lens.values[k];
            assert!((step - grid.values[k + 1]).abs() <= 1e-3, "step {k}");
        }
        assert!((lens.values[0] - grid.values[0] - grid.bias).abs() <= 1e-4);
    }
}

#[test]
fn heads_add_up_to_their_layer() {
    let (w, dir) = setup(2);
    let cache = w.forward(PROMPTS[0], &[]).unwrap();
    let layers = per_layer_attribution(&w, &cache, &dir).unwrap();
    let heads = per_head_attribution(&w, &cache, &dir).unwrap();
    let b_o = attention_bias_attribution(&w, &cache, &dir).unwrap();
    assert_eq!(heads.values.len(), 16);
    assert_eq!(heads.labels[5], "1.1");
    for l in 0..4 {
        let sum: f32 = heads.values[l * 4..(l + 1) * 4].iter().sum::<f32>() + b_o[l];
        let attn = layers.get(&format!("{l}_attn_out")).unwrap();
        assert!((sum - attn).abs() <= 1e-3, "layer {l}: {sum} vs {attn}");
    }
}

#[test]
fn attribution_is_linear_in_the_direction() {
    let (w, dir) = setup(3);
    let cache = w.forward(PROMPTS[0], &[]).unwrap();
    let twice = dir.scaled(-2.0).unwrap();
    for (a, b) in [
        (per_layer_attribution(&w, &cache, &dir).unwrap(), per_layer_attribution(&w, &cache, &twice).unwrap()),
        (per_head_attribution(&w, &cache, &dir).unwrap(), per_head_attribution(&w, &cache, &twice).unwrap()),
        (accumulated_logit_lens(&w, &cache, &dir).unwrap(), accumulated_logit_lens(&w, &cache, &twice).unwrap()),
    ] {
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((y + 2.0 * x).abs() <= 1e-4 * (1.0 + x.abs()));
        }
        assert!((b.bias + 2.0 * a.bias).abs() <= 1e-4);
    }
}

#[test]
fn silent_blocks_attribute_nothing() {
    let (mut w, dir) = setup(4);
    w.zero_block_outputs();
    let cache = w.forward(PROMPTS[0], &[]).unwrap();
    let grid = per_layer_attribution(&w, &cache, &dir).unwrap();
    assert!(grid.values[1..].iter().all(|&v| v == 0.0));
    assert!(grid.values[0] != 0.0);
}

#[test]
fn zero_ablating_a_late_head_moves_the_logit_difference_by_its_attribution() {
    // at full width one head barely moves the final layer-norm scale
    let w = ModelWeights::synthetic(&ModelConfig::gpt2_small(), 5).unwrap();
    let dir = LogitDiffDirection::new(&w, &AnswerPair::new(3363, 1400, ["Yes".into(), "No".into()]).unwrap()).unwrap();
    let tokens: Vec<u32> = (0..16).map(|i| (i * 4099 + 7) % 50257).collect();
    let cache = w.forward(&tokens, &[]).unwrap();
    let base = logit_diff_row(cache.final_logits(), &dir.pair);
    let heads = per_head_attribution(&w, &cache, &dir).unwrap();
    let late: Vec<usize> = heads.ranked().into_iter().filter(|&i| i >= 9 * 12).collect();
    for idx in [late[0], late[1], late[late.len() - 1]] {
        let (layer, head) = (idx / 12, idx % 12);
        let attr = heads.values[idx];
        let zeros = Tensor::zeros(vec![tokens.len(), 64]);
        let ov = HookOverride::new(HookPoint::head(layer, Site::AttnZ, head), Positions::Subset((0..tokens.len()).collect()), zeros);
        let ablated = logit_diff_row(&w.final_logits(&tokens, &[ov]).unwrap(), &dir.pair);
        let change = ablated - base;
        assert!((change + attr).abs() <= 0.25 * attr.abs(), "{layer}.{head}: change {change}, attribution {attr}");
    }
}

#[test]
fn pattern_extraction() {
    let (w, _) = setup(6);
    let cache = w.forward(PROMPTS[0], &[]).unwrap();
    let pats = attention_patterns(&cache, &[(0, 0), (3, 3), (2, 1)]).unwrap();
    assert_eq!(pats.len(), 3);
    for p in &pats {
        assert_eq!(p.row(0)[0], 1.0);
        assert!(p.row(0)[1..].iter().all(|&x| x == 0.0));
    }
    assert!(matches!(attention_patterns(&cache, &[(4, 0)]), Err(Error::Range(_))));
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[test]
fn qk_circuit_matches_brute_force() {
    let (w, _) = setup(7);
    let tokens = [3u32, 50, 77, 12];
    let m = qk_circuit(&w, 2, 1, &tokens).unwrap();
    assert_eq!(m.shape(), &[4, 4]);
    let lw = &w.layers[2];
    let project = |wm: &Tensor, t: u32| -> Vec<f32> {
        (0..8)
            .map(|c| (0..32).map(|r| w.w_e.row(t as usize)[r] as f64 * wm.row(r)[8 + c] as f64).sum::<f64>() as f32)
            .collect()
    };
    for (i, &ti) in tokens.iter().enumerate() {
        for (j, &tj) in tokens.iter().enumerate() {
            let expected = dot64(&project(&lw.w_q, ti), &project(&lw.w_k, tj)) / 8f64.sqrt();
            assert!((m.row(i)[j] as f64 - expected).abs() <= 1e-4);
        }
    }
    assert_eq!(qk_circuit(&w, 0, 0, &[9]).unwrap().shape(), &[1, 1]);
    assert!(qk_circuit(&w, 0, 0, &[]).is_err());
    assert!(matches!(qk_circuit(&w, 0, 4, &[1]), Err(Error::Range(_))));
}

#[test]
fn qk_circuit_is_symmetric_when_query_equals_key() {
    let (mut w, _) = setup(8);
    let wq = w.layers[1].w_q.clone();
    w.layers[1].w_k = wq;
    let m = qk_circuit(&w, 1, 2, &[4, 8, 15, 16, 23, 42]).unwrap();
    assert!(m.max_abs_diff(&m.transpose().unwrap()) <= 1e-5);
}

#[test]
fn ov_circuit_cases() {
    let (mut w, _) = setup(9);
    let m = ov_circuit(&w, 1, 3, &[5], &[9]).unwrap();
    let lw = &w.layers[1];
    let v: Vec<f32> = (0..8)
        .map(|c| dot64(w.w_e.row(5), &(0..32).map(|r| lw.w_v.row(r)[24 + c]).collect::<Vec<_>>()) as f32)
        .collect();
    let out: Vec<f32> = (0..32)
        .map(|d| (0..8).map(|c| v[c] as f64 * lw.w_o.row(24 + c)[d] as f64).sum::<f64>() as f32)
        .collect();
    let expected = dot64(w.w_e.row(9), &out);
    assert!((m.data()[0] as f64 - expected).abs() <= 1e-4);

    assert_eq!(ov_circuit(&w, 1, 3, &[1, 2, 3], &[4, 5]).unwrap().shape(), &[2, 3]);
    w.layers[1].w_v.data_mut().fill(0.0);
    assert!(ov_circuit(&w, 1, 3, &[1, 2, 3], &[4, 5]).unwrap().data().iter().all(|&x| x == 0.0));
}
