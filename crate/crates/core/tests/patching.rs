use circuitscope::metrics::AnswerPair;
use circuitscope::model::{HookPoint, ModelConfig, ModelWeights, Positions, Site};
use circuitscope::patching::{Direction, HeadPositions, PatchGrid, Patcher, Sender, SweepSpec};
use circuitscope::Error;

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

const CLEAN: [u32; 10] = [100, 7, 42, 13, 3, 99, 18, 42, 64, 5];
const CORRUPTED: [u32; 10] = [100, 7, 61, 13, 3, 99, 18, 61, 64, 5];

fn weights() -> ModelWeights {
    ModelWeights::synthetic(&small(), 21).unwrap()
}

fn answers() -> AnswerPair {
    AnswerPair::new(42, 61, ["x".into(), "y".into()]).unwrap()
}

#[test]
fn endpoints_are_exact_in_both_directions() {
    let w = weights();
    for direction in [Direction::Denoise, Direction::Noise] {
        let p = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers(), direction).unwrap();
        assert_eq!(p.score(&[]).unwrap(), 0.0);
        let restore = p.source_override(HookPoint::resid_pre(0), Positions::All).unwrap();
        assert!((p.score(&[restore]).unwrap() - 1.0).abs() <= 1e-6);
        let final_stream = p.source_override(HookPoint::final_resid(), Positions::Subset(vec![9])).unwrap();
        assert!((p.score(&[final_stream]).unwrap() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn degenerate_and_misaligned_pairs_are_rejected() {
    let w = weights();
    assert!(matches!(
        Patcher::new(&w, &CLEAN, &CLEAN, &answers(), Direction::Denoise),
        Err(Error::Baseline { .. })
    ));
    assert!(matches!(
        Patcher::new(&w, &CLEAN, &CORRUPTED[..9], &answers(), Direction::Denoise),
        Err(Error::Alignment(_))
    ));
}

#[test]
fn resid_sweep_shape_and_untouched_positions() {
    let w = weights();
    let p = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers(), Direction::Denoise).unwrap();
    let grid = p.resid_sweep(Site::ResidPre, 0..4, 0..10).unwrap();
    assert_eq!(grid.shape(), vec![4, 10]);
    // positions where the prompts agree carry identical layer-0 residuals
    for pos in [0, 1, 3, 4, 5, 6, 8, 9] {
        assert_eq!(grid.get(0, pos), 0.0);
    }
    assert!(grid.values.iter().all(|v| v.is_finite()));
    assert!(p.resid_sweep(Site::AttnZ, 0..4, 0..10).is_err());
    assert!(matches!(p.resid_sweep(Site::ResidPre, 0..5, 0..10), Err(Error::Range(_))));
}

#[test]
fn all_heads_together_equal_the_attention_outputs() {
    let w = weights();
    let p = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers(), Direction::Denoise).unwrap();
    let mut heads = Vec::new();
    let mut outs = Vec::new();
    for l in 0..4 {
        let layer_heads: Vec<_> = (0..4)
            .map(|h| p.source_override(HookPoint::head(l, Site::AttnZ, h), Positions::All).unwrap())
            .collect();
        let out = p.source_override(HookPoint::block(l, Site::AttnOut), Positions::All).unwrap();
        assert!((p.score(&layer_heads).unwrap() - p.score(&[out.clone()]).unwrap()).abs() <= 1e-3);
        heads.extend(layer_heads);
        outs.push(out);
    }
    assert!((p.score(&heads).unwrap() - p.score(&outs).unwrap()).abs() <= 1e-3);
}

#[test]
fn block_outputs_and_embedding_restore_the_clean_run() {
    let w = weights();
    let p = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers(), Direction::Denoise).unwrap();
    let mut all = vec![p.source_override(HookPoint::resid_pre(0), Positions::All).unwrap()];
    for l in 0..4 {
        for s in [Site::AttnOut, Site::MlpOut] {
            all.push(p.source_override(HookPoint::block(l, s), Positions::All).unwrap());
        }
    }
    assert!((p.score(&all).unwrap() - 1.0).abs() <= 1e-3);
    let grid = p.block_sweep(&[Site::AttnOut, Site::MlpOut], 0..4).unwrap();
    assert_eq!(grid.shape(), vec![4, 2]);
    assert_eq!(grid.axes[1].labels, ["attn_out", "mlp_out"]);
}

#[test]
fn identical_values_score_zero() {
    let w = weights();
    let p = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers(), Direction::Denoise).unwrap();
    // before the first differing token both runs agree everywhere
    let ov = p.source_override(HookPoint::head(2, Site::AttnV, 1), Positions::Subset(vec![0, 1])).unwrap();
    assert_eq!(p.score(&[ov]).unwrap(), 0.0);
}

#[test]
fn sweeps_are_deterministic_and_independent_of_threading() {
    let w = weights();
    let p = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers(), Direction::Denoise).unwrap();
    let a = p.head_sweep(Site::AttnZ, 0..4, 0..4, HeadPositions::All).unwrap();
    let b = p.head_sweep(Site::AttnZ, 0..4, 0..4, HeadPositions::All).unwrap();
    let serial = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers(), Direction::Denoise)
        .unwrap()
        .with_parallel(false);
    let c = serial.head_sweep(Site::AttnZ, 0..4, 0..4, HeadPositions::All).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(a.shape(), vec![4, 4]);
}

#[test]
fn component_sweeps() {
    let w = weights();
    let p = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers(), Direction::Denoise).unwrap();
    let grids = p.head_component_sweep(HeadPositions::End).unwrap();
    let names: Vec<_> = grids.iter().map(|g| g.name.as_str()).collect();
    assert_eq!(names, ["head_attn_q", "head_attn_k", "head_attn_v", "head_attn_pattern_end"]);
    // layer-0 keys and values at unchanged positions match, but the changed
    // tokens make at least one layer-0 cell move
    assert!(grids[2].rows()[0].iter().any(|&v| v != 0.0));
}

#[test]
fn path_patching_all_senders_equals_patching_the_receiver() {
    let w = weights();
    let p = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers(), Direction::Denoise).unwrap();
    for (layer, site, head) in [(3, Site::AttnV, 2), (2, Site::AttnQ, 0), (1, Site::AttnK, 3)] {
        let receiver = HookPoint::head(layer, site, head);
        let path = p.path_patch(&Sender::all_before(layer, 4), receiver).unwrap();
        let direct = p.score(&[p.source_override(receiver, Positions::All).unwrap()]).unwrap();
        assert!((path - direct).abs() <= 1e-3, "{receiver}: {path} vs {direct}");
    }
}

#[test]
fn path_patching_an_unchanged_sender_scores_zero() {
    let w = weights();
    let p = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers(), Direction::Denoise).unwrap();
    let s = p.path_patch(&[Sender::AttnBias { layer: 1 }], HookPoint::head(3, Site::AttnV, 0)).unwrap();
    assert!(s.abs() <= 1e-6);
}

#[test]
fn path_patching_checks_ordering() {
    let w = weights();
    let p = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers(), Direction::Denoise).unwrap();
    let recv = HookPoint::head(2, Site::AttnV, 0);
    assert!(matches!(p.path_patch(&[Sender::Head { layer: 2, head: 1 }], recv), Err(Error::Path(_))));
    assert!(matches!(p.path_patch(&[Sender::Mlp { layer: 3 }], recv), Err(Error::Path(_))));
    assert!(matches!(
        p.path_patch(&[Sender::Embedding], HookPoint::head(2, Site::AttnZ, 0)),
        Err(Error::Path(_))
    ));
    assert!(p.path_patch(&[Sender::Embedding], recv).is_ok());
}

#[test]
fn strongest_sender_beats_the_median_path() {
    let w = weights();
    let p = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers(), Direction::Denoise).unwrap();
    let v = p.head_sweep(Site::AttnV, 3..4, 0..4, HeadPositions::All).unwrap();
    let receiver_head = (0..4).max_by(|&a, &b| v.values[a].abs().total_cmp(&v.values[b].abs())).unwrap();
    let receiver = HookPoint::head(3, Site::AttnV, receiver_head);
    let senders: Vec<Sender> = (0..3).flat_map(|l| (0..4).map(move |h| Sender::Head { layer: l, head: h })).collect();
    let scores: Vec<f32> = senders.iter().map(|&s| p.path_patch(&[s], receiver).unwrap().abs()).collect();
    let best = scores.iter().copied().fold(0.0, f32::max);

    let mut sampled = Vec::new();
    for l in 1..4 {
        for h in 0..4 {
            for site in [Site::AttnQ, Site::AttnK, Site::AttnV] {
                let s = Sender::Head { layer: (l * 7 + h) % l, head: (h + l) % 4 };
                sampled.push(p.path_patch(&[s], HookPoint::head(l, site, h)).unwrap().abs());
            }
        }
    }
    sampled.sort_by(f32::total_cmp);
    assert!(best > sampled[sampled.len() / 2], "{best} vs median {}", sampled[sampled.len() / 2]);
}

#[test]
fn declarative_sweeps_and_means() {
    let w = weights();
    let spec = SweepSpec::from_toml("[[sweep]]\nkind = \"resid\"\nlayers = [1, 3]\npositions = [5, 10]\n").unwrap();
    let p = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers(), spec.direction).unwrap();
    let g = p.run_target(&spec.sweeps[0]).unwrap();
    assert_eq!(g.shape(), vec![2, 5]);
    assert_eq!(g.axes[0].labels, ["1", "2"]);
    assert_eq!(g.get(1, 2), p.resid_sweep(Site::ResidPre, 0..4, 0..10).unwrap().get(2, 7));

    let other = Patcher::new(&w, &CLEAN, &CORRUPTED, &answers().swapped(), Direction::Denoise).unwrap();
    let h = other.run_target(&spec.sweeps[0]).unwrap();
    let m = PatchGrid::mean(&[g.clone(), h.clone()]).unwrap();
    assert!((m.values[3] - (g.values[3] + h.values[3]) / 2.0).abs() < 1e-7);
    assert_eq!(SweepSpec::standard().sweeps.len(), 7);
}
