mod common;

use circuitscope::{ModelConfig, ModelWeights};

#[test]
fn synthetic_weights_match_reference_logits() {
    let fixture = common::parity_fixture();
    let w = ModelWeights::synthetic(&ModelConfig::gpt2_small(), fixture.seed).unwrap();
    let tok = common::gpt2_tokenizer();
    for (i, p) in fixture.prompts.iter().enumerate() {
        assert_eq!(tok.encode(&p.text, fixture.bos).unwrap().ids, p.ids, "prompt {i}");
        let ours = w.final_logits(&p.ids, &[]).unwrap();
        let reference = fixture.logits(i);
        let diff = ours.iter().zip(reference).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-3, "prompt {i}: max abs diff {diff}");
        assert_eq!(common::argmax(&ours), common::argmax(reference), "prompt {i}");
    }
}
