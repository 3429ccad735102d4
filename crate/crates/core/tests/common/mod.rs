#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use circuitscope::Tokenizer;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn gpt2_tokenizer() -> &'static Tokenizer {
    static TOK: OnceLock<Tokenizer> = OnceLock::new();
    TOK.get_or_init(|| Tokenizer::from_dir(&repo_root().join("assets/gpt2")).expect("bundled GPT-2 vocab"))
}

#[derive(serde::Deserialize)]
pub struct ParityPrompt {
    pub text: String,
    pub ids: Vec<u32>,
}

#[derive(serde::Deserialize)]
pub struct ParityFixture {
    pub seed: u64,
    pub bos: bool,
    pub prompts: Vec<ParityPrompt>,
    #[serde(skip)]
    pub logits: Vec<f32>,
}

impl ParityFixture {
    pub fn logits(&self, i: usize) -> &[f32] {
        let n = self.logits.len() / self.prompts.len();
        &self.logits[i * n..(i + 1) * n]
    }
}

/// Synthetic-weight prompts and reference logits produced by
/// `scripts/reference_logits.py`.
pub fn parity_fixture() -> ParityFixture {
    let dir = repo_root().join("crates/core/tests/fixtures/parity");
    let mut f: ParityFixture =
        serde_json::from_str(&std::fs::read_to_string(dir.join("prompts.json")).unwrap()).unwrap();
    f.logits = std::fs::read(dir.join("logits.f32"))
        .unwrap()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    f
}

pub fn argmax(xs: &[f32]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
