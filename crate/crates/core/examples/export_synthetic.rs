//! Writes seeded synthetic GPT-2 Small weights as a safetensors checkpoint.
//!
//! Usage: export_synthetic <out.safetensors> [seed]

use std::path::PathBuf;

use circuitscope::{ModelConfig, ModelWeights};

fn main() -> circuitscope::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().expect("usage: export_synthetic <out.safetensors> [seed]"));
    let seed = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let w = ModelWeights::synthetic(&ModelConfig::gpt2_small(), seed)?;
    w.save(&out)?;
    eprintln!("wrote {} ({} parameters, seed {seed})", out.display(), w.parameter_count());
    Ok(())
}
