use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. [`ModelConfig::gpt2_small`] is the published
/// 12-layer checkpoint; smaller configs are used by tests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub n_vocab: usize,
    pub n_ctx: usize,
    pub ln_eps: f32,
}

impl ModelConfig {
    pub const fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_head: 64,
            d_mlp: 3072,
            n_vocab: 50257,
            n_ctx: 1024,
            ln_eps: 1e-5,
        }
    }

    /// Reads a Hugging Face GPT-2 `config.json` (`n_layer`, `n_head`,
    /// `n_embd`, ...); missing keys default to GPT-2 Small.
    pub fn from_hf_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Hf {
            n_layer: Option<usize>,
            n_head: Option<usize>,
            n_embd: Option<usize>,
            n_inner: Option<usize>,
            vocab_size: Option<usize>,
            n_positions: Option<usize>,
            layer_norm_epsilon: Option<f32>,
            activation_function: Option<String>,
        }
        let hf: Hf = serde_json::from_str(text).map_err(|e| Error::Config(format!("config.json: {e}")))?;
        if let Some(act) = hf.activation_function.as_deref() {
            if act != "gelu_new" {
                return Err(Error::Config(format!("unsupported activation `{act}` (only gelu_new)")));
            }
        }
        let base = Self::gpt2_small();
        let n_heads = hf.n_head.unwrap_or(base.n_heads);
        let d_model = hf.n_embd.unwrap_or(base.d_model);
        let c = Self {
            n_layers: hf.n_layer.unwrap_or(base.n_layers),
            n_heads,
            d_model,
            d_head: if n_heads == 0 { 0 } else { d_model / n_heads },
            d_mlp: hf.n_inner.unwrap_or(4 * d_model),
            n_vocab: hf.vocab_size.unwrap_or(base.n_vocab),
            n_ctx: hf.n_positions.unwrap_or(base.n_ctx),
            ln_eps: hf.layer_norm_epsilon.unwrap_or(base.ln_eps),
        };
        c.validate()?;
        Ok(c)
    }

    /// The inverse of [`ModelConfig::from_hf_json`].
    pub fn to_hf_json(&self) -> String {
        serde_json::json!({
            "model_type": "gpt2",
            "activation_function": "gelu_new",
            "n_layer": self.n_layers,
            "n_head": self.n_heads,
            "n_embd": self.d_model,
            "n_inner": self.d_mlp,
            "vocab_size": self.n_vocab,
            "n_positions": self.n_ctx,
            "layer_norm_epsilon": self.ln_eps,
        })
        .to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_layers, self.n_heads, self.d_model, self.d_head, self.d_mlp, self.n_vocab, self.n_ctx];
        if dims.contains(&0) {
            return Err(Error::Config(format!("zero-sized dimension in {self:?}")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} × d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !(self.ln_eps >= 0.0) {
            return Err(Error::Config("ln_eps must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::gpt2_small()
    }
}
