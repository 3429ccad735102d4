use super::config::ModelConfig;
use super::hooks::{HookPoint, Layer, Positions, Site};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Everything one block computed for one prompt.
///
/// Head-scoped activations are stored for all heads at once: `q`, `k`, `v`
/// and `z` are `[seq, n_heads·d_head]` with head `h` in columns
/// `h·d_head..(h+1)·d_head`; `pattern` is `[n_heads, seq, seq]`.
#[derive(Clone, Debug)]
pub struct LayerActivations {
    pub resid_pre: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub pattern: Tensor,
    pub z: Tensor,
    pub attn_out: Tensor,
    pub resid_mid: Tensor,
    pub mlp_out: Tensor,
    pub resid_post: Tensor,
}

/// Activations of a full forward pass, addressable by [`HookPoint`].
#[derive(Clone, Debug)]
pub struct ActivationCache {
    pub(crate) config: ModelConfig,
    pub(crate) tokens: Vec<u32>,
    pub(crate) layers: Vec<LayerActivations>,
    pub(crate) final_resid: Tensor,
    pub(crate) ln_final_scale: Vec<f32>,
    pub(crate) logits: Tensor,
}

impl ActivationCache {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn layers(&self) -> &[LayerActivations] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerActivations {
        &self.layers[l]
    }

    /// `[seq, n_vocab]`
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Logits at the last position.
    pub fn final_logits(&self) -> &[f32] {
        self.logits.row(self.seq_len() - 1)
    }

    /// Per-position divisor `sqrt(var + eps)` of the final layer norm.
    pub fn ln_final_scale(&self) -> &[f32] {
        &self.ln_final_scale
    }

    /// Residual stream entering the final layer norm.
    pub fn final_resid(&self) -> &Tensor {
        &self.final_resid
    }

    /// The activation at `hook` for all positions: `[seq, width]`.
    pub fn get(&self, hook: &HookPoint) -> Result<Tensor> {
        self.rows(hook, &Positions::All)
    }

    /// The activation at `hook` restricted to `positions`: `[n_positions, width]`.
    ///
    /// The result has exactly the shape a [`super::HookOverride`] on the same
    /// hook and positions expects.
    pub fn rows(&self, hook: &HookPoint, positions: &Positions) -> Result<Tensor> {
        hook.validate(&self.config)?;
        let seq = self.seq_len();
        let rows = positions.resolve(seq)?;
        let layer = match hook.layer {
            Layer::Final => return self.final_resid.select_rows(&rows),
            Layer::Block(l) => &self.layers[l],
        };
        let dh = self.config.d_head;
        let head_cols = |t: &Tensor, h: usize| -> Result<Tensor> {
            let mut out = Vec::with_capacity(rows.len() * dh);
            for &r in &rows {
                out.extend_from_slice(&t.row(r)[h * dh..(h + 1) * dh]);
            }
            Tensor::new(vec![rows.len(), dh], out)
        };
        match (hook.site, hook.head) {
            (Site::ResidPre, _) => layer.resid_pre.select_rows(&rows),
            (Site::ResidMid, _) => layer.resid_mid.select_rows(&rows),
            (Site::ResidPost, _) => layer.resid_post.select_rows(&rows),
            (Site::AttnOut, _) => layer.attn_out.select_rows(&rows),
            (Site::MlpOut, _) => layer.mlp_out.select_rows(&rows),
            (Site::AttnQ, Some(h)) => head_cols(&layer.q, h),
            (Site::AttnK, Some(h)) => head_cols(&layer.k, h),
            (Site::AttnV, Some(h)) => head_cols(&layer.v, h),
            (Site::AttnZ, Some(h)) => head_cols(&layer.z, h),
            (Site::AttnPattern, Some(h)) => {
                let block = &layer.pattern.data()[h * seq * seq..(h + 1) * seq * seq];
                let mut out = Vec::with_capacity(rows.len() * seq);
                for &r in &rows {
                    out.extend_from_slice(&block[r * seq..(r + 1) * seq]);
                }
                Tensor::new(vec![rows.len(), seq], out)
            }
            (site, None) => Err(Error::Hook(format!("{site} needs a head"))),
        }
    }

    /// Attention pattern of one head, `[seq, seq]`.
    pub fn pattern(&self, layer: usize, head: usize) -> Result<Tensor> {
        if layer >= self.config.n_layers || head >= self.config.n_heads {
            return Err(Error::Range(format!("head {layer}.{head} does not exist")));
        }
        self.get(&HookPoint::head(layer, Site::AttnPattern, head))
    }

    /// Head `h`'s output written into the residual stream at `position`,
    /// i.e. `z[position, h] · W_O^h` (without the shared output bias).
    pub fn head_result(&self, weights: &super::ModelWeights, layer: usize, head: usize, position: usize) -> Vec<f32> {
        let dh = self.config.d_head;
        let d = self.config.d_model;
        let z = &self.layers[layer].z.row(position)[head * dh..(head + 1) * dh];
        let w_o = &weights.layers[layer].w_o.data()[head * dh * d..(head + 1) * dh * d];
        let mut out = vec![0.0; d];
        crate::tensor::gemm_accumulate(1, dh, d, z, w_o, &mut out);
        out
    }
}
