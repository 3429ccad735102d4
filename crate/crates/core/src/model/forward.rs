//! The GPT-2 forward pass with per-site overrides.
//!
//! Pre-LN blocks: `x + attn(ln1(x))`, then `+ mlp(ln2(·))`; learned positional
//! embeddings are added to the token embeddings; the final layer norm feeds
//! the tied unembedding. Each override is applied right after its site is
//! computed, so everything downstream reflects it and everything upstream is
//! untouched.

use super::cache::{ActivationCache, LayerActivations};
use super::config::ModelConfig;
use super::hooks::{HookOverride, HookPoint, Layer, Site};
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::{self, gemm_accumulate, Tensor};

/// Causal attention pattern `softmax(q·kᵀ / √d_head)` with `pattern[i][j] = 0`
/// for `j > i`. `q`, `k` are `[seq, d_head]`.
pub fn causal_pattern(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (seq, dh) = q.dims2()?;
    if k.dims2()? != (seq, dh) {
        return Err(Error::Shape(format!("q {:?} vs k {:?}", q.shape(), k.shape())));
    }
    let scale = (dh as f32).sqrt();
    let mut pattern = vec![0.0f32; seq * seq];
    for i in 0..seq {
        let row = &mut pattern[i * seq..i * seq + i + 1];
        for (j, s) in row.iter_mut().enumerate() {
            *s = tensor::dot(q.row(i), k.row(j)) / scale;
        }
        tensor::softmax_in_place(row)?;
    }
    Tensor::new(vec![seq, seq], pattern)
}

/// One attention head: returns `(pattern [seq, seq], z = pattern · v [seq, d_head])`.
pub fn attention_head(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let pattern = causal_pattern(q, k)?;
    let z = tensor::matmul(&pattern, v)?;
    Ok((pattern, z))
}

fn head_columns(t: &Tensor, head: usize, dh: usize) -> Tensor {
    let seq = t.rows();
    let mut out = Vec::with_capacity(seq * dh);
    for r in 0..seq {
        out.extend_from_slice(&t.row(r)[head * dh..(head + 1) * dh]);
    }
    Tensor::new(vec![seq, dh], out).expect("head columns")
}

/// How many logit rows to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
}

struct Checked<'a> {
    hook: HookPoint,
    rows: Vec<usize>,
    replacement: &'a Tensor,
}

struct Overrides<'a> {
    items: Vec<Checked<'a>>,
    dh: usize,
}

impl<'a> Overrides<'a> {
    fn new(list: &'a [HookOverride], config: &ModelConfig, seq: usize) -> Result<Self> {
        let items = list
            .iter()
            .map(|o| {
                Ok(Checked {
                    hook: o.target,
                    rows: o.check(config, seq)?,
                    replacement: &o.replacement,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { items, dh: config.d_head })
    }

    fn matching(&self, layer: Layer, site: Site) -> impl Iterator<Item = &Checked<'a>> + '_ {
        self.items
            .iter()
            .filter(move |c| c.hook.layer == layer && c.hook.site == site)
    }

    /// Row-replaces a `[seq, width]` activation.
    fn apply_rows(&self, layer: Layer, site: Site, t: &mut Tensor) {
        for c in self.matching(layer, site) {
            for (i, &p) in c.rows.iter().enumerate() {
                t.row_mut(p).copy_from_slice(c.replacement.row(i));
            }
        }
    }

    /// Replaces one head's columns of a `[seq, n_heads·d_head]` activation.
    fn apply_head_cols(&self, layer: usize, site: Site, t: &mut Tensor) {
        let dh = self.dh;
        for c in self.matching(Layer::Block(layer), site) {
            let h = c.hook.head.expect("validated");
            for (i, &p) in c.rows.iter().enumerate() {
                t.row_mut(p)[h * dh..(h + 1) * dh].copy_from_slice(c.replacement.row(i));
            }
        }
    }

    fn apply_pattern(&self, layer: usize, head: usize, pattern: &mut Tensor) {
        for c in self.matching(Layer::Block(layer), Site::AttnPattern) {
            if c.hook.head == Some(head) {
                for (i, &p) in c.rows.iter().enumerate() {
                    pattern.row_mut(p).copy_from_slice(c.replacement.row(i));
                }
            }
        }
    }
}

pub(crate) struct RunOutput {
    pub layers: Vec<LayerActivations>,
    pub final_resid: Tensor,
    pub ln_final_scale: Vec<f32>,
    pub logits: Tensor,
}

impl ModelWeights {
    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if tokens.len() > c.n_ctx {
            return Err(Error::ContextLength {
                len: tokens.len(),
                max: c.n_ctx,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.n_vocab) {
            return Err(Error::Vocab(format!("token id {bad} >= vocabulary size {}", c.n_vocab)));
        }
        Ok(())
    }

    /// Token plus positional embedding, `[seq, d_model]`.
    pub fn embed(&self, tokens: &[u32]) -> Tensor {
        let d = self.config.d_model;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (pos, &t) in tokens.iter().enumerate() {
            let te = self.w_e.row(t as usize);
            let pe = self.w_pos.row(pos);
            x.extend(te.iter().zip(pe).map(|(a, b)| a + b));
        }
        Tensor::new(vec![tokens.len(), d], x).expect("embedding")
    }

    pub(crate) fn run(
        &self,
        tokens: &[u32],
        overrides: &[HookOverride],
        record: bool,
        logit_rows: LogitRows,
        resume: Option<(usize, &Tensor)>,
    ) -> Result<RunOutput> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let seq = tokens.len();
        let dh = c.d_head;
        let ov = Overrides::new(overrides, c, seq)?;
        let mut recorded = Vec::with_capacity(if record { c.n_layers } else { 0 });

        let (start, mut x) = match resume {
            Some((l, resid_pre)) => (l, resid_pre.clone()),
            None => (0, self.embed(tokens)),
        };
        for (l, lw) in self.layers.iter().enumerate().skip(start) {
            let at = Layer::Block(l);
            ov.apply_rows(at, Site::ResidPre, &mut x);
            let resid_pre = x;

            let (ln1, _) = tensor::layer_norm_rows(&resid_pre, lw.ln1_gain.data(), lw.ln1_bias.data(), c.ln_eps);
            let mut q = tensor::linear(&ln1, &lw.w_q, lw.b_q.data())?;
            let mut k = tensor::linear(&ln1, &lw.w_k, lw.b_k.data())?;
            let mut v = tensor::linear(&ln1, &lw.w_v, lw.b_v.data())?;
            ov.apply_head_cols(l, Site::AttnQ, &mut q);
            ov.apply_head_cols(l, Site::AttnK, &mut k);
            ov.apply_head_cols(l, Site::AttnV, &mut v);

            let mut patterns = Vec::with_capacity(c.n_heads * seq * seq);
            let mut z = Tensor::zeros(vec![seq, c.n_heads * dh]);
            for h in 0..c.n_heads {
                let mut pattern = causal_pattern(&head_columns(&q, h, dh), &head_columns(&k, h, dh))?;
                ov.apply_pattern(l, h, &mut pattern);
                let zh = tensor::matmul(&pattern, &head_columns(&v, h, dh))?;
                for r in 0..seq {
                    z.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(zh.row(r));
                }
                if record {
                    patterns.extend_from_slice(pattern.data());
                }
            }
            ov.apply_head_cols(l, Site::AttnZ, &mut z);

            let mut attn_out = tensor::linear(&z, &lw.w_o, lw.b_o.data())?;
            ov.apply_rows(at, Site::AttnOut, &mut attn_out);

            let mut resid_mid = add(&resid_pre, &attn_out);
            ov.apply_rows(at, Site::ResidMid, &mut resid_mid);

            let (ln2, _) = tensor::layer_norm_rows(&resid_mid, lw.ln2_gain.data(), lw.ln2_bias.data(), c.ln_eps);
            let mut hidden = tensor::linear(&ln2, &lw.w_in, lw.b_in.data())?;
            tensor::gelu_in_place(hidden.data_mut());
            let mut mlp_out = tensor::linear(&hidden, &lw.w_out, lw.b_out.data())?;
            ov.apply_rows(at, Site::MlpOut, &mut mlp_out);

            let mut resid_post = add(&resid_mid, &mlp_out);
            ov.apply_rows(at, Site::ResidPost, &mut resid_post);

            x = resid_post.clone();
            if record {
                recorded.push(LayerActivations {
                    resid_pre,
                    q,
                    k,
                    v,
                    pattern: Tensor::new(vec![c.n_heads, seq, seq], patterns)?,
                    z,
                    attn_out,
                    resid_mid,
                    mlp_out,
                    resid_post,
                });
            }
        }
        ov.apply_rows(Layer::Final, Site::ResidPost, &mut x);

        let (normed, ln_final_scale) =
            tensor::layer_norm_rows(&x, self.ln_final_gain.data(), self.ln_final_bias.data(), c.ln_eps);
        let logits = match logit_rows {
            LogitRows::All => tensor::matmul(&normed, &self.w_u)?,
            LogitRows::Last => {
                let mut out = vec![0.0; c.n_vocab];
                gemm_accumulate(1, c.d_model, c.n_vocab, normed.row(seq - 1), self.w_u.data(), &mut out);
                Tensor::new(vec![1, c.n_vocab], out)?
            }
        };
        Ok(RunOutput {
            layers: recorded,
            final_resid: x,
            ln_final_scale,
            logits,
        })
    }

    /// Full forward pass caching every hook point.
    pub fn forward(&self, tokens: &[u32], overrides: &[HookOverride]) -> Result<ActivationCache> {
        let out = self.run(tokens, overrides, true, LogitRows::All, None)?;
        Ok(ActivationCache {
            config: self.config,
            tokens: tokens.to_vec(),
            layers: out.layers,
            final_resid: out.final_resid,
            ln_final_scale: out.ln_final_scale,
            logits: out.logits,
        })
    }

    /// Last-position logits only, without caching activations.
    ///
    /// Bitwise equal to `forward(..).final_logits()`: every kernel computes a
    /// row independently of how many rows are in the batch.
    pub fn final_logits(&self, tokens: &[u32], overrides: &[HookOverride]) -> Result<Vec<f32>> {
        Ok(self.run(tokens, overrides, false, LogitRows::Last, None)?.logits.into_data())
    }

    /// [`final_logits`](Self::final_logits) resumed at block `layer` from a
    /// cached `resid_pre` of that layer for the same tokens. Every override
    /// must target `layer` or later. Bitwise equal to the full run when
    /// `resid_pre` came from an unpatched run of the same tokens.
    pub fn final_logits_from(
        &self,
        tokens: &[u32],
        layer: usize,
        resid_pre: &Tensor,
        overrides: &[HookOverride],
    ) -> Result<Vec<f32>> {
        let c = &self.config;
        if layer >= c.n_layers {
            return Err(Error::Range(format!("cannot resume at layer {layer} of {}", c.n_layers)));
        }
        if resid_pre.shape() != [tokens.len(), c.d_model] {
            return Err(Error::Shape(format!(
                "resume state {:?} does not match {} tokens × {}",
                resid_pre.shape(),
                tokens.len(),
                c.d_model
            )));
        }
        if let Some(o) = overrides.iter().find(|o| matches!(o.target.layer, Layer::Block(l) if l < layer)) {
            return Err(Error::Override(format!("{} lies before resume layer {layer}", o.target)));
        }
        Ok(self
            .run(tokens, overrides, false, LogitRows::Last, Some((layer, resid_pre)))?
            .logits
            .into_data())
    }
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::hooks::Positions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_heads: 4,
            d_model: 16,
            d_head: 4,
            d_mlp: 32,
            n_vocab: 50,
            n_ctx: 12,
            ln_eps: 1e-5,
        }
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let q = rand_matrix(1, 4, 1);
        let (p, z) = attention_head(&q, &q, &q).unwrap();
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(z, q);
    }

    #[test]
    fn uniform_queries_give_uniform_rows() {
        let q = Tensor::new(vec![5, 3], vec![0.3; 15]).unwrap();
        let (p, _) = attention_head(&q, &q, &q).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expected = if j <= i { 1.0 / (i + 1) as f32 } else { 0.0 };
                assert!((p.row(i)[j] - expected).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn attention_matches_double_loop_oracle() {
        let (q, k, v) = (rand_matrix(6, 4, 2), rand_matrix(6, 4, 3), rand_matrix(6, 4, 4));
        let (p, z) = attention_head(&q, &k, &v).unwrap();
        for i in 0..6 {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..4).map(|t| q.row(i)[t] as f64 * k.row(j)[t] as f64).sum::<f64>() / 2.0)
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let zsum: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..6 {
                let expected = if j <= i { (scores[j] - m).exp() / zsum } else { 0.0 };
                assert!((p.row(i)[j] as f64 - expected).abs() <= 1e-6);
            }
            for t in 0..4 {
                let expected: f64 = (0..=i)
                    .map(|j| (scores[j] - m).exp() / zsum * v.row(j)[t] as f64)
                    .sum();
                assert!((z.row(i)[t] as f64 - expected).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn final_logits_equal_cached_last_row() {
        let w = ModelWeights::synthetic(&tiny(), 9).unwrap();
        let tokens = [3, 14, 15, 9, 26, 5];
        let cache = w.forward(&tokens, &[]).unwrap();
        assert_eq!(w.final_logits(&tokens, &[]).unwrap(), cache.final_logits());
    }

    #[test]
    fn resumed_run_matches_full_run() {
        let w = ModelWeights::synthetic(&tiny(), 9).unwrap();
        let tokens = [3, 14, 15, 9, 26, 5];
        let cache = w.forward(&tokens, &[]).unwrap();
        let patch = HookOverride::new(
            HookPoint::head(2, Site::AttnV, 1),
            Positions::Subset(vec![4]),
            Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.0]).unwrap(),
        );
        let full = w.final_logits(&tokens, std::slice::from_ref(&patch)).unwrap();
        let resumed = w.final_logits_from(&tokens, 2, &cache.layer(2).resid_pre, std::slice::from_ref(&patch)).unwrap();
        assert_eq!(full, resumed);
        assert_eq!(w.final_logits_from(&tokens, 1, &cache.layer(1).resid_pre, &[]).unwrap(), cache.final_logits());
        assert!(matches!(
            w.final_logits_from(&tokens, 3, &cache.layer(2).resid_pre, &[patch]),
            Err(Error::Range(_)) | Err(Error::Override(_))
        ));
        let early = HookOverride::new(HookPoint::resid_pre(0), Positions::All, cache.layer(0).resid_pre.clone());
        assert!(matches!(
            w.final_logits_from(&tokens, 1, &cache.layer(1).resid_pre, &[early]),
            Err(Error::Override(_))
        ));
    }

    #[test]
    fn override_shape_mismatch_is_rejected() {
        let w = ModelWeights::synthetic(&tiny(), 9).unwrap();
        let bad = HookOverride::new(HookPoint::resid_pre(1), Positions::Subset(vec![0, 1]), Tensor::zeros(vec![1, 16]));
        assert!(matches!(w.forward(&[1, 2, 3], &[bad]), Err(Error::Override(_))));
        let out_of_range = HookOverride::new(HookPoint::resid_pre(1), Positions::Subset(vec![5]), Tensor::zeros(vec![1, 16]));
        assert!(matches!(w.forward(&[1, 2, 3], &[out_of_range]), Err(Error::Override(_))));
    }

    #[test]
    fn token_validation() {
        let w = ModelWeights::synthetic(&tiny(), 9).unwrap();
        assert!(matches!(w.forward(&[50], &[]), Err(Error::Vocab(_))));
        assert!(matches!(w.forward(&[1; 13], &[]), Err(Error::ContextLength { .. })));
        assert!(w.forward(&[], &[]).is_err());
    }
}
