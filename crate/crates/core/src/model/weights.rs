//! GPT-2 parameters and safetensors ingestion.
//!
//! The published checkpoint stores every projection as a `Conv1D` weight of
//! shape `[in, out]` applied as `x · W`, which is already the orientation used
//! here, so no matrix is transposed on load. The fused `attn.c_attn` projection
//! (`[d_model, 3·d_model]`) is split column-wise into query, key and value
//! blocks; inside each block head `h` owns columns `h·d_head .. (h+1)·d_head`.
//! `attn.c_proj` rows are grouped the same way, so rows `h·d_head ..` form
//! head `h`'s output matrix `W_O^h`. The unembedding is the transpose of the
//! token embedding (GPT-2 ties the two).

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    /// `[d_model, n_heads·d_head]`, head-major columns.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub b_q: Tensor,
    pub b_k: Tensor,
    pub b_v: Tensor,
    /// `[n_heads·d_head, d_model]`, head-major rows.
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `[n_vocab, d_model]`
    pub w_e: Tensor,
    /// `[n_ctx, d_model]`
    pub w_pos: Tensor,
    pub layers: Vec<LayerWeights>,
    pub ln_final_gain: Tensor,
    pub ln_final_bias: Tensor,
    /// `[d_model, n_vocab]`, the transposed token embedding.
    pub w_u: Tensor,
}

/// Which projection of an attention head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadProjection {
    Query,
    Key,
    Value,
}

impl LayerWeights {
    fn projection(&self, which: HeadProjection) -> (&Tensor, &Tensor) {
        match which {
            HeadProjection::Query => (&self.w_q, &self.b_q),
            HeadProjection::Key => (&self.w_k, &self.b_k),
            HeadProjection::Value => (&self.w_v, &self.b_v),
        }
    }

    /// `[d_model, d_head]` input matrix of one head.
    pub fn head_input(&self, which: HeadProjection, head: usize, d_head: usize) -> Tensor {
        let (w, _) = self.projection(which);
        let (d_model, width) = w.dims2().expect("matrix");
        let mut out = Vec::with_capacity(d_model * d_head);
        for r in 0..d_model {
            out.extend_from_slice(&w.data()[r * width + head * d_head..r * width + (head + 1) * d_head]);
        }
        Tensor::new(vec![d_model, d_head], out).expect("head slice")
    }

    pub fn head_input_bias(&self, which: HeadProjection, head: usize, d_head: usize) -> &[f32] {
        let (_, b) = self.projection(which);
        &b.data()[head * d_head..(head + 1) * d_head]
    }

    /// `[d_head, d_model]` output matrix `W_O^h`.
    pub fn head_output(&self, head: usize, d_head: usize) -> Tensor {
        let d_model = self.w_o.cols();
        let rows = &self.w_o.data()[head * d_head * d_model..(head + 1) * d_head * d_model];
        Tensor::new(vec![d_head, d_model], rows.to_vec()).expect("head slice")
    }
}

fn tensor_bytes(view: &TensorView<'_>, name: &str) -> Result<Vec<f32>> {
    let raw = view.data();
    let out = match view.dtype() {
        Dtype::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
        Dtype::F16 => raw.chunks_exact(2).map(|b| f16_to_f32(u16::from_le_bytes([b[0], b[1]]))).collect(),
        Dtype::BF16 => raw
            .chunks_exact(2)
            .map(|b| f32::from_bits((u16::from_le_bytes([b[0], b[1]]) as u32) << 16))
            .collect(),
        other => return Err(Error::Format(format!("tensor `{name}` has unsupported dtype {other:?}"))),
    };
    Ok(out)
}

fn f16_to_f32(h: u16) -> f32 {
    let sign = ((h >> 15) as u32) << 31;
    let exp = ((h >> 10) & 0x1f) as u32;
    let frac = (h & 0x3ff) as u32;
    let bits = match (exp, frac) {
        (0, 0) => sign,
        (0, f) => {
            // subnormal: renormalize
            let shift = f.leading_zeros() - 21;
            let f = (f << shift) & 0x3ff;
            sign | ((127 - 15 + 1 - shift) << 23) | (f << 13)
        }
        (0x1f, f) => sign | 0x7f80_0000 | (f << 13),
        (e, f) => sign | ((e + 127 - 15) << 23) | (f << 13),
    };
    f32::from_bits(bits)
}

struct Archive<'a> {
    st: SafeTensors<'a>,
    prefix: &'static str,
}

impl Archive<'_> {
    fn get(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let full = format!("{}{name}", self.prefix);
        let view = self.st.tensor(&full).map_err(|_| Error::MissingTensor(name.to_owned()))?;
        if view.shape() != shape {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                view.shape()
            )));
        }
        Tensor::new(shape.to_vec(), tensor_bytes(&view, name)?)
    }
}

fn split_columns(w: &Tensor, parts: usize) -> Vec<Tensor> {
    let (rows, cols) = w.dims2().expect("matrix");
    let width = cols / parts;
    (0..parts)
        .map(|p| {
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                out.extend_from_slice(&w.data()[r * cols + p * width..r * cols + (p + 1) * width]);
            }
            Tensor::new(vec![rows, width], out).expect("split")
        })
        .collect()
}

fn split_vec(b: &Tensor, parts: usize) -> Vec<Tensor> {
    b.data()
        .chunks_exact(b.len() / parts)
        .map(|c| Tensor::from_vec(c.to_vec()).expect("split"))
        .collect()
}

/// Reads a GPT-2 safetensors checkpoint and validates it against `config`.
pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<ModelWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    ModelWeights::from_safetensors(&bytes, config)
}

impl ModelWeights {
    pub fn from_safetensors(bytes: &[u8], config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Format(format!("safetensors: {e}")))?;
        let prefix = if st.names().iter().any(|n| n.starts_with("transformer.")) {
            "transformer."
        } else {
            ""
        };
        let ar = Archive { st, prefix };
        let ModelConfig {
            n_layers,
            d_model: d,
            d_mlp,
            n_vocab,
            n_ctx,
            ..
        } = *config;

        let w_e = ar.get("wte.weight", &[n_vocab, d])?;
        let w_pos = ar.get("wpe.weight", &[n_ctx, d])?;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = |s: &str| format!("h.{l}.{s}");
            let c_attn = ar.get(&p("attn.c_attn.weight"), &[d, 3 * d])?;
            let c_attn_b = ar.get(&p("attn.c_attn.bias"), &[3 * d])?;
            let mut ws = split_columns(&c_attn, 3).into_iter();
            let mut bs = split_vec(&c_attn_b, 3).into_iter();
            layers.push(LayerWeights {
                ln1_gain: ar.get(&p("ln_1.weight"), &[d])?,
                ln1_bias: ar.get(&p("ln_1.bias"), &[d])?,
                w_q: ws.next().unwrap(),
                w_k: ws.next().unwrap(),
                w_v: ws.next().unwrap(),
                b_q: bs.next().unwrap(),
                b_k: bs.next().unwrap(),
                b_v: bs.next().unwrap(),
                w_o: ar.get(&p("attn.c_proj.weight"), &[d, d])?,
                b_o: ar.get(&p("attn.c_proj.bias"), &[d])?,
                ln2_gain: ar.get(&p("ln_2.weight"), &[d])?,
                ln2_bias: ar.get(&p("ln_2.bias"), &[d])?,
                w_in: ar.get(&p("mlp.c_fc.weight"), &[d, d_mlp])?,
                b_in: ar.get(&p("mlp.c_fc.bias"), &[d_mlp])?,
                w_out: ar.get(&p("mlp.c_proj.weight"), &[d_mlp, d])?,
                b_out: ar.get(&p("mlp.c_proj.bias"), &[d])?,
            });
        }
        let ln_final_gain = ar.get("ln_f.weight", &[d])?;
        let ln_final_bias = ar.get("ln_f.bias", &[d])?;
        let w_u = w_e.transpose()?;
        Ok(Self {
            config: *config,
            w_e,
            w_pos,
            layers,
            ln_final_gain,
            ln_final_bias,
            w_u,
        })
    }

    /// Tensors in checkpoint naming, fused QKV re-assembled.
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let d = self.config.d_model;
        let mut out = vec![
            ("wte.weight".to_owned(), self.w_e.shape().to_vec(), self.w_e.data().to_vec()),
            ("wpe.weight".to_owned(), self.w_pos.shape().to_vec(), self.w_pos.data().to_vec()),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            let mut c_attn = Vec::with_capacity(d * 3 * d);
            for r in 0..d {
                for w in [&lw.w_q, &lw.w_k, &lw.w_v] {
                    c_attn.extend_from_slice(w.row(r));
                }
            }
            let c_attn_b = [lw.b_q.data(), lw.b_k.data(), lw.b_v.data()].concat();
            let mut push = |name: &str, t: &Tensor| {
                out.push((format!("h.{l}.{name}"), t.shape().to_vec(), t.data().to_vec()));
            };
            push("ln_1.weight", &lw.ln1_gain);
            push("ln_1.bias", &lw.ln1_bias);
            push("attn.c_proj.weight", &lw.w_o);
            push("attn.c_proj.bias", &lw.b_o);
            push("ln_2.weight", &lw.ln2_gain);
            push("ln_2.bias", &lw.ln2_bias);
            push("mlp.c_fc.weight", &lw.w_in);
            push("mlp.c_fc.bias", &lw.b_in);
            push("mlp.c_proj.weight", &lw.w_out);
            push("mlp.c_proj.bias", &lw.b_out);
            out.push((format!("h.{l}.attn.c_attn.weight"), vec![d, 3 * d], c_attn));
            out.push((format!("h.{l}.attn.c_attn.bias"), vec![3 * d], c_attn_b));
        }
        out.push(("ln_f.weight".into(), vec![d], self.ln_final_gain.data().to_vec()));
        out.push(("ln_f.bias".into(), vec![d], self.ln_final_bias.data().to_vec()));
        out
    }

    /// Serializes to safetensors using the published GPT-2 tensor names.
    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        self.to_safetensors_without(&[])
    }

    /// Like [`Self::to_safetensors`] but omitting the named tensors; used to
    /// produce deliberately incomplete checkpoints.
    pub fn to_safetensors_without(&self, omit: &[&str]) -> Result<Vec<u8>> {
        let tensors: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .named_tensors()
            .into_iter()
            .filter(|(n, _, _)| !omit.contains(&n.as_str()))
            .map(|(n, s, d)| (n, s, d.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = tensors
            .iter()
            .map(|(n, s, b)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("format".to_owned(), "pt".to_owned());
        safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_safetensors()?)?;
        Ok(())
    }

    /// Number of learned parameters as stored in the checkpoint (the tied
    /// unembedding is not counted twice).
    pub fn parameter_count(&self) -> usize {
        let per_layer: usize = self
            .layers
            .iter()
            .map(|l| {
                [
                    &l.ln1_gain, &l.ln1_bias, &l.w_q, &l.w_k, &l.w_v, &l.b_q, &l.b_k, &l.b_v, &l.w_o, &l.b_o,
                    &l.ln2_gain, &l.ln2_bias, &l.w_in, &l.b_in, &l.w_out, &l.b_out,
                ]
                .iter()
                .map(|t| t.len())
                .sum::<usize>()
            })
            .sum();
        self.w_e.len() + self.w_pos.len() + per_layer + self.ln_final_gain.len() + self.ln_final_bias.len()
    }

    /// Seeded random weights with the given architecture.
    ///
    /// Scales are chosen so that logits are well spread (distinct argmax,
    /// non-uniform attention); useful for parity tests and timing runs when
    /// the published checkpoint is not at hand.
    pub fn synthetic(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: Vec<usize>, center: f32, half_width: f32| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| center + half_width * (2.0 * rng.random::<f32>() - 1.0)).collect();
            Tensor::new(shape, data).expect("shape")
        };
        let ModelConfig {
            n_layers,
            d_model: d,
            d_mlp,
            n_vocab,
            n_ctx,
            ..
        } = *config;
        let w_e = uniform(vec![n_vocab, d], 0.0, 0.2);
        let w_pos = uniform(vec![n_ctx, d], 0.0, 0.1);
        let attn = 1.7 / (d as f32).sqrt();
        let layers = (0..n_layers)
            .map(|_| LayerWeights {
                ln1_gain: uniform(vec![d], 1.0, 0.2),
                ln1_bias: uniform(vec![d], 0.0, 0.1),
                w_q: uniform(vec![d, d], 0.0, attn),
                w_k: uniform(vec![d, d], 0.0, attn),
                w_v: uniform(vec![d, d], 0.0, attn),
                b_q: uniform(vec![d], 0.0, 0.1),
                b_k: uniform(vec![d], 0.0, 0.1),
                b_v: uniform(vec![d], 0.0, 0.1),
                w_o: uniform(vec![d, d], 0.0, 0.5 / (d as f32).sqrt()),
                b_o: uniform(vec![d], 0.0, 0.05),
                ln2_gain: uniform(vec![d], 1.0, 0.2),
                ln2_bias: uniform(vec![d], 0.0, 0.1),
                w_in: uniform(vec![d, d_mlp], 0.0, 1.7 / (d as f32).sqrt()),
                b_in: uniform(vec![d_mlp], 0.0, 0.1),
                w_out: uniform(vec![d_mlp, d], 0.0, 0.5 / (d_mlp as f32).sqrt()),
                b_out: uniform(vec![d], 0.0, 0.05),
            })
            .collect();
        let ln_final_gain = uniform(vec![d], 1.0, 0.2);
        let ln_final_bias = uniform(vec![d], 0.0, 0.1);
        let w_u = w_e.transpose()?;
        Ok(Self {
            config: *config,
            w_e,
            w_pos,
            layers,
            ln_final_gain,
            ln_final_bias,
            w_u,
        })
    }

    /// Replaces every attention and MLP output projection (and bias) by zeros,
    /// so blocks contribute nothing to the residual stream.
    pub fn zero_block_outputs(&mut self) {
        for l in &mut self.layers {
            for t in [&mut l.w_o, &mut l.b_o, &mut l.w_out, &mut l.b_out] {
                t.data_mut().fill(0.0);
            }
        }
    }
}
