//! Direct logit attribution and static QK/OV circuits.
//!
//! A residual-stream vector `x` at the final position is projected onto the
//! logit-difference direction the way the final layer norm would see it,
//! except that the normalizing scale is frozen to the one of the unmodified
//! run:
//!
//! ```text
//! proj(x) = ((x − mean(x)) / scale) · (ln_f.gain ⊙ direction)
//! ```
//!
//! `proj` is linear, so the projections of the embedding and every block
//! output add up to the projection of the final residual stream. The true
//! logit difference is that plus the constant `ln_f.bias · direction`, which
//! every grid carries in its `bias` field.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::AnswerPair;
use crate::model::{ActivationCache, HeadProjection, ModelWeights};
use crate::tensor::{self, Tensor};

/// `W_U[:, correct] − W_U[:, incorrect]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitDiffDirection {
    pub vector: Vec<f32>,
    pub pair: AnswerPair,
}

impl LogitDiffDirection {
    pub fn new(weights: &ModelWeights, pair: &AnswerPair) -> Result<Self> {
        let n_vocab = weights.config.n_vocab;
        for id in [pair.correct_id, pair.incorrect_id] {
            if id as usize >= n_vocab {
                return Err(Error::Vocab(format!("token id {id} >= vocabulary size {n_vocab}")));
            }
        }
        let c = weights.w_e.row(pair.correct_id as usize);
        let i = weights.w_e.row(pair.incorrect_id as usize);
        Self::from_vector(c.iter().zip(i).map(|(a, b)| a - b).collect(), pair.clone())
    }

    pub fn from_vector(vector: Vec<f32>, pair: AnswerPair) -> Result<Self> {
        if vector.iter().all(|&v| v == 0.0) {
            return Err(Error::Numeric("logit-difference direction is the zero vector".into()));
        }
        Ok(Self { vector, pair })
    }

    pub fn scaled(&self, c: f32) -> Result<Self> {
        Self::from_vector(self.vector.iter().map(|v| v * c).collect(), self.pair.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Accumulated,
    PerLayer,
    PerHead,
}

/// Labelled attribution values.
///
/// For `PerLayer` and `PerHead` grids, `values` exclude the constant `bias`;
/// `Σ values + bias` is the logit difference (per layer) or the attention
/// layers' total direct effect (per head, whose `bias` is the summed output
/// biases plus the final layer-norm bias term). `Accumulated` values already
/// include `bias`, so the last one is the model's logit difference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionGrid {
    pub kind: GridKind,
    pub labels: Vec<String>,
    pub values: Vec<f32>,
    pub bias: f32,
}

impl AttributionGrid {
    pub fn total(&self) -> f32 {
        match self.kind {
            GridKind::Accumulated => *self.values.last().unwrap_or(&self.bias),
            _ => self.values.iter().sum::<f32>() + self.bias,
        }
    }

    pub fn get(&self, label: &str) -> Option<f32> {
        self.labels.iter().position(|l| l == label).map(|i| self.values[i])
    }

    /// Row-major `[rows, values.len() / rows]` view, e.g. layers × heads.
    pub fn matrix(&self, rows: usize) -> Result<Vec<Vec<f32>>> {
        if rows == 0 || self.values.len() % rows != 0 {
            return Err(Error::Shape(format!("{} values do not split into {rows} rows", self.values.len())));
        }
        Ok(self.values.chunks(self.values.len() / rows).map(<[f32]>::to_vec).collect())
    }

    /// Indices sorted by value, largest first.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        idx
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,value\n");
        for (l, v) in self.labels.iter().zip(&self.values) {
            let _ = writeln!(out, "{l},{v}");
        }
        let _ = writeln!(out, "bias,{}", self.bias);
        out
    }

    /// Element-wise mean of grids with identical labels.
    pub fn mean(grids: &[AttributionGrid]) -> Result<AttributionGrid> {
        let first = grids.first().ok_or_else(|| Error::Shape("mean of zero grids".into()))?;
        if grids.iter().any(|g| g.kind != first.kind || g.labels != first.labels) {
            return Err(Error::Shape("grids have different labels".into()));
        }
        let n = grids.len() as f32;
        let mut values = vec![0.0; first.values.len()];
        for g in grids {
            for (m, v) in values.iter_mut().zip(&g.values) {
                *m += v;
            }
        }
        values.iter_mut().for_each(|v| *v /= n);
        Ok(AttributionGrid {
            kind: first.kind,
            labels: first.labels.clone(),
            values,
            bias: grids.iter().map(|g| g.bias).sum::<f32>() / n,
        })
    }
}

/// Frozen-scale projection at one position.
struct Projector {
    weighted: Vec<f32>,
    scale: f32,
    bias: f32,
}

impl Projector {
    fn new(weights: &ModelWeights, cache: &ActivationCache, direction: &LogitDiffDirection) -> Result<Self> {
        let d = weights.config.d_model;
        if direction.vector.len() != d {
            return Err(Error::Shape(format!("direction has {} entries, expected {d}", direction.vector.len())));
        }
        if cache.config() != &weights.config {
            return Err(Error::Shape("cache and weights come from different configurations".into()));
        }
        let end = cache.seq_len() - 1;
        let weighted = weights
            .ln_final_gain
            .data()
            .iter()
            .zip(&direction.vector)
            .map(|(g, v)| g * v)
            .collect();
        Ok(Self {
            weighted,
            scale: cache.ln_final_scale()[end],
            bias: tensor::dot(weights.ln_final_bias.data(), &direction.vector),
        })
    }

    fn project(&self, x: &[f32]) -> f32 {
        let mean = (x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64) as f32;
        let centered: f64 = x
            .iter()
            .zip(&self.weighted)
            .map(|(&v, &w)| (v - mean) as f64 * w as f64)
            .sum();
        (centered / self.scale as f64) as f32
    }
}

/// Logit lens over the accumulated residual stream at the final position:
/// `0-pre, 0-mid, 1-pre, …, (L-1)-mid, final-post`.
pub fn accumulated_logit_lens(
    weights: &ModelWeights,
    cache: &ActivationCache,
    direction: &LogitDiffDirection,
) -> Result<AttributionGrid> {
    let p = Projector::new(weights, cache, direction)?;
    let end = cache.seq_len() - 1;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (l, layer) in cache.layers().iter().enumerate() {
        labels.push(format!("{l}-pre"));
        values.push(p.project(layer.resid_pre.row(end)) + p.bias);
        labels.push(format!("{l}-mid"));
        values.push(p.project(layer.resid_mid.row(end)) + p.bias);
    }
    labels.push("final-post".into());
    values.push(p.project(cache.final_resid().row(end)) + p.bias);
    Ok(AttributionGrid {
        kind: GridKind::Accumulated,
        labels,
        values,
        bias: p.bias,
    })
}

/// Direct effect of the embedding and of every attention and MLP layer.
pub fn per_layer_attribution(
    weights: &ModelWeights,
    cache: &ActivationCache,
    direction: &LogitDiffDirection,
) -> Result<AttributionGrid> {
    let p = Projector::new(weights, cache, direction)?;
    let end = cache.seq_len() - 1;
    let mut labels = vec!["embed".to_owned()];
    let mut values = vec![p.project(cache.layer(0).resid_pre.row(end))];
    for (l, layer) in cache.layers().iter().enumerate() {
        labels.push(format!("{l}_attn_out"));
        values.push(p.project(layer.attn_out.row(end)));
        labels.push(format!("{l}_mlp_out"));
        values.push(p.project(layer.mlp_out.row(end)));
    }
    Ok(AttributionGrid {
        kind: GridKind::PerLayer,
        labels,
        values,
        bias: p.bias,
    })
}

/// Direct effect of each attention output bias `b_O`, one per layer.
pub fn attention_bias_attribution(
    weights: &ModelWeights,
    cache: &ActivationCache,
    direction: &LogitDiffDirection,
) -> Result<Vec<f32>> {
    let p = Projector::new(weights, cache, direction)?;
    Ok(weights.layers.iter().map(|l| p.project(l.b_o.data())).collect())
}

/// Direct effect of every attention head, layer-major (`"L.H"` labels).
pub fn per_head_attribution(
    weights: &ModelWeights,
    cache: &ActivationCache,
    direction: &LogitDiffDirection,
) -> Result<AttributionGrid> {
    let p = Projector::new(weights, cache, direction)?;
    let c = &weights.config;
    let end = cache.seq_len() - 1;
    let mut labels = Vec::with_capacity(c.n_layers * c.n_heads);
    let mut values = Vec::with_capacity(c.n_layers * c.n_heads);
    for l in 0..c.n_layers {
        for h in 0..c.n_heads {
            labels.push(format!("{l}.{h}"));
            values.push(p.project(&cache.head_result(weights, l, h, end)));
        }
    }
    let bias = weights.layers.iter().map(|l| p.project(l.b_o.data())).sum::<f32>() + p.bias;
    Ok(AttributionGrid {
        kind: GridKind::PerHead,
        labels,
        values,
        bias,
    })
}

/// Cached attention patterns for the requested `(layer, head)` pairs.
pub fn attention_patterns(cache: &ActivationCache, heads: &[(usize, usize)]) -> Result<Vec<Tensor>> {
    heads.iter().map(|&(l, h)| cache.pattern(l, h)).collect()
}

fn check_head(weights: &ModelWeights, layer: usize, head: usize) -> Result<()> {
    let c = &weights.config;
    if layer >= c.n_layers || head >= c.n_heads {
        return Err(Error::Range(format!("head {layer}.{head} does not exist")));
    }
    Ok(())
}

fn embed_subset(weights: &ModelWeights, tokens: &[u32]) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::Shape("empty token subset".into()));
    }
    let n_vocab = weights.config.n_vocab;
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= n_vocab) {
        return Err(Error::Vocab(format!("token id {bad} >= vocabulary size {n_vocab}")));
    }
    weights.w_e.select_rows(&tokens.iter().map(|&t| t as usize).collect::<Vec<_>>())
}

/// `M[i][j] = (W_E[t_i] W_Q^h) · (W_E[t_j] W_K^h) / √d_head` over `tokens`.
pub fn qk_circuit(weights: &ModelWeights, layer: usize, head: usize, tokens: &[u32]) -> Result<Tensor> {
    check_head(weights, layer, head)?;
    let dh = weights.config.d_head;
    let lw = &weights.layers[layer];
    let e = embed_subset(weights, tokens)?;
    let q = tensor::matmul(&e, &lw.head_input(HeadProjection::Query, head, dh))?;
    let k = tensor::matmul(&e, &lw.head_input(HeadProjection::Key, head, dh))?;
    let mut m = tensor::matmul(&q, &k.transpose()?)?;
    let scale = (dh as f32).sqrt();
    m.data_mut().iter_mut().for_each(|v| *v /= scale);
    Ok(m)
}

/// `M[d][s] = W_U[:, t_d] · (W_E[t_s] W_V^h W_O^h)`.
pub fn ov_circuit(weights: &ModelWeights, layer: usize, head: usize, src: &[u32], dst: &[u32]) -> Result<Tensor> {
    check_head(weights, layer, head)?;
    let dh = weights.config.d_head;
    let lw = &weights.layers[layer];
    let e = embed_subset(weights, src)?;
    let v = tensor::matmul(&e, &lw.head_input(HeadProjection::Value, head, dh))?;
    let out = tensor::matmul(&v, &lw.head_output(head, dh))?;
    // W_U columns of dst are the rows of W_E (tied embedding)
    let u = embed_subset(weights, dst)?;
    tensor::matmul(&u, &out.transpose()?)
}
