//! Activation patching between an aligned clean/corrupted prompt pair.
//!
//! One run (the *base*) is intervened on with activations from the other run
//! (the *source*). Denoising patches clean values into the corrupted run,
//! noising patches corrupted values into the clean run. In both directions
//! the score is
//!
//! ```text
//! (patched_ld − base_ld) / (source_ld − base_ld)
//! ```
//!
//! so the untouched base run scores 0 and a fully swapped run scores 1.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{logit_diff_row, AnswerPair};
use crate::model::{ActivationCache, HookOverride, HookPoint, Layer, ModelWeights, Positions, Site};
use crate::tensor::{self, Tensor};

/// Smallest `|source_ld − base_ld|` a score is normalized by.
pub const MIN_BASELINE_GAP: f32 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Clean activations into the corrupted run.
    #[default]
    Denoise,
    /// Corrupted activations into the clean run.
    Noise,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(Direction::Denoise),
            "noise" => Ok(Direction::Noise),
            _ => Err(Error::Config(format!("direction must be `denoise` or `noise`, got `{s}`"))),
        }
    }
}

/// `(patched − corrupted) / (clean − corrupted)`.
pub fn normalized_score(patched_ld: f32, clean_ld: f32, corrupted_ld: f32) -> Result<f32> {
    if (clean_ld - corrupted_ld).abs() < MIN_BASELINE_GAP {
        return Err(Error::Baseline {
            clean: clean_ld,
            corrupted: corrupted_ld,
        });
    }
    Ok((patched_ld - corrupted_ld) / (clean_ld - corrupted_ld))
}

/// Which query rows a head-level patch replaces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPositions {
    #[default]
    All,
    /// Only the final position.
    End,
}

/// One named axis of a [`PatchGrid`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub labels: Vec<String>,
}

impl Axis {
    pub fn new(name: &str, labels: Vec<String>) -> Self {
        Self {
            name: name.to_owned(),
            labels,
        }
    }

    fn indices(name: &str, range: Range<usize>) -> Self {
        Self::new(name, range.map(|i| i.to_string()).collect())
    }
}

/// Normalized patching scores over a rectangular sweep, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub name: String,
    pub direction: Direction,
    pub axes: Vec<Axis>,
    pub values: Vec<f32>,
    pub clean_logit_diff: f32,
    pub corrupted_logit_diff: f32,
}

impl PatchGrid {
    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.labels.len()).collect()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.axes[1].labels.len() + col]
    }

    /// Row-major rows of a 2-D grid.
    pub fn rows(&self) -> Vec<&[f32]> {
        self.values.chunks(self.axes[1].labels.len()).collect()
    }

    /// `(row, col)` of cells sorted by value, largest first.
    pub fn ranked(&self) -> Vec<(usize, usize)> {
        let cols = self.axes[1].labels.len();
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        idx.into_iter().map(|i| (i / cols, i % cols)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{},{},score", self.axes[0].name, self.axes[1].name);
        for (r, row) in self.rows().into_iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{v}", self.axes[0].labels[r], self.axes[1].labels[c]);
            }
        }
        out
    }

    /// Cell-wise mean of grids over the same sweep (scores are normalized per
    /// pair first, then averaged).
    pub fn mean(grids: &[PatchGrid]) -> Result<PatchGrid> {
        let first = grids.first().ok_or_else(|| Error::Shape("mean of zero grids".into()))?;
        if grids.iter().any(|g| g.shape() != first.shape() || g.name != first.name) {
            return Err(Error::Shape("grids come from different sweeps".into()));
        }
        let n = grids.len() as f32;
        let mut out = first.clone();
        out.values = (0..first.values.len())
            .map(|i| grids.iter().map(|g| g.values[i]).sum::<f32>() / n)
            .collect();
        out.clean_logit_diff = grids.iter().map(|g| g.clean_logit_diff).sum::<f32>() / n;
        out.corrupted_logit_diff = grids.iter().map(|g| g.corrupted_logit_diff).sum::<f32>() / n;
        Ok(out)
    }
}

/// A residual-stream writer whose direct contribution can be swapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sender {
    /// Token plus positional embedding.
    Embedding,
    Head { layer: usize, head: usize },
    /// The attention output bias of one layer.
    AttnBias { layer: usize },
    Mlp { layer: usize },
}

impl Sender {
    fn layer(self) -> Option<usize> {
        match self {
            Sender::Embedding => None,
            Sender::Head { layer, .. } | Sender::AttnBias { layer } | Sender::Mlp { layer } => Some(layer),
        }
    }

    /// Every writer into `resid_pre(layer)`.
    pub fn all_before(layer: usize, n_heads: usize) -> Vec<Sender> {
        let mut out = vec![Sender::Embedding];
        for l in 0..layer {
            out.extend((0..n_heads).map(|head| Sender::Head { layer: l, head }));
            out.push(Sender::AttnBias { layer: l });
            out.push(Sender::Mlp { layer: l });
        }
        out
    }
}

/// Baseline runs of one aligned prompt pair plus the machinery to score
/// patched runs against them.
pub struct Patcher<'w> {
    weights: &'w ModelWeights,
    pair: AnswerPair,
    direction: Direction,
    base_tokens: Vec<u32>,
    source: ActivationCache,
    base: ActivationCache,
    base_ld: f32,
    source_ld: f32,
    parallel: bool,
}

impl<'w> Patcher<'w> {
    pub fn new(
        weights: &'w ModelWeights,
        clean: &[u32],
        corrupted: &[u32],
        pair: &AnswerPair,
        direction: Direction,
    ) -> Result<Self> {
        if clean.len() != corrupted.len() {
            return Err(Error::Alignment(format!(
                "clean prompt has {} tokens, corrupted has {}",
                clean.len(),
                corrupted.len()
            )));
        }
        let clean_cache = weights.forward(clean, &[])?;
        let corrupted_cache = weights.forward(corrupted, &[])?;
        let clean_ld = logit_diff_row(clean_cache.final_logits(), pair);
        let corrupted_ld = logit_diff_row(corrupted_cache.final_logits(), pair);
        normalized_score(clean_ld, clean_ld, corrupted_ld)?;
        let (source, base, source_ld, base_ld, base_tokens) = match direction {
            Direction::Denoise => (clean_cache, corrupted_cache, clean_ld, corrupted_ld, corrupted.to_vec()),
            Direction::Noise => (corrupted_cache, clean_cache, corrupted_ld, clean_ld, clean.to_vec()),
        };
        Ok(Self {
            weights,
            pair: pair.clone(),
            direction,
            base_tokens,
            source,
            base,
            base_ld,
            source_ld,
            parallel: cfg!(feature = "parallel"),
        })
    }

    /// Evaluate sweep cells on one thread (or on the rayon pool, the default
    /// when the `parallel` feature is on).
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel && cfg!(feature = "parallel");
        self
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn seq_len(&self) -> usize {
        self.base_tokens.len()
    }

    /// Run whose activations are patched in.
    pub fn source(&self) -> &ActivationCache {
        &self.source
    }

    /// Run that is intervened on.
    pub fn base(&self) -> &ActivationCache {
        &self.base
    }

    pub fn clean_logit_diff(&self) -> f32 {
        match self.direction {
            Direction::Denoise => self.source_ld,
            Direction::Noise => self.base_ld,
        }
    }

    pub fn corrupted_logit_diff(&self) -> f32 {
        match self.direction {
            Direction::Denoise => self.base_ld,
            Direction::Noise => self.source_ld,
        }
    }

    /// Logit difference of the base run under `overrides`.
    pub fn patched_logit_diff(&self, overrides: &[HookOverride]) -> Result<f32> {
        // blocks before the first patched one match the base run
        let first = overrides
            .iter()
            .map(|o| match o.target.layer {
                Layer::Block(l) => l,
                Layer::Final => self.weights.config.n_layers,
            })
            .min();
        let logits = match first {
            Some(l) if l > 0 && l < self.weights.config.n_layers => {
                self.weights
                    .final_logits_from(&self.base_tokens, l, &self.base.layer(l).resid_pre, overrides)?
            }
            _ => self.weights.final_logits(&self.base_tokens, overrides)?,
        };
        Ok(logit_diff_row(&logits, &self.pair))
    }

    /// Normalized score of the base run under `overrides`.
    pub fn score(&self, overrides: &[HookOverride]) -> Result<f32> {
        let patched = self.patched_logit_diff(overrides)?;
        normalized_score(patched, self.source_ld, self.base_ld)
    }

    /// Override replacing `hook` at `positions` by the source run's value.
    pub fn source_override(&self, hook: HookPoint, positions: Positions) -> Result<HookOverride> {
        let value = self.source.rows(&hook, &positions)?;
        Ok(HookOverride::new(hook, positions, value))
    }

    /// Scores every cell, in order.
    pub fn score_cells(&self, cells: &[Vec<HookOverride>]) -> Result<Vec<f32>> {
        #[cfg(feature = "parallel")]
        if self.parallel {
            use rayon::prelude::*;
            return cells.par_iter().map(|c| self.score(c)).collect();
        }
        cells.iter().map(|c| self.score(c)).collect()
    }

    fn grid(&self, name: String, axes: Vec<Axis>, values: Vec<f32>) -> PatchGrid {
        PatchGrid {
            name,
            direction: self.direction,
            axes,
            values,
            clean_logit_diff: self.clean_logit_diff(),
            corrupted_logit_diff: self.corrupted_logit_diff(),
        }
    }

    fn check_layers(&self, layers: &Range<usize>) -> Result<()> {
        let n = self.weights.config.n_layers;
        if layers.is_empty() || layers.end > n {
            return Err(Error::Range(format!("layer range {layers:?} outside 0..{n}")));
        }
        Ok(())
    }

    /// `grid[L][p]`: a residual-stream site of layer `L` patched at the single
    /// position `p`.
    pub fn resid_sweep(&self, site: Site, layers: Range<usize>, positions: Range<usize>) -> Result<PatchGrid> {
        if site.is_head_scoped() {
            return Err(Error::Hook(format!("{site} is not a residual-stream site")));
        }
        self.check_layers(&layers)?;
        if positions.is_empty() || positions.end > self.seq_len() {
            return Err(Error::Range(format!("position range {positions:?} outside 0..{}", self.seq_len())));
        }
        let mut cells = Vec::with_capacity(layers.len() * positions.len());
        for l in layers.clone() {
            for p in positions.clone() {
                cells.push(vec![self.source_override(HookPoint::block(l, site), Positions::Subset(vec![p]))?]);
            }
        }
        let values = self.score_cells(&cells)?;
        Ok(self.grid(
            format!("{site}_by_position"),
            vec![Axis::indices("layer", layers), Axis::indices("position", positions)],
            values,
        ))
    }

    /// `grid[L][s]`: block-level site `s` of layer `L` patched at all positions.
    pub fn block_sweep(&self, sites: &[Site], layers: Range<usize>) -> Result<PatchGrid> {
        self.check_layers(&layers)?;
        if sites.is_empty() || sites.iter().any(|s| s.is_head_scoped()) {
            return Err(Error::Hook("block sweeps take non-empty, block-level sites".into()));
        }
        let mut cells = Vec::with_capacity(layers.len() * sites.len());
        for l in layers.clone() {
            for &s in sites {
                cells.push(vec![self.source_override(HookPoint::block(l, s), Positions::All)?]);
            }
        }
        let values = self.score_cells(&cells)?;
        Ok(self.grid(
            "block".into(),
            vec![
                Axis::indices("layer", layers),
                Axis::new("site", sites.iter().map(|s| s.name().to_owned()).collect()),
            ],
            values,
        ))
    }

    /// `grid[L][h]`: one head's `site` (z, q, k, v or pattern) patched.
    pub fn head_sweep(
        &self,
        site: Site,
        layers: Range<usize>,
        heads: Range<usize>,
        positions: HeadPositions,
    ) -> Result<PatchGrid> {
        if !site.is_head_scoped() {
            return Err(Error::Hook(format!("{site} is not a per-head site")));
        }
        self.check_layers(&layers)?;
        let n_heads = self.weights.config.n_heads;
        if heads.is_empty() || heads.end > n_heads {
            return Err(Error::Range(format!("head range {heads:?} outside 0..{n_heads}")));
        }
        let pos = match positions {
            HeadPositions::All => Positions::All,
            HeadPositions::End => Positions::Subset(vec![self.seq_len() - 1]),
        };
        let mut cells = Vec::with_capacity(layers.len() * heads.len());
        for l in layers.clone() {
            for h in heads.clone() {
                cells.push(vec![self.source_override(HookPoint::head(l, site, h), pos.clone())?]);
            }
        }
        let values = self.score_cells(&cells)?;
        let suffix = match positions {
            HeadPositions::All => "",
            HeadPositions::End => "_end",
        };
        Ok(self.grid(
            format!("head_{site}{suffix}"),
            vec![Axis::indices("layer", layers), Axis::indices("head", heads)],
            values,
        ))
    }

    /// Query, key, value and pattern sweeps over every head.
    pub fn head_component_sweep(&self, pattern_positions: HeadPositions) -> Result<Vec<PatchGrid>> {
        let c = &self.weights.config;
        [Site::AttnQ, Site::AttnK, Site::AttnV, Site::AttnPattern]
            .into_iter()
            .map(|site| {
                let positions = if site == Site::AttnPattern {
                    pattern_positions
                } else {
                    HeadPositions::All
                };
                self.head_sweep(site, 0..c.n_layers, 0..c.n_heads, positions)
            })
            .collect()
    }

    /// Direct contribution of `sender` to the residual stream of `cache`, `[seq, d_model]`.
    fn contribution(&self, cache: &ActivationCache, sender: Sender) -> Result<Tensor> {
        let seq = cache.seq_len();
        let d = self.weights.config.d_model;
        Ok(match sender {
            Sender::Embedding => cache.layer(0).resid_pre.clone(),
            Sender::Head { layer, head } => {
                let dh = self.weights.config.d_head;
                let z = cache.rows(&HookPoint::head(layer, Site::AttnZ, head), &Positions::All)?;
                tensor::matmul(&z, &self.weights.layers[layer].head_output(head, dh))?
            }
            Sender::AttnBias { layer } => {
                let b = self.weights.layers[layer].b_o.data();
                Tensor::new(vec![seq, d], b.repeat(seq))?
            }
            Sender::Mlp { layer } => cache.layer(layer).mlp_out.clone(),
        })
    }

    /// Direct-path patching: the base run's input to `receiver` (a later
    /// head's q, k or v) is recomputed from its `resid_pre` with only the
    /// senders' direct contributions swapped to their source values.
    pub fn path_patch(&self, senders: &[Sender], receiver: HookPoint) -> Result<f32> {
        let c = &self.weights.config;
        receiver.validate(c)?;
        let (Layer::Block(r), Some(head)) = (receiver.layer, receiver.head) else {
            return Err(Error::Path(format!("receiver {receiver} is not a head input")));
        };
        let which = match receiver.site {
            Site::AttnQ => crate::model::HeadProjection::Query,
            Site::AttnK => crate::model::HeadProjection::Key,
            Site::AttnV => crate::model::HeadProjection::Value,
            _ => return Err(Error::Path(format!("receiver {receiver} must be a query, key or value input"))),
        };
        if senders.is_empty() {
            return Err(Error::Path("no senders".into()));
        }
        for &s in senders {
            if let Some(l) = s.layer() {
                if l >= c.n_layers || matches!(s, Sender::Head { head, .. } if head >= c.n_heads) {
                    return Err(Error::Range(format!("sender {s:?} does not exist")));
                }
                if l >= r {
                    return Err(Error::Path(format!("sender {s:?} is not before receiver layer {r}")));
                }
            }
        }

        let mut resid = self.base.layer(r).resid_pre.clone();
        for &s in senders {
            let from = self.contribution(&self.base, s)?;
            let to = self.contribution(&self.source, s)?;
            for ((x, a), b) in resid.data_mut().iter_mut().zip(from.data()).zip(to.data()) {
                *x += b - a;
            }
        }
        let lw = &self.weights.layers[r];
        let (normed, _) = tensor::layer_norm_rows(&resid, lw.ln1_gain.data(), lw.ln1_bias.data(), c.ln_eps);
        let input = tensor::linear(
            &normed,
            &lw.head_input(which, head, c.d_head),
            lw.head_input_bias(which, head, c.d_head),
        )?;
        self.score(&[HookOverride::new(receiver, Positions::All, input)])
    }
}

/// Declarative sweep description, read from TOML:
///
/// ```toml
/// direction = "denoise"
///
/// [[sweep]]
/// kind = "resid"
/// site = "resid_pre"
/// layers = [0, 12]
/// positions = [0, 61]
///
/// [[sweep]]
/// kind = "head"
/// site = "attn_z"
/// heads = [0, 12]
/// head_positions = "all"
/// ```
///
/// Ranges are half-open `[start, end]`; omitted ranges cover everything.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub direction: Direction,
    #[serde(default, rename = "sweep")]
    pub sweeps: Vec<SweepTarget>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Resid,
    Block,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepTarget {
    pub kind: SweepKind,
    #[serde(default)]
    pub site: Option<Site>,
    #[serde(default)]
    pub sites: Option<Vec<Site>>,
    #[serde(default)]
    pub layers: Option<[usize; 2]>,
    #[serde(default)]
    pub heads: Option<[usize; 2]>,
    #[serde(default)]
    pub positions: Option<[usize; 2]>,
    #[serde(default)]
    pub head_positions: HeadPositions,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("sweep spec: {e}")))
    }

    /// The sweeps behind the headline figures: residual stream by position,
    /// attention/MLP outputs by layer, head outputs, and the query, key,
    /// value and pattern decomposition.
    pub fn standard() -> Self {
        let target = |kind, site| SweepTarget {
            kind,
            site,
            sites: None,
            layers: None,
            heads: None,
            positions: None,
            head_positions: HeadPositions::All,
        };
        Self {
            direction: Direction::Denoise,
            sweeps: vec![
                target(SweepKind::Resid, Some(Site::ResidPre)),
                target(SweepKind::Block, None),
                target(SweepKind::Head, Some(Site::AttnZ)),
                target(SweepKind::Head, Some(Site::AttnQ)),
                target(SweepKind::Head, Some(Site::AttnK)),
                target(SweepKind::Head, Some(Site::AttnV)),
                target(SweepKind::Head, Some(Site::AttnPattern)),
            ],
        }
    }
}

fn range(r: Option<[usize; 2]>, full: usize) -> Range<usize> {
    r.map_or(0..full, |[a, b]| a..b)
}

impl Patcher<'_> {
    /// Runs one declarative sweep.
    pub fn run_target(&self, t: &SweepTarget) -> Result<PatchGrid> {
        let c = &self.weights.config;
        let layers = range(t.layers, c.n_layers);
        match t.kind {
            SweepKind::Resid => self.resid_sweep(
                t.site.unwrap_or(Site::ResidPre),
                layers,
                range(t.positions, self.seq_len()),
            ),
            SweepKind::Block => {
                let sites = t.sites.clone().unwrap_or_else(|| match t.site {
                    Some(s) => vec![s],
                    None => vec![Site::AttnOut, Site::MlpOut],
                });
                self.block_sweep(&sites, layers)
            }
            SweepKind::Head => self.head_sweep(
                t.site.unwrap_or(Site::AttnZ),
                layers,
                range(t.heads, c.n_heads),
                t.head_positions,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_endpoints_and_midpoint() {
        assert_eq!(normalized_score(-1.0, 3.0, -1.0).unwrap(), 0.0);
        assert_eq!(normalized_score(3.0, 3.0, -1.0).unwrap(), 1.0);
        assert_eq!(normalized_score(1.0, 3.0, -1.0).unwrap(), 0.5);
        assert!(matches!(normalized_score(1.0, 2.0, 2.0), Err(Error::Baseline { .. })));
    }

    #[test]
    fn sweep_spec_parses() {
        let spec = SweepSpec::from_toml(
            r#"
direction = "noise"

[[sweep]]
kind = "resid"
layers = [0, 6]
positions = [10, 20]

[[sweep]]
kind = "head"
site = "attn_pattern"
head_positions = "end"
"#,
        )
        .unwrap();
        assert_eq!(spec.direction, Direction::Noise);
        assert_eq!(spec.sweeps.len(), 2);
        assert_eq!(spec.sweeps[0].positions, Some([10, 20]));
        assert_eq!(spec.sweeps[1].site, Some(Site::AttnPattern));
        assert_eq!(spec.sweeps[1].head_positions, HeadPositions::End);
        assert!(SweepSpec::from_toml("[[sweep]]\nkind = \"everything\"").is_err());
        assert!(SweepSpec::from_toml("colour = 3").is_err());
    }

    #[test]
    fn grid_helpers() {
        let g = PatchGrid {
            name: "t".into(),
            direction: Direction::Denoise,
            axes: vec![Axis::indices("layer", 0..2), Axis::indices("head", 0..3)],
            values: vec![0.1, 0.9, -0.5, 0.0, 0.3, 0.2],
            clean_logit_diff: 1.0,
            corrupted_logit_diff: -1.0,
        };
        assert_eq!(g.shape(), vec![2, 3]);
        assert_eq!(g.get(1, 1), 0.3);
        assert_eq!(g.ranked()[..2], [(0, 1), (1, 1)]);
        assert!(g.to_csv().starts_with("layer,head,score\n0,0,0.1\n"));
        assert_eq!(PatchGrid::mean(&[g.clone(), g.clone()]).unwrap(), g);
    }
}
