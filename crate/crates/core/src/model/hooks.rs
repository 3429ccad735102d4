use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named activation site inside a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    ResidPre,
    ResidMid,
    ResidPost,
    AttnQ,
    AttnK,
    AttnV,
    AttnPattern,
    AttnZ,
    AttnOut,
    MlpOut,
}

impl Site {
    pub const ALL: [Site; 10] = [
        Site::ResidPre,
        Site::ResidMid,
        Site::ResidPost,
        Site::AttnQ,
        Site::AttnK,
        Site::AttnV,
        Site::AttnPattern,
        Site::AttnZ,
        Site::AttnOut,
        Site::MlpOut,
    ];

    pub fn is_head_scoped(self) -> bool {
        matches!(
            self,
            Site::AttnQ | Site::AttnK | Site::AttnV | Site::AttnPattern | Site::AttnZ
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::ResidPre => "resid_pre",
            Site::ResidMid => "resid_mid",
            Site::ResidPost => "resid_post",
            Site::AttnQ => "attn_q",
            Site::AttnK => "attn_k",
            Site::AttnV => "attn_v",
            Site::AttnPattern => "attn_pattern",
            Site::AttnZ => "attn_z",
            Site::AttnOut => "attn_out",
            Site::MlpOut => "mlp_out",
        }
    }

    /// Row width of the activation at this site for a sequence of `seq` tokens.
    pub fn width(self, config: &ModelConfig, seq: usize) -> usize {
        match self {
            Site::AttnQ | Site::AttnK | Site::AttnV | Site::AttnZ => config.d_head,
            Site::AttnPattern => seq,
            _ => config.d_model,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| Error::Hook(format!("unknown site `{s}`")))
    }
}

/// Block index, or the point after the last block where the final layer norm reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Block(usize),
    Final,
}

/// An addressable activation: `(layer, site, head)`.
///
/// `Layer::Final` is only valid with [`Site::ResidPost`] and names the
/// residual stream entering the final layer norm. Overrides on it are applied
/// after any override on the last block's `resid_post`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookPoint {
    pub layer: Layer,
    pub site: Site,
    pub head: Option<usize>,
}

impl HookPoint {
    pub fn new(layer: Layer, site: Site, head: Option<usize>) -> Result<Self> {
        let hook = Self { layer, site, head };
        if site.is_head_scoped() != head.is_some() {
            return Err(Error::Hook(format!(
                "{site} {} a head index",
                if site.is_head_scoped() { "requires" } else { "does not take" }
            )));
        }
        if layer == Layer::Final && site != Site::ResidPost {
            return Err(Error::Hook(format!("final layer has no `{site}` site")));
        }
        Ok(hook)
    }

    pub fn block(layer: usize, site: Site) -> Self {
        Self::new(Layer::Block(layer), site, None).expect("block-scoped site")
    }

    pub fn head(layer: usize, site: Site, head: usize) -> Self {
        Self::new(Layer::Block(layer), site, Some(head)).expect("head-scoped site")
    }

    pub fn resid_pre(layer: usize) -> Self {
        Self::block(layer, Site::ResidPre)
    }

    pub fn final_resid() -> Self {
        Self {
            layer: Layer::Final,
            site: Site::ResidPost,
            head: None,
        }
    }

    /// Checks indices against a model configuration.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        Self::new(self.layer, self.site, self.head)?;
        if let Layer::Block(l) = self.layer {
            if l >= config.n_layers {
                return Err(Error::Range(format!("layer {l} >= {}", config.n_layers)));
            }
        }
        if let Some(h) = self.head {
            if h >= config.n_heads {
                return Err(Error::Range(format!("head {h} >= {}", config.n_heads)));
            }
        }
        Ok(())
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.layer, self.head) {
            (Layer::Final, _) => write!(f, "final.{}", self.site),
            (Layer::Block(l), Some(h)) => write!(f, "blocks.{l}.{}.{h}", self.site),
            (Layer::Block(l), None) => write!(f, "blocks.{l}.{}", self.site),
        }
    }
}

/// Which sequence positions an override touches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    All,
    Subset(Vec<usize>),
}

impl Positions {
    pub fn resolve(&self, seq: usize) -> Result<Vec<usize>> {
        match self {
            Positions::All => Ok((0..seq).collect()),
            Positions::Subset(p) => {
                if let Some(&bad) = p.iter().find(|&&i| i >= seq) {
                    return Err(Error::Range(format!("position {bad} >= sequence length {seq}")));
                }
                Ok(p.clone())
            }
        }
    }
}

/// Replace the activation at `target` (rows `positions`) by `replacement`
/// after it is computed; everything downstream sees the replaced value.
///
/// `replacement` is `[n_positions × width]` where the width is `d_model` for
/// residual/attention-output/MLP-output sites, `d_head` for q/k/v/z, and the
/// sequence length for attention patterns (one row per query position).
#[derive(Clone, Debug)]
pub struct HookOverride {
    pub target: HookPoint,
    pub positions: Positions,
    pub replacement: Tensor,
}

impl HookOverride {
    pub fn new(target: HookPoint, positions: Positions, replacement: Tensor) -> Self {
        Self {
            target,
            positions,
            replacement,
        }
    }

    pub(crate) fn check(&self, config: &ModelConfig, seq: usize) -> Result<Vec<usize>> {
        self.target.validate(config).map_err(|e| Error::Override(e.to_string()))?;
        let rows = self.positions.resolve(seq).map_err(|e| Error::Override(e.to_string()))?;
        let width = self.target.site.width(config, seq);
        if self.replacement.shape() != [rows.len(), width] {
            return Err(Error::Override(format!(
                "{} replacement has shape {:?}, expected [{}, {width}]",
                self.target,
                self.replacement.shape(),
                rows.len()
            )));
        }
        Ok(rows)
    }
}
