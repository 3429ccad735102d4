//! GPT-2 configuration, weights, hook points and the forward pass.

mod cache;
mod config;
mod forward;
mod hooks;
mod weights;

pub use cache::{ActivationCache, LayerActivations};
pub use config::ModelConfig;
pub use forward::{attention_head, causal_pattern, LogitRows};
pub use hooks::{HookOverride, HookPoint, Layer, Positions, Site};
pub use weights::{load_weights, HeadProjection, LayerWeights, ModelWeights};
