pub mod attribution;
pub mod error;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod prompts;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{ActivationCache, HookOverride, HookPoint, ModelConfig, ModelWeights, Positions, Site};
pub use tensor::Tensor;
pub use tokenizer::{TokenSequence, Tokenizer};
