//! Adaptively sparse attention with learnable, irreversible context pruning.

pub mod entmax;
pub mod error;
pub mod inference;
pub mod kvcache;
pub mod model;
pub mod pruning;
pub mod scalar;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use entmax::{alpha_sigmoid, alpha_sigmoid_grad, schedule_alpha, step_gate, Alpha, AlphaSchedule};
pub use error::{Error, Result};
pub use inference::{generate, Decoder, GatePolicy, Generation, GenerationRequest, PrefillMode, Sampling};
pub use kvcache::KvCacheBuffer;
pub use model::{ModelConfig, ModelParams};
pub use pruning::{GateMode, InteractionState, PruningVariant};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Params32 = ModelParams<f32>;
pub type Params64 = ModelParams<f64>;
pub type KvCache32 = KvCacheBuffer<f32>;
