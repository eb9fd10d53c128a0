//! Differentiable building blocks with hand-written backward passes.

pub mod adamw;
pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod gcn;
pub mod gradcheck;
pub mod layers;
pub mod param;

pub use adamw::{AdamW, AdamWConfig};
pub use attention::{AttentionBlock, BlockCache};
pub use checkpoint::Checkpoint;
pub use conv::Conv3x3;
pub use gcn::{GcnLayer, NormAdj};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{LayerNorm, Linear};
pub use param::{Grads, Init, ParamId, ParamStore};
