//! Tensors, the reverse-mode tape, and attention conditioner networks.

pub mod attention;
pub mod params;
pub mod tape;
pub mod tensor;

pub use attention::{attention_block_tape, AttentionLayer, Conditioner, KvCache, MaskKind};
pub use params::{standard_normal, ParamId, ParamStore};
pub use tape::{sigmoid, softplus, Tape, VarId};
pub use tensor::{max_abs_diff, Tensor};
