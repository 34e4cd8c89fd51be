//! Reverse-mode differentiation on 2-D tensors, the network architectures the
//! filter uses, and Adam.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod error;
pub mod nets;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use error::{NnError, Result};
pub use nets::{CircularConvDecoder, CircularConvNet, ConvSpec, Dense, LayerNorm, LinearBlockNet, LinearBlockSpec, Network, NetworkSpec};
pub use params::{glorot_uniform, sum_gradients, Bound, ParamId, ParamSet};
pub use tape::{concat_cols, concat_rows, BackwardCtx, BackwardFn, Grads, Tape, Var};
pub use tensor::Tensor;
