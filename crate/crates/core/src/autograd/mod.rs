//! Minimal dense-tensor autograd.
//!
//! The tape is rebuilt for every forward pass; backpropagation through time
//! is obtained by running all timesteps of a sequence on the same tape.

mod ops;
mod tape;

pub use ops::{conv_out_size, Conv2dGeom};
pub use tape::{
    register_custom_backward, BackwardCtx, BackwardFn, CustomOp, ForwardFn, Gradients, NodeId,
    ParamId, ParamStore, Parameter, Tape,
};
