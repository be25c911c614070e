//! Hand-rolled neural machinery: a reverse-mode gradient tape and the
//! attention networks built on it.

pub mod net;
pub mod tape;

pub use net::{
    clip_grad_norm, sgd_step, soft_update, AdamState, AttentionNet, ForwardOut, NeighborPool,
    NetDims, NetNodes, ParamSet, Tensor, LEAK,
};
pub use tape::{NodeId, Tape};
