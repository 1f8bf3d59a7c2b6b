//! Hand-written forward/backward blocks: ring convolution, the co-attention
//! module, SGD and a finite-difference harness.

pub mod amcm;
pub mod conv;
pub mod gradcheck;
pub(crate) mod linalg;
pub mod optim;
mod tensor;

pub use amcm::{
    amcm_backward, amcm_forward, coattention_gate, coattention_gate_backward,
    motion_guided_attention, motion_guided_attention_backward, AmcmAux, AmcmForward, AmcmGrads,
    AmcmParams, AttentionForward, AttentionGrads, GateForward, GateGrads,
};
pub use conv::{
    ring_conv2d, ring_conv2d_backward, ring_conv2d_backward_with, ring_conv2d_with, Conv2d,
    ConvGrads,
};
pub use optim::{lr_at_epoch, ParamSet, Sgd};
pub use tensor::{relu, relu_backward, sigmoid, softmax, Tensor};
