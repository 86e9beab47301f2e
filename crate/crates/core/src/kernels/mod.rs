//! Forward/backward math for every layer primitive.
//!
//! Kernels are pure functions over tensors; the tape (crate::tape) owns
//! which of them run and in what order. All reductions accumulate in
//! ascending index order.

pub mod conv;
pub mod dense;
pub mod elem;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d_bwd, conv2d_fwd, conv_out_dim};
pub use dense::{linear_bwd, linear_fwd};
pub use elem::{
    add_fwd, channel_mask_bwd, channel_mask_fwd, masked_pixel_sum_bwd, masked_pixel_sum_fwd,
    mul_bwd, mul_fwd, relu_bwd, relu_fwd, select_logit_bwd, select_logit_fwd, sum_all_bwd,
    sum_all_fwd,
};
pub use loss::{pixel_ce_bwd, pixel_ce_fwd, softmax_ce_bwd, softmax_ce_fwd, softmax_in_place};
pub use norm::{bn_eval_bwd, bn_eval_fwd, bn_train_bwd, bn_train_fwd};
pub use pool::{
    avgpool_bwd, avgpool_fwd, gap_bwd, gap_fwd, maxpool_bwd, maxpool_fwd, pool_out_dim,
    upsample_bwd, upsample_fwd,
};
