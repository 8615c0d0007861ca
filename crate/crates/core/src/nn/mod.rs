//! Forward and backward kernels for every layer used by the model families.
//!
//! Kernels are pure functions over [`Tensor`]s. Batch normalization is the only
//! kernel that looks across a batch, so it takes a slice of tensors.

mod batchnorm;
mod conv;
mod dense;
mod loss;
mod lstm;
mod pool;

pub use batchnorm::{
    batchnorm_backward, batchnorm_batch_stats, batchnorm_infer, batchnorm_infer_batch,
    batchnorm_train, BatchNorm, BatchStats, BnCache, BnGrads, BN_EPSILON, BN_MOMENTUM,
};
pub use conv::{
    causal_conv1d, causal_conv1d_backward, conv2d3x3, conv2d3x3_backward, Conv1dGrads,
    Conv1dParams, Conv2dGrads, Conv2dParams,
};
pub use dense::{fully_connected, fully_connected_backward, DenseGrads, DenseParams};
pub use loss::{softmax, weighted_softmax_xent};
pub use lstm::{
    lstm_cell_step, lstm_cell_step_backward, lstm_sequence, lstm_sequence_backward, LstmGrads,
    LstmParams, LstmStepCache,
};
pub use pool::{maxpool2x2, maxpool2x2_backward};

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub fn relu<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(|v| v.max(R::zero()))
}

/// Gradient of ReLU given its output: passes where the output is positive.
pub fn relu_mask_backward<R: Real>(output: &Tensor<R>, grad_out: &Tensor<R>) -> Vec<R> {
    output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > R::zero() { g } else { R::zero() })
        .collect()
}
