//! Int8 post-training pipeline: BatchNorm folding, calibration, quantization-aware
//! fine-tuning support and an integer-only inference path.

mod export;
mod fixed_point;
mod params;

pub use export::{
    calibrate, export_int8, fold_batchnorm, vote_int, IntPrediction, QImage, QuantLayer, QuantModel,
};
pub use fixed_point::Requant;
pub use params::{
    fake_quant, fake_quant_weights, round_half_even, Observer, QuantParams, MIN_RANGE,
    OBSERVER_MOMENTUM,
};
