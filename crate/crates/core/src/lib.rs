//! Simulation of post-training quantization in multi-head attention, with a
//! focus on the bias that low-bit quantization introduces in softmax outputs
//! and its correction through the quantizer offset.
//!
//! - [`tensor`]: dense `f64` tensors with matmul, softmax and reductions.
//! - [`io`]: binary (`QBT1`) and JSON tensor files.
//! - [`quant`]: uniform affine grids, fake quantization, min-max calibration.
//! - [`bias`]: bias estimation at several granularities, elementwise and
//!   offset-absorbed correction.
//! - [`attention`]: synthetic workloads, attention blocks, residual pipeline,
//!   sensitivity analysis.
//! - [`metrics`]: SQNR, expected softmax sum, zero fraction.
//! - [`harness`]: the experiment commands behind the `softmax-bias` binary.

pub mod attention;
pub mod bias;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use attention::{
    attention_forward, attention_forward_traced, gen_inputs, pipeline_forward, sensitivity_analysis, AttentionConfig,
    AttentionTrace, CalibrationSet, CorrectionPlan, Pipeline, QuantMap, QuantPlan, QuantPoint, Sample,
};
pub use bias::{
    absorb_into_offset, apply_elementwise, estimate_bias_general, estimate_softmax_bias, BiasCorrection, Granularity,
    SoftmaxBiasEstimator, TimeBins, TransformSpec,
};
pub use error::{Error, Result};
pub use metrics::{expected_softmax_sum, sqnr_db, zero_fraction, SqnrMode, SqnrReport};
pub use quant::{
    calibrate_minmax, dequantize_with_offset, fake_quant, quantize_int, softmax_grid, IntTensor, QuantParams, Scheme,
};
pub use tensor::Tensor;
