//! Post-training mixed-precision quantization and dataflow-accelerator
//! modeling for MobileNetV2-style pose-estimation backbones.
//!
//! The pipeline runs float model → per-channel quantized model → integer-only
//! streaming graph (im2col, matvec and multi-threshold nodes) → bit-exact
//! integer execution, and models the resulting FPGA pipeline: folding,
//! FIFO-level simulation, resource estimates and FPS per Watt. A layer-wise
//! sensitivity sweep picks per-layer weight bit-widths, and the pose module
//! scores orientation/position estimates.
//!
//! Floating-point code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the CLI and the bit-exactness
//! checks use.

pub mod bitwidth;
pub mod dataflow;
pub mod engine;
pub mod graph;
pub mod lowering;
pub mod pose;
pub mod qtensor;
pub mod quantize;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::IntTensor;

pub type FloatTensor = tensor::FloatTensor<f64>;
pub type FloatTensor32 = tensor::FloatTensor<f32>;
pub type QuantTensor = qtensor::QuantTensor<f64>;
pub type QuantTensor32 = qtensor::QuantTensor<f32>;
pub type Graph = graph::Graph<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Quaternion = pose::Quaternion<f64>;
pub type PoseSample = pose::PoseSample<f64>;
pub type PoseMetrics = pose::PoseMetrics<f64>;
