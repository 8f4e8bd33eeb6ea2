//! Small-object detection on a framework-free CPU tensor engine.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: NCHW tensors, kernels, reverse-mode tape, gradient checks.
//! * [`blocks`]: Conv–BN–SiLU, the multi-scale aggregation block (MFAM), the
//!   grouped attention block (IEMA) and the selective fusion block (DASI).
//! * [`network`]: backbone, P2-augmented neck, heads, parameter and FLOP
//!   accounting.
//! * [`postproc`]: decoding, IoU and class-wise NMS.
//! * [`metrics`]: precision, recall, AP and mAP over IoU thresholds.
//! * [`data`]: synthetic scenes, annotation parsers, letterboxing.
//! * [`train`]: loss, SGD with momentum, cosine schedule, training loop,
//!   checkpoints and comparison rendering.

pub mod blocks;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod postproc;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{MasfError, Result};
pub use tensor::{Shape, Tensor};
