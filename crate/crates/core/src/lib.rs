//! Dilated segment-sparse attention with online-softmax tiling, a small
//! reverse-mode tensor engine, toy ViT encoders, layer-wise distillation,
//! and segmentation losses. Everything runs on the CPU.

pub mod attention;
pub mod autodiff;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod io;
pub mod scalar;
pub mod segloss;
pub mod tensor;

pub use attention::{AttentionConfig, FlopCount, Kernel, SegmentView};
pub use autodiff::{Gradients, Tape, Var};
pub use distill::{DistillConfig, LossHistory, ScheduleParams};
pub use encoder::{EncoderConfig, LayerFeatures, ParamSet};
pub use error::{Error, Result};
pub use io::AnyTensor;
pub use scalar::{DType, Scalar};
pub use segloss::MaskPair;
pub use tensor::Tensor;
