//! Dense `f64` tensors, a reverse-mode tape, and Adam.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, grad_norm, AdamConfig, AdamState};
pub use gradcheck::{
    directional_grad_check, finite_diff_check, finite_diff_check_with_params, param_grad_check,
    rel_err, GradCheckReport,
};
pub use params::{ParamId, ParamStore};
pub use tape::{masked_log_softmax, masked_softmax, Grads, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("numeric fault: {op} produced a non-finite value")]
    NumericFault { op: &'static str },
    #[error("loss must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("loss is not recorded on this tape")]
    NotOnTape,
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
}
