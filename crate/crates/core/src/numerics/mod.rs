//! Dense matrices, reverse-mode differentiation, MLPs and the Adam optimizer.

mod adam;
mod gradcheck;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check_fd, GradCheckReport, GRAD_CHECK_EPS};
pub use mlp::{mlp_forward, Mlp, MlpSpec};
pub use params::ParamSet;
pub use tape::{sigmoid, NodeId, RowFunction, Tape, PROB_CLAMP};
pub use tensor::Tensor2D;

pub(crate) use tape::bce_term;
