//! Minimal differentiable tensor layer: exactly the op set the segmentation
//! network needs, each with a reverse-mode rule.

mod kernels;
mod param;
mod tape;
mod tensor;

pub use kernels::Padding;
pub use param::{ParamId, ParamStore, ParamTensor, RunningStats, StatsId, StatsStore};
pub use tape::{ActivationPattern, Gradients, NormStats, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::{Shape, Tensor};
