//! Minimal dense numerics with reverse-mode gradient accumulation: tensors,
//! log-domain scalars, a parameter store, an operation tape, and a
//! finite-difference checking harness that validates every loss in the crate.

mod check;
mod logprob;
mod param;
mod tape;
mod tensor;

pub use check::{check_gradients, GradCheckEntry, GradCheckReport};
pub use logprob::{log_sum_exp, log_sum_exp_f64, LogProb};
pub use param::{Param, ParamId, ParamStore};
pub(crate) use tape::conv1d_kernel;
pub use tape::{Backprop, Tape, ValueId};
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor2};
