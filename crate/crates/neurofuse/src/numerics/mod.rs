//! Dense-tensor reverse-mode autodiff, kernels, Adam, and parameter storage.

pub mod adam;
pub mod gradcheck;
pub mod kernel_suite;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_update, AdamHyper, AdamState};
pub use gradcheck::{check_gradient, finite_diff_grad, finite_diff_grad_sampled, GradCheck};
pub use kernel_suite::{run_kernel_suite, KernelCheck};
pub use params::{ParamEntry, ParamId, ParamSet};
pub use tape::{BnState, Gradients, Tape, Var, SELU_ALPHA, SELU_LAMBDA};
pub use tensor::{matmul, Tensor};
