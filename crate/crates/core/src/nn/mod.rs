//! Minimal CPU tensor engine for 3D convolutional networks.
//!
//! Layers are immutable during forward and backward passes: a training-mode
//! forward returns the activations it needs as an explicit cache, and the
//! matching backward writes parameter gradients into a [`GradStore`] indexed
//! by [`ParamId`]. This keeps evaluation-mode inference shareable across
//! threads and lets the gradient checker perturb a cloned model freely.

mod activation;
mod conv;
mod dense;
mod norm;
mod param;
mod tensor;

pub use activation::{elu, elu_backward, sigmoid, Dropout};
pub use conv::{Conv3d, ConvTranspose3d, StridedKernel};
pub use dense::Dense;
pub use norm::{BatchNorm3d, BatchNormCache};
pub use param::{GradStore, Param, ParamId, ParamRegistry};
pub use tensor::{global_avg_pool, global_avg_pool_backward, Tensor};
