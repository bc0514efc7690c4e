//! Differentiable numeric core: tensors, a reverse-mode graph, layers,
//! AdamW, finite-difference checking and checkpoints.

mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod layers;
mod optim;
mod params;
mod real;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, grad_check_masked, grad_check_params, GradCheck};
pub use graph::{Axis, Backward, Graph, Mode, Unary, Var};
pub use kernels::{col2im_1d, col2im_2d, im2col_1d, im2col_2d, Conv1dGeom, Conv2dGeom};
pub use layers::{Layer, LayerSpec, RecurrentCell};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use params::{fan_in_uniform, orthogonal, Gradients, ParamId, ParamStore};
pub use real::{matmul_into, Real};
pub use tensor::Tensor;
