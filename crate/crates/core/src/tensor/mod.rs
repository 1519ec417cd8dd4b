//! Dense tensors, reverse-mode differentiation, optimisation and checkpoints.

mod autograd;
pub mod checkpoint;
mod dense;
pub mod gradcheck;
pub mod init;
pub mod optim;

pub use autograd::{sigmoid, softmax_in_place, Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use dense::Tensor;
pub use gradcheck::check_gradients;
pub use init::xavier_uniform;
pub use optim::{centralize, ranger_step, OptimizerConfig, ParamSet};
