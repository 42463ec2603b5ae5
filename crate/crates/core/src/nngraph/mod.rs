//! Minimal feed-forward network engine: forward pass, first-derivative
//! backprop, one-sweep diagonal second-derivative backprop, a
//! finite-difference oracle and a small quantization-aware trainer.
//!
//! The second-derivative sweep mirrors the gradient sweep with every linear
//! coefficient squared and cross terms dropped:
//!
//! * linear layers: `h_W[j,i] = h_O[j] * P[i]^2`, `h_P[i] = sum_j W[j,i]^2 * h_O[j]`
//! * ReLU: `h_I = 1[I > 0] * h_P`
//! * max pooling routes to the argmax, average pooling scales by `1/k^4`
//! * residual branches add up
//! * output seed: `p_j (1 - p_j)` for softmax cross-entropy, `2` for L2

mod eval;
mod fd;
mod layer;
mod network;
mod probe;
mod tensor;
mod train;

pub use eval::Evaluator;
pub use fd::{fd_second_derivative, fd_second_derivative_scalar, fd_second_derivative_with, FdEstimate};
pub use layer::{Affine, Conv2d, Dense, Layer};
pub use network::{
    Batch, BackwardTape, DiagHessian, GradientResult, Labels, LossKind, Network, ParamGroup, TargetRef,
};
pub use probe::WeightProbe;
pub use tensor::Tensor;
pub use train::{train_sgd, EpochStats, TrainConfig, TrainLog};
