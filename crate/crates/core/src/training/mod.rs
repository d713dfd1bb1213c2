//! Reverse-mode gradients, optimizers, Polyak averaging and the training loop.

pub mod gradcheck;
pub mod gradients;
pub mod optim;
pub mod train;

pub use gradcheck::{grad_check, kink_free_batch, kink_margin, GradCheckReport};
pub use gradients::{nll_and_gradients, GradientTape};
pub use optim::{optimizer_step, polyak_update, AdamState, OptimizerKind, PolyakState};
pub use train::{train_loop, TrainConfig, TrainOutcome, TrainingSet};
