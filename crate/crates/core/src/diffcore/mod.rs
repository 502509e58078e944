//! Dense tensors, a reverse-mode tape, sequential models, losses and SGD.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{CheckpointHeader, Normalization};
pub use loss::{cross_entropy_hard, cross_entropy_soft, mse};
pub use model::{Layer, Model, ModelSpec};
pub use optim::{sgd_step, LrSchedule, OptimState};
pub use tape::{log_sum_exp, Gradients, Tape, Var};
pub use tensor::{DType, Real, Tensor};

use crate::error::Result;

/// Runs the reverse sweep from `loss` and adds the result into the
/// parameters' `grad` buffers.
pub fn backward<T: Real>(tape: &mut Tape<T>, loss: Var, model: &mut Model<T>) -> Result<()> {
    let grads = tape.gradients(loss)?;
    model.accumulate(&grads);
    Ok(())
}
