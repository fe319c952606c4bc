//! Differentiable computation layer: parameter storage, a reverse-mode tape
//! over 2-D matrices, and the Adam optimizer with warmup schedule.

mod matrix;
mod optim;
mod params;
mod tape;

pub use matrix::{Mat, MatRef};
pub use optim::{Adam, TrainSchedule};
pub use params::{Grads, ParamStore, ParamTensor};
pub use tape::{log_sigmoid, log_sum_exp, sigmoid, softmax_in_place, Tape, Var};

use crate::error::{Error, Result};

/// Builds the loss on a fresh tape and returns its value and gradients.
///
/// Gradients cover every non-frozen tensor the loss reads through
/// [`Tape::param`]; frozen tensors never appear in the result.
pub fn evaluate_and_grad<'p, F>(params: &'p ParamStore, build: F) -> Result<(f64, Grads)>
where
    F: FnOnce(&mut Tape<'p>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = build(&mut tape)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// Evaluates a scalar loss without recording gradients.
pub fn evaluate<'p, F>(params: &'p ParamStore, build: F) -> Result<f64>
where
    F: FnOnce(&mut Tape<'p>) -> Result<Var>,
{
    let mut tape = Tape::inference(params);
    let loss = build(&mut tape)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NumericFailure {
            tensor: params.first_non_finite().unwrap_or("loss").to_string(),
        });
    }
    Ok(value)
}
