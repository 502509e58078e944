//! Losses on single predictions. The engine uses the row-wise tape ops
//! directly for batches; these wrappers carry the argument checks.

use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::{Real, Tensor};
use crate::error::{Error, Result};

fn as_row<T: Real>(tape: &mut Tape<T>, v: Var) -> Result<(Var, usize)> {
    let shape = tape.value(v).shape().to_vec();
    match shape.as_slice() {
        [c] => Ok((tape.reshape(v, vec![1, *c])?, *c)),
        [1, c] => Ok((v, *c)),
        _ => Err(Error::Shape(format!(
            "expected a single prediction [C] or [1, C], got {:?}",
            shape
        ))),
    }
}

/// `-logp[label]`.
pub fn cross_entropy_hard<T: Real>(tape: &mut Tape<T>, logp: Var, label: usize) -> Result<Var> {
    let (row, classes) = as_row(tape, logp)?;
    if label >= classes {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {} classes",
            label, classes
        )));
    }
    let mut target = vec![T::zero(); classes];
    target[label] = T::one();
    let per_row = tape.cross_entropy_rows(row, target)?;
    Ok(tape.sum(per_row))
}

/// `-Σ_c target[c]·logp[c]`; the target is a constant.
pub fn cross_entropy_soft<T: Real>(tape: &mut Tape<T>, logp: Var, target: &[f64]) -> Result<Var> {
    let (row, classes) = as_row(tape, logp)?;
    check_distribution(target, classes)?;
    let target = target.iter().map(|&v| T::lit(v)).collect();
    let per_row = tape.cross_entropy_rows(row, target)?;
    Ok(tape.sum(per_row))
}

/// Mean of squared differences; the target is a constant.
pub fn mse<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if shape != target.shape() {
        return Err(Error::Shape(format!(
            "mse: prediction {:?} vs target {:?}",
            shape,
            target.shape()
        )));
    }
    let n = target.len();
    let flat = tape.reshape(pred, vec![1, n])?;
    let per_row = tape.squared_error_rows(flat, target.data().to_vec())?;
    Ok(tape.sum(per_row))
}

/// Checks that `p` has `classes` nonnegative entries summing to 1 within 1e-6.
pub fn check_distribution(p: &[f64], classes: usize) -> Result<()> {
    if p.len() != classes {
        return Err(Error::Shape(format!(
            "target has {} entries, predictions have {}",
            p.len(),
            classes
        )));
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "target is not a probability vector (sum {})",
            total
        )));
    }
    Ok(())
}
