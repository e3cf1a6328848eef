//! Trainable routing-weight initialization: per-capsule statistics passed
//! through a shared trainable kernel, flattened, and replicated into the
//! K x J initial logit matrix B.

use crate::error::{CapsError, Result};
use crate::tape::{Id, Tape};

/// s_k = mean(capsule k) / max(populationStd(capsule k), epsilon), reshaped
/// to the [N,N,D] grid. `poses` is [K, I_p] in grid order.
pub fn statistic_map(
    tape: &mut Tape,
    poses: Id,
    grid: (usize, usize, usize),
    epsilon: f64,
) -> Result<Id> {
    if epsilon <= 0.0 {
        return Err(CapsError::Config("epsilon must be positive".into()));
    }
    let (n1, n2, d) = grid;
    let k = tape.value(poses).shape()[0];
    if n1 * n2 * d != k {
        return Err(CapsError::Shape(format!("statistic_map: grid {grid:?} does not match K={k}")));
    }
    let mu = tape.mean_last(poses)?;
    let sigma = tape.std_last(poses)?;
    let clamped = tape.max_scalar(sigma, epsilon)?;
    let s = tape.div(mu, clamped)?;
    tape.reshape(s, vec![n1, n2, d])
}

/// One shared trainable f x f kernel applied depthwise with (f-1)/2 zero
/// padding; output shape equals input shape.
pub fn kernel_pass(tape: &mut Tape, s: Id, kernel: Id) -> Result<Id> {
    let f = tape.value(kernel).shape()[0];
    if f % 2 == 0 {
        return Err(CapsError::Config("routing-init kernel size f must be odd".into()));
    }
    tape.depthwise_shared(s, kernel, (f - 1) / 2)
}

/// Flatten the filtered map row-major into b-hat and replicate it J times:
/// B[k][j] = b_hat[k] for every j.
pub fn build_b(tape: &mut Tape, filtered: Id, j: usize) -> Result<Id> {
    let k: usize = tape.value(filtered).shape().iter().product();
    let flat = tape.reshape(filtered, vec![k])?;
    tape.repeat_cols(flat, j)
}
