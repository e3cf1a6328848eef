//! Agreement-based dynamic routing between primary and decision capsules,
//! seeded with the initial logit matrix B. The softmax normalization axis is
//! explicit: axis k lets the replicated rows of B influence the couplings,
//! axis j reproduces the cited baseline (where B's constant rows cancel).

use crate::config::RoutingAxis;
use crate::error::{CapsError, Result};
use crate::tape::{Id, Tape};

#[derive(Debug, Clone)]
pub struct RoutingResult {
    /// Final pre-squash decision vectors s_j, shape [J, I_d].
    pub pre_squash: Id,
    /// Couplings after each softmax, one entry per iteration.
    pub couplings: Vec<Id>,
    /// Logits after the run (B plus accumulated agreement updates).
    pub logits: Id,
}

fn softmax_axis_of(axis: RoutingAxis) -> usize {
    match axis {
        RoutingAxis::K => 0,
        RoutingAxis::J => 1,
    }
}

/// b0 = B; per iteration: c = softmax(b, axis); s_j = sum_k c[k][j] P[k][j];
/// v_j = squash(s_j); b += P[k][j].v_j. The logit update is skipped on the
/// last iteration (it cannot affect the returned s_j).
pub fn route(
    tape: &mut Tape,
    predictions: Id,
    b_init: Id,
    iters: usize,
    axis: RoutingAxis,
) -> Result<RoutingResult> {
    if iters == 0 {
        return Err(CapsError::Config("routing iterations must be >= 1".into()));
    }
    let sp = tape.value(predictions).shape().to_vec();
    let sb = tape.value(b_init).shape().to_vec();
    if sp.len() != 3 || sb.len() != 2 || sp[0] != sb[0] || sp[1] != sb[1] {
        return Err(CapsError::Shape(format!(
            "route: predictions {sp:?} incompatible with logits {sb:?}"
        )));
    }
    let ax = softmax_axis_of(axis);
    let mut b = b_init;
    let mut couplings = Vec::with_capacity(iters);
    let mut pre_squash = None;
    for it in 0..iters {
        let c = tape.softmax_axis(b, ax)?;
        couplings.push(c);
        let s = tape.weighted_sum_caps(c, predictions)?;
        pre_squash = Some(s);
        if it + 1 < iters {
            let v = tape.squash_last(s)?;
            let agree = tape.agreement(predictions, v)?;
            b = tape.add(b, agree)?;
        }
    }
    Ok(RoutingResult {
        pre_squash: pre_squash.expect("iters >= 1"),
        couplings,
        logits: b,
    })
}
