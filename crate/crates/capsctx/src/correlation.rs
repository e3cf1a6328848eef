//! Cholesky-transformation correlation combiner: two-distribution mixing
//! with unit total squared weight, the recursive K-way extension f_rho, and
//! feature-dependent generation of the alpha mixing scalars.

use crate::config::CorrOrder;
use crate::error::{CapsError, Result};
use crate::tape::{Id, Tape};

pub fn rho1(alpha: f64) -> f64 {
    alpha / (1.0 + alpha * alpha).sqrt()
}

pub fn rho2(alpha: f64) -> f64 {
    1.0 / (1.0 + alpha * alpha).sqrt()
}

/// D-hat = rho1(alpha) * D1 + rho2(alpha) * D2; the squared coefficients sum
/// to 1 for every alpha.
pub fn cholesky_mix(d1: &[f64], d2: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if d1.len() != d2.len() {
        return Err(CapsError::Shape(format!(
            "cholesky_mix: lengths {} vs {}",
            d1.len(),
            d2.len()
        )));
    }
    if !alpha.is_finite() {
        return Err(CapsError::NonFinite("cholesky_mix alpha".into()));
    }
    let (r1, r2) = (rho1(alpha), rho2(alpha));
    Ok(d1.iter().zip(d2).map(|(a, b)| r1 * a + r2 * b).collect())
}

/// Recursive correlated combiner over the K predictions for each decision
/// capsule, implemented iteratively in capsule order:
///   acc = P_1;  acc <- rho1(a_k) * acc + rho2(a_k) * P_k  for k = 2..K.
/// `predictions` is [K,J,I], `alphas` is [J,K-1]; returns C of shape [J,I].
pub fn f_rho(
    tape: &mut Tape,
    predictions: Id,
    alphas: Id,
    order: CorrOrder,
) -> Result<Id> {
    let sp = tape.value(predictions).shape().to_vec();
    let sa = tape.value(alphas).shape().to_vec();
    if sp.len() != 3 || sa.len() != 2 || sa[0] != sp[1] || sa[1] + 1 != sp[0] {
        return Err(CapsError::Shape(format!(
            "f_rho: predictions {sp:?} incompatible with alphas {sa:?}"
        )));
    }
    let (k_n, j_n, i_n) = (sp[0], sp[1], sp[2]);
    if k_n < 2 {
        return Err(CapsError::Config("f_rho requires K >= 2".into()));
    }
    let capsule_at = |tape: &mut Tape, k: usize| -> Result<Id> {
        let s = tape.slice_axis(predictions, 0, k, 1)?;
        tape.reshape(s, vec![j_n, i_n])
    };
    let ks: Vec<usize> = match order {
        CorrOrder::Forward => (0..k_n).collect(),
        CorrOrder::Reversed => (0..k_n).rev().collect(),
    };
    let mut acc = capsule_at(tape, ks[0])?;
    for (step, &k) in ks.iter().enumerate().skip(1) {
        let a_col = tape.slice_axis(alphas, 1, step - 1, 1)?;
        let a = tape.reshape(a_col, vec![j_n])?;
        let r1 = tape.rho1(a)?;
        let r2 = tape.rho2(a)?;
        let scaled_acc = tape.scale_rows(r1, acc)?;
        let p_k = capsule_at(tape, k)?;
        let scaled_p = tape.scale_rows(r2, p_k)?;
        acc = tape.add(scaled_acc, scaled_p)?;
    }
    Ok(acc)
}

/// alpha[j][k] = sum over all cells of kernels[j][k] elementwise with the
/// N x N feature map (full-size kernels, one scalar each).
pub fn compute_alphas(tape: &mut Tape, feature_map: Id, kernels: Id) -> Result<Id> {
    let sf = tape.value(feature_map).shape().to_vec();
    let sk = tape.value(kernels).shape().to_vec();
    if sf.len() != 2 || sk.len() != 4 || sk[2] != sf[0] || sk[3] != sf[1] {
        return Err(CapsError::Shape(format!(
            "compute_alphas: feature map {sf:?} incompatible with kernels {sk:?}"
        )));
    }
    let (j_n, km1) = (sk[0], sk[1]);
    let cells = sf[0] * sf[1];
    let k_mat = tape.reshape(kernels, vec![j_n * km1, cells])?;
    let f_vec = tape.reshape(feature_map, vec![cells, 1])?;
    let out = tape.matmul(k_mat, f_vec)?;
    tape.reshape(out, vec![j_n, km1])
}

/// Residual mix of the routing output with the correlation output:
/// v_j = squash((1-lambda) * s_j + lambda * C_j). lambda = 0 short-circuits
/// to the routing path so the ablation identity is bitwise.
pub fn combine(tape: &mut Tape, routing_s: Id, corr_c: Option<Id>, lambda: f64) -> Result<Id> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CapsError::Config("lambda must lie in [0, 1]".into()));
    }
    let mixed = match corr_c {
        Some(c) if lambda > 0.0 => {
            let s_part = tape.affine(routing_s, 1.0 - lambda, 0.0)?;
            let c_part = tape.affine(c, lambda, 0.0)?;
            tape.add(s_part, c_part)?
        }
        _ => routing_s,
    };
    tape.squash_last(mixed)
}
