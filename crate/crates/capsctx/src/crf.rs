//! Densely connected CRF over corresponding elements of a primary capsule's
//! predictions across decision capsules, minimized by mean-field iterations
//! expressed as differentiable tape ops.
//!
//! The pairwise potential is a learned bilinear form: one J x J map with a
//! zero diagonal (the energy excludes j = j'), either shared across all
//! (k, i) or kept separate per element index i. Lanes are independent across
//! (k, i) by construction.

use crate::config::CrfShare;
use crate::error::{CapsError, Result};
use crate::tape::{Id, Tape};
use crate::tensor::Tensor;

/// Off-diagonal mask used to pin diag(M) = 0 regardless of the raw parameter.
pub fn offdiag_mask(j: usize) -> Tensor {
    let mut m = Tensor::filled(vec![j, j], 1.0);
    for d in 0..j {
        m.set(&[d, d], 0.0);
    }
    m
}

pub fn offdiag_mask_per_i(i: usize, j: usize) -> Tensor {
    let mut m = Tensor::filled(vec![i, j, j], 1.0);
    for ii in 0..i {
        for d in 0..j {
            m.set(&[ii, d, d], 0.0);
        }
    }
    m
}

/// Initial marginals: H[k][.][i] = softmax over j of P[k][.][i], reading the
/// predictions as negated unary costs.
pub fn crf_init(tape: &mut Tape, predictions: Id) -> Result<Id> {
    if tape.value(predictions).rank() != 3 {
        return Err(CapsError::Shape(format!(
            "crf_init: expected [K,J,I], got {:?}",
            tape.value(predictions).shape()
        )));
    }
    tape.softmax_axis(predictions, 1)
}

/// Mean-field iterations over the marginals: message over j with the masked
/// pairwise map, compatibility subtraction, then softmax renormalization.
/// Returns the refined predictions (the final marginals).
pub fn crf_iterate(
    tape: &mut Tape,
    state: Id,
    pairwise_raw: Id,
    share: CrfShare,
    max_itr: usize,
) -> Result<Id> {
    if max_itr == 0 {
        return Err(CapsError::Config("crf iterations must be >= 1".into()));
    }
    let sh = tape.value(state).shape().to_vec();
    if sh.len() != 3 {
        return Err(CapsError::Shape(format!("crf_iterate: expected [K,J,I], got {sh:?}")));
    }
    let (j_n, i_n) = (sh[1], sh[2]);
    let masked = match share {
        CrfShare::All => tape.mul_const(pairwise_raw, &offdiag_mask(j_n))?,
        CrfShare::PerI => tape.mul_const(pairwise_raw, &offdiag_mask_per_i(i_n, j_n))?,
    };
    let mut h = state;
    for _ in 0..max_itr {
        let message = match share {
            CrfShare::All => tape.matmul_mid(masked, h)?,
            CrfShare::PerI => tape.matmul_mid_per_i(masked, h)?,
        };
        let compat = tape.sub(h, message)?;
        h = tape.softmax_axis(compat, 1)?;
    }
    Ok(h)
}

/// Full module: init then iterate.
pub fn crf_refine(
    tape: &mut Tape,
    predictions: Id,
    pairwise_raw: Id,
    share: CrfShare,
    max_itr: usize,
) -> Result<Id> {
    let h0 = crf_init(tape, predictions)?;
    crf_iterate(tape, h0, pairwise_raw, share, max_itr)
}

/// Diagnostic CRF energy per (k, i):
/// Z[k][i] = sum_j -P[k][j][i] + sum_{j != j'} M[j][j'] P[k][j][i] P[k][j'][i].
/// Not part of the training loss.
pub fn crf_energy(predictions: &Tensor, pairwise: &Tensor) -> Result<Tensor> {
    let sp = predictions.shape();
    if sp.len() != 3 || pairwise.shape() != [sp[1], sp[1]] {
        return Err(CapsError::Shape(format!(
            "crf_energy: shapes {:?} vs {:?}",
            sp,
            pairwise.shape()
        )));
    }
    let (k_n, j_n, i_n) = (sp[0], sp[1], sp[2]);
    let mut out = Tensor::zeros(vec![k_n, i_n]);
    for k in 0..k_n {
        for i in 0..i_n {
            let mut z = 0.0;
            for j in 0..j_n {
                z -= predictions.at(&[k, j, i]);
                for jp in 0..j_n {
                    if j != jp {
                        z += pairwise.at(&[j, jp])
                            * predictions.at(&[k, j, i])
                            * predictions.at(&[k, jp, i]);
                    }
                }
            }
            out.set(&[k, i], z);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::util::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_symmetric_lane() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::zeros(vec![1, 2, 1])).unwrap();
        let h = crf_init(&mut tape, p).unwrap();
        assert_eq!(tape.value(h).data(), &[0.5, 0.5]);
    }

    #[test]
    fn init_ln2_lane() {
        let mut tape = Tape::new();
        let p = tape
            .leaf(Tensor::new(vec![1, 2, 1], vec![2.0f64.ln(), 0.0]).unwrap())
            .unwrap();
        let h = crf_init(&mut tape, p).unwrap();
        let v = tape.value(h);
        assert!((v.at(&[0, 0, 0]) - 2.0 / 3.0).abs() < 1e-12);
        assert!((v.at(&[0, 1, 0]) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn init_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = randn(&mut rng, vec![2, 3, 2], 1.0);
        let mut shifted = p.clone();
        for v in shifted.data_mut() {
            *v += 7.0;
        }
        let run = |t: &Tensor| {
            let mut tape = Tape::new();
            let id = tape.leaf(t.clone()).unwrap();
            let h = crf_init(&mut tape, id).unwrap();
            tape.value(h).data().to_vec()
        };
        for (a, b) in run(&p).iter().zip(run(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Direct two-line oracle for the zero-message path: one iteration with
    /// M = 0 is just a fresh softmax over j of the current state.
    fn softmax_j_oracle(h: &Tensor) -> Tensor {
        let (k_n, j_n, i_n) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let mut out = Tensor::zeros(vec![k_n, j_n, i_n]);
        for k in 0..k_n {
            for i in 0..i_n {
                let z: f64 = (0..j_n).map(|j| h.at(&[k, j, i]).exp()).sum();
                for j in 0..j_n {
                    out.set(&[k, j, i], h.at(&[k, j, i]).exp() / z);
                }
            }
        }
        out
    }

    #[test]
    fn zero_pairwise_matches_two_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = randn(&mut rng, vec![3, 4, 2], 1.0);
        let mut tape = Tape::new();
        let p_id = tape.leaf(p.clone()).unwrap();
        let m = tape.leaf(Tensor::zeros(vec![4, 4])).unwrap();
        let h0 = crf_init(&mut tape, p_id).unwrap();
        let out = crf_iterate(&mut tape, h0, m, CrfShare::All, 1).unwrap();
        let want = softmax_j_oracle(&softmax_j_oracle(&p));
        for (a, b) in tape.value(out).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_single_lane_iteration() {
        // J=2 lane with H=[1,0], M=[[0,1],[1,0]]: message [0,1], compat
        // [1,-1], softmax -> [e^2/(e^2+1), 1/(e^2+1)].
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::new(vec![1, 2, 1], vec![1.0, 0.0]).unwrap()).unwrap();
        let m = tape
            .leaf(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let out = crf_iterate(&mut tape, h, m, CrfShare::All, 1).unwrap();
        let v = tape.value(out);
        let e2 = 2.0f64.exp();
        assert!((v.at(&[0, 0, 0]) - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((v.at(&[0, 1, 0]) - 1.0 / (e2 + 1.0)).abs() < 1e-12);
        assert!((v.at(&[0, 0, 0]) - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn marginals_normalized_every_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = randn(&mut rng, vec![4, 5, 3], 1.5);
        let m_raw = randn(&mut rng, vec![5, 5], 0.5);
        // Run iteration-by-iteration so every intermediate state is visible.
        let mut tape = Tape::new();
        let p_id = tape.leaf(p).unwrap();
        let m_id = tape.leaf(m_raw).unwrap();
        let mut h = crf_init(&mut tape, p_id).unwrap();
        for _ in 0..4 {
            let t = tape.value(h);
            for k in 0..4 {
                for i in 0..3 {
                    let s: f64 = (0..5).map(|j| t.at(&[k, j, i])).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                    for j in 0..5 {
                        assert!(t.at(&[k, j, i]) >= 0.0);
                    }
                }
            }
            h = crf_iterate(&mut tape, h, m_id, CrfShare::All, 1).unwrap();
        }
    }

    #[test]
    fn lanes_independent_across_k_and_i() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = randn(&mut rng, vec![3, 4, 2], 1.0);
        let m_raw = randn(&mut rng, vec![4, 4], 0.7);
        let run = |p: &Tensor| {
            let mut tape = Tape::new();
            let p_id = tape.leaf(p.clone()).unwrap();
            let m_id = tape.leaf(m_raw.clone()).unwrap();
            let out = crf_refine(&mut tape, p_id, m_id, CrfShare::All, 3).unwrap();
            tape.value(out).clone()
        };
        let base = run(&p);
        let mut perturbed = p.clone();
        let (k0, i0) = (1, 0);
        for j in 0..4 {
            perturbed.set(&[k0, j, i0], p.at(&[k0, j, i0]) + 0.3 * (j as f64 + 1.0));
        }
        let out = run(&perturbed);
        for k in 0..3 {
            for j in 0..4 {
                for i in 0..2 {
                    let (a, b) = (base.at(&[k, j, i]), out.at(&[k, j, i]));
                    if k == k0 && i == i0 {
                        continue;
                    }
                    assert_eq!(a.to_bits(), b.to_bits(), "lane ({k},{i}) changed");
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance_over_decision_capsules() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let j_n = 3;
        let p = randn(&mut rng, vec![2, j_n, 2], 1.0);
        let m = randn(&mut rng, vec![j_n, j_n], 0.5);
        let perm = [2usize, 0, 1];
        let mut p2 = Tensor::zeros(vec![2, j_n, 2]);
        let mut m2 = Tensor::zeros(vec![j_n, j_n]);
        for k in 0..2 {
            for j in 0..j_n {
                for i in 0..2 {
                    p2.set(&[k, j, i], p.at(&[k, perm[j], i]));
                }
            }
        }
        for a in 0..j_n {
            for b in 0..j_n {
                m2.set(&[a, b], m.at(&[perm[a], perm[b]]));
            }
        }
        let run = |p: &Tensor, m: &Tensor| {
            let mut tape = Tape::new();
            let p_id = tape.leaf(p.clone()).unwrap();
            let m_id = tape.leaf(m.clone()).unwrap();
            let out = crf_refine(&mut tape, p_id, m_id, CrfShare::All, 2).unwrap();
            tape.value(out).clone()
        };
        let (base, permuted) = (run(&p, &m), run(&p2, &m2));
        for k in 0..2 {
            for j in 0..j_n {
                for i in 0..2 {
                    assert!((permuted.at(&[k, j, i]) - base.at(&[k, perm[j], i])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn diagonal_masked_out() {
        // A pairwise parameter that is pure diagonal must act like zero.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = randn(&mut rng, vec![2, 3, 2], 1.0);
        let mut diag = Tensor::zeros(vec![3, 3]);
        for d in 0..3 {
            diag.set(&[d, d], 5.0);
        }
        let run = |m: &Tensor| {
            let mut tape = Tape::new();
            let p_id = tape.leaf(p.clone()).unwrap();
            let m_id = tape.leaf(m.clone()).unwrap();
            let out = crf_refine(&mut tape, p_id, m_id, CrfShare::All, 2).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(&diag).data(), run(&Tensor::zeros(vec![3, 3])).data());
    }

    #[test]
    fn per_i_share_matches_all_when_maps_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (j_n, i_n) = (3, 2);
        let p = randn(&mut rng, vec![2, j_n, i_n], 1.0);
        let m = randn(&mut rng, vec![j_n, j_n], 0.5);
        let mut m_per_i = Tensor::zeros(vec![i_n, j_n, j_n]);
        for i in 0..i_n {
            for a in 0..j_n {
                for b in 0..j_n {
                    m_per_i.set(&[i, a, b], m.at(&[a, b]));
                }
            }
        }
        let mut tape = Tape::new();
        let p_id = tape.leaf(p.clone()).unwrap();
        let m_id = tape.leaf(m).unwrap();
        let shared = crf_refine(&mut tape, p_id, m_id, CrfShare::All, 2).unwrap();
        let p2 = tape.leaf(p).unwrap();
        let mp = tape.leaf(m_per_i).unwrap();
        let per_i = crf_refine(&mut tape, p2, mp, CrfShare::PerI, 2).unwrap();
        for (a, b) in tape.value(shared).data().iter().zip(tape.value(per_i).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn module_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = vec![
            ("p".to_string(), randn(&mut rng, vec![2, 3, 2], 1.0)),
            ("m".to_string(), randn(&mut rng, vec![3, 3], 0.5)),
        ];
        let report = grad_check(
            &params,
            |tape, ids| {
                let out = crf_refine(tape, ids[0], ids[1], CrfShare::All, 3)?;
                let sq = tape.mul(out, out)?;
                tape.sum_all(sq)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn energy_zero_pairwise_is_negated_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let p = randn(&mut rng, vec![2, 3, 2], 1.0);
        let z = crf_energy(&p, &Tensor::zeros(vec![3, 3])).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                let want: f64 = -(0..3).map(|j| p.at(&[k, j, i])).sum::<f64>();
                assert!((z.at(&[k, i]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn energy_zero_predictions_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let m = randn(&mut rng, vec![3, 3], 1.0);
        let z = crf_energy(&Tensor::zeros(vec![2, 3, 2]), &m).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn energy_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let p = randn(&mut rng, vec![2, 3, 2], 1.0);
        let m = randn(&mut rng, vec![3, 3], 1.0);
        let z = crf_energy(&p, &m).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                let mut want = 0.0;
                for j in 0..3 {
                    want -= p.at(&[k, j, i]);
                }
                for j in 0..3 {
                    for jp in 0..3 {
                        if j != jp {
                            want += m.at(&[j, jp]) * p.at(&[k, j, i]) * p.at(&[k, jp, i]);
                        }
                    }
                }
                assert!((z.at(&[k, i]) - want).abs() < 1e-12);
            }
        }
    }
}
