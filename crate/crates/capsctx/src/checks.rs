//! Per-module gradient verification suite shared by the CLI `gradcheck`
//! subcommand and the acceptance gate.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::{CrfShare, RoutingAxis};
use crate::correlation::{compute_alphas, f_rho};
use crate::crf::crf_refine;
use crate::error::{CapsError, Result};
use crate::gradcheck::{grad_check, grad_check_resampling, GradReport};
use crate::model::{tiny_config, CapsModel};
use crate::routing::route;
use crate::routing_init::{build_b, kernel_pass, statistic_map};
use crate::tensor::Tensor;
use crate::util::randn;

pub const MODULES: &[&str] = &[
    "squash",
    "stem",
    "routing-init",
    "routing",
    "crf",
    "correlation",
    "model",
];

/// Gradient check for one named module at the given tolerance. The loss is a
/// fixed random weighting of the module output so adjoints cannot cancel.
pub fn module_grad_check(module: &str, seed: u64, tol: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
    match module {
        "squash" => {
            let params = vec![("x".to_string(), randn(&mut rng, vec![4, 5], 1.0))];
            let w = randn(&mut rng, vec![4, 5], 1.0);
            grad_check(
                &params,
                |tape, ids| {
                    let s = tape.squash_last(ids[0])?;
                    let weighted = tape.mul_const(s, &w)?;
                    tape.sum_all(weighted)
                },
                tol,
            )
        }
        "stem" => {
            // relu kink: resample the input if finite differences straddle it.
            let w = randn(&mut rng, vec![3, 3, 2], 1.0);
            let base = seed.wrapping_mul(31).wrapping_add(7);
            grad_check_resampling(
                |attempt| {
                    let mut r = ChaCha8Rng::seed_from_u64(base + attempt as u64);
                    vec![
                        ("image".to_string(), randn(&mut r, vec![6, 6, 1], 1.0)),
                        ("k1".to_string(), randn(&mut r, vec![3, 3, 1, 2], 0.5)),
                        ("b1".to_string(), randn(&mut r, vec![2], 0.1)),
                        ("k2".to_string(), randn(&mut r, vec![2, 2, 2, 2], 0.5)),
                        ("b2".to_string(), randn(&mut r, vec![2], 0.1)),
                    ]
                },
                |tape, ids| {
                    let c1 = tape.conv2d(ids[0], ids[1], 1, 0)?;
                    let c1b = tape.channel_bias(c1, ids[2])?;
                    let a1 = tape.relu(c1b)?;
                    let c2 = tape.conv2d(a1, ids[3], 1, 0)?;
                    let c2b = tape.channel_bias(c2, ids[4])?;
                    let weighted = tape.mul_const(c2b, &w)?;
                    tape.sum_all(weighted)
                },
                tol,
                5,
            )
        }
        "routing-init" => {
            // max(sigma, eps) kink is at sigma = eps; random poses are far
            // from it, so plain grad_check suffices.
            let params = vec![
                ("poses".to_string(), randn(&mut rng, vec![8, 2], 1.0)),
                ("kernel".to_string(), randn(&mut rng, vec![3, 3], 1.0)),
            ];
            let w = randn(&mut rng, vec![8, 3], 1.0);
            grad_check(
                &params,
                |tape, ids| {
                    let stats = statistic_map(tape, ids[0], (2, 2, 2), 1e-4)?;
                    let filtered = kernel_pass(tape, stats, ids[1])?;
                    let b = build_b(tape, filtered, 3)?;
                    let soft = tape.softmax_axis(b, 0)?;
                    let weighted = tape.mul_const(soft, &w)?;
                    tape.sum_all(weighted)
                },
                tol,
            )
        }
        "routing" => {
            let params = vec![
                ("predictions".to_string(), randn(&mut rng, vec![6, 3, 4], 1.0)),
                ("b".to_string(), randn(&mut rng, vec![6, 3], 0.5)),
            ];
            let w = randn(&mut rng, vec![3, 4], 1.0);
            grad_check(
                &params,
                |tape, ids| {
                    let routed = route(tape, ids[0], ids[1], 3, RoutingAxis::K)?;
                    let v = tape.squash_last(routed.pre_squash)?;
                    let weighted = tape.mul_const(v, &w)?;
                    tape.sum_all(weighted)
                },
                tol,
            )
        }
        "crf" => {
            let params = vec![
                ("predictions".to_string(), randn(&mut rng, vec![5, 3, 2], 1.0)),
                ("m".to_string(), randn(&mut rng, vec![3, 3], 1.0)),
            ];
            let w = randn(&mut rng, vec![5, 3, 2], 1.0);
            grad_check(
                &params,
                |tape, ids| {
                    let refined = crf_refine(tape, ids[0], ids[1], CrfShare::All, 3)?;
                    let weighted = tape.mul_const(refined, &w)?;
                    tape.sum_all(weighted)
                },
                tol,
            )
        }
        "correlation" => {
            let params = vec![
                ("predictions".to_string(), randn(&mut rng, vec![4, 2, 3], 1.0)),
                ("kernels".to_string(), randn(&mut rng, vec![2, 3, 2, 2], 1.0)),
                ("fmap".to_string(), randn(&mut rng, vec![2, 2], 1.0)),
            ];
            let w = randn(&mut rng, vec![2, 3], 1.0);
            grad_check(
                &params,
                |tape, ids| {
                    let alphas = compute_alphas(tape, ids[2], ids[1])?;
                    let c = f_rho(tape, ids[0], alphas, crate::config::CorrOrder::Forward)?;
                    let weighted = tape.mul_const(c, &w)?;
                    tape.sum_all(weighted)
                },
                tol,
            )
        }
        "model" => {
            // forward_loss reads parameters through the supplied leaf ids, so
            // one template model fixes cfg and parameter order while the
            // sampler redraws values.
            let template = CapsModel::new(tiny_config())?;
            let labels = vec![1u8, 0, 1];
            let img = Tensor::new(vec![14, 14, 1], (0..196).map(|_| rng.gen()).collect())?;
            let base = seed.wrapping_mul(131).wrapping_add(17);
            grad_check_resampling(
                |attempt| {
                    let mut cfg = tiny_config();
                    cfg.seed = base + attempt as u64;
                    CapsModel::new(cfg).unwrap().params
                },
                |tape, ids| template.forward_loss(tape, ids, &img, &labels),
                tol,
                5,
            )
        }
        other => Err(CapsError::Config(format!("unknown gradcheck module `{other}`"))),
    }
}

/// Run every module check for one seed. Module tolerance applies to all
/// single-module checks; the end-to-end model uses `model_tol`.
pub fn run_suite(seed: u64, module_tol: f64, model_tol: f64) -> Result<Vec<(String, GradReport)>> {
    MODULES
        .iter()
        .map(|&m| {
            let tol = if m == "model" { model_tol } else { module_tol };
            module_grad_check(m, seed, tol).map(|r| (m.to_string(), r))
        })
        .collect()
}
