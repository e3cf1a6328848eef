//! Baseline capsule machinery: conv stem, primary-capsule formation, squash,
//! and per-pair prediction transforms.

use crate::config::ModelConfig;
use crate::error::{CapsError, Result};
use crate::tape::{Id, Tape};

/// Tape handles for the stem parameters.
#[derive(Debug, Clone, Copy)]
pub struct StemParams {
    pub k1: Id,
    pub b1: Id,
    pub k2: Id,
    pub b2: Id,
}

/// Two valid-padding convolutions; nonlinearity after the first only (the
/// second feeds squash downstream).
pub fn conv_stem(tape: &mut Tape, image: Id, p: &StemParams, cfg: &ModelConfig) -> Result<Id> {
    let c1 = tape.conv2d(image, p.k1, cfg.conv1_stride, 0)?;
    let c1 = tape.channel_bias(c1, p.b1)?;
    let a1 = tape.relu(c1)?;
    let c2 = tape.conv2d(a1, p.k2, cfg.conv2_stride, 0)?;
    let features = tape.channel_bias(c2, p.b2)?;
    let got = tape.value(features).shape().to_vec();
    if got != [cfg.n, cfg.n, cfg.z] {
        return Err(CapsError::Config(format!(
            "conv_stem produced {got:?}, expected [{}, {}, {}]",
            cfg.n, cfg.n, cfg.z
        )));
    }
    Ok(features)
}

/// Channel-contiguous grouping of an [N,N,Z] feature stack into K = N*N*(Z/I_p)
/// capsules of I_p elements, squashed per capsule. Returns poses of shape
/// [K, I_p]; capsule (n1, n2, d) sits at index k = (n1*N + n2)*D + d.
pub fn form_primary_capsules(tape: &mut Tape, features: Id, i_p: usize) -> Result<Id> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 3 {
        return Err(CapsError::Shape(format!("form_primary_capsules: expected rank-3 features, got {shape:?}")));
    }
    let (n1, n2, z) = (shape[0], shape[1], shape[2]);
    if z % i_p != 0 {
        return Err(CapsError::Config(format!("Z ({z}) must be divisible by I_p ({i_p})")));
    }
    let k = n1 * n2 * (z / i_p);
    let grouped = tape.reshape(features, vec![k, i_p])?;
    tape.squash_last(grouped)
}

/// Per-pair linear predictions: P[k][j] = u_k * W[k][j].
pub fn predict(tape: &mut Tape, poses: Id, w: Id) -> Result<Id> {
    tape.predict_transform(poses, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::util::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn squash_one(v: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()).unwrap();
        let y = tape.squash_last(x).unwrap();
        tape.value(y).data().to_vec()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn squash_zero_is_zero() {
        assert_eq!(squash_one(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn squash_three_four() {
        let y = squash_one(&[3.0, 4.0]);
        assert!((y[0] - 15.0 / 26.0).abs() < 1e-8, "{y:?}");
        assert!((y[1] - 20.0 / 26.0).abs() < 1e-8);
        assert!((norm(&y) - 25.0 / 26.0).abs() < 1e-8);
    }

    #[test]
    fn squash_unit_norm_halves() {
        let inv = 1.0 / 3.0f64.sqrt();
        let y = squash_one(&[inv, inv, inv]);
        assert!((norm(&y) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn squash_norm_monotone_and_bounded() {
        let mut prev = 0.0;
        for step in 1..200 {
            let r = step as f64 * 0.1;
            let y = squash_one(&[r, 0.0]);
            let ny = norm(&y);
            assert!(ny < 1.0);
            assert!(ny > prev, "norm not increasing at r={r}");
            prev = ny;
        }
    }

    #[test]
    fn squash_preserves_direction() {
        let v = [0.3, -1.2, 0.7];
        for c in [0.5, 2.0, 7.0] {
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            let y = squash_one(&scaled);
            let cos = v.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / (norm(&v) * norm(&y));
            assert!((cos - 1.0).abs() < 1e-9, "cos={cos}");
        }
    }

    #[test]
    fn grouping_is_channel_contiguous_bijection() {
        // N=2, Z=4, I_p=2 -> D=2, K=8. Feature value encodes its (n1,n2,z).
        let (n, z, i_p) = (2usize, 4usize, 2usize);
        let d = z / i_p;
        let data: Vec<f64> = (0..n * n * z).map(|v| v as f64).collect();
        let mut tape = Tape::new();
        let feats = tape.leaf(Tensor::new(vec![n, n, z], data.clone()).unwrap()).unwrap();
        // Bypass squash by checking the reshape directly.
        let k = n * n * d;
        let grouped = tape.reshape(feats, vec![k, i_p]).unwrap();
        let g = tape.value(grouped);
        let mut seen = vec![false; data.len()];
        for n1 in 0..n {
            for n2 in 0..n {
                for di in 0..d {
                    let kidx = (n1 * n + n2) * d + di;
                    for e in 0..i_p {
                        let v = g.at(&[kidx, e]);
                        let expect = ((n1 * n + n2) * z + di * i_p + e) as f64;
                        assert_eq!(v, expect);
                        seen[v as usize] = true;
                    }
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn form_primary_rejects_indivisible() {
        let mut tape = Tape::new();
        let feats = tape.leaf(Tensor::zeros(vec![2, 2, 5])).unwrap();
        assert!(form_primary_capsules(&mut tape, feats, 2).is_err());
    }

    #[test]
    fn zero_features_give_zero_poses() {
        let mut tape = Tape::new();
        let feats = tape.leaf(Tensor::zeros(vec![2, 2, 4])).unwrap();
        let poses = form_primary_capsules(&mut tape, feats, 2).unwrap();
        assert!(tape.value(poses).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_identity_weights() {
        // I_p = I_d = 2, identity W[k][j] -> P[k][j] = u_k.
        let (k_n, j_n, i_n) = (3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = randn(&mut rng, vec![k_n, i_n], 1.0);
        let mut w = Tensor::zeros(vec![k_n, j_n, i_n, i_n]);
        for k in 0..k_n {
            for j in 0..j_n {
                for i in 0..i_n {
                    w.set(&[k, j, i, i], 1.0);
                }
            }
        }
        let mut tape = Tape::new();
        let u_id = tape.leaf(u.clone()).unwrap();
        let w_id = tape.leaf(w).unwrap();
        let p = predict(&mut tape, u_id, w_id).unwrap();
        for k in 0..k_n {
            for j in 0..j_n {
                for i in 0..i_n {
                    assert!((tape.value(p).at(&[k, j, i]) - u.at(&[k, i])).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn predict_matches_triple_loop_oracle() {
        let (k_n, j_n, p_n, i_n) = (4, 3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = randn(&mut rng, vec![k_n, p_n], 1.0);
        let w = randn(&mut rng, vec![k_n, j_n, p_n, i_n], 1.0);
        let mut tape = Tape::new();
        let u_id = tape.leaf(u.clone()).unwrap();
        let w_id = tape.leaf(w.clone()).unwrap();
        let p = predict(&mut tape, u_id, w_id).unwrap();
        for k in 0..k_n {
            for j in 0..j_n {
                for i in 0..i_n {
                    let mut want = 0.0;
                    for pp in 0..p_n {
                        want += u.at(&[k, pp]) * w.at(&[k, j, pp, i]);
                    }
                    assert!((tape.value(p).at(&[k, j, i]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn predict_zero_pose_gives_zero() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = randn(&mut rng, vec![2, 4, 3, 5], 1.0);
        let w_id = tape.leaf(w).unwrap();
        let p = predict(&mut tape, u, w_id).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
    }

    fn stem_forward(cfg: &ModelConfig, image: &Tensor, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone()).unwrap();
        let k1 = tape
            .leaf(randn(&mut rng, vec![cfg.conv1_kernel, cfg.conv1_kernel, cfg.input_channels, cfg.conv1_channels], 0.1))
            .unwrap();
        let b1 = tape.leaf(Tensor::zeros(vec![cfg.conv1_channels])).unwrap();
        let k2 = tape
            .leaf(randn(&mut rng, vec![cfg.conv2_kernel, cfg.conv2_kernel, cfg.conv1_channels, cfg.z], 0.1))
            .unwrap();
        let b2 = tape.leaf(Tensor::zeros(vec![cfg.z])).unwrap();
        let f = conv_stem(&mut tape, x, &StemParams { k1, b1, k2, b2 }, cfg).unwrap();
        tape.value(f).data().to_vec()
    }

    #[test]
    fn stem_shape_36_to_6() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let image = randn(&mut rng, vec![36, 36, 1], 1.0);
        let out = stem_forward(&cfg, &image, 2);
        assert_eq!(out.len(), 6 * 6 * cfg.z);
    }

    #[test]
    fn stem_zero_image_zero_biases_gives_zero() {
        let cfg = ModelConfig::default();
        let out = stem_forward(&cfg, &Tensor::zeros(vec![36, 36, 1]), 2);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stem_deterministic() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image = randn(&mut rng, vec![36, 36, 1], 1.0);
        assert_eq!(stem_forward(&cfg, &image, 8), stem_forward(&cfg, &image, 8));
    }
}
