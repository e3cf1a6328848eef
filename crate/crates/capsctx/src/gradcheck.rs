//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{Id, Tape};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Per-parameter comparison of analytic vs numeric gradients.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub pass: bool,
    pub notes: Vec<String>,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn eval_loss<F>(params: &[(String, Tensor)], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Id]) -> Result<Id>,
{
    let mut tape = Tape::new();
    let ids: Vec<Id> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&mut tape, &ids)?;
    Ok(tape.value(loss).scalar_value())
}

/// Compare the analytic gradient of `f` (a scalar-valued tape program over
/// the given parameters) against central finite differences.
pub fn grad_check<F>(params: &[(String, Tensor)], f: F, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Id]) -> Result<Id>,
{
    let mut tape = Tape::new();
    let ids: Vec<Id> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut per_param = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for (pi, (name, _)) in params.iter().enumerate() {
        let analytic = grads.wrt(&tape, ids[pi]);
        let mut worst = 0.0;
        let mut worst_index = 0;
        for e in 0..analytic.len() {
            let mut plus = params.to_vec();
            plus[pi].1.data_mut()[e] += FD_STEP;
            let mut minus = params.to_vec();
            minus[pi].1.data_mut()[e] -= FD_STEP;
            let fd = (eval_loss(&plus, &f)? - eval_loss(&minus, &f)?) / (2.0 * FD_STEP);
            let err = rel_err(analytic.data()[e], fd);
            if err > worst {
                worst = err;
                worst_index = e;
            }
        }
        overall = overall.max(worst);
        per_param.push(ParamCheck { name: name.clone(), max_rel_err: worst, worst_index });
    }
    Ok(GradReport { per_param, max_rel_err: overall, pass: overall < tol, notes: Vec::new() })
}

/// Like [`grad_check`], but redraws parameters via `sampler` when a failure
/// looks like finite differences straddling a kink (step-size instability),
/// up to `max_attempts` draws.
pub fn grad_check_resampling<F, S>(
    mut sampler: S,
    f: F,
    tol: f64,
    max_attempts: usize,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Id]) -> Result<Id>,
    S: FnMut(usize) -> Vec<(String, Tensor)>,
{
    let mut last = None;
    for attempt in 0..max_attempts {
        let params = sampler(attempt);
        let mut report = grad_check(&params, &f, tol)?;
        if report.pass {
            if attempt > 0 {
                report.notes.push(format!("non-differentiable sample, resampled ({attempt}x)"));
            }
            return Ok(report);
        }
        // Probe the worst element with one-sided differences; left/right
        // disagreement marks a kink rather than a wrong adjoint.
        let unstable = {
            let worst = report
                .per_param
                .iter()
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                .unwrap();
            let pi = report.per_param.iter().position(|p| p.name == worst.name).unwrap();
            let e = worst.worst_index;
            let shifted = |h: f64| -> Result<f64> {
                let mut moved = params.clone();
                moved[pi].1.data_mut()[e] += h;
                eval_loss(&moved, &f)
            };
            let center = eval_loss(&params, &f)?;
            let right = (shifted(FD_STEP)? - center) / FD_STEP;
            let left = (center - shifted(-FD_STEP)?) / FD_STEP;
            rel_err(right, left) > 1e-2
        };
        if unstable {
            report.notes.push("non-differentiable sample, resampled".into());
            last = Some(report);
            continue;
        }
        return Ok(report);
    }
    Ok(last.expect("max_attempts must be >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let (u1, u2): (f64, f64) = (rng.gen::<f64>().max(1e-12), rng.gen());
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = vec![
            ("w".to_string(), randn(&mut rng, vec![3, 4])),
            ("x".to_string(), randn(&mut rng, vec![4, 2])),
        ];
        let report = grad_check(
            &params,
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                tape.sum_all(y)
            },
            1e-8,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn squash_of_linear_within_1e4() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![
            ("w".to_string(), randn(&mut rng, vec![3, 3])),
            ("x".to_string(), randn(&mut rng, vec![3, 5])),
        ];
        let report = grad_check(
            &params,
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                let s = tape.squash_last(y)?;
                tape.sum_all(s)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn kink_is_reported_and_resampled() {
        // relu evaluated exactly at 0 on the first draw; clean on the second.
        let report = grad_check_resampling(
            |attempt| {
                let v = if attempt == 0 { 0.0 } else { 0.5 };
                vec![("x".to_string(), Tensor::new(vec![1], vec![v]).unwrap())]
            },
            |tape, ids| {
                let r = tape.relu(ids[0])?;
                tape.sum_all(r)
            },
            1e-6,
            4,
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.notes.iter().any(|n| n.contains("resampled")));
    }
}
