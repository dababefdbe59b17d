//! Central finite-difference checking for tape ops.
//!
//! The straight-through estimator is deliberately absent from the op suite:
//! its forward pass is piecewise constant, so it has no derivative to check
//! (the backward pass is a surrogate by construction).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::util::rng_from;
use crate::Result;

/// Worst relative error between reverse-mode and central finite-difference
/// gradients across all entries of all inputs.
///
/// Relative error uses `|ad - fd| / max(|ad|, |fd|, 1)` so near-zero
/// gradients are compared absolutely.
pub fn max_rel_error<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let ad_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).value())
    };

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        for j in 0..inputs[k].len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let ad = ad_grads[k].data()[j];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Result of checking one op.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_err: f64,
}

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Wraps a non-scalar output into a scalar with fixed random weights so the
/// incoming gradient of the checked op is non-uniform.
fn weighted(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.mean_all(prod)
}

/// Finite-difference checks for every differentiable op, on random fp64
/// inputs. Returns one worst-case relative error per op.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = rng_from(seed, &[0xF0]);
    let h = 1e-5;
    let mut checks = Vec::new();
    let mut push = |op: &'static str, err: f64| checks.push(OpCheck { op, max_rel_err: err });

    {
        let a = randn(&mut rng, &[4, 4]);
        let b = randn(&mut rng, &[4, 4]);
        let w = randn(&mut rng, &[4, 4]);
        let err = max_rel_error(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                weighted(t, c, &w)
            },
            &[a, b],
            h,
        )?;
        push("matmul", err);
    }
    {
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[5, 4]);
        let w = randn(&mut rng, &[3, 5]);
        let err = max_rel_error(
            |t, v| {
                let c = t.matmul_nt(v[0], v[1])?;
                weighted(t, c, &w)
            },
            &[a, b],
            h,
        )?;
        push("matmul_nt", err);
    }
    {
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]);
        let w = randn(&mut rng, &[3, 4]);
        let err = max_rel_error(
            |t, v| {
                let c = t.add(v[0], v[1])?;
                weighted(t, c, &w)
            },
            &[a, b],
            h,
        )?;
        push("add", err);
    }
    {
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4]);
        let w = randn(&mut rng, &[3, 4]);
        let err = max_rel_error(
            |t, v| {
                let c = t.add_bias(v[0], v[1])?;
                weighted(t, c, &w)
            },
            &[a, b],
            h,
        )?;
        push("add_bias", err);
    }
    {
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]);
        let w = randn(&mut rng, &[3, 4]);
        let err = max_rel_error(
            |t, v| {
                let c = t.mul(v[0], v[1])?;
                weighted(t, c, &w)
            },
            &[a, b],
            h,
        )?;
        push("mul", err);
    }
    {
        let a = randn(&mut rng, &[6]);
        let w = randn(&mut rng, &[6]);
        let err = max_rel_error(
            |t, v| {
                let c = t.scale(v[0], -1.7)?;
                weighted(t, c, &w)
            },
            &[a],
            h,
        )?;
        push("scale", err);
    }
    {
        let a = randn(&mut rng, &[8]);
        let w = randn(&mut rng, &[8]);
        let err = max_rel_error(
            |t, v| {
                let c = t.gelu(v[0])?;
                weighted(t, c, &w)
            },
            &[a],
            h,
        )?;
        push("gelu", err);
    }
    {
        let a = randn(&mut rng, &[8]);
        let w = randn(&mut rng, &[8]);
        let err = max_rel_error(
            |t, v| {
                let c = t.tanh(v[0])?;
                weighted(t, c, &w)
            },
            &[a],
            h,
        )?;
        push("tanh", err);
    }
    {
        // keep inputs away from the kink at 0 so the difference quotient
        // does not straddle it
        let mut a = randn(&mut rng, &[8]);
        for v in a.data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.5;
            }
        }
        let w = randn(&mut rng, &[8]);
        let err = max_rel_error(
            |t, v| {
                let c = t.relu(v[0])?;
                weighted(t, c, &w)
            },
            &[a],
            h,
        )?;
        push("relu", err);
    }
    {
        let x = randn(&mut rng, &[3, 8]);
        let g = randn(&mut rng, &[8]);
        let b = randn(&mut rng, &[8]);
        let w = randn(&mut rng, &[3, 8]);
        let err = max_rel_error(
            |t, v| {
                let c = t.layer_norm(v[0], v[1], v[2])?;
                weighted(t, c, &w)
            },
            &[x, g, b],
            h,
        )?;
        push("layer_norm", err);
    }
    {
        let x = randn(&mut rng, &[3, 5]);
        let mut mask = Tensor::full(&[3, 5], 1.0);
        mask.set2(0, 1, 0.0);
        mask.set2(1, 4, 0.0);
        mask.set2(1, 0, 0.0);
        let w = randn(&mut rng, &[3, 5]);
        let m2 = mask.clone();
        let err = max_rel_error(
            |t, v| {
                let c = t.masked_softmax(v[0], &m2)?;
                weighted(t, c, &w)
            },
            &[x.clone()],
            h,
        )?;
        push("masked_softmax", err);

        let m3 = mask.clone();
        let err = max_rel_error(
            |t, v| {
                let c = t.masked_log_softmax(v[0], &m3)?;
                // only unmasked entries feed the loss; masked slots are
                // placeholders with zero gradient
                let prod = t.mul(c, v[1])?;
                t.mean_all(prod)
            },
            &[x, mask.clone()],
            h,
        )?;
        push("masked_log_softmax", err);
    }
    {
        let logits = randn(&mut rng, &[5, 3]);
        let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
        let err = max_rel_error(|t, v| t.cross_entropy(v[0], &targets), &[logits], h)?;
        push("cross_entropy", err);
    }
    {
        let mean = randn(&mut rng, &[6]);
        let log_var = randn(&mut rng, &[6]);
        let y = randn(&mut rng, &[6]);
        let err = max_rel_error(|t, v| t.gaussian_nll(v[0], v[1], &y), &[mean, log_var], h)?;
        push("gaussian_nll", err);
    }
    {
        let x = randn(&mut rng, &[5, 3]);
        let w = randn(&mut rng, &[3, 3]);
        let err = max_rel_error(
            |t, v| {
                let c = t.gather_rows(v[0], &[4, 0, 2])?;
                weighted(t, c, &w)
            },
            &[x],
            h,
        )?;
        push("gather_rows", err);
    }
    {
        let x = randn(&mut rng, &[4, 6]);
        let w = randn(&mut rng, &[4, 3]);
        let err = max_rel_error(
            |t, v| {
                let c = t.slice_cols(v[0], 2, 5)?;
                weighted(t, c, &w)
            },
            &[x],
            h,
        )?;
        push("slice_cols", err);
    }
    {
        let a = randn(&mut rng, &[3]);
        let b = randn(&mut rng, &[2]);
        let w = randn(&mut rng, &[5]);
        let err = max_rel_error(
            |t, v| {
                let c = t.concat_cols(&[v[0], v[1]])?;
                weighted(t, c, &w)
            },
            &[a, b],
            h,
        )?;
        push("concat_cols", err);
    }
    {
        let a = randn(&mut rng, &[4]);
        let b = randn(&mut rng, &[4]);
        let w = randn(&mut rng, &[5, 4]);
        let err = max_rel_error(
            |t, v| {
                let c = t.place_rows(5, 4, &[(1, v[0]), (3, v[1])])?;
                weighted(t, c, &w)
            },
            &[a, b],
            h,
        )?;
        push("place_rows", err);
    }
    {
        let a = randn(&mut rng, &[7]);
        let err = max_rel_error(|t, v| t.mean_all(v[0]), &[a], h)?;
        push("mean_all", err);
    }

    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_difference_check() {
        for check in op_suite(7).unwrap() {
            assert!(
                check.max_rel_err < 1e-4,
                "{} failed gradient check: {}",
                check.op,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn matmul_sum_gradient_matches_finite_differences_tightly() {
        let mut rng = rng_from(11, &[]);
        let a = randn(&mut rng, &[4, 4]);
        let b = randn(&mut rng, &[4, 4]);
        let err = max_rel_error(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                let m = t.mean_all(c)?;
                t.scale(m, 16.0) // sum
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul sum check: {err}");
    }

    #[test]
    fn layer_norm_gradient_is_tight() {
        let mut rng = rng_from(13, &[]);
        let x = randn(&mut rng, &[3, 8]);
        let g = randn(&mut rng, &[8]);
        let b = randn(&mut rng, &[8]);
        let w = randn(&mut rng, &[3, 8]);
        let err = max_rel_error(
            |t, v| {
                let c = t.layer_norm(v[0], v[1], v[2])?;
                weighted(t, c, &w)
            },
            &[x, g, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "layer_norm check: {err}");
    }

    #[test]
    fn gaussian_nll_gradient_is_tight() {
        let mut rng = rng_from(17, &[]);
        let mean = randn(&mut rng, &[6]);
        let log_var = randn(&mut rng, &[6]);
        let y = randn(&mut rng, &[6]);
        let err = max_rel_error(|t, v| t.gaussian_nll(v[0], v[1], &y), &[mean, log_var], 1e-5).unwrap();
        assert!(err < 1e-5, "gaussian_nll check: {err}");
    }

    #[test]
    fn masked_softmax_masked_positions_have_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 3, vec![0.2, -0.4, 1.1]).unwrap(), true);
        let mask = Tensor::matrix(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let y = tape.masked_softmax(x, &mask).unwrap();
        assert_eq!(tape.value(y).data()[1], 0.0);
        let w = tape.constant(Tensor::matrix(1, 3, vec![2.0, 3.0, 5.0]).unwrap());
        let p = tape.mul(y, w).unwrap();
        let loss = tape.mean_all(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data()[1], 0.0);
    }
}
