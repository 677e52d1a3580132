//! Finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::math::tape::{Tape, VarId};
use crate::math::tensor::Parameter;

/// Compare analytic gradients of a recorded scalar function against central
/// finite differences.
///
/// `build` must deterministically construct the loss from the leased
/// parameter ids (same order as `params`). For each parameter, the
/// `samples_per_param` coordinates with the largest analytic gradient are
/// probed; the reported value is the maximum over probes of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// Coordinates whose analytic gradient sits below the f32 resolution floor
/// of the difference quotient (the forward pass rounds intermediates to f32,
/// so `(f(x+h) - f(x-h)) / 2h` carries noise of order `ε·|f| / h`) are not
/// probed: central differences cannot certify them at any tolerance.
pub fn grad_check<F>(
    params: &mut [Parameter],
    build: F,
    h: f32,
    samples_per_param: usize,
) -> Result<f32>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let eval = |params: &[Parameter]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = params.iter().map(|p| tape.param(p)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar_f64(loss))
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.param(p)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    tape.check_finite()?;
    let analytic: Vec<Option<Vec<f32>>> = ids.iter().map(|&id| tape.grad(id).map(<[f32]>::to_vec)).collect();
    let loss_scale = tape.value(loss).data()[0].abs().max(1.0);
    drop(tape);

    // noise on the difference quotient from f32 rounding of the forward pass
    let resolution_floor = 256.0 * f32::EPSILON * loss_scale / h;

    let mut max_err = 0.0f32;
    for pi in 0..params.len() {
        let Some(grads) = &analytic[pi] else { continue };
        let mut order: Vec<usize> = (0..grads.len()).collect();
        order.sort_by(|&a, &b| {
            grads[b]
                .abs()
                .partial_cmp(&grads[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for &ci in order.iter().take(samples_per_param) {
            let a = grads[ci];
            if a.abs() < resolution_floor {
                continue;
            }
            let orig = params[pi].value().data()[ci];
            params[pi].value_mut().data_mut()[ci] = orig + h;
            let f_plus = eval(params)?;
            params[pi].value_mut().data_mut()[ci] = orig - h;
            let f_minus = eval(params)?;
            params[pi].value_mut().data_mut()[ci] = orig;
            let numeric = ((f_plus - f_minus) / (2.0 * f64::from(h))) as f32;
            let err = (a - numeric).abs() / f32::max(1e-8, a.abs() + numeric.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        // Central differences are exact on linear maps at any step size, so a
        // generous h keeps f32 rounding out of the quotient.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = vec![Parameter::new("x", Tensor::uniform(vec![6], -1.0, 1.0, &mut rng))];
        let c = Tensor::uniform(vec![6], 0.5, 2.0, &mut rng);
        let err = grad_check(
            &mut params,
            |tape, ids| {
                let cv = tape.constant(c.clone());
                tape.dot(ids[0], cv)
            },
            0.5,
            6,
        )
        .unwrap();
        assert!(err < 1e-6, "linear grad_check error {err}");
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = vec![
            Parameter::new("w1", Tensor::uniform(vec![4, 5], -0.8, 0.8, &mut rng)),
            Parameter::new("b1", Tensor::uniform(vec![5], -0.5, 0.5, &mut rng)),
            Parameter::new("w2", Tensor::uniform(vec![5, 3], -0.8, 0.8, &mut rng)),
            Parameter::new("b2", Tensor::uniform(vec![3], -0.5, 0.5, &mut rng)),
        ];
        let x = Tensor::uniform(vec![2, 4], -1.0, 1.0, &mut rng);
        let target = Tensor::uniform(vec![2, 3], -1.0, 1.0, &mut rng);
        let err = grad_check(
            &mut params,
            |tape, ids| {
                let xv = tape.constant(x.clone());
                let h1 = tape.affine(xv, ids[0], ids[1])?;
                let a1 = tape.gelu(h1);
                let out = tape.affine(a1, ids[2], ids[3])?;
                let tv = tape.constant(target.clone());
                tape.squared_distance(out, tv)
            },
            1e-3,
            4,
        )
        .unwrap();
        assert!(err < 1e-3, "network grad_check error {err}");
    }

    #[test]
    fn softmax_attention_block_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = vec![
            Parameter::new("q", Tensor::uniform(vec![4, 4], -0.7, 0.7, &mut rng)),
            Parameter::new("x", Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng)),
        ];
        let target = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let err = grad_check(
            &mut params,
            |tape, ids| {
                let q = tape.matmul(ids[1], ids[0])?;
                let scores = tape.matmul_nt(q, ids[1])?;
                let scaled = tape.scale(scores, 0.5);
                let attn = tape.softmax(scaled)?;
                let out = tape.matmul(attn, ids[1])?;
                let tv = tape.constant(target.clone());
                tape.squared_distance(out, tv)
            },
            1e-3,
            6,
        )
        .unwrap();
        assert!(err < 1e-3, "attention grad_check error {err}");
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = vec![
            Parameter::new("x", Tensor::uniform(vec![2, 6], -1.0, 1.0, &mut rng)),
            Parameter::new("g", Tensor::uniform(vec![6], 0.5, 1.5, &mut rng)),
            Parameter::new("b", Tensor::uniform(vec![6], -0.3, 0.3, &mut rng)),
        ];
        let target = Tensor::uniform(vec![2, 6], -1.0, 1.0, &mut rng);
        let err = grad_check(
            &mut params,
            |tape, ids| {
                let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let tv = tape.constant(target.clone());
                tape.squared_distance(y, tv)
            },
            1e-3,
            5,
        )
        .unwrap();
        assert!(err < 1e-3, "layer_norm grad_check error {err}");
    }
}
