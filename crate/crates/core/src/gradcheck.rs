//! Central finite-difference gradient checking.
//!
//! The numerical side never touches the backward pass: it re-evaluates the
//! forward closure on perturbed copies of the inputs, so it stays an
//! independent oracle for whatever the tape computes analytically.

use crate::error::Result;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Default perturbation for 64-bit central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Builds the graph once for analytic gradients, then compares every input
/// element against a central difference. Returns the worst relative error.
///
/// `build` receives leaves in the order of `inputs` and returns the scalar
/// root.
pub fn max_relative_error(
    inputs: &[Tensor],
    step: f64,
    build: impl Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
) -> Result<f64> {
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = tensors
            .iter()
            .map(|t| {
                let mut frozen = t.clone();
                frozen.set_requires_grad(false);
                tape.leaf(&frozen)
            })
            .collect();
        let root = build(&mut tape, &ids)?;
        Ok(tape.scalar_value(root))
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs
        .iter()
        .map(|t| {
            let mut tracked = t.clone();
            tracked.set_requires_grad(true);
            tape.leaf(&tracked)
        })
        .collect();
    let root = build(&mut tape, &ids)?;
    tape.backward(root)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, id) in ids.iter().enumerate() {
        let zeros = vec![0.0; inputs[which].numel()];
        let analytic: Vec<f64> = tape.grad(*id).map(|g| g.to_vec()).unwrap_or(zeros);
        for j in 0..inputs[which].numel() {
            let orig = work[which].data()[j];
            work[which].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[which].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[which].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}

/// Relative disagreement with an absolute floor for near-zero gradients.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        // both effectively zero: compare absolutely against the fd noise floor
        (a - b).abs() * 1e2
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_agreement_on_composition() {
        let x = Tensor::from_vec(&[3], vec![0.3, -0.7, 1.2]).unwrap();
        let err = max_relative_error(&[x], DEFAULT_STEP, |tape, ids| {
            let s = tape.sigmoid(ids[0])?;
            let e = tape.exp(s)?;
            let m = tape.mul(e, s)?;
            tape.mean(m)
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn three_layer_composition_within_tolerance() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::he_uniform(&[1, 2, 4, 4], 4, &mut rng);
        let w1 = Tensor::he_uniform(&[3, 2, 3, 3], 18, &mut rng);
        let w2 = Tensor::he_uniform(&[1, 3, 3, 3], 27, &mut rng);
        let err = max_relative_error(&[x, w1, w2], DEFAULT_STEP, |tape, ids| {
            let c1 = tape.conv2d_3x3(ids[0], ids[1])?;
            let r1 = tape.relu(c1)?;
            let c2 = tape.conv2d_3x3(r1, ids[2])?;
            let s = tape.sigmoid(c2)?;
            tape.mean(s)
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
