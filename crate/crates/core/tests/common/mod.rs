//! Shared test helpers: central finite differences against the tape.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rovae::autodiff::{Tape, Tensor, Var};
use rovae::Result;

pub const FD_STEP: f64 = 1e-6;

/// `|a - n| / max(|a| + |n|, 1e-6)`: relative once either side is
/// non-negligible, absolute near zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Largest relative error between reverse-mode gradients of the scalar `f`
/// and central differences, over every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        tape.value(root).item()
    };
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        for e in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[e];
            probe[k].data_mut()[e] = x0 + FD_STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[e] = x0 - FD_STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k].data()[e], numeric));
        }
    }
    Ok(worst)
}

/// Tensor of the given shape with entries uniform in `lo..hi`, optionally
/// kept at least `gap` away from each point in `avoid` (kinks).
pub fn uniform(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    avoid: &[f64],
    gap: f64,
) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if avoid.iter().all(|a| (v - a).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
