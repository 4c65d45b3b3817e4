//! Central-difference gradient checking in f64.

use super::{Tape, Tensor, Var};
use crate::blocks::Rng;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for gradients that vanish identically.
pub const SCALE_FLOOR: f64 = 1e-8;

/// `||a - n|| / max(||a||, ||n||, SCALE_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(SCALE_FLOOR)
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut x = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let hi = f(&x)?;
        x[i] = orig - step;
        let lo = f(&x)?;
        x[i] = orig;
        g.push((hi - lo) / (2.0 * step));
    }
    Ok(g)
}

fn weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.normal()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative error over all inputs between the tape's backward pass and
/// the numerical derivative of `reference`. Non-scalar outputs are reduced by
/// a fixed random projection.
pub fn check_against(
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    reference: impl Fn(&[Tensor<f64>]) -> Result<Vec<f64>>,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let w = weights(tape.value(out).numel(), 0x6772_6164);
    let mut grads = tape.backward_from(out, Tensor::new(shape, w.clone())?)?;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .take(*v)
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let numeric = numeric_grad(
            |x| {
                let mut ins = inputs.to_vec();
                ins[i] = Tensor::new(inputs[i].shape().to_vec(), x.to_vec())?;
                Ok(dot(&reference(&ins)?, &w))
            },
            inputs[i].data(),
            step,
        )?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// [`check_against`] with the op's own forward pass as reference.
pub fn check(build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>], step: f64) -> Result<f64> {
    let reference = |ins: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).to_f64_vec())
    };
    check_against(&build, reference, inputs, step)
}
