//! Finite-difference verification of reverse-mode gradients.
//!
//! Every differentiable primitive is checked against central differences in
//! f64; relative error uses an absolute floor so near-zero gradients do not
//! blow up the quotient.

use crate::autodiff::{GradTape, Var};
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("non-finite output in forward pass")]
    NonFiniteOutput,
    #[error("non-finite analytic gradient for input {input} element {element}")]
    NonFiniteGradient { input: usize, element: usize },
}

const REL_FLOOR: f64 = 1e-6;

/// Compare reverse-mode gradients of a scalar-valued graph against central
/// finite differences, elementwise over every input. Returns the worst
/// relative error.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Var,
{
    assert!((1e-5..=1e-3).contains(&eps), "eps must lie in [1e-5, 1e-3]");
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars);
        assert_eq!(tape.value(out).numel(), 1, "grad_check target must be scalar");
        tape.value(out).data()[0]
    };

    // Analytic pass.
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars);
    if !tape.value(out).is_finite() {
        return Err(GradCheckError::NonFiniteOutput);
    }
    tape.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let an = analytic[i].data()[e];
            if !an.is_finite() {
                return Err(GradCheckError::NonFiniteGradient { input: i, element: e });
            }
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + eps;
            let fp = eval(&work);
            work[i].data_mut()[e] = orig - eps;
            let fm = eval(&work);
            work[i].data_mut()[e] = orig;
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(GradCheckError::NonFiniteOutput);
            }
            let fd = (fp - fm) / (2.0 * eps);
            let err = (fd - an).abs() / (fd.abs() + an.abs()).max(REL_FLOOR);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
