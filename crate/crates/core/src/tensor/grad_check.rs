//! Central-difference verification of tape gradients.
//!
//! The checker runs the model builder twice per perturbed element, so it is
//! only meant for small parameter sets in tests. Use f64 tensors: at f32
//! precision the difference quotient itself is too noisy to certify
//! correctness.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Maximum relative error between analytic and central-difference gradients
/// over every element of every parameter.
///
/// `build` must construct the scalar loss from the given leaves on the given
/// tape; it is called fresh for each evaluation. Relative error is
/// `|a - n| / (|a| + |n| + 1e-8)`.
pub fn grad_check<F>(params: &[Tensor<f64>], build: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Input(format!(
            "step size {eps:e} outside [1e-6, 1e-3]; too small drowns in rounding, too large in truncation"
        )));
    }

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be scalar, got shape {:?}",
                v.shape()
            )));
        }
        let x = v.data()[0];
        if !x.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {x}")));
        }
        Ok(x)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Shape(format!(
            "loss must be scalar, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();

    // Numeric pass, one central difference per element.
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let mut plus: Vec<Tensor<f64>> = params.to_vec();
            plus[pi].data_mut()[ei] += eps;
            let mut minus: Vec<Tensor<f64>> = params.to_vec();
            minus[pi].data_mut()[ei] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
