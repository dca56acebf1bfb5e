//! Differentiable-compute substrate: tensors, a reverse-mode tape with the
//! small op set the models need, dense linear algebra, layers, Gaussian
//! helpers, Adam and a finite-difference gradient oracle.

mod gaussian;
mod gradcheck;
pub mod linalg;
mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gaussian::{
    gaussian_kl, gaussian_kl_to, reparameterize, reparameterize_with, standard_normal,
    GaussianPosterior, LOG_VARIANCE_BOUNDS,
};
pub use gradcheck::{grad_check, grad_check_coords, GradCheck, FD_STEP, RELATIVE_FLOOR};
pub use nn::{Linear, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

use crate::error::Result;

/// `weight * input + bias` for a single input vector.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let y = tape.linear(x, w, Some(b))?;
    Ok(tape.value(y).clone())
}

/// Elementwise ELU.
pub fn elu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(tape::elu)
}
