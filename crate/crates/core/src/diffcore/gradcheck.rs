//! Central finite-difference oracle for reverse-mode gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-4;

/// Gradient magnitudes below this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn analytic_norm(&self) -> f64 {
        self.analytic.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Compares the reverse-mode gradient of `f` at `point` against central
/// differences over every coordinate.
pub fn grad_check<F>(f: F, point: &Tensor<f64>) -> Result<GradCheck>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, &coords)
}

/// As [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor<f64>, coords: &[usize]) -> Result<GradCheck>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let full = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor<f64>, index: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let y = f(&mut tape, x)?;
        let v = tape.scalar_value(y);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Oracle { index })
        }
    };

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut max_rel_error = 0.0f64;
    let mut worst_index = coords.first().copied().unwrap_or(0);
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = point.clone();
        minus.data_mut()[i] -= FD_STEP;
        let fd = (eval(plus, i)? - eval(minus, i)?) / (2.0 * FD_STEP);
        let ad = full.data()[i];
        let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(RELATIVE_FLOOR);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
        analytic.push(ad);
        numeric.push(fd);
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
