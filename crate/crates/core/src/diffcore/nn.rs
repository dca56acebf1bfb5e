use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// Fully connected layer: `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    /// Weights and biases drawn uniformly from `±sqrt(1 / n_in)`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / n_in as f64).sqrt();
        let mut draw = |count: usize| -> Vec<T> {
            (0..count)
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect()
        };
        let w = Tensor::new(&[n_out, n_in], draw(n_out * n_in)).expect("shape");
        let b = Tensor::new(&[n_out], draw(n_out)).expect("shape");
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            n_in,
            n_out,
        }
    }

    pub fn forward<'s, T: Scalar>(
        &self,
        tape: &mut Tape<'s, T>,
        store: &'s ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Stack of linear layers with ELU between consecutive layers (none after
/// the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        sizes: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward<'s, T: Scalar>(
        &self,
        tape: &mut Tape<'s, T>,
        store: &'s ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.elu(h);
            }
            h = layer.forward(tape, store, h)?;
        }
        Ok(h)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_in];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}
