use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed subset of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>, params: Vec<ParamId>) -> Self {
        let first = params
            .iter()
            .map(|&id| Tensor::zeros(store.get(id).shape()))
            .collect();
        let second = params
            .iter()
            .map(|&id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Self {
            config,
            params,
            first,
            second,
            steps: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `(first, second)` moment buffers for the `i`-th managed parameter.
    pub fn moments(&self, i: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.first[i], &self.second[i])
    }

    /// Restores state saved with [`Adam::moments`] and [`Adam::steps`].
    pub fn restore(&mut self, steps: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) {
        assert_eq!(first.len(), self.params.len());
        assert_eq!(second.len(), self.params.len());
        self.steps = steps;
        self.first = first;
        self.second = second;
    }

    /// One bias-corrected update. Parameters without a gradient are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        self.steps += 1;
        let t = self.steps as i32;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let corr1 = T::of(1.0 - c.beta1.powi(t));
        let corr2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        for (i, &id) in self.params.iter().enumerate() {
            let Some(g) = grads.get(id) else {
                continue;
            };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
