use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Log-variances are clamped to this interval before use.
pub const LOG_VARIANCE_BOUNDS: (f64, f64) = (-10.0, 10.0);

/// Diagonal Gaussian posterior living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior {
    pub mean: Var,
    pub log_variance: Var,
}

impl GaussianPosterior {
    pub fn new<T: Scalar>(tape: &Tape<'_, T>, mean: Var, log_variance: Var) -> Result<Self> {
        if tape.shape(mean) != tape.shape(log_variance) {
            return Err(Error::shape(
                "posterior",
                tape.shape(mean),
                tape.shape(log_variance),
            ));
        }
        Ok(Self { mean, log_variance })
    }

    /// Splits a `[batch, 2 * dim]` head into `(mean, clamped log-variance)`.
    pub fn from_head<T: Scalar>(tape: &mut Tape<'_, T>, head: Var, dim: usize) -> Result<Self> {
        let mean = tape.narrow_cols(head, 0, dim)?;
        let raw = tape.narrow_cols(head, dim, dim)?;
        let log_variance = tape.clamp(raw, LOG_VARIANCE_BOUNDS.0, LOG_VARIANCE_BOUNDS.1);
        Ok(Self { mean, log_variance })
    }
}

/// Standard-normal draws of the given shape.
pub fn standard_normal<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let count: usize = shape.iter().product();
    let data = (0..count)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("count matches shape")
}

/// `mean + exp(0.5 * log_variance) * noise` with explicit noise.
pub fn reparameterize_with<T: Scalar>(
    tape: &mut Tape<'_, T>,
    post: GaussianPosterior,
    noise: Tensor<T>,
) -> Result<Var> {
    if noise.shape() != tape.shape(post.mean) {
        return Err(Error::shape(
            "reparameterize",
            tape.shape(post.mean),
            noise.shape(),
        ));
    }
    let half = tape.scale(post.log_variance, 0.5);
    let std = tape.exp(half);
    let eps = tape.constant(noise);
    let spread = tape.mul(std, eps)?;
    tape.add(post.mean, spread)
}

/// Reparameterized sample with noise drawn from a seeded generator.
pub fn reparameterize<T: Scalar>(
    tape: &mut Tape<'_, T>,
    post: GaussianPosterior,
    noise_seed: u64,
) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = standard_normal(tape.shape(post.mean), &mut rng);
    reparameterize_with(tape, post, noise)
}

/// `KL(q || N(0, I))` summed over every entry.
pub fn gaussian_kl<T: Scalar>(tape: &mut Tape<'_, T>, post: GaussianPosterior) -> Result<Var> {
    let sq = tape.square(post.mean)?;
    kl_from_squared_offset(tape, post, sq)
}

/// `KL(q || N(prior_mean, I))` summed over every entry.
pub fn gaussian_kl_to<T: Scalar>(
    tape: &mut Tape<'_, T>,
    post: GaussianPosterior,
    prior_mean: Var,
) -> Result<Var> {
    let diff = tape.sub(post.mean, prior_mean)?;
    let sq = tape.square(diff)?;
    kl_from_squared_offset(tape, post, sq)
}

fn kl_from_squared_offset<T: Scalar>(
    tape: &mut Tape<'_, T>,
    post: GaussianPosterior,
    squared_offset: Var,
) -> Result<Var> {
    let var = tape.exp(post.log_variance);
    let a = tape.add(var, squared_offset)?;
    let b = tape.sub(a, post.log_variance)?;
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum(c);
    Ok(tape.scale(s, 0.5))
}
