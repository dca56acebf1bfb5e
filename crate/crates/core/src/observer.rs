//! The pseudo-label generator: shared encoder `f`, observation encoder
//! `f_O` and observation decoder `h_O`.

use rand::Rng;

use crate::diffcore::{
    gaussian_kl, reparameterize_with, standard_normal, GaussianPosterior, Mlp, ParamId,
    ParamStore, Scalar, Tape, Tensor, Var,
};
use crate::error::Result;
use crate::model::{
    noise_rng, Architecture, LossBreakdown, LossWeights, Net, NoiseSite, OBSERVER_DECODER_HIDDEN,
};
use crate::scm;

/// `f_O: αc -> αc -> αc -> 2c` and `h_O: c -> 300 -> 300 -> 1024 -> 1024 -> WHC`.
#[derive(Clone, Debug)]
pub struct ObserverNet {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl ObserverNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, arch: Architecture, rng: &mut impl Rng) -> Self {
        let (c, latent) = (arch.concepts, arch.latent_dim());
        let encoder = Mlp::new(store, "f_o", &[latent, latent, latent, 2 * c], rng);
        let mut sizes = vec![c];
        sizes.extend(OBSERVER_DECODER_HIDDEN);
        sizes.push(arch.pixels());
        let decoder = Mlp::new(store, "h_o", &sizes, rng);
        Self { encoder, decoder }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }
}

/// Posterior over `ε` from the shared encoder. `x` is `[batch, W*H*C]`.
pub fn encode_shared<'s, T: Scalar>(
    tape: &mut Tape<'s, T>,
    store: &'s ParamStore<T>,
    net: &Net,
    x: Var,
) -> Result<GaussianPosterior> {
    let head = net.encoder.forward(tape, store, x)?;
    GaussianPosterior::from_head(tape, head, net.arch.latent_dim())
}

/// Posterior over `u` given `ε` (`[batch, αc]`).
pub fn observe<'s, T: Scalar>(
    tape: &mut Tape<'s, T>,
    store: &'s ParamStore<T>,
    net: &Net,
    eps: Var,
) -> Result<GaussianPosterior> {
    let head = net.observer()?.encoder.forward(tape, store, eps)?;
    GaussianPosterior::from_head(tape, head, net.arch.concepts)
}

/// Sum of squared pixel errors per image, averaged over the batch.
pub fn reconstruction_error<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, x_hat: Var) -> Result<Var> {
    let batch = tape.shape(x)[0];
    let diff = tape.sub(x_hat, x)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / batch as f64))
}

pub(crate) fn sample<T: Scalar>(
    tape: &mut Tape<'_, T>,
    post: GaussianPosterior,
    rng: &mut impl Rng,
) -> Result<Var> {
    let noise = standard_normal(tape.shape(post.mean), rng);
    reparameterize_with(tape, post, noise)
}

/// Observer objective: reconstruction of `x` from a sampled `u`, plus
/// `β·KL(q(u|x,ε) || N(0, I))` and the DAG penalty on `A`. A zero
/// `dag_observer` weight leaves `A` out of the graph entirely.
///
/// `ε` is sampled from its posterior and fed to `f_O`; `u` is sampled from
/// the result and decoded by `h_O`.
pub fn observer_loss<'s, T: Scalar>(
    tape: &mut Tape<'s, T>,
    store: &'s ParamStore<T>,
    net: &Net,
    x: Var,
    weights: &LossWeights,
    seed: u64,
) -> Result<(Var, LossBreakdown)> {
    let observer = net.observer()?;
    let batch = tape.shape(x)[0] as f64;
    let eps_post = encode_shared(tape, store, net, x)?;
    // u is read off the mean of eps; eps noise belongs to the interpreter pass
    let u_post = observe(tape, store, net, eps_post.mean)?;
    let u = sample(tape, u_post, &mut noise_rng(seed, NoiseSite::ObserverU))?;
    let x_hat = observer.decoder.forward(tape, store, u)?;

    let recon = reconstruction_error(tape, x, x_hat)?;
    let kl_sum = gaussian_kl(tape, u_post)?;
    let kl = tape.scale(kl_sum, 1.0 / batch);
    let weighted_kl = tape.scale(kl, weights.beta_observer);
    let mut total = tape.add(recon, weighted_kl)?;
    let mut dag_value = 0.0;
    if !weights.dag_observer.is_zero() {
        let a = net.adjacency_var(tape, store)?;
        let penalty = scm::dag_penalty(tape, a, weights.dag_observer)?;
        dag_value = tape.scalar_value(penalty).as_f64();
        total = tape.add(total, penalty)?;
    }
    let breakdown = LossBreakdown {
        total: tape.scalar_value(total).as_f64(),
        recon: tape.scalar_value(recon).as_f64(),
        kl_u: tape.scalar_value(kl).as_f64(),
        dag: dag_value,
        ..LossBreakdown::default()
    };
    breakdown.ensure_finite("observer")?;
    Ok((total, breakdown))
}

/// Posterior means of `u` for a batch of images, computed from the mean of
/// `ε`. Deterministic; used for pseudo-labels and label-finding.
pub fn observed_labels<T: Scalar>(
    store: &ParamStore<T>,
    net: &Net,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let eps = encode_shared(&mut tape, store, net, x)?;
    let u = observe(&mut tape, store, net, eps.mean)?;
    Ok(tape.value(u.mean).clone())
}
