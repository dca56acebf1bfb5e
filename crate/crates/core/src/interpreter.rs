//! The causal module: SCM transform of `ε`, masked propagation, per-concept
//! decoders and do-operations.

use rand::Rng;

use crate::diffcore::{
    gaussian_kl, gaussian_kl_to, GaussianPosterior, Mlp, ParamId, ParamStore, Scalar, Tape,
    Tensor, Var,
};
use crate::error::{Error, Result};
use crate::model::{
    noise_rng, Architecture, LossBreakdown, LossWeights, Model, Net, NoiseSite,
    INTERPRETER_DECODER_HIDDEN,
};
use crate::observer::{encode_shared, observe, reconstruction_error, sample};
use crate::scm::{self, MaskLayer, StructureReport, ROUNDING_THRESHOLD};

/// `c` decoders `α -> 300 -> 300 -> 1024 -> WHC` and the mask parameters `η`.
#[derive(Clone, Debug)]
pub struct InterpreterNet {
    pub decoders: Vec<Mlp>,
    pub mask: MaskLayer,
}

impl InterpreterNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, arch: Architecture, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![arch.alpha];
        sizes.extend(INTERPRETER_DECODER_HIDDEN);
        sizes.push(arch.pixels());
        let decoders = (0..arch.concepts)
            .map(|j| Mlp::new(store, &format!("h_i.{j}"), &sizes, rng))
            .collect();
        let mask = MaskLayer::new(store, arch.concepts, arch.alpha, rng);
        Self { decoders, mask }
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.decoders.iter().flat_map(Mlp::params).collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.decoder_params();
        p.extend(self.mask.params());
        p
    }
}

/// Mean of the per-concept decoder outputs. `z_masked` is `[batch, cα]`.
pub fn decode_interpretation<'s, T: Scalar>(
    tape: &mut Tape<'s, T>,
    store: &'s ParamStore<T>,
    net: &Net,
    z_masked: Var,
) -> Result<Var> {
    let alpha = net.arch.alpha;
    let decoders = &net.interpreter.decoders;
    let mut total = None;
    for (j, dec) in decoders.iter().enumerate() {
        let zj = tape.narrow_cols(z_masked, j * alpha, alpha)?;
        let out = dec.forward(tape, store, zj)?;
        total = Some(match total {
            None => out,
            Some(acc) => tape.add(acc, out)?,
        });
    }
    let total = total.expect("at least one concept");
    Ok(tape.scale(total, 1.0 / decoders.len() as f64))
}

fn mean_squared<T: Scalar>(tape: &mut Tape<'_, T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq))
}

/// `l_u`: mean squared difference between labels before and after the mask
/// layer.
pub fn label_loss<T: Scalar>(tape: &mut Tape<'_, T>, u_label: Var, u_masked: Var) -> Result<Var> {
    mean_squared(tape, u_label, u_masked)
}

/// `l_m`: mean squared difference between `z` and its masked reconstruction.
pub fn mask_loss<T: Scalar>(tape: &mut Tape<'_, T>, z: Var, z_masked: Var) -> Result<Var> {
    mean_squared(tape, z, z_masked)
}

/// Where the interpreter's labels `u` come from.
#[derive(Clone, Debug)]
pub enum LabelSource<T: Scalar> {
    /// Posterior mean of the observer, detached.
    Observer,
    /// Fixed labels, `[batch, c]`.
    Given(Tensor<T>),
    /// No labels: the `z` prior is centered at zero and `l_u` is dropped.
    Absent,
}

/// Tape handles of one interpreter forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LatentBundle {
    pub eps_post: GaussianPosterior,
    pub eps_sample: Var,
    pub z: Var,
    pub z_masked: Var,
    pub u_label: Option<Var>,
    pub u_masked: Option<Var>,
    pub x_hat: Var,
}

/// Interpreter objective: reconstruction from the masked latents, the
/// `ε` and `z` divergences, the DAG penalty, `l_u` and `l_m`.
///
/// `q(z)` has mean `linear_scm(A, mean(ε))` and the log-variance of the
/// `ε` posterior; the prior `p(z|u)` has mean `u_j` on each of concept
/// `j`'s entries and unit variance.
pub fn interpreter_loss<'s, T: Scalar>(
    tape: &mut Tape<'s, T>,
    store: &'s ParamStore<T>,
    net: &Net,
    x: Var,
    labels: &LabelSource<T>,
    weights: &LossWeights,
    seed: u64,
) -> Result<(Var, LossBreakdown, LatentBundle)> {
    let (c, alpha) = (net.arch.concepts, net.arch.alpha);
    let batch = tape.shape(x)[0];
    let inv_batch = 1.0 / batch as f64;
    let a = net.adjacency_var(tape, store)?;

    let eps_post = encode_shared(tape, store, net, x)?;
    let eps = sample(tape, eps_post, &mut noise_rng(seed, NoiseSite::InterpreterEps))?;
    // z is drawn from q(z): the mean goes through the SCM, the noise does not,
    // so a nearly singular I - A^T cannot blow the noise up
    let z_mean = scm::linear_scm(tape, a, eps_post.mean, alpha)?;
    let noise = tape.sub(eps, eps_post.mean)?;
    let z = tape.add(z_mean, noise)?;
    let z_masked =
        scm::masked_propagate(tape, store, &net.interpreter.mask, a, z, eps)?;
    let x_hat = decode_interpretation(tape, store, net, z_masked)?;
    let recon = reconstruction_error(tape, x, x_hat)?;

    let u_label = match labels {
        LabelSource::Observer => {
            let u = observe(tape, store, net, eps_post.mean)?;
            Some(tape.detach(u.mean))
        }
        LabelSource::Given(t) => {
            if t.shape() != [batch, c] {
                return Err(Error::shape("labels", t.shape(), &[batch, c]));
            }
            Some(tape.constant(t.clone()))
        }
        LabelSource::Absent => None,
    };

    let kl_eps_sum = gaussian_kl(tape, eps_post)?;
    let kl_eps = tape.scale(kl_eps_sum, inv_batch);
    let z_post = GaussianPosterior::new(tape, z_mean, eps_post.log_variance)?;
    let kl_z_sum = match u_label {
        Some(u) => {
            let prior = tape.repeat_elems(u, alpha)?;
            gaussian_kl_to(tape, z_post, prior)?
        }
        None => gaussian_kl(tape, z_post)?,
    };
    let kl_z = tape.scale(kl_z_sum, inv_batch);
    let kl = tape.add(kl_eps, kl_z)?;
    let weighted_kl = tape.scale(kl, weights.beta_interpreter);

    let dag = scm::dag_penalty(tape, a, weights.dag_interpreter)?;
    let l_m = mask_loss(tape, z, z_masked)?;
    let weighted_l_m = tape.scale(l_m, weights.mask);

    let mut total = tape.add(recon, weighted_kl)?;
    total = tape.add(total, dag)?;
    total = tape.add(total, weighted_l_m)?;

    let (u_masked, l_u_value) = match u_label {
        Some(u) => {
            let um = scm::mask_labels(tape, store, &net.interpreter.mask, a, u)?;
            let l_u = label_loss(tape, u, um)?;
            let weighted = tape.scale(l_u, weights.label);
            total = tape.add(total, weighted)?;
            (Some(um), tape.scalar_value(l_u).as_f64())
        }
        None => (None, 0.0),
    };

    let value = |tape: &Tape<'s, T>, v: Var| tape.scalar_value(v).as_f64();
    let breakdown = LossBreakdown {
        total: value(tape, total),
        recon: value(tape, recon),
        kl_u: 0.0,
        kl_eps: value(tape, kl_eps),
        kl_z: value(tape, kl_z),
        dag: value(tape, dag),
        l_u: l_u_value,
        l_m: value(tape, l_m),
    };
    breakdown.ensure_finite("interpreter")?;
    let bundle = LatentBundle {
        eps_post,
        eps_sample: eps,
        z,
        z_masked,
        u_label,
        u_masked,
        x_hat,
    };
    Ok((total, breakdown, bundle))
}

/// Latents and decoded images of an inference pass.
#[derive(Clone, Debug)]
pub struct Counterfactual<T: Scalar> {
    /// `[batch, cα]`.
    pub z: Tensor<T>,
    /// Per-concept means of `z`, `[batch, c]`.
    pub readout: Tensor<T>,
    /// Decoded images clamped to `[0, 1]`, `[batch, WHC]`.
    pub images: Tensor<T>,
}

/// `A` restricted to the edges of its rounded graph. Fails when that graph
/// has a cycle.
pub fn intervention_adjacency<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let rounded = scm::round_adjacency(a, ROUNDING_THRESHOLD);
    if !scm::is_dag(&rounded).acyclic {
        return Err(Error::Cyclic {
            report: StructureReport::new(a, ROUNDING_THRESHOLD).to_text(),
        });
    }
    let mut out = a.clone();
    let c = a.shape()[0];
    for i in 0..c {
        for j in 0..c {
            if !rounded.get(i, j) {
                out.set(i, j, T::zero());
            }
        }
    }
    Ok(out)
}

fn hold_concept<T: Scalar>(
    tape: &mut Tape<'_, T>,
    z: Var,
    alpha: usize,
    fixed: &Option<(usize, Tensor<T>)>,
) -> Result<Var> {
    let Some((j, value)) = fixed else {
        return Ok(z);
    };
    let c = tape.shape(z)[1] / alpha;
    let parts = (0..c)
        .map(|k| {
            if k == *j {
                Ok(tape.constant(value.clone()))
            } else {
                tape.narrow_cols(z, k * alpha, alpha)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_cols(&parts)
}

fn propagate<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    fixed: Option<(usize, Tensor<T>)>,
) -> Result<Counterfactual<T>> {
    let batch = model.check_batch(images)?;
    let net = &model.net;
    let store = &model.params;
    let (c, alpha) = (net.arch.concepts, net.arch.alpha);
    let am = intervention_adjacency(model.adjacency())?;

    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let a = tape.constant(am);
    let eps = encode_shared(&mut tape, store, net, x)?.mean;
    let z0 = scm::linear_scm(&mut tape, a, eps, alpha)?;
    let mut z = hold_concept(&mut tape, z0, alpha, &fixed)?;
    // Over a DAG every concept settles after at most c rounds.
    for _ in 0..c {
        let next = scm::masked_propagate(&mut tape, store, &net.interpreter.mask, a, z, eps)?;
        z = hold_concept(&mut tape, next, alpha, &fixed)?;
    }
    let readout = tape.mean_groups(z, alpha)?;
    let x_hat = decode_interpretation(&mut tape, store, net, z)?;
    debug_assert_eq!(tape.shape(readout), &[batch, c]);
    Ok(Counterfactual {
        z: tape.value(z).clone(),
        readout: tape.value(readout).clone(),
        images: tape.value(x_hat).map(|v| v.max(T::zero()).min(T::one())),
    })
}

/// Single-pass reconstruction through the masked SCM without intervention.
pub fn reconstruct<T: Scalar>(model: &Model<T>, images: &Tensor<T>) -> Result<Counterfactual<T>> {
    propagate(model, images, None)
}

/// `do(z_j = values)` for every image; `values` has `α` entries.
pub fn do_operation_with<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    concept: usize,
    values: &[f64],
) -> Result<Counterfactual<T>> {
    let arch = model.arch();
    if concept >= arch.concepts {
        return Err(Error::Invalid(format!(
            "concept {concept} out of range 0..{}",
            arch.concepts
        )));
    }
    if values.len() != arch.alpha {
        return Err(Error::shape("do_operation", &[values.len()], &[arch.alpha]));
    }
    let batch = model.check_batch(images)?;
    let row: Vec<T> = values.iter().map(|&v| T::of(v)).collect();
    let fixed = Tensor::new(&[batch, arch.alpha], row.repeat(batch))?;
    propagate(model, images, Some((concept, fixed)))
}

/// `do(z_j = v)` with `v` broadcast over the concept's `α` entries.
pub fn do_operation<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    concept: usize,
    value: f64,
) -> Result<Counterfactual<T>> {
    do_operation_with(model, images, concept, &vec![value; model.arch().alpha])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_arch;
    use crate::model::Variant;
    use rand::SeedableRng;

    fn batch(model: &Model<f32>, n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let p = model.arch().pixels();
        Tensor::new(&[n, p], (0..n * p).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn chain_model() -> Model<f32> {
        // 0 -> 2, 1 -> 2, 1 -> 3; concept 0 and 3 are not parents of each other.
        let mut m: Model = Model::new(tiny_arch(), Variant::Scadi, 4);
        let mut a = Tensor::zeros(&[4, 4]);
        for (i, j) in [(0, 2), (1, 2), (1, 3)] {
            a.set(i, j, 0.9);
        }
        a.set(3, 0, 0.3);
        m.set_adjacency(a).unwrap();
        m
    }

    #[test]
    fn label_and_mask_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::from_f64(&[1, 4], &[1.0, 0.0, 0.0, 0.0]).unwrap());
        let v = tape.constant(Tensor::zeros(&[1, 4]));
        let l = label_loss(&mut tape, u, v).unwrap();
        assert_eq!(tape.scalar_value(l), 0.25);
        let l2 = label_loss(&mut tape, v, u).unwrap();
        assert_eq!(tape.scalar_value(l2), 0.25);
        let z = tape.constant(Tensor::full(&[2, 8], 0.5));
        let zm = tape.constant(Tensor::full(&[2, 8], 0.8));
        let m = mask_loss(&mut tape, z, zm).unwrap();
        assert!((tape.scalar_value(m) - 0.09).abs() < 1e-12);
        let same = mask_loss(&mut tape, z, z).unwrap();
        assert_eq!(tape.scalar_value(same), 0.0);
    }

    #[test]
    fn decoder_combination_is_the_mean() {
        let mut m: Model<f64> = Model::<f32>::new(tiny_arch(), Variant::Scadi, 1).cast();
        let z = Tensor::full(&[1, 16], 0.3);
        let run = |m: &Model<f64>| {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let out = decode_interpretation(&mut tape, &m.params, &m.net, zv).unwrap();
            tape.value(out).clone()
        };
        let before = run(&m);
        let dec = m.net.interpreter.decoders[2].clone();
        let single = {
            let mut tape = Tape::new();
            let zv = tape.constant(Tensor::full(&[1, 4], 0.3));
            let out = dec.forward(&mut tape, &m.params, zv).unwrap();
            tape.value(out).clone()
        };
        for id in dec.params() {
            let t = m.params.get_mut(id);
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let after = run(&m);
        for i in 0..before.len() {
            let expected = single.data()[i] / 4.0;
            assert!((before.data()[i] - after.data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_init_closed_form() {
        let mut m: Model<f64> = Model::<f32>::new(tiny_arch(), Variant::CausalVae, 2).cast();
        m.set_adjacency(Tensor::zeros(&[4, 4])).unwrap();
        for id in m.net.interpreter.mask.params() {
            m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let labels = Tensor::from_f64(&[2, 4], &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0, -1.0, 2.0]).unwrap();
        let mean_sq = labels.data().iter().map(|v| v * v).sum::<f64>() / 8.0;
        let x = batch(&m.cast(), 2, 0).cast();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let w = LossWeights::default();
        let (_, b, _) = interpreter_loss(
            &mut tape,
            &m.params,
            &m.net,
            xv,
            &LabelSource::Given(labels),
            &w,
            0,
        )
        .unwrap();
        assert!((b.l_u - mean_sq).abs() < 1e-12);
        assert_eq!(b.l_m, 0.0);
        assert_eq!(b.dag, 0.0);
    }

    #[test]
    fn components_are_non_negative_and_isolated() {
        let m: Model = Model::new(tiny_arch(), Variant::Scadi, 3);
        let x = batch(&m, 3, 1);
        let w = LossWeights {
            beta_interpreter: 0.0,
            dag_interpreter: scm::DagWeights::NONE,
            label: 0.0,
            mask: 0.0,
            ..LossWeights::default()
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (_, b, _) =
            interpreter_loss(&mut tape, &m.params, &m.net, xv, &LabelSource::Observer, &w, 0)
                .unwrap();
        assert!(b.kl_eps >= 0.0 && b.kl_z >= 0.0 && b.l_u >= 0.0 && b.l_m >= 0.0);
        assert_eq!(b.total, b.recon);
    }

    #[test]
    fn backward_detaches_the_observer() {
        let m: Model = Model::new(tiny_arch(), Variant::Scadi, 3);
        let x = batch(&m, 3, 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let w = LossWeights::default();
        let (loss, _, _) =
            interpreter_loss(&mut tape, &m.params, &m.net, xv, &LabelSource::Observer, &w, 0)
                .unwrap();
        let grads = tape.backward(loss).unwrap().into_param_grads(m.params.len());
        for id in m.net.observer.as_ref().unwrap().params() {
            assert!(grads.is_zero(id), "{}", m.params.name(id));
        }
        for id in m.net.interpreter_pass_params() {
            assert!(grads.is_nonzero(id), "{}", m.params.name(id));
        }
    }

    #[test]
    fn sink_intervention_leaves_other_concepts() {
        let m = chain_model();
        let x = batch(&m, 2, 7);
        let base = reconstruct(&m, &x).unwrap();
        for sink in [2, 3] {
            let out = do_operation(&m, &x, sink, 2.5).unwrap();
            for b in 0..2 {
                for k in (0..4).filter(|&k| k != sink) {
                    assert_eq!(out.readout.at(b, k), base.readout.at(b, k));
                }
            }
        }
    }

    #[test]
    fn parent_intervention_moves_children() {
        let m = chain_model();
        let x = batch(&m, 1, 7);
        let base = reconstruct(&m, &x).unwrap();
        let out = do_operation(&m, &x, 1, 3.0).unwrap();
        assert!((out.readout.at(0, 2) - base.readout.at(0, 2)).abs() > 0.0);
        assert!((out.readout.at(0, 3) - base.readout.at(0, 3)).abs() > 0.0);
        assert_eq!(out.readout.at(0, 0), base.readout.at(0, 0));
    }

    #[test]
    fn no_op_intervention_reproduces_reconstruction() {
        let m = chain_model();
        let x = batch(&m, 1, 8);
        let base = reconstruct(&m, &x).unwrap();
        for j in 0..4 {
            let current: Vec<f64> = base.z.data()[j * 4..j * 4 + 4]
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            let out = do_operation_with(&m, &x, j, &current).unwrap();
            assert!(out.images.max_abs_diff(&base.images) < 1e-6);
        }
    }

    #[test]
    fn empty_graph_intervention_touches_only_the_target() {
        let mut m: Model = Model::new(tiny_arch(), Variant::Scadi, 4);
        m.set_adjacency(Tensor::full(&[4, 4], 0.2)).unwrap();
        let x = batch(&m, 2, 1);
        let base = reconstruct(&m, &x).unwrap();
        for j in 0..4 {
            let out = do_operation(&m, &x, j, -4.0).unwrap();
            for b in 0..2 {
                for k in (0..4).filter(|&k| k != j) {
                    assert_eq!(out.readout.at(b, k), base.readout.at(b, k));
                }
                assert!((out.readout.at(b, j) + 4.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cyclic_graph_is_refused() {
        let m: Model = Model::new(tiny_arch(), Variant::Scadi, 4);
        let x = batch(&m, 1, 1);
        match do_operation(&m, &x, 0, 1.0) {
            Err(Error::Cyclic { report }) => assert!(report.contains("is_dag = false")),
            other => panic!("{other:?}"),
        }
    }
}
