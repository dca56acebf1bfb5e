//! Network assembly shared by the observer and the interpreter.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Mlp, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::CHANNELS;
use crate::interpreter::InterpreterNet;
use crate::observer::ObserverNet;
use crate::scm::{self, DagWeights};

pub const ENCODER_HIDDEN: [usize; 2] = [900, 300];
pub const OBSERVER_DECODER_HIDDEN: [usize; 4] = [300, 300, 1024, 1024];
pub const INTERPRETER_DECODER_HIDDEN: [usize; 3] = [300, 300, 1024];

pub const ADJACENCY_PARAM: &str = "adjacency";

/// Image size and latent layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub width: usize,
    pub height: usize,
    pub alpha: usize,
    pub concepts: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            alpha: 4,
            concepts: 4,
        }
    }
}

impl Architecture {
    pub fn pixels(&self) -> usize {
        self.width * self.height * CHANNELS
    }

    pub fn latent_dim(&self) -> usize {
        self.alpha * self.concepts
    }
}

/// The four model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Scadi,
    NdScadi,
    UnsupCausalVae,
    CausalVae,
}

/// Which building blocks a variant wires in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub supervision: bool,
    pub observer: bool,
    pub interpreter: bool,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::CausalVae,
        Variant::UnsupCausalVae,
        Variant::NdScadi,
        Variant::Scadi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Scadi => "scadi",
            Variant::NdScadi => "nd-scadi",
            Variant::UnsupCausalVae => "unsup-causalvae",
            Variant::CausalVae => "causalvae",
        }
    }

    pub fn components(self) -> Components {
        match self {
            Variant::CausalVae => Components {
                supervision: true,
                observer: false,
                interpreter: true,
            },
            Variant::UnsupCausalVae => Components {
                supervision: false,
                observer: false,
                interpreter: true,
            },
            Variant::NdScadi | Variant::Scadi => Components {
                supervision: false,
                observer: true,
                interpreter: true,
            },
        }
    }

    /// Whether the observer pass carries the DAG penalty.
    pub fn observer_dag(self) -> bool {
        self == Variant::Scadi
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// KL and regularizer weights of both objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta_observer: f64,
    pub beta_interpreter: f64,
    pub dag_observer: DagWeights,
    pub dag_interpreter: DagWeights,
    pub label: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_observer: 20.0,
            beta_interpreter: 4.0,
            dag_observer: DagWeights::new(6.0, 1.0),
            dag_interpreter: DagWeights::new(3.0, 0.5),
            label: 1.0,
            mask: 1.0,
        }
    }
}

/// Scalar loss components of one pass. Components a pass does not compute
/// stay at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl_u: f64,
    pub kl_eps: f64,
    pub kl_z: f64,
    pub dag: f64,
    pub l_u: f64,
    pub l_m: f64,
}

impl LossBreakdown {
    pub(crate) fn ensure_finite(&self, stage: &'static str) -> Result<()> {
        let all = [
            self.total, self.recon, self.kl_u, self.kl_eps, self.kl_z, self.dag, self.l_u, self.l_m,
        ];
        if all.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                stage,
                breakdown: self.to_string(),
            })
        }
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} recon={} kl_u={} kl_eps={} kl_z={} dag={} l_u={} l_m={}",
            self.total, self.recon, self.kl_u, self.kl_eps, self.kl_z, self.dag, self.l_u, self.l_m
        )
    }
}

/// Independent noise streams, one per sampling site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum NoiseSite {
    Shuffle = 0,
    ObserverU = 2,
    InterpreterEps = 3,
}

pub(crate) fn noise_rng(seed: u64, site: NoiseSite) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(site as u64);
    rng
}

/// Parameter ids of every network. Holds no values; pair it with a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Net {
    pub arch: Architecture,
    pub variant: Variant,
    /// Shared encoder `f`.
    pub encoder: Mlp,
    pub observer: Option<ObserverNet>,
    pub interpreter: InterpreterNet,
    pub adjacency: ParamId,
}

impl Net {
    pub fn observer(&self) -> Result<&ObserverNet> {
        self.observer.as_ref().ok_or_else(|| Error::UnsupportedVariant {
            variant: self.variant.to_string(),
            what: "the observer path",
        })
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.params()
    }

    /// Parameters updated by the observer pass: `f`, `f_O`, `h_O` and `A`.
    pub fn observer_pass_params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        if let Some(o) = &self.observer {
            p.extend(o.params());
        }
        p.push(self.adjacency);
        p
    }

    /// Parameters updated by the interpreter pass: `f`, `η`, `h_I` and `A`.
    pub fn interpreter_pass_params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        p.extend(self.interpreter.params());
        p.push(self.adjacency);
        p
    }

    /// `A` with its diagonal masked out, on the tape.
    pub fn adjacency_var<'s, T: Scalar>(
        &self,
        tape: &mut Tape<'s, T>,
        store: &'s ParamStore<T>,
    ) -> Result<Var> {
        let a = tape.param(store, self.adjacency);
        scm::effective_adjacency(tape, a)
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub net: Net,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds the networks of `variant`. Each component draws its initial
    /// weights from its own stream, so shared components start identical
    /// across variants.
    pub fn new(arch: Architecture, variant: Variant, seed: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(100 + k);
            rng
        };
        let mut params = ParamStore::new();
        let (c, alpha, pixels) = (arch.concepts, arch.alpha, arch.pixels());
        let mut sizes = vec![pixels];
        sizes.extend(ENCODER_HIDDEN);
        sizes.push(2 * alpha * c);
        let encoder = Mlp::new(&mut params, "f", &sizes, &mut stream(0));
        let observer = variant
            .components()
            .observer
            .then(|| ObserverNet::new(&mut params, arch, &mut stream(1)));
        let interpreter = InterpreterNet::new(&mut params, arch, &mut stream(2));
        let adjacency = params.add(ADJACENCY_PARAM, scm::init_adjacency(c));
        Self {
            net: Net {
                arch,
                variant,
                encoder,
                observer,
                interpreter,
                adjacency,
            },
            params,
        }
    }

    pub fn arch(&self) -> Architecture {
        self.net.arch
    }

    pub fn variant(&self) -> Variant {
        self.net.variant
    }

    pub fn adjacency(&self) -> &Tensor<T> {
        self.params.get(self.net.adjacency)
    }

    pub fn set_adjacency(&mut self, a: Tensor<T>) -> Result<()> {
        let c = self.net.arch.concepts;
        if a.shape() != [c, c] {
            return Err(Error::shape("set_adjacency", a.shape(), &[c, c]));
        }
        *self.params.get_mut(self.net.adjacency) = a;
        self.zero_adjacency_diagonal();
        Ok(())
    }

    /// Keeps `A` free of self-loops.
    pub fn zero_adjacency_diagonal(&mut self) {
        let c = self.net.arch.concepts;
        let a = self.params.get_mut(self.net.adjacency);
        for i in 0..c {
            a.set(i, i, T::zero());
        }
    }

    pub fn dagness(&self) -> f64 {
        scm::dagness_value(self.adjacency())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Checks that `images` is `[batch, W * H * C]`.
    pub(crate) fn check_batch(&self, images: &Tensor<T>) -> Result<usize> {
        match images.shape() {
            [b, p] if *p == self.net.arch.pixels() => Ok(*b),
            s => Err(Error::shape("image batch", s, &[self.net.arch.pixels()])),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_arch() -> Architecture {
        Architecture {
            width: 4,
            height: 4,
            alpha: 4,
            concepts: 4,
        }
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("nd_scadi".parse::<Variant>().unwrap(), Variant::NdScadi);
        assert!(matches!(
            "vae".parse::<Variant>(),
            Err(Error::UnknownVariant(_))
        ));
    }

    #[test]
    fn layer_sizes_follow_the_architecture() {
        let m: Model = Model::new(Architecture::default(), Variant::Scadi, 0);
        assert_eq!(m.net.encoder.sizes(), vec![27648, 900, 300, 32]);
        let o = m.net.observer.as_ref().unwrap();
        assert_eq!(o.encoder.sizes(), vec![16, 16, 16, 8]);
        assert_eq!(o.decoder.sizes(), vec![4, 300, 300, 1024, 1024, 27648]);
        assert_eq!(m.net.interpreter.decoders.len(), 4);
        for d in &m.net.interpreter.decoders {
            assert_eq!(d.sizes(), vec![4, 300, 300, 1024, 27648]);
        }
    }

    #[test]
    fn shared_components_start_identical_across_variants() {
        let a: Model = Model::new(tiny_arch(), Variant::Scadi, 5);
        let b: Model = Model::new(tiny_arch(), Variant::UnsupCausalVae, 5);
        let wa = a.params.get(a.net.interpreter.decoders[0].layers[0].weight);
        let wb = b.params.get(b.net.interpreter.decoders[0].layers[0].weight);
        assert_eq!(wa, wb);
        assert_eq!(a.adjacency(), b.adjacency());
        assert!((a.dagness() - 6.328125).abs() < 1e-9);
    }

    #[test]
    fn pass_parameter_sets_cover_everything() {
        let m: Model = Model::new(tiny_arch(), Variant::Scadi, 0);
        let mut all: Vec<ParamId> = m.net.observer_pass_params();
        all.extend(m.net.interpreter_pass_params());
        all.sort_by_key(|p| p.index());
        all.dedup();
        assert_eq!(all.len(), m.params.len());
    }
}
