//! Run configuration as line-oriented `key = value` text.
//!
//! `#` starts a comment. Unknown keys are rejected; missing keys keep their
//! defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, LossWeights, Variant};
use crate::scm::DagWeights;

/// Everything that determines a training run's numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub arch: Architecture,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_observer: f64,
    pub lr_interpreter: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Global gradient-norm clip applied in each pass.
    pub grad_clip: f64,
    /// Epochs between checkpoints and `A` snapshots; 0 keeps only the last.
    pub checkpoint_every: usize,
    /// Use at most this many training images; 0 uses all of them.
    pub train_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Scadi,
            arch: Architecture::default(),
            batch_size: 512,
            epochs: 500,
            lr_observer: 1e-3,
            lr_interpreter: 3e-4,
            weights: LossWeights::default(),
            seed: 0,
            grad_clip: 100.0,
            checkpoint_every: 50,
            train_limit: 0,
        }
    }
}

/// A training config plus file locations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub lfset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn dag_text(w: DagWeights) -> String {
    format!("{}, {}", w.linear, w.quadratic)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_dag(key: &str, value: &str) -> Result<DagWeights> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    let [l, q] = parts[..] else {
        return Err(Error::Config(format!("{key}: expected two numbers, got {value:?}")));
    };
    let w = DagWeights::new(parse_num(key, l)?, parse_num(key, q)?);
    if w.linear < 0.0 || w.quadratic < 0.0 {
        return Err(Error::Config(format!("{key}: weights must be non-negative")));
    }
    Ok(w)
}

impl TrainConfig {
    /// Sets one key. Returns `false` for keys this struct does not own.
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let w = &mut self.weights;
        match key {
            "variant" => self.variant = value.parse()?,
            "width" => self.arch.width = parse_num(key, value)?,
            "height" => self.arch.height = parse_num(key, value)?,
            "alpha" => self.arch.alpha = parse_num(key, value)?,
            "concepts" => self.arch.concepts = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "lr_observer" => self.lr_observer = parse_num(key, value)?,
            "lr_interpreter" => self.lr_interpreter = parse_num(key, value)?,
            "beta_observer" => w.beta_observer = parse_num(key, value)?,
            "beta_interpreter" => w.beta_interpreter = parse_num(key, value)?,
            "dag_observer" => w.dag_observer = parse_dag(key, value)?,
            "dag_interpreter" => w.dag_interpreter = parse_dag(key, value)?,
            "w_label" => w.label = parse_num(key, value)?,
            "w_mask" => w.mask = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "train_limit" => self.train_limit = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if a.width == 0 || a.height == 0 || a.alpha == 0 || a.concepts == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let rates = [self.lr_observer, self.lr_interpreter, self.grad_clip];
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "learning rates and grad_clip must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        line("variant", self.variant.to_string());
        line("width", self.arch.width.to_string());
        line("height", self.arch.height.to_string());
        line("alpha", self.arch.alpha.to_string());
        line("concepts", self.arch.concepts.to_string());
        line("batch_size", self.batch_size.to_string());
        line("epochs", self.epochs.to_string());
        line("lr_observer", self.lr_observer.to_string());
        line("lr_interpreter", self.lr_interpreter.to_string());
        line("beta_observer", w.beta_observer.to_string());
        line("beta_interpreter", w.beta_interpreter.to_string());
        line("dag_observer", dag_text(w.dag_observer));
        line("dag_interpreter", dag_text(w.dag_interpreter));
        line("w_label", w.label.to_string());
        line("w_mask", w.mask.to_string());
        line("seed", self.seed.to_string());
        line("grad_clip", self.grad_clip.to_string());
        line("checkpoint_every", self.checkpoint_every.to_string());
        line("train_limit", self.train_limit.to_string());
        out
    }

    /// SHA-256 of [`TrainConfig::to_text`], hex encoded.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let run = RunConfig::parse(text)?;
        if run.dataset.is_some() || run.lfset.is_some() || run.out.is_some() {
            return Err(Error::Config("paths are not part of a training config".into()));
        }
        Ok(run.train)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").expect("string write");
        s
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let path = || Some(PathBuf::from(value));
            match key {
                "dataset" => cfg.dataset = path(),
                "lfset" => cfg.lfset = path(),
                "out" => cfg.out = path(),
                _ => {
                    if !cfg.train.set(key, value)? {
                        return Err(Error::Config(format!(
                            "line {}: unknown key {key:?}",
                            n + 1
                        )));
                    }
                }
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = self.train.to_text();
        for (k, v) in [("dataset", &self.dataset), ("lfset", &self.lfset), ("out", &self.out)] {
            if let Some(p) = v {
                writeln!(out, "{k} = {}", p.display()).expect("string write");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.epochs), (512, 500));
        assert_eq!((c.lr_observer, c.lr_interpreter), (1e-3, 3e-4));
        assert_eq!((c.weights.beta_observer, c.weights.beta_interpreter), (20.0, 4.0));
        assert_eq!(c.weights.dag_observer, DagWeights::new(6.0, 1.0));
        assert_eq!(c.weights.dag_interpreter, DagWeights::new(3.0, 0.5));
        assert_eq!((c.arch.alpha, c.arch.concepts), (4, 4));
    }

    #[test]
    fn text_round_trips() {
        let mut c = TrainConfig {
            variant: Variant::NdScadi,
            seed: 17,
            ..TrainConfig::default()
        };
        c.weights.dag_observer = DagWeights::new(3.0, 0.5);
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn comments_and_missing_keys() {
        let text = "# smoke\nepochs = 3  # short\n\nvariant = unsup_causalvae\ndataset = /tmp/d\n";
        let r = RunConfig::parse(text).unwrap();
        assert_eq!(r.train.epochs, 3);
        assert_eq!(r.train.variant, Variant::UnsupCausalVae);
        assert_eq!(r.train.batch_size, 512);
        assert_eq!(r.dataset, Some(PathBuf::from("/tmp/d")));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::parse("epoch = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("epochs = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("dag_observer = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("dag_observer = -1, 0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("batch_size = 0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("variant = gan"), Err(Error::UnknownVariant(_))));
    }
}
