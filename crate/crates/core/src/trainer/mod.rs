//! Two-pass training: the observer pass, then the interpreter pass
//! supervised by the observer's detached labels.

mod checkpoint;
mod metrics;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

pub use checkpoint::{load_model, CHECKPOINT_VERSION};
pub use metrics::{metrics_tsv, parse_history, EpochMetrics, StepMetrics, METRICS_COLUMNS};
pub use sweep::{ablation_sweep, SweepRow, DEFAULT_DAG_SETTINGS};

use crate::config::TrainConfig;
use crate::diffcore::{Adam, AdamConfig, ParamGrads, Tape, Tensor};
use crate::error::{Error, Result};
use crate::interpreter::{interpreter_loss, LabelSource};
use crate::model::{noise_rng, LossWeights, Model, NoiseSite};
use crate::scene::{read_manifest, Factor, SceneParams, Split};
use crate::image::Image;
use crate::scm::{DagWeights, StructureReport, ROUNDING_THRESHOLD};
use crate::observer::observer_loss;

pub use crate::model::{Components, Variant};

/// Builds the networks a variant needs: an observer for the two SCADI
/// variants, an interpreter for all four.
pub fn make_variant(config: &TrainConfig) -> Result<Model> {
    config.validate()?;
    Ok(Model::new(config.arch, config.variant, config.seed))
}

/// Training images with their standardized factor labels.
#[derive(Clone, Debug)]
pub struct TrainData {
    /// `[n, W*H*C]`.
    pub images: Tensor<f32>,
    /// `[n, 4]`, zero mean and unit variance per factor.
    pub labels: Tensor<f32>,
    pub width: usize,
    pub height: usize,
}

/// `limit` indices spread evenly over `0..n`; all of them when `limit` is 0
/// or at least `n`.
fn spread(n: usize, limit: usize) -> Vec<usize> {
    if limit == 0 || limit >= n {
        return (0..n).collect();
    }
    (0..limit).map(|i| i * n / limit).collect()
}

impl TrainData {
    pub fn from_samples(samples: &[(Image, SceneParams)], limit: usize) -> Result<Self> {
        let picked: Vec<&(Image, SceneParams)> =
            spread(samples.len(), limit).into_iter().map(|i| &samples[i]).collect();
        let first = picked
            .first()
            .ok_or_else(|| Error::Invalid("no training samples".into()))?;
        let (width, height) = (first.0.width, first.0.height);
        let images = crate::image::batch_tensor(picked.iter().map(|s| &s.0))?;
        let factors: Vec<[f64; 4]> = picked.iter().map(|s| s.1.factors()).collect();
        Ok(Self {
            images,
            labels: standardize(&factors),
            width,
            height,
        })
    }

    /// Loads the training split of a generated dataset directory.
    pub fn load(dir: &Path, limit: usize) -> Result<Self> {
        let rows: Vec<_> = read_manifest(dir)?
            .into_iter()
            .filter(|s| s.split == Split::Train)
            .collect();
        let samples = spread(rows.len(), limit)
            .into_iter()
            .map(|i| {
                let s = &rows[i];
                Ok((Image::load_png(&dir.join(&s.filename))?, s.params))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(&samples, 0)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, idx: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let rows = |t: &Tensor<f32>| {
            let w = t.shape()[1];
            let data = idx
                .iter()
                .flat_map(|&i| t.data()[i * w..(i + 1) * w].iter().copied())
                .collect();
            Tensor::new(&[idx.len(), w], data).expect("rows")
        };
        (rows(&self.images), rows(&self.labels))
    }
}

fn standardize(factors: &[[f64; 4]]) -> Tensor<f32> {
    let n = factors.len() as f64;
    let mut out = vec![0.0f32; factors.len() * Factor::ALL.len()];
    for f in 0..Factor::ALL.len() {
        let mean = factors.iter().map(|r| r[f]).sum::<f64>() / n;
        let var = factors.iter().map(|r| (r[f] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for (i, r) in factors.iter().enumerate() {
            out[i * Factor::ALL.len() + f] = ((r[f] - mean) / sd) as f32;
        }
    }
    Tensor::new(&[factors.len(), Factor::ALL.len()], out).expect("label shape")
}

/// Seed of the noise drawn at a global step.
fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Model, optimizers and progress of a run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    observer_opt: Option<Adam>,
    interpreter_opt: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
    pub history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = make_variant(&config)?;
        let observer_opt = model.net.observer.is_some().then(|| {
            Adam::new(
                AdamConfig::with_lr(config.lr_observer),
                &model.params,
                model.net.observer_pass_params(),
            )
        });
        let interpreter_opt = Adam::new(
            AdamConfig::with_lr(config.lr_interpreter),
            &model.params,
            model.net.interpreter_pass_params(),
        );
        Ok(Self {
            config,
            model,
            observer_opt,
            interpreter_opt,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn observer_optimizer(&self) -> Option<&Adam> {
        self.observer_opt.as_ref()
    }

    pub fn interpreter_optimizer(&self) -> &Adam {
        &self.interpreter_opt
    }

    fn loss_weights(&self) -> LossWeights {
        let mut w = self.config.weights;
        if !self.config.variant.observer_dag() {
            w.dag_observer = DagWeights::NONE;
        }
        w
    }

    fn finish_grads(&self, mut grads: ParamGrads) -> Result<ParamGrads> {
        if self.config.grad_clip > 0.0 {
            grads.clip_global_norm(self.config.grad_clip);
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                stage: "gradient",
                breakdown: format!("step {}", self.step),
            });
        }
        Ok(grads)
    }

    /// One observer pass (when the variant has an observer) and one
    /// interpreter pass on a batch. `labels` are the standardized factors,
    /// used only by the supervised variant.
    pub fn train_step(&mut self, x: &Tensor<f32>, labels: &Tensor<f32>) -> Result<StepMetrics> {
        self.model.check_batch(x)?;
        let seed = step_seed(self.config.seed, self.step);
        let weights = self.loss_weights();
        let n_params = self.model.params.len();

        let mut observer = None;
        if self.observer_opt.is_some() {
            let (b, grads) = {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let (loss, b) = observer_loss(
                    &mut tape,
                    &self.model.params,
                    &self.model.net,
                    xv,
                    &weights,
                    seed,
                )?;
                let grads = tape.backward(loss)?.into_param_grads(n_params);
                (b, self.finish_grads(grads)?)
            };
            let opt = self.observer_opt.as_mut().expect("checked above");
            opt.step(&mut self.model.params, &grads);
            self.model.zero_adjacency_diagonal();
            observer = Some(b);
        }

        let source = match self.config.variant {
            Variant::Scadi | Variant::NdScadi => LabelSource::Observer,
            Variant::CausalVae => LabelSource::Given(labels.clone()),
            Variant::UnsupCausalVae => LabelSource::Absent,
        };
        let (interpreter, grads) = {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (loss, b, _) = interpreter_loss(
                &mut tape,
                &self.model.params,
                &self.model.net,
                xv,
                &source,
                &weights,
                seed,
            )?;
            let grads = tape.backward(loss)?.into_param_grads(n_params);
            (b, self.finish_grads(grads)?)
        };
        self.interpreter_opt.step(&mut self.model.params, &grads);
        self.model.zero_adjacency_diagonal();
        self.step += 1;
        Ok(StepMetrics {
            observer,
            interpreter,
            dagness: self.model.dagness(),
        })
    }

    /// One pass over `data` in a seeded order. Appends to the history.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochMetrics> {
        if data.images.shape()[1] != self.model.arch().pixels() {
            return Err(Error::Config(format!(
                "dataset images are {}x{}, config expects {}x{}",
                data.width,
                data.height,
                self.config.arch.width,
                self.config.arch.height
            )));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let epoch_seed = step_seed(self.config.seed, self.epoch as u64 | (1 << 62));
        order.shuffle(&mut noise_rng(epoch_seed, NoiseSite::Shuffle));
        let mut acc = metrics::Accumulator::default();
        for chunk in order.chunks(self.config.batch_size) {
            let (x, labels) = data.gather(chunk);
            let m = self.train_step(&x, &labels)?;
            acc.add(&m, chunk.len());
        }
        self.epoch += 1;
        let row = acc.finish(self.epoch, self.model.dagness());
        self.history.push(row);
        Ok(row)
    }

    pub fn structure(&self) -> StructureReport {
        StructureReport::new(self.model.adjacency(), ROUNDING_THRESHOLD)
    }
}

/// Files a run writes under its output directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.tsv")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:04}"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("final")
    }

    pub fn adjacency_snapshot(&self, epoch: usize) -> PathBuf {
        self.root.join("adjacency").join(format!("epoch_{epoch:04}.tsv"))
    }

    pub fn structure(&self) -> PathBuf {
        self.root.join("structure.txt")
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs epochs until `config.epochs` are complete, writing metrics, `A`
/// snapshots and checkpoints under `out` when given.
pub fn continue_training(
    trainer: &mut Trainer,
    data: &TrainData,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<()> {
    let layout = out.map(RunLayout::new);
    let cadence = trainer.config.checkpoint_every;
    if let Some(l) = &layout {
        if trainer.epoch == 0 {
            write_file(&l.adjacency_snapshot(0), &trainer.structure().matrix_tsv())?;
        }
    }
    let mut last_checkpoint: Option<PathBuf> = None;
    while trainer.epoch < trainer.config.epochs {
        let row = match trainer.run_epoch(data) {
            Ok(row) => row,
            Err(Error::NonFinite { stage, breakdown }) => {
                let at = last_checkpoint
                    .as_ref()
                    .map_or("none".to_string(), |p| p.display().to_string());
                return Err(Error::NonFinite {
                    stage,
                    breakdown: format!("{breakdown}; last good checkpoint: {at}"),
                });
            }
            Err(e) => return Err(e),
        };
        log::info!(
            "epoch {} l_obs={:.4} l_int={:.4} dagness={:.4}",
            row.epoch,
            row.l_obs,
            row.l_int,
            row.dagness
        );
        on_epoch(&row);
        if let Some(l) = &layout {
            write_file(&l.metrics(), &metrics::metrics_tsv(&trainer.config, &trainer.history))?;
            if cadence > 0 && trainer.epoch % cadence == 0 {
                write_file(
                    &l.adjacency_snapshot(trainer.epoch),
                    &trainer.structure().matrix_tsv(),
                )?;
                let dir = l.checkpoint(trainer.epoch);
                checkpoint::save(trainer, &dir)?;
                last_checkpoint = Some(dir);
            }
        }
    }
    if let Some(l) = &layout {
        write_file(&l.metrics(), &metrics::metrics_tsv(&trainer.config, &trainer.history))?;
        checkpoint::save(trainer, &l.final_checkpoint())?;
        write_file(&l.structure(), &trainer.structure().to_text())?;
    }
    Ok(())
}

/// Trains a fresh model on `data`.
pub fn train(
    config: &TrainConfig,
    data: &TrainData,
    out: Option<&Path>,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Trainer> {
    let mut trainer = Trainer::new(config.clone())?;
    if let Some(dir) = out {
        write_file(&dir.join("config.txt"), &config.to_text())?;
    }
    continue_training(&mut trainer, data, out, on_epoch)?;
    Ok(trainer)
}

impl Trainer {
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        checkpoint::save(self, dir)
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        checkpoint::load(dir)
    }
}
