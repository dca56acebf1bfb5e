//! Checkpoint directory: `manifest.txt` (text index), `tensors.bin`
//! (little-endian f32 values), `config.txt` and `history.tsv`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::metrics::{metrics_tsv, parse_history};
use super::Trainer;
use crate::config::TrainConfig;
use crate::diffcore::{Adam, Tensor};
use crate::error::{Error, Result};
use crate::model::Model;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "scadi-checkpoint";

struct Entry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn push(
    manifest: &mut String,
    bytes: &mut Vec<u8>,
    name: &str,
    t: &Tensor<f32>,
) {
    writeln!(manifest, "tensor {name} {} {}", bytes.len() / 4, shape_text(t.shape()))
        .expect("string write");
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_adam(manifest: &mut String, bytes: &mut Vec<u8>, tag: &str, opt: &Adam, model: &Model) {
    for (i, &id) in opt.params().iter().enumerate() {
        let (m, v) = opt.moments(i);
        let name = model.params.name(id);
        push(manifest, bytes, &format!("adam.{tag}.m.{name}"), m);
        push(manifest, bytes, &format!("adam.{tag}.v.{name}"), v);
    }
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, data).map_err(|e| Error::io(path, e))
}

pub(super) fn save(trainer: &Trainer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = &trainer.model;
    let mut manifest = String::new();
    writeln!(manifest, "format = {FORMAT}").expect("string write");
    writeln!(manifest, "version = {CHECKPOINT_VERSION}").expect("string write");
    writeln!(manifest, "epoch = {}", trainer.epoch).expect("string write");
    writeln!(manifest, "step = {}", trainer.step).expect("string write");
    writeln!(manifest, "config_digest = {}", trainer.config.digest()).expect("string write");
    if let Some(o) = &trainer.observer_opt {
        writeln!(manifest, "adam_observer_steps = {}", o.steps()).expect("string write");
    }
    writeln!(manifest, "adam_interpreter_steps = {}", trainer.interpreter_opt.steps())
        .expect("string write");
    let mut bytes = Vec::with_capacity(model.params.numel() * 4);
    for (_, name, t) in model.params.iter() {
        push(&mut manifest, &mut bytes, name, t);
    }
    if let Some(o) = &trainer.observer_opt {
        push_adam(&mut manifest, &mut bytes, "observer", o, model);
    }
    push_adam(&mut manifest, &mut bytes, "interpreter", &trainer.interpreter_opt, model);

    write(&dir.join("tensors.bin"), &bytes)?;
    write(&dir.join("config.txt"), trainer.config.to_text())?;
    write(&dir.join("history.tsv"), metrics_tsv(&trainer.config, &trainer.history))?;
    // Manifest last: a directory without one is an interrupted save.
    write(&dir.join("manifest.txt"), manifest)
}

struct Parsed {
    fields: Vec<(String, String)>,
    entries: Vec<Entry>,
    values: Vec<f32>,
}

impl Parsed {
    fn field(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn number<T: std::str::FromStr>(&self, path: &Path, key: &str) -> Result<T> {
        self.field(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, format!("missing or bad {key}")))
    }

    fn tensor(&self, path: &Path, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        if e.shape != shape {
            return Err(Error::format(
                path,
                format!(
                    "tensor {name} has shape {}, model expects {}",
                    shape_text(&e.shape),
                    shape_text(shape)
                ),
            ));
        }
        let n: usize = shape.iter().product();
        let data = self
            .values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::format(path, format!("tensor {name} runs past the data")))?;
        Tensor::new(shape, data.to_vec())
    }
}

fn parse(dir: &Path) -> Result<Parsed> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut fields = Vec::new();
    let mut entries = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        if let Some(rest) = line.strip_prefix("tensor ") {
            let cols: Vec<&str> = rest.split(' ').collect();
            let bad = || Error::format(&path, format!("bad tensor line {line:?}"));
            let [name, offset, shape] = cols[..] else {
                return Err(bad());
            };
            let shape = if shape.is_empty() {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad()))
                    .collect::<Result<Vec<usize>>>()?
            };
            entries.push(Entry {
                name: name.to_string(),
                offset: offset.parse().map_err(|_| bad())?,
                shape,
            });
        } else {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::format(&path, format!("bad line {line:?}")))?;
            fields.push((k.to_string(), v.to_string()));
        }
    }
    let parsed_head = Parsed {
        fields,
        entries,
        values: Vec::new(),
    };
    if parsed_head.field("format") != Some(FORMAT) {
        return Err(Error::format(&path, "not a checkpoint manifest"));
    }
    let version: u32 = parsed_head.number(&path, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &path,
            format!("version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let bin = dir.join("tensors.bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(&bin, "length is not a multiple of 4"));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Parsed {
        values,
        ..parsed_head
    })
}

fn read_config(dir: &Path) -> Result<TrainConfig> {
    let path = dir.join("config.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    TrainConfig::parse(&text)
}

fn fill_params(model: &mut Model, parsed: &Parsed, path: &Path) -> Result<()> {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = parsed.tensor(path, &name, &shape)?;
    }
    Ok(())
}

fn restore_adam(opt: &mut Adam, tag: &str, model: &Model, parsed: &Parsed, path: &Path) -> Result<()> {
    let steps = parsed.number(path, &format!("adam_{tag}_steps"))?;
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for &id in opt.params() {
        let name = model.params.name(id);
        let shape = model.params.get(id).shape();
        first.push(parsed.tensor(path, &format!("adam.{tag}.m.{name}"), shape)?);
        second.push(parsed.tensor(path, &format!("adam.{tag}.v.{name}"), shape)?);
    }
    opt.restore(steps, first, second);
    Ok(())
}

pub(super) fn load(dir: &Path) -> Result<Trainer> {
    let parsed = parse(dir)?;
    let path = dir.join("manifest.txt");
    let config = read_config(dir)?;
    if parsed.field("config_digest") != Some(config.digest().as_str()) {
        return Err(Error::format(&path, "config.txt does not match the checkpoint"));
    }
    let mut trainer = Trainer::new(config)?;
    fill_params(&mut trainer.model, &parsed, &path)?;
    if let Some(opt) = trainer.observer_opt.as_mut() {
        restore_adam(opt, "observer", &trainer.model, &parsed, &path)?;
    }
    restore_adam(
        &mut trainer.interpreter_opt,
        "interpreter",
        &trainer.model,
        &parsed,
        &path,
    )?;
    trainer.epoch = parsed.number(&path, "epoch")?;
    trainer.step = parsed.number(&path, "step")?;
    let hist = dir.join("history.tsv");
    let text = fs::read_to_string(&hist).map_err(|e| Error::io(&hist, e))?;
    trainer.history = parse_history(&text)?;
    Ok(trainer)
}

/// Model weights only, for evaluation and interventions.
pub fn load_model(dir: &Path) -> Result<Model> {
    let parsed = parse(dir)?;
    let config = read_config(dir)?;
    let mut model = Model::new(config.arch, config.variant, config.seed);
    fill_params(&mut model, &parsed, &dir.join("manifest.txt"))?;
    Ok(model)
}
