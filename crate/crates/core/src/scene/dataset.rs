use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{render_scene, SceneParams};
use crate::config::hex;
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "filename\ttheta\tphi\tshadow_length\tshadow_position\tsplit";

/// Factor grid and image size. Angle ranges are half-open, step 1 degree.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub theta: (i32, i32),
    pub phi: (i32, i32),
    /// Train share as `numerator / denominator` of the grid, rounded.
    pub train_ratio: (usize, usize),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            theta: (-40, 44),
            phi: (60, 147),
            train_ratio: (5482, 7308),
        }
    }
}

impl DatasetConfig {
    pub fn grid_size(&self) -> usize {
        let t = (self.theta.1 - self.theta.0).max(0) as usize;
        let p = (self.phi.1 - self.phi.0).max(0) as usize;
        t * p
    }

    pub fn train_count(&self) -> usize {
        let (num, den) = self.train_ratio;
        (self.grid_size() * num + den / 2) / den
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("image size must be positive".into()));
        }
        if self.grid_size() == 0 {
            return Err(Error::Invalid("empty factor grid".into()));
        }
        let (num, den) = self.train_ratio;
        if den == 0 || num > den {
            return Err(Error::Invalid(format!("bad train ratio {num}/{den}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub params: SceneParams,
    pub split: Split,
    pub filename: String,
}

impl Sample {
    fn new(params: SceneParams, split: Split) -> Self {
        let filename = format!(
            "{}_{}_{}_{:.4}_{:.4}.png",
            split.name(),
            params.pendulum_angle(),
            params.light_angle(),
            params.shadow_length(),
            params.shadow_position()
        );
        Self {
            params,
            split,
            filename,
        }
    }
}

/// The split of the factor grid. Images are rendered on demand so the
/// whole set never has to sit in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.test)
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn render(&self, sample: &Sample) -> Result<Image> {
        render_scene(&sample.params, self.config.width, self.config.height)
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for s in self.samples() {
            let p = &s.params;
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                s.filename,
                p.pendulum_angle(),
                p.light_angle(),
                p.shadow_length(),
                p.shadow_position(),
                s.split.name()
            )
            .expect("string write");
        }
        out
    }
}

/// Enumerates the grid and splits it with a seeded shuffle. Each split is
/// kept in grid order.
pub fn build_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut grid = Vec::with_capacity(config.grid_size());
    for t in config.theta.0..config.theta.1 {
        for p in config.phi.0..config.phi.1 {
            grid.push(SceneParams::new(f64::from(t), f64::from(p))?);
        }
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = config.train_count();
    let mut in_train = vec![false; grid.len()];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (params, is_train) in grid.into_iter().zip(in_train) {
        if is_train {
            train.push(Sample::new(params, Split::Train));
        } else {
            test.push(Sample::new(params, Split::Test));
        }
    }
    Ok(Dataset {
        config: config.clone(),
        seed,
        train,
        test,
    })
}

/// Renders every image into `dir` and writes the manifest. Returns the
/// dataset digest.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for sample in dataset.samples() {
        dataset
            .render(sample)?
            .save_png(&dir.join(&sample.filename))?;
    }
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, dataset.manifest_text()).map_err(|e| Error::io(&manifest, e))?;
    dataset_digest(dir)
}

/// SHA-256 over the manifest followed by every listed image file.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let rows = read_manifest(dir)?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut hasher = Sha256::new();
    hasher.update(fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?);
    for row in rows {
        let path = dir.join(&row.filename);
        hasher.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(hex(&hasher.finalize()))
}

/// Parses and validates the manifest in `dir`.
pub fn read_manifest(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format(&path, "missing or wrong header"));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |msg: &str| Error::format(&path, format!("line {}: {msg}", n + 2));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let params = SceneParams::new(num(cols[1])?, num(cols[2])?)?;
        let (len, pos) = (num(cols[3])?, num(cols[4])?);
        if (len - params.shadow_length()).abs() > 1e-9
            || (pos - params.shadow_position()).abs() > 1e-9
        {
            return Err(bad("shadow factors do not match the angles"));
        }
        let split = Split::from_name(cols[5]).ok_or_else(|| bad("unknown split"))?;
        rows.push(Sample {
            params,
            split,
            filename: cols[0].to_string(),
        });
    }
    Ok(rows)
}

/// Loads one split's images with their factors, in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<(Image, SceneParams)>> {
    read_manifest(dir)?
        .into_iter()
        .filter(|s| s.split == split)
        .map(|s| Ok((Image::load_png(&dir.join(&s.filename))?, s.params)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            width: 16,
            height: 16,
            theta: (-4, 4),
            phi: (88, 93),
            train_ratio: (3, 4),
        }
    }

    #[test]
    fn default_split_counts() {
        let d = build_dataset(&DatasetConfig::default(), 0).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (5482, 1826));
    }

    #[test]
    fn split_is_a_partition_of_the_grid() {
        let cfg = small();
        let d = build_dataset(&cfg, 9).unwrap();
        assert_eq!(d.train.len(), 30);
        let mut seen: Vec<(i64, i64)> = d
            .samples()
            .map(|s| (s.params.pendulum_angle() as i64, s.params.light_angle() as i64))
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), cfg.grid_size());
    }

    #[test]
    fn seed_controls_the_split() {
        let a = build_dataset(&small(), 1).unwrap();
        let b = build_dataset(&small(), 1).unwrap();
        let c = build_dataset(&small(), 2).unwrap();
        assert_eq!(a.manifest_text(), b.manifest_text());
        assert_ne!(a.manifest_text(), c.manifest_text());
    }

    #[test]
    fn written_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let d = build_dataset(&small(), 3).unwrap();
        let digest = write_dataset(&d, dir.path()).unwrap();
        assert_eq!(digest.len(), 64);
        assert_eq!(dataset_digest(dir.path()).unwrap(), digest);
        let test = load_split(dir.path(), Split::Test).unwrap();
        assert_eq!(test.len(), d.test.len());
        let (img, params) = &test[0];
        assert_eq!(*params, d.test[0].params);
        assert_eq!(*img, d.render(&d.test[0]).unwrap().quantized());
    }

    #[test]
    fn manifest_rejects_tampered_factors() {
        let dir = tempfile::tempdir().unwrap();
        let d = build_dataset(&small(), 3).unwrap();
        write_dataset(&d, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let line = text.lines().nth(1).unwrap();
        let cols: Vec<&str> = line.split('\t').collect();
        let tampered = line.replacen(cols[3], "99", 1);
        fs::write(&path, text.replacen(line, &tampered, 1)).unwrap();
        assert!(matches!(
            load_split(dir.path(), Split::Train),
            Err(Error::Format { .. })
        ));
    }
}
