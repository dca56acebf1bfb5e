use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{render_layers, Factor, SceneParams};
use crate::error::{Error, Result};
use crate::image::Image;

pub const LFSET_MANIFEST: &str = "pairs.tsv";
const HEADER: &str =
    "factor\tfile_a\tfile_b\ttheta_a\tphi_a\tlength_a\tposition_a\ttheta_b\tphi_b\tlength_b\tposition_b";

/// Counterfactual pairs around a shared base scene.
#[derive(Clone, Debug, PartialEq)]
pub struct LfConfig {
    pub width: usize,
    pub height: usize,
    pub base: (f64, f64),
    pub theta_pair: (f64, f64),
    pub phi_pair: (f64, f64),
    /// Scales applied to a derived factor for its pair.
    pub shadow_scales: (f64, f64),
}

impl Default for LfConfig {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            base: (2.0, 104.0),
            theta_pair: (-20.0, 24.0),
            phi_pair: (75.0, 130.0),
            shadow_scales: (0.75, 1.25),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LfPair {
    pub factor: Factor,
    pub params: (SceneParams, SceneParams),
    pub images: (Image, Image),
}

/// One pair per factor, in [`Factor::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelFindingSet {
    pub pairs: Vec<LfPair>,
}

impl LabelFindingSet {
    pub fn image_count(&self) -> usize {
        self.pairs.len() * 2
    }

    pub fn image_size(&self) -> (usize, usize) {
        let img = &self.pairs[0].images.0;
        (img.width, img.height)
    }
}

fn pair_params(config: &LfConfig, factor: Factor) -> Result<(SceneParams, SceneParams)> {
    let (t, p) = config.base;
    Ok(match factor {
        Factor::Pendulum => (
            SceneParams::new(config.theta_pair.0, p)?,
            SceneParams::new(config.theta_pair.1, p)?,
        ),
        Factor::Light => (
            SceneParams::new(t, config.phi_pair.0)?,
            SceneParams::new(t, config.phi_pair.1)?,
        ),
        Factor::ShadowLength | Factor::ShadowPosition => {
            let base = SceneParams::new(t, p)?;
            (
                base.with_scaled_shadow(factor, config.shadow_scales.0),
                base.with_scaled_shadow(factor, config.shadow_scales.1),
            )
        }
    })
}

/// Builds the `2 * c` image label-finding set. Derived-factor pairs keep
/// both angles and override only the targeted shadow factor.
pub fn build_label_finding_set(config: &LfConfig) -> Result<LabelFindingSet> {
    let pairs = Factor::ALL
        .into_iter()
        .map(|factor| {
            let (a, b) = pair_params(config, factor)?;
            let render = |p: &SceneParams| render_layers(p, config.width, config.height).image;
            Ok(LfPair {
                factor,
                images: (render(&a), render(&b)),
                params: (a, b),
            })
        })
        .collect::<Result<_>>()?;
    Ok(LabelFindingSet { pairs })
}

pub fn write_label_finding_set(set: &LabelFindingSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{HEADER}\n");
    for pair in &set.pairs {
        let name = pair.factor.name();
        let (fa, fb) = (format!("{name}_a.png"), format!("{name}_b.png"));
        pair.images.0.save_png(&dir.join(&fa))?;
        pair.images.1.save_png(&dir.join(&fb))?;
        write!(manifest, "{name}\t{fa}\t{fb}").expect("string write");
        for p in [&pair.params.0, &pair.params.1] {
            for v in p.factors() {
                write!(manifest, "\t{v}").expect("string write");
            }
        }
        manifest.push('\n');
    }
    let path = dir.join(LFSET_MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

fn parse_params(path: &Path, cols: &[&str]) -> Result<SceneParams> {
    let v: Vec<f64> = cols
        .iter()
        .map(|s| s.parse().map_err(|_| Error::format(path, format!("bad number {s:?}"))))
        .collect::<Result<_>>()?;
    let derived = SceneParams::new(v[0], v[1])?;
    let mut p = derived;
    for (factor, value) in [(Factor::ShadowLength, v[2]), (Factor::ShadowPosition, v[3])] {
        let current = p.factors()[factor.index()];
        if current != value {
            p = p.with_scaled_shadow(factor, value / current);
        }
    }
    Ok(p)
}

pub fn load_label_finding_set(dir: &Path) -> Result<LabelFindingSet> {
    let path = dir.join(LFSET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::format(&path, "missing or wrong header"));
    }
    let mut pairs = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 11 {
            return Err(Error::format(&path, "expected 11 columns"));
        }
        let factor = Factor::from_name(cols[0])
            .ok_or_else(|| Error::format(&path, format!("unknown factor {:?}", cols[0])))?;
        pairs.push(LfPair {
            factor,
            params: (parse_params(&path, &cols[3..7])?, parse_params(&path, &cols[7..11])?),
            images: (
                Image::load_png(&dir.join(cols[1]))?,
                Image::load_png(&dir.join(cols[2]))?,
            ),
        });
    }
    let order: Vec<Factor> = pairs.iter().map(|p| p.factor).collect();
    if order != Factor::ALL {
        return Err(Error::format(&path, "expected one pair per factor in order"));
    }
    Ok(LabelFindingSet { pairs })
}

#[cfg(test)]
mod tests {
    use super::super::Region;
    use super::*;

    fn masks(p: &SceneParams, region: Region) -> Vec<bool> {
        render_layers(p, 96, 96).mask(region)
    }

    fn pixels_equal_in(a: &Image, b: &Image, mask: &[bool]) -> bool {
        mask.iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .all(|(i, _)| a.data[i * 3..i * 3 + 3] == b.data[i * 3..i * 3 + 3])
    }

    #[test]
    fn has_two_images_per_factor() {
        let set = build_label_finding_set(&LfConfig::default()).unwrap();
        assert_eq!(set.image_count(), 8);
        let order: Vec<Factor> = set.pairs.iter().map(|p| p.factor).collect();
        assert_eq!(order, Factor::ALL);
    }

    #[test]
    fn pairs_isolate_their_factor() {
        let set = build_label_finding_set(&LfConfig::default()).unwrap();
        for pair in &set.pairs {
            let (a, b) = &pair.params;
            let (fa, fb) = (a.factors(), b.factors());
            let i = pair.factor.index();
            assert_ne!(fa[i], fb[i]);
            match pair.factor {
                Factor::ShadowLength | Factor::ShadowPosition => {
                    for j in (0..4).filter(|&j| j != i) {
                        assert_eq!(fa[j], fb[j], "{:?} changed factor {j}", pair.factor);
                    }
                }
                Factor::Pendulum => assert_eq!(fa[1], fb[1]),
                Factor::Light => assert_eq!(fa[0], fb[0]),
            }
        }
    }

    #[test]
    fn pairs_keep_untouched_regions_identical() {
        let set = build_label_finding_set(&LfConfig::default()).unwrap();
        for pair in &set.pairs {
            let (a, b) = &pair.images;
            let (pa, _) = &pair.params;
            let keep: &[Region] = match pair.factor {
                Factor::Pendulum => &[Region::Light],
                Factor::Light => &[Region::Pendulum],
                _ => &[Region::Light, Region::Pendulum],
            };
            for &r in keep {
                assert!(pixels_equal_in(a, b, &masks(pa, r)), "{:?}/{r:?}", pair.factor);
            }
            assert_ne!(a, b);
        }
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let set = build_label_finding_set(&LfConfig::default()).unwrap();
        write_label_finding_set(&set, dir.path()).unwrap();
        let back = load_label_finding_set(dir.path()).unwrap();
        for (x, y) in set.pairs.iter().zip(&back.pairs) {
            assert_eq!(x.factor, y.factor);
            assert_eq!(x.images.0.quantized(), y.images.0);
            for (p, q) in [(&x.params.0, &y.params.0), (&x.params.1, &y.params.1)] {
                for (u, v) in p.factors().iter().zip(q.factors()) {
                    assert!((u - v).abs() < 1e-9);
                }
            }
        }
    }
}
