//! Evaluation: label finding on counterfactual pairs, LQ scores, learned
//! structure versus the true graph, and do-operation grids.

use std::path::Path;

use serde::Serialize;

use crate::diffcore::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, write_png, Image};
use crate::interpreter::{do_operation, reconstruct};
use crate::model::Model;
use crate::observer::observed_labels;
use crate::scene::{Factor, LabelFindingSet};
use crate::scm::{BoolMatrix, StructureReport, ROUNDING_THRESHOLD};

/// Which latent dimension each factor landed in.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelAssignment {
    /// Factor of each row of `diffs`, in label-finding set order.
    pub factors: Vec<Factor>,
    /// `|obs(a) - obs(b)|` per factor, one entry per latent dimension.
    pub diffs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Two factors share a dimension.
    pub overlap: bool,
}

impl LabelAssignment {
    /// Builds the assignment from difference rows; argmax ties go to the
    /// lowest index.
    pub fn from_diffs(factors: Vec<Factor>, diffs: Vec<Vec<f64>>) -> Self {
        let labels: Vec<usize> = diffs.iter().map(|d| argmax(d)).collect();
        let overlap = has_duplicates(&labels);
        Self {
            factors,
            diffs,
            labels,
            overlap,
        }
    }

    /// Replaces the argmax labels, e.g. to resolve an overlap by hand.
    pub fn relabel(&mut self, labels: &[usize]) -> Result<()> {
        let dims = self.diffs.first().map_or(0, Vec::len);
        if labels.len() != self.labels.len() || labels.iter().any(|&l| l >= dims) {
            return Err(Error::Invalid(format!(
                "relabel map needs {} indices below {dims}",
                self.labels.len()
            )));
        }
        self.labels = labels.to_vec();
        self.overlap = has_duplicates(&self.labels);
        Ok(())
    }

    pub fn label_of(&self, factor: Factor) -> Option<usize> {
        self.factors
            .iter()
            .position(|&f| f == factor)
            .map(|i| self.labels[i])
    }
}

fn argmax(d: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v > d[best] {
            best = i;
        }
    }
    best
}

fn has_duplicates(labels: &[usize]) -> bool {
    labels
        .iter()
        .enumerate()
        .any(|(i, l)| labels[..i].contains(l))
}

/// Observer responses to each counterfactual pair. Needs an observer.
pub fn label_finding<T: Scalar>(model: &Model<T>, lfset: &LabelFindingSet) -> Result<LabelAssignment> {
    model.net.observer()?;
    if lfset.pairs.is_empty() {
        return Err(Error::Invalid("label-finding set is empty".into()));
    }
    let a: Tensor<T> = batch_tensor(lfset.pairs.iter().map(|p| &p.images.0))?;
    let b: Tensor<T> = batch_tensor(lfset.pairs.iter().map(|p| &p.images.1))?;
    model.check_batch(&a)?;
    let ua = observed_labels(&model.params, &model.net, &a)?;
    let ub = observed_labels(&model.params, &model.net, &b)?;
    let dims = ua.shape()[1];
    let diffs = (0..lfset.pairs.len())
        .map(|i| {
            (0..dims)
                .map(|k| (ua.at(i, k).as_f64() - ub.at(i, k).as_f64()).abs())
                .collect()
        })
        .collect();
    let factors = lfset.pairs.iter().map(|p| p.factor).collect();
    Ok(LabelAssignment::from_diffs(factors, diffs))
}

/// `-log softmax(d)[label]`, computed as `logsumexp(d) - d[label]`.
pub fn lq_score(d: &[f64], label: usize) -> Result<f64> {
    if label >= d.len() {
        return Err(Error::Invalid(format!(
            "label {label} out of range 0..{}",
            d.len()
        )));
    }
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + d.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - d[label])
}

/// Learned edges compared with the true graph, named through the label
/// assignment.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EdgeComparison {
    pub correct: Vec<String>,
    pub incorrect: Vec<String>,
    pub missing: Vec<String>,
}

/// Names latent dimensions after the single factor mapped to them, or
/// `u{k}` when none or several are.
fn dim_names(labels: &[(Factor, usize)], dims: usize) -> Vec<String> {
    (0..dims)
        .map(|k| {
            let hits: Vec<Factor> = labels.iter().filter(|(_, l)| *l == k).map(|(f, _)| *f).collect();
            match hits[..] {
                [f] => f.name().to_string(),
                _ => format!("u{k}"),
            }
        })
        .collect()
}

pub fn compare_edges(rounded: &BoolMatrix, labels: &[(Factor, usize)]) -> EdgeComparison {
    let n = rounded.size();
    let names = dim_names(labels, n);
    let label = |f: Factor| labels.iter().find(|(g, _)| *g == f).map(|(_, l)| *l);
    let mut truth = BoolMatrix::empty(n);
    let mut out = EdgeComparison::default();
    for (cause, effect) in Factor::true_edges() {
        match (label(cause), label(effect)) {
            (Some(i), Some(j)) if i != j && i < n && j < n => truth.set(i, j, true),
            // Collapsed or unassigned factors cannot show the edge.
            _ => out.missing.push(format!("{}->{}", cause.name(), effect.name())),
        }
    }
    let name = |(i, j): (usize, usize)| format!("{}->{}", names[i], names[j]);
    for e in rounded.edges() {
        if truth.get(e.0, e.1) {
            out.correct.push(name(e));
        } else {
            out.incorrect.push(name(e));
        }
    }
    for e in truth.edges() {
        if !rounded.get(e.0, e.1) {
            out.missing.push(name(e));
        }
    }
    out
}

/// Everything reported for a trained model. Label fields are `None` for
/// variants without an observer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub diff_matrix: Option<Vec<Vec<f64>>>,
    pub labels: Option<Vec<usize>>,
    pub lq: Option<Vec<f64>>,
    pub avg_lq: Option<f64>,
    pub dagness: f64,
    pub adjacency: Vec<Vec<f64>>,
    pub rounded_adjacency: Vec<Vec<u8>>,
    pub is_dag: bool,
    pub edges_correct: Vec<String>,
    pub edges_incorrect: Vec<String>,
    pub edges_missing: Vec<String>,
    #[serde(skip)]
    pub overlap: bool,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Label finding (when the model has an observer), LQ scores and the
/// structure comparison. `relabel` overrides the argmax labels. Without an
/// observer, concept `i` is taken to stand for factor `i`.
pub fn full_report<T: Scalar>(
    model: &Model<T>,
    lfset: &LabelFindingSet,
    relabel: Option<&[usize]>,
) -> Result<EvalReport> {
    let assignment = if model.net.observer.is_some() {
        let mut a = label_finding(model, lfset)?;
        if let Some(map) = relabel {
            a.relabel(map)?;
        }
        Some(a)
    } else {
        None
    };
    let lq = assignment
        .as_ref()
        .map(|a| {
            a.diffs
                .iter()
                .zip(&a.labels)
                .map(|(d, &l)| lq_score(d, l))
                .collect::<Result<Vec<f64>>>()
        })
        .transpose()?;
    let avg_lq = lq
        .as_ref()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64);

    let structure = StructureReport::new(model.adjacency(), ROUNDING_THRESHOLD);
    let pairs: Vec<(Factor, usize)> = match &assignment {
        Some(a) => a.factors.iter().copied().zip(a.labels.iter().copied()).collect(),
        None => Factor::ALL.iter().map(|&f| (f, f.index())).collect(),
    };
    let edges = compare_edges(&structure.rounded, &pairs);
    let n = structure.rounded.size();
    let adjacency = (0..n)
        .map(|i| (0..n).map(|j| structure.adjacency.at(i, j)).collect())
        .collect();
    Ok(EvalReport {
        diff_matrix: assignment.as_ref().map(|a| a.diffs.clone()),
        labels: assignment.as_ref().map(|a| a.labels.clone()),
        lq,
        avg_lq,
        dagness: structure.dagness,
        adjacency,
        rounded_adjacency: structure.rounded.rows(),
        is_dag: structure.check.acyclic,
        edges_correct: edges.correct,
        edges_incorrect: edges.incorrect,
        edges_missing: edges.missing,
        overlap: assignment.as_ref().is_some_and(|a| a.overlap),
    })
}

/// One row per source image: the image itself, then its counterfactual for
/// each value of `do(z_concept = v)`. Written as a PNG; nothing is written
/// when the learned graph is cyclic.
pub fn render_do_grid<T: Scalar>(
    model: &Model<T>,
    images: &[Image],
    concept: usize,
    values: &[f64],
    path: &Path,
) -> Result<Image> {
    let arch = model.arch();
    let (w, h) = (arch.width, arch.height);
    if images.is_empty() || values.is_empty() {
        return Err(Error::Invalid("do grid needs images and values".into()));
    }
    let x: Tensor<T> = batch_tensor(images)?;
    // Fails with the structure report before anything is rendered.
    reconstruct(model, &x)?;
    let mut columns = Vec::with_capacity(values.len());
    for &v in values {
        columns.push(do_operation(model, &x, concept, v)?.images);
    }
    let cols = values.len() + 1;
    let mut grid = Image::filled(w * cols, h * images.len(), [0.0; 3]);
    let pixels = w * h * 3;
    for (r, src) in images.iter().enumerate() {
        for col in 0..cols {
            let cell: Vec<f32> = if col == 0 {
                src.data.clone()
            } else {
                columns[col - 1].data()[r * pixels..(r + 1) * pixels]
                    .iter()
                    .map(|v| v.as_f64() as f32)
                    .collect()
            };
            let cell = Image::from_data(w, h, cell)?;
            for y in 0..h {
                for xp in 0..w {
                    grid.set_pixel(col * w + xp, r * h + y, cell.pixel(xp, y));
                }
            }
        }
    }
    write_png(path, grid.width, grid.height, &grid.to_rgb8())?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE: [(Factor, [f64; 4]); 4] = [
        (Factor::Pendulum, [2.6932, 0.9545, 3.6941, 2.8357]),
        (Factor::Light, [7.0160, 6.8370, 3.3080, 0.3135]),
        (Factor::ShadowLength, [1.6296, 0.9784, 0.1379, 0.5790]),
        (Factor::ShadowPosition, [0.7641, 0.1960, 1.8232, 3.3046]),
    ];

    #[test]
    fn argmax_labels_and_ties() {
        let a = LabelAssignment::from_diffs(
            TABLE.iter().map(|r| r.0).collect(),
            TABLE.iter().map(|r| r.1.to_vec()).collect(),
        );
        // light and shadow length both land in u0
        assert_eq!(a.labels, vec![2, 0, 0, 3]);
        assert!(a.overlap);
        let tie = LabelAssignment::from_diffs(vec![Factor::Light, Factor::Pendulum], vec![vec![0.0; 4]; 2]);
        assert_eq!(tie.labels, vec![0, 0]);
        assert!(tie.overlap);
    }

    #[test]
    fn lq_matches_hand_values() {
        let d = [1.6296, 0.9784, 0.1379, 0.5790];
        assert!((lq_score(&d, 0).unwrap() - 0.7401).abs() < 1e-4);
        assert!((lq_score(&[3.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(lq_score(&d, 4).is_err());
    }

    #[test]
    fn lq_is_shift_invariant_and_decreasing() {
        let d = [0.3, 1.2, -0.7, 2.0];
        let shifted: Vec<f64> = d.iter().map(|v| v + 17.0).collect();
        assert!((lq_score(&d, 1).unwrap() - lq_score(&shifted, 1).unwrap()).abs() < 1e-12);
        let mut up = d;
        up[1] += 0.1;
        assert!(lq_score(&up, 1).unwrap() < lq_score(&d, 1).unwrap());
    }

    #[test]
    fn relabel_overrides_argmax() {
        let mut a = LabelAssignment::from_diffs(
            vec![Factor::Pendulum, Factor::Light],
            vec![vec![1.0, 0.5], vec![0.9, 0.2]],
        );
        assert!(a.overlap);
        a.relabel(&[0, 1]).unwrap();
        assert_eq!(a.labels, vec![0, 1]);
        assert!(!a.overlap);
        assert!(a.relabel(&[0, 2]).is_err());
    }

    #[test]
    fn edge_comparison_with_identity_labels() {
        let labels: Vec<_> = Factor::ALL.iter().map(|&f| (f, f.index())).collect();
        let truth = BoolMatrix::from_edges(4, &[(0, 2), (0, 3), (1, 2), (1, 3)]);
        let e = compare_edges(&truth, &labels);
        assert_eq!(e.correct.len(), 4);
        assert!(e.incorrect.is_empty() && e.missing.is_empty());
        let e = compare_edges(&BoolMatrix::empty(4), &labels);
        assert_eq!((e.correct.len(), e.missing.len()), (0, 4));
        let e = compare_edges(&BoolMatrix::from_edges(4, &[(2, 0)]), &labels);
        assert_eq!(e.incorrect, vec!["shadow_length->pendulum".to_string()]);
    }

    #[test]
    fn permuted_labels_rename_dimensions() {
        // pendulum in u2, light in u1, shadow length in u0, shadow position in u3
        let labels = vec![
            (Factor::Pendulum, 2),
            (Factor::Light, 1),
            (Factor::ShadowLength, 0),
            (Factor::ShadowPosition, 3),
        ];
        let learned = BoolMatrix::from_edges(4, &[(2, 0), (1, 3)]);
        let e = compare_edges(&learned, &labels);
        assert_eq!(
            e.correct,
            vec!["light->shadow_position".to_string(), "pendulum->shadow_length".to_string()]
        );
        assert_eq!(e.missing.len(), 2);
    }
}
