use std::fmt::Write as _;
use std::path::Path;

use super::{train, TrainData};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::evalkit::full_report;
use crate::scene::{Factor, LabelFindingSet};
use crate::scm::DagWeights;

/// No penalty, the interpreter's weights, the observer's default weights.
pub const DEFAULT_DAG_SETTINGS: [DagWeights; 3] = [
    DagWeights {
        linear: 0.0,
        quadratic: 0.0,
    },
    DagWeights {
        linear: 3.0,
        quadratic: 0.5,
    },
    DagWeights {
        linear: 6.0,
        quadratic: 1.0,
    },
];

/// One trained setting of the observer's DAG penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub dag: DagWeights,
    /// Latent index per factor, in [`Factor::ALL`] order.
    pub labels: Vec<usize>,
    pub lq: Vec<f64>,
    pub avg_lq: f64,
    pub dagness: f64,
}

impl SweepRow {
    pub fn table(rows: &[SweepRow]) -> String {
        let mut out = String::from("lambda1\tlambda2");
        for f in Factor::ALL {
            write!(out, "\t{0}_u\t{0}_lq", f.name()).expect("string write");
        }
        out.push_str("\tavg_lq\tdagness\n");
        for r in rows {
            write!(out, "{}\t{}", r.dag.linear, r.dag.quadratic).expect("string write");
            for (l, q) in r.labels.iter().zip(&r.lq) {
                write!(out, "\t{l}\t{q:.4}").expect("string write");
            }
            writeln!(out, "\t{:.4}\t{:.4}", r.avg_lq, r.dagness).expect("string write");
        }
        out
    }
}

/// Trains one model per observer DAG setting on the same data and seed,
/// then evaluates each. Runs go to `out/dag_<l1>_<l2>` when `out` is given.
pub fn ablation_sweep(
    base: &TrainConfig,
    settings: &[DagWeights],
    data: &TrainData,
    lfset: &LabelFindingSet,
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if settings.is_empty() {
        return Err(Error::Config("sweep needs at least one DAG setting".into()));
    }
    if !base.variant.observer_dag() {
        return Err(Error::UnsupportedVariant {
            variant: base.variant.to_string(),
            what: "the DAG sweep",
        });
    }
    let mut rows = Vec::with_capacity(settings.len());
    for &dag in settings {
        let mut config = base.clone();
        config.weights.dag_observer = dag;
        let dir = out.map(|o| o.join(format!("dag_{}_{}", dag.linear, dag.quadratic)));
        log::info!("sweep setting ({}, {})", dag.linear, dag.quadratic);
        let trainer = train(&config, data, dir.as_deref(), |_| {})?;
        let report = full_report(&trainer.model, lfset, None)?;
        let labels = report.labels.unwrap_or_default();
        let lq = report.lq.unwrap_or_default();
        let mut by_factor = vec![(0, 0.0); Factor::ALL.len()];
        for ((p, l), q) in lfset.pairs.iter().zip(labels).zip(lq) {
            by_factor[p.factor.index()] = (l, q);
        }
        rows.push(SweepRow {
            dag,
            labels: by_factor.iter().map(|r| r.0).collect(),
            lq: by_factor.iter().map(|r| r.1).collect(),
            avg_lq: report.avg_lq.unwrap_or(f64::NAN),
            dagness: report.dagness,
        });
    }
    Ok(rows)
}
