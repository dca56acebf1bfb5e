use std::fmt::Write as _;
use std::str::FromStr;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::LossBreakdown;

pub const METRICS_COLUMNS: [&str; 11] = [
    "epoch",
    "l_obs",
    "l_int",
    "recon_obs",
    "recon_int",
    "kl_u",
    "kl_eps",
    "kl_z",
    "l_u",
    "l_m",
    "dagness",
];

/// Losses of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Absent for variants without an observer.
    pub observer: Option<LossBreakdown>,
    pub interpreter: LossBreakdown,
    /// `H(A)` after the step.
    pub dagness: f64,
}

/// Batch-size weighted means over an epoch, plus `H(A)` at its end.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_obs: f64,
    pub l_int: f64,
    pub recon_obs: f64,
    pub recon_int: f64,
    pub kl_u: f64,
    pub kl_eps: f64,
    pub kl_z: f64,
    pub l_u: f64,
    pub l_m: f64,
    pub dagness: f64,
}

impl EpochMetrics {
    /// `l_obs + l_int`.
    pub fn total(&self) -> f64 {
        self.l_obs + self.l_int
    }

    fn values(&self) -> [f64; 10] {
        [
            self.l_obs,
            self.l_int,
            self.recon_obs,
            self.recon_int,
            self.kl_u,
            self.kl_eps,
            self.kl_z,
            self.l_u,
            self.l_m,
            self.dagness,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn tsv_row(&self) -> String {
        let mut row = self.epoch.to_string();
        for v in self.values() {
            write!(row, "\t{v}").expect("string write");
        }
        row
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != METRICS_COLUMNS.len() {
            return Err(Error::Invalid(format!("metrics row has {} columns", cols.len())));
        }
        fn num<T: FromStr>(s: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::Invalid(format!("bad metrics value {s:?}")))
        }
        Ok(Self {
            epoch: num(cols[0])?,
            l_obs: num(cols[1])?,
            l_int: num(cols[2])?,
            recon_obs: num(cols[3])?,
            recon_int: num(cols[4])?,
            kl_u: num(cols[5])?,
            kl_eps: num(cols[6])?,
            kl_z: num(cols[7])?,
            l_u: num(cols[8])?,
            l_m: num(cols[9])?,
            dagness: num(cols[10])?,
        })
    }
}

#[derive(Default)]
pub(super) struct Accumulator {
    sum: EpochMetrics,
    count: usize,
}

impl Accumulator {
    pub(super) fn add(&mut self, m: &StepMetrics, n: usize) {
        let w = n as f64;
        let s = &mut self.sum;
        let i = &m.interpreter;
        if let Some(o) = &m.observer {
            s.l_obs += w * o.total;
            s.recon_obs += w * o.recon;
            s.kl_u += w * o.kl_u;
        }
        s.l_int += w * i.total;
        s.recon_int += w * i.recon;
        s.kl_eps += w * i.kl_eps;
        s.kl_z += w * i.kl_z;
        s.l_u += w * i.l_u;
        s.l_m += w * i.l_m;
        self.count += n;
    }

    pub(super) fn finish(self, epoch: usize, dagness: f64) -> EpochMetrics {
        let n = self.count.max(1) as f64;
        let s = self.sum;
        EpochMetrics {
            epoch,
            l_obs: s.l_obs / n,
            l_int: s.l_int / n,
            recon_obs: s.recon_obs / n,
            recon_int: s.recon_int / n,
            kl_u: s.kl_u / n,
            kl_eps: s.kl_eps / n,
            kl_z: s.kl_z / n,
            l_u: s.l_u / n,
            l_m: s.l_m / n,
            dagness,
        }
    }
}

/// Metrics table: `# key = value` config lines, a header and one row per
/// epoch.
pub fn metrics_tsv(config: &TrainConfig, history: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for line in config.to_text().lines() {
        writeln!(out, "# {line}").expect("string write");
    }
    writeln!(out, "{}", METRICS_COLUMNS.join("\t")).expect("string write");
    for row in history {
        writeln!(out, "{}", row.tsv_row()).expect("string write");
    }
    out
}

/// Rows of a metrics table, skipping comments and the header.
pub fn parse_history(text: &str) -> Result<Vec<EpochMetrics>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty() && !l.starts_with("epoch"))
        .map(EpochMetrics::parse_row)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip_exactly() {
        let m = EpochMetrics {
            epoch: 3,
            l_obs: 1.0 / 3.0,
            l_int: 2.5e-7,
            dagness: 6.328125,
            ..EpochMetrics::default()
        };
        let text = metrics_tsv(&TrainConfig::default(), &[m, m]);
        assert!(text.starts_with("# variant = scadi\n"));
        let back = parse_history(&text).unwrap();
        assert_eq!(back, vec![m, m]);
    }
}
