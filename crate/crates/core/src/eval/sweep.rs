//! Grid sweeps over the expert count or the SAP rank.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalReport};
use crate::data::{ExperimentConfig, SynthData, Table};
use crate::error::{Error, Result};
use crate::training::fit;

/// Columns of the long-format sweep table. One row per
/// `(value, seed, scenario, k)`; a failed cell contributes a single row
/// with empty scenario, k and recall.
pub const SWEEP_HEADER: [&str; 7] = ["axis", "value", "seed", "status", "scenario", "k", "recall"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Experts,
    Rank,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Experts => "experts",
            SweepAxis::Rank => "rank",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "experts" => Ok(SweepAxis::Experts),
            "rank" => Ok(SweepAxis::Rank),
            other => Err(Error::Argument(format!("unknown sweep axis `{other}`; use experts or rank"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    /// Parses `experts=1..8`, `rank=1..16` or `experts=1,2,4`.
    pub fn parse(grid: &str, seeds: Vec<u64>) -> Result<Self> {
        let (axis, range) = grid
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("grid `{grid}` is not axis=values")))?;
        let bad = || Error::Argument(format!("cannot read grid values `{range}`"));
        let values: Vec<usize> = if let Some((lo, hi)) = range.split_once("..") {
            let lo: usize = lo.trim().parse().map_err(|_| bad())?;
            let hi: usize = hi.trim().parse().map_err(|_| bad())?;
            (lo..=hi).collect()
        } else {
            range
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?
        };
        let spec = Self {
            axis: axis.trim().parse()?,
            values,
            seeds,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::Argument("sweep grid is empty".into()));
        }
        if self.values.contains(&0) {
            return Err(Error::Argument("sweep values must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub axis: SweepAxis,
    pub value: usize,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub outcome: std::result::Result<EvalReport, String>,
}

fn run_cell(cfg: &ExperimentConfig, data: &SynthData) -> Result<EvalReport> {
    let fitted = fit(&cfg.model, &cfg.train, &data.train, &mut |_| {})?;
    evaluate(&fitted.student, &data.train, &data.test, &cfg.eval)
}

/// One train-and-evaluate run per `(value, seed)`. Failed cells are
/// recorded and the sweep continues.
pub fn sweep(
    base: &ExperimentConfig,
    data: &SynthData,
    spec: &SweepSpec,
    on_cell: &mut dyn FnMut(&SweepCell),
) -> Result<(Table, Vec<SweepCell>)> {
    spec.check()?;
    let mut table = Table::new(&SWEEP_HEADER);
    let mut cells = Vec::new();
    for &value in &spec.values {
        for &seed in &spec.seeds {
            let mut cfg = base.clone();
            match spec.axis {
                SweepAxis::Experts => cfg.model.experts = value,
                SweepAxis::Rank => cfg.model.rank = value,
            }
            cfg.train.seed = seed;
            let outcome = run_cell(&cfg, data).map_err(|e| e.to_string());
            let prefix = vec![spec.axis.to_string(), value.to_string(), seed.to_string()];
            match &outcome {
                Ok(report) => {
                    for s in &report.scenarios {
                        for (j, k) in report.ks.iter().enumerate() {
                            let mut row = prefix.clone();
                            row.push("ok".into());
                            row.push(s.scenario.to_string());
                            row.push(k.to_string());
                            row.push(s.recall[j].map_or_else(|| "NA".into(), |r| r.to_string()));
                            table.push(row);
                        }
                    }
                }
                Err(msg) => {
                    log::warn!("sweep cell {}={value} seed {seed} failed: {msg}", spec.axis);
                    let mut row = prefix;
                    row.push(format!("failed: {msg}"));
                    row.extend([String::new(), String::new(), String::new()]);
                    table.push(row);
                }
            }
            let cell = SweepCell {
                axis: spec.axis,
                value,
                seed,
                config: cfg,
                outcome,
            };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    Ok((table, cells))
}
