//! One-axis grid sweeps over region, loss and aggregation settings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::attention::AggregationMode;
use crate::error::{Error, Result};
use crate::losses::LossKind;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::eval::{evaluate_run, MetricsReport};
use super::train::{train_stage1, train_stage2};
use super::{version_string, RunData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TauU,
    M,
    Gamma,
    LossKind,
    Aggregation,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::TauU => "tau_u",
            SweepAxis::M => "m",
            SweepAxis::Gamma => "gamma",
            SweepAxis::LossKind => "loss_kind",
            SweepAxis::Aggregation => "aggregation",
        }
    }

    /// Whether the pair branch is unaffected, so one stage-1 run serves
    /// every value.
    fn shares_stage1(self) -> bool {
        matches!(self, SweepAxis::TauU | SweepAxis::M | SweepAxis::Aggregation)
    }

    /// Copy of `cfg` with the axis set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut out = cfg.clone();
        let bad = || Error::Config(format!("invalid {} value `{value}`", self.name()));
        match self {
            SweepAxis::TauU => out.regions.tau_u = value.parse().map_err(|_| bad())?,
            SweepAxis::M => out.regions.m = value.parse().map_err(|_| bad())?,
            SweepAxis::Gamma => out.loss.gamma = Some(value.parse().map_err(|_| bad())?),
            SweepAxis::LossKind => out.loss.kind = LossKind::from_str(value)?,
            SweepAxis::Aggregation => out.aggregation = AggregationMode::from_str(value)?,
        }
        out.check()?;
        Ok(out)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau_u" | "tau-u" => Ok(SweepAxis::TauU),
            "m" => Ok(SweepAxis::M),
            "gamma" => Ok(SweepAxis::Gamma),
            "loss" | "loss_kind" => Ok(SweepAxis::LossKind),
            "agg" | "aggregation" => Ok(SweepAxis::Aggregation),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub version: String,
    pub config_hash: String,
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self, classes: &[String]) -> String {
        let mut out = format!("# config_hash={} version={}\n", self.config_hash, self.version);
        out.push_str("axis,value,map,accuracy,first_glance_map,first_glance_accuracy,domain_map,mean_regions");
        for c in classes {
            let _ = write!(out, ",ap_{c}");
        }
        out.push('\n');
        for row in &self.rows {
            let m = &row.metrics;
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.axis.name(),
                row.value,
                m.relationship.map,
                m.accuracy,
                m.first_glance.map,
                m.first_glance_accuracy,
                m.domain.map,
                m.mean_regions
            );
            for ap in &m.relationship.per_class_ap {
                match ap {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates once per value, each under `out_dir/<axis>_<value>`,
/// and writes `sweep.csv` and `sweep.json`.
pub fn sweep(cfg: &RunConfig, data: &RunData, axis: SweepAxis, values: &[String], out_dir: &Path) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values.iter().map(|v| axis.apply(cfg, v)).collect::<Result<Vec<_>>>()?;
    let shared: Option<Checkpoint> = if axis.shares_stage1() { Some(train_stage1(cfg, data)?.0) } else { None };
    let mut rows = Vec::with_capacity(values.len());
    for (value, sub) in values.iter().zip(&configs) {
        info!("sweep {}={value}", axis.name());
        let stage1 = match &shared {
            Some(ck) => ck.clone(),
            None => train_stage1(sub, data)?.0,
        };
        let (ck, _) = train_stage2(sub, data, &stage1)?;
        let dir = out_dir.join(format!("{}_{value}", axis.name()));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        ck.save(&dir.join("checkpoint.bin"))?;
        let metrics = evaluate_run(sub, data, &ck, sub.eval.split, &dir)?;
        rows.push(SweepRow { value: value.clone(), metrics });
    }
    let table = SweepTable { version: version_string(), config_hash: cfg.hash(), axis, rows };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("sweep.csv");
    fs::write(&csv_path, table.to_csv(&cfg.taxonomy.relationships)).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = out_dir.join("sweep.json");
    fs::write(&json_path, serde_json::to_string_pretty(&table)? + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(table)
}
