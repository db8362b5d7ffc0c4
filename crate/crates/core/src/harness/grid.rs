use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::published::{self, ReferenceRow};
use super::{evaluate, EvalReport, ExperimentConfig, HarnessError, Manifest};
use crate::pipeline::{CaptionMode, Pipeline};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    S,
    T,
    Beta,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::S => "s",
            SweepParam::T => "t",
            SweepParam::Beta => "beta",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "s" => Ok(SweepParam::S),
            "t" => Ok(SweepParam::T),
            "beta" => Ok(SweepParam::Beta),
            other => Err(format!("unknown sweep parameter {other:?}; valid: s, t, beta")),
        }
    }
}

/// Accuracy of one (row, K) cell, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub shots: usize,
    pub accuracy_percent: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub value: String,
    pub avg: f64,
    pub cells: Vec<GridCell>,
    /// Published accuracies for the same setting, for display only.
    pub reference: Option<ReferenceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    /// Name of the first column: `mode`, `s`, `t` or `beta`.
    pub key: String,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<GridRow>,
    /// Every evaluated cell, row-major, then by K, then by seed.
    pub reports: Vec<EvalReport>,
}

impl GridTable {
    /// Flat table: `key, avg, <K columns>`, then the published reference
    /// columns `ref_avg, ref_1, .., ref_16` (empty when unknown).
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.key.clone(), "avg".into()];
        header.extend(self.shots.iter().map(|k| k.to_string()));
        header.push("ref_avg".into());
        header.extend(published::SHOTS.iter().map(|k| format!("ref_{k}")));
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![row.value.clone(), format!("{:.2}", row.avg)];
            rec.extend(row.cells.iter().map(|c| format!("{:.2}", c.accuracy_percent)));
            match row.reference {
                Some(r) => rec.extend(r.iter().map(|v| format!("{v:.2}"))),
                None => rec.extend(std::iter::repeat_n(String::new(), 6)),
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

fn check_common(shots: &[usize], seeds: &[u64]) -> Result<(), HarnessError> {
    if shots.is_empty() {
        return Err(HarnessError::invalid("shots", "[]", "at least one shot setting"));
    }
    if let Some(k) = shots.iter().find(|&&k| k == 0) {
        return Err(HarnessError::invalid("shots", k, "K must be at least 1"));
    }
    if seeds.is_empty() {
        return Err(HarnessError::invalid("seeds", "[]", "at least one seed"));
    }
    Ok(())
}

/// Runs every row over every K and seed. The shot draw depends only on
/// (K, seed), so every row sees the same training ids in a given column.
fn run_rows(
    pipeline: &Pipeline,
    manifest: &Manifest,
    key: &str,
    rows: Vec<(String, ExperimentConfig, Option<ReferenceRow>)>,
    shots: &[usize],
    seeds: &[u64],
) -> Result<GridTable, HarnessError> {
    let mut out_rows = Vec::with_capacity(rows.len());
    let mut reports = Vec::new();
    for (value, base, reference) in rows {
        let mut cells = Vec::with_capacity(shots.len());
        for &k in shots {
            let mut per_seed = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.shots = k;
                cfg.pipeline.seed = seed;
                let report = evaluate(pipeline, &cfg, manifest)?;
                tracing::info!(row = %value, shots = k, seed, accuracy = report.accuracy_percent, "cell done");
                per_seed.push(report.accuracy_percent);
                reports.push(report);
            }
            let accuracy_percent = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            cells.push(GridCell {
                shots: k,
                accuracy_percent,
                per_seed,
            });
        }
        let avg = cells.iter().map(|c| c.accuracy_percent).sum::<f64>() / cells.len() as f64;
        out_rows.push(GridRow {
            value,
            avg,
            cells,
            reference,
        });
    }
    Ok(GridTable {
        key: key.into(),
        shots: shots.to_vec(),
        seeds: seeds.to_vec(),
        rows: out_rows,
        reports,
    })
}

/// One row per captioning mode.
pub fn run_ablation(
    pipeline: &Pipeline,
    base: &ExperimentConfig,
    manifest: &Manifest,
    modes: &[CaptionMode],
    shots: &[usize],
    seeds: &[u64],
) -> Result<GridTable, HarnessError> {
    if modes.is_empty() {
        return Err(HarnessError::invalid("modes", "[]", "at least one mode"));
    }
    check_common(shots, seeds)?;
    let rows = modes
        .iter()
        .map(|&m| {
            let mut cfg = base.clone();
            cfg.pipeline.mode = m;
            (m.to_string(), cfg, published::ablation_row(m))
        })
        .collect();
    run_rows(pipeline, manifest, "mode", rows, shots, seeds)
}

fn as_count(param: SweepParam, v: f64, min: usize) -> Result<usize, HarnessError> {
    if v.fract() != 0.0 || v < min as f64 || !v.is_finite() {
        return Err(HarnessError::invalid(
            param.as_str(),
            v,
            format!("must be an integer of at least {min}"),
        ));
    }
    Ok(v as usize)
}

/// One row per parameter value. `t = 0` is the reference-free setting.
pub fn sweep(
    pipeline: &Pipeline,
    base: &ExperimentConfig,
    manifest: &Manifest,
    param: SweepParam,
    values: &[f64],
    shots: &[usize],
    seeds: &[u64],
) -> Result<GridTable, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::invalid(param.as_str(), "[]", "at least one value"));
    }
    check_common(shots, seeds)?;
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        let (label, reference) = match param {
            SweepParam::S => {
                let s = as_count(param, v, 1)?;
                cfg.pipeline.s = s;
                (s.to_string(), published::regions_row(s))
            }
            SweepParam::T => {
                let t = as_count(param, v, 0)?;
                cfg.pipeline.t = t;
                (t.to_string(), published::references_row(t))
            }
            SweepParam::Beta => {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(HarnessError::invalid("beta", v, "must be finite and non-negative"));
                }
                cfg.retrieval.beta = v;
                (v.to_string(), None)
            }
        };
        rows.push((label, cfg, reference));
    }
    run_rows(pipeline, manifest, param.as_str(), rows, shots, seeds)
}
