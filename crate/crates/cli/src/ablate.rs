//! Ablation grids: one train-and-evaluate per cell and seed.

use std::fmt::Write as _;
use std::path::Path;

use moaecr_core::moae::SublayerKind;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::write_atomic;
use crate::train::{train, RunRecord};

/// Caps the worker threads of [`ablate`].
pub const THREADS_ENV: &str = "MOAECR_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: RunConfig,
}

/// Sublayer and regularizer combinations, from CE only up to the full model.
pub fn component_grid(base: &RunConfig) -> Vec<Cell> {
    let rows = [
        (SublayerKind::None, false, false),
        (SublayerKind::SoftMoe, false, false),
        (SublayerKind::Moae, false, false),
        (SublayerKind::Moae, true, false),
        (SublayerKind::Moae, false, true),
        (SublayerKind::Moae, true, true),
    ];
    rows.iter()
        .map(|&(kind, dm, cdm)| {
            let mut config = base.clone();
            config.encoder.sublayer = kind;
            config.regularizer.dm = dm;
            config.regularizer.cdm = cdm;
            config.baseline = None;
            Cell {
                name: config.variant_label(),
                config,
            }
        })
        .collect()
}

/// Every (experts, heads) pair of the MoAE sublayer.
pub fn experts_heads_grid(base: &RunConfig, experts: &[usize], heads: &[usize]) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &m in experts {
        for &h in heads {
            let mut config = base.clone();
            config.encoder.moae.experts = m;
            config.encoder.moae.heads = h;
            cells.push(Cell {
                name: format!("m={m} h={h}"),
                config,
            });
        }
    }
    cells
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

pub const METRICS: [&str; 4] = ["acer", "acc", "auc", "eer"];

#[derive(Clone, Debug)]
pub struct RowResult {
    pub name: String,
    /// Per-seed outcome, in seed order.
    pub runs: Vec<(u64, Result<RunRecord, String>)>,
}

impl RowResult {
    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter_map(|(_, r)| r.as_ref().ok())
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|(_, r)| r.is_err()).count()
    }

    pub fn stat(&self, metric: &str) -> Option<Stat> {
        let values: Vec<f64> = self.records().map(|r| metric_of(r, metric)).collect();
        Stat::of(&values)
    }
}

pub fn metric_of(r: &RunRecord, metric: &str) -> f64 {
    match metric {
        "acer" => r.report.acer,
        "acc" => r.report.acc,
        "auc" => r.report.auc,
        "eer" => r.report.eer,
        other => panic!("unknown metric {other}"),
    }
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<RowResult>,
}

impl AblationTable {
    /// `cell,runs,failed,<metric>_mean,<metric>_std...`; cells with no
    /// successful run leave the metric fields empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,runs,failed");
        for m in METRICS {
            let _ = write!(out, ",{m}_mean,{m}_std");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{},{},{}", row.name, row.runs.len(), row.failures());
            for m in METRICS {
                match row.stat(m) {
                    Some(s) => {
                        let _ = write!(out, ",{:.4},{:.4}", s.mean, s.std);
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn thread_count() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Trains every cell once per seed. A failing run is recorded and the grid
/// continues. With `out`, each run's record is written to
/// `cell{i}_seed{s}.json` as soon as it finishes.
pub fn ablate(cells: &[Cell], seeds: &[u64], out: Option<&Path>) -> CliResult<AblationTable> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Usage(e.to_string()))?;
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results: Vec<Result<RunRecord, String>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let mut cfg = cells[c].config.clone();
                cfg.optim.seed = seed;
                let record = train(&cfg).map(|run| run.record).map_err(|e| e.to_string())?;
                if let Some(dir) = out {
                    let json = record.to_json().map_err(|e| e.to_string())?;
                    write_atomic(&dir.join(format!("cell{c}_seed{seed}.json")), json.as_bytes()).map_err(|e| e.to_string())?;
                }
                Ok(record)
            })
            .collect()
    });
    let mut results = results.into_iter();
    let rows = cells
        .iter()
        .map(|cell| RowResult {
            name: cell.name.clone(),
            runs: seeds.iter().map(|&s| (s, results.next().expect("one result per job"))).collect(),
        })
        .collect();
    Ok(AblationTable { rows })
}
