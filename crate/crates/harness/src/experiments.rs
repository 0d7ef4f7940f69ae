//! Multi-run experiments: the module ablation grid, single-axis sweeps, and prompt-mask
//! export for external oracles.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use wsseg_core::oracle::{grid_prompts, write_mask, OracleKind};

use crate::config::RunConfig;
use crate::pipeline::{load_all_samples, run_pipeline, Cache, RunReport};
use crate::report::{line_chart_svg, mean_sd};
use crate::{write_file, HarnessError, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AblationCell {
    pub label: &'static str,
    pub sce: bool,
    pub pam: bool,
}

/// Rows of the module ablation, from the plain CAM baseline to both modules enabled.
pub const ABLATION_CELLS: [AblationCell; 4] = [
    AblationCell {
        label: "baseline",
        sce: false,
        pam: false,
    },
    AblationCell {
        label: "sce",
        sce: true,
        pam: false,
    },
    AblationCell {
        label: "pam",
        sce: false,
        pam: true,
    },
    AblationCell {
        label: "sce+pam",
        sce: true,
        pam: true,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub seed: u64,
    pub dsc: f64,
    pub jaccard: f64,
    pub assd: f64,
    pub hd95: f64,
}

impl MetricRow {
    fn from_report(seed: u64, r: &RunReport) -> Self {
        let m = r.report.as_ref().expect("pipeline ran through eval");
        Self {
            seed,
            dsc: m.dsc,
            jaccard: m.jaccard,
            assd: m.assd,
            hd95: m.hd95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: AblationCell,
    pub dsc_mean: f64,
    pub dsc_sd: f64,
    pub jaccard_mean: f64,
    pub assd_mean: f64,
    pub hd95_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ordering {
    pub better: &'static str,
    pub worse: &'static str,
    /// Difference of mean Dice in points (x100).
    pub margin: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<(AblationCell, MetricRow)>,
    pub cells: Vec<CellSummary>,
    pub orderings: Vec<Ordering>,
}

impl AblationTable {
    pub fn cell(&self, label: &str) -> &CellSummary {
        self.cells
            .iter()
            .find(|c| c.cell.label == label)
            .expect("known cell label")
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from("cell,sce,pam,seed,dsc,jaccard,assd,hd95\n");
        for (c, r) in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                c.label, c.sce as u8, c.pam as u8, r.seed, r.dsc, r.jaccard, r.assd, r.hd95
            )
            .unwrap();
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out =
            String::from("cell,sce,pam,dsc_mean,dsc_sd,jaccard_mean,assd_mean,hd95_mean\n");
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                c.cell.label,
                c.cell.sce as u8,
                c.cell.pam as u8,
                c.dsc_mean,
                c.dsc_sd,
                c.jaccard_mean,
                c.assd_mean,
                c.hd95_mean
            )
            .unwrap();
        }
        out
    }

    pub fn orderings_csv(&self) -> String {
        let mut out = String::from("better,worse,margin_points,holds\n");
        for o in &self.orderings {
            writeln!(out, "{},{},{:.3},{}", o.better, o.worse, o.margin, o.holds).unwrap();
        }
        out
    }
}

/// Runs every cell of the module grid for every seed. Cells that share a training setup
/// reuse one trained network through `cache`.
pub fn run_ablation(
    base: &RunConfig,
    seeds: &[u64],
    out: Option<&Path>,
    cache: &Cache,
) -> Result<AblationTable, HarnessError> {
    if seeds.len() < 3 {
        return Err(HarnessError::Config(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let jobs: Vec<(AblationCell, u64)> = ABLATION_CELLS
        .iter()
        .flat_map(|&c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(cell, seed)| {
            let cfg = RunConfig {
                seed,
                sce_on: cell.sce,
                pam_on: cell.pam,
                ..base.clone()
            };
            let dir = out.map(|d| {
                d.join(cell.label.replace('+', "_"))
                    .join(format!("seed_{seed}"))
            });
            let r = run_pipeline(&cfg, dir.as_deref(), cache)?;
            Ok((cell, MetricRow::from_report(seed, &r)))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let cells: Vec<CellSummary> = ABLATION_CELLS
        .iter()
        .map(|&cell| {
            let of = |f: fn(&MetricRow) -> f64| {
                rows.iter()
                    .filter(|(c, _)| *c == cell)
                    .map(|(_, r)| f(r))
                    .collect::<Vec<_>>()
            };
            let (dsc_mean, dsc_sd) = mean_sd(&of(|r| r.dsc));
            CellSummary {
                cell,
                dsc_mean,
                dsc_sd,
                jaccard_mean: mean_sd(&of(|r| r.jaccard)).0,
                assd_mean: mean_sd(&of(|r| r.assd)).0,
                hd95_mean: mean_sd(&of(|r| r.hd95)).0,
            }
        })
        .collect();
    let mean = |l: &str| cells.iter().find(|c| c.cell.label == l).unwrap().dsc_mean;
    let orderings = [
        ("sce+pam", "pam"),
        ("pam", "baseline"),
        ("sce+pam", "sce"),
        ("sce", "baseline"),
        ("sce+pam", "baseline"),
    ]
    .iter()
    .map(|&(better, worse)| {
        let margin = 100.0 * (mean(better) - mean(worse));
        Ordering {
            better,
            worse,
            margin,
            holds: margin > 0.0,
        }
    })
    .collect();
    let table = AblationTable {
        rows,
        cells,
        orderings,
    };
    if let Some(dir) = out {
        write_file(Stage::Ablate, &dir.join("ablation.csv"), table.rows_csv())?;
        write_file(
            Stage::Ablate,
            &dir.join("ablation_summary.csv"),
            table.summary_csv(),
        )?;
        write_file(
            Stage::Ablate,
            &dir.join("orderings.csv"),
            table.orderings_csv(),
        )?;
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepAxis {
    K,
    Beta,
    T,
    Gamma,
    Theta,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Beta => "beta",
            SweepAxis::T => "t",
            SweepAxis::Gamma => "gamma",
            SweepAxis::Theta => "theta",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig, HarnessError> {
        let mut cfg = base.clone();
        let count = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(HarnessError::Config(format!(
                    "{} needs a non-negative integer, got {v}",
                    self.name()
                )))
            }
        };
        match self {
            SweepAxis::K => cfg.sce.k = count(value)?,
            SweepAxis::T => cfg.refine.t = count(value)?,
            SweepAxis::Beta => cfg.refine.beta = value,
            SweepAxis::Gamma => cfg.refine.gamma = value,
            SweepAxis::Theta => cfg.refine.theta = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "k" => SweepAxis::K,
            "beta" => SweepAxis::Beta,
            "t" => SweepAxis::T,
            "gamma" => SweepAxis::Gamma,
            "theta" => SweepAxis::Theta,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown sweep axis {other:?} (k, beta, t, gamma, theta)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub dsc_mean: f64,
    pub dsc_sd: f64,
    pub jaccard_mean: f64,
    pub assd_mean: f64,
    pub hd95_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<(f64, MetricRow)>,
    pub points: Vec<SweepPoint>,
}

impl SweepTable {
    /// Value with the highest mean Dice (first on ties).
    pub fn argmax(&self) -> f64 {
        self.points
            .iter()
            .fold(
                &self.points[0],
                |b, p| if p.dsc_mean > b.dsc_mean { p } else { b },
            )
            .value
    }

    pub fn rows_csv(&self) -> String {
        let mut out = format!("{},seed,dsc,jaccard,assd,hd95\n", self.axis.name());
        for (v, r) in &self.rows {
            writeln!(
                out,
                "{v},{},{:.6},{:.6},{:.6},{:.6}",
                r.seed, r.dsc, r.jaccard, r.assd, r.hd95
            )
            .unwrap();
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!(
            "{},dsc_mean,dsc_sd,jaccard_mean,assd_mean,hd95_mean\n",
            self.axis.name()
        );
        for p in &self.points {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                p.value, p.dsc_mean, p.dsc_sd, p.jaccard_mean, p.assd_mean, p.hd95_mean
            )
            .unwrap();
        }
        out
    }

    pub fn svg(&self) -> String {
        let xs: Vec<f64> = self.points.iter().map(|p| p.value).collect();
        line_chart_svg(
            &format!("pseudo-label quality vs {}", self.axis.name()),
            self.axis.name(),
            &xs,
            &[
                ("dsc", self.points.iter().map(|p| p.dsc_mean).collect()),
                (
                    "jaccard",
                    self.points.iter().map(|p| p.jaccard_mean).collect(),
                ),
            ],
        )
    }
}

/// One full pipeline run per (value, seed), changing only `axis`.
pub fn run_sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    out: Option<&Path>,
    cache: &Cache,
) -> Result<SweepTable, HarnessError> {
    if values.len() < 2 {
        return Err(HarnessError::Config(
            "a sweep needs at least 2 values".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(HarnessError::Config(
            "a sweep needs at least one seed".into(),
        ));
    }
    let jobs: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(value, seed)| {
            let cfg = axis.apply(
                &RunConfig {
                    seed,
                    ..base.clone()
                },
                value,
            )?;
            let dir = out.map(|d| {
                d.join(format!("{}_{value}", axis.name()))
                    .join(format!("seed_{seed}"))
            });
            let r = run_pipeline(&cfg, dir.as_deref(), cache)?;
            Ok((value, MetricRow::from_report(seed, &r)))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let points = values
        .iter()
        .map(|&value| {
            let of = |f: fn(&MetricRow) -> f64| {
                rows.iter()
                    .filter(|(v, _)| *v == value)
                    .map(|(_, r)| f(r))
                    .collect::<Vec<_>>()
            };
            let (dsc_mean, dsc_sd) = mean_sd(&of(|r| r.dsc));
            SweepPoint {
                value,
                dsc_mean,
                dsc_sd,
                jaccard_mean: mean_sd(&of(|r| r.jaccard)).0,
                assd_mean: mean_sd(&of(|r| r.assd)).0,
                hd95_mean: mean_sd(&of(|r| r.hd95)).0,
            }
        })
        .collect();
    let table = SweepTable { axis, rows, points };
    if let Some(dir) = out {
        write_file(Stage::Sweep, &dir.join("sweep.csv"), table.rows_csv())?;
        write_file(
            Stage::Sweep,
            &dir.join("sweep_summary.csv"),
            table.summary_csv(),
        )?;
        write_file(Stage::Sweep, &dir.join("sweep.svg"), table.svg())?;
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskManifestEntry {
    pub sample_id: String,
    pub grid_index: usize,
    pub path: PathBuf,
}

/// Writes every grid-prompt mask of every sample to `dir` in the external-oracle store layout,
/// plus `manifest.csv`.
pub fn export_prompt_masks(
    cfg: &RunConfig,
    dir: &Path,
    cache: &Cache,
) -> Result<Vec<MaskManifestEntry>, HarnessError> {
    cfg.validate()?;
    if cfg.oracle.kind != OracleKind::Synthetic {
        return Err(HarnessError::Config(
            "mask export needs the synthetic oracle".into(),
        ));
    }
    let cfg = cfg.resolved();
    let samples = load_all_samples(&cfg, cache)?;
    let oracle = cfg
        .oracle
        .build()
        .map_err(|e| HarnessError::stage(Stage::Export, e))?;
    let entries = samples
        .par_iter()
        .map(|s| {
            grid_prompts(&s.id, cfg.synth.image_size, cfg.refine.grid)?
                .iter()
                .map(|p| {
                    let path = write_mask(dir, &oracle.mask(s, p)?)?;
                    Ok(MaskManifestEntry {
                        sample_id: s.id.clone(),
                        grid_index: p.index,
                        path,
                    })
                })
                .collect::<wsseg_core::Result<Vec<_>>>()
        })
        .collect::<wsseg_core::Result<Vec<_>>>()
        .map_err(|e| HarnessError::stage(Stage::Export, e))?;
    let entries: Vec<MaskManifestEntry> = entries.into_iter().flatten().collect();
    let mut manifest = String::from("sample_id,grid_index,path\n");
    for e in &entries {
        let rel = e.path.strip_prefix(dir).unwrap_or(&e.path);
        writeln!(
            manifest,
            "{},{},{}",
            e.sample_id,
            e.grid_index,
            rel.display()
        )
        .unwrap();
    }
    write_file(Stage::Export, &dir.join("manifest.csv"), manifest)?;
    Ok(entries)
}
