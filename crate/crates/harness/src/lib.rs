//! Pipeline orchestration for the weakly supervised segmentation toolkit: configuration,
//! staged runs with on-disk artifacts, the module ablation grid, single-axis sweeps and
//! prompt-mask export.

pub mod config;
pub mod experiments;
pub mod pipeline;
pub mod report;

use std::fmt;
use std::path::{Path, PathBuf};

pub use config::{RunConfig, SceConfig};
pub use experiments::{
    export_prompt_masks, run_ablation, run_sweep, AblationTable, SweepAxis, SweepTable,
};
pub use pipeline::{run_pipeline, run_probe, run_until, Cache, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Gen,
    Cluster,
    Train,
    Cam,
    Refine,
    Eval,
    Probe,
    Ablate,
    Sweep,
    Export,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Gen => "gen",
            Stage::Cluster => "cluster",
            Stage::Train => "train",
            Stage::Cam => "cam",
            Stage::Refine => "refine",
            Stage::Eval => "eval",
            Stage::Probe => "probe",
            Stage::Ablate => "ablate",
            Stage::Sweep => "sweep",
            Stage::Export => "export-masks",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: wsseg_core::Error,
    },
    #[error("stage config: {0}")]
    Config(String),
    #[error("stage {stage}: {path}: {source}")]
    Io {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn stage(stage: Stage, source: wsseg_core::Error) -> Self {
        HarnessError::Stage { stage, source }
    }

    pub(crate) fn io(stage: Stage, path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            stage,
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn stage_name(&self) -> Stage {
        match self {
            HarnessError::Stage { stage, .. } | HarnessError::Io { stage, .. } => *stage,
            HarnessError::Config(_) => Stage::Config,
        }
    }
}

pub(crate) fn write_file(
    stage: Stage,
    path: &Path,
    contents: impl AsRef<[u8]>,
) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(stage, dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| HarnessError::io(stage, path, e))
}
