//! Run configuration: one versioned JSON document covering every stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wsseg_core::nn::{ConvSpec, TinyNetConfig};
use wsseg_core::numerics::mix_seed;
use wsseg_core::oracle::OracleConfig;
use wsseg_core::pam::RefinementConfig;
use wsseg_core::sce::{TrainConfig, DEFAULT_FEATURE_DIM};
use wsseg_core::synth::SynthConfig;

use crate::{HarnessError, Stage};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceConfig {
    /// Sub-classes per primary class.
    pub k: usize,
    pub feature_dim: usize,
    /// Overrides the clustering seed derived from the master seed.
    pub cluster_seed: Option<u64>,
    pub encoder: Vec<ConvSpec>,
    pub train: TrainConfig,
}

impl Default for SceConfig {
    fn default() -> Self {
        Self {
            k: 8,
            feature_dim: DEFAULT_FEATURE_DIM,
            cluster_seed: None,
            encoder: vec![
                ConvSpec {
                    channels: 6,
                    stride: 2,
                },
                ConvSpec {
                    channels: 8,
                    stride: 1,
                },
                ConvSpec {
                    channels: 8,
                    stride: 1,
                },
            ],
            train: TrainConfig {
                peak_lr: 0.05,
                batch_size: 16,
                clip_norm: Some(10.0),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Master seed; per-stage seeds are derived from it when the config is resolved.
    pub seed: u64,
    pub synth: SynthConfig,
    /// Train/val/test fractions.
    pub split: [f64; 3],
    pub sce: SceConfig,
    pub oracle: OracleConfig,
    pub refine: RefinementConfig,
    pub sce_on: bool,
    pub pam_on: bool,
    /// Write per-sample CAM and pseudo-label files.
    pub dump_maps: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            synth: SynthConfig::default(),
            split: [0.8, 0.1, 0.1],
            sce: SceConfig::default(),
            oracle: OracleConfig::default(),
            refine: RefinementConfig::default(),
            sce_on: true,
            pam_on: true,
            dump_maps: false,
            out_dir: None,
        }
    }
}

/// Stage seeds, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub cluster: u64,
    pub features: u64,
    pub init: u64,
    pub train: u64,
    pub oracle: u64,
}

impl RunConfig {
    pub fn seeds(&self) -> Seeds {
        let s = |stream| mix_seed(self.seed, stream);
        Seeds {
            data: s(0),
            split: s(1),
            cluster: self.sce.cluster_seed.unwrap_or_else(|| s(2)),
            features: s(3),
            init: s(4),
            train: s(5),
            oracle: s(6),
        }
    }

    /// Copies the derived seeds into the stage configs. Seeds written in the file for
    /// individual stages are replaced, so the master seed alone fixes a run.
    pub fn resolved(&self) -> Self {
        let seeds = self.seeds();
        let mut c = self.clone();
        c.synth.seed = seeds.data;
        c.oracle.seed = seeds.oracle;
        c.sce.train.seed = seeds.train;
        c
    }

    pub fn net_config(&self) -> TinyNetConfig {
        TinyNetConfig {
            image_size: self.synth.image_size,
            encoder: self.sce.encoder.clone(),
            n_classes: self.synth.n_classes,
            n_subclasses: self.sce.k,
            init_seed: self.seeds().init,
        }
    }

    /// Effective training settings: without sub-class exploration the sub-class loss weight
    /// is zero.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.resolved().sce.train;
        if !self.sce_on {
            t.lambda = 0.0;
        }
        t
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let stage = |e| HarnessError::stage(Stage::Config, e);
        if self.version != CONFIG_VERSION {
            return Err(HarnessError::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.synth.validate().map_err(stage)?;
        self.net_config().validate().map_err(stage)?;
        self.sce.train.validate().map_err(stage)?;
        self.oracle.validate().map_err(stage)?;
        self.refine.validate().map_err(stage)?;
        if self.split.iter().any(|&r| r.is_nan() || r < 0.0)
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(HarnessError::Config(format!(
                "split {:?} must be non-negative and sum to 1",
                self.split
            )));
        }
        if self.sce.k == 0 {
            return Err(HarnessError::Config("sce.k must be >= 1".into()));
        }
        if self.refine.grid > self.synth.image_size {
            return Err(HarnessError::Config(
                "refine.grid exceeds image size".into(),
            ));
        }
        let fs = self.net_config().feature_size();
        if !self.synth.image_size.is_multiple_of(fs) {
            return Err(HarnessError::Config(
                "feature grid must divide the image size".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text =
            fs::read_to_string(path).map_err(|e| HarnessError::io(Stage::Config, path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.refine.grid, 8);
        assert_eq!(c.refine.gamma, 5.0);
        assert_eq!(c.refine.beta, 4.0);
        assert_eq!(c.refine.t, 4);
        assert_eq!(c.sce.k, 8);
        assert_eq!(c.sce.train.lambda, 0.5);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sede": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"refine": {"gama": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"version": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"refine": {"beta": 0.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"oracle": {"leakage_prob": 1.5}}"#).is_err());
        let c = RunConfig::from_json(r#"{"seed": 3, "pam_on": false}"#).unwrap();
        assert_eq!((c.seed, c.pam_on), (3, false));
    }

    #[test]
    fn seeds_follow_master_seed() {
        let a = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        let b = RunConfig {
            seed: 2,
            ..RunConfig::default()
        };
        assert_ne!(a.seeds(), b.seeds());
        assert_eq!(a.resolved().resolved(), a.resolved());
        let pinned = RunConfig {
            sce: SceConfig {
                cluster_seed: Some(9),
                ..SceConfig::default()
            },
            ..a.clone()
        };
        assert_eq!(pinned.seeds().cluster, 9);
        assert_eq!(pinned.seeds().train, a.seeds().train);
    }
}
