//! Point-prompt mask oracles.
//!
//! A [`PromptOracle`] maps a point prompt to a soft mask at full image resolution. The
//! synthetic oracle reads the generator's structure ids; the external oracle reads masks that
//! some other tool wrote to disk.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::squared_distance_transform;
use crate::numerics::{mix_seed, read_pgm, write_pgm};
use crate::synth::Sample;
use crate::{Error, Field2D, LabelMap, Result, SeededRng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub sample_id: String,
    /// Row-major position in the prompt grid.
    pub index: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptMask {
    pub field: Field2D,
    pub prompt: PointPrompt,
}

/// One prompt at the centre of each cell of a `g x g` grid, row-major.
pub fn grid_prompts(sample_id: &str, image_size: usize, g: usize) -> Result<Vec<PointPrompt>> {
    if g == 0 || g > image_size {
        return Err(Error::InvalidArgument(format!(
            "grid {g} must lie in 1..={image_size}"
        )));
    }
    let centre = |i: usize| (2 * i + 1) * image_size / (2 * g);
    let mut out = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            out.push(PointPrompt {
                sample_id: sample_id.to_string(),
                index: gy * g + gx,
                row: centre(gy),
                col: centre(gx),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Synthetic,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub kind: OracleKind,
    /// Required when `kind` is external.
    pub store_dir: Option<PathBuf>,
    /// Standard deviation, in pixels, of the per-pixel boundary jitter.
    pub boundary_noise_sigma: f64,
    pub leakage_prob: f64,
    pub background_radius: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Synthetic,
            store_dir: None,
            boundary_noise_sigma: 0.5,
            leakage_prob: 0.05,
            background_radius: 4.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.leakage_prob) {
            return Err(Error::InvalidArgument(format!(
                "leakage_prob = {} outside [0, 1]",
                self.leakage_prob
            )));
        }
        if !(self.boundary_noise_sigma >= 0.0 && self.boundary_noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(
                "boundary_noise_sigma must be >= 0".into(),
            ));
        }
        if !(self.background_radius >= 0.0 && self.background_radius.is_finite()) {
            return Err(Error::InvalidArgument(
                "background_radius must be >= 0".into(),
            ));
        }
        if self.kind == OracleKind::External && self.store_dir.is_none() {
            return Err(Error::InvalidArgument(
                "external oracle needs store_dir".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn PromptOracle>> {
        self.validate()?;
        Ok(match self.kind {
            OracleKind::Synthetic => Box::new(SyntheticOracle { cfg: self.clone() }),
            OracleKind::External => Box::new(ExternalOracle {
                store_dir: self.store_dir.clone().unwrap(),
            }),
        })
    }
}

pub trait PromptOracle: Send + Sync {
    fn mask(&self, sample: &Sample, prompt: &PointPrompt) -> Result<PromptMask>;
}

pub struct SyntheticOracle {
    pub cfg: OracleConfig,
}

impl PromptOracle for SyntheticOracle {
    fn mask(&self, sample: &Sample, prompt: &PointPrompt) -> Result<PromptMask> {
        synthetic_mask(sample, prompt, &self.cfg)
    }
}

pub struct ExternalOracle {
    pub store_dir: PathBuf,
}

impl PromptOracle for ExternalOracle {
    fn mask(&self, sample: &Sample, prompt: &PointPrompt) -> Result<PromptMask> {
        let m = external_mask(&self.store_dir, prompt)?;
        if m.field.shape() != sample.image.shape() {
            let path = mask_store_path(&self.store_dir, &prompt.sample_id, prompt.index);
            return Err(Error::format(
                &path,
                format!(
                    "mask is {:?}, image is {:?}",
                    m.field.shape(),
                    sample.image.shape()
                ),
            ));
        }
        Ok(m)
    }
}

fn flood_fill(labels: &LabelMap, row: usize, col: usize) -> Vec<bool> {
    let (h, w) = labels.shape();
    let target = labels.get(row, col);
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::from([(row, col)]);
    seen[row * w + col] = true;
    while let Some((y, x)) = queue.pop_front() {
        let mut visit = |ny: usize, nx: usize| {
            let i = ny * w + nx;
            if !seen[i] && labels.get(ny, nx) == target {
                seen[i] = true;
                queue.push_back((ny, nx));
            }
        };
        if y > 0 {
            visit(y - 1, x);
        }
        if y + 1 < h {
            visit(y + 1, x);
        }
        if x > 0 {
            visit(y, x - 1);
        }
        if x + 1 < w {
            visit(y, x + 1);
        }
    }
    seen
}

fn dilate4(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = mask.to_vec();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                continue;
            }
            out[y * w + x] = (y > 0 && mask[(y - 1) * w + x])
                || (y + 1 < h && mask[(y + 1) * w + x])
                || (x > 0 && mask[y * w + x - 1])
                || (x + 1 < w && mask[y * w + x + 1]);
        }
    }
    out
}

/// Pixels are kept when their signed distance to the mask edge (positive inside, in pixels,
/// offset by half a pixel) plus Gaussian noise stays positive.
///
/// Only a window around the mask's bounding box can change, so distances are computed on
/// that crop; noise is drawn in row-major order over the affected band.
fn jitter(mask: &[bool], h: usize, w: usize, sigma: f64, rng: &mut SeededRng) -> Vec<bool> {
    let band = 4.0 * sigma + 0.5;
    let Some((y0, y1, x0, x1)) = bounding_box(mask, h, w) else {
        return mask.to_vec();
    };
    let margin = band.ceil() as usize + 1;
    let (y0, x0) = (y0.saturating_sub(margin), x0.saturating_sub(margin));
    let (y1, x1) = ((y1 + margin).min(h - 1), (x1 + margin).min(w - 1));
    let (ch, cw) = (y1 - y0 + 1, x1 - x0 + 1);
    let crop: Vec<bool> = (0..ch * cw)
        .map(|i| mask[(y0 + i / cw) * w + x0 + i % cw])
        .collect();
    let outside: Vec<bool> = crop.iter().map(|&b| !b).collect();
    let to_out = squared_distance_transform(&outside, ch, cw);
    let to_in = squared_distance_transform(&crop, ch, cw);
    let mut out = mask.to_vec();
    for i in 0..ch * cw {
        let sd = if crop[i] {
            (to_out[i] as f64).sqrt() - 0.5
        } else {
            0.5 - (to_in[i] as f64).sqrt()
        };
        if sd.abs() <= band {
            out[(y0 + i / cw) * w + x0 + i % cw] = sd + sigma * rng.normal() > 0.0;
        }
    }
    out
}

fn bounding_box(mask: &[bool], h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                bb = Some(match bb {
                    None => (y, y, x, x),
                    Some((a, b, c, d)) => (a.min(y), b.max(y), c.min(x), d.max(x)),
                });
            }
        }
    }
    bb
}

/// Structure-aware mask for one prompt: the prompt's connected structure component, clipped
/// to a disk for background prompts, then jittered and occasionally dilated.
pub fn synthetic_mask(
    sample: &Sample,
    prompt: &PointPrompt,
    cfg: &OracleConfig,
) -> Result<PromptMask> {
    let sid = sample
        .structure_id
        .as_ref()
        .ok_or_else(|| Error::MissingStructure {
            sample_id: sample.id.clone(),
        })?;
    let (h, w) = sid.shape();
    if prompt.row >= h || prompt.col >= w {
        return Err(Error::InvalidArgument(format!(
            "prompt ({}, {}) outside {h}x{w}",
            prompt.row, prompt.col
        )));
    }
    let mut mask = flood_fill(sid, prompt.row, prompt.col);
    if sid.get(prompt.row, prompt.col) == 0 {
        let r2 = cfg.background_radius * cfg.background_radius;
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - prompt.row as f64;
                let dx = x as f64 - prompt.col as f64;
                if dy * dy + dx * dx > r2 {
                    mask[y * w + x] = false;
                }
            }
        }
    }
    let mut rng = SeededRng::derive(mix_seed(cfg.seed, sample.index as u64), prompt.index as u64);
    if cfg.boundary_noise_sigma > 0.0 {
        mask = jitter(&mask, h, w, cfg.boundary_noise_sigma, &mut rng);
    }
    if cfg.leakage_prob > 0.0 && rng.bernoulli(cfg.leakage_prob) {
        mask = dilate4(&mask, h, w);
    }
    let field = Field2D::new(
        h,
        w,
        mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    Ok(PromptMask {
        field,
        prompt: prompt.clone(),
    })
}

pub fn mask_store_path(store_dir: &Path, sample_id: &str, grid_index: usize) -> PathBuf {
    store_dir.join(sample_id).join(format!("{grid_index}.pgm"))
}

/// Writes a mask as an 8-bit PGM, value `v` stored as `round(255 v)`.
pub fn write_mask(store_dir: &Path, mask: &PromptMask) -> Result<PathBuf> {
    let path = mask_store_path(store_dir, &mask.prompt.sample_id, mask.prompt.index);
    let (h, w) = mask.field.shape();
    let labels = mask
        .field
        .values()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16)
        .collect();
    write_pgm(&path, &LabelMap::new(h, w, labels)?)?;
    Ok(path)
}

pub fn external_mask(store_dir: &Path, prompt: &PointPrompt) -> Result<PromptMask> {
    let path = mask_store_path(store_dir, &prompt.sample_id, prompt.index);
    if !path.is_file() {
        return Err(Error::format(&path, "expected prompt mask file is missing"));
    }
    let map = read_pgm(&path)?;
    let field = Field2D::new(
        map.height(),
        map.width(),
        map.labels().iter().map(|&v| v as f64 / 255.0).collect(),
    )?;
    Ok(PromptMask {
        field,
        prompt: prompt.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    fn exact() -> OracleConfig {
        OracleConfig {
            boundary_noise_sigma: 0.0,
            leakage_prob: 0.0,
            ..OracleConfig::default()
        }
    }

    fn small_dataset(n: usize) -> crate::synth::Dataset {
        generate_dataset(&SynthConfig {
            n_samples: n,
            image_size: 32,
            p_class_present: 1.0,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn grid_positions() {
        let p = grid_prompts("s", 256, 8).unwrap();
        assert_eq!(p.len(), 64);
        assert_eq!((p[0].row, p[0].col), (16, 16));
        assert_eq!((p[9].row, p[9].col), (48, 48));
        let one = grid_prompts("s", 64, 1).unwrap();
        assert_eq!((one[0].row, one[0].col), (32, 32));
        let odd = grid_prompts("s", 10, 3).unwrap();
        let mut seen = std::collections::HashSet::new();
        for q in &odd {
            assert!(q.row < 10 && q.col < 10);
            assert!(seen.insert((q.row, q.col)));
        }
        assert!(grid_prompts("s", 4, 0).is_err());
        assert!(grid_prompts("s", 4, 5).is_err());
    }

    #[test]
    fn exact_mask_inside_blob_is_the_blob() {
        let d = small_dataset(6);
        for s in &d.samples {
            let sid = s.structure_id.as_ref().unwrap();
            let Some(i) = sid.labels().iter().position(|&l| l == 1) else {
                continue;
            };
            let (row, col) = (i / 32, i % 32);
            let p = PointPrompt {
                sample_id: s.id.clone(),
                index: 0,
                row,
                col,
            };
            let m = synthetic_mask(s, &p, &exact()).unwrap();
            let blob = sid.mask_of(1);
            let got: Vec<bool> = m.field.values().iter().map(|&v| v == 1.0).collect();
            assert_eq!(got, blob);
        }
    }

    #[test]
    fn background_mask_is_clipped() {
        let d = small_dataset(4);
        let cfg = OracleConfig {
            background_radius: 3.0,
            ..exact()
        };
        for s in &d.samples {
            let sid = s.structure_id.as_ref().unwrap();
            for p in grid_prompts(&s.id, 32, 8).unwrap() {
                if sid.get(p.row, p.col) != 0 {
                    continue;
                }
                let m = synthetic_mask(s, &p, &cfg).unwrap();
                for (i, &v) in m.field.values().iter().enumerate() {
                    if v > 0.0 {
                        let (dy, dx) = (
                            (i / 32) as f64 - p.row as f64,
                            (i % 32) as f64 - p.col as f64,
                        );
                        assert!(dy * dy + dx * dx <= 9.0);
                        assert_eq!(sid.labels()[i], 0);
                    }
                }
            }
        }
    }

    #[test]
    fn same_structure_same_mask_and_purity() {
        let d = small_dataset(4);
        for s in &d.samples {
            let sid = s.structure_id.as_ref().unwrap();
            let prompts = grid_prompts(&s.id, 32, 8).unwrap();
            let masks: Vec<PromptMask> = prompts
                .iter()
                .map(|p| synthetic_mask(s, p, &exact()).unwrap())
                .collect();
            for (a, pa) in masks.iter().zip(&prompts) {
                let la = sid.get(pa.row, pa.col);
                // purity: every pixel of the mask carries the prompt's structure id
                for (i, &v) in a.field.values().iter().enumerate() {
                    if v > 0.0 {
                        assert_eq!(sid.labels()[i], la);
                    }
                }
                for (b, pb) in masks.iter().zip(&prompts) {
                    if la != 0 && la == sid.get(pb.row, pb.col) {
                        assert_eq!(a.field, b.field);
                    }
                }
            }
        }
    }

    #[test]
    fn noisy_masks_are_deterministic() {
        let d = small_dataset(2);
        let cfg = OracleConfig {
            boundary_noise_sigma: 1.0,
            leakage_prob: 0.5,
            ..OracleConfig::default()
        };
        for p in grid_prompts(&d.samples[0].id, 32, 4).unwrap() {
            let a = synthetic_mask(&d.samples[0], &p, &cfg).unwrap();
            let b = synthetic_mask(&d.samples[0], &p, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_structure_is_an_error() {
        let mut d = small_dataset(1);
        d.samples[0].structure_id = None;
        let p = grid_prompts(&d.samples[0].id, 32, 1).unwrap().remove(0);
        assert!(matches!(
            synthetic_mask(&d.samples[0], &p, &exact()),
            Err(Error::MissingStructure { .. })
        ));
    }

    #[test]
    fn store_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = small_dataset(1);
        let s = &d.samples[0];
        let soft = PromptMask {
            field: Field2D::from_fn(32, 32, |y, x| ((y * 32 + x) % 7) as f64 / 6.0),
            prompt: grid_prompts(&s.id, 32, 2).unwrap().remove(3),
        };
        let path = write_mask(dir.path(), &soft).unwrap();
        assert!(path.ends_with(format!("{}/3.pgm", s.id)));
        let back = external_mask(dir.path(), &soft.prompt).unwrap();
        for (a, b) in back.field.values().iter().zip(soft.field.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        let ones = LabelMap::new(4, 4, vec![255; 16]).unwrap();
        let p0 = PointPrompt {
            sample_id: "x".into(),
            index: 0,
            row: 0,
            col: 0,
        };
        write_pgm(&mask_store_path(dir.path(), "x", 0), &ones).unwrap();
        assert!(external_mask(dir.path(), &p0)
            .unwrap()
            .field
            .values()
            .iter()
            .all(|&v| v == 1.0));

        let missing = PointPrompt {
            index: 5,
            ..p0.clone()
        };
        let err = external_mask(dir.path(), &missing).unwrap_err().to_string();
        assert!(
            err.contains(&format!("x{}5.pgm", std::path::MAIN_SEPARATOR)),
            "{err}"
        );

        let oracle = ExternalOracle {
            store_dir: dir.path().into(),
        };
        let wrong = Sample {
            id: "x".into(),
            ..s.clone()
        };
        assert!(oracle.mask(&wrong, &p0).is_err());
    }
}
