//! Synthetic co-occurrence benchmark.
//!
//! Every present target is an elliptical blob whose stripe frequency and eccentricity depend
//! on a latent sub-type. The lower half of the sub-types also carry a bright core. With
//! probability `p_halo_given_target` a ring slightly brighter than the blob body surrounds it.
//! The ring is labelled background: it co-occurs with the target but is not part of it. Each
//! ring is split into angular sectors with their own structure ids, so a prompt on the ring
//! segments one piece of it rather than the whole annulus.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{read_pgm, read_wcf, write_pgm, write_wcf};
use crate::{Error, Field2D, LabelMap, Result, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub n_latent_subtypes: usize,
    pub p_class_present: f64,
    pub p_halo_given_target: f64,
    pub halo_width: usize,
    pub texture_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 400,
            image_size: 64,
            n_classes: 1,
            n_latent_subtypes: 4,
            p_class_present: 0.5,
            p_halo_given_target: 0.9,
            halo_width: 3,
            texture_noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} = {p} outside [0, 1]"
                )))
            }
        };
        prob("p_class_present", self.p_class_present)?;
        prob("p_halo_given_target", self.p_halo_given_target)?;
        if self.n_latent_subtypes == 0 {
            return Err(Error::InvalidArgument(
                "n_latent_subtypes must be >= 1".into(),
            ));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidArgument(format!(
                "image_size {} < 16",
                self.image_size
            )));
        }
        if self.n_classes == 0 || self.n_classes > 127 {
            return Err(Error::InvalidArgument(format!(
                "n_classes = {}",
                self.n_classes
            )));
        }
        if !(self.texture_noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(
                "texture_noise_sigma must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Target,
    Halo,
}

/// One labelled region of `structure_id`; id 0 is always background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Structure {
    pub id: u16,
    pub class: usize,
    pub kind: StructureKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub id: String,
    /// Intensities in `[0, 1]`, each exactly representable as `f32`.
    pub image: Field2D,
    pub y_p: Vec<u8>,
    /// Concatenated one-hot sub-class blocks, attached after clustering.
    pub y_s: Option<Vec<u8>>,
    /// Class ids: 0 background, `c + 1` for class `c`.
    pub gt_mask: LabelMap,
    pub structure_id: Option<LabelMap>,
    pub structures: Vec<Structure>,
    pub latent_subtype: Vec<Option<usize>>,
    pub split: Option<Split>,
}

impl Sample {
    pub fn n_classes(&self) -> usize {
        self.y_p.len()
    }

    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.y_p
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == 1)
            .map(|(c, _)| c)
    }

    /// Pixels belonging to any halo structure.
    pub fn halo_mask(&self) -> Vec<bool> {
        let Some(sid) = &self.structure_id else {
            return vec![false; self.image.len()];
        };
        let halo_ids: Vec<u16> = self
            .structures
            .iter()
            .filter(|s| s.kind == StructureKind::Halo)
            .map(|s| s.id)
            .collect();
        sid.labels().iter().map(|l| halo_ids.contains(l)).collect()
    }

    pub fn has_halo(&self) -> bool {
        self.structures
            .iter()
            .any(|s| s.kind == StructureKind::Halo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n_classes: usize,
    pub image_size: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Generates `cfg.n_samples` samples; sample `i` depends only on `(cfg, i)`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| generate_sample(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        n_classes: cfg.n_classes,
        image_size: cfg.image_size,
        samples,
    })
}

struct Blob {
    cy: f64,
    cx: f64,
    /// Semi-axes along the rotated frame.
    a: f64,
    b: f64,
    angle: f64,
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Axis ratio and stripe frequency (cycles per pixel) of a sub-type.
fn subtype_shape(k: usize, n: usize) -> (f64, f64) {
    let t = if n > 1 {
        k as f64 / (n - 1) as f64
    } else {
        0.0
    };
    (1.0 - 0.5 * t, 0.06 + 0.14 * t)
}

fn class_intensity(c: usize, n_classes: usize) -> f64 {
    if n_classes == 1 {
        0.45
    } else {
        0.4 + 0.25 * c as f64 / (n_classes - 1) as f64
    }
}

const BACKGROUND_LEVEL: f64 = 0.22;
const HALO_LEVEL: f64 = 0.5;
/// The halo ring is split into this many angular pieces, each its own structure.
const HALO_SECTORS: usize = 6;
const STRIPE_AMPLITUDE: f64 = 0.2;
/// Intensity of the bright core carried by the lower half of the sub-types.
const CORE_LEVEL: f64 = 0.9;
/// Core radius as a fraction of the blob's minor semi-axis.
const CORE_RADIUS: f64 = 0.35;
/// Blob radius range as a fraction of the per-class image scale.
const RADIUS_RANGE: (f64, f64) = (0.22, 0.28);

fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    let mut rng = SeededRng::derive(cfg.seed, index as u64);
    let s = cfg.image_size;
    let sf = s as f64;
    let c_count = cfg.n_classes;

    // background: two low-frequency sinusoids
    let bg_waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.range(0.0, std::f64::consts::TAU),
                rng.range(0.01, 0.04),
                rng.range(0.0, std::f64::consts::TAU),
            )
        })
        .collect();
    let mut image: Vec<f64> = (0..s * s)
        .map(|i| {
            let (y, x) = ((i / s) as f64, (i % s) as f64);
            let wave: f64 = bg_waves
                .iter()
                .map(|&(dir, f, ph)| {
                    (std::f64::consts::TAU * f * (x * dir.cos() + y * dir.sin()) + ph).sin()
                })
                .sum();
            BACKGROUND_LEVEL + 0.025 * wave
        })
        .collect();

    let mut gt = LabelMap::zeros(s, s);
    let mut sid = LabelMap::zeros(s, s);
    let mut structures = Vec::new();
    let mut y_p = vec![0u8; c_count];
    let mut latent = vec![None; c_count];
    let mut n_placed = 0usize;
    // multi-class images give each class its own cell of a jittered grid
    let cols = (c_count as f64).sqrt().ceil() as usize;
    let extent = sf / cols as f64;
    let mut cells: Vec<usize> = (0..cols * cols).collect();
    if c_count > 1 {
        rng.shuffle(&mut cells);
    }

    for c in 0..c_count {
        if !rng.bernoulli(cfg.p_class_present) {
            continue;
        }
        let k = rng.below(cfg.n_latent_subtypes);
        let (ratio, freq) = subtype_shape(k, cfg.n_latent_subtypes);
        let r = rng.range(RADIUS_RANGE.0, RADIUS_RANGE.1) * extent;
        // shrink to the room in the cell, keeping the axis ratio
        let room = 0.48 * extent;
        let fit = ((room - cfg.halo_width as f64 - 1.5) / (r / ratio.sqrt())).min(1.0);
        let a = fit * r / ratio.sqrt();
        let b = fit * r * ratio.sqrt();
        let angle = rng.range(0.0, std::f64::consts::PI);
        let stripe_dir = rng.range(0.0, std::f64::consts::PI);
        let stripe_phase = rng.range(0.0, std::f64::consts::TAU);
        let with_halo = rng.bernoulli(cfg.p_halo_given_target);
        let footprint = a + cfg.halo_width as f64 + 1.5;
        if a < 1.0 || 2.0 * footprint >= extent {
            return Err(Error::Placement {
                sample: index,
                reason: format!("blob footprint {footprint:.1} does not fit a {s}x{s} image with {c_count} classes"),
            });
        }
        let (oy, ox) = (
            (cells[c] / cols) as f64 * extent,
            (cells[c] % cols) as f64 * extent,
        );
        let blob = Blob {
            cy: oy + rng.range(footprint, extent - footprint),
            cx: ox + rng.range(footprint, extent - footprint),
            a,
            b,
            angle,
        };

        let target_id = (n_placed * (1 + HALO_SECTORS) + 1) as u16;
        let level = class_intensity(c, c_count);
        let cored = 2 * k < cfg.n_latent_subtypes;
        let y0 = (blob.cy - footprint).floor().max(0.0) as usize;
        let y1 = ((blob.cy + footprint).ceil() as usize).min(s - 1);
        let x0 = (blob.cx - footprint).floor().max(0.0) as usize;
        let x1 = ((blob.cx + footprint).ceil() as usize).min(s - 1);
        let mut inside = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                if blob.contains(y as f64, x as f64) {
                    inside.push((y, x));
                    let proj = x as f64 * stripe_dir.cos() + y as f64 * stripe_dir.sin();
                    let stripe = (std::f64::consts::TAU * freq * proj + stripe_phase).sin();
                    let (dy, dx) = (y as f64 - blob.cy, x as f64 - blob.cx);
                    image[y * s + x] =
                        if cored && dy * dy + dx * dx <= (CORE_RADIUS * blob.b).powi(2) {
                            CORE_LEVEL
                        } else {
                            level + STRIPE_AMPLITUDE * stripe
                        };
                    gt.set(y, x, (c + 1) as u16);
                    sid.set(y, x, target_id);
                }
            }
        }
        if inside.is_empty() {
            return Err(Error::Placement {
                sample: index,
                reason: format!("class {c} blob covers no pixel"),
            });
        }
        structures.push(Structure {
            id: target_id,
            class: c,
            kind: StructureKind::Target,
        });
        if with_halo && cfg.halo_width > 0 {
            let w2 = (cfg.halo_width * cfg.halo_width) as i64;
            let ripple = rng.range(0.0, std::f64::consts::TAU);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if sid.get(y, x) != 0 {
                        continue;
                    }
                    let near = inside.iter().any(|&(ty, tx)| {
                        let dy = ty as i64 - y as i64;
                        let dx = tx as i64 - x as i64;
                        dy * dy + dx * dx <= w2
                    });
                    if near {
                        let theta = (y as f64 - blob.cy).atan2(x as f64 - blob.cx);
                        image[y * s + x] = HALO_LEVEL + 0.03 * (3.0 * theta + ripple).sin();
                        let turn = (theta + ripple / 3.0).rem_euclid(std::f64::consts::TAU);
                        let sector = ((turn / std::f64::consts::TAU * HALO_SECTORS as f64)
                            as usize)
                            .min(HALO_SECTORS - 1);
                        sid.set(y, x, target_id + 1 + sector as u16);
                    }
                }
            }
            let mut used = [false; HALO_SECTORS];
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let l = sid.get(y, x);
                    if l > target_id && l <= target_id + HALO_SECTORS as u16 {
                        used[(l - target_id - 1) as usize] = true;
                    }
                }
            }
            for (sector, _) in used.iter().enumerate().filter(|(_, &u)| u) {
                structures.push(Structure {
                    id: target_id + 1 + sector as u16,
                    class: c,
                    kind: StructureKind::Halo,
                });
            }
        }
        y_p[c] = 1;
        latent[c] = Some(k);
        n_placed += 1;
    }

    if cfg.texture_noise_sigma > 0.0 {
        for v in image.iter_mut() {
            *v += cfg.texture_noise_sigma * rng.normal();
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0) as f32 as f64;
    }

    Ok(Sample {
        index,
        id: sample_id(index),
        image: Field2D::new(s, s, image)?,
        y_p,
        y_s: None,
        gt_mask: gt,
        structure_id: Some(sid),
        structures,
        latent_subtype: latent,
        split: None,
    })
}

/// Partitions into train/val/test by shuffled index; each part keeps index order.
pub fn split_dataset(d: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<[Dataset; 3]> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|&r| !(r >= 0.0)) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let n = d.len();
    let n_train = (n as f64 * rt).round() as usize;
    let n_val = ((n as f64 * rv).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(format!(
            "split of {n} samples by {ratios:?} leaves an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let take = |range: std::ops::Range<usize>, split: Split| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        Dataset {
            n_classes: d.n_classes,
            image_size: d.image_size,
            samples: idx
                .into_iter()
                .map(|i| {
                    let mut s = d.samples[i].clone();
                    s.split = Some(split);
                    s
                })
                .collect(),
        }
    };
    Ok([
        take(0..n_train, Split::Train),
        take(n_train..n_train + n_val, Split::Val),
        take(n_train + n_val..n, Split::Test),
    ])
}

pub const MANIFEST_HEADER: &str = "id,y_p_bits,subtype_ids,split";

/// Sidecar record written to `meta/<id>.json`.
#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    index: usize,
    id: String,
    y_p: Vec<u8>,
    y_s: Option<Vec<u8>>,
    latent_subtype: Vec<Option<usize>>,
    structures: Vec<Structure>,
    structure_id: Option<Vec<u16>>,
    split: Option<Split>,
    n_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub ids: Vec<String>,
}

fn manifest_line(s: &Sample) -> String {
    let bits: String = s
        .y_p
        .iter()
        .map(|&b| if b == 1 { '1' } else { '0' })
        .collect();
    let subtypes = s
        .latent_subtype
        .iter()
        .map(|k| k.map_or_else(|| "-".to_string(), |k| k.to_string()))
        .collect::<Vec<_>>()
        .join(";");
    let split = s.split.map_or("none", Split::as_str);
    format!("{},{bits},{subtypes},{split}", s.id)
}

/// Writes `images/<id>.wcf`, `masks/<id>.pgm`, `meta/<id>.json` and `manifest.csv`.
pub fn export_dataset(d: &Dataset, dir: &Path) -> Result<Manifest> {
    for sub in ["images", "masks", "meta"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    writeln!(manifest, "{MANIFEST_HEADER}").unwrap();
    for s in &d.samples {
        write_wcf(&dir.join("images").join(format!("{}.wcf", s.id)), &s.image)?;
        write_pgm(&dir.join("masks").join(format!("{}.pgm", s.id)), &s.gt_mask)?;
        let meta = SampleMeta {
            index: s.index,
            id: s.id.clone(),
            y_p: s.y_p.clone(),
            y_s: s.y_s.clone(),
            latent_subtype: s.latent_subtype.clone(),
            structures: s.structures.clone(),
            structure_id: s.structure_id.as_ref().map(|m| m.labels().to_vec()),
            split: s.split,
            n_classes: d.n_classes,
        };
        let p = dir.join("meta").join(format!("{}.json", s.id));
        fs::write(&p, serde_json::to_vec(&meta).expect("meta serializes"))
            .map_err(|e| Error::io(&p, e))?;
        writeln!(manifest, "{}", manifest_line(s)).unwrap();
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(Manifest {
        path,
        ids: d.samples.iter().map(|s| s.id.clone()).collect(),
    })
}

/// Reads a directory written by [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.csv");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format(&mpath, "unexpected manifest header"));
    }
    let mut samples = Vec::new();
    let mut n_classes = 0;
    let mut image_size = 0;
    for line in lines.filter(|l| !l.is_empty()) {
        let id = line
            .split(',')
            .next()
            .ok_or_else(|| Error::format(&mpath, "empty manifest row"))?;
        let image = read_wcf(&dir.join("images").join(format!("{id}.wcf")))?;
        let gt_mask = read_pgm(&dir.join("masks").join(format!("{id}.pgm")))?;
        let mp = dir.join("meta").join(format!("{id}.json"));
        let raw = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
        let meta: SampleMeta =
            serde_json::from_slice(&raw).map_err(|e| Error::format(&mp, e.to_string()))?;
        let structure_id = meta
            .structure_id
            .map(|l| LabelMap::new(image.height(), image.width(), l))
            .transpose()?;
        n_classes = meta.n_classes;
        image_size = image.height();
        samples.push(Sample {
            index: meta.index,
            id: meta.id,
            image,
            y_p: meta.y_p,
            y_s: meta.y_s,
            gt_mask,
            structure_id,
            structures: meta.structures,
            latent_subtype: meta.latent_subtype,
            split: meta.split,
        });
    }
    Ok(Dataset {
        n_classes,
        image_size,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n_samples: n,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_dataset(&small(12, 7)).unwrap();
        let b = generate_dataset(&small(12, 7)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(12, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_halo_when_probability_zero() {
        let cfg = SynthConfig {
            p_halo_given_target: 0.0,
            ..small(60, 3)
        };
        let d = generate_dataset(&cfg).unwrap();
        assert!(d
            .samples
            .iter()
            .all(|s| !s.has_halo() && !s.halo_mask().contains(&true)));
    }

    #[test]
    fn positive_count_in_binomial_interval() {
        // Binomial(100, 0.5) central 99.9% interval is [33, 67].
        let cfg = SynthConfig {
            p_class_present: 0.5,
            ..small(100, 11)
        };
        let d = generate_dataset(&cfg).unwrap();
        let pos = d.samples.iter().filter(|s| s.y_p[0] == 1).count();
        assert!((33..=67).contains(&pos), "{pos}");
    }

    #[test]
    fn labels_match_masks_and_halo_geometry() {
        let cfg = SynthConfig {
            n_classes: 2,
            halo_width: 3,
            ..small(80, 5)
        };
        let d = generate_dataset(&cfg).unwrap();
        for s in &d.samples {
            for c in 0..2 {
                assert_eq!(s.y_p[c] == 1, s.gt_mask.contains(c as u16 + 1));
                assert_eq!(s.y_p[c] == 1, s.latent_subtype[c].is_some());
            }
            let halo = s.halo_mask();
            let size = d.image_size;
            for (i, &h) in halo.iter().enumerate() {
                if !h {
                    continue;
                }
                assert_eq!(s.gt_mask.labels()[i], 0, "halo pixel labelled as target");
            }
            if s.has_halo() {
                let touching = halo
                    .iter()
                    .enumerate()
                    .any(|(i, &h)| h && neighbours8(i, size).any(|j| s.gt_mask.labels()[j] != 0));
                assert!(touching);
            }
            assert!(s.image.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    fn neighbours8(i: usize, size: usize) -> impl Iterator<Item = usize> {
        let (y, x) = ((i / size) as i64, (i % size) as i64);
        (-1..=1i64)
            .flat_map(move |dy| (-1..=1i64).map(move |dx| (y + dy, x + dx)))
            .filter(move |&(ny, nx)| {
                (ny, nx) != (y, x) && ny >= 0 && nx >= 0 && ny < size as i64 && nx < size as i64
            })
            .map(move |(ny, nx)| (ny as usize) * size + nx as usize)
    }

    #[test]
    fn halo_rate_matches_probability() {
        let cfg = SynthConfig {
            n_samples: 2000,
            image_size: 32,
            p_class_present: 1.0,
            ..small(0, 99)
        };
        let d = generate_dataset(&cfg).unwrap();
        let rate = d.samples.iter().filter(|s| s.has_halo()).count() as f64 / 2000.0;
        assert!((rate - 0.9).abs() <= 0.05, "{rate}");
    }

    #[test]
    fn oversized_blob_reports_sample() {
        let cfg = SynthConfig {
            image_size: 16,
            halo_width: 6,
            p_class_present: 1.0,
            ..small(3, 1)
        };
        match generate_dataset(&cfg) {
            Err(Error::Placement { sample, .. }) => assert!(sample < 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_sizes_and_cover() {
        let d = generate_dataset(&small(10, 1)).unwrap();
        let [tr, va, te] = split_dataset(&d, (0.8, 0.1, 0.1), 4).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        let mut all: Vec<usize> = tr
            .samples
            .iter()
            .chain(&va.samples)
            .chain(&te.samples)
            .map(|s| s.index)
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let again = split_dataset(&d, (0.8, 0.1, 0.1), 4).unwrap();
        assert_eq!(again[0], tr);
        assert!(split_dataset(&d, (1.0, 0.0, 0.0), 4).is_err());
        assert!(split_dataset(&d, (0.5, 0.1, 0.1), 4).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(&small(6, 2)).unwrap();
        let m = export_dataset(&d, dir.path()).unwrap();
        assert_eq!(m.ids.len(), 6);
        let text = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(text.lines().count(), 7);
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        for s in &d.samples {
            let disk = read_pgm(&dir.path().join("masks").join(format!("{}.pgm", s.id))).unwrap();
            assert_eq!(disk.histogram(), s.gt_mask.histogram());
        }
    }

    #[test]
    fn export_to_unwritable_path_names_it() {
        let d = generate_dataset(&small(1, 2)).unwrap();
        let err = export_dataset(&d, Path::new("/proc/no/such/dir")).unwrap_err();
        assert!(err.to_string().contains("/proc/no/such/dir"));
    }
}
