//! Sub-class exploration: cluster each primary class into K sub-classes on frozen features,
//! train the two-head network on both label sets, and read class activation maps off the
//! primary head.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::{dice, BinaryMask};
use crate::nn::{joint_loss, LabeledImage, OneCycleSchedule, Sgd, TinyNet};
use crate::numerics::mix_seed;
use crate::pam::max_normalize;
use crate::synth::Sample;
use crate::{Error, Field2D, LabelMap, Result, SeededRng};

/// Randomly initialized, never trained two-layer conv stack used only to embed images for
/// clustering.
///
/// The first half of the output is global-average pooled, the second half global-max
/// pooled. Channel 0 carries raw intensity (mean, and max minus mean); the others are
/// zero-mean texture filters, so a constant intensity shift only moves coordinate 0.
#[derive(Debug, Clone)]
pub struct FrozenExtractor {
    dim: usize,
    layer1: Vec<[f64; 9]>,
    /// `[out][in][9]`, flattened.
    layer2: Vec<f64>,
}

pub const DEFAULT_FEATURE_DIM: usize = 64;

impl FrozenExtractor {
    pub fn new(dim: usize, probe_seed: u64) -> Result<Self> {
        if dim < 4 || !dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "feature dim must be even and >= 4, got {dim}"
            )));
        }
        let mut rng = SeededRng::new(probe_seed);
        let tex = dim / 2 - 1;
        let layer1 = (0..tex)
            .map(|_| {
                let mut k = [0.0; 9];
                k.iter_mut().for_each(|v| *v = rng.normal());
                let mean = k.iter().sum::<f64>() / 9.0;
                k.iter_mut().for_each(|v| *v -= mean);
                let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
                k.iter_mut().for_each(|v| *v /= norm);
                k
            })
            .collect();
        let std = (1.0 / (9 * tex) as f64).sqrt();
        let layer2 = (0..tex * tex * 9).map(|_| std * rng.normal()).collect();
        Ok(Self {
            dim,
            layer1,
            layer2,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self, image: &Field2D) -> Vec<f64> {
        let tex = self.layer1.len();
        let (h, w) = image.shape();
        let x = image.values();
        let (h1, w1) = (valid_out(h), valid_out(w));
        let mut a1 = vec![0.0; tex * h1 * w1];
        for (f, k) in self.layer1.iter().enumerate() {
            for oy in 0..h1 {
                for ox in 0..w1 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        let row = (2 * oy + ky) * w + 2 * ox;
                        for kx in 0..3 {
                            acc += k[ky * 3 + kx] * x[row + kx];
                        }
                    }
                    a1[(f * h1 + oy) * w1 + ox] = acc.max(0.0);
                }
            }
        }
        let (h2, w2) = (valid_out(h1), valid_out(w1));
        let plane2 = h2.max(1) * w2.max(1);
        let mut a2 = vec![0.0; tex * plane2];
        if h2 > 0 && w2 > 0 {
            for o in 0..tex {
                for i in 0..tex {
                    let k = &self.layer2[(o * tex + i) * 9..(o * tex + i + 1) * 9];
                    let src = &a1[i * h1 * w1..(i + 1) * h1 * w1];
                    for oy in 0..h2 {
                        for ox in 0..w2 {
                            let mut acc = 0.0;
                            for ky in 0..3 {
                                let row = (2 * oy + ky) * w1 + 2 * ox;
                                for kx in 0..3 {
                                    acc += k[ky * 3 + kx] * src[row + kx];
                                }
                            }
                            a2[o * plane2 + oy * w2 + ox] += acc;
                        }
                    }
                }
            }
            a2.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let mean_i = image.mean();
        let mut out = Vec::with_capacity(self.dim);
        out.push(mean_i);
        for o in 0..tex {
            let p = &a2[o * plane2..(o + 1) * plane2];
            out.push(p.iter().sum::<f64>() / p.len() as f64);
        }
        out.push(image.max() - mean_i);
        for o in 0..tex {
            out.push(
                a2[o * plane2..(o + 1) * plane2]
                    .iter()
                    .copied()
                    .fold(0.0, f64::max),
            );
        }
        out
    }
}

fn valid_out(n: usize) -> usize {
    if n < 3 {
        0
    } else {
        (n - 3) / 2 + 1
    }
}

pub fn extract_frozen_features(extractor: &FrozenExtractor, sample: &Sample) -> Vec<f64> {
    extractor.features(&sample.image)
}

pub const KMEANS_MAX_ITERS: usize = 100;
/// Independent k-means++ starts per call; the lowest final SSE wins.
pub const KMEANS_RESTARTS: u64 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// SSE after each assignment step.
    pub sse_history: Vec<f64>,
    pub converged: bool,
}

impl KMeansResult {
    pub fn sse(&self) -> f64 {
        *self.sse_history.last().unwrap()
    }

    /// Nearest centroid, lowest index on ties.
    pub fn predict(&self, point: &[f64]) -> usize {
        nearest(&self.centroids, point).0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding, best of [`KMEANS_RESTARTS`] starts derived from
/// `seed` (earliest start on SSE ties).
///
/// Each start stops at an assignment fixpoint or after [`KMEANS_MAX_ITERS`] iterations. A
/// cluster that empties is re-seeded at the point farthest from its old centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::TooFewPoints {
            class: None,
            points: points.len(),
            k,
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Dimension("k-means points have mixed lengths".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for start in 0..KMEANS_RESTARTS {
        let r = lloyd(points, k, &mut SeededRng::derive(seed, start));
        if best.as_ref().is_none_or(|b| r.sse() < b.sse()) {
            best = Some(r);
        }
    }
    Ok(best.unwrap())
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut SeededRng) -> KMeansResult {
    let n = points.len();
    let dim = points[0].len();

    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();

    let mut assignments = vec![usize::MAX; n];
    let mut sse_history = Vec::new();
    let mut converged = false;
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        let mut sse = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(&centroids, p);
            sse += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        sse_history.push(sse);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                let mut far = (0, -1.0);
                for (i, p) in points.iter().enumerate() {
                    let d = sq_dist(p, &centroids[c]);
                    if d > far.1 {
                        far = (i, d);
                    }
                }
                centroids[c] = points[far.0].clone();
            }
        }
    }
    KMeansResult {
        assignments,
        centroids,
        sse_history,
        converged,
    }
}

/// Per-dimension z-scoring; constant dimensions map to 0.
pub fn standardize(points: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<(f64, f64)>) {
    let dim = points.first().map_or(0, Vec::len);
    let n = points.len() as f64;
    let stats: Vec<(f64, f64)> = (0..dim)
        .map(|j| {
            let mean = points.iter().map(|p| p[j]).sum::<f64>() / n;
            let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect();
    (
        points
            .iter()
            .map(|p| apply_standardize(p, &stats))
            .collect(),
        stats,
    )
}

fn apply_standardize(p: &[f64], stats: &[(f64, f64)]) -> Vec<f64> {
    p.iter()
        .zip(stats)
        .map(|(x, &(m, s))| if s > 0.0 { (x - m) / s } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub sample_id: String,
    pub class: usize,
    pub cluster: usize,
}

/// Sub-class index for every (sample, present class) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SubClassAssignment {
    pub k: usize,
    pub rows: Vec<AssignmentRow>,
}

/// Per-dimension feature (mean, std) and the clustering fitted on the scaled features.
type ClassFit = (Vec<(f64, f64)>, KMeansResult);

/// Fitted per-class clustering, usable to label samples outside the training set.
#[derive(Debug, Clone)]
pub struct SubClassModel {
    pub k: usize,
    extractor: FrozenExtractor,
    per_class: Vec<Option<ClassFit>>,
}

impl SubClassModel {
    pub fn kmeans(&self, class: usize) -> Option<&KMeansResult> {
        self.per_class.get(class)?.as_ref().map(|(_, r)| r)
    }

    /// Assigns every present class of every sample to its nearest centroid.
    pub fn assign(&self, samples: &[Sample]) -> Result<SubClassAssignment> {
        let feats: Vec<Vec<f64>> = samples
            .par_iter()
            .map(|s| self.extractor.features(&s.image))
            .collect();
        let mut rows = Vec::new();
        for (s, f) in samples.iter().zip(&feats) {
            for c in s.present_classes() {
                let (stats, km) =
                    self.per_class
                        .get(c)
                        .and_then(Option::as_ref)
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!("no clustering for class {c}"))
                        })?;
                rows.push(AssignmentRow {
                    sample_id: s.id.clone(),
                    class: c,
                    cluster: km.predict(&apply_standardize(f, stats)),
                });
            }
        }
        Ok(SubClassAssignment { k: self.k, rows })
    }
}

/// Clusters each primary class independently on standardized whole-image frozen features.
pub fn cluster_subclasses(
    samples: &[Sample],
    n_classes: usize,
    k: usize,
    extractor: &FrozenExtractor,
    seed: u64,
) -> Result<(SubClassAssignment, SubClassModel)> {
    let feats: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| extractor.features(&s.image))
        .collect();
    let mut per_class = Vec::with_capacity(n_classes);
    let mut rows = Vec::new();
    for c in 0..n_classes {
        let members: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].y_p[c] == 1)
            .collect();
        if members.is_empty() {
            per_class.push(None);
            continue;
        }
        let pts: Vec<Vec<f64>> = members.iter().map(|&i| feats[i].clone()).collect();
        let (z, stats) = standardize(&pts);
        let km = kmeans(&z, k, mix_seed(seed, c as u64)).map_err(|e| match e {
            Error::TooFewPoints { points, k, .. } => Error::TooFewPoints {
                class: Some(c),
                points,
                k,
            },
            other => other,
        })?;
        for (&i, &a) in members.iter().zip(&km.assignments) {
            rows.push(AssignmentRow {
                sample_id: samples[i].id.clone(),
                class: c,
                cluster: a,
            });
        }
        per_class.push(Some((stats, km)));
    }
    rows.sort_by(|a, b| (&a.sample_id, a.class).cmp(&(&b.sample_id, b.class)));
    Ok((
        SubClassAssignment { k, rows },
        SubClassModel {
            k,
            extractor: extractor.clone(),
            per_class,
        },
    ))
}

pub const ASSIGNMENT_HEADER: &str = "sample_id,class_id,cluster_id";

pub fn assignments_csv(a: &SubClassAssignment) -> String {
    let mut out = format!("{ASSIGNMENT_HEADER}\n");
    for r in &a.rows {
        writeln!(out, "{},{},{}", r.sample_id, r.class, r.cluster).unwrap();
    }
    out
}

pub fn parse_assignments_csv(text: &str, k: usize) -> Result<SubClassAssignment> {
    let mut lines = text.lines();
    if lines.next() != Some(ASSIGNMENT_HEADER) {
        return Err(Error::InvalidArgument(format!(
            "assignment CSV must start with {ASSIGNMENT_HEADER}"
        )));
    }
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad assignment line {l:?}")))
            };
            if f.len() != 3 {
                return Err(Error::InvalidArgument(format!("bad assignment line {l:?}")));
            }
            Ok(AssignmentRow {
                sample_id: f[0].to_string(),
                class: num(f[1])?,
                cluster: num(f[2])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubClassAssignment { k, rows })
}

/// One y_s vector per sample: concatenated one-hot blocks of length K, zero for absent
/// classes.
pub fn build_subclass_labels(
    samples: &[Sample],
    assignment: &SubClassAssignment,
    n_classes: usize,
) -> Result<Vec<Vec<u8>>> {
    let k = assignment.k;
    let index: std::collections::HashMap<&str, usize> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let mut out = vec![vec![0u8; n_classes * k]; samples.len()];
    let mut seen = vec![vec![false; n_classes]; samples.len()];
    for r in &assignment.rows {
        let &i = index.get(r.sample_id.as_str()).ok_or_else(|| {
            Error::InvalidArgument(format!("assignment for unknown sample {}", r.sample_id))
        })?;
        if r.class >= n_classes || samples[i].y_p[r.class] != 1 {
            return Err(Error::InvalidArgument(format!(
                "sample {} has an assignment for class {} it does not contain",
                r.sample_id, r.class
            )));
        }
        if r.cluster >= k {
            return Err(Error::InvalidArgument(format!(
                "cluster {} >= K={k}",
                r.cluster
            )));
        }
        if std::mem::replace(&mut seen[i][r.class], true) {
            return Err(Error::InvalidArgument(format!(
                "duplicate assignment for ({}, {})",
                r.sample_id, r.class
            )));
        }
        out[i][r.class * k + r.cluster] = 1;
    }
    for (s, seen) in samples.iter().zip(&seen) {
        if let Some(c) = s.present_classes().find(|&c| !seen[c]) {
            return Err(Error::InvalidArgument(format!(
                "sample {} lacks an assignment for class {c}",
                s.id
            )));
        }
    }
    Ok(out)
}

/// Builds and stores y_s on every sample.
pub fn attach_subclass_labels(
    samples: &mut [Sample],
    assignment: &SubClassAssignment,
    n_classes: usize,
) -> Result<()> {
    let labels = build_subclass_labels(samples, assignment, n_classes)?;
    for (s, y) in samples.iter_mut().zip(labels) {
        s.y_s = Some(y);
    }
    Ok(())
}

/// Max-normalized class activation map at feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub class: usize,
    pub sample_id: String,
    /// Fingerprint of the network that produced the map.
    pub checkpoint: String,
    pub map: Field2D,
}

impl Cam {
    pub fn new(class: usize, sample_id: String, checkpoint: String, map: Field2D) -> Result<Self> {
        if map.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "CAM values must lie in [0, 1]".into(),
            ));
        }
        let max = map.max();
        if max != 0.0 && max != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "CAM max is {max}, expected 0 or 1"
            )));
        }
        Ok(Self {
            class,
            sample_id,
            checkpoint,
            map,
        })
    }
}

fn cam_from_response(
    response: &Field2D,
    class: usize,
    sample_id: &str,
    checkpoint: &str,
) -> Result<Cam> {
    let (h, w) = response.shape();
    let relu: Vec<f64> = response.values().iter().map(|v| v.max(0.0)).collect();
    Cam::new(
        class,
        sample_id.into(),
        checkpoint.into(),
        Field2D::new(h, w, max_normalize(&relu))?,
    )
}

/// `ReLU(head_p[class] * F)`, max-normalized.
pub fn compute_cam(net: &TinyNet, sample: &Sample, class: usize) -> Result<Cam> {
    let out = net.forward(&sample.image)?;
    let response = net.class_response(&out, class)?;
    cam_from_response(&response, class, &sample.id, &net.fingerprint())
}

/// CAMs for the present classes of each sample, in class order.
pub fn compute_cams(net: &TinyNet, samples: &[Sample]) -> Result<Vec<Vec<Cam>>> {
    let fp = net.fingerprint();
    samples
        .par_iter()
        .map(|s| {
            let out = net.forward(&s.image)?;
            s.present_classes()
                .map(|c| cam_from_response(&net.class_response(&out, c)?, c, &s.id, &fp))
                .collect()
        })
        .collect()
}

/// Thresholds a feature-grid map and upsamples it to `(h, w)` by nearest neighbour.
pub fn threshold_upsample(map: &Field2D, theta: f64, h: usize, w: usize) -> Result<BinaryMask> {
    let (fh, fw) = map.shape();
    let labels = LabelMap::new(
        fh,
        fw,
        map.values().iter().map(|&v| (v >= theta) as u16).collect(),
    )?;
    Ok(BinaryMask::from_labels(&labels.upsample_nearest(h, w)?, 1))
}

/// Mean Dice of thresholded raw CAMs against ground truth over (sample, present class)
/// pairs; NaN when there are none.
pub fn cam_dice(net: &TinyNet, samples: &[Sample], theta: f64) -> Result<f64> {
    let cams = compute_cams(net, samples)?;
    let mut scores = Vec::new();
    for (s, cams) in samples.iter().zip(&cams) {
        let (h, w) = s.gt_mask.shape();
        for cam in cams {
            let pred = threshold_upsample(&cam.map, theta, h, w)?;
            scores.push(dice(
                &pred,
                &BinaryMask::from_labels(&s.gt_mask, cam.class as u16 + 1),
            )?);
        }
    }
    Ok(if scores.is_empty() {
        f64::NAN
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub peak_lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Threshold used for the validation CAM Dice in the log.
    pub cam_theta: f64,
    /// Rescales a batch gradient whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 24,
            lambda: 0.5,
            peak_lr: 1e-4,
            momentum: 0.9,
            seed: 0,
            cam_theta: 0.25,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda = {} must be >= 0",
                self.lambda
            )));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::InvalidArgument("peak_lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidArgument(
                "clip_norm must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    fn schedule(&self, n_train: usize) -> OneCycleSchedule {
        let steps = self.epochs * n_train.div_ceil(self.batch_size);
        OneCycleSchedule::with_steps(self.peak_lr, steps.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_p: f64,
    pub loss_s: f64,
    pub val_cam_dice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub step: usize,
    pub loss_p: f64,
    pub loss_s: f64,
    pub cam_dice: f64,
}

struct FitOutput {
    net: TinyNet,
    epochs: Vec<EpochLog>,
    probe: Vec<ProbeRow>,
}

fn fit(
    mut net: TinyNet,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    freeze_sub_head: bool,
    probe_every: Option<usize>,
) -> Result<FitOutput> {
    cfg.validate()?;
    let mut out = FitOutput {
        net: net.clone(),
        epochs: Vec::new(),
        probe: Vec::new(),
    };
    if cfg.epochs == 0 {
        out.net = net;
        return Ok(out);
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let schedule = cfg.schedule(train.len());
    let mut sgd = Sgd::new(&net, cfg.momentum);
    let mut step = 0;
    let mut window: Vec<(f64, f64)> = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        SeededRng::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut sums = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<LabeledImage<'_>> = chunk
                .iter()
                .map(|&i| LabeledImage {
                    image: &train[i].image,
                    y_p: &train[i].y_p,
                    y_s: train[i].y_s.as_deref(),
                })
                .collect();
            let (loss, mut grads) = joint_loss(&net, &batch, cfg.lambda, freeze_sub_head)?;
            let last_good = net.clone();
            let diverged = |loss: f64| Error::Diverged {
                step,
                loss,
                last_good: Box::new(last_good.clone()),
            };
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(diverged(loss.total));
            }
            if let Some(clip) = cfg.clip_norm {
                let norm = grads.norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            if sgd.step(&mut net, &grads, &schedule, step).is_err() {
                return Err(diverged(loss.total));
            }
            step += 1;
            sums = (sums.0 + loss.loss_p, sums.1 + loss.loss_s, sums.2 + 1);
            window.push((loss.loss_p, loss.loss_s));
            if let Some(every) = probe_every {
                if step % every == 0 || step == schedule.total_steps {
                    let n = window.len() as f64;
                    out.probe.push(ProbeRow {
                        step,
                        loss_p: window.iter().map(|w| w.0).sum::<f64>() / n,
                        loss_s: window.iter().map(|w| w.1).sum::<f64>() / n,
                        cam_dice: cam_dice(&net, val, cfg.cam_theta)?,
                    });
                    window.clear();
                }
            }
        }
        out.epochs.push(EpochLog {
            epoch,
            loss_p: sums.0 / sums.2 as f64,
            loss_s: sums.1 / sums.2 as f64,
            val_cam_dice: cam_dice(&net, val, cfg.cam_theta)?,
        });
    }
    out.net = net;
    Ok(out)
}

/// Jointly optimizes encoder and both heads on `L_p + lambda L_s`.
pub fn train_sce(
    net: TinyNet,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<(TinyNet, Vec<EpochLog>)> {
    let out = fit(net, train, val, cfg, false, None)?;
    Ok((out.net, out.epochs))
}

/// Trains on the primary loss alone with the sub-class head frozen, tracking both losses and
/// validation CAM Dice every `eval_every` steps.
pub fn run_sce_probe(
    net: TinyNet,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    eval_every: usize,
) -> Result<(TinyNet, Vec<ProbeRow>)> {
    if eval_every == 0 {
        return Err(Error::InvalidArgument("eval_every must be >= 1".into()));
    }
    let cfg = TrainConfig {
        lambda: 0.0,
        ..cfg.clone()
    };
    let out = fit(net, train, val, &cfg, true, Some(eval_every))?;
    Ok((out.net, out.probe))
}

pub const PROBE_HEADER: &str = "step,loss_p,loss_s,cam_dice";

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = format!("{PROBE_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.step, r.loss_p, r.loss_s, r.cam_dice
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvSpec, ParamGroup, TinyNetConfig};
    use crate::synth::{generate_dataset, SynthConfig};

    fn dataset(n: usize) -> Vec<Sample> {
        generate_dataset(&SynthConfig {
            n_samples: n,
            image_size: 32,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap()
        .samples
    }

    fn net(k: usize) -> TinyNet {
        TinyNet::new(TinyNetConfig {
            image_size: 32,
            encoder: vec![
                ConvSpec {
                    channels: 6,
                    stride: 2,
                },
                ConvSpec {
                    channels: 8,
                    stride: 2,
                },
            ],
            n_classes: 1,
            n_subclasses: k,
            init_seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn extractor_contract() {
        let s = &dataset(2)[0];
        let ex = FrozenExtractor::new(DEFAULT_FEATURE_DIM, 9).unwrap();
        let a = extract_frozen_features(&ex, s);
        assert_eq!(a.len(), 64);
        assert_eq!(
            a,
            extract_frozen_features(&FrozenExtractor::new(64, 9).unwrap(), s)
        );
        let shifted = s.image.map(|v| v + 0.1).unwrap();
        let b = ex.features(&shifted);
        assert!((b[0] - a[0] - 0.1).abs() < 1e-12);
        for j in 1..64 {
            assert!((a[j] - b[j]).abs() < 1e-9, "coordinate {j}");
        }
        assert!(FrozenExtractor::new(7, 0).is_err());
    }

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn kmeans_small_cases() {
        let r = kmeans(&pts(&[0.0, 1.0, 10.0, 11.0]), 2, 3).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        let one = kmeans(&pts(&[1.0, 2.0, 6.0]), 1, 0).unwrap();
        assert_eq!(one.centroids[0], vec![3.0]);
        assert!(matches!(
            kmeans(&pts(&[1.0]), 2, 0),
            Err(Error::TooFewPoints {
                points: 1,
                k: 2,
                ..
            })
        ));
        let same = kmeans(&pts(&[4.0, 4.0, 4.0]), 3, 1).unwrap();
        assert_eq!(same.sse(), 0.0);
    }

    #[test]
    fn kmeans_stable_under_duplication() {
        let mut rng = SeededRng::new(1);
        let mut compared = 0;
        for trial in 0..40 {
            let base: Vec<f64> = (0..6).map(|_| rng.range(0.0, 20.0)).collect();
            let best = brute_force_sse(&base, 2);
            let r = kmeans(&pts(&base), 2, trial).unwrap();
            let twice: Vec<f64> = base.iter().chain(&base).copied().collect();
            let r2 = kmeans(&pts(&twice), 2, trial).unwrap();
            // duplicating every point doubles every partition's SSE, so optima correspond
            if r.sse() > best + 1e-9 || r2.sse() > 2.0 * best + 1e-9 {
                continue;
            }
            compared += 1;
            for i in 0..6 {
                assert_eq!(r2.assignments[i], r2.assignments[i + 6]);
                for j in 0..6 {
                    let same = r.assignments[i] == r.assignments[j];
                    assert_eq!(
                        same,
                        r2.assignments[i] == r2.assignments[j],
                        "trial {trial}"
                    );
                }
            }
        }
        assert!(compared >= 20, "only {compared} trials reached the optimum");
    }

    fn brute_force_sse(x: &[f64], k: usize) -> f64 {
        assert_eq!(k, 2);
        let n = x.len();
        (1..(1u32 << n) - 1)
            .map(|mask| {
                let part = |inside: bool| {
                    let v: Vec<f64> = (0..n)
                        .filter(|&i| ((mask >> i) & 1 == 1) == inside)
                        .map(|i| x[i])
                        .collect();
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    v.iter().map(|a| (a - m).powi(2)).sum::<f64>()
                };
                part(true) + part(false)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn kmeans_sse_never_increases() {
        let mut rng = SeededRng::new(4);
        for trial in 0..30 {
            let p: Vec<Vec<f64>> = (0..60)
                .map(|_| (0..3).map(|_| rng.normal()).collect())
                .collect();
            let r = kmeans(&p, 1 + trial % 7, trial as u64).unwrap();
            for w in r.sse_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
            assert_eq!(r, kmeans(&p, 1 + trial % 7, trial as u64).unwrap());
        }
    }

    fn rows(v: &[(&str, usize, usize)]) -> SubClassAssignment {
        SubClassAssignment {
            k: 2,
            rows: v
                .iter()
                .map(|&(s, c, k)| AssignmentRow {
                    sample_id: s.into(),
                    class: c,
                    cluster: k,
                })
                .collect(),
        }
    }

    #[test]
    fn subclass_label_layout() {
        let mut samples = dataset(2);
        samples[0].y_p = vec![1, 0];
        samples[1].y_p = vec![1, 1];
        let id0 = samples[0].id.clone();
        let id1 = samples[1].id.clone();
        let y = build_subclass_labels(
            &samples,
            &rows(&[(&id0, 0, 1), (&id1, 0, 0), (&id1, 1, 1)]),
            2,
        )
        .unwrap();
        assert_eq!(y[0], vec![0, 1, 0, 0]);
        assert_eq!(y[1], vec![1, 0, 0, 1]);
        assert!(build_subclass_labels(
            &samples,
            &rows(&[(&id0, 1, 0), (&id1, 0, 0), (&id1, 1, 1)]),
            2
        )
        .is_err());
        assert!(build_subclass_labels(&samples, &rows(&[(&id1, 0, 0), (&id1, 1, 1)]), 2).is_err());

        let one = SubClassAssignment {
            k: 4,
            rows: vec![AssignmentRow {
                sample_id: id0.clone(),
                class: 0,
                cluster: 2,
            }],
        };
        samples[0].y_p = vec![1];
        assert_eq!(
            build_subclass_labels(&samples[..1], &one, 1).unwrap()[0],
            vec![0, 0, 1, 0]
        );
    }

    #[test]
    fn clustering_covers_present_classes() {
        let samples = dataset(40);
        let ex = FrozenExtractor::new(16, 0).unwrap();
        let (a, model) = cluster_subclasses(&samples, 1, 3, &ex, 7).unwrap();
        let present = samples.iter().filter(|s| s.y_p[0] == 1).count();
        assert_eq!(a.rows.len(), present);
        assert!(a.rows.iter().all(|r| r.cluster < 3));
        assert_eq!(model.assign(&samples).unwrap(), a);
        let csv = assignments_csv(&a);
        assert!(csv.starts_with("sample_id,class_id,cluster_id\n"));
        assert_eq!(parse_assignments_csv(&csv, 3).unwrap(), a);
        assert!(matches!(
            cluster_subclasses(&samples[..3], 1, 8, &ex, 0),
            Err(Error::TooFewPoints { class: Some(0), .. }) | Ok(_)
        ));
    }

    #[test]
    fn cam_contract() {
        let samples = dataset(3);
        let mut n = net(2);
        let cam = compute_cam(&n, &samples[0], 0).unwrap();
        assert!(cam.map.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(cam.map.max() == 1.0 || cam.map.max() == 0.0);
        assert_eq!(cam, compute_cam(&n, &samples[0], 0).unwrap());
        let out = n.forward(&samples[0].image).unwrap();
        let resp = n.class_response(&out, 0).unwrap();
        assert!((resp.mean() - out.logits_p[0]).abs() < 1e-6);
        for p in n.params_mut() {
            if p.group() == ParamGroup::HeadP {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        assert!(compute_cam(&n, &samples[0], 0)
            .unwrap()
            .map
            .values()
            .iter()
            .all(|&v| v == 0.0));
        assert!(compute_cam(&n, &samples[0], 1).is_err());
        assert!(Cam::new(0, "s".into(), "c".into(), Field2D::filled(2, 2, 0.5)).is_err());
    }

    fn labelled(n: usize, k: usize) -> Vec<Sample> {
        let mut s = dataset(n);
        let ex = FrozenExtractor::new(16, 0).unwrap();
        let (a, _) = cluster_subclasses(&s, 1, k, &ex, 1).unwrap();
        attach_subclass_labels(&mut s, &a, 1).unwrap();
        s
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_identity() {
        let s = labelled(24, 2);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            peak_lr: 0.05,
            ..TrainConfig::default()
        };
        let (a, log_a) = train_sce(net(2), &s[..16], &s[16..], &cfg).unwrap();
        let (b, log_b) = train_sce(net(2), &s[..16], &s[16..], &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.len(), 2);
        let zero = TrainConfig { epochs: 0, ..cfg };
        let (c, log_c) = train_sce(net(2), &s[..16], &s[16..], &zero).unwrap();
        assert_eq!(c, net(2));
        assert!(log_c.is_empty());
    }

    #[test]
    fn divergence_returns_last_good_net() {
        let s = labelled(16, 2);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            peak_lr: 1e30,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        match train_sce(net(2), &s, &s[..2], &cfg) {
            Err(Error::Diverged { last_good, .. }) => assert!(last_good.is_finite()),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn probe_keeps_sub_head_frozen() {
        let s = labelled(24, 2);
        let init = net(2);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 6,
            peak_lr: 0.05,
            ..TrainConfig::default()
        };
        let (trained, rows) = run_sce_probe(init.clone(), &s[..18], &s[18..], &cfg, 2).unwrap();
        for (p, q) in init.params().iter().zip(trained.params()) {
            if p.group() == ParamGroup::HeadS {
                assert_eq!(p.data, q.data);
            }
        }
        assert_eq!(
            rows.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![2, 4, 6]
        );
        assert!(probe_csv(&rows).starts_with("step,loss_p,loss_s,cam_dice\n2,"));
    }
}
