//! Overlap and surface-distance metrics for binary masks.
//!
//! Policy for degenerate inputs: Dice and Jaccard score empty/empty as 1 and
//! empty/non-empty as 0. ASSD and HD95 refuse empty masks; such pairs are recorded as
//! skipped and left out of the surface-metric means.

use std::fmt::Write as _;

use crate::{Error, LabelMap, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn from_labels(map: &LabelMap, label: u16) -> Self {
        Self {
            height: map.height(),
            width: map.width(),
            bits: map.mask_of(label),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.bits[y as usize * self.width + x as usize]
    }

    /// Mask minus its 4-connected erosion (pixels outside the image count as background).
    pub fn boundary(&self) -> Vec<bool> {
        let mut out = vec![false; self.bits.len()];
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                if self.at(y, x)
                    && !(self.at(y - 1, x)
                        && self.at(y + 1, x)
                        && self.at(y, x - 1)
                        && self.at(y, x + 1))
                {
                    out[y as usize * self.width + x as usize] = true;
                }
            }
        }
        out
    }
}

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize) {
    let inter = a.bits.iter().zip(&b.bits).filter(|(&x, &y)| x && y).count();
    (inter, a.count(), b.count())
}

/// `2|A n B| / (|A| + |B|)`.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (inter, na, nb) = overlap(pred, gt);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A n B| / |A u B|`.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (inter, na, nb) = overlap(pred, gt);
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

const EDT_INF: i64 = 1 << 40;

/// Exact squared Euclidean distance to the nearest `true` cell (separable lower-envelope
/// transform). Cells with no `true` cell anywhere get [`EDT_INF`]-scale values.
pub(crate) fn squared_distance_transform(set: &[bool], height: usize, width: usize) -> Vec<i64> {
    let mut g = vec![0i64; set.len()];
    let mut col = vec![0i64; height];
    let mut out_col = vec![0i64; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = if set[y * width + x] { 0 } else { EDT_INF };
        }
        envelope_1d(&col, &mut out_col);
        for y in 0..height {
            g[y * width + x] = out_col[y];
        }
    }
    let mut out = vec![0i64; set.len()];
    for y in 0..height {
        envelope_1d(
            &g[y * width..(y + 1) * width],
            &mut out[y * width..(y + 1) * width],
        );
    }
    out
}

fn envelope_1d(f: &[i64], d: &mut [i64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let key = |q: usize| (f[q] + (q * q) as i64) as f64;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = (key(q) - key(p)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this stops at k == 0
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as i64 - p as i64;
        *out = f[p] + dq * dq;
    }
}

/// Distances from each boundary pixel of `from` (row-major order) to the boundary of `to`.
fn directed_boundary_distances(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
    let to_boundary = to.boundary();
    let dt = squared_distance_transform(&to_boundary, to.height, to.width);
    from.boundary()
        .iter()
        .zip(&dt)
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| (d2 as f64).sqrt())
        .collect()
}

fn surface_distances(pred: &BinaryMask, gt: &BinaryMask) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shapes(pred, gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Err(Error::EmptyMask("both")),
        (true, false) => return Err(Error::EmptyMask("pred")),
        (false, true) => return Err(Error::EmptyMask("gt")),
        _ => {}
    }
    Ok((
        directed_boundary_distances(pred, gt),
        directed_boundary_distances(gt, pred),
    ))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Average of the two directed mean boundary distances.
pub fn assd(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (ab, ba) = surface_distances(pred, gt)?;
    Ok((mean(&ab) + mean(&ba)) / 2.0)
}

/// Linear-interpolated percentile of an ascending slice, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95th percentile of the pooled boundary distances in both directions.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (mut all, ba) = surface_distances(pred, gt)?;
    all.extend(ba);
    all.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&all, 0.95))
}

/// Symmetric Hausdorff distance between boundaries.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (ab, ba) = surface_distances(pred, gt)?;
    Ok(ab.into_iter().chain(ba).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub sample_id: String,
    pub class: usize,
    pub dsc: f64,
    pub jaccard: f64,
    pub assd: Option<f64>,
    pub hd95: Option<f64>,
}

impl MetricRecord {
    pub fn skipped(&self) -> bool {
        self.assd.is_none()
    }
}

pub fn evaluate_pair(
    sample_id: &str,
    class: usize,
    pred: &BinaryMask,
    gt: &BinaryMask,
) -> Result<MetricRecord> {
    let (assd_v, hd) = match surface_distances(pred, gt) {
        Ok(_) => (Some(assd(pred, gt)?), Some(hd95(pred, gt)?)),
        Err(Error::EmptyMask(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(MetricRecord {
        sample_id: sample_id.to_string(),
        class,
        dsc: dice(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
        assd: assd_v,
        hd95: hd,
    })
}

/// Dataset-level means. Overlap metrics average all records; surface metrics average the
/// non-skipped ones.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub n: usize,
    pub dsc: f64,
    pub jaccard: f64,
    pub assd: f64,
    pub hd95: f64,
    pub skipped: usize,
    pub skipped_ids: Vec<(String, usize)>,
}

pub fn aggregate(records: &[MetricRecord]) -> Result<MetricReport> {
    let scored: Vec<&MetricRecord> = records.iter().filter(|r| !r.skipped()).collect();
    if scored.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no scoreable samples among {} records",
            records.len()
        )));
    }
    let n = records.len() as f64;
    let m = scored.len() as f64;
    Ok(MetricReport {
        n: records.len(),
        dsc: records.iter().map(|r| r.dsc).sum::<f64>() / n,
        jaccard: records.iter().map(|r| r.jaccard).sum::<f64>() / n,
        assd: scored.iter().map(|r| r.assd.unwrap()).sum::<f64>() / m,
        hd95: scored.iter().map(|r| r.hd95.unwrap()).sum::<f64>() / m,
        skipped: records.len() - scored.len(),
        skipped_ids: records
            .iter()
            .filter(|r| r.skipped())
            .map(|r| (r.sample_id.clone(), r.class))
            .collect(),
    })
}

pub const METRICS_HEADER: &str = "sample_id,class,dsc,jaccard,assd,hd95,skipped";

/// `metrics.csv` body with fixed six-decimal formatting.
pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in records {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{},{},{}",
            r.sample_id,
            r.class,
            r.dsc,
            r.jaccard,
            opt(r.assd),
            opt(r.hd95),
            r.skipped() as u8
        )
        .unwrap();
    }
    out
}
