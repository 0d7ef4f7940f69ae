//! Dense fields, sparse matrices, seeded randomness and on-disk formats.
//!
//! Grids are vectorized row-major everywhere: cell `(r, c)` of an `h x w` grid is index `r * w + c`.

mod io;
mod rng;
mod sparse;

pub use io::{read_pgm, read_wcf, write_pgm, write_wcf};
pub use rng::{mix_seed, SeededRng};
pub use sparse::{hadamard_power, sparse_matvec, MatrixKind, SparseMatrix};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Below this range a field is treated as constant by [`minmax_normalize`].
pub const DEGENERATE_RANGE: f64 = 1e-12;

/// Dense 2D grid of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Field2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("empty field {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width} field",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field cell {i} = {}", values[i])));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty field");
        assert!(value.is_finite());
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    /// Builds a field from `f(row, col)`; panics on non-finite output.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values).expect("from_fn produced an invalid field")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Element-wise sum; shapes must agree.
    pub fn add(&self, other: &Field2D) -> Result<Field2D> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{:?} + {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Field2D::new(self.height, self.width, values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Field2D> {
        Field2D::new(
            self.height,
            self.width,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// Rescales to `[0, 1]` by `(f - min) / (max - min)`; a constant field maps to all zeros.
pub fn minmax_normalize(f: &Field2D) -> Field2D {
    let lo = f.min();
    let hi = f.max();
    let range = hi - lo;
    if !(range >= DEGENERATE_RANGE) {
        return Field2D::zeros(f.height, f.width);
    }
    let values = f
        .values
        .iter()
        .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
        .collect();
    Field2D {
        height: f.height,
        width: f.width,
        values,
    }
}

/// Block-mean pooling to `out_h x out_w`; both must divide the source shape.
pub fn downsample_avg(f: &Field2D, out_h: usize, out_w: usize) -> Result<Field2D> {
    if out_h == 0 || out_w == 0 || !f.height.is_multiple_of(out_h) || !f.width.is_multiple_of(out_w)
    {
        return Err(Error::Dimension(format!(
            "cannot pool {}x{} to {out_h}x{out_w}",
            f.height, f.width
        )));
    }
    let bh = f.height / out_h;
    let bw = f.width / out_w;
    if bh == 1 && bw == 1 {
        return Ok(f.clone());
    }
    let scale = 1.0 / (bh * bw) as f64;
    let mut values = vec![0.0; out_h * out_w];
    for (r, row) in values.chunks_mut(out_w).enumerate() {
        for (c, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for y in r * bh..(r + 1) * bh {
                let base = y * f.width + c * bw;
                acc += f.values[base..base + bw].iter().sum::<f64>();
            }
            *out = acc * scale;
        }
    }
    Field2D::new(out_h, out_w, values)
}

/// Per-pixel integer labels (class ids, structure ids, binary masks).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u16) {
        self.labels[row * self.width + col] = label;
    }

    pub fn contains(&self, label: u16) -> bool {
        self.labels.contains(&label)
    }

    /// Pixels equal to `label` as a boolean mask.
    pub fn mask_of(&self, label: u16) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    /// Histogram over `0..=max label`.
    pub fn histogram(&self) -> Vec<usize> {
        let top = self.labels.iter().copied().max().unwrap_or(0) as usize;
        let mut hist = vec![0; top + 1];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample_nearest(&self, out_h: usize, out_w: usize) -> Result<LabelMap> {
        if !out_h.is_multiple_of(self.height) || !out_w.is_multiple_of(self.width) {
            return Err(Error::Dimension(format!(
                "cannot upsample {}x{} to {out_h}x{out_w}",
                self.height, self.width
            )));
        }
        let fy = out_h / self.height;
        let fx = out_w / self.width;
        let mut labels = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            for x in 0..out_w {
                labels.push(self.get(y / fy, x / fx));
            }
        }
        LabelMap::new(out_h, out_w, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_hand_case() {
        let f = Field2D::new(2, 2, vec![0.0, 2.0, 4.0, 2.0]).unwrap();
        assert_eq!(minmax_normalize(&f).values(), &[0.0, 0.5, 1.0, 0.5]);
    }

    #[test]
    fn normalize_constant_is_zero() {
        let f = Field2D::filled(3, 5, 7.5);
        assert!(minmax_normalize(&f).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_binary_unchanged() {
        let f = Field2D::new(1, 4, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(minmax_normalize(&f), f);
    }

    #[test]
    fn downsample_cases() {
        let ones = Field2D::filled(4, 4, 1.0);
        assert_eq!(
            downsample_avg(&ones, 2, 2).unwrap(),
            Field2D::filled(2, 2, 1.0)
        );

        let f = Field2D::new(2, 2, vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(downsample_avg(&f, 1, 1).unwrap().values(), &[3.0]);
        assert_eq!(downsample_avg(&f, 2, 2).unwrap(), f);
        assert!(downsample_avg(&f, 3, 1).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Field2D::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Field2D::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn upsample_nearest_blocks() {
        let m = LabelMap::new(2, 2, vec![1, 0, 0, 2]).unwrap();
        let up = m.upsample_nearest(4, 4).unwrap();
        assert_eq!(up.get(1, 1), 1);
        assert_eq!(up.get(0, 2), 0);
        assert_eq!(up.get(3, 3), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_idempotent(vals in prop::collection::vec(-100.0f64..100.0, 12)) {
                let f = Field2D::new(3, 4, vals).unwrap();
                prop_assume!(f.max() - f.min() > 1e-6);
                let once = minmax_normalize(&f);
                let twice = minmax_normalize(&once);
                for (a, b) in once.values().iter().zip(twice.values()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn downsample_preserves_mean(vals in prop::collection::vec(-10.0f64..10.0, 36)) {
                let f = Field2D::new(6, 6, vals).unwrap();
                let d = downsample_avg(&f, 3, 2).unwrap();
                prop_assert!((d.mean() - f.mean()).abs() < 1e-12);
            }
        }
    }
}
