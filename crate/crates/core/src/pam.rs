//! Prompt affinity mining: turn prompt masks into a local affinity graph on the CAM grid and
//! diffuse CAMs along it.

use serde::{Deserialize, Serialize};

use crate::numerics::{
    downsample_avg, hadamard_power, minmax_normalize, sparse_matvec, MatrixKind,
};
use crate::oracle::PromptMask;
use crate::sce::Cam;
use crate::{Error, Field2D, LabelMap, Result, SparseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    /// Prompts per image side.
    pub grid: usize,
    /// Neighbourhood radius in CAM-grid cells.
    pub gamma: f64,
    pub beta: f64,
    /// Random-walk steps.
    pub t: usize,
    /// Pseudo-label threshold on (refined) CAMs.
    pub theta: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            gamma: 5.0,
            beta: 4.0,
            t: 4,
            theta: 0.25,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::InvalidArgument("grid must be >= 1".into()));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma = {} must be >= 1",
                self.gamma
            )));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta = {} must be >= 1",
                self.beta
            )));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "theta = {} outside (0, 1)",
                self.theta
            )));
        }
        Ok(())
    }
}

/// Aggregated prompt affinity on the working grid, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityField(Field2D);

impl AffinityField {
    pub fn new(field: Field2D) -> Result<Self> {
        if field.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "affinity values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self(field))
    }

    pub fn field(&self) -> &Field2D {
        &self.0
    }
}

/// Sum of all prompt masks, min-max normalized, then block-averaged to `out_h x out_w`.
///
/// Per-pixel sums run over sorted values, so the result does not depend on mask order.
pub fn aggregate_affinity(
    masks: &[PromptMask],
    out_h: usize,
    out_w: usize,
) -> Result<AffinityField> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no prompt masks to aggregate".into()))?;
    let (h, w) = first.field.shape();
    if let Some(m) = masks.iter().find(|m| m.field.shape() != (h, w)) {
        return Err(Error::Dimension(format!(
            "mask for prompt {} is {:?}, expected {:?}",
            m.prompt.index,
            m.field.shape(),
            (h, w)
        )));
    }
    let mut column = Vec::with_capacity(masks.len());
    let sums = (0..h * w)
        .map(|i| {
            column.clear();
            column.extend(masks.iter().map(|m| m.field.values()[i]));
            column.sort_by(f64::total_cmp);
            column.iter().sum()
        })
        .collect();
    let normalized = minmax_normalize(&Field2D::new(h, w, sums)?);
    AffinityField::new(downsample_avg(&normalized, out_h, out_w)?)
}

/// Symmetric local graph over grid cells: `(i, j)` is an edge when the cell centres lie
/// within `gamma` of each other, weighted by `kernel(|v_i - v_j|)`.
pub fn local_affinity(
    values: &Field2D,
    gamma: f64,
    kernel: impl Fn(f64) -> f64,
) -> Result<SparseMatrix> {
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gamma = {gamma} must be >= 1"
        )));
    }
    let (h, w) = values.shape();
    let reach = gamma.floor() as isize;
    let offsets: Vec<(isize, isize)> = (-reach..=reach)
        .flat_map(|dy| (-reach..=reach).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= gamma * gamma)
        .collect();
    let v = values.values();
    let mut row_ptr = Vec::with_capacity(h * w + 1);
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    row_ptr.push(0);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = (y as usize) * w + x as usize;
            // offsets are row-major, so column indices come out sorted
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = (ny as usize) * w + nx as usize;
                let a = if i == j {
                    1.0
                } else {
                    kernel((v[i] - v[j]).abs())
                };
                if !(a > 0.0 && a <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "kernel produced {a} outside (0, 1]"
                    )));
                }
                cols.push(j);
                weights.push(a);
            }
            row_ptr.push(cols.len());
        }
    }
    SparseMatrix::from_sorted_rows(h * w, row_ptr, cols, weights, MatrixKind::Symmetric)
}

/// `a_ij = exp(-|M_i - M_j|)` within radius `gamma`, unit diagonal.
pub fn pairwise_affinity(m: &AffinityField, gamma: f64) -> Result<SparseMatrix> {
    local_affinity(m.field(), gamma, |d| (-d).exp().max(f64::MIN_POSITIVE))
}

/// Same graph built from block-averaged raw intensities with `exp(-|I_i - I_j| / bandwidth)`.
pub fn intensity_affinity_baseline(
    image: &Field2D,
    work_h: usize,
    work_w: usize,
    gamma: f64,
    bandwidth: f64,
) -> Result<SparseMatrix> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth = {bandwidth} must be > 0"
        )));
    }
    let small = downsample_avg(image, work_h, work_w)?;
    local_affinity(&small, gamma, |d| {
        (-d / bandwidth).exp().max(f64::MIN_POSITIVE)
    })
}

/// `T = D^{-1} A^{∘beta}` with `D_ii = sum_j A_ij^beta`.
pub fn transition_matrix(a: &SparseMatrix, beta: f64) -> Result<SparseMatrix> {
    if !a.is_symmetric() {
        return Err(Error::InvalidArgument(
            "affinity matrix is not symmetric".into(),
        ));
    }
    if !a.has_full_diagonal() {
        return Err(Error::InvalidArgument(
            "affinity matrix lacks a full diagonal".into(),
        ));
    }
    hadamard_power(a, beta)?.row_normalized()
}

/// `T^t v`, without renormalization.
pub fn random_walk_raw(t_mat: &SparseMatrix, values: &[f64], steps: usize) -> Result<Vec<f64>> {
    if values.len() != t_mat.dim() {
        return Err(Error::Dimension(format!(
            "CAM has {} cells, transition matrix is {}x{}",
            values.len(),
            t_mat.dim(),
            t_mat.dim()
        )));
    }
    let mut v = values.to_vec();
    for _ in 0..steps {
        v = sparse_matvec(t_mat, &v)?;
    }
    Ok(v)
}

/// Divides by the maximum when it is positive; otherwise returns zeros.
pub fn max_normalize(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter().map(|v| (v / max).max(0.0)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Diffuses a CAM for `steps` walk steps and re-max-normalizes it.
pub fn random_walk(t_mat: &SparseMatrix, cam: &Cam, steps: usize) -> Result<Cam> {
    if steps == 0 {
        return Ok(cam.clone());
    }
    let raw = random_walk_raw(t_mat, cam.map.values(), steps)?;
    let (h, w) = cam.map.shape();
    Ok(Cam {
        map: Field2D::new(h, w, max_normalize(&raw))?,
        ..cam.clone()
    })
}

/// Per cell: the class with the largest CAM value (lowest id on ties) if that value reaches
/// `theta`, else background. Class `c` is written as `c + 1`.
pub fn pseudo_label(cams: &[&Field2D], theta: f64, shape: (usize, usize)) -> Result<LabelMap> {
    let (h, w) = shape;
    if let Some(c) = cams.iter().find(|c| c.shape() != shape) {
        return Err(Error::Dimension(format!(
            "CAM {:?} vs expected {shape:?}",
            c.shape()
        )));
    }
    let mut out = LabelMap::zeros(h, w);
    for (i, label) in out.labels_mut().iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (c, cam) in cams.iter().enumerate() {
            let v = cam.values()[i];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        if let Some((c, v)) = best {
            if v >= theta {
                *label = (c + 1) as u16;
            }
        }
    }
    Ok(out)
}
