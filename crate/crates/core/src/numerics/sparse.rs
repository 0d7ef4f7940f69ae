use crate::{Error, Result};

/// Structural tag carried by a [`SparseMatrix`] and verified at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    General,
    /// `(i, j)` present iff `(j, i)` present with an identical weight.
    Symmetric,
    /// Every row sums to 1 within [`SparseMatrix::STOCHASTIC_TOL`].
    RowStochastic,
}

/// Square sparse matrix with strictly positive stored weights.
///
/// Stored as CSR. Row-stochastic matrices keep their unnormalized weights plus one
/// denominator per row, so `T v` is evaluated as `(sum_j w_ij v_j) / d_i`. With that layout a
/// constant vector is an exact fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    row_denominators: Option<Vec<f64>>,
    kind: MatrixKind,
}

impl SparseMatrix {
    pub const STOCHASTIC_TOL: f64 = 1e-9;
    pub const SYMMETRY_TOL: f64 = 0.0;

    /// Builds from coordinate triplets in any order.
    pub fn from_triplets(
        n: usize,
        mut entries: Vec<(usize, usize, f64)>,
        kind: MatrixKind,
    ) -> Result<Self> {
        entries.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(entries.len());
        let mut weights = Vec::with_capacity(entries.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, w) in &entries {
            if r >= n || c >= n {
                return Err(Error::Dimension(format!("entry ({r},{c}) outside {n}x{n}")));
            }
            if prev == Some((r, c)) {
                return Err(Error::InvalidArgument(format!("duplicate entry ({r},{c})")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "entry ({r},{c}) has non-positive weight {w}"
                )));
            }
            prev = Some((r, c));
            row_ptr[r + 1] += 1;
            cols.push(c);
            weights.push(w);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let m = Self {
            n,
            row_ptr,
            cols,
            weights,
            row_denominators: None,
            kind: MatrixKind::General,
        };
        m.with_kind(kind)
    }

    /// Builds directly from CSR arrays whose rows are already column-sorted.
    pub(crate) fn from_sorted_rows(
        n: usize,
        row_ptr: Vec<usize>,
        cols: Vec<usize>,
        weights: Vec<f64>,
        kind: MatrixKind,
    ) -> Result<Self> {
        debug_assert_eq!(row_ptr.len(), n + 1);
        debug_assert!(weights.iter().all(|&w| w > 0.0 && w.is_finite()));
        let m = Self {
            n,
            row_ptr,
            cols,
            weights,
            row_denominators: None,
            kind: MatrixKind::General,
        };
        m.with_kind(kind)
    }

    fn with_kind(mut self, kind: MatrixKind) -> Result<Self> {
        match kind {
            MatrixKind::General => {}
            MatrixKind::Symmetric => {
                if !self.is_symmetric() {
                    return Err(Error::InvalidArgument("matrix is not symmetric".into()));
                }
            }
            MatrixKind::RowStochastic => self.check_stochastic()?,
        }
        self.kind = kind;
        Ok(self)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            weights: vec![1.0; n],
            row_denominators: None,
            kind: MatrixKind::Symmetric,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    /// Effective `(col, weight)` pairs of row `i`, ascending by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let denom = self.row_denominators.as_ref().map_or(1.0, |d| d[i]);
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.weights[span])
            .map(move |(&c, &w)| (c, w / denom))
    }

    /// All entries as `(row, col, weight)`, row-major.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, w)| (i, j, w)))
            .collect()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        let pos = self.cols[span.clone()].binary_search(&j).ok()?;
        let denom = self.row_denominators.as_ref().map_or(1.0, |d| d[i]);
        Some(self.weights[span.start + pos] / denom)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, w)| w).sum())
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| {
            self.row(i).all(
                |(j, w)| matches!(self.get(j, i), Some(v) if (v - w).abs() <= Self::SYMMETRY_TOL),
            )
        })
    }

    pub fn has_full_diagonal(&self) -> bool {
        (0..self.n).all(|i| self.get(i, i).is_some())
    }

    /// Maximum effective weight in each row.
    pub fn row_max(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, w)| w).fold(0.0, f64::max))
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n]; self.n];
        for (i, j, w) in self.entries() {
            dense[i][j] = w;
        }
        dense
    }

    fn check_stochastic(&self) -> Result<()> {
        for (i, s) in self.row_sums().into_iter().enumerate() {
            if (s - 1.0).abs() > Self::STOCHASTIC_TOL {
                return Err(Error::Invariant(format!("row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    /// `D^{-1} self` with `D_ii = sum_j w_ij`.
    pub fn row_normalized(&self) -> Result<SparseMatrix> {
        let mut denominators = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let d: f64 = self.row(i).map(|(_, w)| w).sum();
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Invariant(format!("row {i} has degree {d}")));
            }
            denominators.push(d);
        }
        let weights = self.entries().into_iter().map(|(_, _, w)| w).collect();
        let m = SparseMatrix {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            cols: self.cols.clone(),
            weights,
            row_denominators: Some(denominators),
            kind: MatrixKind::General,
        };
        m.with_kind(MatrixKind::RowStochastic)
    }
}

/// `out[i] = sum_j T[i, j] * v[j]`.
pub fn sparse_matvec(t: &SparseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != t.n {
        return Err(Error::Dimension(format!(
            "vector of length {} for a {}x{} matrix",
            v.len(),
            t.n,
            t.n
        )));
    }
    let mut out = Vec::with_capacity(t.n);
    for i in 0..t.n {
        let span = t.row_ptr[i]..t.row_ptr[i + 1];
        let acc: f64 = t.cols[span.clone()]
            .iter()
            .zip(&t.weights[span])
            .map(|(&j, &w)| w * v[j])
            .sum();
        out.push(match &t.row_denominators {
            Some(d) => acc / d[i],
            None => acc,
        });
    }
    if let Some(i) = out.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("matvec output {i}")));
    }
    Ok(out)
}

/// Element-wise `w^beta` on a matrix with weights in `(0, 1]`.
///
/// Results that underflow are clamped to the smallest positive normal so the sparsity
/// pattern survives.
pub fn hadamard_power(a: &SparseMatrix, beta: f64) -> Result<SparseMatrix> {
    if !(beta >= 1.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "beta must be >= 1, got {beta}"
        )));
    }
    let mut weights = Vec::with_capacity(a.nnz());
    for (i, j, w) in a.entries() {
        if !(w > 0.0 && w <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "entry ({i},{j}) = {w} outside (0, 1]"
            )));
        }
        weights.push(w.powf(beta).max(f64::MIN_POSITIVE));
    }
    let kind = match a.kind {
        MatrixKind::Symmetric => MatrixKind::Symmetric,
        _ => MatrixKind::General,
    };
    SparseMatrix::from_sorted_rows(a.n, a.row_ptr.clone(), a.cols.clone(), weights, kind)
}
