//! Collapsing replicated observations to per-site sufficient statistics.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unique-site summary of a dataset with (possibly) repeated inputs.
///
/// Only sufficient statistics are kept: site means, replicate counts and the
/// bias-unadjusted within-site variances `s_i^2 = mean_j (y_ij - ybar_i)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicatedDesign {
    x0: DMatrix<f64>,
    z0: DVector<f64>,
    mult: Vec<usize>,
    s2: DVector<f64>,
    n_total: usize,
}

impl ReplicatedDesign {
    /// Builds a design from already-collapsed statistics.
    pub fn from_parts(
        x0: DMatrix<f64>,
        z0: DVector<f64>,
        mult: Vec<usize>,
        s2: DVector<f64>,
    ) -> Result<Self> {
        let n = x0.nrows();
        if n == 0 || x0.ncols() == 0 {
            return Err(Error::EmptyInput);
        }
        for len in [z0.len(), mult.len(), s2.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: len,
                });
            }
        }
        if x0
            .iter()
            .chain(z0.iter())
            .chain(s2.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("design"));
        }
        for (i, (&a, &s)) in mult.iter().zip(s2.iter()).enumerate() {
            if a == 0 {
                return Err(Error::InvalidDesign(format!(
                    "site {i} has zero replicates"
                )));
            }
            if s < 0.0 {
                return Err(Error::InvalidDesign(format!(
                    "site {i} has negative variance"
                )));
            }
            if a == 1 && s != 0.0 {
                return Err(Error::InvalidDesign(format!(
                    "site {i} has a single replicate but nonzero variance"
                )));
            }
        }
        let n_total = mult.iter().sum();
        Ok(Self {
            x0,
            z0,
            mult,
            s2,
            n_total,
        })
    }

    /// Design without replication: every row is its own site.
    pub fn unreplicated(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let n = x.nrows();
        Self::from_parts(x, y, vec![1; n], DVector::zeros(n))
    }

    /// Unique inputs, one row per site.
    pub fn x0(&self) -> &DMatrix<f64> {
        &self.x0
    }

    /// Per-site replicate means.
    pub fn z0(&self) -> &DVector<f64> {
        &self.z0
    }

    /// Per-site replicate counts.
    pub fn mult(&self) -> &[usize] {
        &self.mult
    }

    /// Per-site bias-unadjusted variances.
    pub fn s2(&self) -> &DVector<f64> {
        &self.s2
    }

    /// Number of unique sites.
    pub fn n_unique(&self) -> usize {
        self.x0.nrows()
    }

    /// Total number of raw observations.
    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn dim(&self) -> usize {
        self.x0.ncols()
    }

    /// Replicate counts as floats.
    pub fn mult_f64(&self) -> DVector<f64> {
        DVector::from_iterator(self.mult.len(), self.mult.iter().map(|&a| a as f64))
    }

    /// Same sites and counts with a different response summary.
    pub fn with_responses(&self, z0: DVector<f64>, s2: DVector<f64>) -> Result<Self> {
        Self::from_parts(self.x0.clone(), z0, self.mult.clone(), s2)
    }

    /// Keeps the sites listed in `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let d = self.dim();
        let x0 = DMatrix::from_fn(idx.len(), d, |i, j| self.x0[(idx[i], j)]);
        let z0 = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.z0[i]));
        let s2 = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.s2[i]));
        let mult = idx.iter().map(|&i| self.mult[i]).collect();
        Self::from_parts(x0, z0, mult, s2)
    }

    /// Site inputs repeated `mult_i` times and site means repeated alongside.
    ///
    /// Raw responses are not recoverable from the summary; see
    /// [`ReplicatedDesign::expand_with_replicates`] for a full-size response
    /// vector that reproduces the stored statistics exactly.
    pub fn expand(&self) -> (DMatrix<f64>, DVector<f64>) {
        let rows = self.expanded_rows();
        let x = DMatrix::from_fn(self.n_total, self.dim(), |r, j| self.x0[(rows[r], j)]);
        let y = DVector::from_iterator(self.n_total, rows.iter().map(|&i| self.z0[i]));
        (x, y)
    }

    /// Full-size data whose per-site mean and variance equal `z0` and `s2`.
    ///
    /// Deviations at a site with `a` replicates are the centred ramp
    /// `j - (a - 1)/2`, rescaled so their mean square is `s2_i`.
    pub fn expand_with_replicates(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (x, _) = self.expand();
        let mut y = Vec::with_capacity(self.n_total);
        for i in 0..self.n_unique() {
            let a = self.mult[i];
            let centre = (a as f64 - 1.0) / 2.0;
            let ramp: Vec<f64> = (0..a).map(|j| j as f64 - centre).collect();
            let ms = ramp.iter().map(|v| v * v).sum::<f64>() / a as f64;
            let scale = if ms > 0.0 {
                (self.s2[i] / ms).sqrt()
            } else {
                0.0
            };
            y.extend(ramp.iter().map(|r| self.z0[i] + scale * r));
        }
        (x, DVector::from_vec(y))
    }

    /// Site index of each expanded row.
    pub fn expanded_rows(&self) -> Vec<usize> {
        self.mult
            .iter()
            .enumerate()
            .flat_map(|(i, &a)| std::iter::repeat_n(i, a))
            .collect()
    }

    /// Reads a CSV with a header row, `d` input columns and a final response column.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let (x, y) = read_xy_csv(path)?;
        find_reps(&x, &y, 0.0)
    }
}

/// Plain serializable form of a [`ReplicatedDesign`], one entry per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignDoc {
    pub x0: Vec<Vec<f64>>,
    pub z0: Vec<f64>,
    pub mult: Vec<usize>,
    pub s2: Vec<f64>,
}

impl From<&ReplicatedDesign> for DesignDoc {
    fn from(d: &ReplicatedDesign) -> Self {
        Self {
            x0: (0..d.n_unique())
                .map(|i| d.x0.row(i).iter().copied().collect())
                .collect(),
            z0: d.z0.as_slice().to_vec(),
            mult: d.mult.clone(),
            s2: d.s2.as_slice().to_vec(),
        }
    }
}

impl TryFrom<DesignDoc> for ReplicatedDesign {
    type Error = Error;

    fn try_from(doc: DesignDoc) -> Result<Self> {
        let n = doc.x0.len();
        let d = doc.x0.first().map_or(0, Vec::len);
        if doc.x0.iter().any(|r| r.len() != d) {
            return Err(Error::Malformed("ragged input rows".into()));
        }
        let flat: Vec<f64> = doc.x0.into_iter().flatten().collect();
        ReplicatedDesign::from_parts(
            DMatrix::from_row_slice(n, d, &flat),
            DVector::from_vec(doc.z0),
            doc.mult,
            DVector::from_vec(doc.s2),
        )
    }
}

/// Reads a headed CSV of inputs followed by one response column.
pub fn read_xy_csv(path: impl AsRef<Path>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let file = std::fs::File::open(path)?;
    read_xy(file)
}

pub(crate) fn read_xy<R: std::io::Read>(reader: R) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let ncols = rdr.headers()?.len();
    if ncols < 2 {
        return Err(Error::Malformed(
            "expected at least one input column and a response column".into(),
        ));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != ncols {
            return Err(Error::Malformed(format!(
                "row {} has {} fields, expected {ncols}",
                line + 2,
                rec.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Malformed(format!("row {} column {}: `{field}`", line + 2, j + 1))
            })?;
            if j + 1 == ncols {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(Error::EmptyInput);
    }
    let x = DMatrix::from_row_slice(ys.len(), ncols - 1, &xs);
    Ok((x, DVector::from_vec(ys)))
}

/// Groups identical input rows and computes per-site statistics.
///
/// Rows whose coordinates all differ by at most `dedup_tol` from an earlier
/// site are merged into it; with `dedup_tol = 0` only bitwise-equal rows merge.
/// Sites are ordered by first appearance.
pub fn find_reps(x: &DMatrix<f64>, y: &DVector<f64>, dedup_tol: f64) -> Result<ReplicatedDesign> {
    let n_obs = x.nrows();
    if n_obs == 0 || x.ncols() == 0 {
        return Err(Error::EmptyInput);
    }
    if y.len() != n_obs {
        return Err(Error::DimensionMismatch {
            expected: n_obs,
            found: y.len(),
        });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("inputs or responses"));
    }
    if !(dedup_tol >= 0.0) {
        return Err(Error::InvalidParameter(
            "dedup_tol must be nonnegative".into(),
        ));
    }
    let d = x.ncols();

    let mut site_of = Vec::with_capacity(n_obs);
    let mut reps: Vec<usize> = Vec::new(); // representative row of each site
    if dedup_tol == 0.0 {
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for r in 0..n_obs {
            // -0.0 and 0.0 compare equal
            let key: Vec<u64> = x.row(r).iter().map(|v| (v + 0.0).to_bits()).collect();
            let site = *seen.entry(key).or_insert_with(|| {
                reps.push(r);
                reps.len() - 1
            });
            site_of.push(site);
        }
    } else {
        for r in 0..n_obs {
            let found = reps
                .iter()
                .position(|&q| (0..d).all(|j| (x[(r, j)] - x[(q, j)]).abs() <= dedup_tol));
            let site = found.unwrap_or_else(|| {
                reps.push(r);
                reps.len() - 1
            });
            site_of.push(site);
        }
    }

    let n = reps.len();
    let mut mult = vec![0usize; n];
    let mut sums = vec![0.0; n];
    for (r, &s) in site_of.iter().enumerate() {
        mult[s] += 1;
        sums[s] += y[r];
    }
    let z0: Vec<f64> = sums.iter().zip(&mult).map(|(s, &a)| s / a as f64).collect();
    let mut ss = vec![0.0; n];
    for (r, &s) in site_of.iter().enumerate() {
        let dev = y[r] - z0[s];
        ss[s] += dev * dev;
    }
    let s2: Vec<f64> = ss
        .iter()
        .zip(&mult)
        .map(|(v, &a)| if a > 1 { v / a as f64 } else { 0.0 })
        .collect();
    let x0 = DMatrix::from_fn(n, d, |i, j| x[(reps[i], j)]);
    ReplicatedDesign::from_parts(x0, DVector::from_vec(z0), mult, DVector::from_vec(s2))
}
