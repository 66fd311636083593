//! Covariate standardization, per-physician distance matrices, one-to-one
//! pairing under a caliper, and discordance from matched pairs.
//!
//! Pairing follows a fixed recipe per physician: mask the diagonal with a
//! finite sentinel, solve the assignment problem, deduplicate the proposed
//! edges, drop those above the caliper (25th percentile of the panel's
//! pairwise distances), then select greedily by ascending weight without
//! replacement. Equal-weight edges are ordered by (smaller index, larger
//! index) so the selection is deterministic.

use serde::Serialize;

use crate::hungarian;
use crate::stats;
use crate::synthgen::Cohort;

/// Cohort-wide standardized covariates, plus a robust variant used by the
/// profile-based pairing.
#[derive(Debug, Clone)]
pub struct StandardizedCohort {
    pub n: usize,
    pub p: usize,
    /// Row-major z-scores: (x - mean) / sd, zeros where a column is constant.
    pub z: Vec<f64>,
    /// Row-major robust scaling: (x - median) / iqr, z-score fallback where
    /// the iqr is zero.
    pub z_robust: Vec<f64>,
    pub column_means: Vec<f64>,
    pub column_sds: Vec<f64>,
    pub column_medians: Vec<f64>,
    pub column_iqrs: Vec<f64>,
}

impl StandardizedCohort {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }

    pub fn robust_row(&self, i: usize) -> &[f64] {
        &self.z_robust[i * self.p..(i + 1) * self.p]
    }
}

/// Cohort-wide z-scores (population sd) and median/iqr scaling.
pub fn standardize(cohort: &Cohort) -> StandardizedCohort {
    standardize_matrix(&cohort.x, cohort.n(), cohort.p())
}

pub fn standardize_matrix(x: &[f64], n: usize, p: usize) -> StandardizedCohort {
    assert!(n >= 2, "standardization needs at least two rows");
    assert_eq!(x.len(), n * p);
    let mut column_means = vec![0.0; p];
    let mut column_sds = vec![0.0; p];
    let mut column_medians = vec![0.0; p];
    let mut column_iqrs = vec![0.0; p];
    let mut col = vec![0.0; n];
    for c in 0..p {
        for i in 0..n {
            col[i] = x[i * p + c];
        }
        column_means[c] = stats::mean(&col);
        column_sds[c] = stats::sd(&col, 0);
        col.sort_by(|a, b| a.partial_cmp(b).expect("NaN covariate"));
        column_medians[c] = stats::quantile_sorted(&col, 0.5);
        column_iqrs[c] = stats::quantile_sorted(&col, 0.75) - stats::quantile_sorted(&col, 0.25);
    }
    let mut z = vec![0.0; n * p];
    let mut z_robust = vec![0.0; n * p];
    for i in 0..n {
        for c in 0..p {
            let v = x[i * p + c];
            let zv = if column_sds[c] > 0.0 { (v - column_means[c]) / column_sds[c] } else { 0.0 };
            z[i * p + c] = zv;
            z_robust[i * p + c] =
                if column_iqrs[c] > 0.0 { (v - column_medians[c]) / column_iqrs[c] } else { zv };
        }
    }
    StandardizedCohort { n, p, z, z_robust, column_means, column_sds, column_medians, column_iqrs }
}

/// Whitening map for the Mahalanobis metric: rows `v_k / sqrt(lambda_k)` of
/// the covariance eigendecomposition, directions with near-zero eigenvalues
/// dropped (Moore-Penrose behaviour on singular covariances).
#[derive(Debug, Clone)]
pub struct MahalanobisTransform {
    pub q: usize,
    pub p: usize,
    w: Vec<f64>,
}

/// Transform built from the covariance of the full standardized cohort.
/// The population/sample scale choice cancels against the caliper (both are
/// quantiles of the same distances), so population covariance is used.
pub fn mahalanobis_transform(z: &[f64], n: usize, p: usize) -> MahalanobisTransform {
    assert!(n >= 2);
    assert_eq!(z.len(), n * p);
    let mut means = vec![0.0; p];
    for row in z.chunks_exact(p) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; p * p];
    for row in z.chunks_exact(p) {
        for a in 0..p {
            let da = row[a] - means[a];
            for b in a..p {
                cov[a * p + b] += da * (row[b] - means[b]);
            }
        }
    }
    for a in 0..p {
        for b in a..p {
            let v = cov[a * p + b] / n as f64;
            cov[a * p + b] = v;
            cov[b * p + a] = v;
        }
    }
    let m = nalgebra::DMatrix::from_row_slice(p, p, &cov);
    let eig = m.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |acc, &v| acc.max(v));
    let tol = max_ev * 1e-12;
    let mut w = Vec::new();
    let mut q = 0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > tol {
            let scale = 1.0 / lambda.sqrt();
            for l in 0..p {
                w.push(eig.eigenvectors[(l, k)] * scale);
            }
            q += 1;
        }
    }
    MahalanobisTransform { q, p, w }
}

impl MahalanobisTransform {
    /// Writes `diag(1/sqrt(lambda)) V^T row` into `out[..self.q]`.
    pub fn apply(&self, row: &[f64], out: &mut [f64]) {
        for k in 0..self.q {
            let wk = &self.w[k * self.p..(k + 1) * self.p];
            out[k] = wk.iter().zip(row).map(|(a, b)| a * b).sum();
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Metric<'a> {
    /// `||z_i - z_k||_2 / sqrt(p)`.
    Euclidean,
    /// `sqrt((z_i - z_k)^T pinv(Sigma) (z_i - z_k))`, Sigma from the full cohort.
    Mahalanobis(&'a MahalanobisTransform),
    /// `||diag(sqrt(w)) (z_i - z_k)||_2`; uniform weights 1/p recover Euclidean.
    Weighted(&'a [f64]),
}

/// Symmetric non-negative per-physician distances with a zero diagonal.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub physician_id: usize,
    pub n: usize,
    /// Row-major n×n.
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.n + k]
    }

    /// Upper-triangular off-diagonal entries in row-major order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.n - 1) / 2);
        for i in 0..self.n {
            for k in (i + 1)..self.n {
                out.push(self.values[i * self.n + k]);
            }
        }
        out
    }

    #[cfg(test)]
    fn assert_valid(&self) {
        assert_eq!(self.values.len(), self.n * self.n);
        for i in 0..self.n {
            assert_eq!(self.get(i, i), 0.0);
            for k in 0..self.n {
                let v = self.get(i, k);
                assert!(v.is_finite() && v >= 0.0);
                assert_eq!(v, self.get(k, i));
            }
        }
    }
}

/// Distances between the panel rows `members` of the standardized matrix `z`.
pub fn distance_matrix(
    metric: Metric,
    z: &[f64],
    p: usize,
    members: &[usize],
    physician_id: usize,
) -> DistanceMatrix {
    let nj = members.len();
    assert!(nj >= 2, "distance matrix needs at least two patients");
    // project rows once so every metric reduces to plain euclidean
    let (rows, q, scale) = match metric {
        Metric::Euclidean => {
            let mut rows = Vec::with_capacity(nj * p);
            for &i in members {
                rows.extend_from_slice(&z[i * p..(i + 1) * p]);
            }
            (rows, p, 1.0 / (p as f64).sqrt())
        }
        Metric::Weighted(weights) => {
            assert_eq!(weights.len(), p);
            let root: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
            let mut rows = Vec::with_capacity(nj * p);
            for &i in members {
                rows.extend(z[i * p..(i + 1) * p].iter().zip(&root).map(|(v, r)| v * r));
            }
            (rows, p, 1.0)
        }
        Metric::Mahalanobis(t) => {
            assert_eq!(t.p, p);
            // q = 0 when the covariance has no positive eigenvalue; the
            // pseudo-metric then collapses and every distance is zero
            let mut rows = vec![0.0; nj * t.q];
            if t.q > 0 {
                for (slot, &i) in rows.chunks_exact_mut(t.q).zip(members) {
                    t.apply(&z[i * p..(i + 1) * p], slot);
                }
            }
            (rows, t.q, 1.0)
        }
    };
    let mut values = vec![0.0; nj * nj];
    for i in 0..nj {
        let ri = &rows[i * q..(i + 1) * q];
        for k in (i + 1)..nj {
            let rk = &rows[k * q..(k + 1) * q];
            let d2: f64 = ri.iter().zip(rk).map(|(a, b)| (a - b) * (a - b)).sum();
            let d = d2.sqrt() * scale;
            values[i * nj + k] = d;
            values[k * nj + i] = d;
        }
    }
    DistanceMatrix { physician_id, n: nj, values }
}

/// 25th percentile of the upper-triangular off-diagonal distances.
pub fn caliper_value(d: &DistanceMatrix) -> f64 {
    let mut tri = d.upper_triangle();
    stats::quantile_select(&mut tri, 0.25)
}

/// Matched pairs for one physician, in local panel indices with `a < b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub physician_id: usize,
    pub caliper: f64,
    pub pairs: Vec<(usize, usize)>,
}

/// One-to-one pairing: sentinel diagonal, assignment solve, undirected
/// deduplication, caliper filter, ascending-weight greedy selection.
pub fn pair_one_to_one(d: &DistanceMatrix) -> PairSet {
    let n = d.n;
    assert!(n >= 2, "pairing needs at least two patients");
    let caliper = caliper_value(d);

    let max_entry = d.values.iter().fold(0.0f64, |acc, &v| acc.max(v));
    let sentinel = (n as f64 + 1.0) * max_entry.max(1.0);
    let mut cost = d.values.clone();
    for i in 0..n {
        cost[i * n + i] = sentinel;
    }
    let assign = hungarian::solve(&cost, n);
    drop(cost);

    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for (i, &s) in assign.iter().enumerate() {
        let (a, b) = (i.min(s), i.max(s));
        if a != b {
            let w = d.get(a, b);
            if w.is_finite() && w <= caliper {
                candidates.push((w, a, b));
            }
        }
    }
    candidates.sort_by(|x, y| x.partial_cmp(y).expect("NaN distance"));
    candidates.dedup_by(|x, y| x.1 == y.1 && x.2 == y.2);

    let mut used = vec![false; n];
    let mut pairs = Vec::with_capacity(candidates.len());
    for (_, a, b) in candidates {
        if used[a] || used[b] {
            continue;
        }
        used[a] = true;
        used[b] = true;
        pairs.push((a, b));
    }
    PairSet { physician_id: d.physician_id, caliper, pairs }
}

/// Fraction of matched pairs with discordant outcomes; `None` when the pair
/// set is empty (no estimate for that physician).
pub fn discordance_from_pairs(pairs: &PairSet, y: &[bool]) -> Option<f64> {
    if pairs.pairs.is_empty() {
        return None;
    }
    let discordant = pairs.pairs.iter().filter(|&&(a, b)| y[a] != y[b]).count();
    Some(discordant as f64 / pairs.pairs.len() as f64)
}

/// One row of the optional matched-pair debug dump.
#[derive(Debug, Serialize)]
pub struct PairDumpRow {
    pub physician: usize,
    pub i: usize,
    pub k: usize,
    pub distance: f64,
    pub y_i: bool,
    pub y_k: bool,
}

pub fn export_pairs_csv(path: &std::path::Path, rows: &[PairDumpRow]) -> crate::error::Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(std::io::Error::from)?;
    Ok(())
}
