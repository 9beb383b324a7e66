//! Accuracy metrics under the signed-permutation gauge, and run summaries.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column `j` of the aligned estimate is `signs[j] · Â[:, perm[j]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
}

impl Alignment {
    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            signs: vec![1.0; n],
        }
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), self.perm.len(), |i, j| self.signs[j] * m[(i, self.perm[j])])
    }
}

/// Maximum-weight perfect matching on a square matrix; returns `assign[row] = col`.
pub fn max_weight_assignment(w: &DMatrix<f64>) -> Vec<usize> {
    let n = w.nrows();
    assert_eq!(n, w.ncols(), "assignment needs a square matrix");
    // Hungarian method with potentials on cost = -w, 1-based sentinel column 0.
    let cost = |i: usize, j: usize| -w[(i - 1, j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// Signed permutation of `Â`'s columns maximising `Σ_j |Â_{·π(j)}ᵀ A*_{·j}|`.
pub fn align_columns(a_hat: &DMatrix<f64>, a_true: &DMatrix<f64>) -> Result<Alignment> {
    if a_hat.shape() != a_true.shape() {
        return Err(Error::Dimension(format!(
            "estimate {:?} vs truth {:?}",
            a_hat.shape(),
            a_true.shape()
        )));
    }
    for m in [a_hat, a_true] {
        if let Some(j) = m.column_iter().position(|c| c.norm() == 0.0) {
            return Err(Error::ZeroColumn(j));
        }
    }
    // inner[(j, k)] = A*_jᵀ Â_k
    let inner = a_true.tr_mul(a_hat);
    let assign = max_weight_assignment(&inner.abs());
    let signs = assign
        .iter()
        .enumerate()
        .map(|(j, &k)| if inner[(j, k)] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    Ok(Alignment {
        perm: assign,
        signs,
    })
}

/// Mean over rows of `‖ẑ − z*‖² / ‖z*‖²` after aligning `Ẑ`'s columns.
pub fn rel_mse(z_hat: &DMatrix<f64>, z_true: &DMatrix<f64>, alignment: &Alignment) -> Result<f64> {
    let aligned = alignment.apply(z_hat);
    if aligned.shape() != z_true.shape() || z_hat.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "estimate {:?} vs truth {:?}",
            z_hat.shape(),
            z_true.shape()
        )));
    }
    let mut total = 0.0;
    for i in 0..z_true.nrows() {
        let denom = z_true.row(i).norm_squared();
        if denom == 0.0 {
            return Err(Error::ZeroNormRow(i));
        }
        total += (aligned.row(i) - z_true.row(i)).norm_squared() / denom;
    }
    Ok(total / z_true.nrows() as f64)
}

/// `Σ_ij (Â^aligned − A*)²`.
pub fn frobenius_error(a_hat: &DMatrix<f64>, a_true: &DMatrix<f64>, alignment: &Alignment) -> Result<f64> {
    let aligned = alignment.apply(a_hat);
    if aligned.shape() != a_true.shape() {
        return Err(Error::Dimension("aligned estimate and truth differ in shape".into()));
    }
    Ok((aligned - a_true).norm_squared())
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: usize,
    pub seed: u64,
    pub method: String,
    /// `all` or a 1-based domain index.
    pub environment: String,
    pub metric: String,
    pub value: f64,
}

pub const REL_MSE: &str = "rel_mse";
pub const FROBENIUS: &str = "frobenius";
pub const ALL_ENVIRONMENTS: &str = "all";

/// RelMSE over all samples (rows pooled), per domain, and the Frobenius error.
pub fn evaluate(
    z_hat: &[DMatrix<f64>],
    a_hat: &DMatrix<f64>,
    z_true: &[DMatrix<f64>],
    a_true: &DMatrix<f64>,
    run_id: usize,
    seed: u64,
    method: &str,
) -> Result<Vec<MetricRecord>> {
    if z_hat.len() != z_true.len() {
        return Err(Error::Dimension(format!(
            "{} estimated domains, {} true",
            z_hat.len(),
            z_true.len()
        )));
    }
    let alignment = align_columns(a_hat, a_true)?;
    let record = |environment: String, metric: &str, value: f64| MetricRecord {
        run_id,
        seed,
        method: method.to_string(),
        environment,
        metric: metric.to_string(),
        value,
    };
    let mut out = Vec::new();
    let mut weighted = 0.0;
    let mut rows = 0;
    let mut per_env = Vec::new();
    for (e, (zh, zt)) in z_hat.iter().zip(z_true).enumerate() {
        let r = rel_mse(zh, zt, &alignment)?;
        weighted += r * zt.nrows() as f64;
        rows += zt.nrows();
        per_env.push(record((e + 1).to_string(), REL_MSE, r));
    }
    out.push(record(ALL_ENVIRONMENTS.into(), REL_MSE, weighted / rows as f64));
    out.extend(per_env);
    out.push(record(
        ALL_ENVIRONMENTS.into(),
        FROBENIUS,
        frobenius_error(a_hat, a_true, &alignment)?,
    ));
    Ok(out)
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub method: String,
    pub environment: String,
    pub metric: String,
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

/// Median and interquartile range per (method, environment, metric), sorted by key.
pub fn summarize(records: &[MetricRecord]) -> Result<Vec<SummaryRecord>> {
    if records.is_empty() {
        return Err(Error::Empty("no metric records to summarize".into()));
    }
    let mut groups: BTreeMap<(&str, &str, &str), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((&r.method, &r.environment, &r.metric))
            .or_default()
            .push(r.value);
    }
    Ok(groups
        .into_iter()
        .map(|((method, environment, metric), mut values)| {
            values.sort_by(f64::total_cmp);
            let q1 = quantile_sorted(&values, 0.25);
            let q3 = quantile_sorted(&values, 0.75);
            SummaryRecord {
                method: method.into(),
                environment: environment.into(),
                metric: metric.into(),
                n: values.len(),
                median: quantile_sorted(&values, 0.5),
                q1,
                q3,
                iqr: q3 - q1,
            }
        })
        .collect())
}
