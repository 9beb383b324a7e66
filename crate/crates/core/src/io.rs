//! On-disk formats for datasets, fit results, metrics and run manifests.
//!
//! Dataset directory:
//! `meta.json`, `domain_{e}.csv` (header `x1..x{d_X}`), and when the truth is
//! known `true_Z_{e}.csv` (header `z1..z{d_Z}`) and `true_A.csv`.
//!
//! Result directory: `estimate.json`, `zhat_{e}.csv` and `trace.csv`.
//! Domains are numbered from 1. Numbers are written in Rust's shortest
//! round-trip decimal form, so a write/read cycle is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::{EmResult, MeasurementEstimate, TraceEntry};
use crate::error::{Error, Result};
use crate::graph::Dag;
use crate::metrics::{MetricRecord, SummaryRecord};
use crate::scm::{Dataset, Domain, DomainSpec};

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn matrix_to_csv(m: &DMatrix<f64>, prefix: &str) -> String {
    let mut out = String::with_capacity(m.nrows() * m.ncols() * 20);
    let header: Vec<String> = (1..=m.ncols()).map(|j| format!("{prefix}{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{}", m[(i, j)]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, prefix: &str) -> Result<()> {
    write_text(path, &matrix_to_csv(m, prefix))
}

/// Reads a numeric CSV with one header line.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(path, "empty file"))?;
    let ncols = header.split(',').count();
    let mut data = Vec::new();
    let mut nrows = 0;
    for (k, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::parse(path, format!("line {}: '{field}' is not a number", k + 2))
            })?;
            data.push(v);
            count += 1;
        }
        if count != ncols {
            return Err(Error::parse(
                path,
                format!("line {}: {count} fields, header has {ncols}", k + 2),
            ));
        }
        nrows += 1;
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &data))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], path: &Path) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::parse(path, "ragged matrix"));
    }
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &rows.concat()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DomainMeta {
    targets: Vec<usize>,
    n: usize,
    weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    d_z: usize,
    d_x: usize,
    edges: Vec<[usize; 2]>,
    domains: Vec<DomainMeta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    true_sigma2: Option<f64>,
    has_truth: bool,
}

/// Writes a dataset directory and returns the files written.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let meta = DatasetMeta {
        d_z: ds.d_z(),
        d_x: ds.d_x(),
        edges: ds.dag.edges_one_based(),
        domains: ds
            .domains
            .iter()
            .map(|d| DomainMeta {
                targets: d.spec.targets_one_based(),
                n: d.spec.n_samples,
                weight: d.spec.weight,
            })
            .collect(),
        seed: ds.seed,
        true_sigma2: ds.true_sigma2,
        has_truth: ds.has_truth(),
    };
    let mut files = Vec::new();
    let path = dir.join("meta.json");
    write_text(&path, &serde_json::to_string_pretty(&meta).expect("meta serializes"))?;
    files.push(path);
    for (e, d) in ds.domains.iter().enumerate() {
        let path = dir.join(format!("domain_{}.csv", e + 1));
        write_matrix(&path, &d.x, "x")?;
        files.push(path);
    }
    if let Some(zs) = &ds.true_z {
        for (e, z) in zs.iter().enumerate() {
            let path = dir.join(format!("true_Z_{}.csv", e + 1));
            write_matrix(&path, z, "z")?;
            files.push(path);
        }
    }
    if let Some(a) = &ds.true_a {
        let path = dir.join("true_A.csv");
        write_matrix(&path, a, "z")?;
        files.push(path);
    }
    Ok(files)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_str(&read_text(&meta_path)?)
        .map_err(|e| Error::parse(&meta_path, e.to_string()))?;
    let dag = Dag::from_one_based(meta.d_z, &meta.edges)?;
    let mut domains = Vec::with_capacity(meta.domains.len());
    for (e, dm) in meta.domains.iter().enumerate() {
        let x = read_matrix(&dir.join(format!("domain_{}.csv", e + 1)))?;
        let mut targets = vec![false; meta.d_z];
        for &t in &dm.targets {
            if t == 0 || t > meta.d_z {
                return Err(Error::parse(&meta_path, format!("domain {}: bad target {t}", e + 1)));
            }
            targets[t - 1] = true;
        }
        domains.push(Domain {
            spec: DomainSpec {
                targets,
                n_samples: dm.n,
                weight: dm.weight,
            },
            x,
        });
    }
    let mut ds = Dataset::new(dag, domains)?;
    if ds.d_x() != meta.d_x {
        return Err(Error::Dimension(format!(
            "meta.json says d_x = {}, data has {}",
            meta.d_x,
            ds.d_x()
        )));
    }
    ds.seed = meta.seed;
    ds.true_sigma2 = meta.true_sigma2;
    if meta.has_truth {
        let zs = (1..=ds.domains.len())
            .map(|e| read_matrix(&dir.join(format!("true_Z_{e}.csv"))))
            .collect::<Result<Vec<_>>>()?;
        ds.true_z = Some(zs);
        ds.true_a = Some(read_matrix(&dir.join("true_A.csv"))?);
    }
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EstimateJson {
    method: String,
    #[serde(rename = "O")]
    o: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    d: Vec<f64>,
    sigma2: f64,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    trace: Vec<TraceEntry>,
}

/// A fit result read back from disk.
#[derive(Debug, Clone)]
pub struct StoredResult {
    pub method: String,
    pub estimate: MeasurementEstimate,
    pub trace: Vec<TraceEntry>,
    pub z_hat: Vec<DMatrix<f64>>,
}

pub fn trace_to_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("iteration,sigma2,m_objective,score_loss,eta\n");
    for t in trace {
        writeln!(
            out,
            "{},{},{},{},{}",
            t.iteration, t.sigma2, t.m_objective, t.score_loss, t.eta
        )
        .unwrap();
    }
    out
}

pub fn write_result(dir: &Path, method: &str, result: &EmResult) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let est = &result.estimate;
    let json = EstimateJson {
        method: method.to_string(),
        o: rows_of(&est.o),
        d: est.d.iter().copied().collect(),
        sigma2: est.sigma2,
        a: rows_of(&est.a()),
        trace: result.trace.clone(),
    };
    let mut files = Vec::new();
    let path = dir.join("estimate.json");
    write_text(&path, &serde_json::to_string_pretty(&json).expect("estimate serializes"))?;
    files.push(path);
    for (e, z) in result.z_hat.iter().enumerate() {
        let path = dir.join(format!("zhat_{}.csv", e + 1));
        write_matrix(&path, z, "z")?;
        files.push(path);
    }
    let path = dir.join("trace.csv");
    write_text(&path, &trace_to_csv(&result.trace))?;
    files.push(path);
    if let Some(model) = &result.score {
        let path = dir.join("score_model.json");
        write_text(&path, &model.to_json())?;
        files.push(path);
    }
    Ok(files)
}

pub fn read_result(dir: &Path) -> Result<StoredResult> {
    let path = dir.join("estimate.json");
    let json: EstimateJson =
        serde_json::from_str(&read_text(&path)?).map_err(|e| Error::parse(&path, e.to_string()))?;
    let o = from_rows(&json.o, &path)?;
    let d = DVector::from_vec(json.d);
    if d.len() != o.ncols() {
        return Err(Error::parse(&path, "O and D disagree on d_Z"));
    }
    let mut z_hat = Vec::new();
    for e in 1.. {
        let p = dir.join(format!("zhat_{e}.csv"));
        if !p.exists() {
            break;
        }
        z_hat.push(read_matrix(&p)?);
    }
    Ok(StoredResult {
        method: json.method,
        estimate: MeasurementEstimate {
            o,
            d,
            sigma2: json.sigma2,
        },
        trace: json.trace,
        z_hat,
    })
}

pub const METRICS_HEADER: &str = "run_id,seed,method,environment,metric,value";
pub const SUMMARY_HEADER: &str = "method,environment,metric,n,median,q1,q3,iqr";

pub fn metrics_to_csv(records: &[MetricRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.run_id, r.seed, r.method, r.environment, r.metric, r.value
        )
        .unwrap();
    }
    out
}

pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        Some(h) => {
            return Err(Error::parse(
                path,
                format!("header '{h}' does not match '{METRICS_HEADER}'"),
            ))
        }
        None => return Err(Error::parse(path, "empty metrics file")),
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| Error::parse(path, format!("line {}: {what}", k + 2));
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        out.push(MetricRecord {
            run_id: f[0].parse().map_err(|_| bad("run_id"))?,
            seed: f[1].parse().map_err(|_| bad("seed"))?,
            method: f[2].to_string(),
            environment: f[3].to_string(),
            metric: f[4].to_string(),
            value: f[5].parse().map_err(|_| bad("value"))?,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{}: no metric rows", path.display())));
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    parse_metrics_csv(&read_text(path)?, path)
}

pub fn summary_to_csv(records: &[SummaryRecord]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method, r.environment, r.metric, r.n, r.median, r.q1, r.q3, r.iqr
        )
        .unwrap();
    }
    out
}

/// Record of one CLI invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub methods: Vec<String>,
    pub outputs: Vec<String>,
    pub elapsed_seconds: f64,
}

impl RunManifest {
    /// Writes `manifest.json` into `dir`, listing outputs relative to `dir`.
    pub fn write(&mut self, dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        self.outputs = files
            .iter()
            .chain(std::iter::once(&path))
            .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
            .collect();
        write_text(&path, &serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        Ok(path)
    }
}
