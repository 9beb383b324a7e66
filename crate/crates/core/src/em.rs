//! EM with f-modeling: project, fit the causal score, Tweedie E-step, closed-form M-step.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EmSection, InitKind, WeightPolicy};
use crate::error::{Error, Result};
use crate::graph::{Dag, GraphVariant};
use crate::numeric::{pca, polar_factor};
use crate::scm::Dataset;
use crate::score::{fit_score, BasisConfig, ScoreData, ScoreModel};

/// `A = O diag(D)` with orthonormal `O`, plus the measurement noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementEstimate {
    pub o: DMatrix<f64>,
    pub d: DVector<f64>,
    pub sigma2: f64,
}

impl MeasurementEstimate {
    pub fn a(&self) -> DMatrix<f64> {
        let mut a = self.o.clone();
        for (j, mut col) in a.column_iter_mut().enumerate() {
            col *= self.d[j];
        }
        a
    }

    /// Splits a mixing matrix into unit columns and their norms.
    pub fn from_mixing(a: &DMatrix<f64>, sigma2: f64) -> Result<Self> {
        let d = DVector::from_iterator(a.ncols(), a.column_iter().map(|c| c.norm()));
        if let Some(j) = d.iter().position(|&v| v == 0.0) {
            return Err(Error::ZeroColumn(j));
        }
        let mut o = a.clone();
        for (j, mut col) in o.column_iter_mut().enumerate() {
            col /= d[j];
        }
        Ok(Self { o, d, sigma2 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmInit {
    /// Top principal directions of the pooled, centered observations; `D = 1`
    /// and `σ²` the mean discarded eigenvalue.
    Pca,
    /// The dataset's ground truth.
    Truth,
    Provided(MeasurementEstimate),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub iterations: usize,
    pub eta: f64,
    pub lambda: f64,
    pub basis: BasisConfig,
    pub variant: GraphVariant,
    pub clamp_z2_eps: f64,
    pub sigma2_floor: f64,
    pub init: EmInit,
    /// Hold `(O, D, σ²)` at the initial estimate and run the E-step only.
    pub oracle: bool,
    pub early_stop: bool,
    pub weights: WeightPolicy,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self::from_section(&EmSection::default()).expect("default section is valid")
    }
}

impl EmConfig {
    pub fn from_section(s: &EmSection) -> Result<Self> {
        let cfg = Self {
            iterations: s.iterations,
            eta: s.eta,
            lambda: s.lambda,
            basis: BasisConfig {
                n_basis: s.knots,
                range: s.knot_range,
                feature_cap: s.feature_cap,
            },
            variant: s.graph_variant()?,
            clamp_z2_eps: s.clamp_z2_eps,
            sigma2_floor: s.sigma2_floor,
            init: match s.init {
                InitKind::Pca => EmInit::Pca,
                InitKind::Truth => EmInit::Truth,
            },
            oracle: s.oracle,
            early_stop: s.early_stop,
            weights: s.weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        let [lo, hi] = self.basis.range;
        if !(lo < hi) {
            return Err(Error::Config(format!("knot_range [{lo}, {hi}] is empty")));
        }
        if !(self.clamp_z2_eps >= 0.0) || !(self.sigma2_floor > 0.0) {
            return Err(Error::Config("clamp_z2_eps must be >= 0 and sigma2_floor > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub sigma2: f64,
    pub m_objective: f64,
    pub score_loss: f64,
    pub eta: f64,
}

#[derive(Debug, Clone)]
pub struct EmResult {
    /// Posterior means per domain, `N_e × d_Z`.
    pub z_hat: Vec<DMatrix<f64>>,
    /// Posterior second moments per domain.
    pub z2_hat: Vec<DMatrix<f64>>,
    pub estimate: MeasurementEstimate,
    pub trace: Vec<TraceEntry>,
    pub score: Option<ScoreModel>,
}

/// `Y = X O`.
pub fn project(o: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    x * o
}

fn check_d(d: &DVector<f64>) -> Result<()> {
    match d.iter().position(|&v| v == 0.0 || !v.is_finite()) {
        Some(j) => Err(Error::ZeroColumn(j)),
        None => Ok(()),
    }
}

/// `ẑ = D⁻¹ (y + η σ² ŝ(y, a))` row-wise. With `η = 0` the score is not evaluated.
pub fn tweedie_mean(
    y: &DMatrix<f64>,
    a: &[bool],
    model: &ScoreModel,
    d: &DVector<f64>,
    sigma2: f64,
    eta: f64,
) -> Result<DMatrix<f64>> {
    check_d(d)?;
    if eta == 0.0 {
        return Ok(scale_columns(y.clone(), d));
    }
    let (s, _) = model.eval_rows(y, a);
    Ok(scale_columns(y + s * (eta * sigma2), d))
}

/// `ẑ²_j = ẑ_j² + σ²/D_j² + σ⁴/D_j² ∂_j ŝ_j`, clamped below at `eps`.
pub fn tweedie_second_moment(
    z_hat: &DMatrix<f64>,
    y: &DMatrix<f64>,
    a: &[bool],
    model: &ScoreModel,
    d: &DVector<f64>,
    sigma2: f64,
    eps: f64,
) -> Result<DMatrix<f64>> {
    check_d(d)?;
    let (_, ds) = model.eval_rows(y, a);
    Ok(second_moment_from(z_hat, &ds, d, sigma2, eps))
}

fn scale_columns(mut m: DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col /= d[j];
    }
    m
}

fn second_moment_from(
    z_hat: &DMatrix<f64>,
    ds: &DMatrix<f64>,
    d: &DVector<f64>,
    sigma2: f64,
    eps: f64,
) -> DMatrix<f64> {
    DMatrix::from_fn(z_hat.nrows(), z_hat.ncols(), |i, j| {
        let dj2 = d[j] * d[j];
        let z = z_hat[(i, j)];
        (z * z + sigma2 / dj2 + sigma2 * sigma2 / dj2 * ds[(i, j)]).max(eps)
    })
}

/// Value of the `A`-likelihood part `Σ_j D_j² Q_j − 2 Σ_j D_j (OᵀM)_jj`,
/// where `M = Σ x ẑᵀ` and `Q_j = Σ ẑ²_j`.
pub fn m_objective(m: &DMatrix<f64>, q: &DVector<f64>, o: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    (0..d.len())
        .map(|j| d[j] * d[j] * q[j] - 2.0 * d[j] * o.column(j).dot(&m.column(j)))
        .sum()
}

/// Sufficient statistics `M = Σ_{e,i} x ẑᵀ` and `Q_j = Σ_{e,i} ẑ²_j`.
pub fn m_statistics(
    xs: &[&DMatrix<f64>],
    z_hat: &[DMatrix<f64>],
    z2_hat: &[DMatrix<f64>],
) -> (DMatrix<f64>, DVector<f64>) {
    let d_x = xs[0].ncols();
    let d_z = z_hat[0].ncols();
    let mut m = DMatrix::zeros(d_x, d_z);
    let mut q = DVector::zeros(d_z);
    for ((x, z), z2) in xs.iter().zip(z_hat).zip(z2_hat) {
        m += x.tr_mul(z);
        for j in 0..d_z {
            q[j] += z2.column(j).sum();
        }
    }
    (m, q)
}

/// Exact minimiser over orthonormal `O` and diagonal `D` of the `A`-likelihood.
///
/// Alternates `O ← polar(M diag(D))` and `D_j ← (OᵀM)_jj / Q_j`, starting from
/// `O = polar(M)`. Each half-step is an exact block minimisation. Columns keep
/// their order; signs are fixed so that `D ≥ 0`.
pub fn m_step_a(m: &DMatrix<f64>, q: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if let Some(j) = q.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::ZeroColumn(j));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("M-step statistics"));
    }
    let d_of = |o: &DMatrix<f64>| DVector::from_fn(q.len(), |j, _| o.column(j).dot(&m.column(j)) / q[j]);
    let mut o = polar_factor(m)?;
    let mut d = d_of(&o);
    let mut prev = m_objective(m, q, &o, &d);
    for _ in 0..200 {
        let mut md = m.clone();
        for (j, mut col) in md.column_iter_mut().enumerate() {
            col *= d[j];
        }
        let o_next = polar_factor(&md)?;
        let d_next = d_of(&o_next);
        let f = m_objective(m, q, &o_next, &d_next);
        if f > prev {
            break;
        }
        o = o_next;
        d = d_next;
        let done = (prev - f).abs() <= 1e-14 * f.abs();
        prev = f;
        if done {
            break;
        }
    }
    for j in 0..d.len() {
        if d[j] < 0.0 {
            d[j] = -d[j];
            o.column_mut(j).neg_mut();
        }
    }
    Ok((o, d))
}

/// `σ̂² = [Σ_j D_j² Q_j − 2 Σ_j D_j (OᵀM)_jj + Σ‖x‖²] / (d_X Σ_e N_e)`, floored.
pub fn m_step_sigma2(
    m: &DMatrix<f64>,
    q: &DVector<f64>,
    o: &DMatrix<f64>,
    d: &DVector<f64>,
    sum_sq_x: f64,
    n_entries: usize,
    floor: f64,
) -> f64 {
    let num = m_objective(m, q, o, d) + sum_sq_x;
    (num / n_entries as f64).max(floor)
}

/// Domain loss weights under `policy`.
pub fn domain_weights(dataset: &Dataset, policy: WeightPolicy) -> Vec<f64> {
    let m = dataset.domains.len() as f64;
    let n = dataset.n_total() as f64;
    dataset
        .domains
        .iter()
        .map(|d| match policy {
            WeightPolicy::Domain => d.spec.weight,
            WeightPolicy::Uniform => 1.0,
            WeightPolicy::SampleSize => d.x.nrows() as f64 * m / n,
        })
        .collect()
}

/// PCA initialisation on the pooled observations.
pub fn pca_estimate(dataset: &Dataset) -> Result<MeasurementEstimate> {
    let p = pca(&dataset.pooled_x(), dataset.d_z())?;
    let sigma2 = p.residual_variance().unwrap_or(1.0).max(1e-8);
    Ok(MeasurementEstimate {
        o: p.loadings,
        d: DVector::from_element(dataset.d_z(), 1.0),
        sigma2,
    })
}

/// Ground-truth `(O, D, σ²)` of a generated dataset.
pub fn truth_estimate(dataset: &Dataset) -> Result<MeasurementEstimate> {
    let a = dataset
        .true_a
        .as_ref()
        .ok_or_else(|| Error::MissingTruth("true mixing matrix".into()))?;
    let s2 = dataset
        .true_sigma2
        .ok_or_else(|| Error::MissingTruth("true noise variance".into()))?;
    MeasurementEstimate::from_mixing(a, s2)
}

fn nonfinite_at(what: &str, iteration: usize) -> Error {
    Error::NonFinite {
        what: what.into(),
        iteration: Some(iteration),
    }
}

/// Runs the EM loop for `config.iterations` iterations (or one E-step in oracle mode).
pub fn run_em(dataset: &Dataset, config: &EmConfig) -> Result<EmResult> {
    config.validate()?;
    dataset.validate()?;
    let d_z = dataset.d_z();
    let dag: Dag = dataset.dag.apply_variant(&config.variant)?;
    let targets: Vec<Vec<bool>> = dataset
        .domains
        .iter()
        .map(|d| match config.variant {
            GraphVariant::Pooled => vec![false; d_z],
            _ => d.spec.targets.clone(),
        })
        .collect();
    let weights = domain_weights(dataset, config.weights);
    let xs: Vec<&DMatrix<f64>> = dataset.domains.iter().map(|d| &d.x).collect();
    let sum_sq_x: f64 = xs.iter().map(|x| x.norm_squared()).sum();
    let n_entries = dataset.d_x() * dataset.n_total();

    let mut est = match &config.init {
        EmInit::Pca => pca_estimate(dataset)?,
        EmInit::Truth => truth_estimate(dataset)?,
        EmInit::Provided(e) => e.clone(),
    };
    if est.o.shape() != (dataset.d_x(), d_z) || est.d.len() != d_z {
        return Err(Error::Dimension(format!(
            "initial estimate has O of shape {:?}, data needs ({}, {d_z})",
            est.o.shape(),
            dataset.d_x()
        )));
    }

    let iterations = if config.oracle { 1 } else { config.iterations };
    let mut trace = Vec::with_capacity(iterations);
    let mut z_hat = Vec::new();
    let mut z2_hat = Vec::new();
    let mut model = None;
    for t in 1..=iterations {
        let ys: Vec<DMatrix<f64>> = xs.iter().map(|x| project(&est.o, x)).collect();
        if ys.iter().any(|y| y.iter().any(|v| !v.is_finite())) {
            return Err(nonfinite_at("projected observations", t));
        }
        let data = ScoreData {
            y: &ys,
            targets: &targets,
            weights: &weights,
        };
        let fitted = fit_score(&data, &dag, &config.basis, config.lambda).map_err(|e| match e {
            Error::NonFinite { what, .. } => nonfinite_at(&what, t),
            other => other,
        })?;
        let score_loss = fitted.empirical_loss(&data)?;

        check_d(&est.d)?;
        let moments: Vec<(DMatrix<f64>, DMatrix<f64>)> = ys
            .par_iter()
            .zip(targets.par_iter())
            .map(|(y, a)| {
                let (s, ds) = fitted.eval_rows(y, a);
                let z = if config.eta == 0.0 {
                    scale_columns(y.clone(), &est.d)
                } else {
                    scale_columns(y + s * (config.eta * est.sigma2), &est.d)
                };
                let z2 = second_moment_from(&z, &ds, &est.d, est.sigma2, config.clamp_z2_eps);
                (z, z2)
            })
            .collect();
        (z_hat, z2_hat) = moments.into_iter().unzip();
        if z_hat.iter().chain(&z2_hat).any(|z| z.iter().any(|v| !v.is_finite())) {
            return Err(nonfinite_at("posterior moments", t));
        }

        let (m, q) = m_statistics(&xs, &z_hat, &z2_hat);
        let (m_obj, sigma2) = if config.oracle {
            let f = m_objective(&m, &q, &est.o, &est.d);
            (f, est.sigma2)
        } else {
            let (o, d) = m_step_a(&m, &q).map_err(|e| match e {
                Error::NonFinite { what, .. } => nonfinite_at(&what, t),
                other => other,
            })?;
            let sigma2 = m_step_sigma2(&m, &q, &o, &d, sum_sq_x, n_entries, config.sigma2_floor);
            let f = m_objective(&m, &q, &o, &d);
            let prev = trace.last().cloned();
            est = MeasurementEstimate { o, d, sigma2 };
            if !sigma2.is_finite() || !f.is_finite() {
                return Err(nonfinite_at("M-step", t));
            }
            if config.early_stop {
                if let Some(p) = prev.as_ref() {
                    let p: &TraceEntry = p;
                    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
                    if rel(sigma2, p.sigma2) < 1e-8 && rel(f, p.m_objective) < 1e-8 {
                        trace.push(TraceEntry {
                            iteration: t,
                            sigma2,
                            m_objective: f,
                            score_loss,
                            eta: config.eta,
                        });
                        model = Some(fitted);
                        break;
                    }
                }
            }
            (f, sigma2)
        };
        trace.push(TraceEntry {
            iteration: t,
            sigma2,
            m_objective: m_obj,
            score_loss,
            eta: config.eta,
        });
        model = Some(fitted);
    }
    Ok(EmResult {
        z_hat,
        z2_hat,
        estimate: est,
        trace,
        score: model,
    })
}

/// Estimation methods compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    TrueDag,
    Empty,
    Complete,
    Pooled,
    NoShrinkage,
    Pca,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::TrueDag,
        Method::Empty,
        Method::Complete,
        Method::Pooled,
        Method::NoShrinkage,
        Method::Pca,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::TrueDag => "true-dag",
            Method::Empty => "empty",
            Method::Complete => "complete",
            Method::Pooled => "pooled",
            Method::NoShrinkage => "no-shrinkage",
            Method::Pca => "pca",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method '{s}' (expected one of {})",
                    Self::ALL.map(Method::label).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    Em(EmConfig),
    /// `Ẑ = Y D⁻¹` from the initial estimate, no EM.
    Pca { oracle: bool },
}

/// The estimator `method` derived from the base configuration.
pub fn make_baseline(base: &EmConfig, method: Method) -> Baseline {
    let mut cfg = base.clone();
    match method {
        Method::TrueDag => cfg.variant = GraphVariant::TrueDag,
        Method::Empty => cfg.variant = GraphVariant::Empty,
        Method::Complete => {
            if !matches!(cfg.variant, GraphVariant::CompleteFromOrder(_)) {
                cfg.variant = GraphVariant::CompleteFromOrder(Vec::new());
            }
        }
        Method::Pooled => cfg.variant = GraphVariant::Pooled,
        Method::NoShrinkage => {
            cfg.variant = GraphVariant::TrueDag;
            cfg.eta = 0.0;
        }
        Method::Pca => return Baseline::Pca { oracle: base.oracle },
    }
    Baseline::Em(cfg)
}

/// Runs `method` on `dataset`.
pub fn fit_method(dataset: &Dataset, base: &EmConfig, method: Method) -> Result<EmResult> {
    match make_baseline(base, method) {
        Baseline::Em(cfg) => run_em(dataset, &cfg),
        Baseline::Pca { oracle } => {
            let est = if oracle {
                truth_estimate(dataset)?
            } else {
                pca_estimate(dataset)?
            };
            check_d(&est.d)?;
            let z_hat: Vec<DMatrix<f64>> = dataset
                .domains
                .iter()
                .map(|d| scale_columns(project(&est.o, &d.x), &est.d))
                .collect();
            let z2_hat = z_hat
                .iter()
                .map(|z| {
                    let mut z2 = z.map(|v| v * v);
                    for (j, mut col) in z2.column_iter_mut().enumerate() {
                        col.add_scalar_mut(est.sigma2 / (est.d[j] * est.d[j]));
                    }
                    z2
                })
                .collect();
            Ok(EmResult {
                z_hat,
                z2_hat,
                estimate: est,
                trace: Vec::new(),
                score: None,
            })
        }
    }
}
