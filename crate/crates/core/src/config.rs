//! JSON configuration shared by `generate`, `fit` and `benchmark`.
//!
//! Top-level fields describe the synthetic benchmark; the optional `em` and
//! `sweep` sections configure fitting and the d_Z / N_e sweeps. Node indices
//! are 1-based throughout the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dag, GraphVariant};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    /// 1-based intervened nodes; empty for an observational domain.
    #[serde(default)]
    pub targets: Vec<usize>,
    pub n: usize,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub d_z: usize,
    pub d_x: usize,
    pub edges: Vec<[usize; 2]>,
    pub kappa: f64,
    /// Standard deviation of the additive mechanism noise.
    pub sigma_z: f64,
    pub weight_range: [f64; 2],
    pub intervention: InterventionConfig,
    pub sigma_x2: f64,
    pub domains: Vec<DomainConfig>,
    #[serde(default)]
    pub seed: u64,
}

impl BenchmarkConfig {
    /// Chain over four nodes, `d_X = 100`, one 2000-sample domain per
    /// single-node intervention.
    pub fn full_scale() -> Self {
        Self {
            d_z: 4,
            d_x: 100,
            edges: vec![[1, 2], [2, 3], [3, 4]],
            kappa: 3.0,
            sigma_z: 2.0,
            weight_range: [-1.0, 1.0],
            intervention: InterventionConfig {
                mean: 10.0,
                std: 1.0,
            },
            sigma_x2: 2.0,
            domains: (1..=4)
                .map(|j| DomainConfig {
                    targets: vec![j],
                    n: 2000,
                    weight: 1.0,
                })
                .collect(),
            seed: 0,
        }
    }

    /// Chain over `d_z` nodes with one single-node-intervention domain per node.
    pub fn single_node_chain(&self, d_z: usize, n: usize) -> Self {
        Self {
            d_z,
            edges: (1..d_z).map(|j| [j, j + 1]).collect(),
            domains: (1..=d_z)
                .map(|j| DomainConfig {
                    targets: vec![j],
                    n,
                    weight: 1.0,
                })
                .collect(),
            ..self.clone()
        }
    }

    pub fn with_samples_per_domain(&self, n: usize) -> Self {
        let mut out = self.clone();
        for d in &mut out.domains {
            d.n = n;
        }
        out
    }

    pub fn dag(&self) -> Result<Dag> {
        Dag::from_one_based(self.d_z, &self.edges)
    }

    pub fn validate(&self) -> Result<()> {
        self.dag()?;
        if self.d_x < self.d_z {
            return Err(Error::Config(format!(
                "d_x ({}) must be at least d_z ({})",
                self.d_x, self.d_z
            )));
        }
        let [lo, hi] = self.weight_range;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("invalid weight_range [{lo}, {hi}]")));
        }
        if !(self.sigma_z > 0.0) || !self.sigma_z.is_finite() {
            return Err(Error::Config("sigma_z must be positive".into()));
        }
        if !self.kappa.is_finite() {
            return Err(Error::Config("kappa must be finite".into()));
        }
        if !(self.intervention.std > 0.0) || !self.intervention.mean.is_finite() {
            return Err(Error::Config(
                "intervention needs a finite mean and a positive std".into(),
            ));
        }
        if !(self.sigma_x2 >= 0.0) || !self.sigma_x2.is_finite() {
            return Err(Error::Config("sigma_x2 must be non-negative".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        for (e, d) in self.domains.iter().enumerate() {
            if d.n == 0 {
                return Err(Error::Config(format!("domain {}: n must be >= 1", e + 1)));
            }
            if !(d.weight >= 0.0) || !d.weight.is_finite() {
                return Err(Error::Config(format!(
                    "domain {}: weight must be non-negative",
                    e + 1
                )));
            }
            if let Some(&t) = d.targets.iter().find(|&&t| t == 0 || t > self.d_z) {
                return Err(Error::Config(format!(
                    "domain {}: target {t} outside 1..={}",
                    e + 1,
                    self.d_z
                )));
            }
        }
        Ok(())
    }
}

/// How the score-matching loss weights each domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightPolicy {
    /// Use each domain's configured `weight` (default 1).
    #[default]
    Domain,
    Uniform,
    /// Proportional to the domain's sample count.
    SampleSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    #[default]
    TrueDag,
    Empty,
    Complete,
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    #[default]
    Pca,
    /// Start from the dataset's true mixing matrix and noise variance.
    Truth,
}

/// The `em` section of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmSection {
    pub iterations: usize,
    pub eta: f64,
    pub lambda: f64,
    pub knots: usize,
    pub knot_range: [f64; 2],
    pub graph_variant: VariantKind,
    /// 1-based causal order for the complete graph; defaults to the true graph's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complete_order: Option<Vec<usize>>,
    pub clamp_z2_eps: f64,
    pub sigma2_floor: f64,
    pub init: InitKind,
    pub oracle: bool,
    pub early_stop: bool,
    pub weights: WeightPolicy,
    pub feature_cap: usize,
}

impl Default for EmSection {
    fn default() -> Self {
        Self {
            iterations: 1000,
            eta: 1.0,
            lambda: crate::score::DEFAULT_LAMBDA,
            knots: 8,
            knot_range: [-15.0, 15.0],
            graph_variant: VariantKind::TrueDag,
            complete_order: None,
            clamp_z2_eps: 1e-6,
            sigma2_floor: 1e-8,
            init: InitKind::Pca,
            oracle: false,
            early_stop: false,
            weights: WeightPolicy::Domain,
            feature_cap: crate::splines::DEFAULT_FEATURE_CAP,
        }
    }
}

impl EmSection {
    pub fn graph_variant(&self) -> Result<GraphVariant> {
        Ok(match self.graph_variant {
            VariantKind::TrueDag => GraphVariant::TrueDag,
            VariantKind::Empty => GraphVariant::Empty,
            VariantKind::Pooled => GraphVariant::Pooled,
            VariantKind::Complete => {
                let order = self.complete_order.clone().unwrap_or_default();
                if order.contains(&0) {
                    return Err(Error::Config("complete_order is 1-based".into()));
                }
                GraphVariant::CompleteFromOrder(order.iter().map(|k| k - 1).collect())
            }
        })
    }
}

/// Optional sweeps run by `benchmark` for the true-DAG method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SweepSection {
    /// Samples per domain.
    pub n_e: Vec<usize>,
    /// Chain lengths; each uses one single-node-intervention domain per node.
    pub d_z: Vec<usize>,
    /// Runs per sweep point; defaults to the benchmark's run count.
    pub runs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(flatten)]
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub em: EmSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ConfigFile = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.benchmark.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
