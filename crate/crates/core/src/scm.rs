//! Interventional SCM simulation and the synthetic benchmark generator.
//!
//! Mechanisms are additive: `z_j = Σ_k w_jk g(z_k) + u_j` with
//! `g(z) = tanh(κz) + (κz)³` and `u_j ~ N(0, σ_z²)`. A perfect intervention on
//! `j` replaces the mechanism with a draw from `N(shift_mean, shift_std²)`.
//!
//! Randomness for node `j` comes from its own stream `seed.child(j)`, consumed in
//! sample order. The output therefore does not depend on which valid
//! topological order is used, and nodes upstream of every intervention see
//! exactly the values of the observational run with the same seed.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::config::BenchmarkConfig;
use crate::error::{Error, Result};
use crate::graph::Dag;
use crate::rng::SeedTree;

#[derive(Debug, Clone, PartialEq)]
pub struct Mechanism {
    /// `(parent, w_jk)` sorted by parent.
    pub weights: Vec<(usize, f64)>,
    pub kappa: f64,
    pub noise_std: f64,
}

impl Mechanism {
    fn mean_given(&self, row: &[f64]) -> f64 {
        self.weights
            .iter()
            .map(|&(k, w)| w * nonlinearity(row[k], self.kappa))
            .sum()
    }
}

/// `tanh(κz) + (κz)³`.
pub fn nonlinearity(z: f64, kappa: f64) -> f64 {
    let t = kappa * z;
    t.tanh() + t * t * t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterventionSpec {
    pub shift_mean: f64,
    pub shift_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScmSpec {
    dag: Dag,
    mechanisms: Vec<Mechanism>,
    intervention: InterventionSpec,
}

impl ScmSpec {
    pub fn new(dag: Dag, mechanisms: Vec<Mechanism>, intervention: InterventionSpec) -> Result<Self> {
        if mechanisms.len() != dag.n_nodes() {
            return Err(Error::Dimension(format!(
                "{} mechanisms for {} nodes",
                mechanisms.len(),
                dag.n_nodes()
            )));
        }
        for (j, m) in mechanisms.iter().enumerate() {
            let keys: Vec<usize> = m.weights.iter().map(|&(k, _)| k).collect();
            if keys != dag.parents(j) {
                return Err(Error::Config(format!(
                    "mechanism of node {} is keyed by {:?}, parents are {:?}",
                    j + 1,
                    keys,
                    dag.parents(j)
                )));
            }
            if !(m.noise_std > 0.0) || !m.noise_std.is_finite() {
                return Err(Error::Config(format!(
                    "node {}: noise_std must be positive",
                    j + 1
                )));
            }
        }
        if !(intervention.shift_std > 0.0) {
            return Err(Error::Config("intervention shift_std must be positive".into()));
        }
        Ok(Self {
            dag,
            mechanisms,
            intervention,
        })
    }

    /// Draws `w_jk ~ Unif[lo, hi]` for every edge, visiting nodes and parents in index order.
    pub fn random(
        dag: Dag,
        kappa: f64,
        noise_std: f64,
        weight_range: [f64; 2],
        intervention: InterventionSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let [lo, hi] = weight_range;
        let mechanisms = (0..dag.n_nodes())
            .map(|j| Mechanism {
                weights: dag
                    .parents(j)
                    .iter()
                    .map(|&k| (k, lo + (hi - lo) * rng.random::<f64>()))
                    .collect(),
                kappa,
                noise_std,
            })
            .collect();
        Self::new(dag, mechanisms, intervention)
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn mechanisms(&self) -> &[Mechanism] {
        &self.mechanisms
    }

    pub fn intervention(&self) -> InterventionSpec {
        self.intervention
    }

    pub fn n_nodes(&self) -> usize {
        self.dag.n_nodes()
    }
}

/// `n` i.i.d. latent draws (rows) under intervention targets `a`.
pub fn sample_scm(spec: &ScmSpec, a: &[bool], n: usize, seed: SeedTree) -> Result<DMatrix<f64>> {
    sample_scm_in_order(spec, a, n, seed, spec.dag.topo_order())
}

/// Like [`sample_scm`] with an explicit topological order.
pub fn sample_scm_in_order(
    spec: &ScmSpec,
    a: &[bool],
    n: usize,
    seed: SeedTree,
    order: &[usize],
) -> Result<DMatrix<f64>> {
    let d = spec.n_nodes();
    if a.len() != d {
        return Err(Error::Dimension(format!(
            "target vector has length {}, graph has {d} nodes",
            a.len()
        )));
    }
    if !spec.dag.is_valid_order(order) {
        return Err(Error::InvalidOrder(format!("{order:?}")));
    }
    let shift = Normal::new(spec.intervention.shift_mean, spec.intervention.shift_std)
        .map_err(|e| Error::Config(e.to_string()))?;

    // Row-major scratch so each row's parents are contiguous.
    let mut z = vec![0.0; n * d];
    for &j in order {
        let mut rng = seed.child(j as u64).rng();
        if a[j] {
            for i in 0..n {
                z[i * d + j] = shift.sample(&mut rng);
            }
        } else {
            let mech = &spec.mechanisms[j];
            for i in 0..n {
                let u: f64 = StandardNormal.sample(&mut rng);
                let row = &z[i * d..(i + 1) * d];
                z[i * d + j] = mech.mean_given(row) + mech.noise_std * u;
            }
        }
    }
    Ok(DMatrix::from_row_slice(n, d, &z))
}

/// Random `d_x × d_z` matrix with orthonormal columns: the Q factor of a
/// standard-normal matrix, with signs fixed so that `diag(R) > 0`.
pub fn sample_orthonormal_mixing(d_x: usize, d_z: usize, seed: SeedTree) -> Result<DMatrix<f64>> {
    if d_x < d_z || d_z == 0 {
        return Err(Error::Dimension(format!(
            "cannot draw {d_z} orthonormal columns in dimension {d_x}"
        )));
    }
    let mut rng = seed.rng();
    let g = DMatrix::from_fn(d_x, d_z, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    Ok(q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    /// Intervention targets `a_e`.
    pub targets: Vec<bool>,
    pub n_samples: usize,
    pub weight: f64,
}

impl DomainSpec {
    pub fn observational(d_z: usize, n_samples: usize) -> Self {
        Self {
            targets: vec![false; d_z],
            n_samples,
            weight: 1.0,
        }
    }

    /// 1-based indices of intervened nodes.
    pub fn targets_one_based(&self) -> Vec<usize> {
        self.targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(j, _)| j + 1)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub spec: DomainSpec,
    /// `N_e × d_X` observations.
    pub x: DMatrix<f64>,
}

/// Multi-domain observations, optionally with the ground truth that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dag: Dag,
    pub domains: Vec<Domain>,
    pub true_z: Option<Vec<DMatrix<f64>>>,
    pub true_a: Option<DMatrix<f64>>,
    pub true_sigma2: Option<f64>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(dag: Dag, domains: Vec<Domain>) -> Result<Self> {
        let ds = Self {
            dag,
            domains,
            true_z: None,
            true_a: None,
            true_sigma2: None,
            seed: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .domains
            .first()
            .ok_or_else(|| Error::Empty("dataset has no domains".into()))?;
        let d_x = first.x.ncols();
        let d_z = self.dag.n_nodes();
        for (e, d) in self.domains.iter().enumerate() {
            if d.x.ncols() != d_x {
                return Err(Error::Dimension(format!(
                    "domain {} has {} columns, expected {d_x}",
                    e + 1,
                    d.x.ncols()
                )));
            }
            if d.x.nrows() != d.spec.n_samples || d.spec.n_samples == 0 {
                return Err(Error::Dimension(format!(
                    "domain {} has {} rows, expected {}",
                    e + 1,
                    d.x.nrows(),
                    d.spec.n_samples
                )));
            }
            if d.spec.targets.len() != d_z {
                return Err(Error::Dimension(format!(
                    "domain {} target vector has length {}, graph has {d_z} nodes",
                    e + 1,
                    d.spec.targets.len()
                )));
            }
        }
        if let Some(zs) = &self.true_z {
            if zs.len() != self.domains.len() {
                return Err(Error::Dimension("one true latent matrix per domain".into()));
            }
            for (e, (z, d)) in zs.iter().zip(&self.domains).enumerate() {
                if z.shape() != (d.x.nrows(), d_z) {
                    return Err(Error::Dimension(format!(
                        "true latents of domain {} have shape {:?}",
                        e + 1,
                        z.shape()
                    )));
                }
            }
        }
        if let Some(a) = &self.true_a {
            if a.shape() != (d_x, d_z) {
                return Err(Error::Dimension(format!(
                    "true mixing matrix has shape {:?}, expected ({d_x}, {d_z})",
                    a.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn d_x(&self) -> usize {
        self.domains[0].x.ncols()
    }

    pub fn d_z(&self) -> usize {
        self.dag.n_nodes()
    }

    pub fn n_total(&self) -> usize {
        self.domains.iter().map(|d| d.x.nrows()).sum()
    }

    /// All domains stacked in order.
    pub fn pooled_x(&self) -> DMatrix<f64> {
        stack_rows(self.domains.iter().map(|d| &d.x), self.d_x())
    }

    pub fn has_truth(&self) -> bool {
        self.true_z.is_some() && self.true_a.is_some()
    }
}

pub(crate) fn stack_rows<'a>(
    blocks: impl Iterator<Item = &'a DMatrix<f64>> + Clone,
    ncols: usize,
) -> DMatrix<f64> {
    let rows: usize = blocks.clone().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, ncols);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    out
}

/// Draws mechanism weights, the mixing matrix and every domain's latents and
/// observations `X = Z Aᵀ + ε`, `ε ~ N(0, σ² I)`.
pub fn generate_benchmark(config: &BenchmarkConfig, seed: SeedTree) -> Result<Dataset> {
    config.validate()?;
    let dag = config.dag()?;
    let scm = ScmSpec::random(
        dag.clone(),
        config.kappa,
        config.sigma_z,
        config.weight_range,
        InterventionSpec {
            shift_mean: config.intervention.mean,
            shift_std: config.intervention.std,
        },
        &mut seed.named("weights").rng(),
    )?;
    let a_true = sample_orthonormal_mixing(config.d_x, config.d_z, seed.named("mixing"))?;
    let noise_scale = config.sigma_x2.sqrt();

    let specs: Vec<DomainSpec> = config
        .domains
        .iter()
        .map(|d| {
            let mut targets = vec![false; config.d_z];
            for &t in &d.targets {
                targets[t - 1] = true;
            }
            DomainSpec {
                targets,
                n_samples: d.n,
                weight: d.weight,
            }
        })
        .collect();

    let sampled: Vec<(DMatrix<f64>, DMatrix<f64>)> = specs
        .par_iter()
        .enumerate()
        .map(|(e, spec)| {
            let z = sample_scm(
                &scm,
                &spec.targets,
                spec.n_samples,
                seed.named("latents").child(e as u64),
            )?;
            let mut rng = seed.named("measurement").child(e as u64).rng();
            let mut x = &z * a_true.transpose();
            // Row-major noise order.
            for i in 0..x.nrows() {
                for c in 0..x.ncols() {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    x[(i, c)] += noise_scale * eps;
                }
            }
            Ok((z, x))
        })
        .collect::<Result<_>>()?;

    let (true_z, domains): (Vec<_>, Vec<_>) = sampled
        .into_iter()
        .zip(specs)
        .map(|((z, x), spec)| (z, Domain { spec, x }))
        .unzip();
    let mut ds = Dataset::new(dag, domains)?;
    ds.true_z = Some(true_z);
    ds.true_a = Some(a_true);
    ds.true_sigma2 = Some(config.sigma_x2);
    ds.seed = Some(seed.key());
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::orthonormality_error;

    fn column_stats(z: &DMatrix<f64>, j: usize) -> (f64, f64) {
        let n = z.nrows() as f64;
        let mean = z.column(j).sum() / n;
        let var = z.column(j).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    }

    fn chain_spec(n: usize, weight: f64, noise_std: f64) -> ScmSpec {
        let dag = Dag::chain(n).unwrap();
        let mechanisms = (0..n)
            .map(|j| Mechanism {
                weights: dag.parents(j).iter().map(|&k| (k, weight)).collect(),
                kappa: 3.0,
                noise_std,
            })
            .collect();
        ScmSpec::new(
            dag,
            mechanisms,
            InterventionSpec {
                shift_mean: 10.0,
                shift_std: 1.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn full_intervention_matches_shift_distribution() {
        let spec = chain_spec(4, 0.7, 2.0);
        let z = sample_scm(&spec, &[true; 4], 10_000, SeedTree::new(1)).unwrap();
        for j in 0..4 {
            let (m, s) = column_stats(&z, j);
            assert!((m - 10.0).abs() < 0.05, "node {j}: mean {m}");
            assert!((s - 1.0).abs() < 0.05, "node {j}: std {s}");
        }
    }

    #[test]
    fn empty_graph_is_pure_noise() {
        let dag = Dag::empty(3).unwrap();
        let mechanisms = vec![
            Mechanism {
                weights: vec![],
                kappa: 3.0,
                noise_std: 2.0
            };
            3
        ];
        let spec = ScmSpec::new(
            dag,
            mechanisms,
            InterventionSpec {
                shift_mean: 10.0,
                shift_std: 1.0,
            },
        )
        .unwrap();
        let n = 10_000;
        let z = sample_scm(&spec, &[false; 3], n, SeedTree::new(2)).unwrap();
        for j in 0..3 {
            let (m, s) = column_stats(&z, j);
            // Standard errors: 2/√n for the mean, ≈ 2/√(2n) for the std.
            assert!(m.abs() < 3.0 * 2.0 / (n as f64).sqrt(), "mean {m}");
            assert!((s - 2.0).abs() < 3.0 * 2.0 / (2.0 * n as f64).sqrt(), "std {s}");
        }
    }

    #[test]
    fn zero_weight_severs_edge() {
        let spec = chain_spec(2, 0.0, 1.0);
        let z = sample_scm(&spec, &[false, false], 10_000, SeedTree::new(3)).unwrap();
        let (m0, s0) = column_stats(&z, 0);
        let (m1, s1) = column_stats(&z, 1);
        let cov = z
            .row_iter()
            .map(|r| (r[0] - m0) * (r[1] - m1))
            .sum::<f64>()
            / (z.nrows() as f64 - 1.0);
        assert!((cov / (s0 * s1)).abs() < 0.05);
    }

    #[test]
    fn order_invariance_on_diamond() {
        // 0 → {1, 2} → 3; both [0,1,2,3] and [0,2,1,3] are valid orders.
        let dag = Dag::new(4, [(0, 1), (0, 2), (1, 3), (2, 3)]).unwrap();
        let spec = ScmSpec::random(
            dag,
            0.5,
            1.0,
            [-1.0, 1.0],
            InterventionSpec {
                shift_mean: 10.0,
                shift_std: 1.0,
            },
            &mut SeedTree::new(9).rng(),
        )
        .unwrap();
        for a in [[false; 4], [false, true, false, false]] {
            let first = sample_scm_in_order(&spec, &a, 500, SeedTree::new(4), &[0, 1, 2, 3]).unwrap();
            let second = sample_scm_in_order(&spec, &a, 500, SeedTree::new(4), &[0, 2, 1, 3]).unwrap();
            assert_eq!(first, second);
        }
        assert!(sample_scm_in_order(&spec, &[false; 4], 5, SeedTree::new(4), &[1, 0, 2, 3]).is_err());
    }

    #[test]
    fn interventions_are_modular() {
        let spec = chain_spec(4, 0.5, 1.0);
        let obs = sample_scm(&spec, &[false; 4], 1000, SeedTree::new(5)).unwrap();
        let int = sample_scm(&spec, &[false, false, true, false], 1000, SeedTree::new(5)).unwrap();
        // Nodes 0 and 1 have no intervened ancestors.
        assert_eq!(obs.column(0), int.column(0));
        assert_eq!(obs.column(1), int.column(1));
        assert_ne!(obs.column(2), int.column(2));
    }

    #[test]
    fn intervened_moments_within_clt_bounds() {
        let spec = chain_spec(3, 0.5, 1.0);
        let n = 10_000;
        let z = sample_scm(&spec, &[false, true, false], n, SeedTree::new(6)).unwrap();
        let (m, s) = column_stats(&z, 1);
        let se_mean = 1.0 / (n as f64).sqrt();
        // Var of the sample variance for a normal: 2σ⁴/(n-1).
        let se_var = (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((m - 10.0).abs() < 4.0 * se_mean);
        assert!((s * s - 1.0).abs() < 4.0 * se_var);
    }

    #[test]
    fn mismatched_mechanisms_rejected() {
        let dag = Dag::chain(2).unwrap();
        let bad = vec![
            Mechanism {
                weights: vec![],
                kappa: 1.0,
                noise_std: 1.0,
            },
            Mechanism {
                weights: vec![],
                kappa: 1.0,
                noise_std: 1.0,
            },
        ];
        let iv = InterventionSpec {
            shift_mean: 0.0,
            shift_std: 1.0,
        };
        assert!(ScmSpec::new(dag.clone(), bad, iv).is_err());
        let spec = chain_spec(2, 1.0, 1.0);
        assert!(sample_scm(&spec, &[false], 3, SeedTree::new(0)).is_err());
    }

    #[test]
    fn orthonormal_mixing() {
        let a = sample_orthonormal_mixing(100, 4, SeedTree::new(11)).unwrap();
        assert!(orthonormality_error(&a) < 1e-12);
        assert_eq!(a, sample_orthonormal_mixing(100, 4, SeedTree::new(11)).unwrap());

        let q = sample_orthonormal_mixing(3, 3, SeedTree::new(12)).unwrap();
        assert!((q.determinant().abs() - 1.0).abs() < 1e-10);

        assert!(sample_orthonormal_mixing(2, 3, SeedTree::new(13)).is_err());
    }

    #[test]
    fn full_scale_shapes() {
        let cfg = BenchmarkConfig::full_scale();
        let ds = generate_benchmark(&cfg, SeedTree::new(cfg.seed)).unwrap();
        assert_eq!(ds.domains.len(), 4);
        for (e, d) in ds.domains.iter().enumerate() {
            assert_eq!(d.x.shape(), (2000, 100));
            assert_eq!(d.spec.targets_one_based(), vec![e + 1]);
        }
        assert_eq!(ds.true_sigma2, Some(2.0));
    }

    #[test]
    fn noiseless_measurements_are_exact() {
        let mut cfg = BenchmarkConfig::full_scale().single_node_chain(3, 50);
        cfg.kappa = 0.2;
        cfg.d_x = 10;
        cfg.sigma_x2 = 0.0;
        let ds = generate_benchmark(&cfg, SeedTree::new(3)).unwrap();
        let a = ds.true_a.as_ref().unwrap();
        for (d, z) in ds.domains.iter().zip(ds.true_z.as_ref().unwrap()) {
            assert_eq!((&d.x - z * a.transpose()).amax(), 0.0);
        }
    }

    #[test]
    fn single_domain_normal_means() {
        let mut cfg = BenchmarkConfig::full_scale();
        cfg.d_z = 1;
        cfg.d_x = 3;
        cfg.edges.clear();
        cfg.domains = vec![crate::config::DomainConfig {
            targets: vec![],
            n: 100,
            weight: 1.0,
        }];
        let ds = generate_benchmark(&cfg, SeedTree::new(0)).unwrap();
        assert_eq!(ds.d_z(), 1);
        assert_eq!(ds.domains[0].x.shape(), (100, 3));
        assert!(ds.domains[0].spec.targets_one_based().is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let mut cfg = BenchmarkConfig::full_scale().single_node_chain(3, 40);
        cfg.d_x = 6;
        let a = generate_benchmark(&cfg, SeedTree::new(8)).unwrap();
        let b = generate_benchmark(&cfg, SeedTree::new(8)).unwrap();
        assert_eq!(a, b);
        let c = generate_benchmark(&cfg, SeedTree::new(9)).unwrap();
        assert_ne!(a.domains[0].x, c.domains[0].x);
    }
}
