//! Causal score model: per-node, per-arm ridge score matching over spline features.
//!
//! Component `j` of the score is `s_j(y_j, y_pa(j), a_j) = φ_j(y_j, y_pa(j))ᵀ θ_{j,a_j}`,
//! where `φ_j` is the tensor-product spline basis with the node's own coordinate
//! first. Coefficients minimise the integrated-by-parts score-matching loss
//!
//! ```text
//! Σ_e w_e/N_e Σ_i [ ∂_j s_j + ½ s_j² ] + (λ/2) ‖θ_{j,a}‖²
//! ```
//!
//! over the samples whose domain has `a_j = a`, which has the closed form
//! `θ = −(ΦᵀWΦ + λI)⁻¹ ΨᵀW𝟙`. Different `(j, a)` pairs never interact.

use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::{Accum, Mat, Par};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Dag;
use crate::numeric::ridge_solve_in_place;
use crate::splines::{SparseFeatures, SplineBasis1D, TensorBasis, DEFAULT_FEATURE_CAP};

pub const DEFAULT_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub n_basis: usize,
    pub range: [f64; 2],
    pub feature_cap: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            n_basis: 8,
            range: [-15.0, 15.0],
            feature_cap: DEFAULT_FEATURE_CAP,
        }
    }
}

/// Projected observations of every domain with their targets and loss weights.
#[derive(Debug, Clone, Copy)]
pub struct ScoreData<'a> {
    /// `N_e × d_Z` per domain.
    pub y: &'a [DMatrix<f64>],
    pub targets: &'a [Vec<bool>],
    pub weights: &'a [f64],
}

impl ScoreData<'_> {
    fn validate(&self, d_z: usize) -> Result<()> {
        if self.y.len() != self.targets.len() || self.y.len() != self.weights.len() {
            return Err(Error::Dimension(format!(
                "{} domains, {} target vectors, {} weights",
                self.y.len(),
                self.targets.len(),
                self.weights.len()
            )));
        }
        for (e, (y, a)) in self.y.iter().zip(self.targets).enumerate() {
            if y.ncols() != d_z || a.len() != d_z {
                return Err(Error::Dimension(format!(
                    "domain {}: expected {d_z} latent columns and targets",
                    e + 1
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("projected data of domain {}", e + 1)));
            }
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("domain weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// `(domain, per-sample weight)` for every domain on arm `arm` of node `j`.
    fn arm_domains(&self, j: usize, arm: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.y.len())
            .filter(move |&e| usize::from(self.targets[e][j]) == arm && self.y[e].nrows() > 0)
            .map(move |e| (e, self.weights[e] / self.y[e].nrows() as f64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    dag: Dag,
    bases: Vec<TensorBasis>,
    /// `theta[j][a]` for arm `a_j = a`.
    theta: Vec<[Vec<f64>; 2]>,
    lambda: f64,
}

fn node_inputs(y: &DMatrix<f64>, i: usize, j: usize, parents: &[usize], buf: &mut Vec<f64>) {
    buf.clear();
    buf.push(y[(i, j)]);
    buf.extend(parents.iter().map(|&k| y[(i, k)]));
}

impl ScoreModel {
    /// Model with every coefficient zero.
    pub fn zeros(dag: &Dag, basis: &BasisConfig, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("ridge strength must be >= 0, got {lambda}")));
        }
        let b1 = SplineBasis1D::uniform(basis.n_basis, basis.range[0], basis.range[1])?;
        let bases = (0..dag.n_nodes())
            .map(|j| TensorBasis::new(b1.clone(), 1 + dag.parents(j).len(), basis.feature_cap))
            .collect::<Result<Vec<_>>>()?;
        let theta = bases
            .iter()
            .map(|b| [vec![0.0; b.n_features()], vec![0.0; b.n_features()]])
            .collect();
        Ok(Self {
            dag: dag.clone(),
            bases,
            theta,
            lambda,
        })
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n_features(&self, j: usize) -> usize {
        self.bases[j].n_features()
    }

    pub fn theta(&self, j: usize, arm: usize) -> &[f64] {
        &self.theta[j][arm]
    }

    pub fn set_theta(&mut self, j: usize, arm: usize, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.bases[j].n_features() {
            return Err(Error::Dimension(format!(
                "node {} has {} features, got {} coefficients",
                j + 1,
                self.bases[j].n_features(),
                theta.len()
            )));
        }
        self.theta[j][arm] = theta;
        Ok(())
    }

    /// `ŝ(y, a)`.
    pub fn eval(&self, y: &[f64], a: &[bool]) -> Vec<f64> {
        self.eval_with_dself(y, a).0
    }

    /// `∂_j ŝ_j(y, a)` for every `j`.
    pub fn eval_dself(&self, y: &[f64], a: &[bool]) -> Vec<f64> {
        self.eval_with_dself(y, a).1
    }

    pub fn eval_with_dself(&self, y: &[f64], a: &[bool]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dag.n_nodes();
        assert!(y.len() == d && a.len() == d, "input length must match the graph");
        let mut feats = SparseFeatures::default();
        let mut inputs = Vec::new();
        let mut s = vec![0.0; d];
        let mut ds = vec![0.0; d];
        for j in 0..d {
            inputs.clear();
            inputs.push(y[j]);
            inputs.extend(self.dag.parents(j).iter().map(|&k| y[k]));
            self.bases[j].eval_sparse(&inputs, &mut feats);
            let theta = &self.theta[j][usize::from(a[j])];
            (s[j], ds[j]) = dot_pair(&feats, theta);
        }
        (s, ds)
    }

    /// Row-wise score and own-coordinate derivative for one domain.
    pub fn eval_rows(&self, y: &DMatrix<f64>, a: &[bool]) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n, d) = y.shape();
        assert!(d == self.dag.n_nodes() && a.len() == d, "input shape must match the graph");
        let mut s = DMatrix::zeros(n, d);
        let mut ds = DMatrix::zeros(n, d);
        let mut feats = SparseFeatures::default();
        let mut inputs = Vec::new();
        for j in 0..d {
            let parents = self.dag.parents(j);
            let theta = &self.theta[j][usize::from(a[j])];
            for i in 0..n {
                node_inputs(y, i, j, parents, &mut inputs);
                self.bases[j].eval_sparse(&inputs, &mut feats);
                (s[(i, j)], ds[(i, j)]) = dot_pair(&feats, theta);
            }
        }
        (s, ds)
    }

    /// `Σ_e w_e/N_e Σ_i Σ_j [∂_j ŝ_j + ½ ŝ_j²]`, without the ridge term.
    pub fn empirical_loss(&self, data: &ScoreData) -> Result<f64> {
        data.validate(self.dag.n_nodes())?;
        let mut total = 0.0;
        for ((y, a), &w) in data.y.iter().zip(data.targets).zip(data.weights) {
            if y.nrows() == 0 {
                continue;
            }
            let (s, ds) = self.eval_rows(y, a);
            let sum: f64 = s.iter().zip(ds.iter()).map(|(s, d)| d + 0.5 * s * s).sum();
            total += w / y.nrows() as f64 * sum;
        }
        Ok(total)
    }

    /// Empirical loss plus `(λ/2) Σ_{j,a} ‖θ_{j,a}‖²`.
    pub fn regularized_objective(&self, data: &ScoreData) -> Result<f64> {
        let ridge: f64 = self
            .theta
            .iter()
            .flat_map(|t| t.iter())
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum();
        Ok(self.empirical_loss(data)? + 0.5 * self.lambda * ridge)
    }

    /// Gradient of [`Self::regularized_objective`] with respect to every
    /// `θ_{j,a}`, in the same layout as the coefficients.
    pub fn objective_gradient(&self, data: &ScoreData) -> Result<Vec<[Vec<f64>; 2]>> {
        data.validate(self.dag.n_nodes())?;
        let mut grad: Vec<[Vec<f64>; 2]> = self
            .theta
            .iter()
            .map(|[t0, t1]| [t0.iter().map(|v| self.lambda * v).collect(), t1.iter().map(|v| self.lambda * v).collect()])
            .collect();
        let mut feats = SparseFeatures::default();
        let mut inputs = Vec::new();
        for j in 0..self.dag.n_nodes() {
            let parents = self.dag.parents(j);
            for arm in 0..2 {
                let theta = &self.theta[j][arm];
                let g = &mut grad[j][arm];
                for (e, w) in data.arm_domains(j, arm) {
                    let y = &data.y[e];
                    for i in 0..y.nrows() {
                        node_inputs(y, i, j, parents, &mut inputs);
                        self.bases[j].eval_sparse(&inputs, &mut feats);
                        let (s, _) = dot_pair(&feats, theta);
                        for ((&f, &v), &dv) in feats.index.iter().zip(&feats.value).zip(&feats.dself) {
                            g[f] += w * (s * v + dv);
                        }
                    }
                }
            }
        }
        Ok(grad)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.snapshot()).expect("score model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: ScoreModelJson =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("score model: {e}")))?;
        let dag = Dag::from_one_based(snap.n_nodes, &snap.edges)?;
        let basis = BasisConfig {
            n_basis: snap.n_basis,
            range: snap.range,
            feature_cap: usize::MAX,
        };
        let mut model = Self::zeros(&dag, &basis, snap.lambda)?;
        if snap.nodes.len() != dag.n_nodes() {
            return Err(Error::Dimension("one coefficient entry per node".into()));
        }
        for (j, node) in snap.nodes.into_iter().enumerate() {
            model.set_theta(j, 0, node.theta0)?;
            model.set_theta(j, 1, node.theta1)?;
        }
        Ok(model)
    }

    fn snapshot(&self) -> ScoreModelJson {
        let b = self.bases[0].basis();
        let (lo, hi) = b.range();
        ScoreModelJson {
            n_nodes: self.dag.n_nodes(),
            edges: self.dag.edges_one_based(),
            n_basis: b.n_basis(),
            range: [lo, hi],
            knots: b.knots().to_vec(),
            lambda: self.lambda,
            nodes: self
                .theta
                .iter()
                .enumerate()
                .map(|(j, [t0, t1])| NodeJson {
                    node: j + 1,
                    parents: self.dag.parents(j).iter().map(|k| k + 1).collect(),
                    theta0: t0.clone(),
                    theta1: t1.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ScoreModelJson {
    n_nodes: usize,
    edges: Vec<[usize; 2]>,
    n_basis: usize,
    range: [f64; 2],
    #[serde(default)]
    knots: Vec<f64>,
    lambda: f64,
    nodes: Vec<NodeJson>,
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    node: usize,
    parents: Vec<usize>,
    theta0: Vec<f64>,
    theta1: Vec<f64>,
}

fn dot_pair(feats: &SparseFeatures, theta: &[f64]) -> (f64, f64) {
    let mut s = 0.0;
    let mut ds = 0.0;
    for ((&f, &v), &dv) in feats.index.iter().zip(&feats.value).zip(&feats.dself) {
        s += v * theta[f];
        ds += dv * theta[f];
    }
    (s, ds)
}

/// Fits every `θ_{j,a}` by its ridge normal equations.
pub fn fit_score(data: &ScoreData, dag: &Dag, basis: &BasisConfig, lambda: f64) -> Result<ScoreModel> {
    data.validate(dag.n_nodes())?;
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("ridge strength must be > 0, got {lambda}")));
    }
    let mut model = ScoreModel::zeros(dag, basis, lambda)?;
    let jobs: Vec<(usize, usize)> = (0..dag.n_nodes()).flat_map(|j| [(j, 0), (j, 1)]).collect();
    let solved = jobs
        .par_iter()
        .map(|&(j, arm)| fit_node_arm(&model.bases[j], dag.parents(j), j, arm, data, lambda))
        .collect::<Result<Vec<_>>>()?;
    for (&(j, arm), theta) in jobs.iter().zip(solved) {
        model.theta[j][arm] = theta;
    }
    Ok(model)
}

/// Solves one `(node, arm)` system restricted to the features that some
/// sample touches; the remaining coefficients are exactly zero.
fn fit_node_arm(
    basis: &TensorBasis,
    parents: &[usize],
    j: usize,
    arm: usize,
    data: &ScoreData,
    lambda: f64,
) -> Result<Vec<f64>> {
    let m = basis.n_features();
    let mut theta = vec![0.0; m];
    let stride = 4usize.pow(1 + parents.len() as u32);

    let mut index = Vec::new();
    let mut value = Vec::new();
    let mut dself = Vec::new();
    let mut weight = Vec::new();
    let mut feats = SparseFeatures::default();
    let mut inputs = Vec::new();
    for (e, w) in data.arm_domains(j, arm) {
        let y = &data.y[e];
        for i in 0..y.nrows() {
            node_inputs(y, i, j, parents, &mut inputs);
            basis.eval_sparse(&inputs, &mut feats);
            debug_assert_eq!(feats.index.len(), stride);
            index.extend(feats.index.iter().map(|&f| f as u32));
            value.extend_from_slice(&feats.value);
            dself.extend_from_slice(&feats.dself);
            weight.push(w);
        }
    }
    if weight.is_empty() {
        return Ok(theta);
    }

    // Compact positions, monotone in the feature index.
    let mut compact = vec![u32::MAX; m];
    for &f in &index {
        compact[f as usize] = 0;
    }
    let mut active = Vec::new();
    for (f, c) in compact.iter_mut().enumerate() {
        if *c == 0 {
            *c = active.len() as u32;
            active.push(f);
        }
    }
    let n = active.len();
    for f in &mut index {
        *f = compact[*f as usize];
    }

    // Samples in the same spline cell share their index set, which is
    // identified by its first (smallest) entry.
    let n_samples = weight.len();
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.sort_by_key(|&s| (index[s * stride], s));

    let mut a = Mat::<f64>::zeros(n, n);
    let mut b = Mat::<f64>::zeros(n, 1);
    let mut local = Mat::<f64>::zeros(stride, stride);
    let mut v = Mat::<f64>::zeros(stride, 0);
    let mut start = 0;
    while start < n_samples {
        let key = index[order[start] * stride];
        let mut stop = start + 1;
        while stop < n_samples && index[order[stop] * stride] == key {
            stop += 1;
        }
        let cell = &order[start..stop];
        let s0 = cell[0];
        let idx = &index[s0 * stride..(s0 + 1) * stride];
        if cell.len() == 1 {
            let w = weight[s0];
            let val = &value[s0 * stride..(s0 + 1) * stride];
            for q in 0..stride {
                let wq = w * val[q];
                let col = a.col_as_slice_mut(idx[q] as usize);
                for p in q..stride {
                    col[idx[p] as usize] += wq * val[p];
                }
            }
        } else {
            v.resize_with(stride, cell.len(), |_, _| 0.0);
            for (k, &s) in cell.iter().enumerate() {
                let sw = weight[s].sqrt();
                let val = &value[s * stride..(s + 1) * stride];
                for (dst, &x) in v.col_as_slice_mut(k).iter_mut().zip(val) {
                    *dst = sw * x;
                }
            }
            triangular::matmul(
                local.as_mut(),
                BlockStructure::TriangularLower,
                Accum::Replace,
                v.as_ref(),
                BlockStructure::Rectangular,
                v.transpose(),
                BlockStructure::Rectangular,
                1.0,
                Par::Seq,
            );
            for q in 0..stride {
                let src = local.col_as_slice(q);
                let col = a.col_as_slice_mut(idx[q] as usize);
                for p in q..stride {
                    col[idx[p] as usize] += src[p];
                }
            }
        }
        for &s in cell {
            let w = weight[s];
            let dv = &dself[s * stride..(s + 1) * stride];
            for q in 0..stride {
                b[(idx[q] as usize, 0)] -= w * dv[q];
            }
        }
        start = stop;
    }
    for c in 0..n {
        a[(c, c)] += lambda;
    }
    ridge_solve_in_place(&mut a, &mut b)?;
    for (c, &f) in active.iter().enumerate() {
        theta[f] = b[(c, 0)];
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite(format!("score coefficients of node {}", j + 1)));
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, std: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = SeedTree::new(seed).rng();
        DMatrix::from_fn(n, d, |_, _| {
            let u: f64 = StandardNormal.sample(&mut rng);
            std * u
        })
    }

    #[test]
    fn standard_normal_score() {
        let dag = Dag::empty(1).unwrap();
        let y = vec![gaussian(100_000, 1, 1.0, 1)];
        let targets = vec![vec![false]];
        let data = ScoreData {
            y: &y,
            targets: &targets,
            weights: &[1.0],
        };
        let model = fit_score(&data, &dag, &BasisConfig::default(), 1e-3).unwrap();
        for t in [-1.0, 0.0, 1.0] {
            let s = model.eval(&[t], &[false])[0];
            assert!((s + t).abs() < 0.1, "score at {t}: {s}");
            let ds = model.eval_dself(&[t], &[false])[0];
            assert!((ds + 1.0).abs() < 0.2, "derivative at {t}: {ds}");
        }
        // Arm 1 has no data.
        assert!(model.theta(0, 1).iter().all(|&v| v == 0.0));
        let zero = ScoreModel::zeros(&dag, &BasisConfig::default(), 1e-3).unwrap();
        assert!(model.empirical_loss(&data).unwrap() < zero.empirical_loss(&data).unwrap() - 0.1);
        assert_eq!(zero.empirical_loss(&data).unwrap(), 0.0);
    }

    #[test]
    fn huge_ridge_shrinks_to_zero() {
        let dag = Dag::chain(2).unwrap();
        let y = vec![gaussian(500, 2, 1.0, 2)];
        let targets = vec![vec![false, false]];
        let data = ScoreData {
            y: &y,
            targets: &targets,
            weights: &[1.0],
        };
        let model = fit_score(&data, &dag, &BasisConfig::default(), 1e9).unwrap();
        for j in 0..2 {
            let norm: f64 = model.theta(j, 0).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < 1e-6);
        }
        assert!(fit_score(&data, &dag, &BasisConfig::default(), 0.0).is_err());
    }

    #[test]
    fn locality() {
        let dag = Dag::new(3, [(0, 1)]).unwrap();
        let y = vec![gaussian(300, 3, 2.0, 3), gaussian(300, 3, 2.0, 4)];
        let targets = vec![vec![false; 3], vec![false, true, false]];
        let data = ScoreData {
            y: &y,
            targets: &targets,
            weights: &[1.0, 1.0],
        };
        let model = fit_score(&data, &dag, &BasisConfig::default(), 1e-3).unwrap();
        let base = [0.3, -1.2, 0.7];
        let s = model.eval(&base, &[false, false, false]);
        // Flipping a_0 or a_2 leaves component 1 alone.
        assert_eq!(model.eval(&base, &[true, false, true])[1], s[1]);
        // Node 2 has no parents, node 1 ignores y_2.
        let moved = model.eval(&[0.3, -1.2, 5.0], &[false; 3]);
        assert_eq!(moved[1], s[1]);
        assert_eq!(moved[0], s[0]);
        let moved = model.eval(&[0.3, 3.0, 0.7], &[false; 3]);
        assert_eq!(moved[0], s[0]);
        assert_eq!(moved[2], s[2]);
    }

    #[test]
    fn dself_matches_finite_differences() {
        let dag = Dag::chain(2).unwrap();
        let y = vec![gaussian(2000, 2, 3.0, 5)];
        let targets = vec![vec![false, false]];
        let data = ScoreData {
            y: &y,
            targets: &targets,
            weights: &[1.0],
        };
        let model = fit_score(&data, &dag, &BasisConfig::default(), 1e-3).unwrap();
        let pts = gaussian(100, 2, 4.0, 6);
        let h = 1e-6;
        for i in 0..100 {
            let p = [pts[(i, 0)], pts[(i, 1)]];
            let ds = model.eval_dself(&p, &[false, false]);
            for j in 0..2 {
                let mut up = p;
                let mut dn = p;
                up[j] += h;
                dn[j] -= h;
                let fd = (model.eval(&up, &[false; 2])[j] - model.eval(&dn, &[false; 2])[j]) / (2.0 * h);
                assert!((fd - ds[j]).abs() < 1e-6 * (1.0 + ds[j].abs()), "{fd} vs {}", ds[j]);
            }
        }
    }

    #[test]
    fn fitted_coefficients_are_stationary() {
        let dag = Dag::new(3, [(0, 1), (0, 2), (1, 2)]).unwrap();
        let y: Vec<_> = (0..3).map(|e| gaussian(200, 3, 2.0, 10 + e)).collect();
        let targets = vec![vec![false; 3], vec![true, false, false], vec![false, false, true]];
        let data = ScoreData {
            y: &y,
            targets: &targets,
            weights: &[1.0, 0.5, 2.0],
        };
        let model = fit_score(&data, &dag, &BasisConfig::default(), 1e-4).unwrap();
        let grad = model.objective_gradient(&data).unwrap();
        let worst = grad
            .iter()
            .flat_map(|g| g.iter())
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-9, "gradient {worst}");
    }

    #[test]
    fn json_round_trip() {
        let dag = Dag::chain(2).unwrap();
        let y = vec![gaussian(100, 2, 1.0, 7)];
        let targets = vec![vec![true, false]];
        let data = ScoreData {
            y: &y,
            targets: &targets,
            weights: &[1.0],
        };
        let model = fit_score(&data, &dag, &BasisConfig::default(), 1e-3).unwrap();
        let back = ScoreModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back.eval(&[0.1, 0.2], &[true, false]), model.eval(&[0.1, 0.2], &[true, false]));
        assert_eq!(back.theta(1, 0), model.theta(1, 0));
    }

    #[test]
    fn feature_cap_and_non_finite() {
        let dag = Dag::complete_from_order(&[0, 1, 2, 3, 4, 5]).unwrap();
        assert!(matches!(
            ScoreModel::zeros(&dag, &BasisConfig::default(), 1e-3),
            Err(Error::FeatureCap { .. })
        ));
        let dag = Dag::empty(1).unwrap();
        let mut y = gaussian(10, 1, 1.0, 8);
        y[(3, 0)] = f64::NAN;
        let y = vec![y];
        let targets = vec![vec![false]];
        let data = ScoreData {
            y: &y,
            targets: &targets,
            weights: &[1.0],
        };
        assert!(matches!(
            fit_score(&data, &dag, &BasisConfig::default(), 1e-3),
            Err(Error::NonFinite { .. })
        ));
    }
}
