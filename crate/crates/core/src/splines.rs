//! Cubic B-spline bases and their tensor products.
//!
//! Each coordinate uses `K` cubic basis functions on `[lo, hi]`, built from a
//! uniform interior knot grid with the boundary knots repeated four times.
//! Inputs outside `[lo, hi]` are clamped to the box, so the basis is extended
//! as a constant and its derivative there is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORDER: usize = 4;
const DEGREE: usize = ORDER - 1;

/// Default cap on the tensor-product feature count (`8^5`).
pub const DEFAULT_FEATURE_CAP: usize = 32_768;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis1D {
    knots: Vec<f64>,
    n_basis: usize,
}

/// Non-zero window of a 1-D basis at one point: functions `first..first + 4`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisWindow {
    pub first: usize,
    pub values: [f64; ORDER],
    pub derivs: [f64; ORDER],
}

impl SplineBasis1D {
    /// `n_basis` cubic B-splines on `[lo, hi]`.
    pub fn uniform(n_basis: usize, lo: f64, hi: f64) -> Result<Self> {
        if n_basis < ORDER {
            return Err(Error::Config(format!(
                "a cubic spline basis needs at least {ORDER} functions, got {n_basis}"
            )));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("invalid knot range [{lo}, {hi}]")));
        }
        let n_interior = n_basis - ORDER;
        let segments = (n_interior + 1) as f64;
        let mut knots = vec![lo; ORDER];
        knots.extend((1..=n_interior).map(|i| lo + (hi - lo) * i as f64 / segments));
        knots.extend(std::iter::repeat_n(hi, ORDER));
        Ok(Self { knots, n_basis })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn range(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    /// Values and first derivatives of the (at most four) non-zero basis
    /// functions at `t`.
    pub fn window(&self, t: f64) -> BasisWindow {
        let (lo, hi) = self.range();
        let outside = !(lo..=hi).contains(&t);
        let t = t.clamp(lo, hi);
        // Knot span μ with knots[μ] <= t < knots[μ+1]; the right end belongs to the last span.
        let last = self.n_basis - 1;
        let span = if t >= hi {
            last
        } else {
            let upper = self.knots[DEGREE + 1..=last].partition_point(|&k| k <= t);
            DEGREE + upper
        };

        // Cox–de Boor triangle; `lower` holds degree-2 values for the derivative.
        let k = &self.knots;
        let mut n = [0.0; ORDER];
        let mut lower = [0.0; ORDER];
        let mut left = [0.0; ORDER];
        let mut right = [0.0; ORDER];
        n[0] = 1.0;
        for p in 1..=DEGREE {
            left[p] = t - k[span + 1 - p];
            right[p] = k[span + p] - t;
            let mut saved = 0.0;
            for r in 0..p {
                let denom = right[r + 1] + left[p - r];
                let temp = if denom > 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[p - r] * temp;
            }
            n[p] = saved;
            if p == DEGREE - 1 {
                lower = n;
            }
        }

        let mut derivs = [0.0; ORDER];
        if !outside {
            // B'_{i,3} = 3 (N_{i,2} / (k[i+3] - k[i]) - N_{i+1,2} / (k[i+4] - k[i+1]))
            let first = span - DEGREE;
            for (r, d) in derivs.iter_mut().enumerate() {
                let i = first + r;
                let a = if r >= 1 { lower[r - 1] } else { 0.0 };
                let b = if r < DEGREE { lower[r] } else { 0.0 };
                let da = k[i + DEGREE] - k[i];
                let db = k[i + DEGREE + 1] - k[i + 1];
                let ta = if da > 0.0 { a / da } else { 0.0 };
                let tb = if db > 0.0 { b / db } else { 0.0 };
                *d = DEGREE as f64 * (ta - tb);
            }
        }
        BasisWindow {
            first: span - DEGREE,
            values: n,
            derivs,
        }
    }

    /// Dense evaluation of all `K` basis functions.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let w = self.window(t);
        let mut out = vec![0.0; self.n_basis];
        out[w.first..w.first + ORDER].copy_from_slice(&w.values);
        out
    }

    /// Dense evaluation of all `K` first derivatives.
    pub fn eval_deriv(&self, t: f64) -> Vec<f64> {
        let w = self.window(t);
        let mut out = vec![0.0; self.n_basis];
        out[w.first..w.first + ORDER].copy_from_slice(&w.derivs);
        out
    }
}

/// Sparse tensor-product features at one input: feature indices with values
/// and derivatives with respect to the first coordinate.
#[derive(Debug, Clone, Default)]
pub struct SparseFeatures {
    pub index: Vec<usize>,
    pub value: Vec<f64>,
    pub dself: Vec<f64>,
}

/// Tensor-product basis over `(y_j, y_pa(j))`; the first coordinate is the
/// node's own and varies slowest in the feature index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBasis {
    basis: SplineBasis1D,
    n_inputs: usize,
    n_features: usize,
}

impl TensorBasis {
    pub fn new(basis: SplineBasis1D, n_inputs: usize, cap: usize) -> Result<Self> {
        if n_inputs == 0 {
            return Err(Error::Config("tensor basis needs at least one input".into()));
        }
        let n_features = u32::try_from(n_inputs)
            .ok()
            .and_then(|e| basis.n_basis().checked_pow(e))
            .unwrap_or(usize::MAX);
        if n_features > cap {
            return Err(Error::FeatureCap {
                features: n_features,
                cap,
            });
        }
        Ok(Self {
            basis,
            n_inputs,
            n_features,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn basis(&self) -> &SplineBasis1D {
        &self.basis
    }

    /// Non-zero features at `x` (at most `4^n_inputs` of them), written into `out`.
    pub fn eval_sparse(&self, x: &[f64], out: &mut SparseFeatures) {
        assert_eq!(x.len(), self.n_inputs, "input length must match the basis");
        let k = self.basis.n_basis();
        out.index.clear();
        out.value.clear();
        out.dself.clear();

        let own = self.basis.window(x[0]);
        for r in 0..ORDER {
            out.index.push(own.first + r);
            out.value.push(own.values[r]);
            out.dself.push(own.derivs[r]);
        }
        for &xi in &x[1..] {
            let w = self.basis.window(xi);
            let len = out.index.len();
            let mut index = Vec::with_capacity(len * ORDER);
            let mut value = Vec::with_capacity(len * ORDER);
            let mut dself = Vec::with_capacity(len * ORDER);
            for p in 0..len {
                for r in 0..ORDER {
                    index.push(out.index[p] * k + w.first + r);
                    value.push(out.value[p] * w.values[r]);
                    dself.push(out.dself[p] * w.values[r]);
                }
            }
            out.index = index;
            out.value = value;
            out.dself = dself;
        }
    }

    /// Dense feature vector `φ(x)` of length `m`.
    pub fn eval_features(&self, x: &[f64]) -> Vec<f64> {
        let mut sparse = SparseFeatures::default();
        self.eval_sparse(x, &mut sparse);
        let mut out = vec![0.0; self.n_features];
        for (&i, &v) in sparse.index.iter().zip(&sparse.value) {
            out[i] = v;
        }
        out
    }

    /// Dense `∂φ(x)/∂x₀` of length `m`.
    pub fn eval_features_dself(&self, x: &[f64]) -> Vec<f64> {
        let mut sparse = SparseFeatures::default();
        self.eval_sparse(x, &mut sparse);
        let mut out = vec![0.0; self.n_features];
        for (&i, &v) in sparse.index.iter().zip(&sparse.dself) {
            out[i] = v;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn default_basis() -> SplineBasis1D {
        SplineBasis1D::uniform(8, -15.0, 15.0).unwrap()
    }

    #[test]
    fn knot_layout() {
        let b = default_basis();
        assert_eq!(
            b.knots(),
            &[-15.0, -15.0, -15.0, -15.0, -9.0, -3.0, 3.0, 9.0, 15.0, 15.0, 15.0, 15.0]
        );
        assert_eq!(b.n_basis(), 8);
        assert!(SplineBasis1D::uniform(3, -1.0, 1.0).is_err());
        assert!(SplineBasis1D::uniform(8, 1.0, 1.0).is_err());
    }

    #[test]
    fn partition_of_unity_at_knots() {
        let b = default_basis();
        for &t in b.knots() {
            let v = b.eval(t);
            assert_abs_diff_eq!(v.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(v.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn clamped_outside_range() {
        let b = default_basis();
        assert_eq!(b.eval(-20.0), b.eval(-15.0));
        assert_eq!(b.eval(40.0), b.eval(15.0));
        assert!(b.eval_deriv(-20.0).iter().all(|&d| d == 0.0));
    }

    #[test]
    fn cubic_support() {
        let b = default_basis();
        let nonzero = b.eval(0.0).iter().filter(|&&v| v != 0.0).count();
        assert!(nonzero <= 4);
    }

    #[test]
    fn boundary_values() {
        let b = default_basis();
        let left = b.eval(-15.0);
        assert_abs_diff_eq!(left[0], 1.0, epsilon = 1e-15);
        let right = b.eval(15.0);
        assert_abs_diff_eq!(right[7], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn tensor_degenerates_to_1d() {
        let b = default_basis();
        let tb = TensorBasis::new(b.clone(), 1, DEFAULT_FEATURE_CAP).unwrap();
        assert_eq!(tb.eval_features(&[2.5]), b.eval(2.5));
        assert_eq!(tb.eval_features_dself(&[2.5]), b.eval_deriv(2.5));
    }

    #[test]
    fn tensor_two_inputs() {
        let tb = TensorBasis::new(default_basis(), 2, DEFAULT_FEATURE_CAP).unwrap();
        let f = tb.eval_features(&[1.3, -7.7]);
        assert_eq!(f.len(), 64);
        assert_abs_diff_eq!(f.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        // Kronecker layout: own coordinate is the slow index.
        let own = default_basis().eval(1.3);
        let par = default_basis().eval(-7.7);
        for a in 0..8 {
            for b in 0..8 {
                assert_abs_diff_eq!(f[a * 8 + b], own[a] * par[b], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn feature_cap() {
        assert_eq!(
            TensorBasis::new(default_basis(), 5, DEFAULT_FEATURE_CAP)
                .unwrap()
                .n_features(),
            32_768
        );
        assert!(matches!(
            TensorBasis::new(default_basis(), 6, DEFAULT_FEATURE_CAP),
            Err(Error::FeatureCap { features: 262_144, .. })
        ));
    }

    #[test]
    fn derivative_matches_finite_differences() {
        // Central differences with h = 1e-5 at 100 deterministic interior points.
        let tb = TensorBasis::new(default_basis(), 3, DEFAULT_FEATURE_CAP).unwrap();
        let h = 1e-5;
        for i in 0..100 {
            let u = i as f64 / 100.0;
            let x = [
                -14.0 + 28.0 * ((u * 7.13).fract()),
                -14.0 + 28.0 * ((u * 3.71 + 0.2).fract()),
                -14.0 + 28.0 * ((u * 5.37 + 0.5).fract()),
            ];
            let analytic = tb.eval_features_dself(&x);
            let mut xp = x;
            let mut xm = x;
            xp[0] += h;
            xm[0] -= h;
            let fp = tb.eval_features(&xp);
            let fm = tb.eval_features(&xm);
            for j in 0..analytic.len() {
                let fd = (fp[j] - fm[j]) / (2.0 * h);
                assert!((fd - analytic[j]).abs() < 1e-6, "point {i}, feature {j}");
            }
        }
    }

    proptest! {
        #[test]
        fn tensor_partition_of_unity(x in proptest::collection::vec(-15.0f64..15.0, 1..4)) {
            let tb = TensorBasis::new(default_basis(), x.len(), DEFAULT_FEATURE_CAP).unwrap();
            let f = tb.eval_features(&x);
            prop_assert_eq!(f.len(), 8usize.pow(x.len() as u32));
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(f.iter().all(|&v| v >= 0.0));
            let nonzero = f.iter().filter(|&&v| v != 0.0).count();
            prop_assert!(nonzero <= 4usize.pow(x.len() as u32));
            let d = tb.eval_features_dself(&x);
            prop_assert!(d.iter().sum::<f64>().abs() < 1e-10);
        }

        #[test]
        fn clamped_coordinate_has_zero_derivative(t in 15.0001f64..100.0, other in -15.0f64..15.0) {
            let tb = TensorBasis::new(default_basis(), 2, DEFAULT_FEATURE_CAP).unwrap();
            prop_assert!(tb.eval_features_dself(&[t, other]).iter().all(|&v| v == 0.0));
            prop_assert!(tb.eval_features_dself(&[-t, other]).iter().all(|&v| v == 0.0));
        }
    }
}
