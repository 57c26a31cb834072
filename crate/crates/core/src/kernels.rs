//! Kernels, Gram matrices, RKHS-norm quadratic forms, and finite kernel
//! expansions (the representer form of fitted functions).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalue slack below which a Gram matrix still counts as PSD.
pub const PSD_EIG_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelSpec {
    /// `k(x, y) = x'y`
    Linear,
    /// `k(x, y) = (c + x'y)^d`, `c >= 0`, `d >= 1`
    Polynomial { c: f64, d: u32 },
    /// `k(x, y) = exp(-c ||x - y||^2)`, `c > 0`
    Gaussian { c: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Polynomial { c, d } => {
                if c < 0.0 || d == 0 {
                    Err(Error::Invalid("polynomial kernel needs c >= 0 and d >= 1".into()))
                } else {
                    Ok(())
                }
            }
            KernelSpec::Gaussian { c } => {
                if c <= 0.0 {
                    Err(Error::Invalid("gaussian kernel needs c > 0".into()))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Kernel value; symmetric in its arguments.
pub fn eval_kernel(spec: KernelSpec, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    match spec {
        KernelSpec::Linear => x.dot(y),
        KernelSpec::Polynomial { c, d } => (c + x.dot(y)).powi(d as i32),
        KernelSpec::Gaussian { c } => (-c * (x - y).norm_squared()).exp(),
    }
}

/// Gram matrix `K_ij = k(x_i, x_j)`; symmetric by construction (each pair is
/// evaluated once and mirrored).
pub fn gram(spec: KernelSpec, points: &[DVector<f64>]) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = eval_kernel(spec, &points[i], &points[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// PSD check with repair policy for QP objectives: returns the raw Gram
/// matrix (for constraint coefficients and evaluation) together with the
/// objective copy, which receives jitter `PSD_EIG_TOL * I` when the minimum
/// eigenvalue lies in `(-PSD_EIG_TOL, 0)`. Anything below that tolerance is
/// a hard error (a genuine kernel bug, not roundoff).
pub fn gram_psd_checked(
    spec: KernelSpec,
    points: &[DVector<f64>],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = gram(spec, points);
    let min_eig = k.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -PSD_EIG_TOL {
        return Err(Error::Invalid(format!(
            "Gram matrix has eigenvalue {min_eig:.3e} below -{PSD_EIG_TOL:.0e}"
        )));
    }
    let mut k_obj = k.clone();
    if min_eig < 0.0 {
        for i in 0..points.len() {
            k_obj[(i, i)] += PSD_EIG_TOL;
        }
    }
    Ok((k, k_obj))
}

/// A fitted function as a finite kernel expansion over anchor points:
/// component `i` of the value at `t` is `sum_j weights[(i, j)] k(x_j, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelExpansion {
    anchors: Vec<DVector<f64>>,
    /// `n_components x N` weights, one column per anchor.
    weights: DMatrix<f64>,
    spec: KernelSpec,
}

impl KernelExpansion {
    pub fn new(anchors: Vec<DVector<f64>>, weights: DMatrix<f64>, spec: KernelSpec) -> Result<Self> {
        spec.validate()?;
        if weights.ncols() != anchors.len() {
            return Err(Error::Dimension(format!(
                "{} weight columns vs {} anchors",
                weights.ncols(),
                anchors.len()
            )));
        }
        if let Some(d) = anchors.first().map(|a| a.len()) {
            if anchors.iter().any(|a| a.len() != d) {
                return Err(Error::Dimension("anchors of mixed dimension".into()));
            }
        }
        Ok(KernelExpansion { anchors, weights, spec })
    }

    pub fn anchors(&self) -> &[DVector<f64>] {
        &self.anchors
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn spec(&self) -> KernelSpec {
        self.spec
    }

    pub fn n_components(&self) -> usize {
        self.weights.nrows()
    }

    /// Value at `t`: component `i` is `sum_j weights[(i,j)] k(x_j, t)`.
    pub fn eval(&self, t: &DVector<f64>) -> DVector<f64> {
        let kvec = self.kernel_column(t);
        &self.weights * kvec
    }

    /// Scalar shorthand for single-component expansions.
    pub fn eval_scalar(&self, t: &DVector<f64>) -> f64 {
        debug_assert_eq!(self.n_components(), 1);
        self.eval(t)[0]
    }

    /// `(k(x_j, t))_j` for the expansion's anchors.
    pub fn kernel_column(&self, t: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.anchors.len(), |j, _| eval_kernel(self.spec, &self.anchors[j], t))
    }

    /// Per-component squared RKHS norms `e_i' W K W' e_i`, clamped at zero
    /// (values below -1e-9 are a dimension/Gram mismatch, reported as error).
    pub fn rkhs_norm_sq(&self, k: &DMatrix<f64>) -> Result<Vec<f64>> {
        if k.nrows() != self.anchors.len() || k.ncols() != self.anchors.len() {
            return Err(Error::Dimension(format!(
                "Gram is {}x{}, expansion has {} anchors",
                k.nrows(),
                k.ncols(),
                self.anchors.len()
            )));
        }
        let mut out = Vec::with_capacity(self.n_components());
        for i in 0..self.n_components() {
            let row = self.weights.row(i).transpose();
            let v = row.dot(&(k * &row));
            if v < -1e-9 {
                return Err(Error::Invalid(format!(
                    "squared norm {v:.3e} is negative beyond roundoff"
                )));
            }
            out.push(v.max(0.0));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ExpansionDoc::from(self)).expect("expansion serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ExpansionDoc =
            serde_json::from_str(text).map_err(|e| Error::Invalid(format!("expansion doc: {e}")))?;
        doc.into_expansion()
    }
}

/// `Kbar = sqrt( sup_{||x|| <= radius} k(x, x) )` per kernel family.
pub fn kbar(spec: KernelSpec, radius: f64) -> Result<f64> {
    if radius <= 0.0 {
        return Err(Error::Invalid("radius must be positive".into()));
    }
    spec.validate()?;
    Ok(match spec {
        KernelSpec::Linear => radius,
        KernelSpec::Polynomial { c, d } => (c + radius * radius).powi(d as i32).sqrt(),
        KernelSpec::Gaussian { .. } => 1.0,
    })
}

/// Feature map of the degree-`d` polynomial kernel on scalar inputs:
/// `phi_r(t) = sqrt(binom(d, r) c^(d-r)) t^r`, so `k(s,t) = phi(s)'phi(t)`.
/// Gives the exact finite-dimensional coordinates used to solve large QPs in
/// the span of such kernels.
pub fn poly_features_1d(c: f64, d: u32, t: f64) -> DVector<f64> {
    let mut phi = DVector::zeros(d as usize + 1);
    for r in 0..=d {
        let binom = binomial(d as u64, r as u64);
        phi[r as usize] = (binom * c.powi((d - r) as i32)).sqrt() * t.powi(r as i32);
    }
    phi
}

fn binomial(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    let mut v = 1.0;
    for i in 0..k {
        v = v * (n - i) as f64 / (i + 1) as f64;
    }
    v
}

/// Serialization mirror for [`KernelExpansion`].
#[derive(Debug, Serialize, Deserialize)]
pub struct ExpansionDoc {
    pub spec: KernelSpec,
    pub anchors: Vec<Vec<f64>>,
    /// Row-major, one row per output component.
    pub weights: Vec<Vec<f64>>,
}

impl From<&KernelExpansion> for ExpansionDoc {
    fn from(e: &KernelExpansion) -> Self {
        ExpansionDoc {
            spec: e.spec,
            anchors: e.anchors.iter().map(|a| a.iter().copied().collect()).collect(),
            weights: (0..e.weights.nrows())
                .map(|i| e.weights.row(i).iter().copied().collect())
                .collect(),
        }
    }
}

impl ExpansionDoc {
    pub fn into_expansion(self) -> Result<KernelExpansion> {
        let anchors: Vec<DVector<f64>> =
            self.anchors.into_iter().map(DVector::from_vec).collect();
        let rows = self.weights.len();
        let cols = self.weights.first().map_or(0, |r| r.len());
        if self.weights.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged weight rows".into()));
        }
        let weights = DMatrix::from_fn(rows, cols, |i, j| self.weights[i][j]);
        KernelExpansion::new(anchors, weights, self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn v(s: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(s)
    }

    #[test]
    fn kernel_values() {
        let g = KernelSpec::Gaussian { c: 0.7 };
        let x = v(&[1.0, -2.0]);
        assert_eq!(eval_kernel(g, &x, &x), 1.0);

        assert_eq!(eval_kernel(KernelSpec::Linear, &v(&[1.0, 2.0]), &v(&[3.0, 4.0])), 11.0);

        let p = KernelSpec::Polynomial { c: 1.0, d: 2 };
        assert_eq!(eval_kernel(p, &v(&[1.0, 0.0]), &v(&[0.0, 1.0])), 1.0);
    }

    #[test]
    fn kernel_symmetry_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [
            KernelSpec::Linear,
            KernelSpec::Polynomial { c: 0.5, d: 3 },
            KernelSpec::Gaussian { c: 1.3 },
        ] {
            for _ in 0..20 {
                let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
                let y = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
                assert_eq!(eval_kernel(spec, &x, &y), eval_kernel(spec, &y, &x));
            }
        }
    }

    #[test]
    fn gram_trivial_cases() {
        let single = gram(KernelSpec::Gaussian { c: 2.0 }, &[v(&[0.3, 0.4])]);
        assert_eq!(single, DMatrix::from_element(1, 1, 1.0));

        let id = gram(
            KernelSpec::Linear,
            &[v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0]), v(&[0.0, 0.0, 1.0])],
        );
        assert_eq!(id, DMatrix::identity(3, 3));
    }

    #[test]
    fn gram_psd_and_bitwise_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for spec in [
            KernelSpec::Linear,
            KernelSpec::Polynomial { c: 1.0, d: 4 },
            KernelSpec::Gaussian { c: 0.5 },
        ] {
            for _ in 0..10 {
                let pts: Vec<DVector<f64>> =
                    (0..5).map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0))).collect();
                let k = gram(spec, &pts);
                for i in 0..5 {
                    for j in 0..5 {
                        assert_eq!(k[(i, j)].to_bits(), k[(j, i)].to_bits());
                    }
                }
                let min_eig = k.clone().symmetric_eigen().eigenvalues.min();
                assert!(min_eig >= -PSD_EIG_TOL, "min eig {min_eig}");
                let (k_raw, _k_obj) = gram_psd_checked(spec, &pts).unwrap();
                assert_eq!(k_raw, k);
            }
        }
    }

    #[test]
    fn expansion_eval_reproduces_and_matches_loop_oracle() {
        let spec = KernelSpec::Gaussian { c: 0.9 };
        let anchors = vec![v(&[0.0, 0.0]), v(&[1.0, 0.5]), v(&[-0.5, 2.0])];

        // Unit weight on anchor 1, evaluated at anchor 1.
        let unit = KernelExpansion::new(
            anchors.clone(),
            DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
            spec,
        )
        .unwrap();
        assert_eq!(unit.eval(&anchors[0])[0], eval_kernel(spec, &anchors[0], &anchors[0]));

        // Zero weights are the zero function.
        let zero = KernelExpansion::new(anchors.clone(), DMatrix::zeros(2, 3), spec).unwrap();
        assert_eq!(zero.eval(&v(&[0.3, 0.3])), DVector::zeros(2));

        // Random weights against an independent summation loop.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let exp = KernelExpansion::new(anchors.clone(), w.clone(), spec).unwrap();
        for _ in 0..10 {
            let t = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let got = exp.eval(&t);
            for i in 0..2 {
                let mut s = 0.0;
                for (j, a) in anchors.iter().enumerate() {
                    s += w[(i, j)] * eval_kernel(spec, a, &t);
                }
                assert!((got[i] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn norms_quadratic_form() {
        let spec = KernelSpec::Polynomial { c: 1.0, d: 2 };
        let anchors = vec![v(&[0.2]), v(&[0.9]), v(&[-1.1])];
        let k = gram(spec, &anchors);

        let e1 = KernelExpansion::new(
            anchors.clone(),
            DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
            spec,
        )
        .unwrap();
        assert!((e1.rkhs_norm_sq(&k).unwrap()[0] - k[(0, 0)]).abs() < 1e-14);

        let zero = KernelExpansion::new(anchors.clone(), DMatrix::zeros(3, 3), spec).unwrap();
        assert_eq!(zero.rkhs_norm_sq(&k).unwrap(), vec![0.0, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let exp = KernelExpansion::new(anchors.clone(), w.clone(), spec).unwrap();
        let norms = exp.rkhs_norm_sq(&k).unwrap();
        for i in 0..2 {
            let mut s = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    s += w[(i, a)] * w[(i, b)] * k[(a, b)];
                }
            }
            assert!((norms[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn kbar_cases() {
        assert_eq!(kbar(KernelSpec::Gaussian { c: 3.0 }, 17.0).unwrap(), 1.0);
        assert_eq!(kbar(KernelSpec::Linear, 2.0).unwrap(), 2.0);
        assert!((kbar(KernelSpec::Polynomial { c: 1.0, d: 2 }, 1.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(kbar(KernelSpec::Linear, 0.0).is_err());
    }

    #[test]
    fn cauchy_schwarz_value_bound() {
        // |f_i(x)| <= sqrt(norm_sq_i) * Kbar for ||x|| <= R, sampled.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let radius = 1.5;
        for spec in [
            KernelSpec::Linear,
            KernelSpec::Polynomial { c: 0.7, d: 3 },
            KernelSpec::Gaussian { c: 0.8 },
        ] {
            let anchors: Vec<DVector<f64>> = (0..4)
                .map(|_| {
                    let z = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                    z * (radius / 2.0)
                })
                .collect();
            let w = DMatrix::from_fn(1, 4, |_, _| rng.random_range(-1.0..1.0));
            let exp = KernelExpansion::new(anchors.clone(), w, spec).unwrap();
            let k = gram(spec, &anchors);
            let bound = exp.rkhs_norm_sq(&k).unwrap()[0].sqrt() * kbar(spec, radius).unwrap();
            for _ in 0..50 {
                let mut x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                let nrm = x.norm();
                if nrm > 1.0 {
                    x /= nrm;
                }
                x *= radius * rng.random_range(0.0..1.0);
                assert!(exp.eval(&x)[0].abs() <= bound + 1e-9);
            }
        }
    }

    #[test]
    fn poly_features_reproduce_kernel() {
        let (c, d) = (0.6, 3u32);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let s = rng.random_range(-2.0..2.0);
            let t = rng.random_range(-2.0..2.0);
            let dot = poly_features_1d(c, d, s).dot(&poly_features_1d(c, d, t));
            let k = eval_kernel(KernelSpec::Polynomial { c, d }, &v(&[s]), &v(&[t]));
            assert!((dot - k).abs() < 1e-10 * (1.0 + k.abs()));
        }
    }

    #[test]
    fn expansion_doc_round_trip() {
        let spec = KernelSpec::Gaussian { c: 0.4 };
        let anchors = vec![v(&[0.1, 0.2]), v(&[0.3, -0.4])];
        let w = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.25, 2.0]);
        let exp = KernelExpansion::new(anchors, w, spec).unwrap();
        let back = KernelExpansion::from_json(&exp.to_json()).unwrap();
        assert_eq!(back, exp);
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::Gaussian { c: 0.0 }.validate().is_err());
        assert!(KernelSpec::Polynomial { c: -0.1, d: 2 }.validate().is_err());
        assert!(KernelSpec::Polynomial { c: 0.0, d: 0 }.validate().is_err());
    }
}
