//! Generalization guarantees for fitted equilibrium models: the scenario
//! (binomial-tail) bound for parametric fits, the Rademacher-complexity
//! bound with its Markov tail, the prediction radius for strongly monotone
//! fits, and a deterministic cross-validation harness.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{kbar, KernelSpec};

/// Binomial tail `beta(alpha) = sum_{i=0}^{d} C(N,i) alpha^i (1-alpha)^(N-i)`
/// computed in log space. With probability at least `1 - beta(alpha)` over
/// the sampling, a fresh observation fails to be a `z_N`-approximate
/// equilibrium with probability at most `alpha` (d = dim theta).
pub fn campi_beta(alpha: f64, n: usize, dim_theta: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(Error::Invalid("alpha must lie in (0, 1)".into()));
    }
    if n == 0 {
        return Err(Error::Invalid("need at least one sample".into()));
    }
    if dim_theta >= n {
        return Ok(1.0);
    }
    let ln_a = alpha.ln();
    let ln_1a = (-alpha).ln_1p();
    // log-sum-exp over terms ln C(N,i) + i ln a + (N-i) ln(1-a).
    let mut terms = Vec::with_capacity(dim_theta + 1);
    let mut max_t = f64::NEG_INFINITY;
    for i in 0..=dim_theta {
        let t = ln_binomial(n, i) + i as f64 * ln_a + (n - i) as f64 * ln_1a;
        max_t = max_t.max(t);
        terms.push(t);
    }
    let sum: f64 = terms.iter().map(|t| (t - max_t).exp()).sum();
    Ok((max_t + sum.ln()).exp().clamp(0.0, 1.0))
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// Solves `beta(alpha) = target` for alpha by bisection (beta is strictly
/// decreasing in alpha). Useful to express the scenario bound as "violation
/// probability at confidence `1 - target`".
pub fn campi_alpha_for_beta(target: f64, n: usize, dim_theta: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&target) || target == 0.0 {
        return Err(Error::Invalid("target must lie in (0, 1)".into()));
    }
    if dim_theta >= n {
        return Err(Error::Invalid("dim theta >= N: bound is vacuous".into()));
    }
    let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if campi_beta(mid, n, dim_theta)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Inputs for the Rademacher-complexity bound.
#[derive(Debug, Clone, Copy)]
pub struct BoundInputs {
    /// In-sample value `z_N` (mean of eps^p over the fit sample).
    pub z_n: f64,
    pub n: usize,
    /// Norm power `p >= 1` of the residual objective.
    pub p: f64,
    /// Uniform bound on the approximation error (see [`bbar_nonparametric`]).
    pub bbar: f64,
    /// Sampling-confidence parameter in (0, 1).
    pub beta: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RademacherBound {
    /// Bound on `E[eps^p]` holding with probability >= 1 - beta.
    pub expectation_bound: f64,
    /// The `1/sqrt(N)` excess term alone.
    pub excess: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.z_n < 0.0 || self.p < 1.0 || self.n == 0 {
            return Err(Error::Invalid("bound inputs need z_N >= 0, p >= 1, N >= 1".into()));
        }
        if self.bbar <= 0.0 || !(0.0..1.0).contains(&self.beta) || self.beta == 0.0 {
            return Err(Error::Invalid("bound inputs need Bbar > 0 and beta in (0,1)".into()));
        }
        Ok(())
    }
}

/// With probability at least `1 - beta` over the sampling:
/// `E[eps^p] <= z_N + (4 p Bbar^p + 2 Bbar^(p/2) sqrt(2 ln(2/beta))) / sqrt(N)`.
pub fn rademacher_bound(inputs: &BoundInputs) -> Result<RademacherBound> {
    inputs.validate()?;
    let excess = rademacher_excess(inputs);
    Ok(RademacherBound { expectation_bound: inputs.z_n + excess, excess })
}

fn rademacher_excess(inputs: &BoundInputs) -> f64 {
    let b = inputs.bbar;
    let p = inputs.p;
    (4.0 * p * b.powf(p) + 2.0 * b.powf(p / 2.0) * (2.0 * (2.0 / inputs.beta).ln()).sqrt())
        / (inputs.n as f64).sqrt()
}

/// Markov-form tail: probability that a fresh point is not a
/// `(z_N + alpha)`-approximate equilibrium, clamped to [0, 1].
pub fn rademacher_tail(inputs: &BoundInputs, alpha: f64) -> Result<f64> {
    inputs.validate()?;
    if alpha <= 0.0 {
        return Err(Error::Invalid("alpha must be positive".into()));
    }
    Ok((rademacher_excess(inputs) / alpha.powf(inputs.p)).clamp(0.0, 1.0))
}

/// Smallest `alpha` whose tail is at most `prob`: the threshold
/// `z_N + alpha` then fails with probability at most `prob`.
pub fn rademacher_alpha_for_tail(inputs: &BoundInputs, prob: f64) -> Result<f64> {
    inputs.validate()?;
    if prob <= 0.0 || prob >= 1.0 {
        return Err(Error::Invalid("tail probability must lie in (0,1)".into()));
    }
    Ok((rademacher_excess(inputs) / prob).powf(1.0 / inputs.p))
}

/// `Bbar` for the nonparametric class: `2 R Kbar sqrt(sum kappa_i^2)`, where
/// `kappa_i` are the per-component RKHS-norm caps and `R` bounds the regions.
pub fn bbar_nonparametric(spec: KernelSpec, radius: f64, kappas_sq: &[f64]) -> Result<f64> {
    if kappas_sq.iter().any(|k| *k < 0.0) {
        return Err(Error::Invalid("norm caps must be nonnegative".into()));
    }
    let kb = kbar(spec, radius)?;
    let sum: f64 = kappas_sq.iter().sum();
    Ok(2.0 * radius * kb * sum.sqrt())
}

/// Grid-max estimate of `2 sup ||f(x; theta)||` over `||x|| <= radius` and
/// sampled `theta` in its box. A lower bound of the true supremum; the grid
/// density is recorded by the caller alongside the value.
pub struct ParametricBbarEstimate {
    pub value: f64,
    pub x_grid_points: usize,
    pub theta_samples: usize,
}

pub fn bbar_parametric(
    field_at: &dyn Fn(&nalgebra::DVector<f64>, &nalgebra::DVector<f64>) -> nalgebra::DVector<f64>,
    dim: usize,
    theta_lo: &nalgebra::DVector<f64>,
    theta_hi: &nalgebra::DVector<f64>,
    radius: f64,
    grid_per_axis: usize,
    theta_samples: usize,
    seed: u64,
) -> Result<ParametricBbarEstimate> {
    if grid_per_axis < 2 || theta_samples == 0 {
        return Err(Error::Invalid("need a grid of at least 2 points per axis".into()));
    }
    // x-grid over the cube [-radius, radius]^dim filtered to the ball; for
    // dim > 3 a sampled grid replaces the full product.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs: Vec<nalgebra::DVector<f64>> = Vec::new();
    if dim <= 3 {
        let mut idx = vec![0usize; dim];
        loop {
            let x = nalgebra::DVector::from_fn(dim, |i, _| {
                -radius + 2.0 * radius * idx[i] as f64 / (grid_per_axis - 1) as f64
            });
            if x.norm() <= radius {
                xs.push(x);
            }
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] < grid_per_axis {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == dim {
                    break;
                }
            }
            if d == dim {
                break;
            }
        }
    } else {
        for _ in 0..grid_per_axis.pow(2) {
            let mut x = nalgebra::DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
            let nr = x.norm();
            if nr > 1.0 {
                x /= nr;
            }
            xs.push(x * radius);
        }
    }
    // Theta samples: box corners first (sup of a convex function over a box
    // is at a corner when f is linear in theta), then uniform fill.
    let m = theta_lo.len();
    let mut thetas: Vec<nalgebra::DVector<f64>> = Vec::new();
    if m <= 16 {
        let corners = 1usize << m;
        for mask in 0..corners.min(theta_samples) {
            thetas.push(nalgebra::DVector::from_fn(m, |k, _| {
                if mask >> k & 1 == 1 {
                    theta_hi[k]
                } else {
                    theta_lo[k]
                }
            }));
        }
    }
    while thetas.len() < theta_samples {
        thetas.push(nalgebra::DVector::from_fn(m, |k, _| {
            rng.random_range(theta_lo[k]..=theta_hi[k])
        }));
    }
    let mut best = 0.0f64;
    for th in &thetas {
        for x in &xs {
            best = best.max(field_at(x, th).norm());
        }
    }
    Ok(ParametricBbarEstimate { value: 2.0 * best, x_grid_points: xs.len(), theta_samples: thetas.len() })
}

/// Prediction radius for a gamma-strongly-monotone fitted field:
/// `||x_new - xhat|| <= sqrt((z_N + alpha) / gamma)`.
pub fn prediction_radius(z_n: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if gamma <= 0.0 {
        return Err(Error::Invalid("gamma must be positive".into()));
    }
    if z_n < 0.0 || alpha < 0.0 {
        return Err(Error::Invalid("z_N and alpha must be nonnegative".into()));
    }
    Ok(((z_n + alpha) / gamma).sqrt())
}

/// Region radius from data: `max_j ||x_j||` inflated by 10%, used when no
/// radius is supplied.
pub fn radius_from_points<'a, I: IntoIterator<Item = &'a nalgebra::DVector<f64>>>(points: I) -> f64 {
    let max = points.into_iter().map(|x| x.norm()).fold(0.0f64, f64::max);
    1.1 * max
}

/// Effective dimension of an l1-regularized fit: the support size of theta
/// at tolerance 1e-8.
pub fn effective_dim(theta: &nalgebra::DVector<f64>) -> usize {
    theta.iter().filter(|t| t.abs() > 1e-8).count()
}

pub use crate::vi::{estimate_gamma, pang_delta};

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

/// One grid cell's outcome across folds.
#[derive(Debug, Clone)]
pub struct CvCell<P> {
    pub params: P,
    pub fold_scores: Vec<Option<f64>>,
    pub mean_score: f64,
    pub failed_folds: usize,
}

#[derive(Debug, Clone)]
pub struct CvReport<P> {
    pub best_index: usize,
    pub cells: Vec<CvCell<P>>,
    pub folds: Vec<Vec<usize>>,
}

impl<P> CvReport<P> {
    pub fn best(&self) -> &CvCell<P> {
        &self.cells[self.best_index]
    }
}

/// Deterministic fold split by seeded shuffle.
pub fn fold_split(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut out = vec![Vec::new(); folds];
    for (pos, i) in idx.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    out
}

/// K-fold cross-validation over a parameter grid.
///
/// `fit` trains on the given indices; `score` evaluates a trained model on
/// the validation indices (lower is better). Failed cells are excluded and
/// flagged. Ties go to the earlier grid entry, so order grids from the most
/// regularized (smaller lambda, then smaller kernel parameter) first.
pub fn cross_validate<P: Clone, M>(
    n_obs: usize,
    grid: &[P],
    folds: usize,
    seed: u64,
    fit: impl Fn(&P, &[usize]) -> Result<M> + Sync,
    score: impl Fn(&M, &[usize]) -> Result<f64> + Sync,
) -> Result<CvReport<P>> {
    if folds < 2 {
        return Err(Error::Invalid("need at least 2 folds".into()));
    }
    if grid.is_empty() {
        return Err(Error::Invalid("empty parameter grid".into()));
    }
    if n_obs < folds {
        return Err(Error::Invalid("fewer observations than folds".into()));
    }
    let fold_sets = fold_split(n_obs, folds, seed);
    let mut cells = Vec::with_capacity(grid.len());
    for params in grid {
        let mut fold_scores = Vec::with_capacity(folds);
        let mut failed = 0usize;
        for val in &fold_sets {
            let train: Vec<usize> = (0..n_obs).filter(|i| !val.contains(i)).collect();
            let outcome = fit(params, &train).and_then(|m| score(&m, val));
            match outcome {
                Ok(s) if s.is_finite() => fold_scores.push(Some(s)),
                _ => {
                    failed += 1;
                    fold_scores.push(None);
                }
            }
        }
        let valid: Vec<f64> = fold_scores.iter().flatten().copied().collect();
        let mean_score = if valid.is_empty() {
            f64::INFINITY
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        };
        cells.push(CvCell { params: params.clone(), fold_scores, mean_score, failed_folds: failed });
    }
    let mut best_index = 0;
    for (i, c) in cells.iter().enumerate() {
        if c.mean_score < cells[best_index].mean_score {
            best_index = i;
        }
    }
    if cells[best_index].mean_score.is_infinite() {
        return Err(Error::Invalid("every grid cell failed on every fold".into()));
    }
    Ok(CvReport { best_index, cells, folds: fold_sets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn campi_beta_limits() {
        // alpha -> 0: the i = 0 term dominates and the sum tends to 1.
        assert!(campi_beta(1e-12, 30, 3).unwrap() > 1.0 - 1e-9);
        // dim >= N: full binomial sum = 1.
        assert_eq!(campi_beta(0.3, 10, 10).unwrap(), 1.0);
        assert_eq!(campi_beta(0.3, 10, 25).unwrap(), 1.0);
    }

    #[test]
    fn campi_beta_monotone_grid() {
        // Nonincreasing in alpha, nondecreasing in dim.
        let alphas = [0.05, 0.1, 0.2, 0.4, 0.6, 0.8];
        for dim in [0usize, 1, 3, 7] {
            let mut prev = f64::INFINITY;
            for a in alphas {
                let b = campi_beta(a, 25, dim).unwrap();
                assert!(b <= prev + 1e-12);
                prev = b;
            }
        }
        for a in alphas {
            let mut prev = -1.0;
            for dim in [0usize, 1, 2, 5, 10] {
                let b = campi_beta(a, 25, dim).unwrap();
                assert!(b >= prev - 1e-12);
                prev = b;
            }
        }
    }

    #[test]
    fn campi_alpha_inverse() {
        let n = 20;
        let dim = 2;
        let alpha = campi_alpha_for_beta(0.1, n, dim).unwrap();
        let beta = campi_beta(alpha, n, dim).unwrap();
        assert!((beta - 0.1).abs() < 1e-6);
    }

    #[test]
    fn rademacher_sqrt_n_halving_identity() {
        // Quadrupling N exactly halves the excess over z_N.
        let base = BoundInputs { z_n: 2.0, n: 100, p: 1.0, bbar: 7.0, beta: 0.1 };
        let quad = BoundInputs { n: 400, ..base };
        let b1 = rademacher_bound(&base).unwrap();
        let b4 = rademacher_bound(&quad).unwrap();
        assert!((b1.excess - 2.0 * b4.excess).abs() <= 1e-12 * b1.excess.abs());
    }

    #[test]
    fn rademacher_excess_vanishes() {
        let huge = BoundInputs { z_n: 1.0, n: 1_000_000_000_000, p: 1.0, bbar: 5.0, beta: 0.1 };
        let b = rademacher_bound(&huge).unwrap();
        assert!(b.excess <= 1e-4 * huge.bbar);
    }

    #[test]
    fn rademacher_tail_monotone() {
        let inputs = BoundInputs { z_n: 1.0, n: 50, p: 1.0, bbar: 3.0, beta: 0.1 };
        let mut prev = f64::INFINITY;
        for alpha in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let t = rademacher_tail(&inputs, alpha).unwrap();
            assert!(t <= prev + 1e-15);
            assert!((0.0..=1.0).contains(&t));
            prev = t;
        }
        // And nonincreasing in N.
        let mut prev_n = f64::INFINITY;
        for n in [10usize, 40, 160, 640] {
            let t = rademacher_tail(&BoundInputs { n, ..inputs }, 2.0).unwrap();
            assert!(t <= prev_n + 1e-15);
            prev_n = t;
        }
        // alpha_for_tail inverts the tail.
        let alpha = rademacher_alpha_for_tail(&inputs, 0.1).unwrap();
        let t = rademacher_tail(&inputs, alpha).unwrap();
        assert!((t - 0.1).abs() <= 1e-12);
    }

    #[test]
    fn bbar_nonparametric_formula() {
        let b = bbar_nonparametric(KernelSpec::Gaussian { c: 2.0 }, 1.0, &[1.0]).unwrap();
        assert!((b - 2.0).abs() < 1e-15);
        // Gaussian Kbar = 1 regardless of the radius.
        let b2 = bbar_nonparametric(KernelSpec::Gaussian { c: 0.3 }, 9.0, &[4.0]).unwrap();
        assert!((b2 - 2.0 * 9.0 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn bbar_parametric_grid_close_to_analytic() {
        // f(x; theta) = theta * x on the 2-D ball of radius 1 with
        // theta in [-2, 3]: sup ||f|| = 3, so Bbar = 6.
        let est = bbar_parametric(
            &|x, th| x * th[0],
            2,
            &nalgebra::DVector::from_vec(vec![-2.0]),
            &nalgebra::DVector::from_vec(vec![3.0]),
            1.0,
            100,
            8,
            0,
        )
        .unwrap();
        assert!(est.value <= 6.0 + 1e-12);
        assert!(est.value >= 6.0 * 0.98, "grid estimate {} too far below 6", est.value);
    }

    #[test]
    fn prediction_radius_formula_and_monotonicity() {
        assert_eq!(prediction_radius(0.0, 0.0, 2.0).unwrap(), 0.0);
        assert!((prediction_radius(4.0, 0.0, 1.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(prediction_radius(1.0, 0.0, 0.0).is_err());
        // Nondecreasing in z and alpha, nonincreasing in gamma.
        let r = prediction_radius(1.0, 0.5, 2.0).unwrap();
        assert!(prediction_radius(2.0, 0.5, 2.0).unwrap() >= r);
        assert!(prediction_radius(1.0, 1.5, 2.0).unwrap() >= r);
        assert!(prediction_radius(1.0, 0.5, 4.0).unwrap() <= r);
    }

    #[test]
    fn fold_split_is_deterministic_partition() {
        let a = fold_split(17, 5, 42);
        let b = fold_split(17, 5, 42);
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..17).collect::<Vec<_>>());
        let c = fold_split(17, 5, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn cross_validate_single_cell_and_separated_grid() {
        // Single-point grid returns that point.
        let report = cross_validate(
            10,
            &[0.5f64],
            5,
            1,
            |_, _| Ok(0.0f64),
            |_, _| Ok(1.0),
        )
        .unwrap();
        assert_eq!(report.best_index, 0);

        // Two-parameter grid where the oracle metric strongly separates:
        // parameter equal to the hidden value scores near zero.
        let hidden = 2.0f64;
        let report = cross_validate(
            20,
            &[1.0f64, 2.0, 4.0],
            5,
            7,
            |p, _| Ok(*p),
            |p, _| Ok((p - hidden).abs()),
        )
        .unwrap();
        assert_eq!(report.best_index, 1);
        assert_eq!(report.cells.len(), 3);

        // Failing cells are excluded and flagged.
        let report = cross_validate(
            12,
            &[0usize, 1],
            4,
            3,
            |p, _| {
                if *p == 0 {
                    Err(Error::Invalid("fail".into()))
                } else {
                    Ok(*p)
                }
            },
            |_, _| Ok(0.0),
        )
        .unwrap();
        assert_eq!(report.best_index, 1);
        assert_eq!(report.cells[0].failed_folds, 4);
    }

    #[test]
    fn effective_dim_counts_support() {
        let theta = nalgebra::DVector::from_vec(vec![0.0, 1e-9, 0.5, -2.0]);
        assert_eq!(effective_dim(&theta), 2);
    }
}
