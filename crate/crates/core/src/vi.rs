//! Variational inequalities over conic-representable sets: approximation
//! measurement via conic duality, certificate checks, a forward extragradient
//! solver, and the proximity bound linking the two approximation notions.
//!
//! `VI(f, F)` asks for `x* in F` with `f(x*)'(x - x*) >= 0` for all `x in F`.
//! A point `xh in F` is an eps-approximate solution when
//! `f(xh)'(x - xh) >= -eps` for all `x in F`; by strong conic duality this is
//! certified by a dual vector `y` with `A'y <=_C f(xh)` and
//! `f(xh)'xh - b'y <= eps`.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::conic::FeasibleRegion;
use crate::error::{Error, Result};
use crate::solver::{self, ProgramBuilder, SolveStatus, Tolerances};

/// A deterministic vector field `x -> f(x)`, finite on the region of use.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Field defined by a closure.
pub struct FnField<F: Fn(&DVector<f64>) -> DVector<f64> + Sync> {
    dim: usize,
    f: F,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64> + Sync> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F: Fn(&DVector<f64>) -> DVector<f64> + Sync> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }
}

/// Affine field `f(x) = M x + q`.
pub struct LinearField {
    pub m: DMatrix<f64>,
    pub q: DVector<f64>,
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.q.len()
    }
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.m * x + &self.q
    }
}

/// Certificate that a point is an eps-approximate VI solution.
#[derive(Debug, Clone)]
pub struct EpsCertificate {
    pub epsilon: f64,
    /// Dual vector supporting the bound, one entry per equality row.
    pub dual: DVector<f64>,
    /// Amount truncated when the raw duality gap came out slightly negative
    /// from solver noise (zero in exact arithmetic).
    pub clamped: f64,
}

/// Smallest `eps >= 0` making `xhat` an eps-approximate solution of
/// `VI(f, region)` given the field value at `xhat`, with the supporting dual.
///
/// The region must contain `xhat` (tol 1e-6) and satisfy a Slater condition;
/// an inner program unbounded below (region unbounded in direction `-f`)
/// is reported explicitly.
pub fn approx_epsilon(
    f_at_xhat: &DVector<f64>,
    xhat: &DVector<f64>,
    region: &FeasibleRegion,
) -> Result<EpsCertificate> {
    if f_at_xhat.len() != region.dim() || xhat.len() != region.dim() {
        return Err(Error::Dimension(format!(
            "field/point dim {}/{} vs region dim {}",
            f_at_xhat.len(),
            xhat.len(),
            region.dim()
        )));
    }
    if !region.contains(xhat, 1e-6)? {
        return Err(Error::Invalid("xhat is not in the region (tol 1e-6)".into()));
    }
    let (value, dual) = min_linear_over_region(f_at_xhat, region)?;
    let raw = f_at_xhat.dot(xhat) - value;
    Ok(EpsCertificate {
        epsilon: raw.max(0.0),
        dual,
        clamped: (-raw).max(0.0),
    })
}

/// Solves `min f'x` over the region, returning the optimum and equality dual.
fn min_linear_over_region(
    f: &DVector<f64>,
    region: &FeasibleRegion,
) -> Result<(f64, DVector<f64>)> {
    let n = region.dim();
    let mut bld = ProgramBuilder::new();
    let x = bld.free(n);
    for k in 0..n {
        bld.lin_term(x.start + k, f[k]);
    }
    for (r, row) in region.matrix().row_iter().enumerate() {
        let terms: Vec<(usize, f64)> = row
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(c, v)| (x.start + c, *v))
            .collect();
        bld.eq(&terms, region.rhs()[r]);
    }
    add_cone_membership(&mut bld, &x, region);
    let out = solver::solve(&bld.build(), Tolerances::default())?;
    match out.status {
        SolveStatus::Optimal => {
            let m = region.num_eq();
            Ok((out.objective, DVector::from_fn(m, |r, _| out.eq_dual[r])))
        }
        SolveStatus::Unbounded => Err(Error::Unbounded(
            "inner program unbounded: region is unbounded in direction -f".into(),
        )),
        SolveStatus::Infeasible => Err(Error::Infeasible("region is empty".into())),
        SolveStatus::NumericalFailure => Err(Error::SolverFailure {
            detail: "inner linear program".into(),
            residual: out.gap,
        }),
    }
}

pub(crate) fn add_cone_membership(
    bld: &mut ProgramBuilder,
    x: &std::ops::Range<usize>,
    region: &FeasibleRegion,
) {
    use crate::conic::ConeBlock;
    let mut at = 0;
    for blk in region.cone().blocks() {
        let d = blk.dim();
        match blk {
            ConeBlock::Nonneg { .. } => {
                for k in 0..d {
                    bld.ge(&[(x.start + at + k, 1.0)], 0.0);
                }
            }
            ConeBlock::SecondOrder { .. } => {
                let exprs: Vec<(Vec<(usize, f64)>, f64)> =
                    (0..d).map(|k| (vec![(x.start + at + k, 1.0)], 0.0)).collect();
                bld.soc_affine(&exprs);
            }
            ConeBlock::Zero { .. } => {
                for k in 0..d {
                    bld.eq(&[(x.start + at + k, 1.0)], 0.0);
                }
            }
        }
        at += d;
    }
}

/// True iff `f(xhat) - A'y` lies in the cone within `tol` and the duality gap
/// `f(xhat)'xhat - b'y` is at most `cert.epsilon + tol`.
pub fn verify_certificate(
    f_at_xhat: &DVector<f64>,
    xhat: &DVector<f64>,
    region: &FeasibleRegion,
    cert: &EpsCertificate,
    tol: f64,
) -> Result<bool> {
    if f_at_xhat.len() != region.dim()
        || xhat.len() != region.dim()
        || cert.dual.len() != region.num_eq()
    {
        return Err(Error::Dimension("certificate pieces disagree with region".into()));
    }
    let reduced = f_at_xhat - region.matrix().transpose() * &cert.dual;
    let dual_feasible = region.cone().distance(&reduced) <= tol;
    let gap = f_at_xhat.dot(xhat) - region.rhs().dot(&cert.dual);
    Ok(dual_feasible && gap <= cert.epsilon + tol)
}

/// Complementary-slackness residual `sum_i xhat_i (f_i(xhat) - (A'y)_i)`.
pub fn comp_slack_residual(
    f_at_xhat: &DVector<f64>,
    xhat: &DVector<f64>,
    region: &FeasibleRegion,
    y: &DVector<f64>,
) -> Result<f64> {
    if f_at_xhat.len() != region.dim() || xhat.len() != region.dim() || y.len() != region.num_eq()
    {
        return Err(Error::Dimension("comp-slack pieces disagree with region".into()));
    }
    let reduced = f_at_xhat - region.matrix().transpose() * y;
    Ok(xhat.dot(&reduced))
}

/// Proximity bound: an eps-approximate solution of a gamma-strongly-monotone
/// VI is within `sqrt(eps/gamma)` of an exact solution.
pub fn pang_delta(epsilon: f64, gamma: f64) -> Result<f64> {
    if gamma <= 0.0 {
        return Err(Error::Invalid("gamma must be positive".into()));
    }
    if epsilon < 0.0 {
        return Err(Error::Invalid("epsilon must be nonnegative".into()));
    }
    Ok((epsilon / gamma).sqrt())
}

/// Sampled lower estimate of the strong-monotonicity modulus: the minimum of
/// `(f(x)-f(y))'(x-y) / ||x-y||^2` over sampled pairs from the region. This
/// is an upper bound on the true modulus; treat it as an estimate, never a
/// certificate.
pub fn estimate_gamma(
    f: &dyn VectorField,
    region: &FeasibleRegion,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples < 2 {
        return Err(Error::Invalid("need at least 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = region
        .slater_witness(1e-9)?
        .unwrap_or_else(|| DVector::zeros(region.dim()));
    let scale = base.norm().max(1.0);
    let mut points = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z = DVector::from_fn(region.dim(), |i, _| {
            base[i] + scale * rng.random_range(-1.0..1.0)
        });
        points.push(region.project(&z)?);
    }
    let values: Vec<DVector<f64>> = points.iter().map(|p| f.eval(p)).collect();
    let mut gamma = f64::INFINITY;
    for i in 0..n_samples {
        for j in i + 1..n_samples {
            let dx = &points[i] - &points[j];
            let nrm2 = dx.norm_squared();
            if nrm2 > 1e-18 {
                let df = &values[i] - &values[j];
                gamma = gamma.min(df.dot(&dx) / nrm2);
            }
        }
    }
    if gamma.is_infinite() {
        return Err(Error::Invalid("region is degenerate: all samples coincide".into()));
    }
    Ok(gamma)
}

/// Extragradient iteration with a caller-supplied projector. Returns the
/// final iterate once successive steps stall below `step_tol`, or after
/// `max_iter` rounds.
pub fn extragradient_iterate(
    f: &dyn VectorField,
    project: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>,
    x0: DVector<f64>,
    step: f64,
    max_iter: usize,
    step_tol: f64,
) -> Result<(DVector<f64>, usize)> {
    let mut x = x0;
    for it in 0..max_iter {
        let fx = f.eval(&x);
        let y = project(&(&x - step * &fx))?;
        let fy = f.eval(&y);
        let x_next = project(&(&x - step * &fy))?;
        let moved = (&x_next - &x).amax();
        x = x_next;
        if moved <= step_tol {
            return Ok((x, it + 1));
        }
    }
    Ok((x, max_iter))
}

/// Forward solver for monotone VIs by projected extragradient steps.
///
/// `step = None` uses `0.1 / gamma_hat` from [`estimate_gamma`] when the
/// estimate is positive, else 1e-2. Convergence is certified by
/// [`approx_epsilon`]; non-convergence reports the final eps.
pub fn solve_vi_extragradient(
    f: &dyn VectorField,
    region: &FeasibleRegion,
    step: Option<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<DVector<f64>> {
    let step = match step {
        Some(s) => s,
        None => {
            let gamma = estimate_gamma(f, region, 8, 0)?;
            if gamma > 1e-9 {
                (0.1 / gamma).min(1e3)
            } else {
                1e-2
            }
        }
    };
    let x0 = region
        .slater_witness(1e-9)?
        .unwrap_or_else(|| DVector::zeros(region.dim()));
    let project = |z: &DVector<f64>| region.project(z);
    let (x, _) = extragradient_iterate(f, &project, x0, step, max_iter, tol * 1e-3)?;
    let cert = approx_epsilon(&f.eval(&x), &x, region)?;
    if cert.epsilon <= tol {
        Ok(x)
    } else {
        Err(Error::NonConvergence(format!(
            "extragradient stopped with eps {:.3e} > tol {:.1e}",
            cert.epsilon, tol
        )))
    }
}
