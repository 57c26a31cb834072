//! The inverse variational-inequality estimation programs.
//!
//! Given observations `(x_j, F_j)` believed to be approximate equilibria of a
//! common unknown function `f`, these routines pick `f` from a parametric
//! family or a reproducing-kernel space so that each `x_j` is an
//! `eps_j`-approximate solution of `VI(f, F_j)`, certified through the conic
//! duality characterization: for every observation,
//!
//! ```text
//!   A_j' y_j <=_C f(x_j),     f(x_j)' x_j - b_j' y_j <= eps_j.
//! ```
//!
//! The parametric program minimizes a norm of the residuals over `theta` (a
//! conic program when `f` is linear in `theta`); the nonparametric program
//! minimizes the summed squared RKHS norms subject to a residual budget, or
//! its dualized always-feasible variant, and lands on a kernel expansion over
//! the observed points. Ambiguity envelopes bound the pointwise range of all
//! functions that reconcile the data within a budget.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{ConeBlock, FeasibleRegion, DEFAULT_INTERIOR_TOL};
use crate::error::{Error, Result};
use crate::kernels::{eval_kernel, gram_psd_checked, KernelExpansion, KernelSpec};
use crate::solver::{self, ProgramBuilder, SolveOutcome, SolveStatus, Tolerances};
use crate::vi::{self, EpsCertificate, VectorField};

/// One equilibrium observation.
#[derive(Debug, Clone)]
pub struct Observation {
    pub point: DVector<f64>,
    pub region: FeasibleRegion,
}

/// A validated batch of observations sharing one ambient dimension.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    obs: Vec<Observation>,
}

impl ObservationSet {
    /// Validates membership (tol 1e-6) and a Slater condition per region.
    pub fn new(obs: Vec<Observation>) -> Result<Self> {
        let set = Self::new_unchecked(obs)?;
        for (j, o) in set.obs.iter().enumerate() {
            if !o.region.contains(&o.point, 1e-6)? {
                return Err(Error::Invalid(format!("observation {j} is not in its region")));
            }
            if !o.region.slater_check(DEFAULT_INTERIOR_TOL)? {
                return Err(Error::Invalid(format!(
                    "region of observation {j} fails the Slater check"
                )));
            }
        }
        Ok(set)
    }

    /// Dimension checks only; for callers that guarantee validity by
    /// construction (e.g. large generated instances).
    pub fn new_unchecked(obs: Vec<Observation>) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::Invalid("empty observation set".into()));
        }
        let n = obs[0].point.len();
        for (j, o) in obs.iter().enumerate() {
            if o.point.len() != n || o.region.dim() != n {
                return Err(Error::Dimension(format!("observation {j} has mismatched dimension")));
            }
        }
        Ok(ObservationSet { obs })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn ambient_dim(&self) -> usize {
        self.obs[0].point.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<ObservationSet> {
        Self::new_unchecked(indices.iter().map(|&i| self.obs[i].clone()).collect())
    }
}

/// Basis-function family `f(x; theta) = offset(x) + sum_k theta_k phi_k(x)`,
/// linear in `theta`, with a box-compact parameter set.
pub struct ParametricFamily {
    dim: usize,
    n_params: usize,
    offset: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    /// Returns the `dim x n_params` design matrix `[phi_1(x) ... phi_M(x)]`.
    design: Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl std::fmt::Debug for ParametricFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParametricFamily")
            .field("dim", &self.dim)
            .field("n_params", &self.n_params)
            .finish()
    }
}

impl ParametricFamily {
    pub fn new(
        dim: usize,
        n_params: usize,
        offset: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        design: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        lo: DVector<f64>,
        hi: DVector<f64>,
    ) -> Result<Self> {
        if lo.len() != n_params || hi.len() != n_params {
            return Err(Error::Dimension("parameter bounds must match n_params".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| l > h || !l.is_finite() || !h.is_finite()) {
            return Err(Error::Invalid("parameter box must be finite and nonempty".into()));
        }
        Ok(ParametricFamily {
            dim,
            n_params,
            offset: Box::new(offset),
            design: Box::new(design),
            lo,
            hi,
        })
    }

    /// Family without an offset term and symmetric bounds.
    pub fn linear_in_theta(
        dim: usize,
        n_params: usize,
        design: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        bound: f64,
    ) -> Result<Self> {
        Self::new(
            dim,
            n_params,
            |x| DVector::zeros(x.len()),
            design,
            DVector::from_element(n_params, -bound),
            DVector::from_element(n_params, bound),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn bounds(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.lo, &self.hi)
    }

    pub fn offset_at(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.offset)(x)
    }

    pub fn design_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.design)(x)
    }

    pub fn eval(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        self.offset_at(x) + self.design_at(x) * theta
    }
}

/// A fitted parametric field.
#[derive(Debug, Clone)]
pub struct ParamFit {
    pub theta: DVector<f64>,
    pub family: Arc<ParametricFamily>,
}

impl VectorField for ParamFit {
    fn dim(&self) -> usize {
        self.family.dim()
    }
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        self.family.eval(x, &self.theta)
    }
}

/// Fitted model: parametric, kernel expansion, or prior plus correction.
#[derive(Clone)]
pub enum FitModel {
    Parametric(ParamFit),
    Nonparametric(KernelExpansion),
    WithPrior { prior: Arc<dyn VectorField + Send + Sync>, correction: KernelExpansion },
}

impl std::fmt::Debug for FitModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitModel::Parametric(p) => f.debug_tuple("Parametric").field(&p.theta).finish(),
            FitModel::Nonparametric(_) => f.write_str("Nonparametric(..)"),
            FitModel::WithPrior { .. } => f.write_str("WithPrior(..)"),
        }
    }
}

impl VectorField for FitModel {
    fn dim(&self) -> usize {
        match self {
            FitModel::Parametric(p) => p.dim(),
            FitModel::Nonparametric(e) => e.n_components(),
            FitModel::WithPrior { correction, .. } => correction.n_components(),
        }
    }
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            FitModel::Parametric(p) => p.eval(x),
            FitModel::Nonparametric(e) => e.eval(x),
            FitModel::WithPrior { prior, correction } => prior.eval(x) + correction.eval(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualNorm {
    L1,
    L2,
    LInf,
    /// `sum eps_j^2` (the p-power form with p = 2).
    SquaredL2,
}

impl ResidualNorm {
    pub fn value(&self, eps: &[f64]) -> f64 {
        match self {
            ResidualNorm::L1 => eps.iter().sum(),
            ResidualNorm::L2 => eps.iter().map(|e| e * e).sum::<f64>().sqrt(),
            ResidualNorm::LInf => eps.iter().fold(0.0, |a, &b| a.max(b)),
            ResidualNorm::SquaredL2 => eps.iter().map(|e| e * e).sum(),
        }
    }
}

/// Exactly one residual-handling mode is active per fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// Objective carries `lambda * ||eps||`; always feasible.
    Dualized { lambda: f64 },
    /// Hard residual budget `||eps|| <= kappa`.
    Budget { kappa: f64 },
}

/// Scale-fixing condition removing the positive-scaling degeneracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `(1/N) sum_j x_j' f(x_j) = 1` over the observations.
    MeanInner,
    /// Pin one component value at one site: `f_c(site) = value`.
    Anchor { site: usize, component: usize, value: f64 },
    None,
}

/// `f_component(site_lower) <= f_component(site_upper)` on fitted values.
///
/// Sites index the observations first (`0..N`), then any auxiliary
/// evaluation points carried by [`FitOptions::aux_points`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonotonePair {
    pub component: usize,
    pub lower: usize,
    pub upper: usize,
}

/// Equality pin `f_component(site) = value` (e.g. scale normalizations at
/// designated points).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValuePin {
    pub site: usize,
    pub component: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub residual_norm: ResidualNorm,
    pub mode: FitMode,
    pub normalization: Normalization,
    /// Extra evaluation points (kernel anchors) beyond the observations;
    /// they carry no equilibrium constraints but can appear in monotone
    /// pairs, pins, and envelope queries.
    pub aux_points: Vec<DVector<f64>>,
    pub monotone_pairs: Vec<MonotonePair>,
    pub pins: Vec<ValuePin>,
    /// One-sided pins `f_component(site) <= value`.
    pub upper_pins: Vec<ValuePin>,
    /// Components forced to the zero function (nonparametric fits); lets a
    /// field over lifted coordinates (slacks, exogenous features) keep those
    /// coordinates inert.
    pub zero_components: Vec<usize>,
    /// Weight on the residual norm in the parametric objective.
    pub residual_weight: f64,
    /// `lambda * ||theta||_1` regularization (parametric fits).
    pub theta_l1: f64,
    /// Weight on `||theta||_2^2` (parametric fits; mirrors the RKHS
    /// objective of a linear kernel).
    pub theta_l2: f64,
    /// Per-active-component squared-RKHS-norm caps (nonparametric).
    pub norm_caps: Option<Vec<f64>>,
    /// Break parametric ties by minimal l2 norm of theta (second stage).
    pub tie_break_theta: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            residual_norm: ResidualNorm::L1,
            mode: FitMode::Dualized { lambda: 1.0 },
            normalization: Normalization::None,
            aux_points: Vec::new(),
            monotone_pairs: Vec::new(),
            pins: Vec::new(),
            upper_pins: Vec::new(),
            zero_components: Vec::new(),
            residual_weight: 1.0,
            theta_l1: 0.0,
            theta_l2: 0.0,
            norm_caps: None,
            tie_break_theta: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitMetadata {
    pub solver_gap: f64,
    pub certificates_ok: bool,
    pub mode: FitMode,
    pub notes: Vec<String>,
}

/// A fitted model with its per-observation residuals and dual certificates.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: FitModel,
    pub residuals: Vec<f64>,
    pub duals: Vec<DVector<f64>>,
    /// Optimal objective value of the estimation program.
    pub objective: f64,
    /// Value of the residual norm alone (no regularization terms).
    pub residual_norm_value: f64,
    pub metadata: FitMetadata,
}

impl FitResult {
    pub fn certificate(&self, j: usize) -> EpsCertificate {
        EpsCertificate { epsilon: self.residuals[j], dual: self.duals[j].clone(), clamped: 0.0 }
    }

    pub fn expansion(&self) -> Option<&KernelExpansion> {
        match &self.model {
            FitModel::Nonparametric(e) => Some(e),
            FitModel::WithPrior { correction, .. } => Some(correction),
            FitModel::Parametric(_) => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Shared program assembly
// ---------------------------------------------------------------------------

/// Affine expression of `f_i(site)` in the decision variables. Sites index
/// the observations first, then the auxiliary points of the fit options.
trait FieldExpr {
    fn n_components(&self) -> usize;
    fn expr(&self, site: usize, i: usize) -> (Vec<(usize, f64)>, f64);
}

struct ParametricExpr {
    theta_start: usize,
    /// Offsets/designs per site (observations then aux points).
    offsets: Vec<DVector<f64>>,
    designs: Vec<DMatrix<f64>>,
}

impl FieldExpr for ParametricExpr {
    fn n_components(&self) -> usize {
        self.offsets[0].len()
    }
    fn expr(&self, site: usize, i: usize) -> (Vec<(usize, f64)>, f64) {
        let d = &self.designs[site];
        let terms = (0..d.ncols())
            .filter(|&k| d[(i, k)] != 0.0)
            .map(|k| (self.theta_start + k, d[(i, k)]))
            .collect();
        (terms, self.offsets[site][i])
    }
}

/// Spectral value basis of a Gram matrix: with `K = Q diag(lam) Q'`
/// truncated to eigenvalues above `1e-12 * lam_max`, expansions are
/// optimized over `w` with `alpha = Q diag(lam^-1/2) w`, so that
///
/// - values at anchors are `K alpha = B w` with `B = Q diag(lam^1/2)`,
/// - the squared RKHS norm `alpha' K alpha` is exactly `w' w`.
///
/// This keeps the programs well-conditioned when anchors nearly coincide
/// at the kernel's scale (the Gram is then numerically low-rank, and raw
/// `alpha` coordinates are hugely degenerate).
struct ValueBasis {
    /// `n_anchors x r`: value of basis column at each anchor.
    b: DMatrix<f64>,
    /// `n_anchors x r`: recovers the minimal-norm `alpha` from `w`.
    alpha_from_w: DMatrix<f64>,
}

impl ValueBasis {
    fn from_gram(k_obj: &DMatrix<f64>) -> ValueBasis {
        let n = k_obj.nrows();
        let eig = k_obj.clone().symmetric_eigen();
        let lam_max = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        let keep: Vec<usize> =
            (0..n).filter(|&i| eig.eigenvalues[i] > 1e-10 * lam_max).collect();
        let r = keep.len();
        let mut b = DMatrix::zeros(n, r);
        let mut alpha_from_w = DMatrix::zeros(n, r);
        for (col, &i) in keep.iter().enumerate() {
            let lam = eig.eigenvalues[i];
            let s = lam.sqrt();
            for row in 0..n {
                let q = eig.eigenvectors[(row, i)];
                b[(row, col)] = q * s;
                alpha_from_w[(row, col)] = q / s;
            }
        }
        ValueBasis { b, alpha_from_w }
    }

    fn rank(&self) -> usize {
        self.b.ncols()
    }
}

struct KernelExpr {
    w_start: usize,
    n_components: usize,
    rank: usize,
    basis: ValueBasis,
    /// Anchor index of each site.
    anchor_of: Vec<usize>,
    /// Weight-row slot per component; None for zero-masked components.
    active_of: Vec<Option<usize>>,
    /// Optional fixed offsets `f0` per site (prior fits).
    offsets: Option<Vec<DVector<f64>>>,
}

impl KernelExpr {
    fn n_active(&self) -> usize {
        self.active_of.iter().flatten().count()
    }

    fn w_var(&self, component: usize, basis_col: usize) -> Option<usize> {
        self.active_of[component].map(|slot| self.w_start + slot * self.rank + basis_col)
    }
}

impl FieldExpr for KernelExpr {
    fn n_components(&self) -> usize {
        self.n_components
    }
    fn expr(&self, site: usize, i: usize) -> (Vec<(usize, f64)>, f64) {
        let offset = self.offsets.as_ref().map_or(0.0, |o| o[site][i]);
        let Some(slot) = self.active_of[i] else {
            return (Vec::new(), offset);
        };
        let row = self.anchor_of[site];
        let base = self.w_start + slot * self.rank;
        let terms = (0..self.rank)
            .filter(|&c| self.basis.b[(row, c)] != 0.0)
            .map(|c| (base + c, self.basis.b[(row, c)]))
            .collect();
        (terms, offset)
    }
}

struct FitVars {
    y_ranges: Vec<std::ops::Range<usize>>,
    eps: std::ops::Range<usize>,
}

/// Adds the certificate constraints, normalization, and monotonicity rows
/// shared by every estimation program. Residual handling is left to callers
/// via [`residual_norm_terms`].
fn assemble_constraints(
    bld: &mut ProgramBuilder,
    obs: &ObservationSet,
    field: &dyn FieldExpr,
    opts: &FitOptions,
) -> Result<FitVars> {
    let n_obs = obs.len();
    let mut y_ranges = Vec::with_capacity(n_obs);
    for o in obs.observations() {
        y_ranges.push(bld.free(o.region.num_eq()));
    }
    let eps = bld.nonneg(n_obs);

    for (j, o) in obs.observations().iter().enumerate() {
        let a = o.region.matrix();
        let y = &y_ranges[j];
        let component_expr = |i: usize| -> (Vec<(usize, f64)>, f64) {
            let (mut terms, offset) = field.expr(j, i);
            for r in 0..a.nrows() {
                let coef = a[(r, i)];
                if coef != 0.0 {
                    terms.push((y.start + r, -coef));
                }
            }
            (terms, offset)
        };
        // Dual feasibility per cone block: f(x_j) - A_j' y_j in C_j.
        let mut at = 0;
        for blk in o.region.cone().blocks() {
            let d = blk.dim();
            match blk {
                ConeBlock::Nonneg { .. } => {
                    for i in at..at + d {
                        let (terms, offset) = component_expr(i);
                        bld.ge(&terms, -offset);
                    }
                }
                ConeBlock::SecondOrder { .. } => {
                    let exprs: Vec<(Vec<(usize, f64)>, f64)> =
                        (at..at + d).map(component_expr).collect();
                    bld.soc_affine(&exprs);
                }
                ConeBlock::Zero { .. } => {
                    for i in at..at + d {
                        let (terms, offset) = component_expr(i);
                        bld.eq(&terms, -offset);
                    }
                }
            }
            at += d;
        }
        // Duality gap: x_j' f(x_j) - b_j' y_j <= eps_j.
        let mut gap_terms: Vec<(usize, f64)> = Vec::new();
        let mut gap_offset = 0.0;
        for i in 0..o.point.len() {
            let xi = o.point[i];
            if xi == 0.0 {
                continue;
            }
            let (terms, offset) = field.expr(j, i);
            gap_offset += xi * offset;
            for (v, c) in terms {
                gap_terms.push((v, xi * c));
            }
        }
        for r in 0..o.region.num_eq() {
            let br = o.region.rhs()[r];
            if br != 0.0 {
                gap_terms.push((y.start + r, -br));
            }
        }
        gap_terms.push((eps.start + j, -1.0));
        bld.le(&gap_terms, -gap_offset);
    }

    let n_sites = n_obs + opts.aux_points.len();
    match opts.normalization {
        Normalization::None => {}
        Normalization::MeanInner => {
            let n_obs_f = n_obs as f64;
            let mut terms: Vec<(usize, f64)> = Vec::new();
            let mut offset = 0.0;
            for (j, o) in obs.observations().iter().enumerate() {
                for i in 0..o.point.len() {
                    let xi = o.point[i];
                    if xi == 0.0 {
                        continue;
                    }
                    let (t, c) = field.expr(j, i);
                    offset += xi * c / n_obs_f;
                    for (v, coef) in t {
                        terms.push((v, xi * coef / n_obs_f));
                    }
                }
            }
            bld.eq(&terms, 1.0 - offset);
        }
        Normalization::Anchor { site, component, value } => {
            if site >= n_sites || component >= field.n_components() {
                return Err(Error::Invalid("anchor normalization out of range".into()));
            }
            let (terms, offset) = field.expr(site, component);
            bld.eq(&terms, value - offset);
        }
    }

    for pin in &opts.pins {
        if pin.site >= n_sites || pin.component >= field.n_components() {
            return Err(Error::Invalid("value pin out of range".into()));
        }
        let (terms, offset) = field.expr(pin.site, pin.component);
        bld.eq(&terms, pin.value - offset);
    }

    for pin in &opts.upper_pins {
        if pin.site >= n_sites || pin.component >= field.n_components() {
            return Err(Error::Invalid("upper pin out of range".into()));
        }
        let (terms, offset) = field.expr(pin.site, pin.component);
        bld.le(&terms, pin.value - offset);
    }

    for pair in &opts.monotone_pairs {
        if pair.lower >= n_sites || pair.upper >= n_sites || pair.component >= field.n_components()
        {
            return Err(Error::Invalid("monotone pair indexes out of range".into()));
        }
        let (lo_t, lo_c) = field.expr(pair.lower, pair.component);
        let (hi_t, hi_c) = field.expr(pair.upper, pair.component);
        let mut terms = lo_t;
        for (v, c) in hi_t {
            terms.push((v, -c));
        }
        bld.le(&terms, hi_c - lo_c);
    }

    Ok(FitVars { y_ranges, eps })
}

/// Materializes the residual norm as linear terms over (possibly auxiliary)
/// variables: the returned terms sum to an epigraph of `||eps||`. Minimizing
/// or bounding that sum is equivalent to minimizing/bounding the norm.
fn residual_norm_terms(
    bld: &mut ProgramBuilder,
    eps: &std::ops::Range<usize>,
    norm: ResidualNorm,
) -> Vec<(usize, f64)> {
    let n = eps.len();
    match norm {
        ResidualNorm::L1 => (0..n).map(|j| (eps.start + j, 1.0)).collect(),
        ResidualNorm::LInf => {
            let t = bld.nonneg(1).start;
            for j in 0..n {
                bld.le(&[(eps.start + j, 1.0), (t, -1.0)], 0.0);
            }
            vec![(t, 1.0)]
        }
        ResidualNorm::L2 => {
            let t = bld.nonneg(1).start;
            let mut exprs: Vec<(Vec<(usize, f64)>, f64)> = vec![(vec![(t, 1.0)], 0.0)];
            for j in 0..n {
                exprs.push((vec![(eps.start + j, 1.0)], 0.0));
            }
            bld.soc_affine(&exprs);
            vec![(t, 1.0)]
        }
        ResidualNorm::SquaredL2 => {
            // sum eps^2 <= t via the rotated-cone embedding
            // ||(2 eps, 1 - t)|| <= 1 + t.
            let t = bld.nonneg(1).start;
            let mut exprs: Vec<(Vec<(usize, f64)>, f64)> = vec![(vec![(t, 1.0)], 1.0)];
            for j in 0..n {
                exprs.push((vec![(eps.start + j, 2.0)], 0.0));
            }
            exprs.push((vec![(t, -1.0)], 1.0));
            bld.soc_affine(&exprs);
            vec![(t, 1.0)]
        }
    }
}

fn apply_residual_mode(
    bld: &mut ProgramBuilder,
    eps: &std::ops::Range<usize>,
    opts: &FitOptions,
) -> Result<Vec<(usize, f64)>> {
    let terms = residual_norm_terms(bld, eps, opts.residual_norm);
    match opts.mode {
        FitMode::Dualized { lambda } => {
            if lambda < 0.0 {
                return Err(Error::Invalid("lambda must be nonnegative".into()));
            }
            let w = lambda * opts.residual_weight;
            for &(v, c) in &terms {
                bld.lin_term(v, w * c);
            }
        }
        FitMode::Budget { kappa } => {
            if kappa < 0.0 {
                return Err(Error::Invalid("kappa must be nonnegative".into()));
            }
            bld.le(&terms, kappa);
        }
    }
    Ok(terms)
}

fn extract_certificates(
    obs: &ObservationSet,
    out: &SolveOutcome,
    vars: &FitVars,
    model: &dyn VectorField,
) -> (Vec<f64>, Vec<DVector<f64>>, bool) {
    let mut residuals = Vec::with_capacity(obs.len());
    let mut duals = Vec::with_capacity(obs.len());
    let mut ok = true;
    for (j, o) in obs.observations().iter().enumerate() {
        let eps = out.primal[vars.eps.start + j].max(0.0);
        let y = DVector::from_fn(o.region.num_eq(), |r, _| out.primal[vars.y_ranges[j].start + r]);
        let cert = EpsCertificate { epsilon: eps, dual: y.clone(), clamped: 0.0 };
        let f_val = model.eval(&o.point);
        if !vi::verify_certificate(&f_val, &o.point, &o.region, &cert, 1e-6).unwrap_or(false) {
            ok = false;
        }
        residuals.push(eps);
        duals.push(y);
    }
    (residuals, duals, ok)
}

/// Estimation programs are consumed at 1e-6, so their solves run at that
/// tolerance (the backend still targets an order tighter internally).
const FIT_TOLS: Tolerances = Tolerances { feas: 1e-6, gap: 1e-6 };

fn solve_fit_program_with(
    prog: &solver::ConicProgram,
    what: &str,
    tols: Tolerances,
) -> Result<SolveOutcome> {
    let out = solver::solve(prog, tols)?;
    match out.status {
        SolveStatus::Optimal => Ok(out),
        SolveStatus::Infeasible => Err(Error::Infeasible(what.into())),
        SolveStatus::Unbounded => Err(Error::Unbounded(what.into())),
        SolveStatus::NumericalFailure => {
            let cert = solver::certify(prog, &out);
            Err(Error::SolverFailure {
                detail: format!(
                    "{what}: backend {}, primal {:.2e}, dual {:.2e}, gap {:.2e}",
                    out.raw_status, cert.primal_residual, cert.dual_residual, cert.gap
                ),
                residual: cert.primal_residual.max(cert.dual_residual).max(cert.gap),
            })
        }
    }
}

fn solve_fit_program(prog: &solver::ConicProgram, what: &str) -> Result<SolveOutcome> {
    solve_fit_program_with(prog, what, FIT_TOLS)
}

// ---------------------------------------------------------------------------
// Parametric estimation
// ---------------------------------------------------------------------------

fn parametric_expr(
    obs: &ObservationSet,
    opts: &FitOptions,
    family: &ParametricFamily,
    theta_start: usize,
) -> ParametricExpr {
    let sites = obs
        .observations()
        .iter()
        .map(|o| &o.point)
        .chain(opts.aux_points.iter());
    let mut offsets = Vec::new();
    let mut designs = Vec::new();
    for p in sites {
        offsets.push(family.offset_at(p));
        designs.push(family.design_at(p));
    }
    ParametricExpr { theta_start, offsets, designs }
}

/// Adds the theta box and l1 epigraph; returns the objective terms
/// contributed by the regularization.
fn add_theta_structure(
    bld: &mut ProgramBuilder,
    theta: &std::ops::Range<usize>,
    family: &ParametricFamily,
    theta_l1: f64,
) -> Vec<(usize, f64)> {
    let (lo, hi) = family.bounds();
    for k in 0..family.n_params() {
        bld.ge(&[(theta.start + k, 1.0)], lo[k]);
        bld.le(&[(theta.start + k, 1.0)], hi[k]);
    }
    let mut reg_terms = Vec::new();
    if theta_l1 > 0.0 {
        let u = bld.nonneg(family.n_params());
        for k in 0..family.n_params() {
            bld.le(&[(theta.start + k, 1.0), (u.start + k, -1.0)], 0.0);
            bld.le(&[(theta.start + k, -1.0), (u.start + k, -1.0)], 0.0);
            reg_terms.push((u.start + k, theta_l1));
        }
    }
    reg_terms
}

/// Fits a parametric family: minimizes the residual norm (plus optional
/// `theta` regularization) subject to the certificate constraints and
/// `theta` in its box. Ties in `theta` are broken by minimal l2 norm via a
/// second-stage solve that pins the stage-one objective.
pub fn fit_parametric(
    obs: &ObservationSet,
    family: &Arc<ParametricFamily>,
    opts: &FitOptions,
) -> Result<FitResult> {
    if obs.ambient_dim() != family.dim() {
        return Err(Error::Dimension("family dimension differs from observations".into()));
    }

    let build = |pin_objective: Option<f64>| -> Result<(solver::ConicProgram, std::ops::Range<usize>, FitVars)> {
        let mut bld = ProgramBuilder::new();
        let theta = bld.free(family.n_params());
        let expr = parametric_expr(obs, opts, family, theta.start);
        let vars = assemble_constraints(&mut bld, obs, &expr, opts)?;
        let reg_terms = add_theta_structure(&mut bld, &theta, family, opts.theta_l1);
        match pin_objective {
            None => {
                // Stage one: residual norm (weighted) + regularization.
                let norm_terms = residual_norm_terms(&mut bld, &vars.eps, opts.residual_norm);
                let w = match opts.mode {
                    FitMode::Dualized { lambda } => lambda * opts.residual_weight,
                    FitMode::Budget { kappa } => {
                        bld.le(&norm_terms, kappa);
                        opts.residual_weight
                    }
                };
                for &(v, c) in &norm_terms {
                    bld.lin_term(v, w * c);
                }
                for &(v, c) in &reg_terms {
                    bld.lin_term(v, c);
                }
                if opts.theta_l2 > 0.0 {
                    for k in 0..family.n_params() {
                        bld.quad_term(theta.start + k, theta.start + k, opts.theta_l2);
                    }
                }
            }
            Some(z_star) => {
                // Stage two: pin stage-one objective, minimize ||theta||^2.
                let norm_terms = residual_norm_terms(&mut bld, &vars.eps, opts.residual_norm);
                let w = match opts.mode {
                    FitMode::Dualized { lambda } => lambda * opts.residual_weight,
                    FitMode::Budget { kappa } => {
                        bld.le(&norm_terms, kappa);
                        opts.residual_weight
                    }
                };
                let mut pinned: Vec<(usize, f64)> =
                    norm_terms.iter().map(|&(v, c)| (v, w * c)).collect();
                pinned.extend(reg_terms.iter().copied());
                bld.le(&pinned, z_star + 1e-9 * (1.0 + z_star.abs()));
                for k in 0..family.n_params() {
                    bld.quad_term(theta.start + k, theta.start + k, 1.0);
                }
            }
        }
        Ok((bld.build(), theta, vars))
    };

    let (prog1, theta1, vars1) = build(None)?;
    let out1 = solve_fit_program(&prog1, "parametric inverse-VI program")?;
    let z_star = out1.objective;

    let mut notes = Vec::new();
    // theta_l2 > 0 already makes the optimum unique in theta.
    let (out, theta_range, vars) = if opts.tie_break_theta && opts.theta_l2 == 0.0 {
        match build(Some(z_star)).and_then(|(p, t, v)| Ok((solve_fit_program(&p, "theta tie-break stage")?, t, v))) {
            Ok((out2, t2, v2)) => {
                notes.push("theta tie-break stage applied".into());
                (out2, t2, v2)
            }
            // Tie-break is best-effort; the stage-one solution stands.
            Err(_) => (out1, theta1, vars1),
        }
    } else {
        (out1, theta1, vars1)
    };

    let theta = DVector::from_fn(family.n_params(), |k, _| out.primal[theta_range.start + k]);
    let model = FitModel::Parametric(ParamFit { theta, family: family.clone() });
    let (residuals, duals, certificates_ok) = extract_certificates(obs, &out, &vars, &model);
    let residual_norm_value = opts.residual_norm.value(&residuals);
    Ok(FitResult {
        model,
        residuals,
        duals,
        objective: z_star,
        residual_norm_value,
        metadata: FitMetadata { solver_gap: out.gap, certificates_ok, mode: opts.mode, notes },
    })
}

// ---------------------------------------------------------------------------
// Nonparametric estimation
// ---------------------------------------------------------------------------

/// Deduplicates site points (observations then aux) at 1e-12 tolerance,
/// returning the anchor list and the anchor index of each site.
fn dedup_anchors(obs: &ObservationSet, opts: &FitOptions) -> (Vec<DVector<f64>>, Vec<usize>) {
    let mut anchors: Vec<DVector<f64>> = Vec::new();
    let mut anchor_of = Vec::with_capacity(obs.len() + opts.aux_points.len());
    let sites = obs
        .observations()
        .iter()
        .map(|o| &o.point)
        .chain(opts.aux_points.iter());
    for p in sites {
        match anchors.iter().position(|a| (a - p).amax() <= 1e-12) {
            Some(i) => anchor_of.push(i),
            None => {
                anchors.push(p.clone());
                anchor_of.push(anchors.len() - 1);
            }
        }
    }
    (anchors, anchor_of)
}

struct NonparametricProgram {
    prog: solver::ConicProgram,
    expr: KernelExpr,
    vars: FitVars,
    anchors: Vec<DVector<f64>>,
}

/// Objective selector for the nonparametric program.
enum NonparamObjective {
    /// `sum_i alpha_i' K alpha_i` plus the mode's residual pricing.
    MinNorm,
    /// Residual norm only (minimal-kappa passes).
    ResidualOnly,
    /// No objective: constraints only, for callers that swap in linear
    /// objectives per solve (envelopes).
    Feasibility,
}

fn build_nonparametric(
    obs: &ObservationSet,
    spec: KernelSpec,
    opts: &FitOptions,
    prior: Option<&dyn VectorField>,
    objective: NonparamObjective,
) -> Result<NonparametricProgram> {
    spec.validate()?;
    let (anchors, anchor_of) = dedup_anchors(obs, opts);
    // The spectral truncation below also handles the tiny negative
    // eigenvalues that the jitter policy would repair, so the raw Gram
    // backs the basis; the check still rejects genuinely indefinite ones.
    let (k_raw, _k_obj) = gram_psd_checked(spec, &anchors)?;
    let n_comp = obs.ambient_dim();
    if opts.zero_components.iter().any(|&i| i >= n_comp) {
        return Err(Error::Invalid("zero-component index out of range".into()));
    }
    let mut active_of: Vec<Option<usize>> = Vec::with_capacity(n_comp);
    let mut slot = 0;
    for i in 0..n_comp {
        if opts.zero_components.contains(&i) {
            active_of.push(None);
        } else {
            active_of.push(Some(slot));
            slot += 1;
        }
    }

    let basis = ValueBasis::from_gram(&k_raw);
    let rank = basis.rank();

    let mut bld = ProgramBuilder::new();
    bld.max_iter(500);
    let w = bld.free(slot * rank);
    let offsets = match prior {
        Some(f) => {
            let mut per_site: Vec<DVector<f64>> =
                obs.observations().iter().map(|o| f.eval(&o.point)).collect();
            per_site.extend(opts.aux_points.iter().map(|p| f.eval(p)));
            Some(per_site)
        }
        None => None,
    };
    let expr = KernelExpr {
        w_start: w.start,
        n_components: n_comp,
        rank,
        basis,
        anchor_of,
        active_of,
        offsets,
    };
    let vars = assemble_constraints(&mut bld, obs, &expr, opts)?;
    let active: Vec<usize> = (0..n_comp).filter(|i| expr.active_of[*i].is_some()).collect();

    match objective {
        NonparamObjective::MinNorm => {
            apply_residual_mode(&mut bld, &vars.eps, opts)?;
            // alpha' K alpha = w'w in the value basis.
            for &i in &active {
                for c in 0..rank {
                    let v = expr.w_var(i, c).unwrap();
                    bld.quad_term(v, v, 1.0);
                }
            }
        }
        NonparamObjective::ResidualOnly => {
            let terms = residual_norm_terms(&mut bld, &vars.eps, opts.residual_norm);
            for &(v, c) in &terms {
                bld.lin_term(v, c);
            }
        }
        NonparamObjective::Feasibility => {
            apply_residual_mode(&mut bld, &vars.eps, opts)?;
        }
    }

    // Optional per-active-component norm caps: ||w_i||^2 <= cap_i.
    if let Some(caps) = &opts.norm_caps {
        if caps.len() != expr.n_active() {
            return Err(Error::Dimension("one norm cap per active component required".into()));
        }
        for (&i, &cap) in active.iter().zip(caps.iter()) {
            if cap < 0.0 {
                return Err(Error::Invalid("norm caps must be nonnegative".into()));
            }
            // u'u <= cap  <=>  ||(2u, 1 - cap)|| <= 1 + cap.
            let mut exprs: Vec<(Vec<(usize, f64)>, f64)> = vec![(vec![], 1.0 + cap)];
            for c in 0..rank {
                exprs.push((vec![(expr.w_var(i, c).unwrap(), 2.0)], 0.0));
            }
            exprs.push((vec![], 1.0 - cap));
            bld.soc_affine(&exprs);
        }
    }

    Ok(NonparametricProgram { prog: bld.build(), expr, vars, anchors })
}

fn extract_expansion(
    built: &NonparametricProgram,
    out: &SolveOutcome,
    spec: KernelSpec,
) -> Result<KernelExpansion> {
    let n_anchors = built.anchors.len();
    let rank = built.expr.rank;
    let mut weights = DMatrix::zeros(built.expr.n_components, n_anchors);
    for i in 0..built.expr.n_components {
        if built.expr.active_of[i].is_none() {
            continue;
        }
        let w_i = DVector::from_fn(rank, |c, _| out.primal[built.expr.w_var(i, c).unwrap()]);
        let alpha = &built.expr.basis.alpha_from_w * w_i;
        for l in 0..n_anchors {
            weights[(i, l)] = alpha[l];
        }
    }
    KernelExpansion::new(built.anchors.clone(), weights, spec)
}

/// Minimal residual-norm value over the certificate constraints alone; the
/// hint reported when a hard budget turns out infeasible.
fn minimal_kappa_hint(obs: &ObservationSet, spec: KernelSpec, opts: &FitOptions) -> Option<f64> {
    let relaxed = FitOptions {
        mode: FitMode::Dualized { lambda: 1.0 },
        norm_caps: None,
        ..opts.clone()
    };
    let built = build_nonparametric(obs, spec, &relaxed, None, NonparamObjective::ResidualOnly).ok()?;
    let out = solver::solve(&built.prog, FIT_TOLS).ok()?;
    (out.status == SolveStatus::Optimal).then(|| out.objective.max(0.0))
}

/// Fits the kernel expansion of minimal summed squared RKHS norm subject to
/// the certificate constraints, with residuals handled per `opts.mode`.
pub fn fit_nonparametric(
    obs: &ObservationSet,
    spec: KernelSpec,
    opts: &FitOptions,
) -> Result<FitResult> {
    let built = build_nonparametric(obs, spec, opts, None, NonparamObjective::MinNorm)?;
    let out = match solve_fit_program(&built.prog, "nonparametric inverse-VI program") {
        Ok(out) => out,
        Err(Error::Infeasible(_)) => {
            return Err(Error::Infeasible(match minimal_kappa_hint(obs, spec, opts) {
                Some(h) => {
                    format!("residual budget infeasible; minimal feasible kappa is about {h:.6e}")
                }
                None => "residual budget infeasible".into(),
            }));
        }
        Err(e) => return Err(e),
    };
    let expansion = extract_expansion(&built, &out, spec)?;
    let model = FitModel::Nonparametric(expansion);
    let (residuals, duals, certificates_ok) = extract_certificates(obs, &out, &built.vars, &model);
    let residual_norm_value = opts.residual_norm.value(&residuals);
    Ok(FitResult {
        model,
        residuals,
        duals,
        objective: out.objective,
        residual_norm_value,
        metadata: FitMetadata {
            solver_gap: out.gap,
            certificates_ok,
            mode: opts.mode,
            notes: vec![],
        },
    })
}

/// Semiparametric fit around a prior: `f = f0 + g`, minimizing the RKHS
/// norms of the correction `g`. Callers usually pass
/// `Normalization::None` since the prior already pins the scale.
pub fn fit_with_prior(
    obs: &ObservationSet,
    spec: KernelSpec,
    prior: Arc<dyn VectorField + Send + Sync>,
    opts: &FitOptions,
) -> Result<FitResult> {
    if prior.dim() != obs.ambient_dim() {
        return Err(Error::Dimension("prior dimension differs from observations".into()));
    }
    let built =
        build_nonparametric(obs, spec, opts, Some(prior.as_ref()), NonparamObjective::MinNorm)?;
    let out = solve_fit_program(&built.prog, "prior-corrected inverse-VI program")?;
    let correction = extract_expansion(&built, &out, spec)?;
    let model = FitModel::WithPrior { prior, correction };
    let (residuals, duals, certificates_ok) = extract_certificates(obs, &out, &built.vars, &model);
    let residual_norm_value = opts.residual_norm.value(&residuals);
    Ok(FitResult {
        model,
        residuals,
        duals,
        objective: out.objective,
        residual_norm_value,
        metadata: FitMetadata {
            solver_gap: out.gap,
            certificates_ok,
            mode: opts.mode,
            notes: vec![],
        },
    })
}

/// Pointwise ambiguity envelope: min and max of `f_component(point)` over
/// all kernel expansions on the data anchors satisfying the certificate
/// constraints with `||eps|| <= kappa`, plus the normalization (and any
/// norm caps / monotone pairs) carried by `opts`. Envelope width is
/// nondecreasing in kappa at every query.
pub fn ambiguity_envelope(
    obs: &ObservationSet,
    spec: KernelSpec,
    kappa: f64,
    queries: &[(DVector<f64>, usize)],
    opts: &FitOptions,
) -> Result<Vec<(f64, f64)>> {
    let env_opts = FitOptions { mode: FitMode::Budget { kappa }, ..opts.clone() };
    // One constraint system serves every query: only the linear objective
    // changes between solves.
    let built = build_nonparametric(obs, spec, &env_opts, None, NonparamObjective::Feasibility)?;
    let mut results = Vec::with_capacity(queries.len());
    for (point, component) in queries {
        if *component >= obs.ambient_dim() {
            return Err(Error::Invalid("query component out of range".into()));
        }
        if built.expr.active_of[*component].is_none() {
            return Err(Error::Invalid("query component is zero-masked".into()));
        }
        let coefs = DVector::from_fn(built.anchors.len(), |l, _| {
            eval_kernel(spec, &built.anchors[l], point)
        });
        let wq = built.expr.basis.alpha_from_w.transpose() * &coefs;
        let mut bounds = [0.0f64; 2];
        for (slot, sense) in [(0usize, 1.0f64), (1usize, -1.0f64)] {
            let terms: Vec<(usize, f64)> = (0..built.expr.rank)
                .filter(|&c| wq[c] != 0.0)
                .map(|c| (built.expr.w_var(*component, c).unwrap(), sense * wq[c]))
                .collect();
            let prog = built.prog.with_extra_linear(&terms);
            // Envelope values are primal (inner) bounds, so a looser duality
            // gap only narrows the reported interval; accept accordingly.
            let env_tols = Tolerances { feas: 1e-6, gap: 1e-4 };
            let out = match solve_fit_program_with(&prog, "ambiguity envelope program", env_tols) {
                Ok(out) => out,
                Err(Error::Infeasible(_)) => {
                    return Err(Error::Infeasible(match minimal_kappa_hint(obs, spec, &env_opts) {
                        Some(h) => format!(
                            "kappa {kappa:.3e} infeasible; minimal feasible value is about {h:.6e}"
                        ),
                        None => format!("kappa {kappa:.3e} infeasible"),
                    }));
                }
                Err(Error::Unbounded(_)) => {
                    return Err(Error::Unbounded(
                        "envelope direction unbounded; supply per-component norm caps".into(),
                    ));
                }
                Err(e) => return Err(e),
            };
            bounds[slot] = sense * out.objective;
        }
        results.push((bounds[0].min(bounds[1]), bounds[0].max(bounds[1])));
    }
    Ok(results)
}
