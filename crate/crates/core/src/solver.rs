//! One solving contract for linear, convex-quadratic, and second-order-cone
//! programs with primal/dual output.
//!
//! Programs are stated in standard form
//!
//! ```text
//!   minimize    x' Q x + c' x
//!   subject to  A x = b,    x_blk in K_blk  for each variable block
//! ```
//!
//! where each variable block is free, nonnegative, a second-order cone, or
//! pinned to zero. An interior-point implementation (Clarabel) sits behind
//! [`solve`]; nothing outside this module depends on which solver runs.
//! [`certify`] recomputes all residuals by direct substitution so callers can
//! check outcomes independently of solver internals.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cone membership of one contiguous block of variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarBlock {
    Free(usize),
    Nonneg(usize),
    /// Second-order cone `{ (t, u) : t >= ||u||_2 }` of the given total dim.
    Soc(usize),
    Zero(usize),
}

impl VarBlock {
    pub fn dim(&self) -> usize {
        match *self {
            VarBlock::Free(d) | VarBlock::Nonneg(d) | VarBlock::Soc(d) | VarBlock::Zero(d) => d,
        }
    }
}

/// Solve tolerances: primal/dual feasibility and duality gap.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub feas: f64,
    pub gap: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        // Estimation layers consume results at 1e-6, leaving headroom.
        Tolerances { feas: 1e-8, gap: 1e-8 }
    }
}

/// A conic program in standard form. Immutable once built.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    n: usize,
    /// Quadratic objective terms `coeff * x_i * x_j`, summed over duplicates.
    quad: Vec<(usize, usize, f64)>,
    linear: Vec<f64>,
    /// Equality rows as (terms, rhs); terms are (col, coeff).
    rows: Vec<(Vec<(usize, f64)>, f64)>,
    blocks: Vec<VarBlock>,
    max_iter: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

/// Result of a solve. On `Optimal`, `primal` and the duals satisfy the
/// program's optimality system to within the requested tolerances.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    /// Backend termination status, for diagnostics.
    pub raw_status: String,
    pub primal: DVector<f64>,
    /// Multipliers `y` for the equality rows, signed so that for an LP the
    /// dual reads `max b'y  s.t.  A'y <=_K c` and `b'y` equals the optimum.
    pub eq_dual: DVector<f64>,
    /// Reduced costs `z = 2Qx + c - A'y`, one per variable; lies in the dual
    /// cone of the variable blocks at optimality.
    pub cone_dual: DVector<f64>,
    /// Objective value at `primal`.
    pub objective: f64,
    /// Primal-dual gap reported at termination.
    pub gap: f64,
}

/// Residuals recomputed from scratch for an outcome.
#[derive(Debug, Clone, Copy)]
pub struct Certificate {
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
}

impl ConicProgram {
    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_eq_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn blocks(&self) -> &[VarBlock] {
        &self.blocks
    }

    /// A copy of the program with extra linear objective terms (summed onto
    /// any existing coefficients). Lets one constraint system serve many
    /// objectives without reassembly.
    pub fn with_extra_linear(&self, terms: &[(usize, f64)]) -> ConicProgram {
        let mut prog = self.clone();
        for &(i, c) in terms {
            prog.linear[i] += c;
        }
        prog
    }

    /// Objective `x'Qx + c'x` evaluated at `x`.
    pub fn objective_at(&self, x: &DVector<f64>) -> f64 {
        let mut v = 0.0;
        for &(i, j, q) in &self.quad {
            v += q * x[i] * x[j];
        }
        for (i, &c) in self.linear.iter().enumerate() {
            v += c * x[i];
        }
        v
    }

    /// Max-norm violation of the equality rows at `x`.
    pub fn eq_residual_at(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for (terms, rhs) in &self.rows {
            let mut lhs = 0.0;
            for &(col, coef) in terms {
                lhs += coef * x[col];
            }
            worst = worst.max((lhs - rhs).abs());
        }
        worst
    }

    /// Distance (infinity-ish norm) of `x` from the variable cones.
    pub fn cone_residual_at(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        let mut at = 0;
        for blk in &self.blocks {
            let d = blk.dim();
            match blk {
                VarBlock::Free(_) => {}
                VarBlock::Nonneg(_) => {
                    for k in at..at + d {
                        worst = worst.max(-x[k]);
                    }
                }
                VarBlock::Soc(_) => {
                    let mut nrm = 0.0;
                    for k in at + 1..at + d {
                        nrm += x[k] * x[k];
                    }
                    worst = worst.max(nrm.sqrt() - x[at]);
                }
                VarBlock::Zero(_) => {
                    for k in at..at + d {
                        worst = worst.max(x[k].abs());
                    }
                }
            }
            at += d;
        }
        worst.max(0.0)
    }

    fn dual_cone_residual(&self, z: &DVector<f64>) -> f64 {
        // All non-free blocks are self-dual; free blocks require z = 0.
        let mut worst: f64 = 0.0;
        let mut at = 0;
        for blk in &self.blocks {
            let d = blk.dim();
            match blk {
                VarBlock::Free(_) => {
                    for k in at..at + d {
                        worst = worst.max(z[k].abs());
                    }
                }
                VarBlock::Nonneg(_) => {
                    for k in at..at + d {
                        worst = worst.max(-z[k]);
                    }
                }
                VarBlock::Soc(_) => {
                    let mut nrm = 0.0;
                    for k in at + 1..at + d {
                        nrm += z[k] * z[k];
                    }
                    worst = worst.max(nrm.sqrt() - z[at]);
                }
                // Dual of {0} is everything.
                VarBlock::Zero(_) => {}
            }
            at += d;
        }
        worst.max(0.0)
    }

    /// `2Qx` (gradient of the quadratic part).
    fn quad_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.n);
        for &(i, j, q) in &self.quad {
            g[i] += q * x[j];
            g[j] += q * x[i];
        }
        g
    }

    /// `A'y` for the equality rows.
    fn eq_transpose_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (r, (terms, _)) in self.rows.iter().enumerate() {
            for &(col, coef) in terms {
                out[col] += coef * y[r];
            }
        }
        out
    }
}

/// Incremental construction of a [`ConicProgram`].
///
/// Variables are allocated in blocks; `<=` and `>=` rows get nonnegative
/// slack variables appended after all user variables. Adjacent blocks of the
/// same kind are merged when building.
#[derive(Debug, Default)]
pub struct ProgramBuilder {
    blocks: Vec<VarBlock>,
    n: usize,
    quad: Vec<(usize, usize, f64)>,
    linear: Vec<(usize, f64)>,
    rows: Vec<(Vec<(usize, f64)>, f64)>,
    // (row index, sign) pairs waiting for a slack column: sign +1 for `<=`.
    pending_slacks: Vec<(usize, f64)>,
    max_iter: u32,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        ProgramBuilder { max_iter: 200, ..Default::default() }
    }

    fn push_block(&mut self, blk: VarBlock) -> std::ops::Range<usize> {
        let start = self.n;
        self.n += blk.dim();
        self.blocks.push(blk);
        start..self.n
    }

    pub fn free(&mut self, k: usize) -> std::ops::Range<usize> {
        self.push_block(VarBlock::Free(k))
    }

    pub fn nonneg(&mut self, k: usize) -> std::ops::Range<usize> {
        self.push_block(VarBlock::Nonneg(k))
    }

    pub fn soc(&mut self, k: usize) -> std::ops::Range<usize> {
        self.push_block(VarBlock::Soc(k))
    }

    pub fn zero(&mut self, k: usize) -> std::ops::Range<usize> {
        self.push_block(VarBlock::Zero(k))
    }

    /// Adds `coeff * x_i * x_j` to the objective.
    pub fn quad_term(&mut self, i: usize, j: usize, coeff: f64) {
        if coeff != 0.0 {
            self.quad.push((i, j, coeff));
        }
    }

    /// Adds `coeff * x_i` to the objective.
    pub fn lin_term(&mut self, i: usize, coeff: f64) {
        if coeff != 0.0 {
            self.linear.push((i, coeff));
        }
    }

    /// Equality row `sum coeff*x = rhs`.
    pub fn eq(&mut self, terms: &[(usize, f64)], rhs: f64) {
        self.rows.push((terms.to_vec(), rhs));
    }

    /// Inequality `sum coeff*x <= rhs` (slack added at build time).
    pub fn le(&mut self, terms: &[(usize, f64)], rhs: f64) {
        self.rows.push((terms.to_vec(), rhs));
        self.pending_slacks.push((self.rows.len() - 1, 1.0));
    }

    /// Inequality `sum coeff*x >= rhs`.
    pub fn ge(&mut self, terms: &[(usize, f64)], rhs: f64) {
        self.rows.push((terms.to_vec(), rhs));
        self.pending_slacks.push((self.rows.len() - 1, -1.0));
    }

    /// Constrains the affine expressions to a second-order cone:
    /// `exprs[0] >= || exprs[1..] ||_2`. Each expression is (terms, offset).
    pub fn soc_affine(&mut self, exprs: &[(Vec<(usize, f64)>, f64)]) {
        let u = self.soc(exprs.len());
        for (k, (terms, offset)) in exprs.iter().enumerate() {
            // u_k - expr_k = offset, so u_k = expr_k + offset.
            let mut row: Vec<(usize, f64)> = vec![(u.start + k, 1.0)];
            for &(col, coef) in terms {
                row.push((col, -coef));
            }
            self.rows.push((row, *offset));
        }
    }

    pub fn max_iter(&mut self, it: u32) {
        self.max_iter = it;
    }

    pub fn build(mut self) -> ConicProgram {
        // Materialize slack columns, merged into one trailing nonneg block.
        if !self.pending_slacks.is_empty() {
            let slacks = self.nonneg(self.pending_slacks.len());
            for (k, (row, sign)) in self.pending_slacks.iter().enumerate() {
                self.rows[*row].0.push((slacks.start + k, *sign));
            }
        }
        // Merge adjacent blocks of the same kind (SOC blocks never merge).
        let mut merged: Vec<VarBlock> = Vec::with_capacity(self.blocks.len());
        for blk in self.blocks {
            match (merged.last_mut(), blk) {
                (Some(VarBlock::Nonneg(a)), VarBlock::Nonneg(b)) => *a += b,
                (Some(VarBlock::Free(a)), VarBlock::Free(b)) => *a += b,
                (Some(VarBlock::Zero(a)), VarBlock::Zero(b)) => *a += b,
                (_, b) => merged.push(b),
            }
        }
        let mut linear = vec![0.0; self.n];
        for (i, c) in self.linear {
            linear[i] += c;
        }
        ConicProgram {
            n: self.n,
            quad: self.quad,
            linear,
            rows: self.rows,
            blocks: merged,
            max_iter: self.max_iter,
        }
    }
}

/// Builds the Clarabel data `(P, q, A, b, cones)` for a program.
fn to_clarabel(
    p: &ConicProgram,
) -> (CscMatrix<f64>, Vec<f64>, CscMatrix<f64>, Vec<f64>, Vec<SupportedConeT<f64>>) {
    let n = p.n;
    // P = 2*sym(Q), upper triangle only.
    let mut p_upper: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
    for &(i, j, q) in &p.quad {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        let add = if i == j { 2.0 * q } else { q };
        *p_upper.entry((b, a)).or_insert(0.0) += add; // keyed (col, row)
    }
    let p_mat = csc_from_map(n, n, &p_upper);

    // Constraint matrix: equality rows first, then -I rows for non-free blocks.
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut b = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    for (r, (terms, rhs)) in p.rows.iter().enumerate() {
        for &(col, coef) in terms {
            triplets.push((r, col, coef));
        }
        b.push(*rhs);
    }
    if !p.rows.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(p.rows.len()));
    }
    let mut row_at = p.rows.len();
    let mut var_at = 0;
    for blk in &p.blocks {
        let d = blk.dim();
        match blk {
            VarBlock::Free(_) => {}
            VarBlock::Nonneg(_) | VarBlock::Soc(_) | VarBlock::Zero(_) => {
                for k in 0..d {
                    triplets.push((row_at + k, var_at + k, -1.0));
                    b.push(0.0);
                }
                cones.push(match blk {
                    VarBlock::Nonneg(_) => SupportedConeT::NonnegativeConeT(d),
                    VarBlock::Soc(_) => SupportedConeT::SecondOrderConeT(d),
                    VarBlock::Zero(_) => SupportedConeT::ZeroConeT(d),
                    VarBlock::Free(_) => unreachable!(),
                });
                row_at += d;
            }
        }
        var_at += d;
    }
    let a_mat = csc_from_triplets(row_at, n, &mut triplets);
    (p_mat, p.linear.clone(), a_mat, b, cones)
}

fn csc_from_map(m: usize, n: usize, entries: &std::collections::BTreeMap<(usize, usize), f64>) -> CscMatrix<f64> {
    // Map is keyed (col, row) so iteration is already column-major.
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(entries.len());
    let mut nzval = Vec::with_capacity(entries.len());
    for (&(col, row), &v) in entries {
        colptr[col + 1] += 1;
        rowval.push(row);
        nzval.push(v);
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    let _ = m;
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

fn csc_from_triplets(m: usize, n: usize, triplets: &mut Vec<(usize, usize, f64)>) -> CscMatrix<f64> {
    triplets.sort_by_key(|&(r, c, _)| (c, r));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval: Vec<usize> = Vec::with_capacity(triplets.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(triplets.len());
    let mut last: Option<(usize, usize)> = None;
    for &(r, c, v) in triplets.iter() {
        if last == Some((r, c)) {
            *nzval.last_mut().unwrap() += v;
        } else {
            rowval.push(r);
            nzval.push(v);
            colptr[c + 1] += 1;
            last = Some((r, c));
        }
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

/// Solves the program. Deterministic: identical inputs produce identical
/// outcomes. `Optimal` outcomes carry residuals within `tols` under
/// [`certify`]; failures report the worst residual reached.
pub fn solve(program: &ConicProgram, tols: Tolerances) -> Result<SolveOutcome> {
    let (p_mat, q, a_mat, b, cones) = to_clarabel(program);
    // Target two orders below the acceptance tolerance so residuals have
    // headroom; AlmostSolved outcomes are then judged against `tols`.
    let settings = DefaultSettings {
        verbose: false,
        max_iter: program.max_iter,
        tol_feas: (tols.feas * 0.01).max(1e-12),
        tol_gap_abs: (tols.gap * 0.01).max(1e-12),
        tol_gap_rel: (tols.gap * 0.01).max(1e-12),
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p_mat, &q, &a_mat, &b, &cones, settings)
        .map_err(|e| Error::Invalid(format!("solver rejected program: {e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    let m_eq = program.rows.len();
    let primal = DVector::from_column_slice(&sol.x);
    let eq_dual = DVector::from_fn(m_eq, |r, _| -sol.z[r]);
    // Reduced costs for every variable; zero on free positions by optimality.
    let mut cone_dual = DVector::zeros(program.n);
    let mut row_at = m_eq;
    let mut var_at = 0;
    for blk in program.blocks() {
        let d = blk.dim();
        if !matches!(blk, VarBlock::Free(_)) {
            for k in 0..d {
                cone_dual[var_at + k] = sol.z[row_at + k];
            }
            row_at += d;
        }
        var_at += d;
    }
    let objective = program.objective_at(&primal);
    let mut outcome = SolveOutcome {
        status: SolveStatus::NumericalFailure,
        raw_status: format!("{:?}", sol.status),
        primal,
        eq_dual,
        cone_dual,
        objective,
        gap: (sol.obj_val - sol.obj_val_dual).abs(),
    };
    outcome.status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        SolverStatus::AlmostSolved => {
            // Accept if substitution says the requested tolerances hold
            // anyway; the gap is judged relative to the objective scale.
            let cert = certify(program, &outcome);
            let scale = 10.0 + outcome.objective.abs();
            if cert.primal_residual <= tols.feas && cert.gap <= tols.gap * scale {
                SolveStatus::Optimal
            } else {
                SolveStatus::NumericalFailure
            }
        }
        _ => SolveStatus::NumericalFailure,
    };
    Ok(outcome)
}

/// Convenience: solve and require optimality.
pub fn solve_optimal(program: &ConicProgram, tols: Tolerances) -> Result<SolveOutcome> {
    let out = solve(program, tols)?;
    match out.status {
        SolveStatus::Optimal => Ok(out),
        SolveStatus::Infeasible => Err(Error::Infeasible("conic program".into())),
        SolveStatus::Unbounded => Err(Error::Unbounded("conic program".into())),
        SolveStatus::NumericalFailure => {
            let cert = certify(program, &out);
            Err(Error::SolverFailure {
                detail: format!(
                    "interior-point did not reach tolerance (primal {:.2e}, dual {:.2e}, gap {:.2e})",
                    cert.primal_residual, cert.dual_residual, cert.gap
                ),
                residual: cert.primal_residual.max(cert.dual_residual).max(cert.gap),
            })
        }
    }
}

/// Recomputes primal/dual residuals and the gap by direct substitution,
/// independently of solver internals.
pub fn certify(program: &ConicProgram, outcome: &SolveOutcome) -> Certificate {
    let x = &outcome.primal;
    let primal_residual = program.eq_residual_at(x).max(program.cone_residual_at(x));

    // Stationarity: 2Qx + c - A'y - z = 0, plus z in the dual cone.
    let mut stat = program.quad_grad(x);
    for (i, c) in program.linear.iter().enumerate() {
        stat[i] += c;
    }
    stat -= program.eq_transpose_mul(&outcome.eq_dual);
    stat -= &outcome.cone_dual;
    let dual_residual = stat.amax().max(program.dual_cone_residual(&outcome.cone_dual));

    // Gap between primal objective and the conic dual objective
    // -x'Qx + b'y (the quadratic term enters the dual negated).
    let mut quad_val = 0.0;
    for &(i, j, q) in &program.quad {
        quad_val += q * x[i] * x[j];
    }
    let mut by = 0.0;
    for (r, (_, rhs)) in program.rows.iter().enumerate() {
        by += rhs * outcome.eq_dual[r];
    }
    let dual_obj = -quad_val + by;
    Certificate {
        primal_residual,
        dual_residual,
        gap: (outcome.objective - dual_obj).abs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_attaining_lp() {
        // min x s.t. x >= 0
        let mut b = ProgramBuilder::new();
        let x = b.nonneg(1);
        b.lin_term(x.start, 1.0);
        let prog = b.build();
        let out = solve(&prog, Tolerances::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        assert!(out.primal[0].abs() < 1e-8);
        assert!(out.objective.abs() < 1e-8);
    }

    #[test]
    fn contradictory_bounds_infeasible() {
        // min 0 s.t. x >= 1, -x >= 0
        let mut b = ProgramBuilder::new();
        let x = b.free(1);
        b.ge(&[(x.start, 1.0)], 1.0);
        b.ge(&[(x.start, -1.0)], 0.0);
        let prog = b.build();
        let out = solve(&prog, Tolerances::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Infeasible);
    }

    #[test]
    fn unbounded_detected() {
        // min -x s.t. x >= 0
        let mut b = ProgramBuilder::new();
        let x = b.nonneg(1);
        b.lin_term(x.start, -1.0);
        let prog = b.build();
        let out = solve(&prog, Tolerances::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Unbounded);
    }

    #[test]
    fn equality_dual_sign_matches_lp_convention() {
        // min c'x s.t. 1'x = 1, x >= 0 over R^3; optimum picks min c_i,
        // dual y satisfies A'y <= c and b'y = optimum.
        let c = [3.0, 1.0, 2.0];
        let mut b = ProgramBuilder::new();
        let x = b.nonneg(3);
        for k in 0..3 {
            b.lin_term(x.start + k, c[k]);
        }
        b.eq(&[(x.start, 1.0), (x.start + 1, 1.0), (x.start + 2, 1.0)], 1.0);
        let prog = b.build();
        let out = solve(&prog, Tolerances::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        assert!((out.objective - 1.0).abs() < 1e-7);
        let y = out.eq_dual[0];
        assert!((y - 1.0).abs() < 1e-6); // dual optimum is min_i c_i
        for ci in c {
            assert!(y <= ci + 1e-8);
        }
    }

    #[test]
    fn exact_certificate_is_zero_residual() {
        // Hand-built optimal pair for min x, x >= 0: x=0, y empty, z=c.
        let mut b = ProgramBuilder::new();
        let x = b.nonneg(1);
        b.lin_term(x.start, 1.0);
        let prog = b.build();
        let outcome = SolveOutcome {
            status: SolveStatus::Optimal,
            raw_status: String::new(),
            primal: DVector::zeros(1),
            eq_dual: DVector::zeros(0),
            cone_dual: DVector::from_element(1, 1.0),
            objective: 0.0,
            gap: 0.0,
        };
        let cert = certify(&prog, &outcome);
        assert_eq!(cert.primal_residual, 0.0);
        assert_eq!(cert.dual_residual, 0.0);
        assert_eq!(cert.gap, 0.0);
    }

    #[test]
    fn perturbed_dual_shows_in_residual() {
        let mut b = ProgramBuilder::new();
        let x = b.nonneg(1);
        b.lin_term(x.start, 1.0);
        let prog = b.build();
        let delta = 0.125;
        let outcome = SolveOutcome {
            status: SolveStatus::Optimal,
            raw_status: String::new(),
            primal: DVector::zeros(1),
            eq_dual: DVector::zeros(0),
            cone_dual: DVector::from_element(1, 1.0 + delta),
            objective: 0.0,
            gap: 0.0,
        };
        let cert = certify(&prog, &outcome);
        assert!((cert.dual_residual - delta).abs() < 1e-15);
    }

    #[test]
    fn simple_qp_solution() {
        // min (x-1)^2 + (y-2)^2 s.t. x + y = 1 -> x = 0, y = 1.
        let mut b = ProgramBuilder::new();
        let v = b.free(2);
        b.quad_term(v.start, v.start, 1.0);
        b.quad_term(v.start + 1, v.start + 1, 1.0);
        b.lin_term(v.start, -2.0);
        b.lin_term(v.start + 1, -4.0);
        b.eq(&[(v.start, 1.0), (v.start + 1, 1.0)], 1.0);
        let prog = b.build();
        let out = solve(&prog, Tolerances::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        assert!((out.primal[0] - 0.0).abs() < 1e-7);
        assert!((out.primal[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn soc_projection_program() {
        // min ||u - (3, 4)||^2 with (t, u) in SOC and t = 2.5:
        // projection of a point onto a norm ball via epigraph.
        let mut b = ProgramBuilder::new();
        let s = b.soc(3);
        b.eq(&[(s.start, 1.0)], 2.5);
        b.quad_term(s.start + 1, s.start + 1, 1.0);
        b.quad_term(s.start + 2, s.start + 2, 1.0);
        b.lin_term(s.start + 1, -6.0);
        b.lin_term(s.start + 2, -8.0);
        let prog = b.build();
        let out = solve(&prog, Tolerances::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        // Optimal u = 2.5 * (3,4)/5 = (1.5, 2.0).
        assert!((out.primal[1] - 1.5).abs() < 1e-6);
        assert!((out.primal[2] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn determinism_two_solves_identical() {
        let mut b = ProgramBuilder::new();
        let x = b.nonneg(4);
        for k in 0..4 {
            b.lin_term(x.start + k, (k as f64) - 1.5);
            b.quad_term(x.start + k, x.start + k, 1.0);
        }
        b.eq(&[(x.start, 1.0), (x.start + 2, 2.0)], 1.0);
        let prog = b.build();
        let a = solve(&prog, Tolerances::default()).unwrap();
        let c = solve(&prog, Tolerances::default()).unwrap();
        assert_eq!(a.status, c.status);
        assert_eq!(a.objective.to_bits(), c.objective.to_bits());
        assert_eq!(a.primal, c.primal);
    }
}
