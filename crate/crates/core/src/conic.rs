//! Conic-representable feasible regions in standard form
//! `F = { x : A x = b, x in C }` where `C` is a product of self-dual cone
//! blocks (nonnegative orthant, second-order cone, zero cone).
//!
//! Regions are immutable values; all operations are pure.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{self, ProgramBuilder, SolveStatus, Tolerances};

/// Feasibility tolerance used when none is supplied (one order looser than
/// the solver tolerance 1e-8).
pub const DEFAULT_FEAS_TOL: f64 = 1e-7;
/// Interiority tolerance for Slater checks.
pub const DEFAULT_INTERIOR_TOL: f64 = 1e-6;

/// One block of a product cone. Every block is proper and self-dual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConeBlock {
    Nonneg { dim: usize },
    SecondOrder { dim: usize },
    Zero { dim: usize },
}

impl ConeBlock {
    pub fn dim(&self) -> usize {
        match *self {
            ConeBlock::Nonneg { dim } | ConeBlock::SecondOrder { dim } | ConeBlock::Zero { dim } => {
                dim
            }
        }
    }
}

/// A product of cone blocks over contiguous coordinate ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cone {
    blocks: Vec<ConeBlock>,
}

impl Cone {
    pub fn new(blocks: Vec<ConeBlock>) -> Result<Self> {
        if blocks.iter().any(|b| b.dim() == 0) {
            return Err(Error::Invalid("cone block with zero dimension".into()));
        }
        if blocks
            .iter()
            .any(|b| matches!(b, ConeBlock::SecondOrder { dim } if *dim < 2))
        {
            return Err(Error::Invalid("second-order cone block needs dim >= 2".into()));
        }
        Ok(Cone { blocks })
    }

    /// Nonnegative orthant of dimension `n`.
    pub fn orthant(n: usize) -> Self {
        Cone { blocks: vec![ConeBlock::Nonneg { dim: n }] }
    }

    pub fn blocks(&self) -> &[ConeBlock] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    /// Worst per-block violation of membership: 0 means inside.
    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        let mut at = 0;
        for blk in &self.blocks {
            let d = blk.dim();
            match blk {
                ConeBlock::Nonneg { .. } => {
                    for k in at..at + d {
                        worst = worst.max(-x[k]);
                    }
                }
                ConeBlock::SecondOrder { .. } => {
                    let mut nrm = 0.0;
                    for k in at + 1..at + d {
                        nrm += x[k] * x[k];
                    }
                    worst = worst.max(nrm.sqrt() - x[at]);
                }
                ConeBlock::Zero { .. } => {
                    for k in at..at + d {
                        worst = worst.max(x[k].abs());
                    }
                }
            }
            at += d;
        }
        worst.max(0.0)
    }

    /// Smallest per-block interiority margin of `x` over non-zero blocks
    /// (positive strictly inside; zero blocks are skipped).
    pub fn interior_margin(&self, x: &DVector<f64>) -> f64 {
        let mut margin = f64::INFINITY;
        let mut at = 0;
        for blk in &self.blocks {
            let d = blk.dim();
            match blk {
                ConeBlock::Nonneg { .. } => {
                    for k in at..at + d {
                        margin = margin.min(x[k]);
                    }
                }
                ConeBlock::SecondOrder { .. } => {
                    let mut nrm = 0.0;
                    for k in at + 1..at + d {
                        nrm += x[k] * x[k];
                    }
                    margin = margin.min(x[at] - nrm.sqrt());
                }
                ConeBlock::Zero { .. } => {}
            }
            at += d;
        }
        margin
    }

    /// Euclidean projection onto the cone (analytic per block).
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        let mut at = 0;
        for blk in &self.blocks {
            let d = blk.dim();
            match blk {
                ConeBlock::Nonneg { .. } => {
                    for k in at..at + d {
                        out[k] = out[k].max(0.0);
                    }
                }
                ConeBlock::SecondOrder { .. } => {
                    let t = x[at];
                    let mut nrm = 0.0;
                    for k in at + 1..at + d {
                        nrm += x[k] * x[k];
                    }
                    let nrm = nrm.sqrt();
                    if nrm <= t {
                        // already inside
                    } else if nrm <= -t {
                        for k in at..at + d {
                            out[k] = 0.0;
                        }
                    } else {
                        let coef = 0.5 * (1.0 + t / nrm);
                        out[at] = coef * nrm;
                        for k in at + 1..at + d {
                            out[k] = coef * x[k];
                        }
                    }
                }
                ConeBlock::Zero { .. } => {
                    for k in at..at + d {
                        out[k] = 0.0;
                    }
                }
            }
            at += d;
        }
        out
    }
}

/// A conic-representable feasible region `{ x : A x = b, x in C }`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleRegion {
    a: DMatrix<f64>,
    b: DVector<f64>,
    cone: Cone,
}

impl FeasibleRegion {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, cone: Cone) -> Result<Self> {
        if a.ncols() != cone.dim() {
            return Err(Error::Dimension(format!(
                "A has {} columns but the cone has total dim {}",
                a.ncols(),
                cone.dim()
            )));
        }
        if a.nrows() != b.len() {
            return Err(Error::Dimension(format!(
                "A has {} rows but b has {} entries",
                a.nrows(),
                b.len()
            )));
        }
        Ok(FeasibleRegion { a, b, cone })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn cone(&self) -> &Cone {
        &self.cone
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_eq(&self) -> usize {
        self.a.nrows()
    }

    /// `||Ax - b||_inf <= tol` and `x` within `tol` of the cone per block.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has dim {}, region has dim {}",
                x.len(),
                self.dim()
            )));
        }
        if tol <= 0.0 {
            return Err(Error::Invalid("tolerance must be positive".into()));
        }
        let resid = (&self.a * x - &self.b).amax();
        Ok(resid <= tol && self.cone.distance(x) <= tol)
    }

    /// Checks for a point with `Ax = b` that is at least `tol`-interior to
    /// every non-zero cone block, by maximizing the interiority margin.
    ///
    /// `Ok(false)` means no such point exists (including an empty region);
    /// solver breakdown is reported as an error instead.
    pub fn slater_check(&self, tol: f64) -> Result<bool> {
        Ok(self.slater_witness(tol)?.is_some())
    }

    /// As [`slater_check`](Self::slater_check), returning the witness point.
    pub fn slater_witness(&self, tol: f64) -> Result<Option<DVector<f64>>> {
        let n = self.dim();
        let mut bld = ProgramBuilder::new();
        let x = bld.free(n);
        let tau = bld.free(1).start;
        bld.lin_term(tau, -1.0); // maximize tau
        bld.le(&[(tau, 1.0)], 1.0); // cap so the program stays bounded
        for (r, row) in self.a.row_iter().enumerate() {
            let terms: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(c, v)| (x.start + c, *v))
                .collect();
            bld.eq(&terms, self.b[r]);
        }
        let mut at = 0;
        for blk in self.cone.blocks() {
            let d = blk.dim();
            match blk {
                ConeBlock::Nonneg { .. } => {
                    for k in 0..d {
                        bld.ge(&[(x.start + at + k, 1.0), (tau, -1.0)], 0.0);
                    }
                }
                ConeBlock::SecondOrder { .. } => {
                    let mut exprs: Vec<(Vec<(usize, f64)>, f64)> =
                        vec![(vec![(x.start + at, 1.0), (tau, -1.0)], 0.0)];
                    for k in 1..d {
                        exprs.push((vec![(x.start + at + k, 1.0)], 0.0));
                    }
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
        let prog = bld.build();
        let out = solver::solve(&prog, Tolerances::default())?;
        match out.status {
            SolveStatus::Optimal => {
                if out.primal[tau] >= tol {
                    Ok(Some(DVector::from_fn(n, |i, _| out.primal[x.start + i])))
                } else {
                    Ok(None)
                }
            }
            SolveStatus::Infeasible => Ok(None),
            SolveStatus::Unbounded => Err(Error::SolverFailure {
                detail: "margin program reported unbounded".into(),
                residual: f64::NAN,
            }),
            SolveStatus::NumericalFailure => Err(Error::SolverFailure {
                detail: "margin program did not converge".into(),
                residual: out.gap,
            }),
        }
    }

    /// Euclidean projection onto the region, as a conic QP.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has dim {}, region has dim {}",
                x.len(),
                self.dim()
            )));
        }
        let n = self.dim();
        let mut bld = ProgramBuilder::new();
        let z = bld.free(n);
        for k in 0..n {
            bld.quad_term(z.start + k, z.start + k, 0.5);
            bld.lin_term(z.start + k, -x[k]);
        }
        for (r, row) in self.a.row_iter().enumerate() {
            let terms: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(c, v)| (z.start + c, *v))
                .collect();
            bld.eq(&terms, self.b[r]);
        }
        let mut at = 0;
        for blk in self.cone.blocks() {
            let d = blk.dim();
            match blk {
                ConeBlock::Nonneg { .. } => {
                    for k in 0..d {
                        bld.ge(&[(z.start + at + k, 1.0)], 0.0);
                    }
                }
                ConeBlock::SecondOrder { .. } => {
                    let exprs: Vec<(Vec<(usize, f64)>, f64)> = (0..d)
                        .map(|k| (vec![(z.start + at + k, 1.0)], 0.0))
                        .collect();
                    bld.soc_affine(&exprs);
                }
                ConeBlock::Zero { .. } => {
                    for k in 0..d {
                        bld.eq(&[(z.start + at + k, 1.0)], 0.0);
                    }
                }
            }
            at += d;
        }
        let prog = bld.build();
        let out = solver::solve(&prog, Tolerances::default())?;
        match out.status {
            SolveStatus::Optimal => {
                let z_raw = DVector::from_fn(n, |i, _| out.primal[z.start + i]);
                if let Some(z) = self.polish_projection(x, &z_raw) {
                    return Ok(z);
                }
                // Snap tiny cone violations left by the interior-point solve.
                Ok(self.cone.project(&z_raw))
            }
            SolveStatus::Infeasible => Err(Error::Infeasible("projection onto empty region".into())),
            _ => Err(Error::SolverFailure {
                detail: "projection QP failed".into(),
                residual: out.gap,
            }),
        }
    }

    /// Refines an interior-point projection to machine precision by solving
    /// the KKT system of the face identified by the near-active coordinates.
    /// Only applies to orthant/zero cones; returns None when not applicable
    /// or when the polished point is not clearly at least as good.
    fn polish_projection(&self, x: &DVector<f64>, z_raw: &DVector<f64>) -> Option<DVector<f64>> {
        if self
            .cone
            .blocks()
            .iter()
            .any(|b| matches!(b, ConeBlock::SecondOrder { .. }))
        {
            return None;
        }
        let n = self.dim();
        let m = self.num_eq();
        let act_tol = 1e-5;
        let mut fixed: Vec<usize> = Vec::new();
        let mut at = 0;
        for blk in self.cone.blocks() {
            let d = blk.dim();
            match blk {
                ConeBlock::Nonneg { .. } => {
                    for k in at..at + d {
                        if z_raw[k] <= act_tol {
                            fixed.push(k);
                        }
                    }
                }
                ConeBlock::Zero { .. } => fixed.extend(at..at + d),
                ConeBlock::SecondOrder { .. } => unreachable!(),
            }
            at += d;
        }
        let rows = m + fixed.len();
        let mut kkt = DMatrix::zeros(n + rows, n + rows);
        let mut rhs = DVector::zeros(n + rows);
        for i in 0..n {
            kkt[(i, i)] = 1.0;
            rhs[i] = x[i];
        }
        for r in 0..m {
            for c in 0..n {
                kkt[(n + r, c)] = self.a[(r, c)];
                kkt[(c, n + r)] = self.a[(r, c)];
            }
            rhs[n + r] = self.b[r];
        }
        for (k, &f) in fixed.iter().enumerate() {
            kkt[(n + m + k, f)] = 1.0;
            kkt[(f, n + m + k)] = 1.0;
        }
        let sol = kkt.lu().solve(&rhs)?;
        let z = DVector::from_fn(n, |i, _| if sol[i].abs() < 1e-14 { 0.0 } else { sol[i] });
        let feasible = self.contains(&z, 1e-9).unwrap_or(false);
        let no_worse = (&z - x).norm_squared() <= (z_raw - x).norm_squared() + 1e-7;
        (feasible && no_worse).then_some(z)
    }
}

/// Serde document mirror for region serialization: matrix dense or triplet
/// sparse, plus rhs and cone block list.
#[derive(Debug, Serialize, Deserialize)]
pub struct RegionDoc {
    pub matrix: MatrixDoc,
    pub rhs: Vec<f64>,
    pub cone: Vec<ConeBlock>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixDoc {
    Dense(Vec<Vec<f64>>),
    Sparse { rows: usize, cols: usize, entries: Vec<(usize, usize, f64)> },
}

impl FeasibleRegion {
    pub fn to_doc(&self) -> RegionDoc {
        let dense: Vec<Vec<f64>> = self
            .a
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        RegionDoc {
            matrix: MatrixDoc::Dense(dense),
            rhs: self.b.iter().copied().collect(),
            cone: self.cone.blocks().to_vec(),
        }
    }

    pub fn from_doc(doc: &RegionDoc) -> Result<Self> {
        let a = match &doc.matrix {
            MatrixDoc::Dense(rows) => {
                let m = rows.len();
                let n = rows.first().map_or(0, |r| r.len());
                if rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Invalid("ragged dense matrix".into()));
                }
                DMatrix::from_fn(m, n, |i, j| rows[i][j])
            }
            MatrixDoc::Sparse { rows, cols, entries } => {
                let mut a = DMatrix::zeros(*rows, *cols);
                for &(i, j, v) in entries {
                    if i >= *rows || j >= *cols {
                        return Err(Error::Invalid(format!("triplet ({i},{j}) out of bounds")));
                    }
                    a[(i, j)] += v;
                }
                a
            }
        };
        FeasibleRegion::new(a, DVector::from_vec(doc.rhs.clone()), Cone::new(doc.cone.clone())?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("region serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: RegionDoc =
            serde_json::from_str(text).map_err(|e| Error::Invalid(format!("region doc: {e}")))?;
        Self::from_doc(&doc)
    }
}
