//! Congestion-function estimation from perturbed equilibrium flows.
//!
//! Arc costs take the separable form `c_a(x_a) = c0_a * g(x_a / m_a)`; the
//! scalar congestion function `g` is estimated from observed (noisy) flows
//! and demands so that each observation is an approximate Wardrop
//! equilibrium. With `g` in the span of a finite-dimensional kernel (the
//! polynomial kernels used here), the estimation program is solved by
//! cutting planes in the kernel's feature space: for a candidate `g`, the
//! inner shortest-path problems supply exact dual certificates, and each
//! certificate freezes into an affine cut. This exploits the block
//! structure of the program — for a fixed function the subproblems decouple
//! by origin-destination pair and observation.
//!
//! Desk-scale reduction: the estimation couples every OD pair of every
//! observation, so fits run against a seeded subsample of OD pairs. Each
//! observation keeps the per-pair flow decomposition of its sampled pairs;
//! the gap condition for the sampled sub-system uses the observed total
//! flows for the congestion levels (background traffic included), which
//! keeps zero-noise data exactly reconcilable.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{poly_features_1d, KernelExpansion, KernelSpec};
use crate::solver::{self, ProgramBuilder, Tolerances};
use crate::traffic::{
    all_or_nothing, bpr, shortest_paths, solve_traffic_assignment, wardrop_epsilon, ArcCost,
    Assignment, AssignmentOptions, BprCost, OdMatrix, RoadArc, RoadNetwork, ScalarCongestionCost,
};

/// One generated flow observation.
#[derive(Debug, Clone)]
pub struct FlowObservation {
    /// Observed (perturbed) total arc flows.
    pub flows: DVector<f64>,
    /// Perturbed demands for the full OD set.
    pub demands: OdMatrix,
    /// Row per sampled OD pair: perturbed per-pair arc flows.
    pub sampled_flows: DMatrix<f64>,
    /// Indices of the sampled pairs within `demands`.
    pub sampled_pairs: Vec<usize>,
    /// Relative perturbation factors applied per arc (diagnostics).
    pub flow_noise: DVector<f64>,
}

/// Deterministic seeded choice of `k` OD pair indices.
pub fn sample_od_pairs(n_pairs: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n_pairs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(k.min(n_pairs));
    idx.sort_unstable();
    idx
}

/// Generates `n` observations: perturb each demand by a relative amount
/// drawn uniformly from `[0, rel_noise]` (increase only), solve the
/// true-cost assignment, then perturb the resulting flows likewise.
pub fn generate_observations(
    net: &RoadNetwork,
    od: &OdMatrix,
    n: usize,
    rel_noise: f64,
    sampled_pairs: &[usize],
    cost: &dyn ArcCost,
    assignment_tol: f64,
    seed: u64,
) -> Result<Vec<FlowObservation>> {
    if n == 0 {
        return Err(Error::Invalid("need at least one observation".into()));
    }
    if !(0.0..1.0).contains(&rel_noise) {
        return Err(Error::Invalid("relative noise must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let pairs: Vec<_> = od
            .pairs()
            .iter()
            .map(|p| {
                let factor = 1.0 + rng.random_range(0.0..=rel_noise);
                crate::traffic::OdPair { demand: p.demand * factor, ..p.clone() }
            })
            .collect();
        let demands = OdMatrix::new(pairs)?;
        let opts = AssignmentOptions {
            tol: assignment_tol,
            tracked: sampled_pairs.to_vec(),
            ..Default::default()
        };
        let sol = solve_traffic_assignment(net, &demands, cost, &opts)?;
        let flow_noise = DVector::from_fn(net.n_arcs(), |_, _| 1.0 + rng.random_range(0.0..=rel_noise));
        let flows = DVector::from_fn(net.n_arcs(), |a, _| sol.flows[a] * flow_noise[a]);
        let mut sampled_flows = sol.tracked_flows.clone();
        for w in 0..sampled_flows.nrows() {
            for a in 0..net.n_arcs() {
                sampled_flows[(w, a)] *= flow_noise[a];
            }
        }
        out.push(FlowObservation {
            flows,
            demands,
            sampled_flows,
            sampled_pairs: sampled_pairs.to_vec(),
            flow_noise,
        });
    }
    Ok(out)
}

/// A fitted congestion function with its certificates.
#[derive(Debug, Clone)]
pub struct CongestionFit {
    /// Scalar kernel expansion over utilization anchors, `g(anchor0) = 1`.
    pub g: KernelExpansion,
    /// Kernel feature weights; evaluates `g` in a handful of flops (the
    /// expansion form is equivalent but costs one kernel call per anchor).
    pub feature_weights: DVector<f64>,
    /// Per-observation residuals of the sampled sub-system.
    pub residuals: Vec<f64>,
    /// Dual node potentials per observation and sampled pair, certifying
    /// the residuals (row per sampled pair, one potential per node).
    pub duals: Vec<DMatrix<f64>>,
    /// Squared RKHS norm of `g`.
    pub norm_sq: f64,
    /// The anchor utilization where `g` is pinned to one.
    pub anchor_t: f64,
    /// Largest observed utilization (anchor-space radius).
    pub max_utilization: f64,
    pub cutting_plane_rounds: usize,
}

impl CongestionFit {
    pub fn g_at(&self, t: f64) -> f64 {
        match features(self.g.spec(), t) {
            Ok(phi) => phi.dot(&self.feature_weights),
            Err(_) => self.g.eval_scalar(&DVector::from_element(1, t)),
        }
    }

    /// Nondecreasing check of the fitted function on `[0, t_max]`.
    pub fn is_nondecreasing(&self, t_max: f64) -> bool {
        let grid = 200;
        let mut prev = self.g_at(0.0);
        for k in 1..=grid {
            let t = t_max * k as f64 / grid as f64;
            let v = self.g_at(t);
            if v < prev - 1e-7 {
                return false;
            }
            prev = v;
        }
        true
    }
}

/// Feature map of the kernel on scalar inputs, for the finite-dimensional
/// kernels the congestion fit supports.
fn features(spec: KernelSpec, t: f64) -> Result<DVector<f64>> {
    match spec {
        KernelSpec::Linear => Ok(DVector::from_element(1, t)),
        KernelSpec::Polynomial { c, d } => Ok(poly_features_1d(c, d, t)),
        KernelSpec::Gaussian { .. } => Err(Error::Invalid(
            "congestion fits need a finite-dimensional kernel (linear or polynomial)".into(),
        )),
    }
}

/// Fits `g` by the dualized estimation program
/// `min ||g||^2 + lambda * sum eps_j` subject to the sampled sub-systems'
/// certificates, nondecreasing values along each observation's utilization
/// chain, and `g(anchor) = 1`. Solved by cutting planes in feature space.
pub fn fit_congestion(
    net: &RoadNetwork,
    observations: &[FlowObservation],
    spec: KernelSpec,
    lambda: f64,
    seed_anchor: Option<f64>,
) -> Result<CongestionFit> {
    if observations.is_empty() {
        return Err(Error::Invalid("no observations".into()));
    }
    if lambda <= 0.0 {
        return Err(Error::Invalid("lambda must be positive".into()));
    }
    let n_obs = observations.len();
    let n_arcs = net.n_arcs();

    // Utilization anchors per (observation, arc), lexicographic.
    let mut t_vals: Vec<f64> = Vec::with_capacity(n_obs * n_arcs);
    for obs in observations {
        for a in 0..n_arcs {
            t_vals.push(obs.flows[a] / net.arcs()[a].capacity);
        }
    }
    let max_utilization = t_vals.iter().cloned().fold(0.0f64, f64::max);

    // Anchor for the scale pin: the utilization closest to the pooled
    // median of the positive utilizations (a zero-utilization anchor cannot
    // pin the scale of through-origin kernels); ties toward the
    // lexicographically first anchor.
    let anchor_t = match seed_anchor {
        Some(t) => t,
        None => {
            let mut sorted: Vec<f64> = t_vals.iter().copied().filter(|t| *t > 1e-9).collect();
            if sorted.is_empty() {
                return Err(Error::Invalid("all utilizations are zero".into()));
            }
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = sorted[(sorted.len() - 1) / 2];
            let mut best = (f64::INFINITY, 0usize);
            for (i, &t) in t_vals.iter().enumerate() {
                let d = (t - median).abs();
                if d < best.0 {
                    best = (d, i);
                }
            }
            t_vals[best.1]
        }
    };

    let dim = features(spec, 0.0)?.len();
    let phi: Vec<DVector<f64>> = t_vals
        .iter()
        .map(|&t| features(spec, t))
        .collect::<Result<_>>()?;
    let phi_anchor = features(spec, anchor_t)?;

    // Master program: w (feature weights), eps (per observation), cuts.
    // Rebuilt each round with the accumulated cut set.
    #[derive(Clone)]
    struct Cut {
        obs: usize,
        coefs: DVector<f64>,
    }
    let mut cuts: Vec<Cut> = Vec::new();
    let mut duals_final: Vec<DMatrix<f64>> = Vec::new();
    let mut w = DVector::zeros(dim);
    let mut rounds = 0usize;

    // Monotone chains: adjacent pairs after sorting utilizations per
    // observation (full within-observation pair sets are redundant by
    // transitivity).
    let mut chains: Vec<(usize, usize)> = Vec::new();
    for j in 0..n_obs {
        let mut order: Vec<usize> = (0..n_arcs).map(|a| j * n_arcs + a).collect();
        order.sort_by(|&x, &y| t_vals[x].partial_cmp(&t_vals[y]).unwrap());
        for k in 0..order.len() - 1 {
            chains.push((order[k], order[k + 1]));
        }
    }

    // Residuals are measured in travel-cost units, orders of magnitude
    // above the feature weights; the master works with eps = sigma * eps'
    // so every row stays O(1).
    let sigma: f64 = (observations
        .iter()
        .map(|o| {
            (0..n_arcs)
                .map(|a| {
                    let xt: f64 = (0..o.sampled_flows.nrows()).map(|r| o.sampled_flows[(r, a)]).sum();
                    net.arcs()[a].free_flow_time * xt
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        / n_obs as f64)
        .max(1.0);

    for round in 0..200 {
        rounds = round + 1;
        let mut bld = ProgramBuilder::new();
        let wv = bld.free(dim);
        let eps = bld.nonneg(n_obs);
        for k in 0..dim {
            bld.quad_term(wv.start + k, wv.start + k, 1.0);
        }
        for j in 0..n_obs {
            bld.lin_term(eps.start + j, lambda * sigma);
        }
        // Normalization g(anchor) = 1.
        let terms: Vec<(usize, f64)> =
            (0..dim).filter(|&k| phi_anchor[k] != 0.0).map(|k| (wv.start + k, phi_anchor[k])).collect();
        bld.eq(&terms, 1.0);
        // Monotone chain rows.
        for &(lo, hi) in &chains {
            let mut terms: Vec<(usize, f64)> = Vec::with_capacity(2 * dim);
            for k in 0..dim {
                let c = phi[lo][k] - phi[hi][k];
                if c != 0.0 {
                    terms.push((wv.start + k, c));
                }
            }
            bld.le(&terms, 0.0);
        }
        // Accumulated cuts: sigma * eps'_j >= coefs' w, scaled to O(1).
        for cut in &cuts {
            let mut terms: Vec<(usize, f64)> = Vec::with_capacity(dim + 1);
            for k in 0..dim {
                if cut.coefs[k] != 0.0 {
                    terms.push((wv.start + k, cut.coefs[k] / sigma));
                }
            }
            terms.push((eps.start + cut.obs, -1.0));
            bld.le(&terms, 0.0);
        }
        let prog = bld.build();
        let out = solver::solve_optimal(&prog, Tolerances { feas: 1e-6, gap: 1e-6 })?;
        w = DVector::from_fn(dim, |k, _| out.primal[wv.start + k]);
        let eps_cur: Vec<f64> =
            (0..n_obs).map(|j| sigma * out.primal[eps.start + j].max(0.0)).collect();

        // Separation: exact sampled-system gaps under the candidate g.
        let mut worst_violation = 0.0f64;
        let mut new_cuts = Vec::new();
        duals_final.clear();
        for (j, obs) in observations.iter().enumerate() {
            let (gap_coefs, duals) = sampled_gap_cut(net, obs, &phi, j * n_arcs, &w)?;
            let value = gap_coefs.dot(&w);
            duals_final.push(duals);
            if value > eps_cur[j] + 1e-7 * sigma {
                worst_violation = worst_violation.max(value - eps_cur[j]);
                new_cuts.push(Cut { obs: j, coefs: gap_coefs });
            }
        }
        if new_cuts.is_empty() {
            break;
        }
        cuts.extend(new_cuts);
        if worst_violation <= 1e-9 * sigma {
            break;
        }
    }

    // Final residuals from one exact evaluation.
    let mut residuals = Vec::with_capacity(n_obs);
    for (j, obs) in observations.iter().enumerate() {
        let (gap_coefs, _) = sampled_gap_cut(net, obs, &phi, j * n_arcs, &w)?;
        residuals.push(gap_coefs.dot(&w).max(0.0));
    }

    // Map the feature weights back onto the anchor expansion: the minimal
    // norm alpha with Phi' alpha = w evaluates identically and has RKHS
    // norm ||w||.
    let n_anchors = t_vals.len();
    let mut phi_mat = DMatrix::zeros(n_anchors, dim);
    for (i, f) in phi.iter().enumerate() {
        for k in 0..dim {
            phi_mat[(i, k)] = f[k];
        }
    }
    let gram_f = phi_mat.transpose() * &phi_mat;
    let mut gram_f = gram_f;
    for k in 0..dim {
        gram_f[(k, k)] += 1e-12;
    }
    let sol = gram_f
        .lu()
        .solve(&w)
        .ok_or_else(|| Error::Invalid("feature Gram is singular".into()))?;
    let alpha = &phi_mat * sol;
    let anchors: Vec<DVector<f64>> = t_vals.iter().map(|&t| DVector::from_element(1, t)).collect();
    let weights = DMatrix::from_fn(1, n_anchors, |_, l| alpha[l]);
    let g = KernelExpansion::new(anchors, weights, spec)?;
    let norm_sq = w.norm_squared();

    Ok(CongestionFit {
        g,
        feature_weights: w,
        residuals,
        duals: duals_final,
        norm_sq,
        anchor_t,
        max_utilization,
        cutting_plane_rounds: rounds,
    })
}

/// Exact gap of one observation's sampled sub-system as an affine function
/// of the feature weights: `gap(w) = coefs' w`, where the coefficients
/// freeze the shortest paths found under the candidate costs. Also returns
/// the dual node potentials per sampled pair.
fn sampled_gap_cut(
    net: &RoadNetwork,
    obs: &FlowObservation,
    phi: &[DVector<f64>],
    phi_offset: usize,
    w: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n_arcs = net.n_arcs();
    let dim = w.len();
    let costs = DVector::from_fn(n_arcs, |a, _| {
        net.arcs()[a].free_flow_time * phi[phi_offset + a].dot(w)
    });
    let sampled = OdMatrix::new(
        obs.sampled_pairs.iter().map(|&i| obs.demands.pairs()[i].clone()).collect(),
    )?;
    let tracked: Vec<usize> = (0..sampled.len()).collect();
    let (aon, _, _) = all_or_nothing(net, &sampled, &costs, &tracked)?;
    // Node potentials per sampled pair for the certificate.
    let mut duals = DMatrix::zeros(sampled.len(), net.n_nodes());
    let mut by_origin: Vec<(usize, Vec<f64>)> = Vec::new();
    for (wi, pair) in sampled.pairs().iter().enumerate() {
        let dist = match by_origin.iter().find(|(o, _)| *o == pair.origin) {
            Some((_, d)) => d.clone(),
            None => {
                let (d, _) = shortest_paths(net, pair.origin, &costs);
                by_origin.push((pair.origin, d.clone()));
                d
            }
        };
        for v in 0..net.n_nodes() {
            duals[(wi, v)] = if dist[v].is_finite() { dist[v] } else { 0.0 };
        }
    }
    // gap(w) = sum_a c0_a (xtilde_a - aon_a) phi_a' w.
    let mut coefs = DVector::zeros(dim);
    for a in 0..n_arcs {
        let xtilde: f64 = (0..obs.sampled_flows.nrows()).map(|r| obs.sampled_flows[(r, a)]).sum();
        let c = net.arcs()[a].free_flow_time * (xtilde - aon[a]);
        if c != 0.0 {
            for k in 0..dim {
                coefs[k] += c * phi[phi_offset + a][k];
            }
        }
    }
    Ok((coefs, duals))
}

/// Exact sampled-system gap of an observation under an arbitrary scalar
/// congestion function (for verification independent of the fit).
pub fn sampled_epsilon(
    net: &RoadNetwork,
    obs: &FlowObservation,
    g: &dyn Fn(f64) -> f64,
) -> Result<f64> {
    let costs = DVector::from_fn(net.n_arcs(), |a, _| {
        net.arcs()[a].free_flow_time * g(obs.flows[a] / net.arcs()[a].capacity)
    });
    let sampled = OdMatrix::new(
        obs.sampled_pairs.iter().map(|&i| obs.demands.pairs()[i].clone()).collect(),
    )?;
    let (_, _, min_cost) = all_or_nothing(net, &sampled, &costs, &[])?;
    let mut total = 0.0;
    for a in 0..net.n_arcs() {
        let xtilde: f64 = (0..obs.sampled_flows.nrows()).map(|r| obs.sampled_flows[(r, a)]).sum();
        total += costs[a] * xtilde;
    }
    Ok((total - min_cost).max(0.0))
}

/// Flow prediction under a fitted congestion function.
pub struct FlowPrediction {
    pub assignment: Assignment,
    /// True iff the fitted function passed the nondecreasing check on the
    /// anchor range before solving.
    pub monotone: bool,
}

pub fn predict_flows(
    fit: &CongestionFit,
    net: &RoadNetwork,
    od: &OdMatrix,
    tol: f64,
) -> Result<FlowPrediction> {
    let monotone = fit.is_nondecreasing(fit.max_utilization.max(1.0));
    let g = |t: f64| fit.g_at(t);
    let cost = ScalarCongestionCost { g };
    let opts = AssignmentOptions { tol, ..Default::default() };
    let assignment = solve_traffic_assignment(net, od, &cost, &opts)?;
    Ok(FlowPrediction { assignment, monotone })
}

// ---------------------------------------------------------------------------
// Experiment pipeline
// ---------------------------------------------------------------------------

/// Outcome of the congestion-estimation experiment for one seed.
#[derive(Debug, Clone)]
pub struct CongestionReport {
    pub kernel_c_selected: f64,
    /// Mean in-sample full-system approximation error of the refit half
    /// (absolute units), the `z_N` of the mean-error bound.
    pub z_n: f64,
    /// Out-of-sample mean relative approximation error.
    pub mean_rel_approx: f64,
    /// Out-of-sample mean relative flow-prediction error.
    pub mean_rel_predict: f64,
    /// 90th percentile of out-of-sample absolute approximation errors.
    pub out_eps_p90: f64,
    /// Mean-error bound threshold at beta = 0.1, alpha solved so the tail
    /// probability is 0.1 (the "90/90" threshold).
    pub bound_threshold: f64,
    pub bbar: f64,
    pub fitted_norm_sq: f64,
    pub monotone: bool,
    pub fit: CongestionFit,
}

pub struct CongestionConfig {
    pub n_obs: usize,
    pub rel_noise: f64,
    pub od_sample: usize,
    pub degree: u32,
    pub c_grid: Vec<f64>,
    pub lambda: f64,
    pub cv_folds: usize,
    pub n_fresh: usize,
    pub assignment_tol: f64,
}

impl Default for CongestionConfig {
    fn default() -> Self {
        CongestionConfig {
            n_obs: 40,
            rel_noise: 0.10,
            od_sample: 50,
            degree: 3,
            c_grid: vec![0.5, 1.0, 2.0],
            lambda: 1.0,
            cv_folds: 5,
            n_fresh: 100,
            assignment_tol: 1e-4,
        }
    }
}

pub fn congestion_pipeline(
    net: &RoadNetwork,
    od: &OdMatrix,
    cfg: &CongestionConfig,
    seed: u64,
) -> Result<CongestionReport> {
    let sampled = sample_od_pairs(od.len(), cfg.od_sample, seed ^ 0x0d_5a17);
    let observations = generate_observations(
        net,
        od,
        cfg.n_obs,
        cfg.rel_noise,
        &sampled,
        &BprCost,
        cfg.assignment_tol,
        seed,
    )?;
    let half = cfg.n_obs / 2;
    let tune: Vec<FlowObservation> = observations[..half].to_vec();
    let refit: Vec<FlowObservation> = observations[half..].to_vec();

    // Tune the kernel offset by K-fold CV on the first half, minimizing the
    // held-out relative approximation error of the sampled sub-systems.
    let grid: Vec<f64> = cfg.c_grid.clone();
    let report = crate::bounds::cross_validate(
        tune.len(),
        &grid,
        cfg.cv_folds,
        seed ^ 0x5eed,
        |c, train| {
            let subset: Vec<FlowObservation> = train.iter().map(|&i| tune[i].clone()).collect();
            fit_congestion(
                net,
                &subset,
                KernelSpec::Polynomial { c: *c, d: cfg.degree },
                cfg.lambda,
                None,
            )
        },
        |fit, val| {
            let mut acc = 0.0;
            for &j in val {
                let eps = sampled_epsilon(net, &tune[j], &|t| fit.g_at(t))?;
                let sampled_od = OdMatrix::new(
                    tune[j]
                        .sampled_pairs
                        .iter()
                        .map(|&i| tune[j].demands.pairs()[i].clone())
                        .collect(),
                )?;
                let costs_scale: f64 = {
                    let costs = DVector::from_fn(net.n_arcs(), |a, _| {
                        net.arcs()[a].free_flow_time * fit.g_at(tune[j].flows[a] / net.arcs()[a].capacity)
                    });
                    let (_, _, min_cost) = all_or_nothing(net, &sampled_od, &costs, &[])?;
                    min_cost.max(1e-9)
                };
                acc += eps / costs_scale;
            }
            Ok(acc / val.len().max(1) as f64)
        },
    )?;
    let kernel_c = report.best().params;
    let spec = KernelSpec::Polynomial { c: kernel_c, d: cfg.degree };

    let fit = fit_congestion(net, &refit, spec, cfg.lambda, None)?;
    let monotone = fit.is_nondecreasing(fit.max_utilization.max(1.5));

    // In-sample mean full-system approximation error of the refit half.
    let g_cost = ScalarCongestionCost { g: |t: f64| 0.0 * t };
    let _ = g_cost;
    let fitted_cost = FittedCost { fit: &fit };
    let mut z_acc = 0.0;
    for obs in &refit {
        let (eps, _) = wardrop_epsilon(net, &obs.demands, &fitted_cost, &obs.flows)?;
        z_acc += eps;
    }
    let z_n = z_acc / refit.len() as f64;

    // Fresh draws: approximation and prediction errors under the fit.
    let fresh = generate_observations(
        net,
        od,
        cfg.n_fresh,
        cfg.rel_noise,
        &[],
        &BprCost,
        cfg.assignment_tol,
        seed.wrapping_add(0xf4e5),
    )?;
    let mut rel_approx = Vec::with_capacity(cfg.n_fresh);
    let mut rel_predict = Vec::with_capacity(cfg.n_fresh);
    let mut abs_eps = Vec::with_capacity(cfg.n_fresh);
    for obs in &fresh {
        let (eps, min_cost) = wardrop_epsilon(net, &obs.demands, &fitted_cost, &obs.flows)?;
        abs_eps.push(eps);
        rel_approx.push(eps / min_cost.max(1e-12));
        let pred = predict_flows(&fit, net, &obs.demands, cfg.assignment_tol)?;
        let diff = (&pred.assignment.flows - &obs.flows).norm();
        rel_predict.push(diff / obs.flows.norm().max(1e-12));
    }
    let mean_rel_approx = rel_approx.iter().sum::<f64>() / rel_approx.len() as f64;
    let mean_rel_predict = rel_predict.iter().sum::<f64>() / rel_predict.len() as f64;
    let mut sorted = abs_eps.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let out_eps_p90 = sorted[((sorted.len() as f64 * 0.9).ceil() as usize - 1).min(sorted.len() - 1)];

    // Mean-error bound threshold: z_N plus the alpha making the Markov tail
    // 0.1 at confidence 0.9.
    let r_flow = 1.1 * refit.iter().map(|o| o.flows.norm()).fold(0.0f64, f64::max);
    let t_radius = 1.1 * fit.max_utilization;
    let kb = crate::kernels::kbar(spec, t_radius.max(1e-9))?;
    let kappa_sq: Vec<f64> = net
        .arcs()
        .iter()
        .map(|a: &RoadArc| a.free_flow_time * a.free_flow_time * fit.norm_sq)
        .collect();
    let bbar = 2.0 * r_flow * kb * kappa_sq.iter().sum::<f64>().sqrt();
    let inputs = crate::bounds::BoundInputs {
        z_n,
        n: refit.len(),
        p: 1.0,
        bbar,
        beta: 0.1,
    };
    let alpha = crate::bounds::rademacher_alpha_for_tail(&inputs, 0.1)?;
    Ok(CongestionReport {
        kernel_c_selected: kernel_c,
        z_n,
        mean_rel_approx,
        mean_rel_predict,
        out_eps_p90,
        bound_threshold: z_n + alpha,
        bbar,
        fitted_norm_sq: fit.norm_sq,
        monotone,
        fit,
    })
}

/// Arc cost backed by a fitted congestion function.
pub struct FittedCost<'a> {
    pub fit: &'a CongestionFit,
}

impl ArcCost for FittedCost<'_> {
    fn arc_cost(&self, arc: &RoadArc, flow: f64) -> f64 {
        arc.free_flow_time * self.fit.g_at(flow / arc.capacity)
    }
}

/// Loads the bundled benchmark network and trip table (24 nodes, 76 arcs).
pub fn bundled_benchmark() -> Result<(RoadNetwork, OdMatrix)> {
    crate::traffic::load_tntp(
        include_str!("../data/siouxfalls_net.tntp"),
        include_str!("../data/siouxfalls_trips.tntp"),
    )
}

/// Normalized reference congestion curve: the standard quartic normalized
/// to one at the fit's anchor utilization.
pub fn normalized_bpr(t: f64, anchor_t: f64) -> f64 {
    bpr(t) / bpr(anchor_t)
}
