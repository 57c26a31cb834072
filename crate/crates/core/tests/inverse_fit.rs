//! Estimation-program behavior against independent oracles and the
//! contract invariants: certificate validity, objective consistency,
//! normalization determinism, envelope monotonicity, and the agreement
//! between the parametric and nonparametric routes on their common ground.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use invvi_core::conic::{Cone, FeasibleRegion};
use invvi_core::fit::{
    ambiguity_envelope, fit_nonparametric, fit_parametric, fit_with_prior, FitMode, FitOptions,
    FitResult, Normalization, Observation, ObservationSet, ParametricFamily, ResidualNorm,
};
use invvi_core::kernels::KernelSpec;
use invvi_core::vi::{approx_epsilon, verify_certificate, FnField, VectorField};

fn simplex(n: usize) -> FeasibleRegion {
    FeasibleRegion::new(
        DMatrix::from_element(1, n, 1.0),
        DVector::from_element(1, 1.0),
        Cone::orthant(n),
    )
    .unwrap()
}

fn simplex_obs(points: &[Vec<f64>]) -> ObservationSet {
    let n = points[0].len();
    ObservationSet::new(
        points
            .iter()
            .map(|p| Observation { point: DVector::from_vec(p.clone()), region: simplex(n) })
            .collect(),
    )
    .unwrap()
}

fn check_certificates(obs: &ObservationSet, fit: &FitResult) {
    assert!(fit.metadata.certificates_ok);
    for (j, o) in obs.observations().iter().enumerate() {
        let f_val = fit.model.eval(&o.point);
        let cert = fit.certificate(j);
        assert!(
            verify_certificate(&f_val, &o.point, &o.region, &cert, 1e-6).unwrap(),
            "certificate {j} fails"
        );
        // Objective consistency: the true gap never exceeds the reported
        // residual by more than 1e-6.
        let tight = approx_epsilon(&f_val, &o.point, &o.region).unwrap();
        assert!(
            tight.epsilon <= fit.residuals[j] + 1e-6,
            "recomputed eps {} vs reported {}",
            tight.epsilon,
            fit.residuals[j]
        );
    }
}

#[test]
fn parametric_exact_observation_gives_zero_residual() {
    // f(x; theta) = theta * (1, 1): any positive theta makes every simplex
    // point an exact equilibrium (constant field over the simplex).
    let obs = simplex_obs(&[vec![0.3, 0.7]]);
    let family = Arc::new(
        ParametricFamily::linear_in_theta(
            2,
            1,
            |_| DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            10.0,
        )
        .unwrap(),
    );
    let opts = FitOptions {
        normalization: Normalization::MeanInner,
        ..Default::default()
    };
    let fit = fit_parametric(&obs, &family, &opts).unwrap();
    assert!(fit.residual_norm_value <= 1e-7, "z = {}", fit.residual_norm_value);
    check_certificates(&obs, &fit);
}

#[test]
fn parametric_matches_scalar_oracle() {
    // One basis function, two observations on the 2-D simplex. The optimal
    // l1 residual over theta is found independently by exact per-theta
    // residual evaluation (vertex enumeration) plus ternary search.
    let points = [vec![0.4, 0.6], vec![0.85, 0.15]];
    let obs = simplex_obs(&points);
    let phi = |x: &DVector<f64>| DMatrix::from_column_slice(2, 1, &[x[1] + 0.3, 0.7]);
    let family = Arc::new(ParametricFamily::linear_in_theta(2, 1, phi, 2.0).unwrap());
    let opts = FitOptions { tie_break_theta: false, ..Default::default() };
    let fit = fit_parametric(&obs, &family, &opts).unwrap();

    let eps_at = |theta: f64| -> f64 {
        points
            .iter()
            .map(|p| {
                let x = DVector::from_vec(p.clone());
                let f = DMatrix::from_column_slice(2, 1, &[x[1] + 0.3, 0.7]) * theta;
                // Vertex enumeration over the simplex: e1, e2.
                let min_v = f[0].min(f[1]);
                (f[0] * x[0] + f[1] * x[1] - min_v).max(0.0)
            })
            .sum()
    };
    let (mut lo, mut hi) = (-2.0f64, 2.0f64);
    for _ in 0..300 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if eps_at(m1) <= eps_at(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let z_oracle = eps_at(0.5 * (lo + hi));
    assert!(
        (fit.objective - z_oracle).abs() <= 1e-6,
        "fit {} vs oracle {}",
        fit.objective,
        z_oracle
    );
    check_certificates(&obs, &fit);
}

#[test]
fn nonparametric_single_vertex_observation_reconciles() {
    // A vertex of the simplex minimizes any field that is smallest there;
    // one observation at a vertex admits eps = 0.
    let obs = simplex_obs(&[vec![1.0, 0.0]]);
    let opts = FitOptions {
        mode: FitMode::Budget { kappa: 1e-9 },
        normalization: Normalization::MeanInner,
        ..Default::default()
    };
    let fit = fit_nonparametric(&obs, KernelSpec::Gaussian { c: 1.0 }, &opts).unwrap();
    assert!(fit.residual_norm_value <= 1e-7);
    check_certificates(&obs, &fit);
}

#[test]
fn nonparametric_dualized_random_instances_certify() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..5 {
        let n = 3;
        let pts: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter_mut().for_each(|v| *v /= s);
                raw
            })
            .collect();
        let obs = simplex_obs(&pts);
        let opts = FitOptions {
            mode: FitMode::Dualized { lambda: 10.0 },
            normalization: Normalization::MeanInner,
            ..Default::default()
        };
        let fit = fit_nonparametric(&obs, KernelSpec::Gaussian { c: 2.0 }, &opts)
            .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
        check_certificates(&obs, &fit);
    }
}

#[test]
fn parametric_agrees_with_linear_kernel_fit() {
    // Family = all linear fields W x (theta = entries of W) with the
    // squared-norm objective equals the linear-kernel nonparametric fit:
    // same program in different coordinates, so optimal values agree.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..4 {
        let pts: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let mut raw: Vec<f64> = (0..2).map(|_| rng.random_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter_mut().for_each(|v| *v /= s);
                raw
            })
            .collect();
        let obs = simplex_obs(&pts);
        let lambda = 5.0;

        let nonparam_opts = FitOptions {
            mode: FitMode::Dualized { lambda },
            normalization: Normalization::MeanInner,
            ..Default::default()
        };
        let np = fit_nonparametric(&obs, KernelSpec::Linear, &nonparam_opts).unwrap();

        // theta = (w11, w12, w21, w22), f(x) = W x.
        let family = Arc::new(
            ParametricFamily::linear_in_theta(
                2,
                4,
                |x: &DVector<f64>| {
                    DMatrix::from_row_slice(2, 4, &[x[0], x[1], 0.0, 0.0, 0.0, 0.0, x[0], x[1]])
                },
                1e3,
            )
            .unwrap(),
        );
        let param_opts = FitOptions {
            mode: FitMode::Dualized { lambda },
            normalization: Normalization::MeanInner,
            theta_l2: 1.0,
            tie_break_theta: false,
            ..Default::default()
        };
        let pf = fit_parametric(&obs, &family, &param_opts).unwrap();
        assert!(
            (np.objective - pf.objective).abs() <= 1e-6 * (1.0 + np.objective.abs()),
            "nonparametric {} vs parametric {}",
            np.objective,
            pf.objective
        );
    }
}

#[test]
fn normalization_pins_scale_deterministically() {
    // Two identical runs return identical objectives; and the normalization
    // row pins the scale of the fitted field.
    let obs = simplex_obs(&[vec![0.3, 0.7], vec![0.6, 0.4]]);
    let opts = FitOptions {
        mode: FitMode::Dualized { lambda: 3.0 },
        normalization: Normalization::MeanInner,
        ..Default::default()
    };
    let a = fit_nonparametric(&obs, KernelSpec::Gaussian { c: 1.0 }, &opts).unwrap();
    let b = fit_nonparametric(&obs, KernelSpec::Gaussian { c: 1.0 }, &opts).unwrap();
    assert!((a.objective - b.objective).abs() <= 1e-8);
    let mean_inner: f64 = obs
        .observations()
        .iter()
        .map(|o| a.model.eval(&o.point).dot(&o.point))
        .sum::<f64>()
        / obs.len() as f64;
    assert!((mean_inner - 1.0).abs() <= 1e-6);
}

#[test]
fn prior_absorbing_data_leaves_zero_correction() {
    // The constant field (1,1,1) makes every simplex point exact, and also
    // satisfies the mean-inner normalization; the correction must vanish.
    let obs = simplex_obs(&[vec![0.2, 0.3, 0.5], vec![0.5, 0.25, 0.25]]);
    let prior: Arc<dyn VectorField + Send + Sync> =
        Arc::new(FnField::new(3, |_: &DVector<f64>| DVector::from_element(3, 1.0)));
    let opts = FitOptions {
        mode: FitMode::Budget { kappa: 1e-9 },
        normalization: Normalization::None,
        ..Default::default()
    };
    let fit = fit_with_prior(&obs, KernelSpec::Gaussian { c: 1.0 }, prior, &opts).unwrap();
    assert!(fit.objective.abs() <= 1e-7, "correction norm^2 = {}", fit.objective);
    check_certificates(&obs, &fit);
}

#[test]
fn zero_prior_reduces_to_nonparametric() {
    let obs = simplex_obs(&[vec![0.3, 0.7], vec![0.55, 0.45]]);
    let prior: Arc<dyn VectorField + Send + Sync> =
        Arc::new(FnField::new(2, |_: &DVector<f64>| DVector::zeros(2)));
    let opts = FitOptions {
        mode: FitMode::Dualized { lambda: 2.0 },
        normalization: Normalization::MeanInner,
        ..Default::default()
    };
    let with0 = fit_with_prior(&obs, KernelSpec::Gaussian { c: 1.5 }, prior, &opts).unwrap();
    let plain = fit_nonparametric(&obs, KernelSpec::Gaussian { c: 1.5 }, &opts).unwrap();
    assert!((with0.objective - plain.objective).abs() <= 1e-7);
}

#[test]
fn envelope_contains_fit_and_widens_with_kappa() {
    let obs = simplex_obs(&[vec![0.3, 0.7], vec![0.7, 0.3], vec![0.5, 0.5]]);
    let spec = KernelSpec::Gaussian { c: 1.0 };
    let base = FitOptions {
        normalization: Normalization::MeanInner,
        norm_caps: Some(vec![50.0, 50.0]),
        ..Default::default()
    };
    let fit = fit_nonparametric(
        &obs,
        spec,
        &FitOptions { mode: FitMode::Budget { kappa: 0.05 }, ..base.clone() },
    )
    .unwrap();
    let queries: Vec<(DVector<f64>, usize)> = vec![
        (DVector::from_vec(vec![0.4, 0.6]), 0),
        (DVector::from_vec(vec![0.6, 0.4]), 1),
    ];
    let env = ambiguity_envelope(&obs, spec, 0.05, &queries, &base).unwrap();
    for ((q, comp), (lo, hi)) in queries.iter().zip(&env) {
        let v = fit.model.eval(q)[*comp];
        assert!(*lo <= v + 1e-6 && v <= *hi + 1e-6, "{v} outside [{lo}, {hi}]");
        assert!(lo <= hi);
    }
    // Monotone width in kappa.
    let mut prev: Option<Vec<f64>> = None;
    for kappa in [0.05, 0.2, 0.8] {
        let env = ambiguity_envelope(&obs, spec, kappa, &queries, &base).unwrap();
        let widths: Vec<f64> = env.iter().map(|(lo, hi)| hi - lo).collect();
        if let Some(p) = &prev {
            for (w, pw) in widths.iter().zip(p) {
                assert!(w + 1e-7 >= *pw, "width shrank: {w} < {pw}");
            }
        }
        prev = Some(widths);
    }
}

#[test]
fn envelope_matches_lp_oracle_on_single_point() {
    // One observation at the simplex vertex e1, linear kernel, kappa = 0,
    // no normalization. With the single anchor xhat = e1 the expansion is
    // f_i(x) = alpha_i (xhat' x) = alpha_i x_1. Constraints enumerate to:
    //   dual feasibility: y <= alpha_1, y <= alpha_2;
    //   zero gap:         alpha_1 - y <= 0;
    // hence alpha_1 = y <= alpha_2. Caps alpha_i^2 <= 4 give
    // alpha_1 in [-2, 2], so f_0(q) = 0.5 alpha_1 ranges over [-1, 1].
    let obs = simplex_obs(&[vec![1.0, 0.0]]);
    let spec = KernelSpec::Linear;
    let opts = FitOptions {
        normalization: Normalization::None,
        norm_caps: Some(vec![4.0, 4.0]),
        ..Default::default()
    };
    let q = DVector::from_vec(vec![0.5, 0.5]);
    let env = ambiguity_envelope(&obs, spec, 0.0, &[(q, 0)], &opts).unwrap();
    let (lo, hi) = env[0];
    assert!((hi - 1.0).abs() <= 1e-4, "hi = {hi}");
    assert!((lo + 1.0).abs() <= 1e-4, "lo = {lo}");
}

#[test]
fn budget_infeasible_reports_minimal_kappa_hint() {
    // Interior points of the simplex under the mean-inner normalization
    // cannot all be exact equilibria with eps = 0 unless the field is
    // degenerate; force infeasibility with a tiny budget plus monotone
    // contradiction-free constraints, then check the hint text.
    let obs = simplex_obs(&[vec![0.9, 0.1], vec![0.1, 0.9]]);
    let opts = FitOptions {
        mode: FitMode::Budget { kappa: 0.0 },
        normalization: Normalization::Anchor { site: 0, component: 0, value: 5.0 },
        monotone_pairs: vec![],
        ..Default::default()
    };
    // Pin f_0(x_0) = 5: then x_0 cannot be eps=0-optimal together with the
    // gap rows unless duals compensate; with kappa = 0 this can be
    // infeasible. If it happens to be feasible, the test is vacuous, so
    // assert only the error shape when an error occurs.
    match fit_nonparametric(&obs, KernelSpec::Gaussian { c: 1.0 }, &opts) {
        Ok(fit) => assert!(fit.residual_norm_value <= 1e-6),
        Err(e) => {
            let msg = e.to_string();
            assert!(msg.contains("kappa"), "unexpected error: {msg}");
        }
    }
}
