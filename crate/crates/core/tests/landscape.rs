use metalora::landscape::{
    certify_local_min, classify_stationary_point, compute_b_matrices, embed_alpha_z, eigenbasis_commutator,
    find_negative_curvature_t2, g_quadratic_form, hessian_meta, hessian_quadratic_form, hyperbola_instance,
    joint_image_dim, lift_to_full, manufacture_stationary_t2, probe_spurious_minimum, reduced_hessian_fd,
    reduced_loss_and_grad, schur_complement_q, star_difference_inertia, t2_difference_residual,
    unconstrained_instance, Classification, CurvatureSearch, NetMode, ProbeConfig,
};
use metalora::linalg::min_eigenpair;
use metalora::objectives::meta_loss_population;
use metalora::solvers::{init_meta_params, train_meta_gd};
use metalora::task_model::generate_ground_truth;
use metalora::{Error, MetaParams, PopulationObjective, RngSpec, TrainConfig};
use nalgebra::{DMatrix, DVector};

fn stationary_t2(d: usize, k: usize, seed: u64) -> (metalora::GroundTruth, MetaParams) {
    for attempt in 0..20 {
        let spec = RngSpec::with_stream(seed, attempt);
        let gt = generate_ground_truth(d, k, 2, spec).unwrap();
        let trace = manufacture_stationary_t2(&gt, &TrainConfig::population(), spec.derive(1)).unwrap();
        if trace.converged && trace.final_loss() > 1e-6 {
            return (gt, trace.final_params);
        }
    }
    panic!("no stationary point manufactured");
}

#[test]
fn b_matrices_for_two_tasks_are_half_differences() {
    let gt = generate_ground_truth(6, 2, 2, RngSpec::new(1)).unwrap();
    let p = init_meta_params(6, 2, 2, 1.0, RngSpec::new(2));
    let b = compute_b_matrices(&p.u, &gt).unwrap();
    let g = |u: &DMatrix<f64>| u * u.transpose();
    let expected = (g(&p.u[0]) - g(&gt.u_star[0]) - g(&p.u[1]) + g(&gt.u_star[1])) * 0.5;
    assert!((&b[0] - expected).amax() < 1e-12);
    assert!((&b[0] + &b[1]).amax() < 1e-12);
    let at_truth = compute_b_matrices(gt.retrain_factors(), &gt).unwrap();
    assert!(at_truth.iter().all(|m| m.amax() == 0.0));
}

#[test]
fn hessian_order_guard() {
    let gt = generate_ground_truth(70, 1, 3, RngSpec::new(3)).unwrap();
    let p = MetaParams::from_ground_truth(&gt);
    assert!(matches!(hessian_meta(&p, &gt), Err(Error::TooLarge { .. })));
}

#[test]
fn g_form_matches_schur_form_through_embedding() {
    for seed in 0..10 {
        let (gt, p) = stationary_t2(6, 1, 100 + seed);
        let CurvatureSearch::Found(c) = find_negative_curvature_t2(&p, &gt, 1e-8).unwrap() else {
            panic!("stationary point without a direction");
        };
        let g = g_quadratic_form(&c.alpha, &c.z, (&p.u[0], &p.u[1]), c.lambda, &gt).unwrap();
        let q = schur_complement_q(&p, &gt).unwrap();
        let v = embed_alpha_z(&c.alpha, &c.z);
        let direct = (v.transpose() * &q * &v)[(0, 0)];
        assert!((g - direct).abs() < 1e-8 * g.abs().max(1.0), "g {g} vs direct {direct}");
        // The lifted direction realizes the same value in the full Hessian.
        let full = lift_to_full(&p, &v).unwrap();
        let hv = hessian_quadratic_form(&p, &gt, full.as_slice()).unwrap();
        assert!((hv - direct).abs() < 1e-8 * direct.abs().max(1.0));
        assert!((c.rayleigh_quotient * full.norm_squared() - hv).abs() < 1e-8 * hv.abs().max(1.0));
        let zero = DVector::zeros(c.alpha.len());
        assert_eq!(g_quadratic_form(&zero, &c.z, (&p.u[0], &p.u[1]), c.lambda, &gt).unwrap(), 0.0);
    }
}

#[test]
fn g_form_rejects_non_eigenvector() {
    let (gt, p) = stationary_t2(6, 1, 7);
    let z = DVector::from_element(6, 1.0 / 6f64.sqrt());
    let alpha = DVector::from_element(2, 1.0);
    let err = g_quadratic_form(&alpha, &z, (&p.u[0], &p.u[1]), 1.0, &gt).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
}

#[test]
fn kernel_combination_gives_lambda_times_norm_difference() {
    // With U_1 a = -U_2 b the first term vanishes.
    let gt = hyperbola_instance();
    let u1 = DMatrix::from_column_slice(2, 1, &[0.0, 0.0]);
    let u2 = DMatrix::from_column_slice(2, 1, &[0.0, 0.0]);
    let z = DVector::from_column_slice(&[1.0, 0.0]);
    let alpha = DVector::from_column_slice(&[2.0, 1.0]);
    // z = e_1 is an eigenvector of e2 e2^T - e1 e1^T with eigenvalue -1.
    let g = g_quadratic_form(&alpha, &z, (&u1, &u2), -1.0, &gt).unwrap();
    assert!((g + (4.0 - 1.0)).abs() < 1e-15);
}

#[test]
fn two_task_stationary_structure() {
    for seed in 0..10 {
        let k = 1 + (seed % 2) as usize;
        let (gt, p) = stationary_t2(4 * k, k, 200 + seed);
        let rep = classify_stationary_point(&p, &gt, 1e-8, 1e-8).unwrap();
        assert_eq!(rep.classification, Classification::StrictSaddle);
        let dir = rep.curvature_direction.as_ref().unwrap();
        let rq = hessian_quadratic_form(&p, &gt, dir.as_slice()).unwrap() / dir.norm_squared();
        assert!(rq < 0.0);
        assert!(eigenbasis_commutator(&p.u, &gt).unwrap() < 1e-6);
        assert!(joint_image_dim(&p.u, 1e-8) < 2 * k);
        // Schur complement and full Hessian agree on the sign.
        let (qmin, _) = min_eigenpair(&schur_complement_q(&p, &gt).unwrap());
        assert!(qmin < 0.0 && rep.min_hessian_eig < 0.0);
    }
}

#[test]
fn difference_inertia_is_k_k() {
    for seed in 0..20 {
        let k = 1 + (seed % 3) as usize;
        let gt = generate_ground_truth(3 * k + 1, k, 2, RngSpec::new(seed)).unwrap();
        assert_eq!(star_difference_inertia(&gt, 1e-10), (k, k));
    }
}

#[test]
fn hyperbola_zero_loss_points_are_distinct() {
    let gt = hyperbola_instance();
    let cfg = TrainConfig {
        grad_tol: 1e-12,
        ..TrainConfig::population().with_perturbation(1e-3)
    };
    let mut finals = Vec::new();
    for s in 0..5 {
        let init = init_meta_params(2, 1, 2, 1.0, RngSpec::new(s));
        let p = train_meta_gd(&init, &PopulationObjective { gt: &gt }, &cfg, RngSpec::new(s))
            .unwrap()
            .final_params;
        assert!(meta_loss_population(&p, &gt).unwrap() < 1e-10);
        assert!(t2_difference_residual(&p.u, &gt).unwrap() < 1e-8);
        finals.push(p.to_flat());
    }
    for i in 0..5 {
        for j in i + 1..5 {
            assert!((&finals[i] - &finals[j]).norm() > 0.1);
        }
    }
}

#[test]
fn reduced_gradient_matches_finite_differences() {
    let gt = unconstrained_instance(3, 2, 3, RngSpec::new(4)).unwrap();
    let u: Vec<_> = (0..3).map(|t| init_meta_params(3, 2, 1, 1.0, RngSpec::new(10 + t)).u[0].clone()).collect();
    let (_, g) = reduced_loss_and_grad(&u, &gt).unwrap();
    let h = 1e-6;
    for t in 0..3 {
        for idx in 0..6 {
            let mut up = u.clone();
            let mut um = u.clone();
            up[t].as_mut_slice()[idx] += h;
            um[t].as_mut_slice()[idx] -= h;
            let fd = (reduced_loss_and_grad(&up, &gt).unwrap().0 - reduced_loss_and_grad(&um, &gt).unwrap().0) / (2.0 * h);
            let an = g[t].as_slice()[idx];
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0));
        }
    }
}

#[test]
fn two_task_probe_finds_nothing() {
    let probe = ProbeConfig {
        starts: 40,
        ..ProbeConfig::default()
    };
    for i in 0..5 {
        let gt = unconstrained_instance(3, 1, 2, RngSpec::new(i)).unwrap();
        let out = probe_spurious_minimum(&gt, &ProbeConfig::default_search(), &probe, RngSpec::new(50 + i)).unwrap();
        assert!(out.candidate.is_none());
    }
}

#[test]
fn three_task_spurious_minimum_at_d3() {
    let probe = ProbeConfig {
        starts: 10,
        ..ProbeConfig::default()
    };
    let gt = unconstrained_instance(3, 1, 3, RngSpec::with_stream(929, 3)).unwrap();
    let out = probe_spurious_minimum(&gt, &ProbeConfig::default_search(), &probe, RngSpec::with_stream(939, 3)).unwrap();
    let cand = out.candidate.expect("known instance with a spurious minimum");
    assert!(cand.reduced_loss > 1e-4 && cand.reduced_min_eig > 1e-8);
    assert_eq!(cand.report.classification, Classification::CandidateLocalMinimum);
    assert!(cand.report.min_hessian_eig > 0.0);
    let fd = reduced_hessian_fd(&cand.u_hat, &gt, 1e-5).unwrap();
    assert!(min_eigenpair(&fd).0 > 0.0);
    // Full nets stop at dimension 8.
    let err = certify_local_min(&cand.u_hat, &gt, 1e-2, 1e-3, 1e-8, u64::MAX, NetMode::FullNet, RngSpec::new(0)).unwrap_err();
    assert!(matches!(err, Error::NetInfeasible { dim: 9, .. }));
    let mc = certify_local_min(&cand.u_hat, &gt, 1e-2, 1e-3, 1e-8, 20_000, NetMode::MonteCarlo, RngSpec::new(0)).unwrap();
    assert!(mc.min_r_value > 0.0 && !mc.certified);
}

#[test]
fn full_net_at_ground_truth() {
    let gt = unconstrained_instance(2, 1, 3, RngSpec::new(5)).unwrap();
    let u = gt.retrain_factors().to_vec();
    let cert = certify_local_min(&u, &gt, 1e-2, 5e-3, 1e-12, 10_000_000, NetMode::FullNet, RngSpec::new(0)).unwrap();
    assert!(cert.min_r_value > 0.0);
    assert!(cert.certified);
    assert_eq!(cert.points_checked, 2 * 6 * 6u64.pow(5));
    let strict = certify_local_min(&u, &gt, 1e-2, 5e-3, cert.min_r_value * 2.0, 10_000_000, NetMode::FullNet, RngSpec::new(0))
        .unwrap();
    assert!(!strict.certified);
    let too_many = certify_local_min(&u, &gt, 1e-2, 1e-4, 1e-12, 1000, NetMode::FullNet, RngSpec::new(0)).unwrap_err();
    assert!(matches!(too_many, Error::NetInfeasible { dim: 6, .. }));
}
