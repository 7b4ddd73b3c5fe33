//! Randomized invariants of the objectives and the landscape quantities.

use metalora::landscape::{compute_b_matrices, hessian_meta, reduced_hessian, reduced_loss_and_grad, schur_complement_q};
use metalora::linalg::{min_eigenpair, outer_self};
use metalora::objectives::{meta_grad_population, meta_loss_population};
use metalora::solvers::{best_rank_approx, init_meta_params, solve_sr_population};
use metalora::task_model::generate_ground_truth;
use metalora::{MetaParams, RngSpec};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=2, 1usize..=4).prop_flat_map(|(k, t)| {
        let lo = k * (t + 1);
        (lo..=lo + 3).prop_map(move |d| (d, k, t))
    })
}

fn point(d: usize, k: usize, t: usize, seed: u64, scale: f64) -> (metalora::GroundTruth, MetaParams) {
    let gt = generate_ground_truth(d, k, t, RngSpec::new(seed)).unwrap();
    let p = init_meta_params(d, k, t, scale, RngSpec::with_stream(seed, 7));
    (gt, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn b_matrices_sum_to_zero((d, k, t) in dims(), seed in any::<u64>()) {
        let (gt, p) = point(d, k, t, seed, 1.0);
        let b = compute_b_matrices(&p.u, &gt).unwrap();
        let sum = b.iter().fold(DMatrix::zeros(d, d), |acc, m| acc + m);
        let scale = b.iter().map(|m| m.norm()).fold(1.0, f64::max);
        prop_assert!(sum.amax() < 1e-12 * scale);
    }

    #[test]
    fn loss_nonnegative_and_zero_at_truth((d, k, t) in dims(), seed in any::<u64>()) {
        let (gt, p) = point(d, k, t, seed, 1.0);
        prop_assert!(meta_loss_population(&p, &gt).unwrap() >= 0.0);
        prop_assert_eq!(meta_loss_population(&MetaParams::from_ground_truth(&gt), &gt).unwrap(), 0.0);
    }

    #[test]
    fn hessian_is_symmetric((d, k, t) in dims(), seed in any::<u64>()) {
        let (gt, p) = point(d, k, t, seed, 1.0);
        let h = hessian_meta(&p, &gt).unwrap();
        prop_assert!((&h - h.transpose()).amax() < 1e-12);
    }

    #[test]
    fn directional_derivative_matches_gradient((d, k, t) in dims(), seed in any::<u64>()) {
        let (gt, p) = point(d, k, t, seed, 1.0);
        let x = p.to_flat();
        let v = init_meta_params(d, k, t, 1.0, RngSpec::with_stream(seed, 8)).to_flat();
        let h = 1e-6;
        let at = |s: f64| {
            let y = &x + &v * s;
            meta_loss_population(&MetaParams::from_flat(y.as_slice(), d, k, t).unwrap(), &gt).unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let an = meta_grad_population(&p, &gt).unwrap().to_flat().dot(&v);
        prop_assert!((fd - an).abs() < 1e-5 * an.abs().max(1.0));
    }

    #[test]
    fn reduced_loss_is_twice_eliminated_meta_loss((d, k, t) in dims(), seed in any::<u64>()) {
        let (gt, p) = point(d, k, t, seed, 1.0);
        let (l, _) = reduced_loss_and_grad(&p.u, &gt).unwrap();
        let m = meta_loss_population(&p.with_optimal_a(&gt).unwrap(), &gt).unwrap();
        prop_assert!((l - 2.0 * m).abs() < 1e-10 * l.max(1.0));
    }

    #[test]
    fn eliminated_a_minimizes_over_a((d, k, t) in dims(), seed in any::<u64>()) {
        let (gt, p) = point(d, k, t, seed, 1.0);
        let best = meta_loss_population(&p.with_optimal_a(&gt).unwrap(), &gt).unwrap();
        prop_assert!(best <= meta_loss_population(&p, &gt).unwrap() + 1e-12);
    }

    #[test]
    fn schur_psd_iff_hessian_psd_at_truth((d, k, t) in dims(), seed in any::<u64>()) {
        let gt = generate_ground_truth(d, k, t, RngSpec::new(seed)).unwrap();
        let p = MetaParams::from_ground_truth(&gt);
        let (hq, _) = min_eigenpair(&schur_complement_q(&p, &gt).unwrap());
        let (hh, _) = min_eigenpair(&hessian_meta(&p, &gt).unwrap());
        prop_assert!(hq >= -1e-8 && hh >= -1e-8);
        let (hr, _) = min_eigenpair(&reduced_hessian(&p.u, &gt).unwrap());
        prop_assert!((hr - 2.0 * hq).abs() < 1e-8 * hr.abs().max(1.0));
    }

    #[test]
    fn sr_identity(k in 1usize..=2, t in 1usize..=4, extra in 0usize..4, seed in any::<u64>()) {
        let d = k * (t + 1) + extra;
        let gt = generate_ground_truth(d, k, t, RngSpec::new(seed)).unwrap();
        let mean = gt.retrain_factors().iter().fold(DMatrix::zeros(d, d), |acc, u| acc + outer_self(u)) / t as f64;
        prop_assert!((solve_sr_population(&gt) - &gt.a_star - mean).amax() < 1e-12);
    }

    #[test]
    fn best_rank_error_is_monotone_in_rank(seed in any::<u64>(), n in 2usize..7) {
        let m = init_meta_params(n, 1, 1, 1.0, RngSpec::new(seed)).a;
        let errs: Vec<f64> = (1..=n).map(|r| best_rank_approx(&m, r).unwrap().1).collect();
        prop_assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-14));
        prop_assert!(errs[n - 1] < 1e-20);
    }
}
