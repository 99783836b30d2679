use fedvar::dp::{gaussian_sigma, NoisePolicy, PrivacyBudget};
use fedvar::federated::{local_gradient, refine_fista, stage1_run, FedConfig, FistaConfig, Moments};
use fedvar::matops::{
    norms, singular_values, soft_threshold, svd_truncate, svt, tangent_project, thin_svd, Mat, TangentBasis,
};
use fedvar::metrics::{benefit, percentile_band, rmsfe_from_errors, RmsfeAggregation};
use fedvar::rank_select::ridge_ratio_rank;
use fedvar::var::{standard_normal_matrix, LagDesign};
use fedvar::SeedTree;
use proptest::prelude::*;

fn gaussian(seed: u64, rows: usize, cols: usize) -> Mat<f64> {
    standard_normal_matrix(rows, cols, &mut SeedTree::new(seed).rng())
}

fn basis_of(m: &Mat<f64>, r: usize) -> TangentBasis<f64> {
    thin_svd(m).unwrap().truncated(r).basis()
}

fn design(seed: u64, n: usize, pd: usize, d: usize) -> LagDesign<f64> {
    LagDesign {
        x: gaussian(seed, n, pd),
        y: gaussian(seed ^ 0x5a5a, n, d),
    }
}

fn penalized(des: &LagDesign<f64>, a0: &Mat<f64>, delta: &Mat<f64>, varpi: f64) -> f64 {
    Moments::from_design(des).loss(&(a0 + delta)) + varpi * delta.abs().sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn eckart_young_tail(seed in any::<u64>(), rows in 2usize..8, cols in 2usize..8, r in 1usize..4) {
        let m = gaussian(seed, rows, cols);
        let r = r.min(rows.min(cols));
        let (trunc, _) = svd_truncate(&m, r).unwrap();
        let s = singular_values(&m).unwrap();
        let tail: f64 = s[r..].iter().map(|x| x * x).sum();
        prop_assert!(((&m - &trunc).norm_squared() - tail).abs() < 1e-9 * (1.0 + tail));
        let kept = singular_values(&trunc).unwrap();
        prop_assert!(kept[r..].iter().all(|&x| x < 1e-10 * kept[0].max(1e-300)));
    }

    #[test]
    fn svt_is_the_nuclear_prox(seed in any::<u64>(), tau in 0.0f64..2.0) {
        let m = gaussian(seed, 4, 5);
        let x = svt(&m, tau).unwrap();
        let f = |z: &Mat<f64>| 0.5 * (z - &m).norm_squared() + tau * norms(z).unwrap().nuclear;
        let fx = f(&x);
        for k in 0..8u64 {
            let dir = gaussian(seed.wrapping_add(k + 1), 4, 5) * 0.05;
            prop_assert!(fx <= f(&(&x + dir)) + 1e-10);
        }
    }

    #[test]
    fn soft_threshold_is_the_l1_prox(seed in any::<u64>(), tau in 0.0f64..1.5) {
        let m = gaussian(seed, 3, 6);
        let x = soft_threshold(&m, tau).unwrap();
        let f = |z: &Mat<f64>| 0.5 * (z - &m).norm_squared() + tau * z.abs().sum();
        let fx = f(&x);
        for k in 0..8u64 {
            let dir = gaussian(seed.wrapping_add(k + 7), 3, 6) * 0.05;
            prop_assert!(fx <= f(&(&x + dir)) + 1e-10);
        }
    }

    #[test]
    fn tangent_projection_is_an_orthogonal_projector(seed in any::<u64>(), r in 1usize..4) {
        let base = gaussian(seed, 6, 7);
        let basis = basis_of(&base, r);
        let a = gaussian(seed.wrapping_add(1), 6, 7);
        let b = gaussian(seed.wrapping_add(2), 6, 7);
        let pa = tangent_project(&a, &basis).unwrap();
        let pb = tangent_project(&b, &basis).unwrap();
        prop_assert!((tangent_project(&pa, &basis).unwrap() - &pa).norm() < 1e-10);
        prop_assert!((pa.dot(&b) - a.dot(&pb)).abs() < 1e-10);
        prop_assert!(pa.norm() <= a.norm() + 1e-12);
    }

    #[test]
    fn stage1_iterates_stay_rank_r(seed in any::<u64>(), r in 1usize..3, noisy in any::<bool>()) {
        let designs: Vec<_> = (0..3).map(|k| design(seed.wrapping_add(k), 40, 5, 4)).collect();
        let init = svd_truncate(&gaussian(seed, 4, 5), r).unwrap().0;
        let cfg = FedConfig {
            rank: r,
            step_rho: 0.05,
            rounds: 6,
            init_a0: init,
            weights: vec![1.0 / 3.0; 3],
            noise: if noisy { NoisePolicy::FixedScale { kappa: 1.0 } } else { NoisePolicy::None },
            budget: PrivacyBudget::new(2.0, 0.1, 6).unwrap(),
        };
        let out = stage1_run(&designs, &cfg, &SeedTree::new(seed), None).unwrap();
        let s = singular_values(&out.a0_hat).unwrap();
        prop_assert!(s[r..].iter().all(|&x| x <= 1e-10 * s[0]));
        prop_assert!(out.rounds.iter().all(|t| t.grad_norm >= 0.0 && t.sigma_used >= 0.0));
        prop_assert!(out.rounds.iter().flat_map(|t| &t.clients).all(|c| c.message_norm >= 0.0));
    }

    #[test]
    fn noiseless_round_is_deterministic(seed in any::<u64>()) {
        let designs = vec![design(seed, 30, 4, 4)];
        let init = svd_truncate(&gaussian(seed, 4, 4), 2).unwrap().0;
        let cfg = FedConfig {
            rank: 2,
            step_rho: 0.1,
            rounds: 3,
            init_a0: init,
            weights: vec![1.0],
            noise: NoisePolicy::None,
            budget: PrivacyBudget::new(1.0, 0.1, 3).unwrap(),
        };
        let a = stage1_run(&designs, &cfg, &SeedTree::new(1), None).unwrap();
        let b = stage1_run(&designs, &cfg, &SeedTree::new(2), None).unwrap();
        prop_assert_eq!(a.a0_hat, b.a0_hat);
    }

    #[test]
    fn fista_never_worse_than_zero(seed in any::<u64>(), varpi in 0.0f64..0.5) {
        let des = design(seed, 50, 5, 3);
        let a0 = gaussian(seed.wrapping_add(9), 3, 5) * 0.3;
        let cfg = FistaConfig::for_design(&des, varpi).unwrap();
        let out = refine_fista(&des, &a0, &cfg).unwrap();
        let zero = Mat::zeros(3, 5);
        prop_assert!(penalized(&des, &a0, &out.delta, varpi) <= penalized(&des, &a0, &zero, varpi) + 1e-10);
        prop_assert_eq!(out.objective.len(), cfg.iters + 1);
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>()) {
        let des = design(seed, 30, 4, 3);
        let a = gaussian(seed.wrapping_add(3), 3, 4);
        let g = local_gradient(&des, &a).unwrap();
        let moments = Moments::from_design(&des);
        let dir = gaussian(seed.wrapping_add(4), 3, 4);
        let h = 1e-6;
        let fd = (moments.loss(&(&a + &dir * h)) - moments.loss(&(&a - &dir * h))) / (2.0 * h);
        let exact = g.dot(&dir);
        prop_assert!((fd - exact).abs() <= 1e-5 * exact.abs().max(1e-8));
    }

    #[test]
    fn ridge_ratio_is_scale_invariant(raw in proptest::collection::vec(0.0f64..10.0, 2..12), c in 1e-4f64..1.0, k in 0.01f64..100.0) {
        let mut s = raw.clone();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        // keep values clear of the flooring threshold under either scale
        let s: Vec<f64> = s.into_iter().map(|x| if x < 1e-6 { 0.0 } else { x }).collect();
        let r_bar = s.len();
        let scaled: Vec<f64> = s.iter().map(|x| x * k).collect();
        prop_assert_eq!(ridge_ratio_rank(&s, c, r_bar).unwrap(), ridge_ratio_rank(&scaled, c * k, r_bar).unwrap());
    }

    #[test]
    fn benefit_is_antisymmetric(a in proptest::collection::vec(0.0f64..5.0, 1..10), shift in -2.0f64..2.0) {
        let b: Vec<f64> = a.iter().map(|x| (x + shift).abs()).collect();
        prop_assert!((benefit(&a, &b).unwrap() + benefit(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn band_mean_is_permutation_invariant(mut v in proptest::collection::vec(-5.0f64..5.0, 1..40), seed in any::<u64>()) {
        let before = percentile_band(&v, 5.0, 95.0).unwrap();
        let n = v.len();
        v.rotate_left((seed as usize) % n);
        v.reverse();
        let after = percentile_band(&v, 5.0, 95.0).unwrap();
        prop_assert!((before.mean - after.mean).abs() < 1e-12);
        prop_assert_eq!(before.lo, after.lo);
        prop_assert!(before.lo <= before.hi);
    }

    #[test]
    fn rmsfe_is_zero_only_for_perfect_forecasts(seed in any::<u64>(), zero_out in any::<bool>()) {
        let mut e = gaussian(seed, 20, 3);
        if zero_out {
            e.fill(0.0);
        }
        for agg in [RmsfeAggregation::Mean, RmsfeAggregation::Pooled] {
            let rep = rmsfe_from_errors(&e, agg).unwrap();
            prop_assert!(rep.aggregate.rmsfe >= 0.0);
            prop_assert_eq!(rep.aggregate.rmsfe == 0.0, zero_out);
        }
    }

    #[test]
    fn sigma_decreases_in_both_budget_parameters(e1 in 0.05f64..5.0, e2 in 0.05f64..5.0, d1 in 0.001f64..0.9, d2 in 0.001f64..0.9) {
        let (elo, ehi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        let (dlo, dhi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(gaussian_sigma(1.0, elo, dlo).unwrap() >= gaussian_sigma(1.0, ehi, dlo).unwrap());
        prop_assert!(gaussian_sigma(1.0, elo, dlo).unwrap() >= gaussian_sigma(1.0, elo, dhi).unwrap());
    }
}
