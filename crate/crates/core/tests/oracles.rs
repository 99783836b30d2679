mod common;

use common::{anchored_admm, fed_setup, world};
use fedvar::dp::{add_gaussian_noise, NoisePolicy};
use fedvar::federated::{
    default_eta, fit_federated_designs, momentum_sequence, refine_fista, stage1_round, stage1_run, FistaConfig,
};
use fedvar::matops::{svd_truncate, Mat};
use fedvar::metrics::expanding_window_errors;
use fedvar::rank_select::{select_rank, RankConfig};
use fedvar::single_client::{fit_admm, least_squares, AdmmConfig};
use fedvar::tuning::{rolling_cv, CvOptions, Stronger, TuneGrid};
use fedvar::var::{
    assemble_dgp, companion_spectral_radius, draw_innovations, forecast_one_step, lag_design, lq_quasi_norm, simulate,
    simulate_with_innovations, standard_normal_matrix, DgpSpec, Innovations, LagDesign, TimeSeriesPanel,
};
use fedvar::SeedTree;

fn gaussian(seed: u64, rows: usize, cols: usize) -> Mat<f64> {
    standard_normal_matrix(rows, cols, &mut SeedTree::new(seed).rng())
}

/// Driven design with exact responses `y = x A'`.
fn noiseless_design(seed: u64, a: &Mat<f64>, len: usize) -> LagDesign<f64> {
    let d = a.nrows();
    let drive = svd_truncate(&(Mat::<f64>::identity(d, d) * 0.3), d).unwrap().0;
    let panel = simulate(&drive, 1, len, 50, &Innovations::StandardNormal, &mut SeedTree::new(seed).rng()).unwrap();
    let mut des = lag_design(&panel);
    des.y = &des.x * a.transpose();
    des
}

#[test]
fn fista_matches_admm_on_the_l1_problem() {
    for inst in 0..50u64 {
        let (n, pd, d) = (120, 5, 3);
        let des = LagDesign {
            x: gaussian(inst, n, pd),
            y: gaussian(inst + 1000, n, d),
        };
        let a0 = gaussian(inst + 2000, d, pd) * 0.2;
        let varpi = 0.05 + 0.01 * (inst % 7) as f64;
        let cfg = FistaConfig::new(varpi, default_eta(&des).unwrap(), 200).unwrap();
        let fista = refine_fista(&des, &a0, &cfg).unwrap().delta;
        // same problem for ADMM: shift the response, kill the low-rank block
        let shifted = LagDesign {
            x: des.x.clone(),
            y: &des.y - &des.x * a0.transpose(),
        };
        let mut admm = AdmmConfig::new(1e6, Some(varpi), None);
        admm.eps_pri = Some(1e-11);
        admm.eps_dual = Some(1e-11);
        admm.max_iter = 100_000;
        let fit = fit_admm(&shifted, &admm).unwrap();
        assert!(fit.decomposition.a0.iter().all(|&x| x == 0.0));
        let gap = (&fista - &fit.decomposition.delta).norm();
        assert!(gap < 1e-4, "instance {inst}: gap {gap}");
    }
}

#[test]
fn unpenalized_admm_is_least_squares() {
    for inst in 0..10u64 {
        let des = LagDesign {
            x: gaussian(inst, 80, 4),
            y: gaussian(inst + 50, 80, 3),
        };
        let mut cfg = AdmmConfig::new(0.0, Some(0.0), None);
        cfg.eps_pri = Some(1e-11);
        cfg.eps_dual = Some(1e-11);
        cfg.max_iter = 50_000;
        let fit = fit_admm(&des, &cfg).unwrap();
        let ls = least_squares(&des, false).unwrap();
        assert!((fit.decomposition.combined() - ls).norm() < 1e-6);
    }
}

#[test]
fn eta_matches_power_iteration() {
    let des = LagDesign {
        x: gaussian(3, 60, 6),
        y: gaussian(4, 60, 2),
    };
    let xtx = des.x.transpose() * &des.x / 60.0;
    let mut v = nalgebra::DVector::from_element(6, 1.0);
    let mut top = 0.0;
    for _ in 0..5000 {
        let w = &xtx * &v;
        top = w.norm();
        v = w / top;
    }
    let eta = default_eta(&des).unwrap();
    assert!((eta - 1.0 / (2.0 * top)).abs() <= 1e-8 * eta);
}

#[test]
fn momentum_recursion_closed_form() {
    let q = momentum_sequence::<f64>(60);
    assert!((q[1] - (1.0 + 5f64.sqrt()) / 2.0).abs() <= 1e-12);
    for n in 0..60 {
        // q_{n+1}^2 - q_{n+1} = q_n^2
        assert!((q[n + 1] * q[n + 1] - q[n + 1] - q[n] * q[n]).abs() <= 1e-12 * q[n + 1] * q[n + 1]);
    }
}

#[test]
fn duplicated_client_matches_single_client() {
    let (_, designs) = world(5, 6, 2, 1, 100);
    let (mut cfg, _) = fed_setup(&designs, 2, NoisePolicy::None, 1.0, 0.1);
    let one = stage1_round(&cfg.init_a0, &designs, &cfg, &SeedTree::new(0), 0).unwrap().0;
    let twice = vec![designs[0].clone(), designs[0].clone()];
    cfg.weights = vec![0.5, 0.5];
    let two = stage1_round(&cfg.init_a0, &twice, &cfg, &SeedTree::new(0), 0).unwrap().0;
    assert!((one - two).norm() < 1e-12);
}

#[test]
fn truth_is_a_fixed_point_without_noise() {
    let a0 = svd_truncate(&gaussian(8, 5, 5), 2).unwrap().0 * 0.2;
    let designs = vec![noiseless_design(9, &a0, 200)];
    let (mut cfg, _) = fed_setup(&designs, 2, NoisePolicy::None, 1.0, 0.1);
    cfg.init_a0 = a0.clone();
    let next = stage1_round(&a0, &designs, &cfg, &SeedTree::new(0), 0).unwrap().0;
    assert!((next - &a0).norm() < 1e-10);
}

#[test]
fn noise_draws_have_the_requested_scale() {
    let sigma = 1.123_772_362_248_746_5;
    let zero = Mat::<f64>::zeros(1000, 1000);
    let draws = add_gaussian_noise(&zero, sigma, &mut SeedTree::new(77).rng()).unwrap();
    let n = draws.len() as f64;
    let mean = draws.sum() / n;
    let sd = (draws.map(|x| (x - mean) * (x - mean)).sum() / (n - 1.0)).sqrt();
    assert!((sd / sigma - 1.0).abs() < 0.01);
}

#[test]
fn ar1_sample_variance() {
    let a = Mat::from_element(1, 1, 0.5);
    let panel = simulate(&a, 1, 100_000, 200, &Innovations::StandardNormal, &mut SeedTree::new(12).rng()).unwrap();
    let y = panel.observations();
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let var = y.map(|v| (v - mean) * (v - mean)).sum() / (n - 1.0);
    assert!((var / (4.0 / 3.0) - 1.0).abs() < 0.05);
}

#[test]
fn residuals_replay_the_innovations() {
    let dgp = assemble_dgp::<f64, _>(&DgpSpec { d: 6, p: 2, ..DgpSpec::standard() }, &mut SeedTree::new(3).rng()).unwrap();
    let a = dgp.client_matrix(1);
    let eps = draw_innovations(6, 260, &Innovations::StandardNormal, &mut SeedTree::new(4).rng()).unwrap();
    let panel = simulate_with_innovations(&a, 2, 200, &eps, "c").unwrap();
    let des = lag_design(&panel);
    let resid = &des.y - &des.x * a.transpose();
    assert!((resid - eps.rows(200, 60)).amax() < 1e-12);
    // forecast agrees with the design row
    let f = forecast_one_step(&a, &panel.recent(10).unwrap()).unwrap();
    assert!((f.transpose() - des.x.row(10) * a.transpose()).amax() < 1e-12);
}

#[test]
fn dgp_constraints_hold() {
    for seed in 0..20 {
        let spec = DgpSpec { d: 20, ..DgpSpec::standard() };
        let dgp = assemble_dgp::<f64, _>(&spec, &mut SeedTree::new(seed).rng()).unwrap();
        for (k, delta) in dgp.deltas.iter().enumerate() {
            assert!((dgp.a0.norm() / delta.norm() - 5.0).abs() < 1e-9);
            assert!(lq_quasi_norm(delta, 0.1) <= 10.0 + 1e-9);
            assert!(companion_spectral_radius(&dgp.client_matrix(k), 1).unwrap() <= 0.9 + 1e-6);
        }
    }
}

#[test]
fn homogeneous_noiseless_clients_recover_the_truth() {
    let a0 = svd_truncate(&gaussian(31, 6, 6), 2).unwrap().0;
    let a0 = &a0 * (0.5 / fedvar::matops::operator_norm(&a0).unwrap());
    let designs: Vec<_> = (0..3).map(|k| noiseless_design(40 + k, &a0, 300)).collect();
    let (cfg, fista) = fed_setup(&designs, 2, NoisePolicy::None, 1.0, 0.1);
    let fit = fit_federated_designs(&designs, &cfg, &fista, &SeedTree::new(0), Some(&a0)).unwrap();
    for dec in &fit.decompositions {
        assert!((dec.combined() - &a0).norm() < 1e-3);
    }
    let total: usize = designs.iter().map(|d| d.len()).sum();
    for (w, d) in fit.report.weights.iter().zip(&designs) {
        assert!((w - d.len() as f64 / total as f64).abs() < 1e-12);
    }
}

#[test]
fn single_client_federation_is_finite() {
    let (_, designs) = world(2, 5, 1, 1, 80);
    let (cfg, fista) = fed_setup(&designs, 1, NoisePolicy::None, 1.0, 0.1);
    let fit = fit_federated_designs(&designs, &cfg, &fista, &SeedTree::new(0), None).unwrap();
    assert!(fit.decompositions[0].combined().iter().all(|x| x.is_finite()));
}

#[test]
fn private_fit_is_bit_reproducible() {
    let (_, designs) = world(6, 8, 2, 3, 120);
    let (cfg, fista) = fed_setup(&designs, 2, NoisePolicy::FixedScale { kappa: 1.0 }, 2.0, 0.1);
    let a = fit_federated_designs(&designs, &cfg, &fista, &SeedTree::new(9), None).unwrap();
    let b = fit_federated_designs(&designs, &cfg, &fista, &SeedTree::new(9), None).unwrap();
    assert_eq!(a, b);
    let c = fit_federated_designs(&designs, &cfg, &fista, &SeedTree::new(10), None).unwrap();
    assert_ne!(a.a0_hat(), c.a0_hat());
}

#[test]
fn stage1_improves_on_its_initializer() {
    let mut wins = 0;
    for rep in 0..100 {
        let (dgp, designs) = world(10_000 + rep, 20, 2, 5, 400);
        let (cfg, _) = fed_setup(&designs, 2, NoisePolicy::None, 2.0, 0.1);
        let out = stage1_run(&designs, &cfg, &SeedTree::new(rep), Some(&dgp.a0)).unwrap();
        let last = out.rounds.last().unwrap().a0_error_fro.unwrap();
        if last < out.initial_error.unwrap() {
            wins += 1;
        }
    }
    assert!(wins >= 90, "{wins} of 100");
}

#[test]
fn rank_selection_is_consistent_at_large_samples() {
    for rank in 1..=3 {
        let mut hits = 0;
        for rep in 0..200 {
            let (_, designs) = world(20_000 + 1000 * rank as u64 + rep, 20, rank, 1, 1600);
            let fit = fit_admm(&designs[0], &anchored_admm(&designs[0])).unwrap();
            let cfg = RankConfig::new(20, 20, vec![1600]).unwrap();
            if select_rank(&[fit.decomposition.a0], &cfg).unwrap() == rank {
                hits += 1;
            }
        }
        assert!(hits >= 190, "rank {rank}: {hits} of 200");
    }
}

fn sparse_truth_panel() -> TimeSeriesPanel<f64> {
    let low = svd_truncate(&gaussian(61, 6, 6), 1).unwrap().0;
    let mut a = &low * (0.4 / fedvar::matops::operator_norm(&low).unwrap());
    a[(0, 3)] += 0.45;
    a[(4, 1)] -= 0.45;
    simulate(&a, 1, 160, 100, &Innovations::StandardNormal, &mut SeedTree::new(62).rng()).unwrap()
}

#[test]
fn cv_prefers_the_sparse_component_when_present() {
    let panel = sparse_truth_panel();
    let grid = TuneGrid::new("omega", vec![0.01, f64::INFINITY], Stronger::Larger).unwrap();
    let opts = CvOptions::for_stacked_dim(6);
    let res = rolling_cv(&panel, &[grid], opts, |train, pt| {
        let omega = if pt[0].is_finite() { Some(pt[0]) } else { None };
        let des = lag_design(train);
        Ok(fit_admm(&des, &AdmmConfig::new(0.3, omega, None))?.decomposition.combined())
    })
    .unwrap();
    let combined = res.table.iter().find(|r| r.point[0].is_finite()).unwrap().score;
    let low_rank_only = res.table.iter().find(|r| !r.point[0].is_finite()).unwrap().score;
    assert!(low_rank_only > combined, "{low_rank_only} vs {combined}");
    assert_eq!(res.best, vec![0.01]);
    let again = rolling_cv(&panel, &[TuneGrid::new("omega", vec![0.01, f64::INFINITY], Stronger::Larger).unwrap()], opts, |train, pt| {
        let omega = if pt[0].is_finite() { Some(pt[0]) } else { None };
        Ok(fit_admm(&lag_design(train), &AdmmConfig::new(0.3, omega, None))?.decomposition.combined())
    })
    .unwrap();
    assert_eq!(res, again);
}

#[test]
fn forecasts_never_look_ahead() {
    let (_, designs) = world(70, 4, 1, 1, 60);
    let series = {
        let mut s = Mat::zeros(61, 4);
        s.set_row(0, &designs[0].x.row(0));
        s.rows_mut(1, 60).copy_from(&designs[0].y);
        s
    };
    let panel = TimeSeriesPanel::from_series("c", &series, 1).unwrap();
    let fit = |train: &TimeSeriesPanel<f64>| {
        let a = least_squares(&lag_design(train), true)?;
        forecast_one_step(&a, &train.recent(train.len())?)
    };
    let base = expanding_window_errors(&panel, 40, fit).unwrap();
    for corrupt in [45usize, 59] {
        let mut bad = series.clone();
        bad.row_mut(corrupt + 1).fill(1e6);
        let bad_panel = TimeSeriesPanel::from_series("c", &bad, 1).unwrap();
        let errs = expanding_window_errors(&bad_panel, 40, fit).unwrap();
        // origins before the corrupted time are untouched
        let unaffected = corrupt - 40;
        assert_eq!(base.rows(0, unaffected), errs.rows(0, unaffected));
        assert_ne!(base.row(unaffected), errs.row(unaffected));
    }
}
