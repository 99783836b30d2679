//! Monte Carlo experiments on the simulated low-rank plus sparse VAR.

use fedvar::dp::{NoisePolicy, PrivacyBudget};
use fedvar::federated::{
    default_rounds, fit_federated_designs, init_from_largest_client, pooled_operator_norm, sample_size_weights, FedConfig,
    FistaConfig,
};
use fedvar::metrics::ErrorRecord;
use fedvar::rank_select::{select_rank, RankConfig};
use fedvar::single_client::{fit_admm, AdmmConfig};
use fedvar::tuning::AnchorRule;
use fedvar::var::{assemble_dgp, lag_design, simulate, DeviationLaw, Dgp, DgpSpec, Innovations, LagDesign};
use fedvar::{Mat, SeedTree};

use crate::config::{Budget, Deviation, ExperimentConfig, ExperimentKind, NoiseMode};
use crate::output::Record;

/// One grid cell of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub clients: usize,
    pub t_k: usize,
    pub rank: usize,
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let Cell { clients, t_k, rank } = Cell {
        clients: cfg.dims.clients,
        t_k: cfg.sample_sizes()[0],
        rank: cfg.dims.rank,
    };
    match cfg.experiment {
        ExperimentKind::SingleClientCurve | ExperimentKind::TSweep => {
            cfg.sample_sizes().into_iter().map(|t_k| Cell { clients, t_k, rank }).collect()
        }
        ExperimentKind::RankTable => cfg
            .true_ranks()
            .into_iter()
            .flat_map(|rank| cfg.sample_sizes().into_iter().map(move |t_k| Cell { clients, t_k, rank }))
            .collect(),
        ExperimentKind::KSweep => cfg.client_grid().into_iter().map(|clients| Cell { clients, t_k, rank }).collect(),
        ExperimentKind::PrivacyHeatmap => vec![Cell { clients, t_k, rank }],
        ExperimentKind::Empirical => Vec::new(),
    }
}

/// Simulated truth and per-client lag designs.
pub struct World {
    pub dgp: Dgp<f64>,
    pub designs: Vec<LagDesign<f64>>,
}

/// Substreams: `tree/0` draws the DGP, `tree/1/k` simulates client `k`.
pub fn make_world(cfg: &ExperimentConfig, cell: Cell, tree: &SeedTree) -> fedvar::Result<World> {
    let spec = DgpSpec {
        d: cfg.dims.d,
        p: cfg.dims.p,
        rank: cell.rank,
        clients: cell.clients,
        q: cfg.dgp.q,
        s_q: cfg.dgp.s_q,
        ratio: cfg.dgp.ratio,
        target_radius: cfg.dgp.target_radius,
        deviation: match cfg.dgp.deviation {
            Deviation::Scaled => DeviationLaw::Scaled,
            Deviation::Trimmed => DeviationLaw::Trimmed,
        },
    };
    let dgp = assemble_dgp(&spec, &mut tree.child(0).rng())?;
    let designs = (0..cell.clients)
        .map(|k| {
            let mut rng = tree.path(&[1, k as u64]).rng();
            let panel = simulate(
                &dgp.client_matrix(k),
                cfg.dims.p,
                cell.t_k,
                cfg.estimator.burn_in,
                &Innovations::StandardNormal,
                &mut rng,
            )?;
            Ok(lag_design(&panel))
        })
        .collect::<fedvar::Result<Vec<_>>>()?;
    Ok(World { dgp, designs })
}

fn anchor(cfg: &ExperimentConfig) -> AnchorRule<f64> {
    AnchorRule {
        c_lambda: cfg.estimator.c_lambda,
        c_omega: cfg.estimator.c_omega,
    }
}

pub fn admm_config(cfg: &ExperimentConfig, design: &LagDesign<f64>) -> AdmmConfig<f64> {
    let rule = anchor(cfg);
    let (pd, n) = (design.stacked_dim(), design.len());
    AdmmConfig::new(rule.lambda(pd, n), Some(rule.omega(pd, n)), cfg.estimator.zeta)
}

struct Row<'a> {
    rep: usize,
    cell: Cell,
    budget: Option<Budget>,
    method: &'a str,
}

impl Row<'_> {
    fn push(&self, out: &mut Vec<Record>, metric: &str, round: Option<usize>, value: f64) {
        out.push(Record {
            replication: self.rep,
            clients: self.cell.clients,
            t_k: self.cell.t_k,
            rank: self.cell.rank,
            epsilon: self.budget.map(|b| b.epsilon),
            delta: self.budget.map(|b| b.delta),
            method: self.method.into(),
            metric: metric.into(),
            round,
            value,
        });
    }

    fn errors(&self, out: &mut Vec<Record>, e: &ErrorRecord<f64>) {
        for (name, v) in e.named() {
            self.push(out, name, None, v);
        }
    }
}

/// Records for one replication of one cell.
pub fn replicate(cfg: &ExperimentConfig, cell: Cell, rep: usize, tree: &SeedTree) -> fedvar::Result<Vec<Record>> {
    let world = make_world(cfg, cell, tree)?;
    let World { dgp, designs } = &world;
    let admm: Vec<_> = designs.iter().map(|d| admm_config(cfg, d)).collect();
    let fits = designs
        .iter()
        .zip(&admm)
        .map(|(d, c)| fit_admm(d, c).map(|f| f.decomposition))
        .collect::<fedvar::Result<Vec<_>>>()?;
    let mut out = Vec::new();
    let single = Row { rep, cell, budget: None, method: "single" };
    let pairs: Vec<_> = fits.iter().map(|f| (f.a0.clone(), f.delta.clone())).collect();
    let single_err = ErrorRecord::from_estimates(rep, &pairs, &dgp.a0, &dgp.deltas)?;

    let lens: Vec<usize> = designs.iter().map(|d| d.len()).collect();
    let (d, pd) = (cfg.dims.d, cfg.dims.d * cfg.dims.p);
    let selected = {
        let a0s: Vec<Mat<f64>> = fits.iter().map(|f| f.a0.clone()).collect();
        select_rank(&a0s, &RankConfig::new(d, pd, lens.clone())?)?
    };
    if cfg.experiment == ExperimentKind::RankTable {
        let row = Row { method: "ridge_ratio", ..single };
        row.push(&mut out, "selected_rank", None, selected as f64);
        row.push(&mut out, "correct", None, f64::from(u8::from(selected == cell.rank)));
        return Ok(out);
    }
    single.errors(&mut out, &single_err);
    if cfg.experiment == ExperimentKind::SingleClientCurve {
        return Ok(out);
    }

    let rank = if cfg.estimator.oracle_rank { cell.rank } else { selected };
    let rounds = cfg.estimator.rounds.unwrap_or_else(|| default_rounds(lens.iter().sum()));
    let init = init_from_largest_client(designs, &admm, rank)?;
    let rule = anchor(cfg);
    let fista = designs
        .iter()
        .map(|des| {
            let mut f = FistaConfig::for_design(des, rule.omega(des.stacked_dim(), des.len()))?;
            f.iters = cfg.estimator.local_iters;
            Ok(f)
        })
        .collect::<fedvar::Result<Vec<_>>>()?;
    let step = cfg.estimator.c_rho / pooled_operator_norm(designs)?;
    let mut settings: Vec<Option<Budget>> = vec![None];
    settings.extend(cfg.privacy_settings().into_iter().map(Some));
    for budget in settings {
        let (noise, b) = match budget {
            None => (NoisePolicy::None, Budget { epsilon: 1.0, delta: 0.5 }),
            Some(b) => (
                match cfg.privacy.noise_mode {
                    NoiseMode::Calibrated => NoisePolicy::Calibrated {
                        sensitivity: cfg.privacy.sensitivity,
                    },
                    _ => NoisePolicy::FixedScale { kappa: cfg.kappa() },
                },
                b,
            ),
        };
        let fed_cfg = FedConfig {
            rank,
            step_rho: step,
            rounds,
            init_a0: init.clone(),
            weights: sample_size_weights(&lens)?,
            noise,
            budget: PrivacyBudget::new(b.epsilon, b.delta, rounds)?,
        };
        // every setting sees the same standard-normal draws
        let fit = fit_federated_designs(designs, &fed_cfg, &fista, &tree.child(2), Some(&dgp.a0))?;
        let est: Vec<_> = fit.decompositions.iter().map(|c| (c.a0.clone(), c.delta.clone())).collect();
        let method = if budget.is_some() { "fed_dp" } else { "fed_ndp" };
        let row = Row { rep, cell, budget, method };
        row.errors(&mut out, &ErrorRecord::from_estimates(rep, &est, &dgp.a0, &dgp.deltas)?);
        if cfg.trace_rounds {
            for r in &fit.report.stage1.rounds {
                if let Some(e) = r.a0_error_fro {
                    row.push(&mut out, "a0_err", Some(r.round), e);
                }
            }
        }
    }
    Ok(out)
}
