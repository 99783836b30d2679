//! Forecasting protocol on client panels: tune once on the window before
//! the evaluation origins, then refit at every origin and score one-step
//! forecasts.

use std::collections::HashMap;

use fedvar::dp::{NoisePolicy, PrivacyBudget};
use fedvar::federated::{
    default_rounds, fit_federated_designs, init_from_largest_client, pooled_operator_norm, sample_size_weights, stage1_run,
    FedConfig, FistaConfig, refine_fista,
};
use fedvar::metrics::{coefficient_forecaster, rmsfe, rmsfe_from_errors, RmsfeReport};
use fedvar::rank_select::{client_ranks, mode, RankConfig};
use fedvar::single_client::{fit_admm, fit_baseline, AdmmConfig, Baseline};
use fedvar::tuning::{nuclear_anchor, rolling_cv, sparse_anchor, CvOptions, TuneGrid};
use fedvar::var::{assemble_dgp, forecast_one_step, lag_design, simulate, DgpSpec, Innovations, LagDesign};
use fedvar::{Mat, Panel64, SeedTree};
use serde::Serialize;

use crate::config::{Budget, Codes, ExperimentConfig, NoiseMode, PanelSpec};
use crate::ingest::{load_panel, load_panel_from, write_wide};
use crate::output::ForecastRecord;
use crate::HarnessError;

/// Proximal-gradient iterations of the l1-only benchmark.
pub const L1_ITERS: usize = 200;

#[derive(Debug, Clone)]
pub struct Client {
    pub name: String,
    pub variables: Vec<String>,
    pub panel: Panel64,
    pub sensitive: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Fed(Option<Budget>),
    NucL1,
    Nuc,
    L1,
    Ls,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Fed(None) => "fed_ndp".into(),
            Method::Fed(Some(b)) => format!("fed_dp({},{})", b.epsilon, b.delta),
            Method::NucL1 => "nuc_l1".into(),
            Method::Nuc => "nuc".into(),
            Method::L1 => "l1".into(),
            Method::Ls => "ls".into(),
        }
    }
}

pub fn methods(cfg: &ExperimentConfig) -> Vec<Method> {
    let mut m = vec![Method::Fed(None)];
    m.extend(cfg.privacy_settings().into_iter().map(|b| Method::Fed(Some(b))));
    m.extend([Method::NucL1, Method::Nuc, Method::L1, Method::Ls]);
    m
}

/// Penalties chosen by cross-validation for one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tuned {
    pub nuc_l1_lambda: f64,
    pub nuc_l1_omega: f64,
    pub nuc_lambda: f64,
    pub l1_omega: f64,
    /// Stage II weight of the federated fit.
    pub varpi: f64,
}

#[derive(Debug, Clone)]
pub struct Tuning {
    pub per_client: Vec<Tuned>,
    pub client_ranks: Vec<usize>,
    pub rank: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub tuning: Tuning,
    /// `(client, method, report)` in client-major order.
    pub reports: Vec<(usize, Method, RmsfeReport<f64>)>,
}

pub fn load_clients(cfg: &ExperimentConfig) -> Result<Vec<Client>, HarnessError> {
    if cfg.empirical.panels.is_empty() {
        return Err(HarnessError::Config("empirical.panels lists no files".into()));
    }
    let clients = cfg
        .empirical
        .panels
        .iter()
        .map(|spec| {
            let (variables, panel) = load_panel(spec, cfg.dims.p)?;
            Ok(Client {
                name: panel.client_id().to_owned(),
                variables,
                panel,
                sensitive: spec.sensitive.clone(),
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let d = clients[0].panel.dim();
    if let Some(c) = clients.iter().find(|c| c.panel.dim() != d) {
        return Err(HarnessError::Data(format!("{} has {} variables, expected {d}", c.name, c.panel.dim())));
    }
    Ok(clients)
}

/// Synthetic clients shaped like a small monthly panel: levels are
/// cumulative sums of a simulated VAR, written to CSV and read back with
/// code 1.
pub fn synthetic_clients(cfg: &ExperimentConfig, tree: &SeedTree) -> Result<Vec<Client>, HarnessError> {
    let (d, p, k) = (cfg.dims.d, cfg.dims.p, cfg.dims.clients);
    let spec = DgpSpec {
        d,
        p,
        rank: cfg.dims.rank,
        clients: k,
        q: cfg.dgp.q,
        s_q: cfg.dgp.s_q,
        ratio: cfg.dgp.ratio,
        target_radius: cfg.dgp.target_radius,
        ..DgpSpec::standard()
    };
    let dgp = assemble_dgp(&spec, &mut tree.child(0).rng())?;
    let names: Vec<String> = (1..=d).map(|j| format!("y{j}")).collect();
    let panel_spec = PanelSpec {
        path: "synthetic".into(),
        codes: Codes::Uniform(1),
        standardize: true,
        sensitive: Vec::new(),
    };
    (0..k)
        .map(|c| {
            let sim = simulate(
                &dgp.client_matrix(c),
                p,
                cfg.empirical.synthetic_len,
                cfg.estimator.burn_in,
                &Innovations::StandardNormal,
                &mut tree.path(&[1, c as u64]).rng(),
            )
            ?;
            let growth = sim.series();
            let mut levels = Mat::zeros(growth.nrows() + 1, d);
            for t in 0..growth.nrows() {
                let next = levels.row(t) + growth.row(t);
                levels.set_row(t + 1, &next);
            }
            let mut buf = Vec::new();
            write_wide(&mut buf, &names, &levels)?;
            let name = format!("client{}", c + 1);
            let (variables, panel) = load_panel_from(buf.as_slice(), &panel_spec, p, &format!("{name}.csv"))?;
            Ok(Client {
                name,
                variables,
                panel,
                sensitive: Vec::new(),
            })
        })
        .collect()
}

fn admm(cfg: &ExperimentConfig, lambda: f64, omega: Option<f64>) -> AdmmConfig<f64> {
    let mut a = AdmmConfig::new(lambda, omega, cfg.estimator.zeta);
    a.max_iter = cfg.empirical.admm_max_iter;
    a
}

fn fit_single(cfg: &ExperimentConfig, method: Method, t: &Tuned, train: &Panel64) -> fedvar::Result<Mat<f64>> {
    let des = lag_design(train);
    let lowrank = |lambda, omega| Ok(fit_admm(&des, &admm(cfg, lambda, omega))?.decomposition.combined());
    match method {
        Method::NucL1 => lowrank(t.nuc_l1_lambda, Some(t.nuc_l1_omega)),
        Method::Nuc => lowrank(t.nuc_lambda, None),
        Method::L1 => fit_baseline(&des, &Baseline::L1Only { omega: t.l1_omega, iters: L1_ITERS }),
        Method::Ls => fit_baseline(&des, &Baseline::LeastSquares { jitter: true }),
        Method::Fed(_) => unreachable!("federated fits need every client"),
    }
}

struct Protocol<'a> {
    cfg: &'a ExperimentConfig,
    clients: &'a [Client],
}

impl Protocol<'_> {
    fn pd(&self) -> usize {
        self.clients[0].panel.dim() * self.cfg.dims.p
    }

    fn designs(&self, lens: &[usize]) -> fedvar::Result<Vec<LagDesign<f64>>> {
        self.clients
            .iter()
            .zip(lens)
            .map(|(c, &n)| Ok(lag_design(&c.panel.prefix(n)?)))
            .collect()
    }

    /// Stage I config for the given designs; initialized from the largest
    /// client's tuned low-rank plus sparse fit.
    fn fed_config(&self, designs: &[LagDesign<f64>], tuning: &Tuning, budget: Option<Budget>) -> fedvar::Result<FedConfig<f64>> {
        let lens: Vec<usize> = designs.iter().map(|d| d.len()).collect();
        let rounds = self.cfg.estimator.rounds.unwrap_or_else(|| default_rounds(lens.iter().sum()));
        let admm: Vec<_> = tuning
            .per_client
            .iter()
            .map(|t| admm(self.cfg, t.nuc_l1_lambda, Some(t.nuc_l1_omega)))
            .collect();
        let (noise, b) = match budget {
            None => (NoisePolicy::None, Budget { epsilon: 1.0, delta: 0.5 }),
            Some(b) if self.cfg.privacy.noise_mode == NoiseMode::Calibrated => (
                NoisePolicy::Calibrated {
                    sensitivity: self.cfg.privacy.sensitivity,
                },
                b,
            ),
            Some(b) => (NoisePolicy::FixedScale { kappa: self.cfg.kappa() }, b),
        };
        let sensitive = self.clients.iter().flat_map(|c| c.sensitive.iter().copied());
        Ok(FedConfig {
            rank: tuning.rank,
            step_rho: self.cfg.estimator.c_rho / pooled_operator_norm(designs)?,
            rounds,
            init_a0: init_from_largest_client(designs, &admm, tuning.rank)?,
            weights: sample_size_weights(&lens)?,
            noise,
            budget: PrivacyBudget::new(b.epsilon, b.delta, rounds)?.with_sensitive_indices(sensitive),
        })
    }

    fn fed_fit(&self, lens: &[usize], tuning: &Tuning, budget: Option<Budget>, noise: &SeedTree) -> fedvar::Result<Vec<Mat<f64>>> {
        let designs = self.designs(lens)?;
        let fed_cfg = self.fed_config(&designs, tuning, budget)?;
        let fista = designs
            .iter()
            .zip(&tuning.per_client)
            .map(|(des, t)| {
                let mut f = FistaConfig::for_design(des, t.varpi)?;
                f.iters = self.cfg.estimator.local_iters;
                Ok(f)
            })
            .collect::<fedvar::Result<Vec<_>>>()?;
        let fit = fit_federated_designs(&designs, &fed_cfg, &fista, noise, None)?;
        Ok(fit.decompositions.iter().map(|c| c.combined()).collect())
    }

    /// Cross-validates every penalty on the first `lens[k]` observations
    /// of each client.
    fn tune(&self, lens: &[usize]) -> Result<Tuning, HarnessError> {
        let pd = self.pd();
        let cfg = self.cfg;
        let holdout = self.cfg.empirical.cv_holdout;
        let opts = CvOptions { holdout, min_train: 2 };
        let mut per_client = Vec::with_capacity(lens.len());
        for (c, &n) in self.clients.iter().zip(lens) {
            if n < holdout + 2 {
                return Err(HarnessError::Data(format!(
                    "{}: {n} tuning observations cannot hold a holdout of {holdout}",
                    c.name
                )));
            }
            let train = c.panel.prefix(n)?;
            let lam = TuneGrid::penalty("lambda", nuclear_anchor(pd, n))?;
            let om = TuneGrid::penalty("omega", sparse_anchor(pd, n))?;
            let lowrank = |t: &Panel64, lambda, omega| Ok(fit_admm(&lag_design(t), &admm(cfg, lambda, omega))?.decomposition.combined());
            let both = rolling_cv(&train, &[lam.clone(), om.clone()], opts, |t, x| lowrank(t, x[0], Some(x[1])))?;
            let nuc = rolling_cv(&train, &[lam], opts, |t, x| lowrank(t, x[0], None))?;
            let l1 = rolling_cv(&train, &[om], opts, |t, x| {
                fit_baseline(&lag_design(t), &Baseline::L1Only { omega: x[0], iters: L1_ITERS })
            })?;
            log::debug!("{}: nuc+l1 {:?} nuc {:?} l1 {:?}", c.name, both.best, nuc.best, l1.best);
            per_client.push(Tuned {
                nuc_l1_lambda: both.best[0],
                nuc_l1_omega: both.best[1],
                nuc_lambda: nuc.best[0],
                l1_omega: l1.best[0],
                varpi: both.best[1],
            });
        }
        let d = self.clients[0].panel.dim();
        let fits = self
            .clients
            .iter()
            .zip(lens)
            .zip(&per_client)
            .map(|((c, &n), t)| {
                let des = lag_design(&c.panel.prefix(n)?);
                Ok(fit_admm(&des, &admm(cfg, t.nuc_l1_lambda, Some(t.nuc_l1_omega)))?.decomposition.a0)
            })
            .collect::<fedvar::Result<Vec<_>>>()
            ?;
        let ranks = client_ranks(&fits, &RankConfig::new(d, pd, lens.to_vec())?)?;
        let mut tuning = Tuning {
            rank: mode(&ranks)?,
            client_ranks: ranks,
            per_client,
        };
        self.tune_varpi(lens, &mut tuning)?;
        Ok(tuning)
    }

    /// Stage II weight by the same rolling scheme; the non-private Stage I
    /// estimate at each tuning origin is shared by all clients and grid
    /// points.
    fn tune_varpi(&self, lens: &[usize], tuning: &mut Tuning) -> Result<(), HarnessError> {
        let holdout = self.cfg.empirical.cv_holdout;
        let mut shared: HashMap<(usize, usize), Mat<f64>> = HashMap::new();
        for j in 0..holdout {
            let origin: Vec<usize> = lens.iter().map(|&n| n - holdout + j).collect();
            let designs = self.designs(&origin)?;
            let fed_cfg = self.fed_config(&designs, tuning, None)?;
            let a0 = stage1_run(&designs, &fed_cfg, &SeedTree::new(0), None)?.a0_hat;
            for (k, &n) in origin.iter().enumerate() {
                shared.insert((k, n), a0.clone());
            }
        }
        let pd = self.pd();
        let iters = self.cfg.estimator.local_iters;
        for (k, (c, &n)) in self.clients.iter().zip(lens).enumerate() {
            let train = c.panel.prefix(n)?;
            let grid = TuneGrid::penalty("varpi", sparse_anchor(pd, n))?;
            let res = rolling_cv(&train, &[grid], CvOptions { holdout, min_train: 2 }, |t, x| {
                let a0 = shared
                    .get(&(k, t.len()))
                    .ok_or_else(|| fedvar::Error::InsufficientData("no shared estimate at this origin".into()))?;
                let des = lag_design(t);
                let mut f = FistaConfig::for_design(&des, x[0])?;
                f.iters = iters;
                Ok(a0 + refine_fista(&des, a0, &f)?.delta)
            })
            ?;
            tuning.per_client[k].varpi = res.best[0];
        }
        Ok(())
    }

    fn evaluate(&self, tree: &SeedTree) -> Result<Evaluation, HarnessError> {
        let n_origins = self.cfg.empirical.n_origins;
        let lens: Vec<usize> = self.clients.iter().map(|c| c.panel.len()).collect();
        if let Some(c) = self.clients.iter().find(|c| c.panel.len() <= n_origins) {
            return Err(HarnessError::Data(format!(
                "{} has {} observations, not enough for {n_origins} forecast origins",
                c.name,
                c.panel.len()
            )));
        }
        let pre: Vec<usize> = lens.iter().map(|&n| n - n_origins).collect();
        let tuning = self.tune(&pre)?;
        let agg = self.cfg.rmsfe_agg.into();
        let d = self.clients[0].panel.dim();
        let mut by_method: Vec<(Method, Vec<RmsfeReport<f64>>)> = Vec::new();
        for (m_idx, method) in methods(self.cfg).into_iter().enumerate() {
            let reports = match method {
                Method::Fed(budget) => {
                    let mut errors = vec![Mat::zeros(n_origins, d); self.clients.len()];
                    for j in 0..n_origins {
                        let origin: Vec<usize> = pre.iter().map(|&n| n + j).collect();
                        let coefs = self
                            .fed_fit(&origin, &tuning, budget, &tree.path(&[m_idx as u64, j as u64]))
                            ?;
                        for (k, (c, a)) in self.clients.iter().zip(&coefs).enumerate() {
                            let train = c.panel.prefix(origin[k])?;
                            let f = forecast_one_step(a, &train.recent(train.len())?)?;
                            let actual = c.panel.observations().row(origin[k]).transpose();
                            errors[k].set_row(j, &(actual - f).transpose());
                        }
                    }
                    errors.iter().map(|e| rmsfe_from_errors(e, agg)).collect::<fedvar::Result<Vec<_>>>()?
                }
                _ => self
                    .clients
                    .iter()
                    .zip(&tuning.per_client)
                    .map(|(c, t)| rmsfe(coefficient_forecaster(|train| fit_single(self.cfg, method, t, train)), &c.panel, n_origins, agg))
                    .collect::<fedvar::Result<Vec<_>>>()
                    ?,
            };
            by_method.push((method, reports));
        }
        let mut reports = Vec::new();
        for k in 0..self.clients.len() {
            for (method, r) in &by_method {
                reports.push((k, *method, r[k].clone()));
            }
        }
        Ok(Evaluation { tuning, reports })
    }
}

/// Tunes on the pre-evaluation window and scores every method over the
/// last `n_origins` observations of each client.
pub fn evaluate(cfg: &ExperimentConfig, clients: &[Client], tree: &SeedTree) -> Result<Evaluation, HarnessError> {
    if clients.is_empty() {
        return Err(HarnessError::Data("no clients".into()));
    }
    Protocol { cfg, clients }.evaluate(tree)
}

/// Tunes on the full panels and forecasts the next observation of every
/// client with every method.
pub fn forecast_next(cfg: &ExperimentConfig, clients: &[Client], tree: &SeedTree) -> Result<(Tuning, Vec<(usize, Method, Vec<f64>)>), HarnessError> {
    let proto = Protocol { cfg, clients };
    let lens: Vec<usize> = clients.iter().map(|c| c.panel.len()).collect();
    let tuning = proto.tune(&lens)?;
    let mut out = Vec::new();
    for (m_idx, method) in methods(cfg).into_iter().enumerate() {
        let coefs = match method {
            Method::Fed(budget) => proto.fed_fit(&lens, &tuning, budget, &tree.child(m_idx as u64))?,
            _ => clients
                .iter()
                .zip(&tuning.per_client)
                .map(|(c, t)| fit_single(cfg, method, t, &c.panel))
                .collect::<fedvar::Result<Vec<_>>>()
                ?,
        };
        for (k, (c, a)) in clients.iter().zip(&coefs).enumerate() {
            let f = forecast_one_step(a, &c.panel.recent(c.panel.len())?)?;
            out.push((k, method, f.iter().copied().collect()));
        }
    }
    out.sort_by_key(|(k, _, _)| *k);
    Ok((tuning, out))
}

/// Tunes on the full panels and returns the tuning with its rank choice.
pub fn select(cfg: &ExperimentConfig, clients: &[Client]) -> Result<Tuning, HarnessError> {
    let lens: Vec<usize> = clients.iter().map(|c| c.panel.len()).collect();
    Protocol { cfg, clients }.tune(&lens)
}

pub fn records(replication: usize, clients: &[Client], eval: &Evaluation) -> Vec<ForecastRecord> {
    let mut rows = Vec::new();
    for (k, method, report) in &eval.reports {
        let c = &clients[*k];
        let row = |variable: String, value: f64| ForecastRecord {
            replication,
            client: c.name.clone(),
            method: method.label(),
            variable,
            metric: "rmsfe".into(),
            value,
        };
        for (r, name) in report.per_variable.iter().zip(&c.variables) {
            rows.push(row(name.clone(), r.rmsfe));
        }
        rows.push(row("aggregate".into(), report.aggregate.rmsfe));
    }
    rows
}
