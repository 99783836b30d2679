//! Parallel replication driver and result emission.

use std::path::PathBuf;

use fedvar::metrics::percentile_band;
use fedvar::SeedTree;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentKind, FORMAT_VERSION};
use crate::empirical::{self, Client, Tuned};
use crate::output::{self, ForecastRecord, Manifest, Record, Summary};
use crate::simulate::{cells, replicate};
use crate::HarnessError;

/// Worker count: `FEDVAR_THREADS` when set, else the available cores.
pub fn worker_count() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("FEDVAR_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => cores,
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::Data(format!("thread pool: {e}")))
}

/// Runs every `(task, replication)` pair on the pool and returns the
/// successes in task order. Each pair draws from `root/task/replication`,
/// so results do not depend on scheduling.
fn run_tasks<T, F>(cfg: &ExperimentConfig, tasks: usize, threads: usize, job: F) -> Result<(Vec<(usize, T)>, usize), HarnessError>
where
    T: Send,
    F: Fn(usize, usize, &SeedTree) -> Result<T, HarnessError> + Sync,
{
    let root = SeedTree::new(cfg.seed);
    let reps = cfg.replications;
    let jobs: Vec<(usize, usize)> = (0..tasks).flat_map(|t| (0..reps).map(move |r| (t, r))).collect();
    let results: Vec<_> = pool(threads)?.install(|| {
        jobs.par_iter()
            .map(|&(t, r)| {
                let tree = root.path(&[t as u64, r as u64]);
                (t, r, tree.key(), job(t, r, &tree))
            })
            .collect()
    });
    let mut ok = Vec::with_capacity(results.len());
    let mut failed = 0;
    for (t, r, key, res) in results {
        match res {
            Ok(v) => ok.push((r, v)),
            Err(e) => {
                failed += 1;
                log::warn!("task {t} replication {r} (seed {} stream {key:#018x}) failed: {e}", cfg.seed);
            }
        }
    }
    let total = jobs.len();
    if failed * 100 > total {
        return Err(HarnessError::TooManyFailures { failed, total });
    }
    Ok((ok, failed))
}

#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub records: Vec<Record>,
    pub summary: Summary,
}

pub fn run_simulation(cfg: &ExperimentConfig, threads: usize) -> Result<SimulationRun, HarnessError> {
    cfg.validate()?;
    let grid = cells(cfg);
    let (results, failures) = run_tasks(cfg, grid.len(), threads, |t, r, tree| Ok(replicate(cfg, grid[t], r, tree)?))?;
    let records: Vec<Record> = results.into_iter().flat_map(|(_, v)| v).collect();
    let summary = output::summarize(cfg, &records, failures)?;
    Ok(SimulationRun { records, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    /// Aggregate RMSFE over clients and worlds.
    pub mean: f64,
    pub p05: f64,
    pub p95: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientMethod {
    pub client: String,
    pub method: String,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorldTuning {
    pub replication: usize,
    pub rank: usize,
    pub client_ranks: Vec<usize>,
    pub tuned: Vec<Tuned>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalSummary {
    pub format_version: u32,
    pub experiment: String,
    pub source: &'static str,
    pub worlds: usize,
    pub failures: usize,
    pub rmsfe_agg: crate::config::RmsfeAgg,
    pub methods: Vec<MethodSummary>,
    pub clients: Vec<ClientMethod>,
    pub sensitive: Vec<(String, Vec<usize>)>,
    pub tuning: Vec<WorldTuning>,
}

impl EmpiricalSummary {
    pub fn method(&self, label: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == label)
    }
}

#[derive(Debug, Clone)]
pub struct EmpiricalRun {
    pub records: Vec<ForecastRecord>,
    pub summary: EmpiricalSummary,
}

fn summarize_forecasts(cfg: &ExperimentConfig, records: &[ForecastRecord], source: &'static str, worlds: usize, failures: usize, clients: &[Client], tuning: Vec<WorldTuning>) -> Result<EmpiricalSummary, HarnessError> {
    let agg: Vec<&ForecastRecord> = records.iter().filter(|r| r.variable == "aggregate").collect();
    let mut labels: Vec<String> = Vec::new();
    let mut pairs: Vec<(String, String)> = Vec::new();
    for r in &agg {
        if !labels.contains(&r.method) {
            labels.push(r.method.clone());
        }
        let key = (r.client.clone(), r.method.clone());
        if !pairs.contains(&key) {
            pairs.push(key);
        }
    }
    let methods = labels
        .into_iter()
        .map(|m| {
            let v: Vec<f64> = agg.iter().filter(|r| r.method == m).map(|r| r.value).collect();
            let band = percentile_band(&v, 5.0, 95.0)?;
            Ok(MethodSummary {
                method: m,
                mean: band.mean,
                p05: band.lo,
                p95: band.hi,
                n: v.len(),
            })
        })
        .collect::<Result<Vec<_>, fedvar::Error>>()?;
    let clients_table = pairs
        .into_iter()
        .map(|(client, method)| {
            let v: Vec<f64> = agg.iter().filter(|r| r.client == client && r.method == method).map(|r| r.value).collect();
            Ok(ClientMethod {
                mean: fedvar::metrics::mean(&v)?,
                client,
                method,
            })
        })
        .collect::<Result<Vec<_>, fedvar::Error>>()?;
    Ok(EmpiricalSummary {
        format_version: FORMAT_VERSION,
        experiment: ExperimentKind::Empirical.name().into(),
        source,
        worlds,
        failures,
        rmsfe_agg: cfg.rmsfe_agg,
        methods,
        clients: clients_table,
        sensitive: clients.iter().map(|c| (c.name.clone(), c.sensitive.clone())).collect(),
        tuning,
    })
}

fn world_tuning(replication: usize, eval: &empirical::Evaluation) -> WorldTuning {
    WorldTuning {
        replication,
        rank: eval.tuning.rank,
        client_ranks: eval.tuning.client_ranks.clone(),
        tuned: eval.tuning.per_client.clone(),
    }
}

/// Empirical protocol on `replications` synthetic worlds.
pub fn run_synthetic_empirical(cfg: &ExperimentConfig, threads: usize) -> Result<EmpiricalRun, HarnessError> {
    cfg.validate()?;
    let (results, failures) = run_tasks(cfg, 1, threads, |_, r, tree| {
        let clients = empirical::synthetic_clients(cfg, &tree.child(0))?;
        let eval = empirical::evaluate(cfg, &clients, &tree.child(1))?;
        Ok((empirical::records(r, &clients, &eval), world_tuning(r, &eval), clients))
    })?;
    let worlds = results.len();
    let clients = results.first().map(|(_, v)| v.2.clone()).unwrap_or_default();
    let mut records = Vec::new();
    let mut tuning = Vec::new();
    for (_, (rows, t, _)) in results {
        records.extend(rows);
        tuning.push(t);
    }
    let summary = summarize_forecasts(cfg, &records, "synthetic", worlds, failures, &clients, tuning)?;
    Ok(EmpiricalRun { records, summary })
}

/// Empirical protocol on the configured panel files.
pub fn run_panels(cfg: &ExperimentConfig) -> Result<(Vec<Client>, EmpiricalRun), HarnessError> {
    cfg.validate()?;
    let clients = empirical::load_clients(cfg)?;
    let eval = empirical::evaluate(cfg, &clients, &SeedTree::new(cfg.seed))?;
    let records = empirical::records(0, &clients, &eval);
    let summary = summarize_forecasts(cfg, &records, "panels", 1, 0, &clients, vec![world_tuning(0, &eval)])?;
    Ok((clients, EmpiricalRun { records, summary }))
}

/// Writes `raw.csv`, `summary.json` and `manifest.json` into a fresh
/// timestamped directory under `output_dir/<name>`.
pub fn emit<R: Serialize, S: Serialize>(cfg: &ExperimentConfig, name: &str, rows: &[R], summary: &S, failures: usize, threads: usize) -> Result<PathBuf, HarnessError> {
    let now = chrono::Utc::now();
    let dir = output::create_run_dir(&cfg.output_dir, name, &now)?;
    output::write_csv(&dir.join("raw.csv"), rows)?;
    output::write_json(&dir.join("summary.json"), summary)?;
    output::write_json(&dir.join("manifest.json"), &Manifest::new(cfg, failures, threads, &now))?;
    Ok(dir)
}
