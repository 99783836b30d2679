//! Raw records, summaries and the run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fedvar::metrics::{benefit, mean, percentile_band, sign_test_p_value};
use serde::Serialize;

use crate::config::{ExperimentConfig, FORMAT_VERSION};
use crate::HarnessError;

/// One long-format row of `raw.csv` for simulation experiments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub replication: usize,
    pub clients: usize,
    pub t_k: usize,
    pub rank: usize,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub method: String,
    pub metric: String,
    pub round: Option<usize>,
    pub value: f64,
}

/// One row of `raw.csv` for empirical runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastRecord {
    /// Synthetic world index (0 for real data).
    pub replication: usize,
    pub client: String,
    pub method: String,
    pub variable: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, PartialOrd, Serialize)]
pub struct GroupKey {
    pub clients: usize,
    pub t_k: usize,
    pub rank: usize,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub method: String,
    pub metric: String,
    pub round: Option<usize>,
}

impl GroupKey {
    fn of(r: &Record) -> Self {
        Self {
            clients: r.clients,
            t_k: r.t_k,
            rank: r.rank,
            epsilon: r.epsilon,
            delta: r.delta,
            method: r.method.clone(),
            metric: r.metric.clone(),
            round: r.round,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    #[serde(flatten)]
    pub key: GroupKey,
    pub n: usize,
    pub mean: f64,
    pub p05: f64,
    pub p95: f64,
}

/// Paired comparison of a federated fit against the single-client fits
/// of the same replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub clients: usize,
    pub t_k: usize,
    pub rank: usize,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub method: String,
    pub metric: String,
    /// Mean of `single - federated`.
    pub benefit: f64,
    pub wins: usize,
    pub trials: usize,
    /// One-sided sign-test p-value for `federated < single`.
    pub sign_test_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub format_version: u32,
    pub experiment: String,
    pub replications: usize,
    pub failures: usize,
    pub groups: Vec<GroupSummary>,
    pub comparisons: Vec<Comparison>,
}

impl Summary {
    pub fn group(&self, pred: impl Fn(&GroupKey) -> bool) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| pred(&g.key))
    }
}

fn to_harness(e: fedvar::Error) -> HarnessError {
    HarnessError::Model(e)
}

/// Groups in first-appearance order with means and 5-95% bands.
pub fn summarize(cfg: &ExperimentConfig, records: &[Record], failures: usize) -> Result<Summary, HarnessError> {
    let mut order: Vec<GroupKey> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for r in records {
        let key = GroupKey::of(r);
        match order.iter().position(|k| *k == key) {
            Some(i) => values[i].push(r.value),
            None => {
                order.push(key);
                values.push(vec![r.value]);
            }
        }
    }
    let groups = order
        .into_iter()
        .zip(values)
        .map(|(key, v)| {
            let band = percentile_band(&v, 5.0, 95.0).map_err(to_harness)?;
            Ok(GroupSummary {
                key,
                n: v.len(),
                mean: band.mean,
                p05: band.lo,
                p95: band.hi,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(Summary {
        format_version: FORMAT_VERSION,
        experiment: cfg.experiment.name().into(),
        replications: cfg.replications,
        failures,
        groups,
        comparisons: compare_with_single(records)?,
    })
}

fn compare_with_single(records: &[Record]) -> Result<Vec<Comparison>, HarnessError> {
    type Cell = (usize, usize, usize, String);
    let mut single: BTreeMap<Cell, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.method == "single" && r.round.is_none()) {
        single
            .entry((r.clients, r.t_k, r.rank, r.metric.clone()))
            .or_default()
            .insert(r.replication, r.value);
    }
    type Setting = (String, Option<f64>, Option<f64>);
    let mut fed: Vec<(Cell, Setting, Vec<(f64, f64)>)> = Vec::new();
    for r in records.iter().filter(|r| r.method.starts_with("fed") && r.round.is_none()) {
        let cell = (r.clients, r.t_k, r.rank, r.metric.clone());
        let Some(base) = single.get(&cell).and_then(|m| m.get(&r.replication)) else {
            continue;
        };
        let setting = (r.method.clone(), r.epsilon, r.delta);
        match fed.iter_mut().find(|(c, s, _)| *c == cell && *s == setting) {
            Some(entry) => entry.2.push((*base, r.value)),
            None => fed.push((cell, setting, vec![(*base, r.value)])),
        }
    }
    fed.into_iter()
        .map(|((clients, t_k, rank, metric), (method, epsilon, delta), pairs)| {
            let (s, f): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let wins = pairs.iter().filter(|(s, f)| f < s).count();
            Ok(Comparison {
                clients,
                t_k,
                rank,
                epsilon,
                delta,
                method,
                metric,
                benefit: benefit(&s, &f).map_err(to_harness)?,
                wins,
                trials: pairs.len(),
                sign_test_p: sign_test_p_value(wins, pairs.len()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub format_version: u32,
    pub experiment: String,
    pub seed: u64,
    pub config_sha256: String,
    pub software: &'static str,
    pub version: &'static str,
    pub replications: usize,
    pub failures: usize,
    pub threads: usize,
    pub created_utc: String,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, failures: usize, threads: usize, created: &chrono::DateTime<chrono::Utc>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            experiment: cfg.experiment.name().into(),
            seed: cfg.seed,
            config_sha256: cfg.hash(),
            software: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            replications: cfg.replications,
            failures,
            threads,
            created_utc: created.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config: cfg.clone(),
        }
    }
}

/// Creates `base/<name>/<timestamp>`, adding `-1`, `-2`, ... on collision.
pub fn create_run_dir(base: &Path, name: &str, at: &chrono::DateTime<chrono::Utc>) -> Result<PathBuf, HarnessError> {
    let parent = base.join(name);
    std::fs::create_dir_all(&parent).map_err(|e| HarnessError::Io(parent.clone(), e))?;
    let stamp = at.format("%Y%m%dT%H%M%SZ").to_string();
    for i in 0.. {
        let dir = if i == 0 { parent.join(&stamp) } else { parent.join(format!("{stamp}-{i}")) };
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(HarnessError::Io(dir, e)),
        }
    }
    unreachable!()
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| HarnessError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::Io(path.to_path_buf(), e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::Io(path.to_path_buf(), e))
}

/// Mean of one metric over a set of records.
pub fn metric_mean(records: &[Record], pred: impl Fn(&Record) -> bool) -> Option<f64> {
    let v: Vec<f64> = records.iter().filter(|r| pred(r)).map(|r| r.value).collect();
    mean(&v).ok()
}
