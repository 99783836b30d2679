//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::HarnessError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ExperimentKind {
    SingleClientCurve,
    RankTable,
    PrivacyHeatmap,
    KSweep,
    TSweep,
    Empirical,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SingleClientCurve => "single_client_curve",
            Self::RankTable => "rank_table",
            Self::PrivacyHeatmap => "privacy_heatmap",
            Self::KSweep => "k_sweep",
            Self::TSweep => "t_sweep",
            Self::Empirical => "empirical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    None,
    #[default]
    Fixed,
    Calibrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RmsfeAgg {
    #[default]
    Mean,
    Pooled,
}

impl From<RmsfeAgg> for fedvar::metrics::RmsfeAggregation {
    fn from(a: RmsfeAgg) -> Self {
        match a {
            RmsfeAgg::Mean => Self::Mean,
            RmsfeAgg::Pooled => Self::Pooled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    pub d: usize,
    pub p: usize,
    pub rank: usize,
    pub clients: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { d: 20, p: 1, rank: 2, clients: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Privacy {
    pub noise_mode: NoiseMode,
    /// Fixed-scale multiplier; 1 for simulations and 0.1 for empirical
    /// runs when absent.
    pub kappa: Option<f64>,
    /// Message sensitivity for the calibrated mode.
    pub sensitivity: f64,
    /// Private settings; the non-private fit always runs alongside.
    pub settings: Option<Vec<Budget>>,
}

impl Default for Privacy {
    fn default() -> Self {
        Self {
            noise_mode: NoiseMode::Fixed,
            kappa: None,
            sensitivity: 1.0,
            settings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Estimator {
    /// `lambda = c_lambda * sqrt(pd / T)`.
    pub c_lambda: f64,
    /// `omega = c_omega * sqrt(ln(pd) / T)`, also the Stage II weight.
    pub c_omega: f64,
    /// Stage I step `c_rho / L_pool`.
    pub c_rho: f64,
    /// Stage I rounds; `None` uses `ceil(10 ln sum T_k)`.
    pub rounds: Option<usize>,
    pub local_iters: usize,
    pub zeta: Option<f64>,
    /// Run Stage I at the true rank instead of the selected one.
    pub oracle_rank: bool,
    pub burn_in: usize,
}

impl Default for Estimator {
    fn default() -> Self {
        Self {
            c_lambda: fedvar::tuning::AnchorRule::<f64>::DEFAULT_C_LAMBDA,
            c_omega: fedvar::tuning::AnchorRule::<f64>::DEFAULT_C_OMEGA,
            c_rho: 0.25,
            rounds: None,
            local_iters: fedvar::federated::DEFAULT_LOCAL_ITERS,
            zeta: None,
            oracle_rank: false,
            burn_in: fedvar::var::DEFAULT_BURN_IN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deviation {
    Scaled,
    #[default]
    Trimmed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub q: f64,
    pub s_q: f64,
    /// `||A0||_F : ||Delta_k||_F`; `null` gives homogeneous clients.
    pub ratio: Option<f64>,
    pub target_radius: f64,
    pub deviation: Deviation,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            q: 0.1,
            s_q: 10.0,
            ratio: Some(5.0),
            target_radius: fedvar::var::DEFAULT_TARGET_RADIUS,
            deviation: Deviation::Trimmed,
        }
    }
}

/// Per-column transformation codes: 1 first difference, 2 log difference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Codes {
    Uniform(u8),
    PerColumn(Vec<u8>),
}

impl Default for Codes {
    fn default() -> Self {
        Codes::Uniform(1)
    }
}

impl Codes {
    pub fn for_column(&self, j: usize) -> Option<u8> {
        match self {
            Codes::Uniform(c) => Some(*c),
            Codes::PerColumn(v) => v.get(j).copied(),
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub codes: Codes,
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Zero-based sensitive columns (metadata only).
    #[serde(default)]
    pub sensitive: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Empirical {
    /// One file per client.
    pub panels: Vec<PanelSpec>,
    pub n_origins: usize,
    /// Holdout of the tuning pass on the pre-evaluation window.
    pub cv_holdout: usize,
    /// Observations per synthetic client (after the lag presample).
    pub synthetic_len: usize,
    /// ADMM iteration cap for every fit in the protocol.
    pub admm_max_iter: usize,
}

impl Default for Empirical {
    fn default() -> Self {
        Self {
            panels: Vec::new(),
            n_origins: fedvar::metrics::DEFAULT_ORIGINS,
            cv_holdout: 8,
            synthetic_len: 44,
            admm_max_iter: 200,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default)]
    pub dims: Dims,
    /// Per-client sample sizes; the first entry is used by experiments
    /// that do not sweep `T_k`.
    #[serde(default)]
    pub sample_sizes: Vec<usize>,
    /// True ranks swept by `rank_table`; empty means `dims.rank`.
    #[serde(default)]
    pub ranks: Vec<usize>,
    /// Client counts swept by `k_sweep`; empty means `dims.clients`.
    #[serde(default)]
    pub client_counts: Vec<usize>,
    #[serde(default)]
    pub privacy: Privacy,
    #[serde(default)]
    pub estimator: Estimator,
    #[serde(default)]
    pub dgp: DgpConfig,
    #[serde(default)]
    pub empirical: Empirical,
    #[serde(default)]
    pub rmsfe_agg: RmsfeAgg,
    /// Record the Stage I error after every round.
    #[serde(default)]
    pub trace_rounds: bool,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub eps: Option<f64>,
    pub delta: Option<f64>,
    pub noise_mode: Option<NoiseMode>,
    pub reps: Option<usize>,
    pub rmsfe_agg: Option<RmsfeAgg>,
}

impl ExperimentConfig {
    /// Defaults for `kind` with everything else left at its serde default.
    pub fn new(kind: ExperimentKind) -> Self {
        serde_json::from_value(serde_json::json!({ "format_version": FORMAT_VERSION, "experiment": kind }))
            .expect("default config deserializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if cfg.format_version != FORMAT_VERSION {
            return Err(HarnessError::Config(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                cfg.format_version
            )));
        }
        Ok(cfg)
    }

    /// Reads a config; relative panel paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.to_path_buf(), e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for panel in &mut cfg.empirical.panels {
            if panel.path.is_relative() {
                panel.path = base.join(&panel.path);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(reps) = o.reps {
            self.replications = reps;
        }
        if let Some(mode) = o.noise_mode {
            self.privacy.noise_mode = mode;
        }
        if let Some(agg) = o.rmsfe_agg {
            self.rmsfe_agg = agg;
        }
        if o.eps.is_some() || o.delta.is_some() {
            let base = self.privacy_settings().first().copied().unwrap_or(Budget { epsilon: 2.0, delta: 0.1 });
            self.privacy.settings = Some(vec![Budget {
                epsilon: o.eps.unwrap_or(base.epsilon),
                delta: o.delta.unwrap_or(base.delta),
            }]);
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        let Dims { d, p, rank, clients } = self.dims;
        if d == 0 || p == 0 || clients == 0 {
            return bad("dims.d, dims.p and dims.clients must be positive".into());
        }
        for &r in self.true_ranks().iter().chain([&rank]) {
            if r == 0 || r > d {
                return bad(format!("rank {r} outside 1..={d}"));
            }
        }
        if self.client_grid().contains(&0) {
            return bad("client_counts entries must be positive".into());
        }
        if self.experiment != ExperimentKind::Empirical {
            for &t in &self.sample_sizes() {
                if t <= p {
                    return bad(format!("sample size {t} does not exceed the lag order {p}"));
                }
            }
        }
        for b in self.privacy_settings() {
            if !(b.epsilon > 0.0) || !(b.delta > 0.0 && b.delta < 1.0) {
                return bad(format!("privacy setting ({}, {}) needs epsilon > 0 and delta in (0, 1)", b.epsilon, b.delta));
            }
        }
        if !(self.kappa() >= 0.0) || !(self.privacy.sensitivity >= 0.0) {
            return bad("kappa and sensitivity must be nonnegative".into());
        }
        let e = &self.estimator;
        if !(e.c_lambda >= 0.0 && e.c_omega >= 0.0 && e.c_rho >= 0.0) {
            return bad("estimator constants must be nonnegative".into());
        }
        if self.experiment == ExperimentKind::Empirical {
            let e = &self.empirical;
            if e.n_origins == 0 || e.cv_holdout == 0 || e.admm_max_iter == 0 {
                return bad("empirical.n_origins, cv_holdout and admm_max_iter must be positive".into());
            }
            for panel in &self.empirical.panels {
                if !panel.path.is_file() {
                    return bad(format!("panel file {} does not exist", panel.path.display()));
                }
            }
        }
        Ok(())
    }

    pub fn sample_sizes(&self) -> Vec<usize> {
        if self.sample_sizes.is_empty() {
            vec![400]
        } else {
            self.sample_sizes.clone()
        }
    }

    pub fn true_ranks(&self) -> Vec<usize> {
        if self.ranks.is_empty() {
            vec![self.dims.rank]
        } else {
            self.ranks.clone()
        }
    }

    pub fn client_grid(&self) -> Vec<usize> {
        if self.client_counts.is_empty() {
            vec![self.dims.clients]
        } else {
            self.client_counts.clone()
        }
    }

    pub fn kappa(&self) -> f64 {
        self.privacy.kappa.unwrap_or(match self.experiment {
            ExperimentKind::Empirical => 0.1,
            _ => 1.0,
        })
    }

    /// Private settings in effect; empty when the noise mode is `none`.
    pub fn privacy_settings(&self) -> Vec<Budget> {
        if self.privacy.noise_mode == NoiseMode::None {
            return Vec::new();
        }
        if let Some(s) = &self.privacy.settings {
            return s.clone();
        }
        let b = |epsilon, delta| Budget { epsilon, delta };
        match self.experiment {
            ExperimentKind::Empirical => vec![b(0.2, 0.05), b(0.1, 0.01)],
            ExperimentKind::PrivacyHeatmap => [0.5, 1.0, 2.0, 4.0]
                .iter()
                .flat_map(|&e| [0.01, 0.05, 0.1].map(|d| b(e, d)))
                .collect(),
            _ => vec![b(2.0, 0.1)],
        }
    }

    /// SHA-256 of the canonical JSON with defaults resolved and
    /// `output_dir` left out.
    pub fn hash(&self) -> String {
        let mut resolved = self.clone();
        resolved.sample_sizes = self.sample_sizes();
        resolved.ranks = self.true_ranks();
        resolved.client_counts = self.client_grid();
        resolved.privacy.kappa = Some(self.kappa());
        resolved.privacy.settings = Some(self.privacy_settings());
        let mut v = serde_json::to_value(&resolved).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
