use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedvar::SeedTree;
use fedvar_harness::config::{ExperimentConfig, ExperimentKind, NoiseMode, Overrides, RmsfeAgg, FORMAT_VERSION};
use fedvar_harness::empirical::{self, Tuned};
use fedvar_harness::output::ForecastRecord;
use fedvar_harness::run::{self, worker_count};
use fedvar_harness::HarnessError;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fedvar", version, about = "Federated low-rank plus sparse VAR experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation experiment (`empirical` runs the forecasting
    /// protocol on synthetic worlds).
    Simulate {
        kind: ExperimentKind,
        #[command(flatten)]
        common: Common,
    },
    /// Score every method on the configured panel files.
    Fit {
        #[command(flatten)]
        common: Common,
    },
    /// One-step forecasts beyond the end of each panel.
    Forecast {
        #[command(flatten)]
        common: Common,
    },
    /// Ridge-ratio rank choice for the shared component.
    RankSelect {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (results go to `<out>/<experiment>/<timestamp>`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_enum)]
    noise_mode: Option<NoiseMode>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, value_enum)]
    rmsfe_agg: Option<RmsfeAgg>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            eps: self.eps,
            delta: self.delta,
            noise_mode: self.noise_mode,
            reps: self.reps,
            rmsfe_agg: self.rmsfe_agg,
        });
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct RankSummary {
    format_version: u32,
    rank: usize,
    clients: Vec<String>,
    client_ranks: Vec<usize>,
    tuned: Vec<Tuned>,
}

fn print_empirical(summary: &run::EmpiricalSummary) {
    println!("{:<24} {:>10}", "method", "rmsfe");
    for m in &summary.methods {
        println!("{:<24} {:>10.4}", m.method, m.mean);
    }
}

fn execute(command: Command) -> Result<(), HarnessError> {
    let threads = worker_count();
    match command {
        Command::Simulate { kind, common } => {
            let mut cfg = common.load()?;
            cfg.experiment = kind;
            if kind == ExperimentKind::Empirical {
                let res = run::run_synthetic_empirical(&cfg, threads)?;
                let dir = run::emit(&cfg, kind.name(), &res.records, &res.summary, res.summary.failures, threads)?;
                print_empirical(&res.summary);
                println!("{}", dir.display());
            } else {
                let res = run::run_simulation(&cfg, threads)?;
                let dir = run::emit(&cfg, kind.name(), &res.records, &res.summary, res.summary.failures, threads)?;
                println!("{}", dir.display());
            }
        }
        Command::Fit { common } => {
            let mut cfg = common.load()?;
            cfg.experiment = ExperimentKind::Empirical;
            let (_, res) = run::run_panels(&cfg)?;
            let dir = run::emit(&cfg, "empirical", &res.records, &res.summary, 0, 1)?;
            println!("{:<16} {:<24} {:>10}", "client", "method", "rmsfe");
            for c in &res.summary.clients {
                println!("{:<16} {:<24} {:>10.4}", c.client, c.method, c.mean);
            }
            println!("{}", dir.display());
        }
        Command::Forecast { common } => {
            let mut cfg = common.load()?;
            cfg.experiment = ExperimentKind::Empirical;
            cfg.validate()?;
            let clients = empirical::load_clients(&cfg)?;
            let (tuning, forecasts) = empirical::forecast_next(&cfg, &clients, &SeedTree::new(cfg.seed))?;
            let mut rows = Vec::new();
            for (k, method, values) in &forecasts {
                for (name, v) in clients[*k].variables.iter().zip(values) {
                    rows.push(ForecastRecord {
                        replication: 0,
                        client: clients[*k].name.clone(),
                        method: method.label(),
                        variable: name.clone(),
                        metric: "forecast".into(),
                        value: *v,
                    });
                }
            }
            let summary = RankSummary {
                format_version: FORMAT_VERSION,
                rank: tuning.rank,
                clients: clients.iter().map(|c| c.name.clone()).collect(),
                client_ranks: tuning.client_ranks,
                tuned: tuning.per_client,
            };
            println!("{}", run::emit(&cfg, "forecast", &rows, &summary, 0, 1)?.display());
        }
        Command::RankSelect { common } => {
            let mut cfg = common.load()?;
            cfg.experiment = ExperimentKind::Empirical;
            cfg.validate()?;
            let clients = empirical::load_clients(&cfg)?;
            let tuning = empirical::select(&cfg, &clients)?;
            #[derive(Serialize)]
            struct Row<'a> {
                client: &'a str,
                rank: usize,
            }
            let rows: Vec<Row> = clients
                .iter()
                .zip(&tuning.client_ranks)
                .map(|(c, &rank)| Row { client: &c.name, rank })
                .collect();
            let summary = RankSummary {
                format_version: FORMAT_VERSION,
                rank: tuning.rank,
                clients: clients.iter().map(|c| c.name.clone()).collect(),
                client_ranks: tuning.client_ranks.clone(),
                tuned: tuning.per_client.clone(),
            };
            let dir = run::emit(&cfg, "rank_select", &rows, &summary, 0, 1)?;
            println!("selected rank {}", tuning.rank);
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn,fedvar::single_client=error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
