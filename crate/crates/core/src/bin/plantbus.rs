use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use plantbus::harness::{
    measure_rpc, run_node, run_scenario_with, trend_dir_from_env, NodeOptions, RemoteStore, ScenarioOptions,
    QUERY_CHANNEL,
};
use plantbus::rtdb::{Millis, PlantStore, StoreError};
use plantbus::session::Connection;
use plantbus::topology::{parse_plan, validate_plan, DeploymentPlan, Level};

#[derive(Parser)]
#[command(name = "plantbus", version, about = "Plant-data integration middleware")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Boot one node's components and serve until interrupted.
    RunNode {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        node: String,
    },
    /// Run the whole plan in this process on a simulated clock.
    Scenario {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        ticks: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Query a running historian.
    Query {
        kind: QueryKind,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        var: String,
        #[arg(long, default_value_t = 0)]
        from: Millis,
        #[arg(long, default_value_t = Millis::MAX)]
        to: Millis,
    },
    /// Latency measurements against a running node.
    Perf {
        #[command(subcommand)]
        what: Perf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryKind {
    Latest,
    Range,
    Trend,
}

#[derive(Subcommand)]
enum Perf {
    /// Sequential echo round trips.
    Rpc {
        #[arg(long)]
        target: String,
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 64)]
        payload: usize,
    },
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_plan(path: &Path) -> Result<DeploymentPlan, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let plan = parse_plan(&text).map_err(|e| Failure::Invalid(e.to_string()))?;
    let violations = validate_plan(&plan);
    if !violations.is_empty() {
        let list: Vec<_> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Failure::Invalid(format!("plan is invalid: {}", list.join("; "))));
    }
    Ok(plan)
}

fn json(v: &impl serde::Serialize) -> Result<(), Failure> {
    println!("{}", serde_json::to_string(v).map_err(runtime)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::RunNode { plan, node } => {
            let plan = load_plan(&plan)?;
            if plan.node(&node).is_none() {
                return Err(Failure::Invalid(format!("no node {node:?} in the plan")));
            }
            let opts = NodeOptions {
                always_listen: true,
                attach_existing: true,
                connect_patience: Duration::from_secs(60),
                ..NodeOptions::default()
            };
            let live = run_node(&plan, &node, &opts).map_err(runtime)?;
            if let Some(addr) = live.runtime().listen_addr() {
                eprintln!("node {node} listening on {addr}");
            }
            loop {
                std::thread::park();
            }
        }
        Command::Scenario { plan, ticks, seed } => {
            let plan = load_plan(&plan)?;
            let opts = ScenarioOptions {
                trend_dir: trend_dir_from_env(),
                seed,
                ..ScenarioOptions::default()
            };
            let run = run_scenario_with(&plan, ticks, &opts).map_err(runtime)?;
            json(&run.result)
        }
        Command::Query {
            kind,
            plan,
            var,
            from,
            to,
        } => {
            let plan = load_plan(&plan)?;
            let mut addresses: Vec<&str> = plan
                .components_at(Level::DataOrganization)
                .filter_map(|c| plan.node(&c.node))
                .map(|n| n.address.as_str())
                .collect();
            addresses.dedup();
            if addresses.is_empty() {
                return Err(Failure::Invalid("the plan has no historian".into()));
            }
            let mut last = None;
            for address in addresses {
                let conn = Connection::connect_tcp(address).map_err(runtime)?;
                let store = RemoteStore::new(conn.open_channel(QUERY_CHANNEL).map_err(runtime)?);
                let done = match kind {
                    QueryKind::Latest => store.latest(&var).map(|s| json(&s)),
                    QueryKind::Range => store
                        .range(&var, from, to)
                        .map(|v| v.iter().try_for_each(json)),
                    QueryKind::Trend => store
                        .trend(&var, from, to)
                        .map(|v| v.iter().try_for_each(json)),
                };
                conn.close();
                match done {
                    Ok(printed) => return printed,
                    Err(e @ StoreError::UnknownVariable(_)) => last = Some(e),
                    Err(e) => return Err(runtime(e)),
                }
            }
            Err(runtime(last.expect("at least one historian")))
        }
        Command::Perf {
            what: Perf::Rpc { target, n, payload },
        } => {
            if n == 0 {
                return Err(Failure::Invalid("--n must be positive".into()));
            }
            let conn = Connection::connect_tcp(&target).map_err(runtime)?;
            let channel = conn.open_channel(QUERY_CHANNEL).map_err(runtime)?;
            let (report, _) = measure_rpc(&channel, n, payload, Duration::from_secs(10)).map_err(runtime)?;
            conn.close();
            json(&report)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("plantbus: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("plantbus: {m}");
            ExitCode::from(3)
        }
    }
}
