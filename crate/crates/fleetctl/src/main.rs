use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fleet_core::gateway::{
    Command as GatewayCommand, FailoverPolicy, GatewayClient, GatewayRuntime, GatewayServer,
    HttpTransport, Rotation,
};
use fleet_core::orchestrator::Direction;
use fleet_core::provisim::{write_jsonl, FleetSim, Scenario};
use fleet_core::statestore::{Kind, ReadMode, StateKey};
use serde_json::Value as JsonValue;

#[derive(Parser)]
#[command(
    name = "fleetctl",
    version,
    about = "Operate a fleet through its gateway"
)]
struct Cli {
    /// Gateway addresses, comma separated.
    #[arg(
        long,
        env = "FLEET_STORE_ADDR",
        default_value = "127.0.0.1:7070",
        value_delimiter = ',',
        global = true
    )]
    addr: Vec<String>,
    #[arg(long, default_value = "default", global = true)]
    cluster: String,
    /// Per-attempt deadline in milliseconds.
    #[arg(long, default_value_t = 5000, global = true)]
    timeout_ms: u64,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Apply a configuration layer (TOML) or a list of desires (JSON).
    Apply {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
    /// Read a record, KEY being namespace/entity/property.
    Get {
        key: StateKey,
        #[arg(long)]
        desire: bool,
        #[arg(long, value_parser = ["strong", "local"])]
        mode: Option<String>,
    },
    /// Show where an entity's facts differ from its desires.
    Diff { entity: String },
    /// Roll an image out across the fleet.
    Rollout {
        /// Image digest or name.
        #[arg(long)]
        image: String,
        #[arg(long)]
        max_unavailable: usize,
    },
    /// Start or stop node groups in dependency order.
    Sequence {
        #[arg(long)]
        dag: PathBuf,
        #[arg(long)]
        direction: Direction,
    },
    /// Verify a node's boot chain.
    Attest { node: String },
    /// Send an emergency event (JSON).
    Remediate {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
    /// Print request metrics.
    Metrics,
    Sim {
        #[command(subcommand)]
        command: SimCmd,
    },
    Flows {
        #[command(subcommand)]
        command: FlowsCmd,
    },
    /// Run gateway replicas over a simulated fleet.
    Serve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, env = "FLEET_SEED")]
        seed: Option<u64>,
        /// One replica per address.
        #[arg(long, value_delimiter = ',', default_value = "127.0.0.1:7070")]
        listen: Vec<String>,
        #[arg(long, default_value_t = 4)]
        threads: usize,
    },
}

#[derive(Subcommand)]
enum SimCmd {
    /// Run a scenario locally and print its report.
    Run {
        scenario: PathBuf,
        #[arg(long, env = "FLEET_SEED")]
        seed: Option<u64>,
        /// Write the event trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Run on the gateway instead.
        #[arg(long)]
        remote: bool,
    },
    /// Inject a fault (JSON) into the gateway's fleet.
    Fault {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
}

#[derive(Subcommand)]
enum FlowsCmd {
    /// Register an event-driven flow (TOML).
    Add { file: PathBuf },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json(path: &Path) -> Result<JsonValue> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn print(v: &JsonValue) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn remote(cli: &Cli, command: GatewayCommand) -> Result<ExitCode> {
    let policy = FailoverPolicy {
        max_attempts: cli.addr.len().max(3),
        attempt_deadline: Duration::from_millis(cli.timeout_ms),
        rotation: Rotation::Listed,
    };
    let mut client =
        GatewayClient::new(&cli.cluster, cli.addr.clone(), policy, HttpTransport::new());
    if let Err(e) = client.discover() {
        log::debug!("endpoint discovery failed, using the given addresses: {e}");
    }
    let (response, log) = client.execute(&command)?;
    for a in &log.0 {
        log::info!("{} {:?} in {:?}", a.endpoint, a.signal, a.elapsed);
    }
    print(&response.body)?;
    Ok(if response.is_success() {
        ExitCode::SUCCESS
    } else {
        eprintln!("fleetctl: gateway answered {}", response.status);
        ExitCode::FAILURE
    })
}

fn run_local(scenario: &Path, seed: Option<u64>, trace: Option<&Path>) -> Result<ExitCode> {
    let mut s = Scenario::from_toml(&read(scenario)?)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let mut sim = FleetSim::new(s)?;
    let report = sim.run()?;
    if let Some(path) = trace {
        let mut w = BufWriter::new(fs::File::create(path)?);
        write_jsonl(&mut w, sim.trace())?;
    }
    print(&serde_json::to_value(&report)?)?;
    Ok(if report.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn serve(
    cli: &Cli,
    scenario: &Path,
    seed: Option<u64>,
    listen: &[String],
    threads: usize,
) -> Result<ExitCode> {
    let mut s = Scenario::from_toml(&read(scenario)?)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let mut sim = FleetSim::new(s)?;
    sim.run()?;
    let runtime = GatewayRuntime::new(sim, &cli.cluster)?;
    let replicas = listen
        .iter()
        .map(|addr| GatewayServer::start(runtime.clone(), addr, threads))
        .collect::<std::io::Result<Vec<_>>>()?;
    for r in &replicas {
        println!("serving {} on {}", cli.cluster, r.addr());
    }
    loop {
        std::thread::park();
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("fleetctl: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    let command = match &cli.command {
        Cmd::Apply { file } => {
            let text = read(file)?;
            if file.extension().is_some_and(|e| e == "json") {
                let v: JsonValue = serde_json::from_str(&text)?;
                let desires = match v {
                    JsonValue::Object(mut o) if o.contains_key("desires") => {
                        o.remove("desires").unwrap()
                    }
                    v => v,
                };
                GatewayCommand::PutDesires { desires }
            } else {
                GatewayCommand::ApplyLayer { layer: text }
            }
        }
        Cmd::Get { key, desire, mode } => GatewayCommand::Get {
            key: key.clone(),
            kind: if *desire { Kind::Desire } else { Kind::Fact },
            mode: mode.as_deref().map(|m| match m {
                "strong" => ReadMode::Strong,
                _ => ReadMode::Local,
            }),
        },
        Cmd::Diff { entity } => GatewayCommand::Diff {
            entity: entity.clone(),
        },
        Cmd::Rollout {
            image,
            max_unavailable,
        } => GatewayCommand::Rollout {
            image: image.clone(),
            max_unavailable: *max_unavailable,
        },
        Cmd::Sequence { dag, direction } => GatewayCommand::Sequence {
            dag: read(dag)?,
            direction: *direction,
        },
        Cmd::Attest { node } => GatewayCommand::Attest { node: node.clone() },
        Cmd::Remediate { file } => GatewayCommand::Remediate {
            event: read_json(file)?,
        },
        Cmd::Metrics => GatewayCommand::Metrics,
        Cmd::Flows {
            command: FlowsCmd::Add { file },
        } => GatewayCommand::AddFlow { flow: read(file)? },
        Cmd::Sim {
            command: SimCmd::Fault { file },
        } => GatewayCommand::SimFault {
            fault: read_json(file)?,
        },
        Cmd::Sim {
            command:
                SimCmd::Run {
                    scenario,
                    seed,
                    trace,
                    remote: on_gateway,
                },
        } => {
            if !on_gateway {
                return run_local(scenario, *seed, trace.as_deref());
            }
            if trace.is_some() {
                bail!("--trace is only available for local runs");
            }
            GatewayCommand::SimRun {
                scenario: Some(read(scenario)?),
                seed: *seed,
                ticks: None,
            }
        }
        Cmd::Serve {
            scenario,
            seed,
            listen,
            threads,
        } => return serve(cli, scenario, *seed, listen, *threads),
    };
    command.validate()?;
    remote(cli, command)
}
