use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use fedcare::cloud_api;
use fedcare::edge_api::{self, EdgeState};
use fedcare::{HttpTransport, Wire};
use fedcare_core::cloud::{Cloud, CloudConfig};
use fedcare_core::domain::FeatureSchema;
use fedcare_core::edge::{CloudClient, EdgeConfig, EdgeNode};
use fedcare_core::more::{keygen, MoreKey};
use fedcare_core::protocol::{Clock, SystemClock};
use fedcare_core::sim::{bundled_scenario, generate_cohort, run_scenario, verify_report, InProcess, Network, ScenarioReport, ScenarioSpec};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

#[derive(Parser)]
#[command(name = "fedcare", version, about = "Federated clinical QoL prediction: cloud, edge and scenario tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic federation scenarios.
    Sim {
        #[command(subcommand)]
        command: SimCommand,
    },
    /// Generate a MORE key.
    Keygen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the cloud coordinator.
    Cloud {
        #[command(subcommand)]
        command: ServeCommand,
    },
    /// Run an edge node.
    Edge {
        #[command(subcommand)]
        command: ServeCommand,
    },
}

#[derive(Subcommand)]
enum SimCommand {
    /// Run a scenario file, or a bundled scenario by name.
    Run {
        spec: String,
        /// Talk to the cloud over loopback HTTP instead of in-process calls.
        #[arg(long)]
        wire: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check a saved report.
    Verify { report: PathBuf },
    /// Write one edge's synthetic HIS export for a scenario.
    Cohort {
        spec: String,
        #[arg(long, default_value_t = 0)]
        edge: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ServeCommand {
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Bad input from the user: exit code 2.
#[derive(Debug)]
struct Usage(anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> anyhow::Result<T> {
    r.map_err(|e| Usage(e.into()).into())
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    usage(fs::read(path).with_context(|| format!("reading {}", path.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Sim { command: SimCommand::Run { spec, wire, out } } => sim_run(&spec, wire, out.as_deref()),
        Command::Sim { command: SimCommand::Verify { report } } => sim_verify(&report),
        Command::Sim { command: SimCommand::Cohort { spec, edge, out } } => {
            let spec = load_spec(&spec)?;
            let cohort = generate_cohort(&spec, edge);
            fs::write(&out, serde_json::to_vec_pretty(&cohort.payload())?).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} records for {} to {}", cohort.records.len(), ScenarioSpec::edge_id(edge), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Keygen { seed, out } => {
            let key = keygen(seed)?;
            fs::write(&out, serde_json::to_vec_pretty(&key)?).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote MORE key (seed {seed}) to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Cloud { command: ServeCommand::Serve { config } } => cloud_serve(&config),
        Command::Edge { command: ServeCommand::Serve { config } } => edge_serve(&config),
    }
}

fn load_spec(arg: &str) -> anyhow::Result<ScenarioSpec> {
    let path = Path::new(arg);
    if path.exists() {
        usage(ScenarioSpec::from_json(&read(path)?).with_context(|| format!("parsing {arg}")))
    } else {
        usage(bundled_scenario(arg).map_err(|_| anyhow!("no scenario file or bundled scenario named `{arg}`")))
    }
}

fn sim_run(spec: &str, wire: bool, out: Option<&Path>) -> anyhow::Result<ExitCode> {
    let spec = load_spec(spec)?;
    let mut network: Box<dyn Network> = if wire { Box::new(Wire::new()?) } else { Box::new(InProcess) };
    let report = run_scenario(&spec, network.as_mut())?;
    for a in &report.assertions {
        println!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
    }
    println!(
        "scenario {} over {}: {}/{} assertions passed",
        report.scenario,
        report.transport,
        report.assertions.iter().filter(|a| a.passed).count(),
        report.assertions.len()
    );
    if let Some(out) = out {
        fs::write(out, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn sim_verify(path: &Path) -> anyhow::Result<ExitCode> {
    let report: ScenarioReport = usage(serde_json::from_slice(&read(path)?).with_context(|| format!("parsing {}", path.display())))?;
    let failures = verify_report(&report);
    for f in &failures {
        println!("FAIL {f}");
    }
    if failures.is_empty() {
        println!("report {} verified", path.display());
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        if let Err(e) = tokio::signal::ctrl_c().await {
            log::error!("cannot listen for ctrl-c: {e}");
            std::future::pending::<()>().await;
        }
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    log::info!("shutting down");
}

fn cloud_serve(config_path: &Path) -> anyhow::Result<ExitCode> {
    let config: CloudConfig = usage(serde_json::from_slice(&read(config_path)?).context("parsing cloud config"))?;
    usage(config.validate())?;
    let addr = config.listen_address.clone();
    let sweep = Duration::from_secs(config.he_sweep_secs.max(1));
    let cloud = Arc::new(Mutex::new(Cloud::open(config, Arc::new(SystemClock))?));
    let rt = runtime()?;
    rt.block_on(async {
        let sweeper = cloud.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(sweep);
            loop {
                tick.tick().await;
                let c = sweeper.clone();
                let res = tokio::task::spawn_blocking(move || {
                    let mut cloud = c.lock().unwrap_or_else(|p| p.into_inner());
                    let now = SystemClock.now();
                    cloud.expire(now)?;
                    cloud.train_he_models()
                })
                .await;
                match res {
                    Ok(Ok(n)) if n > 0 => log::info!("retrained {n} encrypted models"),
                    Ok(Err(e)) => log::warn!("encrypted training sweep failed: {e}"),
                    _ => {}
                }
            }
        });
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        log::info!("cloud listening on {}", listener.local_addr()?);
        axum::serve(listener, cloud_api::router(cloud.clone())).with_graceful_shutdown(shutdown_signal()).await?;
        anyhow::Ok(())
    })?;
    drop(rt);
    cloud.lock().unwrap_or_else(|p| p.into_inner()).snapshot()?;
    Ok(ExitCode::SUCCESS)
}

fn edge_serve(config_path: &Path) -> anyhow::Result<ExitCode> {
    let config: EdgeConfig = usage(serde_json::from_slice(&read(config_path)?).context("parsing edge config"))?;
    usage(config.validate())?;
    let schema_path = usage(config.schema_path.clone().ok_or_else(|| anyhow!("edge config needs schema_path")))?;
    let schema = usage(FeatureSchema::from_json(&read(&schema_path)?).context("parsing schema"))?;
    let more_key = match &config.more_key_path {
        Some(p) => Some(usage(MoreKey::from_json(&read(p)?).context("parsing MORE key"))?),
        None => None,
    };
    let cloud = match &config.cloud_base_url {
        Some(url) if config.federation_enabled || config.he_enabled => {
            let transport = usage(HttpTransport::new(url))?;
            Some(CloudClient::new(Box::new(transport), &config.edge_id, &config.admission_secret))
        }
        _ => None,
    };
    let addr = config.listen_address.clone();
    let node = usage(EdgeNode::new(config, schema, more_key, cloud, Arc::new(SystemClock)))?;
    let node = Arc::new(RwLock::new(node));
    let rt = runtime()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        log::info!("edge listening on {}", listener.local_addr()?);
        let app = edge_api::router(EdgeState::new(node.clone()));
        axum::serve(listener, app).with_graceful_shutdown(shutdown_signal()).await?;
        anyhow::Ok(())
    })?;
    // The blocking HTTP client inside the node must be dropped outside the runtime.
    drop(rt);
    drop(node);
    Ok(ExitCode::SUCCESS)
}
