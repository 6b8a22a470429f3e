/// `println!` that ignores a closed stdout.
macro_rules! out {
    ($($t:tt)*) => {
        $crate::settings::emit(format_args!($($t)*))
    };
}

mod offline;
mod settings;
mod simulate;
mod standalone;

use std::path::PathBuf;
use std::process::ExitCode;

use acc_core::analytics::{AnalyticsError, DistributionKey, RateScale};
use acc_core::clock::Timestamp;
use acc_core::gateway::GatewayError;
use acc_core::mqtt::MqttError;
use acc_core::service::ServiceError;
use acc_core::sim::SimError;
use acc_core::store::StoreError;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("broker: {0}")]
    Mqtt(#[from] MqttError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Incomplete(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "acc",
    version,
    about = "Collective self-consumption monitoring: simulator, bus, gateways, service and offline analytics"
)]
struct Cli {
    /// Service config file (JSON). Flags and ACC_* variables override it.
    #[arg(long, global = true, env = "ACC_CONFIG")]
    config: Option<PathBuf>,

    /// Log filter, e.g. `info` or `acc_core=debug`.
    #[arg(long, global = true, env = "ACC_LOG", default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a simulated fleet through broker, gateways, service and store.
    Simulate(SimulateArgs),
    /// Run the MQTT broker.
    Broker(BrokerArgs),
    /// Run the operation service (ingest, supervision, HTTP API).
    Serve(ServeArgs),
    /// Run one house gateway.
    Gateway(GatewayArgs),
    /// Self-consumption and self-sufficiency over an exported CSV.
    Rates(RatesArgs),
    /// Monthly corrected indexes from day+1 reports.
    Allocate(AllocateArgs),
    /// Export stored telemetry as CSV.
    Export(ExportArgs),
    /// Republish a CSV dataset onto the bus.
    Replay(ReplayArgs),
}

/// Unix seconds or RFC 3339.
fn parse_time(s: &str) -> Result<Timestamp, String> {
    s.parse::<Timestamp>().or_else(|_| {
        chrono::DateTime::parse_from_rfc3339(s)
            .map(|d| d.timestamp())
            .map_err(|_| format!("{s:?} is neither unix seconds nor RFC 3339"))
    })
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("{s:?} is not a positive number")),
    }
}

/// `dynamic` or `static:h1=0.5,h2=0.5`.
fn parse_key(s: &str) -> Result<DistributionKey, String> {
    if s == "dynamic" {
        return Ok(DistributionKey::DynamicByConsumption);
    }
    let Some(list) = s.strip_prefix("static:") else {
        return Err(format!("{s:?}: expected `dynamic` or `static:house=share,...`"));
    };
    let mut proportions = std::collections::BTreeMap::new();
    for part in list.split(',') {
        let (h, k) = part
            .split_once('=')
            .ok_or_else(|| format!("{part:?}: expected house=share"))?;
        let k: f64 = k.parse().map_err(|_| format!("{k:?} is not a number"))?;
        proportions.insert(h.to_string(), k);
    }
    let key = DistributionKey::StaticProportions { proportions };
    key.validate().map_err(|e| e.to_string())?;
    Ok(key)
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Fleet file (JSON); defaults to the config's fleet, else nine houses.
    #[arg(long, env = "ACC_FLEET")]
    pub fleet: Option<PathBuf>,
    /// Simulated duration in hours.
    #[arg(long, default_value = "24", value_parser = parse_positive)]
    pub hours: f64,
    /// Simulated seconds per wall second.
    #[arg(long, env = "ACC_ACCELERATION", value_parser = parse_positive)]
    pub acceleration: Option<f64>,
    #[arg(long, env = "ACC_SEED")]
    pub seed: Option<u64>,
    /// Simulation start (unix seconds or RFC 3339).
    #[arg(long, value_parser = parse_time)]
    pub start: Option<Timestamp>,
    /// Use an external broker instead of an embedded one.
    #[arg(long, env = "ACC_BROKER")]
    pub broker: Option<String>,
    /// Store directory; must be empty or absent.
    #[arg(long, env = "ACC_STORE")]
    pub store: Option<PathBuf>,
    /// Serve the HTTP API on this address during the run.
    #[arg(long, env = "ACC_LISTEN")]
    pub listen: Option<String>,
    #[arg(long, env = "ACC_REFRESH")]
    pub refresh: Option<u32>,
    /// Write the run's telemetry as CSV.
    #[arg(long)]
    pub export: Option<PathBuf>,
    /// Write each house's day+1 reports to DIR/<house>.json.
    #[arg(long, value_name = "DIR")]
    pub reports: Option<PathBuf>,
    /// Print the run summary as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BrokerArgs {
    /// Listen address; defaults to the config's broker_addr.
    #[arg(long, env = "ACC_BROKER_LISTEN")]
    pub listen: Option<String>,
    /// Accepted CONNECT username (repeatable); none admits everyone.
    #[arg(long = "token", env = "ACC_BROKER_TOKENS", value_delimiter = ',')]
    pub tokens: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "ACC_LISTEN")]
    pub listen: Option<String>,
    #[arg(long, env = "ACC_BROKER")]
    pub broker: Option<String>,
    #[arg(long, env = "ACC_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, env = "ACC_ADMIN_TOKEN")]
    pub admin_token: Option<String>,
    #[arg(long, env = "ACC_REFRESH")]
    pub refresh: Option<u32>,
    /// Fleet file whose houses are served when the config lists none.
    #[arg(long, env = "ACC_FLEET")]
    pub fleet: Option<PathBuf>,
    /// Extra house id to serve (repeatable).
    #[arg(long = "house")]
    pub houses: Vec<String>,
    /// Run on simulated time at this factor instead of the system clock.
    #[arg(long, value_parser = parse_positive, requires = "start")]
    pub acceleration: Option<f64>,
    /// Simulated start time, with --acceleration.
    #[arg(long, value_parser = parse_time)]
    pub start: Option<Timestamp>,
}

#[derive(Debug, Args)]
pub struct GatewayArgs {
    #[arg(long, env = "ACC_HOUSE")]
    pub house: String,
    #[arg(long, env = "ACC_BROKER")]
    pub broker: Option<String>,
    #[arg(long, env = "ACC_REFRESH")]
    pub refresh: Option<u32>,
    #[arg(long, value_enum, default_value = "standard")]
    pub mode: standalone::Mode,
    /// Replay the frames of a TIC capture instead of simulating a meter.
    #[arg(long)]
    pub capture: Option<PathBuf>,
    /// Fleet file to take the house's meter model from.
    #[arg(long, env = "ACC_FLEET")]
    pub fleet: Option<PathBuf>,
    /// Meter model when the house is not in a fleet file.
    #[arg(long, value_enum, default_value = "consumer")]
    pub role: standalone::Role,
    #[arg(long, default_value = "1")]
    pub seed: u64,
    /// Token sent as the CONNECT username.
    #[arg(long, env = "ACC_GATEWAY_TOKEN")]
    pub token: Option<String>,
    #[arg(long, value_parser = parse_positive, requires = "start")]
    pub acceleration: Option<f64>,
    #[arg(long, value_parser = parse_time)]
    pub start: Option<Timestamp>,
    /// Stop after this many ticks.
    #[arg(long)]
    pub ticks: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RatesArgs {
    /// Telemetry CSV as written by `export`.
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long, value_parser = parse_time)]
    pub from: Option<Timestamp>,
    #[arg(long, value_parser = parse_time)]
    pub to: Option<Timestamp>,
    /// instant, 30min or period.
    #[arg(long, default_value = "period")]
    pub scale: RateScale,
    /// Resampling step in seconds; defaults to the config's rate_step_s.
    #[arg(long)]
    pub step: Option<i64>,
    /// Reference time for the instant and 30min scales; defaults to the
    /// newest point.
    #[arg(long, value_parser = parse_time)]
    pub now: Option<Timestamp>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    /// Directory of <house>.json files, each a list of day+1 reports.
    #[arg(long)]
    pub reports: PathBuf,
    /// `dynamic` or `static:h1=0.5,h2=0.5`.
    #[arg(long, default_value = "dynamic", value_parser = parse_key, conflicts_with = "key_file")]
    pub key: DistributionKey,
    /// Distribution key as JSON.
    #[arg(long)]
    pub key_file: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, env = "ACC_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub house: Option<String>,
    #[arg(long, value_parser = parse_time)]
    pub from: Option<Timestamp>,
    #[arg(long, value_parser = parse_time)]
    pub to: Option<Timestamp>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long, env = "ACC_BROKER")]
    pub broker: Option<String>,
    /// Simulated seconds per wall second.
    #[arg(long, default_value = "1", value_parser = parse_positive)]
    pub speed: f64,
    #[arg(long)]
    pub house: Option<String>,
}

fn init_logging(filter: &str) {
    let filter =
        tracing_subscriber::EnvFilter::try_new(filter).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

async fn run(cli: Cli) -> Result<(), CliError> {
    let config = settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate::run(config, a).await,
        Command::Broker(a) => standalone::broker(config, a).await,
        Command::Serve(a) => standalone::serve(config, a).await,
        Command::Gateway(a) => standalone::gateway(config, a).await,
        Command::Replay(a) => standalone::replay(config, a).await,
        Command::Rates(a) => offline::rates(config, a),
        Command::Allocate(a) => offline::allocate(a),
        Command::Export(a) => offline::export(config, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.log);
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("acc: cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("acc: {e}");
            ExitCode::from(1)
        }
    }
}
