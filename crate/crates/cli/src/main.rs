//! `lakechart`: recommend charts for a query table, run experiment suites, or serve the API.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lakechart_core::experiment::{run_suite, summarize, write_csv, Suite, SuiteConfig};
use lakechart_core::ingest::{LakeSource, LoadOptions};
use lakechart_core::pipeline::{recommend, Prepared, RecommendationPayload, RunOptions};
use lakechart_core::{EngineConfig, Error, Strategy};
use lakechart_service::{AppState, DATA_DIR_VAR, PORT_VAR};

#[derive(Parser)]
#[command(name = "lakechart", version, about = "Bar-chart recommendations over a data lake")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recommend the top-n visualization plans for a query table.
    Recommend(RecommendArgs),
    /// Run an experiment suite over synthetic lakes and write CSV rows.
    Bench(BenchArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    query: PathBuf,
    /// Result table files or directories.
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    /// Alignment document; without one the fallback aligner is used.
    #[arg(long)]
    alignment: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value = "stats", value_parser = parse_strategy)]
    strategy: Strategy,
    #[arg(long, value_enum, default_value = "on")]
    prune: Switch,
    #[arg(long)]
    seed: Option<u64>,
    /// Engine settings (TOML) applied before the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_parser = parse_suite)]
    suite: Suite,
    /// Result-table counts: `10..50` (step 10), `10..50:5`, or `10,20,40`.
    #[arg(long, value_parser = parse_ks)]
    k: Option<KList>,
    #[arg(long)]
    seeds: Option<u64>,
    /// Sweep settings (TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = PORT_VAR, default_value_t = 8080)]
    port: u16,
    #[arg(long, env = DATA_DIR_VAR, default_value = "lakechart-data")]
    data_dir: PathBuf,
}

#[derive(Clone, Debug)]
struct KList(Vec<usize>);

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse()
}

fn parse_ks(s: &str) -> Result<KList, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad count `{t}`"));
    if let Some((lo, rest)) = s.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((hi, step)) => (num(hi)?, num(step)?),
            None => (num(rest)?, 10),
        };
        let lo = num(lo)?;
        if step == 0 || lo > hi {
            return Err(format!("empty range `{s}`"));
        }
        return Ok(KList((lo..=hi).step_by(step).collect()));
    }
    s.split(',').map(num).collect::<Result<_, _>>().map(KList)
}

/// A failure with the process exit code it maps to.
struct Failure {
    code: &'static str,
    message: String,
    exit: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let exit = match e {
            Error::Io { .. } => 2,
            Error::Parse(_)
            | Error::Schema(_)
            | Error::EmptyColumn
            | Error::DuplicateAlignment { .. }
            | Error::DtypeMismatch(..) => 3,
            Error::InvalidPlan(_) | Error::NoValidPlans => 4,
            _ => 1,
        };
        Self {
            code: e.code(),
            message: e.to_string(),
            exit,
        }
    }
}

fn config_error(path: &std::path::Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: "ConfigError",
        message: format!("{}: {e}", path.display()),
        exit: 3,
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|source| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })?;
    toml::from_str(&text).map_err(|e| config_error(path, e))
}

fn write_out(path: Option<&PathBuf>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|source| {
            Failure::from(Error::Io {
                path: p.clone(),
                source,
            })
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_recommend(args: RecommendArgs) -> Result<(), Failure> {
    let mut config: EngineConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => EngineConfig::default(),
    };
    config.n = args.n;
    config.strategy = args.strategy;
    config.prune = args.prune == Switch::On;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let source = LakeSource {
        query: args.query,
        results: args.results,
        alignment: args.alignment,
    };
    let (lake, origin) = source.load(&LoadOptions::default(), &config)?;
    tracing::info!(?origin, tables = lake.tables().len(), "lake loaded");
    let opts = RunOptions::from_config(&config);
    let prep = Prepared::new(Arc::new(lake), config);
    let rec = recommend(&prep, opts)?;
    tracing::info!(
        plans = rec.stats.plans,
        candidates = rec.stats.candidates,
        pruned = rec.stats.pruned,
        "ranked"
    );
    write_out(args.out.as_ref(), &RecommendationPayload::new(&prep, &rec, opts).to_json())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    let mut cfg: SuiteConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => SuiteConfig::default(),
    };
    if let Some(KList(ks)) = args.k {
        cfg.ks = ks;
    }
    if let Some(s) = args.seeds {
        cfg.seeds = s;
    }
    let rows = run_suite(args.suite, &cfg)?;
    let file = std::fs::File::create(&args.out).map_err(|source| {
        Failure::from(Error::Io {
            path: args.out.clone(),
            source,
        })
    })?;
    write_csv(&rows, std::io::BufWriter::new(file))?;
    for ((name, t), (_, u)) in summarize(&rows, |r| r.time_ms)
        .into_iter()
        .zip(summarize(&rows, |r| r.avg_utility))
    {
        eprintln!("{name:>8}  mean time {t:>10.2} ms  mean utility {u:.4}");
    }
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<(), Failure> {
    let failure = |code, message: String| Failure {
        code,
        message,
        exit: 1,
    };
    let rt = tokio::runtime::Runtime::new()
        .map_err(|e| failure("RuntimeError", e.to_string()))?;
    rt.block_on(async {
        let state = AppState::open(&args.data_dir).map_err(|e| {
            failure(
                "IoError",
                format!("cannot open data directory {}: {e}", args.data_dir.display()),
            )
        })?;
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
            .await
            .map_err(|e| failure("BindError", format!("cannot listen on port {}: {e}", args.port)))?;
        let addr = listener
            .local_addr()
            .map_err(|e| failure("BindError", e.to_string()))?;
        tracing::info!(%addr, data_dir = %args.data_dir.display(), "listening");
        eprintln!("listening on {addr}");
        lakechart_service::serve(listener, Arc::new(state), lakechart_service::shutdown_signal())
            .await
            .map_err(|e| failure("ServeError", e.to_string()))
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("LAKECHART_LOG")
                .unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Recommend(a) => cmd_recommend(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.code, f.message);
            ExitCode::from(f.exit)
        }
    }
}
