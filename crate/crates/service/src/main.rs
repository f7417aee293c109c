use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::{Map, Value};
use trackscreen_core::synth::{generate, GeneratorSpec};
use trackscreen_core::{EventSlice, MethodId, Store};
use trackscreen_service::error::ErrorBody;
use trackscreen_service::files::ingest_files;
use trackscreen_service::report::{build_report, write_report};
use trackscreen_service::runs::{materialize_methods, resolve_config, MethodLocks};
use trackscreen_service::views::evaluation_view;
use trackscreen_service::{router, ApiError, AppState, ServerConfig};

#[derive(Parser)]
#[command(name = "trackscreen", version, about = "Screen athletics performance histories for anomalies")]
struct Cli {
    /// TOML file with port, db_path, cache_size, seed and static_dir.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Database file; overrides the config file and TRACKSCREEN_DB.
    #[arg(long, global = true)]
    db: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load results, competitions and sanctions files (recognised by header).
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Write a synthetic dataset described by a TOML spec, or the preset `table-one`.
    Generate {
        spec: String,
        #[arg(long)]
        out: PathBuf,
        /// Also load the generated files into the database.
        #[arg(long)]
        ingest: bool,
    },
    /// Run detectors on a slice and store the results.
    Detect {
        #[arg(long)]
        slice: String,
        /// Comma-separated method ids; all methods when omitted.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// Detector setting override, e.g. `--set z_threshold=2.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the athlete-level evaluation of stored results against sanctions.
    Evaluate {
        #[arg(long)]
        slice: String,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API (and static UI assets when configured).
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
    /// Write report.json and report.txt for a slice.
    ExportReport {
        #[arg(long)]
        slice: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<ServerConfig> {
    let base = match &cli.config {
        Some(p) => ServerConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ServerConfig::default(),
    };
    let mut cfg = base.with_env(|k| std::env::var(k).ok())?;
    if let Some(db) = &cli.db {
        cfg.db_path = db.clone();
    }
    Ok(cfg)
}

fn open_store(cfg: &ServerConfig) -> anyhow::Result<Store> {
    Store::open(&cfg.db_path, cfg.cache_size).with_context(|| format!("opening database {}", cfg.db_path.display()))
}

fn parse_slice(s: &str) -> anyhow::Result<EventSlice> {
    Ok(s.parse::<EventSlice>()?)
}

fn parse_overrides(items: &[String]) -> anyhow::Result<Map<String, Value>> {
    let mut out = Map::new();
    for item in items {
        let (k, v) = item.split_once('=').with_context(|| format!("override {item:?} is not KEY=VALUE"))?;
        let value = serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.trim().to_string()));
        out.insert(k.trim().to_string(), value);
    }
    Ok(out)
}

/// Writes to stdout; a closed pipe (`| head`) ends output quietly.
fn emit(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(v)?))
}

fn load_spec(spec: &str) -> anyhow::Result<GeneratorSpec> {
    match spec {
        "table-one" => Ok(GeneratorSpec::table_one_scale()),
        "default" => Ok(GeneratorSpec::default()),
        path => {
            let text = std::fs::read_to_string(Path::new(path)).with_context(|| format!("reading spec {path}"))?;
            Ok(toml::from_str(&text)?)
        }
    }
}

async fn shutdown_signal() {
    if tokio::signal::ctrl_c().await.is_err() {
        std::future::pending::<()>().await;
    }
    tracing::info!("shutting down");
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest { files } => {
            let store = open_store(&cfg)?;
            let outcomes = tokio::task::block_in_place(|| ingest_files(&store, &files))?;
            print_json(&outcomes)
        }
        Command::Generate { spec, out, ingest } => {
            let spec = load_spec(&spec)?;
            let data = generate(&spec)?;
            data.write_to_dir(&out)?;
            if ingest {
                let store = open_store(&cfg)?;
                let files: Vec<PathBuf> =
                    ["competitions.csv", "results.csv", "sanctions.csv"].iter().map(|f| out.join(f)).collect();
                ingest_files(&store, &files)?;
            }
            print_json(&serde_json::json!({
                "out": out,
                "athletes": data.manifest.n_athletes,
                "performances": data.manifest.n_performances,
                "competitions": data.manifest.n_competitions,
                "injected": data.manifest.injected.len(),
                "sanctioned": data.manifest.sanctioned.len(),
            }))
        }
        Command::Detect { slice, methods, overrides } => {
            let store = open_store(&cfg)?;
            let slice = parse_slice(&slice)?;
            if !store.slice_exists(&slice)? {
                return Err(ApiError::not_found("unknown_slice", format!("slice {slice} has no performances")).into());
            }
            let mut ids: Vec<MethodId> =
                methods.iter().map(|m| m.trim().parse::<MethodId>()).collect::<Result<_, _>>()?;
            if ids.is_empty() {
                ids = MethodId::ALL.to_vec();
            }
            let base = trackscreen_core::DetectorConfig { seed: cfg.seed, ..Default::default() };
            let config = resolve_config(&base, &parse_overrides(&overrides)?)?;
            let summary = materialize_methods(&store, &slice, &ids, &config, &MethodLocks::default())?;
            print_json(&serde_json::json!({ "slice": slice.to_string(), "methods": summary }))
        }
        Command::Evaluate { slice, out } => {
            let store = open_store(&cfg)?;
            let slice = parse_slice(&slice)?;
            let report = evaluation_view(&store, &slice, None)?;
            emit(&report.to_table())?;
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_vec_pretty(&report)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::ExportReport { slice, out } => {
            let store = open_store(&cfg)?;
            let slice = parse_slice(&slice)?;
            let report = build_report(&store, &slice)?;
            write_report(&report, &out)?;
            print_json(&serde_json::json!({ "out": out }))
        }
        Command::Serve { port } => {
            let store = Arc::new(open_store(&cfg)?);
            let port = port.unwrap_or(cfg.port);
            let app = router(AppState::new(store, cfg.seed), cfg.static_dir.clone());
            let listener = tokio::net::TcpListener::bind((cfg.host.as_str(), port))
                .await
                .with_context(|| format!("binding {}:{port}", cfg.host))?;
            tracing::info!(addr = %listener.local_addr()?, "listening");
            axum::serve(listener, app).with_graceful_shutdown(shutdown_signal()).await?;
            Ok(())
        }
    }
}

fn error_body(e: &anyhow::Error) -> ErrorBody {
    if let Some(api) = e.downcast_ref::<ApiError>() {
        return api.body.clone();
    }
    ErrorBody { code: "error".into(), message: format!("{e:#}"), hint: String::new() }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "code": "runtime", "message": e.to_string() }));
            return ExitCode::FAILURE;
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&error_body(&e)).unwrap_or_else(|_| e.to_string()));
            ExitCode::FAILURE
        }
    }
}
