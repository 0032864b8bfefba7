use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use core_engine::{EdgeKind, Engine, EngineConfig};
use core_server::config::{FileConfig, Overrides, Settings};
use core_server::{router, AppState};
use tracing_subscriber::EnvFilter;

/// Procedure checklist assistant.
#[derive(Parser)]
#[command(name = "core", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Config file (defaults to ./core.toml when present).
    #[arg(long, global = true, env = "CORE_CONFIG")]
    config: Option<PathBuf>,
    /// Durable state: stored bundles, graph.jsonl and index.json.
    #[arg(long, global = true, env = "CORE_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// oracle, transcript or http.
    #[arg(long, global = true, env = "CORE_BACKEND")]
    backend: Option<String>,
    #[arg(long, global = true, env = "CORE_HTTP_BASE_URL")]
    http_base_url: Option<String>,
    #[arg(long, global = true, env = "CORE_HTTP_MODEL")]
    http_model: Option<String>,
    #[arg(long, global = true, env = "CORE_TRANSCRIPT")]
    transcript: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest one or more procedure bundles into the data directory.
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = "CORE_HOST")]
        host: Option<String>,
        #[arg(long, env = "CORE_PORT")]
        port: Option<u16>,
        /// Static assets served under /ui/.
        #[arg(long, env = "CORE_UI_DIR")]
        ui_dir: Option<PathBuf>,
    },
    /// Ask one question. Sessions persist only inside a running server, so
    /// --session requires --server.
    Query {
        text: String,
        #[arg(long)]
        session: Option<String>,
        /// Base URL of a running `core serve`.
        #[arg(long, env = "CORE_SERVER")]
        server: Option<String>,
        /// Print the full outcome as JSON instead of the reply text.
        #[arg(long)]
        json: bool,
    },
    /// Inspect the knowledge graph.
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Nodes one outgoing edge away from NODE, e.g. procedure:iss-cpr.
    Neighbors {
        node: String,
        #[arg(long)]
        kind: Option<String>,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let file = FileConfig::load(cli.global.config.as_deref())?;
    let mut over = Overrides {
        data_dir: cli.global.data_dir,
        backend: cli.global.backend,
        http_base_url: cli.global.http_base_url,
        http_model: cli.global.http_model,
        transcript: cli.global.transcript,
        ..Overrides::default()
    };
    match &cli.command {
        Command::Serve { host, port, ui_dir } => {
            over.host = host.clone();
            over.port = *port;
            over.ui_dir = ui_dir.clone();
        }
        Command::Query { server, .. } => over.server = server.clone(),
        _ => {}
    }
    let settings = Settings::resolve(over, file)?;

    match cli.command {
        Command::Ingest { files } => {
            let engine = open_engine(&settings)?;
            for f in files {
                let summary = engine.ingest(&f).with_context(|| format!("ingesting {}", f.display()))?;
                println!("{}", serde_json::to_string(&summary)?);
            }
        }
        Command::Serve { .. } => serve(settings)?,
        Command::Query { text, session, json, .. } => match &settings.server {
            Some(url) => remote_query(url, session, &text, json)?,
            None => {
                if session.is_some() {
                    bail!("--session needs --server: sessions live in the server process");
                }
                let engine = open_engine(&settings)?;
                let id = engine.create_session().session_id;
                let outcome = engine.handle_query(&id, &text)?;
                if json {
                    println!("{}", serde_json::to_string_pretty(&outcome)?);
                } else {
                    println!("{}", outcome.reply.body);
                }
            }
        },
        Command::Graph { command: GraphCommand::Neighbors { node, kind } } => {
            let kind = kind.map(|k| k.parse::<EdgeKind>()).transpose().map_err(anyhow::Error::msg)?;
            let engine = open_engine(&settings)?;
            for n in engine.graph_neighbors(&node, kind)? {
                println!("{}", serde_json::to_string(&n)?);
            }
        }
    }
    Ok(())
}

fn open_engine(settings: &Settings) -> anyhow::Result<Engine> {
    let backend = settings.backend.build()?;
    let config = EngineConfig { data_dir: Some(settings.data_dir.clone()), ..EngineConfig::default() };
    Ok(Engine::with_config(config, backend)?)
}

fn serve(settings: Settings) -> anyhow::Result<()> {
    // Built outside the runtime: the blocking HTTP backend owns its own.
    let engine = open_engine(&settings)?;
    let app = router(AppState::new(Arc::new(engine)), settings.ui_dir.clone());
    tokio::runtime::Runtime::new()?.block_on(async {
        let listener = tokio::net::TcpListener::bind((settings.host.as_str(), settings.port))
            .await
            .with_context(|| format!("binding {}:{}", settings.host, settings.port))?;
        tracing::info!(addr = %listener.local_addr()?, data_dir = %settings.data_dir.display(), "serving");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn remote_query(base: &str, session: Option<String>, text: &str, json: bool) -> anyhow::Result<()> {
    let client = reqwest::blocking::Client::new();
    let base = base.trim_end_matches('/');
    let session = match session {
        Some(id) => id,
        None => {
            let created: serde_json::Value = check(client.post(format!("{base}/api/sessions")).send()?)?.json()?;
            let id = created["session_id"].as_str().context("server returned no session_id")?.to_string();
            eprintln!("session {id}");
            id
        }
    };
    let outcome: serde_json::Value = check(
        client
            .post(format!("{base}/api/sessions/{session}/query"))
            .json(&serde_json::json!({ "text": text }))
            .send()?,
    )?
    .json()?;
    if json {
        println!("{}", serde_json::to_string_pretty(&outcome)?);
    } else {
        println!("{}", outcome["reply"]["body"].as_str().unwrap_or_default());
    }
    Ok(())
}

fn check(resp: reqwest::blocking::Response) -> anyhow::Result<reqwest::blocking::Response> {
    if resp.status().is_success() {
        return Ok(resp);
    }
    let status = resp.status();
    let body: serde_json::Value = resp.json().unwrap_or_default();
    bail!("{status}: {} ({})", body["message"].as_str().unwrap_or("no message"), body["code"].as_str().unwrap_or("?"))
}
