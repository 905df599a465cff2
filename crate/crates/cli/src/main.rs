mod server;

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hybrag_core::config::load_config;
use hybrag_core::corpus::{build_corpus, load_document_dir};
use hybrag_core::evaluation::{evaluate_qa, read_qa_dataset, rubric_score, QARun};
use hybrag_core::gateway::UnavailableProvider;
use hybrag_core::workspace::{export_snapshot, index_all, snapshot_hash, Models, CONFIG_FILE, CORPUS_FILE};
use hybrag_core::{Workspace, WorkspaceConfig};
use serde_json::{json, Map, Value};
use tracing::warn;

#[derive(Parser)]
#[command(name = "hybrag", version, about = "Hybrid retrieval workspace: index, search, ask, write, evaluate")]
struct Cli {
    /// Workspace directory
    #[arg(short, long, global = true, default_value = ".")]
    workspace: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk parsed documents into the corpus file
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        /// Defaults to <workspace>/corpus.jsonl
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Build every store from the corpus and write the snapshot
    Index,
    /// Knowledge graph maintenance
    Kg {
        #[command(subcommand)]
        command: KgCommand,
    },
    /// Fused retrieval over the indexed stores
    Search {
        query: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        /// alpha_blend or rrf
        #[arg(long)]
        fusion: Option<String>,
        /// Comma separated: vector,fulltext,graph,table
        #[arg(long)]
        sources: Option<String>,
        /// none, lexical_overlap or remote_http
        #[arg(long)]
        rerank: Option<String>,
        /// Payload filter, key=value; repeatable
        #[arg(long = "filter")]
        filters: Vec<String>,
    },
    /// Answer a question with the multi-hop agent
    Ask { question: String },
    /// Write a cited report
    Report {
        query: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the full report JSON instead of Markdown
        #[arg(long)]
        json: bool,
    },
    /// Score QA runs or a generated article
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Serve the HTTP API
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Print the snapshot hash, optionally copying the workspace
    Snapshot {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum KgCommand {
    /// Re-extract triples and rebuild the summary hierarchy
    Build,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pipeline {
    Ask,
    Search,
}

#[derive(Subcommand)]
enum EvalCommand {
    Qa {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "ask")]
        pipeline: Pipeline,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Report {
        #[arg(long)]
        article: PathBuf,
        #[arg(long)]
        query: String,
    },
}

fn config_for(ws: &Path) -> Result<WorkspaceConfig> {
    load_config(&ws.join(CONFIG_FILE)).map_err(|e| anyhow::anyhow!("{e}"))
}

fn open(ws: &Path) -> Result<Workspace> {
    Workspace::open(ws).with_context(|| format!("opening workspace {}", ws.display()))
}

/// Write to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn search_body(
    query: String,
    k: Option<usize>,
    alpha: Option<f64>,
    fusion: Option<String>,
    sources: Option<String>,
    rerank: Option<String>,
    filters: Vec<String>,
) -> Result<Value> {
    let mut body = Map::new();
    body.insert("query".into(), json!(query));
    if let Some(k) = k {
        body.insert("k".into(), json!(k));
    }
    if let Some(a) = alpha {
        body.insert("alpha".into(), json!(a));
    }
    if let Some(f) = fusion {
        body.insert("fusion".into(), json!(f));
    }
    if let Some(s) = sources {
        let list: Vec<&str> = s.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        body.insert("sources".into(), json!(list));
    }
    if let Some(r) = rerank {
        body.insert("rerank".into(), json!(r));
    }
    if !filters.is_empty() {
        let mut map = Map::new();
        for f in filters {
            let Some((k, v)) = f.split_once('=') else {
                bail!("filter {f:?} is not key=value");
            };
            map.insert(k.to_string(), json!(v));
        }
        body.insert("filters".into(), Value::Object(map));
    }
    Ok(Value::Object(body))
}

fn eval_qa(ws: &Workspace, dataset: &Path, pipeline: Pipeline, k: usize) -> Result<String> {
    let records = read_qa_dataset(dataset)?;
    let mut runs = Vec::with_capacity(records.len());
    for rec in &records {
        let run = match pipeline {
            Pipeline::Ask => match ws.ask(&rec.question) {
                Ok(answer) => QARun {
                    question: rec.question.clone(),
                    retrieved_chunk_ids: answer.retrieved_chunk_ids(),
                    answer: answer.answer,
                },
                Err(e) => {
                    warn!(question = %rec.question, error = %e, "pipeline failed");
                    QARun {
                        question: rec.question.clone(),
                        answer: String::new(),
                        retrieved_chunk_ids: Vec::new(),
                    }
                }
            },
            Pipeline::Search => {
                let req = ws.request_from_json(json!({ "query": rec.question, "k": k }))?;
                let resp = ws.search(&req)?;
                QARun {
                    question: rec.question.clone(),
                    answer: resp.hits.first().map(|h| h.text.clone()).unwrap_or_default(),
                    retrieved_chunk_ids: resp.result.chunk_ids().into_iter().map(String::from).collect(),
                }
            }
        };
        runs.push(run);
    }
    let report = evaluate_qa(&runs, &records, k, ws.models.provider(), &ws.models.catalog)?;
    Ok(report.to_tsv())
}

fn run(cli: Cli) -> Result<()> {
    let ws = cli.workspace;
    match cli.command {
        Command::Ingest {
            input,
            out,
            window,
            overlap,
        } => {
            let mut cfg = config_for(&ws)?;
            if let Some(w) = window {
                cfg.chunk.window = w;
            }
            if let Some(o) = overlap {
                cfg.chunk.overlap = o;
            }
            let out = out.unwrap_or_else(|| ws.join(CORPUS_FILE));
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let docs = load_document_dir(&input).with_context(|| format!("reading {}", input.display()))?;
            let n = build_corpus(&docs, cfg.chunk, &out)?;
            print_json(&json!({ "documents": docs.len(), "chunks": n, "corpus": out }))
        }
        Command::Index => {
            let cfg = config_for(&ws)?;
            let models = Models::from_config(&cfg)?;
            print_json(&index_all(&ws, &cfg, &models)?)
        }
        Command::Kg {
            command: KgCommand::Build,
        } => {
            let mut w = open(&ws)?;
            let report = w.rebuild_graph()?;
            print_json(&json!({
                "hierarchy": report,
                "nodes": w.stores.graph.node_count(),
                "edges": w.stores.graph.edge_count(),
                "snapshot_hash": snapshot_hash(&ws)?,
            }))
        }
        Command::Search {
            query,
            k,
            alpha,
            fusion,
            sources,
            rerank,
            filters,
        } => {
            let w = open(&ws)?;
            let req = w.request_from_json(search_body(query, k, alpha, fusion, sources, rerank, filters)?)?;
            print_json(&w.search(&req)?)
        }
        Command::Ask { question } => print_json(&open(&ws)?.ask(&question)?),
        Command::Report { query, out, json } => {
            let report = open(&ws)?.report(&query)?;
            let text = if json {
                serde_json::to_string_pretty(&report)?
            } else {
                report.markdown.clone()
            };
            match out {
                Some(path) => std::fs::write(&path, text)?,
                None => emit(&(text + "\n"))?,
            }
            Ok(())
        }
        Command::Eval { command } => match command {
            EvalCommand::Qa {
                dataset,
                pipeline,
                k,
                out,
            } => {
                let tsv = eval_qa(&open(&ws)?, &dataset, pipeline, k)?;
                match out {
                    Some(path) => std::fs::write(path, tsv)?,
                    None => emit(&tsv)?,
                }
                Ok(())
            }
            EvalCommand::Report { article, query } => {
                let cfg = config_for(&ws)?;
                let models = Models::from_config(&cfg)?;
                let text = std::fs::read_to_string(&article)
                    .with_context(|| format!("reading {}", article.display()))?;
                let unavailable = UnavailableProvider;
                let provider = models.provider().unwrap_or(&unavailable);
                emit(&rubric_score(&text, &query, provider, &models.catalog)?.to_tsv())
            }
        },
        Command::Serve { bind, port } => {
            let w = open(&ws)?;
            let bind = bind.unwrap_or_else(|| w.config.server.bind.clone());
            let port = port.unwrap_or(w.config.server.port);
            let addr: SocketAddr = format!("{bind}:{port}")
                .parse()
                .with_context(|| format!("bad bind address {bind}:{port}"))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(w, addr, |bound| {
                println!("listening on {bound}");
                let _ = std::io::stdout().flush();
            }))
        }
        Command::Snapshot { out } => {
            let hash = match out {
                Some(dest) => export_snapshot(&ws, &dest)?,
                None => snapshot_hash(&ws)?,
            };
            emit(&format!("{hash}\n"))
        }
    }
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    run(Cli::parse())
}
