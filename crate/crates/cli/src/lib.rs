//! `policyqa` subcommands. [`run`] is the whole program minus logging setup,
//! so tests can drive it in-process.

use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use policyqa_core::corpus::{collect_document_paths, read_document_file};
use policyqa_core::probe::{export_report, run_probe, ProbeError, ProbeReport, ProbeSpec};
use policyqa_core::promptkit::PassageOrder;
use policyqa_core::qa::{Engine, QaError, QueryOptions, QueryResult};
use policyqa_service::config::{make_backend, make_embedder};
use policyqa_service::{open_engine, router, serve, BackendKind, EmbedderKind, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "policyqa", version, about = "Corpus-grounded question answering over policy documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment, embed and index documents into an index file.
    Ingest {
        /// Document files (.json interchange, or plain .txt/.md) or directories.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "hash")]
        embedder: EmbedderArg,
    },
    /// Ask one question against an index.
    Ask {
        question: String,
        #[command(flatten)]
        engine: EngineArgs,
        /// Only search these document ids.
        #[arg(long, value_delimiter = ',')]
        docs: Option<Vec<String>>,
        #[command(flatten)]
        query: QueryArgs,
        /// Print the passages placed in the prompt, with distances.
        #[arg(long)]
        show_sources: bool,
        #[arg(long, default_value = "text")]
        format: Format,
    },
    /// Run a paired-prompt probe and write its report.
    Probe {
        spec: PathBuf,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "text")]
        format: Format,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long, default_value = "mock")]
        backend: BackendArg,
        #[arg(long)]
        mock_script: Option<PathBuf>,
        #[arg(long, default_value = "hash")]
        embedder: EmbedderArg,
        /// Documents or directories to ingest at startup.
        #[arg(long)]
        corpus: Vec<PathBuf>,
        /// Index file to restore at startup and keep up to date.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Browser origin allowed to call the API; repeatable.
        #[arg(long = "cors-origin")]
        cors_origins: Vec<String>,
        #[command(flatten)]
        query: QueryArgs,
    },
}

#[derive(Debug, Args)]
struct EngineArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value = "mock")]
    backend: BackendArg,
    /// Scripted answers for the mock backend.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long, default_value = "hash")]
    embedder: EmbedderArg,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long, default_value_t = policyqa_core::llmclient::DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = policyqa_core::qa::DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value = "relevance")]
    order: OrderArg,
    #[arg(long)]
    passage_budget: Option<usize>,
}

impl QueryArgs {
    fn options(&self, docs: Option<&[String]>) -> QueryOptions {
        let mut options = QueryOptions {
            allowed_documents: docs.map(|d| d.iter().map(|s| s.trim().to_string()).collect()),
            temperature: self.temperature,
            top_k: self.top_k,
            passage_order: match self.order {
                OrderArg::Relevance => PassageOrder::Relevance,
                OrderArg::Document => PassageOrder::Document,
            },
            ..QueryOptions::default()
        };
        if let Some(b) = self.passage_budget {
            options.budget.passage_budget = b;
        }
        options
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Remote,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Remote => BackendKind::Remote,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EmbedderArg {
    Hash,
    Remote,
}

impl From<EmbedderArg> for EmbedderKind {
    fn from(e: EmbedderArg) -> Self {
        match e {
            EmbedderArg::Hash => EmbedderKind::Hash,
            EmbedderArg::Remote => EmbedderKind::Remote,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OrderArg {
    Relevance,
    Document,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<QaError> for Failure {
    fn from(e: QaError) -> Self {
        match e {
            QaError::EmptyQuestion | QaError::InvalidOptions(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{rendered}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{rendered}");
                    EXIT_USAGE
                }
            };
        }
    };
    let name = cli.command.name();
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(message)) => {
            let mut command = Cli::command();
            command.build();
            let usage = command
                .find_subcommand_mut(name)
                .map(|c| c.render_usage().to_string())
                .unwrap_or_default();
            let _ = writeln!(err, "error: {message}\n\n{usage}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Ask { .. } => "ask",
            Command::Probe { .. } => "probe",
            Command::Serve { .. } => "serve",
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Ingest { paths, out: index, embedder } => ingest(&paths, &index, embedder.into(), out),
        Command::Ask {
            question,
            engine,
            docs,
            query,
            show_sources,
            format,
        } => {
            if question.trim().is_empty() {
                return Err(Failure::Usage("the question is empty".into()));
            }
            let options = query.options(docs.as_deref());
            options.validate()?;
            let engine = load_engine(&engine)?;
            let result = engine.answer_question(&question, &options)?;
            write_answer(out, &result, show_sources, format).context("writing output")?;
            Ok(())
        }
        Command::Probe {
            spec,
            engine,
            out: report_path,
            format,
        } => {
            let raw = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec = ProbeSpec::parse(&raw).map_err(|e| Failure::Usage(format!("{}: {e}", spec.display())))?;
            let engine = load_engine(&engine)?;
            let report = run_probe(&engine, &spec).map_err(|e| match e {
                ProbeError::Invalid(_) => Failure::Usage(e.to_string()),
                other => Failure::Runtime(other.into()),
            })?;
            export_report(&report, &report_path).map_err(anyhow::Error::from)?;
            write_probe(out, &report, &report_path, format).context("writing output")?;
            Ok(())
        }
        Command::Serve {
            port,
            bind,
            backend,
            mock_script,
            embedder,
            corpus,
            index,
            cors_origins,
            query,
        } => {
            let default_options = query.options(None);
            default_options.validate()?;
            let config = ServiceConfig {
                bind: SocketAddr::new(bind, port),
                corpus_paths: corpus,
                index_path: index,
                backend: backend.into(),
                mock_script,
                embedder: embedder.into(),
                default_options,
                cors_origins,
            };
            serve_blocking(config, out)
        }
    }
}

fn ingest(paths: &[PathBuf], index: &Path, embedder: EmbedderKind, out: &mut dyn Write) -> Result<(), Failure> {
    let engine = Engine::new(make_embedder(embedder).map_err(anyhow::Error::from)?, Arc::new(NoBackend));
    let files = collect_document_paths(paths).map_err(anyhow::Error::from)?;
    if files.is_empty() {
        return Err(Failure::Usage("no document files found".into()));
    }
    for path in files {
        let doc = read_document_file(&path).map_err(anyhow::Error::from)?;
        let summary = engine
            .ingest(doc)
            .with_context(|| format!("ingesting {}", path.display()))?;
        writeln!(out, "{}\t{} passages", summary.document_id, summary.passage_count).context("writing output")?;
    }
    engine.save(index).with_context(|| format!("saving {}", index.display()))?;
    writeln!(out, "wrote {} ({} passages)", index.display(), engine.passage_count()).context("writing output")?;
    Ok(())
}

/// Ingestion never calls the chat backend.
struct NoBackend;

impl policyqa_core::llmclient::ChatBackend for NoBackend {
    fn name(&self) -> &str {
        "none"
    }
    fn complete(
        &self,
        _: &policyqa_core::llmclient::CompletionRequest,
    ) -> Result<policyqa_core::llmclient::CompletionResult, policyqa_core::llmclient::LlmError> {
        Err(policyqa_core::llmclient::LlmError::InvalidRequest("no chat backend configured".into()))
    }
}

fn load_engine(args: &EngineArgs) -> Result<Engine, Failure> {
    if !args.index.exists() {
        return Err(Failure::Runtime(anyhow!(
            "index {} does not exist; build it with `policyqa ingest`",
            args.index.display()
        )));
    }
    let embedder = make_embedder(args.embedder.into()).map_err(anyhow::Error::from)?;
    let backend = make_backend(args.backend.into(), args.mock_script.as_deref()).map_err(anyhow::Error::from)?;
    Ok(Engine::load(&args.index, embedder, backend).with_context(|| format!("loading {}", args.index.display()))?)
}

fn write_answer(out: &mut dyn Write, result: &QueryResult, show_sources: bool, format: Format) -> std::io::Result<()> {
    if format == Format::Json {
        serde_json::to_writer_pretty(&mut *out, result)?;
        return writeln!(out);
    }
    writeln!(out, "{}", result.answer)?;
    if show_sources {
        writeln!(out)?;
        writeln!(out, "Sources:")?;
        for (i, p) in result.included_passages.iter().enumerate() {
            writeln!(out, "{:>3}. {}  distance {:.6}  {}", i + 1, p.passage_id, p.distance, p.document_title)?;
        }
        let s = &result.bundle_stats;
        writeln!(
            out,
            "{} of {} retrieved passages used, {} passage tokens, {} prompt tokens",
            result.included_passages.len(),
            s.total_hits,
            s.passage_tokens_used,
            s.prompt_tokens
        )?;
    }
    Ok(())
}

fn write_probe(out: &mut dyn Write, report: &ProbeReport, path: &Path, format: Format) -> std::io::Result<()> {
    if format == Format::Json {
        serde_json::to_writer_pretty(&mut *out, report)?;
        return writeln!(out);
    }
    writeln!(out, "probe {} ({} variants, {} repetitions)", report.name, report.variants.len(), report.repetitions)?;
    for pair in &report.pairs {
        writeln!(
            out,
            "  {} vs {}: retrieval overlap {:.3}, answer divergence {:.3}, {}",
            pair.a,
            pair.b,
            pair.retrieval_overlap,
            pair.answer_divergence,
            serde_json::to_value(pair.divergence_stage)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default()
        )?;
    }
    writeln!(out, "report written to {}", path.display())
}

fn serve_blocking(config: ServiceConfig, out: &mut dyn Write) -> Result<(), Failure> {
    let engine = open_engine(&config).map_err(anyhow::Error::from)?;
    let app = router(Arc::new(engine), &config);
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(config.bind)
            .await
            .with_context(|| format!("binding {}", config.bind))?;
        let addr = listener.local_addr().context("reading bound address")?;
        writeln!(out, "listening on http://{addr}/v1").context("writing output")?;
        out.flush().context("writing output")?;
        serve(listener, app).await.context("serving")
    })?;
    Ok(())
}
