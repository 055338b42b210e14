use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use membox::audit::AuditLog;
use membox::config::{Config, ConfigError};
use membox::embedding::EmbeddingError;
use membox::eval::{self, EvalError, MemoryStats};
use membox::gateway::GatewayError;
use membox::loom::LoomError;
use membox::model::{MemoryStore, StoreError};
use membox::pipeline::build_store;
use membox::retrieval::{answer, RetrievalError, TextMode};
use membox::weaver::{LinkError, TraceWeaver};
use serde_json::json;

#[derive(Parser)]
#[command(name = "membox", version, about = "Topic-continuity conversational memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build one store per conversation of a LoCoMo-style file.
    Build {
        #[arg(long, short)]
        input: PathBuf,
        /// Directory receiving `<conversation>.json` stores.
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Parallel conversations; overrides the config.
        #[arg(long)]
        jobs: Option<usize>,
        /// Directory receiving `<conversation>.audit.jsonl` decision logs.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Drop all traces of a store and re-run linking over its sealed boxes.
    Link {
        #[arg(long, short)]
        store: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Write here instead of overwriting the store.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Answer one question from a store; prints a JSON object.
    Query {
        #[arg(long, short)]
        store: PathBuf,
        #[arg(long, short)]
        question: String,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, value_parser = parse_text_mode)]
        text_mode: Option<TextMode>,
    },
    /// Evaluate a QA set against stores built by `build`.
    Eval {
        /// Directory holding `<conversation>.json` stores.
        #[arg(long)]
        stores: PathBuf,
        /// LoCoMo-style file providing the questions.
        #[arg(long)]
        qa: PathBuf,
        /// Report JSON path; the text table goes next to it with a `.txt` extension.
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, value_parser = parse_text_mode)]
        text_mode: Option<TextMode>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print memory and LLM accounting for a store file or a directory of stores.
    Stats {
        #[arg(long, short)]
        store: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn parse_text_mode(s: &str) -> Result<TextMode, String> {
    s.parse()
}

enum Failure {
    Usage(String),
    Data(String),
    Backend(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Backend(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Backend(m) => m,
        }
    }
}

fn embedding_is_backend(e: &EmbeddingError) -> bool {
    matches!(e, EmbeddingError::Backend { .. })
}

fn link_is_backend(e: &LinkError) -> bool {
    match e {
        LinkError::Gateway(_) => true,
        LinkError::Embedding(inner) => embedding_is_backend(inner),
        LinkError::Store(_) => false,
    }
}

fn loom_is_backend(e: &LoomError) -> bool {
    match e {
        LoomError::Store(_) => false,
        LoomError::Embedding(inner) => embedding_is_backend(inner),
        LoomError::Classification { .. } | LoomError::Extraction { .. } => true,
        LoomError::Link { source, .. } => link_is_backend(source),
    }
}

fn retrieval_is_backend(e: &RetrievalError) -> bool {
    match e {
        RetrievalError::Gateway(GatewayError::EmptyInput(_)) => false,
        RetrievalError::Gateway(_) => true,
        RetrievalError::Embedding(inner) => embedding_is_backend(inner),
        _ => false,
    }
}

impl Failure {
    fn classify(backend: bool, message: String) -> Self {
        if backend {
            Failure::Backend(message)
        } else {
            Failure::Data(message)
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::classify(matches!(e, ConfigError::Backend(_)), e.to_string())
    }
}

impl From<eval::LoadError> for Failure {
    fn from(e: eval::LoadError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<LinkError> for Failure {
    fn from(e: LinkError) -> Self {
        Failure::classify(link_is_backend(&e), e.to_string())
    }
}

impl From<LoomError> for Failure {
    fn from(e: LoomError) -> Self {
        Failure::classify(loom_is_backend(&e), e.to_string())
    }
}

impl From<RetrievalError> for Failure {
    fn from(e: RetrievalError) -> Self {
        Failure::classify(retrieval_is_backend(&e), e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let backend = matches!(&e, EvalError::Answer { source, .. } if retrieval_is_backend(source));
        Failure::classify(backend, e.to_string())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn load_config(arg: &ConfigArg) -> Result<Config, Failure> {
    match &arg.config {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn load_store(path: &Path) -> Result<MemoryStore, Failure> {
    MemoryStore::load(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Data(format!("worker pool: {e}")))
}

/// Conversation id with path separators replaced, used as file stem.
fn file_stem(conversation_id: &str) -> String {
    conversation_id
        .chars()
        .map(|c| if matches!(c, '/' | '\\' | ':') { '_' } else { c })
        .collect()
}

fn store_file(dir: &Path, conversation_id: &str) -> PathBuf {
    dir.join(format!("{}.json", file_stem(conversation_id)))
}

fn cmd_build(
    input: &Path,
    out: &Path,
    config: &Config,
    jobs: Option<usize>,
    audit_dir: Option<&Path>,
) -> Result<(), Failure> {
    use rayon::prelude::*;

    let ds = eval::locomo::load(input, &config.category_map)?;
    let embedder = config.embedder()?;
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    if let Some(d) = audit_dir {
        std::fs::create_dir_all(d).map_err(|e| io_failure(d, e))?;
    }

    let results: Vec<Result<(MemoryStore, membox::pipeline::BuildSummary), Failure>> =
        pool(jobs.unwrap_or(config.jobs))?.install(|| {
            ds.conversations
                .par_iter()
                .map(|conv| {
                    let gateway = config.gateway()?;
                    let audit = AuditLog::new();
                    let built = build_store(conv, &gateway, &embedder, config.loom, Some(&audit))?;
                    if let Some(d) = audit_dir {
                        let p = d.join(format!("{}.audit.jsonl", file_stem(&conv.id)));
                        audit.write_to(&p).map_err(|e| io_failure(&p, e))?;
                    }
                    let path = store_file(out, &conv.id);
                    built.0.save(&path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
                    Ok(built)
                })
                .collect()
        });

    let mut stores = Vec::new();
    for r in results {
        let (store, s) = r?;
        println!(
            "{}: {} messages, {} boxes, {} traces{}",
            s.conversation_id,
            s.messages,
            s.boxes,
            s.traces,
            if s.pending_links > 0 {
                format!(", {} boxes pending linking", s.pending_links)
            } else {
                String::new()
            }
        );
        stores.push(store);
    }
    print!("{}", MemoryStats::from_stores(&stores).to_table());
    Ok(())
}

fn cmd_link(store_path: &Path, config: &Config, out: Option<&Path>) -> Result<(), Failure> {
    let mut store = load_store(store_path)?;
    let gateway = config.gateway()?;
    let reports = TraceWeaver::new(&gateway).relink_all(&mut store)?;
    let target = out.unwrap_or(store_path);
    store
        .save(target)
        .map_err(|e| Failure::Data(format!("{}: {e}", target.display())))?;
    println!("relinked {} boxes into {} traces", reports.len(), store.traces.len());
    Ok(())
}

fn cmd_query(
    store_path: &Path,
    question: &str,
    mut config: Config,
    top_k: Option<usize>,
    text_mode: Option<TextMode>,
) -> Result<(), Failure> {
    if let Some(k) = top_k {
        if k == 0 {
            return Err(Failure::Usage("--top-k must be at least 1".into()));
        }
        config.retrieval.top_k = k;
    }
    if let Some(m) = text_mode {
        config.retrieval.text_mode = m;
    }
    let store = load_store(store_path)?;
    let gateway = config.gateway()?;
    let embedder = config.embedder()?;
    let a = answer(&store, &gateway, &embedder, question, &config.retrieval)?;
    let out = json!({
        "prediction": a.prediction,
        "retrieved": a.retrieved.iter().map(|b| b.to_string()).collect::<Vec<_>>(),
        "scores": a.scores,
        "context_token_count": a.context_token_count,
        "top_k": config.retrieval.top_k,
        "text_mode": config.retrieval.text_mode.as_str(),
    });
    println!("{out}");
    Ok(())
}

fn cmd_eval(
    stores_dir: &Path,
    qa_path: &Path,
    out: &Path,
    mut config: Config,
    top_k: Option<usize>,
    text_mode: Option<TextMode>,
    jobs: Option<usize>,
) -> Result<(), Failure> {
    if let Some(k) = top_k {
        if k == 0 {
            return Err(Failure::Usage("--top-k must be at least 1".into()));
        }
        config.retrieval.top_k = k;
    }
    if let Some(m) = text_mode {
        config.retrieval.text_mode = m;
    }
    if let Some(j) = jobs {
        config.jobs = j;
    }
    let ds = eval::locomo::load(qa_path, &config.category_map)?;
    let mut stores = BTreeMap::new();
    for q in &ds.qa {
        if stores.contains_key(&q.conversation_id) {
            continue;
        }
        let p = store_file(stores_dir, &q.conversation_id);
        if !p.exists() {
            return Err(EvalError::MissingStore(q.conversation_id.clone()).into());
        }
        stores.insert(q.conversation_id.clone(), load_store(&p)?);
    }
    let gateway = config.gateway()?;
    let embedder = config.embedder()?;
    let report = eval::run_eval(&stores, &ds.qa, &gateway, &embedder, &config.eval_config())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    std::fs::write(out, report.to_json_string()).map_err(|e| io_failure(out, e))?;
    let table = report.to_table();
    let table_path = out.with_extension("txt");
    std::fs::write(&table_path, &table).map_err(|e| io_failure(&table_path, e))?;
    print!("{table}");
    Ok(())
}

fn cmd_stats(path: &Path, as_json: bool) -> Result<(), Failure> {
    let stores = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| io_failure(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files.iter().map(|f| load_store(f)).collect::<Result<Vec<_>, _>>()?
    } else {
        vec![load_store(path)?]
    };
    let stats = MemoryStats::from_stores(&stores);
    if as_json {
        println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
    } else {
        print!("{}", stats.to_table());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Build {
            input,
            out,
            config,
            jobs,
            audit,
        } => cmd_build(&input, &out, &load_config(&config)?, jobs, audit.as_deref()),
        Command::Link { store, config, out } => cmd_link(&store, &load_config(&config)?, out.as_deref()),
        Command::Query {
            store,
            question,
            config,
            top_k,
            text_mode,
        } => cmd_query(&store, &question, load_config(&config)?, top_k, text_mode),
        Command::Eval {
            stores,
            qa,
            out,
            config,
            top_k,
            text_mode,
            jobs,
        } => cmd_eval(&stores, &qa, &out, load_config(&config)?, top_k, text_mode, jobs),
        Command::Stats { store, json } => cmd_stats(&store, json),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
