use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dagkit::api_index::{build_index, load_specs, ApiIndex, IndexError, Provider};
use dagkit::augmenter::{AugmentationDesign, WordCounter};
use dagkit::bench::{
    aggregate, emit_report, load_tasks, read_meta, read_traces, run_benchmark_streaming, trace_to_line,
    write_meta, BenchError, ReportFormat, RunConfig, RunMeta,
};
use dagkit::corpus_miner::{mine, records_to_jsonl, MineError, ProviderFilter};
use dagkit::gateway::{Backend, Gateway, HttpBackend, HttpConfig, MockBackend, RetryPolicy, DEFAULT_API_KEY_ENV};
use dagkit::invocation::{extract_first_call, validate, BindingMode, ModeSelection};
use dagkit::policy::Policy;
use dagkit::retriever::RetrieverConfig;

#[derive(Parser)]
#[command(name = "dagkit", version, about = "Measure and mitigate API hallucinations in generated code")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// API index operations
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Count API-name occurrences over a Python corpus
    Mine(MineArgs),
    /// Run the benchmark over a task file
    Run(RunArgs),
    /// Aggregate a results file into a report
    Report(ReportArgs),
    /// Check one invocation against target APIs
    Validate(ValidateArgs),
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build an index from one or more spec files (JSON arrays of specs)
    Build {
        #[arg(long = "specs", required = true, num_args = 1..)]
        specs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Providers to mine (default: all)
    #[arg(long = "provider")]
    providers: Vec<Provider>,
    /// Output JSONL (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum Binding {
    Auto,
    KeywordOnly,
    PositionalOrKeyword,
}

impl Binding {
    fn selection(self) -> ModeSelection {
        match self {
            Binding::Auto => ModeSelection::ByProvider,
            Binding::KeywordOnly => ModeSelection::Fixed(BindingMode::KeywordOnly),
            Binding::PositionalOrKeyword => ModeSelection::Fixed(BindingMode::PositionalOrKeyword),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    /// Results JSONL; a `.meta.json` sidecar is written next to it
    #[arg(long)]
    out: PathBuf,
    /// base, dag, index-lookup, confidence or dag++
    #[arg(long, default_value = "base")]
    policy: String,
    #[arg(long)]
    threshold: Option<f64>,
    /// Fraction of tasks whose target document is retrieved
    #[arg(long, default_value_t = 0.5)]
    precision: f64,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "desc-spec")]
    design: AugmentationDesign,
    #[arg(long)]
    pin_target_first: bool,
    #[arg(long, value_enum, default_value_t = Binding::Auto)]
    binding: Binding,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long, default_value_t = 256)]
    max_new_tokens: usize,
    #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
    backend: BackendKind,
    /// Mock script (mock backend)
    #[arg(long)]
    script: Option<PathBuf>,
    /// Treat the backend as a chat model
    #[arg(long)]
    chat: bool,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    api_key_env: String,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
    /// Also write a report here (format from the extension: .md or .json)
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    index: PathBuf,
    /// Target API names, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    targets: Vec<String>,
    /// Generated code to check
    #[arg(long, conflicts_with = "file")]
    code: Option<String>,
    /// File holding the generated code
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Binding::Auto)]
    binding: Binding,
}

enum Failure {
    Config(anyhow::Error),
    Io(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Io(_) => 2,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Io(e) => e,
        }
    }
}

impl From<IndexError> for Failure {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Io { .. } => Failure::Io(e.into()),
            _ => Failure::Config(e.into()),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        if e.is_io() {
            Failure::Io(e.into())
        } else {
            Failure::Config(e.into())
        }
    }
}

impl From<MineError> for Failure {
    fn from(e: MineError) -> Self {
        match e {
            MineError::Root { .. } => Failure::Io(e.into()),
            MineError::NoFilters => Failure::Config(e.into()),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(anyhow!("{e}"))
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(anyhow!("{}: {e}", path.display()))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| io_err(path, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Io(e.into())),
    }
}

fn index_build(specs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let mut all = Vec::new();
    for path in specs {
        all.extend(load_specs(path)?);
    }
    let index = build_index(all)?;
    index.save(out)?;
    eprintln!(
        "indexed {} documents (aws {}, azure {})",
        index.doc_count(),
        index.provider_count(Provider::Aws),
        index.provider_count(Provider::Azure)
    );
    Ok(())
}

fn run_mine(args: &MineArgs) -> Result<(), Failure> {
    let index = ApiIndex::load(&args.index)?;
    let providers = if args.providers.is_empty() {
        Provider::ALL.to_vec()
    } else {
        args.providers.clone()
    };
    let filters: Vec<ProviderFilter> = providers.into_iter().map(ProviderFilter::builtin).collect();
    let records = mine(&args.corpus, &index, &filters)?;
    write_output(args.out.as_deref(), &records_to_jsonl(&records))
}

fn gateway(args: &RunArgs) -> Result<Gateway, Failure> {
    let retry = RetryPolicy {
        max_retries: args.max_retries,
        ..RetryPolicy::default()
    };
    let backend: Arc<dyn Backend> = match args.backend {
        BackendKind::Mock => {
            let path = args
                .script
                .as_ref()
                .ok_or_else(|| config_err("the mock backend needs --script"))?;
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            Arc::new(MockBackend::from_json(&text).map_err(config_err)?.chat(args.chat))
        }
        BackendKind::Http => {
            let (Some(base_url), Some(model)) = (&args.base_url, &args.model) else {
                return Err(config_err("the http backend needs --base-url and --model"));
            };
            Arc::new(
                HttpBackend::new(HttpConfig {
                    base_url: base_url.clone(),
                    model: model.clone(),
                    chat: args.chat,
                    api_key_env: args.api_key_env.clone(),
                    timeout_secs: 120,
                })
                .map_err(config_err)?,
            )
        }
    };
    Ok(Gateway::new(backend, retry))
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let policy = Policy::from_name(&args.policy, args.threshold).map_err(config_err)?;
    let config = RunConfig {
        policy,
        retriever: RetrieverConfig {
            k: args.k,
            precision_x: args.precision,
            seed: args.seed,
            pin_target_first: args.pin_target_first,
            ..RetrieverConfig::default()
        },
        design: args.design,
        modes: args.binding.selection(),
        parallelism: args.parallelism,
        max_new_tokens: args.max_new_tokens,
    };
    config.retriever.validate().map_err(config_err)?;
    let index = ApiIndex::load(&args.index)?;
    let tasks = load_tasks(&args.tasks, &index)?;
    let gateway = gateway(args)?;

    let file = File::create(&args.out).map_err(|e| io_err(&args.out, e))?;
    let mut writer = BufWriter::new(file);
    let mut traces = Vec::with_capacity(tasks.len());
    run_benchmark_streaming(&tasks, &index, &gateway, &config, &WordCounter, &mut |t| {
        writer.write_all(trace_to_line(t).as_bytes())?;
        writer.flush()?;
        traces.push(t.clone());
        Ok(())
    })?;
    drop(writer);
    write_meta(
        &args.out,
        &RunMeta {
            config: config.echo(),
            task_count: tasks.len(),
        },
    )?;

    let report = aggregate(&traces, &tasks, Some(config.echo()));
    let errored = report.overall.errored;
    eprintln!(
        "{} tasks, {} errored, valid {:.2}%, retrieval triggered {:.2}%",
        report.overall.task_count, errored, report.overall.valid_pct, report.overall.retrieval_triggered_pct
    );
    if let Some(path) = &args.report {
        let format = if path.extension().is_some_and(|e| e == "json") {
            ReportFormat::Json
        } else {
            ReportFormat::Markdown
        };
        write_output(Some(path), &emit_report(&report, format))?;
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Result<(), Failure> {
    let index = ApiIndex::load(&args.index)?;
    let tasks = load_tasks(&args.tasks, &index)?;
    let traces = read_traces(&args.results)?;
    let config = match read_meta(&args.results) {
        Ok(meta) => Some(meta.config),
        Err(e) => {
            log::warn!("no run metadata: {e}");
            None
        }
    };
    let report = aggregate(&traces, &tasks, config);
    write_output(args.out.as_deref(), &emit_report(&report, args.format))
}

fn validate_cmd(args: &ValidateArgs) -> Result<(), Failure> {
    let index = ApiIndex::load(&args.index)?;
    let code = match (&args.code, &args.file) {
        (Some(c), _) => c.clone(),
        (None, Some(path)) => std::fs::read_to_string(path).map_err(|e| io_err(path, e))?,
        (None, None) => return Err(config_err("pass --code or --file")),
    };
    let call = extract_first_call(&code);
    let verdict = validate(call.as_ref(), &args.targets, &index, args.binding.selection()).map_err(config_err)?;
    let text = serde_json::to_string_pretty(&verdict).expect("verdict serializes");
    write_output(None, &(text + "\n"))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Index {
            command: IndexCommand::Build { specs, out },
        } => index_build(&specs, &out),
        Command::Mine(args) => run_mine(&args),
        Command::Run(args) => run(&args),
        Command::Report(args) => report(&args),
        Command::Validate(args) => validate_cmd(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
