//! Benchmark harness: task files, concurrent runs over the policy pipeline,
//! frequency-stratified aggregation and report rendering.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api_index::{ApiIndex, Provider};
use crate::augmenter::{AugmentationDesign, TokenCounter, WordCounter};
use crate::corpus_miner::{classify_frequency, FrequencyClass};
use crate::gateway::{Gateway, DEFAULT_MAX_NEW_TOKENS};
use crate::invocation::{Category, ModeSelection, Reason};
use crate::policy::{Pipeline, Policy, TaskInput, TaskTrace};
use crate::retriever::{plan_inclusions, Bm25Retriever, RetrieverConfig, RetrieverError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub id: String,
    pub provider: Provider,
    pub prompt: String,
    pub target_apis: Vec<String>,
    pub frequency_count: u64,
    pub frequency_class: FrequencyClass,
}

impl Task {
    pub fn input(&self) -> TaskInput<'_> {
        TaskInput {
            id: &self.id,
            provider: self.provider,
            prompt: &self.prompt,
            target_apis: &self.target_apis,
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("line {line}: target API `{api}` is not in the index")]
    UnknownTarget { line: usize, api: String },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error("writing results: {0}")]
    Sink(#[source] io::Error),
}

impl BenchError {
    pub fn is_io(&self) -> bool {
        matches!(self, BenchError::Io { .. } | BenchError::Sink(_))
    }
}

fn check_task(task: &Task, line: usize, index: &ApiIndex) -> Result<(), BenchError> {
    let bad = |message: String| BenchError::Line { line, message };
    if task.id.is_empty() {
        return Err(bad("empty task id".into()));
    }
    if task.target_apis.is_empty() {
        return Err(bad("target_apis must not be empty".into()));
    }
    let expected = classify_frequency(task.frequency_count);
    if task.frequency_class != expected {
        return Err(bad(format!(
            "frequency_class `{}` does not match frequency_count {} (expected `{}`)",
            task.frequency_class, task.frequency_count, expected
        )));
    }
    if let Some(api) = task.target_apis.iter().find(|t| !index.contains(t)) {
        return Err(BenchError::UnknownTarget {
            line,
            api: api.clone(),
        });
    }
    Ok(())
}

/// Parses JSONL tasks (blank lines skipped) and validates each against the
/// schema and the index. Order is preserved; ids must be unique.
pub fn parse_tasks(text: &str, index: &ApiIndex) -> Result<Vec<Task>, BenchError> {
    let mut tasks = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let task: Task = serde_json::from_str(raw).map_err(|e| BenchError::Line {
            line,
            message: e.to_string(),
        })?;
        check_task(&task, line, index)?;
        if !seen.insert(task.id.clone()) {
            return Err(BenchError::Line {
                line,
                message: format!("duplicate task id `{}`", task.id),
            });
        }
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn load_tasks(path: &Path, index: &ApiIndex) -> Result<Vec<Task>, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_tasks(&text, index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub policy: Policy,
    pub retriever: RetrieverConfig,
    pub design: AugmentationDesign,
    pub modes: ModeSelection,
    /// Tasks in flight at once.
    pub parallelism: usize,
    pub max_new_tokens: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Base,
            retriever: RetrieverConfig::default(),
            design: AugmentationDesign::default(),
            modes: ModeSelection::default(),
            parallelism: 4,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

/// Settings echoed into reports for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub policy: String,
    pub threshold: Option<f64>,
    pub precision_x: f64,
    pub k: usize,
    pub seed: u64,
    pub design: AugmentationDesign,
}

impl RunConfig {
    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            policy: self.policy.name().to_string(),
            threshold: self.policy.threshold(),
            precision_x: self.retriever.precision_x,
            k: self.retriever.k,
            seed: self.retriever.seed,
            design: self.design,
        }
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.parallelism == 0 {
            return Err(BenchError::Config("parallelism must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(BenchError::Config("max_new_tokens must be at least 1".into()));
        }
        self.retriever.validate()?;
        Ok(())
    }
}

/// Runs every task and returns the traces in task order.
pub fn run_benchmark(
    tasks: &[Task],
    index: &ApiIndex,
    gateway: &Gateway,
    config: &RunConfig,
) -> Result<Vec<TaskTrace>, BenchError> {
    let mut traces = Vec::with_capacity(tasks.len());
    run_benchmark_streaming(tasks, index, gateway, config, &WordCounter, &mut |t| {
        traces.push(t.clone());
        Ok(())
    })?;
    Ok(traces)
}

/// Runs tasks on a pool of `config.parallelism` threads, handing finished
/// traces to `sink` in task order, one batch at a time.
pub fn run_benchmark_streaming(
    tasks: &[Task],
    index: &ApiIndex,
    gateway: &Gateway,
    config: &RunConfig,
    counter: &dyn TokenCounter,
    sink: &mut dyn FnMut(&TaskTrace) -> io::Result<()>,
) -> Result<(), BenchError> {
    use rayon::prelude::*;

    config.validate()?;
    let ids: Vec<&str> = tasks.iter().map(|t| t.id.as_str()).collect();
    let plan = plan_inclusions(&ids, config.retriever.precision_x, config.retriever.seed)?;
    let retriever = Bm25Retriever::new(index, config.retriever.bm25());
    let pipeline = Pipeline {
        index,
        retriever: &retriever,
        plan: &plan,
        retriever_config: &config.retriever,
        design: config.design,
        gateway,
        counter,
        modes: config.modes,
        max_new_tokens: config.max_new_tokens,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| BenchError::Config(e.to_string()))?;
    let batch = config.parallelism * 4;
    for chunk in tasks.chunks(batch) {
        let traces: Vec<TaskTrace> = pool.install(|| {
            chunk
                .par_iter()
                .map(|t| pipeline.run_task(&t.input(), &config.policy))
                .collect()
        });
        for t in &traces {
            if let Some(e) = &t.error {
                log::warn!("task {} errored: {e}", t.task_id);
            }
            sink(t).map_err(BenchError::Sink)?;
        }
    }
    Ok(())
}

pub fn trace_to_line(trace: &TaskTrace) -> String {
    serde_json::to_string(trace).expect("trace serializes") + "\n"
}

/// Reads a results JSONL file written by the run command.
pub fn read_traces(path: &Path) -> Result<Vec<TaskTrace>, BenchError> {
    let io_err = |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line_text = line.map_err(io_err)?;
        if line_text.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line_text).map_err(|e| BenchError::Line {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Sidecar file next to the results JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: ConfigEcho,
    pub task_count: usize,
}

pub fn meta_path(results: &Path) -> PathBuf {
    let mut name = results.as_os_str().to_os_string();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn write_meta(results: &Path, meta: &RunMeta) -> Result<(), BenchError> {
    let path = meta_path(results);
    let mut f = std::fs::File::create(&path).map_err(|source| BenchError::Io {
        path: path.clone(),
        source,
    })?;
    let text = serde_json::to_string_pretty(&serde_json::to_value(meta).expect("meta serializes"))
        .expect("meta serializes");
    writeln!(f, "{text}").map_err(|source| BenchError::Io { path, source })
}

pub fn read_meta(results: &Path) -> Result<RunMeta, BenchError> {
    let path = meta_path(results);
    let text = std::fs::read_to_string(&path).map_err(|source| BenchError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub non_existing_api: usize,
    pub incorrect_existing_api: usize,
    pub invalid_usage_of_target: usize,
    pub no_call_found: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub task_count: usize,
    pub errored: usize,
    pub valid: usize,
    pub triggered: usize,
    /// Share of non-errored tasks with a valid invocation.
    pub valid_pct: f64,
    /// Share of non-errored tasks that triggered retrieval.
    pub retrieval_triggered_pct: f64,
    pub taxonomy: Taxonomy,
}

impl ClassReport {
    pub fn scored(&self) -> usize {
        self.task_count - self.errored
    }

    fn add(&mut self, trace: &TaskTrace) {
        self.task_count += 1;
        if trace.is_errored() {
            self.errored += 1;
            return;
        }
        if trace.triggered {
            self.triggered += 1;
        }
        let Some(v) = &trace.verdict else { return };
        if v.valid {
            self.valid += 1;
        }
        match (v.category, v.reason) {
            (Category::NonExistingApi, _) => self.taxonomy.non_existing_api += 1,
            (Category::IncorrectExistingApi, _) => self.taxonomy.incorrect_existing_api += 1,
            (Category::InvalidUsageOfTarget, _) => self.taxonomy.invalid_usage_of_target += 1,
            (Category::None, Reason::NoCallFound) => self.taxonomy.no_call_found += 1,
            (Category::None, _) => {}
        }
    }

    fn finish(&mut self) {
        let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
        self.valid_pct = pct(self.valid, self.scored());
        self.retrieval_triggered_pct = pct(self.triggered, self.scored());
    }

    fn merge(&mut self, other: &ClassReport) {
        self.task_count += other.task_count;
        self.errored += other.errored;
        self.valid += other.valid;
        self.triggered += other.triggered;
        self.taxonomy.non_existing_api += other.taxonomy.non_existing_api;
        self.taxonomy.incorrect_existing_api += other.taxonomy.incorrect_existing_api;
        self.taxonomy.invalid_usage_of_target += other.taxonomy.invalid_usage_of_target;
        self.taxonomy.no_call_found += other.taxonomy.no_call_found;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub classes: BTreeMap<FrequencyClass, ClassReport>,
    /// Pooled over every task, not the mean of the class rates.
    pub overall: ClassReport,
    /// Mean tokens added per augmented prompt.
    pub avg_augmentation_tokens: f64,
    pub config: Option<ConfigEcho>,
}

/// Folds traces into per-class and pooled metrics. Traces whose id is not
/// among `tasks` are skipped with a warning.
pub fn aggregate(traces: &[TaskTrace], tasks: &[Task], config: Option<ConfigEcho>) -> Report {
    let class_of: HashMap<&str, FrequencyClass> =
        tasks.iter().map(|t| (t.id.as_str(), t.frequency_class)).collect();
    let mut classes: BTreeMap<FrequencyClass, ClassReport> =
        FrequencyClass::ALL.iter().map(|c| (*c, ClassReport::default())).collect();
    let mut aug_tokens = 0usize;
    let mut augmented = 0usize;
    for trace in traces {
        let Some(class) = class_of.get(trace.task_id.as_str()) else {
            log::warn!("trace for unknown task `{}` ignored", trace.task_id);
            continue;
        };
        classes.get_mut(class).expect("all classes present").add(trace);
        if trace.triggered && !trace.is_errored() {
            aug_tokens += trace.augmentation_tokens;
            augmented += 1;
        }
    }
    let mut overall = ClassReport::default();
    for c in classes.values_mut() {
        c.finish();
        overall.merge(c);
    }
    overall.finish();
    Report {
        classes,
        overall,
        avg_augmentation_tokens: if augmented == 0 {
            0.0
        } else {
            aug_tokens as f64 / augmented as f64
        },
        config,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

pub const MARKDOWN_COLUMNS: [&str; 9] = [
    "Frequency",
    "Tasks",
    "Errored",
    "Retrieval Triggered (%)",
    "Valid API Invocations (%)",
    "Non-existing API",
    "Incorrect existing API",
    "Invalid usage of target",
    "No call found",
];

fn markdown_row(label: &str, c: &ClassReport) -> String {
    format!(
        "| {label} | {} | {} | {:.2} | {:.2} | {} | {} | {} | {} |\n",
        c.task_count,
        c.errored,
        c.retrieval_triggered_pct,
        c.valid_pct,
        c.taxonomy.non_existing_api,
        c.taxonomy.incorrect_existing_api,
        c.taxonomy.invalid_usage_of_target,
        c.taxonomy.no_call_found
    )
}

/// JSON with sorted keys, or a markdown grid with one row per frequency
/// class plus the pooled average.
pub fn emit_report(report: &Report, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let value = serde_json::to_value(report).expect("report serializes");
            serde_json::to_string_pretty(&value).expect("report serializes") + "\n"
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str(&format!("| {} |\n", MARKDOWN_COLUMNS.join(" | ")));
            out.push_str("|---|");
            out.push_str(&"---:|".repeat(MARKDOWN_COLUMNS.len() - 1));
            out.push('\n');
            for class in FrequencyClass::ALL {
                let mut label = class.label().to_string();
                label[..1].make_ascii_uppercase();
                out.push_str(&markdown_row(&label, &report.classes[&class]));
            }
            out.push_str(&markdown_row("Avg.", &report.overall));
            let _ = writeln!(out, "\nAverage augmentation tokens: {:.2}", report.avg_augmentation_tokens);
            if let Some(c) = &report.config {
                let theta = c.threshold.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
                let _ = writeln!(
                    out,
                    "Config: policy={} threshold={theta} precision={} k={} seed={} design={}",
                    c.policy, c.precision_x, c.k, c.seed, c.design
                );
            }
            out
        }
    }
}
