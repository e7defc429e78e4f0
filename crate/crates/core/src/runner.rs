//! Run plans: (model × case × repetition × scale factor) matrices executed
//! offline or against live APIs, producing episode logs and metric records.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{run_agent, stage_breakdown, AgentConfig, AgentTrace, Outcome, Stage};
use crate::costmodel::{compose_ledger, EnginePricing, PricingConfig, PricingEntry, Usd};
use crate::engine::{build_database_file, open_session, EngineConfig};
use crate::llmclient::{
    BackendKind, ChatExchange, HttpBackend, HttpConfig, LlmBackend, LlmError, Message, ReplayBackend,
    TokenUsage, ToolSchema,
};
use crate::metrics::MetricRecord;
use crate::resultset::{column_precision, containment_indicator, tables_equal_exact, CompareOptions, Tolerance};
use crate::suite::{format_scale_factor, load_or_materialize, load_suite, GoldenEntry, QueryCase};

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("plan {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("plan validation failed:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
    #[error("suite: {0}")]
    Suite(#[from] crate::suite::SuiteError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PlanError + '_ {
    move |source| PlanError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    #[serde(flatten)]
    pub http: HttpConfig,
    /// Token-bucket limit on requests per minute; unlimited when absent.
    #[serde(default)]
    pub requests_per_minute: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    /// Scripted dialogues, one `<case_id>.jsonl` file per case.
    Replay {
        model_id: String,
        scripts_dir: PathBuf,
        #[serde(default = "yes")]
        check_fingerprints: bool,
        #[serde(default = "yes")]
        simulate_latency: bool,
    },
    HttpApi(HttpBackendConfig),
}

fn yes() -> bool {
    true
}

impl BackendConfig {
    pub fn model_id(&self) -> &str {
        match self {
            BackendConfig::Replay { model_id, .. } => model_id,
            BackendConfig::HttpApi(c) => &c.http.model_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PricingSource {
    File(PathBuf),
    Inline(PricingConfig),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    /// Use an existing database for every case instead of the suite's data
    /// directories.
    #[serde(default)]
    pub connection: Option<String>,
    #[serde(default)]
    pub max_rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub suite: PathBuf,
    pub backends: Vec<BackendConfig>,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_scale_factors")]
    pub scale_factors: Vec<f64>,
    #[serde(default)]
    pub engine: EngineSettings,
    pub pricing: PricingSource,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop starting episodes once spend reaches this many dollars.
    #[serde(default)]
    pub max_spend_usd: Option<f64>,
    #[serde(default)]
    pub agent: AgentConfig,
    /// Defaults to `<output_dir>/goldens`.
    #[serde(default)]
    pub golden_cache: Option<PathBuf>,
    #[serde(default)]
    pub refresh_goldens: bool,
}

fn default_repetitions() -> u32 {
    1
}

fn default_scale_factors() -> Vec<f64> {
    vec![1.0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_concurrency() -> usize {
    4
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunPlan {
    pub fn from_json_str(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads a plan file; relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, PlanError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut plan = Self::from_json_str(&text).map_err(|reason| PlanError::Parse {
            path: path.display().to_string(),
            reason,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        plan.resolve_paths(base);
        Ok(plan)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.suite);
        resolve(base, &mut self.output_dir);
        if let Some(g) = &mut self.golden_cache {
            resolve(base, g);
        }
        if let PricingSource::File(p) = &mut self.pricing {
            resolve(base, p);
        }
        for b in &mut self.backends {
            if let BackendConfig::Replay { scripts_dir, .. } = b {
                resolve(base, scripts_dir);
            }
        }
    }

    pub fn golden_dir(&self) -> PathBuf {
        self.golden_cache
            .clone()
            .unwrap_or_else(|| self.output_dir.join("goldens"))
    }

    pub fn load_pricing(&self) -> Result<PricingConfig, String> {
        match &self.pricing {
            PricingSource::File(p) => PricingConfig::load(p).map_err(|e| e.to_string()),
            PricingSource::Inline(c) => {
                let text = serde_json::to_string(c).unwrap();
                PricingConfig::from_json_str(&text).map_err(|e| e.to_string())
            }
        }
    }

    /// Pre-flight checks, run before anything is spent. Collects every
    /// problem instead of stopping at the first.
    pub fn validate(&self) -> Result<PricingConfig, PlanError> {
        let mut problems = Vec::new();
        if self.repetitions == 0 {
            problems.push("repetitions must be at least 1".to_string());
        }
        if self.scale_factors.is_empty() {
            problems.push("scale_factors must not be empty".into());
        }
        for sf in &self.scale_factors {
            if !(sf.is_finite() && *sf > 0.0) {
                problems.push(format!("scale factor {sf} must be positive"));
            }
        }
        if self.concurrency == 0 {
            problems.push("concurrency must be at least 1".into());
        }
        if self.backends.is_empty() {
            problems.push("no backends configured".into());
        }
        if let Some(m) = self.max_spend_usd {
            if !(m.is_finite() && m >= 0.0) {
                problems.push(format!("max_spend_usd {m} must be a non-negative number"));
            }
        }
        if let Err(e) = self.agent.validate() {
            problems.push(format!("agent: {e}"));
        }
        let manifest = crate::suite::manifest_path(&self.suite);
        if !manifest.is_file() {
            problems.push(format!("suite manifest {} not found", manifest.display()));
        }
        let mut ids = HashSet::new();
        let pricing = match self.load_pricing() {
            Ok(p) => Some(p),
            Err(e) => {
                problems.push(format!("pricing: {e}"));
                None
            }
        };
        for b in &self.backends {
            let id = b.model_id();
            if !ids.insert(id.to_string()) {
                problems.push(format!("model {id} configured twice"));
            }
            if let Some(p) = &pricing {
                if p.lookup(id).is_err() {
                    problems.push(format!("model {id} has no pricing entry"));
                }
            }
            match b {
                BackendConfig::Replay { scripts_dir, .. } => {
                    if !scripts_dir.is_dir() {
                        problems.push(format!("model {id}: scripts directory {} not found", scripts_dir.display()));
                    }
                }
                BackendConfig::HttpApi(c) => {
                    if let Some(var) = &c.http.api_key_env {
                        if std::env::var(var).is_err() {
                            problems.push(format!("model {id}: environment variable {var} is not set"));
                        }
                    }
                    if let Some(r) = c.requests_per_minute {
                        if !(r.is_finite() && r > 0.0) {
                            problems.push(format!("model {id}: requests_per_minute must be positive"));
                        }
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(pricing.expect("pricing loaded when there are no problems"))
        } else {
            Err(PlanError::Invalid(problems))
        }
    }
}

/// Refill-on-demand token bucket shared by every episode of one backend.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn per_minute(rate: f64) -> Self {
        let capacity = rate.max(1.0).min(60.0);
        TokenBucket {
            capacity,
            per_second: rate / 60.0,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap();
                let now = Instant::now();
                let refill = now.duration_since(s.1).as_secs_f64() * self.per_second;
                s.0 = (s.0 + refill).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.per_second
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

struct Shared {
    inner: Arc<dyn LlmBackend>,
    bucket: Option<Arc<TokenBucket>>,
}

impl LlmBackend for Shared {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn supports_tools(&self) -> bool {
        self.inner.supports_tools()
    }

    fn complete(&self, messages: &[Message], tools: &[ToolSchema]) -> Result<ChatExchange, LlmError> {
        if let Some(b) = &self.bucket {
            b.acquire();
        }
        self.inner.complete(messages, tools)
    }
}

enum BackendFactory {
    Replay {
        model_id: String,
        scripts_dir: PathBuf,
        check_fingerprints: bool,
        simulate_latency: bool,
    },
    Http {
        backend: Arc<dyn LlmBackend>,
        bucket: Option<Arc<TokenBucket>>,
    },
}

impl BackendFactory {
    fn new(config: &BackendConfig) -> Result<Self, LlmError> {
        Ok(match config {
            BackendConfig::Replay {
                model_id,
                scripts_dir,
                check_fingerprints,
                simulate_latency,
            } => BackendFactory::Replay {
                model_id: model_id.clone(),
                scripts_dir: scripts_dir.clone(),
                check_fingerprints: *check_fingerprints,
                simulate_latency: *simulate_latency,
            },
            BackendConfig::HttpApi(c) => BackendFactory::Http {
                backend: Arc::new(HttpBackend::new(c.http.clone())?),
                bucket: c.requests_per_minute.map(|r| Arc::new(TokenBucket::per_minute(r))),
            },
        })
    }

    /// A backend for one episode. Replay scripts restart for every episode.
    fn for_case(&self, case_id: &str) -> Result<Box<dyn LlmBackend>, LlmError> {
        match self {
            BackendFactory::Replay {
                model_id,
                scripts_dir,
                check_fingerprints,
                simulate_latency,
            } => {
                let mut b = ReplayBackend::load(model_id, &scripts_dir.join(format!("{case_id}.jsonl")))?;
                if !check_fingerprints {
                    b = b.lenient();
                }
                if !simulate_latency {
                    b = b.without_latency();
                }
                Ok(Box::new(b))
            }
            BackendFactory::Http { backend, bucket } => Ok(Box::new(Shared {
                inner: backend.clone(),
                bucket: bucket.clone(),
            })),
        }
    }
}

/// One episode's outcome as written to `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub model_id: String,
    pub case_id: String,
    pub scale_factor: f64,
    pub repetition: u32,
    pub outcome: Outcome,
    #[serde(default)]
    pub error: Option<String>,
    pub golden_sql: String,
    #[serde(default)]
    pub generated_sql: Option<String>,
    pub metric: MetricRecord,
    /// Wall-clock seconds per stage; sums to `metric.t_e2e`.
    pub stage_seconds: BTreeMap<Stage, f64>,
    pub stage_cost: BTreeMap<Stage, Usd>,
    pub cost: Usd,
    pub usage: TokenUsage,
    #[serde(default)]
    pub retries: u32,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub episode_log: Option<PathBuf>,
}

impl EpisodeRecord {
    fn sort_key(&self) -> (String, u64, String, u32) {
        (
            self.model_id.clone(),
            self.scale_factor.to_bits(),
            self.case_id.clone(),
            self.repetition,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedEpisode {
    pub model_id: String,
    pub case_id: String,
    pub scale_factor: f64,
    pub repetition: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnusableCase {
    pub case_id: String,
    pub scale_factor: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub records: usize,
    pub skipped: Vec<SkippedEpisode>,
    pub unusable: Vec<UnusableCase>,
    pub spend: Usd,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<EpisodeRecord>,
    pub summary: RunSummary,
    pub output_dir: PathBuf,
}

impl RunOutcome {
    /// 0 when every planned episode produced a record.
    pub fn exit_code(&self) -> i32 {
        if self.summary.skipped.is_empty() && self.summary.unusable.is_empty() {
            0
        } else {
            1
        }
    }
}

struct PreparedCase {
    case: QueryCase,
    scale_factor: f64,
    connection: String,
    golden: GoldenEntry,
}

struct Job {
    backend: usize,
    case: usize,
    repetition: u32,
}

fn sf_label(sf: f64) -> String {
    format!("sf{}", format_scale_factor(sf))
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn prepare_cases(plan: &RunPlan) -> Result<(Vec<PreparedCase>, Vec<UnusableCase>), PlanError> {
    let mut prepared = Vec::new();
    let mut unusable = Vec::new();
    let engine_dir = plan.output_dir.join("engine");
    let golden_dir = plan.golden_dir();
    let mut built: HashMap<PathBuf, Result<String, String>> = HashMap::new();
    for &sf in &plan.scale_factors {
        let suite = load_suite(&plan.suite, Some(sf))?;
        for f in suite.failures {
            log::warn!("case {} unusable at {}: {}", f.case_id, sf_label(sf), f.reason);
            unusable.push(UnusableCase {
                case_id: f.case_id,
                scale_factor: sf,
                reason: f.reason,
            });
        }
        for case in suite.cases {
            let data_dir = database_dir_for(&suite.root, &case.database, sf);
            let connection = match &plan.engine.connection {
                Some(c) => Ok(c.clone()),
                None => built
                    .entry(data_dir.clone())
                    .or_insert_with(|| {
                        fs::create_dir_all(&engine_dir).map_err(|e| e.to_string())?;
                        let file = engine_dir.join(format!("{}@{}.sqlite", safe_name(&case.database), sf_label(sf)));
                        build_database_file(&data_dir, &file).map_err(|e| e.to_string())?;
                        Ok(format!("sqlite:{}", file.display()))
                    })
                    .clone(),
            };
            let golden = connection.and_then(|conn| {
                let engine = open_session(&EngineConfig::External {
                    connection: conn.clone(),
                    max_rows: plan.engine.max_rows,
                })
                .map_err(|e| e.to_string())?;
                load_or_materialize(&case, &engine, &golden_dir, Some(sf), plan.refresh_goldens)
                    .map(|g| (conn, g))
                    .map_err(|e| e.to_string())
            });
            match golden {
                Ok((connection, golden)) => prepared.push(PreparedCase {
                    case,
                    scale_factor: sf,
                    connection,
                    golden,
                }),
                Err(reason) => {
                    log::warn!("case {} unusable at {}: {reason}", case.case_id, sf_label(sf));
                    unusable.push(UnusableCase {
                        case_id: case.case_id,
                        scale_factor: sf,
                        reason,
                    });
                }
            }
        }
    }
    Ok((prepared, unusable))
}

fn database_dir_for(root: &Path, db: &str, sf: f64) -> PathBuf {
    crate::suite::database_dir(root, db, Some(sf))
}

/// Builds the metric record and cost ledger for a finished episode.
pub fn score_episode(
    trace: &AgentTrace,
    golden: &GoldenEntry,
    ordered: bool,
    tolerance: Tolerance,
    run_id: u32,
    pricing: &PricingEntry,
    engine_pricing: &EnginePricing,
) -> Result<(MetricRecord, crate::costmodel::CostLedger), String> {
    let ledger = compose_ledger(trace, pricing, engine_pricing).map_err(|e| e.to_string())?;
    let opts = CompareOptions { tolerance, ordered };
    let (indicator, exact, precision) = match &trace.final_result {
        Some(generated) => (
            containment_indicator(&golden.result, generated, &opts),
            tables_equal_exact(&golden.result, generated, &opts) as u8,
            column_precision(&golden.result, generated).unwrap_or(0.0),
        ),
        None => (0, 0, 0.0),
    };
    let t_e2e = trace.e2e_seconds();
    let t_gen = trace.t_gen().unwrap_or(0.0).min(t_e2e);
    let metric = MetricRecord {
        case_id: golden.case_id.clone(),
        run_id,
        indicator,
        exact_indicator: exact,
        precision,
        t_gold: golden.t_gold.max(1e-9),
        t_gen,
        t_e2e,
        c_e2e: ledger.total.as_dollars(),
        valid: indicator == 1,
    };
    Ok((metric, ledger))
}

struct Context<'a> {
    plan: &'a RunPlan,
    pricing: &'a PricingConfig,
    factories: &'a [BackendFactory],
    cases: &'a [PreparedCase],
    episodes_dir: PathBuf,
}

fn failed_record(ctx: &Context, job: &Job, outcome: Outcome, error: String, secs: f64) -> EpisodeRecord {
    let case = &ctx.cases[job.case];
    let model_id = ctx.plan.backends[job.backend].model_id().to_string();
    EpisodeRecord {
        model_id,
        case_id: case.case.case_id.clone(),
        scale_factor: case.scale_factor,
        repetition: job.repetition,
        outcome,
        error: Some(error),
        golden_sql: case.case.golden_sql.clone(),
        generated_sql: None,
        metric: MetricRecord {
            case_id: case.case.case_id.clone(),
            run_id: job.repetition,
            indicator: 0,
            exact_indicator: 0,
            precision: 0.0,
            t_gold: case.golden.t_gold.max(1e-9),
            t_gen: 0.0,
            t_e2e: secs,
            c_e2e: 0.0,
            valid: false,
        },
        stage_seconds: Stage::ALL.iter().map(|s| (*s, if *s == Stage::Finalize { secs } else { 0.0 })).collect(),
        stage_cost: Stage::ALL.iter().map(|s| (*s, Usd::ZERO)).collect(),
        cost: Usd::ZERO,
        usage: TokenUsage::default(),
        retries: 0,
        warnings: Vec::new(),
        episode_log: None,
    }
}

fn run_episode(ctx: &Context, job: &Job) -> EpisodeRecord {
    let started = Instant::now();
    let prepared = &ctx.cases[job.case];
    let case = &prepared.case;
    let model_id = ctx.plan.backends[job.backend].model_id();
    let llm = match ctx.factories[job.backend].for_case(&case.case_id) {
        Ok(b) => b,
        Err(e) => {
            return failed_record(ctx, job, Outcome::LlmError, e.to_string(), started.elapsed().as_secs_f64())
        }
    };
    let engine = match open_session(&EngineConfig::External {
        connection: prepared.connection.clone(),
        max_rows: ctx.plan.engine.max_rows,
    }) {
        Ok(e) => e,
        Err(e) => {
            return failed_record(ctx, job, Outcome::ToolError, e.to_string(), started.elapsed().as_secs_f64())
        }
    };
    let trace = run_agent(&case.prompt(), &ctx.plan.agent, llm.as_ref(), &engine);
    let pricing = ctx.pricing.lookup(model_id).expect("validated");
    let (metric, ledger) = match score_episode(
        &trace,
        &prepared.golden,
        case.ordered,
        Tolerance::default(),
        job.repetition,
        pricing,
        &ctx.pricing.engine,
    ) {
        Ok(x) => x,
        Err(e) => return failed_record(ctx, job, trace.outcome, e, trace.e2e_seconds()),
    };

    let log_path = ctx
        .episodes_dir
        .join(safe_name(model_id))
        .join(sf_label(prepared.scale_factor))
        .join(format!("{}-r{}.jsonl", safe_name(&case.case_id), job.repetition));
    let mut warnings = trace.warnings.clone();
    if let Err(e) = fs::create_dir_all(log_path.parent().unwrap()).and_then(|_| fs::write(&log_path, trace.to_jsonl())) {
        warnings.push(format!("episode log not written: {e}"));
    }
    let breakdown = stage_breakdown(&trace);
    let retries = trace.iterations.iter().map(|i| i.retries).sum();
    EpisodeRecord {
        model_id: model_id.to_string(),
        case_id: case.case_id.clone(),
        scale_factor: prepared.scale_factor,
        repetition: job.repetition,
        outcome: trace.outcome,
        error: trace.error.clone(),
        golden_sql: case.golden_sql.clone(),
        generated_sql: trace.final_sql.clone(),
        metric,
        stage_seconds: breakdown.stages.iter().map(|s| (s.stage, s.seconds)).collect(),
        stage_cost: ledger.stages.iter().map(|s| (s.stage, s.total())).collect(),
        cost: ledger.total,
        usage: trace.usage_total,
        retries,
        warnings,
        episode_log: Some(log_path),
    }
}

/// Runs the whole matrix. Validation happens first; nothing is spent if it
/// fails.
pub fn execute_plan(plan: &RunPlan) -> Result<RunOutcome, PlanError> {
    let wall = Instant::now();
    let pricing = plan.validate()?;
    fs::create_dir_all(&plan.output_dir).map_err(io_err(&plan.output_dir))?;
    let factories = plan
        .backends
        .iter()
        .map(BackendFactory::new)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| PlanError::Invalid(vec![e.to_string()]))?;
    let (cases, unusable) = prepare_cases(plan)?;

    let mut jobs = Vec::new();
    for backend in 0..plan.backends.len() {
        for case in 0..cases.len() {
            for repetition in 0..plan.repetitions {
                jobs.push(Job {
                    backend,
                    case,
                    repetition,
                });
            }
        }
    }
    jobs.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));

    let ctx = Context {
        plan,
        pricing: &pricing,
        factories: &factories,
        cases: &cases,
        episodes_dir: plan.output_dir.join("episodes"),
    };
    let budget = plan.max_spend_usd.map(Usd::from_dollars);
    let spent = AtomicU64::new(0);
    let next = AtomicUsize::new(0);
    let records = Mutex::new(Vec::with_capacity(jobs.len()));
    let skipped = Mutex::new(Vec::new());
    let workers = plan.concurrency.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                if let Some(limit) = budget {
                    if spent.load(Ordering::SeqCst) >= limit.picos() {
                        let case = &cases[job.case];
                        skipped.lock().unwrap().push(SkippedEpisode {
                            model_id: plan.backends[job.backend].model_id().to_string(),
                            case_id: case.case.case_id.clone(),
                            scale_factor: case.scale_factor,
                            repetition: job.repetition,
                            reason: format!("budget of {limit} reached"),
                        });
                        continue;
                    }
                }
                let record = run_episode(&ctx, job);
                spent.fetch_add(record.cost.picos(), Ordering::SeqCst);
                log::info!(
                    "{} {} {} r{}: {} (EX {})",
                    record.model_id,
                    record.case_id,
                    sf_label(record.scale_factor),
                    record.repetition,
                    record.outcome,
                    record.metric.indicator
                );
                records.lock().unwrap().push(record);
            });
        }
    });

    let mut records = records.into_inner().unwrap();
    records.sort_by_key(EpisodeRecord::sort_key);
    let mut skipped = skipped.into_inner().unwrap();
    skipped.sort_by(|a, b| (&a.model_id, &a.case_id, a.repetition).cmp(&(&b.model_id, &b.case_id, b.repetition)));
    write_records(&plan.output_dir.join("records.jsonl"), &records)?;
    let summary = RunSummary {
        records: records.len(),
        skipped,
        unusable,
        spend: Usd::from_picos(spent.into_inner()),
        wall_seconds: wall.elapsed().as_secs_f64(),
    };
    let summary_path = plan.output_dir.join("run_summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).unwrap()).map_err(io_err(&summary_path))?;
    Ok(RunOutcome {
        records,
        summary,
        output_dir: plan.output_dir.clone(),
    })
}

pub fn write_records(path: &Path, records: &[EpisodeRecord]) -> Result<(), PlanError> {
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r).unwrap()).map_err(io_err(path))?;
    }
    file.flush().map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<EpisodeRecord>, PlanError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PlanError::Parse {
                path: path.display().to_string(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan_json(extra: &str) -> String {
        format!(
            r#"{{
                "suite": "suite",
                "backends": [{{"kind": "replay", "model_id": "m", "scripts_dir": "scripts"}}],
                "pricing": {{"models": [{{"id": "m", "input_per_mtok": 1.0, "output_per_mtok": 2.0}}]}}
                {extra}
            }}"#
        )
    }

    #[test]
    fn defaults_and_path_resolution() {
        let mut plan = RunPlan::from_json_str(&plan_json("")).unwrap();
        assert_eq!(plan.repetitions, 1);
        assert_eq!(plan.concurrency, 4);
        assert_eq!(plan.scale_factors, [1.0]);
        plan.resolve_paths(Path::new("/base"));
        assert_eq!(plan.suite, PathBuf::from("/base/suite"));
        assert_eq!(plan.golden_dir(), PathBuf::from("/base/out/goldens"));
        match &plan.backends[0] {
            BackendConfig::Replay { scripts_dir, check_fingerprints, .. } => {
                assert_eq!(scripts_dir, &PathBuf::from("/base/scripts"));
                assert!(*check_fingerprints);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_collects_problems() {
        let mut plan = RunPlan::from_json_str(&plan_json(
            r#", "repetitions": 0, "scale_factors": [], "concurrency": 0"#,
        ))
        .unwrap();
        plan.backends.push(BackendConfig::Replay {
            model_id: "unpriced".into(),
            scripts_dir: "nope".into(),
            check_fingerprints: true,
            simulate_latency: true,
        });
        let Err(PlanError::Invalid(problems)) = plan.validate() else {
            panic!("expected validation failure")
        };
        let text = problems.join("\n");
        for needle in ["repetitions", "scale_factors", "concurrency", "unpriced has no pricing", "suite manifest"] {
            assert!(text.contains(needle), "missing {needle:?} in\n{text}");
        }
    }

    #[test]
    fn http_backend_needs_its_key() {
        let json = r#"{"kind": "http-api", "model_id": "x", "endpoint": "http://localhost:1",
                       "api_key_env": "BIGSQL_TEST_UNSET_KEY_VAR", "requests_per_minute": 30}"#;
        let b: BackendConfig = serde_json::from_str(json).unwrap();
        assert_eq!(b.model_id(), "x");
        let mut plan = RunPlan::from_json_str(&plan_json("")).unwrap();
        plan.backends = vec![b];
        let Err(PlanError::Invalid(problems)) = plan.validate() else {
            panic!()
        };
        assert!(problems.iter().any(|p| p.contains("BIGSQL_TEST_UNSET_KEY_VAR")));
    }

    #[test]
    fn token_bucket_paces_requests() {
        let bucket = TokenBucket::per_minute(600.0);
        let start = Instant::now();
        for _ in 0..12 {
            bucket.acquire();
        }
        assert!(start.elapsed() < Duration::from_secs(1));
        let slow = TokenBucket::per_minute(1200.0);
        {
            let mut s = slow.state.lock().unwrap();
            s.0 = 0.0;
        }
        let start = Instant::now();
        slow.acquire();
        assert!(start.elapsed() >= Duration::from_millis(40));
    }
}
