//! Testing campaigns: generate, execute and check cases in a loop, and
//! replay saved reproducers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::detector::{detect_checked, triage, BugReport, Phase, Triage};
use crate::engine::{Engine, FaultSet};
use crate::executor::{
    install_recording, run_schedule, write_trace_jsonl, AdapterError, DbAdapter, ExecOptions,
    ExecutionTrace, FailureClass,
};
use crate::pattern::IsolationLevel;
use crate::schema_gen::GenConfig;
use crate::txn_gen::{
    generate_case, parse_reproducer, write_reproducer, ReproError, TransactionCase,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Engine(FaultSet),
    External(String),
}

impl Target {
    /// A fresh connection to the target.
    pub fn connect(&self) -> Result<Box<dyn DbAdapter>, AdapterError> {
        match self {
            Target::Engine(faults) => Ok(Box::new(Engine::with_faults(faults.iter().copied()))),
            // no driver for a remote server is built into this crate
            Target::External(endpoint) => Err(AdapterError::TargetUnreachable(endpoint.clone())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Cases(u64),
    Duration(Duration),
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub target: Target,
    pub levels: Vec<IsolationLevel>,
    /// Pattern ids to test; empty means every pattern the level forbids.
    pub patterns: Vec<String>,
    pub budget: Budget,
    pub seed: u64,
    pub gen: GenConfig,
    /// Overrides the target's default block timeout.
    pub block_timeout: Option<Duration>,
    pub case_timeout: Duration,
    pub out: Option<PathBuf>,
    pub workers: usize,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            target: Target::Engine(FaultSet::new()),
            levels: vec![IsolationLevel::RepeatableRead],
            patterns: Vec::new(),
            budget: Budget::Cases(100),
            seed: 0,
            gen: GenConfig::default(),
            block_timeout: None,
            case_timeout: Duration::from_secs(30),
            out: None,
            workers: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("no pattern selected for any isolation level")]
    NothingSelected,
    #[error("unknown pattern `{0}`")]
    UnknownPattern(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Reproducer { path: PathBuf, source: ReproError },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub generated: u64,
    pub generation_failures: u64,
    pub executed: u64,
    /// Runs ended by a terminal error, by class. Crashes and assertion
    /// failures are counted here and reported as explicit bugs.
    pub discarded: BTreeMap<FailureClass, u64>,
    /// Runs handed to pattern matching.
    pub checked: u64,
    pub timed_out: u64,
    pub corrupt: u64,
    pub degraded: u64,
    pub explicit_bugs: u64,
    pub implicit_bugs: u64,
    pub bugs_by_pattern: BTreeMap<String, u64>,
    pub unique: Vec<BugReport>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl CampaignSummary {
    pub fn total_bugs(&self) -> u64 {
        self.explicit_bugs + self.implicit_bugs
    }

    /// Plain-text rendering. Wall time is left out so that equal runs render
    /// equal text.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cases generated:      {}", self.generated);
        let _ = writeln!(s, "generation failures:  {}", self.generation_failures);
        let _ = writeln!(s, "cases executed:       {}", self.executed);
        let _ = writeln!(s, "cases checked:        {}", self.checked);
        for (class, n) in &self.discarded {
            let _ = writeln!(s, "discarded {:<11} {n}", format!("{class}:"));
        }
        let _ = writeln!(s, "timed out:            {}", self.timed_out);
        let _ = writeln!(s, "corrupt traces:       {}", self.corrupt);
        let _ = writeln!(s, "degraded runs:        {}", self.degraded);
        let _ = writeln!(s, "explicit bugs:        {}", self.explicit_bugs);
        let _ = writeln!(s, "implicit bugs:        {}", self.implicit_bugs);
        for (p, n) in &self.bugs_by_pattern {
            let _ = writeln!(s, "  {p}: {n}");
        }
        let _ = writeln!(s, "unique bugs:          {}", self.unique.len());
        for r in &self.unique {
            let _ = writeln!(s, "  {}", r.summary());
        }
        s
    }
}

/// Keeps the first report per (phase, pattern, level, backend, failure class).
pub fn dedup(reports: &[BugReport]) -> Vec<BugReport> {
    let mut seen = BTreeSet::new();
    reports
        .iter()
        .filter(|r| {
            seen.insert((
                r.phase,
                r.pattern_id.clone(),
                r.level,
                r.backend.clone(),
                r.failure,
            ))
        })
        .cloned()
        .collect()
}

/// The (level, pattern) pairs a campaign cycles through, in order.
pub fn plan(
    cfg: &CampaignConfig,
    catalog: &Catalog,
) -> Result<Vec<(IsolationLevel, String)>, CampaignError> {
    for id in &cfg.patterns {
        if catalog.get(id).is_none() {
            return Err(CampaignError::UnknownPattern(id.clone()));
        }
    }
    let mut pairs = Vec::new();
    for &level in &cfg.levels {
        for p in catalog.disallowed_at(level) {
            if cfg.patterns.is_empty() || cfg.patterns.contains(&p.id) {
                pairs.push((level, p.id.clone()));
            }
        }
    }
    if pairs.is_empty() {
        return Err(CampaignError::NothingSelected);
    }
    Ok(pairs)
}

fn case_seed(seed: u64, index: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15)).gen()
}

fn exec_options(cfg: &CampaignConfig, adapter: &dyn DbAdapter) -> ExecOptions {
    ExecOptions {
        block_timeout: cfg
            .block_timeout
            .unwrap_or_else(|| adapter.default_block_timeout()),
        case_timeout: cfg.case_timeout,
    }
}

/// Runs one case on a fresh connection. Targets without trigger support
/// still run, with the trace marked degraded.
pub fn execute_case(
    case: &TransactionCase,
    target: &Target,
    cfg: &CampaignConfig,
) -> Result<ExecutionTrace, AdapterError> {
    let mut adapter = target.connect()?;
    let opts = exec_options(cfg, adapter.as_ref());
    execute_on(case, adapter.as_mut(), opts)
}

pub fn execute_on(
    case: &TransactionCase,
    adapter: &mut dyn DbAdapter,
    opts: ExecOptions,
) -> Result<ExecutionTrace, AdapterError> {
    let (Some(schema), None) = (&case.schema, adapter.native_event_log()) else {
        return run_schedule(case, adapter, opts);
    };
    // triggers go on after the tables exist and before the schedule starts
    let setup = TransactionCase {
        schedule: Vec::new(),
        ..case.clone()
    };
    let init = run_schedule(&setup, adapter, opts)?;
    if init.terminal_message.is_some() {
        return Ok(ExecutionTrace {
            case: case.clone(),
            ..init
        });
    }
    let degraded = match install_recording(adapter, schema) {
        Ok(()) => false,
        Err(AdapterError::TriggerUnsupported(_)) => true,
        Err(e) => return Err(e),
    };
    let body = TransactionCase {
        init_sql: Vec::new(),
        ..case.clone()
    };
    let mut trace = run_schedule(&body, adapter, opts)?;
    trace.case = case.clone();
    trace.degraded = degraded;
    Ok(trace)
}

#[derive(Debug)]
enum CaseOutcome {
    GenFailed,
    Ran {
        trace: Box<ExecutionTrace>,
        verdict: Verdict,
    },
}

#[derive(Debug)]
enum Verdict {
    Discarded(FailureClass, Vec<BugReport>),
    Checked(Vec<BugReport>),
    Corrupt,
}

fn backend_name(target: &Target) -> String {
    match target {
        Target::Engine(f) => Engine::with_faults(f.iter().copied()).backend(),
        Target::External(e) => format!("external:{e}"),
    }
}

fn check(
    trace: &ExecutionTrace,
    level: IsolationLevel,
    catalog: &Catalog,
    backend: &str,
) -> Verdict {
    match triage(trace) {
        Triage::Discard(c) => Verdict::Discarded(c, Vec::new()),
        Triage::Bug(c, _) => Verdict::Discarded(
            c,
            detect_checked(trace, level, catalog, backend).unwrap_or_default(),
        ),
        Triage::Check => match detect_checked(trace, level, catalog, backend) {
            Ok(r) => Verdict::Checked(r),
            Err(_) => Verdict::Corrupt,
        },
    }
}

struct Sink {
    dir: Option<PathBuf>,
    error: Option<CampaignError>,
}

impl Sink {
    fn save(&mut self, index: u64, trace: &ExecutionTrace, reports: &[BugReport]) {
        let Some(dir) = &self.dir else { return };
        if reports.is_empty() || self.error.is_some() {
            return;
        }
        let tag = reports[0]
            .pattern_id
            .clone()
            .or_else(|| {
                reports[0]
                    .failure
                    .map(|f| f.to_string().to_ascii_lowercase())
            })
            .unwrap_or_default();
        let stem = dir
            .join("bugs")
            .join(format!("case-{index:06}-{}-{tag}", reports[0].level));
        let files = [
            ("sql", write_reproducer(&trace.case)),
            (
                "json",
                serde_json::to_string_pretty(reports).expect("reports serialize"),
            ),
            ("trace.jsonl", write_trace_jsonl(&trace.records)),
        ];
        for (ext, body) in files {
            let path = stem.with_extension(ext);
            if let Err(e) = fs::write(&path, body) {
                self.error = Some(CampaignError::Io { path, source: e });
                return;
            }
        }
    }
}

/// Runs a campaign against `catalog`. Cases are numbered from 0; case `i`
/// tests the `i`-th (level, pattern) pair in round-robin order with a seed
/// derived from the campaign seed and `i`, so a case-count campaign on the
/// engine is reproducible whatever the worker count.
pub fn run_campaign(
    cfg: &CampaignConfig,
    catalog: &Catalog,
) -> Result<CampaignSummary, CampaignError> {
    let started = Instant::now();
    let pairs = plan(cfg, catalog)?;
    // fail early on an unreachable target
    drop(cfg.target.connect()?);
    let backend = backend_name(&cfg.target);
    if let Some(dir) = &cfg.out {
        let bugs = dir.join("bugs");
        fs::create_dir_all(&bugs).map_err(io_err(&bugs))?;
    }

    let next = AtomicU64::new(0);
    let sink = Mutex::new(Sink {
        dir: cfg.out.clone(),
        error: None,
    });
    let fatal: Mutex<Option<AdapterError>> = Mutex::new(None);
    let results: Mutex<Vec<(u64, IsolationLevel, CaseOutcome)>> = Mutex::new(Vec::new());

    let worker = || loop {
        if fatal.lock().unwrap().is_some() {
            return;
        }
        let index = match cfg.budget {
            Budget::Cases(n) => {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    return;
                }
                i
            }
            Budget::Duration(d) => {
                if started.elapsed() >= d {
                    return;
                }
                next.fetch_add(1, Ordering::SeqCst)
            }
        };
        let (level, id) = &pairs[(index % pairs.len() as u64) as usize];
        let outcome = match generate_case(
            &catalog[id.as_str()],
            *level,
            &cfg.gen,
            case_seed(cfg.seed, index),
        ) {
            Err(_) => CaseOutcome::GenFailed,
            Ok(case) => match execute_case(&case, &cfg.target, cfg) {
                Err(e) => {
                    *fatal.lock().unwrap() = Some(e);
                    return;
                }
                Ok(trace) => {
                    let verdict = check(&trace, *level, catalog, &backend);
                    if let Verdict::Discarded(_, r) | Verdict::Checked(r) = &verdict {
                        sink.lock().unwrap().save(index, &trace, r);
                    }
                    CaseOutcome::Ran {
                        trace: Box::new(trace),
                        verdict,
                    }
                }
            },
        };
        results.lock().unwrap().push((index, *level, outcome));
    };

    std::thread::scope(|s| {
        for _ in 0..cfg.workers.max(1) {
            s.spawn(worker);
        }
    });
    if let Some(e) = fatal.into_inner().unwrap() {
        return Err(e.into());
    }
    if let Some(e) = sink.into_inner().unwrap().error {
        return Err(e);
    }
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _, _)| *i);

    let mut sum = CampaignSummary::default();
    let mut all = Vec::new();
    for (_, _, outcome) in results {
        sum.generated += 1;
        let (trace, verdict) = match outcome {
            CaseOutcome::GenFailed => {
                sum.generation_failures += 1;
                continue;
            }
            CaseOutcome::Ran { trace, verdict } => (trace, verdict),
        };
        sum.executed += 1;
        sum.timed_out += trace.timed_out as u64;
        sum.degraded += trace.degraded as u64;
        let reports = match verdict {
            Verdict::Discarded(c, r) => {
                *sum.discarded.entry(c).or_default() += 1;
                r
            }
            Verdict::Checked(r) => {
                sum.checked += 1;
                r
            }
            Verdict::Corrupt => {
                sum.checked += 1;
                sum.corrupt += 1;
                Vec::new()
            }
        };
        for r in &reports {
            match r.phase {
                Phase::Explicit => sum.explicit_bugs += 1,
                Phase::Implicit => {
                    sum.implicit_bugs += 1;
                    *sum.bugs_by_pattern
                        .entry(r.pattern_id.clone().unwrap_or_default())
                        .or_default() += 1;
                }
            }
        }
        all.extend(reports);
    }
    sum.unique = dedup(&all);
    if let Some(dir) = &cfg.out {
        let path = dir.join("summary.txt");
        fs::write(&path, sum.render()).map_err(io_err(&path))?;
    }
    sum.wall_time = started.elapsed();
    Ok(sum)
}

/// Runs a reproducer file against `target` and checks the trace at the
/// file's isolation level, or at `level` when given.
pub fn replay(
    path: &Path,
    target: &Target,
    level: Option<IsolationLevel>,
    catalog: &Catalog,
) -> Result<(ExecutionTrace, Vec<BugReport>), CampaignError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut case = parse_reproducer(&text).map_err(|source| CampaignError::Reproducer {
        path: path.to_path_buf(),
        source,
    })?;
    if let Some(l) = level {
        case.isolation = l;
    }
    replay_case(&case, target, catalog)
}

pub fn replay_case(
    case: &TransactionCase,
    target: &Target,
    catalog: &Catalog,
) -> Result<(ExecutionTrace, Vec<BugReport>), CampaignError> {
    let cfg = CampaignConfig {
        target: target.clone(),
        ..CampaignConfig::default()
    };
    let trace = execute_case(case, target, &cfg)?;
    let reports = dedup(&crate::detector::detect(
        &trace,
        case.isolation,
        catalog,
        &backend_name(target),
    ));
    Ok((trace, reports))
}

/// `engine` or `external:<endpoint>`.
pub fn parse_target(s: &str, faults: FaultSet) -> Result<Target, String> {
    match s.trim() {
        "engine" => Ok(Target::Engine(faults)),
        t => match t.strip_prefix("external:") {
            Some(ep) if !ep.is_empty() => Ok(Target::External(ep.to_string())),
            _ => Err(format!(
                "unknown target `{t}`; expected `engine` or `external:<endpoint>`"
            )),
        },
    }
}

/// Comma-separated levels; `all` stands for RC, RR and SER.
pub fn parse_level_list(s: &str) -> Result<Vec<IsolationLevel>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part.eq_ignore_ascii_case("all") {
            out.extend([
                IsolationLevel::ReadCommitted,
                IsolationLevel::RepeatableRead,
                IsolationLevel::Serializable,
            ]);
        } else {
            out.push(
                part.parse()
                    .map_err(|e: crate::pattern::UnknownLevel| e.to_string())?,
            );
        }
    }
    out.dedup();
    if out.is_empty() {
        return Err("no isolation level given".into());
    }
    Ok(out)
}

/// Comma-separated pattern ids; `all` (or nothing) selects every pattern.
pub fn parse_pattern_list(s: &str) -> Vec<String> {
    let ids: Vec<String> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(String::from)
        .collect();
    if ids.iter().any(|i| i.eq_ignore_ascii_case("all")) {
        return Vec::new();
    }
    ids
}

pub fn parse_fault_list(s: &str) -> Result<FaultSet, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty() && !p.eq_ignore_ascii_case("none"))
        .map(|p| {
            p.parse()
                .map_err(|e: crate::engine::UnknownFault| e.to_string())
        })
        .collect()
}

/// `key = value` lines; `#` starts a comment. Keys are the long flag names
/// without dashes.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
        out.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}
