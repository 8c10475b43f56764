use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use txanomaly::campaign::{
    parse_config_file, parse_fault_list, parse_level_list, parse_pattern_list, parse_target,
    replay, run_campaign, Budget, CampaignConfig, Target,
};
use txanomaly::catalog::{format_catalog, load_builtin_catalog, parse_catalog, Catalog};
use txanomaly::detector::{detect_checked, BugReport};
use txanomaly::executor::{
    classify_message, derive_outcomes, read_trace_jsonl, ExecutionTrace, Status, TxnOutcome,
};
use txanomaly::pattern::{validate, IsolationLevel};
use txanomaly::txn_gen::{parse_reproducer, TransactionCase};

#[derive(Parser)]
#[command(
    version,
    about = "Anomaly-pattern-guided transaction isolation testing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, run and check test cases until the budget is spent.
    Campaign(CampaignArgs),
    /// Run a reproducer file and check its trace.
    Replay(ReplayArgs),
    /// List or validate anomaly patterns.
    Catalog(CatalogArgs),
    /// Check a saved trace file.
    Check(CheckArgs),
}

#[derive(Args)]
struct TargetArgs {
    /// `engine` or `external:<endpoint>`.
    #[arg(long)]
    target: Option<String>,
    /// Engine faults to switch on, comma separated (e.g. allow-dirty-read).
    #[arg(long)]
    faults: Option<String>,
}

#[derive(Args)]
struct CampaignArgs {
    #[command(flatten)]
    target: TargetArgs,
    /// rc, rr, ser, ru or all; comma separated.
    #[arg(long)]
    isolation: Option<String>,
    /// Pattern ids, comma separated, or `all`.
    #[arg(long)]
    patterns: Option<String>,
    #[arg(long, conflicts_with = "duration")]
    cases: Option<u64>,
    /// Budget in seconds.
    #[arg(long)]
    duration: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Extra patterns in catalog file format.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// key=value file with defaults for the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    file: PathBuf,
    #[command(flatten)]
    target: TargetArgs,
    /// Check at this level instead of the file's.
    #[arg(long)]
    isolation: Option<String>,
}

#[derive(Args)]
struct CatalogArgs {
    /// Validate and list this catalog file instead of the built-in one.
    file: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Trace in JSON lines, one record per line.
    trace: PathBuf,
    #[arg(long)]
    isolation: String,
    /// Reproducer the trace came from, attached to the reports.
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long, default_value = "unknown")]
    backend: String,
}

type Fallible<T> = Result<T, String>;

fn read(path: &Path) -> Fallible<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn one_level(s: &str) -> Fallible<IsolationLevel> {
    match parse_level_list(s)?.as_slice() {
        [l] => Ok(*l),
        _ => Err(format!("expected a single isolation level, got `{s}`")),
    }
}

fn target_of(t: &TargetArgs, file: &BTreeMap<String, String>) -> Fallible<Target> {
    let faults = t
        .faults
        .clone()
        .or_else(|| file.get("faults").cloned())
        .unwrap_or_default();
    let target = t
        .target
        .clone()
        .or_else(|| file.get("target").cloned())
        .unwrap_or_else(|| "engine".into());
    parse_target(&target, parse_fault_list(&faults)?)
}

fn campaign_config(a: &CampaignArgs) -> Fallible<CampaignConfig> {
    let file = match &a.config {
        Some(p) => parse_config_file(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?,
        None => BTreeMap::new(),
    };
    let get = |flag: Option<String>, key: &str| flag.or_else(|| file.get(key).cloned());
    let num = |flag: Option<u64>, key: &str| -> Fallible<Option<u64>> {
        match flag {
            Some(n) => Ok(Some(n)),
            None => file
                .get(key)
                .map(|v| v.parse().map_err(|_| format!("{key}: not a number: `{v}`")))
                .transpose(),
        }
    };
    let mut cfg = CampaignConfig {
        target: target_of(&a.target, &file)?,
        ..CampaignConfig::default()
    };
    if let Some(l) = get(a.isolation.clone(), "isolation") {
        cfg.levels = parse_level_list(&l)?;
    }
    if let Some(p) = get(a.patterns.clone(), "patterns") {
        cfg.patterns = parse_pattern_list(&p);
    }
    cfg.budget = match (num(a.cases, "cases")?, num(a.duration, "duration")?) {
        (Some(n), _) => Budget::Cases(n),
        (None, Some(s)) => Budget::Duration(Duration::from_secs(s)),
        (None, None) => cfg.budget,
    };
    if let Some(s) = num(a.seed, "seed")? {
        cfg.seed = s;
    }
    if let Some(w) = num(a.workers.map(|w| w as u64), "workers")? {
        cfg.workers = w as usize;
    }
    cfg.out = a.out.clone().or_else(|| file.get("out").map(PathBuf::from));
    for (key, slot) in [
        ("max-tables", &mut cfg.gen.max_tables),
        ("min-rows", &mut cfg.gen.min_rows),
        ("max-rows", &mut cfg.gen.max_rows),
        ("pool-size", &mut cfg.gen.pool_size),
    ] {
        if let Some(n) = num(None, key)? {
            *slot = n as usize;
        }
    }
    if let Some(ms) = num(None, "block-timeout-ms")? {
        cfg.block_timeout = Some(Duration::from_millis(ms));
    }
    if let Some(s) = num(None, "case-timeout")? {
        cfg.case_timeout = Duration::from_secs(s);
    }
    Ok(cfg)
}

fn print_reports(reports: &[BugReport]) {
    for r in reports {
        println!("{}", r.summary());
    }
}

fn bugs_exit(found: bool) -> ExitCode {
    ExitCode::from(found as u8)
}

fn run(cli: Cli) -> Fallible<ExitCode> {
    match cli.command {
        Command::Campaign(a) => {
            let cfg = campaign_config(&a)?;
            let mut catalog = load_builtin_catalog();
            if let Some(p) = &a.catalog {
                catalog
                    .extend(parse_catalog(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?)
                    .map_err(|e| e.to_string())?;
            }
            let summary = run_campaign(&cfg, &catalog).map_err(|e| e.to_string())?;
            print!("{}", summary.render());
            eprintln!("wall time: {:.1}s", summary.wall_time.as_secs_f64());
            Ok(bugs_exit(summary.total_bugs() > 0))
        }
        Command::Replay(a) => {
            let target = target_of(&a.target, &BTreeMap::new())?;
            let level = a.isolation.as_deref().map(one_level).transpose()?;
            let (trace, reports) = replay(&a.file, &target, level, &load_builtin_catalog())
                .map_err(|e| e.to_string())?;
            for r in &trace.records {
                println!(
                    "{:>3} T{} {:?} {} {:?}",
                    r.global_seq, r.txn, r.op_kind, r.stmt_text, r.status
                );
            }
            print_reports(&reports);
            Ok(bugs_exit(!reports.is_empty()))
        }
        Command::Catalog(a) => {
            let catalog: Catalog = match &a.file {
                Some(p) => parse_catalog(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?,
                None => load_builtin_catalog(),
            };
            for p in catalog.patterns() {
                validate(p).map_err(|e| format!("{}: {e}", p.id))?;
            }
            print!("{}", format_catalog(&catalog));
            eprintln!("{} patterns, all valid", catalog.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Check(a) => {
            let level = one_level(&a.isolation)?;
            let records = read_trace_jsonl(&read(&a.trace)?)
                .map_err(|e| format!("{}: {e}", a.trace.display()))?;
            let case = match &a.case {
                Some(p) => {
                    parse_reproducer(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?
                }
                None => TransactionCase {
                    schema: None,
                    init_sql: Vec::new(),
                    isolation: level,
                    schedule: Vec::new(),
                    pattern_id: None,
                    seed: 0,
                },
            };
            let mut final_outcomes = derive_outcomes(&records);
            for r in &records {
                final_outcomes
                    .entry(r.txn)
                    .or_insert(TxnOutcome::Undetermined);
            }
            let terminal_message = records.iter().find_map(|r| match &r.status {
                Status::Error { message, .. } if classify_message(message).is_terminal() => {
                    Some(message.clone())
                }
                _ => None,
            });
            let trace = ExecutionTrace {
                case,
                records,
                final_outcomes,
                terminal_message,
                timed_out: false,
                degraded: false,
            };
            let reports = detect_checked(&trace, level, &load_builtin_catalog(), &a.backend)
                .map_err(|e| format!("{}: {e}", a.trace.display()))?;
            print_reports(&reports);
            Ok(bugs_exit(!reports.is_empty()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
