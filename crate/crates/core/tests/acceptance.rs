//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use txanomaly::campaign::{replay, run_campaign, Budget, CampaignConfig, CampaignSummary, Target};
use txanomaly::catalog::load_builtin_catalog;
use txanomaly::constraints::{extract_data_access, extract_schedule, extract_stmt_type, OpHandle};
use txanomaly::detector::{BugReport, Phase};
use txanomaly::engine::{Engine, FaultSwitch};
use txanomaly::executor::{DbAdapter, Submission};
use txanomaly::pattern::{validate, AnomalyPattern, IsolationLevel, OpKind, PatternOp};

use IsolationLevel::*;

const CATALOG_BUDGET: Duration = Duration::from_secs(1);
const FAULT_BUDGET: Duration = Duration::from_secs(60);
const FAULT_CASES: u64 = 100;
const ORACLE_CASES: u64 = 1000;
const ORACLE_BUDGET: Duration = Duration::from_secs(600);
const REPLAY_BUDGET: Duration = Duration::from_secs(5);
const GRAPH_TRACES: u64 = 200;
const GRAPH_MAX_OPS: usize = 6;
const GRAPH_BUDGET: Duration = Duration::from_secs(30);
const LIVENESS_SUBMISSIONS: usize = 10_000;
const LIVENESS_SESSIONS: usize = 4;
const LIVENESS_BUDGET: Duration = Duration::from_secs(60);
const SEED: u64 = 20_240_601;

struct Outcome {
    ok: bool,
    detail: String,
}

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

fn timed(budget: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    let took = t.elapsed();
    if took > budget {
        o.ok = false;
        o.detail = format!("{}; took {took:.1?}, budget {budget:?}", o.detail);
    } else {
        o.detail = format!("{} ({took:.1?})", o.detail);
    }
    o
}

// 1. catalog

fn catalog_fidelity() -> Outcome {
    let cat = load_builtin_catalog();
    let invalid: Vec<&str> = cat
        .patterns()
        .iter()
        .filter(|p| validate(p).is_err())
        .map(|p| p.id.as_str())
        .collect();
    let set = |ls: &[IsolationLevel]| ls.iter().copied().collect::<BTreeSet<_>>();
    let spots = [
        ("lost-update", set(&[RepeatableRead, Serializable])),
        ("ext-36", set(&[Serializable])),
        ("ext-5", set(&IsolationLevel::ALL)),
    ];
    let bad_spots: Vec<&str> = spots
        .iter()
        .filter(|(id, want)| cat[*id].disallowed != *want)
        .map(|(id, _)| *id)
        .collect();
    check(
        cat.len() == 46 && invalid.is_empty() && bad_spots.is_empty(),
        format!(
            "{} patterns, invalid {invalid:?}, wrong levels {bad_spots:?}",
            cat.len()
        ),
    )
}

// 2. constraint extraction

/// Rebuilds the op sequence from the three constraint families alone.
fn reconstruct(p: &AnomalyPattern) -> Vec<PatternOp> {
    let counts: BTreeMap<u32, _> = extract_stmt_type(p)
        .into_iter()
        .map(|c| (c.txn, c))
        .collect();
    let access = extract_data_access(p);
    let mut pos: BTreeMap<u32, usize> = BTreeMap::new();
    extract_schedule(p)
        .seq
        .iter()
        .map(|&txn| {
            let n = pos.entry(txn).or_default();
            *n += 1;
            match access.entries.get(&OpHandle {
                txn,
                intra_index: *n,
            }) {
                Some(a) if a.kind == OpKind::Read => PatternOp::read(txn, &a.var, a.version),
                Some(a) => PatternOp::write(txn, &a.var, a.version),
                None if counts[&txn].commits == 1 => PatternOp::commit(txn),
                None => PatternOp::abort(txn),
            }
        })
        .collect()
}

fn constraint_extraction() -> Outcome {
    let cat = load_builtin_catalog();
    let lu = &cat["lost-update"];
    let sched = extract_schedule(lu).seq;
    let t2 = extract_stmt_type(lu)
        .into_iter()
        .find(|c| c.txn == 2)
        .unwrap();
    let t2_tuple = (t2.reads, t2.writes, t2.rollbacks, t2.commits);
    let broken: Vec<&str> = cat
        .patterns()
        .iter()
        .filter(|p| reconstruct(p) != p.ops)
        .map(|p| p.id.as_str())
        .collect();
    check(
        sched == [1, 2, 2, 1, 1] && t2_tuple == (0, 1, 0, 1) && broken.is_empty(),
        format!(
            "schedule {sched:?}, txn 2 (R,W,B,C) = {t2_tuple:?}, not reconstructible {broken:?}"
        ),
    )
}

// 3. injected faults

/// Patterns that realize the anomaly each fault lets through.
fn family(f: FaultSwitch) -> (IsolationLevel, Vec<&'static str>) {
    match f {
        FaultSwitch::AllowDirtyRead => (
            ReadCommitted,
            vec!["dirty-read", "ext-1", "ext-3", "ext-11", "ext-18"],
        ),
        FaultSwitch::AllowDirtyWrite => (
            ReadUncommitted,
            vec!["dirty-write", "ext-4", "ext-5", "ext-6", "ext-7"],
        ),
        FaultSwitch::AllowLostUpdate => (RepeatableRead, vec!["lost-update", "ext-30"]),
        FaultSwitch::AllowNonRepeatableRead => {
            (RepeatableRead, vec!["non-repeatable-read", "ext-27"])
        }
        FaultSwitch::SnapshotSeesLaterCommits => {
            (RepeatableRead, vec!["ext-2", "non-repeatable-read"])
        }
        FaultSwitch::AllowWriteSkew | FaultSwitch::SerializableAsSnapshot => (
            Serializable,
            vec!["write-skew", "ext-37", "ext-38", "ext-39", "ext-40"],
        ),
    }
}

fn campaign(
    levels: &[IsolationLevel],
    faults: &[FaultSwitch],
    cases: u64,
    seed: u64,
) -> CampaignSummary {
    let cfg = CampaignConfig {
        target: Target::Engine(faults.iter().copied().collect()),
        levels: levels.to_vec(),
        budget: Budget::Cases(cases),
        seed,
        ..CampaignConfig::default()
    };
    run_campaign(&cfg, &load_builtin_catalog()).expect("campaign runs")
}

/// Text that must come out the same on a rerun.
fn fingerprint(s: &CampaignSummary) -> String {
    format!(
        "{}{}",
        s.render(),
        serde_json::to_string(&s.unique).unwrap()
    )
}

fn fault_detection(f: FaultSwitch, prints: &mut Vec<String>) -> Outcome {
    let (level, fam) = family(f);
    let s = campaign(&[level], &[f], FAULT_CASES, SEED);
    prints.push(fingerprint(&s));
    let hits: Vec<&String> = s
        .bugs_by_pattern
        .keys()
        .filter(|p| fam.contains(&p.as_str()))
        .collect();
    check(
        !hits.is_empty(),
        format!(
            "{f} @ {level}: {} implicit reports, in family {hits:?}",
            s.implicit_bugs
        ),
    )
}

// 4. false positives

fn no_false_positives(prints: &mut Vec<String>) -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for level in [ReadCommitted, RepeatableRead, Serializable] {
        let s = campaign(&[level], &[], ORACLE_CASES, SEED);
        prints.push(fingerprint(&s));
        ok &= s.implicit_bugs == 0 && s.explicit_bugs == 0 && s.executed == ORACLE_CASES;
        details.push(format!(
            "{level}: {} executed, {} checked, {} implicit, {} explicit",
            s.executed, s.checked, s.implicit_bugs, s.explicit_bugs
        ));
    }
    check(ok, details.join("; "))
}

// 5. case studies

fn case_studies(prints: &mut Vec<String>) -> Vec<(String, Outcome)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let studies = [
        (
            "lost_update.sql",
            FaultSwitch::AllowLostUpdate,
            RepeatableRead,
            "lost-update",
        ),
        (
            "dirty_read.sql",
            FaultSwitch::AllowDirtyRead,
            ReadCommitted,
            "dirty-read",
        ),
        (
            "consistent_snapshot.sql",
            FaultSwitch::SnapshotSeesLaterCommits,
            RepeatableRead,
            "ext-2",
        ),
        (
            "auto_increment.sql",
            FaultSwitch::SerializableAsSnapshot,
            Serializable,
            "ext-36",
        ),
    ];
    let cat = load_builtin_catalog();
    let ids = |r: &[BugReport]| -> Vec<String> {
        r.iter()
            .map(|b| format!("{:?}:{}", b.phase, b.pattern_id.as_deref().unwrap_or("-")))
            .collect()
    };
    studies
        .into_iter()
        .map(|(file, fault, level, want)| {
            let o = timed(REPLAY_BUDGET, || {
                let path = dir.join(file);
                let (trace, with) =
                    replay(&path, &Target::Engine([fault].into()), None, &cat).unwrap();
                let (_, without) =
                    replay(&path, &Target::Engine(Default::default()), None, &cat).unwrap();
                prints.push(serde_json::to_string(&with).unwrap());
                let ok = trace.case.isolation == level
                    && with.len() == 1
                    && with[0].phase == Phase::Implicit
                    && with[0].pattern_id.as_deref() == Some(want)
                    && without.is_empty();
                check(
                    ok,
                    format!(
                        "{fault} @ {level}: {:?}; faults off: {:?}",
                        ids(&with),
                        ids(&without)
                    ),
                )
            });
            (file.to_string(), o)
        })
        .collect()
}

// 6. dependency graph

fn graph_oracle(prints: &mut Vec<String>) -> Outcome {
    let mut mismatched = Vec::new();
    let mut edges = 0;
    for i in 0..GRAPH_TRACES {
        let trace = common::random_trace(SEED + i, GRAPH_MAX_OPS);
        let got = common::graph_edges(&trace);
        if got != common::oracle_edges(&trace) {
            mismatched.push(i);
        }
        edges += got.len();
        prints.push(format!("{got:?}"));
    }
    check(
        mismatched.is_empty(),
        format!("{GRAPH_TRACES} traces, {edges} edges, mismatched traces {mismatched:?}"),
    )
}

// 8. engine liveness

fn liveness() -> Outcome {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(SEED);
    let mut e = Engine::new();
    let setup = e.open();
    e.execute(setup, "CREATE TABLE t (ID INT, c0 INT)").unwrap();
    e.execute(setup, "INSERT INTO t(c0) VALUES (0), (0), (0), (0)")
        .unwrap();
    let sessions: Vec<_> = (0..LIVENESS_SESSIONS).map(|_| e.open()).collect();
    let levels = [
        "READ UNCOMMITTED",
        "READ COMMITTED",
        "REPEATABLE READ",
        "SERIALIZABLE",
    ];
    let (mut blocked, mut resolved, mut deadlocks) = (0usize, 0usize, 0usize);
    let mut waiting = vec![false; sessions.len()];
    let harvest =
        |e: &mut Engine, waiting: &mut Vec<bool>, resolved: &mut usize, deadlocks: &mut usize| {
            for (i, &s) in sessions.iter().enumerate() {
                if waiting[i] {
                    if let Some(r) = e.poll(s, Duration::ZERO) {
                        waiting[i] = false;
                        *resolved += 1;
                        if matches!(&r, Err(err) if err.code == 1213) {
                            *deadlocks += 1;
                        }
                    }
                }
            }
        };
    for _ in 0..LIVENESS_SUBMISSIONS {
        let i = rng.gen_range(0..sessions.len());
        if waiting[i] {
            continue;
        }
        let id = rng.gen_range(1..=3);
        let sql = match rng.gen_range(0..10) {
            0 => format!(
                "SET SESSION TRANSACTION ISOLATION LEVEL {}",
                levels[rng.gen_range(0..4)]
            ),
            1 => "BEGIN".to_string(),
            2 => format!("SELECT * FROM t WHERE ID = {id}"),
            3 => "SELECT * FROM t".to_string(),
            4 | 5 => format!("UPDATE t SET c0 = c0 + 1 WHERE ID = {id}"),
            6 => "INSERT INTO t(c0) VALUES (1)".to_string(),
            7 => format!("DELETE FROM t WHERE ID = {id}"),
            8 => "COMMIT".to_string(),
            _ => "ROLLBACK".to_string(),
        };
        if let Submission::Pending = e.submit(sessions[i], &sql) {
            blocked += 1;
            waiting[i] = true;
        }
        harvest(&mut e, &mut waiting, &mut resolved, &mut deadlocks);
    }
    // end every open transaction; waiters must all come free
    for _ in 0..sessions.len() {
        for (i, &s) in sessions.iter().enumerate() {
            if !waiting[i] {
                e.execute(s, "ROLLBACK").unwrap();
            }
        }
        harvest(&mut e, &mut waiting, &mut resolved, &mut deadlocks);
    }
    let chains = e.check_version_chains();
    check(
        blocked == resolved && waiting.iter().all(|w| !w) && chains.is_ok(),
        format!(
            "{LIVENESS_SUBMISSIONS} submissions, {blocked} blocked, {resolved} resolved ({deadlocks} deadlock aborts), chains {chains:?}"
        ),
    )
}

fn main() -> ExitCode {
    let mut lines: Vec<(String, Outcome)> = Vec::new();
    let mut first_prints = Vec::new();

    lines.push((
        "1 catalog fidelity".into(),
        timed(CATALOG_BUDGET, catalog_fidelity),
    ));
    lines.push((
        "2 constraint extraction".into(),
        timed(CATALOG_BUDGET, constraint_extraction),
    ));

    let run_3_to_6 = |prints: &mut Vec<String>| -> Vec<(String, Outcome)> {
        let mut out = Vec::new();
        for f in FaultSwitch::ALL {
            out.push((
                format!("3 injected fault {f}"),
                timed(FAULT_BUDGET, || fault_detection(f, prints)),
            ));
        }
        out.push((
            "4 zero false positives".into(),
            timed(ORACLE_BUDGET, || no_false_positives(prints)),
        ));
        for (name, o) in case_studies(prints) {
            out.push((format!("5 case study {name}"), o));
        }
        out.push((
            "6 dependency graph oracle".into(),
            timed(GRAPH_BUDGET, || graph_oracle(prints)),
        ));
        out
    };
    lines.extend(run_3_to_6(&mut first_prints));

    let mut second_prints = Vec::new();
    let _ = run_3_to_6(&mut second_prints);
    let same = first_prints == second_prints;
    lines.push((
        "7 determinism".into(),
        check(
            same,
            format!("{} summaries and report sets compared", first_prints.len()),
        ),
    ));

    lines.push(("8 engine liveness".into(), timed(LIVENESS_BUDGET, liveness)));

    let mut failed = 0;
    for (name, o) in &lines {
        println!(
            "{} criterion {name}: {}",
            if o.ok { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += !o.ok as usize;
    }
    println!(
        "{} of {} criteria passed",
        lines.len() - failed,
        lines.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
