//! Reproducers of real-world isolation bugs, replayed on the engine.

use std::path::Path;

use txanomaly::campaign::{replay, Target};
use txanomaly::catalog::load_builtin_catalog;
use txanomaly::engine::{Engine, FaultSwitch};
use txanomaly::executor::{run_schedule, ExecOptions, Status};
use txanomaly::sql::Value;
use txanomaly::txn_gen::parse_reproducer;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn engine(faults: &[FaultSwitch]) -> Target {
    Target::Engine(faults.iter().copied().collect())
}

#[test]
fn lost_update_loses_the_first_withdrawal() {
    let cat = load_builtin_catalog();
    let (trace, reports) = replay(&fixture("lost_update.sql"), &engine(&[]), None, &cat).unwrap();
    assert!(reports.is_empty());
    let update = trace
        .records
        .iter()
        .rev()
        .find(|r| r.stmt_text.starts_with("UPDATE"))
        .unwrap();
    assert!(matches!(
        &update.status,
        Status::Error {
            rolled_back: true,
            ..
        }
    ));

    let (_, reports) = replay(
        &fixture("lost_update.sql"),
        &engine(&[FaultSwitch::AllowLostUpdate]),
        None,
        &cat,
    )
    .unwrap();
    assert_eq!(reports[0].var_binding["x"].to_string(), "t#1");
}

#[test]
fn dirty_read_sees_the_rolled_back_value() {
    let cat = load_builtin_catalog();
    let (trace, _) = replay(
        &fixture("dirty_read.sql"),
        &engine(&[FaultSwitch::AllowDirtyRead]),
        None,
        &cat,
    )
    .unwrap();
    let read = trace
        .records
        .iter()
        .find(|r| r.stmt_text.starts_with("SELECT"))
        .unwrap();
    assert_eq!(read.touched[0].version, 1);
}

#[test]
fn replays_are_deterministic() {
    let cat = load_builtin_catalog();
    for f in [
        "lost_update.sql",
        "dirty_read.sql",
        "consistent_snapshot.sql",
        "auto_increment.sql",
        "seat_booking.sql",
    ] {
        let t = engine(&FaultSwitch::ALL);
        let (_, a) = replay(&fixture(f), &t, None, &cat).unwrap();
        let (_, b) = replay(&fixture(f), &t, None, &cat).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

/// The seat booking bug shows in the final state rather than in a read.
fn seats(faults: &[FaultSwitch]) -> Vec<Value> {
    let case =
        parse_reproducer(&std::fs::read_to_string(fixture("seat_booking.sql")).unwrap()).unwrap();
    let mut e = Engine::with_faults(faults.iter().copied());
    let opts = ExecOptions::for_adapter(&e);
    let trace = run_schedule(&case, &mut e, opts).unwrap();
    assert!(trace.records.iter().all(|r| r.status.is_ok()));
    e.committed_rows("t1")
        .unwrap()
        .into_iter()
        .map(|(_, v)| v[0].clone())
        .collect()
}

#[test]
fn seat_booking_confirms_only_its_own_seat() {
    assert_eq!(seats(&[]), [Value::Int(10), Value::Int(2), Value::Int(3)]);
    assert_eq!(
        seats(&[FaultSwitch::SerializableAsSnapshot]),
        [Value::Int(10), Value::Int(10), Value::Int(3)]
    );
}
