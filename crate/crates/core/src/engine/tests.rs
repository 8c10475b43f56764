use super::*;

fn int(i: i64) -> Value {
    Value::Int(i)
}

fn setup(init: &[&str], faults: &[FaultSwitch]) -> Engine {
    let mut e = Engine::with_faults(faults.iter().copied());
    let s = e.open();
    for sql in init {
        e.execute(s, sql).unwrap();
    }
    e
}

fn sessions(e: &mut Engine, level: IsolationLevel, n: usize) -> Vec<SessionId> {
    (0..n)
        .map(|_| {
            let s = e.open();
            e.execute(s, &Stmt::SetIsolation(level).to_string())
                .unwrap();
            s
        })
        .collect()
}

fn column(e: &Engine, table: &str, col: usize) -> Vec<Value> {
    e.committed_rows(table)
        .unwrap()
        .into_iter()
        .map(|(_, v)| v[col].clone())
        .collect()
}

fn lost_update_case(faults: &[FaultSwitch]) -> (Engine, StmtResult) {
    let mut e = setup(
        &[
            "CREATE TABLE t (ID INT, c0 INT)",
            "INSERT INTO t(ID, c0) VALUES (1, 1000)",
        ],
        faults,
    );
    let s = sessions(&mut e, IsolationLevel::RepeatableRead, 2);
    e.execute(s[0], "START TRANSACTION").unwrap();
    e.execute(s[1], "START TRANSACTION").unwrap();
    let read = e.execute(s[0], "SELECT * FROM t").unwrap();
    assert_eq!(
        read.touched,
        vec![Touched {
            table: "t".into(),
            row_id: 1,
            version: 0,
            write: None
        }]
    );
    e.execute(s[1], "UPDATE t SET c0 = 900 WHERE ID = 1")
        .unwrap();
    e.execute(s[1], "COMMIT").unwrap();
    let w = e.execute(s[0], "UPDATE t SET c0 = 1100 WHERE ID = 1");
    e.execute(s[0], "COMMIT").ok();
    (e, w)
}

#[test]
fn first_committer_wins_at_repeatable_read() {
    let (e, w) = lost_update_case(&[]);
    let err = w.unwrap_err();
    assert_eq!((err.code, err.rolled_back), (1020, true));
    assert_eq!(column(&e, "t", 1), [int(900)]);
    e.check_version_chains().unwrap();
}

#[test]
fn lost_update_fault_overwrites() {
    let (e, w) = lost_update_case(&[FaultSwitch::AllowLostUpdate]);
    assert_eq!(w.unwrap().touched[0].version, 2);
    assert_eq!(column(&e, "t", 1), [int(1100)]);
}

fn dirty_read_case(faults: &[FaultSwitch]) -> StmtOutput {
    let mut e = setup(
        &[
            "CREATE TABLE t (c0 INT PRIMARY KEY)",
            "INSERT INTO t (c0) VALUES (10989748), (-1404643822)",
        ],
        faults,
    );
    let s = sessions(&mut e, IsolationLevel::ReadCommitted, 2);
    e.execute(s[0], "BEGIN").unwrap();
    e.execute(s[1], "BEGIN").unwrap();
    e.execute(s[0], "UPDATE t SET c0 = 0 WHERE c0 = 10989748")
        .unwrap();
    let out = e.execute(s[1], "SELECT * FROM t WHERE (c0 >= 0)").unwrap();
    e.execute(s[0], "ROLLBACK").unwrap();
    e.execute(s[1], "COMMIT").unwrap();
    assert_eq!(column(&e, "t", 0), [int(10989748), int(-1404643822)]);
    out
}

#[test]
fn dirty_read_only_with_fault() {
    assert_eq!(dirty_read_case(&[]).rows, [[int(10989748)]]);
    let out = dirty_read_case(&[FaultSwitch::AllowDirtyRead]);
    assert_eq!(out.rows, [[int(0)]]);
    assert_eq!(out.touched[0].version, 1);
}

fn consistent_snapshot_case(faults: &[FaultSwitch]) -> Vec<Vec<Value>> {
    let mut e = setup(
        &[
            "CREATE TABLE t (ID INT, c0 INT)",
            "INSERT INTO t VALUES (1, 1), (2, 2)",
        ],
        faults,
    );
    let s = sessions(&mut e, IsolationLevel::RepeatableRead, 2);
    e.execute(s[0], "START TRANSACTION WITH CONSISTENT SNAPSHOT")
        .unwrap();
    e.execute(s[1], "START TRANSACTION WITH CONSISTENT SNAPSHOT")
        .unwrap();
    e.execute(s[0], "UPDATE t SET c0 = 10 WHERE (ID = 1)")
        .unwrap();
    e.execute(s[0], "COMMIT").unwrap();
    let rows = e.execute(s[1], "SELECT * FROM t").unwrap().rows;
    e.execute(s[1], "COMMIT").unwrap();
    rows
}

#[test]
fn consistent_snapshot_start() {
    assert_eq!(
        consistent_snapshot_case(&[]),
        [[int(1), int(1)], [int(2), int(2)]]
    );
    assert_eq!(
        consistent_snapshot_case(&[FaultSwitch::SnapshotSeesLaterCommits]),
        [[int(1), int(10)], [int(2), int(2)]]
    );
}

fn auto_increment_case(faults: &[FaultSwitch]) -> Vec<Vec<Value>> {
    let mut e = setup(
        &["CREATE TABLE t (c0 INT PRIMARY KEY AUTO_INCREMENT, c1 INT)"],
        faults,
    );
    let s = sessions(&mut e, IsolationLevel::Serializable, 2);
    e.execute(s[0], "BEGIN").unwrap();
    e.execute(s[1], "BEGIN").unwrap();
    e.execute(s[0], "INSERT INTO t(c1) VALUES(1)").unwrap();
    e.execute(s[1], "INSERT INTO t(c1) VALUES(2), (3)").unwrap();
    e.execute(s[1], "COMMIT").unwrap();
    let rows = e.execute(s[0], "SELECT * FROM t").unwrap().rows;
    e.execute(s[0], "COMMIT").unwrap();
    rows
}

#[test]
fn serializable_sees_only_its_own_insert() {
    assert_eq!(auto_increment_case(&[]), [[int(1), int(1)]]);
    let rows = auto_increment_case(&[FaultSwitch::SerializableAsSnapshot]);
    assert_eq!(rows, [[int(1), int(1)], [int(2), int(2)], [int(3), int(3)]]);
}

fn booking_case(faults: &[FaultSwitch]) -> Vec<Value> {
    let mut e = setup(
        &[
            "CREATE TABLE t1 (c0 INT)",
            "CREATE TABLE t2 (c0 INT PRIMARY KEY AUTO_INCREMENT, c1 INT)",
            "INSERT INTO t1(c0) VALUES (1),(2),(3)",
        ],
        faults,
    );
    let s = sessions(&mut e, IsolationLevel::Serializable, 2);
    e.execute(s[0], "BEGIN").unwrap();
    e.execute(s[1], "BEGIN").unwrap();
    e.execute(s[0], "INSERT INTO t2(c1) VALUES(1)").unwrap();
    e.execute(s[1], "INSERT INTO t2(c1) VALUES(2), (3)")
        .unwrap();
    e.execute(s[1], "COMMIT").unwrap();
    e.execute(s[0], "UPDATE t1 SET c0 = 10 WHERE c0 in (SELECT c1 FROM (SELECT * FROM t2 ORDER BY c0 LIMIT 2) AS t)")
        .unwrap();
    e.execute(s[0], "COMMIT").unwrap();
    column(&e, "t1", 0)
}

#[test]
fn update_with_nested_subquery() {
    assert_eq!(booking_case(&[]), [int(10), int(2), int(3)]);
    assert_eq!(
        booking_case(&[FaultSwitch::SerializableAsSnapshot]),
        [int(10), int(10), int(3)]
    );
}

#[test]
fn blocked_writer_resumes_after_commit() {
    for (level, expect) in [
        (IsolationLevel::ReadCommitted, None),
        (IsolationLevel::RepeatableRead, Some(1020)),
    ] {
        let mut e = setup(
            &[
                "CREATE TABLE t (ID INT, c0 INT)",
                "INSERT INTO t(ID, c0) VALUES (1, 0)",
            ],
            &[],
        );
        let s = sessions(&mut e, level, 2);
        e.execute(s[0], "BEGIN").unwrap();
        e.execute(s[1], "BEGIN").unwrap();
        e.execute(s[1], "SELECT * FROM t").unwrap();
        e.execute(s[0], "UPDATE t SET c0 = c0 + 1 WHERE ID = 1")
            .unwrap();
        assert_eq!(
            e.submit_sql(s[1], "UPDATE t SET c0 = c0 + 10 WHERE ID = 1"),
            Submission::Pending
        );
        assert_eq!(
            e.submit_sql(s[1], "COMMIT").clone(),
            Submission::Done(Err(DbError::new(
                2014,
                "Commands out of sync; you can't run this command now"
            )))
        );
        assert_eq!(e.take_completed(s[1]), None);
        e.execute(s[0], "COMMIT").unwrap();
        let r = e.take_completed(s[1]).unwrap();
        assert_eq!(r.as_ref().err().map(|e| e.code), expect, "{level}");
        e.execute(s[1], "COMMIT").ok();
        let want = if expect.is_none() { 11 } else { 1 };
        assert_eq!(column(&e, "t", 1), [int(want)]);
        let log = e.engine_event_log();
        assert!(log.iter().any(|r| r.status == Status::BlockedThenOk) == expect.is_none());
    }
}

#[test]
fn deadlock_aborts_the_younger_transaction() {
    let mut e = setup(
        &[
            "CREATE TABLE t (ID INT, c0 INT)",
            "INSERT INTO t(ID, c0) VALUES (1, 0), (2, 0)",
        ],
        &[],
    );
    let s = sessions(&mut e, IsolationLevel::RepeatableRead, 2);
    e.execute(s[0], "BEGIN").unwrap();
    e.execute(s[1], "BEGIN").unwrap();
    e.execute(s[0], "UPDATE t SET c0 = 1 WHERE ID = 1").unwrap();
    e.execute(s[1], "UPDATE t SET c0 = 2 WHERE ID = 2").unwrap();
    assert_eq!(
        e.submit_sql(s[0], "UPDATE t SET c0 = 1 WHERE ID = 2"),
        Submission::Pending
    );
    assert_eq!(
        e.submit_sql(s[1], "UPDATE t SET c0 = 2 WHERE ID = 1"),
        Submission::Pending
    );
    let err = e.take_completed(s[1]).unwrap().unwrap_err();
    assert_eq!((err.code, err.rolled_back), (1213, true));
    assert!(e.take_completed(s[0]).unwrap().is_ok());
    assert_eq!(e.execute(s[1], "SELECT * FROM t").unwrap_err().code, 1180);
    assert!(e.execute(s[1], "COMMIT").unwrap_err().rolled_back);
    e.execute(s[0], "COMMIT").unwrap();
    assert_eq!(column(&e, "t", 1), [int(1), int(1)]);
    e.check_version_chains().unwrap();
}

fn write_skew_case(faults: &[FaultSwitch]) -> (Vec<Submission>, Engine, Vec<SessionId>) {
    let mut e = setup(
        &[
            "CREATE TABLE t (ID INT, c0 INT)",
            "INSERT INTO t(ID, c0) VALUES (1, 0), (2, 0)",
        ],
        faults,
    );
    let s = sessions(&mut e, IsolationLevel::Serializable, 2);
    e.execute(s[0], "BEGIN").unwrap();
    e.execute(s[1], "BEGIN").unwrap();
    let subs = vec![
        e.submit_sql(s[0], "SELECT * FROM t WHERE ID = 1"),
        e.submit_sql(s[1], "SELECT * FROM t WHERE ID = 2"),
        e.submit_sql(s[0], "UPDATE t SET c0 = 1 WHERE ID = 2"),
        e.submit_sql(s[1], "UPDATE t SET c0 = 1 WHERE ID = 1"),
    ];
    (subs, e, s)
}

#[test]
fn serializable_read_locks_prevent_write_skew() {
    let (subs, mut e, s) = write_skew_case(&[]);
    assert_eq!(subs[2], Submission::Pending);
    assert_eq!(subs[3], Submission::Pending);
    assert_eq!(e.take_completed(s[1]).unwrap().unwrap_err().code, 1213);
    assert!(e.take_completed(s[0]).unwrap().is_ok());

    for f in [
        FaultSwitch::AllowWriteSkew,
        FaultSwitch::SerializableAsSnapshot,
    ] {
        let (subs, _, _) = write_skew_case(&[f]);
        assert!(
            subs.iter().all(|s| matches!(s, Submission::Done(Ok(_)))),
            "{f}"
        );
    }
}

#[test]
fn full_scan_at_serializable_takes_a_table_lock() {
    let mut e = setup(
        &[
            "CREATE TABLE t (ID INT, c0 INT)",
            "INSERT INTO t(ID, c0) VALUES (1, 0)",
        ],
        &[],
    );
    let s = sessions(&mut e, IsolationLevel::Serializable, 2);
    e.execute(s[0], "BEGIN").unwrap();
    e.execute(s[0], "SELECT * FROM t WHERE c0 = 5").unwrap();
    assert_eq!(
        e.submit_sql(s[1], "INSERT INTO t(c0) VALUES (5)"),
        Submission::Pending
    );
    e.execute(s[0], "COMMIT").unwrap();
    assert_eq!(
        e.take_completed(s[1]).unwrap().unwrap().touched[0].row_id,
        2
    );
}

#[test]
fn dirty_write_fault_lets_writers_overlap() {
    let mut e = setup(
        &[
            "CREATE TABLE t (ID INT, c0 INT)",
            "INSERT INTO t(ID, c0) VALUES (1, 0)",
        ],
        &[FaultSwitch::AllowDirtyWrite],
    );
    let s = sessions(&mut e, IsolationLevel::ReadCommitted, 2);
    e.execute(s[0], "BEGIN").unwrap();
    e.execute(s[1], "BEGIN").unwrap();
    assert_eq!(
        e.execute(s[0], "UPDATE t SET c0 = 1 WHERE ID = 1")
            .unwrap()
            .touched[0]
            .version,
        1
    );
    assert_eq!(
        e.execute(s[1], "UPDATE t SET c0 = 2 WHERE ID = 1")
            .unwrap()
            .touched[0]
            .version,
        2
    );
}

#[test]
fn non_repeatable_read_fault() {
    let mut e = setup(
        &[
            "CREATE TABLE t (ID INT, c0 INT)",
            "INSERT INTO t(ID, c0) VALUES (1, 0)",
        ],
        &[FaultSwitch::AllowNonRepeatableRead],
    );
    let s = sessions(&mut e, IsolationLevel::RepeatableRead, 2);
    e.execute(s[0], "BEGIN").unwrap();
    assert_eq!(
        e.execute(s[0], "SELECT c0 FROM t").unwrap().rows,
        [[int(0)]]
    );
    e.execute(s[1], "UPDATE t SET c0 = 7 WHERE ID = 1").unwrap();
    assert_eq!(
        e.execute(s[0], "SELECT c0 FROM t").unwrap().rows,
        [[int(7)]]
    );
}

#[test]
fn repeatable_read_keeps_its_snapshot() {
    let mut e = setup(
        &[
            "CREATE TABLE t (ID INT, c0 INT)",
            "INSERT INTO t(ID, c0) VALUES (1, 0)",
        ],
        &[],
    );
    let s = sessions(&mut e, IsolationLevel::RepeatableRead, 2);
    e.execute(s[0], "BEGIN").unwrap();
    assert_eq!(
        e.execute(s[0], "SELECT c0 FROM t").unwrap().rows,
        [[int(0)]]
    );
    e.execute(s[1], "UPDATE t SET c0 = 7 WHERE ID = 1").unwrap();
    e.execute(s[1], "INSERT INTO t(c0) VALUES (8)").unwrap();
    assert_eq!(
        e.execute(s[0], "SELECT c0 FROM t").unwrap().rows,
        [[int(0)]]
    );
    e.execute(s[0], "UPDATE t SET c0 = 9 WHERE ID = 2").unwrap();
    assert_eq!(
        e.execute(s[0], "SELECT c0 FROM t").unwrap().rows,
        [[int(0)]]
    );
}

#[test]
fn errors_and_constraints() {
    let mut e = setup(
        &[
            "CREATE TABLE p (c0 INT PRIMARY KEY, c1 TEXT NOT NULL)",
            "CREATE TABLE c (c0 INT REFERENCES p(c0))",
            "INSERT INTO p(c0, c1) VALUES (1, 'a'), (2, 'b')",
            "INSERT INTO c(c0) VALUES (1)",
        ],
        &[],
    );
    let s = e.open();
    let code = |e: &mut Engine, sql: &str| e.execute(s, sql).unwrap_err().code;
    assert_eq!(code(&mut e, "SELECT * FROM nope"), 1146);
    assert_eq!(code(&mut e, "CREATE TABLE p (c0 INT)"), 1050);
    assert_eq!(code(&mut e, "SELECT c9 FROM p"), 1054);
    assert_eq!(code(&mut e, "UPDATE p SET VERS = 3"), 1348);
    assert_eq!(code(&mut e, "INSERT INTO p(c0) VALUES (1, 2)"), 1136);
    assert_eq!(
        code(&mut e, "INSERT INTO p(c0, c1) VALUES ('x', 'y')"),
        1366
    );
    assert_eq!(code(&mut e, "INSERT INTO p(c0, c1) VALUES (1, 'y')"), 1062);
    assert_eq!(code(&mut e, "INSERT INTO p(c0) VALUES (3)"), 1048);
    assert_eq!(code(&mut e, "INSERT INTO c(c0) VALUES (5)"), 1452);
    assert_eq!(code(&mut e, "DELETE FROM p WHERE c0 = 1"), 1451);
    assert_eq!(code(&mut e, "UPDATE p SET c0 = 9 WHERE c0 = 1"), 1451);
    assert_eq!(code(&mut e, "SELEC 1"), 1064);
    assert_eq!(
        code(&mut e, "UPDATE p SET c0 = 9223372036854775807 + c0"),
        1690
    );
    e.execute(s, "DELETE FROM p WHERE c0 = 2").unwrap();
    e.execute(s, "INSERT INTO p(c0, c1, VERS) VALUES (2, 'c', 7)")
        .unwrap();
    let rows = e
        .execute(s, "SELECT ID, VERS, c0 FROM p ORDER BY ID")
        .unwrap()
        .rows;
    assert_eq!(rows, [[int(1), int(0), int(1)], [int(3), int(0), int(2)]]);
    e.check_version_chains().unwrap();
}

#[test]
fn statement_errors_inside_a_transaction() {
    let mut e = setup(
        &[
            "CREATE TABLE t (ID INT, c0 INT UNIQUE)",
            "INSERT INTO t(ID, c0) VALUES (1, 1)",
        ],
        &[],
    );
    let s = e.open();
    e.execute(s, "BEGIN").unwrap();
    e.execute(s, "UPDATE t SET c0 = 2 WHERE ID = 1").unwrap();
    // not fatal: the transaction continues
    assert!(!e.execute(s, "SELECT nope FROM t").unwrap_err().rolled_back);
    e.execute(s, "COMMIT").unwrap();
    assert_eq!(column(&e, "t", 1), [int(2)]);

    e.execute(s, "BEGIN").unwrap();
    e.execute(s, "UPDATE t SET c0 = 3 WHERE ID = 1").unwrap();
    assert!(
        e.execute(s, "INSERT INTO t(c0) VALUES (3)")
            .unwrap_err()
            .rolled_back
    );
    assert_eq!(e.execute(s, "UPDATE t SET c0 = 4").unwrap_err().code, 1180);
    e.execute(s, "ROLLBACK").unwrap();
    assert_eq!(column(&e, "t", 1), [int(2)]);
    e.execute(s, "UPDATE t SET c0 = 4").unwrap();
    assert_eq!(column(&e, "t", 1), [int(4)]);
}

#[test]
fn repeated_writes_by_one_transaction_stay_gapless() {
    let mut e = setup(
        &[
            "CREATE TABLE t (ID INT, c0 INT)",
            "INSERT INTO t(ID, c0) VALUES (1, 0)",
        ],
        &[],
    );
    let s = sessions(&mut e, IsolationLevel::RepeatableRead, 2);
    e.execute(s[0], "BEGIN").unwrap();
    e.execute(s[1], "BEGIN").unwrap();
    e.execute(s[1], "SELECT * FROM t").unwrap();
    e.execute(s[0], "UPDATE t SET c0 = 1 WHERE ID = 1").unwrap();
    let w = e
        .execute(s[0], "UPDATE t SET c0 = c0 + 1 WHERE ID = 1")
        .unwrap();
    assert_eq!(w.touched[0].version, 2);
    assert_eq!(
        e.execute(s[0], "SELECT c0, VERS FROM t").unwrap().rows,
        [[int(2), int(2)]]
    );
    assert_eq!(
        e.execute(s[1], "SELECT c0, VERS FROM t").unwrap().rows,
        [[int(0), int(0)]]
    );
    e.execute(s[0], "COMMIT").unwrap();
    e.check_version_chains().unwrap();
}

#[test]
fn faults_only_change_when_idle() {
    let mut e = setup(&["CREATE TABLE t (c0 INT)"], &[]);
    let s = e.open();
    e.execute(s, "BEGIN").unwrap();
    assert_eq!(
        e.set_fault(FaultSwitch::AllowDirtyRead, true),
        Err(EngineError::EngineBusy)
    );
    e.execute(s, "COMMIT").unwrap();
    e.set_fault(FaultSwitch::AllowDirtyRead, true).unwrap();
    assert!(e.faults().contains(&FaultSwitch::AllowDirtyRead));
    assert_eq!(e.backend(), "engine[ALLOW_DIRTY_READ]");
    assert_eq!(
        "allow-dirty-read".parse::<FaultSwitch>().unwrap(),
        FaultSwitch::AllowDirtyRead
    );
    assert!("nope".parse::<FaultSwitch>().is_err());
}

#[test]
fn event_log_records_every_statement() {
    let mut e = Engine::new();
    assert!(e.engine_event_log().is_empty());
    let s = e.open();
    e.execute(s, "CREATE TABLE t (c0 INT)").unwrap();
    e.execute(s, "INSERT INTO t(c0) VALUES (1)").unwrap();
    e.execute(s, "UPDATE t SET c0 = 2").unwrap();
    let log = e.engine_event_log();
    assert_eq!(log.len(), 3);
    assert_eq!(log[2].op_kind, RecordKind::Write);
    assert_eq!(
        log[2].touched,
        vec![Touched {
            table: "t".into(),
            row_id: 1,
            version: 1,
            write: Some(WriteKind::Update)
        }]
    );
    assert!(log
        .windows(2)
        .all(|w| w[0].timestamp <= w[1].timestamp && w[0].global_seq < w[1].global_seq));
}
