use std::path::Path;
use std::process::{Command, Output};

use evoharness_vliw::testgen::oracle_kernel;
use evoharness_vliw::BenchmarkInstance;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_evoharness"));
    for var in ["EVO_TASK", "EVO_ROUND", "EVO_EVAL_BUDGET", "EVO_GLOBAL_REMAINING"] {
        c.env_remove(var);
    }
    c
}

fn run(ws: &Path, args: &[&str]) -> Output {
    bin().arg("-w").arg(ws).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn init(dir: &Path, task: &str) -> std::path::PathBuf {
    let ws = dir.join("ws");
    let o = run(&ws, &["init", "--task", task]);
    assert!(o.status.success(), "{}", stderr(&o));
    ws
}

fn eval(program: &Path, db: &Path, task: &str, round: u64, budget: u64, global: u64) -> Output {
    bin()
        .args(["eval", "--program"])
        .arg(program)
        .arg("--db-path")
        .arg(db)
        .env("EVO_TASK", task)
        .env("EVO_ROUND", round.to_string())
        .env("EVO_EVAL_BUDGET", budget.to_string())
        .env("EVO_GLOBAL_REMAINING", global.to_string())
        .output()
        .unwrap()
}

#[test]
fn kernel_report_golden() {
    let dir = tempfile::tempdir().unwrap();
    let kernel = dir.path().join("kernel.asm");
    let text = oracle_kernel(&BenchmarkInstance::official(), 1138).to_string();
    std::fs::write(&kernel, text).unwrap();
    let o = eval(&kernel, &dir.path().join("local.db"), "vliw", 1, 15, 100);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "Status: success");
    assert!(lines.contains(&"Combined Score: 129.8189806678383"), "{out}");
    assert!(lines.contains(&"Validity: 1.0"), "{out}");
    assert!(lines.contains(&"Remaining Evals: 99"), "{out}");
    assert!(lines.contains(&"Session Evals Remaining: 14"), "{out}");
    assert!(lines.iter().any(|l| l.starts_with("Eval Time: ") && l.ends_with('s')));
}

#[test]
fn quota_refusal_exits_4_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let kernel = dir.path().join("kernel.asm");
    std::fs::write(&kernel, "bundle:\n").unwrap();
    let db = dir.path().join("local.db");
    let first = eval(&kernel, &db, "vliw", 3, 1, 1);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("Status: invalid"));
    let before = std::fs::read(&db).unwrap();
    let second = eval(&kernel, &db, "vliw", 3, 1, 1);
    assert_eq!(second.status.code(), Some(4));
    assert!(stderr(&second).contains("Remaining Evals: 0"), "{}", stderr(&second));
    assert_eq!(std::fs::read(&db).unwrap(), before);
    // A different round has its own allowance.
    assert!(eval(&kernel, &db, "vliw", 4, 1, 1).status.success());
}

#[test]
fn missing_program_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("local.db");
    let o = eval(&dir.path().join("absent.asm"), &db, "vliw", 1, 15, 100);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: "));
}

#[test]
fn status_of_fresh_workspace() {
    let dir = tempfile::tempdir().unwrap();
    let ws = init(dir.path(), "cp26");
    let o = run(&ws, &["status"]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o),
        "round: 0\nbest_score: none\nbest_round: none\nrounds_since_improve: 0\n\
         invalid: 0/0\ninvalid_streak: 0\ntotal_cost: 0.0\ncost_per_round: 0.0\n\
         recent_errors: none\n"
    );
}

#[test]
fn commands_outside_a_workspace_fail() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["status"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not a workspace"), "{}", stderr(&o));
}

#[test]
fn init_refuses_a_non_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("keep"), "x").unwrap();
    let o = run(dir.path(), &["init", "--task", "ac2"]);
    assert!(!o.status.success());
    assert_eq!(std::fs::read(dir.path().join("keep")).unwrap(), b"x");
}

#[test]
fn segment_then_export_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let ws = init(dir.path(), "cp26");
    let o = run(&ws, &["run-segment", "--max-rounds", "6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("rounds_run: 6"));

    let o = run(&ws, &["export", "--format", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let headers = rows.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["round", "score", "validity", "best_so_far", "cost"]
    );
    let mut best = f64::NEG_INFINITY;
    let mut n = 0;
    for (i, row) in rows.records().enumerate() {
        let row = row.unwrap();
        assert_eq!(row[0].parse::<u64>().unwrap(), i as u64 + 1);
        let score: f64 = row[1].parse().unwrap();
        let validity: f64 = row[2].parse().unwrap();
        if validity < 1.0 {
            assert_eq!(score, 0.0);
        }
        let b: f64 = row[3].parse().unwrap();
        assert!(b >= best);
        best = b;
        n += 1;
    }
    assert_eq!(n, 7);

    let o = run(&ws, &["history"]);
    assert_eq!(stdout(&o).lines().count(), 7);
    assert!(stdout(&o).lines().next().unwrap().contains("mechanism seed"));
}

#[test]
fn replay_db_runs_once() {
    let dir = tempfile::tempdir().unwrap();
    let ws = init(dir.path(), "cp26");
    assert!(run(&ws, &["run-segment", "--max-rounds", "1"]).status.success());
    // Segments replay their own session on exit, so stage a fresh one.
    let db = ws.join("sessions/session_2/agent_workspace/.eval.local.db");
    std::fs::create_dir_all(db.parent().unwrap()).unwrap();
    let packing = ws.join("candidates/candidate_1/artifacts/packing.txt");
    for _ in 0..3 {
        assert!(eval(&packing, &db, "cp26", 2, 15, 100).status.success());
    }
    let o = run(&ws, &["replay-db", "--session", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "replayed 3 rows from session 2\n");
    let o = run(&ws, &["replay-db", "--session", "2"]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn meta_loop_with_scripted_policy() {
    let dir = tempfile::tempdir().unwrap();
    let ws = init(dir.path(), "ac2");
    let o = run(&ws, &["run-meta", "--phases", "2", "--policy", "no-op"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("session 1:"));
    assert!(out.contains("session 2:"));
    assert!(ws.join("sessions/session_2/phase_report.txt").exists());
}

#[test]
fn inner_agent_round_with_external_command() {
    let dir = tempfile::tempdir().unwrap();
    let ws = init(dir.path(), "cp26");
    // Copies the parent artifact and scores it once through the gateway
    // binary it was handed.
    let script = r#"cp "$EVO_WORKSPACE/parent/packing.txt" "$EVO_OUTPUT" &&
"$EVO_EVAL_BIN" eval --program "$EVO_OUTPUT" --db-path "$EVO_LOCAL_DB" > "$EVO_WORKSPACE/logs/eval.txt""#;
    let o = run(&ws, &["run-inner-agent", "--", "sh", "-c", script]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("rounds_run: 1"), "{}", stdout(&o));
    let hist = stdout(&run(&ws, &["history"]));
    assert_eq!(hist.lines().count(), 2, "{hist}");
    assert!(hist.lines().nth(1).unwrap().contains("validity 1.0"), "{hist}");
}
