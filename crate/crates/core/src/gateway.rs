//! The evaluation gateway: the only code path that authors eval records.

use std::fmt;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};
use crate::registry::Registry;
use crate::store::{content_hash, AccessToken, EvalRecord, EvalStore, RecordSource};
use crate::tasks::{TaskKind, TaskOutcome};

pub const DEFAULT_GLOBAL_BUDGET: u64 = 100;
pub const DEFAULT_SESSION_BUDGET: u64 = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quota {
    pub global_remaining: u64,
    pub session_remaining: u64,
}

impl Quota {
    pub fn new(global: u64, session: u64) -> Self {
        Quota {
            global_remaining: global,
            session_remaining: session,
        }
    }

    pub fn permits(&self) -> bool {
        self.global_remaining > 0 && self.session_remaining > 0
    }

    pub fn remaining(&self) -> (u64, u64) {
        (self.global_remaining, self.session_remaining)
    }

    pub fn reset_session(&mut self, budget: u64) {
        self.session_remaining = budget;
    }

    fn refused(&self) -> Error {
        Error::QuotaRefused {
            global: self.global_remaining,
            session: self.session_remaining,
        }
    }

    /// Charges `n` evaluations made elsewhere (e.g. inside a session).
    pub fn charge(&mut self, n: u64) {
        self.global_remaining = self.global_remaining.saturating_sub(n);
        self.session_remaining = self.session_remaining.saturating_sub(n);
    }
}

/// Token usage of one round and the prices it was billed at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub round: u64,
    pub n_in: u64,
    pub n_cache: u64,
    pub n_out: u64,
    pub p_in: f64,
    pub p_cache: f64,
    pub p_out: f64,
}

impl CostRecord {
    pub fn zero(round: u64) -> Self {
        CostRecord {
            round,
            n_in: 0,
            n_cache: 0,
            n_out: 0,
            p_in: 0.0,
            p_cache: 0.0,
            p_out: 0.0,
        }
    }

    pub fn round_cost(&self) -> f64 {
        self.p_in * self.n_in as f64
            + self.p_cache * self.n_cache as f64
            + self.p_out * self.n_out as f64
    }
}

/// Mean cost over `rounds` rounds; rounds without a record cost nothing.
pub fn cost_per_round(history: &[CostRecord], rounds: u64) -> Result<f64> {
    if rounds == 0 {
        return Err(Error::Domain("cost per round over zero rounds".into()));
    }
    let total: f64 = history
        .iter()
        .filter(|c| c.round >= 1 && c.round <= rounds)
        .map(CostRecord::round_cost)
        .sum();
    Ok(total / rounds as f64)
}

/// What a caller gets to see of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub problem: String,
    pub combined_score: f64,
    pub validity: f64,
    pub eval_time_s: f64,
    pub remaining: u64,
    pub session_remaining: u64,
    pub error: Option<String>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.validity == 1.0 { "success" } else { "invalid" };
        writeln!(f, "Status: {status}")?;
        writeln!(f, "Problem: {}", self.problem)?;
        writeln!(f, "Combined Score: {:?}", self.combined_score)?;
        writeln!(f, "Validity: {:?}", self.validity)?;
        writeln!(f, "Eval Time: {:?}s", self.eval_time_s)?;
        writeln!(f, "Remaining Evals: {}", self.remaining)?;
        writeln!(f, "Session Evals Remaining: {}", self.session_remaining)?;
        if let Some(e) = &self.error {
            writeln!(f, "Error: {e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub seq: u64,
    pub record: EvalRecord,
    pub report: EvalReport,
}

pub struct Gateway {
    task: TaskKind,
    quota: Quota,
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".into()
    }
}

impl Gateway {
    pub fn new(task: TaskKind, quota: Quota) -> Self {
        Gateway { task, quota }
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn quota(&self) -> Quota {
        self.quota
    }

    pub fn remaining(&self) -> (u64, u64) {
        self.quota.remaining()
    }

    pub fn reset_session(&mut self, budget: u64) {
        self.quota.reset_session(budget);
    }

    pub fn charge(&mut self, n: u64) {
        self.quota.charge(n);
    }

    /// Scores content. Format errors and evaluator panics become invalid
    /// outcomes; non-finite scores are invalid.
    fn score(&self, content: &[u8]) -> TaskOutcome {
        let invalid = |msg: String| TaskOutcome {
            validity: 0.0,
            combined_score: 0.0,
            metrics: [("combined_score".to_string(), 0.0)].into(),
            error: Some(msg),
        };
        let Ok(text) = std::str::from_utf8(content) else {
            return invalid("format error: artifact is not UTF-8".into());
        };
        let task = self.task;
        match catch_unwind(AssertUnwindSafe(|| task.evaluate(text))) {
            Ok(Ok(o)) => {
                let finite = o.combined_score.is_finite() && o.metrics.values().all(|v| v.is_finite());
                if finite {
                    o
                } else {
                    invalid("evaluator produced a non-finite score".into())
                }
            }
            Ok(Err(e)) => invalid(e.to_string()),
            Err(p) => invalid(format!("evaluator crashed: {}", panic_text(p))),
        }
    }

    fn build(
        &self,
        round: u64,
        source: RecordSource,
        program_path: &str,
        content: &[u8],
    ) -> EvalRecord {
        let start = Instant::now();
        let o = self.score(content);
        EvalRecord {
            seq: 0,
            round,
            task: self.task.name().to_string(),
            source,
            program_path: program_path.to_string(),
            program_hash: content_hash(content),
            validity: o.validity,
            combined_score: o.combined_score,
            metrics: o.metrics,
            error: o.error,
            eval_time_s: start.elapsed().as_secs_f64(),
            chain_digest: String::new(),
        }
    }

    fn finish(&mut self, seq: u64, record: EvalRecord) -> Evaluation {
        self.quota.charge(1);
        let report = EvalReport {
            problem: self.task.name().to_string(),
            combined_score: record.combined_score,
            validity: record.validity,
            eval_time_s: record.eval_time_s,
            remaining: self.quota.global_remaining,
            session_remaining: self.quota.session_remaining,
            error: record.error.clone(),
        };
        Evaluation {
            seq,
            record,
            report,
        }
    }

    fn check_quota(&self) -> Result<()> {
        if self.quota.permits() {
            Ok(())
        } else {
            Err(self.quota.refused())
        }
    }

    /// Official evaluation of a round's artifact.
    pub fn evaluate_round(&mut self, registry: &mut Registry, round: u64) -> Result<Evaluation> {
        self.check_quota()?;
        let path = registry.artifact_path(round)?;
        let content = io_at(fs::read(&path), &path)?;
        let rel = format!(
            "{}/{}",
            registry.candidate(round)?.artifact_dir,
            self.task.artifact_file()
        );
        let record = self.build(round, RecordSource::Round, &rel, &content);
        let seq = registry.record_eval(record, AccessToken::gateway())?;
        Ok(self.finish(seq, last(registry.store())))
    }

    /// Records a round that produced no artifact. Consumes quota like any
    /// other evaluation.
    pub fn record_failure(
        &mut self,
        registry: &mut Registry,
        round: u64,
        error: &str,
    ) -> Result<Evaluation> {
        self.check_quota()?;
        let record = EvalRecord {
            seq: 0,
            round,
            task: self.task.name().to_string(),
            source: RecordSource::Round,
            program_path: String::new(),
            program_hash: content_hash(b""),
            validity: 0.0,
            combined_score: 0.0,
            metrics: [("combined_score".to_string(), 0.0)].into(),
            error: Some(error.to_string()),
            eval_time_s: 0.0,
            chain_digest: String::new(),
        };
        let seq = registry.record_eval(record, AccessToken::gateway())?;
        Ok(self.finish(seq, last(registry.store())))
    }

    /// Evaluation submitted from inside a session, written to that
    /// session's local store.
    pub fn evaluate_attempt(
        &mut self,
        store: &mut EvalStore,
        program: &Path,
        round: u64,
    ) -> Result<Evaluation> {
        self.check_quota()?;
        let content = match fs::read(program) {
            Ok(c) => c,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::Format(format!("{}: program not found", program.display())))
            }
            Err(e) => return io_at(Err(e), program),
        };
        let label = program.display().to_string();
        let record = self.build(round, RecordSource::Attempt, &label, &content);
        let seq = store.append(record, AccessToken::gateway())?;
        Ok(self.finish(seq, last(store)))
    }
}

fn last(store: &EvalStore) -> EvalRecord {
    store.records().last().expect("just appended").clone()
}
