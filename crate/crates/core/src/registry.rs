//! Candidate history: one directory per round under `candidates/`, plus the
//! workspace eval store.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};
use crate::gateway::CostRecord;
use crate::layout;
use crate::store::{replay_into, AccessToken, EvalRecord, EvalStore, RecordSource};
use crate::tasks::TaskKind;

const CANDIDATE_FILE: &str = "candidate.json";
const LOG_FILE: &str = "log.txt";
const COST_FILE: &str = "cost.json";
const REPLAYED_FLAG: &str = ".replayed";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub round: u64,
    pub parent_round: Option<u64>,
    /// Workspace-relative, `/`-separated.
    pub artifact_dir: String,
    pub mechanism_id: String,
    pub segment_id: u64,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundContext {
    pub candidate: Candidate,
    pub eval: Option<EvalRecord>,
    pub logs: Vec<String>,
    pub cost: Option<CostRecord>,
}

pub struct Registry {
    root: PathBuf,
    task: TaskKind,
    candidates: Vec<Candidate>,
    store: EvalStore,
    /// Round -> index of its latest official record.
    latest: BTreeMap<u64, usize>,
}

fn candidate_rel(round: u64) -> String {
    format!("{}/candidate_{round}", layout::CANDIDATES)
}

impl Registry {
    /// Opens the registry under `root` with the writer lock on its store.
    pub fn open(root: impl AsRef<Path>, task: TaskKind) -> Result<Self> {
        let root = root.as_ref();
        let store = EvalStore::open(root.join(layout::EVAL_DB))?;
        Self::with_store(root, task, store)
    }

    pub fn open_read_only(root: impl AsRef<Path>, task: TaskKind) -> Result<Self> {
        let root = root.as_ref();
        let store = EvalStore::open_read_only(root.join(layout::EVAL_DB))?;
        Self::with_store(root, task, store)
    }

    fn with_store(root: &Path, task: TaskKind, store: EvalStore) -> Result<Self> {
        let candidates = load_candidates(&root.join(layout::CANDIDATES))?;
        let mut reg = Registry {
            root: root.to_path_buf(),
            task,
            candidates,
            store,
            latest: BTreeMap::new(),
        };
        for i in 0..reg.store.len() {
            let r = &reg.store.records()[i];
            if r.source == RecordSource::Round {
                if !reg.has_round(r.round) {
                    return Err(Error::Lineage(format!(
                        "store record {} references missing round {}",
                        r.seq, r.round
                    )));
                }
                reg.latest.insert(r.round, i);
            }
        }
        Ok(reg)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn store(&self) -> &EvalStore {
        &self.store
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn latest_round(&self) -> u64 {
        self.candidates.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn has_round(&self, round: u64) -> bool {
        round >= 1 && round <= self.latest_round()
    }

    pub fn candidate(&self, round: u64) -> Result<&Candidate> {
        if !self.has_round(round) {
            return Err(Error::Lineage(format!("unknown round {round}")));
        }
        Ok(&self.candidates[round as usize - 1])
    }

    fn dir(&self, round: u64) -> PathBuf {
        self.root.join(candidate_rel(round))
    }

    pub fn artifact_dir(&self, round: u64) -> Result<PathBuf> {
        let c = self.candidate(round)?;
        Ok(self.root.join(&c.artifact_dir))
    }

    pub fn artifact_path(&self, round: u64) -> Result<PathBuf> {
        Ok(self.artifact_dir(round)?.join(self.task.artifact_file()))
    }

    pub fn read_artifact(&self, round: u64) -> Result<Vec<u8>> {
        let p = self.artifact_path(round)?;
        io_at(fs::read(&p), &p)
    }

    pub fn new_candidate(
        &mut self,
        parent_round: Option<u64>,
        mechanism_id: &str,
        segment_id: u64,
    ) -> Result<Candidate> {
        if let Some(p) = parent_round {
            if !self.has_round(p) {
                return Err(Error::Lineage(format!("parent round {p} does not exist")));
            }
        }
        let round = self.latest_round() + 1;
        let rel = candidate_rel(round);
        let c = Candidate {
            round,
            parent_round,
            artifact_dir: format!("{rel}/artifacts"),
            mechanism_id: mechanism_id.to_string(),
            segment_id,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        let dir = self.root.join(&rel);
        io_at(fs::create_dir_all(self.root.join(&c.artifact_dir)), &dir)?;
        let json = serde_json::to_string_pretty(&c).expect("candidate serializes");
        let path = dir.join(CANDIDATE_FILE);
        io_at(fs::write(&path, json + "\n"), &path)?;
        self.candidates.push(c.clone());
        Ok(c)
    }

    pub fn write_artifact(&self, round: u64, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.artifact_path(round)?;
        io_at(fs::write(&p, bytes), &p)?;
        Ok(p)
    }

    /// Appends a record. Only the gateway and replay hold a writing token.
    pub fn record_eval(&mut self, record: EvalRecord, token: AccessToken) -> Result<u64> {
        if !self.has_round(record.round) {
            return Err(Error::Lineage(format!(
                "evaluation for unknown round {}",
                record.round
            )));
        }
        let official = record.source == RecordSource::Round;
        let round = record.round;
        let seq = self.store.append(record, token)?;
        if official {
            self.latest.insert(round, seq as usize);
        }
        Ok(seq)
    }

    /// Latest official evaluation of `round`.
    pub fn eval(&self, round: u64) -> Option<&EvalRecord> {
        self.latest.get(&round).map(|&i| &self.store.records()[i])
    }

    pub fn read_metrics(&self, round: u64) -> Result<BTreeMap<String, f64>> {
        self.candidate(round)?;
        Ok(self.eval(round).map(|r| r.metrics.clone()).unwrap_or_default())
    }

    fn metric_value(rec: &EvalRecord, metric: &str) -> Option<f64> {
        if metric == "combined_score" {
            Some(rec.combined_score)
        } else {
            rec.metrics.get(metric).copied()
        }
    }

    /// Valid candidates with their metric value, best first; ties go to the
    /// larger round.
    pub fn ranked(&self, metric: &str) -> Vec<(&Candidate, f64)> {
        let dir = self.task.direction(metric);
        let mut out: Vec<(&Candidate, f64)> = self
            .latest
            .iter()
            .filter_map(|(&round, &i)| {
                let rec = &self.store.records()[i];
                if !rec.is_valid() {
                    return None;
                }
                let v = Self::metric_value(rec, metric)?;
                Some((&self.candidates[round as usize - 1], v))
            })
            .collect();
        out.sort_by(|a, b| {
            let by_score = if dir.better(a.1, b.1) {
                std::cmp::Ordering::Less
            } else if dir.better(b.1, a.1) {
                std::cmp::Ordering::Greater
            } else {
                std::cmp::Ordering::Equal
            };
            by_score.then(b.0.round.cmp(&a.0.round))
        });
        out
    }

    pub fn best(&self, metric: &str) -> Option<&Candidate> {
        self.ranked(metric).first().map(|(c, _)| *c)
    }

    pub fn append_log<S: AsRef<str>>(&self, round: u64, lines: &[S]) -> Result<()> {
        self.candidate(round)?;
        let path = self.dir(round).join(LOG_FILE);
        let mut text = String::new();
        for l in lines {
            text.push_str(l.as_ref());
            text.push('\n');
        }
        let mut f = io_at(
            fs::OpenOptions::new().create(true).append(true).open(&path),
            &path,
        )?;
        io_at(std::io::Write::write_all(&mut f, text.as_bytes()), &path)
    }

    pub fn logs(&self, round: u64) -> Result<Vec<String>> {
        self.candidate(round)?;
        let path = self.dir(round).join(LOG_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        Ok(io_at(fs::read_to_string(&path), &path)?
            .lines()
            .map(str::to_string)
            .collect())
    }

    pub fn record_cost(&self, cost: &CostRecord) -> Result<()> {
        self.candidate(cost.round)?;
        let path = self.dir(cost.round).join(COST_FILE);
        let json = serde_json::to_string_pretty(cost).expect("cost serializes");
        io_at(fs::write(&path, json + "\n"), &path)
    }

    pub fn cost(&self, round: u64) -> Result<Option<CostRecord>> {
        self.candidate(round)?;
        let path = self.dir(round).join(COST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = io_at(fs::read_to_string(&path), &path)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn costs(&self) -> Result<Vec<CostRecord>> {
        let mut out = Vec::new();
        for r in 1..=self.latest_round() {
            out.extend(self.cost(r)?);
        }
        Ok(out)
    }

    pub fn history(&self) -> Result<Vec<RoundContext>> {
        self.candidates
            .iter()
            .map(|c| {
                Ok(RoundContext {
                    candidate: c.clone(),
                    eval: self.eval(c.round).cloned(),
                    logs: self.logs(c.round)?,
                    cost: self.cost(c.round)?,
                })
            })
            .collect()
    }

    /// Replays a session's local store into the workspace store, once.
    pub fn replay_session(&mut self, session_dir: &Path) -> Result<usize> {
        let flag = session_dir.join(REPLAYED_FLAG);
        if flag.exists() {
            return Err(Error::ReplayRefused(format!(
                "{} was already replayed",
                session_dir.display()
            )));
        }
        let local = session_dir.join(layout::LOCAL_DB);
        let n = if local.exists() {
            let source = EvalStore::open_read_only(&local)?;
            if let Some(r) = source.records().iter().find(|r| !self.has_round(r.round)) {
                return Err(Error::Lineage(format!(
                    "local record {} references unknown round {}",
                    r.seq, r.round
                )));
            }
            replay_into(&local, &mut self.store)?
        } else {
            0
        };
        io_at(fs::write(&flag, format!("{n}\n")), &flag)?;
        Ok(n)
    }
}

fn load_candidates(dir: &Path) -> Result<Vec<Candidate>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut found = Vec::new();
    for entry in io_at(fs::read_dir(dir), dir)? {
        let entry = io_at(entry, dir)?;
        let name = entry.file_name();
        let Some(n) = name
            .to_str()
            .and_then(|s| s.strip_prefix("candidate_"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        let path = entry.path().join(CANDIDATE_FILE);
        let text = io_at(fs::read_to_string(&path), &path)?;
        let c: Candidate = serde_json::from_str(&text)
            .map_err(|e| Error::Tamper(format!("{}: {e}", path.display())))?;
        if c.round != n {
            return Err(Error::Tamper(format!(
                "{} claims round {}",
                path.display(),
                c.round
            )));
        }
        found.push(c);
    }
    found.sort_by_key(|c| c.round);
    for (i, c) in found.iter().enumerate() {
        if c.round != i as u64 + 1 {
            return Err(Error::Lineage(format!("candidate rounds skip to {}", c.round)));
        }
        if let Some(p) = c.parent_round {
            if p == 0 || p >= c.round {
                return Err(Error::Lineage(format!(
                    "round {} has parent {p}",
                    c.round
                )));
            }
        }
    }
    Ok(found)
}
