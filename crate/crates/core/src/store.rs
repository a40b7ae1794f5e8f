//! Append-only, hash-chained evaluation store.
//!
//! One JSON record per line. Each record carries a `chain_digest` equal to
//! `sha256(prev_digest_hex || body)`, where `body` is the record serialized
//! without its digest field and the first record chains from the digest of
//! empty input. Opening a store re-verifies the whole file.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, Error, Result};

/// Chain root: hex sha256 of the empty string.
pub const GENESIS_DIGEST: &str =
    "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

/// Who authored a record: the controller's official per-round evaluation, or
/// an attempt submitted from inside a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordSource {
    Round,
    Attempt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seq: u64,
    pub round: u64,
    pub task: String,
    pub source: RecordSource,
    pub program_path: String,
    pub program_hash: String,
    pub validity: f64,
    pub combined_score: f64,
    pub metrics: BTreeMap<String, f64>,
    pub error: Option<String>,
    pub eval_time_s: f64,
    pub chain_digest: String,
}

#[derive(Serialize)]
struct Body<'a> {
    seq: u64,
    round: u64,
    task: &'a str,
    source: RecordSource,
    program_path: &'a str,
    program_hash: &'a str,
    validity: f64,
    combined_score: f64,
    metrics: &'a BTreeMap<String, f64>,
    error: &'a Option<String>,
    eval_time_s: f64,
}

impl EvalRecord {
    pub fn is_valid(&self) -> bool {
        self.validity == 1.0
    }

    fn body(&self) -> String {
        serde_json::to_string(&Body {
            seq: self.seq,
            round: self.round,
            task: &self.task,
            source: self.source,
            program_path: &self.program_path,
            program_hash: &self.program_hash,
            validity: self.validity,
            combined_score: self.combined_score,
            metrics: &self.metrics,
            error: &self.error,
            eval_time_s: self.eval_time_s,
        })
        .expect("record body serializes")
    }

    fn line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self.validity.is_finite()
            && self.combined_score.is_finite()
            && self.eval_time_s.is_finite()
            && self.metrics.values().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain(format!(
                "record for round {} has a non-finite field",
                self.round
            )));
        }
        if !(0.0..=1.0).contains(&self.validity) || self.eval_time_s < 0.0 {
            return Err(Error::Domain(format!(
                "record for round {} is out of range",
                self.round
            )));
        }
        Ok(())
    }
}

pub fn chain_digest(prev: &str, body: &str) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(body.as_bytes());
    hex::encode(h.finalize())
}

/// Hex sha256 of artifact content.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Capability for appending to a store. Anyone can hold a read-only token;
/// the writing token is minted only inside this crate, for the gateway and
/// replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessToken {
    write: bool,
}

impl AccessToken {
    pub fn read_only() -> Self {
        AccessToken { write: false }
    }

    pub(crate) fn gateway() -> Self {
        AccessToken { write: true }
    }
}

struct Writer {
    file: File,
    _lock: File,
}

pub struct EvalStore {
    path: PathBuf,
    records: Vec<EvalRecord>,
    head: String,
    writer: Option<Writer>,
}

impl std::fmt::Debug for EvalStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvalStore")
            .field("path", &self.path)
            .field("records", &self.records.len())
            .field("writable", &self.writer.is_some())
            .finish()
    }
}

pub fn lock_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".lock");
    PathBuf::from(s)
}

impl EvalStore {
    /// Opens (creating if absent) a store for appending. Takes the writer
    /// lock and verifies the chain.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let lock = io_at(
            OpenOptions::new()
                .create(true)
                .truncate(false)
                .write(true)
                .open(lock_path(&path)),
            &path,
        )?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(Error::Locked(path)),
            Err(TryLockError::Error(e)) => return io_at(Err(e), &path),
        }
        let file = io_at(
            OpenOptions::new().create(true).append(true).open(&path),
            &path,
        )?;
        let mut store = Self::load(&path)?;
        store.writer = Some(Writer { file, _lock: lock });
        Ok(store)
    }

    /// Opens an existing store for reading only.
    pub fn open_read_only(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return io_at(
                Err(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "eval store not found",
                )),
                path,
            );
        }
        Self::load(path)
    }

    fn load(path: &Path) -> Result<Self> {
        let bytes = if path.exists() {
            io_at(fs::read(path), path)?
        } else {
            Vec::new()
        };
        let (records, head) = verify_bytes(&bytes)?;
        Ok(EvalStore {
            path: path.to_path_buf(),
            records,
            head,
            writer: None,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[EvalRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn head_digest(&self) -> &str {
        &self.head
    }

    pub fn is_writable(&self) -> bool {
        self.writer.is_some()
    }

    /// Appends `record`, overwriting its `seq` and `chain_digest`. Returns the
    /// assigned sequence number.
    pub fn append(&mut self, mut record: EvalRecord, token: AccessToken) -> Result<u64> {
        if !token.write {
            return Err(Error::Unauthorized(
                "appending requires the gateway capability".into(),
            ));
        }
        let Some(writer) = self.writer.as_mut() else {
            return Err(Error::Unauthorized(format!(
                "{} was opened read-only",
                self.path.display()
            )));
        };
        record.check_finite()?;
        record.seq = self.records.len() as u64;
        record.chain_digest = chain_digest(&self.head, &record.body());
        let mut line = record.line();
        line.push('\n');
        io_at(writer.file.write_all(line.as_bytes()), &self.path)?;
        io_at(writer.file.flush(), &self.path)?;
        self.head = record.chain_digest.clone();
        let seq = record.seq;
        self.records.push(record);
        Ok(seq)
    }
}

/// Parses and verifies a store image. Every line must be the canonical
/// serialization of its record, sequence numbers must run from 0, and every
/// digest must chain.
pub fn verify_bytes(bytes: &[u8]) -> Result<(Vec<EvalRecord>, String)> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Tamper("store is not UTF-8".into()))?;
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(Error::Tamper("store does not end with a newline".into()));
    }
    let mut head = GENESIS_DIGEST.to_string();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let rec: EvalRecord = serde_json::from_str(line)
            .map_err(|e| Error::Tamper(format!("line {lineno}: unparseable record ({e})")))?;
        if rec.line() != line {
            return Err(Error::Tamper(format!("line {lineno}: non-canonical record")));
        }
        if rec.seq != i as u64 {
            return Err(Error::Tamper(format!(
                "line {lineno}: seq {} where {i} expected",
                rec.seq
            )));
        }
        let expect = chain_digest(&head, &rec.body());
        if rec.chain_digest != expect {
            return Err(Error::Tamper(format!("line {lineno}: chain digest mismatch")));
        }
        head = expect;
        records.push(rec);
    }
    Ok((records, head))
}

/// Verifies a store file without opening it.
pub fn verify_file(path: &Path) -> Result<usize> {
    let bytes = io_at(fs::read(path), path)?;
    Ok(verify_bytes(&bytes)?.0.len())
}

/// Re-chains `records` with every `eval_time_s` zeroed. Two runs that differ
/// only in wall-clock timing produce identical output.
pub fn normalized_image(records: &[EvalRecord]) -> String {
    let mut head = GENESIS_DIGEST.to_string();
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        let mut r = r.clone();
        r.seq = i as u64;
        r.eval_time_s = 0.0;
        r.chain_digest = chain_digest(&head, &r.body());
        head = r.chain_digest.clone();
        out.push_str(&r.line());
        out.push('\n');
    }
    out
}

/// Appends every record of the local store at `local` to `target`, in order,
/// re-sequenced and re-chained. All other fields are copied verbatim.
pub fn replay_into(local: &Path, target: &mut EvalStore) -> Result<usize> {
    let source = EvalStore::open_read_only(local)?;
    let token = AccessToken::gateway();
    for r in source.records() {
        target.append(r.clone(), token)?;
    }
    Ok(source.len())
}
