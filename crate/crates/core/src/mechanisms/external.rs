//! Mechanisms backed by an external process running in a per-session
//! sandbox directory.
//!
//! Sandbox layout under `sessions/session_<k>/agent_workspace/`:
//!
//! ```text
//! shared/ skill/ _next_goal.md   read-only copies, refreshed every round
//! parent/<artifact>              the selected parent
//! references/round_<r>/<artifact>
//! attempts/                      scratch, kept across rounds
//! output/<artifact>              what the process must write
//! output/usage.txt               optional: n_in n_cache n_out
//! output/SESSION_NOTES.md        optional, appended to the session dir
//! .eval.local.db                 session-local eval store
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};

use super::{select, InfoBundle, Mechanism, MechanismConfig, RoundInput, RoundOutput, Usage};
use crate::error::{io_at, Error, Result};
use crate::layout;
use crate::registry::Registry;
use crate::store::EvalStore;

pub const TIMEOUT_ERROR: &str = "external-timeout";
pub const NO_ARTIFACT_ERROR: &str = "no-artifact";
pub const SANDBOX_ERROR: &str = "sandbox-violation";

fn default_timeout() -> f64 {
    600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    /// Program and arguments, run with the sandbox as working directory.
    pub command: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

pub struct ExternalMechanism {
    config: MechanismConfig,
    external: ExternalConfig,
    eval_bin: Option<PathBuf>,
}

pub(crate) fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    io_at(fs::create_dir_all(to), to)?;
    if !from.is_dir() {
        return Ok(());
    }
    for entry in io_at(fs::read_dir(from), from)? {
        let entry = io_at(entry, from)?;
        let src = entry.path();
        let dst = to.join(entry.file_name());
        if src.is_dir() {
            copy_tree(&src, &dst)?;
        } else if src.is_file() {
            copy_read_only(&src, &dst)?;
        }
    }
    Ok(())
}

pub(crate) fn copy_read_only(src: &Path, dst: &Path) -> Result<()> {
    io_at(fs::copy(src, dst), src)?;
    let mut perms = io_at(fs::metadata(dst), dst)?.permissions();
    perms.set_readonly(true);
    io_at(fs::set_permissions(dst, perms), dst)
}

pub(crate) fn reset_dir(p: &Path) -> Result<()> {
    if p.exists() {
        io_at(fs::remove_dir_all(p), p)?;
    }
    io_at(fs::create_dir_all(p), p)
}

/// Size and mtime of every file outside the session directories, plus the
/// store bytes. Any difference after a run means the process wrote where it
/// must not.
#[derive(Debug, PartialEq, Eq)]
struct Fingerprint {
    files: Vec<(PathBuf, u64, Option<SystemTime>)>,
}

fn fingerprint(root: &Path) -> Result<Fingerprint> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, u64, Option<SystemTime>)>) -> Result<()> {
        for entry in io_at(fs::read_dir(dir), dir)? {
            let entry = io_at(entry, dir)?;
            let p = entry.path();
            let rel = p.strip_prefix(root).expect("under root").to_path_buf();
            if rel.starts_with(layout::SESSIONS)
                && rel
                    .components()
                    .nth(1)
                    .is_some_and(|c| c.as_os_str().to_string_lossy().starts_with("session_"))
            {
                continue;
            }
            let meta = io_at(fs::symlink_metadata(&p), &p)?;
            if meta.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push((rel, meta.len(), meta.modified().ok()));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, root, &mut files)?;
    files.sort();
    Ok(Fingerprint { files })
}

fn local_count(path: &Path) -> u64 {
    if !path.exists() {
        return 0;
    }
    EvalStore::open_read_only(path)
        .map(|s| s.len() as u64)
        .unwrap_or(0)
}

fn parse_usage(text: &str) -> Option<Usage> {
    let v: Vec<u64> = text
        .split_whitespace()
        .map(|t| t.parse().ok())
        .collect::<Option<_>>()?;
    match v.as_slice() {
        [a, b, c] => Some(Usage {
            n_in: *a,
            n_cache: *b,
            n_out: *c,
        }),
        _ => None,
    }
}

pub(crate) enum Exit {
    Finished(std::process::ExitStatus),
    TimedOut,
}

pub(crate) fn run_with_timeout(mut cmd: Command, timeout: Duration) -> Result<Exit> {
    let mut child = cmd
        .spawn()
        .map_err(|e| Error::External(format!("cannot start process: {e}")))?;
    let start = Instant::now();
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return Ok(Exit::Finished(status)),
            Ok(None) => {}
            Err(e) => return Err(Error::External(e.to_string())),
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Ok(Exit::TimedOut);
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

impl ExternalMechanism {
    pub fn new(config: MechanismConfig, external: ExternalConfig, eval_bin: Option<PathBuf>) -> Self {
        ExternalMechanism {
            config,
            external,
            eval_bin,
        }
    }

    fn prepare(&self, input: &RoundInput<'_>, sandbox: &Path) -> Result<()> {
        let ws = input.workspace;
        let artifact = ws.task().artifact_file();
        for d in ["shared", "skill", "parent", "references", "output"] {
            reset_dir(&sandbox.join(d))?;
        }
        io_at(fs::create_dir_all(sandbox.join("attempts")), sandbox)?;
        io_at(fs::create_dir_all(sandbox.join("logs")), sandbox)?;
        copy_tree(&ws.path(layout::SHARED), &sandbox.join("shared"))?;
        copy_tree(&ws.path(layout::SKILL), &sandbox.join("skill"))?;
        let goal = sandbox.join("_next_goal.md");
        if goal.exists() {
            io_at(fs::remove_file(&goal), &goal)?;
        }
        copy_read_only(&ws.path(layout::NEXT_GOAL), &goal)?;
        let parent = input.registry.artifact_path(input.info.parent.round)?;
        if parent.is_file() {
            copy_read_only(&parent, &sandbox.join("parent").join(artifact))?;
        }
        for r in &input.info.references {
            let src = input.registry.artifact_path(r.round)?;
            if src.is_file() {
                let d = sandbox.join("references").join(format!("round_{}", r.round));
                io_at(fs::create_dir_all(&d), &d)?;
                copy_read_only(&src, &d.join(artifact))?;
            }
        }
        Ok(())
    }
}

impl Mechanism for ExternalMechanism {
    fn id(&self) -> String {
        let prog = self
            .external
            .command
            .first()
            .map(|c| {
                Path::new(c)
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| c.clone())
            })
            .unwrap_or_default();
        format!("external:{prog}")
    }

    fn select(&mut self, registry: &Registry) -> Result<InfoBundle> {
        select(registry, self.config.selection, self.config.params.ref_k)
    }

    fn produce(&mut self, input: &RoundInput<'_>) -> Result<RoundOutput> {
        let Some((program, args)) = self.external.command.split_first() else {
            return Err(Error::Config("external command is empty".into()));
        };
        let ws = input.workspace;
        let round = input.candidate.round;
        let session_dir = ws.session_dir(input.session_id);
        let sandbox = session_dir.join(layout::AGENT_WORKSPACE);
        self.prepare(input, &sandbox)?;

        let local_db = session_dir.join(layout::LOCAL_DB);
        let output = sandbox.join("output").join(ws.task().artifact_file());
        // One evaluation is held back for the round's official score.
        let budget = input.quota.session_remaining.saturating_sub(1);
        let global = input.quota.global_remaining.saturating_sub(1);

        let mut cmd = Command::new(program);
        cmd.args(args)
            .current_dir(&sandbox)
            .stdin(Stdio::null())
            .env("EVO_WORKSPACE", &sandbox)
            .env("EVO_ROUND", round.to_string())
            .env("EVO_TASK", ws.task().name())
            .env("EVO_SESSION", input.session_id.to_string())
            .env("EVO_EVAL_BUDGET", budget.to_string())
            .env("EVO_GLOBAL_REMAINING", global.to_string())
            .env("EVO_LOCAL_DB", &local_db)
            .env("EVO_OUTPUT", &output);
        if let Some(bin) = &self.eval_bin {
            cmd.env("EVO_EVAL_BIN", bin);
        }
        let out_log = sandbox.join("logs").join(format!("round_{round}.out"));
        let err_log = sandbox.join("logs").join(format!("round_{round}.err"));
        cmd.stdout(io_at(fs::File::create(&out_log), &out_log)?);
        cmd.stderr(io_at(fs::File::create(&err_log), &err_log)?);

        let db_path = ws.path(layout::EVAL_DB);
        let db_before = io_at(fs::read(&db_path), &db_path)?;
        let print_before = fingerprint(ws.root())?;
        let local_before = local_count(&local_db);
        let timeout = Duration::from_secs_f64(self.external.timeout_s.max(0.0));
        let started = Instant::now();
        let exit = run_with_timeout(cmd, timeout)?;
        let elapsed = started.elapsed().as_secs_f64();
        let local_evals = local_count(&local_db).saturating_sub(local_before);

        let mut out = RoundOutput {
            local_evals,
            ..RoundOutput::default()
        };
        out.logs.push(format!("command: {}", self.external.command.join(" ")));
        out.logs.push(format!("local evals: {local_evals}"));

        let db_after = io_at(fs::read(&db_path), &db_path)?;
        let tampered = db_after != db_before;
        if tampered {
            io_at(fs::write(&db_path, &db_before), &db_path)?;
        }
        if tampered || fingerprint(ws.root())? != print_before {
            out.logs.push("process wrote outside its sandbox".into());
            out.failure = Some(SANDBOX_ERROR.into());
            return Ok(out);
        }

        match exit {
            Exit::TimedOut => {
                out.logs.push(format!("killed after {elapsed:.1}s"));
                out.failure = Some(TIMEOUT_ERROR.into());
                return Ok(out);
            }
            Exit::Finished(status) => out.logs.push(format!("exit: {status} after {elapsed:.1}s")),
        }

        let out_dir = sandbox.join("output");
        let usage_path = out_dir.join("usage.txt");
        if usage_path.is_file() {
            let text = io_at(fs::read_to_string(&usage_path), &usage_path)?;
            match parse_usage(&text) {
                Some(u) => out.usage = Some(u),
                None => out.logs.push("ignored malformed usage.txt".into()),
            }
        }
        let notes = out_dir.join(layout::SESSION_NOTES);
        if notes.is_file() {
            let text = io_at(fs::read_to_string(&notes), &notes)?;
            let dst = session_dir.join(layout::SESSION_NOTES);
            let mut f = io_at(
                fs::OpenOptions::new().create(true).append(true).open(&dst),
                &dst,
            )?;
            io_at(
                std::io::Write::write_all(&mut f, format!("## round {round}\n\n{text}\n").as_bytes()),
                &dst,
            )?;
        }
        if output.is_file() {
            out.artifact = Some(io_at(fs::read(&output), &output)?);
        } else {
            out.failure = Some(NO_ARTIFACT_ERROR.into());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_file_format() {
        assert_eq!(
            parse_usage("10 20 30\n"),
            Some(Usage { n_in: 10, n_cache: 20, n_out: 30 })
        );
        assert_eq!(parse_usage("10 20"), None);
        assert_eq!(parse_usage("a b c"), None);
    }

    #[test]
    fn timeout_kills_the_process() {
        let mut cmd = Command::new("sleep");
        cmd.arg("5");
        let start = Instant::now();
        let exit = run_with_timeout(cmd, Duration::from_millis(100)).unwrap();
        assert!(matches!(exit, Exit::TimedOut));
        assert!(start.elapsed() < Duration::from_secs(3));
    }

    #[test]
    fn missing_program_is_an_error() {
        let cmd = Command::new("/nonexistent/evo-agent");
        assert!(matches!(
            run_with_timeout(cmd, Duration::from_secs(1)),
            Err(Error::External(_))
        ));
    }
}
