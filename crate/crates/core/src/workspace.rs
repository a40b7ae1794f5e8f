//! Workspace layout, configuration, meta-actions and the edit policy.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};
use crate::gateway::DEFAULT_GLOBAL_BUDGET;
use crate::layout;
use crate::mechanisms::MechanismConfig;
use crate::plan::{RunPlan, DEFAULT_ROUND_CAP};
use crate::tasks::TaskKind;

/// Path prefixes a meta-action may touch. A prefix ending in `/` covers a
/// directory; otherwise it names one file (or everything below a directory
/// of that name). Forbidden prefixes win.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPolicy {
    pub allowed: Vec<String>,
    pub forbidden: Vec<String>,
}

impl Default for EditPolicy {
    fn default() -> Self {
        EditPolicy {
            allowed: vec![
                layout::NEXT_GOAL.into(),
                format!("{}/", layout::SKILL),
                format!("{}/", layout::SHARED),
            ],
            forbidden: vec![
                format!("{}/", layout::CANDIDATES),
                layout::EVAL_DB.into(),
                layout::CONFIG.into(),
            ],
        }
    }
}

fn prefix_matches(prefix: &str, path: &str) -> bool {
    if prefix.ends_with('/') {
        path.starts_with(prefix) || path == prefix.trim_end_matches('/')
    } else {
        path == prefix
            || path
                .strip_prefix(prefix)
                .is_some_and(|rest| rest.starts_with('/'))
    }
}

impl EditPolicy {
    pub fn is_forbidden(&self, path: &str) -> bool {
        self.forbidden.iter().any(|p| prefix_matches(p, path))
    }

    pub fn is_allowed(&self, path: &str) -> bool {
        !self.is_forbidden(path) && self.allowed.iter().any(|p| prefix_matches(p, path))
    }
}

/// Rejects anything but a plain relative path of named segments.
pub fn check_relative_path(path: &str) -> Result<()> {
    let bad = |why: &str| Err(Error::MalformedAction(format!("{path:?}: {why}")));
    if path.is_empty() {
        return bad("empty path");
    }
    if path.starts_with('/') || path.contains('\\') || path.contains('\0') {
        return bad("not a workspace-relative path");
    }
    for seg in path.split('/') {
        match seg {
            "" => return bad("empty segment"),
            "." | ".." => return bad("traversal segment"),
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EditContent {
    Write(Vec<u8>),
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edit {
    pub target: String,
    pub content: EditContent,
}

impl Edit {
    pub fn write(target: impl Into<String>, content: impl Into<Vec<u8>>) -> Self {
        Edit {
            target: target.into(),
            content: EditContent::Write(content.into()),
        }
    }

    pub fn delete(target: impl Into<String>) -> Self {
        Edit {
            target: target.into(),
            content: EditContent::Delete,
        }
    }
}

/// One meta phase's decision: whole-file edits plus an optional new plan.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetaAction {
    pub edits: Vec<Edit>,
    pub run_plan: Option<RunPlan>,
}

const MANIFEST: &str = "manifest.txt";
const CONTENT_DIR: &str = "content";
const PLAN_FILE: &str = "run_plan.txt";

impl MetaAction {
    /// Reads the directory form: `manifest.txt` with one `write <path>` or
    /// `delete <path>` per line, `content/<i>` holding the bytes for line
    /// `i`, and an optional `run_plan.txt`.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest)
            .map_err(|e| Error::MalformedAction(format!("{}: {e}", manifest.display())))?;
        let mut edits = Vec::new();
        for (i, raw) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let (kind, target) = raw
                .trim()
                .split_once(' ')
                .ok_or_else(|| Error::MalformedAction(format!("manifest line {raw:?}")))?;
            let target = target.trim().to_string();
            match kind {
                "write" => {
                    let p = dir.join(CONTENT_DIR).join(i.to_string());
                    let bytes = fs::read(&p).map_err(|e| {
                        Error::MalformedAction(format!("{}: {e}", p.display()))
                    })?;
                    edits.push(Edit::write(target, bytes));
                }
                "delete" => edits.push(Edit::delete(target)),
                other => {
                    return Err(Error::MalformedAction(format!(
                        "unknown manifest verb {other:?}"
                    )))
                }
            }
        }
        let plan_path = dir.join(PLAN_FILE);
        let run_plan = if plan_path.exists() {
            let t = io_at(fs::read_to_string(&plan_path), &plan_path)?;
            Some(RunPlan::parse(&t).map_err(|e| Error::MalformedAction(e.to_string()))?)
        } else {
            None
        };
        Ok(MetaAction { edits, run_plan })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        io_at(fs::create_dir_all(dir.join(CONTENT_DIR)), dir)?;
        let mut manifest = String::new();
        for (i, e) in self.edits.iter().enumerate() {
            match &e.content {
                EditContent::Write(bytes) => {
                    manifest.push_str(&format!("write {}\n", e.target));
                    let p = dir.join(CONTENT_DIR).join(i.to_string());
                    io_at(fs::write(&p, bytes), &p)?;
                }
                EditContent::Delete => manifest.push_str(&format!("delete {}\n", e.target)),
            }
        }
        let p = dir.join(MANIFEST);
        io_at(fs::write(&p, manifest), &p)?;
        if let Some(plan) = &self.run_plan {
            let p = dir.join(PLAN_FILE);
            io_at(fs::write(&p, plan.to_string()), &p)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for e in &self.edits {
            match &e.content {
                EditContent::Write(b) => s.push_str(&format!("write {} ({} bytes)\n", e.target, b.len())),
                EditContent::Delete => s.push_str(&format!("delete {}\n", e.target)),
            }
        }
        if self.run_plan.is_some() {
            s.push_str("run plan issued\n");
        }
        if s.is_empty() {
            s.push_str("empty action\n");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub target: String,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.target, self.reason)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(Vec<Violation>),
}

/// Checks every edit target against the policy. Malformed paths are an
/// error rather than a violation.
pub fn validate_meta_action(action: &MetaAction, policy: &EditPolicy) -> Result<Verdict> {
    let mut seen = std::collections::BTreeSet::new();
    for e in &action.edits {
        check_relative_path(&e.target)?;
        if !seen.insert(e.target.as_str()) {
            return Err(Error::MalformedAction(format!(
                "{} is edited twice",
                e.target
            )));
        }
    }
    if let Some(plan) = &action.run_plan {
        plan.validate()
            .map_err(|e| Error::MalformedAction(e.to_string()))?;
    }
    let mut violations = Vec::new();
    if action.edits.is_empty() && action.run_plan.is_none() {
        violations.push(Violation {
            target: String::new(),
            reason: "action changes nothing".into(),
        });
    }
    for e in &action.edits {
        let reason = if policy.is_forbidden(&e.target) {
            "forbidden path"
        } else if !policy.is_allowed(&e.target) {
            "outside the allowed paths"
        } else {
            continue;
        };
        violations.push(Violation {
            target: e.target.clone(),
            reason: reason.into(),
        });
    }
    Ok(if violations.is_empty() {
        Verdict::Accept
    } else {
        Verdict::Reject(violations)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeKind {
    Created,
    Replaced,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppliedChange {
    pub target: String,
    pub kind: ChangeKind,
    pub bytes_before: u64,
    pub bytes_after: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ApplyReport {
    pub changes: Vec<AppliedChange>,
}

impl fmt::Display for ApplyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.changes {
            let verb = match c.kind {
                ChangeKind::Created => "created",
                ChangeKind::Replaced => "replaced",
                ChangeKind::Deleted => "deleted",
            };
            writeln!(
                f,
                "{verb} {} ({} -> {} bytes)",
                c.target, c.bytes_before, c.bytes_after
            )?;
        }
        Ok(())
    }
}

/// Applies an accepted action's file edits all-or-nothing. The run plan is
/// the controller's business and is not written here.
pub fn apply_meta_action(root: &Path, action: &MetaAction, policy: &EditPolicy) -> Result<ApplyReport> {
    match validate_meta_action(action, policy)? {
        Verdict::Accept => apply_edits(root, &action.edits, None),
        Verdict::Reject(v) => Err(Error::Policy(v)),
    }
}

struct Staged {
    target: PathBuf,
    tmp: Option<PathBuf>,
    backup: PathBuf,
    existed: bool,
    committed: bool,
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{tag}"))
}

fn apply_edits(root: &Path, edits: &[Edit], fail_at: Option<usize>) -> Result<ApplyReport> {
    let mut created_dirs: Vec<PathBuf> = Vec::new();
    let mut staged: Vec<Staged> = Vec::new();
    let mut report = ApplyReport::default();

    let rollback = |staged: &mut Vec<Staged>, created_dirs: &[PathBuf]| {
        for s in staged.iter().rev() {
            if s.committed {
                if s.tmp.is_some() {
                    let _ = fs::remove_file(&s.target);
                }
                if s.existed {
                    let _ = fs::rename(&s.backup, &s.target);
                }
            }
            if let Some(t) = &s.tmp {
                let _ = fs::remove_file(t);
            }
        }
        for d in created_dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    };

    // Stage: write every new file beside its target.
    for (i, e) in edits.iter().enumerate() {
        let target = root.join(&e.target);
        let step = (|| -> std::result::Result<Staged, String> {
            let meta = fs::symlink_metadata(&target).ok();
            if meta.as_ref().is_some_and(|m| !m.is_file()) {
                return Err(format!("{} is not a regular file", e.target));
            }
            let existed = meta.is_some();
            let before = meta.map(|m| m.len()).unwrap_or(0);
            let tmp = match &e.content {
                EditContent::Write(bytes) => {
                    let parent = target.parent().expect("joined path has a parent");
                    let mut missing = Vec::new();
                    let mut p = parent;
                    while !p.exists() {
                        missing.push(p.to_path_buf());
                        p = p.parent().expect("root exists");
                    }
                    fs::create_dir_all(parent).map_err(|err| format!("{}: {err}", e.target))?;
                    created_dirs.extend(missing.into_iter().rev());
                    let tmp = sibling(&target, "evo-stage");
                    fs::write(&tmp, bytes).map_err(|err| format!("{}: {err}", e.target))?;
                    report.changes.push(AppliedChange {
                        target: e.target.clone(),
                        kind: if existed { ChangeKind::Replaced } else { ChangeKind::Created },
                        bytes_before: before,
                        bytes_after: bytes.len() as u64,
                    });
                    Some(tmp)
                }
                EditContent::Delete => {
                    if !existed {
                        return Err(format!("{} does not exist", e.target));
                    }
                    report.changes.push(AppliedChange {
                        target: e.target.clone(),
                        kind: ChangeKind::Deleted,
                        bytes_before: before,
                        bytes_after: 0,
                    });
                    None
                }
            };
            Ok(Staged {
                backup: sibling(&target, "evo-backup"),
                target,
                tmp,
                existed,
                committed: false,
            })
        })();
        match step {
            Ok(s) => staged.push(s),
            Err(msg) => {
                rollback(&mut staged, &created_dirs);
                return Err(Error::EditFailed(format!("edit {i}: {msg}")));
            }
        }
    }

    // Commit: move originals aside, then move staged files in.
    for i in 0..staged.len() {
        let s = &mut staged[i];
        let r = (|| -> std::io::Result<()> {
            if fail_at == Some(i) {
                return Err(std::io::Error::other("injected failure"));
            }
            if s.existed {
                fs::rename(&s.target, &s.backup)?;
            }
            s.committed = true;
            if let Some(t) = &s.tmp {
                fs::rename(t, &s.target)?;
            }
            Ok(())
        })();
        if let Err(err) = r {
            let target = edits[i].target.clone();
            rollback(&mut staged, &created_dirs);
            return Err(Error::EditFailed(format!("{target}: {err}")));
        }
    }
    for s in &staged {
        if s.existed {
            let _ = fs::remove_file(&s.backup);
        }
    }
    Ok(report)
}

/// Contents of `evo.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceConfig {
    pub task: TaskKind,
    pub global_eval_budget: u64,
    pub global_round_cap: u64,
    #[serde(default)]
    pub prices: Prices,
    #[serde(default)]
    pub policy: EditPolicy,
}

/// Per-token prices used to bill external mechanism usage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Prices {
    pub p_in: f64,
    pub p_cache: f64,
    pub p_out: f64,
}

impl WorkspaceConfig {
    pub fn new(task: TaskKind) -> Self {
        WorkspaceConfig {
            task,
            global_eval_budget: DEFAULT_GLOBAL_BUDGET,
            global_round_cap: DEFAULT_ROUND_CAP,
            prices: Prices::default(),
            policy: EditPolicy::default(),
        }
    }
}

const DEFAULT_SKILL: &str = "\
# Evolve skill

Improve the current best candidate for this workspace's task.

- Read `sessions/_next_goal.md` for the current goal.
- Mechanism parameters live in `shared/mechanism.toml`.
- Notes for later sessions go under `shared/notes/`.
- Never edit `candidates/` or the eval store; submit through `eval`.
";

const DEFAULT_GOAL: &str = "# Next goal\n\nImprove on the best candidate.\n";

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    config: WorkspaceConfig,
}

impl Workspace {
    /// Creates the full layout under an empty or absent `root`.
    pub fn init(root: impl AsRef<Path>, config: WorkspaceConfig, seed: Option<&[u8]>) -> Result<Self> {
        let root = root.as_ref();
        if root.exists() {
            let mut entries = io_at(fs::read_dir(root), root)?;
            if entries.next().is_some() {
                return Err(Error::NotEmpty(root.to_path_buf()));
            }
        }
        for d in [
            layout::CANDIDATES,
            layout::SESSIONS,
            layout::SHARED_NOTES,
            layout::SHARED_TOOLS,
            layout::SHARED_VALIDATORS,
            layout::SKILL,
        ] {
            let p = root.join(d);
            io_at(fs::create_dir_all(&p), &p)?;
        }
        let toml = toml::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;
        let mech = toml::to_string(&MechanismConfig::default_for(config.task))
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut plan = RunPlan::default();
        plan.stop.global_round_cap = config.global_round_cap;
        let plan_text = plan.to_string();
        let files: [(&str, &[u8]); 6] = [
            (layout::CONFIG, toml.as_bytes()),
            (layout::NEXT_GOAL, DEFAULT_GOAL.as_bytes()),
            (layout::SKILL_FILE, DEFAULT_SKILL.as_bytes()),
            (layout::MECHANISM_CONFIG, mech.as_bytes()),
            (layout::RUN_PLAN, plan_text.as_bytes()),
            (layout::EVAL_DB, b""),
        ];
        for (rel, bytes) in files {
            let p = root.join(rel);
            io_at(fs::write(&p, bytes), &p)?;
        }
        let ws = Workspace {
            root: root.to_path_buf(),
            config,
        };
        if let Some(seed) = seed {
            let p = ws.staged_seed_path();
            io_at(fs::create_dir_all(p.parent().expect("has parent")), &p)?;
            io_at(fs::write(&p, seed), &p)?;
        }
        Ok(ws)
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let cfg_path = root.join(layout::CONFIG);
        if !cfg_path.is_file() || !root.join(layout::EVAL_DB).is_file() {
            return Err(Error::NotAWorkspace(root.to_path_buf()));
        }
        let text = io_at(fs::read_to_string(&cfg_path), &cfg_path)?;
        let config: WorkspaceConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", cfg_path.display())))?;
        Ok(Workspace {
            root: root.to_path_buf(),
            config,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &WorkspaceConfig {
        &self.config
    }

    pub fn task(&self) -> TaskKind {
        self.config.task
    }

    pub fn policy(&self) -> &EditPolicy {
        &self.config.policy
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn staged_seed_path(&self) -> PathBuf {
        self.root
            .join(layout::STAGING_SEED)
            .join(self.task().artifact_file())
    }

    pub fn staged_seed(&self) -> Result<Option<Vec<u8>>> {
        let p = self.staged_seed_path();
        if p.is_file() {
            Ok(Some(io_at(fs::read(&p), &p)?))
        } else {
            Ok(None)
        }
    }

    /// The current plan document, with the configured round cap.
    pub fn current_plan(&self) -> Result<RunPlan> {
        let p = self.path(layout::RUN_PLAN);
        let mut plan = if p.is_file() {
            RunPlan::parse(&io_at(fs::read_to_string(&p), &p)?)?
        } else {
            RunPlan::default()
        };
        plan.stop.global_round_cap = self.config.global_round_cap;
        Ok(plan)
    }

    pub fn write_plan(&self, plan: &RunPlan) -> Result<()> {
        let p = self.path(layout::RUN_PLAN);
        io_at(fs::write(&p, plan.to_string()), &p)
    }

    pub fn mechanism_config(&self) -> Result<MechanismConfig> {
        let p = self.path(layout::MECHANISM_CONFIG);
        let text = io_at(fs::read_to_string(&p), &p)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
    }

    pub fn session_dir(&self, id: u64) -> PathBuf {
        self.root.join(layout::session_dir(id))
    }

    /// Smallest `k >= 1` with no `sessions/session_<k>` directory.
    pub fn next_session_id(&self) -> u64 {
        (1..).find(|k| !self.session_dir(*k).exists()).expect("unbounded")
    }
}
