//! Fixed workspace-relative paths.

pub const CANDIDATES: &str = "candidates";
pub const SESSIONS: &str = "sessions";
pub const NEXT_GOAL: &str = "sessions/_next_goal.md";
pub const RUN_PLAN: &str = "sessions/run_plan.txt";
pub const SHARED: &str = "shared";
pub const SHARED_NOTES: &str = "shared/notes";
pub const SHARED_TOOLS: &str = "shared/tools";
pub const SHARED_VALIDATORS: &str = "shared/validators";
pub const MECHANISM_CONFIG: &str = "shared/mechanism.toml";
pub const SKILL: &str = "skill";
pub const SKILL_FILE: &str = "skill/evolve_skill.md";
pub const EVAL_DB: &str = ".eval.db";
pub const CONFIG: &str = "evo.toml";
pub const STAGING_SEED: &str = "staging/seed";

/// Relative to a session directory.
pub const AGENT_WORKSPACE: &str = "agent_workspace";
/// Relative to a session directory.
pub const LOCAL_DB: &str = "agent_workspace/.eval.local.db";
pub const PHASE_REPORT: &str = "phase_report.txt";
pub const SEGMENT_REPORT: &str = "segment_report.txt";
pub const SESSION_NOTES: &str = "SESSION_NOTES.md";

pub fn session_dir(id: u64) -> String {
    format!("{SESSIONS}/session_{id}")
}
