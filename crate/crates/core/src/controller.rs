//! The outer loop: meta phases that edit the mechanism and issue run plans,
//! and evolution segments that run the mechanism round by round.

use std::fmt;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Duration;

use crate::error::{io_at, Error, Result};
use crate::gateway::{cost_per_round, CostRecord, Evaluation, Gateway, Quota};
use crate::layout;
use crate::mechanisms::external::{copy_read_only, copy_tree, reset_dir, run_with_timeout, Exit};
use crate::mechanisms::{load_mechanism, Mechanism, MechanismEnv, ProcedureMechanism, MechanismConfig, RoundInput, RoundOutput};
use crate::plan::RunPlan;
use crate::registry::Registry;
use crate::tasks::Direction;
use crate::workspace::{
    apply_meta_action, validate_meta_action, ApplyReport, Edit, MetaAction, Verdict, Workspace,
};

const RECENT_ERRORS: usize = 5;

/// Summary of the history up to some round.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub round: u64,
    pub direction: Direction,
    pub best_score: Option<f64>,
    /// Earliest round that reached `best_score`.
    pub best_round: Option<u64>,
    pub rounds_since_improve: u64,
    pub invalid_count: u64,
    pub total_count: u64,
    /// Consecutive invalid rounds ending at `round`.
    pub invalid_streak: u64,
    pub total_cost: f64,
    pub cost_per_round: f64,
    pub recent_errors: Vec<(u64, String)>,
}

/// Builds the observation of rounds `1..=round` from the registry.
pub fn summarize(registry: &Registry, round: u64) -> Observation {
    let round = round.min(registry.latest_round());
    let direction = registry.task().direction("combined_score");
    let mut best: Option<(f64, u64)> = None;
    let (mut invalid, mut total, mut streak) = (0, 0, 0);
    let mut errors = Vec::new();
    for r in 1..=round {
        let Some(rec) = registry.eval(r) else { continue };
        total += 1;
        if rec.is_valid() {
            streak = 0;
            if best.is_none_or(|(b, _)| direction.better(rec.combined_score, b)) {
                best = Some((rec.combined_score, r));
            }
        } else {
            invalid += 1;
            streak += 1;
            errors.push((r, rec.error.clone().unwrap_or_else(|| "invalid".into())));
        }
    }
    let costs = registry.costs().unwrap_or_default();
    let total_cost: f64 = costs
        .iter()
        .filter(|c| c.round <= round)
        .map(CostRecord::round_cost)
        .fold(0.0, |a, b| a + b);
    let per_round = if round == 0 {
        0.0
    } else {
        cost_per_round(&costs, round).unwrap_or(0.0)
    };
    let skip = errors.len().saturating_sub(RECENT_ERRORS);
    Observation {
        round,
        direction,
        best_score: best.map(|b| b.0),
        best_round: best.map(|b| b.1),
        rounds_since_improve: round - best.map_or(0, |b| b.1),
        invalid_count: invalid,
        total_count: total,
        invalid_streak: streak,
        total_cost,
        cost_per_round: per_round,
        recent_errors: errors.split_off(skip),
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "round: {}", self.round)?;
        match (self.best_score, self.best_round) {
            (Some(s), Some(r)) => {
                writeln!(f, "best_score: {s:?}")?;
                writeln!(f, "best_round: {r}")?;
            }
            _ => {
                writeln!(f, "best_score: none")?;
                writeln!(f, "best_round: none")?;
            }
        }
        writeln!(f, "rounds_since_improve: {}", self.rounds_since_improve)?;
        writeln!(f, "invalid: {}/{}", self.invalid_count, self.total_count)?;
        writeln!(f, "invalid_streak: {}", self.invalid_streak)?;
        writeln!(f, "total_cost: {:?}", self.total_cost)?;
        writeln!(f, "cost_per_round: {:?}", self.cost_per_round)?;
        if self.recent_errors.is_empty() {
            writeln!(f, "recent_errors: none")?;
        } else {
            writeln!(f, "recent_errors:")?;
            for (r, e) in &self.recent_errors {
                writeln!(f, "  round {r}: {e}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    Target,
    Plateau,
    InvalidStreak,
    Cap,
    Quota,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Budget => "budget",
            StopReason::Target => "target",
            StopReason::Plateau => "plateau",
            StopReason::InvalidStreak => "invalid-streak",
            StopReason::Cap => "cap",
            StopReason::Quota => "quota",
        })
    }
}

/// Stop rules in precedence order: target, cap, quota, plateau,
/// invalid streak, round budget.
pub fn check_stop(obs: &Observation, plan: &RunPlan, quota: &Quota, rounds_run: u64) -> Option<StopReason> {
    let stop = &plan.stop;
    if let (Some(t), Some(b)) = (stop.target_score, obs.best_score) {
        if obs.direction.reaches(b, t) {
            return Some(StopReason::Target);
        }
    }
    if obs.round >= stop.global_round_cap {
        return Some(StopReason::Cap);
    }
    if !quota.permits() {
        return Some(StopReason::Quota);
    }
    if obs.rounds_since_improve >= stop.plateau_window {
        return Some(StopReason::Plateau);
    }
    if obs.invalid_streak >= stop.invalid_streak_limit {
        return Some(StopReason::InvalidStreak);
    }
    if rounds_run >= plan.max_rounds {
        return Some(StopReason::Budget);
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentResult {
    pub session_id: u64,
    pub rounds_run: u64,
    pub stop_reason: StopReason,
    pub best_at_end: Option<(u64, f64)>,
    pub seeded: bool,
    pub replayed: usize,
}

impl fmt::Display for SegmentResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "session: {}", self.session_id)?;
        writeln!(f, "seeded: {}", self.seeded)?;
        writeln!(f, "rounds_run: {}", self.rounds_run)?;
        writeln!(f, "stop_reason: {}", self.stop_reason)?;
        match self.best_at_end {
            Some((r, s)) => writeln!(f, "best: round {r} score {s:?}")?,
            None => writeln!(f, "best: none")?,
        }
        writeln!(f, "replayed: {}", self.replayed)
    }
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

pub struct Controller {
    ws: Workspace,
    registry: Registry,
    gateway: Gateway,
    env: MechanismEnv,
}

impl Controller {
    /// Opens a workspace for running. Holds the store's writer lock.
    pub fn open(root: impl AsRef<Path>, env: MechanismEnv) -> Result<Self> {
        let ws = Workspace::open(root.as_ref())?;
        let registry = Registry::open(ws.root(), ws.task())?;
        let used = registry.store().len() as u64;
        let global = ws.config().global_eval_budget.saturating_sub(used);
        let plan = ws.current_plan()?;
        let gateway = Gateway::new(ws.task(), Quota::new(global, plan.session_eval_budget));
        Ok(Controller {
            ws,
            registry,
            gateway,
            env,
        })
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn quota(&self) -> Quota {
        self.gateway.quota()
    }

    pub fn observe(&self) -> Observation {
        summarize(&self.registry, self.registry.latest_round())
    }

    /// Evaluates the staged seed as round 1 when the registry is empty.
    pub fn ensure_seeded(&mut self, session_id: u64) -> Result<Option<Evaluation>> {
        if !self.registry.is_empty() {
            return Ok(None);
        }
        let seed = self.ws.staged_seed()?.ok_or(Error::SeedMissing)?;
        if !self.gateway.quota().permits() {
            return Err(Error::QuotaRefused {
                global: self.gateway.quota().global_remaining,
                session: self.gateway.quota().session_remaining,
            });
        }
        let c = self.registry.new_candidate(None, "seed", session_id)?;
        self.registry.write_artifact(c.round, &seed)?;
        self.registry.record_cost(&CostRecord::zero(c.round))?;
        let ev = self.gateway.evaluate_round(&mut self.registry, c.round)?;
        self.registry.append_log(
            c.round,
            &[
                "seeded from staging".to_string(),
                format!("eval: validity {:?} score {:?}", ev.record.validity, ev.record.combined_score),
            ],
        )?;
        Ok(Some(ev))
    }

    /// Runs one segment in a fresh session.
    pub fn run_segment(&mut self, mechanism: &mut dyn Mechanism, plan: &RunPlan) -> Result<SegmentResult> {
        let id = self.ws.next_session_id();
        self.run_segment_in(mechanism, plan, id)
    }

    fn run_segment_in(&mut self, mechanism: &mut dyn Mechanism, plan: &RunPlan, session_id: u64) -> Result<SegmentResult> {
        plan.validate()?;
        let session_dir = self.ws.session_dir(session_id);
        io_at(fs::create_dir_all(&session_dir), &session_dir)?;
        self.gateway.reset_session(plan.session_eval_budget);
        let seeded = self.ensure_seeded(session_id)?.is_some();
        self.gateway.reset_session(plan.session_eval_budget);

        let mut rounds_run = 0;
        let stop_reason = loop {
            let obs = self.observe();
            if let Some(r) = check_stop(&obs, plan, &self.gateway.quota(), rounds_run) {
                break r;
            }
            self.run_round(mechanism, session_id)?;
            rounds_run += 1;
        };
        let replayed = self.registry.replay_session(&session_dir)?;
        let obs = self.observe();
        let result = SegmentResult {
            session_id,
            rounds_run,
            stop_reason,
            best_at_end: obs.best_round.zip(obs.best_score),
            seeded,
            replayed,
        };
        let p = session_dir.join(layout::SEGMENT_REPORT);
        io_at(fs::write(&p, format!("mechanism: {}\n{result}", mechanism.id())), &p)?;
        Ok(result)
    }

    fn run_round(&mut self, mechanism: &mut dyn Mechanism, session_id: u64) -> Result<()> {
        let selected = catch_unwind(AssertUnwindSafe(|| mechanism.select(&self.registry)));
        let info = match selected {
            Ok(Ok(i)) => Ok(i),
            Ok(Err(e)) => Err(format!("selection failed: {e}")),
            Err(p) => Err(format!("mechanism crashed: {}", panic_text(p))),
        };
        let parent = info.as_ref().ok().map(|i| i.parent.round);
        let cand = self.registry.new_candidate(parent, &mechanism.id(), session_id)?;
        let round = cand.round;
        let mut logs = Vec::new();

        let produced: std::result::Result<RoundOutput, String> = match &info {
            Ok(info) => {
                let input = RoundInput {
                    workspace: &self.ws,
                    registry: &self.registry,
                    info,
                    candidate: &cand,
                    session_id,
                    quota: self.gateway.quota(),
                };
                match catch_unwind(AssertUnwindSafe(|| mechanism.produce(&input))) {
                    Ok(Ok(o)) => Ok(o),
                    Ok(Err(e)) => Err(format!("mechanism error: {e}")),
                    Err(p) => Err(format!("mechanism crashed: {}", panic_text(p))),
                }
            }
            Err(e) => Err(e.clone()),
        };

        let prices = self.ws.config().prices;
        let mut cost = CostRecord::zero(round);
        cost.p_in = prices.p_in;
        cost.p_cache = prices.p_cache;
        cost.p_out = prices.p_out;
        let evaluated = match produced {
            Ok(out) => {
                self.gateway.charge(out.local_evals);
                logs.extend(out.logs);
                if let Some(u) = out.usage {
                    cost.n_in = u.n_in;
                    cost.n_cache = u.n_cache;
                    cost.n_out = u.n_out;
                }
                self.registry.record_cost(&cost)?;
                match out.artifact {
                    Some(bytes) => {
                        self.registry.write_artifact(round, &bytes)?;
                        self.gateway.evaluate_round(&mut self.registry, round)
                    }
                    None => {
                        let why = out.failure.unwrap_or_else(|| "no-artifact".into());
                        self.gateway.record_failure(&mut self.registry, round, &why)
                    }
                }
            }
            Err(msg) => {
                logs.push(msg.clone());
                self.registry.record_cost(&cost)?;
                self.gateway.record_failure(&mut self.registry, round, &msg)
            }
        };
        match evaluated {
            Ok(ev) => logs.push(format!(
                "eval: validity {:?} score {:?}",
                ev.record.validity, ev.record.combined_score
            )),
            Err(Error::QuotaRefused { .. }) => logs.push("not evaluated: quota exhausted".into()),
            Err(e) => return Err(e),
        }
        self.registry.append_log(round, &logs)
    }

    /// Alternates meta phases and segments for `phases` phases.
    pub fn run_meta_loop(&mut self, source: &mut dyn MetaSource, phases: u64) -> Result<RunReport> {
        let mut report = RunReport::default();
        let mut fallback: Option<MechanismConfig> = None;
        for _ in 0..phases {
            let id = self.ws.next_session_id();
            let session_dir = self.ws.session_dir(id);
            io_at(fs::create_dir_all(&session_dir), &session_dir)?;
            let observation = self.observe();
            let mut plan = self.ws.current_plan()?;
            let decision = source.decide(&MetaContext {
                workspace: &self.ws,
                observation: &observation,
                plan: &plan,
                session_dir: &session_dir,
            });
            let (action_summary, outcome) = match decision {
                Err(e) => ("no action".to_string(), PhaseOutcome::Rejected(vec![format!("meta source failed: {e}")])),
                Ok(action) => {
                    let summary = action.summary();
                    let outcome = match validate_meta_action(&action, self.ws.policy()) {
                        Err(e) => PhaseOutcome::Rejected(vec![e.to_string()]),
                        Ok(Verdict::Reject(v)) => {
                            PhaseOutcome::Rejected(v.iter().map(ToString::to_string).collect())
                        }
                        Ok(Verdict::Accept) => match apply_meta_action(self.ws.root(), &action, self.ws.policy()) {
                            Ok(applied) => {
                                if let Some(mut p) = action.run_plan {
                                    p.stop.global_round_cap = self.ws.config().global_round_cap;
                                    self.ws.write_plan(&p)?;
                                    plan = p;
                                }
                                PhaseOutcome::Applied(applied)
                            }
                            Err(e) => PhaseOutcome::Rejected(vec![e.to_string()]),
                        },
                    };
                    (summary, outcome)
                }
            };
            let mut notes = Vec::new();
            let mut mechanism: Box<dyn Mechanism> = match load_mechanism(&self.ws, &self.env) {
                Ok(m) => {
                    fallback = self.ws.mechanism_config().ok();
                    m
                }
                Err(e) => {
                    notes.push(format!("mechanism reload failed, keeping previous: {e}"));
                    let cfg = fallback
                        .clone()
                        .unwrap_or_else(|| MechanismConfig::default_for(self.ws.task()));
                    Box::new(ProcedureMechanism::new(cfg))
                }
            };
            let segment = self.run_segment_in(mechanism.as_mut(), &plan, id)?;
            let phase = PhaseReport {
                session_id: id,
                source: source.name(),
                observation,
                action_summary,
                outcome,
                plan,
                mechanism: mechanism.id(),
                notes,
                segment,
            };
            let p = session_dir.join(layout::PHASE_REPORT);
            io_at(fs::write(&p, phase.to_string()), &p)?;
            report.phases.push(phase);
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhaseOutcome {
    Applied(ApplyReport),
    Rejected(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub session_id: u64,
    pub source: String,
    pub observation: Observation,
    pub action_summary: String,
    pub outcome: PhaseOutcome,
    pub plan: RunPlan,
    pub mechanism: String,
    pub notes: Vec<String>,
    pub segment: SegmentResult,
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("  {l}\n")).collect()
}

impl fmt::Display for PhaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "phase: session_{}", self.session_id)?;
        writeln!(f, "meta source: {}", self.source)?;
        write!(f, "observation:\n{}", indent(&self.observation.to_string()))?;
        write!(f, "action:\n{}", indent(&self.action_summary))?;
        match &self.outcome {
            PhaseOutcome::Applied(r) => write!(f, "verdict: applied\n{}", indent(&r.to_string()))?,
            PhaseOutcome::Rejected(v) => write!(f, "verdict: rejected\n{}", indent(&v.join("\n")))?,
        }
        write!(f, "plan:\n{}", indent(&self.plan.to_string()))?;
        writeln!(f, "mechanism: {}", self.mechanism)?;
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        write!(f, "segment:\n{}", indent(&self.segment.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub phases: Vec<PhaseReport>,
}

impl RunReport {
    pub fn rounds_run(&self) -> u64 {
        self.phases.iter().map(|p| p.segment.rounds_run).sum()
    }
}

pub struct MetaContext<'a> {
    pub workspace: &'a Workspace,
    pub observation: &'a Observation,
    pub plan: &'a RunPlan,
    pub session_dir: &'a Path,
}

/// Produces one meta-action per phase.
pub trait MetaSource {
    fn name(&self) -> String;
    fn decide(&mut self, ctx: &MetaContext<'_>) -> Result<MetaAction>;
}

/// Built-in meta policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptedMeta {
    /// Keep the mechanism and re-issue the current plan.
    NoOp,
    /// When half a plateau window has passed without improvement, double
    /// the perturbation scale and extend the round budget by half.
    WidenOnPlateau,
}

impl MetaSource for ScriptedMeta {
    fn name(&self) -> String {
        match self {
            ScriptedMeta::NoOp => "no-op".into(),
            ScriptedMeta::WidenOnPlateau => "widen-on-plateau".into(),
        }
    }

    fn decide(&mut self, ctx: &MetaContext<'_>) -> Result<MetaAction> {
        let plan = ctx.plan.clone();
        let stalled = ctx.observation.round > 0
            && 2 * ctx.observation.rounds_since_improve >= plan.stop.plateau_window;
        if *self == ScriptedMeta::NoOp || !stalled {
            return Ok(MetaAction {
                edits: Vec::new(),
                run_plan: Some(plan),
            });
        }
        let mut cfg = ctx.workspace.mechanism_config()?;
        cfg.params.sigma *= 2.0;
        let text = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        let mut next = plan;
        next.max_rounds += (next.max_rounds / 2).max(1);
        next.session_eval_budget = next.session_eval_budget.max(next.max_rounds);
        Ok(MetaAction {
            edits: vec![Edit::write(layout::MECHANISM_CONFIG, text)],
            run_plan: Some(next),
        })
    }
}

/// A meta-agent process. It sees copies of the editable files and the
/// observation in `EVO_META_VIEW` and writes an action directory to
/// `EVO_ACTION_DIR`.
pub struct ExternalMeta {
    pub command: Vec<String>,
    pub timeout: Duration,
}

impl MetaSource for ExternalMeta {
    fn name(&self) -> String {
        format!("external:{}", self.command.first().cloned().unwrap_or_default())
    }

    fn decide(&mut self, ctx: &MetaContext<'_>) -> Result<MetaAction> {
        let Some((program, args)) = self.command.split_first() else {
            return Err(Error::Config("meta command is empty".into()));
        };
        let ws = ctx.workspace;
        let view = ctx.session_dir.join("meta_view");
        let action_dir = ctx.session_dir.join("meta_action");
        reset_dir(&view)?;
        reset_dir(&action_dir)?;
        copy_tree(&ws.path(layout::SHARED), &view.join("shared"))?;
        copy_tree(&ws.path(layout::SKILL), &view.join("skill"))?;
        copy_read_only(&ws.path(layout::NEXT_GOAL), &view.join("_next_goal.md"))?;
        let obs = view.join("observation.txt");
        io_at(fs::write(&obs, ctx.observation.to_string()), &obs)?;
        let plan = view.join("run_plan.txt");
        io_at(fs::write(&plan, ctx.plan.to_string()), &plan)?;

        let mut cmd = Command::new(program);
        cmd.args(args)
            .current_dir(&view)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .env("EVO_META_VIEW", &view)
            .env("EVO_ACTION_DIR", &action_dir)
            .env("EVO_TASK", ws.task().name());
        match run_with_timeout(cmd, self.timeout)? {
            Exit::TimedOut => Err(Error::External("meta process timed out".into())),
            Exit::Finished(s) if !s.success() => Err(Error::External(format!("meta process exited with {s}"))),
            Exit::Finished(_) => MetaAction::read_dir(&action_dir),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(round: u64, best: Option<(f64, u64)>) -> Observation {
        Observation {
            round,
            direction: Direction::Maximize,
            best_score: best.map(|b| b.0),
            best_round: best.map(|b| b.1),
            rounds_since_improve: round - best.map_or(0, |b| b.1),
            invalid_count: 0,
            total_count: round,
            invalid_streak: 0,
            total_cost: 0.0,
            cost_per_round: 0.0,
            recent_errors: Vec::new(),
        }
    }

    #[test]
    fn plateau_threshold_is_inclusive() {
        let plan = RunPlan { max_rounds: 100, ..RunPlan::default() };
        let q = Quota::new(50, 50);
        assert_eq!(check_stop(&obs(34, Some((1.0, 10))), &plan, &q, 1), None);
        assert_eq!(check_stop(&obs(35, Some((1.0, 10))), &plan, &q, 1), Some(StopReason::Plateau));
    }

    #[test]
    fn precedence_order() {
        let mut plan = RunPlan { max_rounds: 1, ..RunPlan::default() };
        plan.stop.target_score = Some(0.9459);
        let exhausted = Quota::new(0, 5);
        let mut o = obs(100, Some((0.9459, 1)));
        o.invalid_streak = 50;
        assert_eq!(check_stop(&o, &plan, &exhausted, 9), Some(StopReason::Target));
        plan.stop.target_score = None;
        assert_eq!(check_stop(&o, &plan, &exhausted, 9), Some(StopReason::Cap));
        o.round = 99;
        assert_eq!(check_stop(&o, &plan, &exhausted, 9), Some(StopReason::Quota));
        let q = Quota::new(5, 5);
        assert_eq!(check_stop(&o, &plan, &q, 9), Some(StopReason::Plateau));
        o.rounds_since_improve = 0;
        assert_eq!(check_stop(&o, &plan, &q, 9), Some(StopReason::InvalidStreak));
        o.invalid_streak = 0;
        assert_eq!(check_stop(&o, &plan, &q, 9), Some(StopReason::Budget));
        assert_eq!(check_stop(&o, &plan, &q, 0), None);
    }

    #[test]
    fn minimizing_target() {
        let mut plan = RunPlan::default();
        plan.stop.target_score = Some(1000.0);
        let mut o = obs(3, Some((1200.0, 2)));
        o.direction = Direction::Minimize;
        assert_eq!(check_stop(&o, &plan, &Quota::new(5, 5), 0), None);
        o.best_score = Some(999.0);
        assert_eq!(check_stop(&o, &plan, &Quota::new(5, 5), 0), Some(StopReason::Target));
    }

    #[test]
    fn stop_is_deterministic() {
        let plan = RunPlan::default();
        let o = obs(20, Some((2.0, 10)));
        let q = Quota::new(0, 5);
        assert_eq!(check_stop(&o, &plan, &q, 3), check_stop(&o, &plan, &q, 3));
    }
}
