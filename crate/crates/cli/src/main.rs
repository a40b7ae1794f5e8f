use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use evoharness_core::mechanisms::{ExternalConfig, ExternalMechanism, MechanismKind};
use evoharness_core::{
    seed_artifact, summarize, Controller, Error, EvalStore, ExternalMeta, Gateway, MechanismEnv,
    MetaSource, PhaseOutcome, Quota, Registry, ScriptedMeta, TaskKind, Workspace,
    WorkspaceConfig,
};

#[derive(Parser)]
#[command(name = "evoharness", version, about = "Harnessed evolution workspaces")]
struct Cli {
    /// Workspace root.
    #[arg(short, long, global = true, default_value = ".")]
    workspace: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetaPolicy {
    NoOp,
    WidenOnPlateau,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Csv,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a workspace and stage the task's seed artifact.
    Init {
        #[arg(long)]
        task: TaskKind,
        /// Seed artifact to stage instead of the built-in one.
        #[arg(long)]
        seed_file: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        global_budget: u64,
        #[arg(long, default_value_t = 100)]
        round_cap: u64,
    },
    /// Score a program into a session-local store.
    Eval {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        db_path: PathBuf,
        #[arg(long, env = "EVO_TASK")]
        task: TaskKind,
        #[arg(long, env = "EVO_ROUND", value_parser = clap::value_parser!(u64).range(1..))]
        round: u64,
        /// Session evaluations available to this invocation's round.
        #[arg(long, env = "EVO_EVAL_BUDGET", default_value_t = 15)]
        budget: u64,
        #[arg(long, env = "EVO_GLOBAL_REMAINING", default_value_t = 100)]
        global_remaining: u64,
    },
    /// Run one evolution segment under the current plan.
    RunSegment {
        /// Override the plan's round budget.
        #[arg(long)]
        max_rounds: Option<u64>,
    },
    /// Alternate meta phases and segments.
    RunMeta {
        #[arg(long, default_value_t = 1)]
        phases: u64,
        #[arg(long, value_enum, default_value = "no-op")]
        policy: MetaPolicy,
        /// External meta-agent command; overrides --policy.
        #[arg(long, num_args = 1.., allow_hyphen_values = true)]
        meta_command: Option<Vec<String>>,
        #[arg(long, default_value_t = 600.0)]
        meta_timeout: f64,
    },
    /// Run a single external-mechanism round.
    RunInnerAgent {
        #[arg(long, default_value_t = 600.0)]
        timeout: f64,
        /// Command to run; defaults to the one in shared/mechanism.toml.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        command: Vec<String>,
    },
    /// Print the current observation.
    Status,
    /// List every round.
    History,
    /// Replay a session's local store into the workspace store.
    ReplayDb {
        #[arg(long)]
        session: u64,
    },
    /// Per-round table.
    Export {
        #[arg(long, value_enum, default_value = "csv")]
        format: ExportFormat,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn mechanism_env() -> MechanismEnv {
    MechanismEnv {
        eval_bin: std::env::current_exe().ok(),
    }
}

fn open_read(root: &Path) -> anyhow::Result<(Workspace, Registry)> {
    let ws = Workspace::open(root)?;
    let reg = Registry::open_read_only(ws.root(), ws.task())?;
    Ok((ws, reg))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = cli.workspace;
    let mut out = std::io::stdout().lock();
    match cli.command {
        Cmd::Init {
            task,
            seed_file,
            global_budget,
            round_cap,
        } => {
            let seed = match seed_file {
                Some(p) => std::fs::read(&p).with_context(|| p.display().to_string())?,
                None => seed_artifact(task).into_bytes(),
            };
            let mut cfg = WorkspaceConfig::new(task);
            cfg.global_eval_budget = global_budget;
            cfg.global_round_cap = round_cap;
            let ws = Workspace::init(&root, cfg, Some(&seed))?;
            writeln!(out, "initialized {} workspace at {}", task, ws.root().display())?;
        }
        Cmd::Eval {
            program,
            db_path,
            task,
            round,
            budget,
            global_remaining,
        } => {
            let mut store = EvalStore::open(&db_path)?;
            let used = store.records().iter().filter(|r| r.round == round).count() as u64;
            let quota = Quota::new(
                global_remaining.saturating_sub(used),
                budget.saturating_sub(used),
            );
            let mut gw = Gateway::new(task, quota);
            let ev = gw.evaluate_attempt(&mut store, &program, round)?;
            write!(out, "{}", ev.report)?;
        }
        Cmd::RunSegment { max_rounds } => {
            let mut ctl = Controller::open(&root, mechanism_env())?;
            let mut plan = ctl.workspace().current_plan()?;
            if let Some(n) = max_rounds {
                plan.max_rounds = n;
            }
            let mut mech = evoharness_core::load_mechanism(ctl.workspace(), &mechanism_env())?;
            let r = ctl.run_segment(mech.as_mut(), &plan)?;
            write!(out, "{r}")?;
        }
        Cmd::RunMeta {
            phases,
            policy,
            meta_command,
            meta_timeout,
        } => {
            let mut ctl = Controller::open(&root, mechanism_env())?;
            let mut source: Box<dyn MetaSource> = match meta_command {
                Some(command) => Box::new(ExternalMeta {
                    command,
                    timeout: Duration::from_secs_f64(meta_timeout),
                }),
                None => Box::new(match policy {
                    MetaPolicy::NoOp => ScriptedMeta::NoOp,
                    MetaPolicy::WidenOnPlateau => ScriptedMeta::WidenOnPlateau,
                }),
            };
            let report = ctl.run_meta_loop(source.as_mut(), phases)?;
            for p in &report.phases {
                let verdict = match &p.outcome {
                    PhaseOutcome::Applied(_) => "applied",
                    PhaseOutcome::Rejected(_) => "rejected",
                };
                writeln!(
                    out,
                    "session {}: action {verdict}, {} rounds, stop {}",
                    p.session_id, p.segment.rounds_run, p.segment.stop_reason
                )?;
            }
            writeln!(out, "total rounds: {}", report.rounds_run())?;
        }
        Cmd::RunInnerAgent { timeout, command } => {
            let mut ctl = Controller::open(&root, mechanism_env())?;
            let cfg = ctl.workspace().mechanism_config()?;
            let ext = if command.is_empty() {
                match (&cfg.kind, &cfg.external) {
                    (MechanismKind::External, Some(e)) => e.clone(),
                    _ => bail!("no external command configured; pass one after --"),
                }
            } else {
                ExternalConfig {
                    command,
                    timeout_s: timeout,
                }
            };
            let mut mech = ExternalMechanism::new(cfg, ext, mechanism_env().eval_bin);
            let mut plan = ctl.workspace().current_plan()?;
            plan.max_rounds = 1;
            let r = ctl.run_segment(&mut mech, &plan)?;
            write!(out, "{r}")?;
        }
        Cmd::Status => {
            let (_ws, reg) = open_read(&root)?;
            write!(out, "{}", summarize(&reg, reg.latest_round()))?;
        }
        Cmd::History => {
            let (_ws, reg) = open_read(&root)?;
            for ctx in reg.history()? {
                let c = &ctx.candidate;
                let parent = c.parent_round.map_or("-".to_string(), |p| p.to_string());
                let (validity, score, error) = match &ctx.eval {
                    Some(e) => (
                        format!("{:?}", e.validity),
                        format!("{:?}", e.combined_score),
                        e.error.clone().unwrap_or_default(),
                    ),
                    None => ("-".into(), "-".into(), String::new()),
                };
                writeln!(
                    out,
                    "round {}\tparent {parent}\tsession {}\tmechanism {}\tvalidity {validity}\tscore {score}\t{error}",
                    c.round, c.segment_id, c.mechanism_id
                )?;
            }
        }
        Cmd::ReplayDb { session } => {
            let ws = Workspace::open(&root)?;
            let mut reg = Registry::open(ws.root(), ws.task())?;
            let n = reg.replay_session(&ws.session_dir(session))?;
            writeln!(out, "replayed {n} rows from session {session}")?;
        }
        Cmd::Export { format, output } => {
            let ExportFormat::Csv = format;
            let (ws, reg) = open_read(&root)?;
            let dir = ws.task().direction("combined_score");
            let sink: Box<dyn Write> = match &output {
                Some(p) => Box::new(std::fs::File::create(p).with_context(|| p.display().to_string())?),
                None => Box::new(std::io::stdout()),
            };
            let mut w = csv::Writer::from_writer(sink);
            w.write_record(["round", "score", "validity", "best_so_far", "cost"])?;
            let mut best: Option<f64> = None;
            for ctx in reg.history()? {
                let (score, validity) = ctx
                    .eval
                    .as_ref()
                    .map_or((0.0, 0.0), |e| (e.combined_score, e.validity));
                if validity == 1.0 && best.is_none_or(|b| dir.better(score, b)) {
                    best = Some(score);
                }
                let cost = ctx.cost.map_or(0.0, |c| c.round_cost());
                w.write_record([
                    ctx.candidate.round.to_string(),
                    format!("{score:?}"),
                    format!("{validity:?}"),
                    fmt_opt(best),
                    format!("{cost:?}"),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
