//! A harnessed evolution environment.
//!
//! Candidates live in a registry under `candidates/`, every evaluation is
//! appended to a hash-chained store by the gateway, meta-edits are checked
//! against a path policy, and the controller alternates meta phases with
//! evolution segments.

pub mod controller;
pub mod error;
pub mod gateway;
pub mod layout;
pub mod mechanisms;
pub mod plan;
pub mod registry;
pub mod store;
pub mod tasks;
pub mod workspace;

pub use controller::{
    check_stop, summarize, Controller, ExternalMeta, MetaContext, MetaSource, Observation,
    PhaseOutcome, PhaseReport, RunReport, ScriptedMeta, SegmentResult, StopReason,
};
pub use error::{Error, ErrorCategory, Result};
pub use gateway::{cost_per_round, CostRecord, EvalReport, Evaluation, Gateway, Quota};
pub use mechanisms::{
    load_mechanism, seed_artifact, InfoBundle, Mechanism, MechanismConfig, MechanismEnv,
    ProcedureMechanism, RoundInput, RoundOutput,
};
pub use plan::{RunPlan, StopConditions};
pub use registry::{Candidate, Registry, RoundContext};
pub use store::{AccessToken, EvalRecord, EvalStore, RecordSource};
pub use tasks::{Direction, TaskKind, TaskOutcome};
pub use workspace::{
    apply_meta_action, validate_meta_action, Edit, EditPolicy, MetaAction, Verdict, Violation,
    Workspace, WorkspaceConfig,
};
