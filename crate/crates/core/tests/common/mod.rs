#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use evoharness_core::mechanisms::{select, SelectionPolicy};
use evoharness_core::tasks::packing::Packing;
use evoharness_core::{
    seed_artifact, InfoBundle, Mechanism, Registry, Result, RoundInput, RoundOutput, RunPlan, TaskKind, Workspace,
    WorkspaceConfig,
};

pub fn init(dir: &Path, task: TaskKind, budget: u64, cap: u64) -> PathBuf {
    let root = dir.join("ws");
    let mut cfg = WorkspaceConfig::new(task);
    cfg.global_eval_budget = budget;
    cfg.global_round_cap = cap;
    Workspace::init(&root, cfg, Some(seed_artifact(task).as_bytes())).unwrap();
    root
}

pub fn plan(max_rounds: u64, session_budget: u64, plateau: u64, cap: u64) -> RunPlan {
    let mut p = RunPlan {
        max_rounds,
        session_eval_budget: session_budget,
        ..RunPlan::default()
    };
    p.stop.plateau_window = plateau;
    p.stop.global_round_cap = cap;
    p
}

/// Every byte under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_path_buf();
            (rel, std::fs::read(e.path()).unwrap())
        })
        .collect()
}

/// Always submits the grid packing with every radius halved: valid, and
/// strictly worse than the grid seed.
pub struct AlwaysWorse;

impl Mechanism for AlwaysWorse {
    fn id(&self) -> String {
        "always-worse".into()
    }

    fn select(&mut self, registry: &Registry) -> Result<InfoBundle> {
        select(registry, SelectionPolicy::Best, 0)
    }

    fn produce(&mut self, _input: &RoundInput<'_>) -> Result<RoundOutput> {
        let mut p = Packing::grid_seed();
        for c in p.circles_mut() {
            c.r *= 0.5;
        }
        Ok(RoundOutput {
            artifact: Some(p.to_text().into_bytes()),
            ..RoundOutput::default()
        })
    }
}

/// Produces nothing, or panics.
pub struct Broken {
    pub panic: bool,
}

impl Mechanism for Broken {
    fn id(&self) -> String {
        "broken".into()
    }

    fn select(&mut self, registry: &Registry) -> Result<InfoBundle> {
        select(registry, SelectionPolicy::Best, 0)
    }

    fn produce(&mut self, _input: &RoundInput<'_>) -> Result<RoundOutput> {
        if self.panic {
            panic!("boom");
        }
        Ok(RoundOutput {
            failure: Some("gave up".into()),
            ..RoundOutput::default()
        })
    }
}
