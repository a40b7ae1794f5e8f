//! Search mechanisms: how the next candidate is produced from the history.

pub mod external;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::controller::summarize;
use crate::error::{Error, Result};
use crate::gateway::Quota;
use crate::registry::{Candidate, Registry};
use crate::tasks::autocorr::{SampledFunction, DEFAULT_SAMPLES};
use crate::tasks::packing::{radius_slack, Packing, CIRCLE_COUNT};
use crate::tasks::TaskKind;
use crate::workspace::Workspace;

pub use external::{ExternalConfig, ExternalMechanism};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismKind {
    Procedure,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionPolicy {
    #[default]
    Best,
    CrossCandidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizationPolicy {
    Cp26Hillclimb,
    Ac2Stepsearch,
    VliwPassthrough,
}

impl OptimizationPolicy {
    pub fn name(self) -> &'static str {
        match self {
            OptimizationPolicy::Cp26Hillclimb => "cp26-hillclimb",
            OptimizationPolicy::Ac2Stepsearch => "ac2-stepsearch",
            OptimizationPolicy::VliwPassthrough => "vliw-passthrough",
        }
    }

    pub fn task(self) -> TaskKind {
        match self {
            OptimizationPolicy::Cp26Hillclimb => TaskKind::Cp26,
            OptimizationPolicy::Ac2Stepsearch => TaskKind::Ac2,
            OptimizationPolicy::VliwPassthrough => TaskKind::Vliw,
        }
    }
}

impl SelectionPolicy {
    pub fn name(self) -> &'static str {
        match self {
            SelectionPolicy::Best => "best",
            SelectionPolicy::CrossCandidate => "cross-candidate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyParams {
    /// Initial perturbation scale.
    pub sigma: f64,
    /// The scale halves after this many rounds without improvement.
    pub halve_after: u64,
    pub rng_seed: u64,
    /// Runner-up references for cross-candidate selection.
    pub ref_k: usize,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            sigma: 0.05,
            halve_after: 50,
            rng_seed: 1,
            ref_k: 2,
        }
    }
}

impl PolicyParams {
    pub fn effective_sigma(&self, rounds_since_improve: u64) -> f64 {
        let halvings = rounds_since_improve / self.halve_after.max(1);
        self.sigma * 0.5f64.powi(halvings.min(1000) as i32)
    }
}

/// Contents of `shared/mechanism.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub kind: MechanismKind,
    #[serde(default)]
    pub selection: SelectionPolicy,
    pub optimization: OptimizationPolicy,
    #[serde(default)]
    pub params: PolicyParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalConfig>,
}

impl MechanismConfig {
    pub fn default_for(task: TaskKind) -> Self {
        MechanismConfig {
            kind: MechanismKind::Procedure,
            selection: SelectionPolicy::Best,
            optimization: match task {
                TaskKind::Cp26 => OptimizationPolicy::Cp26Hillclimb,
                TaskKind::Ac2 => OptimizationPolicy::Ac2Stepsearch,
                TaskKind::Vliw => OptimizationPolicy::VliwPassthrough,
            },
            params: PolicyParams::default(),
            external: None,
        }
    }
}

/// What selection hands to optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoBundle {
    pub parent: Candidate,
    pub references: Vec<Candidate>,
    pub notes: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Usage {
    pub n_in: u64,
    pub n_cache: u64,
    pub n_out: u64,
}

pub struct RoundInput<'a> {
    pub workspace: &'a Workspace,
    pub registry: &'a Registry,
    pub info: &'a InfoBundle,
    pub candidate: &'a Candidate,
    pub session_id: u64,
    pub quota: Quota,
}

/// Result of one mechanism invocation. `artifact == None` means the round
/// produced nothing; `failure` then says why.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundOutput {
    pub artifact: Option<Vec<u8>>,
    pub failure: Option<String>,
    pub logs: Vec<String>,
    pub usage: Option<Usage>,
    /// Evaluations the mechanism submitted to its session-local store.
    pub local_evals: u64,
}

pub trait Mechanism {
    fn id(&self) -> String;
    fn select(&mut self, registry: &Registry) -> Result<InfoBundle>;
    fn produce(&mut self, input: &RoundInput<'_>) -> Result<RoundOutput>;
}

/// Picks the parent (best valid, else the latest round) and, for
/// cross-candidate selection, up to `ref_k` runners-up.
pub fn select(registry: &Registry, policy: SelectionPolicy, ref_k: usize) -> Result<InfoBundle> {
    if registry.is_empty() {
        return Err(Error::SeedMissing);
    }
    let ranked = registry.ranked("combined_score");
    let parent = match ranked.first() {
        Some((c, _)) => (*c).clone(),
        None => registry.candidate(registry.latest_round())?.clone(),
    };
    let references: Vec<Candidate> = match policy {
        SelectionPolicy::Best => Vec::new(),
        SelectionPolicy::CrossCandidate => ranked
            .iter()
            .filter(|(c, _)| c.round != parent.round)
            .take(ref_k)
            .map(|(c, _)| (*c).clone())
            .collect(),
    };
    let mut notes = format!("best round={}", parent.round);
    if !references.is_empty() {
        let rs: Vec<String> = references.iter().map(|c| c.round.to_string()).collect();
        notes.push_str(&format!(" refs={}", rs.join(",")));
    }
    Ok(InfoBundle {
        parent,
        references,
        notes,
    })
}

/// Initial artifact for a task.
pub fn seed_artifact(task: TaskKind) -> String {
    match task {
        TaskKind::Cp26 => Packing::grid_seed().to_text(),
        TaskKind::Ac2 => SampledFunction::constant(DEFAULT_SAMPLES, 1.0).to_text(),
        TaskKind::Vliw => evoharness_vliw::build_baseline_kernel(
            &evoharness_vliw::BenchmarkInstance::official(),
        ),
    }
}

/// Moves one circle by a Gaussian step, clamps it into the square and sets
/// its radius to the largest that fits. Returns the index moved.
pub fn hill_climb_packing<R: Rng>(parent: &Packing, sigma: f64, rng: &mut R) -> (Packing, usize) {
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    // Redraw moves that land inside another circle; the last draw is kept
    // regardless so the round still yields a candidate.
    let attempt = |rng: &mut R| {
        let i = rng.random_range(0..CIRCLE_COUNT);
        let mut p = parent.clone();
        let c = &mut p.circles_mut()[i];
        c.x = (c.x + normal.sample(rng)).clamp(0.0, 1.0);
        c.y = (c.y + normal.sample(rng)).clamp(0.0, 1.0);
        let r = radius_slack(&p, i);
        p.circles_mut()[i].r = r;
        (p, i, r)
    };
    for _ in 1..MOVE_DRAWS {
        let (p, i, r) = attempt(rng);
        if r > 0.0 {
            return (p, i);
        }
    }
    let (p, i, _) = attempt(rng);
    (p, i)
}

const MOVE_DRAWS: usize = 32;

/// Adds a Gaussian step to one sample, clamped at zero.
pub fn step_search(parent: &SampledFunction, sigma: f64, rng: &mut impl Rng) -> (SampledFunction, usize) {
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    let mut f = parent.clone();
    let i = rng.random_range(0..f.len());
    let v = f.samples()[i] + normal.sample(rng);
    f.samples_mut()[i] = v.max(0.0);
    (f, i)
}

fn round_rng(seed: u64, round: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ round)
}

pub struct ProcedureMechanism {
    config: MechanismConfig,
}

impl ProcedureMechanism {
    pub fn new(config: MechanismConfig) -> Self {
        ProcedureMechanism { config }
    }

    pub fn config(&self) -> &MechanismConfig {
        &self.config
    }
}

impl Mechanism for ProcedureMechanism {
    fn id(&self) -> String {
        format!(
            "{}+{}",
            self.config.selection.name(),
            self.config.optimization.name()
        )
    }

    fn select(&mut self, registry: &Registry) -> Result<InfoBundle> {
        select(registry, self.config.selection, self.config.params.ref_k)
    }

    fn produce(&mut self, input: &RoundInput<'_>) -> Result<RoundOutput> {
        let opt = self.config.optimization;
        let task = input.registry.task();
        if opt.task() != task {
            return Err(Error::Config(format!(
                "{} cannot optimize {task} artifacts",
                opt.name()
            )));
        }
        let parent_round = input.info.parent.round;
        let parent = input
            .registry
            .read_artifact(parent_round)
            .map_err(|e| Error::ParentCorrupt(format!("round {parent_round}: {e}")))?;
        let text = String::from_utf8(parent)
            .map_err(|_| Error::ParentCorrupt(format!("round {parent_round}: not UTF-8")))?;
        let obs = summarize(input.registry, input.registry.latest_round());
        let p = &self.config.params;
        let sigma = p.effective_sigma(obs.rounds_since_improve);
        let mut rng = round_rng(p.rng_seed, input.candidate.round);
        let mut logs = vec![
            format!(
                "params: selection={} optimization={} sigma={:?} halve_after={} rng_seed={} ref_k={}",
                self.config.selection.name(),
                opt.name(),
                p.sigma,
                p.halve_after,
                p.rng_seed,
                p.ref_k
            ),
            format!("select: {}", input.info.notes),
            format!("effective_sigma: {sigma:?}"),
        ];
        let bad_parent = |e: Error| Error::ParentCorrupt(format!("round {parent_round}: {e}"));
        let artifact = match opt {
            OptimizationPolicy::Cp26Hillclimb => {
                let parent = Packing::parse(&text).map_err(bad_parent)?;
                let (child, i) = hill_climb_packing(&parent, sigma, &mut rng);
                logs.push(format!("moved circle {i}"));
                child.to_text()
            }
            OptimizationPolicy::Ac2Stepsearch => {
                let parent = SampledFunction::parse(&text).map_err(bad_parent)?;
                let (child, i) = step_search(&parent, sigma, &mut rng);
                logs.push(format!("perturbed sample {i}"));
                child.to_text()
            }
            OptimizationPolicy::VliwPassthrough => text,
        };
        Ok(RoundOutput {
            artifact: Some(artifact.into_bytes()),
            logs,
            ..RoundOutput::default()
        })
    }
}

/// Settings the controller passes down to mechanisms it builds.
#[derive(Debug, Clone, Default)]
pub struct MechanismEnv {
    /// Binary exposed to external processes for local evaluations.
    pub eval_bin: Option<PathBuf>,
}

/// Builds the mechanism described by the workspace's current config files.
pub fn load_mechanism(ws: &Workspace, env: &MechanismEnv) -> Result<Box<dyn Mechanism>> {
    let cfg = ws.mechanism_config()?;
    Ok(match cfg.kind {
        MechanismKind::Procedure => Box::new(ProcedureMechanism::new(cfg)),
        MechanismKind::External => {
            let ext = cfg.external.clone().ok_or_else(|| {
                Error::Config("external mechanism without an [external] table".into())
            })?;
            Box::new(ExternalMechanism::new(cfg, ext, env.eval_bin.clone()))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::packing::score_packing;
    use crate::tasks::autocorr::ac2_ratio;

    #[test]
    fn seeds_score_as_derived() {
        let p = Packing::parse(&seed_artifact(TaskKind::Cp26)).unwrap();
        let s = score_packing(&p);
        assert!(s.valid);
        assert!((s.score - 26.0 / 12.0).abs() < 1e-9);
        let f = SampledFunction::parse(&seed_artifact(TaskKind::Ac2)).unwrap();
        assert!((ac2_ratio(&f).ratio - 2.0 / 3.0).abs() < 1e-3);
        let o = TaskKind::Vliw.evaluate(&seed_artifact(TaskKind::Vliw)).unwrap();
        assert_eq!(o.validity, 1.0);
    }

    #[test]
    fn hill_climb_moves_exactly_one_row() {
        let parent = Packing::grid_seed();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (child, i) = hill_climb_packing(&parent, 0.05, &mut rng);
            let a = parent.to_text();
            let b = child.to_text();
            let diff: Vec<usize> = a
                .lines()
                .zip(b.lines())
                .enumerate()
                .filter(|(_, (x, y))| x != y)
                .map(|(k, _)| k)
                .collect();
            assert_eq!(diff, vec![i]);
            let c = child.circles()[i];
            assert!((0.0..=1.0).contains(&c.x) && (0.0..=1.0).contains(&c.y));
            if c.r > 0.0 {
                assert!(score_packing(&child).valid);
            }
        }
    }

    #[test]
    fn step_search_stays_non_negative() {
        let mut f = SampledFunction::constant(16, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            f = step_search(&f, 0.5, &mut rng).0;
        }
        assert!(f.samples().iter().all(|&v| v >= 0.0));
        assert!(f.samples().contains(&0.0));
    }

    #[test]
    fn sigma_halves_per_window() {
        let p = PolicyParams::default();
        assert_eq!(p.effective_sigma(0), 0.05);
        assert_eq!(p.effective_sigma(49), 0.05);
        assert_eq!(p.effective_sigma(50), 0.025);
        assert_eq!(p.effective_sigma(120), 0.0125);
    }

    #[test]
    fn config_round_trips_through_toml() {
        for t in TaskKind::ALL {
            let c = MechanismConfig::default_for(t);
            let text = toml::to_string(&c).unwrap();
            assert_eq!(toml::from_str::<MechanismConfig>(&text).unwrap(), c);
        }
        let partial: MechanismConfig =
            toml::from_str("kind = \"procedure\"\noptimization = \"cp26-hillclimb\"\n[params]\nsigma = 0.2\n").unwrap();
        assert_eq!(partial.params.sigma, 0.2);
        assert_eq!(partial.params.halve_after, 50);
        assert_eq!(partial.selection, SelectionPolicy::Best);
    }
}
