//! Task registry: artifact file names, metric directions and evaluators.

pub mod autocorr;
pub mod packing;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use autocorr::{ac2_ratio, SampledFunction};
use packing::{score_packing, Packing};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Maximize => a > b,
            Direction::Minimize => a < b,
        }
    }

    /// True when `score` meets or passes `target`.
    pub fn reaches(self, score: f64, target: f64) -> bool {
        match self {
            Direction::Maximize => score >= target,
            Direction::Minimize => score <= target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Cp26,
    Ac2,
    Vliw,
}

/// What an evaluator returns for well-formed input.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub validity: f64,
    pub combined_score: f64,
    pub metrics: BTreeMap<String, f64>,
    pub error: Option<String>,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Cp26, TaskKind::Ac2, TaskKind::Vliw];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Cp26 => "cp26",
            TaskKind::Ac2 => "ac2",
            TaskKind::Vliw => "vliw",
        }
    }

    pub fn artifact_file(self) -> &'static str {
        match self {
            TaskKind::Cp26 => "packing.txt",
            TaskKind::Ac2 => "samples.txt",
            TaskKind::Vliw => "kernel.asm",
        }
    }

    /// Direction of a metric; unknown metrics are maximized.
    pub fn direction(self, metric: &str) -> Direction {
        match (self, metric) {
            (TaskKind::Vliw, "cycles") => Direction::Minimize,
            _ => Direction::Maximize,
        }
    }

    /// Best known value of the combined score, used as a default stop
    /// threshold.
    pub fn known_target(self) -> Option<f64> {
        match self {
            TaskKind::Cp26 => Some(2.6359),
            TaskKind::Ac2 => Some(0.9459),
            TaskKind::Vliw => None,
        }
    }

    /// Scores artifact text. Malformed input is a format error; well-formed
    /// but infeasible input is an outcome with validity 0.
    pub fn evaluate(self, content: &str) -> Result<TaskOutcome> {
        let mut metrics = BTreeMap::new();
        let (valid, score, error) = match self {
            TaskKind::Cp26 => {
                let p = Packing::parse(content)?;
                let s = score_packing(&p);
                metrics.insert("radius_sum".into(), p.radius_sum());
                (s.valid, s.score, s.error)
            }
            TaskKind::Ac2 => {
                let f = SampledFunction::parse(content)?;
                let s = ac2_ratio(&f);
                metrics.insert("samples".into(), f.len() as f64);
                if s.valid {
                    metrics.insert("l2_squared".into(), s.l2_squared);
                    metrics.insert("l1".into(), s.l1);
                    metrics.insert("linf".into(), s.linf);
                }
                (s.valid, s.ratio, s.error)
            }
            TaskKind::Vliw => {
                let ev = evoharness_vliw::evaluate_kernel(content)
                    .map_err(|e| Error::Format(e.to_string()))?;
                metrics.insert("cycles".into(), ev.cycles as f64);
                (ev.valid, ev.combined_score, ev.error)
            }
        };
        let score = if valid { score } else { 0.0 };
        metrics.insert("combined_score".into(), score);
        Ok(TaskOutcome {
            validity: if valid { 1.0 } else { 0.0 },
            combined_score: score,
            metrics,
            error,
        })
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (cp26, ac2, vliw)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for t in TaskKind::ALL {
            assert_eq!(t.name().parse::<TaskKind>().unwrap(), t);
        }
        assert!("tsp".parse::<TaskKind>().is_err());
    }

    #[test]
    fn directions() {
        assert_eq!(TaskKind::Vliw.direction("cycles"), Direction::Minimize);
        assert_eq!(TaskKind::Vliw.direction("combined_score"), Direction::Maximize);
        assert!(Direction::Minimize.better(1.0, 2.0));
        assert!(Direction::Maximize.reaches(0.9459, 0.9459));
    }

    #[test]
    fn cp26_outcomes() {
        let ok = TaskKind::Cp26.evaluate(&Packing::grid_seed().to_text()).unwrap();
        assert_eq!(ok.validity, 1.0);
        assert_eq!(ok.metrics["combined_score"], ok.combined_score);
        let mut p = Packing::grid_seed();
        p.circles_mut()[1].x = p.circles()[0].x;
        let bad = TaskKind::Cp26.evaluate(&p.to_text()).unwrap();
        assert_eq!((bad.validity, bad.combined_score), (0.0, 0.0));
        assert!(bad.error.is_some());
        assert!(TaskKind::Cp26.evaluate("1 2 3\n").is_err());
    }

    #[test]
    fn ac2_outcome() {
        let o = TaskKind::Ac2
            .evaluate(&SampledFunction::constant(64, 1.0).to_text())
            .unwrap();
        assert_eq!(o.validity, 1.0);
        assert!((o.combined_score - (2.0 / 3.0 + 1.0 / (3.0 * 64.0 * 64.0))).abs() < 1e-12);
    }

    #[test]
    fn vliw_parse_error_is_format_error() {
        assert!(matches!(
            TaskKind::Vliw.evaluate("bundle:\n    gpu.add 1, 2, 3\n"),
            Err(Error::Format(_))
        ));
        let o = TaskKind::Vliw.evaluate("bundle:\n").unwrap();
        assert_eq!(o.validity, 0.0);
        assert_eq!(o.metrics["cycles"], 1.0);
    }
}
