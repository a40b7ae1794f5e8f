//! Run plans: the contract a meta phase hands to the next segment.

use std::fmt;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ROUNDS: u64 = 15;
pub const DEFAULT_SESSION_BUDGET: u64 = 15;
pub const DEFAULT_PLATEAU_WINDOW: u64 = 25;
pub const DEFAULT_INVALID_STREAK: u64 = 10;
pub const DEFAULT_ROUND_CAP: u64 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct StopConditions {
    pub target_score: Option<f64>,
    pub plateau_window: u64,
    pub invalid_streak_limit: u64,
    pub global_round_cap: u64,
}

impl Default for StopConditions {
    fn default() -> Self {
        StopConditions {
            target_score: None,
            plateau_window: DEFAULT_PLATEAU_WINDOW,
            invalid_streak_limit: DEFAULT_INVALID_STREAK,
            global_round_cap: DEFAULT_ROUND_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub max_rounds: u64,
    pub session_eval_budget: u64,
    pub stop: StopConditions,
}

impl Default for RunPlan {
    fn default() -> Self {
        RunPlan {
            max_rounds: DEFAULT_MAX_ROUNDS,
            session_eval_budget: DEFAULT_SESSION_BUDGET,
            stop: StopConditions::default(),
        }
    }
}

const KEYS: [&str; 5] = [
    "max_rounds",
    "session_eval_budget",
    "target_score",
    "plateau_window",
    "invalid_streak_limit",
];

impl RunPlan {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_rounds", self.max_rounds),
            ("session_eval_budget", self.session_eval_budget),
            ("plateau_window", self.stop.plateau_window),
            ("invalid_streak_limit", self.stop.invalid_streak_limit),
            ("global_round_cap", self.stop.global_round_cap),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Format(format!("{k} must be at least 1")));
            }
        }
        if let Some(t) = self.stop.target_score {
            if !t.is_finite() {
                return Err(Error::Format("target_score must be finite".into()));
            }
        }
        Ok(())
    }

    /// Parses `key: value` lines. Missing keys take their defaults; the round
    /// cap is not part of the document and stays at its default.
    pub fn parse(text: &str) -> Result<Self> {
        let mut plan = RunPlan::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::Format(format!("run plan line {}: {m}", i + 1));
            let (key, value) = line.split_once(':').ok_or_else(|| err("expected `key: value`"))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(&format!("unknown key {key:?}")));
            }
            if seen.contains(&key) {
                return Err(err(&format!("duplicate key {key:?}")));
            }
            seen.push(key);
            let int = || value.parse::<u64>().map_err(|_| err(&format!("bad integer {value:?}")));
            match key {
                "max_rounds" => plan.max_rounds = int()?,
                "session_eval_budget" => plan.session_eval_budget = int()?,
                "plateau_window" => plan.stop.plateau_window = int()?,
                "invalid_streak_limit" => plan.stop.invalid_streak_limit = int()?,
                _ => {
                    plan.stop.target_score = if value == "none" {
                        None
                    } else {
                        Some(value.parse().map_err(|_| err(&format!("bad number {value:?}")))?)
                    }
                }
            }
        }
        plan.validate()?;
        Ok(plan)
    }
}

impl fmt::Display for RunPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "max_rounds: {}", self.max_rounds)?;
        writeln!(f, "session_eval_budget: {}", self.session_eval_budget)?;
        match self.stop.target_score {
            Some(t) => writeln!(f, "target_score: {t:?}")?,
            None => writeln!(f, "target_score: none")?,
        }
        writeln!(f, "plateau_window: {}", self.stop.plateau_window)?;
        writeln!(f, "invalid_streak_limit: {}", self.stop.invalid_streak_limit)
    }
}
