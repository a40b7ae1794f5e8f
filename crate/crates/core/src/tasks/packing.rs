//! Packing 26 circles into the unit square.

use crate::error::{Error, Result};

pub const CIRCLE_COUNT: usize = 26;
/// Geometric slack allowed by the validity check.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

/// Exactly [`CIRCLE_COUNT`] circles.
#[derive(Debug, Clone, PartialEq)]
pub struct Packing {
    circles: Vec<Circle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackingScore {
    pub valid: bool,
    pub score: f64,
    pub error: Option<String>,
}

impl Packing {
    pub fn new(circles: Vec<Circle>) -> Result<Self> {
        if circles.len() != CIRCLE_COUNT {
            return Err(Error::Format(format!(
                "expected {CIRCLE_COUNT} circles, found {}",
                circles.len()
            )));
        }
        Ok(Packing { circles })
    }

    pub fn circles(&self) -> &[Circle] {
        &self.circles
    }

    pub fn circles_mut(&mut self) -> &mut [Circle] {
        &mut self.circles
    }

    /// Reads one `x y r` triple per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut circles = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("line {}: expected `x y r`, got {raw:?}", i + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let mut v = [0.0; 3];
            for (slot, f) in v.iter_mut().zip(&fields) {
                *slot = f.parse::<f64>().map_err(|_| bad())?;
                if !slot.is_finite() {
                    return Err(bad());
                }
            }
            circles.push(Circle {
                x: v[0],
                y: v[1],
                r: v[2],
            });
        }
        Packing::new(circles)
    }

    /// Shortest round-tripping decimal form, one circle per line.
    pub fn to_text(&self) -> String {
        self.circles
            .iter()
            .map(|c| format!("{:?} {:?} {:?}\n", c.x, c.y, c.r))
            .collect()
    }

    /// 26 circles of radius 1/12 on the centres of a 6 x 5 grid of cells,
    /// filled row by row.
    pub fn grid_seed() -> Self {
        let circles = (0..CIRCLE_COUNT)
            .map(|k| {
                let (i, j) = (k % 6, k / 6);
                Circle {
                    x: (2 * i + 1) as f64 / 12.0,
                    y: (2 * j + 1) as f64 / 10.0,
                    r: 1.0 / 12.0,
                }
            })
            .collect();
        Packing { circles }
    }

    pub fn radius_sum(&self) -> f64 {
        self.circles.iter().map(|c| c.r).sum()
    }
}

/// First violated constraint at tolerance `tau`, if any.
pub fn first_violation(p: &Packing, tau: f64) -> Option<String> {
    for (i, c) in p.circles.iter().enumerate() {
        if c.r <= 0.0 {
            return Some(format!("circle {i} has non-positive radius {}", c.r));
        }
        if c.x - c.r < -tau || c.x + c.r > 1.0 + tau || c.y - c.r < -tau || c.y + c.r > 1.0 + tau
        {
            return Some(format!("circle {i} leaves the unit square"));
        }
    }
    for i in 0..p.circles.len() {
        for j in i + 1..p.circles.len() {
            let (a, b) = (p.circles[i], p.circles[j]);
            let d = (a.x - b.x).hypot(a.y - b.y);
            if d < a.r + b.r - tau {
                return Some(format!("circles {i} and {j} overlap"));
            }
        }
    }
    None
}

pub fn score_packing(p: &Packing) -> PackingScore {
    match first_violation(p, TOLERANCE) {
        None => PackingScore {
            valid: true,
            score: p.radius_sum(),
            error: None,
        },
        Some(e) => PackingScore {
            valid: false,
            score: 0.0,
            error: Some(e),
        },
    }
}

/// Largest radius circle `i` could take at its current centre without
/// crossing a wall or another circle.
pub fn radius_slack(p: &Packing, i: usize) -> f64 {
    let c = p.circles[i];
    let mut r = c.x.min(1.0 - c.x).min(c.y).min(1.0 - c.y);
    for (j, o) in p.circles.iter().enumerate() {
        if j != i {
            r = r.min((c.x - o.x).hypot(c.y - o.y) - o.r);
        }
    }
    r
}
