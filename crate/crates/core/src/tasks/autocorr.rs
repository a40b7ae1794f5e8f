//! Autocorrelation ratio of a sampled non-negative function on [-1/4, 1/4].

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLES: usize = 1024;

/// `N >= 2` finite samples on a uniform grid of step `0.5 / N`.
/// Negative samples are representable so that they can be scored invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFunction {
    samples: Vec<f64>,
}

impl SampledFunction {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Format(format!(
                "need at least 2 samples, found {}",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("sample {i} is not finite")));
        }
        Ok(SampledFunction { samples })
    }

    pub fn constant(n: usize, value: f64) -> Self {
        SampledFunction::new(vec![value; n]).expect("constant function is well-formed")
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn step(&self) -> f64 {
        0.5 / self.samples.len() as f64
    }

    /// First line `N`, then `N` samples separated by whitespace.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let n: usize = tokens
            .next()
            .ok_or_else(|| Error::Format("empty sample file".into()))?
            .parse()
            .map_err(|_| Error::Format("first line must be the sample count".into()))?;
        let samples = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad sample {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if samples.len() != n {
            return Err(Error::Format(format!(
                "header says {n} samples, found {}",
                samples.len()
            )));
        }
        SampledFunction::new(samples)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.samples.len());
        for v in &self.samples {
            out.push_str(&format!("{v:?}\n"));
        }
        out
    }
}

/// Discrete self-convolution `g[k] = h * sum_j f[j] f[k-j]`, `2N - 1` points.
pub fn autocorrelate(f: &SampledFunction) -> Vec<f64> {
    let s = &f.samples;
    let n = s.len();
    let h = f.step();
    (0..2 * n - 1)
        .map(|k| {
            let lo = k.saturating_sub(n - 1);
            let hi = k.min(n - 1);
            h * (lo..=hi).map(|j| s[j] * s[k - j]).sum::<f64>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioScore {
    pub valid: bool,
    pub ratio: f64,
    pub l2_squared: f64,
    pub l1: f64,
    pub linf: f64,
    pub error: Option<String>,
}

/// `R = ||g||_2^2 / (||g||_1 * ||g||_inf)` with `g = f * f`.
pub fn ac2_ratio(f: &SampledFunction) -> RatioScore {
    let invalid = |error: &str| RatioScore {
        valid: false,
        ratio: 0.0,
        l2_squared: 0.0,
        l1: 0.0,
        linf: 0.0,
        error: Some(error.to_string()),
    };
    if let Some(i) = f.samples.iter().position(|&v| v < 0.0) {
        return invalid(&format!("sample {i} is negative"));
    }
    let g = autocorrelate(f);
    let h = f.step();
    let l2_squared = h * g.iter().map(|v| v * v).sum::<f64>();
    let l1 = h * g.iter().map(|v| v.abs()).sum::<f64>();
    let linf = g.iter().copied().fold(0.0, f64::max);
    if linf == 0.0 {
        return invalid("autoconvolution is identically zero");
    }
    RatioScore {
        valid: true,
        ratio: l2_squared / (l1 * linf),
        l2_squared,
        l1,
        linf,
        error: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(f: &[f64]) -> Vec<f64> {
        let h = 0.5 / f.len() as f64;
        let mut g = vec![0.0; 2 * f.len() - 1];
        for (i, a) in f.iter().enumerate() {
            for (j, b) in f.iter().enumerate() {
                g[i + j] += a * b;
            }
        }
        g.iter().map(|v| v * h).collect()
    }

    #[test]
    fn single_spike() {
        let mut s = vec![0.0; 8];
        s[3] = 2.0;
        let g = autocorrelate(&SampledFunction::new(s).unwrap());
        let h = 0.5 / 8.0;
        for (k, v) in g.iter().enumerate() {
            let want = if k == 6 { h * 4.0 } else { 0.0 };
            assert_eq!(*v, want);
        }
    }

    #[test]
    fn zeros_stay_zero_and_are_invalid() {
        let f = SampledFunction::constant(16, 0.0);
        assert!(autocorrelate(&f).iter().all(|&v| v == 0.0));
        let r = ac2_ratio(&f);
        assert!(!r.valid);
        assert_eq!(r.ratio, 0.0);
    }

    #[test]
    fn constant_is_a_triangle() {
        let n = 1024;
        let f = SampledFunction::constant(n, 1.0);
        let h = f.step();
        let g = autocorrelate(&f);
        assert_eq!(g.len(), 2 * n - 1);
        for (k, v) in g.iter().enumerate() {
            // Centre of the k-th output cell on [-1/2, 1/2].
            let t = -0.5 + (k as f64 + 1.0) * h;
            assert!((v - (0.5 - t.abs())).abs() <= 2.0 * h, "k={k}");
        }
    }

    #[test]
    fn constant_ratio_is_two_thirds() {
        // Triangle norms: ||g||_2^2 = 1/12, ||g||_1 = 1/4, ||g||_inf = 1/2.
        let r = ac2_ratio(&SampledFunction::constant(1024, 1.0));
        assert!(r.valid);
        assert!((r.l2_squared - 1.0 / 12.0).abs() < 1e-3);
        assert!((r.l1 - 0.25).abs() < 1e-3);
        assert!((r.linf - 0.5).abs() < 1e-12);
        assert!((r.ratio - 2.0 / 3.0).abs() < 1e-3);
        // Exact discrete value for a constant: 2/3 + 1/(3 N^2).
        let exact = 2.0 / 3.0 + 1.0 / (3.0 * 1024.0f64 * 1024.0);
        assert!((r.ratio - exact).abs() < 1e-13);
    }

    #[test]
    fn negative_sample_is_invalid() {
        let mut f = SampledFunction::constant(8, 1.0);
        f.samples_mut()[2] = -0.1;
        assert!(!ac2_ratio(&f).valid);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let f = SampledFunction::new(vec![0.0, 1.5, 0.25, 3.0]).unwrap();
        assert_eq!(SampledFunction::parse(&f.to_text()).unwrap(), f);
        assert!(SampledFunction::parse("").is_err());
        assert!(SampledFunction::parse("3\n1\n2\n").is_err());
        assert!(SampledFunction::parse("1\n1\n").is_err());
        assert!(SampledFunction::parse("2\n1\nx\n").is_err());
        assert!(SampledFunction::parse("two\n1\n1\n").is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(s in prop::collection::vec(0.0f64..10.0, 2..64)) {
            let g = autocorrelate(&SampledFunction::new(s.clone()).unwrap());
            let b = brute_force(&s);
            for (x, y) in g.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300));
            }
        }

        #[test]
        fn symmetric_input_gives_symmetric_output(half in prop::collection::vec(0.0f64..5.0, 1..32)) {
            let mut s = half.clone();
            s.extend(half.iter().rev());
            let g = autocorrelate(&SampledFunction::new(s).unwrap());
            let m = g.len();
            for k in 0..m {
                prop_assert!((g[k] - g[m - 1 - k]).abs() <= 1e-12 * g[k].abs().max(1.0));
            }
        }

        #[test]
        fn ratio_is_scale_invariant(s in prop::collection::vec(0.0f64..10.0, 2..128), c in 1e-3f64..1e3) {
            let f = SampledFunction::new(s.clone()).unwrap();
            let r1 = ac2_ratio(&f);
            prop_assume!(r1.valid);
            let scaled = SampledFunction::new(s.iter().map(|v| v * c).collect()).unwrap();
            let r2 = ac2_ratio(&scaled);
            prop_assert!((r1.ratio - r2.ratio).abs() <= 1e-12 * r1.ratio);
        }
    }
}
