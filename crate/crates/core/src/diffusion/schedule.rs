use crate::error::{Error, Result};

/// Floor applied to β̃ before taking its logarithm (β̃₁ is exactly zero).
pub const BETA_TILDE_LOG_FLOOR: f64 = 1e-20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            other => Err(Error::arg(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Linear => f.write_str("linear"),
        }
    }
}

/// Coefficients of a diffusion chain of length `T`, kept in f64.
///
/// Indexing is 1-based for `beta`, `alpha` and `beta_tilde` (index 0 holds a
/// placeholder) and 0-based for `alpha_bar`, so every accessor takes the
/// diffusion step `t` directly.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    horizon: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `1e-4·(1000/T)` to `0.02·(1000/T)`, clamped below 0.999.
    pub fn build(kind: ScheduleKind, horizon: usize) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::arg("schedule horizon must be at least 1"));
        }
        let scale = 1000.0 / horizon as f64;
        let (lo, hi) = (1e-4 * scale, 0.02 * scale);
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..horizon)
                .map(|i| {
                    let b = if horizon == 1 {
                        lo
                    } else {
                        lo + (hi - lo) * i as f64 / (horizon - 1) as f64
                    };
                    b.clamp(f64::MIN_POSITIVE, 0.999)
                })
                .collect(),
        };
        Self::from_betas(&betas)
    }

    /// Schedule from explicit β₁..β_T.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::arg("empty beta sequence"));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::arg(format!("beta {b} outside (0, 1)")));
        }
        let horizon = betas.len();
        let mut beta = vec![0.0; horizon + 1];
        let mut alpha = vec![1.0; horizon + 1];
        let mut alpha_bar = vec![1.0; horizon + 1];
        let mut beta_tilde = vec![0.0; horizon + 1];
        for t in 1..=horizon {
            beta[t] = betas[t - 1];
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
            beta_tilde[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
        }
        Ok(Self {
            horizon,
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.horizon {
            return Err(Error::arg(format!(
                "diffusion step {t} outside [1, {}]",
                self.horizon
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t]
    }

    pub fn log_beta(&self, t: usize) -> f64 {
        self.beta[t].ln()
    }

    pub fn log_beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t].max(BETA_TILDE_LOG_FLOOR).ln()
    }

    /// β₁..β_T.
    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }

    /// Schedule over an ascending subsequence of steps (ending at `T`),
    /// with `β'_i = 1 − ᾱ_{s_i} / ᾱ_{s_{i−1}}` and `ᾱ_{s_0} = 1`.
    pub fn respaced(&self, ascending_steps: &[usize]) -> Result<Self> {
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(ascending_steps.len());
        for &s in ascending_steps {
            self.check_step(s)?;
            let ab = self.alpha_bar[s];
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        Self::from_betas(&betas)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_endpoints_at_thousand_steps() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1000).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn single_step_horizon() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1).unwrap();
        assert_eq!(s.horizon(), 1);
        assert_eq!(s.alpha_bar(1), 1.0 - s.beta(1));
        assert_eq!(s.beta_tilde(1), 0.0);
    }

    #[test]
    fn alpha_bar_matches_separate_product_loop() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 4).unwrap();
        let mut prod = 1.0;
        for &b in s.betas() {
            prod *= 1.0 - b;
        }
        assert!((s.alpha_bar(4) - prod).abs() < 1e-15);
    }

    #[test]
    fn zero_horizon_is_rejected() {
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 0).is_err());
    }

    #[test]
    fn invariants_across_horizons() {
        for horizon in [1, 2, 3, 10, 50, 100, 257, 1000, 4000] {
            let s = NoiseSchedule::build(ScheduleKind::Linear, horizon).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            for t in 1..=horizon {
                assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(s.beta_tilde(t) <= s.beta(t));
            }
        }
    }

    #[test]
    fn tiny_horizons_clamp_beta() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 10).unwrap();
        // 0.02 * 100 = 2 would leave (0, 1); clamped to 0.999
        assert_eq!(s.beta(10), 0.999);
    }

    #[test]
    fn respacing_keeps_alpha_bar_at_chosen_steps() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 100).unwrap();
        let steps = [1, 34, 67, 100];
        let r = s.respaced(&steps).unwrap();
        for (i, &t) in steps.iter().enumerate() {
            assert!((r.alpha_bar(i + 1) - s.alpha_bar(t)).abs() < 1e-14);
        }
    }
}
