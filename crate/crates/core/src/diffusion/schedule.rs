use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Polynomial,
    Cosine,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::Polynomial => "polynomial",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    /// Keeps α_0 = √(1 − 2·precision) strictly below one.
    pub precision: f64,
    /// Lower bound on the per-step ratio α²_t / α²_{t−1}.
    pub step_clip: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Polynomial,
            steps: 1000,
            precision: 1e-5,
            step_clip: 0.001,
        }
    }
}

/// Variance-preserving noise levels α_t, σ_t for t = 0..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    log_alpha2: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

/// Builds a schedule with the default step clip.
pub fn build_schedule(steps: usize, kind: ScheduleKind, precision: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(&ScheduleConfig {
        kind,
        steps,
        precision,
        ..Default::default()
    })
}

impl NoiseSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let t_max = config.steps;
        if t_max < 2 {
            return Err(Error::Schedule(format!("T must be at least 2, got {t_max}")));
        }
        if !(config.precision > 0.0 && config.precision < 0.5) {
            return Err(Error::Schedule(format!(
                "precision must lie in (0, 0.5), got {}",
                config.precision
            )));
        }
        if !(config.step_clip > 0.0 && config.step_clip < 1.0) {
            return Err(Error::Schedule(format!(
                "step_clip must lie in (0, 1), got {}",
                config.step_clip
            )));
        }
        let base: Vec<f64> = (0..=t_max)
            .map(|t| {
                let u = t as f64 / t_max as f64;
                match config.kind {
                    ScheduleKind::Polynomial => (1.0 - u * u).powi(2),
                    ScheduleKind::Cosine => {
                        let f = |u: f64| {
                            ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
                                .cos()
                                .powi(2)
                        };
                        f(u) / f(0.0)
                    }
                }
            })
            .collect();
        let mut log_alpha2 = Vec::with_capacity(t_max + 1);
        let mut acc = (-2.0 * config.precision).ln_1p() + base[0].ln();
        log_alpha2.push(acc);
        for t in 1..=t_max {
            let ratio = (base[t] / base[t - 1]).clamp(config.step_clip, 1.0);
            acc += ratio.ln();
            log_alpha2.push(acc);
        }
        let alpha = log_alpha2.iter().map(|l| (0.5 * l).exp()).collect();
        let sigma = log_alpha2.iter().map(|l| (-l.exp_m1()).sqrt()).collect();
        let schedule = NoiseSchedule {
            config: config.clone(),
            log_alpha2,
            alpha,
            sigma,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    fn validate(&self) -> Result<()> {
        let t_max = self.steps();
        if self.alpha.iter().chain(&self.sigma).any(|v| !v.is_finite()) {
            return Err(Error::Schedule("non-finite noise level".into()));
        }
        if self.alpha[0] < 1.0 - 1e-4 {
            return Err(Error::Schedule(format!("α_0 = {} is below 1 − 1e-4", self.alpha[0])));
        }
        if self.alpha[t_max] > 1e-3 {
            return Err(Error::Schedule(format!(
                "α_T = {:e} exceeds 1e-3; lower step_clip or raise T",
                self.alpha[t_max]
            )));
        }
        for t in 0..=t_max {
            let vp = self.alpha[t].powi(2) + self.sigma[t].powi(2) - 1.0;
            if vp.abs() > 1e-10 {
                return Err(Error::Schedule(format!("α²+σ² deviates from 1 by {vp:e} at t={t}")));
            }
            if t > 0 && !(self.alpha[t] < self.alpha[t - 1] && self.log_snr(t) < self.log_snr(t - 1)) {
                return Err(Error::Schedule(format!("α or SNR fails to decrease at t={t}")));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alpha2(&self, t: usize) -> f64 {
        self.log_alpha2[t].exp()
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        -self.log_alpha2[t].exp_m1()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.alpha2(t) / self.sigma2(t)
    }

    pub fn log_snr(&self, t: usize) -> f64 {
        self.log_alpha2[t] - self.sigma2(t).ln()
    }

    /// α_{t|s} = α_t / α_s.
    pub fn alpha_ts(&self, t: usize, s: usize) -> f64 {
        (0.5 * (self.log_alpha2[t] - self.log_alpha2[s])).exp()
    }

    /// σ²_{t|s} = σ_t² − α²_{t|s}·σ_s², evaluated as 1 − α²_{t|s}.
    pub fn sigma2_ts(&self, t: usize, s: usize) -> f64 {
        -(self.log_alpha2[t] - self.log_alpha2[s]).exp_m1()
    }

    /// The loss weight SNR(t−1)/SNR(t) − 1 of step t ≥ 1.
    pub fn vlb_weight(&self, t: usize) -> f64 {
        assert!(t >= 1, "the weight is defined for t ≥ 1");
        (self.log_snr(t - 1) - self.log_snr(t)).exp_m1()
    }

    /// One-line summary used in sample metadata.
    pub fn descriptor(&self) -> String {
        format!(
            "kind={} steps={} precision={:e} step_clip={:e}",
            self.config.kind, self.config.steps, self.config.precision, self.config.step_clip
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_polynomial_contract() {
        let s = build_schedule(1000, ScheduleKind::Polynomial, 1e-5).unwrap();
        assert!(s.alpha(0) >= 0.9999 && s.alpha(0) <= 1.0 - 1e-5);
        assert!(s.alpha(1000) <= 1e-3);
        for t in 1..=1000 {
            assert!(s.snr(t) < s.snr(t - 1));
        }
    }

    #[test]
    fn cosine_contract() {
        let s = build_schedule(500, ScheduleKind::Cosine, 1e-5).unwrap();
        assert!(s.alpha(500) <= 1e-3);
        for t in 0..=500 {
            assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn transitions_are_consistent() {
        let s = build_schedule(100, ScheduleKind::Polynomial, 1e-5).unwrap();
        for t in 1..=100 {
            for u in 0..t {
                let a = s.alpha_ts(t, u);
                assert!((a - s.alpha(t) / s.alpha(u)).abs() < 1e-12);
                let direct = s.sigma2(t) - a * a * s.sigma2(u);
                assert!(s.sigma2_ts(t, u) >= 0.0);
                assert!((s.sigma2_ts(t, u) - direct).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn invalid_arguments_fail() {
        assert!(build_schedule(1, ScheduleKind::Polynomial, 1e-5).is_err());
        assert!(build_schedule(100, ScheduleKind::Polynomial, 0.5).is_err());
        assert!(build_schedule(100, ScheduleKind::Polynomial, 0.0).is_err());
        // With the default clip a 20-step schedule cannot reach α_T ≤ 1e-3.
        assert!(build_schedule(20, ScheduleKind::Polynomial, 1e-5).is_err());
        let short = ScheduleConfig {
            steps: 20,
            step_clip: 1e-5,
            ..Default::default()
        };
        assert!(NoiseSchedule::new(&short).is_ok());
    }
}
