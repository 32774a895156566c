//! Discrete-time noise schedules and the constants derived from them.
//!
//! Timesteps are 1-based at the API (`t = 1..=T`, `t = 0` is clean data);
//! the tables are stored zero-based, so `beta[t - 1]` holds β_t.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset used by the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip applied to cosine β_t.
pub const COSINE_BETA_MAX: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Quadratic,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "quadratic" => Ok(ScheduleKind::Quadratic),
            other => Err(Error::InvalidSchedule(format!("unknown kind {other:?}"))),
        }
    }
}

/// Variance σ_t² of the learned reverse kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// σ_t² = β_t.
    #[default]
    FixedLarge,
    /// σ_t² = β̃_t, with σ_1² taken from β̃_2 since β̃_1 = 0.
    Posterior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    variance: ReverseVariance,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
    sigma2: Vec<f64>,
    c: Vec<f64>,
    snr: Vec<f64>,
    clipped: usize,
}

/// Builds a schedule with the fixed-large reverse variance.
pub fn build_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    NoiseSchedule::new(
        kind,
        steps,
        beta_start,
        beta_end,
        ReverseVariance::FixedLarge,
    )
}

impl NoiseSchedule {
    pub fn new(
        kind: ScheduleKind,
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        variance: ReverseVariance,
    ) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "T must be at least 2, got {steps}"
            )));
        }
        if kind != ScheduleKind::Cosine
            && !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)
        {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }

        let span = (steps - 1) as f64;
        let mut clipped = 0;
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_start + i as f64 / span * (beta_end - beta_start))
                .collect(),
            ScheduleKind::Quadratic => {
                let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
                (0..steps)
                    .map(|i| (lo + i as f64 / span * (hi - lo)).powi(2))
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                let f0 = f(0.0);
                (1..=steps)
                    .map(|t| {
                        let prev = f((t - 1) as f64) / f0;
                        let cur = f(t as f64) / f0;
                        let b = 1.0 - cur / prev;
                        if b > COSINE_BETA_MAX {
                            clipped += 1;
                            COSINE_BETA_MAX
                        } else {
                            b
                        }
                    })
                    .collect()
            }
        };
        if clipped > 0 {
            log::warn!("cosine schedule: {clipped} beta value(s) clipped to {COSINE_BETA_MAX}");
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!(
                "beta value {b} outside (0, 1)"
            )));
        }

        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }

        let posterior_var: Vec<f64> = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
            })
            .collect();
        let sigma2: Vec<f64> = match variance {
            ReverseVariance::FixedLarge => beta.clone(),
            ReverseVariance::Posterior => {
                let mut s = posterior_var.clone();
                s[0] = posterior_var[1];
                s
            }
        };
        let c = (0..steps)
            .map(|i| beta[i] * beta[i] / (2.0 * sigma2[i] * alpha[i] * (1.0 - alpha_bar[i])))
            .collect();
        let snr = alpha_bar.iter().map(|ab| ab / (1.0 - ab)).collect();

        Ok(Self {
            kind,
            variance,
            beta,
            alpha,
            alpha_bar,
            posterior_var,
            sigma2,
            c,
            snr,
            clipped,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn reverse_variance(&self) -> ReverseVariance {
        self.variance
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Number of β values the cosine clip touched.
    pub fn clipped_steps(&self) -> usize {
        self.clipped
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(t - 1)
        }
    }

    /// c_t, the VLB weight on the ε-MSE at timestep t.
    pub fn vlb_weight(&self, t: usize) -> Result<f64> {
        self.index(t).map(|i| self.c[i])
    }

    /// Signal-to-noise ratio ᾱ_t / (1 − ᾱ_t).
    pub fn snr_at(&self, t: usize) -> Result<f64> {
        self.index(t).map(|i| self.snr[i])
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        self.index(t).map(|_| ())
    }

    // Unchecked 1-based accessors for hot loops; callers validate t.

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// ᾱ_{t−1}, equal to 1 at t = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    /// Posterior variance β̃_t of q(x_{t−1} | x_t, x_0).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    pub fn c(&self, t: usize) -> f64 {
        self.c[t - 1]
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.snr[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn vlb_weights(&self) -> &[f64] {
        &self.c
    }

    pub fn snrs(&self) -> &[f64] {
        &self.snr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn linear() -> NoiseSchedule {
        build_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn linear_endpoints() {
        let s = linear();
        assert_eq!(s.beta(1), 1e-4);
        assert_relative_eq!(s.beta(1000), 0.02, max_relative = 1e-15);
        assert_eq!(s.alpha_bar(1), 0.9999);
    }

    #[test]
    fn linear_second_step_matches_cumulative_product() {
        let s = linear();
        // oracle: explicit interpolation and product
        let b2 = 1e-4 + (0.02 - 1e-4) / 999.0;
        assert_relative_eq!(s.beta(2), b2, max_relative = 1e-14);
        assert_relative_eq!(s.beta(2), 1.19920e-4, max_relative = 1e-5);
        assert_relative_eq!(
            s.alpha_bar(2),
            (1.0 - 1e-4) * (1.0 - b2),
            max_relative = 1e-15
        );
        assert_relative_eq!(s.alpha_bar(2), 0.999780, max_relative = 1e-6);
    }

    #[test]
    fn vlb_weight_values() {
        let s = linear();
        assert_relative_eq!(
            s.vlb_weight(1).unwrap(),
            0.5 / (1.0 - 1e-4),
            max_relative = 1e-10
        );
        assert_relative_eq!(s.vlb_weight(1).unwrap(), 0.5000500, max_relative = 1e-7);

        // direct substitution at t = T from independently built tables
        let betas: Vec<f64> = (0..1000)
            .map(|i| 1e-4 + i as f64 / 999.0 * (0.02 - 1e-4))
            .collect();
        let ab: f64 = betas.iter().map(|b| 1.0 - b).product();
        let b = betas[999];
        let expect = b * b / (2.0 * b * (1.0 - b) * (1.0 - ab));
        assert_relative_eq!(s.vlb_weight(1000).unwrap(), expect, max_relative = 1e-12);
        assert!(s.vlb_weights().iter().all(|c| *c > 0.0));
    }

    #[test]
    fn snr_values() {
        let s = linear();
        assert_relative_eq!(s.snr_at(1).unwrap(), 9999.0, max_relative = 1e-9);
        let ab: f64 = (0..500)
            .map(|i| 1.0 - (1e-4 + i as f64 / 999.0 * (0.02 - 1e-4)))
            .product();
        assert_relative_eq!(
            s.snr_at(500).unwrap(),
            ab / (1.0 - ab),
            max_relative = 1e-10
        );
        assert!(s.snr_at(0).is_err());
        assert!(matches!(
            s.snr_at(1001),
            Err(Error::TimestepOutOfRange { t: 1001, .. })
        ));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(build_schedule(ScheduleKind::Linear, 1, 1e-4, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.03, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Quadratic, 10, 1e-4, 1.0).is_err());
        assert!("sigmoid".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn cosine_clips_final_beta() {
        let s = build_schedule(ScheduleKind::Cosine, 1000, 1e-4, 0.02).unwrap();
        assert!(s.clipped_steps() >= 1);
        assert!(s.betas().iter().all(|b| *b <= COSINE_BETA_MAX));
        // ᾱ_0 normalisation: first step is almost noise-free
        assert!(s.alpha_bar(1) > 0.9999 && s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn posterior_variance_option() {
        let s = NoiseSchedule::new(
            ScheduleKind::Linear,
            10,
            1e-4,
            0.02,
            ReverseVariance::Posterior,
        )
        .unwrap();
        assert_eq!(s.posterior_variance(1), 0.0);
        assert_eq!(s.sigma2(1), s.posterior_variance(2));
        for t in 2..=10 {
            assert_eq!(s.sigma2(t), s.posterior_variance(t));
            assert!(s.posterior_variance(t) < s.beta(t));
        }
    }

    proptest! {
        #[test]
        fn tables_are_consistent(kind in prop_oneof![
            Just(ScheduleKind::Linear), Just(ScheduleKind::Cosine), Just(ScheduleKind::Quadratic)
        ], steps in 2usize..1500) {
            let s = build_schedule(kind, steps, 1e-4, 0.02).unwrap();
            for t in 1..=steps {
                prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                prop_assert!(s.c(t) > 0.0 && s.snr(t) > 0.0);
                if t >= 2 {
                    prop_assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * (1.0 - s.beta(t)));
                    prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                    prop_assert!(s.snr(t) < s.snr(t - 1));
                }
            }
        }
    }
}
