use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("invalid beta range [{start}, {end}] for {steps} steps")]
    InvalidRange { steps: usize, start: f64, end: f64 },
    #[error("step {k} outside [0, {max}]")]
    StepOutOfRange { k: usize, max: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 100, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Linear beta schedule; index `k` runs over `1..=K`, with `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, ScheduleError> {
        let ok = steps >= 1 && beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0;
        if !ok {
            return Err(ScheduleError::InvalidRange { steps, start: beta_start, end: beta_end });
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().expect("non-empty");
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self, ScheduleError> {
        Self::new(c.steps, c.beta_start, c.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.beta(k)
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    /// Variance of the reverse-process posterior at step `k`.
    pub fn posterior_variance(&self, k: usize) -> f64 {
        self.beta(k) * (1.0 - self.alpha_bar(k - 1)) / (1.0 - self.alpha_bar(k))
    }

    /// `sqrt(alpha_bar_k) * a0 + sqrt(1 - alpha_bar_k) * eps`.
    pub fn forward_noise(&self, a0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>, ScheduleError> {
        if k > self.steps() {
            return Err(ScheduleError::StepOutOfRange { k, max: self.steps() });
        }
        if a0.len() != eps.len() {
            return Err(ScheduleError::LengthMismatch(a0.len(), eps.len()));
        }
        let ab = self.alpha_bar(k);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(a0.iter().zip(eps).map(|(a, e)| sa * a + sn * e).collect())
    }

    /// One ancestral step `x_k -> x_{k-1}` in place, with the clean-action
    /// estimate clipped to `[-1, 1]`.
    pub fn reverse_step(&self, x: &mut [f64], eps_hat: &[f64], k: usize, noise: &[f64]) {
        let (ab, ab_prev, beta) = (self.alpha_bar(k), self.alpha_bar(k - 1), self.beta(k));
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ck = self.alpha(k).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = if k > 1 { self.posterior_variance(k).sqrt() } else { 0.0 };
        for ((xi, e), z) in x.iter_mut().zip(eps_hat).zip(noise) {
            let x0 = ((*xi - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-1.0, 1.0);
            *xi = c0 * x0 + ck * *xi + sigma * z;
        }
    }
}
