use crate::error::{Error, Result};

/// Noise schedule tables indexed by `t ∈ [1, T]`, with `ᾱ_0 = 1`.
///
/// `1 − ᾱ_t` is accumulated as `(1 − ᾱ_{t−1}) + ᾱ_{t−1}·β_t` rather than
/// by subtraction, so the first step satisfies `1 − ᾱ_1 = β_1` exactly and
/// the posterior step at `t = 1` returns the clean estimate unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    one_minus_alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    /// Denoiser timestep queried at each entry (identity unless respaced).
    model_timesteps: Vec<usize>,
}

impl NoiseSchedule {
    /// Linear β from `beta_min` to `beta_max` over `T` steps.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!("need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas, (1..=steps).collect())
    }

    pub fn from_betas(betas: Vec<f64>, model_timesteps: Vec<usize>) -> Result<Self> {
        if betas.is_empty() || betas.len() != model_timesteps.len() {
            return Err(Error::Config("schedule tables must be non-empty and aligned".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let n = betas.len();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(n);
        let mut one_minus = Vec::with_capacity(n);
        let mut sigmas = Vec::with_capacity(n);
        let (mut prev_ab, mut prev_om) = (1.0f64, 0.0f64);
        for t in 0..n {
            let ab = prev_ab * alphas[t];
            let om = prev_om + prev_ab * betas[t];
            sigmas.push((prev_om / om * betas[t]).sqrt());
            alpha_bars.push(ab);
            one_minus.push(om);
            prev_ab = ab;
            prev_om = om;
        }
        Ok(Self { betas, alphas, alpha_bars, one_minus_alpha_bars: one_minus, sigmas, model_timesteps })
    }

    /// Uniformly subsampled schedule with `steps` entries whose cumulative
    /// products match this schedule at the chosen timesteps.
    pub fn respaced(&self, steps: usize) -> Result<Self> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(Error::Config(format!("cannot respace {total} steps to {steps}")));
        }
        let picks: Vec<usize> = (1..=steps).map(|k| ((k * total) as f64 / steps as f64).round() as usize).collect();
        let mut betas = Vec::with_capacity(steps);
        let (mut prev_ab, mut prev_om) = (1.0f64, 0.0f64);
        for &t in &picks {
            let om = self.one_minus_alpha_bar(t);
            betas.push((om - prev_om) / prev_ab);
            prev_ab = self.alpha_bar(t);
            prev_om = om;
        }
        let model = picks.iter().map(|&t| self.model_timesteps[t - 1]).collect();
        Self::from_betas(betas, model)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Validation(format!("timestep {t} outside [1, {}]", self.len())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.one_minus_alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn model_timestep(&self, t: usize) -> usize {
        self.model_timesteps[t - 1]
    }

    /// Coefficients of `x̂0` and `x_t` in the reverse-transition mean.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let om = self.one_minus_alpha_bar(t);
        let c0 = self.alpha_bar(t - 1).sqrt() * self.beta(t) / om;
        let ct = self.alpha(t).sqrt() * self.one_minus_alpha_bar(t - 1) / om;
        (c0, ct)
    }
}
