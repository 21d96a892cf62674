//! Noise schedules and the DDPM forward/reverse process.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{standard_normal, Grid, RngStream};

/// Source of the reverse-step variance Σ_t.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VarianceMode {
    /// σ_t² = β_t
    #[default]
    FixedBeta,
    /// σ_t² = β̃_t, the forward-posterior variance.
    PosteriorBetaTilde,
}

impl VarianceMode {
    pub fn name(self) -> &'static str {
        match self {
            VarianceMode::FixedBeta => "fixed_beta",
            VarianceMode::PosteriorBetaTilde => "posterior_beta_tilde",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed_beta" => Ok(VarianceMode::FixedBeta),
            "posterior_beta_tilde" => Ok(VarianceMode::PosteriorBetaTilde),
            other => Err(Error::InvalidParameter(format!("unknown variance mode '{other}'"))),
        }
    }
}

/// Per-timestep coefficients of a length-`T` diffusion. Timesteps are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas `β_1..β_T`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidParameter("schedule needs T >= 1".into()));
        }
        if let Some(b) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidParameter(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_tilde = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    /// Linearly spaced betas, both endpoints inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// The 1000-step linear schedule (1e-4 .. 0.02) rescaled to `steps`
    /// steps, so that `ᾱ_T` stays near zero for short chains.
    pub fn linear_scaled(steps: usize) -> Result<Self> {
        let scale = 1000.0 / steps.max(1) as f64;
        Self::linear(steps, (1e-4 * scale).min(0.999), (0.02 * scale).min(0.999))
    }

    /// Squared-cosine `ᾱ` profile with offset 0.008; betas clipped at 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("schedule needs T >= 1".into()));
        }
        let f = |t: f64| {
            let s = 0.008;
            (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2)
        };
        let beta = (1..=steps)
            .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(0.999))
            .collect();
        Self::from_betas(beta)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with the convention `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Reverse-step standard deviation `σ_t = √β_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    /// Noise level of the marginal `x_t`, `√(1 − ᾱ_t)`.
    pub fn noise_std(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    pub fn variance(&self, t: usize, mode: VarianceMode) -> f64 {
        match mode {
            VarianceMode::FixedBeta => self.beta(t),
            VarianceMode::PosteriorBetaTilde => self.beta_tilde(t),
        }
    }

    /// `t,beta,alpha_bar,sigma` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,sigma\n");
        for t in 1..=self.steps() {
            let _ = writeln!(out, "{t},{},{},{}", self.beta(t), self.alpha_bar(t), self.sigma(t));
        }
        out
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(x0: &Grid, t: usize, eps: &Grid, sched: &NoiseSchedule) -> Result<Grid> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    x0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// One Markov forward step `x_t = √α_t·x_{t−1} + √β_t·z`.
pub fn forward_step(x_prev: &Grid, t: usize, z: &Grid, sched: &NoiseSchedule) -> Result<Grid> {
    sched.check(t)?;
    x_prev.lincomb(sched.alpha(t).sqrt(), z, sched.beta(t).sqrt())
}

/// Intermediate reconstruction `x̂0 = (x_t − √(1−ᾱ_t)·ε)/√ᾱ_t`.
pub fn predict_x0(x_t: &Grid, eps: &Grid, t: usize, sched: &NoiseSchedule) -> Result<Grid> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps, |x, e| (x - n * e) / s)
}

/// Forward-posterior mean `μ̃_t(x0, x_t)`.
pub fn posterior_mean(x0: &Grid, x_t: &Grid, t: usize, sched: &NoiseSchedule) -> Result<Grid> {
    sched.check(t)?;
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let c0 = ab_prev.sqrt() * sched.beta(t) / (1.0 - ab);
    let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    x0.lincomb(c0, x_t, ct)
}

/// Mean of `p(x_{t−1} | x_t)`: `(x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`.
pub fn reverse_mean(x_t: &Grid, eps_hat: &Grid, t: usize, sched: &NoiseSchedule) -> Result<Grid> {
    sched.check(t)?;
    let k = sched.beta(t) / sched.noise_std(t);
    let inv = 1.0 / sched.alpha(t).sqrt();
    x_t.zip_map(eps_hat, |x, e| (x - k * e) * inv)
}

/// Reverse step with explicit noise `z`; `z` is ignored at `t = 1`.
pub fn reverse_step_with_noise(
    x_t: &Grid,
    eps_hat: &Grid,
    t: usize,
    sched: &NoiseSchedule,
    z: &Grid,
    mode: VarianceMode,
) -> Result<Grid> {
    let mean = reverse_mean(x_t, eps_hat, t, sched)?;
    if t == 1 {
        return Ok(mean);
    }
    let std = sched.variance(t, mode).sqrt();
    mean.lincomb(1.0, z, std)
}

/// Ancestral sample `x_{t−1} ~ N(μ_θ(x_t, ε̂), Σ_t)`. No noise is drawn at
/// `t = 1`, so the final step is deterministic and leaves `rng` untouched.
pub fn reverse_step(
    x_t: &Grid,
    eps_hat: &Grid,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
    mode: VarianceMode,
) -> Result<Grid> {
    x_t.ensure_same_shape(eps_hat, "reverse_step")?;
    sched.check(t)?;
    if t == 1 {
        return reverse_mean(x_t, eps_hat, t, sched);
    }
    let z = standard_normal(rng, x_t.shape());
    reverse_step_with_noise(x_t, eps_hat, t, sched, &z, mode)
}

/// One `(x0, t, ε)` training triple.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub x0: Grid,
    pub t: usize,
    pub eps: Grid,
    pub class: Option<usize>,
}

/// `L_simple`: mean over batch and elements of `(ε − ε_θ(x_t, t))²`.
pub fn simple_loss<F>(model: F, batch: &[TrainingExample], sched: &NoiseSchedule) -> Result<f64>
where
    F: Fn(&Grid, usize, Option<usize>) -> Result<Grid>,
{
    if batch.is_empty() {
        return Err(Error::InvalidParameter("simple_loss on an empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        let x_t = forward_diffuse(&ex.x0, ex.t, &ex.eps, sched)?;
        let pred = model(&x_t, ex.t, ex.class)?;
        pred.ensure_same_shape(&ex.eps, "simple_loss prediction")?;
        let se: f64 = ex
            .eps
            .data()
            .iter()
            .zip(pred.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += se / ex.eps.len() as f64;
    }
    Ok(total / batch.len() as f64)
}
