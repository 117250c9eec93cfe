//! DDPM noise schedules, forward noising and the x0-parameterized reverse step.

use cospeech_autograd::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper clamp on any single step variance.
const MAX_BETA: f64 = 0.9999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Tables indexed by step `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit step variances, each in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Invalid(format!("step variance {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
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

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Posterior variance `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let denom = 1.0 - self.alpha_bar(t);
        let c0 = self.alpha_bar(t - 1).sqrt() * self.beta(t) / denom;
        let ct = self.alpha(t).sqrt() * (1.0 - self.alpha_bar(t - 1)) / denom;
        (c0, ct)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::Invalid(format!("step {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}

/// Linear betas are quoted for a 1000-step chain and rescaled by `1000 / T`,
/// so shorter chains still end near pure noise.
pub fn make_schedule(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::Invalid("schedule needs at least one step".into()));
    }
    let betas = match kind {
        ScheduleKind::Linear => {
            let scale = 1000.0 / steps as f64;
            let (lo, hi) = (beta_start * scale, beta_end * scale);
            (0..steps)
                .map(|i| {
                    let b = if steps == 1 { hi } else { lo + (hi - lo) * i as f64 / (steps - 1) as f64 };
                    b.min(MAX_BETA)
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=steps).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, MAX_BETA)).collect()
        }
    };
    NoiseSchedule::from_betas(betas)
}

fn gaussian_like<S: Scalar>(like: &Tensor<S>, rng: &mut impl Rng) -> Tensor<S> {
    Tensor::from_fn(like.rows(), like.cols(), |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        S::from_f64(z)
    })
}

/// Standard normal tensor of the given shape.
pub fn gaussian<S: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<S> {
    gaussian_like(&Tensor::<S>::zeros(rows, cols), rng)
}

/// `x_t = √ᾱ_t x0 + √(1 − ᾱ_t) ε`; ε is drawn from `rng` when not given.
pub fn q_sample<S: Scalar>(
    x0: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&Tensor<S>>,
    rng: &mut impl Rng,
) -> Result<Tensor<S>> {
    sched.check_step(t)?;
    let drawn;
    let eps = match noise {
        Some(n) => n,
        None => {
            drawn = gaussian_like(x0, rng);
            &drawn
        }
    };
    let ab = sched.alpha_bar(t);
    let (a, b) = (S::from_f64(ab.sqrt()), S::from_f64((1.0 - ab).sqrt()));
    Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// One ancestral step from `t` to `t − 1` given the predicted clean signal.
/// Without `noise` the posterior mean is returned; at `t = 1` the prediction
/// itself is returned.
pub fn reverse_step<S: Scalar>(
    x_t: &Tensor<S>,
    x0_hat: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    sched.check_step(t)?;
    if t == 1 {
        return Ok(x0_hat.clone());
    }
    let (c0, ct) = sched.posterior_mean_coefs(t);
    let (c0, ct) = (S::from_f64(c0), S::from_f64(ct));
    let mut out = x0_hat.zip_map(x_t, |a, b| c0 * a + ct * b)?;
    if let Some(z) = noise {
        let sd = S::from_f64(sched.posterior_variance(t).sqrt());
        out = out.zip_map(z, |m, e| m + sd * e)?;
    }
    Ok(out)
}
