//! The noise-prediction contract and the built-in analytic backends.

use std::sync::Arc;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::Image;

/// One noise-prediction query. `prompt == None` is the unconditional query.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseQuery<'a> {
    pub z: &'a Image,
    pub t: usize,
    pub level: usize,
    pub prompt: Option<&'a str>,
}

/// `eps_theta(z_t; t, y)`: returns a noise prediction shaped like `z`.
pub trait Denoiser: Send + Sync {
    fn predict_noise(&self, query: &DenoiseQuery<'_>) -> Result<Image>;
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn predict_noise(&self, query: &DenoiseQuery<'_>) -> Result<Image> {
        (**self).predict_noise(query)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict_noise(&self, query: &DenoiseQuery<'_>) -> Result<Image> {
        (**self).predict_noise(query)
    }
}

/// Calls a backend and enforces the output contract.
pub fn query_checked(denoiser: &dyn Denoiser, query: &DenoiseQuery<'_>) -> Result<Image> {
    let eps = denoiser.predict_noise(query)?;
    if eps.shape() != query.z.shape() {
        return Err(Error::Backend(format!(
            "denoiser returned shape {:?} for input {:?}",
            eps.shape(),
            query.z.shape()
        )));
    }
    if !eps.is_finite() {
        return Err(Error::Backend(format!(
            "denoiser returned non-finite values at t={} level={}",
            query.t, query.level
        )));
    }
    Ok(eps)
}

fn schedule_coeffs(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    if t > schedule.steps() {
        return Err(Error::Backend(format!(
            "timestep {t} beyond schedule of {} steps",
            schedule.steps()
        )));
    }
    Ok((schedule.alpha(t), schedule.sigma(t)))
}

/// Predicts exactly the noise that separates `z` from a fixed target per
/// level, so the clean-image estimate is always that target.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    targets: Vec<Image>,
    schedule: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(targets: Vec<Image>, schedule: NoiseSchedule) -> Self {
        Self { targets, schedule }
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_noise(&self, q: &DenoiseQuery<'_>) -> Result<Image> {
        let target = self
            .targets
            .get(q.level)
            .ok_or_else(|| Error::Backend(format!("oracle has no target for level {}", q.level)))?;
        let (a, s) = schedule_coeffs(&self.schedule, q.t)?;
        q.z.zip_map(target, |z, x| (z - a * x) / s)
    }
}

/// Exact posterior for data `x ~ N(mu_level, std^2 I)`.
#[derive(Clone, Debug)]
pub struct GaussianDenoiser {
    means: Vec<Image>,
    std: f64,
    schedule: NoiseSchedule,
}

impl GaussianDenoiser {
    pub fn new(means: Vec<Image>, std: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::invalid(format!("prior std must be positive, got {std}")));
        }
        Ok(Self {
            means,
            std,
            schedule,
        })
    }

    /// `E[x | z_t] = (alpha s^2 z + sigma^2 mu) / (alpha^2 s^2 + sigma^2)`.
    pub fn posterior_mean(&self, z: &Image, t: usize, level: usize) -> Result<Image> {
        let mu = self
            .means
            .get(level)
            .ok_or_else(|| Error::Backend(format!("no prior mean for level {level}")))?;
        let (a, s) = schedule_coeffs(&self.schedule, t)?;
        let v = self.std * self.std;
        let denom = a * a * v + s * s;
        z.zip_map(mu, |zv, m| (a * v * zv + s * s * m) / denom)
    }
}

impl Denoiser for GaussianDenoiser {
    fn predict_noise(&self, q: &DenoiseQuery<'_>) -> Result<Image> {
        let mean = self.posterior_mean(q.z, q.t, q.level)?;
        let (a, s) = schedule_coeffs(&self.schedule, q.t)?;
        q.z.zip_map(&mean, |z, m| (z - a * m) / s)
    }
}

/// Returns its input. Useful as a transport loopback.
#[derive(Clone, Copy, Debug, Default)]
pub struct EchoDenoiser;

impl Denoiser for EchoDenoiser {
    fn predict_noise(&self, q: &DenoiseQuery<'_>) -> Result<Image> {
        Ok(q.z.clone())
    }
}
