//! Variance-preserving noise schedules and single-step diffusion algebra.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Lower bound on `sigma_t`. Keeps the clean-image inverse well defined at
/// `t = 0`, where the sampler queries the denoiser one last time.
pub const SIGMA_FLOOR: f64 = 1e-2;

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

/// `alpha_t`, `sigma_t` for `t = 0..=T` with `alpha^2 + sigma^2 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from cumulative signal fractions `abar_t`.
    /// Per-step betas are capped at 0.999 and a small noise floor is
    /// mixed in so `sigma_0 > 0`.
    fn from_alpha_bar(raw: &[f64]) -> Self {
        let mut abar = Vec::with_capacity(raw.len());
        abar.push(1.0);
        for t in 1..raw.len() {
            let beta = (1.0 - raw[t] / raw[t - 1]).clamp(0.0, MAX_BETA);
            abar.push(abar[t - 1] * (1.0 - beta));
        }
        let floor2 = SIGMA_FLOOR * SIGMA_FLOOR;
        let sigma2: Vec<f64> = abar
            .iter()
            .map(|a| floor2 + (1.0 - floor2) * (1.0 - a))
            .collect();
        Self {
            alpha: sigma2.iter().map(|s| (1.0 - s).sqrt()).collect(),
            sigma: sigma2.iter().map(|s| s.sqrt()).collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha[t] * self.alpha[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t <= self.steps() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "step {t} outside schedule of {} steps",
                self.steps()
            )))
        }
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    let raw: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let f = |u: f64| {
                let a = ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
                    .cos();
                a * a
            };
            let f0 = f(0.0);
            (0..=steps).map(|t| f(t as f64 / steps as f64) / f0).collect()
        }
        ScheduleKind::Linear => {
            // Betas from 1e-4 to 2e-2 at 1000 steps, rescaled for other T.
            let scale = 1000.0 / steps as f64;
            let (lo, hi) = (1e-4 * scale, 2e-2 * scale);
            let mut out = vec![1.0];
            for t in 1..=steps {
                let frac = if steps == 1 {
                    1.0
                } else {
                    (t - 1) as f64 / (steps - 1) as f64
                };
                let beta = (lo + (hi - lo) * frac).min(MAX_BETA);
                out.push(out[t - 1] * (1.0 - beta));
            }
            out
        }
    };
    Ok(NoiseSchedule::from_alpha_bar(&raw))
}

/// `(1 + w)·cond − w·uncond`.
pub fn cfg_combine(eps_cond: &Image, eps_uncond: &Image, omega: f64) -> Result<Image> {
    eps_cond.zip_map(eps_uncond, |c, u| (1.0 + omega) * c - omega * u)
}

/// `(z − sigma_t·eps)/alpha_t` without clamping.
pub fn predict_clean_raw(z: &Image, eps_hat: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image> {
    sched.check_step(t)?;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    if a <= 0.0 {
        return Err(Error::invalid(format!("alpha_{t} is zero")));
    }
    z.zip_map(eps_hat, |zv, e| (zv - s * e) / a)
}

/// Clean-image estimate, clamped to `[-1, 1]`.
pub fn predict_clean(z: &Image, eps_hat: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image> {
    Ok(predict_clean_raw(z, eps_hat, t, sched)?.clamp(-1.0, 1.0))
}

/// Coefficients of the ancestral step `z_{t-1} = cx·x + cz·z_t + std·eps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoefficients {
    pub clean: f64,
    pub latent: f64,
    pub std: f64,
}

pub fn posterior_coefficients(t: usize, sched: &NoiseSchedule) -> Result<PosteriorCoefficients> {
    if t < 1 {
        return Err(Error::invalid("ancestral step needs t >= 1"));
    }
    sched.check_step(t)?;
    let abar_t = sched.alpha_bar(t);
    let abar_prev = sched.alpha_bar(t - 1);
    let beta = 1.0 - abar_t / abar_prev;
    let denom = 1.0 - abar_t;
    let clean = abar_prev.sqrt() * beta / denom;
    let latent = (abar_t / abar_prev).sqrt() * (1.0 - abar_prev) / denom;
    let var = beta * (1.0 - abar_prev) / denom;
    Ok(PosteriorCoefficients {
        clean,
        latent,
        std: if t == 1 { 0.0 } else { var.max(0.0).sqrt() },
    })
}

/// One ancestral DDPM step in clean-image parameterization. The final step
/// (`t = 1`) returns the posterior mean and ignores `eps`.
pub fn ddpm_update(
    z_t: &Image,
    x_hat: &Image,
    eps: &Image,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Image> {
    let c = posterior_coefficients(t, sched)?;
    z_t.check_same_shape(x_hat, "ddpm_update")?;
    let mean = x_hat.zip_map(z_t, |x, z| c.clean * x + c.latent * z)?;
    if c.std == 0.0 {
        return Ok(mean);
    }
    mean.zip_map(eps, |m, e| m + c.std * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_image, stream, Purpose};

    #[test]
    fn schedule_invariants() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            for steps in [1, 2, 16, 64, 256, 1000] {
                let s = make_schedule(steps, kind).unwrap();
                assert_eq!(s.steps(), steps);
                assert!(s.alpha(0) >= 0.999, "{kind:?} {steps}");
                assert!(s.sigma(0) <= 0.05);
                assert!(s.sigma(steps) >= 0.99, "{kind:?} {steps}: {}", s.sigma(steps));
                for t in 0..=steps {
                    let r = s.alpha(t).powi(2) + s.sigma(t).powi(2);
                    assert!((r - 1.0).abs() < 1e-9);
                }
                for t in 1..=steps {
                    assert!(s.alpha(t) < s.alpha(t - 1), "{kind:?} {steps} t={t}");
                }
            }
        }
        assert!(make_schedule(0, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn guidance_arithmetic() {
        let c = Image::filled(2, 2, 1, 1.0);
        let u = Image::filled(2, 2, 1, 0.5);
        let g = cfg_combine(&c, &u, 2.0).unwrap();
        assert!(g.data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        let same = cfg_combine(&u, &u, 7.5).unwrap();
        assert!(same.max_abs_diff(&u).unwrap() < 1e-14);
        assert!(cfg_combine(&c, &Image::zeros(2, 3, 1), 1.0).is_err());
    }

    #[test]
    fn clean_prediction_inverts_forward_process() {
        let s = make_schedule(32, ScheduleKind::Cosine).unwrap();
        let x = gaussian_image(&mut stream(1, 0, Purpose::StepNoise), 4, 4, 1).scale(0.3);
        let e = gaussian_image(&mut stream(2, 0, Purpose::StepNoise), 4, 4, 1);
        for t in [1, 10, 31] {
            let z = x.zip_map(&e, |xv, ev| s.alpha(t) * xv + s.sigma(t) * ev).unwrap();
            let back = predict_clean(&z, &e, t, &s).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
            let z0 = x.scale(s.alpha(t));
            let back0 = predict_clean(&z0, &Image::zeros(4, 4, 1), t, &s).unwrap();
            assert!(back0.max_abs_diff(&x).unwrap() < 1e-12);
        }
        assert!(predict_clean(&x, &e, 33, &s).is_err());
    }

    #[test]
    fn clean_prediction_derivative() {
        let s = make_schedule(64, ScheduleKind::Cosine).unwrap();
        let t = 20;
        let z = gaussian_image(&mut stream(3, 0, Purpose::StepNoise), 3, 3, 1).scale(0.1);
        let e = Image::zeros(3, 3, 1);
        let h = 1e-6;
        for idx in 0..z.len() {
            let mut zp = z.clone();
            zp.data_mut()[idx] += h;
            let mut zm = z.clone();
            zm.data_mut()[idx] -= h;
            let fp = predict_clean(&zp, &e, t, &s).unwrap();
            let fm = predict_clean(&zm, &e, t, &s).unwrap();
            let d = (fp.data()[idx] - fm.data()[idx]) / (2.0 * h);
            assert!((d - 1.0 / s.alpha(t)).abs() < 1e-6);
        }
    }

    #[test]
    fn last_step_ignores_noise() {
        let s = make_schedule(8, ScheduleKind::Cosine).unwrap();
        let z = Image::filled(2, 2, 1, 0.4);
        let x = Image::filled(2, 2, 1, -0.1);
        let a = ddpm_update(&z, &x, &Image::filled(2, 2, 1, 5.0), 1, &s).unwrap();
        let b = ddpm_update(&z, &x, &Image::filled(2, 2, 1, -3.0), 1, &s).unwrap();
        assert_eq!(a, b);
        assert!(ddpm_update(&z, &x, &z, 0, &s).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let s = make_schedule(8, ScheduleKind::Linear).unwrap();
        let z = Image::zeros(3, 3, 2);
        for t in 1..=8 {
            assert_eq!(ddpm_update(&z, &z, &z, t, &s).unwrap(), z);
        }
    }
}
