//! Photograph-based zoom: pull the per-level estimates toward a target
//! photograph of the most zoomed-out view.
//!
//! The loss is `sum_i ||D_i(x_i) − M_i ⊙ xi||^2` over all pixels, channels
//! and levels. `D_i` output is zero outside the central window, as is the
//! masked target, so only the central `H/p^i` window of each term matters.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::pyramid::ObservationSet;
use crate::zoom::{downscale_adjoint, downscale_content, DownscaleMode, ZoomSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingConfig {
    pub target: Image,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl GroundingConfig {
    pub fn new(target: Image) -> Self {
        Self {
            target,
            steps: 5,
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self, schedule: &ZoomSchedule) -> Result<()> {
        schedule.check_image(&self.target, "grounding target")?;
        self.target.check_finite("grounding target")?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// Adam moments for each optimized estimate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    first: Vec<Image>,
    second: Vec<Image>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    /// One Adam update of `params` in place.
    pub fn update(
        &mut self,
        params: &mut [Image],
        grads: &[Image],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("parameter/gradient count mismatch"));
        }
        if self.first.is_empty() {
            self.first = grads
                .iter()
                .map(|g| Image::zeros(g.height(), g.width(), g.channels()))
                .collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::dim("Adam state does not match parameter count"));
        }
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            p.check_same_shape(g, "Adam update")?;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Residual `S^i(x_i) − center(xi)` on the central window of level `i`.
fn level_residual(schedule: &ZoomSchedule, x: &Image, target: &Image, level: usize) -> Result<Image> {
    let q = schedule.zoom(level);
    let down = downscale_content(x, schedule.base(), level, DownscaleMode::Image)?;
    let window = target.crop_center(schedule.height() / q, schedule.width() / q)?;
    down.zip_map(&window, |a, b| a - b)
}

fn check_inputs(obs: &ObservationSet, target: &Image) -> Result<()> {
    obs.schedule().check_image(target, "grounding target")
}

pub fn grounding_loss(obs: &ObservationSet, target: &Image) -> Result<f64> {
    check_inputs(obs, target)?;
    let s = obs.schedule();
    let terms = (0..s.levels())
        .into_par_iter()
        .map(|i| Ok(level_residual(s, obs.estimate(i), target, i)?.sum_sq()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum())
}

/// `2 D_i^T (D_i(x_i) − M_i ⊙ xi)` for every level.
pub fn grounding_grad(obs: &ObservationSet, target: &Image) -> Result<Vec<Image>> {
    check_inputs(obs, target)?;
    let s = obs.schedule();
    (0..s.levels())
        .into_par_iter()
        .map(|i| {
            let r = level_residual(s, obs.estimate(i), target, i)?;
            let padded = Image::pad_center(&r, s.height(), s.width())?;
            Ok(downscale_adjoint(&padded, s.base(), i, DownscaleMode::Image)?.scale(2.0))
        })
        .collect()
}

/// Runs `config.steps` Adam iterations on the loss, then clamps the
/// estimates to `[-1, 1]`.
pub fn apply_grounding(
    obs: &ObservationSet,
    config: &GroundingConfig,
    state: &mut AdamState,
) -> Result<ObservationSet> {
    if config.steps == 0 {
        return Ok(obs.clone());
    }
    config.validate(obs.schedule())?;
    let schedule = *obs.schedule();
    let mut current = obs.clone();
    for _ in 0..config.steps {
        let loss = grounding_loss(&current, &config.target)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "grounding loss became {loss} after {} Adam steps",
                state.step()
            )));
        }
        let grads = grounding_grad(&current, &config.target)?;
        let mut params = current.into_estimates();
        state.update(
            &mut params,
            &grads,
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.eps,
        )?;
        current = ObservationSet::new(schedule, params)?;
    }
    let clamped = current
        .into_estimates()
        .into_iter()
        .map(|x| x.clamp(-1.0, 1.0))
        .collect();
    ObservationSet::new(schedule, clamped)
}
