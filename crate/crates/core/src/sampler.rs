//! Multi-scale joint sampling.
//!
//! Each step renders a clean image per level from the current stack, takes
//! an ancestral step with zoom-consistent noise, queries the denoiser with
//! guidance, and folds the new clean-image estimates back into a stack.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{query_checked, DenoiseQuery, Denoiser};
use crate::diffusion::{
    cfg_combine, ddpm_update, make_schedule, predict_clean, NoiseSchedule, ScheduleKind,
};
use crate::error::{Error, Result};
use crate::grounding::{apply_grounding, grounding_loss, AdamState, GroundingConfig};
use crate::image::Image;
use crate::pyramid::{blend_stack, naive_blend, ObservationSet};
use crate::rng::{gaussian_image, level_seed, stream, Purpose};
use crate::zoom::{render_layers, DownscaleMode, NoiseMode, ZoomSchedule, ZoomStack};

pub const DEFAULT_STEPS: usize = 256;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseStrategy {
    #[default]
    SharedExact,
    SharedPaper,
    Independent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlendMode {
    #[default]
    Multiresolution,
    Naive,
    Iterative,
    Independent,
}

macro_rules! kebab_from_str {
    ($ty:ty, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::invalid(format!(
                        concat!("unknown ", stringify!($ty), " '{}' (expected one of: ", $($name, " "),+, ")"),
                        other
                    ))),
                }
            }
        }
    };
}

kebab_from_str!(NoiseStrategy,
    "shared-exact" => NoiseStrategy::SharedExact,
    "shared-paper" => NoiseStrategy::SharedPaper,
    "independent" => NoiseStrategy::Independent,
);

kebab_from_str!(BlendMode,
    "multiresolution" => BlendMode::Multiresolution,
    "naive" => BlendMode::Naive,
    "iterative" => BlendMode::Iterative,
    "independent" => BlendMode::Independent,
);

kebab_from_str!(ScheduleKind,
    "cosine" => ScheduleKind::Cosine,
    "linear" => ScheduleKind::Linear,
);

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub omega: f64,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub seed: u64,
    pub noise_mode: NoiseStrategy,
    pub blend_mode: BlendMode,
    pub grounding: Option<GroundingConfig>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            omega: DEFAULT_GUIDANCE,
            steps: DEFAULT_STEPS,
            schedule: ScheduleKind::Cosine,
            seed: 0,
            noise_mode: NoiseStrategy::SharedExact,
            blend_mode: BlendMode::Multiresolution,
            grounding: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("sampling needs T >= 1"));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::invalid(format!(
                "guidance weight must be finite and >= 0, got {}",
                self.omega
            )));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.schedule)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl LevelStats {
    fn of(img: &Image) -> Self {
        Self {
            min: img.min(),
            max: img.max(),
            mean: img.mean(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub levels: Vec<LevelStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grounding_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplingTrace {
    pub records: Vec<StepRecord>,
    pub wall_time_secs: f64,
    /// Clean-image estimates fed to the last blending cycle.
    pub final_estimates: Vec<Image>,
}

impl SamplingTrace {
    /// One JSON object per line, one line per step.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

struct Sampler<'a> {
    schedule: &'a ZoomSchedule,
    prompts: &'a [String],
    denoiser: &'a dyn Denoiser,
    config: &'a SamplerConfig,
    noise: NoiseSchedule,
    level_seeds: Vec<u64>,
}

impl<'a> Sampler<'a> {
    fn new(
        schedule: &'a ZoomSchedule,
        prompts: &'a [String],
        denoiser: &'a dyn Denoiser,
        config: &'a SamplerConfig,
    ) -> Result<Self> {
        config.validate()?;
        if prompts.len() != schedule.levels() {
            return Err(Error::invalid(format!(
                "{} prompts for N = {}",
                prompts.len(),
                schedule.levels()
            )));
        }
        if let Some(g) = &config.grounding {
            g.validate(schedule)?;
        }
        let level_seeds = (0..schedule.levels())
            .map(|i| level_seed(config.seed, i))
            .collect();
        Ok(Self {
            schedule,
            prompts,
            denoiser,
            config,
            noise: config.noise_schedule()?,
            level_seeds,
        })
    }

    fn shape(&self) -> (usize, usize, usize) {
        (
            self.schedule.height(),
            self.schedule.width(),
            self.schedule.channels(),
        )
    }

    fn initial_latents(&self) -> Vec<Image> {
        let (h, w, c) = self.shape();
        self.level_seeds
            .iter()
            .map(|&s| initial_latent(s, h, w, c))
            .collect()
    }

    fn step_noise(&self, t: usize) -> Vec<Image> {
        let (h, w, c) = self.shape();
        self.level_seeds
            .iter()
            .map(|&s| step_noise(s, t, h, w, c))
            .collect()
    }

    fn level_noise(&self, raw: &[Image], level: usize) -> Result<Image> {
        let mode = match self.config.noise_mode {
            NoiseStrategy::Independent => return Ok(raw[level].clone()),
            NoiseStrategy::SharedExact => NoiseMode::Exact,
            NoiseStrategy::SharedPaper => NoiseMode::Paper,
        };
        render_layers(self.schedule, raw, level, DownscaleMode::from(mode))
    }

    fn level_step(
        &self,
        level: usize,
        z_t: &Image,
        x: &Image,
        eps: &Image,
        t: usize,
    ) -> Result<(Image, Image)> {
        level_step(
            self.denoiser,
            &self.noise,
            self.config.omega,
            level,
            &self.prompts[level],
            z_t,
            x,
            eps,
            t,
        )
    }

    fn ground(&self, obs: ObservationSet) -> Result<(ObservationSet, Option<f64>)> {
        match &self.config.grounding {
            None => Ok((obs, None)),
            Some(g) => {
                // fresh moments every blending cycle
                let mut state = AdamState::new();
                let grounded = apply_grounding(&obs, g, &mut state)?;
                let loss = grounding_loss(&grounded, &g.target)?;
                Ok((grounded, Some(loss)))
            }
        }
    }

    fn consolidate(&self, obs: &ObservationSet) -> Result<ZoomStack> {
        match self.config.blend_mode {
            BlendMode::Multiresolution | BlendMode::Iterative => blend_stack(obs),
            BlendMode::Naive => naive_blend(obs),
            BlendMode::Independent => ZoomStack::new(*self.schedule, obs.estimates().to_vec()),
        }
    }

    fn clean_for_level(&self, layers: &[Image], level: usize) -> Result<Image> {
        match self.config.blend_mode {
            BlendMode::Independent => Ok(layers[level].clone()),
            _ => render_layers(self.schedule, layers, level, DownscaleMode::Image),
        }
    }

    fn joint(&self) -> Result<(ZoomStack, SamplingTrace)> {
        let started = Instant::now();
        let n = self.schedule.levels();
        let mut stack = ZoomStack::zeros(*self.schedule);
        let mut latents = self.initial_latents();
        let mut records = Vec::with_capacity(self.config.steps);
        let mut last = Vec::new();

        for t in (1..=self.config.steps).rev() {
            let wrap = |e: Error| Error::Step {
                step: t,
                source: Box::new(e),
            };
            let raw = self.step_noise(t);
            let outputs = (0..n)
                .into_par_iter()
                .map(|i| {
                    let x = self.clean_for_level(stack.layers(), i)?;
                    let eps = self.level_noise(&raw, i)?;
                    self.level_step(i, &latents[i], &x, &eps, t)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(wrap)?;
            let (next, estimates): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
            latents = next;

            let obs = ObservationSet::new(*self.schedule, estimates).map_err(wrap)?;
            let (obs, loss) = self.ground(obs).map_err(wrap)?;
            stack = self.consolidate(&obs).map_err(wrap)?;
            records.push(StepRecord {
                t,
                levels: obs.estimates().iter().map(LevelStats::of).collect(),
                grounding_loss: loss,
            });
            last = obs.into_estimates();
        }
        Ok((
            stack,
            SamplingTrace {
                records,
                wall_time_secs: started.elapsed().as_secs_f64(),
                final_estimates: last,
            },
        ))
    }

    fn iterative(&self) -> Result<(ZoomStack, SamplingTrace)> {
        let started = Instant::now();
        let (h, w, c) = self.shape();
        let n = self.schedule.levels();
        let mut layers = vec![Image::zeros(h, w, c); n];
        let mut estimates = vec![Image::zeros(h, w, c); n];
        let mut latents = self.initial_latents();
        let mut records = Vec::with_capacity(self.config.steps);

        for t in (1..=self.config.steps).rev() {
            let wrap = |e: Error| Error::Step {
                step: t,
                source: Box::new(e),
            };
            let raw = self.step_noise(t);
            let mut loss = None;
            // finest first, so coarser levels step against renders that
            // already hold this cycle's finer layers
            for i in (0..n).rev() {
                let x = render_layers(self.schedule, &layers, i, DownscaleMode::Image)
                    .map_err(wrap)?;
                let eps = self.level_noise(&raw, i).map_err(wrap)?;
                let (z, est) = self.level_step(i, &latents[i], &x, &eps, t).map_err(wrap)?;
                latents[i] = z;
                estimates[i] = est;
                let obs = ObservationSet::new(*self.schedule, estimates.clone()).map_err(wrap)?;
                let (obs, l) = self.ground(obs).map_err(wrap)?;
                loss = l;
                estimates = obs.into_estimates();
                layers[i] = estimates[i].clone();
            }
            records.push(StepRecord {
                t,
                levels: estimates.iter().map(LevelStats::of).collect(),
                grounding_loss: loss,
            });
        }
        Ok((
            ZoomStack::new(*self.schedule, layers)?,
            SamplingTrace {
                records,
                wall_time_secs: started.elapsed().as_secs_f64(),
                final_estimates: estimates,
            },
        ))
    }
}

fn initial_latent(seed: u64, h: usize, w: usize, c: usize) -> Image {
    gaussian_image(&mut stream(seed, 0, Purpose::InitialLatent), h, w, c)
}

fn step_noise(seed: u64, t: usize, h: usize, w: usize, c: usize) -> Image {
    gaussian_image(&mut stream(seed, t, Purpose::StepNoise), h, w, c)
}

/// Ancestral step, guided noise prediction at `t - 1`, clean estimate.
#[allow(clippy::too_many_arguments)]
fn level_step(
    denoiser: &dyn Denoiser,
    noise: &NoiseSchedule,
    omega: f64,
    level: usize,
    prompt: &str,
    z_t: &Image,
    x: &Image,
    eps: &Image,
    t: usize,
) -> Result<(Image, Image)> {
    let z = ddpm_update(z_t, x, eps, t, noise)?;
    let query = DenoiseQuery {
        z: &z,
        t: t - 1,
        level,
        prompt: Some(prompt),
    };
    let cond = query_checked(denoiser, &query)?;
    let guided = if omega == 0.0 {
        cond
    } else {
        let uncond = query_checked(
            denoiser,
            &DenoiseQuery {
                prompt: None,
                ..query
            },
        )?;
        cfg_combine(&cond, &uncond, omega)?
    };
    let estimate = predict_clean(&z, &guided, t - 1, noise)?;
    if !estimate.is_finite() {
        return Err(Error::NonFinite(format!(
            "clean-image estimate for level {level} at t={} is not finite",
            t - 1
        )));
    }
    Ok((z, estimate))
}

/// Runs the multi-scale sampler. `config.blend_mode` selects the
/// consolidation; `Iterative` delegates to [`sample_iterative`].
pub fn joint_sample(
    schedule: &ZoomSchedule,
    prompts: &[String],
    denoiser: &dyn Denoiser,
    config: &SamplerConfig,
) -> Result<(ZoomStack, SamplingTrace)> {
    let sampler = Sampler::new(schedule, prompts, denoiser, config)?;
    match config.blend_mode {
        BlendMode::Iterative => sampler.iterative(),
        _ => sampler.joint(),
    }
}

/// Ablation: one level at a time, finest to coarsest, each writing its own
/// estimate straight into its layer with no cross-level blending.
pub fn sample_iterative(
    schedule: &ZoomSchedule,
    prompts: &[String],
    denoiser: &dyn Denoiser,
    config: &SamplerConfig,
) -> Result<ZoomStack> {
    Sampler::new(schedule, prompts, denoiser, config)?
        .iterative()
        .map(|(stack, _)| stack)
}

/// A plain single-level DDPM chain for `level`, seeded with `chain_seed`
/// (see [`level_seed`]). Matches what `joint_sample` computes for that level
/// with independent noise and independent blending.
pub fn sample_chain(
    schedule: &ZoomSchedule,
    level: usize,
    prompt: &str,
    denoiser: &dyn Denoiser,
    config: &SamplerConfig,
    chain_seed: u64,
) -> Result<Image> {
    config.validate()?;
    schedule.check_level(level)?;
    let noise = config.noise_schedule()?;
    let (h, w, c) = (schedule.height(), schedule.width(), schedule.channels());
    let mut z = initial_latent(chain_seed, h, w, c);
    let mut x = Image::zeros(h, w, c);
    for t in (1..=config.steps).rev() {
        let eps = step_noise(chain_seed, t, h, w, c);
        let (nz, nx) = level_step(denoiser, &noise, config.omega, level, prompt, &z, &x, &eps, t)
            .map_err(|e| Error::Step {
                step: t,
                source: Box::new(e),
            })?;
        z = nz;
        x = nx;
    }
    Ok(x)
}
