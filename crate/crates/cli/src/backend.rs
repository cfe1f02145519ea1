//! Denoiser backends selectable from the command line.

use std::str::FromStr;

use zoomstack::protocol::DEFAULT_TIMEOUT;
use zoomstack::synthetic::{prompt_key, Detail, Scene};
use zoomstack::{
    Denoiser, EchoDenoiser, Endpoint, Error, GaussianDenoiser, NoiseSchedule, OracleDenoiser,
    RemoteDenoiser, Result, ZoomSchedule,
};

/// Prior spread of the built-in Gaussian backend around its scene.
const GAUSSIAN_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Backend {
    Oracle,
    Gaussian,
    Echo,
    Remote(Endpoint),
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "builtin-oracle" => Ok(Backend::Oracle),
            "builtin-gaussian" => Ok(Backend::Gaussian),
            "builtin-echo" => Ok(Backend::Echo),
            other => other.parse().map(Backend::Remote).map_err(|_| {
                Error::Validation(format!(
                    "unknown backend '{other}' (expected builtin-oracle, builtin-gaussian, \
                     builtin-echo, remote:ADDR or subprocess:CMD)"
                ))
            }),
        }
    }
}

impl Backend {
    pub fn is_builtin(&self) -> bool {
        !matches!(self, Backend::Remote(_))
    }

    /// Built-in backends denoise toward a procedural scene keyed by the
    /// prompts, so the same scene file always describes the same world.
    pub fn build(
        &self,
        schedule: &ZoomSchedule,
        prompts: &[String],
        noise: NoiseSchedule,
    ) -> Result<Box<dyn Denoiser>> {
        let targets = || {
            Scene::random(prompt_key(prompts), schedule, Detail::Multiscale)
                .stack(schedule)
                .render_all()
        };
        Ok(match self {
            Backend::Oracle => Box::new(OracleDenoiser::new(targets()?, noise)),
            Backend::Gaussian => Box::new(GaussianDenoiser::new(targets()?, GAUSSIAN_STD, noise)?),
            Backend::Echo => Box::new(EchoDenoiser),
            Backend::Remote(endpoint) => Box::new(RemoteDenoiser::connect(endpoint, DEFAULT_TIMEOUT)?),
        })
    }
}
