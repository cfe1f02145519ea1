//! Scene description files.
//!
//! A scene file is TOML:
//!
//! ```toml
//! # zoomed-out first
//! prompts = [
//!     "an aerial photo of a forest",
//!     "a single tree from above",
//! ]
//! zoom_base = 2        # p, relative scale between adjacent levels
//! levels = 2           # N, must equal the number of prompts
//! height = 64
//! width = 64
//! channels = 3         # optional, default 3
//! seed = 0             # optional
//! guidance = 7.5       # optional, classifier-free guidance weight
//! steps = 256          # optional, sampling steps T
//! schedule = "cosine"  # optional: cosine | linear
//! noise_mode = "shared-exact"      # shared-exact | shared-paper | independent
//! blend_mode = "multiresolution"   # multiresolution | naive | iterative | independent
//! grounding_image = "photo.png"    # optional, relative to the scene file
//! output = "out"                   # optional, relative to the scene file
//! ```
//!
//! Unknown keys are rejected.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::Spanned;

use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::sampler::{BlendMode, NoiseStrategy, SamplerConfig, DEFAULT_GUIDANCE, DEFAULT_STEPS};
use crate::zoom::ZoomSchedule;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    prompts: Spanned<Vec<String>>,
    zoom_base: Spanned<i64>,
    levels: Spanned<i64>,
    height: Spanned<i64>,
    width: Spanned<i64>,
    channels: Option<Spanned<i64>>,
    seed: Option<u64>,
    guidance: Option<f64>,
    steps: Option<Spanned<i64>>,
    schedule: Option<ScheduleKind>,
    noise_mode: Option<NoiseStrategy>,
    blend_mode: Option<BlendMode>,
    grounding_image: Option<PathBuf>,
    output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub prompts: Vec<String>,
    pub schedule: ZoomSchedule,
    pub seed: u64,
    pub omega: f64,
    pub steps: usize,
    pub noise_schedule: ScheduleKind,
    pub noise_mode: NoiseStrategy,
    pub blend_mode: BlendMode,
    pub grounding_image: Option<PathBuf>,
    pub output: PathBuf,
}

impl SceneSpec {
    /// Sampler settings implied by the scene (no grounding attached).
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            omega: self.omega,
            steps: self.steps,
            schedule: self.noise_schedule,
            seed: self.seed,
            noise_mode: self.noise_mode,
            blend_mode: self.blend_mode,
            grounding: None,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn at<T>(text: &str, span: Range<usize>, message: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        line: line_of(text, span.start),
        message: message.into(),
    })
}

fn positive(text: &str, v: &Spanned<i64>, name: &str) -> Result<usize> {
    match usize::try_from(*v.get_ref()) {
        Ok(n) if n > 0 => Ok(n),
        _ => at(text, v.span(), format!("{name} must be a positive integer, got {}", v.get_ref())),
    }
}

/// Parses scene text. Relative paths resolve against `base_dir`.
pub fn parse_scene_str(text: &str, base_dir: &Path) -> Result<SceneSpec> {
    let raw: RawScene = toml::from_str(text).map_err(|e| Error::Parse {
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(1),
        message: e.message().to_owned(),
    })?;

    let levels = positive(text, &raw.levels, "levels")?;
    let base = positive(text, &raw.zoom_base, "zoom_base")?;
    if base < 2 {
        return at(text, raw.zoom_base.span(), format!("zoom_base must be >= 2, got {base}"));
    }
    let prompts = raw.prompts.get_ref();
    if prompts.len() != levels {
        return at(
            text,
            raw.prompts.span(),
            format!("{} prompts given but levels = {levels}", prompts.len()),
        );
    }
    let height = positive(text, &raw.height, "height")?;
    let width = positive(text, &raw.width, "width")?;
    let channels = match &raw.channels {
        Some(c) => positive(text, c, "channels")?,
        None => 3,
    };
    let schedule = ZoomSchedule::new(base, levels, height, width, channels).or_else(|e| {
        at(text, raw.height.span(), e.to_string())
    })?;
    let steps = match &raw.steps {
        Some(s) => positive(text, s, "steps")?,
        None => DEFAULT_STEPS,
    };
    let omega = raw.guidance.unwrap_or(DEFAULT_GUIDANCE);
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("guidance must be finite and >= 0, got {omega}"),
        });
    }
    Ok(SceneSpec {
        prompts: prompts.clone(),
        schedule,
        seed: raw.seed.unwrap_or(0),
        omega,
        steps,
        noise_schedule: raw.schedule.unwrap_or_default(),
        noise_mode: raw.noise_mode.unwrap_or_default(),
        blend_mode: raw.blend_mode.unwrap_or_default(),
        grounding_image: raw.grounding_image.map(|p| base_dir.join(p)),
        output: base_dir.join(raw.output.unwrap_or_else(|| PathBuf::from("out"))),
    })
}

pub fn parse_scene_spec(path: impl AsRef<Path>) -> Result<SceneSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    parse_scene_str(&text, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
prompts = ["a city from orbit", "a street corner"]
zoom_base = 2
levels = 2
height = 32
width = 32
"#;

    #[test]
    fn minimal_file() {
        let s = parse_scene_str(MINIMAL, Path::new("/scenes")).unwrap();
        assert_eq!(s.schedule.levels(), 2);
        assert_eq!(s.schedule.base(), 2);
        assert_eq!(s.schedule.channels(), 3);
        assert_eq!(s.steps, 256);
        assert_eq!(s.omega, 7.5);
        assert_eq!(s.blend_mode, BlendMode::Multiresolution);
        assert_eq!(s.output, PathBuf::from("/scenes/out"));
    }

    #[test]
    fn prompt_count_mismatch_names_both() {
        let text = MINIMAL.replace("levels = 2", "levels = 3").replace("32", "64");
        let err = parse_scene_str(&text, Path::new(".")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{msg}");
        assert!(msg.contains('2') && msg.contains("levels = 3"), "{msg}");
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let text = format!("{MINIMAL}colour = \"red\"\n");
        match parse_scene_str(&text, Path::new(".")) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 7);
                assert!(message.contains("colour"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_base_and_geometry() {
        let text = MINIMAL.replace("zoom_base = 2", "zoom_base = 1");
        assert!(matches!(
            parse_scene_str(&text, Path::new(".")),
            Err(Error::Parse { line: 3, .. })
        ));
        let text = MINIMAL.replace("height = 32", "height = 33");
        assert!(parse_scene_str(&text, Path::new(".")).is_err());
        let text = MINIMAL.replace("levels = 2", "levels = -2");
        assert!(parse_scene_str(&text, Path::new(".")).is_err());
    }

    #[test]
    fn modes_parse() {
        let text = format!(
            "{MINIMAL}noise_mode = \"independent\"\nblend_mode = \"naive\"\nschedule = \"linear\"\n"
        );
        let s = parse_scene_str(&text, Path::new(".")).unwrap();
        assert_eq!(s.noise_mode, NoiseStrategy::Independent);
        assert_eq!(s.blend_mode, BlendMode::Naive);
        assert_eq!(s.noise_schedule, ScheduleKind::Linear);
        let bad = format!("{MINIMAL}blend_mode = \"blurry\"\n");
        assert!(parse_scene_str(&bad, Path::new(".")).is_err());
    }
}
