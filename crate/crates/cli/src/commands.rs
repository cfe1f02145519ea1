use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::thread;

use zoomstack::protocol::{serve, DEFAULT_TIMEOUT};
use zoomstack::pyramid::dump_band_contributions;
use zoomstack::stackfile::{load_stack, save_stack};
use zoomstack::verify::{max_render_inconsistency, run_all};
use zoomstack::video::export_sequence;
use zoomstack::{
    joint_sample, parse_scene_spec, BlendMode, Endpoint, Error, GroundingConfig, Image,
    NoiseStrategy, ObservationSet, RemoteDenoiser, Result, SamplerConfig, SamplingTrace,
    SceneSpec, ZoomStack,
};

use crate::backend::Backend;

/// Largest render disagreement a finished stack may show.
const CONSISTENCY_LIMIT: f64 = 1e-6;

pub struct Globals {
    pub seed: Option<u64>,
    pub backend: Backend,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Ablation {
    Independent,
    Iterative,
    Naive,
    UnsharedNoise,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Independent => "independent",
            Ablation::Iterative => "iterative",
            Ablation::Naive => "naive",
            Ablation::UnsharedNoise => "unshared-noise",
        }
    }

    fn apply(self, config: &mut SamplerConfig) {
        let (noise, blend) = match self {
            Ablation::Independent => (NoiseStrategy::Independent, BlendMode::Independent),
            Ablation::Iterative => (config.noise_mode, BlendMode::Iterative),
            Ablation::Naive => (config.noise_mode, BlendMode::Naive),
            Ablation::UnsharedNoise => (NoiseStrategy::Independent, BlendMode::Multiresolution),
        };
        config.noise_mode = noise;
        config.blend_mode = blend;
    }
}

fn load_scene(path: &Path, globals: &Globals) -> Result<SceneSpec> {
    let mut scene = parse_scene_spec(path)?;
    if let Some(seed) = globals.seed {
        scene.seed = seed;
    }
    Ok(scene)
}

fn load_target(path: &Path, scene: &SceneSpec) -> Result<Image> {
    let rgb = Image::load_png(path)?;
    let s = &scene.schedule;
    let img = match s.channels() {
        3 => rgb,
        1 => Image::from_fn(rgb.height(), rgb.width(), 1, |y, x, _| {
            (rgb.get(y, x, 0) + rgb.get(y, x, 1) + rgb.get(y, x, 2)) / 3.0
        }),
        c => {
            return Err(Error::Validation(format!(
                "grounding images need 1 or 3 channels, scene has {c}"
            )))
        }
    };
    if (img.height(), img.width()) != (s.height(), s.width()) {
        return Err(Error::Validation(format!(
            "grounding image {} is {}x{}, scene layers are {}x{}",
            path.display(),
            img.width(),
            img.height(),
            s.width(),
            s.height()
        )));
    }
    Ok(img)
}

fn sample(
    scene: &SceneSpec,
    config: &SamplerConfig,
    globals: &Globals,
) -> Result<(ZoomStack, SamplingTrace)> {
    let denoiser = globals.backend.build(
        &scene.schedule,
        &scene.prompts,
        config.noise_schedule()?,
    )?;
    let (stack, trace) = joint_sample(&scene.schedule, &scene.prompts, denoiser.as_ref(), config)?;
    let gap = max_render_inconsistency(&stack)?;
    if !(gap < CONSISTENCY_LIMIT) {
        return Err(Error::Invariant(format!(
            "cross-level render consistency: overlap differs by {gap:.3e}"
        )));
    }
    if let Some(path) = &globals.log {
        trace.write_jsonl(BufWriter::new(File::create(path)?))?;
    }
    eprintln!(
        "sampled {} levels x {} steps in {:.2}s",
        scene.schedule.levels(),
        config.steps,
        trace.wall_time_secs
    );
    Ok((stack, trace))
}

/// `stack.zstk`, one PNG per level render and a frame sequence.
fn write_outputs(stack: &ZoomStack, dir: &Path, frames: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_stack(stack, dir.join("stack.zstk"))?;
    for (i, render) in stack.render_all()?.iter().enumerate() {
        render.save_png(dir.join(format!("level_{i}.png")))?;
    }
    let manifest = export_sequence(stack, frames, &dir.join("frames"))?;
    eprintln!(
        "wrote {} and {} frames",
        dir.join("stack.zstk").display(),
        manifest.frames.len()
    );
    Ok(())
}

fn dump_bands(trace: &SamplingTrace, scene: &SceneSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let obs = ObservationSet::new(scene.schedule, trace.final_estimates.clone())?;
    for layer in 0..scene.schedule.levels() {
        dump_band_contributions(&obs, layer, dir)?;
    }
    Ok(())
}

pub fn generate(
    spec: &Path,
    frames: usize,
    dump: Option<&Path>,
    globals: &Globals,
) -> Result<()> {
    let scene = load_scene(spec, globals)?;
    let mut config = scene.sampler_config();
    if let Some(path) = &scene.grounding_image {
        config.grounding = Some(GroundingConfig::new(load_target(path, &scene)?));
    }
    let (stack, trace) = sample(&scene, &config, globals)?;
    write_outputs(&stack, &scene.output, frames)?;
    if let Some(dir) = dump {
        dump_bands(&trace, &scene, dir)?;
    }
    Ok(())
}

pub fn ground(spec: &Path, image: &Path, frames: usize, globals: &Globals) -> Result<()> {
    let scene = load_scene(spec, globals)?;
    let target = load_target(image, &scene)?;
    let mut config = scene.sampler_config();
    config.grounding = Some(GroundingConfig::new(target.clone()));
    let (stack, trace) = sample(&scene, &config, globals)?;
    if let Some(loss) = trace.records.last().and_then(|r| r.grounding_loss) {
        eprintln!("final grounding loss {loss:.4e}");
    }
    let psnr = stack.render(0)?.psnr(&target)?;
    eprintln!("outermost render vs target: {psnr:.2} dB");
    write_outputs(&stack, &scene.output, frames)
}

pub fn ablate(
    spec: &Path,
    mode: Ablation,
    frames: usize,
    compare: bool,
    globals: &Globals,
) -> Result<()> {
    let scene = load_scene(spec, globals)?;
    let mut config = scene.sampler_config();
    mode.apply(&mut config);
    let (stack, _) = sample(&scene, &config, globals)?;
    write_outputs(&stack, &scene.output.join(format!("ablate-{}", mode.name())), frames)?;
    if compare {
        let (joint, _) = sample(&scene, &scene.sampler_config(), globals)?;
        let mut out = io::stdout().lock();
        for i in 0..scene.schedule.levels() {
            let a = stack.render(i)?;
            let b = joint.render(i)?;
            writeln!(
                out,
                "level {i}: mean abs difference from joint {:.4e}",
                a.mean_abs_diff(&b)?
            )?;
        }
    }
    Ok(())
}

pub fn render(stack: &Path, frames: usize, out: Option<&Path>) -> Result<()> {
    let loaded = load_stack(stack)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => stack
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("frames"),
    };
    let manifest = export_sequence(&loaded, frames, &dir)?;
    eprintln!("wrote {} frames to {}", manifest.frames.len(), dir.display());
    Ok(())
}

pub fn verify() -> Result<()> {
    let reports = run_all()?;
    let mut out = io::stdout().lock();
    let mut failed = Vec::new();
    for r in &reports {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{tag} {}: {}", r.name, r.detail)?;
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant(format!("failed suites: {}", failed.join(", "))))
    }
}

pub fn serve_check(endpoint: &str) -> Result<()> {
    let endpoint: Endpoint = endpoint.parse()?;
    drop(RemoteDenoiser::connect(&endpoint, DEFAULT_TIMEOUT)?);
    println!("handshake ok: {endpoint:?}");
    Ok(())
}

/// Serves a built-in backend for the scene over stdio or TCP.
pub fn serve_builtin(spec: &Path, listen: Option<&str>, globals: &Globals) -> Result<()> {
    if !globals.backend.is_builtin() {
        return Err(Error::Validation(
            "serve only hosts built-in backends".into(),
        ));
    }
    let scene = load_scene(spec, globals)?;
    let denoiser = globals.backend.build(
        &scene.schedule,
        &scene.prompts,
        scene.sampler_config().noise_schedule()?,
    )?;
    let Some(addr) = listen else {
        return serve(denoiser.as_ref(), io::stdin().lock(), io::stdout().lock());
    };
    let listener = TcpListener::bind(addr)?;
    eprintln!("listening on {}", listener.local_addr()?);
    let denoiser: &dyn zoomstack::Denoiser = denoiser.as_ref();
    thread::scope(|scope| {
        for conn in listener.incoming() {
            let conn = conn?;
            conn.set_nodelay(true)?;
            let reader = conn.try_clone()?;
            scope.spawn(move || {
                if let Err(e) = serve(denoiser, io::BufReader::new(reader), BufWriter::new(conn)) {
                    eprintln!("session ended: {e}");
                }
            });
        }
        Ok(())
    })
}
