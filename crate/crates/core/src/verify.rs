//! Quick built-in property suites, run by `zoomstack verify`.

use crate::error::Result;
use crate::image::Image;
use crate::pyramid::{blend_stack, build_laplacian, recompose, ObservationSet};
use crate::rng::{gaussian_image, stream, Purpose};
use crate::zoom::{
    downscale, downscale_adjoint, downscale_once, DownscaleMode, NoiseMode, NoiseStack,
    ZoomSchedule, ZoomStack,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn report(name: &'static str, passed: bool, detail: String) -> SuiteReport {
    SuiteReport {
        name,
        passed,
        detail,
    }
}

fn random_stack(schedule: ZoomSchedule, seed: u64) -> ZoomStack {
    let layers = (0..schedule.levels())
        .map(|i| {
            gaussian_image(
                &mut stream(seed, i, Purpose::StepNoise),
                schedule.height(),
                schedule.width(),
                schedule.channels(),
            )
            .map(|v| (0.5 * v).tanh())
        })
        .collect();
    ZoomStack::new(schedule, layers).expect("random layers match schedule")
}

/// Largest disagreement between adjacent renders on their overlap.
pub fn max_render_inconsistency(stack: &ZoomStack) -> Result<f64> {
    let s = stack.schedule();
    let mut worst: f64 = 0.0;
    for i in 0..s.levels().saturating_sub(1) {
        let outer = stack
            .render(i)?
            .crop_center(s.height() / s.base(), s.width() / s.base())?;
        let inner = downscale_once(&stack.render(i + 1)?, s.base(), DownscaleMode::Image)?;
        worst = worst.max(outer.max_abs_diff(&inner)?);
    }
    Ok(worst)
}

fn consistency_suite() -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    for (k, (p, n)) in [(2, 3), (2, 4), (4, 2), (4, 3)].into_iter().enumerate() {
        let s = ZoomSchedule::new(p, n, 64, 64, 3)?;
        worst = worst.max(max_render_inconsistency(&random_stack(s, k as u64))?);
    }
    Ok(report(
        "render-consistency",
        worst < 1e-6,
        format!("max overlap difference {worst:.3e} (limit 1e-6)"),
    ))
}

fn noise_suite() -> Result<SuiteReport> {
    let s = ZoomSchedule::new(2, 3, 16, 16, 1)?;
    let draws = 2000;
    let mut sum = vec![0.0; 3];
    let mut sum_sq = vec![0.0; 3];
    for d in 0..draws {
        let e = NoiseStack::sample(s, &mut stream(0x5eed, d, Purpose::StepNoise));
        for level in 0..3 {
            let r = e.render(level, NoiseMode::Exact)?;
            sum[level] += r.sum();
            sum_sq[level] += r.sum_sq();
        }
    }
    let count = (draws * 256) as f64;
    let mut ok = true;
    let mut parts = Vec::new();
    for level in 0..3 {
        let mean = sum[level] / count;
        let var = sum_sq[level] / count - mean * mean;
        // pooled z-tests at significance 0.001
        let z_mean = mean * count.sqrt();
        let z_var = (var - 1.0) / (2.0 / count).sqrt();
        ok &= z_mean.abs() < 3.29 && z_var.abs() < 3.29;
        parts.push(format!("L{level}: mean {mean:+.4} var {var:.4}"));
    }
    Ok(report("noise-statistics", ok, parts.join(", ")))
}

fn pyramid_suite() -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let x = gaussian_image(&mut stream(seed, 0, Purpose::StepNoise), 64, 32, 3);
        let back = recompose(&build_laplacian(&x)?)?;
        worst = worst.max(back.max_abs_diff(&x)?);
    }
    Ok(report(
        "pyramid-reconstruction",
        worst < 1e-6,
        format!("max reconstruction error {worst:.3e} (limit 1e-6)"),
    ))
}

fn adjoint_suite() -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let u = gaussian_image(&mut stream(7, k, Purpose::StepNoise), 32, 32, 2);
        let v = gaussian_image(&mut stream(8, k, Purpose::StepNoise), 32, 32, 2);
        let lhs = downscale(&u, 2, k, DownscaleMode::Image)?.dot(&v)?;
        let rhs = u.dot(&downscale_adjoint(&v, 2, k, DownscaleMode::Image)?)?;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(report(
        "downscale-adjoint",
        worst < 1e-6,
        format!("max inner-product gap {worst:.3e} (limit 1e-6)"),
    ))
}

fn blend_suite() -> Result<SuiteReport> {
    let s = ZoomSchedule::new(2, 3, 32, 32, 1)?;
    let observations = (0..3)
        .map(|i| gaussian_image(&mut stream(99, i, Purpose::StepNoise), 32, 32, 1))
        .collect::<Vec<Image>>();
    let stack = blend_stack(&ObservationSet::new(s, observations)?)?;
    let worst = max_render_inconsistency(&stack)?;
    Ok(report(
        "blend-structural-consistency",
        worst < 1e-6,
        format!("blended stack overlap difference {worst:.3e}"),
    ))
}

pub fn run_all() -> Result<Vec<SuiteReport>> {
    Ok(vec![
        consistency_suite()?,
        noise_suite()?,
        pyramid_suite()?,
        adjoint_suite()?,
        blend_suite()?,
    ])
}
