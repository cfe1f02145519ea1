//! Continuous zoom frames from a finished stack.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::zoom::ZoomStack;

const ZOOM_EPS: f64 = 1e-9;

/// Frame at continuous magnification `zoom` in `[1, p^(N-1)]`: the render of
/// level `floor(log_p zoom)`, magnified about its center by the remainder.
pub fn render_frame(stack: &ZoomStack, zoom: f64) -> Result<Image> {
    let s = stack.schedule();
    let max = s.max_zoom() as f64;
    if !(zoom >= 1.0 - ZOOM_EPS && zoom <= max * (1.0 + ZOOM_EPS)) {
        return Err(Error::invalid(format!("zoom {zoom} outside [1, {max}]")));
    }
    let mut level = 0;
    while level + 1 < s.levels() && s.zoom(level + 1) as f64 <= zoom * (1.0 + ZOOM_EPS) {
        level += 1;
    }
    let base = stack.render(level)?;
    let factor = zoom / s.zoom(level) as f64;
    if (factor - 1.0).abs() <= ZOOM_EPS {
        return Ok(base);
    }
    let (h, w) = (s.height() as f64, s.width() as f64);
    let (cy, cx) = (h / 2.0, w / 2.0);
    Ok(base.sample_affine(
        s.height(),
        s.width(),
        |y| cy + (y + 0.5 - cy) / factor - 0.5,
        |x| cx + (x + 0.5 - cx) / factor - 0.5,
    ))
}

/// Geometric zoom values from 1 to `p^(N-1)`, constant ratio per frame.
pub fn zoom_sequence(max_zoom: f64, frames: usize) -> Result<Vec<f64>> {
    if frames < 2 {
        return Err(Error::invalid("need at least two frames"));
    }
    let last = frames - 1;
    Ok((0..frames)
        .map(|f| {
            if f == 0 {
                1.0
            } else if f == last {
                max_zoom
            } else {
                max_zoom.powf(f as f64 / last as f64)
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub file: String,
    pub zoom: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub frames: Vec<FrameEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes `frame_00000.png`… and `manifest.json` into `dir`.
pub fn export_sequence(stack: &ZoomStack, frames: usize, dir: &Path) -> Result<FrameManifest> {
    let zooms = zoom_sequence(stack.schedule().max_zoom() as f64, frames)?;
    fs::create_dir_all(dir).map_err(|e| {
        Error::invalid(format!("cannot create output directory {}: {e}", dir.display()))
    })?;
    let entries = zooms
        .par_iter()
        .enumerate()
        .map(|(index, &zoom)| {
            let file = format!("frame_{index:05}.png");
            render_frame(stack, zoom)?.save_png(dir.join(&file))?;
            Ok(FrameEntry { index, file, zoom })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = FrameManifest { frames: entries };
    let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::from)?;
    fs::write(dir.join(MANIFEST_NAME), text + "\n")?;
    Ok(manifest)
}
