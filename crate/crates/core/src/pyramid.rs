//! Laplacian pyramids and multi-resolution blending of per-level estimates.
//!
//! Layer `i` of the blended stack is assembled from every observation
//! `m <= i`: the central `H/p^(i-m)` crop of observation `m` covers exactly
//! the field of view of level `i`, so it is upscaled to full size and
//! decomposed into bands. A coarse observation only has genuine content up
//! to its own Nyquist limit, so it contributes band `k` only when
//! `k >= ceil(log2(p^(i-m)))`. Each band is the mean over its contributors.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::zoom::{ZoomSchedule, ZoomStack};

/// 5-tap binomial smoothing kernel.
const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

pub const DEFAULT_MIN_SIZE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianPyramid {
    bands: Vec<Image>,
    residual: Image,
}

impl LaplacianPyramid {
    pub fn from_parts(bands: Vec<Image>, residual: Image) -> Result<Self> {
        let mut expect = residual.shape();
        for (k, band) in bands.iter().enumerate().rev() {
            let want = (expect.0 * 2, expect.1 * 2, expect.2);
            if band.shape() != want {
                return Err(Error::dim(format!(
                    "band {k} has shape {:?}, expected {want:?}",
                    band.shape()
                )));
            }
            expect = want;
        }
        Ok(Self { bands, residual })
    }

    pub fn bands(&self) -> &[Image] {
        &self.bands
    }

    pub fn residual(&self) -> &Image {
        &self.residual
    }

    /// Number of difference bands `K`; the residual sits at index `K`.
    pub fn depth(&self) -> usize {
        self.bands.len()
    }

    /// `a·self + b·other`, band by band.
    pub fn combine(&self, a: f64, other: &LaplacianPyramid, b: f64) -> Result<LaplacianPyramid> {
        if self.depth() != other.depth() {
            return Err(Error::dim("pyramid depth mismatch"));
        }
        let bands = self
            .bands
            .iter()
            .zip(&other.bands)
            .map(|(x, y)| x.zip_map(y, |u, v| a * u + b * v))
            .collect::<Result<Vec<_>>>()?;
        let residual = self.residual.zip_map(&other.residual, |u, v| a * u + b * v)?;
        Ok(LaplacianPyramid { bands, residual })
    }
}

/// Band count for an `h`×`w` image down to a `min_size` residual.
pub fn pyramid_depth(h: usize, w: usize, min_size: usize) -> Result<usize> {
    if min_size == 0 {
        return Err(Error::invalid("minimum band size must be positive"));
    }
    let side = h.min(w);
    if h % min_size != 0 || w % min_size != 0 {
        return Err(Error::dim(format!(
            "{h}x{w} is not a multiple of the minimum band size {min_size}"
        )));
    }
    let ratio = side / min_size;
    if !ratio.is_power_of_two() {
        return Err(Error::dim(format!(
            "{h}x{w}: min side / {min_size} must be a power of two"
        )));
    }
    let depth = ratio.trailing_zeros() as usize;
    let scale = 1usize << depth;
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::dim(format!("{h}x{w} is not divisible by {scale}")));
    }
    Ok(depth)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

fn blur_rows(x: &Image, gain: f64) -> Image {
    let (h, w, c) = x.shape();
    Image::from_fn(h, w, c, |y, xx, ch| {
        BINOMIAL
            .iter()
            .enumerate()
            .map(|(t, k)| k * x.get(y, reflect(xx as isize + t as isize - 2, w), ch))
            .sum::<f64>()
            * gain
    })
}

fn blur_cols(x: &Image, gain: f64) -> Image {
    let (h, w, c) = x.shape();
    Image::from_fn(h, w, c, |y, xx, ch| {
        BINOMIAL
            .iter()
            .enumerate()
            .map(|(t, k)| k * x.get(reflect(y as isize + t as isize - 2, h), xx, ch))
            .sum::<f64>()
            * gain
    })
}

/// Smooth then keep every other sample.
fn reduce(x: &Image) -> Image {
    let blurred = blur_cols(&blur_rows(x, 1.0), 1.0);
    let (h, w, c) = x.shape();
    Image::from_fn(h / 2, w / 2, c, |y, xx, ch| blurred.get(2 * y, 2 * xx, ch))
}

/// Zero-insert to double size, then smooth with gain 4.
fn expand(x: &Image) -> Image {
    let (h, w, c) = x.shape();
    let mut up = Image::zeros(2 * h, 2 * w, c);
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                up.set(2 * y, 2 * xx, ch, x.get(y, xx, ch));
            }
        }
    }
    blur_cols(&blur_rows(&up, 2.0), 2.0)
}

pub fn build_laplacian(x: &Image) -> Result<LaplacianPyramid> {
    build_laplacian_with(x, DEFAULT_MIN_SIZE)
}

pub fn build_laplacian_with(x: &Image, min_size: usize) -> Result<LaplacianPyramid> {
    let depth = pyramid_depth(x.height(), x.width(), min_size)?;
    let mut bands = Vec::with_capacity(depth);
    let mut current = x.clone();
    for _ in 0..depth {
        let low = reduce(&current);
        let band = current.zip_map(&expand(&low), |a, b| a - b)?;
        bands.push(band);
        current = low;
    }
    Ok(LaplacianPyramid {
        bands,
        residual: current,
    })
}

pub fn recompose(pyr: &LaplacianPyramid) -> Result<Image> {
    let mut current = pyr.residual.clone();
    for band in pyr.bands.iter().rev() {
        let up = expand(&current);
        current = band.zip_map(&up, |a, b| a + b).map_err(|_| {
            Error::dim(format!(
                "band shape {:?} does not match expanded {:?}",
                band.shape(),
                up.shape()
            ))
        })?;
    }
    Ok(current)
}

/// Per-level clean-image estimates, one for each zoom level.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    schedule: ZoomSchedule,
    estimates: Vec<Image>,
}

impl ObservationSet {
    pub fn new(schedule: ZoomSchedule, estimates: Vec<Image>) -> Result<Self> {
        if estimates.len() != schedule.levels() {
            return Err(Error::invalid(format!(
                "{} observations for N = {}",
                estimates.len(),
                schedule.levels()
            )));
        }
        for (i, e) in estimates.iter().enumerate() {
            schedule.check_image(e, &format!("observation {i}"))?;
        }
        Ok(Self {
            schedule,
            estimates,
        })
    }

    /// Renders of a stack at every level. Always mutually consistent.
    pub fn rendered_from(stack: &ZoomStack) -> Result<Self> {
        Self::new(*stack.schedule(), stack.render_all()?)
    }

    pub fn schedule(&self) -> &ZoomSchedule {
        &self.schedule
    }

    pub fn estimates(&self) -> &[Image] {
        &self.estimates
    }

    pub fn estimate(&self, i: usize) -> &Image {
        &self.estimates[i]
    }

    pub fn into_estimates(self) -> Vec<Image> {
        self.estimates
    }
}

fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Finest band index observation `m` may contribute to layer `i`.
pub fn first_native_band(base: usize, layer: usize, observation: usize) -> usize {
    debug_assert!(observation <= layer);
    let mut ratio: usize = 1;
    for _ in observation..layer {
        ratio = ratio.saturating_mul(base);
    }
    ceil_log2(ratio)
}

/// Whether observation `m` contributes band `k` (the residual is band
/// `depth`) when blending layer `i`.
pub fn contributes(base: usize, layer: usize, observation: usize, band: usize) -> bool {
    observation <= layer && band >= first_native_band(base, layer, observation)
}

/// Central crop of observation `m` covering level `i`'s view, resized to full size.
pub fn aligned_view(obs: &ObservationSet, layer: usize, observation: usize) -> Result<Image> {
    let s = obs.schedule();
    let q = s.zoom(layer - observation);
    let src = obs.estimate(observation);
    if q == 1 {
        return Ok(src.clone());
    }
    let crop = src.crop_center(s.height() / q, s.width() / q)?;
    Ok(crop.resize_bilinear(s.height(), s.width()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlendOptions {
    pub min_size: usize,
}

impl Default for BlendOptions {
    fn default() -> Self {
        Self {
            min_size: DEFAULT_MIN_SIZE,
        }
    }
}

fn blend_inputs(
    obs: &ObservationSet,
    layer: usize,
    opts: BlendOptions,
) -> Result<(usize, Vec<(usize, LaplacianPyramid)>)> {
    let s = obs.schedule();
    s.check_level(layer)?;
    let depth = pyramid_depth(s.height(), s.width(), opts.min_size)?;
    let mut pyramids = Vec::new();
    for m in 0..=layer {
        if first_native_band(s.base(), layer, m) > depth {
            continue;
        }
        let view = aligned_view(obs, layer, m)?;
        pyramids.push((m, build_laplacian_with(&view, opts.min_size)?));
    }
    Ok((depth, pyramids))
}

fn average_bands(
    base: usize,
    layer: usize,
    depth: usize,
    pyramids: &[(usize, LaplacianPyramid)],
) -> LaplacianPyramid {
    let mean_of = |k: usize, pick: &dyn Fn(&LaplacianPyramid) -> &Image| -> Image {
        let contributors: Vec<&Image> = pyramids
            .iter()
            .filter(|(m, _)| contributes(base, layer, *m, k))
            .map(|(_, p)| pick(p))
            .collect();
        let (h, w, c) = contributors[0].shape();
        let mut acc = Image::zeros(h, w, c);
        for img in &contributors {
            acc.axpy(1.0, img).expect("bands of equal depth share shapes");
        }
        acc.scale(1.0 / contributors.len() as f64)
    };
    let bands = (0..depth).map(|k| mean_of(k, &|p| &p.bands[k])).collect();
    let residual = mean_of(depth, &|p| &p.residual);
    LaplacianPyramid { bands, residual }
}

/// Multi-resolution blend of the estimates into layer `i`.
pub fn blend_layer(obs: &ObservationSet, layer: usize) -> Result<Image> {
    blend_layer_with(obs, layer, BlendOptions::default())
}

pub fn blend_layer_with(obs: &ObservationSet, layer: usize, opts: BlendOptions) -> Result<Image> {
    let (depth, pyramids) = blend_inputs(obs, layer, opts)?;
    if pyramids.len() == 1 {
        // only the layer's own estimate: blending is the identity
        return Ok(obs.estimate(layer).clone());
    }
    let blended = average_bands(obs.schedule().base(), layer, depth, &pyramids);
    recompose(&blended)
}

pub fn blend_stack(obs: &ObservationSet) -> Result<ZoomStack> {
    blend_stack_with(obs, BlendOptions::default())
}

pub fn blend_stack_with(obs: &ObservationSet, opts: BlendOptions) -> Result<ZoomStack> {
    let layers = (0..obs.schedule().levels())
        .into_par_iter()
        .map(|i| blend_layer_with(obs, i, opts))
        .collect::<Result<Vec<_>>>()?;
    ZoomStack::new(*obs.schedule(), layers)
}

/// Pixelwise mean of the aligned views, with no frequency separation.
pub fn naive_blend_layer(obs: &ObservationSet, layer: usize) -> Result<Image> {
    let s = obs.schedule();
    s.check_level(layer)?;
    let mut acc = Image::zeros(s.height(), s.width(), s.channels());
    for m in 0..=layer {
        acc.axpy(1.0, &aligned_view(obs, layer, m)?)?;
    }
    Ok(acc.scale(1.0 / (layer + 1) as f64))
}

pub fn naive_blend(obs: &ObservationSet) -> Result<ZoomStack> {
    let layers = (0..obs.schedule().levels())
        .into_par_iter()
        .map(|i| naive_blend_layer(obs, i))
        .collect::<Result<Vec<_>>>()?;
    ZoomStack::new(*obs.schedule(), layers)
}

/// Writes `layer{i}_band{k}_obs{m}.png` for each contributing pair, plus
/// the blended band `layer{i}_band{k}_blend.png`. Band images are
/// contrast-stretched to their own peak magnitude.
pub fn dump_band_contributions(obs: &ObservationSet, layer: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let opts = BlendOptions::default();
    let (depth, pyramids) = blend_inputs(obs, layer, opts)?;
    let base = obs.schedule().base();
    let stretch = |img: &Image| {
        let peak = img.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if peak > 0.0 {
            img.scale(1.0 / peak)
        } else {
            img.clone()
        }
    };
    let save = |img: &Image, name: String| -> Result<()> {
        let img = if img.channels() == 1 || img.channels() == 3 {
            img.clone()
        } else {
            Image::from_fn(img.height(), img.width(), 1, |y, x, _| img.get(y, x, 0))
        };
        stretch(&img).save_png(dir.join(name))
    };
    for (m, pyr) in &pyramids {
        for k in 0..=depth {
            if !contributes(base, layer, *m, k) {
                continue;
            }
            let img = if k == depth { &pyr.residual } else { &pyr.bands[k] };
            save(img, format!("layer{layer}_band{k}_obs{m}.png"))?;
        }
    }
    let blended = average_bands(base, layer, depth, &pyramids);
    for k in 0..=depth {
        let img = if k == depth { &blended.residual } else { &blended.bands[k] };
        save(img, format!("layer{layer}_band{k}_blend.png"))?;
    }
    Ok(())
}
