//! Zoom stack representation and the rendering operators.
//!
//! A stack holds `N` layers of identical resolution; layer `i` depicts the
//! scene at magnification `p^i`. Rendering level `i` starts from layer `i`
//! and overwrites its center with progressively downscaled deeper layers,
//! so renders at adjacent levels agree exactly on their overlap.
//!
//! Downscaling by `p^k` is a cascade of `k` factor-`p` steps. Each step
//! filters non-overlapping `p`×`p` blocks with a truncated Gaussian
//! (sigma `p/2`, weights summing to one) and keeps one sample per block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::gaussian_image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ZoomSchedule {
    base: usize,
    levels: usize,
    height: usize,
    width: usize,
    channels: usize,
}

impl ZoomSchedule {
    pub fn new(
        base: usize,
        levels: usize,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self> {
        if base < 2 {
            return Err(Error::invalid(format!("zoom base p must be >= 2, got {base}")));
        }
        if levels < 1 {
            return Err(Error::invalid("level count N must be >= 1"));
        }
        if channels < 1 {
            return Err(Error::invalid("channel count must be >= 1"));
        }
        let deepest = base
            .checked_pow((levels - 1) as u32)
            .ok_or_else(|| Error::invalid("p^(N-1) overflows"))?;
        if height == 0 || width == 0 || height % deepest != 0 || width % deepest != 0 {
            return Err(Error::dim(format!(
                "{height}x{width} is not divisible by p^(N-1) = {deepest}"
            )));
        }
        Ok(Self {
            base,
            levels,
            height,
            width,
            channels,
        })
    }

    #[inline]
    pub fn base(&self) -> usize {
        self.base
    }

    #[inline]
    pub fn levels(&self) -> usize {
        self.levels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Magnification `p^i` of level `i`.
    pub fn zoom(&self, level: usize) -> usize {
        self.base.pow(level as u32)
    }

    pub fn max_zoom(&self) -> usize {
        self.zoom(self.levels - 1)
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level < self.levels {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "level {level} out of range for N = {}",
                self.levels
            )))
        }
    }

    pub fn check_image(&self, img: &Image, what: &str) -> Result<()> {
        if img.shape() == (self.height, self.width, self.channels) {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "{what}: shape {:?} does not match schedule {}x{}x{}",
                img.shape(),
                self.height,
                self.width,
                self.channels
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DownscaleMode {
    /// Weights sum to one; constants are preserved.
    Image,
    /// Each step rescaled by `1/sqrt(sum w^2)`: unit-variance white noise
    /// stays unit variance.
    NoiseExact,
    /// Each step rescaled by `p`. Exact only when the kernel is a box.
    NoisePaper,
}

/// Separable 1-D taps of the truncated Gaussian prefilter for factor `p`.
pub fn prefilter_taps(p: usize) -> Vec<f64> {
    let sigma = p as f64 / 2.0;
    let center = (p as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..p)
        .map(|a| {
            let d = a as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Gain applied after filtering for the given mode.
pub fn mode_gain(p: usize, mode: DownscaleMode) -> f64 {
    match mode {
        DownscaleMode::Image => 1.0,
        DownscaleMode::NoiseExact => {
            let taps = prefilter_taps(p);
            let s1: f64 = taps.iter().map(|w| w * w).sum();
            // 2-D kernel is the outer product, so sum w^2 factorizes.
            1.0 / s1
        }
        DownscaleMode::NoisePaper => p as f64,
    }
}

/// One factor-`p` prefiltered downscale. Returns the `H/p`×`W/p` content
/// without padding.
pub fn downscale_once(x: &Image, p: usize, mode: DownscaleMode) -> Result<Image> {
    if p < 1 {
        return Err(Error::invalid("downscale factor must be >= 1"));
    }
    let (h, w, c) = x.shape();
    if h % p != 0 || w % p != 0 {
        return Err(Error::dim(format!("{h}x{w} is not divisible by {p}")));
    }
    x.check_finite("downscale input")?;
    let taps = prefilter_taps(p);
    let gain = mode_gain(p, mode);
    let (oh, ow) = (h / p, w / p);
    let mut out = Image::zeros(oh, ow, c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0;
                for (a, wa) in taps.iter().enumerate() {
                    let mut row = 0.0;
                    for (b, wb) in taps.iter().enumerate() {
                        row += wb * x.get(oy * p + a, ox * p + b, ch);
                    }
                    acc += wa * row;
                }
                out.set(oy, ox, ch, acc * gain);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`downscale_once`]: spreads each coarse sample back over its
/// block with the same weights and gain.
pub fn downscale_once_adjoint(y: &Image, p: usize, mode: DownscaleMode) -> Image {
    let taps = prefilter_taps(p);
    let gain = mode_gain(p, mode);
    let (h, w, c) = y.shape();
    let mut out = Image::zeros(h * p, w * p, c);
    for oy in 0..h {
        for ox in 0..w {
            for ch in 0..c {
                let v = y.get(oy, ox, ch) * gain;
                for (a, wa) in taps.iter().enumerate() {
                    for (b, wb) in taps.iter().enumerate() {
                        out.set(oy * p + a, ox * p + b, ch, wa * wb * v);
                    }
                }
            }
        }
    }
    out
}

/// `k` cascaded factor-`p` steps; the unpadded `H/p^k`×`W/p^k` content.
pub fn downscale_content(x: &Image, p: usize, k: usize, mode: DownscaleMode) -> Result<Image> {
    let mut cur = x.clone();
    for _ in 0..k {
        cur = downscale_once(&cur, p, mode)?;
    }
    Ok(cur)
}

/// `D_k`: cascade downscale by `p^k`, zero-padded back to the input size.
pub fn downscale(x: &Image, p: usize, k: usize, mode: DownscaleMode) -> Result<Image> {
    if k == 0 {
        return Ok(x.clone());
    }
    let content = downscale_content(x, p, k, mode)?;
    Image::pad_center(&content, x.height(), x.width())
}

/// `D_k^T`: crop the center, then apply the step adjoints in reverse.
pub fn downscale_adjoint(y: &Image, p: usize, k: usize, mode: DownscaleMode) -> Result<Image> {
    if k == 0 {
        return Ok(y.clone());
    }
    let q = p.pow(k as u32);
    let (h, w, _) = y.shape();
    if h % q != 0 || w % q != 0 {
        return Err(Error::dim(format!("{h}x{w} is not divisible by {q}")));
    }
    let mut cur = y.crop_center(h / q, w / q)?;
    for _ in 0..k {
        cur = downscale_once_adjoint(&cur, p, mode);
    }
    Ok(cur)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterMask {
    level: usize,
    mask: Image,
}

impl CenterMask {
    pub fn level(&self) -> usize {
        self.level
    }

    /// Single-channel 0/1 image.
    pub fn image(&self) -> &Image {
        &self.mask
    }

    /// `M ⊙ inside + (1 − M) ⊙ outside`.
    pub fn select(&self, inside: &Image, outside: &Image) -> Result<Image> {
        inside.check_same_shape(outside, "mask select")?;
        if (inside.height(), inside.width()) != (self.mask.height(), self.mask.width()) {
            return Err(Error::dim("mask size does not match image"));
        }
        Ok(Image::from_fn(
            inside.height(),
            inside.width(),
            inside.channels(),
            |y, x, c| {
                if self.mask.get(y, x, 0) > 0.5 {
                    inside.get(y, x, c)
                } else {
                    outside.get(y, x, c)
                }
            },
        ))
    }

    pub fn apply(&self, x: &Image) -> Result<Image> {
        let zero = Image::zeros(x.height(), x.width(), x.channels());
        self.select(x, &zero)
    }
}

/// `M_k`: ones on the central `H/p^k`×`W/p^k` rectangle.
pub fn center_mask(schedule: &ZoomSchedule, k: usize) -> Result<CenterMask> {
    schedule.check_level(k)?;
    let q = schedule.zoom(k);
    let (h, w) = (schedule.height(), schedule.width());
    let ones = Image::filled(h / q, w / q, 1, 1.0);
    let mask = Image::pad_center(&ones, h, w)?;
    Ok(CenterMask { level: k, mask })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZoomStack {
    schedule: ZoomSchedule,
    layers: Vec<Image>,
}

impl ZoomStack {
    pub fn new(schedule: ZoomSchedule, layers: Vec<Image>) -> Result<Self> {
        if layers.len() != schedule.levels() {
            return Err(Error::invalid(format!(
                "{} layers for N = {}",
                layers.len(),
                schedule.levels()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            schedule.check_image(layer, &format!("layer {i}"))?;
            layer.check_finite(&format!("layer {i}"))?;
        }
        Ok(Self { schedule, layers })
    }

    pub fn zeros(schedule: ZoomSchedule) -> Self {
        let layer = Image::zeros(schedule.height(), schedule.width(), schedule.channels());
        Self {
            schedule,
            layers: vec![layer; schedule.levels()],
        }
    }

    pub fn schedule(&self) -> &ZoomSchedule {
        &self.schedule
    }

    pub fn layers(&self) -> &[Image] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Image {
        &self.layers[i]
    }

    pub fn into_layers(self) -> Vec<Image> {
        self.layers
    }

    /// `Π_image(L; i)`.
    pub fn render(&self, i: usize) -> Result<Image> {
        render_layers(&self.schedule, &self.layers, i, DownscaleMode::Image)
    }

    pub fn render_all(&self) -> Result<Vec<Image>> {
        (0..self.schedule.levels()).map(|i| self.render(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseMode {
    Exact,
    Paper,
}

impl From<NoiseMode> for DownscaleMode {
    fn from(m: NoiseMode) -> Self {
        match m {
            NoiseMode::Exact => DownscaleMode::NoiseExact,
            NoiseMode::Paper => DownscaleMode::NoisePaper,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseStack {
    schedule: ZoomSchedule,
    layers: Vec<Image>,
}

impl NoiseStack {
    pub fn new(schedule: ZoomSchedule, layers: Vec<Image>) -> Result<Self> {
        let stack = ZoomStack::new(schedule, layers)?;
        Ok(Self {
            schedule: stack.schedule,
            layers: stack.layers,
        })
    }

    pub fn sample(schedule: ZoomSchedule, rng: &mut impl Rng) -> Self {
        let layers = (0..schedule.levels())
            .map(|_| gaussian_image(rng, schedule.height(), schedule.width(), schedule.channels()))
            .collect();
        Self { schedule, layers }
    }

    pub fn schedule(&self) -> &ZoomSchedule {
        &self.schedule
    }

    pub fn layers(&self) -> &[Image] {
        &self.layers
    }

    /// `Π_noise(E; i)`.
    pub fn render(&self, i: usize, mode: NoiseMode) -> Result<Image> {
        render_layers(&self.schedule, &self.layers, i, mode.into())
    }
}

/// Shared body of both rendering operators.
pub fn render_layers(
    schedule: &ZoomSchedule,
    layers: &[Image],
    i: usize,
    mode: DownscaleMode,
) -> Result<Image> {
    schedule.check_level(i)?;
    let p = schedule.base();
    let mut x = layers[i].clone();
    for (j, layer) in layers.iter().enumerate().skip(i + 1) {
        let content = downscale_content(layer, p, j - i, mode)?;
        x.paste_center(&content)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn random(h: usize, w: usize, c: usize, seed: u64) -> Image {
        gaussian_image(&mut stream(seed, 0, Purpose::StepNoise), h, w, c)
    }

    #[test]
    fn schedule_rejects_bad_geometry() {
        assert!(ZoomSchedule::new(1, 2, 8, 8, 1).is_err());
        assert!(ZoomSchedule::new(2, 0, 8, 8, 1).is_err());
        assert!(ZoomSchedule::new(2, 2, 8, 8, 0).is_err());
        assert!(matches!(
            ZoomSchedule::new(2, 4, 12, 12, 1),
            Err(Error::Dimension(_))
        ));
        assert!(ZoomSchedule::new(3, 3, 18, 9, 1).is_ok());
    }

    #[test]
    fn taps_for_two_are_uniform() {
        let t = prefilter_taps(2);
        assert_eq!(t, vec![0.5, 0.5]);
    }

    #[test]
    fn constant_is_preserved() {
        for p in [2, 3, 4, 5] {
            let x = Image::filled(p * 3, p * 2, 2, 0.37);
            let y = downscale_once(&x, p, DownscaleMode::Image).unwrap();
            assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-12), "p={p}");
        }
    }

    #[test]
    fn two_by_two_block_average() {
        let x = Image::from_vec(2, 2, 1, vec![0.1, -0.4, 0.9, 0.2]).unwrap();
        let y = downscale_once(&x, 2, DownscaleMode::Image).unwrap();
        assert_eq!(y.shape(), (1, 1, 1));
        assert!((y.get(0, 0, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn paper_gain_matches_exact_for_box_kernel() {
        assert!((mode_gain(2, DownscaleMode::NoiseExact) - 2.0).abs() < 1e-12);
        assert!(mode_gain(4, DownscaleMode::NoiseExact) < 4.0);
    }

    #[test]
    fn downscale_errors() {
        let x = Image::zeros(6, 6, 1);
        assert!(matches!(
            downscale_once(&x, 4, DownscaleMode::Image),
            Err(Error::Dimension(_))
        ));
        let mut bad = Image::zeros(4, 4, 1);
        bad.set(1, 1, 0, f64::NAN);
        assert!(matches!(
            downscale_once(&bad, 2, DownscaleMode::Image),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn d0_is_identity_and_d1_pads_with_zero() {
        let x = random(8, 8, 3, 1);
        assert_eq!(downscale(&x, 2, 0, DownscaleMode::Image).unwrap(), x);
        let c = Image::filled(8, 8, 1, 0.5);
        let d = downscale(&c, 2, 1, DownscaleMode::Image).unwrap();
        for y in 0..8 {
            for xx in 0..8 {
                let inside = (2..6).contains(&y) && (2..6).contains(&xx);
                let expect = if inside { 0.5 } else { 0.0 };
                assert!((d.get(y, xx, 0) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cascade_matches_composition() {
        let x = random(16, 16, 2, 2);
        let direct = downscale(&x, 2, 2, DownscaleMode::Image)
            .unwrap()
            .crop_center(4, 4)
            .unwrap();
        let twice = downscale_once(
            &downscale_once(&x, 2, DownscaleMode::Image).unwrap(),
            2,
            DownscaleMode::Image,
        )
        .unwrap();
        assert!(direct.max_abs_diff(&twice).unwrap() < 1e-6);
    }

    #[test]
    fn masks() {
        let s = ZoomSchedule::new(2, 3, 8, 8, 1).unwrap();
        assert_eq!(center_mask(&s, 0).unwrap().image().sum(), 64.0);
        let m1 = center_mask(&s, 1).unwrap();
        assert_eq!(m1.image().sum(), 16.0);
        for y in 0..8 {
            for x in 0..8 {
                let inside = (2..=5).contains(&y) && (2..=5).contains(&x);
                assert_eq!(m1.image().get(y, x, 0), if inside { 1.0 } else { 0.0 });
            }
        }
        let s4 = ZoomSchedule::new(4, 2, 16, 16, 1).unwrap();
        let m = center_mask(&s4, 1).unwrap();
        assert_eq!(m.image().sum(), 16.0);
        assert_eq!(m.image().get(6, 6, 0), 1.0);
        assert_eq!(m.image().get(9, 9, 0), 1.0);
        assert_eq!(m.image().get(5, 6, 0), 0.0);
        assert!(center_mask(&s, 3).is_err());
    }

    #[test]
    fn mask_partition_reconstructs() {
        let s = ZoomSchedule::new(2, 3, 8, 8, 3).unwrap();
        let x = random(8, 8, 3, 3);
        for k in 0..3 {
            let m = center_mask(&s, k).unwrap();
            assert_eq!(m.select(&x, &x).unwrap(), x);
        }
    }

    #[test]
    fn render_edge_levels() {
        let s = ZoomSchedule::new(2, 1, 8, 8, 1).unwrap();
        let l0 = random(8, 8, 1, 4);
        let st = ZoomStack::new(s, vec![l0.clone()]).unwrap();
        assert_eq!(st.render(0).unwrap(), l0);
        assert!(st.render(1).is_err());

        let s = ZoomSchedule::new(2, 3, 16, 16, 1).unwrap();
        let layers: Vec<_> = (0..3).map(|i| random(16, 16, 1, 10 + i)).collect();
        let st = ZoomStack::new(s, layers.clone()).unwrap();
        assert_eq!(st.render(2).unwrap(), layers[2]);
    }

    #[test]
    fn adjacent_renders_agree() {
        let s = ZoomSchedule::new(2, 3, 16, 16, 2).unwrap();
        let layers: Vec<_> = (0..3).map(|i| random(16, 16, 2, 20 + i)).collect();
        let st = ZoomStack::new(s, layers).unwrap();
        for i in 0..2 {
            let outer = st.render(i).unwrap().crop_center(8, 8).unwrap();
            let inner =
                downscale_once(&st.render(i + 1).unwrap(), 2, DownscaleMode::Image).unwrap();
            assert!(outer.max_abs_diff(&inner).unwrap() < 1e-6);
        }
    }

    #[test]
    fn noise_render_consistency() {
        let s = ZoomSchedule::new(2, 3, 16, 16, 1).unwrap();
        let e = NoiseStack::sample(s, &mut stream(5, 0, Purpose::StepNoise));
        assert_eq!(e.render(2, NoiseMode::Exact).unwrap(), e.layers()[2]);
        for mode in [NoiseMode::Exact, NoiseMode::Paper] {
            for i in 0..2 {
                let outer = e.render(i, mode).unwrap().crop_center(8, 8).unwrap();
                let inner =
                    downscale_once(&e.render(i + 1, mode).unwrap(), 2, mode.into()).unwrap();
                assert!(outer.max_abs_diff(&inner).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn stack_rejects_wrong_layers() {
        let s = ZoomSchedule::new(2, 2, 8, 8, 1).unwrap();
        assert!(ZoomStack::new(s, vec![Image::zeros(8, 8, 1)]).is_err());
        assert!(ZoomStack::new(s, vec![Image::zeros(8, 8, 1), Image::zeros(8, 8, 3)]).is_err());
        let mut nan = Image::zeros(8, 8, 1);
        nan.set(0, 0, 0, f64::NAN);
        assert!(ZoomStack::new(s, vec![Image::zeros(8, 8, 1), nan]).is_err());
    }
}
