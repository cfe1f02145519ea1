//! Procedural scenes with content at every scale.
//!
//! A scene is a sum of oriented sinusoids over continuous coordinates of
//! the most zoomed-out view. Layer `i` samples the scene over the central
//! `1/p^i` of that view and keeps only the components it can represent
//! without aliasing, so the layers form a naturally consistent stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::rng::splitmix64;
use crate::zoom::{ZoomSchedule, ZoomStack};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Detail {
    /// Only frequencies well below the layer-0 Nyquist limit.
    Smooth,
    /// Octaves up to a quarter of the deepest layer's Nyquist limit.
    Multiscale,
}

#[derive(Clone, Debug)]
struct Wave {
    freq: f64,
    dir: (f64, f64),
    phase: f64,
    channel_shift: f64,
    amp: f64,
}

#[derive(Clone, Debug)]
pub struct Scene {
    waves: Vec<Wave>,
    offset: Vec<f64>,
}

impl Scene {
    pub fn random(key: u64, schedule: &ZoomSchedule, detail: Detail) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(key));
        let w = schedule.width().min(schedule.height()) as f64;
        let top = match detail {
            Detail::Smooth => w / 16.0,
            Detail::Multiscale => w * schedule.max_zoom() as f64 / 8.0,
        };
        let mut waves = Vec::new();
        let mut freq: f64 = 0.75;
        let mut octave = 0;
        while freq <= top {
            for _ in 0..3 {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                waves.push(Wave {
                    freq: freq * rng.gen_range(0.8..1.25f64).min(top / freq),
                    dir: (theta.cos(), theta.sin()),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    channel_shift: rng.gen_range(0.3..1.2),
                    amp: 1.0 / (1.0 + octave as f64).sqrt(),
                });
            }
            freq *= 2.0;
            octave += 1;
        }
        let total: f64 = waves.iter().map(|w| w.amp).sum();
        let scale = 0.6 / total.max(1e-12);
        for wave in &mut waves {
            wave.amp *= scale;
        }
        let offset = (0..schedule.channels())
            .map(|_| rng.gen_range(-0.2..0.2))
            .collect();
        Self { waves, offset }
    }

    /// Value at continuous coordinates `(u, v)` in `[-0.5, 0.5]²` of the
    /// outermost view, keeping components up to `max_freq` cycles per unit.
    pub fn value(&self, u: f64, v: f64, channel: usize, max_freq: f64) -> f64 {
        let mut acc = self.offset[channel];
        for w in &self.waves {
            if w.freq > max_freq {
                continue;
            }
            let arg = std::f64::consts::TAU * w.freq * (u * w.dir.0 + v * w.dir.1)
                + w.phase
                + w.channel_shift * channel as f64;
            acc += w.amp * arg.sin();
        }
        acc
    }

    pub fn layer(&self, schedule: &ZoomSchedule, level: usize) -> Image {
        let q = schedule.zoom(level) as f64;
        let (h, w) = (schedule.height(), schedule.width());
        let nyquist = h.min(w) as f64 * q / 2.0;
        Image::from_fn(h, w, schedule.channels(), |y, x, c| {
            let u = ((x as f64 + 0.5) / w as f64 - 0.5) / q;
            let v = ((y as f64 + 0.5) / h as f64 - 0.5) / q;
            self.value(u, v, c, nyquist / 2.0)
        })
    }

    pub fn stack(&self, schedule: &ZoomSchedule) -> ZoomStack {
        let layers = (0..schedule.levels())
            .map(|i| self.layer(schedule, i))
            .collect();
        ZoomStack::new(*schedule, layers).expect("scene layers match the schedule")
    }
}

/// Stable key for a prompt list.
pub fn prompt_key(prompts: &[String]) -> u64 {
    // FNV-1a, stable across platforms and releases
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in prompts {
        for b in p.bytes().chain(std::iter::once(0xff)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
