//! Synthetic mirror scenes.
//!
//! Each scene is a textured background with one rectangular or elliptical
//! mirror showing a horizontally flipped, brightness-shifted copy of another
//! part of the same scene, surrounded by a thin frame. Scenes in the same
//! group share the mirror's shape and size, so a group plays the role of one
//! physical mirror photographed several times.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GrayImage, RgbImage, SampleRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Allowed mirror area as a fraction of the image.
    pub min_area: f64,
    pub max_area: f64,
    pub scenes_per_group: usize,
    /// Largest brightness offset of the reflection, in intensity units.
    pub max_brightness_shift: f64,
    pub frame_width: usize,
    /// Amplitude of the background gratings, in intensity units.
    pub texture_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            min_area: 0.1,
            max_area: 0.5,
            scenes_per_group: 2,
            max_brightness_shift: 50.0,
            frame_width: 2,
            texture_amplitude: 40.0,
        }
    }
}

const MIN_RESOLUTION: usize = 16;
const GROUP_STREAM_BASE: u64 = 1 << 32;
const GEOMETRY_ATTEMPTS: usize = 256;

impl SynthConfig {
    pub fn validate(&self, resolution: usize) -> Result<()> {
        if !(self.min_area > 0.0 && self.min_area <= self.max_area && self.max_area < 1.0) {
            return Err(Error::Config(format!(
                "synthetic area range [{}, {}] must satisfy 0 < min <= max < 1",
                self.min_area, self.max_area
            )));
        }
        if self.scenes_per_group == 0 {
            return Err(Error::Config("scenes_per_group must be positive".into()));
        }
        if !(self.max_brightness_shift.is_finite() && self.max_brightness_shift >= 0.0)
            || !(self.texture_amplitude.is_finite() && self.texture_amplitude >= 0.0)
        {
            return Err(Error::Config("brightness shift and texture amplitude must be non-negative".into()));
        }
        if resolution < MIN_RESOLUTION {
            return Err(Error::Config(format!(
                "synthetic resolution must be at least {MIN_RESOLUTION}, got {resolution}"
            )));
        }
        Ok(())
    }
}

/// Mirror outline in its own bounding box.
struct Outline {
    h: usize,
    w: usize,
    inside: Vec<bool>,
}

impl Outline {
    fn rasterize(h: usize, w: usize, ellipse: bool) -> Self {
        let inside = (0..h * w)
            .map(|i| {
                if !ellipse {
                    return true;
                }
                let dy = ((i / w) as f64 + 0.5 - h as f64 / 2.0) / (h as f64 / 2.0);
                let dx = ((i % w) as f64 + 0.5 - w as f64 / 2.0) / (w as f64 / 2.0);
                dy * dy + dx * dx <= 1.0
            })
            .collect();
        Outline { h, w, inside }
    }

    fn area(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    fn contains(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w && self.inside[y as usize * self.w + x as usize]
    }
}

fn sample_outline(rng: &mut ChaCha8Rng, resolution: usize, config: &SynthConfig) -> Result<Outline> {
    let ellipse = rng.random_bool(0.5);
    let factor = if ellipse { std::f64::consts::FRAC_PI_4 } else { 1.0 };
    let total = (resolution * resolution) as f64;
    let limit = resolution - 2 * config.frame_width - 2;
    for _ in 0..GEOMETRY_ATTEMPTS {
        let area = rng.random_range(config.min_area..=config.max_area);
        let aspect: f64 = rng.random_range(0.6..1.6);
        let box_area = area * total / factor;
        let h = (box_area / aspect).sqrt().round() as usize;
        let w = (box_area * aspect).sqrt().round() as usize;
        if h < 2 || w < 2 || h > limit || w > limit {
            continue;
        }
        let outline = Outline::rasterize(h, w, ellipse);
        let ratio = outline.area() as f64 / total;
        if (config.min_area..=config.max_area).contains(&ratio) {
            return Ok(outline);
        }
    }
    Err(Error::Config(format!(
        "no mirror with area in [{}, {}] fits a {resolution}x{resolution} scene",
        config.min_area, config.max_area
    )))
}

fn background(rng: &mut ChaCha8Rng, resolution: usize, config: &SynthConfig) -> Vec<[f64; 3]> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(60.0..196.0));
    let mut pixels = vec![base; resolution * resolution];
    for _ in 0..3 {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let freq: f64 = rng.random_range(0.04..0.3) * std::f64::consts::TAU;
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0) * config.texture_amplitude);
        let (s, c) = angle.sin_cos();
        for (i, p) in pixels.iter_mut().enumerate() {
            let (y, x) = ((i / resolution) as f64, (i % resolution) as f64);
            let wave = (freq * (x * c + y * s) + phase).sin();
            for k in 0..3 {
                p[k] += amp[k] * wave;
            }
        }
    }
    // a few flat objects
    for _ in 0..5 {
        let h = rng.random_range(3..=resolution / 3);
        let w = rng.random_range(3..=resolution / 3);
        let y0 = rng.random_range(0..=resolution - h);
        let x0 = rng.random_range(0..=resolution - w);
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                pixels[y * resolution + x] = colour;
            }
        }
    }
    pixels
}

fn scene(
    index: usize,
    group: usize,
    outline: &Outline,
    resolution: usize,
    seed: u64,
    config: &SynthConfig,
) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let r = resolution;
    let bg = background(&mut rng, r, config);
    let m = config.frame_width + 1;
    let y0 = rng.random_range(m..=r - outline.h - m);
    let x0 = rng.random_range(m..=r - outline.w - m);
    let sy = rng.random_range(0..=r - outline.h);
    let sx = rng.random_range(0..=r - outline.w);
    let shift = rng.random_range(-1.0..=1.0) * config.max_brightness_shift;
    let frame = if rng.random_bool(0.5) {
        rng.random_range(10.0..50.0)
    } else {
        rng.random_range(205.0..245.0)
    };

    let mut pixels = bg.clone();
    let mut mask = GrayImage::new(r, r);
    let fw = config.frame_width as isize;
    for y in 0..r {
        for x in 0..r {
            let (ly, lx) = (y as isize - y0 as isize, x as isize - x0 as isize);
            if outline.contains(ly, lx) {
                let src = (sy + ly as usize) * r + sx + outline.w - 1 - lx as usize;
                pixels[y * r + x] = bg[src].map(|v| v + shift);
                mask.data[y * r + x] = 255;
            } else if fw > 0
                && (-fw..=fw).any(|dy| (-fw..=fw).any(|dx| outline.contains(ly + dy, lx + dx)))
            {
                pixels[y * r + x] = [frame; 3];
            }
        }
    }
    let mut image = RgbImage::new(r, r);
    for (dst, p) in image.data.chunks_exact_mut(3).zip(&pixels) {
        for k in 0..3 {
            dst[k] = p[k].round().clamp(0.0, 255.0) as u8;
        }
    }
    SampleRecord::new(format!("g{group:04}_{index:05}"), format!("g{group:04}"), image, mask)
}

/// `n` scenes of `resolution` square. Scene `i` draws from its own ChaCha8
/// stream of `seed`, so any subset regenerates identically.
pub fn generate_synthetic(n: usize, resolution: usize, seed: u64, config: &SynthConfig) -> Result<Vec<SampleRecord>> {
    if n == 0 {
        return Err(Error::Argument("scene count must be positive".into()));
    }
    config.validate(resolution)?;
    let mut records = Vec::with_capacity(n);
    let mut current: Option<(usize, Outline)> = None;
    for index in 0..n {
        let group = index / config.scenes_per_group;
        if current.as_ref().is_none_or(|(g, _)| *g != group) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(GROUP_STREAM_BASE + group as u64);
            current = Some((group, sample_outline(&mut rng, resolution, config)?));
        }
        let (_, outline) = current.as_ref().expect("set above");
        records.push(scene(index, group, outline, resolution, seed, config)?);
    }
    Ok(records)
}
