//! Synthetic rain sequences with exact ground truth.
//!
//! Streaks are one-frame, one-colour line segments added on top of a static
//! (optionally noisy) background. Orientations follow the same convention as
//! [`crate::streaks`]: degrees from the x-axis towards the y-axis. Every
//! frame draws from its own seeded generator, so frames can be rendered in
//! any order and in parallel.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::ingest::{Frame, FrameSource, RawMeta, RawSequenceWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackgroundKind {
    #[default]
    Constant,
    /// Fixed smooth pattern plus fixed per-pixel grain.
    Textured,
    /// Textured, plus fresh Gaussian noise every frame.
    TexturedNoise,
}

impl FromStr for BackgroundKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(BackgroundKind::Constant),
            "textured" => Ok(BackgroundKind::Textured),
            "textured_noise" => Ok(BackgroundKind::TexturedNoise),
            _ => Err("expected constant, textured or textured_noise".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub background: BackgroundKind,
    pub intensity: u8,
    pub noise_std: f64,
    pub frame_rate: f64,
    pub frames: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 320,
            height: 240,
            background: BackgroundKind::Constant,
            intensity: 100,
            noise_std: 0.0,
            frame_rate: 30.0,
            frames: 900,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("scene", "width and height must be positive"));
        }
        if self.frames == 0 {
            return Err(Error::param("scene.frames", "must be positive"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::param("scene.noise_std", "must be non-negative"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::param("scene.frame_rate", "must be positive"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = SceneSpec::default();
        let s = SceneSpec {
            width: kv.take_or("scene.width", d.width)?,
            height: kv.take_or("scene.height", d.height)?,
            background: kv.take_or("scene.background", d.background)?,
            intensity: kv.take_or("scene.intensity", d.intensity)?,
            noise_std: kv.take_or("scene.noise_std", d.noise_std)?,
            frame_rate: kv.take_or("scene.frame_rate", d.frame_rate)?,
            frames: kv.take_or("scene.frames", d.frames)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::load(path)?;
        let s = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RainSpec {
    /// Poisson mean of streaks per rain frame.
    pub streaks_per_frame: f64,
    pub orientation_mean: f64,
    pub orientation_std: f64,
    pub length_min: u32,
    pub length_max: u32,
    pub width: u32,
    pub boost: u8,
    /// Share of rain-frame streaks drawn with uniform orientation.
    pub clutter_fraction: f64,
    /// Rain falls on frames `start_frame..end_frame`.
    pub start_frame: u64,
    pub end_frame: Option<u64>,
    /// Poisson mean of uniform-orientation streaks on dry frames.
    pub dry_clutter_per_frame: f64,
}

impl Default for RainSpec {
    fn default() -> Self {
        RainSpec {
            streaks_per_frame: 60.0,
            orientation_mean: 85.0,
            orientation_std: 4.0,
            length_min: 12,
            length_max: 20,
            width: 1,
            boost: 40,
            clutter_fraction: 0.1,
            start_frame: 0,
            end_frame: None,
            dry_clutter_per_frame: 0.0,
        }
    }
}

impl RainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.streaks_per_frame >= 0.0) || !self.streaks_per_frame.is_finite() {
            return Err(Error::param("rain.streaks_per_frame", "must be non-negative"));
        }
        if !(self.dry_clutter_per_frame >= 0.0) || !self.dry_clutter_per_frame.is_finite() {
            return Err(Error::param("rain.dry_clutter_per_frame", "must be non-negative"));
        }
        if !(self.orientation_std >= 0.0) {
            return Err(Error::param("rain.orientation_std", "must be non-negative"));
        }
        if self.length_min == 0 || self.length_min > self.length_max {
            return Err(Error::param("rain.length_min", "need 0 < length_min <= length_max"));
        }
        if self.width == 0 {
            return Err(Error::param("rain.width", "must be positive"));
        }
        if self.boost == 0 {
            return Err(Error::param("rain.boost", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.clutter_fraction) {
            return Err(Error::param("rain.clutter_fraction", "must lie in [0, 1]"));
        }
        if let Some(end) = self.end_frame {
            if end < self.start_frame {
                return Err(Error::param("rain.end_frame", "precedes start_frame"));
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = RainSpec::default();
        let s = RainSpec {
            streaks_per_frame: kv.take_or("rain.streaks_per_frame", d.streaks_per_frame)?,
            orientation_mean: kv.take_or("rain.orientation_mean", d.orientation_mean)?,
            orientation_std: kv.take_or("rain.orientation_std", d.orientation_std)?,
            length_min: kv.take_or("rain.length_min", d.length_min)?,
            length_max: kv.take_or("rain.length_max", d.length_max)?,
            width: kv.take_or("rain.width", d.width)?,
            boost: kv.take_or("rain.boost", d.boost)?,
            clutter_fraction: kv.take_or("rain.clutter_fraction", d.clutter_fraction)?,
            start_frame: kv.take_or("rain.start_frame", d.start_frame)?,
            end_frame: kv.take("rain.end_frame")?,
            dry_clutter_per_frame: kv.take_or("rain.dry_clutter_per_frame", d.dry_clutter_per_frame)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::load(path)?;
        let s = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(s)
    }

    pub fn is_raining(&self, frame: u64) -> bool {
        self.streaks_per_frame > 0.0
            && frame >= self.start_frame
            && self.end_frame.is_none_or(|end| frame < end)
    }
}

/// One streak to draw: centre, orientation in degrees, length and width in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreakPlacement {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub length: u32,
    pub width: u32,
    pub clutter: bool,
}

fn mix_seed(seed: u64, frame: u64, stream: u64) -> u64 {
    // splitmix64 finaliser over the combined key
    let mut z = seed
        ^ frame.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws one frame's streaks with `mean` expected count. Orientations come
/// from the rain Gaussian, or uniformly from `[0, 180)` with probability
/// `clutter_fraction`.
pub fn sample_streaks(
    rain: &RainSpec,
    mean: f64,
    clutter_fraction: f64,
    dims: (u32, u32),
    seed: u64,
) -> Vec<StreakPlacement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = if mean > 0.0 {
        Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize
    } else {
        0
    };
    let orientation = Normal::new(rain.orientation_mean, rain.orientation_std)
        .expect("non-negative std");
    (0..count)
        .map(|_| {
            let clutter = rng.random::<f64>() < clutter_fraction;
            let theta = if clutter {
                rng.random_range(0.0..180.0)
            } else {
                orientation.sample(&mut rng).rem_euclid(180.0)
            };
            StreakPlacement {
                x: rng.random_range(0.0..dims.0 as f64),
                y: rng.random_range(0.0..dims.1 as f64),
                theta: if theta >= 180.0 { 0.0 } else { theta },
                length: rng.random_range(rain.length_min..=rain.length_max),
                width: rain.width,
                clutter,
            }
        })
        .collect()
}

/// Streaks for frame `t` of a sequence.
pub fn frame_streaks(rain: &RainSpec, dims: (u32, u32), t: u64, seed: u64) -> Vec<StreakPlacement> {
    let s = mix_seed(seed, t, 1);
    if rain.is_raining(t) {
        sample_streaks(rain, rain.streaks_per_frame, rain.clutter_fraction, dims, s)
    } else {
        sample_streaks(rain, rain.dry_clutter_per_frame, 1.0, dims, s)
    }
}

/// Integer midpoint (Bresenham) line between two points.
fn line_pixels(x0: i64, y0: i64, x1: i64, y1: i64, out: &mut Vec<(i64, i64)>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        out.push((x, y));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Pixels covered by a streak, clipped to the frame, sorted and unique.
pub fn rasterize_streak(s: &StreakPlacement, dims: (u32, u32)) -> Vec<(u32, u32)> {
    let (c, sn) = (s.theta.to_radians().cos(), s.theta.to_radians().sin());
    let half = (s.length as f64 - 1.0) / 2.0;
    let x0 = (s.x - half * c).round() as i64;
    let y0 = (s.y - half * sn).round() as i64;
    let x1 = (s.x + half * c).round() as i64;
    let y1 = (s.y + half * sn).round() as i64;
    let mut centre = Vec::new();
    line_pixels(x0, y0, x1, y1, &mut centre);

    // thicken across the minor axis of the line
    let steep = (y1 - y0).abs() > (x1 - x0).abs();
    let lo = -((s.width as i64 - 1) / 2);
    let hi = lo + s.width as i64 - 1;
    let mut out: Vec<(u32, u32)> = Vec::with_capacity(centre.len() * s.width as usize);
    for &(x, y) in &centre {
        for o in lo..=hi {
            let (px, py) = if steep { (x + o, y) } else { (x, y + o) };
            if px >= 0 && py >= 0 && px < dims.0 as i64 && py < dims.1 as i64 {
                out.push((px as u32, py as u32));
            }
        }
    }
    out.sort_unstable_by_key(|&(x, y)| (y, x));
    out.dedup();
    out
}

fn texture_value(scene: &SceneSpec, x: u32, y: u32, seed: u64) -> f64 {
    let base = scene.intensity as f64;
    match scene.background {
        BackgroundKind::Constant => base,
        BackgroundKind::Textured | BackgroundKind::TexturedNoise => {
            let (fx, fy) = (x as f64, y as f64);
            let smooth = 18.0 * (fx / 23.0).sin() * (fy / 17.0).cos() + 8.0 * ((fx + fy) / 41.0).sin();
            let grain = (mix_seed(seed, (y as u64) << 32 | x as u64, 2) % 11) as f64 - 5.0;
            base + smooth + grain
        }
    }
}

/// Static background, identical for every frame of a sequence.
pub fn render_background(scene: &SceneSpec, seed: u64) -> Vec<f64> {
    let mut bg = Vec::with_capacity(scene.width as usize * scene.height as usize);
    for y in 0..scene.height {
        for x in 0..scene.width {
            bg.push(texture_value(scene, x, y, seed));
        }
    }
    bg
}

/// Renders frame `t`: background, per-frame noise, then streak pixels raised
/// by `boost` (once per pixel) and clamped to 255.
pub fn render_frame(
    scene: &SceneSpec,
    background: &[f64],
    streaks: &[StreakPlacement],
    boost: u8,
    t: u64,
    seed: u64,
) -> Frame {
    let dims = (scene.width, scene.height);
    let mut values: Vec<f64> = background.to_vec();
    if scene.background == BackgroundKind::TexturedNoise && scene.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, t, 3));
        let noise = Normal::new(0.0, scene.noise_std).expect("finite std");
        for v in values.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let mut base: Vec<u8> = values.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let mut hit = vec![false; base.len()];
    for s in streaks {
        for (x, y) in rasterize_streak(s, dims) {
            hit[y as usize * scene.width as usize + x as usize] = true;
        }
    }
    for (p, h) in base.iter_mut().zip(hit) {
        if h {
            *p = p.saturating_add(boost);
        }
    }
    Frame::new(t, scene.width, scene.height, base).expect("scene dimensions validated")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub rain: Vec<bool>,
    /// Orientation of every streak drawn on each frame.
    pub orientations: Vec<Vec<f64>>,
}

/// Files written by [`generate_sequence`].
#[derive(Debug, Clone)]
pub struct SyntheticOutput {
    pub raw: PathBuf,
    /// Per-minute `minute,rain` labels; a minute is rain when most of its frames are.
    pub minute_labels: PathBuf,
    /// Per-frame `frame,rain` labels.
    pub frame_labels: PathBuf,
    pub truth: GroundTruth,
}

impl SyntheticOutput {
    pub fn open(&self) -> Result<FrameSource> {
        FrameSource::open(&self.raw, None)
    }
}

const BATCH: u64 = 32;

/// Writes `sequence.y8`/`.meta`, `labels.csv` and `frame_labels.csv` under `out_dir`.
pub fn generate_sequence(scene: &SceneSpec, rain: &RainSpec, seed: u64, out_dir: &Path) -> Result<SyntheticOutput> {
    scene.validate()?;
    rain.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let raw = out_dir.join("sequence.y8");
    let mut writer = RawSequenceWriter::create(
        &raw,
        RawMeta {
            width: scene.width,
            height: scene.height,
            frame_rate: scene.frame_rate,
        },
    )?;
    let dims = (scene.width, scene.height);
    let background = render_background(scene, seed);
    let mut truth = GroundTruth {
        rain: Vec::with_capacity(scene.frames as usize),
        orientations: Vec::with_capacity(scene.frames as usize),
    };
    let mut start = 0;
    while start < scene.frames {
        let end = (start + BATCH).min(scene.frames);
        let batch: Vec<(Frame, Vec<f64>)> = (start..end)
            .into_par_iter()
            .map(|t| {
                let streaks = frame_streaks(rain, dims, t, seed);
                let frame = render_frame(scene, &background, &streaks, rain.boost, t, seed);
                (frame, streaks.iter().map(|s| s.theta).collect())
            })
            .collect();
        for (frame, thetas) in batch {
            truth.rain.push(rain.is_raining(frame.index()));
            truth.orientations.push(thetas);
            writer.write_frame(&frame)?;
        }
        start = end;
    }
    writer.finish()?;

    let frame_labels = out_dir.join("frame_labels.csv");
    let mut text = String::from("frame,rain\n");
    for (i, &r) in truth.rain.iter().enumerate() {
        text.push_str(&format!("{i},{}\n", r as u8));
    }
    std::fs::write(&frame_labels, text).map_err(|e| Error::io(&frame_labels, e))?;

    let minute_labels = out_dir.join("labels.csv");
    let per_minute = (60.0 * scene.frame_rate).round().max(1.0) as usize;
    let mut text = String::from("minute,rain\n");
    for (m, chunk) in truth.rain.chunks(per_minute).enumerate() {
        let wet = chunk.iter().filter(|&&r| r).count();
        text.push_str(&format!("{m},{}\n", (2 * wet > chunk.len()) as u8));
    }
    std::fs::write(&minute_labels, text).map_err(|e| Error::io(&minute_labels, e))?;

    Ok(SyntheticOutput {
        raw,
        minute_labels,
        frame_labels,
        truth,
    })
}
