//! Per-pixel adaptive Mixture-of-Gaussians background model and candidate
//! streak extraction.
//!
//! Each pixel keeps `k` intensity modes ordered by fitness (weight / sigma).
//! The leading modes whose cumulative weight first exceeds the background
//! ratio form the background. A pixel is foreground when it matches none of
//! those modes within 2.5 standard deviations.

use crate::error::{Error, Result};
use crate::ingest::Frame;

/// Mahalanobis gate for a mode match, in standard deviations.
const MATCH_SIGMAS: f64 = 2.5;
/// Variance floor; keeps a noise-free static scene from collapsing to zero width.
const MIN_VARIANCE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MogParams {
    pub k: usize,
    pub learning_rate: f64,
    pub background_ratio: f64,
    pub initial_variance: f64,
    pub warmup_frames: u64,
}

impl Default for MogParams {
    fn default() -> Self {
        MogParams {
            k: 3,
            learning_rate: 0.01,
            background_ratio: 0.7,
            initial_variance: 15.0 * 15.0,
            warmup_frames: 500,
        }
    }
}

impl MogParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::param("mog.k", format!("need at least 2 modes, got {}", self.k)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(Error::param("mog.learning_rate", "must lie in (0, 1)"));
        }
        if !(self.background_ratio > 0.0 && self.background_ratio < 1.0) {
            return Err(Error::param("mog.background_ratio", "must lie in (0, 1)"));
        }
        if !(self.initial_variance > 0.0) || !self.initial_variance.is_finite() {
            return Err(Error::param("mog.initial_variance", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Mode {
    weight: f64,
    mean: f64,
    var: f64,
}

impl Mode {
    #[inline]
    fn fitness(&self) -> f64 {
        self.weight / self.var.sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct MogModel {
    params: MogParams,
    dims: Option<(u32, u32)>,
    modes: Vec<Mode>,
    frames_seen: u64,
}

/// Result of feeding one frame to the model.
#[derive(Debug, Clone)]
pub struct MogOutput {
    /// Input intensity where no background mode matched, 0 elsewhere.
    pub foreground: Frame,
    /// Mean of the dominant mode, from the model state before this frame.
    pub background: Frame,
    /// Frame still falls inside the warm-up period.
    pub warm_up: bool,
}

/// Validates parameters and returns an empty model sized on first use.
pub fn mog_init(params: MogParams) -> Result<MogModel> {
    params.validate()?;
    Ok(MogModel {
        params,
        dims: None,
        modes: Vec::new(),
        frames_seen: 0,
    })
}

impl MogModel {
    pub fn params(&self) -> &MogParams {
        &self.params
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    /// True while the next frame would still be a warm-up frame.
    pub fn warming_up(&self) -> bool {
        self.frames_seen < self.params.warmup_frames
    }

    fn seed(&mut self, frame: &Frame) {
        let k = self.params.k;
        self.dims = Some(frame.dims());
        self.modes = Vec::with_capacity(frame.pixels().len() * k);
        for &p in frame.pixels() {
            self.modes.push(Mode {
                weight: 1.0,
                mean: p as f64,
                var: self.params.initial_variance,
            });
            for _ in 1..k {
                self.modes.push(Mode {
                    weight: 0.0,
                    mean: 0.0,
                    var: self.params.initial_variance,
                });
            }
        }
    }

    /// Classify `frame` against the current model, then fold it in.
    pub fn update(&mut self, frame: &Frame) -> Result<MogOutput> {
        let warm_up = self.warming_up();
        let (w, h) = frame.dims();
        match self.dims {
            None => {
                self.seed(frame);
                self.frames_seen += 1;
                return Ok(MogOutput {
                    foreground: Frame::filled(frame.index(), w, h, 0),
                    background: frame.clone(),
                    warm_up,
                });
            }
            Some(d) if d != (w, h) => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: (w, h),
                })
            }
            Some(_) => {}
        }

        let k = self.params.k;
        let alpha = self.params.learning_rate;
        let ratio = self.params.background_ratio;
        let init_var = self.params.initial_variance;
        let mut fg = vec![0u8; frame.pixels().len()];
        let mut bg = vec![0u8; frame.pixels().len()];

        for (i, &px) in frame.pixels().iter().enumerate() {
            let modes = &mut self.modes[i * k..(i + 1) * k];
            let x = px as f64;

            bg[i] = modes[0].mean.round().clamp(0.0, 255.0) as u8;

            let mut n_background = k;
            let mut cumulative = 0.0;
            for (j, m) in modes.iter().enumerate() {
                cumulative += m.weight;
                if cumulative > ratio {
                    n_background = j + 1;
                    break;
                }
            }
            let matched = modes.iter().position(|m| {
                let d = x - m.mean;
                m.weight > 0.0 && d * d <= MATCH_SIGMAS * MATCH_SIGMAS * m.var
            });
            if !matches!(matched, Some(j) if j < n_background) {
                fg[i] = px;
            }

            for m in modes.iter_mut() {
                m.weight *= 1.0 - alpha;
            }
            match matched {
                Some(j) => {
                    let m = &mut modes[j];
                    m.weight += alpha;
                    let rho = (alpha / m.weight).min(1.0);
                    let d = x - m.mean;
                    m.mean += rho * d;
                    m.var = (m.var + rho * (d * d - m.var)).max(MIN_VARIANCE);
                }
                None => {
                    modes[k - 1] = Mode {
                        weight: alpha,
                        mean: x,
                        var: init_var,
                    };
                }
            }
            let total: f64 = modes.iter().map(|m| m.weight).sum();
            for m in modes.iter_mut() {
                m.weight /= total;
            }
            // k is tiny; insertion sort by descending fitness
            for a in 1..k {
                let mut b = a;
                while b > 0 && modes[b].fitness() > modes[b - 1].fitness() {
                    modes.swap(b, b - 1);
                    b -= 1;
                }
            }
        }
        self.frames_seen += 1;
        Ok(MogOutput {
            foreground: Frame::new(frame.index(), w, h, fg)?,
            background: Frame::new(frame.index(), w, h, bg)?,
            warm_up,
        })
    }

    /// Per-pixel mode weights, for inspection.
    pub fn pixel_weights(&self, x: u32, y: u32) -> Vec<f64> {
        let Some((w, _)) = self.dims else {
            return Vec::new();
        };
        let k = self.params.k;
        let i = (y as usize * w as usize + x as usize) * k;
        self.modes[i..i + k].iter().map(|m| m.weight).collect()
    }

    pub fn pixel_variances(&self, x: u32, y: u32) -> Vec<f64> {
        let Some((w, _)) = self.dims else {
            return Vec::new();
        };
        let k = self.params.k;
        let i = (y as usize * w as usize + x as usize) * k;
        self.modes[i..i + k].iter().map(|m| m.var).collect()
    }
}

pub fn mog_update(model: &mut MogModel, frame: &Frame) -> Result<MogOutput> {
    model.update(frame)
}

/// Binary candidate-streak mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateMask {
    index: u64,
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl CandidateMask {
    pub fn new(index: u64, width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize);
        CandidateMask {
            index,
            width,
            height,
            bits,
        }
    }

    pub fn empty(index: u64, width: u32, height: u32) -> Self {
        Self::new(index, width, height, vec![false; width as usize * height as usize])
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

fn check_threshold(c: i32) -> Result<()> {
    if c <= 0 {
        return Err(Error::param("candidate.c", format!("must be positive, got {c}")));
    }
    Ok(())
}

/// Pixels where the foreground is active and exceeds the background by at least `c`.
pub fn extract_candidates(foreground: &Frame, background: &Frame, c: i32) -> Result<CandidateMask> {
    check_threshold(c)?;
    foreground.ensure_dims(background)?;
    let bits = foreground
        .pixels()
        .iter()
        .zip(background.pixels())
        .map(|(&f, &b)| f != 0 && f as i32 - b as i32 >= c)
        .collect();
    Ok(CandidateMask::new(
        foreground.index(),
        foreground.width(),
        foreground.height(),
        bits,
    ))
}

/// Temporal photometric constraint: `cur` brighter than both neighbours by at least `c`.
pub fn photometric_candidates(prev: &Frame, cur: &Frame, next: &Frame, c: i32) -> Result<CandidateMask> {
    check_threshold(c)?;
    cur.ensure_dims(prev)?;
    cur.ensure_dims(next)?;
    let bits = cur
        .pixels()
        .iter()
        .zip(prev.pixels().iter().zip(next.pixels()))
        .map(|(&i, (&p, &n))| {
            let i = i as i32;
            i - p as i32 >= c && i - n as i32 >= c
        })
        .collect();
    Ok(CandidateMask::new(cur.index(), cur.width(), cur.height(), bits))
}
