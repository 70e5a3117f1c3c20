//! Blob extraction and per-blob orientation statistics.
//!
//! Orientation is reported in degrees in `[0, 180)`, measured from the image
//! x-axis (columns) towards the y-axis (rows, pointing down): a horizontal
//! streak is 0, a vertical one 90, and a streak running down-right at equal
//! slope is 45.

use std::str::FromStr;

use crate::bgmodel::CandidateMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl FromStr for Connectivity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "4" => Ok(Connectivity::Four),
            "8" => Ok(Connectivity::Eight),
            _ => Err("expected 4 or 8".into()),
        }
    }
}

impl std::fmt::Display for Connectivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Connectivity::Four => "4",
            Connectivity::Eight => "8",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub min_x: u32,
    pub min_y: u32,
    pub max_x: u32,
    pub max_y: u32,
}

/// A connected set of mask pixels, stored in raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blob {
    pixels: Vec<(u32, u32)>,
    bbox: BoundingBox,
}

impl Blob {
    pub fn from_pixels(mut pixels: Vec<(u32, u32)>) -> Self {
        assert!(!pixels.is_empty(), "blob needs at least one pixel");
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        pixels.dedup();
        let mut bbox = BoundingBox {
            min_x: u32::MAX,
            min_y: u32::MAX,
            max_x: 0,
            max_y: 0,
        };
        for &(x, y) in &pixels {
            bbox.min_x = bbox.min_x.min(x);
            bbox.min_y = bbox.min_y.min(y);
            bbox.max_x = bbox.max_x.max(x);
            bbox.max_y = bbox.max_y.max(y);
        }
        Blob { pixels, bbox }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn pixels(&self) -> &[(u32, u32)] {
        &self.pixels
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }
}

fn find(parent: &mut [u32], mut a: u32) -> u32 {
    while parent[a as usize] != a {
        parent[a as usize] = parent[parent[a as usize] as usize];
        a = parent[a as usize];
    }
    a
}

fn union(parent: &mut [u32], a: u32, b: u32) -> u32 {
    let (ra, rb) = (find(parent, a), find(parent, b));
    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
    parent[hi as usize] = lo;
    lo
}

/// Two-pass union-find labelling. Blobs are ordered by their first pixel in
/// raster order.
pub fn connected_components(mask: &CandidateMask, connectivity: Connectivity) -> Vec<Blob> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let bits = mask.bits();
    let mut labels = vec![0u32; w * h];
    // label 0 means background; provisional labels start at 1
    let mut parent: Vec<u32> = vec![0];

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !bits[i] {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            if x > 0 && labels[i - 1] != 0 {
                neighbours[n] = labels[i - 1];
                n += 1;
            }
            if y > 0 {
                let up = i - w;
                if labels[up] != 0 {
                    neighbours[n] = labels[up];
                    n += 1;
                }
                if connectivity == Connectivity::Eight {
                    if x > 0 && labels[up - 1] != 0 {
                        neighbours[n] = labels[up - 1];
                        n += 1;
                    }
                    if x + 1 < w && labels[up + 1] != 0 {
                        neighbours[n] = labels[up + 1];
                        n += 1;
                    }
                }
            }
            labels[i] = if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let mut root = neighbours[0];
                for &other in &neighbours[1..n] {
                    root = union(&mut parent, root, other);
                }
                find(&mut parent, root)
            };
        }
    }

    let mut slot = vec![usize::MAX; parent.len()];
    let mut groups: Vec<Vec<(u32, u32)>> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == 0 {
                continue;
            }
            let root = find(&mut parent, l) as usize;
            if slot[root] == usize::MAX {
                slot[root] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot[root]].push((x as u32, y as u32));
        }
    }
    groups.into_iter().map(Blob::from_pixels).collect()
}

/// Keeps blobs with `min_size <= area <= max_size`.
pub fn filter_by_size(blobs: Vec<Blob>, min_size: usize, max_size: usize) -> Vec<Blob> {
    blobs
        .into_iter()
        .filter(|b| (min_size..=max_size).contains(&b.area()))
        .collect()
}

/// Central second-order moments as raw (not area-normalised) pixel sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentSet {
    pub m20: f64,
    pub m11: f64,
    pub m02: f64,
}

impl MomentSet {
    /// Eigenvalues of `[[m20, m11], [m11, m02]]`, largest first.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mean = 0.5 * (self.m20 + self.m02);
        let half = 0.5 * (self.m20 - self.m02);
        let r = (half * half + self.m11 * self.m11).sqrt();
        (mean + r, (mean - r).max(0.0))
    }

    pub fn scaled(&self, s: f64) -> Self {
        MomentSet {
            m20: self.m20 * s,
            m11: self.m11 * s,
            m02: self.m02 * s,
        }
    }
}

/// Computed from exact integer sums, so each moment is a single correctly
/// rounded quotient `(n * sum(x^2) - sum(x)^2) / n`.
pub fn central_moments(blob: &Blob) -> MomentSet {
    let n = blob.area() as i128;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0i128, 0i128, 0i128, 0i128, 0i128);
    for &(x, y) in blob.pixels() {
        let (x, y) = (x as i128, y as i128);
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    let nf = n as f64;
    MomentSet {
        m20: (n * sxx - sx * sx) as f64 / nf,
        m11: (n * sxy - sx * sy) as f64 / nf,
        m02: (n * syy - sy * sy) as f64 / nf,
    }
}

/// Orientation, orientation uncertainty and weight of one blob.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreakStats {
    pub theta: f64,
    pub dtheta: f64,
    pub weight: f64,
}

/// The blob has equal spread in every direction; its orientation is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("isotropic blob has no orientation")]
pub struct IsotropicBlob;

/// Orientation from the half-angle arctangent of the moment matrix, the
/// moment-based uncertainty scaled by `dm`, and the square root of the
/// largest eigenvalue as weight.
pub fn streak_geometry(m: &MomentSet, dm: f64) -> Result<StreakStats, IsotropicBlob> {
    debug_assert!(dm > 0.0);
    let diff = m.m02 - m.m20;
    let denom = diff * diff + 4.0 * m.m11 * m.m11;
    if denom == 0.0 {
        return Err(IsotropicBlob);
    }
    // angle of the major axis from the y-axis, turned into our x-axis convention
    let from_y = 0.5 * (2.0 * m.m11).atan2(diff).to_degrees();
    let mut theta = (90.0 - from_y).rem_euclid(180.0);
    if theta >= 180.0 {
        theta = 0.0;
    }
    let dtheta = (diff * diff + 2.0 * m.m11 * m.m11).sqrt() / denom * dm;
    let weight = m.eigenvalues().0.sqrt();
    Ok(StreakStats {
        theta,
        dtheta,
        weight,
    })
}

/// Size filter followed by geometry; isotropic blobs are dropped.
pub fn blob_streaks(blobs: &[Blob], min_size: usize, max_size: usize, dm: f64) -> Vec<StreakStats> {
    blobs
        .iter()
        .filter(|b| (min_size..=max_size).contains(&b.area()))
        .filter_map(|b| streak_geometry(&central_moments(b), dm).ok())
        .collect()
}
