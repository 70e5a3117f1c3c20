//! Per-frame detection loop, configuration and the parameter grid search.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::bgmodel::{extract_candidates, mog_init, photometric_candidates, CandidateMask, MogModel, MogParams};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::evaluate::NoEvidencePolicy;
use crate::hosmix::{build_hos, em_fit_default, ks_gate, MixtureParams};
use crate::ingest::{apply_roi, Channel, Frame, FrameSource, RoiSpec};
use crate::streaks::{blob_streaks, connected_components, filter_by_size, Blob, Connectivity};
use crate::temporal::{Decision, RainDecision, RainTracker, TemporalParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CandidateMethod {
    #[default]
    Mog,
    Photometric,
}

impl FromStr for CandidateMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mog" => Ok(CandidateMethod::Mog),
            "photometric" => Ok(CandidateMethod::Photometric),
            _ => Err("expected mog or photometric".into()),
        }
    }
}

impl std::fmt::Display for CandidateMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CandidateMethod::Mog => "mog",
            CandidateMethod::Photometric => "photometric",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Needed for image directories; raw sequences carry their own rate.
    pub frame_rate: Option<f64>,
    pub channel: Channel,
    pub roi: Option<RoiSpec>,
    pub mog: MogParams,
    pub candidate_c: i32,
    pub candidate_method: CandidateMethod,
    pub min_size: usize,
    pub max_size: usize,
    pub connectivity: Connectivity,
    pub dm: f64,
    pub min_kernel_width: f64,
    pub em_max_iterations: usize,
    pub em_tolerance: f64,
    pub ks_d_c: f64,
    pub temporal: TemporalParams,
    pub no_evidence: NoEvidencePolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            frame_rate: None,
            channel: Channel::Gray,
            roi: None,
            mog: MogParams::default(),
            candidate_c: 3,
            candidate_method: CandidateMethod::Mog,
            min_size: 4,
            max_size: 200,
            connectivity: Connectivity::Eight,
            dm: 0.5,
            min_kernel_width: 1.0,
            em_max_iterations: 100,
            em_tolerance: 1e-4,
            ks_d_c: 0.19,
            temporal: TemporalParams::default(),
            no_evidence: NoEvidencePolicy::Exclude,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.frame_rate {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::param("input.frame_rate", "must be positive"));
            }
        }
        if let Some(roi) = &self.roi {
            if roi.width == 0 || roi.height == 0 {
                return Err(Error::InvalidRoi(format!("{}x{} is empty", roi.width, roi.height)));
            }
        }
        self.mog.validate()?;
        if self.candidate_c <= 0 {
            return Err(Error::param("candidate.c", "must be positive"));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::param("blob.min_size", "need 0 < min_size <= max_size"));
        }
        if !(self.dm > 0.0) || !self.dm.is_finite() {
            return Err(Error::param("streak.dm", "must be positive"));
        }
        if !(self.min_kernel_width > 0.0) || !self.min_kernel_width.is_finite() {
            return Err(Error::param("hos.min_kernel_width", "must be positive"));
        }
        if self.em_max_iterations == 0 {
            return Err(Error::param("em.max_iterations", "must be at least 1"));
        }
        if !(self.em_tolerance > 0.0) {
            return Err(Error::param("em.tolerance", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ks_d_c) {
            return Err(Error::param("ks.d_c", "must lie in [0, 1]"));
        }
        self.temporal.validate()
    }

    /// Reads every pipeline key from `kv`, leaving other keys untouched.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = PipelineConfig::default();
        let roi = {
            let x = kv.take::<u32>("roi.x")?;
            let y = kv.take::<u32>("roi.y")?;
            let w = kv.take::<u32>("roi.width")?;
            let h = kv.take::<u32>("roi.height")?;
            match (w, h) {
                (Some(width), Some(height)) => Some(RoiSpec {
                    x: x.unwrap_or(0),
                    y: y.unwrap_or(0),
                    width,
                    height,
                }),
                (None, None) if x.is_none() && y.is_none() => None,
                _ => return Err(Error::InvalidRoi("needs both roi.width and roi.height".into())),
            }
        };
        let c = PipelineConfig {
            frame_rate: kv.take("input.frame_rate")?,
            channel: kv.take_or("ingest.channel", d.channel)?,
            roi,
            mog: MogParams {
                k: kv.take_or("mog.k", d.mog.k)?,
                learning_rate: kv.take_or("mog.learning_rate", d.mog.learning_rate)?,
                background_ratio: kv.take_or("mog.background_ratio", d.mog.background_ratio)?,
                initial_variance: kv.take_or("mog.initial_variance", d.mog.initial_variance)?,
                warmup_frames: kv.take_or("mog.warmup_frames", d.mog.warmup_frames)?,
            },
            candidate_c: kv.take_or("candidate.c", d.candidate_c)?,
            candidate_method: kv.take_or("candidate.method", d.candidate_method)?,
            min_size: kv.take_or("blob.min_size", d.min_size)?,
            max_size: kv.take_or("blob.max_size", d.max_size)?,
            connectivity: kv.take_or("blob.connectivity", d.connectivity)?,
            dm: kv.take_or("streak.dm", d.dm)?,
            min_kernel_width: kv.take_or("hos.min_kernel_width", d.min_kernel_width)?,
            em_max_iterations: kv.take_or("em.max_iterations", d.em_max_iterations)?,
            em_tolerance: kv.take_or("em.tolerance", d.em_tolerance)?,
            ks_d_c: kv.take_or("ks.d_c", d.ks_d_c)?,
            temporal: TemporalParams {
                q_var: kv.take_or("kalman.q_var", d.temporal.q_var)?,
                r_var: kv.take_or("kalman.r_var", d.temporal.r_var)?,
                update_policy: kv.take_or("kalman.update_policy", d.temporal.update_policy)?,
                pi_rain: kv.take_or("decision.pi_rain", d.temporal.pi_rain)?,
                mode: kv.take_or("decision.mode", d.temporal.mode)?,
            },
            no_evidence: kv.take_or("eval.count_no_evidence_as", d.no_evidence)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn parse(origin: &str, text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(origin, text)?;
        let c = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::load(path)?;
        let c = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    /// Every setting as `key = value` lines in a fixed order. Parsing the
    /// output gives back the same configuration.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(r) = self.frame_rate {
            line("input.frame_rate", &r);
        }
        line("ingest.channel", &self.channel);
        if let Some(roi) = &self.roi {
            line("roi.x", &roi.x);
            line("roi.y", &roi.y);
            line("roi.width", &roi.width);
            line("roi.height", &roi.height);
        }
        line("mog.k", &self.mog.k);
        line("mog.learning_rate", &self.mog.learning_rate);
        line("mog.background_ratio", &self.mog.background_ratio);
        line("mog.initial_variance", &self.mog.initial_variance);
        line("mog.warmup_frames", &self.mog.warmup_frames);
        line("candidate.c", &self.candidate_c);
        line("candidate.method", &self.candidate_method);
        line("blob.min_size", &self.min_size);
        line("blob.max_size", &self.max_size);
        line("blob.connectivity", &self.connectivity);
        line("streak.dm", &self.dm);
        line("hos.min_kernel_width", &self.min_kernel_width);
        line("em.max_iterations", &self.em_max_iterations);
        line("em.tolerance", &self.em_tolerance);
        line("ks.d_c", &self.ks_d_c);
        line("kalman.q_var", &self.temporal.q_var);
        line("kalman.r_var", &self.temporal.r_var);
        line("kalman.update_policy", &self.temporal.update_policy);
        line("decision.pi_rain", &self.temporal.pi_rain);
        line("decision.mode", &self.temporal.mode);
        line("eval.count_no_evidence_as", &self.no_evidence);
        s
    }

    /// First 16 hex digits of the SHA-256 of [`render`](Self::render).
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Stages of the per-frame loop, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Roi,
    MogUpdate,
    ExtractCandidates,
    ConnectedComponents,
    FilterBySize,
    StreakGeometry,
    BuildHos,
    EmFit,
    KsGate,
    RainDecision,
}

/// Turns frames into candidate masks, one per threshold in `cs`.
/// `None` means the frame is still warming up.
struct CandidateStage {
    method: CandidateMethod,
    mog: MogModel,
    prev: Option<Frame>,
}

impl CandidateStage {
    fn new(config: &PipelineConfig) -> Result<Self> {
        Ok(CandidateStage {
            method: config.candidate_method,
            mog: mog_init(config.mog)?,
            prev: None,
        })
    }

    fn run(
        &mut self,
        frame: &Frame,
        next: Option<&Frame>,
        cs: &[i32],
        trace: &mut Vec<Stage>,
    ) -> Result<Option<Vec<CandidateMask>>> {
        match self.method {
            CandidateMethod::Mog => {
                trace.push(Stage::MogUpdate);
                let out = self.mog.update(frame)?;
                if out.warm_up {
                    return Ok(None);
                }
                trace.push(Stage::ExtractCandidates);
                cs.iter()
                    .map(|&c| extract_candidates(&out.foreground, &out.background, c))
                    .collect::<Result<Vec<_>>>()
                    .map(Some)
            }
            CandidateMethod::Photometric => {
                let prev = self.prev.replace(frame.clone());
                let (Some(prev), Some(next)) = (prev, next) else {
                    return Ok(None);
                };
                trace.push(Stage::ExtractCandidates);
                cs.iter()
                    .map(|&c| photometric_candidates(&prev, frame, next, c))
                    .collect::<Result<Vec<_>>>()
                    .map(Some)
            }
        }
    }
}

/// Mixture fit of one frame's streaks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameFit {
    pub params: MixtureParams,
    pub ks_d: f64,
}

fn fit_streaks(blobs: &[Blob], min_size: usize, max_size: usize, dm: f64, config: &PipelineConfig) -> Option<FrameFit> {
    let streaks = blob_streaks(blobs, min_size, max_size, dm);
    let hos = build_hos(&streaks, config.min_kernel_width);
    em_fit_default(&hos, config.em_max_iterations, config.em_tolerance)
        .ok()
        .map(|r| FrameFit {
            params: r.params,
            ks_d: r.ks,
        })
}

/// Detection state for one video stream.
pub struct Detector {
    config: PipelineConfig,
    front: CandidateStage,
    tracker: RainTracker,
    trace: Vec<Stage>,
}

impl Detector {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Detector {
            front: CandidateStage::new(&config)?,
            tracker: RainTracker::new(config.temporal)?,
            config,
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Stages executed for the most recent frame.
    pub fn last_trace(&self) -> &[Stage] {
        &self.trace
    }

    /// Runs one frame through the loop. `next` is only read by the
    /// photometric extractor, which needs both temporal neighbours.
    pub fn process_frame(&mut self, frame: &Frame, next: Option<&Frame>) -> Result<RainDecision> {
        let index = frame.index();
        self.step(frame, next).map_err(|e| e.at_frame(index))
    }

    fn step(&mut self, frame: &Frame, next: Option<&Frame>) -> Result<RainDecision> {
        let cfg = &self.config;
        let index = frame.index();
        self.trace.clear();
        let (frame, next) = match &cfg.roi {
            Some(roi) => {
                self.trace.push(Stage::Roi);
                (apply_roi(frame, roi)?, next.map(|n| apply_roi(n, roi)).transpose()?)
            }
            None => (frame.clone(), next.cloned()),
        };
        let Some(masks) = self
            .front
            .run(&frame, next.as_ref(), &[cfg.candidate_c], &mut self.trace)?
        else {
            return Ok(RainDecision::bare(index, Decision::WarmUp));
        };
        self.trace.push(Stage::ConnectedComponents);
        let blobs = connected_components(&masks[0], cfg.connectivity);
        self.trace.push(Stage::FilterBySize);
        let blobs = filter_by_size(blobs, cfg.min_size, cfg.max_size);
        if blobs.is_empty() {
            return Ok(self.tracker.no_evidence(index));
        }
        self.trace.extend([Stage::StreakGeometry, Stage::BuildHos, Stage::EmFit]);
        let Some(fit) = fit_streaks(&blobs, cfg.min_size, cfg.max_size, cfg.dm, cfg) else {
            return Ok(self.tracker.no_evidence(index));
        };
        self.trace.extend([Stage::KsGate, Stage::RainDecision]);
        let passed = ks_gate(fit.ks_d, cfg.ks_d_c);
        let d = self.tracker.observe(index, fit.params, fit.ks_d, passed);
        log::trace!("frame {index}: {:?} {:?}", d.decision, self.trace);
        Ok(d)
    }
}

/// Ordered per-frame decisions of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSeries {
    pub records: Vec<RainDecision>,
    pub config_hash: String,
}

pub const DETECTION_HEADER: &str = "frame,decision,pi_raw,pi_kalman,ks_d";
const TRUNCATED: &str = "# truncated";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn detection_line(d: &RainDecision) -> String {
    format!(
        "{},{},{},{},{}",
        d.frame,
        d.decision.code(),
        opt(d.pi_raw),
        opt(d.pi_kalman),
        opt(d.ks_d)
    )
}

impl DetectionSeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "# config_hash={}", self.config_hash)?;
        writeln!(w, "{DETECTION_HEADER}")?;
        for d in &self.records {
            writeln!(w, "{}", detection_line(d))?;
        }
        w.flush()
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut config_hash = String::new();
        let mut records = Vec::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.starts_with(TRUNCATED) {
                return Err(Error::Detections(format!("line {n}: run was truncated")));
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(h) = rest.trim().strip_prefix("config_hash=") {
                    config_hash = h.to_string();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                if line.trim() != DETECTION_HEADER {
                    return Err(Error::Detections(format!("line {n}: expected header `{DETECTION_HEADER}`")));
                }
                header_seen = true;
                continue;
            }
            let bad = |what: &str| Error::Detections(format!("line {n}: {what}"));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let frame: u64 = f[0].parse().map_err(|_| bad("bad frame index"))?;
            if frame != records.len() as u64 {
                return Err(bad("frame indices are not contiguous from 0"));
            }
            let decision = Decision::from_code(f[1]).ok_or_else(|| bad("decision must be 0, 1, W or N"))?;
            let num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad("bad number"))
                }
            };
            records.push(RainDecision {
                frame,
                decision,
                pi_raw: num(f[2])?,
                pi_kalman: num(f[3])?,
                ks_d: num(f[4])?,
            });
        }
        if !header_seen {
            return Err(Error::Detections("missing header".into()));
        }
        Ok(DetectionSeries { records, config_hash })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text).map_err(|e| match e {
            Error::Detections(m) => Error::Detections(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Rain fraction over frames that are not warm-up.
    pub fn rain_fraction(&self) -> f64 {
        let evaluated = self.records.iter().filter(|d| d.decision != Decision::WarmUp).count();
        if evaluated == 0 {
            return 0.0;
        }
        self.records.iter().filter(|d| d.is_rain()).count() as f64 / evaluated as f64
    }
}

/// Runs every frame of `source` through a fresh [`Detector`]. When `sink` is
/// given the CSV is written as frames complete; on failure a truncation
/// marker follows the last complete record.
pub fn process_video(
    config: &PipelineConfig,
    source: &mut FrameSource,
    mut sink: Option<&mut dyn Write>,
) -> Result<DetectionSeries> {
    let config_hash = config.fingerprint();
    let mut detector = Detector::new(config.clone())?;
    let sink_err = |e: std::io::Error| Error::io("<detections>", e);
    if let Some(w) = sink.as_mut() {
        writeln!(w, "# config_hash={config_hash}").map_err(sink_err)?;
        writeln!(w, "{DETECTION_HEADER}").map_err(sink_err)?;
    }
    let mut records = Vec::with_capacity(source.frame_count() as usize);
    // only the photometric extractor needs to see the following frame
    let lookahead = config.candidate_method == CandidateMethod::Photometric;
    let result = (|| -> Result<()> {
        let mut current = source.next_frame()?;
        while let Some(frame) = current {
            let next = if lookahead { source.next_frame()? } else { None };
            let d = detector.process_frame(&frame, next.as_ref())?;
            if let Some(w) = sink.as_mut() {
                writeln!(w, "{}", detection_line(&d)).map_err(sink_err)?;
            }
            records.push(d);
            current = if lookahead { next } else { source.next_frame()? };
        }
        Ok(())
    })();
    if let Some(w) = sink.as_mut() {
        if let Err(e) = &result {
            let _ = writeln!(w, "{TRUNCATED} after {} frames: {e}", records.len());
        }
        w.flush().map_err(sink_err)?;
    }
    result?;
    Ok(DetectionSeries { records, config_hash })
}

// ---------------------------------------------------------------- grid search

/// Swept values. Everything else comes from the base configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub c: Vec<i32>,
    pub min_size: Vec<usize>,
    pub max_size: Vec<usize>,
    pub dm: Vec<f64>,
    pub d_c: Vec<f64>,
    pub pi_rain: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub c: i32,
    pub min_size: usize,
    pub max_size: usize,
    pub dm: f64,
    pub d_c: f64,
    pub pi_rain: f64,
}

impl GridPoint {
    pub fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        c.candidate_c = self.c;
        c.min_size = self.min_size;
        c.max_size = self.max_size;
        c.dm = self.dm;
        c.ks_d_c = self.d_c;
        c.temporal.pi_rain = self.pi_rain;
        c
    }
}

fn round12(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

/// Parses a value list: `[a, b, ...]`, `[start:step:stop]` with the stop
/// included, `[start:step:stop)` with it excluded, or a single number.
pub fn parse_values(text: &str) -> std::result::Result<Vec<f64>, String> {
    let t = text.trim();
    let num = |s: &str| -> std::result::Result<f64, String> {
        let s = s.trim();
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("bad number `{s}`"))
    };
    let Some(inner) = t.strip_prefix('[') else {
        return Ok(vec![num(t)?]);
    };
    let (body, inclusive) = if let Some(b) = inner.strip_suffix(']') {
        (b, true)
    } else if let Some(b) = inner.strip_suffix(')') {
        (b, false)
    } else {
        return Err(format!("unterminated list `{t}`"));
    };
    if body.contains(':') {
        let parts: Vec<&str> = body.split(':').collect();
        let [a, s, b] = parts.as_slice() else {
            return Err(format!("range needs start:step:stop, got `{t}`"));
        };
        let (a, s, b) = (num(a)?, num(s)?, num(b)?);
        if !(s > 0.0) || b < a {
            return Err(format!("empty or backwards range `{t}`"));
        }
        let eps = s * 1e-9;
        let mut out = Vec::new();
        for i in 0.. {
            let v = a + i as f64 * s;
            let keep = if inclusive { v <= b + eps } else { v < b - eps };
            if !keep {
                break;
            }
            out.push(round12(v));
        }
        if out.is_empty() {
            return Err(format!("range `{t}` has no values"));
        }
        Ok(out)
    } else {
        if !inclusive {
            return Err(format!("lists close with `]`: `{t}`"));
        }
        let out = body.split(',').map(num).collect::<std::result::Result<Vec<_>, _>>()?;
        if out.is_empty() {
            return Err("empty list".into());
        }
        Ok(out)
    }
}

fn whole<T: TryFrom<i64>>(v: f64) -> std::result::Result<T, String> {
    if v.fract() != 0.0 {
        return Err(format!("{v} is not a whole number"));
    }
    T::try_from(v as i64).map_err(|_| format!("{v} is out of range"))
}

impl GridSpec {
    /// The standard search space: c in {3, 5}, blob sizes 4 and
    /// 50..=200 step 50, dm 0.5..=2.0 step 0.5, D_c 0.01..=0.20 step 0.01 and
    /// Π_rain from 0.20 step 0.02 below 0.50. 9600 points.
    pub fn standard() -> Self {
        let r = |s: &str| parse_values(s).expect("static range");
        GridSpec {
            c: vec![3, 5],
            min_size: vec![4],
            max_size: vec![50, 100, 150, 200],
            dm: r("[0.5:0.5:2.0]"),
            d_c: r("[0.01:0.01:0.20]"),
            pi_rain: r("[0.20:0.02:0.50)"),
        }
    }

    /// Reads `grid.*` keys; a missing key sweeps only the base value.
    pub fn from_kv(kv: &mut KeyValues, base: &PipelineConfig) -> Result<Self> {
        let origin = kv.origin().to_string();
        let mut list = |key: &str| -> Result<Option<Vec<f64>>> {
            match kv.take_str(key) {
                None => Ok(None),
                Some((v, line)) => parse_values(&v).map(Some).map_err(|reason| Error::Config {
                    origin: origin.clone(),
                    line,
                    reason: format!("`{key}`: {reason}"),
                }),
            }
        };
        let ints = |v: Option<Vec<f64>>, key: &str, default: usize| -> Result<Vec<usize>> {
            match v {
                None => Ok(vec![default]),
                Some(v) => v
                    .into_iter()
                    .map(whole::<usize>)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|r| Error::Grid(format!("{key}: {r}"))),
            }
        };
        let c = match list("grid.c")? {
            None => vec![base.candidate_c],
            Some(v) => v
                .into_iter()
                .map(whole::<i32>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|r| Error::Grid(format!("grid.c: {r}")))?,
        };
        let min_size = ints(list("grid.min_size")?, "grid.min_size", base.min_size)?;
        let max_size = ints(list("grid.max_size")?, "grid.max_size", base.max_size)?;
        let g = GridSpec {
            c,
            min_size,
            max_size,
            dm: list("grid.dm")?.unwrap_or_else(|| vec![base.dm]),
            d_c: list("grid.d_c")?.unwrap_or_else(|| vec![base.ks_d_c]),
            pi_rain: list("grid.pi_rain")?.unwrap_or_else(|| vec![base.temporal.pi_rain]),
        };
        g.validate(base)?;
        Ok(g)
    }

    /// A grid file holds optional pipeline keys plus `grid.*` lists.
    pub fn load(path: &Path) -> Result<(PipelineConfig, GridSpec)> {
        let mut kv = KeyValues::load(path)?;
        let base = PipelineConfig::from_kv(&mut kv)?;
        let grid = GridSpec::from_kv(&mut kv, &base)?;
        kv.finish()?;
        Ok((base, grid))
    }

    pub fn validate(&self, base: &PipelineConfig) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Grid("empty grid".into()));
        }
        for p in self.points() {
            p.apply(base).validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.c.len() * self.min_size.len() * self.max_size.len() * self.dm.len() * self.d_c.len() * self.pi_rain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product with `pi_rain` varying fastest.
    pub fn points(&self) -> impl Iterator<Item = GridPoint> + '_ {
        self.c.iter().flat_map(move |&c| {
            self.min_size.iter().flat_map(move |&min_size| {
                self.max_size.iter().flat_map(move |&max_size| {
                    self.dm.iter().flat_map(move |&dm| {
                        self.d_c.iter().flat_map(move |&d_c| {
                            self.pi_rain.iter().map(move |&pi_rain| GridPoint {
                                c,
                                min_size,
                                max_size,
                                dm,
                                d_c,
                                pi_rain,
                            })
                        })
                    })
                })
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnippetTag {
    Rain,
    Dry,
}

impl FromStr for SnippetTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rain" => Ok(SnippetTag::Rain),
            "dry" => Ok(SnippetTag::Dry),
            _ => Err(format!("tag must be rain or dry, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snippet {
    pub path: PathBuf,
    pub tag: SnippetTag,
}

/// Reads a `path,tag` manifest. Relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<Snippet>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    if rdr.headers()?.iter().collect::<Vec<_>>() != ["path", "tag"] {
        return Err(Error::Grid(format!("{}: header must be `path,tag`", path.display())));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let tag = rec[1]
            .parse()
            .map_err(|e| Error::Grid(format!("{}: {e}", path.display())))?;
        out.push(Snippet {
            path: base.join(&rec[0]),
            tag,
        });
    }
    Ok(out)
}

pub const RAIN_FLOOR: f64 = 0.60;
pub const DRY_CEILING: f64 = 0.40;

/// Smallest distance to the bound over all snippets; negative when any
/// snippet is on the wrong side.
pub fn margin(fractions: &[f64], tags: &[SnippetTag]) -> f64 {
    fractions
        .iter()
        .zip(tags)
        .map(|(&f, t)| match t {
            SnippetTag::Rain => f - RAIN_FLOOR,
            SnippetTag::Dry => DRY_CEILING - f,
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub point: GridPoint,
    /// Per-snippet rain fraction, in the order of [`GridSearch::snippets`].
    pub fractions: Vec<f64>,
    pub feasible: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch {
    pub snippets: Vec<Snippet>,
    /// Feasible points first, each group by decreasing margin.
    pub ranked: Vec<GridResult>,
}

/// Fits for every (c, min, max, dm) combination of one frame.
type FitTable = Vec<Option<FrameFit>>;

fn snippet_fits(
    base: &PipelineConfig,
    grid: &GridSpec,
    snippet: &Snippet,
    mut consume: impl FnMut(u64, Option<&FitTable>),
) -> Result<()> {
    let mut source = FrameSource::open(&snippet.path, base.frame_rate)?.with_channel(base.channel);
    let mut front = CandidateStage::new(base)?;
    let mut trace = Vec::new();
    let geom: Vec<(usize, usize, f64)> = grid
        .min_size
        .iter()
        .flat_map(|&mn| {
            grid.max_size
                .iter()
                .flat_map(move |&mx| grid.dm.iter().map(move |&dm| (mn, mx, dm)))
        })
        .collect();
    let mut current = source.next_frame()?;
    while let Some(frame) = current {
        let next = source.next_frame()?;
        let index = frame.index();
        let (f, n) = match &base.roi {
            Some(roi) => (apply_roi(&frame, roi)?, next.as_ref().map(|n| apply_roi(n, roi)).transpose()?),
            None => (frame, next.clone()),
        };
        trace.clear();
        let masks = front
            .run(&f, n.as_ref(), &grid.c, &mut trace)
            .map_err(|e| e.at_frame(index))?;
        match masks {
            None => consume(index, None),
            Some(masks) => {
                let table: FitTable = masks
                    .par_iter()
                    .flat_map_iter(|mask| {
                        let blobs = connected_components(mask, base.connectivity);
                        geom.iter()
                            .map(|&(mn, mx, dm)| {
                                let kept = filter_by_size(blobs.clone(), mn, mx);
                                if kept.is_empty() {
                                    None
                                } else {
                                    fit_streaks(&kept, mn, mx, dm, base)
                                }
                            })
                            .collect::<Vec<_>>()
                    })
                    .collect();
                consume(index, Some(&table));
            }
        }
        current = next;
    }
    Ok(())
}

/// Rain fraction of one snippet for every grid point, in [`GridSpec::points`] order.
fn snippet_fractions(base: &PipelineConfig, grid: &GridSpec, snippet: &Snippet) -> Result<Vec<f64>> {
    let per_fit = grid.d_c.len() * grid.pi_rain.len();
    let points: Vec<GridPoint> = grid.points().collect();
    let mut trackers = points
        .iter()
        .map(|p| {
            RainTracker::new(TemporalParams {
                pi_rain: p.pi_rain,
                ..base.temporal
            })
            .map(|t| (t, 0u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut evaluated = 0u64;
    snippet_fits(base, grid, snippet, |index, table| {
        let Some(table) = table else { return };
        evaluated += 1;
        trackers
            .par_iter_mut()
            .zip(points.par_iter())
            .enumerate()
            .for_each(|(i, ((tracker, hits), p))| {
                let d = match table[i / per_fit] {
                    None => tracker.no_evidence(index),
                    Some(fit) => tracker.observe(index, fit.params, fit.ks_d, ks_gate(fit.ks_d, p.d_c)),
                };
                if d.is_rain() {
                    *hits += 1;
                }
            });
    })
    .map_err(|e| Error::Grid(format!("{}: {e}", snippet.path.display())))?;
    if evaluated == 0 {
        return Err(Error::Grid(format!(
            "{}: no frames after warm-up",
            snippet.path.display()
        )));
    }
    Ok(trackers.into_iter().map(|(_, h)| h as f64 / evaluated as f64).collect())
}

/// Evaluates every grid point on every snippet and ranks the points.
///
/// Each snippet is read once: the background model runs once, masks are
/// built once per `c`, fits once per (c, min, max, dm), and only the
/// decision stage runs per grid point.
pub fn grid_search(base: &PipelineConfig, grid: &GridSpec, snippets: &[Snippet]) -> Result<GridSearch> {
    if grid.is_empty() {
        return Err(Error::Grid("empty grid".into()));
    }
    grid.validate(base)?;
    if !snippets.iter().any(|s| s.tag == SnippetTag::Rain) || !snippets.iter().any(|s| s.tag == SnippetTag::Dry) {
        return Err(Error::Grid("need at least one rain and one dry snippet".into()));
    }
    let mut snippets = snippets.to_vec();
    snippets.sort_by(|a, b| a.path.cmp(&b.path));
    let per_snippet = snippets
        .par_iter()
        .map(|s| snippet_fractions(base, grid, s))
        .collect::<Result<Vec<_>>>()?;
    let tags: Vec<SnippetTag> = snippets.iter().map(|s| s.tag).collect();
    let mut ranked: Vec<(usize, GridResult)> = grid
        .points()
        .enumerate()
        .map(|(i, point)| {
            let fractions: Vec<f64> = per_snippet.iter().map(|f| f[i]).collect();
            let m = margin(&fractions, &tags);
            (
                i,
                GridResult {
                    point,
                    fractions,
                    feasible: m >= 0.0,
                    margin: m,
                },
            )
        })
        .collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.feasible
            .cmp(&a.feasible)
            .then(b.margin.total_cmp(&a.margin))
            .then(ia.cmp(ib))
    });
    Ok(GridSearch {
        snippets,
        ranked: ranked.into_iter().map(|(_, r)| r).collect(),
    })
}

impl GridSearch {
    /// One row per grid point in rank order, one column per snippet
    /// headed `tag:path`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["rank", "c", "min_size", "max_size", "dm", "d_c", "pi_rain", "feasible", "margin"]
            .map(String::from)
            .to_vec();
        for s in &self.snippets {
            let tag = match s.tag {
                SnippetTag::Rain => "rain",
                SnippetTag::Dry => "dry",
            };
            header.push(format!("{tag}:{}", s.path.display()));
        }
        out.write_record(&header)?;
        for (rank, r) in self.ranked.iter().enumerate() {
            let p = &r.point;
            let mut row = vec![
                (rank + 1).to_string(),
                p.c.to_string(),
                p.min_size.to_string(),
                p.max_size.to_string(),
                p.dm.to_string(),
                p.d_c.to_string(),
                p.pi_rain.to_string(),
                u8::from(r.feasible).to_string(),
                format!("{:.6}", r.margin),
            ];
            row.extend(r.fractions.iter().map(|f| format!("{f:.6}")));
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("<grid results>", e))
    }
}
