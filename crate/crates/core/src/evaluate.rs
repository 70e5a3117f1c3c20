//! Label alignment, confusion counts, Acc / F1 / MCC and reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::temporal::{Decision, RainDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GaugeSource {
    #[default]
    Laser,
    Mechanical,
    Synthetic,
}

/// Binary rain flag per minute, minute 0 first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSeries {
    pub minutes: Vec<bool>,
    pub source: GaugeSource,
}

/// Ground truth as read from a label CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labels {
    PerMinute(LabelSeries),
    PerFrame(Vec<bool>),
}

impl Labels {
    /// Per-frame flags for `frame_count` frames.
    pub fn per_frame(&self, frame_rate: f64, frame_count: usize) -> Result<Vec<bool>> {
        match self {
            Labels::PerMinute(series) => per_minute_to_per_frame(series, frame_rate, frame_count),
            Labels::PerFrame(flags) => {
                if flags.len() < frame_count {
                    return Err(Error::Labels(format!(
                        "{} frame labels for {frame_count} frames",
                        flags.len()
                    )));
                }
                Ok(flags[..frame_count].to_vec())
            }
        }
    }
}

/// Reads `minute,rain`, `minute,mm_per_hour` or `frame,rain`. Intensities
/// count as rain when strictly positive. Indices must run 0, 1, 2, ...
pub fn read_labels(path: &Path, source: GaugeSource) -> Result<Labels> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    let header: Vec<&str> = headers.iter().collect();
    let (per_frame, intensity) = match header.as_slice() {
        ["minute", "rain"] => (false, false),
        ["minute", "mm_per_hour"] => (false, true),
        ["frame", "rain"] => (true, false),
        _ => {
            return Err(Error::Labels(format!(
                "{}: unexpected header {:?}",
                path.display(),
                header
            )))
        }
    };
    let mut flags = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let idx: usize = rec[0]
            .parse()
            .map_err(|_| Error::Labels(format!("{}: row {}: bad index `{}`", path.display(), row + 1, &rec[0])))?;
        if idx != flags.len() {
            return Err(Error::Labels(format!(
                "{}: row {}: index {idx} breaks the contiguous sequence",
                path.display(),
                row + 1
            )));
        }
        let v = &rec[1];
        let flag = if intensity {
            let mm: f64 = v
                .parse()
                .map_err(|_| Error::Labels(format!("{}: row {}: bad intensity `{v}`", path.display(), row + 1)))?;
            mm > 0.0
        } else {
            match v {
                "0" => false,
                "1" => true,
                _ => {
                    return Err(Error::Labels(format!(
                        "{}: row {}: rain must be 0 or 1, got `{v}`",
                        path.display(),
                        row + 1
                    )))
                }
            }
        };
        flags.push(flag);
    }
    Ok(if per_frame {
        Labels::PerFrame(flags)
    } else {
        Labels::PerMinute(LabelSeries {
            minutes: flags,
            source,
        })
    })
}

/// Frame `f` takes the label of minute `floor(f / (60 * frame_rate))`.
pub fn per_minute_to_per_frame(labels: &LabelSeries, frame_rate: f64, frame_count: usize) -> Result<Vec<bool>> {
    if !(frame_rate > 0.0) || !frame_rate.is_finite() {
        return Err(Error::param("frame_rate", format!("{frame_rate} is not positive")));
    }
    let per_minute = 60.0 * frame_rate;
    (0..frame_count)
        .map(|f| {
            let minute = (f as f64 / per_minute).floor() as usize;
            labels.minutes.get(minute).copied().ok_or_else(|| {
                Error::Labels(format!(
                    "{} minutes of labels do not cover frame {f} (minute {minute})",
                    labels.minutes.len()
                ))
            })
        })
        .collect()
}

/// How frames without streak evidence enter the confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoEvidencePolicy {
    #[default]
    Exclude,
    NoRain,
}

impl FromStr for NoEvidencePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exclude" => Ok(NoEvidencePolicy::Exclude),
            "no_rain" | "no-rain" => Ok(NoEvidencePolicy::NoRain),
            _ => Err("expected exclude or no_rain".into()),
        }
    }
}

impl std::fmt::Display for NoEvidencePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoEvidencePolicy::Exclude => "exclude",
            NoEvidencePolicy::NoRain => "no_rain",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

/// Confusion counts plus the frames left out of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub matrix: ConfusionMatrix,
    pub warm_up: u64,
    pub no_evidence_excluded: u64,
}

/// Counts predictions against per-frame truth. Warm-up frames never count.
pub fn confusion(predictions: &[RainDecision], truth: &[bool], policy: NoEvidencePolicy) -> Result<Confusion> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch {
            predictions: predictions.len(),
            truth: truth.len(),
        });
    }
    let mut out = Confusion::default();
    for (p, &actual) in predictions.iter().zip(truth) {
        match (p.decision, policy) {
            (Decision::WarmUp, _) => out.warm_up += 1,
            (Decision::NoEvidence, NoEvidencePolicy::Exclude) => out.no_evidence_excluded += 1,
            (Decision::NoEvidence, NoEvidencePolicy::NoRain) => out.matrix.record(false, actual),
            (Decision::Rain, _) => out.matrix.record(true, actual),
            (Decision::NoRain, _) => out.matrix.record(false, actual),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
}

/// Accuracy, F1 and Matthews correlation. MCC is 0 when any factor of its
/// denominator is 0; F1 is 0 when there are no positives at all.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricSet> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let (tp, tn, fp, fn_) = (cm.tp as f64, cm.tn as f64, cm.fp as f64, cm.fn_ as f64);
    let accuracy = (cm.tp + cm.tn) as f64 / total as f64;
    let f1_den = 2 * cm.tp + cm.fp + cm.fn_;
    let f1 = if f1_den == 0 {
        0.0
    } else {
        2.0 * tp / f1_den as f64
    };
    let sums = [cm.tp + cm.fp, cm.tp + cm.fn_, cm.tn + cm.fp, cm.tn + cm.fn_];
    let mcc = if sums.contains(&0) {
        0.0
    } else {
        let den = sums.iter().map(|&s| (s as f64).sqrt()).product::<f64>();
        (tp * tn - fp * fn_) / den
    };
    Ok(MetricSet { accuracy, f1, mcc })
}

/// One row of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub acc: f64,
    pub f1: f64,
    pub mcc: f64,
    pub config_hash: String,
    pub warm_up_frames: u64,
    pub excluded_frames: u64,
}

impl ReportRow {
    pub fn new(c: &Confusion, m: &MetricSet, config_hash: &str) -> Self {
        ReportRow {
            tp: c.matrix.tp,
            tn: c.matrix.tn,
            fp: c.matrix.fp,
            fn_: c.matrix.fn_,
            acc: m.accuracy,
            f1: m.f1,
            mcc: m.mcc,
            config_hash: config_hash.to_string(),
            warm_up_frames: c.warm_up,
            excluded_frames: c.no_evidence_excluded,
        }
    }
}

/// Plain-text table in the column order TP, TN, FP, FN, Acc, F1, MCC.
pub fn render_table(rows: &BTreeMap<String, ReportRow>, generated_at: &str) -> String {
    let name_w = rows.keys().map(String::len).max().unwrap_or(0).max("Sequence".len());
    let mut s = format!("# generated {generated_at}\n");
    s.push_str(&format!(
        "{:<name_w$}  {:>10}  {:>10}  {:>10}  {:>10}  {:>7}  {:>7}  {:>7}\n",
        "Sequence", "TP", "TN", "FP", "FN", "Acc", "F1", "MCC"
    ));
    for (name, r) in rows {
        s.push_str(&format!(
            "{:<name_w$}  {:>10}  {:>10}  {:>10}  {:>10}  {:>7.4}  {:>7.4}  {:>7.4}\n",
            name, r.tp, r.tn, r.fp, r.fn_, r.acc, r.f1, r.mcc
        ));
    }
    s
}

/// Writes the JSON report (keyed by sequence name, sorted) and a `.txt`
/// table next to it. Only the table carries the timestamp.
pub fn emit_report(rows: &BTreeMap<String, ReportRow>, json_path: &Path, generated_at: &str) -> Result<PathBuf> {
    let mut json = serde_json::to_string_pretty(rows)?;
    json.push('\n');
    std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
    let table_path = json_path.with_extension("txt");
    let mut f = std::fs::File::create(&table_path).map_err(|e| Error::io(&table_path, e))?;
    f.write_all(render_table(rows, generated_at).as_bytes())
        .map_err(|e| Error::io(&table_path, e))?;
    Ok(table_path)
}
