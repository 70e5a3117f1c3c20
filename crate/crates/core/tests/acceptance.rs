//! Acceptance gate. Runs each criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero on any failure not listed as known.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use pluvio::bgmodel::CandidateMask;
use pluvio::evaluate::{confusion, metrics, ConfusionMatrix, NoEvidencePolicy};
use pluvio::hosmix::{em_fit_default, em_step, ks_statistic, neg_log_likelihood, truncated_gaussian_cdf, Hos, MixtureParams, BINS};
use pluvio::ingest::FrameSource;
use pluvio::pipeline::{process_video, GridSpec, PipelineConfig};
use pluvio::streaks::{central_moments, connected_components, streak_geometry, Blob, Connectivity};
use pluvio::synthrain::{generate_sequence, rasterize_streak, BackgroundKind, RainSpec, SceneSpec, StreakPlacement};
use pluvio::temporal::{kalman_init, Decision, RainDecision};

type Outcome = Result<String, String>;

enum Verdict {
    Pass(String),
    Fail(String),
    /// Red, but for a documented reason that no implementation can fix.
    KnownFail(String),
}

impl From<Outcome> for Verdict {
    fn from(o: Outcome) -> Self {
        match o {
            Ok(s) => Verdict::Pass(s),
            Err(s) => Verdict::Fail(s),
        }
    }
}

const METRIC_TOL: f64 = 5e-5;

fn within(limit: Duration, t: Instant, detail: String) -> Outcome {
    let took = t.elapsed();
    if took > limit {
        Err(format!("{detail}; took {took:.2?}, limit {limit:?}"))
    } else {
        Ok(format!("{detail} ({took:.2?})"))
    }
}

/// Reference rows: label, (tp, tn, fp, fn), (acc, f1, mcc).
const REFERENCE_ROWS: [(&str, [u64; 4], [f64; 3]); 16] = [
    ("Crossing1-trn C3D-FCN", [215244, 923596, 7766, 12802], [0.9823, 0.9544, 0.9435]),
    ("Crossing1-trn C3D-Center", [202932, 920692, 10672, 25114], [0.9691, 0.9190, 0.9007]),
    ("Crossing1-trn streak-EM", [1096369, 3498967, 3915541, 719777], [0.4978, 0.3211, 0.0603]),
    ("Crossing1-trn streak-Kalman", [1119361, 3460093, 3954415, 696785], [0.4961, 0.3249, 0.0663]),
    ("Crossing1-val C3D-FCN", [30126, 208447, 7405, 27042], [0.8738, 0.6362, 0.5821]),
    ("Crossing1-val C3D-Center", [25320, 199555, 16298, 31847], [0.8237, 0.5126, 0.4159]),
    ("Crossing1-val streak-EM", [263008, 912983, 805113, 192395], [0.5411, 0.3453, 0.0887]),
    ("Crossing1-val streak-Kalman", [267253, 909237, 808859, 188150], [0.5413, 0.3490, 0.0945]),
    ("Crossing2-asphalt C3D-FCN", [0, 1069231, 0, 102717], [0.9124, 0.0000, 0.0000]),
    ("Crossing2-asphalt C3D-Center", [245, 1039578, 40409, 102474], [0.8792, 0.0034, -0.0837]),
    ("Crossing2-asphalt streak-EM", [224853, 6335804, 2257136, 591994], [0.6972, 0.1363, 0.0080]),
    ("Crossing2-asphalt streak-Kalman", [234181, 6264711, 2328229, 582666], [0.6907, 0.1386, 0.0010]),
    ("Crossing2-brick C3D-FCN", [72619, 729561, 350381, 30095], [0.6783, 0.2763, 0.2248]),
    ("Crossing2-brick C3D-Center", [75690, 720369, 359557, 27024], [0.6731, 0.2814, 0.2359]),
    ("Crossing2-brick streak-EM", [281084, 5837499, 2755441, 535763], [0.6502, 0.1459, 0.0141]),
    ("Crossing2-brick streak-Kalman", [290583, 5762519, 2830421, 526264], [0.6433, 0.1476, 0.0158]),
];

/// Rows whose reference MCC disagrees with their own counts. Any other
/// mismatch, or a different value on these rows, still fails the gate.
const INCONSISTENT_MCC: [&str; 2] = ["Crossing2-asphalt C3D-Center", "Crossing2-asphalt streak-Kalman"];

/// Matthews correlation recomputed with exact integer numerator.
fn mcc_oracle([tp, tn, fp, fn_]: [u64; 4]) -> f64 {
    let sums = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if sums.contains(&0) {
        return 0.0;
    }
    let num = tp as i128 * tn as i128 - fp as i128 * fn_ as i128;
    num as f64 / sums.iter().map(|&s| s as f64).product::<f64>().sqrt()
}

fn c1_metric_golden() -> Verdict {
    let t = Instant::now();
    let mut bad = Vec::new();
    let mut known = Vec::new();
    for &(label, [tp, tn, fp, fn_], [acc, f1, mcc]) in &REFERENCE_ROWS {
        let m = match metrics(&ConfusionMatrix { tp, tn, fp, fn_ }) {
            Ok(m) => m,
            Err(e) => return Verdict::Fail(format!("{label}: {e}")),
        };
        let acc_ok = (m.accuracy - acc).abs() <= METRIC_TOL;
        let f1_ok = (m.f1 - f1).abs() <= METRIC_TOL;
        let mcc_ok = (m.mcc - mcc).abs() <= METRIC_TOL;
        if acc_ok && f1_ok && mcc_ok {
            continue;
        }
        let explained = acc_ok
            && f1_ok
            && INCONSISTENT_MCC.contains(&label)
            && (m.mcc - mcc_oracle([tp, tn, fp, fn_])).abs() <= 1e-12;
        let note = format!("{label}: mcc {:.5} vs reference {mcc:.4}", m.mcc);
        if explained {
            known.push(note);
        } else {
            bad.push(format!("{note}, acc {:.5}, f1 {:.5}", m.accuracy, m.f1));
        }
    }
    let zero = metrics(&ConfusionMatrix { tp: 0, tn: 1069231, fp: 0, fn_: 102717 }).unwrap();
    if zero.mcc != 0.0 {
        bad.push(format!("zero-denominator row gave mcc {}", zero.mcc));
    }
    if !bad.is_empty() {
        return Verdict::Fail(bad.join("; "));
    }
    let summary = format!("{}/16 rows within 5e-5, zero-denominator mcc = 0", 16 - known.len());
    match within(Duration::from_secs(1), t, summary) {
        Err(e) => Verdict::Fail(e),
        Ok(s) if known.is_empty() => Verdict::Pass(s),
        Ok(s) => Verdict::KnownFail(format!(
            "{s}; reference MCC contradicts the reference counts (acc and f1 match): {}",
            known.join("; ")
        )),
    }
}

fn c2_grid_cardinality() -> Outcome {
    let t = Instant::now();
    let g = GridSpec::standard();
    let n = g.points().count();
    if n != 9600 || g.len() != 9600 {
        return Err(format!("enumerated {n} points"));
    }
    within(Duration::from_secs(1), t, format!("{n} configurations"))
}

fn c3_synthetic_detection() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scene = SceneSpec {
        width: 320,
        height: 240,
        background: BackgroundKind::TexturedNoise,
        noise_std: 2.0,
        frames: 900,
        ..SceneSpec::default()
    };
    let rain = RainSpec {
        streaks_per_frame: 60.0,
        orientation_mean: 85.0,
        orientation_std: 4.0,
        boost: 40,
        clutter_fraction: 0.1,
        start_frame: 500,
        end_frame: Some(700),
        dry_clutter_per_frame: 3.0,
        ..RainSpec::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let series = pool
        .install(|| -> pluvio::Result<_> {
            let out = generate_sequence(&scene, &rain, 20251017, dir.path())?;
            let mut source = FrameSource::open(&out.raw, None)?;
            process_video(&PipelineConfig::default(), &mut source, None)
        })
        .map_err(|e| e.to_string())?;
    if series.len() != 900 {
        return Err(format!("{} records for 900 frames", series.len()));
    }
    let warm = series.records[..500].iter().all(|d| d.decision == Decision::WarmUp);
    let frac = |r: &[RainDecision]| r.iter().filter(|d| d.is_rain()).count() as f64 / r.len() as f64;
    let wet = frac(&series.records[500..700]);
    let dry = frac(&series.records[700..]);
    let detail = format!("rain frames flagged {:.1}%, dry frames flagged {:.1}%", 100.0 * wet, 100.0 * dry);
    if !warm || wet < 0.60 || dry > 0.40 {
        return Err(format!("{detail}, warm-up respected: {warm}"));
    }
    within(Duration::from_secs(300), t, detail)
}

/// Circular distance on the 180-degree orientation axis.
fn axis_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

fn binned_samples(mu: f64, sigma: f64, pi: f64, n: usize, seed: u64) -> Hos {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(mu, sigma).unwrap();
    let n_gauss = (pi * n as f64).round() as usize;
    let mut bins = [0.0; BINS];
    for i in 0..n {
        let x: f64 = if i < n_gauss {
            normal.sample(&mut rng)
        } else {
            rng.random_range(0.0..180.0)
        };
        let b = (x.round() as i64).rem_euclid(BINS as i64) as usize;
        bins[b] += 1.0;
    }
    Hos::from_bins(bins).unwrap()
}

fn c4_em_recovery() -> Outcome {
    let t = Instant::now();
    let seeds = 0..4u64;
    let mut trials = 0;
    let mut ok = 0;
    let mut misses = Vec::new();
    for mu in [45.0, 85.0, 135.0] {
        for sigma in [2.0, 5.0, 10.0] {
            for pi in [0.4, 0.7, 1.0] {
                for seed in seeds.clone() {
                    trials += 1;
                    let hos = binned_samples(mu, sigma, pi, 10_000, seed * 1000 + trials);
                    let fit = em_fit_default(&hos, 100, 1e-4).map_err(|e| e.to_string())?.params;
                    let good = axis_diff(fit.mu, mu) <= 2.0
                        && (fit.sigma - sigma).abs() <= 0.2 * sigma
                        && (fit.pi - pi).abs() <= 0.1;
                    if good {
                        ok += 1;
                    } else if misses.len() < 3 {
                        misses.push(format!("({mu},{sigma},{pi}) -> ({:.2},{:.2},{:.3})", fit.mu, fit.sigma, fit.pi));
                    }
                }
            }
        }
    }
    let rate = ok as f64 / trials as f64;
    let detail = format!("{ok}/{trials} trials recovered ({:.1}%)", 100.0 * rate);
    if rate < 0.90 {
        return Err(format!("{detail}; e.g. {}", misses.join(", ")));
    }
    within(Duration::from_secs(30), t, detail)
}

fn flood_fill_oracle(mask: &CandidateMask, eight: bool) -> Vec<Vec<(u32, u32)>> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let mut seen = vec![false; (w * h) as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if seen[i] || !mask.get(x as u32, y as u32) {
                continue;
            }
            seen[i] = true;
            let mut stack = vec![(x, y)];
            let mut comp = Vec::new();
            while let Some((cx, cy)) = stack.pop() {
                comp.push((cx as u32, cy as u32));
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                            continue;
                        }
                        let (nx, ny) = (cx + dx, cy + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let j = (ny * w + nx) as usize;
                        if !seen[j] && mask.get(nx as u32, ny as u32) {
                            seen[j] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            comp.sort_by_key(|&(x, y)| (y, x));
            out.push(comp);
        }
    }
    out.sort();
    out
}

/// Second-order central moments straight from the definition, in exact
/// integer arithmetic: sum of (n*x - Sx)(n*y - Sy) over pixels, over n^2.
fn moment_oracle(pixels: &[(u32, u32)]) -> (f64, f64, f64) {
    let n = pixels.len() as i128;
    let sx: i128 = pixels.iter().map(|p| p.0 as i128).sum();
    let sy: i128 = pixels.iter().map(|p| p.1 as i128).sum();
    let (mut a, mut b, mut c) = (0i128, 0i128, 0i128);
    for &(x, y) in pixels {
        let dx = n * x as i128 - sx;
        let dy = n * y as i128 - sy;
        a += dx * dx;
        b += dx * dy;
        c += dy * dy;
    }
    let n2 = (n * n) as f64;
    (a as f64 / n2, b as f64 / n2, c as f64 / n2)
}

fn ks_scan_oracle(hos: &Hos, p: &MixtureParams) -> f64 {
    let bins = hos.bins();
    let total: f64 = bins.iter().sum();
    let mut best: f64 = 0.0;
    for b in 0..BINS {
        let mut below = 0.0;
        for &h in &bins[..=b] {
            below += h;
        }
        let gap = (below / total - truncated_gaussian_cdf(b as f64 + 0.5, p.mu, p.sigma)).abs();
        if gap > best {
            best = gap;
        }
    }
    best.min(1.0)
}

fn c5_oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut blobs_checked = 0;
    for trial in 0..100 {
        let density = rng.random_range(0.05..0.6);
        let bits: Vec<bool> = (0..64 * 64).map(|_| rng.random_bool(density)).collect();
        let mask = CandidateMask::new(trial, 64, 64, bits);
        for (conn, eight) in [(Connectivity::Eight, true), (Connectivity::Four, false)] {
            let blobs = connected_components(&mask, conn);
            let mut got: Vec<Vec<(u32, u32)>> = blobs.iter().map(|b| b.pixels().to_vec()).collect();
            got.sort();
            if got != flood_fill_oracle(&mask, eight) {
                return Err(format!("components differ on mask {trial} ({conn}-connectivity)"));
            }
            for b in &blobs {
                let m = central_moments(b);
                let (m20, m11, m02) = moment_oracle(b.pixels());
                if (m.m20, m.m11, m.m02) != (m20, m11, m02) {
                    return Err(format!("moments differ on mask {trial}: {m:?} vs ({m20},{m11},{m02})"));
                }
                blobs_checked += 1;
            }
        }
    }

    for trial in 0..100 {
        let mut bins = [0.0; BINS];
        for b in bins.iter_mut() {
            *b = rng.random_range(0.0..1.0) * if rng.random_bool(0.3) { 10.0 } else { 1.0 };
        }
        let hos = Hos::from_bins(bins).unwrap();
        let p = MixtureParams {
            mu: rng.random_range(0.0..180.0),
            sigma: rng.random_range(0.5..40.0),
            pi: rng.random_range(0.0..1.0),
        };
        let d = ks_statistic(&hos, &p).unwrap();
        let oracle = ks_scan_oracle(&hos, &p);
        if d != oracle {
            return Err(format!("ks differs on histogram {trial}: {d} vs {oracle}"));
        }
    }

    let codes = [Decision::Rain, Decision::NoRain, Decision::WarmUp, Decision::NoEvidence];
    for trial in 0..100 {
        let preds: Vec<RainDecision> = (0..1000)
            .map(|f| RainDecision::bare(f, codes[rng.random_range(0..4)]))
            .collect();
        let truth: Vec<bool> = (0..1000).map(|_| rng.random_bool(0.4)).collect();
        for policy in [NoEvidencePolicy::Exclude, NoEvidencePolicy::NoRain] {
            let mut want = [0u64; 4];
            for (p, &t) in preds.iter().zip(&truth) {
                let said = match p.decision {
                    Decision::WarmUp => continue,
                    Decision::NoEvidence if policy == NoEvidencePolicy::Exclude => continue,
                    Decision::Rain => true,
                    _ => false,
                };
                want[match (said, t) {
                    (true, true) => 0,
                    (false, false) => 1,
                    (true, false) => 2,
                    (false, true) => 3,
                }] += 1;
            }
            let got = confusion(&preds, &truth, policy).map_err(|e| e.to_string())?.matrix;
            if [got.tp, got.tn, got.fp, got.fn_] != want {
                return Err(format!("confusion differs on trace {trial} ({policy})"));
            }
        }
    }
    within(
        Duration::from_secs(30),
        t,
        format!("200 labelings, {blobs_checked} blobs, 100 KS scans, 200 confusion traces exact"),
    )
}

fn c6_geometry() -> Outcome {
    let mut worst: f64 = 0.0;
    for theta in [0.0, 30.0, 45.0, 60.0, 90.0, 120.0, 150.0] {
        let s = StreakPlacement {
            x: 40.0,
            y: 40.0,
            theta,
            length: 31,
            width: 1,
            clutter: false,
        };
        let blob = Blob::from_pixels(rasterize_streak(&s, (80, 80)));
        let g = streak_geometry(&central_moments(&blob), 0.5).map_err(|e| format!("{theta}: {e}"))?;
        let err = axis_diff(g.theta, theta);
        if err > 2.0 {
            return Err(format!("line at {theta} deg measured {:.3}", g.theta));
        }
        worst = worst.max(err);
    }
    Ok(format!("7 orientations, worst error {worst:.3} deg"))
}

fn c7_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut steps = 0;
    for trial in 0..100 {
        let mut bins = [0.0; BINS];
        let centre = rng.random_range(0.0..180.0);
        let spread = rng.random_range(1.0..30.0);
        let peak = rng.random_range(0.0..50.0);
        for (b, v) in bins.iter_mut().enumerate() {
            let d = axis_diff(b as f64, centre);
            *v = rng.random_range(0.0..2.0) + peak * (-0.5 * (d / spread).powi(2)).exp();
        }
        let hos = Hos::from_bins(bins).unwrap();
        let mut p = MixtureParams::initial_guess(&hos).unwrap();
        let mut nll = neg_log_likelihood(&hos, &p);
        for _ in 0..100 {
            let next = em_step(&hos, &p);
            let v = neg_log_likelihood(&hos, &next);
            if v > nll + 1e-9 * nll.abs().max(1.0) {
                return Err(format!("histogram {trial}: nll rose from {nll} to {v}"));
            }
            p = next;
            nll = v;
            steps += 1;
        }
    }

    let init = MixtureParams { mu: 85.0, sigma: 4.0, pi: 0.6 };
    let mut k = kalman_init(0.01, 0.1, init).map_err(|e| e.to_string())?;
    let mut updates = 0;
    for _ in 0..500 {
        k.predict();
        let prior = k.p.trace();
        let z = MixtureParams {
            mu: rng.random_range(60.0..110.0),
            sigma: rng.random_range(0.5..20.0),
            pi: rng.random_range(0.0..1.0),
        };
        k.update(&z);
        if k.p.trace() > prior + 1e-12 {
            return Err(format!("posterior trace {} above prior {prior}", k.p.trace()));
        }
        updates += 1;
    }

    let mut k = kalman_init(0.01, 0.1, init).unwrap();
    k.p = Matrix3::identity();
    k.predict();
    let gain = k.update(&init);
    let want = 1.01 / 1.11;
    for i in 0..3 {
        if (gain[(i, i)] - want).abs() > 1e-12 {
            return Err(format!("gain[{i}] = {}, want {want}", gain[(i, i)]));
        }
    }
    Ok(format!("{steps} EM steps monotone, {updates} Kalman updates shrink trace, gain = 1.01/1.11"))
}

fn pluvio(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pluvio"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "pluvio {} exited {:?}: {}",
            args[0],
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn cli_run(dir: &Path) -> Result<(Vec<u8>, Vec<u8>, String), String> {
    std::fs::write(
        dir.join("scene.cfg"),
        "scene.width = 160\nscene.height = 120\nscene.background = textured_noise\nscene.noise_std = 2\nscene.frames = 120\n",
    )
    .map_err(|e| e.to_string())?;
    std::fs::write(
        dir.join("rain.cfg"),
        "rain.start_frame = 60\nrain.end_frame = 90\nrain.streaks_per_frame = 30\nrain.dry_clutter_per_frame = 2\n",
    )
    .map_err(|e| e.to_string())?;
    std::fs::write(dir.join("detect.cfg"), "mog.warmup_frames = 50\n").map_err(|e| e.to_string())?;
    pluvio(&["synth", "--scene", "scene.cfg", "--rain", "rain.cfg", "--seed", "99", "--out", "seq"], dir)?;
    pluvio(&["detect", "--config", "detect.cfg", "--input", "seq/sequence.y8", "--out", "det.csv"], dir)?;
    pluvio(
        &["eval", "--detections", "det.csv", "--labels", "seq/frame_labels.csv", "--frame-rate", "30", "--out", "report.json"],
        dir,
    )?;
    let read = |p: &str| std::fs::read(dir.join(p)).map_err(|e| format!("{p}: {e}"));
    let table = String::from_utf8(read("report.txt")?).map_err(|e| e.to_string())?;
    let table: String = table.lines().filter(|l| !l.starts_with("# generated")).collect::<Vec<_>>().join("\n");
    Ok((read("det.csv")?, read("report.json")?, table))
}

fn c8_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = cli_run(a.path())?;
    let second = cli_run(b.path())?;
    if first.0 != second.0 {
        return Err("detection CSVs differ".into());
    }
    if first.1 != second.1 {
        return Err("JSON reports differ".into());
    }
    if first.2 != second.2 {
        return Err("report tables differ outside the timestamp".into());
    }
    let records = first.0.iter().filter(|&&c| c == b'\n').count() - 2;
    Ok(format!("synth/detect/eval twice: {records} detection rows and report byte-identical"))
}

fn main() {
    type Check = fn() -> Verdict;
    let criteria: [(&str, Check); 8] = [
        ("metric golden values", c1_metric_golden),
        ("grid cardinality", || c2_grid_cardinality().into()),
        ("synthetic detection bands", || c3_synthetic_detection().into()),
        ("EM recovery", || c4_em_recovery().into()),
        ("oracle equivalence", || c5_oracle_equivalence().into()),
        ("streak geometry", || c6_geometry().into()),
        ("numerical properties", || c7_numerics().into()),
        ("end-to-end determinism", || c8_determinism().into()),
    ];
    let (mut passed, mut failed, mut known) = (0, 0, 0);
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Verdict::Pass(detail) => {
                passed += 1;
                println!("criterion {} {name}: PASS  {detail}", i + 1);
            }
            Verdict::Fail(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL  {why}", i + 1);
            }
            Verdict::KnownFail(why) => {
                known += 1;
                println!("criterion {} {name}: FAIL (known, see README)  {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {passed}/{} criteria passed, {known} known failure(s), {failed} unexpected failure(s)",
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
