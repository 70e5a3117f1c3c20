use std::path::{Path, PathBuf};

use pluvio::ingest::{FrameSource, RawMeta, RawSequenceWriter};
use pluvio::pipeline::{grid_search, process_video, Detector, DetectionSeries, GridSpec, PipelineConfig, Snippet, SnippetTag, Stage};
use pluvio::synthrain::{frame_streaks, generate_sequence, render_background, render_frame, RainSpec, SceneSpec};
use pluvio::temporal::Decision;
use pluvio::Error;

fn small_scene(frames: u64) -> SceneSpec {
    SceneSpec {
        width: 120,
        height: 90,
        noise_std: 1.0,
        frames,
        ..SceneSpec::default()
    }
}

fn quick(warmup: u64) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.mog.warmup_frames = warmup;
    c
}

fn synth(dir: &Path, name: &str, scene: &SceneSpec, rain: &RainSpec, seed: u64) -> PathBuf {
    generate_sequence(scene, rain, seed, &dir.join(name)).unwrap().raw
}

#[test]
fn rain_frame_after_default_warm_up_is_rain() {
    let scene = SceneSpec {
        width: 160,
        height: 120,
        ..SceneSpec::default()
    };
    let rain = RainSpec {
        start_frame: 500,
        ..RainSpec::default()
    };
    let bg = render_background(&scene, 3);
    let mut det = Detector::new(PipelineConfig::default()).unwrap();
    for t in 0..501u64 {
        let streaks = frame_streaks(&rain, (scene.width, scene.height), t, 3);
        let f = render_frame(&scene, &bg, &streaks, rain.boost, t, 3);
        let d = det.process_frame(&f, None).unwrap();
        if t == 0 {
            assert_eq!(d.decision, Decision::WarmUp);
        }
        if t == 500 {
            assert_eq!(d.decision, Decision::Rain, "{d:?}");
            let trace = det.last_trace();
            assert_eq!(trace.first(), Some(&Stage::MogUpdate));
            assert_eq!(trace.last(), Some(&Stage::RainDecision));
            assert!(trace.windows(2).all(|w| w[0] < w[1]));
        }
    }
}

#[test]
fn one_record_per_frame_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let rain = RainSpec {
        start_frame: 40,
        end_frame: Some(70),
        streaks_per_frame: 25.0,
        ..RainSpec::default()
    };
    let raw = synth(dir.path(), "s", &small_scene(90), &rain, 11);
    let run = || {
        let mut src = FrameSource::open(&raw, None).unwrap();
        let mut buf = Vec::new();
        let s = process_video(&quick(30), &mut src, Some(&mut buf)).unwrap();
        (s, buf)
    };
    let (a, csv_a) = run();
    let (b, csv_b) = run();
    assert_eq!(a.len(), 90);
    assert!(a.records.iter().enumerate().all(|(i, d)| d.frame == i as u64));
    assert_eq!(csv_a, csv_b);
    assert_eq!(DetectionSeries::parse_csv(std::str::from_utf8(&csv_a).unwrap()).unwrap(), a);
    assert_eq!(a, b);
    let wet = a.records[40..70].iter().filter(|d| d.is_rain()).count();
    assert!(wet >= 18, "{wet}/30 rain frames detected");
}

#[test]
fn partial_raw_frame_is_rejected_at_open() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("cut.y8");
    let meta = RawMeta {
        width: 16,
        height: 8,
        frame_rate: 25.0,
    };
    let mut w = RawSequenceWriter::create(&raw, meta).unwrap();
    for i in 0..4 {
        w.write_frame(&pluvio::ingest::Frame::filled(i, 16, 8, 30)).unwrap();
    }
    w.finish().unwrap();
    // half a frame of trailing bytes
    let mut bytes = std::fs::read(&raw).unwrap();
    bytes.extend_from_slice(&[0u8; 64]);
    std::fs::write(&raw, bytes).unwrap();

    let err = FrameSource::open(&raw, None).unwrap_err();
    assert!(matches!(err, Error::CorruptFrame { index: 4, .. }), "{err}");
}

#[test]
fn mid_stream_failure_flushes_partial_csv() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    for i in 0..6u32 {
        let path = frames.join(format!("f{i:03}.png"));
        image::GrayImage::from_fn(16, 8, |x, y| image::Luma([(x * 7 + y * 13 + i) as u8]))
            .save(&path)
            .unwrap();
        if i == 3 {
            // header intact, pixel data cut short
            let bytes = std::fs::read(&path).unwrap();
            std::fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
        }
    }
    let mut src = FrameSource::open(&frames, Some(25.0)).unwrap();
    let mut buf = Vec::new();
    let err = process_video(&quick(1), &mut src, Some(&mut buf)).unwrap_err();
    assert!(matches!(err, Error::CorruptFrame { index: 3, .. }), "{err}");
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2 + 3 + 1, "{text}");
    assert!(lines[5].starts_with("# truncated after 3 frames"), "{text}");
    assert!(DetectionSeries::parse_csv(&text).is_err());
}

fn snippets(dir: &Path) -> Vec<Snippet> {
    let rainy = RainSpec {
        streaks_per_frame: 30.0,
        ..RainSpec::default()
    };
    let dry = RainSpec {
        streaks_per_frame: 0.0,
        dry_clutter_per_frame: 2.0,
        ..RainSpec::default()
    };
    vec![
        Snippet {
            path: synth(dir, "wet_a", &small_scene(60), &rainy, 1),
            tag: SnippetTag::Rain,
        },
        Snippet {
            path: synth(dir, "dry_a", &small_scene(60), &dry, 2),
            tag: SnippetTag::Dry,
        },
        Snippet {
            path: synth(dir, "wet_b", &small_scene(60), &rainy, 3),
            tag: SnippetTag::Rain,
        },
    ]
}

fn small_grid() -> GridSpec {
    GridSpec {
        c: vec![3, 5],
        min_size: vec![4],
        max_size: vec![100, 200],
        dm: vec![0.5],
        d_c: vec![0.05, 0.19],
        pi_rain: vec![0.4, 0.99],
    }
}

#[test]
fn grid_search_matches_direct_runs_and_ranks() {
    let dir = tempfile::tempdir().unwrap();
    let snips = snippets(dir.path());
    let base = quick(30);
    let grid = small_grid();
    let res = grid_search(&base, &grid, &snips).unwrap();
    assert_eq!(res.ranked.len(), grid.len());
    for w in res.ranked.windows(2) {
        assert!(w[0].feasible >= w[1].feasible);
        if w[0].feasible == w[1].feasible {
            assert!(w[0].margin >= w[1].margin);
        }
    }
    assert!(res.ranked[0].feasible, "{:?}", res.ranked[0]);
    assert!(res.ranked.iter().any(|r| !r.feasible));

    // the cached search must agree with running the detector directly
    for r in res.ranked.iter().step_by(3) {
        let cfg = r.point.apply(&base);
        for (s, &frac) in res.snippets.iter().zip(&r.fractions) {
            let mut src = FrameSource::open(&s.path, None).unwrap();
            let direct = process_video(&cfg, &mut src, None).unwrap().rain_fraction();
            assert!((direct - frac).abs() < 1e-12, "{:?} on {}: {direct} vs {frac}", r.point, s.path.display());
        }
    }

    let mut reversed = snips.clone();
    reversed.reverse();
    assert_eq!(grid_search(&base, &grid, &reversed).unwrap(), res);

    let mut out = Vec::new();
    res.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), grid.len() + 1);
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("rank,c,min_size,max_size,dm,d_c,pi_rain,feasible,margin,dry:"));
    assert!(header.contains("dry_a") && header.contains("wet_b"));
}

#[test]
fn grid_search_preconditions() {
    let dir = tempfile::tempdir().unwrap();
    let snips = snippets(dir.path());
    let base = quick(30);
    let only_rain: Vec<Snippet> = snips.iter().filter(|s| s.tag == SnippetTag::Rain).cloned().collect();
    assert!(matches!(grid_search(&base, &small_grid(), &only_rain), Err(Error::Grid(_))));
    let mut empty = small_grid();
    empty.dm.clear();
    assert!(matches!(grid_search(&base, &empty, &snips), Err(Error::Grid(_))));
    let mut missing = snips.clone();
    missing[0].path = dir.path().join("nowhere.y8");
    assert!(grid_search(&base, &small_grid(), &missing).is_err());
}
