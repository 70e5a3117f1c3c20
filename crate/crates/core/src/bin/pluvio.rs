use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pluvio::evaluate::{confusion, emit_report, metrics, read_labels, GaugeSource, NoEvidencePolicy, ReportRow};
use pluvio::ingest::FrameSource;
use pluvio::pipeline::{grid_search, process_video, read_manifest, DetectionSeries, GridSpec, PipelineConfig};
use pluvio::synthrain::{generate_sequence, RainSpec, SceneSpec};
use pluvio::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(name = "pluvio", version, about = "Rain detection from streak orientation statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic rain sequence with ground truth labels.
    Synth {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        rain: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the detector over a frame directory or raw sequence.
    Detect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `input.frame_rate`.
        #[arg(long)]
        frame_rate: Option<f64>,
    },
    /// Score a detection CSV against gauge labels.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        frame_rate: f64,
        #[arg(long)]
        out: PathBuf,
        /// Row name in the report; defaults to the detection file stem.
        #[arg(long)]
        name: Option<String>,
        /// exclude | no_rain
        #[arg(long, default_value = "exclude")]
        no_evidence: NoEvidencePolicy,
    },
    /// Evaluate a parameter grid on tagged snippets.
    Gridsearch {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        snippets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create(path: &Path) -> pluvio::Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn run(cli: Cli) -> pluvio::Result<()> {
    match cli.command {
        Command::Synth { scene, rain, seed, out } => {
            let scene = SceneSpec::load(&scene)?;
            let rain = RainSpec::load(&rain)?;
            let o = generate_sequence(&scene, &rain, seed, &out)?;
            log::info!("wrote {}", o.raw.display());
        }
        Command::Detect { config, input, out, frame_rate } => {
            let mut cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            if frame_rate.is_some() {
                cfg.frame_rate = frame_rate;
                cfg.validate()?;
            }
            let mut source = FrameSource::open(&input, cfg.frame_rate)?.with_channel(cfg.channel);
            let mut w = create(&out)?;
            let series = process_video(&cfg, &mut source, Some(&mut w))?;
            log::info!("{} frames, rain fraction {:.3}", series.len(), series.rain_fraction());
        }
        Command::Eval { detections, labels, frame_rate, out, name, no_evidence } => {
            let series = DetectionSeries::read_csv(&detections)?;
            let truth = read_labels(&labels, GaugeSource::default())?.per_frame(frame_rate, series.len())?;
            let c = confusion(&series.records, &truth, no_evidence)?;
            let m = metrics(&c.matrix)?;
            let name = name.unwrap_or_else(|| {
                detections
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "sequence".into())
            });
            let mut rows = BTreeMap::new();
            rows.insert(name, ReportRow::new(&c, &m, &series.config_hash));
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let table = emit_report(&rows, &out, &format!("unix {now}"))?;
            print!("{}", std::fs::read_to_string(&table).map_err(|e| Error::Io { path: table, source: e })?);
        }
        Command::Gridsearch { grid, snippets, out } => {
            let (base, spec) = GridSpec::load(&grid)?;
            let snippets = read_manifest(&snippets)?;
            log::info!("{} grid points over {} snippets", spec.len(), snippets.len());
            let result = grid_search(&base, &spec, &snippets)?;
            result.write_csv(create(&out)?)?;
            let feasible = result.ranked.iter().filter(|r| r.feasible).count();
            println!("{feasible} of {} configurations feasible", result.ranked.len());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_usage() => EXIT_USAGE,
        Error::Json(_) => EXIT_INTERNAL,
        Error::AtFrame { source, .. } => exit_code(source),
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}
