use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::Vector3;
use serde::Deserialize;

use pose6d::geometry::{CameraIntrinsics, ObjectModel, Pose, Quaternion};
use pose6d::harness::{evaluate, train, Dataset, EvalOptions, KeyValues, LogRow, PoseEstimator, SceneConfig, TrainConfig};
use pose6d::marn::{refine_trace_to_jsonl, FlowSource, Variant};
use pose6d::renderer::io::{read_ppm, write_ppm};
use pose6d::renderer::rasterize;
use pose6d::tensornet::Checkpoint;
use pose6d::Error;

#[derive(Parser)]
#[command(name = "pose6d", version, about = "6D object pose estimation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train the proposal and refinement networks.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log, CSV. Defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        iters: usize,
        /// Refinement variant: none, v1, v2, v3 or v4.
        #[arg(long, default_value = "none")]
        ablation: String,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Refine one pose estimate; prints one JSON line per iteration.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long, default_value_t = 1)]
        iters: usize,
        #[arg(long, default_value = "none")]
        ablation: String,
        /// Ground-truth pose; required by oracle-flow networks.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = 130.0)]
        focal: f64,
    },
    /// Render a model at a pose.
    Render {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 104)]
        size: usize,
        #[arg(long, default_value_t = 130.0)]
        focal: f64,
    },
}

#[derive(Deserialize)]
struct PoseFile {
    quat: [f64; 4],
    t: [f64; 3],
}

fn read_pose(path: &Path) -> pose6d::Result<Pose> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let p: PoseFile = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Pose::new(Quaternion::from_array(p.quat), Vector3::from(p.t))
}

fn read_model(path: &Path) -> pose6d::Result<ObjectModel> {
    ObjectModel::load_obj(path, 0).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_estimator(path: &Path) -> pose6d::Result<PoseEstimator> {
    let ck = Checkpoint::load(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    PoseEstimator::from_checkpoint(&ck)
}

fn ablation(s: &str) -> pose6d::Result<Option<Variant>> {
    match s {
        "none" => Ok(None),
        v => v.parse().map(Some),
    }
}

fn square_camera(size: usize, focal: f64) -> pose6d::Result<CameraIntrinsics> {
    let c = size as f64 / 2.0;
    CameraIntrinsics::new(focal, focal, c, c, size, size)
}

fn run(cmd: Command) -> pose6d::Result<()> {
    match cmd {
        Command::Gen { config, out, count } => {
            let cfg = SceneConfig::from_kv(&KeyValues::load(&config)?)?;
            let data = Dataset::generate(&cfg, count)?;
            data.save(&out)?;
            log::info!("wrote {count} scenes to {}", out.display());
        }
        Command::Train { config, data, out, log } => {
            let cfg = TrainConfig::from_kv(&KeyValues::load(&config)?)?;
            let data = Dataset::load(&data)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log.csv");
                p.into()
            });
            let mut log_file = std::io::BufWriter::new(fs::File::create(&log_path)?);
            writeln!(log_file, "{}", LogRow::CSV_HEADER)?;
            let outcome = train(&cfg, &data, |row| {
                writeln!(log_file, "{}", row.to_csv())?;
                Ok(())
            });
            log_file.flush()?;
            let outcome = outcome?;
            outcome.estimator.to_checkpoint()?.save(&out)?;
            if let Some(last) = outcome.log.last() {
                log::info!("final loss {}", last.total);
            }
        }
        Command::Eval { ckpt, data, iters, ablation: a, report } => {
            let est = load_estimator(&ckpt)?;
            let data = Dataset::load(&data)?;
            let opts = EvalOptions { iterations: iters, variant: ablation(&a)?, ..Default::default() };
            let outcome = evaluate(&data, &est, &opts)?;
            print!("{}", outcome.report.to_table());
            if outcome.missed > 0 {
                log::warn!("{} objects had no detection", outcome.missed);
            }
            if let Some(path) = report {
                fs::write(path, outcome.report.to_json()?)?;
            }
        }
        Command::Refine { ckpt, image, model, pose, iters, ablation: a, gt, focal } => {
            let est = load_estimator(&ckpt)?;
            let marn = est
                .marn(ablation(&a)?)?
                .ok_or_else(|| Error::Config("checkpoint has no refinement network".into()))?;
            let image = read_ppm(&image).map_err(|e| Error::Data(format!("{}: {e}", image.display())))?;
            if image.width != image.height {
                return Err(Error::Data("refine expects a square image".into()));
            }
            let model = read_model(&model)?;
            let start = read_pose(&pose)?;
            let gt = gt.as_deref().map(read_pose).transpose()?;
            if marn.config.flow == FlowSource::Oracle && marn.config.variant.uses_flow() && gt.is_none() {
                return Err(Error::Config("this network uses oracle flow and needs --gt".into()));
            }
            let k = square_camera(image.width, focal)?;
            let r = marn.refine(&start, &image, &model, &k, iters, gt.as_ref())?;
            print!("{}", refine_trace_to_jsonl(&r.records)?);
        }
        Command::Render { model, pose, out, size, focal } => {
            let model = read_model(&model)?;
            let pose = read_pose(&pose)?;
            let k = square_camera(size, focal)?;
            write_ppm(&out, &rasterize(&model, &pose, &k).rgb)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Divergence(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
