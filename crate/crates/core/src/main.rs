//! Command-line driver: dataset generation, calibration, the SLAM pipeline,
//! and trajectory evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use thermal_slam::config::PipelineConfig;
use thermal_slam::dataset::DatasetManifest;
use thermal_slam::error::Error;
use thermal_slam::synth::SceneConfig;

const EXIT_CONFIG_ERROR: u8 = 2;
const EXIT_DATA_ERROR: u8 = 3;
const EXIT_TRACKING_LOST: u8 = 4;

#[derive(Parser)]
#[command(
    name = "thermal-slam",
    about = "Direct thermal-infrared SLAM with sparse LiDAR depth",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the camera-to-LiDAR extrinsic from chessboard observations.
    Calibrate {
        /// Dataset root (images/ with corner sidecars, clouds/, board.txt).
        dataset: PathBuf,
        /// Output calibration file.
        #[arg(short, long)]
        output: PathBuf,
        /// Pipeline configuration file.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Inline overrides, e.g. --set ransac_iterations=1000.
        #[arg(long, value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the SLAM pipeline over a dataset.
    Run {
        /// Dataset root (images/, clouds/, calib.txt).
        dataset: PathBuf,
        /// Pipeline configuration file.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(short, long)]
        output: PathBuf,
        /// Force fully sequential execution (the pipeline is sequential by
        /// construction; the flag pins it for reproducibility runs).
        #[arg(long)]
        deterministic: bool,
        /// Inline overrides, e.g. --set window_size=3.
        #[arg(long, value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Generate a synthetic dataset from a scene configuration.
    Synth {
        /// Scene configuration file (key=value).
        scene_config: PathBuf,
        /// Output dataset directory.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Absolute trajectory error between an estimate and ground truth.
    Eval {
        /// Estimated trajectory (TUM format).
        estimate: PathBuf,
        /// Ground-truth trajectory (TUM format, optional validity column).
        groundtruth: PathBuf,
        /// Rigidly align the estimate to the ground truth first.
        #[arg(long)]
        align: bool,
        /// Also compensate scale (monocular-baseline protocol).
        #[arg(long)]
        scale: bool,
    },
}

fn load_config(path: &Option<PathBuf>, overrides: &[String], deterministic: bool) -> Result<PipelineConfig, Error> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for item in overrides {
        let Some((key, value)) = item.split_once('=') else {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got {item:?}")));
        };
        cfg.set(key.trim(), value.trim())?;
    }
    if deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Calibrate {
            dataset,
            output,
            config,
            set,
        } => {
            let cfg = load_config(&config, &set, false)?;
            let manifest = DatasetManifest::load(&dataset, cfg.sync_tolerance_ms)?;
            for w in &manifest.warnings {
                eprintln!("warning: {w}");
            }
            let (outcome, k) = thermal_slam::pipeline::calibrate_dataset(&manifest, &cfg)?;
            thermal_slam::calib::write_calibration(&output, &outcome.extrinsic, &k)?;
            println!(
                "calibrated from {} plane pairs ({} observations rejected)",
                outcome.pairs.len(),
                outcome.rejected
            );
            println!(
                "refinement: cost {:.3e} -> {:.3e} in {} iterations",
                outcome.refine.initial_cost, outcome.refine.final_cost, outcome.refine.iterations
            );
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Run {
            dataset,
            config,
            output,
            deterministic,
            set,
        } => {
            let cfg = load_config(&config, &set, deterministic)?;
            let manifest = DatasetManifest::load(&dataset, cfg.sync_tolerance_ms)?;
            for w in &manifest.warnings {
                eprintln!("warning: {w}");
            }
            let summary = thermal_slam::pipeline::run_pipeline(&manifest, &cfg, &output)?;
            println!(
                "{} frames, {} keyframes, {} loop(s) detected, {} accepted",
                summary.frames, summary.keyframes, summary.loops_detected, summary.loops_accepted
            );
            println!("trajectory: {}", summary.trajectory_path.display());
            println!("map: {}", summary.map_path.display());
            Ok(())
        }
        Command::Synth {
            scene_config,
            output,
        } => {
            let text = std::fs::read_to_string(&scene_config)
                .map_err(|e| Error::data(&scene_config, format!("cannot read: {e}")))?;
            let cfg = SceneConfig::parse(&text)?;
            let out = thermal_slam::synth::generate_dataset(&cfg, &output)?;
            println!(
                "generated {} frames of preset {:?} in {}",
                out.frames,
                cfg.preset,
                out.root.display()
            );
            Ok(())
        }
        Command::Eval {
            estimate,
            groundtruth,
            align,
            scale,
        } => {
            let est = thermal_slam::geom::read_tum(&estimate)?;
            let gt = thermal_slam::geom::read_tum(&groundtruth)?;
            let result = thermal_slam::evaluate::evaluate_ate(&est, &gt, align, scale)?;
            println!("ate_rmse_m: {:.6}", result.rmse);
            println!("ate_mean_m: {:.6}", result.mean);
            println!("ate_max_m: {:.6}", result.max);
            println!("samples: {}", result.samples);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => EXIT_CONFIG_ERROR,
                Error::TrackingLost { .. } => EXIT_TRACKING_LOST,
                Error::Data { .. }
                | Error::InvalidImage(_)
                | Error::InvalidIntrinsics(_)
                | Error::InvalidVocabulary(_) => EXIT_DATA_ERROR,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
