//! Command-line contract: exit codes and the calibration round trip.

use std::process::Command;

use thermal_slam::calib::read_calibration;

use thermal_slam::imgproc::ThermalImage;
use thermal_slam::synth::{generate_dataset, SceneConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_thermal-slam"))
}

#[test]
fn exit_code_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["run"])
        .arg(dir.path())
        .arg("-o")
        .arg(dir.path().join("out"))
        .args(["--set", "no_such_key=1"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2), "config errors exit with 2");
}

#[test]
fn exit_code_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["run"])
        .arg(dir.path())
        .arg("-o")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3), "missing dataset exits with 3");
}

#[test]
fn exit_code_tracking_lost() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig {
        frames: 3,
        width: 160,
        height: 128,
        azimuth_steps: 360,
        ..SceneConfig::default()
    };
    generate_dataset(&cfg, dir.path()).unwrap();
    // blank the last image so the residuals blow through the rms gate
    let mut images: Vec<_> = std::fs::read_dir(dir.path().join("images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    images.sort();
    let last = images.last().unwrap();
    ThermalImage::constant(160, 128, 0, 0)
        .unwrap()
        .write_pgm(last)
        .unwrap();

    let out = dir.path().join("out");
    let status = bin()
        .args(["run"])
        .arg(dir.path())
        .arg("-o")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4), "tracking loss exits with 4");
    // partial outputs with the last good pose are still written
    assert!(out.join("trajectory.txt").exists());
}

#[test]
fn calibrate_subcommand_recovers_the_extrinsic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig {
        preset: "calib-room".into(),
        boards: 20,
        azimuth_steps: 720,
        seed: 31,
        ..SceneConfig::default()
    };
    generate_dataset(&cfg, dir.path()).unwrap();

    let output = dir.path().join("calibrated.txt");
    let status = bin()
        .args(["calibrate"])
        .arg(dir.path())
        .arg("-o")
        .arg(&output)
        .status()
        .unwrap();
    assert!(status.success());

    let (estimated, _) = read_calibration(&output).unwrap();
    let (truth, _) = read_calibration(&dir.path().join("calib.txt")).unwrap();
    let rot_err = (estimated.rotation - truth.rotation).norm();
    let trans_err = (estimated.translation - truth.translation).norm();
    assert!(rot_err < 1e-4, "rotation error {rot_err}");
    assert!(trans_err < 1e-4, "translation error {trans_err} m");

    // the initial guess shipped with the dataset is visibly worse
    let (initial, _) = read_calibration(&dir.path().join("calib_initial.txt")).unwrap();
    assert!((initial.translation - truth.translation).norm() > 10.0 * trans_err.max(1e-6));
}

#[test]
fn eval_subcommand_reports_zero_for_identical_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig {
        frames: 5,
        width: 96,
        height: 80,
        azimuth_steps: 90,
        ..SceneConfig::default()
    };
    generate_dataset(&cfg, dir.path()).unwrap();
    let gt = dir.path().join("groundtruth.txt");
    let output = bin()
        .args(["eval"])
        .arg(&gt)
        .arg(&gt)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("ate_rmse_m: 0.000000"), "{stdout}");
}
