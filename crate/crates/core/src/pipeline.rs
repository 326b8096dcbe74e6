//! End-to-end drivers: the SLAM pipeline (track -> refine -> keyframe ->
//! loop closure -> pose graph -> map) and the calibration run.
//!
//! The pipeline is sequential, so two runs over the same dataset with the
//! same configuration produce byte-identical outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::calib::{self, CalibObservation, CalibrationOutcome, RansacParams};
use crate::config::PipelineConfig;
use crate::dataset::{read_cloud_csv, read_corners_csv, DatasetManifest};
use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose, TrajectoryEntry};
use crate::imgproc::{rescale_to_8bit, ThermalImage};
use crate::loop_closing::{
    align_affine, cross_validate, descriptor_ransac_init, detect_and_describe, extract_features,
    DbEntry, DescriptorBag, EdgeKind, KeyframeDatabase, PoseGraph, PoseGraphEdge, Vocabulary,
};
use crate::map::{export_ply, ExportOptions, ThermoMap};
use crate::odom::{
    refine_local, should_create_keyframe, track, Frame, Keyframe, PatchPattern,
};

#[derive(Debug)]
pub struct PipelineSummary {
    pub frames: usize,
    pub keyframes: usize,
    pub loops_detected: usize,
    pub loops_accepted: usize,
    pub trajectory_path: PathBuf,
    pub map_path: PathBuf,
}

/// A frame's pose stored relative to its reference keyframe so pose-graph
/// corrections propagate to every frame.
struct TrajectoryRecord {
    timestamp_ns: i64,
    kf_index: usize,
    rel: Pose,
}

/// Loads the vocabulary shipped with the dataset, or trains one from the
/// dataset's own images (deterministically) and saves it next to the run
/// outputs.
fn obtain_vocabulary(
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
    out_dir: &Path,
    log: &mut String,
) -> Result<Vocabulary> {
    if let Some(path) = &manifest.vocab_path {
        writeln!(log, "vocabulary: loaded {}", path.display()).expect("string write");
        return Vocabulary::load(path);
    }
    let conv = cfg.raw_to_celsius();
    let stride = (manifest.pairs.len() / 16).max(1);
    let mut corpus = Vec::new();
    for pair in manifest.pairs.iter().step_by(stride).take(20) {
        let raw = ThermalImage::read_pgm(&pair.image_path, pair.timestamp_ns)?;
        let img8 = rescale_to_8bit(&raw, cfg.rescale_t_low, cfg.rescale_t_high, &conv)?;
        let (_, descriptors) =
            detect_and_describe(&img8, cfg.fast_threshold, cfg.loop_max_features);
        if !descriptors.is_empty() {
            corpus.push(descriptors);
        }
    }
    if corpus.is_empty() {
        writeln!(log, "vocabulary: no features in the dataset; loop closure disabled")
            .expect("string write");
        // an empty single-descriptor vocabulary quantizes nothing useful but
        // keeps the pipeline running; every bag will be excluded
        return Vocabulary::train(
            &[vec![crate::loop_closing::Descriptor([0u8; 32])]],
            cfg.vocab_branching,
            cfg.vocab_levels,
            cfg.seed_for("vocab"),
        );
    }
    let vocab = Vocabulary::train(
        &corpus,
        cfg.vocab_branching,
        cfg.vocab_levels,
        cfg.seed_for("vocab"),
    )?;
    let path = out_dir.join("vocab.bin");
    vocab.save(&path)?;
    writeln!(
        log,
        "vocabulary: trained on {} images ({} words), saved {}",
        corpus.len(),
        vocab.word_count(),
        path.display()
    )
    .expect("string write");
    Ok(vocab)
}

/// Runs the full SLAM pipeline over a dataset. Outputs are written even when
/// tracking is lost mid-sequence; in that case the error is returned after
/// the partial outputs (the exit code distinguishes it).
pub fn run_pipeline(
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<PipelineSummary> {
    std::fs::create_dir_all(out_dir)?;
    let mut log = String::new();
    for w in &manifest.warnings {
        writeln!(log, "warning: {w}").expect("string write");
    }

    let (extrinsic, k) = calib::read_calibration(&manifest.calib_path)?;
    let cam_from_lidar = extrinsic.inverse();
    let conv = cfg.raw_to_celsius();
    let pattern = PatchPattern::default();
    let vocab = obtain_vocabulary(manifest, cfg, out_dir, &mut log)?;

    let mut keyframes: Vec<Keyframe> = Vec::new();
    let mut graph = PoseGraph::default();
    let mut db = KeyframeDatabase::default();
    let mut map = ThermoMap::default();
    let mut trajectory: Vec<TrajectoryRecord> = Vec::new();
    let mut diag_rows =
        String::from("timestamp_ns,cost,iterations_per_level,valid_ratio,keyframe\n");
    let mut loop_rows = String::from(
        "query_ts,candidate_ts,eta,common_word_ratio,a,b,accepted,consistency\n",
    );
    let mut loops_detected = 0usize;
    let mut loops_accepted = 0usize;
    let mut lost: Option<Error> = None;

    let mut prev_frame: Option<Frame> = None;
    let mut motion_model = Pose::identity();

    for pair in &manifest.pairs {
        let raw = ThermalImage::read_pgm(&pair.image_path, pair.timestamp_ns)?;
        let cloud_lidar = read_cloud_csv(&pair.cloud_path)?;
        let cloud_cam: Vec<Vector3<f64>> = cloud_lidar
            .iter()
            .map(|p| cam_from_lidar.transform(p))
            .collect();
        let mut frame = Frame::build(raw, &cloud_cam, &k, &pattern, cfg)?;

        let Some(prev) = prev_frame.take() else {
            // first frame anchors the world
            frame.pose = Pose::identity();
            let kf_index = 0usize;
            let bag = keyframe_bag(&frame, &vocab, cfg, &mut log);
            graph.nodes.push(frame.pose);
            map.accumulate(
                kf_index as u64,
                &frame.pose,
                &cloud_cam,
                frame.pyramid.level(0),
                &k,
                &conv,
                cfg.min_depth,
            );
            if !bag.bow.is_empty() {
                db.add(DbEntry {
                    kf_id: kf_index as u64,
                    timestamp_ns: frame.timestamp_ns,
                    bow: bag.bow.clone(),
                });
            }
            trajectory.push(TrajectoryRecord {
                timestamp_ns: frame.timestamp_ns,
                kf_index,
                rel: Pose::identity(),
            });
            writeln!(
                diag_rows,
                "{},0.000000,{},1.0000,1",
                frame.timestamp_ns,
                vec!["0"; cfg.pyramid_levels].join(";")
            )
            .expect("string write");
            keyframes.push(Keyframe {
                id: kf_index as u64,
                frame: frame.clone(),
                bag,
            });
            prev_frame = Some(frame);
            continue;
        };

        let result = match track(&prev, &frame.pyramid, &k, &motion_model, cfg) {
            Ok(r) => r,
            Err(e @ Error::TrackingLost { .. }) => {
                writeln!(log, "tracking lost at {}: {e}", frame.timestamp_ns)
                    .expect("string write");
                lost = Some(e);
                break;
            }
            Err(other) => return Err(other),
        };
        motion_model = result.t_rel;
        let tracked_world = prev.pose.compose(&result.t_rel.inverse());
        let window_start = keyframes.len().saturating_sub(cfg.window_size);
        let window: Vec<&Keyframe> = keyframes[window_start..].iter().collect();
        let refined = refine_local(&frame.pyramid, &tracked_world, &window, &k, cfg);
        frame.pose = refined.pose;

        let last_kf = keyframes.last().expect("first frame created a keyframe");
        let is_kf = should_create_keyframe(
            &frame.pose,
            &last_kf.frame.pose,
            result.diagnostics.valid_ratio,
            cfg,
        );
        let iter_str = result
            .diagnostics
            .iterations
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            diag_rows,
            "{},{:.6},{},{:.4},{}",
            frame.timestamp_ns,
            result.diagnostics.final_cost,
            iter_str,
            result.diagnostics.valid_ratio,
            is_kf as u8
        )
        .expect("string write");

        if !is_kf {
            let kf_index = keyframes.len() - 1;
            let kf_pose = keyframes[kf_index].frame.pose;
            trajectory.push(TrajectoryRecord {
                timestamp_ns: frame.timestamp_ns,
                kf_index,
                rel: kf_pose.relative(&frame.pose),
            });
            if cfg.map_all_frames {
                let camera_in_anchor = kf_pose.relative(&frame.pose);
                map.accumulate_anchored(
                    kf_index as u64,
                    &kf_pose,
                    &camera_in_anchor,
                    &cloud_cam,
                    frame.pyramid.level(0),
                    &k,
                    &conv,
                    cfg.min_depth,
                );
            }
            prev_frame = Some(frame);
            continue;
        }

        // ---- new keyframe ----
        let kf_index = keyframes.len();
        let bag = keyframe_bag(&frame, &vocab, cfg, &mut log);
        graph.nodes.push(frame.pose);
        graph.edges.push(PoseGraphEdge {
            from: kf_index - 1,
            to: kf_index,
            measurement: keyframes[kf_index - 1].frame.pose.relative(&frame.pose),
            weight: (result.diagnostics.valid_count.max(1)) as f64,
            kind: EdgeKind::Odometry,
        });

        let mut corrected = false;
        if !bag.bow.is_empty() {
            if let Some(cand) = db.detect(&bag.bow, frame.timestamp_ns, cfg) {
                loops_detected += 1;
                let cand_kf = &keyframes[cand.kf_id as usize];
                let geom_distance =
                    (cand_kf.frame.pose.translation - frame.pose.translation).norm();
                // forward init: current-frame coordinates into candidate frame
                let t_init_fwd = if geom_distance < cfg.loop_geom_distance_max {
                    Some(Pose::identity())
                } else {
                    descriptor_ransac_init(
                        (&frame, &bag),
                        (&cand_kf.frame, &cand_kf.bag),
                        &k,
                        cfg.seed_for("loop-init") ^ kf_index as u64,
                    )
                };
                match t_init_fwd {
                    None => {
                        writeln!(
                            log,
                            "loop candidate {} -> {}: far-loop initialization failed",
                            frame.timestamp_ns, cand.timestamp_ns
                        )
                        .expect("string write");
                        writeln!(
                            loop_rows,
                            "{},{},{:.4},{:.4},0,0,0,inf",
                            frame.timestamp_ns, cand.timestamp_ns, cand.eta, cand.common_word_ratio
                        )
                        .expect("string write");
                    }
                    Some(init) => {
                        let forward = align_affine(
                            &frame,
                            &cand_kf.frame.pyramid,
                            &k,
                            &init,
                            cfg,
                            true,
                        );
                        let reverse = align_affine(
                            &cand_kf.frame,
                            &frame.pyramid,
                            &k,
                            &init.inverse(),
                            cfg,
                            true,
                        );
                        match (forward, reverse) {
                            (Ok(fwd), Ok(rev)) => {
                                let (accept, consistency) =
                                    cross_validate(&fwd.t_rel, &rev.t_rel, cfg.loop_epsilon);
                                writeln!(
                                    loop_rows,
                                    "{},{},{:.4},{:.4},{:.4},{:.1},{},{:.6}",
                                    frame.timestamp_ns,
                                    cand.timestamp_ns,
                                    cand.eta,
                                    cand.common_word_ratio,
                                    fwd.affine.a,
                                    fwd.affine.b,
                                    accept as u8,
                                    consistency
                                )
                                .expect("string write");
                                if accept {
                                    loops_accepted += 1;
                                    graph.edges.push(PoseGraphEdge {
                                        from: cand.kf_id as usize,
                                        to: kf_index,
                                        measurement: fwd.t_rel,
                                        weight: fwd.support as f64,
                                        kind: EdgeKind::Loop,
                                    });
                                    let report = graph.optimize(100)?;
                                    if !report.converged {
                                        writeln!(
                                            log,
                                            "pose graph: best iterate after {} iterations \
                                             (residual {:.3e} -> {:.3e})",
                                            report.iterations,
                                            report.initial_residual,
                                            report.final_residual
                                        )
                                        .expect("string write");
                                    }
                                    corrected = true;
                                }
                            }
                            (fwd, rev) => {
                                let msg = fwd.err().or(rev.err()).expect("one side failed");
                                writeln!(
                                    log,
                                    "loop candidate {} -> {}: {msg}",
                                    frame.timestamp_ns, cand.timestamp_ns
                                )
                                .expect("string write");
                                writeln!(
                                    loop_rows,
                                    "{},{},{:.4},{:.4},0,0,0,inf",
                                    frame.timestamp_ns,
                                    cand.timestamp_ns,
                                    cand.eta,
                                    cand.common_word_ratio
                                )
                                .expect("string write");
                            }
                        }
                    }
                }
            }
        }

        if corrected {
            // publish corrected poses to keyframes, the map, and this frame
            for (i, kf) in keyframes.iter_mut().enumerate() {
                kf.frame.pose = graph.nodes[i];
            }
            frame.pose = graph.nodes[kf_index];
            let anchors: BTreeMap<u64, Pose> = keyframes
                .iter()
                .map(|kf| (kf.id, kf.frame.pose))
                .chain([(kf_index as u64, frame.pose)])
                .collect();
            map.reanchor(&anchors)?;
        }

        map.accumulate(
            kf_index as u64,
            &frame.pose,
            &cloud_cam,
            frame.pyramid.level(0),
            &k,
            &conv,
            cfg.min_depth,
        );
        if !bag.bow.is_empty() {
            db.add(DbEntry {
                kf_id: kf_index as u64,
                timestamp_ns: frame.timestamp_ns,
                bow: bag.bow.clone(),
            });
        }
        trajectory.push(TrajectoryRecord {
            timestamp_ns: frame.timestamp_ns,
            kf_index,
            rel: Pose::identity(),
        });
        keyframes.push(Keyframe {
            id: kf_index as u64,
            frame: frame.clone(),
            bag,
        });
        prev_frame = Some(frame);
    }

    // ---- outputs ----
    let entries: Vec<TrajectoryEntry> = trajectory
        .iter()
        .map(|r| TrajectoryEntry {
            timestamp_ns: r.timestamp_ns,
            pose: keyframes[r.kf_index].frame.pose.compose(&r.rel),
            valid: true,
        })
        .collect();
    let trajectory_path = out_dir.join("trajectory.txt");
    crate::geom::write_tum(&trajectory_path, &entries)?;

    let kf_entries: Vec<TrajectoryEntry> = keyframes
        .iter()
        .map(|kf| TrajectoryEntry {
            timestamp_ns: kf.frame.timestamp_ns,
            pose: kf.frame.pose,
            valid: true,
        })
        .collect();
    crate::geom::write_tum(&out_dir.join("keyframes.txt"), &kf_entries)?;

    let map_path = out_dir.join("map.ply");
    export_ply(
        &map,
        &map_path,
        &ExportOptions {
            binary: false,
            voxel_size: Some(cfg.map_voxel_size),
            color_range: None,
        },
    )?;
    export_ply(
        &map,
        &out_dir.join("map_colored.ply"),
        &ExportOptions {
            binary: false,
            voxel_size: Some(cfg.map_voxel_size),
            color_range: Some((cfg.rescale_t_low, cfg.rescale_t_high)),
        },
    )?;

    std::fs::write(out_dir.join("diagnostics.csv"), diag_rows)?;
    std::fs::write(out_dir.join("loop_events.csv"), loop_rows)?;
    std::fs::write(out_dir.join("config.txt"), cfg.to_text())?;
    writeln!(
        log,
        "frames {} keyframes {} loops detected {} accepted {}",
        trajectory.len(),
        keyframes.len(),
        loops_detected,
        loops_accepted
    )
    .expect("string write");
    std::fs::write(out_dir.join("run.log"), &log)?;

    if let Some(e) = lost {
        return Err(e);
    }
    Ok(PipelineSummary {
        frames: trajectory.len(),
        keyframes: keyframes.len(),
        loops_detected,
        loops_accepted,
        trajectory_path,
        map_path,
    })
}

/// Feature extraction for a new keyframe; exclusion from the loop database
/// is logged, not fatal.
fn keyframe_bag(
    frame: &Frame,
    vocab: &Vocabulary,
    cfg: &PipelineConfig,
    log: &mut String,
) -> DescriptorBag {
    let conv = cfg.raw_to_celsius();
    match rescale_to_8bit(&frame.raw, cfg.rescale_t_low, cfg.rescale_t_high, &conv)
        .and_then(|img8| extract_features(&img8, vocab, cfg))
    {
        Ok(bag) => bag,
        Err(e) => {
            writeln!(log, "keyframe {}: {e}", frame.timestamp_ns).expect("string write");
            DescriptorBag::empty()
        }
    }
}

/// Automatic extrinsic calibration over a dataset of chessboard
/// observations. Uses `calib_initial.txt` (hardware-design guess) when
/// present, otherwise `calib.txt`.
pub fn calibrate_dataset(
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
) -> Result<(CalibrationOutcome, CameraIntrinsics)> {
    let board_path = manifest
        .board_path
        .as_ref()
        .ok_or_else(|| Error::data(&manifest.root, "calibration needs board.txt"))?;
    let board = calib::BoardGeometry::read(board_path)?;
    let init_path = manifest
        .calib_initial_path
        .as_ref()
        .unwrap_or(&manifest.calib_path);
    let (t_init, k) = calib::read_calibration(init_path)?;

    let mut observations = Vec::new();
    for pair in &manifest.pairs {
        let Some(corners_path) = &pair.corners_path else {
            continue;
        };
        observations.push(CalibObservation {
            corners: read_corners_csv(corners_path)?,
            cloud: read_cloud_csv(&pair.cloud_path)?,
        });
    }
    if observations.len() < 3 {
        return Err(Error::data(
            &manifest.root,
            format!(
                "calibration needs at least 3 corner observations, found {}",
                observations.len()
            ),
        ));
    }

    let params = RansacParams {
        threshold: cfg.ransac_threshold,
        iterations: cfg.ransac_iterations,
        min_inliers: cfg.ransac_min_inliers,
        seed: cfg.seed_for("calib"),
    };
    let outcome = calib::calibrate(
        &observations,
        &board,
        &k,
        &t_init,
        &params,
        cfg.refine_max_iterations,
    )?;
    Ok((outcome, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SceneConfig};

    #[test]
    fn one_frame_dataset_yields_identity_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            frames: 1,
            width: 160,
            height: 128,
            azimuth_steps: 360,
            ..SceneConfig::default()
        };
        generate_dataset(&cfg, dir.path()).unwrap();
        let manifest = DatasetManifest::load(dir.path(), 5.0).unwrap();
        let out = dir.path().join("out");
        let pcfg = PipelineConfig::default();
        let summary = run_pipeline(&manifest, &pcfg, &out).unwrap();
        assert_eq!(summary.frames, 1);
        assert_eq!(summary.keyframes, 1);
        let traj = crate::geom::read_tum(&out.join("trajectory.txt")).unwrap();
        assert_eq!(traj.len(), 1);
        assert!(traj[0].pose.translation.norm() < 1e-12);
        assert!(out.join("map.ply").exists());
        assert!(out.join("diagnostics.csv").exists());
        assert!(out.join("config.txt").exists());
    }

    #[test]
    fn short_tunnel_run_tracks_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            frames: 10,
            width: 160,
            height: 128,
            azimuth_steps: 600,
            ..SceneConfig::default()
        };
        generate_dataset(&cfg, dir.path()).unwrap();
        let manifest = DatasetManifest::load(dir.path(), 5.0).unwrap();
        let out = dir.path().join("out");
        let pcfg = PipelineConfig {
            max_points: 800,
            ..PipelineConfig::default()
        };
        let summary = run_pipeline(&manifest, &pcfg, &out).unwrap();
        assert_eq!(summary.frames, 10);

        let est = crate::geom::read_tum(&out.join("trajectory.txt")).unwrap();
        let gt = crate::geom::read_tum(&dir.path().join("groundtruth.txt")).unwrap();
        let ate = crate::evaluate::evaluate_ate(&est, &gt, false, false).unwrap();
        assert!(ate.rmse < 0.01, "tunnel ATE {} m", ate.rmse);
    }

    #[test]
    fn tracking_lost_on_blanked_frame() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            frames: 3,
            width: 160,
            height: 128,
            azimuth_steps: 360,
            ..SceneConfig::default()
        };
        generate_dataset(&cfg, dir.path()).unwrap();
        // blank the last image
        let manifest = DatasetManifest::load(dir.path(), 5.0).unwrap();
        let last = manifest.pairs.last().unwrap();
        let blank = ThermalImage::constant(160, 128, 0, last.timestamp_ns).unwrap();
        blank.write_pgm(&last.image_path).unwrap();

        let out = dir.path().join("out");
        let pcfg = PipelineConfig::default();
        let err = run_pipeline(&manifest, &pcfg, &out).unwrap_err();
        assert!(matches!(err, Error::TrackingLost { .. }), "{err}");
        // partial outputs still exist with the last good pose
        let traj = crate::geom::read_tum(&out.join("trajectory.txt")).unwrap();
        assert_eq!(traj.len(), 2);
    }
}
