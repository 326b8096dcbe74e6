//! Trajectory evaluation: absolute trajectory error with timestamp
//! interpolation and optional rigid or similarity alignment.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::TrajectoryEntry;

#[derive(Debug, Clone)]
pub struct AteResult {
    pub rmse: f64,
    pub mean: f64,
    pub max: f64,
    pub samples: usize,
}

/// Umeyama alignment of `src` onto `dst`: returns (scale, rotation,
/// translation) minimizing `sum ||dst - (s R src + t)||^2`. Scale is fixed
/// to 1 unless `with_scale`.
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let mu_src = src.iter().sum::<Vector3<f64>>() / n;
    let mu_dst = dst.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_src;
        let dc = d - mu_dst;
        cov += dc * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov /= n;
    var_src /= n;

    if var_src < 1e-12 {
        // degenerate (all source points coincide): pure translation
        return (1.0, Matrix3::identity(), mu_dst - mu_src);
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        s_diag.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let scale = if with_scale {
        (svd.singular_values.component_mul(&s_diag)).sum() / var_src
    } else {
        1.0
    };
    let translation = mu_dst - rotation * mu_src * scale;
    (scale, rotation, translation)
}

/// Absolute trajectory error: ground truth is linearly interpolated to the
/// estimate's timestamps (invalid ground-truth samples are skipped), then
/// the position RMSE is computed after optional alignment.
pub fn evaluate_ate(
    estimate: &[TrajectoryEntry],
    groundtruth: &[TrajectoryEntry],
    align: bool,
    scale: bool,
) -> Result<AteResult> {
    let mut gt: Vec<&TrajectoryEntry> = groundtruth.iter().filter(|e| e.valid).collect();
    gt.sort_by_key(|e| e.timestamp_ns);
    if gt.len() < 2 && estimate.len() > 1 {
        return Err(Error::Evaluation(format!(
            "need at least 2 valid ground-truth samples, got {}",
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Evaluation("empty ground truth".into()));
    }

    let mut est_pts = Vec::new();
    let mut gt_pts = Vec::new();
    for e in estimate {
        let ts = e.timestamp_ns;
        if ts < gt[0].timestamp_ns || ts > gt[gt.len() - 1].timestamp_ns {
            continue;
        }
        let idx = gt.partition_point(|g| g.timestamp_ns <= ts);
        let interp = if idx == 0 {
            gt[0].pose.translation
        } else if idx >= gt.len() {
            gt[gt.len() - 1].pose.translation
        } else {
            let a = gt[idx - 1];
            let b = gt[idx];
            let alpha = (ts - a.timestamp_ns) as f64 / (b.timestamp_ns - a.timestamp_ns) as f64;
            a.pose.translation.lerp(&b.pose.translation, alpha)
        };
        est_pts.push(e.pose.translation);
        gt_pts.push(interp);
    }
    if est_pts.len() < 2 {
        return Err(Error::Evaluation(format!(
            "only {} overlapping samples between estimate and ground truth",
            est_pts.len()
        )));
    }

    let aligned: Vec<Vector3<f64>> = if align || scale {
        let (s, r, t) = umeyama(&est_pts, &gt_pts, scale);
        est_pts.iter().map(|p| r * p * s + t).collect()
    } else {
        est_pts
    };

    let mut sum_sq = 0.0;
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (a, g) in aligned.iter().zip(&gt_pts) {
        let err = (a - g).norm();
        sum_sq += err * err;
        sum += err;
        max = max.max(err);
    }
    let n = aligned.len() as f64;
    Ok(AteResult {
        rmse: (sum_sq / n).sqrt(),
        mean: sum / n,
        max,
        samples: aligned.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn entry(ts: i64, p: Vector3<f64>) -> TrajectoryEntry {
        TrajectoryEntry {
            timestamp_ns: ts,
            pose: Pose::from_translation(p),
            valid: true,
        }
    }

    fn line_trajectory(n: usize) -> Vec<TrajectoryEntry> {
        (0..n)
            .map(|i| {
                entry(
                    i as i64 * 100_000_000,
                    Vector3::new(i as f64 * 0.1, (i as f64 * 0.05).sin(), 0.0),
                )
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let t = line_trajectory(50);
        let r = evaluate_ate(&t, &t, false, false).unwrap();
        assert!(r.rmse < 1e-12);
        assert_eq!(r.samples, 50);
    }

    #[test]
    fn constant_shift_with_and_without_alignment() {
        let gt = line_trajectory(50);
        let est: Vec<TrajectoryEntry> = gt
            .iter()
            .map(|e| entry(e.timestamp_ns, e.pose.translation + Vector3::new(1.0, 0.0, 0.0)))
            .collect();
        let unaligned = evaluate_ate(&est, &gt, false, false).unwrap();
        assert!((unaligned.rmse - 1.0).abs() < 1e-9);
        let aligned = evaluate_ate(&est, &gt, true, false).unwrap();
        assert!(aligned.rmse < 1e-9);
    }

    #[test]
    fn scale_alignment_protocol() {
        let gt = line_trajectory(50);
        let est: Vec<TrajectoryEntry> = gt
            .iter()
            .map(|e| entry(e.timestamp_ns, e.pose.translation * 2.0))
            .collect();
        let with_scale = evaluate_ate(&est, &gt, true, true).unwrap();
        assert!(with_scale.rmse < 1e-9, "rmse {}", with_scale.rmse);
        let without = evaluate_ate(&est, &gt, true, false).unwrap();
        assert!(without.rmse > 0.1);
    }

    #[test]
    fn invariant_to_common_rigid_transform() {
        let gt = line_trajectory(50);
        let est: Vec<TrajectoryEntry> = gt
            .iter()
            .map(|e| {
                entry(
                    e.timestamp_ns,
                    e.pose.translation + Vector3::new(0.01, -0.02, 0.005),
                )
            })
            .collect();
        let base = evaluate_ate(&est, &gt, false, false).unwrap();

        let mut rng = StdRng::seed_from_u64(3);
        let g = crate::geom::tests::random_pose(&mut rng);
        let map = |t: &[TrajectoryEntry]| -> Vec<TrajectoryEntry> {
            t.iter()
                .map(|e| TrajectoryEntry {
                    timestamp_ns: e.timestamp_ns,
                    pose: g.compose(&e.pose),
                    valid: true,
                })
                .collect()
        };
        let moved = evaluate_ate(&map(&est), &map(&gt), false, false).unwrap();
        assert!((base.rmse - moved.rmse).abs() < 1e-9);
    }

    #[test]
    fn interpolates_between_ground_truth_samples() {
        let gt = vec![
            entry(0, Vector3::zeros()),
            entry(1_000_000_000, Vector3::new(1.0, 0.0, 0.0)),
        ];
        let est = vec![
            entry(250_000_000, Vector3::new(0.25, 0.0, 0.0)),
            entry(750_000_000, Vector3::new(0.75, 0.0, 0.0)),
        ];
        let r = evaluate_ate(&est, &gt, false, false).unwrap();
        assert!(r.rmse < 1e-12);
    }

    #[test]
    fn too_few_overlapping_samples_is_an_error() {
        let gt = vec![
            entry(0, Vector3::zeros()),
            entry(1_000_000_000, Vector3::new(1.0, 0.0, 0.0)),
        ];
        let est = vec![entry(5_000_000_000, Vector3::zeros())];
        assert!(evaluate_ate(&est, &gt, false, false).is_err());
    }

    #[test]
    fn invalid_ground_truth_samples_are_skipped() {
        // strictly linear path so interpolation across the removed sample is
        // exact
        let linear: Vec<TrajectoryEntry> = (0..10)
            .map(|i| {
                entry(
                    i as i64 * 100_000_000,
                    Vector3::new(i as f64 * 0.1, i as f64 * -0.02, 0.0),
                )
            })
            .collect();
        let mut gt = linear.clone();
        gt[4].valid = false;
        // a wildly wrong invalid sample must not affect the result
        gt[4].pose = Pose::from_translation(Vector3::new(100.0, 100.0, 100.0));
        let r = evaluate_ate(&linear, &gt, false, false).unwrap();
        assert!(r.rmse < 1e-9);
    }
}
