//! Direct frame-to-frame tracking on 14-bit raw thermal counts with sparse
//! LiDAR depth, multi-keyframe local refinement, and keyframe selection.
//!
//! The tracking cost is the t-distribution-weighted sum of squared
//! thermographic residuals over an 8-point sparse patch pattern, minimized by
//! iteratively reweighted Gauss-Newton with left-multiplicative twist updates,
//! coarse to fine across the pyramid. Raw counts are used as-is: no rescale,
//! no normalization.

use nalgebra::{Matrix6, SymmetricEigen, Vector3, Vector6};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose, Twist};
use crate::imgproc::{FloatImage, Pyramid, ThermalImage};
use crate::loop_closing::DescriptorBag;

/// Pixel margin needed around a projection so that every pattern offset can
/// be sampled bilinearly with its gradient.
pub const PATTERN_MARGIN: f64 = 3.0;

/// Sparse residual pattern: pixel offsets around each projected point.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPattern {
    offsets: Vec<(f64, f64)>,
}

impl Default for PatchPattern {
    /// 8-point spread pattern (center plus 7 offsets within radius 2), the
    /// convention of sparse direct methods.
    fn default() -> Self {
        PatchPattern {
            offsets: vec![
                (0.0, 0.0),
                (-2.0, 0.0),
                (2.0, 0.0),
                (0.0, -2.0),
                (0.0, 2.0),
                (-1.0, -1.0),
                (1.0, -1.0),
                (-1.0, 1.0),
            ],
        }
    }
}

impl PatchPattern {
    pub fn new(offsets: Vec<(f64, f64)>) -> Result<Self> {
        if !offsets.iter().any(|&(x, y)| x == 0.0 && y == 0.0) {
            return Err(Error::Config("patch pattern must contain (0,0)".into()));
        }
        if offsets.iter().any(|&(x, y)| (x * x + y * y).sqrt() > 3.0) {
            return Err(Error::Config("patch offsets must stay within radius 3".into()));
        }
        Ok(PatchPattern { offsets })
    }

    pub fn offsets(&self) -> &[(f64, f64)] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// t-distribution weight `w(r) = (nu + 1) / (nu + (r / sigma)^2)`.
#[derive(Debug, Clone, Copy)]
pub struct RobustWeight {
    pub nu: f64,
    pub sigma: f64,
}

impl RobustWeight {
    pub fn new(nu: f64, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        Ok(RobustWeight { nu, sigma })
    }

    #[inline]
    pub fn weight(&self, r: f64) -> f64 {
        let z = r / self.sigma;
        (self.nu + 1.0) / (self.nu + z * z)
    }
}

/// Fixed-point estimate of the residual scale under a t-distribution with
/// `nu` degrees of freedom. Initialized at the normalized median absolute
/// value, iterated to a relative change below 1e-6 (at most 50 rounds),
/// floored at `sigma_floor`.
pub fn estimate_sigma(residuals: &[f64], nu: f64, sigma_floor: f64) -> f64 {
    if residuals.is_empty() {
        return sigma_floor;
    }
    let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let median = abs[abs.len() / 2];
    let mut sigma2 = (median / 0.6745).max(sigma_floor);
    sigma2 *= sigma2;

    let n = residuals.len() as f64;
    for _ in 0..50 {
        let mut acc = 0.0;
        for &r in residuals {
            let r2 = r * r;
            acc += r2 * (nu + 1.0) / (nu + r2 / sigma2);
        }
        let next = (acc / n).max(sigma_floor * sigma_floor);
        let rel = (next - sigma2).abs() / sigma2;
        sigma2 = next;
        if rel < 1e-6 {
            break;
        }
    }
    sigma2.sqrt().max(sigma_floor)
}

/// Single thermographic residual: current-image sample at the warped
/// projection minus the reference value. `None` when the projection leaves
/// the image (the point is dropped from the cost, not an error).
pub fn residual(
    p_ref: &Vector3<f64>,
    t_rel: &Pose,
    image: &FloatImage,
    k: &CameraIntrinsics,
    min_depth: f64,
    temp_ref: f64,
) -> Option<f64> {
    let q = t_rel.transform(p_ref);
    let uv = k.project_with(&q, min_depth, 0.0)?;
    Some(image.sample_bilinear(uv.x, uv.y)? - temp_ref)
}

/// Reference samples of one point at one pyramid level.
#[derive(Debug, Clone)]
pub struct PatchRefs {
    pub valid: bool,
    pub values: Vec<f64>,
}

/// A tracked point: camera-frame position plus per-level reference samples
/// at its own frame's projection (one value per pattern offset).
#[derive(Debug, Clone)]
pub struct FramePoint {
    pub p_cam: Vector3<f64>,
    pub refs: Vec<PatchRefs>,
}

/// A thermal frame ready for tracking: image pyramid plus selected in-FOV
/// points with their reference temperatures.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp_ns: i64,
    pub raw: ThermalImage,
    pub pyramid: Pyramid,
    pub points: Vec<FramePoint>,
    pub pose: Pose,
}

impl Frame {
    /// Builds a frame from a camera-frame cloud: keeps only points that
    /// project inside the image (with margin), buckets them on a uniform
    /// grid preferring strong image gradients, and samples the per-level
    /// reference patches.
    pub fn build(
        raw: ThermalImage,
        cloud_cam: &[Vector3<f64>],
        k: &CameraIntrinsics,
        pattern: &PatchPattern,
        cfg: &PipelineConfig,
    ) -> Result<Frame> {
        let timestamp_ns = raw.timestamp_ns;
        let pyramid = Pyramid::build(&raw, cfg.pyramid_levels)?;
        let level0 = pyramid.level(0);
        let margin = cfg.border_margin.max(PATTERN_MARGIN);

        // candidate = (cell, gradient magnitude, cloud index)
        struct Candidate {
            cell: u32,
            grad: f64,
            idx: usize,
        }
        let cells_x = k.width.div_ceil(cfg.grid_cell);
        let mut candidates: Vec<Candidate> = Vec::new();
        let mut projections: Vec<Option<nalgebra::Vector2<f64>>> = Vec::with_capacity(cloud_cam.len());
        for (idx, p) in cloud_cam.iter().enumerate() {
            let Some(uv) = k.project_with(p, cfg.min_depth, margin) else {
                projections.push(None);
                continue;
            };
            let grad = level0
                .sample_gradient(uv.x, uv.y)
                .map(|(gx, gy)| (gx * gx + gy * gy).sqrt())
                .unwrap_or(0.0);
            let cell = (uv.y as u32 / cfg.grid_cell) * cells_x + (uv.x as u32 / cfg.grid_cell);
            candidates.push(Candidate { cell, grad, idx });
            projections.push(Some(uv));
        }

        // strongest-gradient-first inside each cell, round-robin across cells
        candidates.sort_by(|a, b| {
            a.cell
                .cmp(&b.cell)
                .then(b.grad.partial_cmp(&a.grad).expect("finite gradient"))
                .then(a.idx.cmp(&b.idx))
        });
        let mut per_cell: Vec<Vec<usize>> = Vec::new();
        {
            let mut current_cell = u32::MAX;
            for c in &candidates {
                if c.cell != current_cell {
                    per_cell.push(Vec::new());
                    current_cell = c.cell;
                }
                per_cell.last_mut().expect("cell started").push(c.idx);
            }
        }
        let mut selected: Vec<usize> = Vec::new();
        let mut round = 0usize;
        while selected.len() < cfg.max_points {
            let mut any = false;
            for cell in &per_cell {
                if let Some(&idx) = cell.get(round) {
                    selected.push(idx);
                    any = true;
                    if selected.len() >= cfg.max_points {
                        break;
                    }
                }
            }
            if !any {
                break;
            }
            round += 1;
        }
        selected.sort_unstable();

        let mut points = Vec::with_capacity(selected.len());
        for idx in selected {
            let p = cloud_cam[idx];
            let mut refs = Vec::with_capacity(cfg.pyramid_levels);
            for level in 0..cfg.pyramid_levels {
                let kl = k.at_level(level);
                let img = pyramid.level(level);
                let sample = kl.project_with(&p, cfg.min_depth, PATTERN_MARGIN).and_then(|uv| {
                    let mut values = Vec::with_capacity(pattern.len());
                    for &(dx, dy) in pattern.offsets() {
                        values.push(img.sample_bilinear(uv.x + dx, uv.y + dy)?);
                    }
                    Some(values)
                });
                match sample {
                    Some(values) => refs.push(PatchRefs {
                        valid: true,
                        values,
                    }),
                    None => refs.push(PatchRefs {
                        valid: false,
                        values: Vec::new(),
                    }),
                }
            }
            points.push(FramePoint { p_cam: p, refs });
        }

        Ok(Frame {
            timestamp_ns,
            raw,
            pyramid,
            points,
            pose: Pose::identity(),
        })
    }

    /// Points whose level-0 reference patch is usable.
    pub fn valid_point_count(&self) -> usize {
        self.points.iter().filter(|p| p.refs[0].valid).count()
    }
}

/// A selected frame anchoring refinement, loop detection, and the map.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: u64,
    pub frame: Frame,
    pub bag: DescriptorBag,
}

#[derive(Debug, Clone, Default)]
pub struct TrackDiagnostics {
    pub final_cost: f64,
    /// Gauss-Newton iterations per pyramid level, coarsest first.
    pub iterations: Vec<usize>,
    pub valid_ratio: f64,
    /// Valid residual count at the finest level.
    pub valid_count: usize,
    pub weighted_rms: f64,
    pub hessian_degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct TrackResult {
    /// Relative pose mapping previous-frame coordinates into the current
    /// frame.
    pub t_rel: Pose,
    pub diagnostics: TrackDiagnostics,
}

struct NormalEquations {
    h: Matrix6<f64>,
    b: Vector6<f64>,
    cost: f64,
    weight_sum: f64,
    valid: usize,
    total: usize,
    residuals: Vec<f64>,
}

/// Accumulates residuals/Jacobians of the frame-to-frame cost at `t_rel`.
/// When `with_jacobian` is false only residual statistics are gathered.
#[allow(clippy::too_many_arguments)]
fn accumulate_track(
    prev: &Frame,
    cur_level: &FloatImage,
    kl: &CameraIntrinsics,
    level: usize,
    t_rel: &Pose,
    weight: Option<&RobustWeight>,
    min_depth: f64,
    with_jacobian: bool,
) -> NormalEquations {
    let mut out = NormalEquations {
        h: Matrix6::zeros(),
        b: Vector6::zeros(),
        cost: 0.0,
        weight_sum: 0.0,
        valid: 0,
        total: 0,
        residuals: Vec::new(),
    };
    for point in &prev.points {
        let refs = &point.refs[level];
        if !refs.valid {
            continue;
        }
        out.total += refs.values.len();
        let q = t_rel.transform(&point.p_cam);
        let Some(uv) = kl.project_with(&q, min_depth, PATTERN_MARGIN) else {
            continue;
        };
        let inv_z = 1.0 / q.z;
        for (o, &(dx, dy)) in PATTERN_OFFSETS.iter().enumerate() {
            let Some((val, gx, gy)) = cur_level.sample_with_gradient(uv.x + dx, uv.y + dy)
            else {
                continue;
            };
            let r = val - refs.values[o];
            out.valid += 1;
            out.residuals.push(r);
            let w = weight.map_or(1.0, |rw| rw.weight(r));
            out.cost += w * r * r;
            out.weight_sum += w;
            if with_jacobian {
                let jp = Vector3::new(
                    gx * kl.fx * inv_z,
                    gy * kl.fy * inv_z,
                    -(gx * kl.fx * q.x + gy * kl.fy * q.y) * inv_z * inv_z,
                );
                let jw = q.cross(&jp);
                let j = Vector6::new(jw.x, jw.y, jw.z, jp.x, jp.y, jp.z);
                out.h += j * j.transpose() * w;
                out.b += j * (w * r);
            }
        }
    }
    out
}

/// The default pattern, statically known so the hot loops avoid indirection.
pub const PATTERN_OFFSETS: [(f64, f64); 8] = [
    (0.0, 0.0),
    (-2.0, 0.0),
    (2.0, 0.0),
    (0.0, -2.0),
    (0.0, 2.0),
    (-1.0, -1.0),
    (1.0, -1.0),
    (-1.0, 1.0),
];

/// Damped Gauss-Newton solve; `None` when the system is numerically singular
/// even with damping.
fn solve_damped(h: &Matrix6<f64>, b: &Vector6<f64>, lambda: f64) -> Option<Vector6<f64>> {
    let mut damped = *h;
    for i in 0..6 {
        damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
    }
    nalgebra::Cholesky::new(damped).map(|chol| chol.solve(&(-b)))
}

/// Direct frame-to-frame tracking: coarse-to-fine iteratively reweighted
/// Gauss-Newton on the thermographic residuals of the previous frame's
/// points projected into the current pyramid.
pub fn track(
    prev: &Frame,
    cur: &Pyramid,
    k: &CameraIntrinsics,
    t_init: &Pose,
    cfg: &PipelineConfig,
) -> Result<TrackResult> {
    if prev.valid_point_count() < cfg.min_track_points {
        return Err(Error::TrackingLost {
            reason: format!(
                "only {} usable points in the reference frame (need {})",
                prev.valid_point_count(),
                cfg.min_track_points
            ),
            valid_ratio: 0.0,
            weighted_rms: 0.0,
        });
    }

    let mut t_rel = *t_init;
    let mut iterations = vec![0usize; cfg.pyramid_levels];
    let mut degenerate = false;

    for level in (0..cfg.pyramid_levels).rev() {
        let kl = k.at_level(level);
        let img = cur.level(level);
        let mut lambda = 0.0f64;
        for _ in 0..cfg.track_max_iterations {
            iterations[cfg.pyramid_levels - 1 - level] += 1;
            let stats = accumulate_track(prev, img, &kl, level, &t_rel, None, cfg.min_depth, false);
            if stats.residuals.len() < 10 {
                break;
            }
            let sigma = estimate_sigma(&stats.residuals, cfg.nu, cfg.sigma_floor);
            let weight = RobustWeight::new(cfg.nu, sigma).expect("sigma floored");
            let eqs = accumulate_track(
                prev,
                img,
                &kl,
                level,
                &t_rel,
                Some(&weight),
                cfg.min_depth,
                true,
            );
            if eqs.b.norm() < 1e-14 {
                break;
            }

            let mut accepted = false;
            for _ in 0..8 {
                let Some(delta) = solve_damped(&eqs.h, &eqs.b, lambda) else {
                    lambda = (lambda * 10.0).max(1e-4);
                    continue;
                };
                let candidate = Pose::exp(&Twist::from_vector(&delta)).compose(&t_rel);
                let trial = accumulate_track(
                    prev,
                    img,
                    &kl,
                    level,
                    &candidate,
                    Some(&weight),
                    cfg.min_depth,
                    false,
                );
                // cost comparison at fixed sigma so accepted steps never
                // increase the objective
                if trial.valid >= 10 && trial.cost <= eqs.cost {
                    t_rel = candidate;
                    accepted = true;
                    lambda *= 0.25;
                    if delta.norm() < cfg.track_update_eps {
                        lambda = f64::INFINITY; // converged; break the level loop
                    }
                    break;
                }
                lambda = (lambda * 10.0).max(1e-4);
            }
            if !accepted || lambda.is_infinite() {
                break;
            }
        }
    }

    // final statistics at the finest level
    let kl = k.at_level(0);
    let img = cur.level(0);
    let stats = accumulate_track(prev, img, &kl, 0, &t_rel, None, cfg.min_depth, false);
    let sigma = estimate_sigma(&stats.residuals, cfg.nu, cfg.sigma_floor);
    let weight = RobustWeight::new(cfg.nu, sigma).expect("sigma floored");
    let final_eqs = accumulate_track(
        prev,
        img,
        &kl,
        0,
        &t_rel,
        Some(&weight),
        cfg.min_depth,
        true,
    );
    let valid_ratio = if final_eqs.total > 0 {
        final_eqs.valid as f64 / final_eqs.total as f64
    } else {
        0.0
    };
    let weighted_rms = if final_eqs.weight_sum > 0.0 {
        (final_eqs.cost / final_eqs.weight_sum).sqrt()
    } else {
        f64::INFINITY
    };
    {
        let eig = SymmetricEigen::new(final_eqs.h);
        let max_eig = eig.eigenvalues.max();
        if eig.eigenvalues.min() < 1e-9 * max_eig.max(1e-9) {
            degenerate = true;
        }
    }

    let diagnostics = TrackDiagnostics {
        final_cost: final_eqs.cost,
        iterations,
        valid_ratio,
        valid_count: final_eqs.valid,
        weighted_rms,
        hessian_degenerate: degenerate,
    };

    if valid_ratio < cfg.track_min_valid_ratio {
        return Err(Error::TrackingLost {
            reason: "valid residual ratio below gate".into(),
            valid_ratio,
            weighted_rms,
        });
    }
    if weighted_rms > cfg.track_max_weighted_rms {
        return Err(Error::TrackingLost {
            reason: "weighted residual rms above gate".into(),
            valid_ratio,
            weighted_rms,
        });
    }

    Ok(TrackResult {
        t_rel,
        diagnostics,
    })
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub pose: Pose,
    /// False when refinement increased the cost and the tracked pose was kept.
    pub improved: bool,
    pub cost_before: f64,
    pub cost_after: f64,
    pub iterations: usize,
}

struct WindowEquations {
    h: Matrix6<f64>,
    b: Vector6<f64>,
    cost: f64,
    weight_sum: f64,
    valid: usize,
    residuals: Vec<f64>,
}

fn accumulate_window(
    window: &[&Keyframe],
    cur_level0: &FloatImage,
    k: &CameraIntrinsics,
    pose: &Pose,
    weight: Option<&RobustWeight>,
    min_depth: f64,
    with_jacobian: bool,
) -> WindowEquations {
    let mut out = WindowEquations {
        h: Matrix6::zeros(),
        b: Vector6::zeros(),
        cost: 0.0,
        weight_sum: 0.0,
        valid: 0,
        residuals: Vec::new(),
    };
    let rot_f_t = pose.rotation.transpose();
    for kf in window {
        for point in &kf.frame.points {
            let refs = &point.refs[0];
            if !refs.valid {
                continue;
            }
            let s = kf.frame.pose.transform(&point.p_cam); // world
            let y = rot_f_t * (s - pose.translation); // current-frame coords
            let Some(uv) = k.project_with(&y, min_depth, PATTERN_MARGIN) else {
                continue;
            };
            let inv_z = 1.0 / y.z;
            for (o, &(dx, dy)) in PATTERN_OFFSETS.iter().enumerate() {
                let Some((val, gx, gy)) = cur_level0.sample_with_gradient(uv.x + dx, uv.y + dy)
                else {
                    continue;
                };
                let r = val - refs.values[o];
                out.valid += 1;
                out.residuals.push(r);
                let w = weight.map_or(1.0, |rw| rw.weight(r));
                out.cost += w * r * r;
                out.weight_sum += w;
                if with_jacobian {
                    let jp = Vector3::new(
                        gx * k.fx * inv_z,
                        gy * k.fy * inv_z,
                        -(gx * k.fx * y.x + gy * k.fy * y.y) * inv_z * inv_z,
                    );
                    // d r / d xi for a left-multiplicative update of the
                    // current frame's world pose
                    let a = pose.rotation * jp;
                    let jw = a.cross(&s);
                    let j = Vector6::new(jw.x, jw.y, jw.z, -a.x, -a.y, -a.z);
                    out.h += j * j.transpose() * w;
                    out.b += j * (w * r);
                }
            }
        }
    }
    out
}

/// Multi-keyframe refinement of the current frame's world pose against a
/// window of recent keyframes (keyframe poses stay fixed). Falls back to the
/// tracked pose when the weighted cost would increase.
pub fn refine_local(
    cur: &Pyramid,
    tracked_pose: &Pose,
    window: &[&Keyframe],
    k: &CameraIntrinsics,
    cfg: &PipelineConfig,
) -> RefineOutcome {
    let img = cur.level(0);
    let mut pose = *tracked_pose;
    let mut iterations = 0usize;

    if window.is_empty() {
        return RefineOutcome {
            pose,
            improved: false,
            cost_before: 0.0,
            cost_after: 0.0,
            iterations,
        };
    }

    let mut lambda = 0.0f64;
    for _ in 0..cfg.track_max_iterations {
        iterations += 1;
        let stats = accumulate_window(window, img, k, &pose, None, cfg.min_depth, false);
        if stats.residuals.len() < 10 {
            break;
        }
        let sigma = estimate_sigma(&stats.residuals, cfg.nu, cfg.sigma_floor);
        let weight = RobustWeight::new(cfg.nu, sigma).expect("sigma floored");
        let eqs = accumulate_window(window, img, k, &pose, Some(&weight), cfg.min_depth, true);
        if eqs.b.norm() < 1e-14 {
            break;
        }
        let mut accepted = false;
        for _ in 0..8 {
            let Some(delta) = solve_damped(&eqs.h, &eqs.b, lambda) else {
                lambda = (lambda * 10.0).max(1e-4);
                continue;
            };
            let candidate = Pose::exp(&Twist::from_vector(&delta)).compose(&pose);
            let trial =
                accumulate_window(window, img, k, &candidate, Some(&weight), cfg.min_depth, false);
            if trial.valid >= 10 && trial.cost <= eqs.cost {
                pose = candidate;
                accepted = true;
                lambda *= 0.25;
                if delta.norm() < cfg.track_update_eps {
                    lambda = f64::INFINITY;
                }
                break;
            }
            lambda = (lambda * 10.0).max(1e-4);
        }
        if !accepted || lambda.is_infinite() {
            break;
        }
    }

    // compare initial and refined pose under the same final weighting; mean
    // weighted square keeps differing valid sets comparable
    let final_stats = accumulate_window(window, img, k, &pose, None, cfg.min_depth, false);
    let sigma = estimate_sigma(&final_stats.residuals, cfg.nu, cfg.sigma_floor);
    let weight = RobustWeight::new(cfg.nu, sigma).expect("sigma floored");
    let score = |p: &Pose| -> (f64, usize) {
        let s = accumulate_window(window, img, k, p, Some(&weight), cfg.min_depth, false);
        if s.valid == 0 {
            (f64::INFINITY, 0)
        } else {
            (s.cost / s.valid as f64, s.valid)
        }
    };
    let (cost_before, _) = score(tracked_pose);
    let (cost_after, _) = score(&pose);
    if cost_after <= cost_before {
        RefineOutcome {
            pose,
            improved: true,
            cost_before,
            cost_after,
            iterations,
        }
    } else {
        RefineOutcome {
            pose: *tracked_pose,
            improved: false,
            cost_before,
            cost_after: cost_before,
            iterations,
        }
    }
}

/// Keyframe selection: translation or rotation since the last keyframe above
/// threshold, or the tracked valid-point ratio dropping below its gate.
pub fn should_create_keyframe(
    cur_pose: &Pose,
    last_kf_pose: &Pose,
    valid_ratio: f64,
    cfg: &PipelineConfig,
) -> bool {
    let rel = last_kf_pose.relative(cur_pose);
    rel.translation.norm() > cfg.keyframe_translation
        || rel.rotation_angle().to_degrees() > cfg.keyframe_rotation_deg
        || valid_ratio < cfg.keyframe_valid_ratio
}
