//! Automatic thermal-camera-to-LiDAR extrinsic calibration from a temporal
//! stream of chessboard-plane observations.
//!
//! Each observation pairs the board plane seen by the camera (from detected
//! corners) with the board plane segmented out of the LiDAR cloud. Three
//! maximally non-parallel pairs give a closed-form rotation and translation;
//! a first-order descent over all pairs refines the result.
//!
//! The stored extrinsic direction is camera-to-LiDAR throughout:
//! `p_lidar = T * p_camera`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose, Twist};

/// Reprojection RMS (pixels) above which a chessboard detection is treated
/// as corrupted (wrong ordering, outlier corners).
const MAX_BOARD_REPROJECTION_RMS: f64 = 1.5;

/// Pairwise angle (degrees) below which a plane triplet is degenerate.
const MIN_TRIPLET_ANGLE_DEG: f64 = 5.0;

/// Consistency gates between the camera plane transformed by the initial
/// extrinsic and the segmented LiDAR plane. The initial extrinsic comes from
/// the hardware design and is good to a few degrees / centimeters, so a
/// segmentation that latched onto background structure (a wall behind the
/// board) disagrees by far more and the observation is rejected.
const MAX_PAIR_NORMAL_ANGLE_DEG: f64 = 10.0;
const MAX_PAIR_PLANE_OFFSET_M: f64 = 0.25;

/// Plane `{p : n.p + d = 0}` with unit normal, plus the supporting inliers.
#[derive(Debug, Clone)]
pub struct PlaneModel {
    pub normal: Vector3<f64>,
    pub d: f64,
    pub inliers: Vec<Vector3<f64>>,
}

impl PlaneModel {
    pub fn new(normal: Vector3<f64>, d: f64, inliers: Vec<Vector3<f64>>) -> Self {
        let norm = normal.norm();
        PlaneModel {
            normal: normal / norm,
            d: d / norm,
            inliers,
        }
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.d
    }

    /// Flips the model so the sensor origin lies on the positive side
    /// (the normal points from the plane toward the sensor).
    pub fn oriented_toward_origin(mut self) -> Self {
        if self.d < 0.0 {
            self.normal = -self.normal;
            self.d = -self.d;
        }
        self
    }
}

/// A camera-frame / LiDAR-frame observation of the same physical plane.
#[derive(Debug, Clone)]
pub struct PlanePair {
    pub cam_plane: PlaneModel,
    pub lidar_plane: PlaneModel,
    /// Board points in the camera frame (the detected inner-corner grid).
    pub cam_points: Vec<Vector3<f64>>,
}

/// Chessboard inner-corner layout: `rows x cols` corners spaced
/// `square_size` meters apart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoardGeometry {
    pub rows: usize,
    pub cols: usize,
    pub square_size: f64,
}

impl BoardGeometry {
    /// Row-major inner corners in the board frame (z = 0 plane).
    pub fn corner_grid(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(Vector3::new(
                    c as f64 * self.square_size,
                    r as f64 * self.square_size,
                    0.0,
                ));
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            format!(
                "# chessboard inner corners: rows cols square_size_m\n{} {} {}\n",
                self.rows, self.cols, self.square_size
            ),
        )?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(path, format!("cannot read board geometry: {e}")))?;
        let nums: Vec<f64> = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .flat_map(|l| l.split_whitespace())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::data(path, format!("bad number {t:?}")))
            })
            .collect::<Result<_>>()?;
        if nums.len() != 3 {
            return Err(Error::data(path, "expected: rows cols square_size"));
        }
        Ok(BoardGeometry {
            rows: nums[0] as usize,
            cols: nums[1] as usize,
            square_size: nums[2],
        })
    }
}

/// Result of a chessboard pose estimate.
#[derive(Debug, Clone)]
pub struct BoardDetection {
    /// Board-to-camera pose.
    pub pose: Pose,
    /// Board plane in the camera frame, normal toward the camera.
    pub plane: PlaneModel,
    /// Inner-corner grid transformed into the camera frame.
    pub cam_points: Vec<Vector3<f64>>,
    pub reprojection_rms: f64,
}

/// Convex pixel polygon marking the board region in the image.
#[derive(Debug, Clone)]
pub struct BoardRegion {
    vertices: Vec<Vector2<f64>>,
}

impl BoardRegion {
    pub fn new(mut vertices: Vec<Vector2<f64>>) -> Self {
        // normalize winding so the half-plane test has a consistent sign
        let mut area = 0.0;
        for i in 0..vertices.len() {
            let a = vertices[i];
            let b = vertices[(i + 1) % vertices.len()];
            area += a.x * b.y - b.x * a.y;
        }
        if area < 0.0 {
            vertices.reverse();
        }
        BoardRegion { vertices }
    }

    /// Projects the physical board outline (inner grid plus a one-square
    /// margin) through the detected board pose.
    pub fn from_board_pose(pose: &Pose, board: &BoardGeometry, k: &CameraIntrinsics) -> Result<Self> {
        let s = board.square_size;
        let w = board.cols as f64 * s;
        let h = board.rows as f64 * s;
        let corners_local = [
            Vector3::new(-s, -s, 0.0),
            Vector3::new(w, -s, 0.0),
            Vector3::new(w, h, 0.0),
            Vector3::new(-s, h, 0.0),
        ];
        let mut vertices = Vec::with_capacity(4);
        for c in corners_local {
            let p = pose.transform(&c);
            if p.z <= 1e-6 {
                return Err(Error::DegenerateGeometry(
                    "board outline crosses the camera plane".into(),
                ));
            }
            vertices.push(Vector2::new(
                k.fx * p.x / p.z + k.cx,
                k.fy * p.y / p.z + k.cy,
            ));
        }
        Ok(BoardRegion::new(vertices))
    }

    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let cross = (b.x - a.x) * (uv.y - a.y) - (b.y - a.y) * (uv.x - a.x);
            if cross < 0.0 {
                return false;
            }
        }
        true
    }
}

/// Planar PnP from row-major chessboard corners: normalized-DLT homography,
/// then decomposition against the known intrinsics.
pub fn detect_chessboard_pose(
    corners: &[Vector2<f64>],
    board: &BoardGeometry,
    k: &CameraIntrinsics,
) -> Result<BoardDetection> {
    let grid = board.corner_grid();
    if corners.len() < 4 {
        return Err(Error::ChessboardFailed(format!(
            "need at least 4 corners, got {}",
            corners.len()
        )));
    }
    if corners.len() != grid.len() {
        return Err(Error::ChessboardFailed(format!(
            "corner count {} does not match the {}x{} grid",
            corners.len(),
            board.rows,
            board.cols
        )));
    }

    // collinear pixel layouts carry no homography information
    let mean = corners.iter().sum::<Vector2<f64>>() / corners.len() as f64;
    let mut cov = nalgebra::Matrix2::<f64>::zeros();
    for c in corners {
        let d = c - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / corners.len() as f64);
    if eig.eigenvalues.min() < 1e-9 {
        return Err(Error::ChessboardFailed("corners are collinear".into()));
    }

    let object: Vec<Vector2<f64>> = grid.iter().map(|p| Vector2::new(p.x, p.y)).collect();
    let h = homography_dlt(&object, corners)?;

    // M = K^-1 H = [r1 r2 t] up to scale
    let k_inv = Matrix3::new(
        1.0 / k.fx,
        0.0,
        -k.cx / k.fx,
        0.0,
        1.0 / k.fy,
        -k.cy / k.fy,
        0.0,
        0.0,
        1.0,
    );
    let mut m = k_inv * h;
    // board must sit in front of the camera
    if m[(2, 2)] < 0.0 {
        m = -m;
    }
    let m1 = m.column(0).into_owned();
    let m2 = m.column(1).into_owned();
    let m3 = m.column(2).into_owned();
    let scale = 2.0 / (m1.norm() + m2.norm());
    let r1 = m1 * scale;
    let r2 = m2 * scale;
    let r3 = r1.cross(&r2);
    let rot_raw = Matrix3::from_columns(&[r1, r2, r3]);
    let rotation = Pose::new(rot_raw, Vector3::zeros()).projected_to_so3().rotation;
    let pose = Pose::new(rotation, m3 * scale);

    let cam_points: Vec<Vector3<f64>> = grid.iter().map(|p| pose.transform(p)).collect();
    let mut rms = 0.0;
    for (p, c) in cam_points.iter().zip(corners) {
        if p.z <= 1e-6 {
            return Err(Error::ChessboardFailed("corner behind the camera".into()));
        }
        let proj = Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
        rms += (proj - c).norm_squared();
    }
    rms = (rms / corners.len() as f64).sqrt();
    if rms > MAX_BOARD_REPROJECTION_RMS {
        return Err(Error::ChessboardFailed(format!(
            "reprojection rms {rms:.2} px exceeds {MAX_BOARD_REPROJECTION_RMS}"
        )));
    }

    let normal = rotation * Vector3::z();
    let d = -normal.dot(&pose.translation);
    let plane = PlaneModel::new(normal, d, Vec::new()).oriented_toward_origin();

    Ok(BoardDetection {
        pose,
        plane,
        cam_points,
        reprojection_rms: rms,
    })
}

/// Normalized DLT homography mapping `src` to `dst`.
fn homography_dlt(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Result<Matrix3<f64>> {
    let normalize = |pts: &[Vector2<f64>]| -> (Matrix3<f64>, Vec<Vector2<f64>>) {
        let mean = pts.iter().sum::<Vector2<f64>>() / pts.len() as f64;
        let scale = {
            let mean_dist =
                pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / pts.len() as f64;
            if mean_dist > 1e-12 {
                std::f64::consts::SQRT_2 / mean_dist
            } else {
                1.0
            }
        };
        let t = Matrix3::new(
            scale,
            0.0,
            -scale * mean.x,
            0.0,
            scale,
            -scale * mean.y,
            0.0,
            0.0,
            1.0,
        );
        let mapped = pts.iter().map(|p| (p - mean) * scale).collect();
        (t, mapped)
    };
    let (t_src, src_n) = normalize(src);
    let (t_dst, dst_n) = normalize(dst);

    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * src.len(), 9);
    for (i, (s, d)) in src_n.iter().zip(&dst_n).enumerate() {
        let (x, y) = (s.x, s.y);
        let (u, v) = (d.x, d.y);
        a.row_mut(2 * i).copy_from_slice(&[
            -x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u,
        ]);
        a.row_mut(2 * i + 1).copy_from_slice(&[
            0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v,
        ]);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("svd with v_t");
    let sv = &svd.singular_values;
    if sv.len() >= 8 && sv[sv.len().min(8) - 1] < 1e-12 && sv[0] < 1e-12 {
        return Err(Error::ChessboardFailed("degenerate corner layout".into()));
    }
    let h = v_t.row(v_t.nrows() - 1);
    let h_mat = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);

    // denormalize: H = T_dst^-1 * H_n * T_src
    let t_dst_inv = t_dst.try_inverse().expect("normalization invertible");
    Ok(t_dst_inv * h_mat * t_src)
}

/// RANSAC parameters for the LiDAR plane segmentation.
#[derive(Debug, Clone, Copy)]
pub struct RansacParams {
    pub threshold: f64,
    pub iterations: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            threshold: 0.02,
            iterations: 500,
            min_inliers: 20,
            seed: 0,
        }
    }
}

/// Fits the board plane to the LiDAR points whose projection (through the
/// initial extrinsic) falls inside the board region. RANSAC selects the
/// consensus plane; a least-squares eigen refit polishes it.
pub fn segment_lidar_plane(
    cloud: &[Vector3<f64>],
    region: &BoardRegion,
    t_init: &Pose,
    k: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<PlaneModel> {
    let cam_from_lidar = t_init.inverse();
    let mut candidates: Vec<Vector3<f64>> = Vec::new();
    for p_lidar in cloud {
        let p_cam = cam_from_lidar.transform(p_lidar);
        if p_cam.z <= CameraIntrinsics::DEFAULT_MIN_DEPTH {
            continue;
        }
        let uv = Vector2::new(
            k.fx * p_cam.x / p_cam.z + k.cx,
            k.fy * p_cam.y / p_cam.z + k.cy,
        );
        if region.contains(&uv) {
            candidates.push(*p_lidar);
        }
    }
    if candidates.len() < params.min_inliers {
        return Err(Error::PlaneFitRejected {
            inliers: candidates.len(),
            min_inliers: params.min_inliers,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best_count = 0usize;
    let mut best_model: Option<(Vector3<f64>, f64)> = None;
    for _ in 0..params.iterations {
        let i = rng.gen_range(0..candidates.len());
        let j = rng.gen_range(0..candidates.len());
        let l = rng.gen_range(0..candidates.len());
        if i == j || j == l || i == l {
            continue;
        }
        let (a, b, c) = (candidates[i], candidates[j], candidates[l]);
        let n = (b - a).cross(&(c - a));
        if n.norm() < 1e-9 {
            continue;
        }
        let n = n.normalize();
        let d = -n.dot(&a);
        let count = candidates
            .iter()
            .filter(|p| (n.dot(p) + d).abs() <= params.threshold)
            .count();
        if count > best_count {
            best_count = count;
            best_model = Some((n, d));
        }
    }
    let Some((n0, d0)) = best_model else {
        return Err(Error::PlaneFitRejected {
            inliers: 0,
            min_inliers: params.min_inliers,
        });
    };
    if best_count < params.min_inliers {
        return Err(Error::PlaneFitRejected {
            inliers: best_count,
            min_inliers: params.min_inliers,
        });
    }

    let inliers: Vec<Vector3<f64>> = candidates
        .iter()
        .filter(|p| (n0.dot(p) + d0).abs() <= params.threshold)
        .copied()
        .collect();
    refit_plane(&inliers)
}

/// Least-squares plane through the points: centroid plus the smallest
/// eigenvector of the centered covariance.
pub fn refit_plane(points: &[Vector3<f64>]) -> Result<PlaneModel> {
    let n = points.len();
    if n < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "plane refit needs 3 points, got {n}"
        )));
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("finite eigenvalues")
    });
    // rank 1 means the points are collinear
    if eig.eigenvalues[order[1]] < 1e-12 * eig.eigenvalues[order[2]].max(1e-12) {
        return Err(Error::DegenerateGeometry(
            "plane refit on collinear points".into(),
        ));
    }
    let normal = eig.eigenvectors.column(order[0]).into_owned();
    let d = -normal.dot(&centroid);
    Ok(PlaneModel::new(normal, d, points.to_vec()).oriented_toward_origin())
}

/// Picks the three plane pairs whose camera-frame normals are most mutually
/// non-parallel (the argmax of `exp(-na.nb - nb.nc - na.nc)` over all index
/// triples; the normalizer cancels in the argmax).
pub fn select_plane_triplet(pairs: &[PlanePair]) -> Result<[usize; 3]> {
    if pairs.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "triplet selection needs 3 pairs, got {}",
            pairs.len()
        )));
    }
    let mut best: Option<([usize; 3], f64)> = None;
    for i in 0..pairs.len() {
        for j in (i + 1)..pairs.len() {
            for l in (j + 1)..pairs.len() {
                let (a, b, c) = (
                    &pairs[i].cam_plane.normal,
                    &pairs[j].cam_plane.normal,
                    &pairs[l].cam_plane.normal,
                );
                let score = a.dot(b) + b.dot(c) + a.dot(c);
                if best.is_none_or(|(_, s)| score < s) {
                    best = Some(([i, j, l], score));
                }
            }
        }
    }
    let (idx, _) = best.expect("at least one triple");

    let min_angle = MIN_TRIPLET_ANGLE_DEG.to_radians();
    let mut max_angle = 0.0f64;
    for (a, b) in [(0, 1), (1, 2), (0, 2)] {
        let dot = pairs[idx[a]]
            .cam_plane
            .normal
            .dot(&pairs[idx[b]].cam_plane.normal)
            .abs()
            .clamp(0.0, 1.0);
        max_angle = max_angle.max(dot.acos());
    }
    if max_angle < min_angle {
        return Err(Error::DegenerateGeometry(format!(
            "best plane triplet spans only {:.2} deg",
            max_angle.to_degrees()
        )));
    }
    Ok(idx)
}

/// Rotation aligning camera normals onto LiDAR normals (`n_v ~ R n_c`) via
/// SVD of the normal covariance, with the determinant sign corrected so the
/// result is always a proper rotation.
pub fn solve_rotation(triplet: &[&PlanePair; 3]) -> Result<Matrix3<f64>> {
    let mut h = Matrix3::zeros();
    for pair in triplet {
        h += pair.cam_plane.normal * pair.lidar_plane.normal.transpose();
    }
    let svd = h.svd(true, true);
    if svd.singular_values[1] < 1e-9 {
        return Err(Error::DegenerateGeometry(
            "normal covariance has rank < 2".into(),
        ));
    }
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let mut v = v_t.transpose();
    let r = v * u.transpose();
    if r.determinant() < 0.0 {
        v.column_mut(2).neg_mut();
    }
    Ok(v * u.transpose())
}

/// Translation minimizing the summed point-to-plane distances of the camera
/// board points against the LiDAR planes (closed-form 3x3 normal equations).
pub fn solve_translation(triplet: &[&PlanePair; 3], rotation: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for pair in triplet {
        let n = pair.lidar_plane.normal;
        let d = pair.lidar_plane.d;
        let m = pair.cam_points.len() as f64;
        a += n * n.transpose() * m;
        let mut acc = 0.0;
        for p in &pair.cam_points {
            acc += n.dot(&(rotation * p)) + d;
        }
        b -= n * acc;
    }
    let eig = SymmetricEigen::new(a);
    let max_l = eig.eigenvalues.max();
    let min_l = eig.eigenvalues.min();
    if min_l <= 0.0 || max_l / min_l > 1e8 {
        return Err(Error::DegenerateGeometry(format!(
            "translation system condition {:.2e} (planes nearly parallel)",
            if min_l > 0.0 { max_l / min_l } else { f64::INFINITY }
        )));
    }
    let mut t = Vector3::zeros();
    for i in 0..3 {
        let q = eig.eigenvectors.column(i);
        t += q * (q.dot(&b) / eig.eigenvalues[i]);
    }
    Ok(t)
}

/// Point-to-plane cost of an extrinsic candidate over all pairs.
pub fn extrinsic_cost(pairs: &[PlanePair], t: &Pose) -> f64 {
    let mut cost = 0.0;
    for pair in pairs {
        let n = pair.lidar_plane.normal;
        let d = pair.lidar_plane.d;
        for p in &pair.cam_points {
            let r = n.dot(&t.transform(p)) + d;
            cost += r * r;
        }
    }
    cost
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub pose: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

/// Refines the extrinsic over all plane pairs by first-order descent in
/// twist coordinates (left-multiplicative updates) with a backtracking line
/// search. The step direction is the Jacobi-preconditioned negative gradient
/// and the initial step length is exact for the local quadratic model, so
/// accepted iterations never increase the cost.
pub fn refine_extrinsic(
    pairs: &[PlanePair],
    t_init: &Pose,
    max_iterations: usize,
) -> Result<RefineResult> {
    if pairs.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "refinement needs 3 pairs, got {}",
            pairs.len()
        )));
    }
    let mut pose = *t_init;
    let mut cost = extrinsic_cost(pairs, &pose);
    let initial_cost = cost;
    let mut iterations = 0usize;
    let mut consecutive_failures = 0usize;

    for _ in 0..max_iterations {
        iterations += 1;
        // gradient and Gauss-Newton curvature in twist coordinates
        let mut grad = nalgebra::Vector6::<f64>::zeros();
        let mut h = nalgebra::Matrix6::<f64>::zeros();
        for pair in pairs {
            let n = pair.lidar_plane.normal;
            let d = pair.lidar_plane.d;
            for p in &pair.cam_points {
                let q = pose.transform(p);
                let r = n.dot(&q) + d;
                let jw = q.cross(&n);
                let j = nalgebra::Vector6::new(jw.x, jw.y, jw.z, n.x, n.y, n.z);
                grad += j * r;
                h += j * j.transpose();
            }
        }
        if grad.norm() < 1e-14 {
            break;
        }
        // Jacobi-preconditioned descent direction
        let mut dir = nalgebra::Vector6::zeros();
        for i in 0..6 {
            let scale = h[(i, i)].max(1e-12);
            dir[i] = -grad[i] / scale;
        }
        let curvature = (dir.transpose() * h * dir)[0];
        if curvature <= 0.0 {
            break;
        }
        let mut alpha = -grad.dot(&dir) / curvature;

        let mut accepted = false;
        for _ in 0..30 {
            let step = Twist::from_vector(&(dir * alpha));
            let candidate = Pose::exp(&step).compose(&pose);
            let c = extrinsic_cost(pairs, &candidate);
            if c < cost {
                let decrease = cost - c;
                pose = candidate;
                cost = c;
                accepted = true;
                if decrease < 1e-10 {
                    return Ok(RefineResult {
                        pose,
                        initial_cost,
                        final_cost: cost,
                        iterations,
                    });
                }
                break;
            }
            alpha *= 0.5;
        }
        if accepted {
            consecutive_failures = 0;
        } else {
            consecutive_failures += 1;
            if consecutive_failures >= 10 {
                return Err(Error::CalibrationDiverged { iterations });
            }
        }
    }

    Ok(RefineResult {
        pose,
        initial_cost,
        final_cost: cost,
        iterations,
    })
}

/// One raw calibration observation: detected corners plus the synchronized
/// LiDAR cloud. Corner detection on real imagery is an input adapter (a
/// sidecar file per image); everything downstream of corners is automatic.
#[derive(Debug, Clone)]
pub struct CalibObservation {
    pub corners: Vec<Vector2<f64>>,
    pub cloud: Vec<Vector3<f64>>,
}

#[derive(Debug)]
pub struct CalibrationOutcome {
    pub extrinsic: Pose,
    pub closed_form: Pose,
    pub pairs: Vec<PlanePair>,
    pub rejected: usize,
    pub refine: RefineResult,
}

/// Full calibration over a temporal stream: detect the board, segment the
/// LiDAR plane, select the best triplet, solve closed form, refine over all
/// pairs.
pub fn calibrate(
    observations: &[CalibObservation],
    board: &BoardGeometry,
    k: &CameraIntrinsics,
    t_init: &Pose,
    ransac: &RansacParams,
    refine_max_iterations: usize,
) -> Result<CalibrationOutcome> {
    let mut pairs = Vec::new();
    let mut rejected = 0usize;
    for (i, obs) in observations.iter().enumerate() {
        let detection = match detect_chessboard_pose(&obs.corners, board, k) {
            Ok(d) => d,
            Err(_) => {
                rejected += 1;
                continue;
            }
        };
        let region = match BoardRegion::from_board_pose(&detection.pose, board, k) {
            Ok(r) => r,
            Err(_) => {
                rejected += 1;
                continue;
            }
        };
        let params = RansacParams {
            seed: ransac.seed.wrapping_add(i as u64),
            ..*ransac
        };
        match segment_lidar_plane(&obs.cloud, &region, t_init, k, &params) {
            Ok(lidar_plane) => {
                // the pair must agree with the initial extrinsic
                let n_pred = t_init.rotation * detection.plane.normal;
                let d_pred = detection.plane.d - n_pred.dot(&t_init.translation);
                let angle = n_pred
                    .dot(&lidar_plane.normal)
                    .clamp(-1.0, 1.0)
                    .acos()
                    .to_degrees();
                if angle > MAX_PAIR_NORMAL_ANGLE_DEG
                    || (d_pred - lidar_plane.d).abs() > MAX_PAIR_PLANE_OFFSET_M
                {
                    rejected += 1;
                    continue;
                }
                pairs.push(PlanePair {
                    cam_plane: detection.plane,
                    lidar_plane,
                    cam_points: detection.cam_points,
                });
            }
            Err(_) => rejected += 1,
        }
    }

    let idx = select_plane_triplet(&pairs)?;
    let triplet = [&pairs[idx[0]], &pairs[idx[1]], &pairs[idx[2]]];
    let rotation = solve_rotation(&triplet)?;
    let translation = solve_translation(&triplet, &rotation)?;
    let closed_form = Pose::new(rotation, translation);
    let refine = refine_extrinsic(&pairs, &closed_form, refine_max_iterations)?;

    Ok(CalibrationOutcome {
        extrinsic: refine.pose,
        closed_form,
        pairs,
        rejected,
        refine,
    })
}

/// Writes the calibration file: the 4x4 row-major camera-to-LiDAR transform
/// followed by the intrinsics block.
pub fn write_calibration(path: &Path, extrinsic: &Pose, k: &CameraIntrinsics) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "# camera-to-lidar extrinsic (4x4 row-major)").expect("string write");
    for r in 0..3 {
        writeln!(
            text,
            "{:.12} {:.12} {:.12} {:.12}",
            extrinsic.rotation[(r, 0)],
            extrinsic.rotation[(r, 1)],
            extrinsic.rotation[(r, 2)],
            extrinsic.translation[r]
        )
        .expect("string write");
    }
    writeln!(text, "0 0 0 1").expect("string write");
    writeln!(text, "# intrinsics: fx fy cx cy width height").expect("string write");
    writeln!(
        text,
        "{:.12} {:.12} {:.12} {:.12} {} {}",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    )
    .expect("string write");
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_calibration(path: &Path) -> Result<(Pose, CameraIntrinsics)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(path, format!("cannot read calibration: {e}")))?;
    let nums: Vec<f64> = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .flat_map(|l| l.split_whitespace())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::data(path, format!("bad number {t:?}")))
        })
        .collect::<Result<_>>()?;
    if nums.len() != 22 {
        return Err(Error::data(
            path,
            format!("expected 16 transform + 6 intrinsic numbers, got {}", nums.len()),
        ));
    }
    let rotation = Matrix3::new(
        nums[0], nums[1], nums[2], nums[4], nums[5], nums[6], nums[8], nums[9], nums[10],
    );
    let translation = Vector3::new(nums[3], nums[7], nums[11]);
    let pose = Pose::new(rotation, translation);
    if pose.orthonormality_error() > 1e-6 {
        return Err(Error::data(path, "extrinsic rotation is not orthonormal"));
    }
    let k = CameraIntrinsics::new(
        nums[16],
        nums[17],
        nums[18],
        nums[19],
        nums[20] as u32,
        nums[21] as u32,
    )?;
    Ok((pose, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;

    fn default_k() -> CameraIntrinsics {
        CameraIntrinsics::new(160.0, 160.0, 159.5, 127.5, 320, 256).unwrap()
    }

    fn full_region(k: &CameraIntrinsics) -> BoardRegion {
        BoardRegion::new(vec![
            Vector2::new(-1e6, -1e6),
            Vector2::new(k.width as f64 + 1e6, -1e6),
            Vector2::new(k.width as f64 + 1e6, k.height as f64 + 1e6),
            Vector2::new(-1e6, k.height as f64 + 1e6),
        ])
    }

    fn plane_points_z2(n: usize) -> Vec<Vector3<f64>> {
        // grid on the z=2 plane in front of the sensor
        let mut out = Vec::new();
        let side = (n as f64).sqrt().ceil() as usize;
        for i in 0..n {
            let x = (i % side) as f64 * 0.05 - 0.5;
            let y = (i / side) as f64 * 0.05 - 0.3;
            out.push(Vector3::new(x, y, 2.0));
        }
        out
    }

    #[test]
    fn segment_noiseless_plane() {
        let k = default_k();
        let cloud = plane_points_z2(50);
        let model = segment_lidar_plane(
            &cloud,
            &full_region(&k),
            &Pose::identity(),
            &k,
            &RansacParams::default(),
        )
        .unwrap();
        assert_eq!(model.inliers.len(), 50);
        assert!((model.normal.z.abs() - 1.0).abs() < 1e-9);
        assert!((model.d.abs() - 2.0).abs() < 1e-9);
        // oriented toward the sensor origin
        assert!(model.signed_distance(&Vector3::zeros()) > 0.0);
    }

    #[test]
    fn segment_plane_with_outliers() {
        let k = default_k();
        let mut cloud = plane_points_z2(80);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            cloud.push(Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(0.5..1.8),
            ));
        }
        let model = segment_lidar_plane(
            &cloud,
            &full_region(&k),
            &Pose::identity(),
            &k,
            &RansacParams::default(),
        )
        .unwrap();
        assert_eq!(model.inliers.len(), 80, "outliers must be excluded");
        assert!((model.normal.z.abs() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn segment_collinear_points_rejected() {
        let k = default_k();
        let cloud: Vec<Vector3<f64>> = (0..10)
            .map(|i| Vector3::new(i as f64 * 0.05, 0.0, 2.0))
            .collect();
        let params = RansacParams {
            min_inliers: 5,
            ..RansacParams::default()
        };
        let err =
            segment_lidar_plane(&cloud, &full_region(&k), &Pose::identity(), &k, &params)
                .unwrap_err();
        assert!(
            matches!(err, Error::PlaneFitRejected { .. } | Error::DegenerateGeometry(_)),
            "unexpected error {err}"
        );
    }

    fn pair_with_normals(nc: Vector3<f64>, nv: Vector3<f64>) -> PlanePair {
        PlanePair {
            cam_plane: PlaneModel::new(nc, 1.0, Vec::new()),
            lidar_plane: PlaneModel::new(nv, 1.0, Vec::new()),
            cam_points: Vec::new(),
        }
    }

    #[test]
    fn triplet_prefers_orthogonal_normals() {
        let near = |base: Vector3<f64>, e: f64| (base + Vector3::new(e, e, 0.0)).normalize();
        let pairs = vec![
            pair_with_normals(near(Vector3::z(), 0.01), Vector3::z()),
            pair_with_normals(near(Vector3::z(), 0.02), Vector3::z()),
            pair_with_normals(Vector3::x(), Vector3::x()),
            pair_with_normals(Vector3::y(), Vector3::y()),
            pair_with_normals(Vector3::z(), Vector3::z()),
            pair_with_normals(near(Vector3::z(), 0.03), Vector3::z()),
        ];
        let idx = select_plane_triplet(&pairs).unwrap();
        assert_eq!(idx, [2, 3, 4]);
    }

    #[test]
    fn triplet_of_exactly_three() {
        let pairs = vec![
            pair_with_normals(Vector3::x(), Vector3::x()),
            pair_with_normals(Vector3::y(), Vector3::y()),
            pair_with_normals(Vector3::z(), Vector3::z()),
        ];
        assert_eq!(select_plane_triplet(&pairs).unwrap(), [0, 1, 2]);
    }

    #[test]
    fn triplet_matches_brute_force_oracle() {
        use rand::SeedableRng as _;
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let pairs: Vec<PlanePair> = (0..10)
                .map(|_| {
                    let n = Vector3::new(
                        rng.gen_range(-1.0..1.0f64),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                    .normalize();
                    pair_with_normals(n, n)
                })
                .collect();

            // independent exhaustive argmax of exp(-na.nb - nb.nc - na.nc)
            let mut best = (f64::NEG_INFINITY, [0usize; 3]);
            for i in 0..10 {
                for j in (i + 1)..10 {
                    for l in (j + 1)..10 {
                        let (a, b, c) = (
                            pairs[i].cam_plane.normal,
                            pairs[j].cam_plane.normal,
                            pairs[l].cam_plane.normal,
                        );
                        let p = (-(a.dot(&b)) - b.dot(&c) - a.dot(&c)).exp();
                        if p > best.0 {
                            best = (p, [i, j, l]);
                        }
                    }
                }
            }
            match select_plane_triplet(&pairs) {
                Ok(idx) => assert_eq!(idx, best.1),
                Err(_) => {
                    // only legitimate when the best triple is near-parallel
                    let [i, j, l] = best.1;
                    let worst = pairs[i]
                        .cam_plane
                        .normal
                        .dot(&pairs[j].cam_plane.normal)
                        .abs()
                        .min(1.0)
                        .acos()
                        .max(
                            pairs[j]
                                .cam_plane
                                .normal
                                .dot(&pairs[l].cam_plane.normal)
                                .abs()
                                .min(1.0)
                                .acos(),
                        );
                    assert!(worst.to_degrees() < MIN_TRIPLET_ANGLE_DEG);
                }
            }
        }
    }

    #[test]
    fn triplet_all_parallel_is_degenerate() {
        let n = Vector3::z();
        let tilt = |e: f64| (n + Vector3::new(e, 0.0, 0.0)).normalize();
        let pairs = vec![
            pair_with_normals(tilt(0.0), n),
            pair_with_normals(tilt(0.01), n),
            pair_with_normals(tilt(0.02), n),
        ];
        assert!(matches!(
            select_plane_triplet(&pairs),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn rotation_identity_for_identical_normals() {
        let pairs = [
            pair_with_normals(Vector3::x(), Vector3::x()),
            pair_with_normals(Vector3::y(), Vector3::y()),
            pair_with_normals(Vector3::z(), Vector3::z()),
        ];
        let r = solve_rotation(&[&pairs[0], &pairs[1], &pairs[2]]).unwrap();
        assert!((r - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn rotation_recovers_random_rotation() {
        use rand::SeedableRng as _;
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let r_true = crate::geom::tests::random_pose(&mut rng).rotation;
            let normals = [
                Vector3::new(1.0, 0.2, 0.1).normalize(),
                Vector3::new(-0.1, 1.0, 0.3).normalize(),
                Vector3::new(0.2, -0.3, 1.0).normalize(),
            ];
            let pairs: Vec<PlanePair> = normals
                .iter()
                .map(|n| pair_with_normals(*n, (r_true * n).normalize()))
                .collect();
            let r = solve_rotation(&[&pairs[0], &pairs[1], &pairs[2]]).unwrap();
            assert!((r - r_true).norm() < 1e-9, "error {}", (r - r_true).norm());
        }
    }

    #[test]
    fn rotation_reflection_trap_is_corrected() {
        // inconsistent normals whose raw V U^T has det -1
        let pairs = [
            pair_with_normals(Vector3::x(), Vector3::x()),
            pair_with_normals(Vector3::y(), Vector3::y()),
            pair_with_normals(Vector3::z(), -Vector3::z()),
        ];
        let r = solve_rotation(&[&pairs[0], &pairs[1], &pairs[2]]).unwrap();
        assert!((r.determinant() - 1.0).abs() < 1e-9);
        assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
    }

    fn synthetic_pairs(extrinsic: &Pose, n: usize, seed: u64) -> Vec<PlanePair> {
        // camera-frame planes with points, lidar planes derived exactly
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for i in 0..n {
            let base = match i % 3 {
                0 => Vector3::new(0.1, 0.1, 1.0),
                1 => Vector3::new(1.0, 0.15, 0.4),
                _ => Vector3::new(0.1, 1.0, 0.45),
            };
            let jitter = Vector3::new(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            );
            let n_c = (base + jitter).normalize();
            let dist = rng.gen_range(1.5..3.0);
            // plane at `dist` along its normal, seen from the camera
            let d_c = dist;
            let n_c = -n_c; // normal toward the camera, origin on positive side
            let cam_plane = PlaneModel::new(n_c, d_c, Vec::new());

            // points on the camera plane
            let center = -n_c * dist;
            let u = n_c.cross(&Vector3::y()).normalize();
            let v = n_c.cross(&u);
            let mut cam_points = Vec::new();
            for r in 0..5 {
                for c in 0..6 {
                    cam_points.push(
                        center + u * (c as f64 * 0.06 - 0.15) + v * (r as f64 * 0.06 - 0.12),
                    );
                }
            }

            // exact lidar plane through the transformed points
            let n_v = extrinsic.rotation * n_c;
            let d_v = d_c - n_v.dot(&extrinsic.translation);
            let lidar_plane =
                PlaneModel::new(n_v, d_v, Vec::new()).oriented_toward_origin();
            pairs.push(PlanePair {
                cam_plane,
                lidar_plane,
                cam_points,
            });
        }
        pairs
    }

    #[test]
    fn translation_zero_for_coincident_frames() {
        let pairs = synthetic_pairs(&Pose::identity(), 3, 1);
        let idx = [&pairs[0], &pairs[1], &pairs[2]];
        let t = solve_translation(&idx, &Matrix3::identity()).unwrap();
        assert!(t.norm() < 1e-9, "t = {t:?}");
    }

    #[test]
    fn translation_recovers_offset() {
        let truth = Pose::from_translation(Vector3::new(0.1, -0.05, 0.2));
        let pairs = synthetic_pairs(&truth, 3, 2);
        let idx = [&pairs[0], &pairs[1], &pairs[2]];
        let t = solve_translation(&idx, &Matrix3::identity()).unwrap();
        assert!((t - truth.translation).norm() < 1e-9, "t = {t:?}");
    }

    #[test]
    fn translation_parallel_planes_degenerate() {
        let mk = |n: Vector3<f64>, d: f64| {
            let mut p = pair_with_normals(n, n);
            p.lidar_plane = PlaneModel::new(n, d, Vec::new());
            p.cam_points = vec![Vector3::new(0.0, 0.0, d)];
            p
        };
        let pairs = [
            mk(Vector3::z(), 1.0),
            mk(Vector3::z(), 2.0),
            mk(Vector3::x(), 1.0),
        ];
        assert!(matches!(
            solve_translation(&[&pairs[0], &pairs[1], &pairs[2]], &Matrix3::identity()),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn refine_at_ground_truth_is_stationary() {
        let truth = crate::synth::nominal_extrinsic();
        let pairs = synthetic_pairs(&truth, 20, 3);
        let out = refine_extrinsic(&pairs, &truth, 200).unwrap();
        assert!(out.final_cost <= out.initial_cost);
        assert!(out.initial_cost < 1e-18);
        assert!((out.pose.translation - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn refine_recovers_from_perturbation() {
        let truth = crate::synth::nominal_extrinsic();
        let pairs = synthetic_pairs(&truth, 20, 4);
        let start = crate::synth::perturb_pose(&truth, 2.0, 0.05, 99);
        let out = refine_extrinsic(&pairs, &start, 200).unwrap();
        let rot_err = truth.rotation.transpose() * out.pose.rotation;
        let angle = Pose::new(rot_err, Vector3::zeros()).rotation_angle().to_degrees();
        let trans_err = (out.pose.translation - truth.translation).norm();
        assert!(angle < 0.05, "rotation error {angle} deg");
        assert!(trans_err < 1e-3, "translation error {trans_err} m");
        assert!(out.final_cost <= out.initial_cost);
    }

    #[test]
    fn chessboard_round_trip() {
        let k = default_k();
        let board = BoardGeometry {
            rows: 5,
            cols: 6,
            square_size: 0.06,
        };
        let pose_true = Pose::new(
            Pose::from_axis_angle(&Vector3::x_axis(), 0.3).rotation,
            Vector3::new(-0.1, 0.05, 1.8),
        );
        let corners: Vec<Vector2<f64>> = board
            .corner_grid()
            .iter()
            .map(|p| {
                let q = pose_true.transform(p);
                Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy)
            })
            .collect();
        let det = detect_chessboard_pose(&corners, &board, &k).unwrap();
        assert!((det.pose.rotation - pose_true.rotation).norm() < 1e-6);
        assert!((det.pose.translation - pose_true.translation).norm() < 1e-6);
        assert!(det.reprojection_rms < 1e-6);
    }

    #[test]
    fn chessboard_fronto_parallel_plane() {
        let k = default_k();
        let board = BoardGeometry {
            rows: 5,
            cols: 6,
            square_size: 0.06,
        };
        let pose_true = Pose::from_translation(Vector3::new(-0.15, -0.12, 1.0));
        let corners: Vec<Vector2<f64>> = board
            .corner_grid()
            .iter()
            .map(|p| {
                let q = pose_true.transform(p);
                Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy)
            })
            .collect();
        let det = detect_chessboard_pose(&corners, &board, &k).unwrap();
        // normal toward the camera, plane offset d = 1
        assert!((det.plane.normal - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
        assert!((det.plane.d - 1.0).abs() < 1e-6);
    }

    #[test]
    fn chessboard_shuffled_row_fails() {
        let k = default_k();
        let board = BoardGeometry {
            rows: 5,
            cols: 6,
            square_size: 0.06,
        };
        let pose_true = Pose::new(
            Pose::from_axis_angle(&Vector3::y_axis(), -0.2).rotation,
            Vector3::new(0.0, 0.0, 2.0),
        );
        let mut corners: Vec<Vector2<f64>> = board
            .corner_grid()
            .iter()
            .map(|p| {
                let q = pose_true.transform(p);
                Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy)
            })
            .collect();
        corners.swap(0, 11);
        corners.swap(2, 9);
        assert!(matches!(
            detect_chessboard_pose(&corners, &board, &k),
            Err(Error::ChessboardFailed(_))
        ));
    }

    #[test]
    fn chessboard_too_few_or_collinear() {
        let k = default_k();
        let board = BoardGeometry {
            rows: 5,
            cols: 6,
            square_size: 0.06,
        };
        assert!(detect_chessboard_pose(&[Vector2::new(0.0, 0.0); 3], &board, &k).is_err());
        let collinear: Vec<Vector2<f64>> =
            (0..30).map(|i| Vector2::new(i as f64, 100.0)).collect();
        assert!(matches!(
            detect_chessboard_pose(&collinear, &board, &k),
            Err(Error::ChessboardFailed(_))
        ));
    }

    #[test]
    fn calibration_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.txt");
        let pose = crate::synth::nominal_extrinsic();
        let k = default_k();
        write_calibration(&path, &pose, &k).unwrap();
        let (pose2, k2) = read_calibration(&path).unwrap();
        assert!((pose.rotation - pose2.rotation).norm() < 1e-10);
        assert!((pose.translation - pose2.translation).norm() < 1e-10);
        assert_eq!(k, k2);
    }

    #[test]
    fn board_geometry_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("board.txt");
        let b = BoardGeometry {
            rows: 5,
            cols: 6,
            square_size: 0.06,
        };
        b.write(&path).unwrap();
        assert_eq!(BoardGeometry::read(&path).unwrap(), b);
    }
}
