//! Rigid-body geometry: SE(3) poses, twist coordinates, the pinhole camera
//! model, and TUM-format trajectory I/O.
//!
//! Poses store the rotation as a 3x3 matrix; quaternions appear only in
//! trajectory file I/O. Pose updates are left-multiplicative throughout the
//! crate: `T_new = exp(xi) * T`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

/// Rotation angle below which series expansions replace the closed-form
/// exp/log coefficients (avoids 0/0 and cancellation in the difference terms).
const SMALL_ANGLE: f64 = 1e-4;

/// Orthonormality drift that triggers re-projection onto SO(3) in `compose`.
const ORTHO_DRIFT_LIMIT: f64 = 1e-7;

/// Skew-symmetric (hat) matrix of a 3-vector: `skew(w) * p == w x p`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Twist coordinates `[w, v]`: angular part in radians, linear in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub angular: Vector3<f64>,
    pub linear: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            angular: Vector3::zeros(),
            linear: Vector3::zeros(),
        }
    }

    pub fn new(angular: Vector3<f64>, linear: Vector3<f64>) -> Self {
        Twist { angular, linear }
    }

    /// Stacked 6-vector, angular block first.
    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.angular.x,
            self.angular.y,
            self.angular.z,
            self.linear.x,
            self.linear.y,
            self.linear.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            angular: Vector3::new(v[0], v[1], v[2]),
            linear: Vector3::new(v[3], v[4], v[5]),
        }
    }

    /// Euclidean norm of the stacked 6-vector (radians and meters mixed).
    pub fn norm(&self) -> f64 {
        (self.angular.norm_squared() + self.linear.norm_squared()).sqrt()
    }
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about `axis` (normalized internally) by `angle` radians.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let w = axis.normalize() * angle;
        Pose::exp(&Twist::new(w, Vector3::zeros()))
    }

    /// Applies the rigid transform to a point: `R * p + t`.
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotates a direction without translating it.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self * other`, re-projecting onto SO(3) when numerical drift
    /// accumulates past `ORTHO_DRIFT_LIMIT`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut out = Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        if out.orthonormality_error() > ORTHO_DRIFT_LIMIT {
            out = out.projected_to_so3();
        }
        out
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Relative pose `self^-1 * other` (maps `other`-frame coordinates into
    /// the `self` frame when both are world poses).
    pub fn relative(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    /// `max(||R^T R - I||_F, |det R - 1|)`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation;
        let drift = (gram - Matrix3::identity()).norm();
        let det = (self.rotation.determinant() - 1.0).abs();
        drift.max(det)
    }

    /// Nearest proper rotation by SVD projection, translation unchanged.
    pub fn projected_to_so3(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.expect("svd with u");
        let v_t = svd.v_t.expect("svd with v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Pose {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let cos = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        cos.acos()
    }

    /// Closed-form SE(3) exponential (Rodrigues rotation plus the V-matrix
    /// coupling of the translation).
    pub fn exp(xi: &Twist) -> Pose {
        let w = xi.angular;
        let theta2 = w.norm_squared();
        let theta = theta2.sqrt();
        let wx = skew(&w);
        let wx2 = wx * wx;

        let (a, b, c) = if theta < SMALL_ANGLE {
            let t4 = theta2 * theta2;
            (
                1.0 - theta2 / 6.0 + t4 / 120.0,
                0.5 - theta2 / 24.0 + t4 / 720.0,
                1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0,
            )
        } else {
            let s = theta.sin();
            let half = (0.5 * theta).sin();
            // 1 - cos(theta) == 2 sin^2(theta/2), stable for small angles
            let b = 2.0 * half * half / theta2;
            (s / theta, b, (theta - s) / (theta2 * theta))
        };

        let rotation = Matrix3::identity() + wx * a + wx2 * b;
        let v_mat = Matrix3::identity() + wx * b + wx2 * c;
        Pose {
            rotation,
            translation: v_mat * xi.linear,
        }
    }

    /// Principal-branch SE(3) logarithm. Fails within 1e-6 of the pi branch
    /// cut where the rotation axis is ambiguous.
    pub fn log(&self) -> Result<Twist> {
        let theta = self.rotation_angle();
        if theta > PI - 1e-6 {
            return Err(Error::LogBranchAmbiguity { angle: theta });
        }
        let theta2 = theta * theta;
        let r = &self.rotation;
        let vee = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
        // vee == 2 sin(theta)/theta * w
        let w = if theta < SMALL_ANGLE {
            vee * (0.5 * (1.0 + theta2 / 6.0 + 7.0 * theta2 * theta2 / 360.0))
        } else {
            vee * (theta / (2.0 * theta.sin()))
        };

        let wx = skew(&w);
        let d = if theta < SMALL_ANGLE {
            1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
        } else {
            let half = 0.5 * theta;
            // 1/theta^2 * (1 - theta/2 * cot(theta/2))
            (1.0 - half * half.cos() / half.sin()) / theta2
        };
        let v_inv = Matrix3::identity() - wx * 0.5 + (wx * wx) * d;
        Ok(Twist {
            angular: w,
            linear: v_inv * self.translation,
        })
    }

    /// Adjoint matrix mapping twists between frames: for `T = (R, t)` and
    /// twist order `[w, v]`, `Ad = [[R, 0], [skew(t) R, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        let tr = skew(&self.translation) * self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                ad[(i, j)] = self.rotation[(i, j)];
                ad[(i + 3, j + 3)] = self.rotation[(i, j)];
                ad[(i + 3, j)] = tr[(i, j)];
            }
        }
        ad
    }

    pub fn to_unit_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn from_unit_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Pose {
        Pose {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }
}

/// se(3) adjoint (`ad`) of a twist, used by the pose-graph Jacobians:
/// `ad = [[skew(w), 0], [skew(v), skew(w)]]` for twist order `[w, v]`.
pub fn twist_ad(xi: &Twist) -> Matrix6<f64> {
    let wx = skew(&xi.angular);
    let vx = skew(&xi.linear);
    let mut out = Matrix6::zeros();
    for i in 0..3 {
        for j in 0..3 {
            out[(i, j)] = wx[(i, j)];
            out[(i + 3, j + 3)] = wx[(i, j)];
            out[(i + 3, j)] = vx[(i, j)];
        }
    }
    out
}

/// Pinhole camera intrinsics with the image extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    /// Points closer than this are treated as out of view.
    pub const DEFAULT_MIN_DEPTH: f64 = 0.1;

    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(0.0 <= cx && cx < width as f64 && 0.0 <= cy && cy < height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Projects a camera-frame point, requiring the pixel to land inside the
    /// image with the default depth cutoff and no border margin. `None` means
    /// out of view (a recoverable outcome, not an error).
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        self.project_with(p, Self::DEFAULT_MIN_DEPTH, 0.0)
    }

    pub fn project_with(&self, p: &Vector3<f64>, min_depth: f64, margin: f64) -> Option<Vector2<f64>> {
        if p.z <= min_depth {
            return None;
        }
        let inv_z = 1.0 / p.z;
        let u = self.fx * p.x * inv_z + self.cx;
        let v = self.fy * p.y * inv_z + self.cy;
        let u_max = self.width as f64 - 1.0 - margin;
        let v_max = self.height as f64 - 1.0 - margin;
        if u >= margin && u <= u_max && v >= margin && v <= v_max {
            Some(Vector2::new(u, v))
        } else {
            None
        }
    }

    /// Back-projects a pixel at the given depth along the ray.
    pub fn unproject(&self, u: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if depth <= 0.0 {
            return Err(Error::NonPositiveDepth(depth));
        }
        Ok(Vector3::new(
            (u.x - self.cx) / self.fx * depth,
            (u.y - self.cy) / self.fy * depth,
            depth,
        ))
    }

    /// Intrinsics of pyramid level `level` (half resolution per level).
    ///
    /// The principal point follows the box-downsampling pixel-center
    /// convention: coarse pixel i covers fine pixels 2i and 2i+1, so
    /// `c' = (c + 0.5) / 2 - 0.5` per level.
    pub fn at_level(&self, level: usize) -> CameraIntrinsics {
        let s = (1u32 << level) as f64;
        CameraIntrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx + 0.5) / s - 0.5,
            cy: (self.cy + 0.5) / s - 0.5,
            width: self.width >> level,
            height: self.height >> level,
        }
    }
}

/// One line of a TUM-format trajectory.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryEntry {
    pub timestamp_ns: i64,
    pub pose: Pose,
    /// Optional validity flag (ninth column); defaults to true.
    pub valid: bool,
}

/// Serializes poses as `timestamp tx ty tz qx qy qz qw`, one line per pose,
/// timestamps in seconds with 9 decimal places.
pub fn format_tum(entries: &[TrajectoryEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let q = e.pose.to_unit_quaternion();
        let t = &e.pose.translation;
        let secs = e.timestamp_ns as f64 / 1e9;
        writeln!(
            out,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            secs, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
        .expect("string write");
    }
    out
}

pub fn write_tum(path: &Path, entries: &[TrajectoryEntry]) -> Result<()> {
    std::fs::write(path, format_tum(entries))?;
    Ok(())
}

pub fn read_tum(path: &Path) -> Result<Vec<TrajectoryEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(path, format!("cannot read trajectory: {e}")))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 && fields.len() != 9 {
            return Err(Error::data(
                path,
                format!("line {}: expected 8 or 9 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let mut nums = [0.0f64; 9];
        for (i, f) in fields.iter().enumerate() {
            nums[i] = f.parse::<f64>().map_err(|_| {
                Error::data(path, format!("line {}: bad number {:?}", lineno + 1, f))
            })?;
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(nums[7], nums[4], nums[5], nums[6]));
        entries.push(TrajectoryEntry {
            timestamp_ns: (nums[0] * 1e9).round() as i64,
            pose: Pose::from_unit_quaternion(&q, Vector3::new(nums[1], nums[2], nums[3])),
            valid: if fields.len() == 9 { nums[8] != 0.0 } else { true },
        });
    }
    Ok(entries)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_twist(rng: &mut StdRng, max_angle: f64) -> Twist {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.gen_range(0.0..max_angle);
        let v = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        );
        Twist::new(axis * angle, v)
    }

    pub(crate) fn random_pose(rng: &mut StdRng) -> Pose {
        Pose::exp(&random_twist(rng, 3.0))
    }

    #[test]
    fn project_principal_ray() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 640, 512).unwrap();
        let uv = k.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(uv, Vector2::new(0.0, 0.0));
    }

    #[test]
    fn project_direct_arithmetic() {
        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 256.0, 640, 512).unwrap();
        let uv = k.project(&Vector3::new(1.0, 2.0, 2.0)).unwrap();
        assert_relative_eq!(uv.x, 370.0, epsilon = 1e-12);
        assert_relative_eq!(uv.y, 356.0, epsilon = 1e-12);
    }

    #[test]
    fn project_behind_camera() {
        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 256.0, 640, 512).unwrap();
        assert!(k.project(&Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn project_respects_margin() {
        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 256.0, 640, 512).unwrap();
        let p = Vector3::new(3.18, 0.0, 1.0); // u = 638
        assert!(k.project_with(&p, 0.1, 0.0).is_some());
        assert!(k.project_with(&p, 0.1, 4.0).is_none());
    }

    #[test]
    fn unproject_examples() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 640, 512).unwrap();
        let p = k.unproject(&Vector2::new(0.0, 0.0), 1.0).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);

        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 256.0, 640, 512).unwrap();
        let p = k.unproject(&Vector2::new(370.0, 356.0), 2.0).unwrap();
        assert_relative_eq!(p, Vector3::new(1.0, 2.0, 2.0), epsilon = 1e-12);

        assert!(k.unproject(&Vector2::new(1.0, 1.0), 0.0).is_err());
        assert!(k.unproject(&Vector2::new(1.0, 1.0), -2.0).is_err());
    }

    #[test]
    fn unproject_project_round_trip() {
        let k = CameraIntrinsics::new(340.0, 345.0, 320.0, 250.0, 640, 512).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let u = Vector2::new(
                rng.gen_range(0.0..639.0),
                rng.gen_range(0.0..511.0),
            );
            let d = rng.gen_range(0.2..50.0);
            let p = k.unproject(&u, d).unwrap();
            let back = k.project_with(&p, 1e-6, 0.0).unwrap();
            max_err = max_err.max((back - u).norm());
        }
        assert!(max_err < 1e-9, "round-trip error {max_err}");
    }

    #[test]
    fn transform_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().transform(&p), p);

        let t = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t.transform(&Vector3::zeros()), Vector3::new(1.0, 0.0, 0.0));

        let r = Pose::from_axis_angle(&Vector3::z_axis(), PI / 2.0);
        let q = r.transform(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(q, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn exp_zero_is_identity() {
        let p = Pose::exp(&Twist::zero());
        assert_eq!(p.rotation, Matrix3::identity());
        assert_eq!(p.translation, Vector3::zeros());
    }

    #[test]
    fn exp_quarter_turn() {
        let xi = Twist::new(Vector3::new(0.0, 0.0, PI / 2.0), Vector3::zeros());
        let p = Pose::exp(&xi);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(p.rotation, expected, epsilon = 1e-12);
        assert_relative_eq!(p.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn log_at_pi_is_branch_ambiguous() {
        let p = Pose::from_axis_angle(&Vector3::x_axis(), PI);
        assert!(matches!(p.log(), Err(Error::LogBranchAmbiguity { .. })));
    }

    #[test]
    fn exp_log_round_trip_seeded() {
        let mut rng = StdRng::seed_from_u64(42);
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let xi = random_twist(&mut rng, PI - 0.1);
            let back = Pose::exp(&xi).log().unwrap();
            let err = (back.as_vector() - xi.as_vector()).norm();
            max_err = max_err.max(err);
        }
        assert!(max_err < 1e-8, "exp/log round trip error {max_err}");
    }

    #[test]
    fn log_exp_round_trip_poses() {
        let mut rng = StdRng::seed_from_u64(43);
        let mut max_dev: f64 = 0.0;
        for _ in 0..1000 {
            let t = random_pose(&mut rng);
            let back = Pose::exp(&t.log().unwrap());
            let dev = (back.rotation - t.rotation)
                .norm()
                .max((back.translation - t.translation).norm());
            max_dev = max_dev.max(dev);
        }
        assert!(max_dev < 1e-8, "log/exp deviation {max_dev}");
    }

    #[test]
    fn small_angle_stability() {
        for scale in [0.0, 1e-12, 1e-9, 1e-7, 1e-5, 1e-3] {
            let xi = Twist::new(
                Vector3::new(scale, -scale, scale / 2.0),
                Vector3::new(0.3, -0.2, 0.9),
            );
            let p = Pose::exp(&xi);
            assert!(p.rotation.iter().all(|x| x.is_finite()));
            assert!(p.translation.iter().all(|x| x.is_finite()));
            if scale > 0.0 {
                let back = p.log().unwrap();
                assert!(
                    (back.as_vector() - xi.as_vector()).norm() < 1e-10,
                    "round trip at angle scale {scale}"
                );
            }
        }
    }

    #[test]
    fn compose_inverse_is_identity() {
        let mut rng = StdRng::seed_from_u64(44);
        for _ in 0..100 {
            let t = random_pose(&mut rng);
            let id = t.compose(&t.inverse());
            assert!((id.rotation - Matrix3::identity()).norm() < 1e-9);
            assert!(id.translation.norm() < 1e-9);
        }
    }

    #[test]
    fn relative_identities() {
        let mut rng = StdRng::seed_from_u64(45);
        let t = random_pose(&mut rng);
        let rel = t.relative(&t);
        assert!((rel.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(rel.translation.norm() < 1e-12);
    }

    #[test]
    fn relative_invariant_under_world_transform() {
        let mut rng = StdRng::seed_from_u64(46);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let g = random_pose(&mut rng);
            let rel = a.relative(&b);
            let rel_moved = g.compose(&a).relative(&g.compose(&b));
            assert!((rel.rotation - rel_moved.rotation).norm() < 1e-10);
            assert!((rel.translation - rel_moved.translation).norm() < 1e-10);
        }
    }

    #[test]
    fn orthonormality_survives_long_chains() {
        let mut rng = StdRng::seed_from_u64(47);
        let step = random_pose(&mut rng);
        let mut acc = Pose::identity();
        for _ in 0..10_000 {
            acc = acc.compose(&step);
        }
        assert!(acc.orthonormality_error() < 1e-6);
        assert!(acc.rotation.determinant() > 0.0);
    }

    #[test]
    fn adjoint_matches_conjugation() {
        let mut rng = StdRng::seed_from_u64(48);
        for _ in 0..50 {
            let t = random_pose(&mut rng);
            let xi = random_twist(&mut rng, 0.5);
            // exp(Ad_T xi) == T exp(xi) T^-1
            let lhs = Pose::exp(&Twist::from_vector(&(t.adjoint() * xi.as_vector())));
            let rhs = t.compose(&Pose::exp(&xi)).compose(&t.inverse());
            assert!((lhs.rotation - rhs.rotation).norm() < 1e-9);
            assert!((lhs.translation - rhs.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn tum_round_trip() {
        let mut rng = StdRng::seed_from_u64(49);
        let entries: Vec<TrajectoryEntry> = (0..20)
            .map(|i| TrajectoryEntry {
                timestamp_ns: 1_000_000_000 + i * 100_000_000,
                pose: random_pose(&mut rng),
                valid: true,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        write_tum(&path, &entries).unwrap();
        let back = read_tum(&path).unwrap();
        assert_eq!(back.len(), entries.len());
        for (a, b) in entries.iter().zip(&back) {
            assert_eq!(a.timestamp_ns, b.timestamp_ns);
            assert!((a.pose.rotation - b.pose.rotation).norm() < 1e-7);
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn prop_exp_log_round_trip(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            angle in 1e-6f64..(PI - 0.1),
            vx in -3.0f64..3.0, vy in -3.0f64..3.0, vz in -3.0f64..3.0,
        ) {
            let axis = Vector3::new(ax, ay, az);
            prop_assume!(axis.norm() > 1e-3);
            let xi = Twist::new(axis.normalize() * angle, Vector3::new(vx, vy, vz));
            let back = Pose::exp(&xi).log().unwrap();
            prop_assert!((back.as_vector() - xi.as_vector()).norm() < 1e-8);
        }

        #[test]
        fn prop_compose_associative(seed in 0u64..1000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let lhs = a.compose(&b).compose(&c);
            let rhs = a.compose(&b.compose(&c));
            prop_assert!((lhs.rotation - rhs.rotation).norm() < 1e-12);
            prop_assert!((lhs.translation - rhs.translation).norm() < 1e-12);
        }
    }
}
