//! Synthetic thermographic scenes: raycast rendering of 14-bit thermal
//! images and sparse LiDAR scans along scripted trajectories.
//!
//! The generator is the ground-truth oracle for the rest of the crate. It is
//! fully deterministic under a fixed seed, and the emitted dataset layout is
//! exactly what the pipeline loader consumes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calib::{self, BoardGeometry};
use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose, TrajectoryEntry, Twist};
use crate::imgproc::{RawToCelsius, ThermalImage, MAX_RAW};

/// Sensor temperature limits (Celsius); generated fields stay inside.
pub const SENSOR_T_MIN: f64 = -40.0;
pub const SENSOR_T_MAX: f64 = 550.0;

/// Smooth rectangular hot/cold patch on a surface, edges eased over
/// `edge` meters so bilinear sampling of the rendered image stays accurate.
#[derive(Debug, Clone)]
pub struct Patch {
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
    pub delta: f64,
    pub edge: f64,
}

/// Band-limited sinusoidal component of a temperature field.
#[derive(Debug, Clone)]
pub struct Wave {
    pub amp: f64,
    pub freq_u: f64,
    pub freq_v: f64,
    pub phase_u: f64,
    pub phase_v: f64,
}

/// Temperature field over a surface's local (u, v) coordinates, in Celsius:
/// linear base plus band-limited waves plus smooth patches.
#[derive(Debug, Clone, Default)]
pub struct TemperatureField {
    pub base: f64,
    pub grad_u: f64,
    pub grad_v: f64,
    pub waves: Vec<Wave>,
    pub patches: Vec<Patch>,
    /// Optional chessboard texture: (square size, low T, high T).
    pub checker: Option<(f64, f64, f64)>,
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

impl TemperatureField {
    pub fn constant(celsius: f64) -> Self {
        TemperatureField {
            base: celsius,
            ..Default::default()
        }
    }

    pub fn value(&self, u: f64, v: f64) -> f64 {
        let mut t = self.base + self.grad_u * u + self.grad_v * v;
        for w in &self.waves {
            t += w.amp
                * (2.0 * std::f64::consts::PI * (w.freq_u * u) + w.phase_u).sin()
                * (2.0 * std::f64::consts::PI * (w.freq_v * v) + w.phase_v).sin();
        }
        for p in &self.patches {
            let fu = smoothstep((u - p.u0) / p.edge) * smoothstep((p.u1 - u) / p.edge);
            let fv = smoothstep((v - p.v0) / p.edge) * smoothstep((p.v1 - v) / p.edge);
            t += p.delta * fu * fv;
        }
        if let Some((sq, low, high)) = self.checker {
            let iu = (u / sq).floor() as i64;
            let iv = (v / sq).floor() as i64;
            t = if (iu + iv).rem_euclid(2) == 0 { high } else { low };
        }
        t.clamp(SENSOR_T_MIN, SENSOR_T_MAX)
    }

    /// Seeded wave-only texture, band-limited enough that bilinear sampling
    /// of a rendered image reproduces the field to within a count at any
    /// reasonable viewing geometry.
    pub fn smooth(rng: &mut ChaCha8Rng) -> Self {
        let mut waves = Vec::new();
        for _ in 0..3 {
            waves.push(Wave {
                amp: rng.gen_range(1.5..2.5),
                freq_u: rng.gen_range(0.15..0.35),
                freq_v: rng.gen_range(0.15..0.35),
                phase_u: rng.gen_range(0.0..std::f64::consts::TAU),
                phase_v: rng.gen_range(0.0..std::f64::consts::TAU),
            });
        }
        TemperatureField {
            base: rng.gen_range(12.0..20.0),
            grad_u: rng.gen_range(-0.5..0.5),
            grad_v: rng.gen_range(-0.5..0.5),
            waves,
            patches: Vec::new(),
            checker: None,
        }
    }

    /// Seeded texture with gentle waves and a few strong patches; gradients
    /// are rich enough for direct tracking and FAST corners, yet band-limited
    /// so bilinear interpolation of the rendered image stays within a count.
    pub fn textured(rng: &mut ChaCha8Rng, width: f64, height: f64) -> Self {
        let base = rng.gen_range(10.0..22.0);
        let mut waves = Vec::new();
        for _ in 0..3 {
            waves.push(Wave {
                amp: rng.gen_range(1.5..3.5),
                freq_u: rng.gen_range(0.3..0.9),
                freq_v: rng.gen_range(0.3..0.9),
                phase_u: rng.gen_range(0.0..std::f64::consts::TAU),
                phase_v: rng.gen_range(0.0..std::f64::consts::TAU),
            });
        }
        let mut patches = Vec::new();
        let n_patches = (width * height / 1.2).ceil().clamp(3.0, 24.0) as usize;
        for _ in 0..n_patches {
            let w = rng.gen_range(0.25..0.7);
            let h = rng.gen_range(0.2..0.6);
            let u0 = rng.gen_range(0.0..(width - w).max(0.05));
            let v0 = rng.gen_range(0.0..(height - h).max(0.05));
            patches.push(Patch {
                u0,
                v0,
                u1: u0 + w,
                v1: v0 + h,
                delta: rng.gen_range(6.0..13.0) * if rng.gen_bool(0.3) { -1.0 } else { 1.0 },
                edge: rng.gen_range(0.14..0.24),
            });
        }
        TemperatureField {
            base,
            grad_u: rng.gen_range(-1.0..1.0),
            grad_v: rng.gen_range(-1.0..1.0),
            waves,
            patches,
            checker: None,
        }
    }
}

/// Textured rectangle in 3D: `origin + a*u_dir + b*v_dir` for
/// `a in [0, width], b in [0, height]`.
#[derive(Debug, Clone)]
pub struct Surface {
    pub origin: Vector3<f64>,
    pub u_dir: Vector3<f64>,
    pub v_dir: Vector3<f64>,
    pub width: f64,
    pub height: f64,
    pub field: TemperatureField,
}

impl Surface {
    pub fn new(
        origin: Vector3<f64>,
        u_dir: Vector3<f64>,
        v_dir: Vector3<f64>,
        width: f64,
        height: f64,
        field: TemperatureField,
    ) -> Self {
        Surface {
            origin,
            u_dir: u_dir.normalize(),
            v_dir: v_dir.normalize(),
            width,
            height,
            field,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.u_dir.cross(&self.v_dir)
    }

    /// Ray-rectangle intersection; returns (ray parameter, local u, local v).
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let n = self.normal();
        let denom = dir.dot(&n);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.origin - origin).dot(&n) / denom;
        if t <= 1e-6 {
            return None;
        }
        let hit = origin + dir * t;
        let local = hit - self.origin;
        let a = local.dot(&self.u_dir);
        let b = local.dot(&self.v_dir);
        if a >= 0.0 && a <= self.width && b >= 0.0 && b <= self.height {
            Some((t, a, b))
        } else {
            None
        }
    }
}

/// A procedural thermographic scene.
#[derive(Debug, Clone)]
pub struct ThermoScene {
    pub surfaces: Vec<Surface>,
    /// Temperature reported when a ray escapes the scene.
    pub background_celsius: f64,
}

impl ThermoScene {
    pub fn new(surfaces: Vec<Surface>) -> Self {
        ThermoScene {
            surfaces,
            background_celsius: -20.0,
        }
    }

    /// Closed box with all faces visible from the inside, constant field.
    pub fn uniform_box(half: Vector3<f64>, celsius: f64) -> Self {
        let f = |_: usize| TemperatureField::constant(celsius);
        ThermoScene::new(interior_box(Vector3::zeros(), half, f))
    }

    /// Nearest surface hit along a world-frame ray: (range, surface index,
    /// temperature).
    pub fn raycast_full(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
    ) -> Option<(f64, usize, f64)> {
        let mut best: Option<(f64, usize, f64)> = None;
        for (i, s) in self.surfaces.iter().enumerate() {
            if let Some((t, a, b)) = s.intersect(origin, dir) {
                if best.is_none_or(|(bt, _, _)| t < bt) {
                    best = Some((t, i, s.field.value(a, b)));
                }
            }
        }
        best
    }

    /// Nearest surface hit along a world-frame ray.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        self.raycast_full(origin, dir).map(|(t, _, temp)| (t, temp))
    }

    /// Temperature at the nearest hit, or the background value.
    pub fn temperature_along(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        self.raycast(origin, dir)
            .map(|(_, t)| t)
            .unwrap_or(self.background_celsius)
    }
}

/// Six inward-facing rectangles forming a closed box.
pub fn interior_box(
    center: Vector3<f64>,
    half: Vector3<f64>,
    mut field_for_face: impl FnMut(usize) -> TemperatureField,
) -> Vec<Surface> {
    let (hx, hy, hz) = (half.x, half.y, half.z);
    let c = center;
    // +x wall first (the raycast ignores facing, so winding is free)
    let mut out = vec![Surface::new(
        c + Vector3::new(hx, -hy, -hz),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(0.0, 1.0, 0.0),
        2.0 * hz,
        2.0 * hy,
        field_for_face(0),
    )];
    // -x wall
    out.push(Surface::new(
        c + Vector3::new(-hx, -hy, -hz),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(0.0, 1.0, 0.0),
        2.0 * hz,
        2.0 * hy,
        field_for_face(1),
    ));
    // +y (floor in the y-down camera convention)
    out.push(Surface::new(
        c + Vector3::new(-hx, hy, -hz),
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(0.0, 0.0, 1.0),
        2.0 * hx,
        2.0 * hz,
        field_for_face(2),
    ));
    // -y (ceiling)
    out.push(Surface::new(
        c + Vector3::new(-hx, -hy, -hz),
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(0.0, 0.0, 1.0),
        2.0 * hx,
        2.0 * hz,
        field_for_face(3),
    ));
    // +z wall
    out.push(Surface::new(
        c + Vector3::new(-hx, -hy, hz),
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        2.0 * hx,
        2.0 * hy,
        field_for_face(4),
    ));
    // -z wall
    out.push(Surface::new(
        c + Vector3::new(-hx, -hy, -hz),
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        2.0 * hx,
        2.0 * hy,
        field_for_face(5),
    ));
    out
}

/// Ordered (timestamp, pose) samples with linear/slerp interpolation.
#[derive(Debug, Clone)]
pub struct ScriptedTrajectory {
    samples: Vec<(i64, Pose)>,
}

impl ScriptedTrajectory {
    pub fn new(samples: Vec<(i64, Pose)>) -> Result<Self> {
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config(
                "trajectory timestamps must be strictly increasing".into(),
            ));
        }
        Ok(ScriptedTrajectory { samples })
    }

    pub fn samples(&self) -> &[(i64, Pose)] {
        &self.samples
    }

    /// Pose at an arbitrary timestamp: linear translation, slerp rotation.
    /// Clamps outside the sampled range.
    pub fn pose_at(&self, timestamp_ns: i64) -> Pose {
        let s = &self.samples;
        if timestamp_ns <= s[0].0 {
            return s[0].1;
        }
        if timestamp_ns >= s[s.len() - 1].0 {
            return s[s.len() - 1].1;
        }
        let idx = s.partition_point(|(t, _)| *t <= timestamp_ns);
        let (t0, p0) = s[idx - 1];
        let (t1, p1) = s[idx];
        let alpha = (timestamp_ns - t0) as f64 / (t1 - t0) as f64;
        let q = p0
            .to_unit_quaternion()
            .slerp(&p1.to_unit_quaternion(), alpha);
        Pose::from_unit_quaternion(&q, p0.translation.lerp(&p1.translation, alpha))
    }
}

/// Renders a 14-bit thermal image by ray casting (thermal emission only, no
/// illumination effects). Each pixel integrates a 2x2 sub-sample grid the way
/// a physical detector integrates over its footprint, which keeps surfaces
/// seen at grazing angles from aliasing.
pub fn render_thermal(
    scene: &ThermoScene,
    camera_pose: &Pose,
    k: &CameraIntrinsics,
    conv: &RawToCelsius,
    timestamp_ns: i64,
) -> ThermalImage {
    const SUB: [f64; 2] = [-0.25, 0.25];
    let mut data = Vec::with_capacity(k.width as usize * k.height as usize);
    let origin = camera_pose.translation;
    for v in 0..k.height {
        for u in 0..k.width {
            let mut acc = 0.0;
            for dv in SUB {
                for du in SUB {
                    let dir_cam = Vector3::new(
                        (u as f64 + du - k.cx) / k.fx,
                        (v as f64 + dv - k.cy) / k.fy,
                        1.0,
                    );
                    let dir = camera_pose.rotate(&dir_cam);
                    acc += scene.temperature_along(&origin, &dir);
                }
            }
            let raw = conv.to_raw(acc / 4.0).round().clamp(0.0, MAX_RAW as f64) as u16;
            data.push(raw);
        }
    }
    ThermalImage::new(k.width, k.height, data, timestamp_ns).expect("renderer stays in range")
}

/// Multi-ring spinning scanner geometry.
#[derive(Debug, Clone)]
pub struct LidarPattern {
    pub rings: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_steps: usize,
    pub max_range: f64,
    pub noise_sigma: f64,
}

impl Default for LidarPattern {
    fn default() -> Self {
        LidarPattern {
            rings: 16,
            elevation_min_deg: -15.0,
            elevation_max_deg: 15.0,
            azimuth_steps: 720,
            max_range: 100.0,
            noise_sigma: 0.0,
        }
    }
}

/// Casts `rings x azimuth_steps` rays from the LiDAR pose and returns hits as
/// LiDAR-frame points, with optional Gaussian range noise.
pub fn render_lidar(
    scene: &ThermoScene,
    lidar_pose: &Pose,
    pattern: &LidarPattern,
    seed: u64,
) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let origin = lidar_pose.translation;
    for ring in 0..pattern.rings {
        let frac = if pattern.rings > 1 {
            ring as f64 / (pattern.rings - 1) as f64
        } else {
            0.5
        };
        let elev = (pattern.elevation_min_deg
            + frac * (pattern.elevation_max_deg - pattern.elevation_min_deg))
            .to_radians();
        for step in 0..pattern.azimuth_steps {
            let az = step as f64 / pattern.azimuth_steps as f64 * std::f64::consts::TAU;
            // y-down sensor frame: +elevation tilts the ray up (toward -y)
            let dir_local = Vector3::new(
                elev.cos() * az.sin(),
                -elev.sin(),
                elev.cos() * az.cos(),
            );
            let dir = lidar_pose.rotate(&dir_local);
            if let Some((range, _)) = scene.raycast(&origin, &dir) {
                if range <= pattern.max_range {
                    let noisy = if pattern.noise_sigma > 0.0 {
                        range + gaussian(&mut rng) * pattern.noise_sigma
                    } else {
                        range
                    };
                    points.push(dir_local * noisy);
                }
            }
        }
    }
    points
}

/// Box-Muller standard normal (keeps the dependency surface small).
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// Scene configuration and presets
// ---------------------------------------------------------------------------

/// Parsed scene description (text key=value config; see `SceneConfig::parse`).
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub preset: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
    pub fps: f64,
    pub speed: f64,
    pub frames: usize,
    pub tunnel_length: f64,
    pub corridor_half_outer: f64,
    pub corridor_half_inner: f64,
    pub loop_tail: f64,
    pub azimuth_steps: usize,
    pub lidar_noise_sigma: f64,
    pub lidar_max_range: f64,
    pub boards: usize,
    pub board_rows: usize,
    pub board_cols: usize,
    pub board_square: f64,
    pub extrinsic_perturb_deg: f64,
    pub extrinsic_perturb_m: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            preset: "tunnel".into(),
            seed: 7,
            width: 320,
            height: 256,
            fov_deg: 90.0,
            fps: 10.0,
            speed: 1.0,
            frames: 0,
            tunnel_length: 12.0,
            corridor_half_outer: 5.0,
            corridor_half_inner: 2.0,
            loop_tail: 3.0,
            azimuth_steps: 720,
            lidar_noise_sigma: 0.0,
            lidar_max_range: 100.0,
            boards: 30,
            board_rows: 5,
            board_cols: 6,
            board_square: 0.06,
            extrinsic_perturb_deg: 2.0,
            extrinsic_perturb_m: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SceneConfig::default();
        for (lineno, key, value) in crate::config::parse_kv(text)? {
            let bad = |what: &str| {
                Error::Config(format!("scene config line {lineno}: bad {what} {value:?}"))
            };
            match key.as_str() {
                "preset" => cfg.preset = value.clone(),
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "width" => cfg.width = value.parse().map_err(|_| bad("width"))?,
                "height" => cfg.height = value.parse().map_err(|_| bad("height"))?,
                "fov_deg" => cfg.fov_deg = value.parse().map_err(|_| bad("fov_deg"))?,
                "fps" => cfg.fps = value.parse().map_err(|_| bad("fps"))?,
                "speed" => cfg.speed = value.parse().map_err(|_| bad("speed"))?,
                "frames" => cfg.frames = value.parse().map_err(|_| bad("frames"))?,
                "tunnel_length" => {
                    cfg.tunnel_length = value.parse().map_err(|_| bad("tunnel_length"))?
                }
                "corridor_half_outer" => {
                    cfg.corridor_half_outer =
                        value.parse().map_err(|_| bad("corridor_half_outer"))?
                }
                "corridor_half_inner" => {
                    cfg.corridor_half_inner =
                        value.parse().map_err(|_| bad("corridor_half_inner"))?
                }
                "loop_tail" => cfg.loop_tail = value.parse().map_err(|_| bad("loop_tail"))?,
                "azimuth_steps" => {
                    cfg.azimuth_steps = value.parse().map_err(|_| bad("azimuth_steps"))?
                }
                "lidar_noise_sigma" => {
                    cfg.lidar_noise_sigma = value.parse().map_err(|_| bad("lidar_noise_sigma"))?
                }
                "lidar_max_range" => {
                    cfg.lidar_max_range = value.parse().map_err(|_| bad("lidar_max_range"))?
                }
                "boards" => cfg.boards = value.parse().map_err(|_| bad("boards"))?,
                "board_rows" => cfg.board_rows = value.parse().map_err(|_| bad("board_rows"))?,
                "board_cols" => cfg.board_cols = value.parse().map_err(|_| bad("board_cols"))?,
                "board_square" => {
                    cfg.board_square = value.parse().map_err(|_| bad("board_square"))?
                }
                "extrinsic_perturb_deg" => {
                    cfg.extrinsic_perturb_deg =
                        value.parse().map_err(|_| bad("extrinsic_perturb_deg"))?
                }
                "extrinsic_perturb_m" => {
                    cfg.extrinsic_perturb_m =
                        value.parse().map_err(|_| bad("extrinsic_perturb_m"))?
                }
                other => {
                    return Err(Error::Config(format!(
                        "scene config line {lineno}: unknown key {other:?}"
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let f = (self.width as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan();
        CameraIntrinsics::new(
            f,
            f,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
        .expect("valid preset intrinsics")
    }

    pub fn lidar_pattern(&self) -> LidarPattern {
        LidarPattern {
            azimuth_steps: self.azimuth_steps,
            max_range: self.lidar_max_range,
            noise_sigma: self.lidar_noise_sigma,
            ..LidarPattern::default()
        }
    }

    fn frame_step_ns(&self) -> i64 {
        (1e9 / self.fps).round() as i64
    }
}

/// Nominal camera-to-LiDAR extrinsic used by the generated datasets:
/// the LiDAR sits 9 cm above the camera with a few degrees of mounting skew.
pub fn nominal_extrinsic() -> Pose {
    let rot = Pose::from_axis_angle(&Vector3::z_axis(), 0.8f64.to_radians())
        .compose(&Pose::from_axis_angle(&Vector3::y_axis(), 1.5f64.to_radians()))
        .compose(&Pose::from_axis_angle(&Vector3::x_axis(), -1.0f64.to_radians()));
    Pose::new(rot.rotation, Vector3::new(0.03, -0.09, -0.05))
}

/// Seeded rigid perturbation with the given rotation/translation magnitudes.
pub fn perturb_pose(pose: &Pose, rot_deg: f64, trans_m: f64, seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng| {
        Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize()
    };
    let axis = unit(&mut rng);
    let dir = unit(&mut rng);
    let delta = Pose::exp(&Twist::new(axis * rot_deg.to_radians(), dir * trans_m));
    delta.compose(pose)
}

/// Tunnel preset: straight textured box corridor, camera moving along +z.
pub fn tunnel_scene(cfg: &SceneConfig) -> (ThermoScene, ScriptedTrajectory) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let len = cfg.tunnel_length + 10.0;
    let half_w = 2.0;
    let half_h = 1.5;
    let z0 = -2.0;
    let mut surfaces = Vec::new();
    // side walls
    for x in [-half_w, half_w] {
        surfaces.push(Surface::new(
            Vector3::new(x, -half_h, z0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 0.0),
            len,
            2.0 * half_h,
            TemperatureField::textured(&mut rng, len, 2.0 * half_h),
        ));
    }
    // floor and ceiling
    for y in [half_h, -half_h] {
        surfaces.push(Surface::new(
            Vector3::new(-half_w, y, z0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            2.0 * half_w,
            len,
            TemperatureField::textured(&mut rng, 2.0 * half_w, len),
        ));
    }
    // end caps
    for (z, _) in [(z0 + len, 0), (z0, 1)] {
        surfaces.push(Surface::new(
            Vector3::new(-half_w, -half_h, z),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            2.0 * half_w,
            2.0 * half_h,
            TemperatureField::textured(&mut rng, 2.0 * half_w, 2.0 * half_h),
        ));
    }

    let step = cfg.speed / cfg.fps;
    let n = if cfg.frames > 0 {
        cfg.frames
    } else {
        (cfg.tunnel_length / step).floor() as usize + 1
    };
    let t0 = 1_000_000_000i64;
    let samples = (0..n)
        .map(|i| {
            (
                t0 + i as i64 * cfg.frame_step_ns(),
                Pose::from_translation(Vector3::new(0.0, 0.0, i as f64 * step)),
            )
        })
        .collect();
    (
        ThermoScene::new(surfaces),
        ScriptedTrajectory::new(samples).expect("increasing timestamps"),
    )
}

/// Square-loop corridor between two concentric boxes; the camera travels the
/// centerline and re-enters the first leg at the end (the revisit).
pub fn corridor_loop_scene(cfg: &SceneConfig) -> (ThermoScene, ScriptedTrajectory) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0FFEE);
    let h_out = cfg.corridor_half_outer;
    let h_in = cfg.corridor_half_inner;
    let half_h = 1.5;
    let mut surfaces = Vec::new();

    // outer walls (seen from inside the ring)
    let corners_out = [
        (Vector3::new(-h_out, -half_h, -h_out), Vector3::new(1.0, 0.0, 0.0), 2.0 * h_out),
        (Vector3::new(h_out, -half_h, -h_out), Vector3::new(0.0, 0.0, 1.0), 2.0 * h_out),
        (Vector3::new(h_out, -half_h, h_out), Vector3::new(-1.0, 0.0, 0.0), 2.0 * h_out),
        (Vector3::new(-h_out, -half_h, h_out), Vector3::new(0.0, 0.0, -1.0), 2.0 * h_out),
    ];
    for (origin, u_dir, w) in corners_out {
        surfaces.push(Surface::new(
            origin,
            u_dir,
            Vector3::new(0.0, 1.0, 0.0),
            w,
            2.0 * half_h,
            TemperatureField::textured(&mut rng, w, 2.0 * half_h),
        ));
    }
    // inner walls
    let corners_in = [
        (Vector3::new(-h_in, -half_h, -h_in), Vector3::new(1.0, 0.0, 0.0), 2.0 * h_in),
        (Vector3::new(h_in, -half_h, -h_in), Vector3::new(0.0, 0.0, 1.0), 2.0 * h_in),
        (Vector3::new(h_in, -half_h, h_in), Vector3::new(-1.0, 0.0, 0.0), 2.0 * h_in),
        (Vector3::new(-h_in, -half_h, h_in), Vector3::new(0.0, 0.0, -1.0), 2.0 * h_in),
    ];
    for (origin, u_dir, w) in corners_in {
        surfaces.push(Surface::new(
            origin,
            u_dir,
            Vector3::new(0.0, 1.0, 0.0),
            w,
            2.0 * half_h,
            TemperatureField::textured(&mut rng, w, 2.0 * half_h),
        ));
    }
    // floor and ceiling spanning the whole ring
    for y in [half_h, -half_h] {
        surfaces.push(Surface::new(
            Vector3::new(-h_out, y, -h_out),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            2.0 * h_out,
            2.0 * h_out,
            TemperatureField::textured(&mut rng, 2.0 * h_out, 2.0 * h_out),
        ));
    }

    let radius = 0.5 * (h_out + h_in);
    let side = 2.0 * radius;
    let perimeter = 4.0 * side;
    let step = cfg.speed / cfg.fps;
    let n = if cfg.frames > 0 {
        cfg.frames
    } else {
        ((perimeter + cfg.loop_tail) / step).floor() as usize + 1
    };
    let t0 = 1_000_000_000i64;
    let samples = (0..n)
        .map(|i| {
            let s = i as f64 * step;
            (t0 + i as i64 * cfg.frame_step_ns(), loop_pose(s, radius))
        })
        .collect();
    (
        ThermoScene::new(surfaces),
        ScriptedTrajectory::new(samples).expect("increasing timestamps"),
    )
}

/// Pose along the square loop at arc length `s`; yaw blends over a 2 m window
/// before each corner so per-frame rotation stays trackable.
fn loop_pose(s: f64, radius: f64) -> Pose {
    let side = 2.0 * radius;
    let perimeter = 4.0 * side;
    let s = s % perimeter;
    let seg = (s / side).floor() as usize % 4;
    let ls = s - seg as f64 * side;

    let position = match seg {
        0 => Vector3::new(-radius, 0.0, -radius + ls),
        1 => Vector3::new(-radius + ls, 0.0, radius),
        2 => Vector3::new(radius, 0.0, radius - ls),
        _ => Vector3::new(radius - ls, 0.0, -radius),
    };

    let turn_window = 2.0_f64.min(0.5 * side);
    let base_yaw = match seg {
        0 => 0.0,
        1 => std::f64::consts::FRAC_PI_2,
        2 => std::f64::consts::PI,        // heading -z
        _ => 1.5 * std::f64::consts::PI,  // heading -x
    };
    let yaw = if ls > side - turn_window {
        let frac = (ls - (side - turn_window)) / turn_window;
        base_yaw + frac * std::f64::consts::FRAC_PI_2
    } else {
        base_yaw
    };

    let (sy, cy) = yaw.sin_cos();
    // columns: camera x (right), y (down), z (forward = heading)
    let rotation = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    Pose::new(rotation, position)
}

/// One chessboard observation of the calib-room preset.
#[derive(Debug, Clone)]
pub struct BoardObservation {
    pub timestamp_ns: i64,
    /// Board-to-camera pose.
    pub board_pose: Pose,
    /// Row-major inner-corner pixels.
    pub corners: Vec<Vector2<f64>>,
}

/// Calib-room preset: static sensor rig in a textured room observing a
/// thermally visible chessboard at `boards` seeded poses spanning at least
/// three distinct orientations.
pub struct CalibRoom {
    pub room: ThermoScene,
    pub board_geometry: BoardGeometry,
    pub observations: Vec<BoardObservation>,
    /// Per-observation board surface (world == camera frame; the rig is static).
    pub board_surfaces: Vec<Surface>,
    pub extrinsic_true: Pose,
    pub extrinsic_initial: Pose,
}

pub fn calib_room(cfg: &SceneConfig) -> CalibRoom {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB0A2D);
    let k = cfg.intrinsics();
    let geometry = BoardGeometry {
        rows: cfg.board_rows,
        cols: cfg.board_cols,
        square_size: cfg.board_square,
    };

    let mut room_rng = rng.clone();
    let room = ThermoScene::new(interior_box(
        Vector3::new(0.0, 0.0, 1.5),
        Vector3::new(3.0, 1.5, 3.5),
        |_| TemperatureField::textured(&mut room_rng, 6.0, 3.0),
    ));

    let board_w = (geometry.cols as f64 + 1.0) * geometry.square_size;
    let board_h = (geometry.rows as f64 + 1.0) * geometry.square_size;

    let t0 = 1_000_000_000i64;
    let mut observations = Vec::new();
    let mut board_surfaces = Vec::new();
    let mut i = 0usize;
    while observations.len() < cfg.boards {
        i += 1;
        if i > cfg.boards * 50 {
            break; // pathological config; keep whatever was found
        }
        let cluster = observations.len() % 3;
        let (tilt_x, tilt_y) = match cluster {
            0 => (rng.gen_range(-6.0..6.0f64), rng.gen_range(-6.0..6.0f64)),
            1 => (rng.gen_range(20.0..32.0f64), rng.gen_range(-8.0..8.0f64)),
            _ => (rng.gen_range(-8.0..8.0f64), rng.gen_range(20.0..32.0f64)),
        };
        let yaw = rng.gen_range(-8.0..8.0f64);
        let rot = Pose::from_axis_angle(&Vector3::z_axis(), yaw.to_radians())
            .compose(&Pose::from_axis_angle(&Vector3::x_axis(), tilt_x.to_radians()))
            .compose(&Pose::from_axis_angle(&Vector3::y_axis(), tilt_y.to_radians()));
        let center = Vector3::new(
            rng.gen_range(-0.7..0.7),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(1.6..2.6),
        );
        // board frame: origin at inner corner (0,0); grid spans positive x/y
        let origin_offset = Vector3::new(
            -(geometry.cols as f64 - 1.0) / 2.0 * geometry.square_size,
            -(geometry.rows as f64 - 1.0) / 2.0 * geometry.square_size,
            0.0,
        );
        let board_pose = Pose::new(rot.rotation, center + rot.rotation * origin_offset);

        let corners: Vec<Vector2<f64>> = geometry
            .corner_grid()
            .iter()
            .map(|p| board_pose.transform(p))
            .map(|p| k.project_with(&p, 0.05, 6.0))
            .collect::<Option<Vec<_>>>()
            .unwrap_or_default();
        if corners.len() != geometry.rows * geometry.cols {
            continue; // a corner left the safe image region; try another pose
        }

        let surface = Surface::new(
            board_pose.transform(&Vector3::new(-geometry.square_size, -geometry.square_size, 0.0)),
            board_pose.rotate(&Vector3::x_axis()),
            board_pose.rotate(&Vector3::y_axis()),
            board_w,
            board_h,
            TemperatureField {
                checker: Some((geometry.square_size, 10.0, 27.0)),
                ..Default::default()
            },
        );

        observations.push(BoardObservation {
            timestamp_ns: t0 + observations.len() as i64 * cfg.frame_step_ns(),
            board_pose,
            corners,
        });
        board_surfaces.push(surface);
    }

    let extrinsic_true = nominal_extrinsic();
    let extrinsic_initial = perturb_pose(
        &extrinsic_true,
        cfg.extrinsic_perturb_deg,
        cfg.extrinsic_perturb_m,
        cfg.seed ^ 0x5EED,
    );

    CalibRoom {
        room,
        board_geometry: geometry,
        observations,
        board_surfaces,
        extrinsic_true,
        extrinsic_initial,
    }
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// Files written by `generate_dataset`.
#[derive(Debug)]
pub struct GeneratedDataset {
    pub root: PathBuf,
    pub frames: usize,
    pub groundtruth: PathBuf,
}

pub fn write_cloud_csv(path: &Path, points: &[Vector3<f64>]) -> Result<()> {
    let mut text = String::with_capacity(points.len() * 32);
    for p in points {
        writeln!(text, "{:.6},{:.6},{:.6}", p.x, p.y, p.z).expect("string write");
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_corners_csv(path: &Path, corners: &[Vector2<f64>]) -> Result<()> {
    let mut text = String::new();
    for c in corners {
        writeln!(text, "{:.6},{:.6}", c.x, c.y).expect("string write");
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Renders and writes a complete dataset (images, clouds, calibration,
/// ground truth) for the configured preset. Deterministic: the same config
/// produces byte-identical files.
pub fn generate_dataset(cfg: &SceneConfig, out_dir: &Path) -> Result<GeneratedDataset> {
    let images = out_dir.join("images");
    let clouds = out_dir.join("clouds");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&clouds)?;

    let k = cfg.intrinsics();
    let conv = RawToCelsius::default();
    let pattern = cfg.lidar_pattern();
    let extrinsic = nominal_extrinsic();
    let extrinsic_inv = extrinsic.inverse();

    let mut gt_entries = Vec::new();

    let frames = match cfg.preset.as_str() {
        "tunnel" | "corridor-loop" => {
            let (scene, traj) = if cfg.preset == "tunnel" {
                tunnel_scene(cfg)
            } else {
                corridor_loop_scene(cfg)
            };
            let mut vocab_corpus: Vec<Vec<crate::loop_closing::Descriptor>> = Vec::new();
            let vocab_stride = (traj.samples().len() / 16).max(1);
            for (i, (ts, cam_pose)) in traj.samples().iter().enumerate() {
                let img = render_thermal(&scene, cam_pose, &k, &conv, *ts);
                img.write_pgm(&images.join(format!("{ts}.pgm")))?;
                if i % vocab_stride == 0 {
                    let img8 = crate::imgproc::rescale_to_8bit(&img, 0.0, 30.0, &conv)?;
                    let (_, descriptors) =
                        crate::loop_closing::detect_and_describe(&img8, 15, 500);
                    if !descriptors.is_empty() {
                        vocab_corpus.push(descriptors);
                    }
                }
                let lidar_pose = cam_pose.compose(&extrinsic_inv);
                let cloud =
                    render_lidar(&scene, &lidar_pose, &pattern, cfg.seed ^ (i as u64) << 1);
                write_cloud_csv(&clouds.join(format!("{ts}.csv")), &cloud)?;
                gt_entries.push(TrajectoryEntry {
                    timestamp_ns: *ts,
                    pose: *cam_pose,
                    valid: true,
                });
            }
            calib::write_calibration(&out_dir.join("calib.txt"), &extrinsic, &k)?;
            if !vocab_corpus.is_empty() {
                let vocab =
                    crate::loop_closing::Vocabulary::train(&vocab_corpus, 10, 4, cfg.seed)?;
                vocab.save(&out_dir.join("vocab.bin"))?;
            }
            traj.samples().len()
        }
        "calib-room" => {
            let room = calib_room(cfg);
            for (i, obs) in room.observations.iter().enumerate() {
                let mut scene = room.room.clone();
                scene.surfaces.push(room.board_surfaces[i].clone());
                let cam_pose = Pose::identity();
                let img = render_thermal(&scene, &cam_pose, &k, &conv, obs.timestamp_ns);
                img.write_pgm(&images.join(format!("{}.pgm", obs.timestamp_ns)))?;
                write_corners_csv(
                    &images.join(format!("{}.corners.csv", obs.timestamp_ns)),
                    &obs.corners,
                )?;
                let lidar_pose = cam_pose.compose(&room.extrinsic_true.inverse());
                let cloud =
                    render_lidar(&scene, &lidar_pose, &pattern, cfg.seed ^ (i as u64) << 1);
                write_cloud_csv(&clouds.join(format!("{}.csv", obs.timestamp_ns)), &cloud)?;
                gt_entries.push(TrajectoryEntry {
                    timestamp_ns: obs.timestamp_ns,
                    pose: cam_pose,
                    valid: true,
                });
            }
            calib::write_calibration(&out_dir.join("calib.txt"), &room.extrinsic_true, &k)?;
            calib::write_calibration(
                &out_dir.join("calib_initial.txt"),
                &room.extrinsic_initial,
                &k,
            )?;
            room.board_geometry.write(&out_dir.join("board.txt"))?;
            room.observations.len()
        }
        other => {
            return Err(Error::Config(format!(
                "unknown scene preset {other:?} (expected tunnel, corridor-loop, or calib-room)"
            )))
        }
    };

    let gt_path = out_dir.join("groundtruth.txt");
    crate::geom::write_tum(&gt_path, &gt_entries)?;

    Ok(GeneratedDataset {
        root: out_dir.to_path_buf(),
        frames,
        groundtruth: gt_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SceneConfig {
        SceneConfig {
            width: 160,
            height: 128,
            azimuth_steps: 180,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn uniform_scene_renders_constant_counts() {
        let scene = ThermoScene::uniform_box(Vector3::new(3.0, 2.0, 4.0), 20.0);
        let cfg = small_cfg();
        let img = render_thermal(&scene, &Pose::identity(), &cfg.intrinsics(), &RawToCelsius::default(), 0);
        let expected = ((20.0 + 273.15) / 0.04f64).round() as u16;
        assert_eq!(expected, 7329);
        assert!(img.data().iter().all(|&v| v == expected));
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = small_cfg();
        let (scene, traj) = tunnel_scene(&cfg);
        let pose = traj.samples()[3].1;
        let a = render_thermal(&scene, &pose, &cfg.intrinsics(), &RawToCelsius::default(), 0);
        let b = render_thermal(&scene, &pose, &cfg.intrinsics(), &RawToCelsius::default(), 0);
        assert_eq!(a, b);
    }

    #[test]
    fn lidar_hits_plane_exactly_when_noiseless() {
        let field = TemperatureField::constant(15.0);
        let scene = ThermoScene::new(vec![Surface::new(
            Vector3::new(-10.0, -10.0, 2.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            20.0,
            20.0,
            field,
        )]);
        let pattern = LidarPattern {
            azimuth_steps: 90,
            ..LidarPattern::default()
        };
        let points = render_lidar(&scene, &Pose::identity(), &pattern, 0);
        assert!(!points.is_empty());
        assert!(points.len() <= pattern.rings * pattern.azimuth_steps);
        for p in &points {
            assert!((p.z - 2.0).abs() < 1e-9, "point {p:?} not on the plane");
        }
    }

    #[test]
    fn lidar_range_noise_matches_sigma() {
        let field = TemperatureField::constant(15.0);
        let scene = ThermoScene::new(vec![Surface::new(
            Vector3::new(-50.0, -50.0, 2.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            100.0,
            100.0,
            field,
        )]);
        let pattern = LidarPattern {
            rings: 100,
            elevation_min_deg: -10.0,
            elevation_max_deg: 10.0,
            azimuth_steps: 1000,
            noise_sigma: 0.02,
            ..LidarPattern::default()
        };
        // forward-facing hemisphere only; rays along the plane never hit
        let points = render_lidar(&scene, &Pose::identity(), &pattern, 99);
        assert!(points.len() > 40_000);
        // each point's range error along its ray: |p| - true range
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut n = 0.0;
        for p in &points {
            let dir = p.normalize();
            if dir.z < 0.2 {
                continue;
            }
            let true_range = 2.0 / dir.z;
            let err = p.norm() - true_range;
            sum += err;
            sum2 += err * err;
            n += 1.0;
        }
        let std = ((sum2 - sum * sum / n) / n).sqrt();
        assert!(
            (0.018..=0.022).contains(&std),
            "sample std {std} outside [0.018, 0.022]"
        );
    }

    #[test]
    fn fronto_parallel_motion_shifts_image_by_homography() {
        // camera translating parallel to a textured wall at z = 2
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let field = TemperatureField::textured(&mut rng, 20.0, 20.0);
        let scene = ThermoScene::new(vec![Surface::new(
            Vector3::new(-10.0, -10.0, 2.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            20.0,
            20.0,
            field,
        )]);
        let cfg = small_cfg();
        let k = cfg.intrinsics();
        let conv = RawToCelsius::default();
        let dx = 0.1;
        let img_a = render_thermal(&scene, &Pose::identity(), &k, &conv, 0);
        let img_b = render_thermal(
            &scene,
            &Pose::from_translation(Vector3::new(dx, 0.0, 0.0)),
            &k,
            &conv,
            0,
        );
        let expected_shift = k.fx * dx / 2.0; // fx * dx / z

        // SSD over integer shifts, then parabolic sub-pixel refinement
        let a = crate::imgproc::FloatImage::from_thermal(&img_a);
        let b = crate::imgproc::FloatImage::from_thermal(&img_b);
        let ssd = |shift: i32| -> f64 {
            let mut acc = 0.0;
            for y in 20..(a.height - 20) {
                for x in 20..(a.width - 20) {
                    let xb = x as i32 + shift;
                    let d = a.get(x, y) - b.get(xb as u32, y);
                    acc += d * d;
                }
            }
            acc
        };
        let (mut best_s, mut best_v) = (0, f64::INFINITY);
        for s in -15..=15 {
            let v = ssd(s);
            if v < best_v {
                best_v = v;
                best_s = s;
            }
        }
        let (l, c, r) = (ssd(best_s - 1), best_v, ssd(best_s + 1));
        let denom = l - 2.0 * c + r;
        let sub = if denom.abs() > 1e-12 {
            0.5 * (l - r) / denom
        } else {
            0.0
        };
        let measured = -(best_s as f64 + sub);
        assert!(
            (measured - expected_shift).abs() < 0.1,
            "measured {measured}, expected {expected_shift}"
        );
    }

    #[test]
    fn lidar_reprojection_matches_surface_temperature() {
        // geometric consistency of the generator: rendered against a smooth
        // (wave-only) scene so the image resolves the field everywhere
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scene = ThermoScene::new(interior_box(
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(2.0, 1.5, 2.0),
            |_| TemperatureField::smooth(&mut rng),
        ));
        let k = cfg.intrinsics();
        let conv = RawToCelsius::default();
        let extrinsic = nominal_extrinsic();
        let cam_pose = Pose::from_translation(Vector3::new(0.2, 0.1, 0.3));
        let lidar_pose = cam_pose.compose(&extrinsic.inverse());

        let img = render_thermal(&scene, &cam_pose, &k, &conv, 0);
        let float_img = crate::imgproc::FloatImage::from_thermal(&img);
        let pattern = LidarPattern {
            azimuth_steps: 720,
            ..LidarPattern::default()
        };
        let cloud = render_lidar(&scene, &lidar_pose, &pattern, 1);

        // the field is smooth within a surface but jumps at creases where two
        // surfaces meet; compare only where the whole bilinear cell sees the
        // point's own surface
        let pixel_surface = |u: f64, v: f64| -> Option<usize> {
            let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
            let dir = cam_pose.rotate(&dir_cam);
            scene
                .raycast_full(&cam_pose.translation, &dir)
                .map(|(_, idx, _)| idx)
        };
        let mut checked = 0;
        let mut max_err: f64 = 0.0;
        for p_lidar in &cloud {
            let p_cam = extrinsic.inverse().transform(p_lidar);
            let Some(uv) = k.project_with(&p_cam, 0.3, 2.0) else {
                continue;
            };
            let p_world = cam_pose.transform(&p_cam);
            let dir = (p_world - cam_pose.translation).normalize();
            let Some((range, surface_idx, t_surface)) =
                scene.raycast_full(&cam_pose.translation, &dir)
            else {
                continue;
            };
            // keep the pixel footprint on the surface small so the rendered
            // image fully resolves the band-limited field
            let normal = scene.surfaces[surface_idx].normal();
            if range > 3.0 || dir.dot(&normal).abs() < 0.6 {
                continue;
            }
            let (u0, v0) = (uv.x.floor(), uv.y.floor());
            let cell_uniform = [(u0, v0), (u0 + 1.0, v0), (u0, v0 + 1.0), (u0 + 1.0, v0 + 1.0)]
                .iter()
                .all(|&(u, v)| pixel_surface(u, v) == Some(surface_idx));
            if !cell_uniform {
                continue;
            }
            let raw_surface = conv.to_raw(t_surface);
            let sampled = float_img.sample_bilinear(uv.x, uv.y).unwrap();
            max_err = max_err.max((sampled - raw_surface).abs());
            checked += 1;
        }
        assert!(checked > 500, "only {checked} points checked");
        assert!(max_err < 1.0, "reprojection mismatch {max_err} counts");
    }

    #[test]
    fn scripted_trajectory_interpolates() {
        let traj = ScriptedTrajectory::new(vec![
            (0, Pose::identity()),
            (
                1_000_000_000,
                Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)),
            ),
        ])
        .unwrap();
        let mid = traj.pose_at(500_000_000);
        assert!((mid.translation.x - 0.5).abs() < 1e-12);
        assert!(ScriptedTrajectory::new(vec![(5, Pose::identity()), (5, Pose::identity())]).is_err());
    }

    #[test]
    fn two_frame_dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            frames: 2,
            width: 160,
            height: 128,
            azimuth_steps: 120,
            ..SceneConfig::default()
        };
        let out = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(out.frames, 2);
        assert_eq!(std::fs::read_dir(dir.path().join("images")).unwrap().count(), 2);
        assert_eq!(std::fs::read_dir(dir.path().join("clouds")).unwrap().count(), 2);
        assert!(dir.path().join("calib.txt").exists());
        let gt = std::fs::read_to_string(out.groundtruth).unwrap();
        assert_eq!(gt.lines().count(), 2);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let cfg = SceneConfig {
            frames: 2,
            width: 96,
            height: 80,
            azimuth_steps: 90,
            lidar_noise_sigma: 0.01,
            ..SceneConfig::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir_a.path()).unwrap();
        generate_dataset(&cfg, dir_b.path()).unwrap();
        for sub in ["images", "clouds"] {
            let mut names: Vec<_> = std::fs::read_dir(dir_a.path().join(sub))
                .unwrap()
                .map(|e| e.unwrap().file_name())
                .collect();
            names.sort();
            for name in names {
                let a = std::fs::read(dir_a.path().join(sub).join(&name)).unwrap();
                let b = std::fs::read(dir_b.path().join(sub).join(&name)).unwrap();
                assert_eq!(a, b, "file {name:?} differs between runs");
            }
        }
        let a = std::fs::read(dir_a.path().join("groundtruth.txt")).unwrap();
        let b = std::fs::read(dir_b.path().join("groundtruth.txt")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scene_config_rejects_unknown_keys() {
        assert!(SceneConfig::parse("preset=tunnel\nseed=3").is_ok());
        let err = SceneConfig::parse("presett=tunnel").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }
}
