//! Thermographic 3-D map: temperature-attributed points anchored to
//! keyframes, with PLY export.
//!
//! Points are stored in their anchor keyframe's camera frame and transformed
//! to world coordinates lazily, which makes pose-graph corrections exact: a
//! re-anchor just swaps the keyframe pose.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead as _, Read as _, Write as _};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose};
use crate::imgproc::{FloatImage, RawToCelsius, MAX_RAW};

/// One exported map point (world frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermoPoint {
    pub position: Vector3<f64>,
    pub temperature: f64,
    pub raw: u16,
    pub keyframe_id: u64,
}

/// Internal storage: camera-frame position plus the sampled radiometry.
#[derive(Debug, Clone, Copy)]
struct StoredPoint {
    local: Vector3<f64>,
    raw: u16,
    temperature: f64,
    keyframe_id: u64,
}

/// Accumulated thermographic map.
#[derive(Debug, Clone, Default)]
pub struct ThermoMap {
    anchors: BTreeMap<u64, Pose>,
    points: Vec<StoredPoint>,
}

impl ThermoMap {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn anchor_poses(&self) -> &BTreeMap<u64, Pose> {
        &self.anchors
    }

    /// Adds the in-view points of a keyframe: each camera-frame LiDAR point
    /// gains the bilinear-sampled raw count at its projection (rounded to a
    /// 14-bit count) and the Celsius value of that count. Out-of-view points
    /// are skipped.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate(
        &mut self,
        keyframe_id: u64,
        pose: &Pose,
        cloud_cam: &[Vector3<f64>],
        image: &FloatImage,
        k: &CameraIntrinsics,
        conv: &RawToCelsius,
        min_depth: f64,
    ) -> usize {
        self.accumulate_anchored(
            keyframe_id,
            pose,
            &Pose::identity(),
            cloud_cam,
            image,
            k,
            conv,
            min_depth,
        )
    }

    /// Like `accumulate`, but the sampled camera may differ from the anchor
    /// keyframe: `camera_in_anchor` is the camera pose expressed in the
    /// anchor frame, so points sampled in camera coordinates are stored
    /// rigidly attached to the anchor.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_anchored(
        &mut self,
        keyframe_id: u64,
        anchor_pose: &Pose,
        camera_in_anchor: &Pose,
        cloud_cam: &[Vector3<f64>],
        image: &FloatImage,
        k: &CameraIntrinsics,
        conv: &RawToCelsius,
        min_depth: f64,
    ) -> usize {
        self.anchors.insert(keyframe_id, *anchor_pose);
        let mut added = 0;
        for p in cloud_cam {
            let Some(uv) = k.project_with(p, min_depth, 0.0) else {
                continue;
            };
            let Some(sample) = image.sample_bilinear(uv.x, uv.y) else {
                continue;
            };
            let raw = sample.round().clamp(0.0, MAX_RAW as f64) as u16;
            self.points.push(StoredPoint {
                local: camera_in_anchor.transform(p),
                raw,
                temperature: conv.to_celsius(raw as f64),
                keyframe_id,
            });
            added += 1;
        }
        added
    }

    /// Replaces anchor poses after a pose-graph correction. Points move
    /// rigidly with their keyframe; corrections must cover every anchor id.
    pub fn reanchor(&mut self, corrected: &BTreeMap<u64, Pose>) -> Result<()> {
        for id in self.anchors.keys() {
            if !corrected.contains_key(id) {
                return Err(Error::MissingAnchor(*id));
            }
        }
        for (id, pose) in corrected {
            if let Some(anchor) = self.anchors.get_mut(id) {
                *anchor = *pose;
            }
        }
        Ok(())
    }

    /// Materializes world-frame points.
    pub fn world_points(&self) -> Vec<ThermoPoint> {
        self.points
            .iter()
            .map(|p| {
                let pose = self.anchors.get(&p.keyframe_id).expect("anchor exists");
                ThermoPoint {
                    position: pose.transform(&p.local),
                    temperature: p.temperature,
                    raw: p.raw,
                    keyframe_id: p.keyframe_id,
                }
            })
            .collect()
    }
}

/// PLY export options.
#[derive(Debug, Clone)]
pub struct ExportOptions {
    pub binary: bool,
    /// Voxel edge length for export-time downsampling; `None` keeps all
    /// points. The stored map is never decimated.
    pub voxel_size: Option<f64>,
    /// Adds red/green/blue columns from a diverging colormap over this
    /// Celsius range.
    pub color_range: Option<(f64, f64)>,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions {
            binary: false,
            voxel_size: Some(0.05),
            color_range: None,
        }
    }
}

/// Blue-white-red diverging colormap over `t in [0, 1]`.
fn diverging_color(t: f64) -> [u8; 3] {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.00, [0.09, 0.11, 0.44]),
        (0.25, [0.30, 0.54, 0.81]),
        (0.50, [0.95, 0.95, 0.95]),
        (0.75, [0.85, 0.45, 0.30]),
        (1.00, [0.40, 0.05, 0.05]),
    ];
    let t = t.clamp(0.0, 1.0);
    let mut lo = STOPS[0];
    let mut hi = STOPS[STOPS.len() - 1];
    for w in STOPS.windows(2) {
        if t >= w[0].0 && t <= w[1].0 {
            lo = w[0];
            hi = w[1];
            break;
        }
    }
    let f = if hi.0 > lo.0 { (t - lo.0) / (hi.0 - lo.0) } else { 0.0 };
    let mut rgb = [0u8; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        *out = ((lo.1[c] + f * (hi.1[c] - lo.1[c])) * 255.0).round() as u8;
    }
    rgb
}

fn voxel_filter(points: Vec<ThermoPoint>, voxel: f64) -> Vec<ThermoPoint> {
    let mut seen: std::collections::BTreeSet<(i64, i64, i64)> = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for p in points {
        let key = (
            (p.position.x / voxel).floor() as i64,
            (p.position.y / voxel).floor() as i64,
            (p.position.z / voxel).floor() as i64,
        );
        if seen.insert(key) {
            out.push(p);
        }
    }
    out
}

/// Writes the map as PLY with `x y z temperature raw` float properties
/// (plus `red green blue` when a color range is set). ASCII by default,
/// binary little-endian on request.
pub fn export_ply(map: &ThermoMap, path: &Path, opts: &ExportOptions) -> Result<()> {
    let mut points = map.world_points();
    if let Some(voxel) = opts.voxel_size {
        points = voxel_filter(points, voxel);
    }

    let format = if opts.binary {
        "binary_little_endian"
    } else {
        "ascii"
    };
    let mut header = String::new();
    writeln!(header, "ply").expect("string write");
    writeln!(header, "format {format} 1.0").expect("string write");
    writeln!(header, "comment thermographic point map").expect("string write");
    writeln!(header, "element vertex {}", points.len()).expect("string write");
    for prop in ["x", "y", "z", "temperature", "raw"] {
        writeln!(header, "property float {prop}").expect("string write");
    }
    if opts.color_range.is_some() {
        for prop in ["red", "green", "blue"] {
            writeln!(header, "property uchar {prop}").expect("string write");
        }
    }
    writeln!(header, "end_header").expect("string write");

    let color_of = |t: f64| {
        let (lo, hi) = opts.color_range.expect("color range checked");
        diverging_color((t - lo) / (hi - lo))
    };

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(header.as_bytes())?;
    if opts.binary {
        for p in &points {
            for v in [
                p.position.x as f32,
                p.position.y as f32,
                p.position.z as f32,
                p.temperature as f32,
                p.raw as f32,
            ] {
                file.write_all(&v.to_le_bytes())?;
            }
            if opts.color_range.is_some() {
                file.write_all(&color_of(p.temperature))?;
            }
        }
    } else {
        let mut body = String::new();
        for p in &points {
            // shortest-round-trip float formatting keeps f32 fields lossless
            write!(
                body,
                "{} {} {} {} {}",
                p.position.x as f32,
                p.position.y as f32,
                p.position.z as f32,
                p.temperature as f32,
                p.raw as f32
            )
            .expect("string write");
            if opts.color_range.is_some() {
                let [r, g, b] = color_of(p.temperature);
                write!(body, " {r} {g} {b}").expect("string write");
            }
            body.push('\n');
        }
        file.write_all(body.as_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Minimal PLY reader for the vertex layout written by `export_ply`
/// (round-trip tests and downstream tooling).
pub fn read_ply(path: &Path) -> Result<Vec<ThermoPoint>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(path, format!("cannot open: {e}")))?;
    let mut reader = std::io::BufReader::new(file);

    let mut line = String::new();
    let mut vertex_count = 0usize;
    let mut binary = false;
    let mut properties: Vec<(String, String)> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::data(path, "missing end_header"));
        }
        let trimmed = line.trim();
        if trimmed == "end_header" {
            break;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        match fields.as_slice() {
            ["format", "ascii", _] => binary = false,
            ["format", "binary_little_endian", _] => binary = true,
            ["format", other, _] => {
                return Err(Error::data(path, format!("unsupported format {other}")))
            }
            ["element", "vertex", n] => {
                vertex_count = n
                    .parse()
                    .map_err(|_| Error::data(path, "bad vertex count"))?
            }
            ["property", ty, name] => properties.push((ty.to_string(), name.to_string())),
            _ => {}
        }
    }

    let float_index = |name: &str| -> Result<usize> {
        properties
            .iter()
            .position(|(_, n)| n == name)
            .ok_or_else(|| Error::data(path, format!("missing property {name}")))
    };
    let ix = float_index("x")?;
    let iy = float_index("y")?;
    let iz = float_index("z")?;
    let it = float_index("temperature")?;
    let ir = float_index("raw")?;

    let mut out = Vec::with_capacity(vertex_count);
    if binary {
        for _ in 0..vertex_count {
            let mut values = vec![0.0f64; properties.len()];
            for (i, (ty, _)) in properties.iter().enumerate() {
                values[i] = match ty.as_str() {
                    "float" => {
                        let mut b = [0u8; 4];
                        reader.read_exact(&mut b)?;
                        f32::from_le_bytes(b) as f64
                    }
                    "uchar" => {
                        let mut b = [0u8; 1];
                        reader.read_exact(&mut b)?;
                        b[0] as f64
                    }
                    other => {
                        return Err(Error::data(path, format!("unsupported property type {other}")))
                    }
                };
            }
            out.push(ThermoPoint {
                position: Vector3::new(values[ix], values[iy], values[iz]),
                temperature: values[it],
                raw: values[ir] as u16,
                keyframe_id: 0,
            });
        }
    } else {
        for i in 0..vertex_count {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::data(path, format!("truncated at vertex {i}")));
            }
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::data(path, format!("bad number {t:?} at vertex {i}")))
                })
                .collect::<Result<_>>()?;
            if values.len() != properties.len() {
                return Err(Error::data(
                    path,
                    format!("vertex {i}: expected {} fields, got {}", properties.len(), values.len()),
                ));
            }
            out.push(ThermoPoint {
                position: Vector3::new(values[ix], values[iy], values[iz]),
                temperature: values[it],
                raw: values[ir] as u16,
                keyframe_id: 0,
            });
        }
    }
    Ok(out)
}
