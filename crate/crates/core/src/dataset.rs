//! Dataset discovery and parsing: `images/*.pgm`, `clouds/*.csv`,
//! `calib.txt`, optional ground truth, corner sidecars, and vocabulary.
//!
//! Image and cloud streams are paired by nearest timestamp within a
//! configurable tolerance; unpaired entries are reported, not silently
//! dropped.

use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};

/// One synchronized image/cloud pair.
#[derive(Debug, Clone)]
pub struct PairedEntry {
    pub timestamp_ns: i64,
    pub image_path: PathBuf,
    pub cloud_path: PathBuf,
    /// `<timestamp>.corners.csv` sidecar next to the image, when present.
    pub corners_path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub pairs: Vec<PairedEntry>,
    pub calib_path: PathBuf,
    pub calib_initial_path: Option<PathBuf>,
    pub groundtruth_path: Option<PathBuf>,
    pub vocab_path: Option<PathBuf>,
    pub board_path: Option<PathBuf>,
    pub warnings: Vec<String>,
}

fn scan_timestamped(dir: &Path, extension: &str) -> Result<Vec<(i64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::data(dir, format!("cannot list: {e}")))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name.strip_suffix(extension) else {
            continue;
        };
        // sidecars like `<ts>.corners.csv` are not cloud files
        if stem.contains('.') {
            continue;
        }
        match stem.parse::<i64>() {
            Ok(ts) => out.push((ts, path)),
            Err(_) => {
                return Err(Error::data(
                    &path,
                    format!("file name {name:?} is not <timestamp_ns>{extension}"),
                ))
            }
        }
    }
    out.sort_by_key(|(ts, _)| *ts);
    Ok(out)
}

impl DatasetManifest {
    /// Loads and validates the dataset layout, pairing images with clouds by
    /// nearest timestamp within `sync_tolerance_ms`.
    pub fn load(root: &Path, sync_tolerance_ms: f64) -> Result<DatasetManifest> {
        let images_dir = root.join("images");
        let clouds_dir = root.join("clouds");
        let calib_path = root.join("calib.txt");

        let mut missing = Vec::new();
        if !images_dir.is_dir() {
            missing.push("images/");
        }
        if !clouds_dir.is_dir() {
            missing.push("clouds/");
        }
        if !calib_path.is_file() {
            missing.push("calib.txt");
        }
        if !missing.is_empty() {
            return Err(Error::data(
                root,
                format!("dataset is missing: {}", missing.join(", ")),
            ));
        }

        let images = scan_timestamped(&images_dir, ".pgm")?;
        let clouds = scan_timestamped(&clouds_dir, ".csv")?;
        if images.is_empty() {
            return Err(Error::data(&images_dir, "no <timestamp_ns>.pgm images"));
        }
        if clouds.is_empty() {
            return Err(Error::data(&clouds_dir, "no <timestamp_ns>.csv clouds"));
        }

        let tolerance_ns = (sync_tolerance_ms * 1e6).round() as i64;
        let mut pairs = Vec::new();
        let mut warnings = Vec::new();
        let mut cloud_used = vec![false; clouds.len()];
        let mut dropped_images = 0usize;
        for (ts, image_path) in &images {
            // nearest cloud by timestamp
            let idx = clouds.partition_point(|(cts, _)| cts < ts);
            let mut best: Option<(usize, i64)> = None;
            for candidate in [idx.wrapping_sub(1), idx] {
                if let Some((cts, _)) = clouds.get(candidate) {
                    let dt = (cts - ts).abs();
                    if best.is_none_or(|(_, bd)| dt < bd) {
                        best = Some((candidate, dt));
                    }
                }
            }
            match best {
                Some((ci, dt)) if dt <= tolerance_ns && !cloud_used[ci] => {
                    cloud_used[ci] = true;
                    let corners = image_path.with_file_name(format!("{ts}.corners.csv"));
                    pairs.push(PairedEntry {
                        timestamp_ns: *ts,
                        image_path: image_path.clone(),
                        cloud_path: clouds[ci].1.clone(),
                        corners_path: corners.is_file().then_some(corners),
                    });
                }
                _ => dropped_images += 1,
            }
        }
        let dropped_clouds = cloud_used.iter().filter(|u| !**u).count();
        if dropped_images > 0 {
            warnings.push(format!(
                "{dropped_images} image(s) had no cloud within {sync_tolerance_ms} ms"
            ));
        }
        if dropped_clouds > 0 {
            warnings.push(format!(
                "{dropped_clouds} cloud(s) had no image within {sync_tolerance_ms} ms"
            ));
        }
        if pairs.is_empty() {
            return Err(Error::data(
                root,
                format!(
                    "no image/cloud pairs within {sync_tolerance_ms} ms \
                     ({} images, {} clouds all unpaired)",
                    images.len(),
                    clouds.len()
                ),
            ));
        }

        let optional = |name: &str| -> Option<PathBuf> {
            let p = root.join(name);
            p.is_file().then_some(p)
        };
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            pairs,
            calib_path,
            calib_initial_path: optional("calib_initial.txt"),
            groundtruth_path: optional("groundtruth.txt"),
            vocab_path: optional("vocab.bin"),
            board_path: optional("board.txt"),
            warnings,
        })
    }
}

/// Reads a cloud CSV: one `x,y,z` triple (meters, LiDAR frame) per line.
pub fn read_cloud_csv(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(path, format!("cannot read cloud: {e}")))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::data(
                path,
                format!("line {}: expected x,y,z, got {line:?}", lineno + 1),
            ));
        }
        let mut v = [0.0f64; 3];
        for (i, f) in fields.iter().enumerate() {
            v[i] = f.trim().parse().map_err(|_| {
                Error::data(path, format!("line {}: bad number {f:?}", lineno + 1))
            })?;
        }
        out.push(Vector3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

/// Reads a corner sidecar: `u,v` pixel coordinates per line, row-major board
/// order.
pub fn read_corners_csv(path: &Path) -> Result<Vec<Vector2<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(path, format!("cannot read corners: {e}")))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::data(
                path,
                format!("line {}: expected u,v, got {line:?}", lineno + 1),
            ));
        }
        let u: f64 = fields[0].trim().parse().map_err(|_| {
            Error::data(path, format!("line {}: bad number {:?}", lineno + 1, fields[0]))
        })?;
        let v: f64 = fields[1].trim().parse().map_err(|_| {
            Error::data(path, format!("line {}: bad number {:?}", lineno + 1, fields[1]))
        })?;
        out.push(Vector2::new(u, v));
    }
    Ok(out)
}
