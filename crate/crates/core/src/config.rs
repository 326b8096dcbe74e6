//! Flat key=value pipeline configuration.
//!
//! Every tunable across the pipeline lives here with its default; unknown
//! keys are rejected and each run logs the fully resolved configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Parses `key=value` lines, skipping blanks and `#` comments. Returns
/// (1-based line number, key, value) triples; a line without `=` is an error.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => out.push((i + 1, k.trim().to_string(), v.trim().to_string())),
            None => {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Top-level seed fanned out deterministically to every randomized stage.
    pub seed: u64,

    // image processing
    pub pyramid_levels: usize,
    pub raw_scale: f64,
    pub raw_offset: f64,
    pub rescale_t_low: f64,
    pub rescale_t_high: f64,

    // odometry
    pub nu: f64,
    pub sigma_floor: f64,
    pub max_points: usize,
    pub grid_cell: u32,
    pub min_depth: f64,
    pub border_margin: f64,
    pub track_max_iterations: usize,
    pub track_update_eps: f64,
    pub track_min_valid_ratio: f64,
    pub track_max_weighted_rms: f64,
    pub min_track_points: usize,
    pub keyframe_translation: f64,
    pub keyframe_rotation_deg: f64,
    pub keyframe_valid_ratio: f64,
    pub window_size: usize,

    // loop closing
    pub loop_eta_min: f64,
    pub loop_common_word_ratio_min: f64,
    pub loop_recent_window_s: f64,
    pub loop_epsilon: f64,
    pub loop_min_features: usize,
    pub loop_max_features: usize,
    pub fast_threshold: u8,
    pub loop_min_inlier_ratio: f64,
    pub loop_geom_distance_max: f64,
    pub vocab_branching: usize,
    pub vocab_levels: usize,

    // calibration
    pub ransac_threshold: f64,
    pub ransac_iterations: usize,
    pub ransac_min_inliers: usize,
    pub refine_max_iterations: usize,

    // mapping
    pub map_voxel_size: f64,
    pub map_all_frames: bool,

    // dataset / execution
    pub sync_tolerance_ms: f64,
    pub deterministic: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            pyramid_levels: 4,
            raw_scale: 0.04,
            raw_offset: -273.15,
            rescale_t_low: 0.0,
            rescale_t_high: 30.0,
            nu: 5.0,
            sigma_floor: 1e-3,
            max_points: 1500,
            grid_cell: 24,
            min_depth: 0.1,
            border_margin: 4.0,
            track_max_iterations: 30,
            track_update_eps: 1e-6,
            track_min_valid_ratio: 0.3,
            track_max_weighted_rms: 500.0,
            min_track_points: 50,
            keyframe_translation: 0.5,
            keyframe_rotation_deg: 10.0,
            keyframe_valid_ratio: 0.6,
            window_size: 5,
            loop_eta_min: 0.75,
            loop_common_word_ratio_min: 0.4,
            loop_recent_window_s: 30.0,
            loop_epsilon: 0.05,
            loop_min_features: 20,
            loop_max_features: 500,
            fast_threshold: 15,
            loop_min_inlier_ratio: 0.3,
            loop_geom_distance_max: 5.0,
            vocab_branching: 10,
            vocab_levels: 4,
            ransac_threshold: 0.02,
            ransac_iterations: 500,
            ransac_min_inliers: 20,
            refine_max_iterations: 200,
            map_voxel_size: 0.05,
            map_all_frames: false,
            sync_tolerance_ms: 5.0,
            deterministic: false,
        }
    }
}

macro_rules! config_fields {
    ($apply:ident) => {
        $apply!(seed, u64);
        $apply!(pyramid_levels, usize);
        $apply!(raw_scale, f64);
        $apply!(raw_offset, f64);
        $apply!(rescale_t_low, f64);
        $apply!(rescale_t_high, f64);
        $apply!(nu, f64);
        $apply!(sigma_floor, f64);
        $apply!(max_points, usize);
        $apply!(grid_cell, u32);
        $apply!(min_depth, f64);
        $apply!(border_margin, f64);
        $apply!(track_max_iterations, usize);
        $apply!(track_update_eps, f64);
        $apply!(track_min_valid_ratio, f64);
        $apply!(track_max_weighted_rms, f64);
        $apply!(min_track_points, usize);
        $apply!(keyframe_translation, f64);
        $apply!(keyframe_rotation_deg, f64);
        $apply!(keyframe_valid_ratio, f64);
        $apply!(window_size, usize);
        $apply!(loop_eta_min, f64);
        $apply!(loop_common_word_ratio_min, f64);
        $apply!(loop_recent_window_s, f64);
        $apply!(loop_epsilon, f64);
        $apply!(loop_min_features, usize);
        $apply!(loop_max_features, usize);
        $apply!(fast_threshold, u8);
        $apply!(loop_min_inlier_ratio, f64);
        $apply!(loop_geom_distance_max, f64);
        $apply!(vocab_branching, usize);
        $apply!(vocab_levels, usize);
        $apply!(ransac_threshold, f64);
        $apply!(ransac_iterations, usize);
        $apply!(ransac_min_inliers, usize);
        $apply!(refine_max_iterations, usize);
        $apply!(map_voxel_size, f64);
        $apply!(map_all_frames, bool);
        $apply!(sync_tolerance_ms, f64);
        $apply!(deterministic, bool);
    };
}

impl PipelineConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! apply {
            ($field:ident, $ty:ty) => {
                if key == stringify!($field) {
                    self.$field = value.parse::<$ty>().map_err(|_| {
                        Error::Config(format!(
                            "bad value {value:?} for {} (expected {})",
                            stringify!($field),
                            stringify!($ty)
                        ))
                    })?;
                    return Ok(());
                }
            };
        }
        config_fields!(apply);
        Err(Error::Config(format!("unknown key {key:?}")))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (lineno, key, value) in parse_kv(text)? {
            cfg.set(&key, &value)
                .map_err(|e| Error::Config(format!("line {lineno}: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(path, format!("cannot read config: {e}")))?;
        Self::parse(&text)
    }

    /// Fully resolved configuration as config-file text (keys in declaration
    /// order). Written next to every run's outputs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! apply {
            ($field:ident, $ty:ty) => {
                writeln!(out, "{}={}", stringify!($field), self.$field).expect("string write");
            };
        }
        config_fields!(apply);
        out
    }

    pub fn raw_to_celsius(&self) -> crate::imgproc::RawToCelsius {
        crate::imgproc::RawToCelsius {
            scale: self.raw_scale,
            offset: self.raw_offset,
        }
    }

    /// Per-module seed derived from the top-level seed.
    pub fn seed_for(&self, module: &str) -> u64 {
        // FNV-1a over the module name, mixed into the base seed
        let mut h: u64 = 0xcbf29ce484222325;
        for b in module.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        self.seed ^ h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_text();
        let back = PipelineConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::parse("no_such_key=1").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let err = PipelineConfig::parse("seed").unwrap_err();
        assert!(err.to_string().contains("key=value"));
    }

    #[test]
    fn overrides_apply() {
        let cfg = PipelineConfig::parse("seed=9\nnu=4.0\n# comment\n\nwindow_size=3").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.nu, 4.0);
        assert_eq!(cfg.window_size, 3);
    }

    #[test]
    fn module_seeds_differ() {
        let cfg = PipelineConfig::default();
        assert_ne!(cfg.seed_for("calib"), cfg.seed_for("lidar"));
    }
}
