//! Thermal image container, sub-pixel sampling, pyramids, and the
//! fixed-range 14-bit to 8-bit rescale used by loop detection.
//!
//! Tracking always operates on raw counts converted to floats once at pyramid
//! level 0; no normalization or histogram equalization is ever applied to the
//! tracking cost.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};

/// Largest valid 14-bit radiometric count.
pub const MAX_RAW: u16 = 16383;

/// Configurable linear map from raw counts to degrees Celsius.
///
/// The default (scale 0.04, offset -273.15) is the centikelvin convention of
/// radiometric LWIR cameras. It only affects the loop-detection rescale and
/// map coloring, never the raw-count tracking cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawToCelsius {
    pub scale: f64,
    pub offset: f64,
}

impl Default for RawToCelsius {
    fn default() -> Self {
        RawToCelsius {
            scale: 0.04,
            offset: -273.15,
        }
    }
}

impl RawToCelsius {
    pub fn to_celsius(&self, raw: f64) -> f64 {
        self.scale * raw + self.offset
    }

    /// Inverse map; the caller is responsible for rounding/clamping to the
    /// 14-bit range when producing sensor counts.
    pub fn to_raw(&self, celsius: f64) -> f64 {
        (celsius - self.offset) / self.scale
    }
}

/// A 14-bit radiometric image with a nanosecond timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalImage {
    pub width: u32,
    pub height: u32,
    data: Vec<u16>,
    pub timestamp_ns: i64,
}

impl ThermalImage {
    pub fn new(width: u32, height: u32, data: Vec<u16>, timestamp_ns: i64) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::InvalidImage(format!(
                "{}x{} image needs {} samples, got {}",
                width,
                height,
                width as usize * height as usize,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > MAX_RAW) {
            return Err(Error::InvalidImage(format!(
                "sample {} at index {} exceeds the 14-bit range",
                data[pos], pos
            )));
        }
        Ok(ThermalImage {
            width,
            height,
            data,
            timestamp_ns,
        })
    }

    pub fn constant(width: u32, height: u32, value: u16, timestamp_ns: i64) -> Result<Self> {
        Self::new(
            width,
            height,
            vec![value; width as usize * height as usize],
            timestamp_ns,
        )
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    /// Writes the image as binary 16-bit PGM (`P5`, maxval 16383,
    /// big-endian sample bytes).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n{}\n", self.width, self.height, MAX_RAW).into_bytes();
        bytes.reserve(self.data.len() * 2);
        for &v in &self.data {
            bytes.push((v >> 8) as u8);
            bytes.push((v & 0xff) as u8);
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Reads a binary 16-bit PGM. Maxval 16383 and 65535 are accepted, but
    /// every sample must stay within the 14-bit range.
    pub fn read_pgm(path: &Path, timestamp_ns: i64) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::data(path, format!("cannot read: {e}")))?;
        let mut pos = 0usize;

        let next_token = |bytes: &[u8], pos: &mut usize| -> Result<String> {
            // skip whitespace and # comments
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(Error::data(path, format!("truncated header at byte {start}")));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };

        let magic = next_token(&bytes, &mut pos)?;
        if magic != "P5" {
            return Err(Error::data(path, format!("expected P5 magic, got {magic:?}")));
        }
        let width: u32 = next_token(&bytes, &mut pos)?
            .parse()
            .map_err(|_| Error::data(path, "bad width"))?;
        let height: u32 = next_token(&bytes, &mut pos)?
            .parse()
            .map_err(|_| Error::data(path, "bad height"))?;
        let maxval: u32 = next_token(&bytes, &mut pos)?
            .parse()
            .map_err(|_| Error::data(path, "bad maxval"))?;
        if maxval != MAX_RAW as u32 && maxval != 65535 {
            return Err(Error::data(
                path,
                format!("unsupported maxval {maxval} (expected 16383 or 65535)"),
            ));
        }
        // exactly one whitespace byte separates the header from the payload
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::data(path, "missing header terminator"));
        }
        pos += 1;

        let n = width as usize * height as usize;
        if bytes.len() - pos < 2 * n {
            return Err(Error::data(
                path,
                format!(
                    "payload truncated at byte {}: need {} sample bytes, have {}",
                    pos,
                    2 * n,
                    bytes.len() - pos
                ),
            ));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let hi = bytes[pos + 2 * i] as u16;
            let lo = bytes[pos + 2 * i + 1] as u16;
            let v = (hi << 8) | lo;
            if v > MAX_RAW {
                return Err(Error::data(
                    path,
                    format!("sample {} at byte {} exceeds the 14-bit range", v, pos + 2 * i),
                ));
            }
            data.push(v);
        }
        ThermalImage::new(width, height, data, timestamp_ns)
    }
}

/// Floating-point image used by pyramid levels and sub-pixel sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: u32,
    pub height: u32,
    data: Vec<f64>,
}

impl FloatImage {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize);
        FloatImage {
            width,
            height,
            data,
        }
    }

    pub fn from_thermal(img: &ThermalImage) -> Self {
        FloatImage {
            width: img.width,
            height: img.height,
            data: img.data().iter().map(|&v| v as f64).collect(),
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear interpolation of the four neighbors. `None` when the sample
    /// support leaves the image (the caller drops the point from the cost).
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        if !(u >= 0.0 && v >= 0.0 && u < (self.width - 1) as f64 && v < (self.height - 1) as f64) {
            return None;
        }
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let s = u - x0 as f64;
        let t = v - y0 as f64;
        let w = self.width as usize;
        let i00 = self.data[y0 * w + x0];
        let i10 = self.data[y0 * w + x0 + 1];
        let i01 = self.data[(y0 + 1) * w + x0];
        let i11 = self.data[(y0 + 1) * w + x0 + 1];
        Some((1.0 - t) * ((1.0 - s) * i00 + s * i10) + t * ((1.0 - s) * i01 + s * i11))
    }

    /// Image gradient by central differences of bilinear samples at
    /// half-pixel offsets.
    pub fn sample_gradient(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        let gx = self.sample_bilinear(u + 0.5, v)? - self.sample_bilinear(u - 0.5, v)?;
        let gy = self.sample_bilinear(u, v + 0.5)? - self.sample_bilinear(u, v - 0.5)?;
        Some((gx, gy))
    }

    /// Bilinear value together with the exact gradient of the interpolant
    /// inside the containing cell. Used by the Gauss-Newton Jacobians, which
    /// must differentiate the same function the residual samples.
    pub fn sample_with_gradient(&self, u: f64, v: f64) -> Option<(f64, f64, f64)> {
        if !(u >= 0.0 && v >= 0.0 && u < (self.width - 1) as f64 && v < (self.height - 1) as f64) {
            return None;
        }
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let s = u - x0 as f64;
        let t = v - y0 as f64;
        let w = self.width as usize;
        let i00 = self.data[y0 * w + x0];
        let i10 = self.data[y0 * w + x0 + 1];
        let i01 = self.data[(y0 + 1) * w + x0];
        let i11 = self.data[(y0 + 1) * w + x0 + 1];
        let value = (1.0 - t) * ((1.0 - s) * i00 + s * i10) + t * ((1.0 - s) * i01 + s * i11);
        let gx = (1.0 - t) * (i10 - i00) + t * (i11 - i01);
        let gy = (1.0 - s) * (i01 - i00) + s * (i11 - i10);
        Some((value, gx, gy))
    }
}

/// Multi-level image pyramid, level 0 at full resolution, each level a 2x2
/// box average of the previous (floor division on odd dimensions).
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<FloatImage>,
}

impl Pyramid {
    pub fn build(img: &ThermalImage, levels: usize) -> Result<Pyramid> {
        if levels < 1 {
            return Err(Error::InvalidImage("pyramid needs at least one level".into()));
        }
        let coarsest_w = img.width >> (levels - 1);
        let coarsest_h = img.height >> (levels - 1);
        if coarsest_w < 8 || coarsest_h < 8 {
            return Err(Error::ImageTooSmall {
                width: img.width,
                height: img.height,
                levels,
            });
        }
        let mut out = Vec::with_capacity(levels);
        out.push(FloatImage::from_thermal(img));
        for _ in 1..levels {
            out.push(downsample_box(out.last().expect("non-empty pyramid")));
        }
        Ok(Pyramid { levels: out })
    }

    pub fn level(&self, l: usize) -> &FloatImage {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

fn downsample_box(src: &FloatImage) -> FloatImage {
    let w = src.width / 2;
    let h = src.height / 2;
    let mut data = Vec::with_capacity(w as usize * h as usize);
    for y in 0..h {
        for x in 0..w {
            let sum = src.get(2 * x, 2 * y)
                + src.get(2 * x + 1, 2 * y)
                + src.get(2 * x, 2 * y + 1)
                + src.get(2 * x + 1, 2 * y + 1);
            data.push(sum * 0.25);
        }
    }
    FloatImage::new(w, h, data)
}

/// 8-bit grayscale image (loop-detection input).
#[derive(Debug, Clone, PartialEq)]
pub struct Image8 {
    pub width: u32,
    pub height: u32,
    data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize);
        Image8 {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// Rescales raw counts to 8 bits over a fixed Celsius window
/// (`pixel = clamp(round(255 (T - t_low) / (t_high - t_low)), 0, 255)`).
///
/// The window is fixed (default 0 to 30 C) rather than derived from the scene
/// so that a hot or cold object entering the frame cannot shift the contrast
/// of everything else.
pub fn rescale_to_8bit(
    img: &ThermalImage,
    t_low: f64,
    t_high: f64,
    conv: &RawToCelsius,
) -> Result<Image8> {
    if t_low >= t_high {
        return Err(Error::Config(format!(
            "rescale window requires t_low < t_high, got [{t_low}, {t_high}]"
        )));
    }
    let span = t_high - t_low;
    let data = img
        .data()
        .iter()
        .map(|&raw| {
            let t = conv.to_celsius(raw as f64);
            (255.0 * (t - t_low) / span).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(Image8::new(img.width, img.height, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_image(w: u32, h: u32) -> FloatImage {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.push(3.0 * x as f64 + 5.0 * y as f64);
            }
        }
        FloatImage::new(w, h, data)
    }

    #[test]
    fn bilinear_exact_at_integer_pixels() {
        let img = ramp_image(16, 12);
        assert_eq!(img.sample_bilinear(4.0, 7.0).unwrap(), img.get(4, 7));
        assert_eq!(img.sample_bilinear(0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn constant_image_has_zero_gradient() {
        let img = FloatImage::new(16, 16, vec![5000.0; 256]);
        for (u, v) in [(3.2, 4.7), (8.0, 8.0), (1.5, 13.5)] {
            let (gx, gy) = img.sample_gradient(u, v).unwrap();
            assert_eq!(gx, 0.0);
            assert_eq!(gy, 0.0);
        }
    }

    #[test]
    fn ramp_gradient_is_exact() {
        let img = ramp_image(32, 32);
        for (u, v) in [(5.3, 9.8), (12.0, 4.5), (20.25, 20.75)] {
            let (gx, gy) = img.sample_gradient(u, v).unwrap();
            assert!((gx - 3.0).abs() < 1e-6, "gx={gx}");
            assert!((gy - 5.0).abs() < 1e-6, "gy={gy}");
            let (_, gx2, gy2) = img.sample_with_gradient(u, v).unwrap();
            assert!((gx2 - 3.0).abs() < 1e-6);
            assert!((gy2 - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_bounds_sampling_is_none() {
        let img = ramp_image(8, 8);
        assert!(img.sample_bilinear(-0.1, 2.0).is_none());
        assert!(img.sample_bilinear(7.0, 2.0).is_none());
        assert!(img.sample_bilinear(2.0, 7.5).is_none());
        assert!(img.sample_gradient(0.2, 2.0).is_none());
    }

    #[test]
    fn pyramid_of_constant_image_is_constant() {
        let img = ThermalImage::constant(64, 64, 5000, 0).unwrap();
        let pyr = Pyramid::build(&img, 3).unwrap();
        for l in 0..3 {
            assert!(pyr.level(l).data().iter().all(|&v| v == 5000.0));
        }
    }

    #[test]
    fn pyramid_box_average_blocks() {
        let data: Vec<u16> = (0..16).collect();
        let img = ThermalImage::new(4, 4, data, 0).unwrap();
        // 8x8 minimum applies to the coarsest level; build by hand here
        let fine = FloatImage::from_thermal(&img);
        let coarse = downsample_box(&fine);
        assert_eq!(coarse.get(0, 0), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(coarse.get(1, 0), (2.0 + 3.0 + 6.0 + 7.0) / 4.0);
        assert_eq!(coarse.get(0, 1), (8.0 + 9.0 + 12.0 + 13.0) / 4.0);
        assert_eq!(coarse.get(1, 1), (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }

    #[test]
    fn pyramid_too_small_is_rejected() {
        let img = ThermalImage::constant(16, 16, 100, 0).unwrap();
        assert!(matches!(
            Pyramid::build(&img, 3),
            Err(Error::ImageTooSmall { .. })
        ));
        assert!(Pyramid::build(&img, 2).is_ok());
    }

    #[test]
    fn rescale_endpoints_and_midpoint() {
        let conv = RawToCelsius::default();
        let raw_low = conv.to_raw(0.0).round() as u16; // 0 C
        let raw_high = conv.to_raw(30.0).round() as u16; // 30 C
        let raw_mid = conv.to_raw(15.0).round() as u16; // 15 C

        let img = ThermalImage::new(3, 1, vec![raw_low, raw_mid, raw_high], 0).unwrap();
        let out = rescale_to_8bit(&img, 0.0, 30.0, &conv).unwrap();
        assert_eq!(out.get(0, 0), 0);
        assert_eq!(out.get(1, 0), 128); // round(255 * 0.5)
        assert_eq!(out.get(2, 0), 255);
    }

    #[test]
    fn rescale_monotone_over_all_raw_values() {
        let conv = RawToCelsius::default();
        let data: Vec<u16> = (0..=MAX_RAW).collect();
        let img = ThermalImage::new(16384, 1, data, 0).unwrap();
        let out = rescale_to_8bit(&img, 0.0, 30.0, &conv).unwrap();
        for i in 1..16384u32 {
            assert!(out.get(i, 0) >= out.get(i - 1, 0), "not monotone at raw {i}");
        }
    }

    #[test]
    fn rescale_rejects_inverted_window() {
        let img = ThermalImage::constant(2, 2, 100, 0).unwrap();
        assert!(rescale_to_8bit(&img, 30.0, 0.0, &RawToCelsius::default()).is_err());
    }

    #[test]
    fn thermal_image_rejects_out_of_range() {
        assert!(ThermalImage::new(2, 1, vec![0, 16384], 0).is_err());
        assert!(ThermalImage::new(2, 1, vec![0, 16383], 0).is_ok());
        assert!(ThermalImage::new(3, 1, vec![0, 1], 0).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("1234.pgm");
        let data: Vec<u16> = (0..64u16).map(|i| i * 251 % 16384).collect();
        let img = ThermalImage::new(8, 8, data, 1234).unwrap();
        img.write_pgm(&path).unwrap();
        let back = ThermalImage::read_pgm(&path, 1234).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn pgm_rejects_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");

        std::fs::write(&path, b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
        assert!(ThermalImage::read_pgm(&path, 0).is_err());

        std::fs::write(&path, b"P5\n4 4\n16383\n\x00\x01").unwrap();
        let err = ThermalImage::read_pgm(&path, 0).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    proptest! {
        #[test]
        fn prop_bilinear_exact_for_affine_images(
            a in -10.0f64..10.0, b in -10.0f64..10.0, c in -100.0f64..100.0,
            u in 0.0f64..14.9, v in 0.0f64..14.9,
        ) {
            let mut data = Vec::new();
            for y in 0..16u32 {
                for x in 0..16u32 {
                    data.push(a * x as f64 + b * y as f64 + c);
                }
            }
            let img = FloatImage::new(16, 16, data);
            let got = img.sample_bilinear(u, v).unwrap();
            let want = a * u + b * v + c;
            prop_assert!((got - want).abs() < 1e-6);
        }

        #[test]
        fn prop_pyramid_preserves_mean_for_even_dims(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let data: Vec<u16> = (0..32 * 32).map(|_| rng.gen_range(0..=MAX_RAW)).collect();
            let img = ThermalImage::new(32, 32, data, 0).unwrap();
            let pyr = Pyramid::build(&img, 2).unwrap();
            let m0 = pyr.level(0).mean();
            let m1 = pyr.level(1).mean();
            prop_assert!((m0 - m1).abs() < 1e-6);
        }
    }
}
