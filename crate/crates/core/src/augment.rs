//! Seeded geometric augmentation: shift, reflection, rotation.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation spec: {0}")]
    Spec(String),
    #[error("invalid image: {0}")]
    Image(String),
    #[error(transparent)]
    Codec(#[from] image::ImageError),
}

/// Order in which the transforms compose.
pub const TRANSFORM_ORDER: [&str; 3] = ["shift", "reflect", "rotate"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub max_shift_px: u32,
    pub allow_reflect_x: bool,
    pub allow_reflect_y: bool,
    pub max_rotate_deg: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            max_shift_px: 30,
            allow_reflect_x: true,
            allow_reflect_y: true,
            max_rotate_deg: 90.0,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    /// Spec that leaves every image untouched.
    pub fn identity(seed: u64) -> Self {
        Self {
            max_shift_px: 0,
            allow_reflect_x: false,
            allow_reflect_y: false,
            max_rotate_deg: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=360.0).contains(&self.max_rotate_deg) {
            return Err(AugmentError::Spec(format!(
                "max_rotate_deg must lie in [0, 360], got {}",
                self.max_rotate_deg
            )));
        }
        Ok(())
    }
}

/// Transform parameters drawn for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub dx: i64,
    pub dy: i64,
    /// Mirror left-right.
    pub reflect_x: bool,
    /// Mirror top-bottom.
    pub reflect_y: bool,
    pub angle_deg: f64,
}

/// Parameters for `(spec.seed, draw_index)`; each draw index owns its own
/// ChaCha stream so draws are independent of evaluation order.
pub fn draw_params(spec: &AugmentSpec, draw_index: u64) -> AugmentParams {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(draw_index);
    let m = i64::from(spec.max_shift_px);
    let dx = rng.random_range(-m..=m);
    let dy = rng.random_range(-m..=m);
    let reflect_x = rng.random_bool(0.5) && spec.allow_reflect_x;
    let reflect_y = rng.random_bool(0.5) && spec.allow_reflect_y;
    let r = spec.max_rotate_deg;
    let angle_deg = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    AugmentParams {
        dx,
        dy,
        reflect_x,
        reflect_y,
        angle_deg,
    }
}

pub fn augment(image: &Array3<f32>, spec: &AugmentSpec, draw_index: u64) -> Result<Array3<f32>, AugmentError> {
    spec.validate()?;
    if image.is_empty() {
        return Err(AugmentError::Image("image is empty".into()));
    }
    Ok(apply_params(image, &draw_params(spec, draw_index)))
}

/// Applies shift, then reflections, then rotation; uncovered pixels are 0.
pub fn apply_params(image: &Array3<f32>, p: &AugmentParams) -> Array3<f32> {
    let (h, w, c) = image.dim();
    let (hi, wi) = (h as i64, w as i64);
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..hi {
        let sy = if p.reflect_y { hi - 1 - y } else { y } - p.dy;
        if !(0..hi).contains(&sy) {
            continue;
        }
        for x in 0..wi {
            let sx = if p.reflect_x { wi - 1 - x } else { x } - p.dx;
            if !(0..wi).contains(&sx) {
                continue;
            }
            for ch in 0..c {
                out[[y as usize, x as usize, ch]] = image[[sy as usize, sx as usize, ch]];
            }
        }
    }
    if p.angle_deg == 0.0 {
        out
    } else {
        rotate(&out, p.angle_deg)
    }
}

/// Counter-clockwise rotation about the image center with bilinear sampling.
pub fn rotate(image: &Array3<f32>, angle_deg: f64) -> Array3<f32> {
    let (h, w, c) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut out = Array3::<f32>::zeros((h, w, c));
    let eps = 1e-9;
    for y in 0..h {
        for x in 0..w {
            let (ox, oy) = (x as f64 - cx, y as f64 - cy);
            // inverse map; image rows grow downwards
            let sx = cos * ox - sin * oy + cx;
            let sy = sin * ox + cos * oy + cy;
            if sx < -eps || sy < -eps || sx > w as f64 - 1.0 + eps || sy > h as f64 - 1.0 + eps {
                continue;
            }
            let (sx, sy) = (sx.clamp(0.0, w as f64 - 1.0), sy.clamp(0.0, h as f64 - 1.0));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for ch in 0..c {
                let top = image[[y0, x0, ch]] * (1.0 - fx) + image[[y0, x1, ch]] * fx;
                let bottom = image[[y1, x0, ch]] * (1.0 - fx) + image[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Loads a PNG as H x W x C with values in [0, 1]; grayscale stays 1 channel,
/// everything else becomes RGB.
pub fn read_png(path: &Path) -> Result<Array3<f32>, AugmentError> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (raw, c) = match img {
        image::DynamicImage::ImageLuma8(g) => (g.into_raw(), 1),
        other => (other.into_rgb8().into_raw(), 3),
    };
    let data = raw.into_iter().map(|v| f32::from(v) / 255.0).collect();
    Array3::from_shape_vec((h, w, c), data).map_err(|e| AugmentError::Image(e.to_string()))
}

pub fn write_png(image: &Array3<f32>, path: &Path) -> Result<(), AugmentError> {
    let (h, w, c) = image.dim();
    let bytes: Vec<u8> = image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(AugmentError::Image(format!("cannot write {c}-channel PNG"))),
    };
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, color, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Array3<f32> {
        Array3::from_shape_fn((h, w, c), |(y, x, ch)| (y * w * c + x * c + ch) as f32 + 1.0)
    }

    #[test]
    fn identity_spec_is_exact() {
        let img = ramp(7, 5, 3);
        for i in 0..20 {
            assert_eq!(augment(&img, &AugmentSpec::identity(9), i).unwrap(), img);
        }
    }

    #[test]
    fn deterministic_per_draw() {
        let img = ramp(16, 12, 1);
        let spec = AugmentSpec { seed: 42, ..Default::default() };
        assert_eq!(augment(&img, &spec, 3).unwrap(), augment(&img, &spec, 3).unwrap());
        assert_ne!(draw_params(&spec, 3), draw_params(&spec, 4));
    }

    #[test]
    fn shift_moves_content_and_zero_fills() {
        let img = ramp(3, 4, 1);
        let p = AugmentParams { dx: 1, dy: -1, reflect_x: false, reflect_y: false, angle_deg: 0.0 };
        let out = apply_params(&img, &p);
        assert_eq!(out[[0, 1, 0]], img[[1, 0, 0]]);
        assert_eq!(out[[1, 3, 0]], img[[2, 2, 0]]);
        assert_eq!(out[[2, 2, 0]], 0.0);
        assert_eq!(out[[0, 0, 0]], 0.0);
    }

    #[test]
    fn reflections() {
        let img = ramp(2, 3, 1);
        let p = AugmentParams { dx: 0, dy: 0, reflect_x: true, reflect_y: false, angle_deg: 0.0 };
        let out = apply_params(&img, &p);
        assert_eq!(out[[0, 0, 0]], img[[0, 2, 0]]);
        let p = AugmentParams { reflect_x: false, reflect_y: true, ..p };
        assert_eq!(apply_params(&img, &p)[[0, 1, 0]], img[[1, 1, 0]]);
    }

    #[test]
    fn quarter_turn_is_a_permutation() {
        let img = ramp(5, 5, 1);
        let out = rotate(&img, 90.0);
        let mut a: Vec<f32> = img.iter().copied().collect();
        let mut b: Vec<f32> = out.iter().map(|v| v.round()).collect();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
        assert_eq!(out[[2, 2, 0]], img[[2, 2, 0]]);
    }

    #[test]
    fn rejects_bad_input() {
        let spec = AugmentSpec { max_rotate_deg: 400.0, ..Default::default() };
        assert!(matches!(augment(&ramp(2, 2, 1), &spec, 0), Err(AugmentError::Spec(_))));
        let empty = Array3::<f32>::zeros((0, 3, 1));
        assert!(matches!(augment(&empty, &AugmentSpec::default(), 0), Err(AugmentError::Image(_))));
    }

    #[test]
    fn shift_bounds_over_many_draws() {
        let spec = AugmentSpec { seed: 7, ..Default::default() };
        let (mut lo, mut hi) = (false, false);
        for i in 0..10_000 {
            let p = draw_params(&spec, i);
            assert!(p.dx.abs() <= 30 && p.dy.abs() <= 30);
            assert!(p.angle_deg.abs() <= 90.0);
            lo |= p.dx == -30 || p.dy == -30;
            hi |= p.dx == 30 || p.dy == 30;
        }
        assert!(lo && hi);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((4, 3, 3), |(y, x, c)| ((y + x + c) % 3) as f32 / 2.0);
        let path = dir.path().join("a.png");
        write_png(&img, &path).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.dim(), img.dim());
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }
}
