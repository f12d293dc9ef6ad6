//! PNG loading/saving and deterministic toy-image generation.
//!
//! Images are 8-bit RGB PNGs mapped to `(3, H, W)` f64 arrays in `[-1, 1]`;
//! masks are grayscale PNGs thresholded at >127.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::preprocess::{Mask, MaskKind, MaskResolution};

/// Maps `[0, 255]` to `[-1, 1]`.
pub fn pixel_to_unit(v: u8) -> f64 {
    v as f64 / 255.0 * 2.0 - 1.0
}

/// Maps `[-1, 1]` back to `[0, 255]` with clamping.
pub fn unit_to_pixel(v: f64) -> u8 {
    ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::input(format!("cannot open image {}: {e}", path.display())))?
        .decode()?
        .to_rgb8();
    Ok(rgb_to_array(&img))
}

pub fn rgb_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        pixel_to_unit(img.get_pixel(x as u32, y as u32)[c])
    })
}

pub fn array_to_rgb(arr: &Array3<f64>) -> Result<RgbImage> {
    let (c, h, w) = arr.dim();
    if c != 3 {
        return Err(Error::contract(format!("expected 3 channels, got {c}")));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                unit_to_pixel(arr[[0, y, x]]),
                unit_to_pixel(arr[[1, y, x]]),
                unit_to_pixel(arr[[2, y, x]]),
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

pub fn save_image(arr: &Array3<f64>, path: &Path) -> Result<()> {
    array_to_rgb(arr)?
        .save(path)
        .map_err(|e| Error::input(format!("cannot write image {}: {e}", path.display())))
}

pub fn load_mask(path: &Path, kind: MaskKind) -> Result<Mask> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::input(format!("cannot open mask {}: {e}", path.display())))?
        .decode()?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32)[0] > 127)
    });
    Mask::new(data, kind, MaskResolution::Pixel)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in mask.data().indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Luma([v * 255]));
    }
    img.save(path)
        .map_err(|e| Error::input(format!("cannot write mask {}: {e}", path.display())))
}

/// Writes a single-channel f64 array as a min-max normalized grayscale PNG.
/// Degenerate (constant) inputs map to mid-gray.
pub fn save_heatmap(arr: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = arr.dim();
    let min = arr.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = arr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in arr.indexed_iter() {
        let g = if span < 1e-12 {
            128
        } else {
            ((v - min) / span * 255.0).round() as u8
        };
        img.put_pixel(x as u32, y as u32, image::Luma([g]));
    }
    img.save(path)
        .map_err(|e| Error::input(format!("cannot write heatmap {}: {e}", path.display())))
}

/// Deterministic smooth test image: a seeded sum of 2-D sinusoids per
/// channel, quantized to the 8-bit pixel grid so PNG round-trips are exact.
pub fn toy_image(seed: u64, height: usize, width: usize) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let angle = Uniform::new(0.0f64, std::f64::consts::TAU).unwrap();
    let freq = Uniform::new(0.5f64, 3.0).unwrap();
    let mut arr = Array3::zeros((3, height, width));
    for c in 0..3 {
        let mut waves = Vec::new();
        for _ in 0..4 {
            waves.push((
                freq.sample(&mut rng),
                freq.sample(&mut rng),
                angle.sample(&mut rng),
            ));
        }
        for y in 0..height {
            for x in 0..width {
                let u = y as f64 / height as f64;
                let v = x as f64 / width as f64;
                let mut s = 0.0;
                for &(fy, fx, phase) in &waves {
                    s += (std::f64::consts::TAU * (fy * u + fx * v) + phase).sin();
                }
                arr[[c, y, x]] = s / 4.0;
            }
        }
    }
    // Snap to representable pixel values.
    arr.mapv(|v| pixel_to_unit(unit_to_pixel(v.clamp(-1.0, 1.0))))
}
