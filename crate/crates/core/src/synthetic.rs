//! Generated two-class dataset separable by dominant hue: pallid, low
//! saturation patches for `anemic` and deep, saturated red for `non_anemic`.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::CLASS_NAMES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub size: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { per_class: 200, size: 128, seed: 0 }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// One image of the given class (0 = anemic/pallid, 1 = non-anemic/saturated).
pub fn synthetic_image<R: Rng + ?Sized>(label: usize, size: u32, rng: &mut R) -> RgbImage {
    let (sat, val) = if label == 0 { ((0.08, 0.30), (0.80, 0.97)) } else { ((0.60, 0.92), (0.50, 0.80)) };
    let base_h = rng.gen_range(-12.0..8.0);
    let base_s = rng.gen_range(sat.0..sat.1);
    let base_v = rng.gen_range(val.0..val.1);
    let mut img = RgbImage::from_pixel(size, size, Rgb(hsv_to_rgb(base_h, base_s, base_v)));

    let patches = rng.gen_range(3..8);
    for _ in 0..patches {
        let cx = rng.gen_range(0.0..f64::from(size));
        let cy = rng.gen_range(0.0..f64::from(size));
        let rx = rng.gen_range(0.08..0.3) * f64::from(size);
        let ry = rng.gen_range(0.08..0.3) * f64::from(size);
        let h = base_h + rng.gen_range(-6.0..6.0);
        let s = rng.gen_range(sat.0..sat.1);
        let v = rng.gen_range(val.0..val.1);
        let color = hsv_to_rgb(h, s, v);
        for y in 0..size {
            for x in 0..size {
                let dx = (f64::from(x) - cx) / rx;
                let dy = (f64::from(y) - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    img.put_pixel(x, y, Rgb(color));
                }
            }
        }
    }
    for px in img.pixels_mut() {
        let n: i16 = rng.gen_range(-10..=10);
        px.0 = px.0.map(|c| (i16::from(c) + n).clamp(0, 255) as u8);
    }
    img
}

/// Writes `per_class` PNGs into `root/anemic` and `root/non_anemic`.
pub fn generate_synthetic_dataset(root: &Path, spec: SyntheticSpec) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for (label, name) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..spec.per_class {
            let img = synthetic_image(label, spec.size, &mut rng);
            img.save(dir.join(format!("{name}_{i:04}.png")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_saturation(img: &RgbImage) -> f64 {
        let total: f64 = img
            .pixels()
            .map(|p| {
                let max = *p.0.iter().max().unwrap() as f64;
                let min = *p.0.iter().min().unwrap() as f64;
                if max == 0.0 {
                    0.0
                } else {
                    (max - min) / max
                }
            })
            .sum();
        total / f64::from(img.width() * img.height())
    }

    #[test]
    fn classes_separate_by_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pallid = mean_saturation(&synthetic_image(0, 48, &mut rng));
            let deep = mean_saturation(&synthetic_image(1, 48, &mut rng));
            assert!(pallid < 0.42 && deep > 0.45, "{pallid} {deep}");
        }
    }

    #[test]
    fn writes_class_folders() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(dir.path(), SyntheticSpec { per_class: 3, size: 64, seed: 1 }).unwrap();
        let index = crate::data::load_dataset(dir.path()).unwrap();
        assert_eq!(index.class_counts(), vec![3, 3]);
    }
}
