//! Training and evaluation image transforms.
//!
//! The training stack runs, in order: bicubic resize, random crop (reflect padded
//! when the image is smaller than the crop), horizontal flip, vertical flip,
//! TrivialAugmentWide, colour jitter, random affine, Gaussian blur, channel
//! normalisation and finally random erasing in normalised space.
//!
//! All stochastic stages draw from a caller-supplied random stream, so a
//! transform is a pure function of `(image, stream state)`.

use image::{imageops::FilterType, DynamicImage, RgbImage};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Number of magnitude bins in the wide TrivialAugment search space.
pub const TRIVIAL_BINS: u8 = 31;

/// Normalised image tensor, shape `(3, height, width)`.
pub type ImageTensor = Array3<f32>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub resize_px: u32,
    pub crop_px: u32,
    /// `false` takes the centre crop, as the evaluation transform does.
    pub random_crop: bool,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub trivial_augment_enabled: bool,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub affine_shear_deg: f64,
    pub affine_translate: f64,
    pub blur_p: f64,
    pub blur_kernel: u32,
    pub blur_sigma: (f64, f64),
    pub erase_p: f64,
    pub erase_area_range: (f64, f64),
    pub erase_aspect_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resize_px: 341,
            crop_px: 300,
            random_crop: true,
            hflip_p: 0.5,
            vflip_p: 0.2,
            trivial_augment_enabled: true,
            jitter_brightness: 0.4,
            jitter_contrast: 0.4,
            affine_shear_deg: 10.0,
            affine_translate: 0.1,
            blur_p: 0.2,
            blur_kernel: 5,
            blur_sigma: (0.1, 2.0),
            erase_p: 0.25,
            erase_area_range: (0.02, 0.33),
            erase_aspect_range: (0.3, 3.3),
        }
    }
}

impl AugmentConfig {
    /// Same stack at a different crop size; the resize keeps the 341/300 ratio.
    pub fn with_crop(crop_px: u32) -> Self {
        let resize_px = (f64::from(crop_px) * 341.0 / 300.0).round() as u32;
        AugmentConfig { resize_px, crop_px, ..Self::default() }
    }

    /// Every stochastic stage switched off and a centred crop.
    pub fn deterministic(&self) -> Self {
        AugmentConfig {
            random_crop: false,
            hflip_p: 0.0,
            vflip_p: 0.0,
            trivial_augment_enabled: false,
            jitter_brightness: 0.0,
            jitter_contrast: 0.0,
            affine_shear_deg: 0.0,
            affine_translate: 0.0,
            blur_p: 0.0,
            erase_p: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs =
            [("hflip_p", self.hflip_p), ("vflip_p", self.vflip_p), ("blur_p", self.blur_p), ("erase_p", self.erase_p)];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.crop_px == 0 || self.crop_px > self.resize_px {
            return Err(Error::Config(format!(
                "crop_px ({}) must be positive and not exceed resize_px ({})",
                self.crop_px, self.resize_px
            )));
        }
        let (lo, hi) = self.erase_area_range;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!("erase_area_range must satisfy 0 < lo < hi < 1, got ({lo}, {hi})")));
        }
        let (alo, ahi) = self.erase_aspect_range;
        if !(0.0 < alo && alo <= ahi) {
            return Err(Error::Config(format!("invalid erase_aspect_range ({alo}, {ahi})")));
        }
        if self.jitter_brightness < 0.0 || self.jitter_contrast < 0.0 {
            return Err(Error::Config("colour jitter strengths must be non-negative".into()));
        }
        if !(0.0..90.0).contains(&self.affine_shear_deg) || !(0.0..=1.0).contains(&self.affine_translate) {
            return Err(Error::Config("affine shear must be in [0, 90) degrees and translate in [0, 1]".into()));
        }
        if self.blur_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("blur_kernel must be odd, got {}", self.blur_kernel)));
        }
        let (slo, shi) = self.blur_sigma;
        if !(0.0 < slo && slo <= shi) {
            return Err(Error::Config(format!("invalid blur_sigma ({slo}, {shi})")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// TrivialAugmentWide

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrivialOpKind {
    Identity,
    AutoContrast,
    Equalize,
    Rotate,
    Solarize,
    Color,
    Posterize,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

impl TrivialOpKind {
    pub const ALL: [TrivialOpKind; 14] = [
        TrivialOpKind::Identity,
        TrivialOpKind::AutoContrast,
        TrivialOpKind::Equalize,
        TrivialOpKind::Rotate,
        TrivialOpKind::Solarize,
        TrivialOpKind::Color,
        TrivialOpKind::Posterize,
        TrivialOpKind::Contrast,
        TrivialOpKind::Brightness,
        TrivialOpKind::Sharpness,
        TrivialOpKind::ShearX,
        TrivialOpKind::ShearY,
        TrivialOpKind::TranslateX,
        TrivialOpKind::TranslateY,
    ];

    fn signed(self) -> bool {
        use TrivialOpKind::*;
        matches!(self, Rotate | Color | Contrast | Brightness | Sharpness | ShearX | ShearY | TranslateX | TranslateY)
    }

    /// Unsigned magnitude for `bin` on the wide scale.
    pub fn magnitude(self, bin: u8) -> f64 {
        use TrivialOpKind::*;
        let t = f64::from(bin.min(TRIVIAL_BINS - 1)) / f64::from(TRIVIAL_BINS - 1);
        match self {
            Identity | AutoContrast | Equalize => 0.0,
            ShearX | ShearY | Color | Contrast | Brightness | Sharpness => 0.99 * t,
            TranslateX | TranslateY => 32.0 * t,
            Rotate => 135.0 * t,
            Solarize => 255.0 * (1.0 - t),
            Posterize => 8.0 - (f64::from(bin) / 5.0).round(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrivialAugmentOp {
    pub kind: TrivialOpKind,
    pub magnitude_bin: u8,
    pub negate: bool,
}

impl TrivialAugmentOp {
    /// Uniform over the 14 operations, then uniform over the 31 magnitude bins,
    /// then a fair sign coin for signed operations.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let kind = TrivialOpKind::ALL[rng.gen_range(0..TrivialOpKind::ALL.len())];
        let magnitude_bin = rng.gen_range(0..TRIVIAL_BINS);
        let negate = kind.signed() && rng.gen_bool(0.5);
        TrivialAugmentOp { kind, magnitude_bin, negate }
    }

    pub fn signed_magnitude(&self) -> f64 {
        let m = self.kind.magnitude(self.magnitude_bin);
        if self.negate {
            -m
        } else {
            m
        }
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        use TrivialOpKind::*;
        let m = self.signed_magnitude();
        match self.kind {
            Identity => img.clone(),
            AutoContrast => autocontrast(img),
            Equalize => equalize(img),
            Rotate => rotate(img, m),
            Solarize => solarize(img, m),
            Color => adjust_saturation(img, 1.0 + m),
            Posterize => posterize(img, m as u8),
            Contrast => adjust_contrast(img, 1.0 + m),
            Brightness => adjust_brightness(img, 1.0 + m),
            Sharpness => adjust_sharpness(img, 1.0 + m),
            ShearX => shear(img, m.atan().to_degrees(), 0.0, (0.0, 0.0)),
            ShearY => shear(img, 0.0, m.atan().to_degrees(), (0.0, 0.0)),
            TranslateX => translate(img, m.trunc(), 0.0),
            TranslateY => translate(img, 0.0, m.trunc()),
        }
    }
}

/// Applies exactly one uniformly drawn TrivialAugmentWide operation.
pub fn trivial_augment<R: Rng + ?Sized>(img: &RgbImage, rng: &mut R) -> RgbImage {
    TrivialAugmentOp::sample(rng).apply(img)
}

// ---------------------------------------------------------------------------
// Pixel operations on 8-bit RGB images

fn map_pixels(img: &RgbImage, f: impl Fn(u8) -> u8) -> RgbImage {
    let raw: Vec<u8> = img.as_raw().iter().map(|&v| f(v)).collect();
    RgbImage::from_raw(img.width(), img.height(), raw).expect("same dimensions")
}

fn clamp_u8(v: f64) -> u8 {
    v.clamp(0.0, 255.0) as u8
}

fn blend(a: &RgbImage, b: &[f64], ratio: f64) -> RgbImage {
    let raw: Vec<u8> =
        a.as_raw().iter().zip(b).map(|(&x, &y)| clamp_u8(ratio * f64::from(x) + (1.0 - ratio) * y)).collect();
    RgbImage::from_raw(a.width(), a.height(), raw).expect("same dimensions")
}

fn luma(p: &[u8]) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

pub fn adjust_brightness(img: &RgbImage, factor: f64) -> RgbImage {
    map_pixels(img, |v| clamp_u8(f64::from(v) * factor))
}

pub fn adjust_contrast(img: &RgbImage, factor: f64) -> RgbImage {
    let n = (img.width() * img.height()).max(1) as f64;
    let mean = img.as_raw().chunks_exact(3).map(|p| luma(p).floor()).sum::<f64>() / n;
    let degenerate = vec![mean; img.as_raw().len()];
    blend(img, &degenerate, factor)
}

pub fn adjust_saturation(img: &RgbImage, factor: f64) -> RgbImage {
    let degenerate: Vec<f64> = img
        .as_raw()
        .chunks_exact(3)
        .flat_map(|p| {
            let l = luma(p).floor();
            [l, l, l]
        })
        .collect();
    blend(img, &degenerate, factor)
}

pub fn adjust_sharpness(img: &RgbImage, factor: f64) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src = img.as_raw();
    let mut degenerate: Vec<f64> = src.iter().map(|&v| f64::from(v)).collect();
    if w >= 3 && h >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let weight = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                            acc += weight * f64::from(src[((y + dy - 1) * w + (x + dx - 1)) * 3 + c]);
                        }
                    }
                    degenerate[(y * w + x) * 3 + c] = (acc / 13.0).round();
                }
            }
        }
    }
    blend(img, &degenerate, factor)
}

pub fn posterize(img: &RgbImage, bits: u8) -> RgbImage {
    let bits = bits.clamp(1, 8);
    let mask = 0xFFu8.checked_shl(u32::from(8 - bits)).unwrap_or(0);
    map_pixels(img, |v| v & mask)
}

pub fn solarize(img: &RgbImage, threshold: f64) -> RgbImage {
    map_pixels(img, |v| if f64::from(v) >= threshold { 255 - v } else { v })
}

pub fn autocontrast(img: &RgbImage) -> RgbImage {
    let mut lo = [255u8; 3];
    let mut hi = [0u8; 3];
    for p in img.as_raw().chunks_exact(3) {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            if hi[c] > lo[c] {
                let span = f64::from(hi[c] - lo[c]);
                p.0[c] = clamp_u8((f64::from(p.0[c]) - f64::from(lo[c])) * 255.0 / span);
            }
        }
    }
    out
}

/// Per-channel histogram equalisation with the cumulative-histogram lookup table.
pub fn equalize(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    for c in 0..3 {
        let mut hist = [0usize; 256];
        for p in img.pixels() {
            hist[p.0[c] as usize] += 1;
        }
        let last_nonzero = hist.iter().rposition(|&n| n > 0).map(|i| hist[i]).unwrap_or(0);
        let step = (hist.iter().sum::<usize>() - last_nonzero) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut cum = step / 2;
        for (v, &n) in hist.iter().enumerate() {
            lut[v] = (cum / step).min(255) as u8;
            cum += n;
        }
        for p in out.pixels_mut() {
            p.0[c] = lut[p.0[c] as usize];
        }
    }
    out
}

/// Inverse-maps every output pixel centre through `inv` (2x3 affine) and samples
/// the nearest source pixel; outside samples are black.
fn warp_nearest(img: &RgbImage, inv: [f64; 6]) -> RgbImage {
    let (w, h) = img.dimensions();
    let mut out = RgbImage::new(w, h);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (fx, fy) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
        let sx = inv[0] * fx + inv[1] * fy + inv[2];
        let sy = inv[3] * fx + inv[4] * fy + inv[5];
        let (ix, iy) = (sx.floor(), sy.floor());
        if ix >= 0.0 && iy >= 0.0 && ix < f64::from(w) && iy < f64::from(h) {
            *px = *img.get_pixel(ix as u32, iy as u32);
        }
    }
    out
}

fn is_zero(v: f64) -> bool {
    v.abs() < 1e-12
}

pub fn rotate(img: &RgbImage, degrees: f64) -> RgbImage {
    if is_zero(degrees) {
        return img.clone();
    }
    let (cx, cy) = (f64::from(img.width()) / 2.0, f64::from(img.height()) / 2.0);
    // Counter-clockwise on screen; the inverse map rotates output points back.
    let (s, c) = degrees.to_radians().sin_cos();
    let inv = [c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy];
    warp_nearest(img, inv)
}

/// Shear by the given angles (degrees) about `center`.
pub fn shear(img: &RgbImage, x_deg: f64, y_deg: f64, center: (f64, f64)) -> RgbImage {
    if is_zero(x_deg) && is_zero(y_deg) {
        return img.clone();
    }
    let (kx, ky) = (x_deg.to_radians().tan(), y_deg.to_radians().tan());
    let (cx, cy) = center;
    // forward: x' = x + kx*(y-cy), y' = y + ky*(x-cx); invert the 2x2 part
    let det = 1.0 - kx * ky;
    let (a, b, d, e) = (1.0 / det, -kx / det, -ky / det, 1.0 / det);
    let inv = [a, b, cx - a * cx - b * cy, d, e, cy - d * cx - e * cy];
    warp_nearest(img, inv)
}

pub fn translate(img: &RgbImage, dx: f64, dy: f64) -> RgbImage {
    if is_zero(dx) && is_zero(dy) {
        return img.clone();
    }
    warp_nearest(img, [1.0, 0.0, -dx, 0.0, 1.0, -dy])
}

fn shear_translate(img: &RgbImage, shear_x_deg: f64, dx: f64, dy: f64) -> RgbImage {
    let center = (f64::from(img.width()) / 2.0, f64::from(img.height()) / 2.0);
    translate(&shear(img, shear_x_deg, 0.0, center), dx, dy)
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub fn gaussian_blur(img: &RgbImage, kernel: u32, sigma: f64) -> RgbImage {
    let half = (kernel / 2) as isize;
    let weights: Vec<f64> = (-half..=half).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.into_iter().map(|v| v / norm).collect();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src = img.as_raw();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    let sx = reflect_index(x as isize + k as isize - half, w);
                    acc += wt * f64::from(src[(y * w + sx) * 3 + c]);
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut raw = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    let sy = reflect_index(y as isize + k as isize - half, h);
                    acc += wt * tmp[(sy * w + x) * 3 + c];
                }
                raw[(y * w + x) * 3 + c] = clamp_u8(acc.round());
            }
        }
    }
    RgbImage::from_raw(img.width(), img.height(), raw).expect("same dimensions")
}

pub fn resize_square(img: &RgbImage, size: u32) -> RgbImage {
    if img.dimensions() == (size, size) {
        return img.clone();
    }
    image::imageops::resize(img, size, size, FilterType::CatmullRom)
}

fn reflect_pad(img: &RgbImage, min_w: u32, min_h: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if w >= min_w && h >= min_h {
        return img.clone();
    }
    let (nw, nh) = (w.max(min_w), h.max(min_h));
    let (px, py) = (((nw - w) / 2) as isize, ((nh - h) / 2) as isize);
    RgbImage::from_fn(nw, nh, |x, y| {
        let sx = reflect_index(x as isize - px, w as usize) as u32;
        let sy = reflect_index(y as isize - py, h as usize) as u32;
        *img.get_pixel(sx, sy)
    })
}

/// Crops `size x size`, reflect-padding first if needed. `offset` is `None` for the centre crop.
fn crop(img: &RgbImage, size: u32, offset: Option<(u32, u32)>) -> RgbImage {
    let padded = reflect_pad(img, size, size);
    let (w, h) = padded.dimensions();
    let (x, y) = offset.unwrap_or(((w - size) / 2, (h - size) / 2));
    image::imageops::crop_imm(&padded, x, y, size, size).to_image()
}

pub fn normalize(img: &RgbImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = (f32::from(p.0[c]) / 255.0 - NORM_MEAN[c]) / NORM_STD[c];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Random erasing

/// Erased region: rows `top..top+height`, columns `left..left+width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraseRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EraseParams {
    pub p: f64,
    pub area_range: (f64, f64),
    pub aspect_range: (f64, f64),
}

impl From<&AugmentConfig> for EraseParams {
    fn from(c: &AugmentConfig) -> Self {
        EraseParams { p: c.erase_p, area_range: c.erase_area_range, aspect_range: c.erase_aspect_range }
    }
}

const ERASE_ATTEMPTS: usize = 10;

/// With probability `p`, fills one axis-aligned rectangle of every channel with
/// standard-normal noise. Returns the region, or `None` when nothing was erased
/// (coin failed or no admissible rectangle in ten attempts).
pub fn random_erase<R: Rng + ?Sized>(img: &mut ImageTensor, params: &EraseParams, rng: &mut R) -> Option<EraseRegion> {
    if params.p <= 0.0 || !rng.gen_bool(params.p.min(1.0)) {
        return None;
    }
    let (_, h, w) = img.dim();
    let area = (h * w) as f64;
    let (lo, hi) = params.area_range;
    let (log_lo, log_hi) = (params.aspect_range.0.ln(), params.aspect_range.1.ln());
    for _ in 0..ERASE_ATTEMPTS {
        let target = area * rng.gen_range(lo..=hi);
        let aspect = if log_hi > log_lo { rng.gen_range(log_lo..=log_hi).exp() } else { log_lo.exp() };
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        // Rounding can push the realised fraction out of range; treat as a failed attempt.
        let realised = (eh * ew) as f64 / area;
        if realised < lo || realised > hi {
            continue;
        }
        let top = rng.gen_range(0..=h - eh);
        let left = rng.gen_range(0..=w - ew);
        for c in 0..img.dim().0 {
            for y in top..top + eh {
                for x in left..left + ew {
                    img[[c, y, x]] = StandardNormal.sample(rng);
                }
            }
        }
        return Some(EraseRegion { top, left, height: eh, width: ew });
    }
    None
}

// ---------------------------------------------------------------------------
// Composed transforms

/// The randomised training transform. Stateless; randomness comes from the caller.
#[derive(Debug, Clone)]
pub struct TrainTransform {
    config: AugmentConfig,
}

impl TrainTransform {
    pub fn new(config: AugmentConfig) -> Result<Self> {
        config.validate()?;
        Ok(TrainTransform { config })
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.config
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &RgbImage, rng: &mut R) -> ImageTensor {
        let cfg = &self.config;
        let resized = resize_square(img, cfg.resize_px);
        let offset = if cfg.random_crop {
            let padded = (resized.width().max(cfg.crop_px), resized.height().max(cfg.crop_px));
            Some((rng.gen_range(0..=padded.0 - cfg.crop_px), rng.gen_range(0..=padded.1 - cfg.crop_px)))
        } else {
            None
        };
        let mut x = crop(&resized, cfg.crop_px, offset);
        if cfg.hflip_p > 0.0 && rng.gen_bool(cfg.hflip_p) {
            image::imageops::flip_horizontal_in_place(&mut x);
        }
        if cfg.vflip_p > 0.0 && rng.gen_bool(cfg.vflip_p) {
            image::imageops::flip_vertical_in_place(&mut x);
        }
        if cfg.trivial_augment_enabled {
            x = trivial_augment(&x, rng);
        }
        x = self.color_jitter(&x, rng);
        if cfg.affine_shear_deg > 0.0 || cfg.affine_translate > 0.0 {
            let shear_deg = rng.gen_range(-cfg.affine_shear_deg..=cfg.affine_shear_deg);
            let max_dx = cfg.affine_translate * f64::from(x.width());
            let max_dy = cfg.affine_translate * f64::from(x.height());
            let dx = rng.gen_range(-max_dx..=max_dx).round();
            let dy = rng.gen_range(-max_dy..=max_dy).round();
            x = shear_translate(&x, shear_deg, dx, dy);
        }
        if cfg.blur_p > 0.0 && rng.gen_bool(cfg.blur_p) {
            let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
            x = gaussian_blur(&x, cfg.blur_kernel, sigma);
        }
        let mut out = normalize(&x);
        random_erase(&mut out, &EraseParams::from(cfg), rng);
        out
    }

    fn color_jitter<R: Rng + ?Sized>(&self, img: &RgbImage, rng: &mut R) -> RgbImage {
        let (b, c) = (self.config.jitter_brightness, self.config.jitter_contrast);
        if b <= 0.0 && c <= 0.0 {
            return img.clone();
        }
        let brightness = (b > 0.0).then(|| rng.gen_range((1.0 - b).max(0.0)..=1.0 + b));
        let contrast = (c > 0.0).then(|| rng.gen_range((1.0 - c).max(0.0)..=1.0 + c));
        let contrast_first = rng.gen_bool(0.5);
        let mut x = img.clone();
        for step in 0..2 {
            let do_contrast = (step == 0) == contrast_first;
            x = match (do_contrast, brightness, contrast) {
                (true, _, Some(f)) => adjust_contrast(&x, f),
                (false, Some(f), _) => adjust_brightness(&x, f),
                _ => x,
            };
        }
        x
    }
}

/// A training transform bound to its own seeded random stream.
#[derive(Debug, Clone)]
pub struct SeededTrainTransform {
    transform: TrainTransform,
    rng: ChaCha8Rng,
}

impl SeededTrainTransform {
    pub fn apply(&mut self, img: &RgbImage) -> ImageTensor {
        self.transform.apply(img, &mut self.rng)
    }
}

pub fn build_train_transform(config: AugmentConfig, seed: u64) -> Result<SeededTrainTransform> {
    Ok(SeededTrainTransform { transform: TrainTransform::new(config)?, rng: ChaCha8Rng::seed_from_u64(seed) })
}

/// Deterministic evaluation transform: bicubic resize, centre crop, normalise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTransform {
    pub resize_px: u32,
    pub crop_px: u32,
}

impl Default for EvalTransform {
    fn default() -> Self {
        EvalTransform { resize_px: 341, crop_px: 300 }
    }
}

impl From<&AugmentConfig> for EvalTransform {
    fn from(c: &AugmentConfig) -> Self {
        EvalTransform { resize_px: c.resize_px, crop_px: c.crop_px }
    }
}

impl EvalTransform {
    pub fn apply(&self, img: &RgbImage) -> ImageTensor {
        normalize(&crop(&resize_square(img, self.resize_px), self.crop_px, None))
    }

    pub fn apply_dynamic(&self, img: &DynamicImage) -> ImageTensor {
        self.apply(&img.to_rgb8())
    }

    /// Decodes JPG/PNG bytes (any colour type) and applies the transform.
    pub fn apply_bytes(&self, bytes: &[u8]) -> Result<ImageTensor> {
        let img = image::load_from_memory(bytes)?;
        Ok(self.apply_dynamic(&img))
    }
}

pub fn build_eval_transform() -> EvalTransform {
    EvalTransform::default()
}
