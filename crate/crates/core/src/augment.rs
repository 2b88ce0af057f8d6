//! Stochastic two-view augmentation pipelines and the deterministic
//! evaluation crop.
//!
//! `make_view` applies, each gated by its probability: random resized crop,
//! horizontal flip, colour jitter (brightness, contrast, saturation, hue in
//! that fixed order), grayscale conversion, Gaussian blur and solarization.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Blur kernel side relative to the image side (23 px at 224 px).
pub const BLUR_KERNEL_FRACTION: f64 = 23.0 / 224.0;
/// Evaluation resize relative to the crop (256 px resize for a 224 px crop).
pub const EVAL_RESIZE_RATIO: f64 = 256.0 / 224.0;
pub const CROP_RETRIES: usize = 10;
pub const LUMA_WEIGHTS: [f32; 3] = [0.2989, 0.5870, 0.1140];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentDistribution {
    pub crop_probability: f64,
    pub flip_probability: f64,
    pub jitter_probability: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_probability: f64,
    pub blur_probability: f64,
    pub solarize_probability: f64,
    pub crop_area_range: (f64, f64),
    pub crop_aspect_range: (f64, f64),
    pub output_size: (usize, usize),
    pub blur_kernel_fraction: f64,
    pub blur_sigma_range: (f64, f64),
}

impl AugmentDistribution {
    /// The first view distribution: always blurred, never solarized.
    pub fn view_t(output_size: (usize, usize)) -> Self {
        AugmentDistribution {
            crop_probability: 1.0,
            flip_probability: 0.5,
            jitter_probability: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_probability: 0.2,
            blur_probability: 1.0,
            solarize_probability: 0.0,
            crop_area_range: (0.08, 1.0),
            crop_aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            output_size,
            blur_kernel_fraction: BLUR_KERNEL_FRACTION,
            blur_sigma_range: (0.1, 2.0),
        }
    }

    /// The second view distribution: rarely blurred, sometimes solarized.
    pub fn view_t_prime(output_size: (usize, usize)) -> Self {
        AugmentDistribution {
            blur_probability: 0.1,
            solarize_probability: 0.2,
            ..Self::view_t(output_size)
        }
    }

    /// Everything off: the output is the input resized to `output_size`.
    pub fn identity(output_size: (usize, usize)) -> Self {
        AugmentDistribution {
            crop_probability: 0.0,
            flip_probability: 0.0,
            jitter_probability: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_probability: 0.0,
            blur_probability: 0.0,
            solarize_probability: 0.0,
            crop_area_range: (1.0, 1.0),
            crop_aspect_range: (1.0, 1.0),
            output_size,
            blur_kernel_fraction: BLUR_KERNEL_FRACTION,
            blur_sigma_range: (0.1, 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let probs = [
            ("crop_probability", self.crop_probability),
            ("flip_probability", self.flip_probability),
            ("jitter_probability", self.jitter_probability),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
            ("grayscale_probability", self.grayscale_probability),
            ("blur_probability", self.blur_probability),
            ("solarize_probability", self.solarize_probability),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("{name} must lie in [0,1], got {p}"));
            }
        }
        let (alo, ahi) = self.crop_area_range;
        if !(alo > 0.0 && alo <= ahi && ahi <= 1.0) {
            problems.push(format!("crop_area_range must satisfy 0 < lo <= hi <= 1, got ({alo}, {ahi})"));
        }
        let (rlo, rhi) = self.crop_aspect_range;
        if !(rlo > 0.0 && rlo <= rhi) {
            problems.push(format!("crop_aspect_range must satisfy 0 < lo <= hi, got ({rlo}, {rhi})"));
        }
        let (slo, shi) = self.blur_sigma_range;
        if !(slo > 0.0 && slo <= shi) {
            problems.push(format!("blur_sigma_range must satisfy 0 < lo <= hi, got ({slo}, {shi})"));
        }
        if self.output_size.0 < crate::data::MIN_IMAGE_SIDE || self.output_size.1 < crate::data::MIN_IMAGE_SIDE {
            problems.push(format!("output_size too small: {:?}", self.output_size));
        }
        if !(self.blur_kernel_fraction > 0.0) {
            problems.push("blur_kernel_fraction must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(problems.join("; ")))
        }
    }

    pub fn blur_kernel_size(&self) -> usize {
        blur_kernel_size(self.output_size.0, self.output_size.1, self.blur_kernel_fraction)
    }
}

/// Odd kernel side proportional to the short image side, at least 3.
pub fn blur_kernel_size(height: usize, width: usize, fraction: f64) -> usize {
    let k = (fraction * height.min(width) as f64).round() as usize;
    let k = if k % 2 == 0 { k + 1 } else { k };
    k.max(3)
}

/// One random view of `x`.
pub fn make_view(x: &Image, dist: &AugmentDistribution, rng: &mut Rng) -> Image {
    let (oh, ow) = dist.output_size;
    let mut img = if rng.gen_bool(dist.crop_probability) {
        random_resized_crop(x, dist.crop_area_range, dist.crop_aspect_range, (oh, ow), rng)
    } else {
        resize(x, oh, ow)
    };
    if rng.gen_bool(dist.flip_probability) {
        img = hflip(&img);
    }
    if rng.gen_bool(dist.jitter_probability) {
        let intensities = JitterIntensities {
            brightness: dist.brightness,
            contrast: dist.contrast,
            saturation: dist.saturation,
            hue: dist.hue,
        };
        img = color_jitter(&img, &intensities, rng);
    }
    if rng.gen_bool(dist.grayscale_probability) {
        img = grayscale(&img);
    }
    if rng.gen_bool(dist.blur_probability) {
        let (lo, hi) = dist.blur_sigma_range;
        let sigma = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        img = gaussian_blur(&img, sigma, dist.blur_kernel_size());
    }
    if rng.gen_bool(dist.solarize_probability) {
        img = solarize(&img);
    }
    img
}

/// A crop window in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Sampled log aspect ratio (before pixel rounding); `None` for the fallback.
    pub log_aspect: Option<f64>,
}

/// Sample a crop window: area fraction uniform in `area_range`, log aspect
/// uniform in `log(aspect_range)`, retried up to `CROP_RETRIES` times before
/// falling back to a central crop.
pub fn sample_crop_box(
    height: usize,
    width: usize,
    area_range: (f64, f64),
    aspect_range: (f64, f64),
    rng: &mut Rng,
) -> CropBox {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (aspect_range.0.ln(), aspect_range.1.ln());
    for _ in 0..CROP_RETRIES {
        let target = area * uniform(rng, area_range.0, area_range.1);
        let log_aspect = uniform(rng, log_lo, log_hi);
        let aspect = log_aspect.exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return CropBox {
                top,
                left,
                height: h,
                width: w,
                log_aspect: Some(log_aspect),
            };
        }
    }
    // Central crop with the aspect ratio clamped into range.
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < aspect_range.0 {
        (((width as f64) / aspect_range.0).round() as usize, width)
    } else if in_ratio > aspect_range.1 {
        (height, ((height as f64) * aspect_range.1).round() as usize)
    } else {
        (height, width)
    };
    let (h, w) = (h.clamp(1, height), w.clamp(1, width));
    CropBox {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
        log_aspect: None,
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

pub fn random_resized_crop(
    x: &Image,
    area_range: (f64, f64),
    aspect_range: (f64, f64),
    out_size: (usize, usize),
    rng: &mut Rng,
) -> Image {
    let b = sample_crop_box(x.height(), x.width(), area_range, aspect_range, rng);
    resample(
        x,
        (b.top as f64, b.left as f64, b.height as f64, b.width as f64),
        out_size.0,
        out_size.1,
    )
}

pub fn resize(x: &Image, out_h: usize, out_w: usize) -> Image {
    resample(x, (0.0, 0.0, x.height() as f64, x.width() as f64), out_h, out_w)
}

/// Keys cubic convolution kernel with a = -0.5 (Catmull-Rom).
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic resampling of the window `(top, left, height, width)` onto an
/// `out_h x out_w` grid, sampling at pixel centres with edge clamping.
fn resample(x: &Image, window: (f64, f64, f64, f64), out_h: usize, out_w: usize) -> Image {
    let (top, left, wh, ww) = window;
    let (h, w, c) = x.shape();
    let sy = wh / out_h as f64;
    let sx = ww / out_w as f64;
    let taps = |pos: f64, len: usize| -> [(usize, f64); 4] {
        let base = pos.floor();
        let frac = pos - base;
        let mut out = [(0usize, 0.0f64); 4];
        for (k, slot) in out.iter_mut().enumerate() {
            let offset = k as f64 - 1.0;
            let idx = (base + offset).clamp(0.0, (len - 1) as f64) as usize;
            *slot = (idx, cubic(offset - frac));
        }
        out
    };
    let rows: Vec<[(usize, f64); 4]> = (0..out_h)
        .map(|oy| taps(top + (oy as f64 + 0.5) * sy - 0.5, h))
        .collect();
    let cols: Vec<[(usize, f64); 4]> = (0..out_w)
        .map(|ox| taps(left + (ox as f64 + 0.5) * sx - 0.5, w))
        .collect();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for ry in &rows {
        for cx in &cols {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for &(yy, wy) in ry {
                    if wy == 0.0 {
                        continue;
                    }
                    for &(xx, wx) in cx {
                        if wx == 0.0 {
                            continue;
                        }
                        acc += wy * wx * f64::from(x.at(yy, xx, ch));
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    Image::from_clamped(out_h, out_w, c, out)
}

pub fn hflip(x: &Image) -> Image {
    let (h, w, c) = x.shape();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for xx in (0..w).rev() {
            for ch in 0..c {
                out.push(x.at(y, xx, ch));
            }
        }
    }
    Image::from_clamped(h, w, c, out)
}

/// Per-pixel `x -> x` below one half and `x -> 1 - x` at or above it.
pub fn solarize(x: &Image) -> Image {
    let (h, w, c) = x.shape();
    let out = x
        .pixels()
        .iter()
        .map(|&v| if v < 0.5 { v } else { 1.0 - v })
        .collect();
    Image::from_clamped(h, w, c, out)
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
}

/// Luma replicated across the three channels. The weights sum to 0.9999 and
/// are applied without renormalisation. Single-channel input is returned as is.
pub fn grayscale(x: &Image) -> Image {
    let (h, w, c) = x.shape();
    if c == 1 {
        return x.clone();
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for px in x.pixels().chunks_exact(3) {
        let l = luma(px[0], px[1], px[2]);
        out.extend_from_slice(&[l, l, l]);
    }
    Image::from_clamped(h, w, c, out)
}

/// Separable Gaussian blur with an odd `kernel_size` window and edge clamping.
pub fn gaussian_blur(x: &Image, sigma: f64, kernel_size: usize) -> Image {
    let (h, w, c) = x.shape();
    let radius = (kernel_size / 2) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let src: Vec<f64> = x.pixels().iter().map(|&v| f64::from(v)).collect();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let sx = (xx as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += wgt * src[(y * w + sx) * c + ch];
                }
                tmp[(y * w + xx) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += wgt * tmp[(sy * w + xx) * c + ch];
                }
                out[(y * w + xx) * c + ch] = acc as f32;
            }
        }
    }
    Image::from_clamped(h, w, c, out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterIntensities {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// Brightness offset, contrast and saturation factors, then hue rotation.
/// Each adjustment is drawn uniformly from its intensity range and applied to
/// the whole image; an intensity of zero skips the adjustment.
pub fn color_jitter(x: &Image, intensities: &JitterIntensities, rng: &mut Rng) -> Image {
    let (h, w, c) = x.shape();
    let mut px: Vec<f32> = x.pixels().to_vec();
    let clamp = |v: &mut Vec<f32>| v.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));

    if intensities.brightness > 0.0 {
        let b = intensities.brightness;
        let delta = rng.gen_range(-b..=b) as f32;
        px.iter_mut().for_each(|p| *p += delta);
        clamp(&mut px);
    }
    if intensities.contrast > 0.0 {
        let s = intensities.contrast;
        let factor = rng.gen_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
        for ch in 0..c {
            let mean = px.iter().skip(ch).step_by(c).sum::<f32>() / (h * w) as f32;
            px.iter_mut()
                .skip(ch)
                .step_by(c)
                .for_each(|p| *p = (*p - mean) * factor + mean);
        }
        clamp(&mut px);
    }
    if c == 3 && intensities.saturation > 0.0 {
        let s = intensities.saturation;
        let factor = rng.gen_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
        for p in px.chunks_exact_mut(3) {
            let l = luma(p[0], p[1], p[2]);
            for v in p.iter_mut() {
                *v = l + (*v - l) * factor;
            }
        }
        clamp(&mut px);
    }
    if c == 3 && intensities.hue > 0.0 {
        let hmax = intensities.hue;
        let delta = rng.gen_range(-hmax..=hmax) as f32;
        for p in px.chunks_exact_mut(3) {
            let (hh, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
            let (r, g, b) = hsv_to_rgb((hh + delta).rem_euclid(1.0), s, v);
            p.copy_from_slice(&[r, g, b]);
        }
    }
    Image::from_clamped(h, w, c, px)
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Resize the short side to `resize_short` (aspect preserved), then take the
/// central `crop x crop` window.
pub fn center_crop(x: &Image, resize_short: usize, crop: usize) -> Result<Image> {
    let (h, w, _) = x.shape();
    let (rh, rw) = if h <= w {
        (resize_short, (w as f64 * resize_short as f64 / h as f64).round() as usize)
    } else {
        ((h as f64 * resize_short as f64 / w as f64).round() as usize, resize_short)
    };
    if crop > rh || crop > rw {
        return Err(Error::invalid(format!(
            "crop {crop} exceeds resized image {rh}x{rw}"
        )));
    }
    // Crop in resized coordinates, then map the window back to the source so
    // only one resampling pass happens.
    let top = (rh - crop) / 2;
    let left = (rw - crop) / 2;
    let sy = h as f64 / rh as f64;
    let sx = w as f64 / rw as f64;
    Ok(resample(
        x,
        (top as f64 * sy, left as f64 * sx, crop as f64 * sy, crop as f64 * sx),
        crop,
        crop,
    ))
}

/// The evaluation-time view for a square `side x side` network input.
pub fn eval_view(x: &Image, side: usize) -> Image {
    let resize_short = (side as f64 * EVAL_RESIZE_RATIO).round() as usize;
    center_crop(x, resize_short, side).expect("resize_short >= side")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn noise_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = rng_from_seed(seed);
        let px = (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect();
        Image::new(h, w, c, px).unwrap()
    }

    fn max_abs_diff(a: &Image, b: &Image) -> f32 {
        a.pixels()
            .iter()
            .zip(b.pixels())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn presets_match_parameter_table() {
        let t = AugmentDistribution::view_t((32, 32));
        let tp = AugmentDistribution::view_t_prime((32, 32));
        for d in [&t, &tp] {
            assert_eq!(d.crop_probability, 1.0);
            assert_eq!(d.flip_probability, 0.5);
            assert_eq!(d.jitter_probability, 0.8);
            assert_eq!(d.brightness, 0.4);
            assert_eq!(d.contrast, 0.4);
            assert_eq!(d.saturation, 0.2);
            assert_eq!(d.hue, 0.1);
            assert_eq!(d.grayscale_probability, 0.2);
            assert_eq!(d.crop_area_range, (0.08, 1.0));
            assert_eq!(d.crop_aspect_range, (0.75, 4.0 / 3.0));
            assert_eq!(d.blur_sigma_range, (0.1, 2.0));
            d.validate().unwrap();
        }
        assert_eq!((t.blur_probability, tp.blur_probability), (1.0, 0.1));
        assert_eq!((t.solarize_probability, tp.solarize_probability), (0.0, 0.2));
        let only_differences = AugmentDistribution {
            blur_probability: t.blur_probability,
            solarize_probability: t.solarize_probability,
            ..tp.clone()
        };
        assert_eq!(only_differences, t);
    }

    #[test]
    fn identity_pipeline_returns_resized_input() {
        let x = noise_image(16, 16, 3, 1);
        let dist = AugmentDistribution::identity((16, 16));
        let v = make_view(&x, &dist, &mut rng_from_seed(5));
        assert_eq!(v, x);
        let dist = AugmentDistribution::identity((12, 20));
        let v = make_view(&x, &dist, &mut rng_from_seed(5));
        assert_eq!(v, resize(&x, 12, 20));
    }

    #[test]
    fn full_area_square_crop_is_full_image() {
        let x = noise_image(16, 16, 3, 2);
        let v = random_resized_crop(&x, (1.0, 1.0), (1.0, 1.0), (16, 16), &mut rng_from_seed(3));
        assert_eq!(v, x);
    }

    #[test]
    fn crop_areas_stay_in_range() {
        let mut rng = rng_from_seed(11);
        for _ in 0..100 {
            let b = sample_crop_box(64, 64, (0.08, 1.0), (0.75, 4.0 / 3.0), &mut rng);
            let frac = (b.height * b.width) as f64 / (64.0 * 64.0);
            // Rounding each side by half a pixel bounds the quantisation error.
            assert!(frac >= 0.08 - 0.02 && frac <= 1.0, "area fraction {frac}");
            assert!(b.top + b.height <= 64 && b.left + b.width <= 64);
        }
    }

    #[test]
    fn log_aspect_is_uniform_ks() {
        let (lo, hi) = ((0.75f64).ln(), (4.0f64 / 3.0).ln());
        let mut rng = rng_from_seed(2024);
        let mut draws: Vec<f64> = (0..10_000)
            .map(|_| {
                sample_crop_box(224, 224, (0.08, 0.5), (0.75, 4.0 / 3.0), &mut rng)
                    .log_aspect
                    .expect("all draws feasible at this area range")
            })
            .collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let d = draws
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = (v - lo) / (hi - lo);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // Asymptotic Kolmogorov critical value at alpha = 0.01.
        let critical = 1.628 / n.sqrt();
        assert!(d < critical, "KS statistic {d} >= {critical}");
    }

    #[test]
    fn infeasible_crops_fall_back_to_centre() {
        let mut rng = rng_from_seed(0);
        let b = sample_crop_box(8, 32, (1.0, 1.0), (1.0, 1.0), &mut rng);
        assert_eq!(b.log_aspect, None);
        assert_eq!((b.height, b.width), (8, 8));
        assert_eq!(b.left, 12);
    }

    #[test]
    fn solarize_values() {
        let x = Image::new(8, 8, 1, {
            let mut v = vec![0.2f32; 64];
            v[1] = 0.8;
            v[2] = 0.5;
            v
        })
        .unwrap();
        let s = solarize(&x);
        assert_eq!(s.pixels()[0], 0.2);
        assert!((s.pixels()[1] - 0.2).abs() < 1e-7);
        assert_eq!(s.pixels()[2], 0.5);
    }

    #[test]
    fn grayscale_values() {
        let white = Image::new(8, 8, 3, vec![1.0; 192]).unwrap();
        let g = grayscale(&white);
        assert!(g.pixels().iter().all(|&p| (p - 0.9999).abs() < 1e-6));

        let red: Vec<f32> = (0..64).flat_map(|_| [1.0, 0.0, 0.0]).collect();
        let g = grayscale(&Image::new(8, 8, 3, red).unwrap());
        assert!(g.pixels().iter().all(|&p| (p - 0.2989).abs() < 1e-7));

        let gray = Image::new(8, 8, 3, vec![0.4; 192]).unwrap();
        let g = grayscale(&gray);
        assert!(g.pixels().iter().all(|&p| (p - 0.4 * 0.9999).abs() < 1e-6));

        let mono = noise_image(8, 8, 1, 3);
        assert_eq!(grayscale(&mono), mono);
    }

    #[test]
    fn tiny_sigma_blur_is_identity() {
        let x = noise_image(16, 16, 3, 4);
        let b = gaussian_blur(&x, 1e-3, 5);
        assert!(max_abs_diff(&b, &x) < 1e-3);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let x = Image::new(8, 8, 3, vec![0.3; 192]).unwrap();
        assert!(max_abs_diff(&gaussian_blur(&x, 2.0, 7), &x) < 1e-6);
    }

    #[test]
    fn kernel_size_scales_with_resolution() {
        assert_eq!(blur_kernel_size(224, 224, BLUR_KERNEL_FRACTION), 23);
        assert_eq!(blur_kernel_size(32, 32, BLUR_KERNEL_FRACTION), 3);
        assert_eq!(blur_kernel_size(64, 96, BLUR_KERNEL_FRACTION), 7);
        assert_eq!(blur_kernel_size(8, 8, BLUR_KERNEL_FRACTION), 3);
    }

    #[test]
    fn center_crop_evaluation_protocol_shape() {
        let x = noise_image(512, 384, 3, 5);
        let c = center_crop(&x, 256, 224).unwrap();
        assert_eq!(c.shape(), (224, 224, 3));
        assert!(center_crop(&x, 200, 224).is_err());
    }

    #[test]
    fn zero_jitter_is_identity() {
        let x = noise_image(8, 8, 3, 6);
        let zero = JitterIntensities {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        };
        assert_eq!(color_jitter(&x, &zero, &mut rng_from_seed(1)), x);
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = rng_from_seed(8);
        for _ in 0..1000 {
            let (r, g, b) = (rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>());
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn views_are_deterministic_and_in_range() {
        let x = noise_image(20, 24, 3, 7);
        for dist in [AugmentDistribution::view_t((16, 16)), AugmentDistribution::view_t_prime((16, 16))] {
            for seed in 0..20 {
                let a = make_view(&x, &dist, &mut rng_from_seed(seed));
                let b = make_view(&x, &dist, &mut rng_from_seed(seed));
                assert_eq!(a, b);
                assert_eq!(a.shape(), (16, 16, 3));
                assert!(a.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let mut d = AugmentDistribution::view_t((16, 16));
        d.flip_probability = 1.5;
        d.crop_area_range = (0.9, 0.1);
        let err = d.validate().unwrap_err().to_string();
        assert!(err.contains("flip_probability") && err.contains("crop_area_range"));
    }
}
