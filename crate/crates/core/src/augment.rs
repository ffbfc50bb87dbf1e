//! Stochastic view generation.
//!
//! Every transform works on [`Image`] (3 x H x W, `f32` in [0, 1]) and
//! keeps values in that range. A view is produced by, in order:
//! random resized crop, horizontal flip, color jitter (brightness, contrast,
//! saturation), grayscale and Gaussian blur. The two pipelines differ only
//! in blur probability.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::rng;
use crate::tensor::{Result, Tensor};

/// Aspect-ratio range of the random resized crop.
pub const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Channel-major, row-major within a channel.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * height * width, "image data length");
        Self { height, width, data }
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.plane() + y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Area fraction range of the random crop.
    pub crop_scale: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_p: f64,
    /// Odd kernel size; 0 picks the odd size nearest a tenth of the view.
    pub blur_kernel: usize,
    pub blur_sigma: (f64, f64),
    /// Blur probability for the first and second pipeline.
    pub blur_p: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.08, 1.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            grayscale_p: 0.2,
            blur_kernel: 0,
            blur_sigma: (0.1, 2.0),
            blur_p: (1.0, 0.1),
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled and the crop covering the whole image.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: (0.0, 0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let probs = [self.flip_p, self.jitter_p, self.grayscale_p, self.blur_p.0, self.blur_p.1];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err("augment probabilities must be in [0, 1]".into());
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(format!("augment crop scale must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"));
        }
        if [self.brightness, self.contrast, self.saturation].iter().any(|s| !(0.0..1.0).contains(s)) {
            return Err("augment jitter strengths must be in [0, 1)".into());
        }
        if self.blur_kernel != 0 && self.blur_kernel.is_multiple_of(2) {
            return Err(format!("augment blur kernel must be odd, got {}", self.blur_kernel));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err("augment blur sigma range must be positive and ordered".into());
        }
        Ok(())
    }

    fn kernel_for(&self, size: usize) -> usize {
        if self.blur_kernel > 0 {
            self.blur_kernel
        } else {
            (size / 10) | 1
        }
    }
}

/// Crop rectangle `(top, left, height, width)` as in the usual
/// random-resized-crop: up to ten draws of area and log-aspect, then a
/// centered fallback with the aspect clamped into range.
fn crop_box<R: Rng>(rng: &mut R, h: usize, w: usize, scale: (f64, f64)) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (CROP_RATIO.0.ln(), CROP_RATIO.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < CROP_RATIO.0 {
        ((w as f64 / CROP_RATIO.0).round() as usize, w)
    } else if in_ratio > CROP_RATIO.1 {
        (h, (h as f64 * CROP_RATIO.1).round() as usize)
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Bilinear resize of a crop to `size x size` (half-pixel centers, edge
/// clamping). An exact full-image crop at the same size is copied.
pub fn resized_crop(img: &Image, (top, left, ch, cw): (usize, usize, usize, usize), size: usize) -> Image {
    if (top, left, ch, cw) == (0, 0, img.height, img.width) && size == img.height && size == img.width {
        return img.clone();
    }
    let mut out = vec![0f32; 3 * size * size];
    let sy = ch as f64 / size as f64;
    let sx = cw as f64 / size as f64;
    let sample = |pos: f64, len: usize| -> (usize, usize, f32) {
        let p = pos.clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    for oy in 0..size {
        let (y0, y1, fy) = sample((oy as f64 + 0.5) * sy - 0.5, ch);
        for ox in 0..size {
            let (x0, x1, fx) = sample((ox as f64 + 0.5) * sx - 0.5, cw);
            for c in 0..3 {
                let p = |y: usize, x: usize| img.at(c, top + y, left + x);
                let top_row = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom_row = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[c * size * size + oy * size + ox] = (top_row * (1.0 - fy) + bottom_row * fy).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(size, size, out)
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..img.height {
            let row = c * img.plane() + y * img.width;
            out.data[row..row + img.width].reverse();
        }
    }
    out
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Per-pixel luma (H x W).
fn gray_plane(img: &Image) -> Vec<f32> {
    let n = img.plane();
    (0..n).map(|k| luma(img.data[k], img.data[n + k], img.data[2 * n + k])).collect()
}

pub fn grayscale(img: &Image) -> Image {
    let g = gray_plane(img);
    let mut data = Vec::with_capacity(3 * g.len());
    for _ in 0..3 {
        data.extend_from_slice(&g);
    }
    Image::new(img.height, img.width, data)
}

/// `x <- clamp(a * x + (1 - a) * reference)`
fn blend(img: &mut Image, a: f32, reference: impl Fn(usize) -> f32) {
    let n = img.plane();
    for (k, v) in img.data.iter_mut().enumerate() {
        *v = (a * *v + (1.0 - a) * reference(k % n)).clamp(0.0, 1.0);
    }
}

/// Brightness, contrast and saturation factors in that order.
pub fn color_jitter(img: &Image, brightness: f32, contrast: f32, saturation: f32) -> Image {
    let mut out = img.clone();
    blend(&mut out, brightness, |_| 0.0);
    let mean = gray_plane(&out).iter().sum::<f32>() / out.plane() as f32;
    blend(&mut out, contrast, |_| mean);
    let g = gray_plane(&out);
    blend(&mut out, saturation, |k| g[k]);
    out
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Image, kernel: usize, sigma: f64) -> Image {
    let r = (kernel / 2) as isize;
    let weights: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|w| (w / total) as f32).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0f32; img.data.len()];
    let mut out = vec![0f32; img.data.len()];
    for c in 0..3 {
        let base = c * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = weights
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * img.data[base + y * w + reflect(x as isize + k as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f32 = weights
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * tmp[base + reflect(y as isize + k as isize - r, h) * w + x])
                    .sum();
                out[base + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(h, w, out)
}

fn factor<R: Rng>(rng: &mut R, strength: f64) -> f32 {
    if strength == 0.0 {
        1.0
    } else {
        rng.random_range(1.0 - strength..=1.0 + strength) as f32
    }
}

/// One draw from a pipeline with blur probability `blur_p`.
pub fn augment<R: Rng>(img: &Image, config: &AugmentConfig, size: usize, blur_p: f64, rng: &mut R) -> Image {
    let coin = Uniform::new(0.0, 1.0).expect("unit interval");
    let flip = |rng: &mut R, p: f64| p > 0.0 && coin.sample(rng) < p;
    let bbox = crop_box(rng, img.height, img.width, config.crop_scale);
    let mut out = resized_crop(img, bbox, size);
    if flip(rng, config.flip_p) {
        out = hflip(&out);
    }
    if flip(rng, config.jitter_p) {
        let b = factor(rng, config.brightness);
        let c = factor(rng, config.contrast);
        let s = factor(rng, config.saturation);
        out = color_jitter(&out, b, c, s);
    }
    if flip(rng, config.grayscale_p) {
        out = grayscale(&out);
    }
    if flip(rng, blur_p) {
        let sigma = rng.random_range(config.blur_sigma.0..=config.blur_sigma.1);
        out = gaussian_blur(&out, config.kernel_for(size), sigma);
    }
    out
}

/// Two views `(t(x), t'(x))`, a pure function of `(x, config, size, seed)`.
pub fn make_views(img: &Image, config: &AugmentConfig, size: usize, seed: u64) -> (Image, Image) {
    let mut rng = rng::seeded(seed);
    let v = augment(img, config, size, config.blur_p.0, &mut rng);
    let vp = augment(img, config, size, config.blur_p.1, &mut rng);
    (v, vp)
}

/// Per-channel `(x - mean) / std` of a batch of equally sized images as an
/// (N, 3, H, W) tensor.
pub fn to_batch(images: &[Image], mean: [f64; 3], std: [f64; 3]) -> Result<Tensor<f32>> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        assert_eq!((img.height, img.width), (h, w), "batch images must share a size");
        for c in 0..3 {
            let (m, s) = (mean[c] as f32, std[c] as f32);
            data.extend(img.data[c * h * w..(c + 1) * h * w].iter().map(|v| (v - m) / s));
        }
    }
    Tensor::new([images.len(), 3, h, w], data)
}
