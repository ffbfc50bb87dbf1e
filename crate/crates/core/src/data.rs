//! Image datasets: the STL10 binary layout, a synthetic shape dataset and
//! seeded batching.
//!
//! STL10 image files are raw concatenations of `3 * S * S` byte images
//! (S = 96 for the real dataset). Within each channel pixels are stored
//! column by column; [`ImageDataset`] keeps them row by row. Label files
//! hold one byte per image with values `1..=K`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::augment::Image;
use crate::rng;

pub const STL10_SIZE: usize = 96;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte {offset}: {message}")]
    Parse {
        path: String,
        offset: usize,
        message: String,
    },
}

fn io_error(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Unlabeled,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }

    pub fn image_file(self) -> String {
        format!("{}_X.bin", self.name())
    }

    pub fn label_file(self) -> Option<String> {
        (self != Split::Unlabeled).then(|| format!("{}_y.bin", self.name()))
    }
}

/// `N` square RGB images stored as 8-bit, channel-major, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub size: usize,
    pub pixels: Vec<u8>,
    /// One label per image in `1..=K`.
    pub labels: Option<Vec<u8>>,
    pub split: String,
}

impl ImageDataset {
    pub fn image_bytes(size: usize) -> usize {
        3 * size * size
    }

    pub fn len(&self) -> usize {
        if self.size == 0 {
            0
        } else {
            self.pixels.len() / Self::image_bytes(self.size)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let n = Self::image_bytes(self.size);
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` as floats in [0, 1].
    pub fn image(&self, i: usize) -> Image {
        Image::from_u8(self.size, self.size, self.raw(i))
    }

    /// Zero-based class of image `i`.
    pub fn class(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i] as usize - 1)
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize)
    }

    /// Images per class (index 0 is label 1).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in self.labels.iter().flatten() {
            counts[l as usize - 1] += 1;
        }
        counts
    }

    /// Per-channel mean and standard deviation of pixel values in [0, 1].
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        let plane = self.size * self.size;
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for i in 0..self.len() {
            for (c, chunk) in self.raw(i).chunks_exact(plane).enumerate() {
                for &b in chunk {
                    let v = b as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let mean = sum.map(|s| s / count);
        let mut std = [0f64; 3];
        for c in 0..3 {
            std[c] = (sq[c] / count - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3);
        }
        (mean, std)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * Self::image_bytes(self.size));
        for &i in indices {
            pixels.extend_from_slice(self.raw(i));
        }
        Self {
            size: self.size,
            pixels,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            split: self.split.clone(),
        }
    }
}

/// Decodes an image file of `size x size` images.
pub fn decode_images(bytes: &[u8], size: usize, path: &Path) -> Result<Vec<u8>, DataError> {
    let per = ImageDataset::image_bytes(size);
    if !bytes.len().is_multiple_of(per) {
        return Err(DataError::Parse {
            path: path.display().to_string(),
            offset: bytes.len() - bytes.len() % per,
            message: format!(
                "truncated image: file length {} is not a multiple of {per} bytes per image",
                bytes.len()
            ),
        });
    }
    let mut out = vec![0u8; bytes.len()];
    let plane = size * size;
    for (src, dst) in bytes.chunks_exact(per).zip(out.chunks_exact_mut(per)) {
        for c in 0..3 {
            for x in 0..size {
                for y in 0..size {
                    dst[c * plane + y * size + x] = src[c * plane + x * size + y];
                }
            }
        }
    }
    Ok(out)
}

pub fn encode_images(pixels: &[u8], size: usize) -> Vec<u8> {
    let per = ImageDataset::image_bytes(size);
    let plane = size * size;
    let mut out = vec![0u8; pixels.len()];
    for (src, dst) in pixels.chunks_exact(per).zip(out.chunks_exact_mut(per)) {
        for c in 0..3 {
            for x in 0..size {
                for y in 0..size {
                    dst[c * plane + x * size + y] = src[c * plane + y * size + x];
                }
            }
        }
    }
    out
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|e| io_error(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

/// Reads `<split>_X.bin` (and `<split>_y.bin` for labeled splits) from `dir`.
pub fn read_stl10(dir: &Path, split: Split, size: usize) -> Result<ImageDataset, DataError> {
    let image_path = dir.join(split.image_file());
    let pixels = decode_images(&read(&image_path)?, size, &image_path)?;
    let n = pixels.len() / ImageDataset::image_bytes(size);
    let labels = match split.label_file() {
        Some(name) => {
            let path = dir.join(name);
            let labels = read(&path)?;
            if labels.len() != n {
                return Err(DataError::Parse {
                    path: path.display().to_string(),
                    offset: labels.len().min(n),
                    message: format!("{} labels for {n} images", labels.len()),
                });
            }
            if let Some(k) = labels.iter().position(|&l| l == 0) {
                return Err(DataError::Parse {
                    path: path.display().to_string(),
                    offset: k,
                    message: "label 0 (labels start at 1)".into(),
                });
            }
            Some(labels)
        }
        None => None,
    };
    Ok(ImageDataset {
        size,
        pixels,
        labels,
        split: split.name().into(),
    })
}

pub fn write_stl10(dir: &Path, split: Split, dataset: &ImageDataset) -> Result<Vec<PathBuf>, DataError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let image_path = dir.join(split.image_file());
    write(&image_path, &encode_images(&dataset.pixels, dataset.size))?;
    let mut written = vec![image_path];
    if let (Some(name), Some(labels)) = (split.label_file(), &dataset.labels) {
        let path = dir.join(name);
        write(&path, labels)?;
        written.push(path);
    }
    Ok(written)
}

/// Parameters of the synthetic shape dataset. Class `k` draws shape
/// `k % 10` in a foreground hue centred on `k / K`; position, size,
/// rotation, background and pixel noise are nuisances.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    /// Standard deviation of the foreground hue around its class centre.
    pub hue_jitter: f64,
    /// Shape radius range as a fraction of the image size.
    pub radius: (f64, f64),
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 500,
            size: 32,
            hue_jitter: 0.08,
            radius: (0.22, 0.4),
            noise: 0.06,
            seed: 0,
        }
    }
}

pub const SHAPE_NAMES: [&str; 10] = [
    "disk", "square", "triangle", "cross", "ring", "diamond", "bar", "x", "dots", "half-disk",
];

/// Signed inside test for shape `kind` at local coordinates (unit radius).
fn inside(kind: usize, x: f64, y: f64) -> bool {
    let r2 = x * x + y * y;
    match kind {
        0 => r2 <= 1.0,
        1 => x.abs().max(y.abs()) <= 0.75,
        2 => y <= 0.5 && y >= -1.0 + 1.732 * x.abs(),
        3 => (x.abs() <= 0.3 && y.abs() <= 1.0) || (y.abs() <= 0.3 && x.abs() <= 1.0),
        4 => (0.36..=1.0).contains(&r2),
        5 => x.abs() + y.abs() <= 1.0,
        6 => x.abs() <= 1.0 && y.abs() <= 0.3,
        7 => ((x - y).abs() <= 0.35 || (x + y).abs() <= 0.35) && x.abs() <= 0.8 && y.abs() <= 0.8,
        8 => (x - 0.5).powi(2) + y * y <= 0.16 || (x + 0.5).powi(2) + y * y <= 0.16,
        _ => r2 <= 1.0 && y <= 0.0,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render<R: Rng>(spec: &SyntheticSpec, class: usize, rng: &mut R) -> Vec<u8> {
    let s = spec.size as f64;
    let normal = |rng: &mut R| -> f64 {
        // Box-Muller; one draw is enough here.
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let v: f64 = rng.random();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    };
    let hue = class as f64 / spec.classes as f64 + spec.hue_jitter * normal(rng);
    let fg = hsv(hue, rng.random_range(0.55..1.0), rng.random_range(0.6..1.0));
    let bg = hsv(rng.random(), rng.random_range(0.0..0.35), rng.random_range(0.05..0.45));
    let radius = s * rng.random_range(spec.radius.0..=spec.radius.1);
    let cx = rng.random_range(radius..=s - radius);
    let cy = rng.random_range(radius..=s - radius);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = angle.sin_cos();
    let kind = class % SHAPE_NAMES.len();
    let plane = spec.size * spec.size;
    let mut out = vec![0u8; 3 * plane];
    for py in 0..spec.size {
        for px in 0..spec.size {
            // 2x2 supersampling for soft edges.
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dx = (px as f64 + ox - cx) / radius;
                let dy = (py as f64 + oy - cy) / radius;
                let (x, y) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                if inside(kind, x, y) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                let noise = spec.noise * rng.random_range(-1.0..=1.0);
                let v = cover * fg[c] + (1.0 - cover) * bg[c] + noise;
                out[c * plane + py * spec.size + px] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

/// Image `i` has label `i % K + 1`; each image is drawn from its own
/// derived seed, so the dataset is a pure function of the spec.
pub fn make_synthetic(spec: &SyntheticSpec) -> ImageDataset {
    let n = spec.classes * spec.per_class;
    let mut pixels = Vec::with_capacity(n * ImageDataset::image_bytes(spec.size));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        let mut rng = rng::seeded(rng::derive_indexed(spec.seed, "synthetic", i as u64));
        pixels.extend(render(spec, class, &mut rng));
        labels.push(class as u8 + 1);
    }
    ImageDataset {
        size: spec.size,
        pixels,
        labels: Some(labels),
        split: "synthetic".into(),
    }
}

/// A labeled synthetic train/test pair. The two splits draw from seeds
/// derived from `seed` with the labels `"data"` and `"data-test"`, so a
/// run configured with the same root seed sees exactly these images.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplits {
    pub spec: SyntheticSpec,
    pub test_per_class: usize,
}

impl SyntheticSplits {
    pub fn new(seed: u64, classes: usize, per_class: usize, test_per_class: usize, size: usize) -> Self {
        Self {
            spec: SyntheticSpec {
                classes,
                per_class,
                size,
                seed,
                ..SyntheticSpec::default()
            },
            test_per_class,
        }
    }

    /// Parses `key = value` lines. Keys: `seed`, `classes`, `per_class`,
    /// `test_per_class`, `size`, `hue_jitter`, `noise`, `radius_min`,
    /// `radius_max`. All problems are reported together.
    pub fn parse(text: &str) -> Result<Self, Vec<String>> {
        let mut out = Self::new(0, 4, 500, 200, 32);
        let mut errors = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`", k + 1));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            let s = &mut out.spec;
            let res = match key {
                "seed" => value.parse().map(|v| s.seed = v).map_err(|e| e.to_string()),
                "classes" => parse_count(value, 1, 255).map(|v| s.classes = v),
                "per_class" => parse_count(value, 1, usize::MAX).map(|v| s.per_class = v),
                "test_per_class" => parse_count(value, 0, usize::MAX).map(|v| out.test_per_class = v),
                "size" => parse_count(value, 4, 4096).map(|v| s.size = v),
                "hue_jitter" => parse_unit(value).map(|v| s.hue_jitter = v),
                "noise" => parse_unit(value).map(|v| s.noise = v),
                "radius_min" => parse_unit(value).map(|v| s.radius.0 = v),
                "radius_max" => parse_unit(value).map(|v| s.radius.1 = v),
                _ => Err("unknown key".into()),
            };
            if let Err(e) = res {
                errors.push(format!("line {}: {key}: {e}", k + 1));
            }
        }
        if out.spec.radius.0 > out.spec.radius.1 {
            errors.push("radius_min exceeds radius_max".into());
        }
        if errors.is_empty() {
            Ok(out)
        } else {
            Err(errors)
        }
    }

    pub fn train(&self) -> ImageDataset {
        let mut ds = make_synthetic(&SyntheticSpec {
            seed: rng::derive(self.spec.seed, "data"),
            ..self.spec.clone()
        });
        ds.split = "train".into();
        ds
    }

    pub fn test(&self) -> ImageDataset {
        let mut ds = make_synthetic(&SyntheticSpec {
            per_class: self.test_per_class,
            seed: rng::derive(self.spec.seed, "data-test"),
            ..self.spec.clone()
        });
        ds.split = "test".into();
        ds
    }

    /// Writes both splits in the STL10 layout.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, DataError> {
        let mut files = write_stl10(dir, Split::Train, &self.train())?;
        if self.test_per_class > 0 {
            files.extend(write_stl10(dir, Split::Test, &self.test())?);
        }
        Ok(files)
    }
}

fn parse_count(value: &str, lo: usize, hi: usize) -> Result<usize, String> {
    match value.parse::<usize>() {
        Ok(v) if (lo..=hi).contains(&v) => Ok(v),
        Ok(v) => Err(format!("{v} outside [{lo}, {hi}]")),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_unit(value: &str) -> Result<f64, String> {
    match value.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        Ok(v) => Err(format!("{v} outside [0, 1]")),
        Err(e) => Err(e.to_string()),
    }
}

/// Index batches of a seeded permutation of `0..n`. With `drop_last` a
/// final batch shorter than `batch_size` is discarded.
pub fn batches(n: usize, batch_size: usize, seed: u64, drop_last: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            per_class: 8,
            size: 16,
            seed: 7,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = make_synthetic(&tiny_spec());
        assert_eq!(a, make_synthetic(&tiny_spec()));
        assert_eq!(a.len(), 32);
        assert_eq!(a.class_counts(), vec![8; 4]);
        let other = make_synthetic(&SyntheticSpec { seed: 8, ..tiny_spec() });
        assert_ne!(a.pixels, other.pixels);
    }

    #[test]
    fn stl10_round_trip() {
        let ds = make_synthetic(&SyntheticSpec {
            per_class: 1,
            classes: 2,
            size: STL10_SIZE,
            ..tiny_spec()
        });
        let dir = tempfile::tempdir().unwrap();
        write_stl10(dir.path(), Split::Train, &ds).unwrap();
        assert_eq!(std::fs::metadata(dir.path().join("train_X.bin")).unwrap().len(), 2 * 27648);
        let back = read_stl10(dir.path(), Split::Train, STL10_SIZE).unwrap();
        assert_eq!(back.pixels, ds.pixels);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn decoder_transposes_column_major_pixels() {
        // One 2x2 image whose red channel is stored column by column.
        let mut raw = vec![0u8; 12];
        raw[..4].copy_from_slice(&[1, 2, 3, 4]);
        let px = decode_images(&raw, 2, Path::new("x")).unwrap();
        assert_eq!(&px[..4], &[1, 3, 2, 4]);
        assert_eq!(encode_images(&px, 2), raw);
    }

    #[test]
    fn empty_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("unlabeled_X.bin"), []).unwrap();
        assert!(read_stl10(dir.path(), Split::Unlabeled, STL10_SIZE).unwrap().is_empty());
        std::fs::write(dir.path().join("unlabeled_X.bin"), vec![0u8; 27649]).unwrap();
        match read_stl10(dir.path(), Split::Unlabeled, STL10_SIZE) {
            Err(DataError::Parse { offset, .. }) => assert_eq!(offset, 27648),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("test_X.bin"), vec![0u8; 2 * 27648]).unwrap();
        std::fs::write(dir.path().join("test_y.bin"), [1u8]).unwrap();
        let err = read_stl10(dir.path(), Split::Test, STL10_SIZE).unwrap_err();
        assert!(err.to_string().contains("1 labels for 2 images"), "{err}");
    }

    #[test]
    fn batching() {
        let b = batches(10, 4, 1, true);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
        assert_eq!(b, batches(10, 4, 1, true));
        let mut all: Vec<_> = batches(10, 4, 1, false).concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn nearest_centroid_beats_chance_on_raw_pixels() {
        let train = make_synthetic(&SyntheticSpec { per_class: 40, ..tiny_spec() });
        let test = make_synthetic(&SyntheticSpec {
            per_class: 20,
            seed: 99,
            ..tiny_spec()
        });
        let dim = ImageDataset::image_bytes(16);
        let mut centroids = vec![vec![0f64; dim]; 4];
        for i in 0..train.len() {
            let c = train.class(i).unwrap();
            for (acc, &b) in centroids[c].iter_mut().zip(train.raw(i)) {
                *acc += b as f64 / 40.0;
            }
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(test.raw(i)).map(|(a, &b)| (a - b as f64).powi(2)).sum() };
                let best = (0..4).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
                best == test.class(i).unwrap()
            })
            .count();
        assert!(correct as f64 / test.len() as f64 > 0.25 + 0.1, "{correct}/{}", test.len());
    }

    #[test]
    fn synthetic_spec_files() {
        let spec = SyntheticSplits::parse("# tiny\nseed = 9\nclasses = 3\nper_class = 2\ntest_per_class = 1\nsize = 8\n").unwrap();
        assert_eq!((spec.spec.classes, spec.train().len(), spec.test().len()), (3, 6, 3));
        assert_eq!(spec.train(), spec.train());
        assert_ne!(spec.train().pixels[..192], spec.test().pixels[..192]);
        let errs = SyntheticSplits::parse("classes = 0\ncolour = red\nnoise = 2\n").unwrap_err();
        assert_eq!(errs.len(), 3, "{errs:?}");
    }
}
