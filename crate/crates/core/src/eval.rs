//! Linear evaluation, similarity reports and accuracy curves.
//!
//! The probe is a single softmax layer trained with momentum SGD on frozen
//! encoder outputs (normalization layers in inference mode). Training
//! stops after `max_epochs` or when the epoch loss has not improved for
//! `patience` epochs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::augment::{self, Image};
use crate::config::{EvalConfig, Profile, RunConfig};
use crate::data::{self, DataError, ImageDataset};
use crate::loss::{self, SimilarityMatrix};
use crate::model::checkpoint::{hex, Checkpoint, CheckpointError};
use crate::model::{ModelPair, Network};
use crate::nn::{Mode, NamedTensor};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::train::{self, Sgd, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("numeric error: {0}")]
    Tensor(#[from] TensorError),
    #[error("unreadable image entries:\n  {}", .0.join("\n  "))]
    Images(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// How raw images become encoder inputs.
#[derive(Clone, Debug)]
pub struct Preprocess {
    pub size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocess {
    pub fn from_config(config: &RunConfig) -> Result<Self, EvalError> {
        match (config.data.mean, config.data.std) {
            (Some(mean), Some(std)) => Ok(Self {
                size: config.data.crop_size,
                mean,
                std,
            }),
            _ => Err(EvalError::Config("checkpoint config lacks resolved data.mean / data.std".into())),
        }
    }

    /// Whole image resized to the view size; no augmentation.
    pub fn apply(&self, img: &Image) -> Image {
        augment::resized_crop(img, (0, 0, img.height, img.width), self.size)
    }
}

/// Model and preprocessing restored from a checkpoint.
pub struct LoadedModel {
    pub config: RunConfig,
    pub pair: ModelPair,
    pub preprocess: Preprocess,
    pub step: u64,
    pub digest: String,
}

pub fn load_model(ckpt: &Checkpoint) -> Result<LoadedModel, EvalError> {
    let config = RunConfig::parse(&ckpt.config_text, Profile::Desk).map_err(|e| EvalError::Config(e.to_string()))?;
    let mut pair = ModelPair::new(&config.model, ckpt.tau, 0)?;
    ckpt.restore_into(&mut pair)?;
    Ok(LoadedModel {
        preprocess: Preprocess::from_config(&config)?,
        config,
        pair,
        step: ckpt.step,
        digest: hex(&ckpt.digest),
    })
}

const ENCODE_BATCH: usize = 128;

/// Encoder outputs (N, width) in inference mode.
pub fn encode(network: &mut Network, images: &[Image], pre: &Preprocess) -> Result<Tensor<f32>, EvalError> {
    let mut rows = Vec::new();
    let mut width = network.encoder_width();
    for chunk in images.chunks(ENCODE_BATCH) {
        let prepared: Vec<Image> = chunk.iter().map(|i| pre.apply(i)).collect();
        let x = augment::to_batch(&prepared, pre.mean, pre.std)?;
        let mut tape = Tape::<f32>::new();
        let p = network.store.bind(&mut tape, false);
        let v = tape.constant(x);
        let encoder = network.encoder.clone();
        let mut ctx = network.ctx::<rng::Rng>(Mode::Eval, None);
        let y = encoder.forward(&mut tape, &p, v, &mut ctx)?;
        width = tape.shape(y)[1];
        rows.extend_from_slice(tape.value(y).data());
    }
    Ok(Tensor::new([images.len(), width], rows)?)
}

fn dataset_images(ds: &ImageDataset) -> Vec<Image> {
    (0..ds.len()).map(|i| ds.image(i)).collect()
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ProbeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckpointIdentity {
    pub path: Option<String>,
    pub step: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub curve: Vec<ProbeEpoch>,
    pub checkpoint: CheckpointIdentity,
    pub train_images: usize,
    pub test_images: usize,
    /// Online parameter checksum, identical before and after probing.
    pub encoder_checksum: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

/// Softmax classifier `W x + b` over standardized features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl LinearProbe {
    fn logits(&self, x: &[f32], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let w = &self.weight[k * self.dim..(k + 1) * self.dim];
            *o = self.bias[k]
                + w.iter()
                    .zip(x)
                    .zip(self.shift.iter().zip(&self.scale))
                    .map(|((w, &x), (s, c))| w * (x as f64 - s) * c)
                    .sum::<f64>();
        }
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        let mut out = vec![0.0; self.classes];
        self.logits(x, &mut out);
        argmax(&out)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Trains a probe on features `x` (N, d) with zero-based labels.
pub fn train_probe(
    x: &Tensor<f32>,
    labels: &[usize],
    classes: usize,
    config: &EvalConfig,
    seed: u64,
) -> (LinearProbe, Vec<ProbeEpoch>) {
    use rand::Rng as _;
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (mut shift, mut scale) = (vec![0.0; d], vec![1.0; d]);
    if config.standardize_features {
        let feats = x.to_f64_vec();
        for j in 0..d {
            let mean = (0..n).map(|i| feats[i * d + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (feats[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
            shift[j] = mean;
            scale[j] = 1.0 / var.sqrt().max(1e-6);
        }
    }
    let mut rng = rng::seeded(seed);
    let bound = 1.0 / (d as f64).sqrt();
    let weight = (0..classes * d).map(|_| rng.random_range(-bound..bound)).collect::<Vec<f64>>();
    let mut probe = LinearProbe {
        classes,
        dim: d,
        weight,
        bias: vec![0.0; classes],
        shift,
        scale,
    };
    let mut params = vec![
        NamedTensor {
            name: "probe.weight".into(),
            value: Tensor::zeros([classes, d]),
        },
        NamedTensor {
            name: "probe.bias".into(),
            value: Tensor::zeros([classes]),
        },
    ];
    let mut opt = Sgd::new(&params, config.lr, config.momentum);
    let mut curve = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut logits = vec![0.0; classes];
    for epoch in 0..config.max_epochs {
        let order = data::batches(n, config.batch_size, rng::derive_indexed(seed, "probe-epoch", epoch as u64), false);
        let (mut total, mut correct) = (0.0, 0);
        for batch in order {
            let mut gw = vec![0f32; classes * d];
            let mut gb = vec![0f32; classes];
            let inv = 1.0 / batch.len() as f64;
            for &i in &batch {
                let row = x.row(i);
                probe.logits(row, &mut logits);
                if argmax(&logits) == labels[i] {
                    correct += 1;
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                total += z.ln() + m - logits[labels[i]];
                for k in 0..classes {
                    let g = ((logits[k] - m).exp() / z - (k == labels[i]) as u8 as f64) * inv;
                    gb[k] += g as f32;
                    for j in 0..d {
                        gw[k * d + j] += (g * (row[j] as f64 - probe.shift[j]) * probe.scale[j]) as f32;
                    }
                }
            }
            // The optimizer works on f32 copies; the probe keeps f64 weights.
            params[0].value = Tensor::new([classes, d], probe.weight.iter().map(|&w| w as f32).collect()).expect("sized");
            params[1].value = Tensor::new([classes], probe.bias.iter().map(|&b| b as f32).collect()).expect("sized");
            let grads = [
                Tensor::new([classes, d], gw).expect("sized"),
                Tensor::new([classes], gb).expect("sized"),
            ];
            if opt.step(&mut params, &grads).is_err() {
                break;
            }
            probe.weight = params[0].value.to_f64_vec();
            probe.bias = params[1].value.to_f64_vec();
        }
        let loss = total / n as f64;
        curve.push(ProbeEpoch {
            epoch,
            loss,
            train_accuracy: correct as f64 / n as f64,
        });
        if loss < best - 1e-4 {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    (probe, curve)
}

fn zero_based_labels(ds: &ImageDataset, what: &str) -> Result<Vec<usize>, EvalError> {
    match &ds.labels {
        Some(l) => Ok(l.iter().map(|&v| v as usize - 1).collect()),
        None => Err(EvalError::Config(format!("{what} set has no labels"))),
    }
}

/// Probes the online encoder of `model`; `train`/`test` are labeled.
pub fn linear_eval_model(
    model: &mut LoadedModel,
    train: &ImageDataset,
    test: &ImageDataset,
    config: &EvalConfig,
    path: Option<&Path>,
) -> Result<EvalReport, EvalError> {
    let classes = train.num_classes();
    if test.num_classes() > classes || classes == 0 {
        return Err(EvalError::Config(format!(
            "class count mismatch: train has {classes} classes, test has {}",
            test.num_classes()
        )));
    }
    let train_labels = zero_based_labels(train, "train")?;
    let test_labels = zero_based_labels(test, "test")?;
    let before = model.pair.online.store.checksum();
    let network = &mut model.pair.online;
    let xtr = encode(network, &dataset_images(train), &model.preprocess)?;
    let xte = encode(network, &dataset_images(test), &model.preprocess)?;
    let after = model.pair.online.store.checksum();
    assert_eq!(before, after, "encoder changed during evaluation");
    let (probe, curve) = train_probe(
        &xtr,
        &train_labels,
        classes,
        config,
        rng::derive(model.config.seed, "probe"),
    );
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (i, &label) in test_labels.iter().enumerate() {
        counts[label] += 1;
        if probe.predict(xte.row(i)) == label {
            hits[label] += 1;
        }
    }
    let total_hits: usize = hits.iter().sum();
    Ok(EvalReport {
        top1: total_hits as f64 / test_labels.len().max(1) as f64,
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
            .collect(),
        curve,
        checkpoint: CheckpointIdentity {
            path: path.map(|p| p.display().to_string()),
            step: model.step,
            config_digest: model.digest.clone(),
        },
        train_images: train.len(),
        test_images: test.len(),
        encoder_checksum: format!("{after:016x}"),
    })
}

pub fn linear_eval(
    ckpt: &Checkpoint,
    train: &ImageDataset,
    test: &ImageDataset,
    config: &EvalConfig,
    path: Option<&Path>,
) -> Result<EvalReport, EvalError> {
    let mut model = load_model(ckpt)?;
    linear_eval_model(&mut model, train, test, config, path)
}

/// Online predictions against target projections for `images`, both
/// normalized, with no augmentation.
pub fn similarity_scores(model: &mut LoadedModel, images: &[Image], theta_p: f64, theta_n: f64) -> Result<SimilarityMatrix, EvalError> {
    if images.len() < 2 {
        return Err(EvalError::Config(format!(
            "similarity needs at least 2 images, got {}",
            images.len()
        )));
    }
    let prepared: Vec<Image> = images.iter().map(|i| model.preprocess.apply(i)).collect();
    let x = augment::to_batch(&prepared, model.preprocess.mean, model.preprocess.std)?;
    let mut tape = Tape::<f64>::new();
    let po = model.pair.online.store.bind(&mut tape, false);
    let pt = model.pair.target.store.bind(&mut tape, false);
    let v = tape.constant(x.cast());
    let online = model.pair.forward_online::<f64, rng::Rng>(&mut tape, &po, v, Mode::Eval, None)?;
    let target = model.pair.forward_target(&mut tape, &pt, v, Mode::Eval)?;
    let q = tape.l2_normalize(online.prediction)?;
    let z = tape.l2_normalize(target)?;
    loss::similarity_matrix(tape.value(q), tape.value(z), theta_p, theta_n).map_err(|e| EvalError::Config(e.to_string()))
}

/// One entry of an image list: `label = path` or `label = path#index`
/// (index into an STL10-layout `.bin` file).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEntry {
    pub label: String,
    pub path: PathBuf,
    pub index: Option<usize>,
}

pub fn parse_image_list(text: &str, base: &Path) -> Result<Vec<ImageEntry>, EvalError> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((label, target)) = line.split_once('=') else {
            errors.push(format!("line {}: expected `label = path[#index]`", k + 1));
            continue;
        };
        let target = target.trim();
        let (path, index) = match target.rsplit_once('#') {
            Some((p, i)) => match i.parse::<usize>() {
                Ok(i) => (p, Some(i)),
                Err(_) => {
                    errors.push(format!("line {}: bad index `{i}`", k + 1));
                    continue;
                }
            },
            None => (target, None),
        };
        out.push(ImageEntry {
            label: label.trim().to_string(),
            path: base.join(path),
            index,
        });
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(EvalError::Images(errors))
    }
}

/// Loads every entry; all failures are reported together.
pub fn load_images(entries: &[ImageEntry], bin_size: usize) -> Result<Vec<Image>, EvalError> {
    let mut images = Vec::new();
    let mut errors = Vec::new();
    for e in entries {
        match load_image(e, bin_size) {
            Ok(img) => images.push(img),
            Err(msg) => errors.push(format!("{} ({}): {msg}", e.label, e.path.display())),
        }
    }
    if errors.is_empty() {
        Ok(images)
    } else {
        Err(EvalError::Images(errors))
    }
}

fn load_image(e: &ImageEntry, bin_size: usize) -> Result<Image, String> {
    let is_bin = e.path.extension().is_some_and(|x| x == "bin");
    if is_bin {
        let bytes = std::fs::read(&e.path).map_err(|err| err.to_string())?;
        let pixels = data::decode_images(&bytes, bin_size, &e.path).map_err(|err| err.to_string())?;
        let per = ImageDataset::image_bytes(bin_size);
        let i = e.index.unwrap_or(0);
        let count = pixels.len() / per;
        if i >= count {
            return Err(format!("index {i} out of range ({count} images)"));
        }
        return Ok(Image::from_u8(bin_size, bin_size, &pixels[i * per..(i + 1) * per]));
    }
    if e.index.is_some() {
        return Err("an index is only valid for .bin files".into());
    }
    let img = image::open(&e.path).map_err(|err| err.to_string())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Image::new(h, w, data))
}

/// `row,col,row_label,col_label,score` with one line per cell.
pub fn similarity_csv(s: &SimilarityMatrix, labels: &[String]) -> String {
    let mut out = String::from("row,col,row_label,col_label,score\n");
    for i in 0..s.n {
        for j in 0..s.n {
            let _ = writeln!(out, "{i},{j},{},{},{:.6}", labels[i], labels[j], s.score(i, j));
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Heatmap with every cell annotated to four decimals. Rows are online
/// predictions, columns target projections.
pub fn similarity_svg(s: &SimilarityMatrix, labels: &[String]) -> String {
    let cell = 64;
    let margin = 96;
    let size = margin + cell * s.n + 16;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    for (k, label) in labels.iter().enumerate() {
        let c = margin + k * cell + cell / 2;
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{c}\" text-anchor=\"end\" dominant-baseline=\"middle\">{}</text>",
            margin - 6,
            escape(label)
        );
        let _ = writeln!(
            out,
            "<text x=\"{c}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            margin - 8,
            escape(label)
        );
    }
    for i in 0..s.n {
        for j in 0..s.n {
            let v = s.score(i, j);
            // Blue for -1, white for 0, red for +1.
            let t = v.clamp(-1.0, 1.0);
            let (r, g, b) = if t >= 0.0 {
                (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
            } else {
                (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
            };
            let (x, y) = (margin + j * cell, margin + i * cell);
            let stroke = if s.positive[i * s.n + j] {
                " stroke=\"black\" stroke-width=\"2\""
            } else if s.negative[i * s.n + j] {
                " stroke=\"gray\" stroke-width=\"2\" stroke-dasharray=\"4 2\""
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({},{},{})\"{stroke}/>",
                r as u8, g as u8, b as u8
            );
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" dominant-baseline=\"middle\">{v:.4}</text>",
                x + cell / 2,
                y + cell / 2
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Writes `similarity.csv` and `similarity.svg` into `out_dir`.
pub fn similarity_report(
    ckpt: &Checkpoint,
    entries: &[ImageEntry],
    theta_p: f64,
    theta_n: f64,
    out_dir: &Path,
) -> Result<SimilarityMatrix, EvalError> {
    if entries.len() < 2 {
        return Err(EvalError::Config(format!(
            "similarity needs at least 2 images, got {}",
            entries.len()
        )));
    }
    let mut model = load_model(ckpt)?;
    let images = load_images(entries, model.config.data.image_size)?;
    let s = similarity_scores(&mut model, &images, theta_p, theta_n)?;
    let labels: Vec<String> = entries.iter().map(|e| e.label.clone()).collect();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv = out_dir.join("similarity.csv");
    std::fs::write(&csv, similarity_csv(&s, &labels)).map_err(io_err(&csv))?;
    let svg = out_dir.join("similarity.svg");
    std::fs::write(&svg, similarity_svg(&s, &labels)).map_err(io_err(&svg))?;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    pub accuracy: f64,
}

/// Probes every checkpoint of a run directory in step order and writes
/// `accuracy_curve.csv`. Unreadable checkpoints are skipped with a warning.
pub fn accuracy_curve(
    run_dir: &Path,
    train: &ImageDataset,
    test: &ImageDataset,
    config: &EvalConfig,
) -> Result<Vec<CurvePoint>, EvalError> {
    let mut points = Vec::new();
    for path in train::list_checkpoints(run_dir)? {
        let report = Checkpoint::load(&path)
            .map_err(EvalError::from)
            .and_then(|ckpt| linear_eval(&ckpt, train, test, config, Some(&path)));
        match report {
            Ok(r) => points.push(CurvePoint {
                step: r.checkpoint.step,
                accuracy: r.top1,
            }),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    points.sort_by_key(|p| p.step);
    let mut csv = String::from("step,accuracy\n");
    for p in &points {
        let _ = writeln!(csv, "{},{}", p.step, p.accuracy);
    }
    let out = run_dir.join("accuracy_curve.csv");
    std::fs::write(&out, csv).map_err(io_err(&out))?;
    Ok(points)
}

/// Whether `values`, smoothed with a centered window of `window`, never
/// drops by more than `band` below its running maximum.
pub fn non_decreasing_within(values: &[f64], window: usize, band: f64) -> bool {
    let half = window / 2;
    let smooth: Vec<f64> = (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let mut best = f64::NEG_INFINITY;
    smooth.iter().all(|&v| {
        best = best.max(v);
        v >= best - band
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_separates_distinct_points() {
        let x = Tensor::new([3, 2], vec![1.0f32, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap();
        let config = EvalConfig {
            batch_size: 3,
            max_epochs: 300,
            patience: 300,
            ..EvalConfig::default()
        };
        let (probe, curve) = train_probe(&x, &[0, 1, 2], 3, &config, 1);
        for i in 0..3 {
            assert_eq!(probe.predict(x.row(i)), i);
        }
        assert!(curve.last().unwrap().loss < curve[0].loss);
    }

    #[test]
    fn probe_stops_on_plateau() {
        let x = Tensor::new([4, 1], vec![0.0f32; 4]).unwrap();
        let config = EvalConfig {
            patience: 3,
            ..EvalConfig::default()
        };
        let (_, curve) = train_probe(&x, &[0, 1, 0, 1], 2, &config, 1);
        assert!(curve.len() < config.max_epochs, "{}", curve.len());
    }

    #[test]
    fn csv_and_svg_formats() {
        let s = SimilarityMatrix {
            n: 2,
            scores: vec![1.0, 0.8551, 0.258, 1.0],
            positive: vec![false, true, false, false],
            negative: vec![false; 4],
        };
        let labels = vec!["cat-1".to_string(), "dog-1".to_string()];
        let csv = similarity_csv(&s, &labels);
        assert_eq!(csv.lines().count(), 1 + 4);
        assert!(csv.contains("0,1,cat-1,dog-1,0.855100"));
        let svg = similarity_svg(&s, &labels);
        assert!(svg.contains(">0.8551<") && svg.contains(">0.2580<"));
        assert_eq!(svg.matches("<rect").count(), 4);
    }

    #[test]
    fn image_list_parsing() {
        let list = "# comment\ncat-1 = a.png\ndog-1 = b.bin#3\n";
        let e = parse_image_list(list, Path::new("/d")).unwrap();
        assert_eq!(e[1].index, Some(3));
        assert_eq!(e[0].path, Path::new("/d/a.png"));
        assert!(matches!(parse_image_list("nonsense", Path::new(".")), Err(EvalError::Images(_))));
    }

    #[test]
    fn missing_images_are_itemized() {
        let entries = vec![
            ImageEntry {
                label: "a".into(),
                path: "/nonexistent/a.png".into(),
                index: None,
            },
            ImageEntry {
                label: "b".into(),
                path: "/nonexistent/b.bin".into(),
                index: Some(1),
            },
        ];
        match load_images(&entries, 96) {
            Err(EvalError::Images(items)) => assert_eq!(items.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn smoothing_band() {
        assert!(non_decreasing_within(&[0.3, 0.5, 0.45, 0.6, 0.7], 3, 0.05));
        assert!(!non_decreasing_within(&[0.3, 0.8, 0.8, 0.2, 0.2], 3, 0.05));
    }
}
