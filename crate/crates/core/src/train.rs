//! Training loop: SGD with momentum on the online parameters, EMA on the
//! target, per-step metrics and checkpoints.
//!
//! A run directory contains `config.txt` (resolved configuration),
//! `metrics.csv` and `checkpoints/step-XXXXXXXX.bin`.
//!
//! Metrics columns:
//!
//! | column | meaning |
//! |---|---|
//! | `step` | optimizer steps completed before this batch |
//! | `epoch` | epoch of the batch |
//! | `loss` | symmetrized loss |
//! | `diag_term` | same-image part of `loss` |
//! | `refine_term` | λ-weighted cross-image part of `loss` |
//! | `collapse_std` | [`collapse_metric`] of the online encoder output on the first view |
//! | `pos_pairs`, `neg_pairs` | pseudo-label mask sizes summed over both directions |
//! | `wall_ms` | step wall time; 0 in deterministic mode |

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::augment::{self, Image};
use crate::config::{ConfigError, DataSource, Profile, RunConfig};
use crate::data::{self, DataError, ImageDataset, Split, SyntheticSplits};
use crate::loss;
use crate::model::checkpoint::{Checkpoint, CheckpointError};
use crate::model::ModelPair;
use crate::nn::{Mode, NamedTensor};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("numeric error: {0}")]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient at step {step} in {params:?}; diagnostics in {dump}")]
    NonFinite { step: u64, params: Vec<String>, dump: String },
    #[error("representation collapse at step {step}: metric {metric:.3e} below {floor:.1e} x initial {initial:.3e}")]
    Collapse {
        step: u64,
        metric: f64,
        initial: f64,
        floor: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Mean over dimensions of the per-dimension (population) standard
/// deviation across the batch.
pub fn collapse_metric<T: Scalar>(representations: &Tensor<T>) -> Result<f64, TensorError> {
    let shape = representations.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(TensorError::Contract(format!(
            "collapse metric needs an (N >= 2, d) batch, got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let x = representations.to_f64_vec();
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}

/// Momentum SGD: `v <- m v + g; θ <- θ - η v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(params: &[NamedTensor], lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Returns the names of parameters whose gradient is not finite; the
    /// parameters are left untouched in that case.
    pub fn step(&mut self, params: &mut [NamedTensor], grads: &[Tensor<f32>]) -> Result<(), Vec<String>> {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        let bad: Vec<String> = params
            .iter()
            .zip(grads)
            .filter(|(_, g)| !g.all_finite())
            .map(|(p, _)| p.name.clone())
            .collect();
        if !bad.is_empty() {
            return Err(bad);
        }
        let (lr, m) = (self.lr as f32, self.momentum as f32);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            assert_eq!(p.value.shape(), g.shape(), "gradient shape of {}", p.name);
            for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = m * *vi + gi;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }

    pub fn named(&self, params: &[NamedTensor]) -> Vec<NamedTensor> {
        params
            .iter()
            .zip(&self.velocity)
            .map(|(p, v)| NamedTensor {
                name: p.name.clone(),
                value: v.clone(),
            })
            .collect()
    }

    pub fn load(&mut self, velocity: &[NamedTensor], params: &[NamedTensor]) -> Result<(), CheckpointError> {
        if velocity.len() != params.len()
            || velocity
                .iter()
                .zip(params)
                .any(|(v, p)| v.name != p.name || v.value.shape() != p.value.shape())
        {
            return Err(CheckpointError::Mismatch("optimizer velocity does not match parameters".into()));
        }
        self.velocity = velocity.iter().map(|v| v.value.clone()).collect();
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub diag_term: f64,
    pub refine_term: f64,
    pub collapse_std: f64,
    pub pos_pairs: usize,
    pub neg_pairs: usize,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,epoch,loss,diag_term,refine_term,collapse_std,pos_pairs,neg_pairs,wall_ms";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.loss,
            self.diag_term,
            self.refine_term,
            self.collapse_std,
            self.pos_pairs,
            self.neg_pairs,
            self.wall_ms
        )
    }
}

/// Reads a metrics file written by [`train_run`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let parse_err = |line: usize, msg: String| TrainError::Data(DataError::Parse {
        path: path.display().to_string(),
        offset: line,
        message: msg,
    });
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(parse_err(k, format!("line {}: expected 9 fields", k + 1)));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| parse_err(k, format!("line {}: {e}", k + 1)));
        out.push(MetricsRecord {
            step: num(0)? as u64,
            epoch: num(1)? as u64,
            loss: num(2)?,
            diag_term: num(3)?,
            refine_term: num(4)?,
            collapse_std: num(5)?,
            pos_pairs: num(6)? as usize,
            neg_pairs: num(7)? as usize,
            wall_ms: num(8)? as u64,
        });
    }
    Ok(out)
}

/// Gradients and statistics of one batch, before any parameter update.
pub struct StepGradients {
    pub grads: Vec<Tensor<f32>>,
    pub loss: f64,
    pub diag_term: f64,
    pub refine_term: f64,
    pub collapse_std: f64,
    pub pos_pairs: usize,
    pub neg_pairs: usize,
}

/// Datasets of a run: unlabeled pretraining images plus labeled probe
/// train/test splits.
#[derive(Clone, Debug)]
pub struct RunData {
    pub pretrain: ImageDataset,
    pub probe_train: ImageDataset,
    pub probe_test: ImageDataset,
}

impl RunData {
    pub fn load(config: &RunConfig) -> Result<Self, DataError> {
        let d = &config.data;
        match d.source {
            DataSource::Synthetic => {
                let splits = SyntheticSplits::new(config.seed, d.classes, d.per_class, d.test_per_class, d.image_size);
                let train = splits.train();
                Ok(Self {
                    pretrain: train.clone(),
                    probe_train: train,
                    probe_test: splits.test(),
                })
            }
            DataSource::Stl10 => {
                let dir = d.path.as_deref().expect("validated: stl10 needs a path");
                if !dir.is_dir() {
                    return Err(DataError::Io {
                        path: dir.display().to_string(),
                        source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
                    });
                }
                let train = data::read_stl10(dir, Split::Train, d.image_size)?;
                let test = data::read_stl10(dir, Split::Test, d.image_size)?;
                let mut pretrain = train.clone();
                if dir.join(Split::Unlabeled.image_file()).exists() {
                    let unlabeled = data::read_stl10(dir, Split::Unlabeled, d.image_size)?;
                    pretrain.pixels.extend_from_slice(&unlabeled.pixels);
                }
                pretrain.labels = None;
                pretrain.split = "pretrain".into();
                log::info!(
                    "stl10 at {}: {} pretraining, {} train, {} test images",
                    dir.display(),
                    pretrain.len(),
                    train.len(),
                    test.len()
                );
                Ok(Self {
                    pretrain,
                    probe_train: train,
                    probe_test: test,
                })
            }
        }
    }
}

/// Owns a model pair, its optimizer and the pretraining data.
pub struct Trainer {
    pub config: RunConfig,
    /// Canonical text of `config` (with resolved normalization statistics).
    pub config_text: String,
    pub pair: ModelPair,
    pub opt: Sgd,
    pub dataset: ImageDataset,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Optimizer steps completed.
    pub step: u64,
}

impl Trainer {
    /// Fills `auto` normalization statistics from `dataset` and builds a
    /// freshly initialized model.
    pub fn new(mut config: RunConfig, dataset: ImageDataset) -> Result<Self, TrainError> {
        config.validate()?;
        if dataset.len() < config.train.batch_size {
            return Err(TrainError::Data(DataError::Parse {
                path: dataset.split.clone(),
                offset: 0,
                message: format!(
                    "{} images cannot fill one batch of {}",
                    dataset.len(),
                    config.train.batch_size
                ),
            }));
        }
        if config.data.mean.is_none() || config.data.std.is_none() {
            let (mean, std) = dataset.channel_stats();
            let round = |a: [f64; 3]| a.map(|v| (v * 1e6).round() / 1e6);
            config.data.mean.get_or_insert(round(mean));
            config.data.std.get_or_insert(round(std));
        }
        let mut pair = ModelPair::new(&config.model, config.tau, rng::derive(config.seed, "init"))?;
        pair.freeze_stats = config.train.freeze_stats;
        let opt = Sgd::new(pair.online.store.params(), config.optim.lr, config.optim.momentum);
        Ok(Self {
            config_text: config.to_text(),
            mean: config.data.mean.expect("resolved"),
            std: config.data.std.expect("resolved"),
            config,
            pair,
            opt,
            dataset,
            step: 0,
        })
    }

    /// Copies weights (not optimizer state or step) from a pretrained
    /// checkpoint whose model section matches this run.
    pub fn warm_start(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        self.check_compatible(ckpt)?;
        let tau = self.pair.tau;
        ckpt.restore_into(&mut self.pair)?;
        self.pair.tau = tau;
        Ok(())
    }

    /// Restores weights, optimizer velocity and step counter.
    pub fn resume(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        self.check_compatible(ckpt)?;
        ckpt.restore_into(&mut self.pair)?;
        self.opt.load(&ckpt.velocity, self.pair.online.store.params())?;
        self.step = ckpt.step;
        Ok(())
    }

    fn check_compatible(&self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        let stored = RunConfig::parse(&ckpt.config_text, Profile::Desk)?;
        if stored.model_entries() != self.config.model_entries() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint model {:?} differs from configured {:?}",
                stored.model_entries(),
                self.config.model_entries()
            ))
            .into());
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.dataset.len() / self.config.train.batch_size) as u64
    }

    /// Total steps this run will reach.
    pub fn total_steps(&self) -> u64 {
        let by_epochs = self.batches_per_epoch() * self.config.train.epochs as u64;
        match self.config.train.max_steps {
            0 => by_epochs,
            m => by_epochs.min(m as u64),
        }
    }

    /// Dataset indices of the batch for `step`.
    pub fn batch_indices(&self, step: u64) -> (u64, Vec<usize>) {
        let per = self.batches_per_epoch();
        let epoch = step / per;
        let seed = rng::derive_indexed(self.config.seed, "shuffle", epoch);
        let mut batches = data::batches(self.dataset.len(), self.config.train.batch_size, seed, true);
        (epoch, batches.swap_remove((step % per) as usize))
    }

    /// Two normalized view batches of `indices`, augmented with seeds
    /// derived from `step`.
    pub fn views(&self, indices: &[usize], step: u64) -> Result<(Tensor<f32>, Tensor<f32>), TensorError> {
        let base = rng::derive_indexed(self.config.seed, "views", step);
        let size = self.config.data.crop_size;
        let (v, vp): (Vec<Image>, Vec<Image>) = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                augment::make_views(
                    &self.dataset.image(i),
                    &self.config.augment,
                    size,
                    rng::derive_indexed(base, "image", k as u64),
                )
            })
            .unzip();
        Ok((
            augment::to_batch(&v, self.mean, self.std)?,
            augment::to_batch(&vp, self.mean, self.std)?,
        ))
    }

    /// Forward both networks on both views, symmetrized loss, backward.
    /// Only running statistics change.
    pub fn compute_gradients(&mut self, v: &Tensor<f32>, vp: &Tensor<f32>, step: u64) -> Result<StepGradients, TrainError> {
        let mut tape = Tape::<f32>::new();
        let po = self.pair.online.store.bind(&mut tape, true);
        let pt = self.pair.target.store.bind(&mut tape, false);
        let xv = tape.constant(v.clone());
        let xvp = tape.constant(vp.clone());
        let mut drop_rng = rng::seeded(rng::derive_indexed(self.config.seed, "dropout", step));
        let on_v = self.pair.forward_online(&mut tape, &po, xv, Mode::Train, Some(&mut drop_rng))?;
        let on_vp = self.pair.forward_online(&mut tape, &po, xvp, Mode::Train, Some(&mut drop_rng))?;
        let tg_v = self.pair.forward_target(&mut tape, &pt, xv, Mode::Train)?;
        let tg_vp = self.pair.forward_target(&mut tape, &pt, xvp, Mode::Train)?;
        let q_v = tape.l2_normalize(on_v.prediction)?;
        let q_vp = tape.l2_normalize(on_vp.prediction)?;
        let z_v = tape.l2_normalize(tg_v)?;
        let z_vp = tape.l2_normalize(tg_vp)?;
        let cfg = self.config.loss.clone();
        let terms = loss::symmetrize(&mut tape, (q_v, z_v), (q_vp, z_vp), |t, q, z| {
            loss::directional_loss(t, q, z, &cfg)
        })?;
        let collapse_std = collapse_metric(tape.value(on_v.representation))?;
        let scalar = |t: &Tape<f32>, v| t.value(v).item() as f64;
        let (loss, diag_term, refine_term) = (
            scalar(&tape, terms.total),
            scalar(&tape, terms.diagonal),
            scalar(&tape, terms.refinement),
        );
        let mut grads = tape.backward(terms.total)?;
        let grads = po
            .vars()
            .iter()
            .map(|&var| grads.take(var).expect("online parameters are tracked"))
            .collect();
        Ok(StepGradients {
            grads,
            loss,
            diag_term,
            refine_term,
            collapse_std,
            pos_pairs: terms.positive_pairs,
            neg_pairs: terms.negative_pairs,
        })
    }

    /// One full step on the batch for `self.step`.
    pub fn train_step(&mut self, run_dir: Option<&Path>) -> Result<MetricsRecord, TrainError> {
        let start = Instant::now();
        let step = self.step;
        let (epoch, indices) = self.batch_indices(step);
        let (v, vp) = self.views(&indices, step)?;
        let g = self.compute_gradients(&v, &vp, step)?;
        if let Err(params) = self.opt.step(self.pair.online.store.params_mut(), &g.grads) {
            let dump = self.dump_diagnostics(run_dir, &g)?;
            return Err(TrainError::NonFinite { step, params, dump });
        }
        self.pair.ema_update()?;
        self.step += 1;
        let wall_ms = if self.config.train.deterministic {
            0
        } else {
            start.elapsed().as_millis() as u64
        };
        Ok(MetricsRecord {
            step,
            epoch,
            loss: g.loss,
            diag_term: g.diag_term,
            refine_term: g.refine_term,
            collapse_std: g.collapse_std,
            pos_pairs: g.pos_pairs,
            neg_pairs: g.neg_pairs,
            wall_ms,
        })
    }

    fn dump_diagnostics(&self, run_dir: Option<&Path>, g: &StepGradients) -> Result<String, TrainError> {
        let mut text = format!("step {}\nloss {}\n\nparameter,grad_l2,non_finite\n", self.step, g.loss);
        for (p, grad) in self.pair.online.store.params().iter().zip(&g.grads) {
            let finite: Vec<f64> = grad.to_f64_vec().into_iter().filter(|v| v.is_finite()).collect();
            let norm = finite.iter().map(|v| v * v).sum::<f64>().sqrt();
            text += &format!("{},{norm},{}\n", p.name, grad.len() - finite.len());
        }
        match run_dir {
            Some(dir) => {
                let path = dir.join(format!("diagnostics-step-{:08}.txt", self.step));
                std::fs::write(&path, text).map_err(io_err(&path))?;
                Ok(path.display().to_string())
            }
            None => {
                log::error!("{text}");
                Ok("log".into())
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let per = self.batches_per_epoch().max(1);
        Checkpoint::capture(
            &self.pair,
            &self.opt.named(self.pair.online.store.params()),
            &self.config_text,
            self.step,
            self.step / per,
            self.config.optim.lr,
            self.config.optim.momentum,
        )
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step-{step:08}.bin"))
}

/// Checkpoints of a run directory in step order.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
    let ckpt_dir = dir.join("checkpoints");
    let mut out: Vec<PathBuf> = std::fs::read_dir(&ckpt_dir)
        .map_err(io_err(&ckpt_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("step-") && n.ends_with(".bin"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Result of a finished run.
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub final_checkpoint: PathBuf,
    pub trainer: Trainer,
    /// First step at which the collapse alarm fired.
    pub collapse_alarm: Option<u64>,
}

/// Watches for `collapse_std < floor * initial` over `patience`
/// consecutive steps.
struct CollapseAlarm {
    floor: f64,
    patience: usize,
    initial: Option<f64>,
    run: usize,
}

impl CollapseAlarm {
    fn observe(&mut self, metric: f64) -> bool {
        let initial = *self.initial.get_or_insert(metric);
        if metric < self.floor * initial {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.patience > 0 && self.run >= self.patience
    }
}

/// Trains from `config` (loading its data), optionally resuming from a
/// checkpoint, and writes the run directory.
pub fn train_run(config: &RunConfig, resume: Option<&Path>) -> Result<RunSummary, TrainError> {
    config.validate()?;
    let data = RunData::load(config)?;
    train_with_data(config, data.pretrain, resume)
}

pub fn train_with_data(config: &RunConfig, dataset: ImageDataset, resume: Option<&Path>) -> Result<RunSummary, TrainError> {
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    if let Some(path) = &config.train.warm_start {
        trainer.warm_start(&Checkpoint::load(path)?)?;
    }
    if let Some(path) = resume {
        trainer.resume(&Checkpoint::load(path)?)?;
    }
    let dir = trainer.config.resolved_output_dir();
    std::fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(&dir))?;
    let config_path = dir.join("config.txt");
    std::fs::write(&config_path, &trainer.config_text).map_err(io_err(&config_path))?;

    let metrics_path = dir.join("metrics.csv");
    let resuming = resume.is_some() && metrics_path.exists();
    let mut previous = if resuming {
        read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.step < trainer.step)
            .collect()
    } else {
        Vec::new()
    };
    let file = File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    let mut metrics = BufWriter::new(file);
    writeln!(metrics, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;
    for r in &previous {
        writeln!(metrics, "{}", r.csv_row()).map_err(io_err(&metrics_path))?;
    }

    let save = |t: &Trainer| -> Result<PathBuf, TrainError> {
        let path = checkpoint_path(&dir, t.step);
        t.checkpoint().save(&path)?;
        Ok(path)
    };
    let mut last_ckpt = save(&trainer)?;
    let tc = trainer.config.train.clone();
    let mut alarm = CollapseAlarm {
        floor: tc.collapse_floor,
        patience: tc.collapse_patience,
        initial: previous.first().map(|r: &MetricsRecord| r.collapse_std),
        run: 0,
    };
    let mut collapse_alarm = None;
    let total = trainer.total_steps();
    let mut records = std::mem::take(&mut previous);
    while trainer.step < total {
        let record = trainer.train_step(Some(&dir))?;
        if record.step % tc.log_every as u64 == 0 {
            writeln!(metrics, "{}", record.csv_row()).map_err(io_err(&metrics_path))?;
        }
        if alarm.observe(record.collapse_std) && collapse_alarm.is_none() {
            collapse_alarm = Some(record.step);
            log::warn!(
                "collapse alarm at step {}: collapse_std {:.3e}",
                record.step,
                record.collapse_std
            );
            if tc.strict_collapse {
                metrics.flush().map_err(io_err(&metrics_path))?;
                save(&trainer)?;
                return Err(TrainError::Collapse {
                    step: record.step,
                    metric: record.collapse_std,
                    initial: alarm.initial.unwrap_or(0.0),
                    floor: tc.collapse_floor,
                });
            }
        }
        records.push(record);
        if tc.checkpoint_every > 0 && trainer.step % tc.checkpoint_every as u64 == 0 {
            last_ckpt = save(&trainer)?;
        }
    }
    metrics.flush().map_err(io_err(&metrics_path))?;
    if checkpoint_path(&dir, trainer.step) != last_ckpt {
        last_ckpt = save(&trainer)?;
    }
    Ok(RunSummary {
        output_dir: dir,
        records,
        final_checkpoint: last_ckpt,
        trainer,
        collapse_alarm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(values: &[f32]) -> Vec<NamedTensor> {
        vec![NamedTensor {
            name: "w".into(),
            value: Tensor::new([values.len()], values.to_vec()).unwrap(),
        }]
    }

    #[test]
    fn sgd_reference_cases() {
        let g = [Tensor::new([2], vec![1.0f32, -2.0]).unwrap()];
        let mut p = named(&[1.0, 1.0]);
        let mut opt = Sgd::new(&p, 0.5, 0.0);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p[0].value.data(), &[0.5, 2.0]);

        let mut p = named(&[1.0, 1.0]);
        let mut opt = Sgd::new(&p, 0.5, 0.9);
        opt.step(&mut p, &[Tensor::zeros([2])]).unwrap();
        assert_eq!(p[0].value.data(), &[1.0, 1.0]);

        // Second step moves by (1 + m) g with η = 1.
        let mut p = named(&[0.0]);
        let g = [Tensor::new([1], vec![1.0f32]).unwrap()];
        let mut opt = Sgd::new(&p, 1.0, 0.9);
        opt.step(&mut p, &g).unwrap();
        let after_one = p[0].value.data()[0];
        opt.step(&mut p, &g).unwrap();
        assert!((after_one - p[0].value.data()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_rejects_non_finite_gradients() {
        let mut p = named(&[1.0]);
        let mut opt = Sgd::new(&p, 0.1, 0.9);
        let err = opt.step(&mut p, &[Tensor::new([1], vec![f32::NAN]).unwrap()]).unwrap_err();
        assert_eq!(err, vec!["w".to_string()]);
        assert_eq!(p[0].value.data(), &[1.0]);
    }

    #[test]
    fn collapse_metric_reference_cases() {
        let same = Tensor::new([3, 2], vec![0.5f64, 1.0, 0.5, 1.0, 0.5, 1.0]).unwrap();
        assert_eq!(collapse_metric(&same).unwrap(), 0.0);
        let alternating = Tensor::new([4, 2], vec![1.0f64, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(collapse_metric(&alternating).unwrap(), 0.5);
        assert!(collapse_metric(&Tensor::<f64>::zeros([1, 4])).is_err());
    }

    #[test]
    fn collapse_metric_of_gaussian_rows_is_near_one() {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng::seeded(3);
        let (n, d) = (2000, 256);
        let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
        let m = collapse_metric(&Tensor::new([n, d], data).unwrap()).unwrap();
        assert!((m - 1.0).abs() < 0.05, "{m}");
    }

    #[test]
    fn metrics_rows_round_trip() {
        let r = MetricsRecord {
            step: 3,
            epoch: 1,
            loss: 1.25,
            diag_term: 1.0,
            refine_term: 0.25,
            collapse_std: 0.125,
            pos_pairs: 4,
            neg_pairs: 0,
            wall_ms: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, format!("{METRICS_HEADER}\n{}\n", r.csv_row())).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), vec![r]);
    }

    #[test]
    fn collapse_alarm_needs_sustained_drop() {
        let mut alarm = CollapseAlarm {
            floor: 0.5,
            patience: 3,
            initial: None,
            run: 0,
        };
        assert!(!alarm.observe(1.0));
        assert!(!alarm.observe(0.1));
        assert!(!alarm.observe(0.1));
        assert!(!alarm.observe(0.9));
        assert!(!alarm.observe(0.1));
        assert!(!alarm.observe(0.1));
        assert!(alarm.observe(0.1));
    }
}
