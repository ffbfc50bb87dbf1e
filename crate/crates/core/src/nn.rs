//! Layers, normalization schemes, and trainable-parameter bookkeeping.
//!
//! Parameters live in a [`ParamStore`] as 32-bit tensors. A forward pass binds
//! them onto a tape ([`ParamStore::bind`]) in whatever precision the tape
//! uses, so the same layer definitions drive the 32-bit training path and the
//! 64-bit gradient checks.

use std::fmt;
use std::ops::Index;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::kernels::GroupLayout;
use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const WS_EPS: f64 = 1e-4;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_GROUPS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Layer,
    /// Group normalization with the requested group count; clamped to the
    /// channel count when built.
    Group(usize),
    None,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::Batch => f.write_str("batch"),
            NormKind::Layer => f.write_str("layer"),
            NormKind::Group(g) => write!(f, "group:{g}"),
            NormKind::None => f.write_str("none"),
        }
    }
}

impl FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "batch" | "bn" => Ok(NormKind::Batch),
            "layer" | "ln" => Ok(NormKind::Layer),
            "group" | "gn" => Ok(NormKind::Group(DEFAULT_GROUPS)),
            "none" => Ok(NormKind::None),
            other => match other.split_once(':') {
                Some(("group" | "gn", g)) => g
                    .parse()
                    .ok()
                    .filter(|&g: &usize| g > 0)
                    .map(NormKind::Group)
                    .ok_or_else(|| format!("invalid group count in `{other}`")),
                _ => Err(format!("unknown normalization `{other}` (batch, layer, group[:G], none)")),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor<f32>,
}

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics), each addressed by insertion index and named for
/// checkpointing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        self.params.push(NamedTensor {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<f32>) -> BufferId {
        self.buffers.push(NamedTensor {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<f32> {
        &self.buffers[id.0].value
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Order- and bit-sensitive fingerprint of all parameters and buffers.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.params.iter().chain(&self.buffers) {
            for b in t.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in t.value.data() {
                h = (h ^ v.to_bits() as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    /// Places every parameter on `tape`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let value = p.value.cast::<T>();
                if trainable {
                    tape.param(value)
                } else {
                    tape.constant(value)
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for the parameters of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Mutable state threaded through a forward pass.
pub struct ForwardCtx<'a, R: Rng> {
    pub mode: Mode,
    /// Running statistics; updated by batch norm in training mode unless
    /// `freeze_stats` is set.
    pub buffers: &'a mut [NamedTensor],
    pub freeze_stats: bool,
    /// Dropout randomness; `None` disables dropout.
    pub rng: Option<&'a mut R>,
}

// ---------------------------------------------------------------------------
// Functional operations
// ---------------------------------------------------------------------------

/// Standardizes each output row of a weight tensor (O, ...) to zero mean
/// and unit variance: `(w - mean) / sqrt(var + eps)`, with the row length
/// being the product of all non-output dimensions. Differentiable with
/// respect to the raw weight.
pub fn weight_standardize<T: Scalar>(tape: &mut Tape<T>, w: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(w).to_vec();
    if shape.len() < 2 {
        return Err(TensorError::Shape {
            op: "weight_standardize",
            lhs: shape,
            rhs: vec![],
        });
    }
    let layout = GroupLayout {
        outer: 1,
        groups: shape[0],
        inner: shape[1..].iter().product(),
    };
    tape.standardize(w, layout, T::of(eps))
}

/// Per-channel affine `x * scale + shift`, channels on axis 1.
pub fn channel_affine<T: Scalar>(tape: &mut Tape<T>, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(TensorError::Shape {
            op: "channel_affine",
            lhs: shape,
            rhs: tape.shape(scale).to_vec(),
        });
    }
    let mut bshape = vec![1; shape.len()];
    bshape[1] = shape[1];
    let s = tape.reshape(scale, &bshape)?;
    let b = tape.reshape(shift, &bshape)?;
    let y = tape.mul(x, s)?;
    tape.add(y, b)
}

fn split_channels(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Batch statistics of `x` (N, C, ...) per channel: (mean, population var).
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let shape = x.shape();
    let (n, c, rest) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let count = (n * rest) as f64;
    let data = x.data();
    let mut means = vec![0.0; c];
    let mut vars = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for ni in 0..n {
            let base = (ni * c + ch) * rest;
            sum += data[base..base + rest].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for ni in 0..n {
            let base = (ni * c + ch) * rest;
            sq += data[base..base + rest]
                .iter()
                .map(|v| (v.to_f64().unwrap() - mean).powi(2))
                .sum::<f64>();
        }
        means[ch] = mean;
        vars[ch] = sq / count;
    }
    (means, vars)
}

/// Batch normalization over (N, C, ...): statistics per channel across the
/// batch and spatial extent. Training mode needs at least two samples and
/// returns the batch moments for the running-statistics update; inference
/// mode normalizes with the supplied running statistics.
pub fn batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    scale: Var,
    shift: Var,
    eps: f64,
    running: Option<(&[f64], &[f64])>,
) -> Result<Var> {
    let (n, c, rest) = split_channels(tape.shape(x), "batch_norm")?;
    let normalized = match running {
        None => {
            if n < 2 {
                return Err(TensorError::Contract(
                    "batch_norm: training mode needs a batch of at least 2".into(),
                ));
            }
            let layout = GroupLayout {
                outer: n,
                groups: c,
                inner: rest,
            };
            tape.standardize(x, layout, T::of(eps))?
        }
        Some((mean, var)) => {
            if mean.len() != c || var.len() != c {
                return Err(TensorError::Shape {
                    op: "batch_norm",
                    lhs: tape.shape(x).to_vec(),
                    rhs: vec![mean.len()],
                });
            }
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let off: Vec<f64> = mean.iter().zip(&inv).map(|(m, s)| -m * s).collect();
            let inv = tape.constant(Tensor::from_f64([c], &inv)?);
            let off = tape.constant(Tensor::from_f64([c], &off)?);
            channel_affine(tape, x, inv, off)?
        }
    };
    channel_affine(tape, normalized, scale, shift)
}

/// Layer normalization over all non-batch axes, per-channel affine.
pub fn layer_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
    group_norm(tape, x, 1, scale, shift, eps)
}

/// Group normalization: channels split into `groups` contiguous groups, each
/// normalized per sample over its channels and spatial extent.
pub fn group_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    groups: usize,
    scale: Var,
    shift: Var,
    eps: f64,
) -> Result<Var> {
    let (n, c, rest) = split_channels(tape.shape(x), "group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(TensorError::Contract(format!(
            "group_norm: {groups} groups do not divide {c} channels"
        )));
    }
    let layout = GroupLayout {
        outer: 1,
        groups: n * groups,
        inner: c / groups * rest,
    };
    let normalized = tape.standardize(x, layout, T::of(eps))?;
    channel_affine(tape, normalized, scale, shift)
}

/// `x W^T + b` with `W` stored as (out, in).
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Inverted dropout: in training mode each activation is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
pub fn dropout<T: Scalar, R: Rng>(tape: &mut Tape<T>, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Contract(format!("dropout: rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let shape = tape.shape(x).to_vec();
    let mask: Vec<T> = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Builds parameters with seeded initialization under a name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data: Vec<f32> = (0..shape.iter().product::<usize>())
            .map(|_| dist.sample(self.rng) as f32)
            .collect();
        self.store.add_param(name, Tensor::new(shape, data).expect("sized"))
    }

    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> ParamId {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data: Vec<f32> = (0..shape.iter().product::<usize>())
            .map(|_| dist.sample(self.rng) as f32)
            .collect();
        self.store.add_param(name, Tensor::new(shape, data).expect("sized"))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Weight-standardization epsilon; `None` uses the raw weight.
    pub standardize: Option<f64>,
}

impl Conv {
    /// Kaiming-normal (fan-out, ReLU gain) initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        standardize: Option<f64>,
    ) -> Self {
        let fan_out = out_channels * kernel * kernel;
        let weight = b.normal(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            (2.0 / fan_out as f64).sqrt(),
        );
        let bias = bias.then(|| b.store.add_param(format!("{name}.bias"), Tensor::zeros([out_channels])));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            standardize,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = match self.standardize {
            Some(eps) => weight_standardize(tape, p[self.weight], eps)?,
            None => p[self.weight],
        };
        let y = tape.conv2d(x, w, self.stride, self.padding)?;
        match self.bias {
            Some(bias) => {
                let b = tape.reshape(p[bias], &[1, self.out_channels, 1, 1])?;
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Uniform initialization in `±1/sqrt(in_features)`.
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, in_features: usize, out_features: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = b.uniform(format!("{name}.weight"), vec![out_features, in_features], bound);
        let bias = bias.then(|| b.uniform(format!("{name}.bias"), vec![out_features], bound));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        linear(tape, x, p[self.weight], self.bias.map(|b| p[b]))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub channels: usize,
    /// Effective group count (group norm only).
    pub groups: usize,
    pub eps: f64,
    affine: Option<(ParamId, ParamId)>,
    running: Option<(BufferId, BufferId)>,
}

impl Norm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, kind: NormKind, channels: usize) -> Result<Self> {
        let groups = match kind {
            NormKind::Group(g) => {
                let g = g.min(channels);
                if !channels.is_multiple_of(g) {
                    return Err(TensorError::Contract(format!(
                        "{name}: {g} groups do not divide {channels} channels"
                    )));
                }
                g
            }
            _ => 1,
        };
        let affine = (kind != NormKind::None).then(|| {
            (
                b.store.add_param(format!("{name}.scale"), Tensor::ones([channels])),
                b.store.add_param(format!("{name}.shift"), Tensor::zeros([channels])),
            )
        });
        let running = (kind == NormKind::Batch).then(|| {
            (
                b.store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
                b.store.add_buffer(format!("{name}.running_var"), Tensor::ones([channels])),
            )
        });
        Ok(Self {
            kind,
            channels,
            groups,
            eps: NORM_EPS,
            affine,
            running,
        })
    }

    pub fn has_running_stats(&self) -> bool {
        self.running.is_some()
    }

    pub fn forward<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        ctx: &mut ForwardCtx<'_, R>,
    ) -> Result<Var> {
        let Some((scale, shift)) = self.affine else { return Ok(x) };
        let (scale, shift) = (p[scale], p[shift]);
        match self.kind {
            NormKind::Batch => {
                let (rm, rv) = self.running.expect("batch norm has running stats");
                match ctx.mode {
                    Mode::Train => {
                        if !ctx.freeze_stats {
                            let (mean, var) = channel_moments(tape.value(x));
                            let count = (tape.value(x).len() / self.channels) as f64;
                            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                            let m = BN_MOMENTUM;
                            for (c, v) in ctx.buffers[rm.0].value.data_mut().iter_mut().enumerate() {
                                *v = ((1.0 - m) * *v as f64 + m * mean[c]) as f32;
                            }
                            for (c, v) in ctx.buffers[rv.0].value.data_mut().iter_mut().enumerate() {
                                *v = ((1.0 - m) * *v as f64 + m * var[c] * unbias) as f32;
                            }
                        }
                        batch_norm(tape, x, scale, shift, self.eps, None)
                    }
                    Mode::Eval => {
                        let mean: Vec<f64> = ctx.buffers[rm.0].value.data().iter().map(|&v| v as f64).collect();
                        let var: Vec<f64> = ctx.buffers[rv.0].value.data().iter().map(|&v| v as f64).collect();
                        batch_norm(tape, x, scale, shift, self.eps, Some((&mean, &var)))
                    }
                }
            }
            NormKind::Layer => layer_norm(tape, x, scale, shift, self.eps),
            NormKind::Group(_) => group_norm(tape, x, self.groups, scale, shift, self.eps),
            NormKind::None => Ok(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn constant_row_standardizes_to_zero() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::<f64>::from_f64([1, 3], &[2.0, 2.0, 2.0]).unwrap());
        let y = weight_standardize(&mut tape, w, WS_EPS).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_element_row_without_eps() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::<f64>::from_f64([1, 2], &[1.0, 3.0]).unwrap());
        let y = weight_standardize(&mut tape, w, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn standardized_rows_have_zero_mean_and_shrunk_variance() {
        let w = random(&[5, 3, 3, 3], 11);
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone());
        let y = weight_standardize(&mut tape, wv, WS_EPS).unwrap();
        let r = 27;
        for row in 0..5 {
            let src = &w.data()[row * r..(row + 1) * r];
            let mu = src.iter().sum::<f64>() / r as f64;
            let var = src.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / r as f64;
            let out = &tape.value(y).data()[row * r..(row + 1) * r];
            let m = out.iter().sum::<f64>() / r as f64;
            let v = out.iter().map(|x| (x - m).powi(2)).sum::<f64>() / r as f64;
            assert!(m.abs() < 1e-6);
            assert!((v - var / (var + WS_EPS)).abs() < 1e-6);
        }
    }

    #[test]
    fn standardizing_twice_is_identity_without_eps() {
        let w = random(&[4, 6], 3);
        let mut tape = Tape::new();
        let wv = tape.constant(w);
        let once = weight_standardize(&mut tape, wv, 0.0).unwrap();
        let twice = weight_standardize(&mut tape, once, 0.0).unwrap();
        for (a, b) in tape.value(once).data().iter().zip(tape.value(twice).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_two_samples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_f64([2, 1], &[1.0, 3.0]).unwrap());
        let s = tape.constant(Tensor::ones([1]));
        let b = tape.constant(Tensor::zeros([1]));
        let y = batch_norm(&mut tape, x, s, b, 0.0, None).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn batch_norm_rejects_single_sample_training() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones([1, 3]));
        let s = tape.constant(Tensor::ones([3]));
        let b = tape.constant(Tensor::zeros([3]));
        assert!(matches!(
            batch_norm(&mut tape, x, s, b, NORM_EPS, None),
            Err(TensorError::Contract(_))
        ));
        // inference mode is fine
        let (m, v) = (vec![0.0; 3], vec![1.0; 3]);
        assert!(batch_norm(&mut tape, x, s, b, NORM_EPS, Some((&m, &v))).is_ok());
    }

    #[test]
    fn layer_norm_leaves_standard_vector_unchanged() {
        let data = [1.0, -1.0, 1.0, -1.0];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_f64([1, 4], &data).unwrap());
        let s = tape.constant(Tensor::ones([4]));
        let b = tape.constant(Tensor::zeros([4]));
        let y = layer_norm(&mut tape, x, s, b, NORM_EPS).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(data) {
            assert!((o - i).abs() < 1e-5, "{o} vs {i}");
        }
        let y = layer_norm(&mut tape, x, s, b, 1e-12).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(data) {
            assert!((o - i).abs() < 1e-6);
        }
    }

    #[test]
    fn group_norm_one_group_equals_direct_layer_norm() {
        let x = random(&[3, 4, 2, 3], 5);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let s = tape.constant(Tensor::ones([4]));
        let b = tape.constant(Tensor::zeros([4]));
        let y = group_norm(&mut tape, xv, 1, s, b, NORM_EPS).unwrap();
        let per = 24;
        for n in 0..3 {
            let src = &x.data()[n * per..(n + 1) * per];
            let mu = src.iter().sum::<f64>() / per as f64;
            let var = src.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / per as f64;
            for (i, v) in src.iter().enumerate() {
                let want = (v - mu) / (var + NORM_EPS).sqrt();
                assert!((tape.value(y).data()[n * per + i] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones([2, 6]));
        let s = tape.constant(Tensor::ones([6]));
        let b = tape.constant(Tensor::zeros([6]));
        assert!(group_norm(&mut tape, x, 4, s, b, NORM_EPS).is_err());
    }

    #[test]
    fn dropout_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[4, 5], 1));
        assert_eq!(dropout(&mut tape, x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut tape, x, 0.1, Mode::Eval, &mut rng).unwrap(), x);
        assert!(dropout(&mut tape, x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones([100_000]));
        let y = dropout(&mut tape, x, 0.1, Mode::Train, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn norm_kind_parsing() {
        assert_eq!("bn".parse::<NormKind>().unwrap(), NormKind::Batch);
        assert_eq!("group:8".parse::<NormKind>().unwrap(), NormKind::Group(8));
        assert_eq!("group".parse::<NormKind>().unwrap(), NormKind::Group(32));
        assert!("group:0".parse::<NormKind>().is_err());
        assert!("instance".parse::<NormKind>().is_err());
        for k in [NormKind::Batch, NormKind::Layer, NormKind::Group(4), NormKind::None] {
            assert_eq!(k.to_string().parse::<NormKind>().unwrap(), k);
        }
    }

    #[test]
    fn group_norm_clamps_to_channel_count() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let n = Norm::new(&mut b, "n", NormKind::Group(32), 8).unwrap();
        assert_eq!(n.groups, 8);
        assert!(!n.has_running_stats());
        assert!(Norm::new(&mut b, "m", NormKind::Group(32), 48).is_err());
        let bn = Norm::new(&mut b, "bn", NormKind::Batch, 8).unwrap();
        assert!(bn.has_running_stats());
    }

    #[test]
    fn normalization_gradients_match_finite_differences() {
        let x = random(&[3, 4, 2, 2], 9);
        let scale = random(&[4], 10);
        let shift = random(&[4], 12);
        let weights = random(&[3, 4, 2, 2], 13);
        let opts = GradCheckOptions::default();
        for which in 0..3 {
            let report = grad_check(
                |tape, v| {
                    let y = match which {
                        0 => batch_norm(tape, v[0], v[1], v[2], NORM_EPS, None)?,
                        1 => layer_norm(tape, v[0], v[1], v[2], NORM_EPS)?,
                        _ => group_norm(tape, v[0], 2, v[1], v[2], NORM_EPS)?,
                    };
                    let y = tape.mul(y, v[3])?;
                    tape.sum_all(y)
                },
                &[x.clone(), scale.clone(), shift.clone(), weights.clone()],
                &opts,
            )
            .unwrap();
            assert!(report.passed(), "norm {which}: {report:?}");
        }
    }

    #[test]
    fn weight_standardized_conv_gradient_reaches_raw_weight() {
        let x = random(&[2, 2, 5, 5], 21);
        let w = random(&[3, 2, 3, 3], 22);
        let report = grad_check(
            |tape, v| {
                let ws = weight_standardize(tape, v[1], WS_EPS)?;
                let y = tape.conv2d(v[0], ws, 2, 1)?;
                let y = tape.sigmoid(y)?;
                tape.sum_all(y)
            },
            &[x, w],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
