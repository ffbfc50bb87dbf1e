//! Encoder, projector and predictor assembly; the online/target pair.
//!
//! The online network is encoder -> projector -> predictor. The target
//! network is encoder -> projector only, starts as a copy of the online
//! weights, and afterwards changes exclusively through [`ModelPair::ema_update`].

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::nn::{Bound, Builder, Conv, ForwardCtx, Linear, Mode, NamedTensor, Norm, NormKind, ParamStore, WS_EPS};
use crate::rng;
use crate::tensor::{Result, Scalar, Tape, TensorError, Var};

pub const DEFAULT_TAU: f64 = 0.996;
pub const RESNET_WIDTH: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 18-layer residual network (basic blocks, widths 64-512).
    ResNet18,
    /// Four stride-2 3x3 conv stages and global average pooling. A desk-scale
    /// stand-in so end-to-end runs finish in minutes.
    TinyCnn,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::ResNet18 => "resnet18",
            Preset::TinyCnn => "tiny-cnn",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "resnet18" | "resnet18-like" => Ok(Preset::ResNet18),
            "tiny-cnn" => Ok(Preset::TinyCnn),
            other => Err(format!("unknown preset `{other}` (resnet18, tiny-cnn)")),
        }
    }
}

/// Where normalization layers are inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPlacement {
    Everywhere,
    EncoderOnly,
    None,
}

impl fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormPlacement::Everywhere => "everywhere",
            NormPlacement::EncoderOnly => "encoder-only",
            NormPlacement::None => "none",
        })
    }
}

impl FromStr for NormPlacement {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "everywhere" => Ok(NormPlacement::Everywhere),
            "encoder-only" => Ok(NormPlacement::EncoderOnly),
            "none" => Ok(NormPlacement::None),
            other => Err(format!("unknown norm placement `{other}` (everywhere, encoder-only, none)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub preset: Preset,
    pub norm: NormKind,
    /// Weight standardization on every convolution (independent of `norm`).
    pub weight_standardize: bool,
    pub placement: NormPlacement,
    /// Dropout rate between encoder stages.
    pub dropout: f64,
    /// Representation width. Fixed at 512 for the residual preset.
    pub width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            preset: Preset::TinyCnn,
            norm: NormKind::Batch,
            weight_standardize: false,
            placement: NormPlacement::Everywhere,
            dropout: 0.0,
            width: 64,
        }
    }
}

impl EncoderConfig {
    pub fn representation_width(&self) -> usize {
        match self.preset {
            Preset::ResNet18 => RESNET_WIDTH,
            Preset::TinyCnn => self.width,
        }
    }

    fn encoder_norm(&self) -> NormKind {
        match self.placement {
            NormPlacement::None => NormKind::None,
            _ => self.norm,
        }
    }

    fn head_norm(&self) -> NormKind {
        match self.placement {
            NormPlacement::Everywhere => self.norm,
            _ => NormKind::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TensorError::Contract(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.preset == Preset::TinyCnn && (self.width < 8 || !self.width.is_multiple_of(8)) {
            return Err(TensorError::Contract(format!(
                "tiny-cnn width must be a positive multiple of 8, got {}",
                self.width
            )));
        }
        Ok(())
    }
}

/// conv -> norm -> relu
#[derive(Clone, Debug)]
struct ConvUnit {
    conv: Conv,
    norm: Norm,
}

impl ConvUnit {
    fn forward<T: Scalar, R: Rng>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, ctx: &mut ForwardCtx<'_, R>) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        self.norm.forward(tape, p, y, ctx)
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    first: ConvUnit,
    second: ConvUnit,
    shortcut: Option<ConvUnit>,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Layer {
    Unit(ConvUnit),
    MaxPool { kernel: usize, stride: usize, padding: usize },
    Residual(BasicBlock),
    Dropout(f64),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    layers: Vec<Layer>,
    width: usize,
}

struct EncoderBuilder<'c> {
    config: &'c EncoderConfig,
    norm: NormKind,
}

impl EncoderBuilder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn unit<R: Rng>(
        &self,
        b: &mut Builder<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ConvUnit> {
        let ws = self.config.weight_standardize.then_some(WS_EPS);
        let bias = self.norm == NormKind::None;
        let conv = Conv::new(b, &format!("{name}.conv"), cin, cout, k, stride, pad, bias, ws);
        let norm = Norm::new(b, &format!("{name}.norm"), self.norm, cout)?;
        Ok(ConvUnit { conv, norm })
    }
}

impl Encoder {
    fn build<R: Rng>(b: &mut Builder<'_, R>, config: &EncoderConfig) -> Result<Self> {
        let eb = EncoderBuilder {
            config,
            norm: config.encoder_norm(),
        };
        let mut layers = Vec::new();
        let dropout = config.dropout;
        match config.preset {
            Preset::TinyCnn => {
                let w = config.width;
                let widths = [w / 8, w / 4, w / 2, w];
                let mut cin = 3;
                for (i, &cout) in widths.iter().enumerate() {
                    if i > 0 && dropout > 0.0 {
                        layers.push(Layer::Dropout(dropout));
                    }
                    layers.push(Layer::Unit(eb.unit(b, &format!("encoder.stage{i}"), cin, cout, 3, 2, 1)?));
                    cin = cout;
                }
            }
            Preset::ResNet18 => {
                layers.push(Layer::Unit(eb.unit(b, "encoder.stem", 3, 64, 7, 2, 3)?));
                layers.push(Layer::MaxPool {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                });
                let mut cin = 64;
                for (stage, &cout) in [64usize, 128, 256, 512].iter().enumerate() {
                    if stage > 0 && dropout > 0.0 {
                        layers.push(Layer::Dropout(dropout));
                    }
                    for block in 0..2 {
                        let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                        let name = format!("encoder.layer{}.{block}", stage + 1);
                        let first = eb.unit(b, &format!("{name}.a"), cin, cout, 3, stride, 1)?;
                        let second = eb.unit(b, &format!("{name}.b"), cout, cout, 3, 1, 1)?;
                        let shortcut = (stride != 1 || cin != cout)
                            .then(|| eb.unit(b, &format!("{name}.down"), cin, cout, 1, stride, 0))
                            .transpose()?;
                        layers.push(Layer::Residual(BasicBlock { first, second, shortcut }));
                        cin = cout;
                    }
                }
            }
        }
        Ok(Self {
            layers,
            width: config.representation_width(),
        })
    }

    /// (N, 3, H, W) -> (N, width)
    pub fn forward<T: Scalar, R: Rng>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, ctx: &mut ForwardCtx<'_, R>) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(TensorError::Shape {
                op: "encoder",
                lhs: shape.to_vec(),
                rhs: vec![0, 3, 0, 0],
            });
        }
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Unit(unit) => {
                    let y = unit.forward(tape, p, h, ctx)?;
                    tape.relu(y)?
                }
                Layer::MaxPool { kernel, stride, padding } => tape.max_pool2d(h, *kernel, *stride, *padding)?,
                Layer::Residual(block) => {
                    let y = block.first.forward(tape, p, h, ctx)?;
                    let y = tape.relu(y)?;
                    let y = block.second.forward(tape, p, y, ctx)?;
                    let skip = match &block.shortcut {
                        Some(unit) => unit.forward(tape, p, h, ctx)?,
                        None => h,
                    };
                    let y = tape.add(y, skip)?;
                    tape.relu(y)?
                }
                Layer::Dropout(rate) => match ctx.rng.as_deref_mut() {
                    Some(rng) => crate::nn::dropout(tape, h, *rate, ctx.mode, rng)?,
                    None => h,
                },
            };
        }
        let pooled = tape.mean(h, &[2, 3], false)?;
        debug_assert_eq!(tape.shape(pooled)[1], self.width);
        Ok(pooled)
    }
}

/// Two-layer perceptron: linear -> norm -> relu -> linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    first: Linear,
    norm: Norm,
    second: Linear,
}

impl Mlp {
    fn build<R: Rng>(b: &mut Builder<'_, R>, name: &str, width: usize, norm: NormKind) -> Result<Self> {
        let first = Linear::new(b, &format!("{name}.fc1"), width, width, norm == NormKind::None);
        let norm = Norm::new(b, &format!("{name}.norm"), norm, width)?;
        let second = Linear::new(b, &format!("{name}.fc2"), width, width, true);
        Ok(Self { first, norm, second })
    }

    pub fn forward<T: Scalar, R: Rng>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, ctx: &mut ForwardCtx<'_, R>) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = self.norm.forward(tape, p, h, ctx)?;
        let h = tape.relu(h)?;
        self.second.forward(tape, p, h)
    }

    /// Parameters of the output layer (used to build degenerate heads in tests).
    pub fn output_layer(&self) -> &Linear {
        &self.second
    }
}

/// One branch of the pair: parameters plus architecture.
#[derive(Clone, Debug)]
pub struct Network {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub projector: Mlp,
    pub predictor: Option<Mlp>,
}

/// Outputs of one online pass.
#[derive(Clone, Copy, Debug)]
pub struct OnlineOutput {
    /// Encoder representation (N, width).
    pub representation: Var,
    /// Projection (N, width).
    pub projection: Var,
    /// Predictor output (N, width).
    pub prediction: Var,
}

impl Network {
    fn build<R: Rng>(config: &EncoderConfig, with_predictor: bool, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut b = Builder { store: &mut store, rng };
        let encoder = Encoder::build(&mut b, config)?;
        let width = config.representation_width();
        let projector = Mlp::build(&mut b, "projector", width, config.head_norm())?;
        let predictor = with_predictor
            .then(|| Mlp::build(&mut b, "predictor", width, config.head_norm()))
            .transpose()?;
        Ok(Self {
            store,
            encoder,
            projector,
            predictor,
        })
    }

    /// Online-style network (with predictor) on its own; used by tools that
    /// only need an encoder.
    pub fn new_online(config: &EncoderConfig, seed: u64) -> Result<Self> {
        Self::build(config, true, &mut rng::seeded(seed))
    }

    /// Forward context over this network's buffers.
    pub fn ctx<'a, R: Rng>(&'a mut self, mode: Mode, rng: Option<&'a mut R>) -> ForwardCtx<'a, R> {
        ctx(&mut self.store, mode, rng)
    }

    pub fn encoder_width(&self) -> usize {
        self.encoder.width
    }

    /// (name, shape, element count) for every trainable tensor.
    pub fn param_table(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.store
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.len()))
            .collect()
    }
}

/// Online parameters θ (encoder, projector, predictor), target parameters ξ
/// (encoder, projector) and the EMA decay τ.
#[derive(Clone, Debug)]
pub struct ModelPair {
    pub config: EncoderConfig,
    pub online: Network,
    pub target: Network,
    pub tau: f64,
    /// Keep batch-norm running statistics fixed during training-mode passes.
    pub freeze_stats: bool,
}

impl ModelPair {
    pub fn new(config: &EncoderConfig, tau: f64, seed: u64) -> Result<Self> {
        check_tau(tau)?;
        let mut rng = rng::seeded(seed);
        let online = Network::build(config, true, &mut rng)?;
        let mut target = Network::build(config, false, &mut rng)?;
        copy_matching(&online.store, &mut target.store)?;
        Ok(Self {
            config: config.clone(),
            online,
            target,
            tau,
            freeze_stats: false,
        })
    }

    /// Runs the online branch on `v`. `p` must come from binding
    /// `self.online.store`.
    pub fn forward_online<T: Scalar, R: Rng>(
        &mut self,
        tape: &mut Tape<T>,
        p: &Bound,
        v: Var,
        mode: Mode,
        rng: Option<&mut R>,
    ) -> Result<OnlineOutput> {
        let Network {
            store,
            encoder,
            projector,
            predictor,
        } = &mut self.online;
        let predictor = predictor.as_ref().expect("online network has a predictor");
        let mut ctx = ctx(store, mode, rng);
        ctx.freeze_stats = self.freeze_stats;
        let representation = encoder.forward(tape, p, v, &mut ctx)?;
        let projection = projector.forward(tape, p, representation, &mut ctx)?;
        let prediction = predictor.forward(tape, p, projection, &mut ctx)?;
        Ok(OnlineOutput {
            representation,
            projection,
            prediction,
        })
    }

    /// Runs the target branch on `v` and cuts the gradient at its output.
    pub fn forward_target<T: Scalar>(&mut self, tape: &mut Tape<T>, p: &Bound, v: Var, mode: Mode) -> Result<Var> {
        let Network {
            store,
            encoder,
            projector,
            ..
        } = &mut self.target;
        let mut ctx = ctx::<rng::Rng>(store, mode, None);
        ctx.freeze_stats = self.freeze_stats;
        let y = encoder.forward(tape, p, v, &mut ctx)?;
        let z = projector.forward(tape, p, y, &mut ctx)?;
        tape.stop_gradient(z)
    }

    /// ξ ← τ·ξ + (1 − τ)·θ for every target parameter.
    pub fn ema_update(&mut self) -> Result<()> {
        check_tau(self.tau)?;
        let tau = self.tau;
        let online = self.online.store.params();
        for (t, o) in self.target.store.params_mut().iter_mut().zip(online) {
            debug_assert_eq!(t.name, o.name);
            for (tv, &ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
                *tv = (tau * *tv as f64 + (1.0 - tau) * ov as f64) as f32;
            }
        }
        Ok(())
    }

    /// Online parameters shared with the target (everything but the predictor).
    pub fn shared_online_params(&self) -> &[NamedTensor] {
        &self.online.store.params()[..self.target.store.params().len()]
    }
}

fn ctx<'a, R: Rng>(store: &'a mut ParamStore, mode: Mode, rng: Option<&'a mut R>) -> ForwardCtx<'a, R> {
    ForwardCtx {
        mode,
        buffers: store.buffers_mut(),
        freeze_stats: false,
        rng,
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(TensorError::Contract(format!("EMA decay must be in [0, 1], got {tau}")))
    }
}

/// Copies every tensor of `dst` from the same-named tensor of `src`.
pub(crate) fn copy_matching(src: &ParamStore, dst: &mut ParamStore) -> Result<()> {
    fn copy(src: &[NamedTensor], dst: &mut [NamedTensor]) -> Result<()> {
        for d in dst.iter_mut() {
            let s = src
                .iter()
                .find(|s| s.name == d.name)
                .ok_or_else(|| TensorError::Contract(format!("no source tensor named {}", d.name)))?;
            if s.value.shape() != d.value.shape() {
                return Err(TensorError::Shape {
                    op: "copy_matching",
                    lhs: s.value.shape().to_vec(),
                    rhs: d.value.shape().to_vec(),
                });
            }
            d.value = s.value.clone();
        }
        Ok(())
    }
    copy(src.params(), dst.params_mut())?;
    copy(src.buffers(), dst.buffers_mut())
}
