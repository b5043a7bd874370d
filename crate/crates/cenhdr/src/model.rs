//! The CEN-HDR network: a stride-2 encoder, spatial-channel reference
//! attention over the non-reference frames, a reference-weighted merger, and
//! a sub-pixel (pixel shuffle) decoder with a full-resolution skip from the
//! reference frame's first encoder tap.
//!
//! The graph is defined once over the [`Graph`] executor abstraction and runs
//! either immediately for inference or on a [`Tape`] for training.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Eval, Graph};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::{Element, Shape, Tensor, TensorError, TensorOf};

/// Which attention module sits between encoder and merger.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AttentionVariant {
    #[serde(rename = "scram")]
    Scram,
    #[serde(rename = "scram_spatial_only")]
    SpatialOnly,
    #[serde(rename = "scram_channel_only")]
    ChannelOnly,
    #[serde(rename = "ahdrnet_like")]
    AhdrnetLike,
    #[serde(rename = "none")]
    None,
}

impl AttentionVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scram" => Some(Self::Scram),
            "scram_spatial_only" => Some(Self::SpatialOnly),
            "scram_channel_only" => Some(Self::ChannelOnly),
            "ahdrnet_like" => Some(Self::AhdrnetLike),
            "none" => Some(Self::None),
            _ => Option::None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Scram => "scram",
            Self::SpatialOnly => "scram_spatial_only",
            Self::ChannelOnly => "scram_channel_only",
            Self::AhdrnetLike => "ahdrnet_like",
            Self::None => "none",
        }
    }

    fn has_spatial(self) -> bool {
        matches!(self, Self::Scram | Self::SpatialOnly)
    }

    fn has_channel(self) -> bool {
        matches!(self, Self::Scram | Self::ChannelOnly)
    }
}

/// Architecture hyperparameters.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel widths of the two encoder convolutions.
    pub encoder_channels: (usize, usize),
    /// Channel width of the merge block (also the pixel-shuffle input width).
    pub merge_channels: usize,
    /// Width of the attention spatial branch after the pointwise reduction.
    pub scram_spatial_channels: usize,
    /// Hidden sizes of the attention channel-branch MLP.
    pub scram_hidden: (usize, usize, usize),
    /// One attention weight set shared by both non-reference frames.
    pub scram_shared_across_frames: bool,
    /// One `conv_M1` weight set shared by all three frames.
    pub conv_m1_shared: bool,
    /// Pixel-shuffle upscale factor; the canonical model uses 2.
    pub upscale_factor: usize,
    /// Exponent of the LDR-to-HDR gamma projection.
    pub gamma: f64,
    pub attention: AttentionVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_channels: (16, 32),
            merge_channels: 64,
            scram_spatial_channels: 21,
            scram_hidden: (120, 120, 120),
            scram_shared_across_frames: false,
            conv_m1_shared: true,
            upscale_factor: 2,
            gamma: 2.2,
            attention: AttentionVariant::Scram,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let (e1, e2) = self.encoder_channels;
        if e1 < 1 || e2 < 1 {
            return Err(ModelError::InvalidConfig("encoder widths must be >= 1".into()));
        }
        if self.merge_channels < 1 {
            return Err(ModelError::InvalidConfig("merge width must be >= 1".into()));
        }
        if self.scram_spatial_channels < 1 {
            return Err(ModelError::InvalidConfig(
                "scram_spatial_channels must be >= 1".into(),
            ));
        }
        let (h1, h2, h3) = self.scram_hidden;
        if h1 < 1 || h2 < 1 || h3 < 1 {
            return Err(ModelError::InvalidConfig("scram hidden sizes must be >= 1".into()));
        }
        if self.upscale_factor != 2 {
            return Err(ModelError::InvalidConfig(
                "upscale_factor must be 2: the encoder halves the resolution once".into(),
            ));
        }
        let r2 = self.upscale_factor * self.upscale_factor;
        if self.merge_channels != r2 * e1 {
            return Err(ModelError::InvalidConfig(format!(
                "merge width {} must equal upscale^2 * first encoder width ({} * {}) so the \
                 decoder skip connection lines up",
                self.merge_channels, r2, e1
            )));
        }
        Ok(())
    }

    /// Channel count entering the attention module (both frames concatenated).
    fn attention_in(&self) -> usize {
        2 * self.encoder_channels.1
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing weight tensor `{name}`")]
    MissingWeight { name: String },
    #[error("weight `{name}` has shape {got}, expected {expected}")]
    WeightShape { name: String, expected: Shape, got: Shape },
    #[error("attention variant `none` defines no attention weights")]
    NoAttention,
    #[error("encoder needs even spatial dims, got {h}x{w}; reflection-pad the input first")]
    OddInput { h: usize, w: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The two frames the attention module is computed for.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NonRefFrame {
    Under,
    Over,
}

impl NonRefFrame {
    /// Bracket position: the under-exposed frame is 1, the over-exposed is 3.
    pub fn index(self) -> usize {
        match self {
            NonRefFrame::Under => 1,
            NonRefFrame::Over => 3,
        }
    }
}

/// Bracket position of a frame; the middle exposure is the reference.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Frame {
    Under,
    Reference,
    Over,
}

// ---------------------------------------------------------------------------
// Layer table
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum LayerKind {
    /// k x k convolution.
    Conv { c_in: usize, c_out: usize, k: usize },
    /// Fully connected layer on channel vectors.
    Fc { c_in: usize, c_out: usize },
}

/// Resolution class of a layer's output, relative to the network input.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum OutputRes {
    Full,
    Half,
    Vector,
}

/// One named weight-carrying layer: enough to initialize it, count its
/// parameters, and count its multiply-accumulates at a given resolution.
#[derive(Clone, Debug)]
pub(crate) struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub out_res: OutputRes,
    /// Applications per forward pass (weight sharing raises this above 1).
    pub apps: u64,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Shape {
        match self.kind {
            LayerKind::Conv { c_in, c_out, k } => Shape::new(c_out, c_in, k, k),
            LayerKind::Fc { c_in, c_out } => Shape::new(c_out, c_in, 1, 1),
        }
    }

    pub fn bias_shape(&self) -> Shape {
        let c_out = match self.kind {
            LayerKind::Conv { c_out, .. } | LayerKind::Fc { c_out, .. } => c_out,
        };
        Shape::new(1, c_out, 1, 1)
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { c_in, k, .. } => c_in * k * k,
            LayerKind::Fc { c_in, .. } => c_in,
        }
    }
}

fn attention_instances(config: &ModelConfig) -> Vec<(String, u64)> {
    if config.scram_shared_across_frames {
        vec![("scram.shared".to_string(), 2)]
    } else {
        vec![("scram.1".to_string(), 1), ("scram.3".to_string(), 1)]
    }
}

/// Scram weight prefix used for a given non-reference frame.
fn scram_prefix(config: &ModelConfig, frame: NonRefFrame) -> String {
    if config.scram_shared_across_frames {
        "scram.shared".to_string()
    } else {
        format!("scram.{}", frame.index())
    }
}

/// conv_M1 weight name used for a given frame.
fn conv_m1_name(config: &ModelConfig, frame: Frame) -> String {
    if config.conv_m1_shared {
        "conv_M1".to_string()
    } else {
        let idx = match frame {
            Frame::Under => 1,
            Frame::Reference => 2,
            Frame::Over => 3,
        };
        format!("conv_M1.{idx}")
    }
}

/// Every weight-carrying layer of the configured architecture, in
/// initialization order.
pub(crate) fn layer_specs(config: &ModelConfig) -> Vec<LayerSpec> {
    let (e1, e2) = config.encoder_channels;
    let m = config.merge_channels;
    let sc = config.scram_spatial_channels;
    let (h1, h2, h3) = config.scram_hidden;
    let x_in = config.attention_in();
    let conv = |name: &str, c_in, c_out, k, out_res, apps| LayerSpec {
        name: name.to_string(),
        kind: LayerKind::Conv { c_in, c_out, k },
        out_res,
        apps,
    };
    let fc = |name: &str, c_in, c_out, apps| LayerSpec {
        name: name.to_string(),
        kind: LayerKind::Fc { c_in, c_out },
        out_res: OutputRes::Vector,
        apps,
    };

    let mut specs = vec![
        conv("conv_E1", 6, e1, 3, OutputRes::Full, 3),
        conv("conv_E2", e1, e2, 3, OutputRes::Half, 3),
    ];

    for (prefix, apps) in attention_instances(config) {
        match config.attention {
            AttentionVariant::AhdrnetLike => {
                specs.push(conv(&format!("{prefix}.ahdr.conv1"), x_in, e2, 3, OutputRes::Half, apps));
                specs.push(conv(&format!("{prefix}.ahdr.conv2"), e2, e2, 3, OutputRes::Half, apps));
            }
            AttentionVariant::None => {}
            variant => {
                if variant.has_spatial() {
                    specs.push(conv(&format!("{prefix}.spatial.reduce"), x_in, sc, 1, OutputRes::Half, apps));
                    specs.push(conv(&format!("{prefix}.spatial.dil1"), sc, sc, 3, OutputRes::Half, apps));
                    specs.push(conv(&format!("{prefix}.spatial.dil2"), sc, sc, 3, OutputRes::Half, apps));
                    specs.push(conv(&format!("{prefix}.spatial.dil3"), sc, sc, 3, OutputRes::Half, apps));
                    specs.push(conv(&format!("{prefix}.spatial.project"), sc, 1, 1, OutputRes::Half, apps));
                }
                if variant.has_channel() {
                    specs.push(fc(&format!("{prefix}.channel.fc1"), x_in, h1, apps));
                    specs.push(fc(&format!("{prefix}.channel.fc2"), h1, h2, apps));
                    specs.push(fc(&format!("{prefix}.channel.fc3"), h2, h3, apps));
                    specs.push(fc(&format!("{prefix}.channel.fc4"), h3, e2, apps));
                }
            }
        }
    }

    if config.conv_m1_shared {
        specs.push(conv("conv_M1", e2, m, 3, OutputRes::Half, 3));
    } else {
        for idx in 1..=3 {
            specs.push(conv(&format!("conv_M1.{idx}"), e2, m, 3, OutputRes::Half, 1));
        }
    }
    specs.push(conv("conv_M2", 2 * m, m, 3, OutputRes::Half, 1));
    specs.push(conv("conv_M3", m, m, 3, OutputRes::Half, 1));
    specs.push(conv("conv_M4", m, m, 3, OutputRes::Half, 1));

    let r2 = config.upscale_factor * config.upscale_factor;
    specs.push(conv("conv_D", m / r2, 3, 3, OutputRes::Full, 1));
    specs
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Named parameter tensors. Keys are `<layer>.weight` / `<layer>.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightsOf<T> {
    tensors: BTreeMap<String, TensorOf<T>>,
}

pub type ModelWeights = WeightsOf<f32>;

impl<T: Element> Default for WeightsOf<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> WeightsOf<T> {
    pub fn new() -> Self {
        WeightsOf { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: TensorOf<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&TensorOf<T>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorOf<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> u64 {
        self.tensors.values().map(|t| t.shape().len() as u64).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, TensorOf<T>> {
        &self.tensors
    }

    pub fn as_map_mut(&mut self) -> &mut BTreeMap<String, TensorOf<T>> {
        &mut self.tensors
    }

    pub fn cast<U: Element>(&self) -> WeightsOf<U> {
        WeightsOf {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Initializes all layers of the configured architecture: Kaiming-uniform
/// fan-in for weights, zero biases, deterministically from the seed.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = ModelWeights::new();
    for spec in layer_specs(config) {
        let bound = (6.0 / spec.fan_in() as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-bound, bound);
        let ws = spec.weight_shape();
        let data: Vec<f32> = (0..ws.len()).map(|_| dist.sample(&mut rng)).collect();
        weights.insert(format!("{}.weight", spec.name), Tensor::new(ws, data)?);
        weights.insert(format!("{}.bias", spec.name), Tensor::zeros(spec.bias_shape()));
    }
    Ok(weights)
}

// ---------------------------------------------------------------------------
// Graph definition
// ---------------------------------------------------------------------------

/// Weight and bias handles bound into an executor, keyed by layer name.
pub struct Bound<R> {
    map: BTreeMap<String, (R, R)>,
}

impl<R: Clone> Bound<R> {
    fn layer(&self, name: &str) -> Result<(R, R), ModelError> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| ModelError::MissingWeight { name: name.to_string() })
    }
}

/// Binds weights into any executor, checking names and shapes against the
/// configured architecture. On a [`Tape`] the tensors are registered as
/// trainable parameters via the tape-specific [`bind_trainable`].
pub fn bind<T: Element, G: Graph<T>>(
    g: &mut G,
    config: &ModelConfig,
    weights: &WeightsOf<T>,
) -> Result<Bound<G::Ref>, ModelError> {
    bind_with(config, weights, |_, t| g.constant(t))
}

/// Binds weights as named trainable parameters on a tape.
pub fn bind_trainable<T: Element>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    weights: &WeightsOf<T>,
) -> Result<Bound<crate::tape::NodeId>, ModelError> {
    bind_with(config, weights, |name, t| tape.param(name, t))
}

fn bind_with<T: Element, R>(
    config: &ModelConfig,
    weights: &WeightsOf<T>,
    mut register: impl FnMut(String, TensorOf<T>) -> R,
) -> Result<Bound<R>, ModelError> {
    config.validate()?;
    let mut map = BTreeMap::new();
    for spec in layer_specs(config) {
        let fetch = |suffix: &str, expected: Shape| -> Result<TensorOf<T>, ModelError> {
            let key = format!("{}.{suffix}", spec.name);
            let tensor = weights
                .get(&key)
                .ok_or_else(|| ModelError::MissingWeight { name: key.clone() })?;
            if tensor.shape() != expected {
                return Err(ModelError::WeightShape {
                    name: key,
                    expected,
                    got: tensor.shape(),
                });
            }
            Ok(tensor.clone())
        };
        let w = fetch("weight", spec.weight_shape())?;
        let b = fetch("bias", spec.bias_shape())?;
        let wr = register(format!("{}.weight", spec.name), w);
        let br = register(format!("{}.bias", spec.name), b);
        map.insert(spec.name.clone(), (wr, br));
    }
    Ok(Bound { map })
}

fn conv_layer<T: Element, G: Graph<T>>(
    g: &mut G,
    bound: &Bound<G::Ref>,
    name: &str,
    x: &G::Ref,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<G::Ref, ModelError> {
    let (w, b) = bound.layer(name)?;
    Ok(g.conv2d(x, &w, &b, stride, padding, dilation)?)
}

fn fc_layer<T: Element, G: Graph<T>>(
    g: &mut G,
    bound: &Bound<G::Ref>,
    name: &str,
    x: &G::Ref,
) -> Result<G::Ref, ModelError> {
    let (w, b) = bound.layer(name)?;
    Ok(g.linear(x, &w, &b)?)
}

/// Encoder: `S_i = relu(conv_E1(L_i))` at full resolution, then
/// `F_i = conv_E2(S_i)` at half resolution. Returns `(S_i, F_i)` so the
/// reference tap stays available for the decoder skip.
pub fn encode_graph<T: Element, G: Graph<T>>(
    g: &mut G,
    bound: &Bound<G::Ref>,
    l: &G::Ref,
) -> Result<(G::Ref, G::Ref), ModelError> {
    let s = g.shape(l);
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(ModelError::OddInput { h: s.h, w: s.w });
    }
    let pre = conv_layer(g, bound, "conv_E1", l, 1, 1, 1)?;
    let s_tap = g.relu(&pre);
    let f = conv_layer(g, bound, "conv_E2", &s_tap, 2, 1, 1)?;
    Ok((s_tap, f))
}

/// Attention over one non-reference frame. Consumes the concatenation of the
/// frame's features with the reference features and produces a mask in
/// `(0, 1)` with the same shape as the frame features.
pub fn attention_graph<T: Element, G: Graph<T>>(
    g: &mut G,
    config: &ModelConfig,
    bound: &Bound<G::Ref>,
    frame: NonRefFrame,
    f_i: &G::Ref,
    f_ref: &G::Ref,
) -> Result<G::Ref, ModelError> {
    if config.attention == AttentionVariant::None {
        return Err(ModelError::NoAttention);
    }
    let prefix = scram_prefix(config, frame);
    let e2 = config.encoder_channels.1;
    let x = g.concat_channels(&[f_i.clone(), f_ref.clone()])?;

    if config.attention == AttentionVariant::AhdrnetLike {
        let c1 = conv_layer(g, bound, &format!("{prefix}.ahdr.conv1"), &x, 1, 1, 1)?;
        let c1 = g.relu(&c1);
        let c2 = conv_layer(g, bound, &format!("{prefix}.ahdr.conv2"), &c1, 1, 1, 1)?;
        return Ok(g.sigmoid(&c2));
    }

    let spatial = if config.attention.has_spatial() {
        let r = conv_layer(g, bound, &format!("{prefix}.spatial.reduce"), &x, 1, 0, 1)?;
        let r = g.relu(&r);
        let d1 = conv_layer(g, bound, &format!("{prefix}.spatial.dil1"), &r, 1, 2, 2)?;
        let d1 = g.relu(&d1);
        let d2 = conv_layer(g, bound, &format!("{prefix}.spatial.dil2"), &d1, 1, 2, 2)?;
        let d2 = g.relu(&d2);
        let d3 = conv_layer(g, bound, &format!("{prefix}.spatial.dil3"), &d2, 1, 2, 2)?;
        let map = conv_layer(g, bound, &format!("{prefix}.spatial.project"), &d3, 1, 0, 1)?;
        Some(g.expand_channels(&map, e2)?)
    } else {
        Option::None
    };

    let channel = if config.attention.has_channel() {
        let v = g.global_avg_pool(&x)?;
        let v = fc_layer(g, bound, &format!("{prefix}.channel.fc1"), &v)?;
        let v = g.relu(&v);
        let v = fc_layer(g, bound, &format!("{prefix}.channel.fc2"), &v)?;
        let v = g.relu(&v);
        let v = fc_layer(g, bound, &format!("{prefix}.channel.fc3"), &v)?;
        let v = g.relu(&v);
        Some(fc_layer(g, bound, &format!("{prefix}.channel.fc4"), &v)?)
    } else {
        Option::None
    };

    let pre = match (spatial, channel) {
        (Some(s), Some(c)) => g.add(&s, &c)?,
        (Some(s), Option::None) => s,
        (Option::None, Some(c)) => {
            // lift the channel vector to the spatial extent of the features
            let fs = g.shape(f_i);
            let ones = g.constant(TensorOf::full(fs, T::one()));
            g.mul(&ones, &c)?
        }
        (Option::None, Option::None) => unreachable!("variant validated above"),
    };
    Ok(g.sigmoid(&pre))
}

/// Merger: per-frame `conv_M1`, non-reference fusion through `conv_M2`, and
/// the reference-plus-non-reference trunk through `conv_M3`/`conv_M4`. Each
/// merge convolution is followed by relu.
pub fn merge_graph<T: Element, G: Graph<T>>(
    g: &mut G,
    config: &ModelConfig,
    bound: &Bound<G::Ref>,
    f1: &G::Ref,
    f2: &G::Ref,
    f3: &G::Ref,
) -> Result<G::Ref, ModelError> {
    let m1 = conv_layer(g, bound, &conv_m1_name(config, Frame::Under), f1, 1, 1, 1)?;
    let m1 = g.relu(&m1);
    let m2 = conv_layer(g, bound, &conv_m1_name(config, Frame::Reference), f2, 1, 1, 1)?;
    let m2 = g.relu(&m2);
    let m3 = conv_layer(g, bound, &conv_m1_name(config, Frame::Over), f3, 1, 1, 1)?;
    let m3 = g.relu(&m3);

    let nonref_cat = g.concat_channels(&[m1, m3])?;
    let nonref = conv_layer(g, bound, "conv_M2", &nonref_cat, 1, 1, 1)?;
    let nonref = g.relu(&nonref);

    let trunk = g.add(&m2, &nonref)?;
    let trunk = conv_layer(g, bound, "conv_M3", &trunk, 1, 1, 1)?;
    let trunk = g.relu(&trunk);
    let merged = conv_layer(g, bound, "conv_M4", &trunk, 1, 1, 1)?;
    Ok(g.relu(&merged))
}

/// Decoder: pixel shuffle back to full resolution, add the reference skip,
/// and squash through `conv_D` + sigmoid.
pub fn decode_graph<T: Element, G: Graph<T>>(
    g: &mut G,
    config: &ModelConfig,
    bound: &Bound<G::Ref>,
    merged: &G::Ref,
    s_ref: &G::Ref,
) -> Result<G::Ref, ModelError> {
    let d = g.pixel_shuffle(merged, config.upscale_factor)?;
    let skip = g.add(&d, s_ref)?;
    let out = conv_layer(g, bound, "conv_D", &skip, 1, 1, 1)?;
    Ok(g.sigmoid(&out))
}

/// Full forward pass over three `(n, 6, H, W)` inputs.
pub fn forward_graph<T: Element, G: Graph<T>>(
    g: &mut G,
    config: &ModelConfig,
    bound: &Bound<G::Ref>,
    l1: &G::Ref,
    l2: &G::Ref,
    l3: &G::Ref,
) -> Result<G::Ref, ModelError> {
    let (_, f1) = encode_graph(g, bound, l1)?;
    let (s_ref, f2) = encode_graph(g, bound, l2)?;
    let (_, f3) = encode_graph(g, bound, l3)?;

    let (f1p, f3p) = if config.attention == AttentionVariant::None {
        (f1, f3)
    } else {
        let a1 = attention_graph(g, config, bound, NonRefFrame::Under, &f1, &f2)?;
        let a3 = attention_graph(g, config, bound, NonRefFrame::Over, &f3, &f2)?;
        (g.mul(&f1, &a1)?, g.mul(&f3, &a3)?)
    };
    // reference features pass through unweighted
    let merged = merge_graph(g, config, bound, &f1p, &f2, &f3p)?;
    decode_graph(g, config, bound, &merged, &s_ref)
}

// ---------------------------------------------------------------------------
// Immediate-mode entry points
// ---------------------------------------------------------------------------

fn unwrap_rc<T: Element>(r: std::rc::Rc<TensorOf<T>>) -> TensorOf<T> {
    std::rc::Rc::try_unwrap(r).unwrap_or_else(|rc| (*rc).clone())
}

/// Encoder taps for one frame: `(S_i, F_i)`.
pub fn encode<T: Element>(
    config: &ModelConfig,
    weights: &WeightsOf<T>,
    l: &TensorOf<T>,
) -> Result<(TensorOf<T>, TensorOf<T>), ModelError> {
    let mut g = Eval::new();
    let bound = bind(&mut g, config, weights)?;
    let l = Graph::<T>::constant(&mut g, l.clone());
    let (s, f) = encode_graph(&mut g, &bound, &l)?;
    Ok((unwrap_rc(s), unwrap_rc(f)))
}

/// Attention mask for one non-reference frame.
pub fn scram<T: Element>(
    config: &ModelConfig,
    weights: &WeightsOf<T>,
    f_i: &TensorOf<T>,
    f_ref: &TensorOf<T>,
    frame: NonRefFrame,
) -> Result<TensorOf<T>, ModelError> {
    let mut g = Eval::new();
    let bound = bind(&mut g, config, weights)?;
    let f_i = Graph::<T>::constant(&mut g, f_i.clone());
    let f_ref = Graph::<T>::constant(&mut g, f_ref.clone());
    let a = attention_graph(&mut g, config, &bound, frame, &f_i, &f_ref)?;
    Ok(unwrap_rc(a))
}

/// Weights non-reference features by their attention mask; the reference
/// frame passes through unchanged.
pub fn apply_attention<T: Element>(
    frame: Frame,
    f: &TensorOf<T>,
    a: &TensorOf<T>,
) -> Result<TensorOf<T>, ModelError> {
    match frame {
        Frame::Reference => Ok(f.clone()),
        _ => Ok(ops::mul(f, a)?),
    }
}

/// Merges three half-resolution feature maps.
pub fn merge<T: Element>(
    config: &ModelConfig,
    weights: &WeightsOf<T>,
    f1: &TensorOf<T>,
    f2: &TensorOf<T>,
    f3: &TensorOf<T>,
) -> Result<TensorOf<T>, ModelError> {
    let mut g = Eval::new();
    let bound = bind(&mut g, config, weights)?;
    let f1 = Graph::<T>::constant(&mut g, f1.clone());
    let f2 = Graph::<T>::constant(&mut g, f2.clone());
    let f3 = Graph::<T>::constant(&mut g, f3.clone());
    let m = merge_graph(&mut g, config, &bound, &f1, &f2, &f3)?;
    Ok(unwrap_rc(m))
}

/// Decodes merged features back to a full-resolution image in `(0, 1)`.
pub fn decode<T: Element>(
    config: &ModelConfig,
    weights: &WeightsOf<T>,
    merged: &TensorOf<T>,
    s_ref: &TensorOf<T>,
) -> Result<TensorOf<T>, ModelError> {
    let mut g = Eval::new();
    let bound = bind(&mut g, config, weights)?;
    let merged = Graph::<T>::constant(&mut g, merged.clone());
    let s_ref = Graph::<T>::constant(&mut g, s_ref.clone());
    let hdr = decode_graph(&mut g, config, &bound, &merged, &s_ref)?;
    Ok(unwrap_rc(hdr))
}

/// End-to-end inference on three `(n, 6, H, W)` inputs.
pub fn forward<T: Element>(
    config: &ModelConfig,
    weights: &WeightsOf<T>,
    l1: &TensorOf<T>,
    l2: &TensorOf<T>,
    l3: &TensorOf<T>,
) -> Result<TensorOf<T>, ModelError> {
    let mut g = Eval::new();
    let bound = bind(&mut g, config, weights)?;
    let l1 = Graph::<T>::constant(&mut g, l1.clone());
    let l2 = Graph::<T>::constant(&mut g, l2.clone());
    let l3 = Graph::<T>::constant(&mut g, l3.clone());
    let hdr = forward_graph(&mut g, config, &bound, &l1, &l2, &l3)?;
    Ok(unwrap_rc(hdr))
}

// ---------------------------------------------------------------------------
