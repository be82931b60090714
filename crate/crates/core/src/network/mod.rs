//! The multi-source segmentation model.
//!
//! Each of the N sub-networks owns an encoder, a domain classifier and a
//! source decoder. One target decoder is shared: its first up stage (the
//! fusion layer) consumes the element-wise sum of all encoders' features.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::scalar::{cst, Scalar};
use crate::tensor::Tensor;

/// Default number of down/up stages.
pub const DEPTH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub n_sources: usize,
    pub base_width: usize,
    pub depth: usize,
    pub norm_groups: usize,
    pub grl_lambda: f64,
    pub out_classes: usize,
    /// Hidden widths of the domain classifier head.
    pub classifier_hidden: [usize; 2],
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_sources: 2,
            base_width: 32,
            depth: DEPTH,
            norm_groups: 8,
            grl_lambda: 1.0,
            out_classes: 2,
            classifier_hidden: [256, 64],
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0 {
            return Err(Error::Config("at least one source sub-network is required".into()));
        }
        if !(1..=8).contains(&self.depth) {
            return Err(Error::Config(format!("depth must be in 1..=8, got {}", self.depth)));
        }
        if self.norm_groups == 0 || self.base_width < self.norm_groups {
            return Err(Error::Config(format!(
                "base_width {} must be at least norm_groups {} (and groups > 0)",
                self.base_width, self.norm_groups
            )));
        }
        if self.out_classes < 2 {
            return Err(Error::Config("out_classes must be at least 2".into()));
        }
        if !(self.grl_lambda >= 0.0) {
            return Err(Error::Config(format!("grl lambda {} must be >= 0", self.grl_lambda)));
        }
        if self.classifier_hidden.contains(&0) {
            return Err(Error::Config("classifier hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Channel width after stage `k` (0 = stem, `depth` = bottleneck).
    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Largest divisor of `channels` not above the configured group count.
    pub fn groups_for(&self, channels: usize) -> usize {
        (1..=self.norm_groups.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Encoder,
    Classifier,
    SourceDecoder,
    TargetDecoder,
}

/// Identity of one parameter tensor: component, 1-based source index (absent
/// for the shared target decoder) and layer path.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub component: Component,
    pub source: Option<usize>,
    pub layer: String,
}

/// Flat storage of every parameter tensor, addressed by index.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    keys: Vec<ParamKey>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    fn push(&mut self, key: ParamKey, t: Tensor<T>) -> usize {
        self.keys.push(key);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn keys(&self) -> &[ParamKey] {
        &self.keys
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of the tensors matching `pred`.
    pub fn numel_where(&self, pred: impl Fn(&ParamKey) -> bool) -> usize {
        self.keys.iter().zip(&self.tensors).filter(|(k, _)| pred(k)).map(|(_, t)| t.len()).sum()
    }

    pub fn ids_where(&self, pred: impl Fn(&ParamKey) -> bool) -> Vec<usize> {
        self.keys.iter().enumerate().filter(|(_, k)| pred(k)).map(|(i, _)| i).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvIds {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NormIds {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct DoubleConv {
    conv1: ConvIds,
    norm1: NormIds,
    conv2: ConvIds,
    norm2: NormIds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct EncoderIds {
    stem: DoubleConv,
    downs: Vec<DoubleConv>,
}

/// Decoder: `ups[k]` is the parameter group W_{k+1}; the 1×1 output
/// projection belongs to the last group.
#[derive(Clone, Debug, PartialEq, Eq)]
struct DecoderIds {
    ups: Vec<DoubleConv>,
    head: ConvIds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct ClassifierIds {
    fc: [ConvIds; 3],
}

/// Full parameter set Θ of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: NetConfig,
    pub seed: u64,
    pub store: ParamStore<T>,
    encoders: Vec<EncoderIds>,
    classifiers: Vec<ClassifierIds>,
    source_decoders: Vec<DecoderIds>,
    target_decoder: DecoderIds,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    component: Component,
    source: Option<usize>,
}

impl<T: Scalar> Builder<'_, T> {
    fn key(&self, layer: String) -> ParamKey {
        ParamKey { component: self.component, source: self.source, layer }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| cst::<T>(dist.sample(&mut self.rng))).collect();
        Tensor::from_vec(shape, data).expect("shape")
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvIds {
        let w = self.normal(&[cout, cin, k, k], (2.0 / (cin * k * k) as f64).sqrt());
        let w = self.store.push(self.key(format!("{name}.weight")), w);
        let b = self.store.push(self.key(format!("{name}.bias")), Tensor::zeros(&[cout]));
        ConvIds { w, b }
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, gain: f64) -> ConvIds {
        let w = self.normal(&[cout, cin], (gain / cin as f64).sqrt());
        let w = self.store.push(self.key(format!("{name}.weight")), w);
        let b = self.store.push(self.key(format!("{name}.bias")), Tensor::zeros(&[cout]));
        ConvIds { w, b }
    }

    fn norm(&mut self, name: &str, c: usize, groups: usize) -> NormIds {
        let gamma = self.store.push(self.key(format!("{name}.gamma")), Tensor::full(&[c], T::one()));
        let beta = self.store.push(self.key(format!("{name}.beta")), Tensor::zeros(&[c]));
        NormIds { gamma, beta, groups }
    }

    fn double_conv(&mut self, cfg: &NetConfig, name: &str, cin: usize, cout: usize) -> DoubleConv {
        let groups = cfg.groups_for(cout);
        DoubleConv {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            norm1: self.norm(&format!("{name}.norm1"), cout, groups),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            norm2: self.norm(&format!("{name}.norm2"), cout, groups),
        }
    }

    fn encoder(&mut self, cfg: &NetConfig) -> EncoderIds {
        let stem = self.double_conv(cfg, "stem", 1, cfg.width(0));
        let downs = (0..cfg.depth)
            .map(|k| self.double_conv(cfg, &format!("down{}", k + 1), cfg.width(k), cfg.width(k + 1)))
            .collect();
        EncoderIds { stem, downs }
    }

    fn decoder(&mut self, cfg: &NetConfig) -> DecoderIds {
        // up stage k+1 takes stage depth-k features (upsampled) and the
        // stage depth-k-1 skip.
        let d = cfg.depth;
        let ups = (0..d)
            .map(|k| {
                let below = cfg.width(d - k);
                let skip = cfg.width(d - k - 1);
                self.double_conv(cfg, &format!("up{}", k + 1), below + skip, skip)
            })
            .collect();
        let head = self.conv("head", cfg.width(0), cfg.out_classes, 1);
        DecoderIds { ups, head }
    }

    fn classifier(&mut self, cfg: &NetConfig) -> ClassifierIds {
        let [h1, h2] = cfg.classifier_hidden;
        ClassifierIds {
            fc: [
                self.linear("fc1", cfg.width(cfg.depth), h1, 2.0),
                self.linear("fc2", h1, h2, 2.0),
                self.linear("fc3", h2, 1, 1.0),
            ],
        }
    }
}

/// Deterministically initialised model for `config`.
pub fn build_model<T: Scalar>(config: &NetConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut store = ParamStore { keys: Vec::new(), tensors: Vec::new() };
    let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed), component: Component::Encoder, source: None };
    let mut encoders = Vec::new();
    let mut classifiers = Vec::new();
    let mut source_decoders = Vec::new();
    for i in 1..=config.n_sources {
        b.source = Some(i);
        b.component = Component::Encoder;
        encoders.push(b.encoder(config));
        b.component = Component::Classifier;
        classifiers.push(b.classifier(config));
        b.component = Component::SourceDecoder;
        source_decoders.push(b.decoder(config));
    }
    b.source = None;
    b.component = Component::TargetDecoder;
    let target_decoder = b.decoder(config);
    Ok(ModelParams { config: config.clone(), seed, store, encoders, classifiers, source_decoders, target_decoder })
}

/// Encoder outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePack<T> {
    /// Pre-pool activations of the stem and every down stage but the last.
    pub skips: Vec<Tensor<T>>,
    pub bottleneck: Tensor<T>,
}

impl<T: Scalar> FeaturePack<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            skips: self.skips.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            bottleneck: Tensor::zeros(self.bottleneck.shape()),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self { skips: self.skips.iter().map(|t| t.scale(s)).collect(), bottleneck: self.bottleneck.scale(s) }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut skips = self.skips.clone();
        for (a, b) in skips.iter_mut().zip(&other.skips) {
            a.add_assign(b)?;
        }
        Ok(Self { skips, bottleneck: self.bottleneck.add(&other.bottleneck)? })
    }
}

/// Encoder outputs living on a tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackVars {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

/// A forward pass in progress: a tape plus the model's parameters entered on
/// demand, each at most once.
pub struct Forward<'m, T> {
    pub model: &'m ModelParams<T>,
    pub graph: Graph<T>,
    vars: Vec<Option<Var>>,
}

impl<'m, T: Scalar> Forward<'m, T> {
    pub fn new(model: &'m ModelParams<T>) -> Self {
        Self { model, graph: Graph::new(), vars: vec![None; model.store.len()] }
    }

    fn p(&mut self, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let v = self.graph.param(id, self.model.store.get(id));
        self.vars[id] = Some(v);
        v
    }

    /// Images as a `[B, 1, H, W]` tape input.
    pub fn images(&mut self, images: Tensor<T>) -> Var {
        self.graph.input(images)
    }

    fn conv(&mut self, x: Var, ids: ConvIds, pad: usize) -> Result<Var> {
        let (w, b) = (self.p(ids.w), self.p(ids.b));
        self.graph.conv2d(x, w, b, pad)
    }

    fn double_conv(&mut self, x: Var, dc: DoubleConv) -> Result<Var> {
        let mut x = x;
        for (conv, norm) in [(dc.conv1, dc.norm1), (dc.conv2, dc.norm2)] {
            x = self.conv(x, conv, 1)?;
            let (g, b) = (self.p(norm.gamma), self.p(norm.beta));
            x = self.graph.group_norm(x, g, b, norm.groups)?;
            x = self.graph.relu(x);
        }
        Ok(x)
    }

    fn check_source(&self, i: usize) -> Result<usize> {
        if i == 0 || i > self.model.config.n_sources {
            return Err(Error::Config(format!(
                "source index {i} outside 1..={}",
                self.model.config.n_sources
            )));
        }
        Ok(i - 1)
    }

    /// Encoder of sub-network `i` (1-based).
    pub fn encode(&mut self, i: usize, images: Var) -> Result<PackVars> {
        let idx = self.check_source(i)?;
        let (_, c, h, w) = self.graph.value(images).dims4()?;
        let div = 1 << self.model.config.depth;
        if c != 1 || h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "encoder input must be [B, 1, H, W] with H, W divisible by {div}; got {:?}",
                self.graph.value(images).shape()
            )));
        }
        let enc = self.model.encoders[idx].clone();
        let mut x = self.double_conv(images, enc.stem)?;
        let mut skips = Vec::with_capacity(enc.downs.len());
        for down in &enc.downs {
            skips.push(x);
            let pooled = self.graph.max_pool2(x)?;
            x = self.double_conv(pooled, *down)?;
        }
        Ok(PackVars { skips, bottleneck: x })
    }

    /// Domain logit `[B, 1]` of classifier `i` on a bottleneck, behind a
    /// gradient reversal layer with scale `lambda`.
    pub fn classify(&mut self, i: usize, bottleneck: Var, lambda: T) -> Result<Var> {
        let idx = self.check_source(i)?;
        let cls = self.model.classifiers[idx].clone();
        let x = self.graph.grl(bottleneck, lambda);
        let mut x = self.graph.global_avg_pool(x)?;
        for (k, fc) in cls.fc.iter().enumerate() {
            let (w, b) = (self.p(fc.w), self.p(fc.b));
            x = self.graph.linear(x, w, b)?;
            if k < 2 {
                x = self.graph.relu(x);
            }
        }
        Ok(x)
    }

    fn decode(&mut self, dec: &DecoderIds, pack: &PackVars) -> Result<Var> {
        let mut x = pack.bottleneck;
        for (k, up) in dec.ups.iter().enumerate() {
            let skip = pack.skips[pack.skips.len() - 1 - k];
            let upsampled = self.graph.upsample2(x)?;
            if self.graph.value(upsampled).shape()[2..] != self.graph.value(skip).shape()[2..] {
                return Err(Error::Shape(format!(
                    "up stage {} got {:?} against skip {:?}",
                    k + 1,
                    self.graph.value(upsampled).shape(),
                    self.graph.value(skip).shape()
                )));
            }
            let cat = self.graph.concat_channels(skip, upsampled)?;
            x = self.double_conv(cat, *up)?;
        }
        self.conv(x, dec.head, 0)
    }

    /// Per-pixel class logits `[B, K, H, W]` from source decoder `i`.
    pub fn decode_source(&mut self, i: usize, pack: &PackVars) -> Result<Var> {
        let idx = self.check_source(i)?;
        let dec = self.model.source_decoders[idx].clone();
        self.decode(&dec, pack)
    }

    /// Element-wise sum of the packs (in the given order).
    pub fn fuse(&mut self, packs: &[PackVars]) -> Result<PackVars> {
        let (first, rest) = packs.split_first().ok_or_else(|| Error::Shape("no packs to fuse".into()))?;
        let mut acc = first.clone();
        for p in rest {
            for k in 0..acc.skips.len() {
                acc.skips[k] = self.graph.add(acc.skips[k], p.skips[k])?;
            }
            acc.bottleneck = self.graph.add(acc.bottleneck, p.bottleneck)?;
        }
        Ok(acc)
    }

    /// Target decoder on the sum of exactly N packs.
    pub fn decode_target_fused(&mut self, packs: &[PackVars]) -> Result<Var> {
        if packs.len() != self.model.config.n_sources {
            return Err(Error::Shape(format!(
                "{} packs for {} sub-networks",
                packs.len(),
                self.model.config.n_sources
            )));
        }
        let fused = self.fuse(packs)?;
        let dec = self.model.target_decoder.clone();
        self.decode(&dec, &fused)
    }

    pub fn pack_values(&self, p: PackVars) -> FeaturePack<T> {
        FeaturePack {
            skips: p.skips.iter().map(|&v| self.graph.value(v).clone()).collect(),
            bottleneck: self.graph.value(p.bottleneck).clone(),
        }
    }

    pub fn pack_inputs(&mut self, pack: &FeaturePack<T>) -> PackVars {
        PackVars {
            skips: pack.skips.iter().map(|t| self.graph.input(t.clone())).collect(),
            bottleneck: self.graph.input(pack.bottleneck.clone()),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn n_sources(&self) -> usize {
        self.config.n_sources
    }

    /// Parameter ids of the target-decoder groups, one per up stage.
    pub fn target_decoder_groups(&self) -> Vec<Vec<usize>> {
        let d = self.config.depth;
        (0..d)
            .map(|k| {
            let up = self.target_decoder.ups[k];
            let mut ids = vec![
                up.conv1.w, up.conv1.b, up.norm1.gamma, up.norm1.beta, up.conv2.w, up.conv2.b, up.norm2.gamma,
                up.norm2.beta,
            ];
            if k == d - 1 {
                ids.extend([self.target_decoder.head.w, self.target_decoder.head.b]);
            }
            ids
        })
            .collect()
    }

    /// Encoder of sub-network `i` on `[B, 1, H, W]` images.
    pub fn encode(&self, i: usize, images: &Tensor<T>) -> Result<FeaturePack<T>> {
        let mut f = Forward::new(self);
        let x = f.images(images.clone());
        let p = f.encode(i, x)?;
        Ok(f.pack_values(p))
    }

    /// Domain logits `[B, 1]` of classifier `i`.
    pub fn classify_domain(&self, i: usize, bottleneck: &Tensor<T>) -> Result<Tensor<T>> {
        let mut f = Forward::new(self);
        let x = f.graph.input(bottleneck.clone());
        let lambda = cst(self.config.grl_lambda);
        let y = f.classify(i, x, lambda)?;
        Ok(f.graph.value(y).clone())
    }

    pub fn decode_source(&self, i: usize, pack: &FeaturePack<T>) -> Result<Tensor<T>> {
        let mut f = Forward::new(self);
        let p = f.pack_inputs(pack);
        let y = f.decode_source(i, &p)?;
        Ok(f.graph.value(y).clone())
    }

    pub fn decode_target_fused(&self, packs: &[FeaturePack<T>]) -> Result<Tensor<T>> {
        let mut f = Forward::new(self);
        let vars: Vec<PackVars> = packs.iter().map(|p| f.pack_inputs(p)).collect();
        let y = f.decode_target_fused(&vars)?;
        Ok(f.graph.value(y).clone())
    }

    /// Fused-target logits for `[B, 1, H, W]` images.
    pub fn target_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut f = Forward::new(self);
        let x = f.images(images.clone());
        let packs = (1..=self.n_sources()).map(|i| f.encode(i, x)).collect::<Result<Vec<_>>>()?;
        let y = f.decode_target_fused(&packs)?;
        Ok(f.graph.value(y).clone())
    }

    /// Binary masks from the fused target path (per-pixel argmax).
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<Mask>> {
        let logits = self.target_logits(images)?;
        Ok(argmax_masks(&logits))
    }
}

/// Per-pixel argmax of `[B, K, H, W]` logits as masks (class 0 = background,
/// any other class = foreground). Ties go to the lower class.
pub fn argmax_masks<T: Scalar>(logits: &Tensor<T>) -> Vec<Mask> {
    let (b, k, h, w) = logits.dims4().expect("rank-4 logits");
    let hw = h * w;
    let d = logits.data();
    (0..b)
        .map(|n| {
            let bits = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(n * k + c) * hw + p] > d[(n * k + best) * hw + p] {
                            best = c;
                        }
                    }
                    u8::from(best != 0)
                })
                .collect();
            Mask { height: h, width: w, bits }
        })
        .collect()
}
