//! Reference U-Net style backbone with configurable PSBM placement.
//!
//! Topology for depth `D` and base width `b` (channel width `c_k = b·2^(k−1)`):
//!
//! ```text
//! enc1 ─pool─ enc2 ─pool─ … ─ encD ── center
//!  │           │             │           │
//!  └─ dec1 ◄─up─ dec2 ◄─ … ◄─up─ dec(D−1) ◄─up─┘
//!       └─ classifier (1×1 conv, sigmoid)
//! ```
//!
//! Every encoder, center and decoder block is `conv3×3 → ReLU → conv3×3 →
//! slot → ReLU`, where the slot holds a per-channel normalization by default
//! and a PSBM layer where one is placed. A classifier placement inserts PSBM
//! in front of the final 1×1 convolution.

mod checkpoint;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::psbm::{self, BlockMask, PsbmConfig};
use crate::rng::{self, Purpose, Rng};
use crate::rough_core::ProbabilityMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

/// A layer position that can host a PSBM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    /// Encoder level, 1-based.
    Encoder(usize),
    Center,
    /// Decoder level, 1-based; `dec1` is the full-resolution decoder.
    Decoder(usize),
    Classifier,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Encoder(k) => write!(f, "enc{k}"),
            LayerId::Center => f.write_str("center"),
            LayerId::Decoder(k) => write!(f, "dec{k}"),
            LayerId::Classifier => f.write_str("classifier"),
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let level = |rest: &str| {
            rest.parse::<usize>()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| Error::param(format!("unknown layer identifier `{s}`")))
        };
        match s {
            "center" => Ok(LayerId::Center),
            "classifier" => Ok(LayerId::Classifier),
            _ if s.starts_with("enc") => level(&s[3..]).map(LayerId::Encoder),
            _ if s.starts_with("dec") => level(&s[3..]).map(LayerId::Decoder),
            _ => Err(Error::param(format!("unknown layer identifier `{s}`"))),
        }
    }
}

impl Serialize for LayerId {
    fn serialize<Se: Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Every placeable layer of a depth-`depth` network, input to output.
pub fn all_layers(depth: usize) -> Vec<LayerId> {
    let mut v: Vec<LayerId> = (1..=depth).map(LayerId::Encoder).collect();
    v.push(LayerId::Center);
    v.extend((1..depth).rev().map(LayerId::Decoder));
    v.push(LayerId::Classifier);
    v
}

/// Last two encoder levels plus the center.
pub fn center_encoder_placements(depth: usize) -> Vec<LayerId> {
    vec![
        LayerId::Encoder(depth - 1),
        LayerId::Encoder(depth),
        LayerId::Center,
    ]
}

/// Last three encoder levels.
pub fn last_three_encoder_placements(depth: usize) -> Vec<LayerId> {
    (depth.saturating_sub(2).max(1)..=depth)
        .map(LayerId::Encoder)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub psbm_placements: Vec<LayerId>,
    pub psbm: PsbmConfig,
    /// Layers that keep their normalization in addition to a PSBM. Any
    /// overlap with `psbm_placements` is rejected by the validator.
    pub keep_norm: Vec<LayerId>,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_channels: 1,
            base_channels: 16,
            depth: 4,
            psbm_placements: center_encoder_placements(4),
            psbm: PsbmConfig::default(),
            keep_norm: Vec::new(),
            seed: 0,
        }
    }
}

impl ModelSpec {
    /// Same spec with no PSBM anywhere: the deterministic baseline.
    pub fn without_psbm(&self) -> Self {
        Self {
            psbm_placements: Vec::new(),
            ..self.clone()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Required divisor of the input height and width.
    pub fn size_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn has_psbm(&self) -> bool {
        !self.psbm_placements.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementRule {
    MalformedSpec,
    UnknownLayer,
    DuplicatePlacement,
    /// PSBM must not be applied at every layer.
    EveryLayer,
    /// PSBM must not share a layer with another normalization/regularizer.
    CoOccurrence,
    /// PSBM belongs in the high-level encoder layers.
    LowLevelEncoder,
    DecoderPlacement,
    ClassifierPlacement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: PlacementRule,
    pub layer: Option<LayerId>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub errors: Vec<Violation>,
    pub warnings: Vec<Violation>,
}

impl PlacementReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    fn error(&mut self, rule: PlacementRule, layer: Option<LayerId>, message: String) {
        self.errors.push(Violation {
            rule,
            layer,
            message,
        });
    }

    fn warn(&mut self, rule: PlacementRule, layer: LayerId, message: String) {
        self.warnings.push(Violation {
            rule,
            layer: Some(layer),
            message,
        });
    }
}

/// Checks a spec against the placement principles. Never fails: problems are
/// reported as errors (blocking) or warnings (advisory).
pub fn validate_placement(spec: &ModelSpec) -> PlacementReport {
    let mut report = PlacementReport::default();
    if spec.depth < 2 {
        report.error(
            PlacementRule::MalformedSpec,
            None,
            format!("depth must be at least 2, got {}", spec.depth),
        );
    }
    if spec.base_channels == 0 || spec.input_channels == 0 {
        report.error(
            PlacementRule::MalformedSpec,
            None,
            "channel counts must be positive".into(),
        );
    }
    if let Err(e) = spec.psbm.validate() {
        report.error(PlacementRule::MalformedSpec, None, e.to_string());
    }
    if !report.is_valid() {
        return report;
    }

    let layers = all_layers(spec.depth);
    let mut seen = Vec::new();
    for &layer in &spec.psbm_placements {
        if !layers.contains(&layer) {
            report.error(
                PlacementRule::UnknownLayer,
                Some(layer),
                format!("{layer} does not exist in a depth-{} network", spec.depth),
            );
        } else if seen.contains(&layer) {
            report.error(
                PlacementRule::DuplicatePlacement,
                Some(layer),
                format!("{layer} is listed more than once"),
            );
        } else {
            seen.push(layer);
        }
    }
    for &layer in &spec.keep_norm {
        if !layers.contains(&layer) {
            report.error(
                PlacementRule::UnknownLayer,
                Some(layer),
                format!("keep_norm names {layer}, which does not exist"),
            );
        }
    }
    if layers.iter().all(|l| seen.contains(l)) {
        report.error(
            PlacementRule::EveryLayer,
            None,
            "PSBM placed at every layer; it must not be applied everywhere".into(),
        );
    }
    for &layer in &seen {
        if spec.keep_norm.contains(&layer) {
            report.error(
                PlacementRule::CoOccurrence,
                Some(layer),
                format!("{layer} would carry both PSBM and normalization"),
            );
        }
        match layer {
            LayerId::Encoder(k) if 2 * k <= spec.depth => report.warn(
                PlacementRule::LowLevelEncoder,
                layer,
                format!("{layer} is a low-level encoder layer; PSBM is most useful on high-level encoder features"),
            ),
            LayerId::Decoder(_) => report.warn(
                PlacementRule::DecoderPlacement,
                layer,
                format!("{layer} is a decoder layer; center + high-level encoder placement performs best"),
            ),
            LayerId::Classifier => report.warn(
                PlacementRule::ClassifierPlacement,
                layer,
                "classifier placement degrades recall sharply".into(),
            ),
            _ => {}
        }
    }
    report
}

/// Analytic trainable-parameter count of the backbone described by `spec`.
pub fn param_count(spec: &ModelSpec) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let c = |k: usize| spec.channels(k);
    let d = spec.depth;
    let mut n = conv(spec.input_channels, c(1), 3) + conv(c(1), c(1), 3);
    for k in 2..=d {
        n += conv(c(k - 1), c(k), 3) + conv(c(k), c(k), 3);
    }
    n += 2 * conv(c(d), c(d), 3);
    for k in 1..d {
        n += 4 * c(k + 1) * c(k) + c(k);
        n += conv(2 * c(k), c(k), 3) + conv(c(k), c(k), 3);
    }
    n + conv(c(1), 1, 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub len: usize,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Norm,
    Psbm,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    slot: Slot,
}

#[derive(Clone, Copy, Debug)]
struct Up {
    weight: usize,
    bias: usize,
    cout: usize,
}

/// Built network: immutable during inference.
#[derive(Clone, Debug)]
pub struct Model<S> {
    spec: ModelSpec,
    params: Vec<Vec<S>>,
    info: Vec<ParamInfo>,
    encoders: Vec<Block>,
    center: Block,
    ups: Vec<Up>,
    decoders: Vec<Block>,
    classifier_psbm: bool,
    head: Conv,
}

/// Per-parameter-tensor gradients, aligned with [`Model::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S> {
    pub tensors: Vec<Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(model: &Model<S>) -> Self {
        Self {
            tensors: model.params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<S>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

struct ParamBuilder<'a, S> {
    params: Vec<Vec<S>>,
    info: Vec<ParamInfo>,
    rng: &'a mut Rng,
}

impl<S: Scalar> ParamBuilder<'_, S> {
    fn push(&mut self, name: String, kind: ParamKind, values: Vec<S>) -> usize {
        self.info.push(ParamInfo {
            name,
            kind,
            len: values.len(),
        });
        self.params.push(values);
        self.params.len() - 1
    }

    fn normal(&mut self, len: usize, std: f64) -> Vec<S> {
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..len).map(|_| S::lit(dist.sample(self.rng))).collect()
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let w = self.normal(cout * cin * k * k, (2.0 / fan_in).sqrt());
        let weight = self.push(format!("{name}.weight"), ParamKind::Weight, w);
        let bias = self.push(format!("{name}.bias"), ParamKind::Bias, vec![S::zero(); cout]);
        Conv {
            weight,
            bias,
            cin,
            cout,
            k,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, slot: Slot) -> Block {
        Block {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            slot,
        }
    }

    fn up(&mut self, name: &str, cin: usize, cout: usize) -> Up {
        let w = self.normal(4 * cin * cout, (2.0 / cin as f64).sqrt());
        let weight = self.push(format!("{name}.weight"), ParamKind::Weight, w);
        let bias = self.push(format!("{name}.bias"), ParamKind::Bias, vec![S::zero(); cout]);
        Up { weight, bias, cout }
    }
}

/// Deterministically constructs the backbone described by `spec`.
pub fn build<S: Scalar>(spec: &ModelSpec) -> Result<Model<S>> {
    let report = validate_placement(spec);
    if !report.is_valid() {
        let msgs: Vec<_> = report.errors.iter().map(|v| v.message.clone()).collect();
        return Err(Error::Placement(msgs.join("; ")));
    }
    for w in &report.warnings {
        log::warn!("placement: {}", w.message);
    }
    let slot = |layer: LayerId| {
        if spec.psbm_placements.contains(&layer) {
            Slot::Psbm
        } else {
            Slot::Norm
        }
    };
    let mut init_rng = rng::stream(spec.seed, Purpose::Init, 0);
    let mut b = ParamBuilder {
        params: Vec::new(),
        info: Vec::new(),
        rng: &mut init_rng,
    };
    let d = spec.depth;
    let mut encoders = Vec::with_capacity(d);
    let mut cin = spec.input_channels;
    for k in 1..=d {
        let id = LayerId::Encoder(k);
        encoders.push(b.block(&id.to_string(), cin, spec.channels(k), slot(id)));
        cin = spec.channels(k);
    }
    let center = b.block("center", spec.channels(d), spec.channels(d), slot(LayerId::Center));
    let mut ups = Vec::with_capacity(d - 1);
    let mut decoders = Vec::with_capacity(d - 1);
    for k in 1..d {
        ups.push(b.up(&format!("up{k}"), spec.channels(k + 1), spec.channels(k)));
        let id = LayerId::Decoder(k);
        decoders.push(b.block(&id.to_string(), 2 * spec.channels(k), spec.channels(k), slot(id)));
    }
    let head = b.conv("classifier", spec.channels(1), 1, 1);
    let ParamBuilder { params, info, .. } = b;
    Ok(Model {
        spec: spec.clone(),
        params,
        info,
        encoders,
        center,
        ups,
        decoders,
        classifier_psbm: spec.psbm_placements.contains(&LayerId::Classifier),
        head,
    })
}

enum SlotTape<S> {
    Norm { normed: Tensor<S>, inv: Vec<S> },
    Psbm(Option<BlockMask>),
}

struct BlockTape<S> {
    cols1: Vec<S>,
    h1: Tensor<S>,
    cols2: Vec<S>,
    slot: SlotTape<S>,
    out: Tensor<S>,
}

/// Intermediate values recorded by [`Model::forward_train`].
pub struct Tape<S> {
    enc: Vec<BlockTape<S>>,
    pools: Vec<Vec<u32>>,
    center: BlockTape<S>,
    dec: Vec<BlockTape<S>>,
    cls_mask: Option<BlockMask>,
    head_cols: Vec<S>,
    prob: Vec<S>,
}

impl<S> Tape<S> {
    /// Masks drawn by every PSBM layer during the recorded pass.
    pub fn masks(&self) -> Vec<&BlockMask> {
        let slot_masks = self
            .enc
            .iter()
            .chain(std::iter::once(&self.center))
            .chain(self.dec.iter())
            .filter_map(|t| match &t.slot {
                SlotTape::Psbm(Some(m)) => Some(m),
                _ => None,
            });
        slot_masks.chain(self.cls_mask.iter()).collect()
    }
}

fn apply_psbm<S: Scalar>(
    x: Tensor<S>,
    cfg: &PsbmConfig,
    stochastic: bool,
    rng: &mut Rng,
) -> Result<(Tensor<S>, Option<BlockMask>)> {
    if !stochastic {
        return Ok((x, None));
    }
    if cfg.block_size > x.height || cfg.block_size > x.width {
        return Err(Error::param(format!(
            "PSBM block size {} exceeds a {}x{} feature map",
            cfg.block_size, x.height, x.width
        )));
    }
    let mask = psbm::draw_mask(cfg, x.height, x.width, rng)?;
    let out = psbm::apply(&x, &mask)?;
    Ok((out, Some(mask)))
}

fn psbm_backward<S: Scalar>(d: &mut Tensor<S>, mask: &BlockMask) {
    let scale = S::lit(mask.scale());
    for c in 0..d.channels {
        for (g, &m) in d.channel_mut(c).iter_mut().zip(&mask.values) {
            *g = if m == 1 { *g * scale } else { S::zero() };
        }
    }
}

impl<S: Scalar> Model<S> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Vec<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<S>] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Σ‖W‖² over weight tensors; biases are excluded.
    pub fn weight_sq_norm(&self) -> S {
        self.params
            .iter()
            .zip(&self.info)
            .filter(|(_, i)| i.kind == ParamKind::Weight)
            .flat_map(|(p, _)| p.iter())
            .map(|&v| v * v)
            .sum()
    }

    pub(crate) fn set_params(&mut self, params: Vec<Vec<S>>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Checkpoint(
                "weight blob does not match the model spec".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    fn check_input(&self, image: &Tensor<S>) -> Result<()> {
        let div = self.spec.size_divisor();
        if image.channels != self.spec.input_channels {
            return Err(Error::shape(
                format!("{} input channels", self.spec.input_channels),
                format!("{} channels", image.channels),
            ));
        }
        if image.height == 0 || image.width == 0 || image.height % div != 0 || image.width % div != 0 {
            return Err(Error::shape(
                format!("height and width divisible by {div}"),
                format!("{}x{}", image.height, image.width),
            ));
        }
        Ok(())
    }

    fn conv(&self, c: &Conv, x: &Tensor<S>, record: bool) -> (Tensor<S>, Option<Vec<S>>) {
        layers::conv_forward(x, &self.params[c.weight], &self.params[c.bias], c.cout, c.k, record)
    }

    fn block_forward(
        &self,
        block: &Block,
        x: &Tensor<S>,
        stochastic: bool,
        rng: &mut Rng,
        record: bool,
    ) -> Result<(Tensor<S>, Option<BlockTape<S>>)> {
        let (mut h1, cols1) = self.conv(&block.conv1, x, record);
        layers::relu_inplace(&mut h1);
        let (a2, cols2) = self.conv(&block.conv2, &h1, record);
        let (mut out, slot) = match block.slot {
            Slot::Norm => {
                let (normed, inv) = layers::norm_forward(&a2);
                let tape = record.then(|| SlotTape::Norm {
                    normed: normed.clone(),
                    inv,
                });
                (normed, tape)
            }
            Slot::Psbm => {
                let (o, mask) = apply_psbm(a2, &self.spec.psbm, stochastic, rng)?;
                (o, record.then_some(SlotTape::Psbm(mask)))
            }
        };
        layers::relu_inplace(&mut out);
        let tape = if record {
            Some(BlockTape {
                cols1: cols1.expect("recorded"),
                h1,
                cols2: cols2.expect("recorded"),
                slot: slot.expect("recorded"),
                out: out.clone(),
            })
        } else {
            None
        };
        Ok((out, tape))
    }

    fn block_backward(
        &self,
        block: &Block,
        tape: &BlockTape<S>,
        mut d: Tensor<S>,
        grads: &mut Gradients<S>,
        need_input_grad: bool,
    ) -> Option<Tensor<S>> {
        layers::relu_backward_inplace(&mut d, &tape.out);
        let d = match &tape.slot {
            SlotTape::Norm { normed, inv } => layers::norm_backward(&d, normed, inv),
            SlotTape::Psbm(Some(mask)) => {
                psbm_backward(&mut d, mask);
                d
            }
            SlotTape::Psbm(None) => d,
        };
        let mut dh1 = self
            .conv_backward(&block.conv2, &d, &tape.cols2, grads, true)
            .expect("input grad requested");
        layers::relu_backward_inplace(&mut dh1, &tape.h1);
        self.conv_backward(&block.conv1, &dh1, &tape.cols1, grads, need_input_grad)
    }

    fn conv_backward(
        &self,
        c: &Conv,
        d: &Tensor<S>,
        cols: &[S],
        grads: &mut Gradients<S>,
        need_input_grad: bool,
    ) -> Option<Tensor<S>> {
        let (dw, db) = two_mut(&mut grads.tensors, c.weight, c.bias);
        layers::conv_backward(d, cols, &self.params[c.weight], c.cin, c.k, dw, db, need_input_grad)
    }

    fn run(
        &self,
        image: &Tensor<S>,
        stochastic: bool,
        rng: &mut Rng,
        record: bool,
    ) -> Result<(ProbabilityMask<S>, Option<Tape<S>>)> {
        self.check_input(image)?;
        let d = self.spec.depth;
        let mut enc_out: Vec<Tensor<S>> = Vec::with_capacity(d);
        let mut enc_tapes = Vec::new();
        let mut pools = Vec::new();
        let mut x = image.clone();
        for (k, block) in self.encoders.iter().enumerate() {
            if k > 0 {
                let (p, arg) = layers::pool_forward(&x);
                if record {
                    pools.push(arg);
                }
                x = p;
            }
            let (out, tape) = self.block_forward(block, &x, stochastic, rng, record)?;
            enc_tapes.extend(tape);
            enc_out.push(out.clone());
            x = out;
        }
        let (mut prev, center_tape) = self.block_forward(&self.center, &x, stochastic, rng, record)?;
        let mut dec_tapes: Vec<BlockTape<S>> = Vec::new();
        for k in (1..d).rev() {
            let up = &self.ups[k - 1];
            let u = layers::up_forward(&prev, &self.params[up.weight], &self.params[up.bias], up.cout);
            let cat = u.concat(&enc_out[k - 1]);
            let (out, tape) = self.block_forward(&self.decoders[k - 1], &cat, stochastic, rng, record)?;
            dec_tapes.extend(tape);
            prev = out;
        }
        let (head_in, cls_mask) = if self.classifier_psbm {
            apply_psbm(prev, &self.spec.psbm, stochastic, rng)?
        } else {
            (prev, None)
        };
        let (logits, head_cols) = self.conv(&self.head, &head_in, record);
        let prob: Vec<S> = logits.data.iter().map(|&v| layers::sigmoid(v)).collect();
        let mask = ProbabilityMask::from_clamped(image.height, image.width, prob.clone())?;
        let tape = record.then(|| {
            dec_tapes.reverse(); // index k-1 ↔ dec_k
            Tape {
                enc: enc_tapes,
                pools,
                center: center_tape.expect("recorded"),
                dec: dec_tapes,
                cls_mask,
                head_cols: head_cols.expect("recorded"),
                prob,
            }
        });
        Ok((mask, tape))
    }

    /// Per-pixel anomaly probability. `stochastic` engages every PSBM layer
    /// with fresh masks drawn from `rng`; otherwise PSBM layers pass through.
    pub fn forward(&self, image: &Tensor<S>, stochastic: bool, rng: &mut Rng) -> Result<ProbabilityMask<S>> {
        self.run(image, stochastic, rng, false).map(|(m, _)| m)
    }

    /// Forward pass that records what [`Model::backward`] needs.
    pub fn forward_train(
        &self,
        image: &Tensor<S>,
        stochastic: bool,
        rng: &mut Rng,
    ) -> Result<(ProbabilityMask<S>, Tape<S>)> {
        let (m, t) = self.run(image, stochastic, rng, true)?;
        Ok((m, t.expect("recorded")))
    }

    /// Parameter gradients given `d_prob = ∂loss/∂prob` per pixel.
    pub fn backward(&self, tape: &Tape<S>, d_prob: &[S]) -> Gradients<S> {
        let mut grads = Gradients::zeros_like(self);
        let d = self.spec.depth;
        let first = &tape.enc[0].out;
        let (h, w) = (first.height, first.width);
        let d_logit: Vec<S> = d_prob
            .iter()
            .zip(&tape.prob)
            .map(|(&g, &p)| g * p * (S::one() - p))
            .collect();
        let d_logit = Tensor::from_vec(1, h, w, d_logit).expect("output shape");
        let mut d_prev = self
            .conv_backward(&self.head, &d_logit, &tape.head_cols, &mut grads, true)
            .expect("input grad requested");
        if let Some(mask) = &tape.cls_mask {
            psbm_backward(&mut d_prev, mask);
        }

        let mut d_enc: Vec<Option<Tensor<S>>> = vec![None; d];
        for k in 1..d {
            let block = &self.decoders[k - 1];
            let d_cat = self
                .block_backward(block, &tape.dec[k - 1], d_prev, &mut grads, true)
                .expect("input grad requested");
            let (d_up, d_skip) = d_cat.split(self.spec.channels(k));
            accumulate(&mut d_enc[k - 1], d_skip);
            let up = &self.ups[k - 1];
            let up_in = if k + 1 < d {
                &tape.dec[k].out
            } else {
                &tape.center.out
            };
            let (dw, db) = two_mut(&mut grads.tensors, up.weight, up.bias);
            d_prev = layers::up_backward(&d_up, up_in, &self.params[up.weight], dw, db);
        }
        let d_center_in = self
            .block_backward(&self.center, &tape.center, d_prev, &mut grads, true)
            .expect("input grad requested");
        accumulate(&mut d_enc[d - 1], d_center_in);

        for k in (1..=d).rev() {
            let dk = d_enc[k - 1].take().expect("every encoder output feeds forward");
            let need = k > 1;
            let d_in = self.block_backward(&self.encoders[k - 1], &tape.enc[k - 1], dk, &mut grads, need);
            if let Some(d_in) = d_in {
                let below = &tape.enc[k - 2].out;
                let d_below = layers::pool_backward(&d_in, &tape.pools[k - 2], below.height, below.width);
                accumulate(&mut d_enc[k - 2], d_below);
            }
        }
        grads
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, t: Tensor<S>) {
    match slot {
        Some(acc) => acc.add_assign(&t),
        None => *slot = Some(t),
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a != b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// Single-channel image raster to model input.
pub fn image_tensor<S: Scalar>(height: usize, width: usize, pixels: &[f32]) -> Result<Tensor<S>> {
    Tensor::from_vec(1, height, width, pixels.iter().map(|&v| S::lit(v as f64)).collect())
}
