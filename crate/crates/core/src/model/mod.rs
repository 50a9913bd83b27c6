//! Backbone plus the classification and regression heads.
//!
//! Both heads are `head_depth` 3x3 convolutions with `head_channels` filters
//! and rectifiers, followed by a 3x3 convolution with `2 * N_AP` outputs.
//! Classification channels come in `(background, lesion)` pairs per anchor,
//! each passed through its own sigmoid; the lesion channel is the score.
//! Regression channels come in `(o_x, o_y)` pairs of raw pixel offsets.

pub mod nn;
pub mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{GravityPointSet, GridConfig};
use crate::error::{Error, Result};
use crate::loss::sigmoid;
use nn::{
    BatchNorm2d, ChannelRepeat, Conv2d, Init, Layer, MaxPool2d, Param, Relu, Residual, Sequential,
    Tensor,
};

/// Prior probability of the lesion class used to bias the final
/// classification layer at initialization.
const PRIOR_LESION_PROBABILITY: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "tiny-desk")]
    TinyDesk,
    #[serde(rename = "residual-18")]
    Residual18,
    #[serde(rename = "residual-34")]
    Residual34,
    #[serde(rename = "residual-50")]
    Residual50,
    #[serde(rename = "residual-101")]
    Residual101,
    #[serde(rename = "residual-152")]
    Residual152,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 6] = [
        BackboneKind::TinyDesk,
        BackboneKind::Residual18,
        BackboneKind::Residual34,
        BackboneKind::Residual50,
        BackboneKind::Residual101,
        BackboneKind::Residual152,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BackboneKind::TinyDesk => "tiny-desk",
            BackboneKind::Residual18 => "residual-18",
            BackboneKind::Residual34 => "residual-34",
            BackboneKind::Residual50 => "residual-50",
            BackboneKind::Residual101 => "residual-101",
            BackboneKind::Residual152 => "residual-152",
        }
    }

    pub fn feature_channels(&self) -> usize {
        match self {
            BackboneKind::TinyDesk => TINY_WIDTHS[4],
            BackboneKind::Residual18 | BackboneKind::Residual34 => 512,
            _ => 2048,
        }
    }

    /// `(bottleneck, blocks per stage)` for the residual variants.
    fn residual_layout(&self) -> Option<(bool, [usize; 4])> {
        match self {
            BackboneKind::TinyDesk => None,
            BackboneKind::Residual18 => Some((false, [2, 2, 2, 2])),
            BackboneKind::Residual34 => Some((false, [3, 4, 6, 3])),
            BackboneKind::Residual50 => Some((true, [3, 4, 6, 3])),
            BackboneKind::Residual101 => Some((true, [3, 4, 23, 3])),
            BackboneKind::Residual152 => Some((true, [3, 8, 36, 3])),
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown backbone kind {s:?}")))
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

const TINY_WIDTHS: [usize; 5] = [8, 16, 32, 64, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone_kind: BackboneKind,
    pub downsample_factor: usize,
    pub head_channels: usize,
    pub head_depth: usize,
    pub anchors_per_position: usize,
    pub pretrained: bool,
    /// Pixels per unit of raw regression output.
    #[serde(default = "unit_scale")]
    pub offset_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor != 32 {
            return Err(Error::InvalidConfig(format!(
                "downsample factor {} unsupported: every backbone halves the resolution five times (32)",
                self.downsample_factor
            )));
        }
        if self.head_channels == 0 {
            return Err(Error::InvalidConfig("head_channels must be positive".into()));
        }
        if self.head_depth == 0 {
            return Err(Error::InvalidConfig("head_depth must be at least 1".into()));
        }
        if self.anchors_per_position == 0 {
            return Err(Error::InvalidConfig("anchors_per_position must be positive".into()));
        }
        if !(self.offset_scale > 0.0 && self.offset_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "offset_scale must be positive, got {}",
                self.offset_scale
            )));
        }
        Ok(())
    }

    /// Checks that the head width matches the gravity-point layout of `grid`.
    pub fn check_grid(&self, grid: &GridConfig) -> Result<()> {
        let per_grid = grid.per_grid_count()?;
        if per_grid != self.anchors_per_position {
            return Err(Error::ConfigurationMismatch(format!(
                "model emits {} anchors per position but the grid has {} gravity points per feature grid",
                self.anchors_per_position, per_grid
            )));
        }
        let (fh, fw) = feature_map_size(grid.image_height, grid.image_width);
        if (fh, fw) != (grid.fm_height, grid.fm_width) {
            return Err(Error::ConfigurationMismatch(format!(
                "backbone maps {}x{} to {fh}x{fw} but the grid declares a {}x{} feature map",
                grid.image_height, grid.image_width, grid.fm_height, grid.fm_width
            )));
        }
        Ok(())
    }
}

/// Spatial size after the five halvings shared by every backbone.
pub fn feature_map_size(height: usize, width: usize) -> (usize, usize) {
    let halve5 = |d: usize| (0..5).fold(d, |acc, _| acc.div_ceil(2));
    (halve5(height), halve5(width))
}

/// Per-gravity-point outputs for one image, in gravity-point order.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub scores: Vec<f64>,
    pub offsets: Vec<[f64; 2]>,
}

/// Raw head outputs for a batch: `(N, 2 * N_AP, H_FM, W_FM)` each.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub cls: Tensor,
    pub reg: Tensor,
}

/// Head outputs of one image gathered into gravity-point order.
#[derive(Clone, Debug, Default)]
pub struct GatheredOutputs {
    pub lesion_logits: Vec<f64>,
    pub background_logits: Vec<f64>,
    pub offsets: Vec<[f64; 2]>,
}

impl HeadOutputs {
    fn channel_index(slot: usize, anchors: usize, plane: usize) -> (usize, usize) {
        let cell = slot / anchors;
        let a = slot % anchors;
        (2 * a * plane + cell, (2 * a + 1) * plane + cell)
    }

    pub fn gather(&self, image: usize, points: &GravityPointSet) -> GatheredOutputs {
        let anchors = points.per_grid_count;
        let plane = self.cls.plane();
        let cls = self.cls.sample(image);
        let reg = self.reg.sample(image);
        let mut out = GatheredOutputs {
            lesion_logits: Vec::with_capacity(points.len()),
            background_logits: Vec::with_capacity(points.len()),
            offsets: Vec::with_capacity(points.len()),
        };
        for &slot in &points.slots {
            let (c0, c1) = Self::channel_index(slot, anchors, plane);
            out.background_logits.push(cls[c0] as f64);
            out.lesion_logits.push(cls[c1] as f64);
            out.offsets.push([reg[c0] as f64, reg[c1] as f64]);
        }
        out
    }

    pub fn predictions(&self, image: usize, points: &GravityPointSet) -> Predictions {
        let g = self.gather(image, points);
        Predictions {
            scores: g.lesion_logits.iter().map(|&z| sigmoid(z)).collect(),
            offsets: g.offsets,
        }
    }

    /// Writes per-gravity-point gradients of one image back into head layout.
    pub fn scatter_grad(
        grad: &mut HeadOutputs,
        image: usize,
        points: &GravityPointSet,
        d_lesion: &[f64],
        d_background: &[f64],
        d_offsets: &[[f64; 2]],
    ) {
        let anchors = points.per_grid_count;
        let plane = grad.cls.plane();
        let cls = grad.cls.sample_mut(image);
        for (i, &slot) in points.slots.iter().enumerate() {
            let (c0, c1) = Self::channel_index(slot, anchors, plane);
            cls[c0] += d_background[i] as f32;
            cls[c1] += d_lesion[i] as f32;
        }
        let reg = grad.reg.sample_mut(image);
        for (i, &slot) in points.slots.iter().enumerate() {
            let (c0, c1) = Self::channel_index(slot, anchors, plane);
            reg[c0] += d_offsets[i][0] as f32;
            reg[c1] += d_offsets[i][1] as f32;
        }
    }

    pub fn zeros_like(&self) -> HeadOutputs {
        HeadOutputs {
            cls: Tensor::zeros(self.cls.n, self.cls.c, self.cls.h, self.cls.w),
            reg: Tensor::zeros(self.reg.n, self.reg.c, self.reg.h, self.reg.w),
        }
    }
}

pub struct Model {
    config: ModelConfig,
    backbone: Sequential,
    cls_head: Sequential,
    reg_head: Sequential,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

fn tiny_backbone(rng: &mut ChaCha8Rng) -> Sequential {
    let mut seq = Sequential::new();
    let mut in_c = 1;
    for (stage, &width) in TINY_WIDTHS.iter().enumerate() {
        // The first stage halves with a strided convolution instead of a
        // pool; at full resolution that is most of the cost otherwise.
        let stride = if stage == 0 { 2 } else { 1 };
        let mut conv = Conv2d::new(
            &format!("backbone.stage{}.conv", stage + 1),
            in_c,
            width,
            3,
            stride,
            1,
            true,
            Init::Kaiming,
            rng,
        );
        if stage == 0 {
            conv = conv.without_input_grad();
        }
        seq.push(conv);
        seq.push(Relu::new());
        if stage > 0 {
            seq.push(MaxPool2d::new(2, 2, 0, true));
        }
        in_c = width;
    }
    seq
}

fn conv_bn(
    name: &str,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> (Conv2d, BatchNorm2d) {
    (
        Conv2d::new(
            &format!("{name}.conv"),
            in_c,
            out_c,
            kernel,
            stride,
            kernel / 2,
            false,
            Init::Kaiming,
            rng,
        ),
        BatchNorm2d::new(&format!("{name}.bn"), out_c),
    )
}

fn residual_block(
    name: &str,
    in_c: usize,
    width: usize,
    stride: usize,
    bottleneck: bool,
    rng: &mut ChaCha8Rng,
) -> (Residual, usize) {
    let mut body = Sequential::new();
    let out_c = if bottleneck { width * 4 } else { width };
    let convs: Vec<(usize, usize, usize, usize)> = if bottleneck {
        vec![(in_c, width, 1, 1), (width, width, 3, stride), (width, out_c, 1, 1)]
    } else {
        vec![(in_c, width, 3, stride), (width, out_c, 3, 1)]
    };
    let last = convs.len() - 1;
    for (i, (ci, co, k, s)) in convs.into_iter().enumerate() {
        let (conv, bn) = conv_bn(&format!("{name}.{i}"), ci, co, k, s, rng);
        body.push(conv);
        body.push(bn);
        if i != last {
            body.push(Relu::new());
        }
    }
    let shortcut = (stride != 1 || in_c != out_c).then(|| {
        let mut s = Sequential::new();
        let (conv, bn) = conv_bn(&format!("{name}.down"), in_c, out_c, 1, stride, rng);
        s.push(conv);
        s.push(bn);
        s
    });
    (Residual::new(body, shortcut), out_c)
}

fn residual_backbone(bottleneck: bool, blocks: [usize; 4], rng: &mut ChaCha8Rng) -> Sequential {
    let mut seq = Sequential::new();
    // single-channel input replicated to the three channels of the stock stem
    seq.push(ChannelRepeat::new(3));
    let (stem, bn) = conv_bn("backbone.stem", 3, 64, 7, 2, rng);
    seq.push(stem.without_input_grad());
    seq.push(bn);
    seq.push(Relu::new());
    seq.push(MaxPool2d::new(3, 2, 1, false));
    let mut in_c = 64;
    for (stage, &count) in blocks.iter().enumerate() {
        let width = 64 << stage;
        for b in 0..count {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            let (block, out_c) = residual_block(
                &format!("backbone.layer{}.{b}", stage + 1),
                in_c,
                width,
                stride,
                bottleneck,
                rng,
            );
            seq.push(block);
            in_c = out_c;
        }
    }
    seq
}

/// Output layers start near zero so early offsets are small and scores sit at
/// the prior.
const OUTPUT_INIT_STD: f64 = 0.01;

fn head(name: &str, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Sequential {
    let mut seq = Sequential::new();
    let mut in_c = config.backbone_kind.feature_channels();
    for i in 0..config.head_depth {
        seq.push(Conv2d::new(
            &format!("{name}.{i}"),
            in_c,
            config.head_channels,
            3,
            1,
            1,
            true,
            Init::Kaiming,
            rng,
        ));
        seq.push(Relu::new());
        in_c = config.head_channels;
    }
    seq.push(Conv2d::new(
        &format!("{name}.out"),
        in_c,
        2 * config.anchors_per_position,
        3,
        1,
        1,
        true,
        Init::Normal(OUTPUT_INIT_STD),
        rng,
    ));
    seq
}

/// Shifts and scales every image to zero mean and unit variance, so the
/// weights see the same input range whatever the bit depth and exposure.
fn standardize(images: &Tensor) -> Tensor {
    let mut out = images.clone();
    let plane = images.c * images.h * images.w;
    for img in out.data.chunks_mut(plane) {
        let n = img.len() as f64;
        let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = 1.0 / var.sqrt().max(1e-6);
        img.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * scale) as f32);
    }
    out
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Model {
    /// Builds the network with seeded random weights: He initialization
    /// everywhere except the small-normal head outputs.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed, 0);
        let backbone = match config.backbone_kind.residual_layout() {
            None => tiny_backbone(&mut rng),
            Some((bottleneck, blocks)) => residual_backbone(bottleneck, blocks, &mut rng),
        };
        let mut model = Self {
            config: config.clone(),
            backbone,
            cls_head: Sequential::new(),
            reg_head: Sequential::new(),
        };
        model.init_heads(seed);
        Ok(model)
    }

    /// Builds the model and checks it against the gravity-point grid.
    pub fn build_for_grid(config: &ModelConfig, grid: &GridConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        config.check_grid(grid)?;
        Self::build(config, seed)
    }

    /// Re-draws both heads from `seed`. The lesion-channel
    /// bias starts at the logit of a small prior, the background channel at its negation.
    pub fn init_heads(&mut self, seed: u64) {
        let mut rng = seeded(seed, 1);
        self.cls_head = head("cls_head", &self.config, &mut rng);
        self.reg_head = head("reg_head", &self.config, &mut rng);
        let prior = (PRIOR_LESION_PROBABILITY / (1.0 - PRIOR_LESION_PROBABILITY)).ln() as f32;
        let mut params = Vec::new();
        self.cls_head.params_mut(&mut params);
        if let Some(bias) = params.into_iter().find(|p| p.name == "cls_head.out.bias") {
            for (i, b) in bias.value.iter_mut().enumerate() {
                *b = if i % 2 == 1 { prior } else { -prior };
            }
        }
    }

    fn scale_offsets(&self, mut t: Tensor) -> Tensor {
        let s = self.config.offset_scale as f32;
        if s != 1.0 {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
        t
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        if images.c != 1 {
            return Err(Error::InvalidInputShape(format!(
                "expected single-channel images, got {} channels",
                images.c
            )));
        }
        if images.n == 0 || images.h == 0 || images.w == 0 {
            return Err(Error::InvalidInputShape(format!(
                "empty input batch {:?}",
                images.shape()
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass returning raw head outputs.
    pub fn infer_heads(&self, images: &Tensor) -> Result<HeadOutputs> {
        self.check_input(images)?;
        let features = self.backbone.infer(standardize(images));
        Ok(HeadOutputs {
            cls: self.cls_head.infer(features.clone()),
            reg: self.scale_offsets(self.reg_head.infer(features)),
        })
    }

    /// Scores and offsets per image, in the gravity-point order of `points`.
    pub fn forward(&self, images: &Tensor, points: &GravityPointSet) -> Result<Vec<Predictions>> {
        self.check_input(images)?;
        let (fh, fw) = feature_map_size(images.h, images.w);
        if (fh, fw) != (points.fm_height, points.fm_width) {
            return Err(Error::InvalidInputShape(format!(
                "{}x{} images map to a {fh}x{fw} feature map, gravity points expect {}x{}",
                images.h, images.w, points.fm_height, points.fm_width
            )));
        }
        if points.per_grid_count != self.config.anchors_per_position {
            return Err(Error::ConfigurationMismatch(format!(
                "gravity points have {} per feature grid, model has {}",
                points.per_grid_count, self.config.anchors_per_position
            )));
        }
        let heads = self.infer_heads(images)?;
        Ok((0..images.n).map(|i| heads.predictions(i, points)).collect())
    }

    /// Training-mode forward pass; caches activations for [`Model::backward`].
    pub fn forward_train(&mut self, images: &Tensor) -> Result<HeadOutputs> {
        self.check_input(images)?;
        let features = self.backbone.forward(standardize(images));
        Ok(HeadOutputs {
            cls: self.cls_head.forward(features.clone()),
            reg: {
                let raw = self.reg_head.forward(features);
                self.scale_offsets(raw)
            },
        })
    }

    /// Accumulates parameter gradients from the gradient of the head outputs.
    pub fn backward(&mut self, grad: HeadOutputs) {
        let mut d_features = self.cls_head.backward(grad.cls);
        let d_reg = self.scale_offsets(grad.reg);
        d_features.add_assign(&self.reg_head.backward(d_reg));
        self.backbone.backward(d_features);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.backbone.params(&mut out);
        self.cls_head.params(&mut out);
        self.reg_head.params(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.backbone.params_mut(&mut out);
        self.cls_head.params_mut(&mut out);
        self.reg_head.params_mut(&mut out);
        out
    }

    /// Parameters of one head, `"cls_head"` or `"reg_head"`.
    pub fn head_params(&self, prefix: &str) -> Vec<&Param> {
        self.params()
            .into_iter()
            .filter(|p| p.name.starts_with(prefix))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.len())
            .sum()
    }

    /// Copies parameter values by name from `source`; returns how many were
    /// copied. Used to load pretrained backbone weights.
    pub fn load_named(&mut self, source: &[(String, Vec<f32>)], prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for p in self.params_mut().into_iter().filter(|p| p.name.starts_with(prefix)) {
            if let Some((_, v)) = source.iter().find(|(n, _)| *n == p.name) {
                if v.len() != p.len() {
                    return Err(Error::Checkpoint(format!(
                        "parameter {} has {} values, expected {}",
                        p.name,
                        v.len(),
                        p.len()
                    )));
                }
                p.value.copy_from_slice(v);
                copied += 1;
            }
        }
        Ok(copied)
    }
}
