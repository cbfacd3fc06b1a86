//! The segmenter: a U-Net (E1 encoder, D1 decoder) whose bottleneck is fused
//! with the five-crop latent of the feature extractor, plus the optional
//! reconstruction head E3 that re-derives that latent from the last decoder
//! feature map.
//!
//! Layout for `stages = 7`, base `b`, tile 256:
//!
//! ```text
//! E1   7 x [conv3x3 + BN + ReLU] x 2, maxpool     b .. 64b, 256 -> 2
//! B    conv3x3 64b -> 128b, BN, ReLU
//!      concat injected latent (fgss only)         128b + 1280 at 2x2
//!      conv3x3 -> 128b, BN, ReLU
//! D1   7 x transpose3x3/2 (halving), concat skip, [conv3x3 + BN + ReLU] x 2
//! out  conv1x1 b -> 1 (logits)
//! E3   conv3x3/2 chain on the b-channel map, BN + ReLU except the last
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::composite_parameters;
use crate::error::{ensure, Error, Result};
use crate::featx::{FeatExConfig, LatentBlock};
use crate::nn::layers::{Conv2d, ConvBlock, ConvStack, ConvTranspose2d, MaxPool2};
use crate::nn::loss::{bce_with_logits, mse};
use crate::nn::{Init, Scalar, Tensor};
use crate::raster::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fgss,
    Unet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SegmenterConfig {
    pub variant: Variant,
    pub base_channels: usize,
    pub stages: usize,
    pub tile_side: usize,
    pub in_channels: usize,
    pub with_reconstruction_head: bool,
    /// Output channels of each stride-2 E3 convolution; the last entry
    /// must equal the injected channel count.
    pub e3_channels: Vec<usize>,
    /// Feature extractor whose crop-set latent is injected (fgss only).
    pub featx: Option<FeatExConfig>,
}

/// E3 plan for the full-size networks.
pub const E3_PLAN: [usize; 7] = [4, 8, 16, 32, 32, 64, 1280];

impl SegmenterConfig {
    pub fn fgss(base: usize) -> Self {
        Self {
            variant: Variant::Fgss,
            base_channels: base,
            stages: 7,
            tile_side: 256,
            in_channels: 1,
            with_reconstruction_head: true,
            e3_channels: E3_PLAN.to_vec(),
            featx: Some(FeatExConfig::default()),
        }
    }

    pub fn unet(base: usize) -> Self {
        Self {
            variant: Variant::Unet,
            with_reconstruction_head: false,
            e3_channels: Vec::new(),
            featx: None,
            ..Self::fgss(base)
        }
    }

    pub fn without_reconstruction(mut self) -> Self {
        self.with_reconstruction_head = false;
        self.e3_channels.clear();
        self
    }

    /// `fgss16`, `fgss32`, `unet16`, `unet32`, optionally with `-norec`.
    pub fn named(name: &str) -> Result<Self> {
        let (stem, norec) = match name.strip_suffix("-norec") {
            Some(s) => (s, true),
            None => (name, false),
        };
        let cfg = match stem {
            "fgss16" => Self::fgss(16),
            "fgss32" => Self::fgss(32),
            "unet16" => Self::unet(16),
            "unet32" => Self::unet(32),
            _ => return Err(Error::InvalidArgument(format!("unknown model variant {name:?}"))),
        };
        Ok(if norec { cfg.without_reconstruction() } else { cfg })
    }

    /// Four-stage network on 32x32 tiles fed by the miniature extractor.
    pub fn miniature(variant: Variant) -> Self {
        let featx = FeatExConfig::miniature();
        let injected = featx.crop_set_channels();
        let cfg = Self {
            variant,
            base_channels: 2,
            stages: 4,
            tile_side: 32,
            in_channels: 1,
            with_reconstruction_head: true,
            e3_channels: vec![2, 2, 2, injected],
            featx: Some(featx),
        };
        match variant {
            Variant::Fgss => cfg,
            Variant::Unet => Self {
                featx: None,
                ..cfg.without_reconstruction()
            },
        }
    }

    /// A narrower or smaller-tile version of a named variant that still
    /// meets the full-size extractor at a 2x2 bottleneck: `stages` is
    /// `log2(tile / 2)` and E3 keeps the last `stages` entries of its plan.
    pub fn scaled(variant: Variant, base: usize, tile_side: usize) -> Result<Self> {
        ensure!(
            tile_side.is_power_of_two() && (4..=256).contains(&tile_side),
            InvalidArgument,
            "scaled tile side must be a power of two in [4, 256], got {tile_side}"
        );
        let stages = tile_side.trailing_zeros() as usize - 1;
        let mut cfg = match variant {
            Variant::Fgss => Self::fgss(base),
            Variant::Unet => Self::unet(base),
        };
        cfg.tile_side = tile_side;
        cfg.stages = stages;
        if cfg.has_e3() {
            cfg.e3_channels = E3_PLAN[E3_PLAN.len() - stages..].to_vec();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Human-readable name in the `[base-bottleneck]` style.
    pub fn display_name(&self) -> String {
        let head = match self.variant {
            Variant::Fgss => "FGSSNet",
            Variant::Unet => "U-Net",
        };
        let tail = if self.variant == Variant::Fgss && !self.with_reconstruction_head {
            "-NoRec"
        } else {
            ""
        };
        let top = self.base_channels << self.stages.saturating_sub(1);
        format!("{head}-[{}-{top}]{tail}", self.base_channels)
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.stages).map(|i| self.base_channels << i).collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.stages
    }

    /// Spatial side at the bottleneck.
    pub fn latent_side(&self) -> usize {
        self.tile_side >> self.stages
    }

    pub fn injected_channels(&self) -> usize {
        match (&self.featx, self.variant) {
            (Some(f), Variant::Fgss) => f.crop_set_channels(),
            _ => 0,
        }
    }

    /// Channels of the bottleneck block after fusion.
    pub fn fused_channels(&self) -> usize {
        self.bottleneck_channels() + self.injected_channels()
    }

    pub fn has_e3(&self) -> bool {
        self.variant == Variant::Fgss && self.with_reconstruction_head
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.base_channels > 0 && self.stages > 0 && self.in_channels > 0,
            InvalidArgument,
            "segmenter needs positive base channels, stages and input channels"
        );
        ensure!(
            self.tile_side % (1 << self.stages) == 0 && self.latent_side() >= 1,
            Shape,
            "tile side {} is not divisible by 2^{}",
            self.tile_side,
            self.stages
        );
        match self.variant {
            Variant::Fgss => {
                let f = self
                    .featx
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("fgss variant needs a feature extractor config".into()))?;
                f.validate()?;
                ensure!(
                    f.latent_side() == self.latent_side(),
                    Shape,
                    "injected latent side {} does not match bottleneck side {}",
                    f.latent_side(),
                    self.latent_side()
                );
            }
            Variant::Unet => ensure!(
                !self.with_reconstruction_head,
                InvalidArgument,
                "the plain U-Net has nothing to reconstruct"
            ),
        }
        if self.has_e3() {
            ensure!(
                self.e3_channels.len() == self.stages,
                Shape,
                "E3 needs one stride-2 stage per U-Net stage ({}), got {}",
                self.stages,
                self.e3_channels.len()
            );
            ensure!(
                self.e3_channels.last() == Some(&self.injected_channels()),
                Shape,
                "E3 must end on the {} injected channels",
                self.injected_channels()
            );
        }
        Ok(())
    }

    /// Every weighted layer with its shapes, in forward order.
    pub fn layer_plan(&self) -> Result<Vec<LayerShape>> {
        self.validate()?;
        let mut plan = Vec::new();
        let mut side = self.tile_side;
        let mut cin = self.in_channels;
        let chans = self.stage_channels();
        for &c in &chans {
            plan.push(LayerShape::conv(Module::E1, cin, c, 3, side, side));
            plan.push(LayerShape::conv(Module::E1, c, c, 3, side, side));
            cin = c;
            side /= 2;
        }
        let b = self.bottleneck_channels();
        plan.push(LayerShape::conv(Module::Bottleneck, cin, b, 3, side, side));
        plan.push(LayerShape::conv(Module::Bottleneck, self.fused_channels(), b, 3, side, side));
        cin = b;
        for &c in chans.iter().rev() {
            plan.push(LayerShape::transpose(Module::D1, cin, c, 3, side, side * 2));
            side *= 2;
            plan.push(LayerShape::conv(Module::D1, 2 * c, c, 3, side, side));
            plan.push(LayerShape::conv(Module::D1, c, c, 3, side, side));
            cin = c;
        }
        plan.push(LayerShape::conv(Module::Output, cin, 1, 1, side, side).without_norm());
        if self.has_e3() {
            let n = self.e3_channels.len();
            for (i, &c) in self.e3_channels.iter().enumerate() {
                let mut l = LayerShape::conv(Module::E3, cin, c, 3, side, side / 2);
                if i + 1 == n {
                    l = l.without_norm();
                }
                plan.push(l);
                cin = c;
                side /= 2;
            }
        }
        if let (Variant::Fgss, Some(f)) = (self.variant, &self.featx) {
            plan.extend(extractor_plan(f));
        }
        Ok(plan)
    }
}

impl fmt::Display for SegmenterConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display_name())
    }
}

/// E2 and width head of the extractor; E2 runs once per crop.
fn extractor_plan(f: &FeatExConfig) -> Vec<LayerShape> {
    let mut plan = Vec::new();
    let mut side = f.input_side;
    let mut cin = f.in_channels;
    let repeat = crate::pipeline::CropTag::ALL.len();
    for (&c, &n) in f.stage_channels.iter().zip(&f.convs_per_stage) {
        for _ in 0..n {
            let mut l = LayerShape::conv(Module::E2, cin, c, 3, side, side);
            l.repeat = repeat;
            plan.push(l);
            cin = c;
        }
        side /= 2;
    }
    let mut head = LayerShape::linear(Module::E2, cin, f.width_classes);
    head.repeat = repeat;
    plan.push(head);
    plan
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    E1,
    Bottleneck,
    D1,
    Output,
    E3,
    /// Feature-extractor encoder plus width head.
    E2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LayerShape {
    pub module: Module,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub in_side: usize,
    pub out_side: usize,
    /// Followed by an affine batch norm.
    pub normalized: bool,
    /// Applications per forward pass.
    pub repeat: usize,
}

impl LayerShape {
    fn conv(module: Module, cin: usize, cout: usize, k: usize, in_side: usize, out_side: usize) -> Self {
        Self {
            module,
            kind: LayerKind::Conv,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            in_side,
            out_side,
            normalized: true,
            repeat: 1,
        }
    }

    fn transpose(module: Module, cin: usize, cout: usize, k: usize, in_side: usize, out_side: usize) -> Self {
        Self {
            kind: LayerKind::ConvTranspose,
            normalized: false,
            ..Self::conv(module, cin, cout, k, in_side, out_side)
        }
    }

    fn linear(module: Module, cin: usize, cout: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            normalized: false,
            ..Self::conv(module, cin, cout, 1, 1, 1)
        }
    }

    fn without_norm(mut self) -> Self {
        self.normalized = false;
        self
    }

    /// Weights, bias and (if present) batch-norm scale and shift.
    pub fn parameters(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        self.in_channels * self.out_channels * k2 + self.out_channels + if self.normalized { 2 * self.out_channels } else { 0 }
    }

    /// Multiply-accumulates per forward pass.
    pub fn macs(&self) -> u64 {
        let k2 = (self.kernel * self.kernel) as u64;
        let per_position = self.in_channels as u64 * self.out_channels as u64 * k2;
        let positions = match self.kind {
            // Every input pixel scatters a full kernel.
            LayerKind::ConvTranspose => (self.in_side * self.in_side) as u64,
            LayerKind::Conv | LayerKind::Linear => (self.out_side * self.out_side) as u64,
        };
        per_position * positions * self.repeat as u64
    }
}

/// Analytic size of a configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ParameterReport {
    pub name: String,
    pub per_module: BTreeMap<Module, usize>,
    pub total: usize,
    /// float32 size, `total * 4 / 2^20`.
    pub mib: f64,
    /// Multiply-accumulates of one forward pass over a tile (including E2
    /// on the five crops for fgss variants).
    pub macs: u64,
}

/// Counts parameters from the layer plan without allocating weights.
pub fn count_parameters(config: &SegmenterConfig) -> Result<ParameterReport> {
    let plan = config.layer_plan()?;
    let mut per_module = BTreeMap::new();
    for l in &plan {
        *per_module.entry(l.module).or_insert(0) += l.parameters();
    }
    let total = per_module.values().sum();
    Ok(ParameterReport {
        name: config.display_name(),
        per_module,
        total,
        mib: total as f64 * 4.0 / (1u64 << 20) as f64,
        macs: plan.iter().map(LayerShape::macs).sum(),
    })
}

/// Tensor shapes along the network, checked for consistency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ShapeAudit {
    /// `(channels, side)` after each E1 stage (post pooling).
    pub encoder: Vec<(usize, usize)>,
    /// `(upsampled channels, skip channels, side)` entering each D1 stage.
    pub decoder_concat: Vec<(usize, usize, usize)>,
    pub crop_latent: Option<(usize, usize)>,
    pub crop_set_latent: Option<(usize, usize)>,
    pub fused: (usize, usize),
    pub logits: (usize, usize),
    pub e3_output: Option<(usize, usize)>,
}

pub fn shape_audit(config: &SegmenterConfig) -> Result<ShapeAudit> {
    config.validate()?;
    let chans = config.stage_channels();
    let encoder: Vec<(usize, usize)> = chans
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, config.tile_side >> (i + 1)))
        .collect();
    let decoder_concat = chans
        .iter()
        .enumerate()
        .rev()
        .map(|(i, &c)| (c, c, config.tile_side >> i))
        .collect();
    let side = config.latent_side();
    let featx = config.featx.as_ref().filter(|_| config.variant == Variant::Fgss);
    Ok(ShapeAudit {
        encoder,
        decoder_concat,
        crop_latent: featx.map(|f| (f.latent_channels(), f.latent_side())),
        crop_set_latent: featx.map(|f| (f.crop_set_channels(), f.latent_side())),
        fused: (config.fused_channels(), side),
        logits: (1, config.tile_side),
        e3_output: config.has_e3().then(|| (config.injected_channels(), side)),
    })
}

/// E3: stride-2 3x3 convolutions, batch norm + ReLU on all but the last.
#[derive(Clone, Debug)]
pub struct ReconstructionHead<T> {
    pub blocks: Vec<ConvBlock<T>>,
}

impl<T: Scalar> ReconstructionHead<T> {
    pub fn new(in_ch: usize, plan: &[usize], init: &mut Init) -> Self {
        let mut cin = in_ch;
        let blocks = plan
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let b = ConvBlock::new(Conv2d::new(cin, c, 3, 2, 1, init), i + 1 < plan.len(), init);
                cin = c;
                b
            })
            .collect();
        Self { blocks }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.blocks.iter().fold(x.clone(), |h, b| b.infer(&h))
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.blocks.iter_mut().fold(x.clone(), |h, b| b.forward(&h))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        self.blocks.iter_mut().rev().fold(dy.clone(), |d, b| b.backward(&d))
    }
}

composite_parameters!(ReconstructionHead { blocks });

#[derive(Clone, Debug)]
pub struct Segmenter<T> {
    config: SegmenterConfig,
    pub down: Vec<ConvStack<T>>,
    pools: Vec<MaxPool2>,
    /// Convolutions before and after the fusion point.
    pub bottleneck: Vec<ConvBlock<T>>,
    pub up: Vec<ConvTranspose2d<T>>,
    pub up_convs: Vec<ConvStack<T>>,
    pub output: Conv2d<T>,
    pub e3: Option<ReconstructionHead<T>>,
}

composite_parameters!(Segmenter { down, bottleneck, up, up_convs, output, e3 });

/// Eval-mode result for one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct SegOutput {
    /// `[1, 1, side, side]`.
    pub logits: Tensor<f32>,
    pub e3_reconstruction: Option<LatentBlock>,
}

/// Forward results of a batch.
#[derive(Clone, Debug)]
pub struct SegForward<T> {
    pub logits: Tensor<T>,
    pub e3: Option<Tensor<T>>,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(config: SegmenterConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let chans = config.stage_channels();
        let mut cin = config.in_channels;
        let mut down = Vec::new();
        for &c in &chans {
            down.push(ConvStack::same(cin, c, 2, init));
            cin = c;
        }
        let b = config.bottleneck_channels();
        let bottleneck = vec![ConvBlock::same(cin, b, init), ConvBlock::same(config.fused_channels(), b, init)];
        cin = b;
        let (mut up, mut up_convs) = (Vec::new(), Vec::new());
        for &c in chans.iter().rev() {
            up.push(ConvTranspose2d::new(cin, c, 3, 2, 1, 1, init));
            up_convs.push(ConvStack::same(2 * c, c, 2, init));
            cin = c;
        }
        let output = Conv2d::new(cin, 1, 1, 1, 0, init);
        let e3 = config
            .has_e3()
            .then(|| ReconstructionHead::new(cin, &config.e3_channels, init));
        Ok(Self {
            pools: chans.iter().map(|_| MaxPool2::new()).collect(),
            config,
            down,
            bottleneck,
            up,
            up_convs,
            output,
            e3,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    fn check_inputs(&self, x: &Tensor<T>, injected: Option<&Tensor<T>>) -> Result<()> {
        let c = &self.config;
        ensure!(
            x.shape()[1..] == [c.in_channels, c.tile_side, c.tile_side],
            Shape,
            "tile batch {:?} does not match {}x{}x{} input",
            x.shape(),
            c.in_channels,
            c.tile_side,
            c.tile_side
        );
        match (c.variant, injected) {
            (Variant::Fgss, Some(z)) => ensure!(
                z.shape() == [x.n(), c.injected_channels(), c.latent_side(), c.latent_side()],
                Shape,
                "injected latent {:?} does not match {}x{}x{} per tile",
                z.shape(),
                c.injected_channels(),
                c.latent_side(),
                c.latent_side()
            ),
            (Variant::Fgss, None) => {
                return Err(Error::InvalidArgument("fgss model needs an injected crop-set latent".into()))
            }
            (Variant::Unet, Some(_)) => {
                return Err(Error::InvalidArgument("plain U-Net takes no injected latent".into()))
            }
            (Variant::Unet, None) => {}
        }
        Ok(())
    }

    /// Eval-mode forward of a batch `[N, C, S, S]`.
    pub fn infer(&self, x: &Tensor<T>, injected: Option<&Tensor<T>>) -> Result<SegForward<T>> {
        self.check_inputs(x, injected)?;
        let n = self.down.len();
        let mut skips = Vec::with_capacity(n);
        let mut h = x.clone();
        for (s, p) in self.down.iter().zip(&self.pools) {
            let y = s.infer(&h);
            h = p.infer(&y);
            skips.push(y);
        }
        h = self.bottleneck[0].infer(&h);
        if let Some(z) = injected {
            h = Tensor::concat_channels(&h, z);
        }
        h = self.bottleneck[1].infer(&h);
        for (j, (u, c)) in self.up.iter().zip(&self.up_convs).enumerate() {
            h = c.infer(&Tensor::concat_channels(&u.infer(&h), &skips[n - 1 - j]));
        }
        Ok(SegForward {
            logits: self.output.infer(&h),
            e3: self.e3.as_ref().map(|e| e.infer(&h)),
        })
    }

    /// Eval-mode forward of one tile.
    pub fn forward_tile(&self, tile: &Raster, injected: Option<&LatentBlock>) -> Result<SegOutput> {
        let z = injected.map(|l| l.to_tensor::<T>());
        let out = self.infer(&tile.to_tensor(), z.as_ref())?;
        Ok(SegOutput {
            logits: out.logits.cast(),
            e3_reconstruction: out.e3.as_ref().map(LatentBlock::from_tensor),
        })
    }

    /// Training-mode forward; caches what [`Self::backward`] needs.
    pub fn forward(&mut self, x: &Tensor<T>, injected: Option<&Tensor<T>>) -> Result<SegForward<T>> {
        self.check_inputs(x, injected)?;
        let n = self.down.len();
        let mut skips = Vec::with_capacity(n);
        let mut h = x.clone();
        for (s, p) in self.down.iter_mut().zip(self.pools.iter_mut()) {
            let y = s.forward(&h);
            h = p.forward(&y);
            skips.push(y);
        }
        h = self.bottleneck[0].forward(&h);
        if let Some(z) = injected {
            h = Tensor::concat_channels(&h, z);
        }
        h = self.bottleneck[1].forward(&h);
        for (j, (u, c)) in self.up.iter_mut().zip(self.up_convs.iter_mut()).enumerate() {
            h = c.forward(&Tensor::concat_channels(&u.forward(&h), &skips[n - 1 - j]));
        }
        Ok(SegForward {
            logits: self.output.forward(&h),
            e3: self.e3.as_mut().map(|e| e.forward(&h)),
        })
    }

    /// Back-propagates logit and E3 gradients, accumulating parameter
    /// gradients. Returns the gradient of the injected latent, if any.
    pub fn backward(&mut self, dlogits: &Tensor<T>, de3: Option<&Tensor<T>>) -> Option<Tensor<T>> {
        let mut dh = self.output.backward(dlogits);
        if let (Some(e3), Some(g)) = (self.e3.as_mut(), de3) {
            dh.add_assign(&e3.backward(g));
        }
        let n = self.down.len();
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; n];
        for j in (0..n).rev() {
            let d = self.up_convs[j].backward(&dh);
            let (du, ds) = d.split_channels(self.up[j].out_channels());
            dskips[n - 1 - j] = Some(ds);
            dh = self.up[j].backward(&du);
        }
        let d = self.bottleneck[1].backward(&dh);
        let (db, dinj) = if self.config.variant == Variant::Fgss {
            let (a, b) = d.split_channels(self.config.bottleneck_channels());
            (a, Some(b))
        } else {
            (d, None)
        };
        dh = self.bottleneck[0].backward(&db);
        for i in (0..n).rev() {
            let mut d = self.pools[i].backward(&dh);
            d.add_assign(dskips[i].as_ref().expect("filled by the decoder pass"));
            dh = self.down[i].backward(&d);
        }
        dinj
    }

    /// Forward + backward of the combined loss on a batch; gradients
    /// accumulate into the parameters.
    pub fn accumulate_gradients(
        &mut self,
        tiles: &Tensor<T>,
        masks: &Tensor<T>,
        injected: Option<&Tensor<T>>,
        weights: SegLossWeights,
    ) -> Result<SegLossValue> {
        let out = self.forward(tiles, injected)?;
        let l = seg_loss(&out.logits, masks, out.e3.as_ref(), injected.filter(|_| out.e3.is_some()), weights)?;
        self.backward(&l.dlogits, l.de3.as_ref());
        Ok(l.value)
    }

    /// Loss of a training-mode forward, without touching gradients.
    pub fn training_loss(
        &mut self,
        tiles: &Tensor<T>,
        masks: &Tensor<T>,
        injected: Option<&Tensor<T>>,
        weights: SegLossWeights,
    ) -> Result<f64> {
        let out = self.forward(tiles, injected)?;
        let l = seg_loss(&out.logits, masks, out.e3.as_ref(), injected.filter(|_| out.e3.is_some()), weights)?;
        Ok(l.value.loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegLossWeights {
    pub w3: f64,
    pub w4: f64,
}

impl Default for SegLossWeights {
    fn default() -> Self {
        Self { w3: 1.0, w4: 0.3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SegLossValue {
    pub loss: f64,
    pub bce: f64,
    /// Zero when no reconstruction head is present.
    pub recon_mse: f64,
}

#[derive(Clone, Debug)]
pub struct SegLoss<T> {
    pub value: SegLossValue,
    pub dlogits: Tensor<T>,
    pub de3: Option<Tensor<T>>,
}

/// `w3 * BCE(logits, gt) + w4 * MSE(e3, injected)`, the second term only
/// when both are present.
pub fn seg_loss<T: Scalar>(
    logits: &Tensor<T>,
    gt: &Tensor<T>,
    e3: Option<&Tensor<T>>,
    injected: Option<&Tensor<T>>,
    weights: SegLossWeights,
) -> Result<SegLoss<T>> {
    ensure!(
        logits.shape() == gt.shape(),
        Shape,
        "logits {:?} and mask {:?} differ",
        logits.shape(),
        gt.shape()
    );
    let (bce, mut dlogits) = bce_with_logits(logits, gt);
    let w3 = T::lit(weights.w3);
    dlogits.data_mut().iter_mut().for_each(|g| *g *= w3);
    let (recon, de3) = match (e3, injected) {
        (Some(e), Some(z)) => {
            ensure!(
                e.shape() == z.shape(),
                Shape,
                "E3 output {:?} and injected latent {:?} differ",
                e.shape(),
                z.shape()
            );
            let (l, mut g) = mse(e, z);
            let w4 = T::lit(weights.w4);
            g.data_mut().iter_mut().for_each(|v| *v *= w4);
            (l, Some(g))
        }
        (None, None) => (0.0, None),
        _ => {
            return Err(Error::InvalidArgument(
                "E3 output and injected latent must be both present or both absent".into(),
            ))
        }
    };
    Ok(SegLoss {
        value: SegLossValue {
            loss: weights.w3 * bce + weights.w4 * recon,
            bce,
            recon_mse: recon,
        },
        dlogits,
        de3,
    })
}
