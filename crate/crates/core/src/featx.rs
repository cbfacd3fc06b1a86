//! Dedicated wall-crop feature extractor.
//!
//! Three parts share one latent: the encoder (E2) compresses a 64x64 wall
//! crop into a `256 x 2 x 2` block, the decoder (D2) reconstructs the crop from
//! it during training, and the width head classifies the wall thickness.
//! After training only the encoder and head are kept; the encoder output of
//! the five crops of a floorplan is what the segmenter receives.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::composite_parameters;
use crate::error::{ensure, Result};
use crate::nn::layers::{
    global_avg_pool, global_avg_pool_backward, sigmoid, Conv2d, ConvStack, ConvTranspose2d, Dropout,
    Linear, MaxPool2, Relu,
};
use crate::nn::loss::{cross_entropy, mse};
use crate::nn::{Init, Scalar, Tensor};
use crate::pipeline::{CropTag, WallCropSet};
use crate::raster::Raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FeatExConfig {
    pub input_side: usize,
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: Vec<usize>,
    pub width_classes: usize,
    pub dropout: f64,
}

impl Default for FeatExConfig {
    fn default() -> Self {
        Self {
            input_side: 64,
            in_channels: 1,
            stage_channels: vec![16, 32, 64, 128, 256],
            convs_per_stage: vec![2, 2, 2, 3, 3],
            width_classes: 64,
            dropout: 0.5,
        }
    }
}

impl FeatExConfig {
    /// Three-stage network on 16x16 inputs, small enough for finite differences.
    pub fn miniature() -> Self {
        Self {
            input_side: 16,
            in_channels: 1,
            stage_channels: vec![2, 2, 2],
            convs_per_stage: vec![2, 2, 3],
            width_classes: 8,
            dropout: 0.5,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn latent_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    pub fn latent_side(&self) -> usize {
        self.input_side >> self.stages()
    }

    /// Channel count of the five-crop injection block.
    pub fn crop_set_channels(&self) -> usize {
        CropTag::ALL.len() * self.latent_channels()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.stages() > 0, InvalidArgument, "feature extractor needs at least one stage");
        ensure!(
            self.convs_per_stage.len() == self.stages(),
            InvalidArgument,
            "convsPerStage has {} entries for {} stages",
            self.convs_per_stage.len(),
            self.stages()
        );
        ensure!(
            self.input_side % (1 << self.stages()) == 0 && self.latent_side() >= 1,
            InvalidArgument,
            "input side {} is not divisible by 2^{}",
            self.input_side,
            self.stages()
        );
        ensure!(
            self.in_channels > 0 && self.width_classes > 0,
            InvalidArgument,
            "channel and class counts must be positive"
        );
        ensure!(
            self.stage_channels.iter().chain(&self.convs_per_stage).all(|&c| c > 0),
            InvalidArgument,
            "stage channels and conv counts must be positive"
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            InvalidArgument,
            "dropout {} outside [0, 1)",
            self.dropout
        );
        Ok(())
    }

    /// Decoder output channels per up-stage: the encoder plan reversed,
    /// ending on the first stage width (256, 128, 64, 32, 16 -> 128, 64, 32, 16, 16).
    pub fn decoder_channels(&self) -> Vec<usize> {
        let mut plan: Vec<usize> = self.stage_channels.iter().rev().skip(1).copied().collect();
        plan.push(self.stage_channels[0]);
        plan
    }
}

/// Feature block of `channels x side x side` values.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBlock {
    pub channels: usize,
    pub side: usize,
    pub values: Vec<f32>,
}

impl LatentBlock {
    pub fn new(channels: usize, side: usize, values: Vec<f32>) -> Result<Self> {
        ensure!(
            values.len() == channels * side * side,
            Shape,
            "latent of {channels}x{side}x{side} needs {} values, got {}",
            channels * side * side,
            values.len()
        );
        Ok(Self { channels, side, values })
    }

    pub fn zeros(channels: usize, side: usize) -> Self {
        Self {
            channels,
            side,
            values: vec![0.0; channels * side * side],
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec([1, self.channels, self.side, self.side], self.values.clone()).cast()
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        assert_eq!(t.n(), 1, "latent block holds one sample");
        assert_eq!(t.h(), t.w());
        Self {
            channels: t.c(),
            side: t.h(),
            values: t.cast::<f32>().into_vec(),
        }
    }

    /// Channel slice `[from, from + count)`.
    pub fn channel_range(&self, from: usize, count: usize) -> &[f32] {
        let plane = self.side * self.side;
        &self.values[from * plane..(from + count) * plane]
    }
}

/// Width-classification scores; class `k` stands for a wall `k + 1` pixels wide.
#[derive(Clone, Debug, PartialEq)]
pub struct WidthLogits(pub Vec<f32>);

impl WidthLogits {
    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    pub fn predicted_width(&self) -> u32 {
        self.argmax() as u32 + 1
    }
}

/// Class index for a wall width; widths beyond the last class are clamped.
pub fn width_class(width_px: u32, classes: usize) -> usize {
    (width_px.max(1) as usize - 1).min(classes - 1)
}

/// Encoder E2: stacks of 3x3 conv + BN + ReLU, each followed by 2x2 max pooling.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub stages: Vec<ConvStack<T>>,
    pools: Vec<MaxPool2>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &FeatExConfig, init: &mut Init) -> Self {
        let mut cin = cfg.in_channels;
        let mut stages = Vec::new();
        for (&c, &n) in cfg.stage_channels.iter().zip(&cfg.convs_per_stage) {
            stages.push(ConvStack::same(cin, c, n, init));
            cin = c;
        }
        let pools = stages.iter().map(|_| MaxPool2::new()).collect();
        Self { stages, pools }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for (s, p) in self.stages.iter().zip(&self.pools) {
            h = p.infer(&s.infer(&h));
        }
        h
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for (s, p) in self.stages.iter_mut().zip(self.pools.iter_mut()) {
            h = p.forward(&s.forward(&h));
        }
        h
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut d = dy.clone();
        for (s, p) in self.stages.iter_mut().zip(self.pools.iter_mut()).rev() {
            d = s.backward(&p.backward(&d));
        }
        d
    }
}

composite_parameters!(Encoder { stages });

/// Decoder D2: one stride-2 transposed 3x3 conv + ReLU per stage, then a
/// pointwise projection with sigmoid back to image range.
#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub ups: Vec<ConvTranspose2d<T>>,
    relus: Vec<Relu<T>>,
    pub project: Conv2d<T>,
    out: Option<Tensor<T>>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(cfg: &FeatExConfig, init: &mut Init) -> Self {
        let mut cin = cfg.latent_channels();
        let mut ups = Vec::new();
        for c in cfg.decoder_channels() {
            ups.push(ConvTranspose2d::new(cin, c, 3, 2, 1, 1, init));
            cin = c;
        }
        let relus = ups.iter().map(|_| Relu::new()).collect();
        let project = Conv2d::new(cin, cfg.in_channels, 1, 1, 0, init);
        Self {
            ups,
            relus,
            project,
            out: None,
        }
    }

    pub fn infer(&self, z: &Tensor<T>) -> Tensor<T> {
        let mut h = z.clone();
        for (u, r) in self.ups.iter().zip(&self.relus) {
            h = r.infer(&u.infer(&h));
        }
        self.project.infer(&h).map(sigmoid)
    }

    pub fn forward(&mut self, z: &Tensor<T>) -> Tensor<T> {
        let mut h = z.clone();
        for (u, r) in self.ups.iter_mut().zip(self.relus.iter_mut()) {
            h = r.forward(&u.forward(&h));
        }
        let y = self.project.forward(&h).map(sigmoid);
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("decoder backward without forward");
        let mut d = dy.clone();
        for (g, &v) in d.data_mut().iter_mut().zip(y.data()) {
            *g *= v * (T::one() - v);
        }
        let mut d = self.project.backward(&d);
        for (u, r) in self.ups.iter_mut().zip(self.relus.iter_mut()).rev() {
            d = u.backward(&r.backward(&d));
        }
        d
    }
}

composite_parameters!(Decoder { ups, project });

/// Width head: global average pool, dropout, fully connected layer.
#[derive(Clone, Debug)]
pub struct WidthHead<T> {
    dropout: Dropout,
    pub fc: Linear<T>,
    in_shape: Option<[usize; 4]>,
}

impl<T: Scalar> WidthHead<T> {
    pub fn new(cfg: &FeatExConfig, init: &mut Init) -> Self {
        Self {
            dropout: Dropout::new(cfg.dropout),
            fc: Linear::new(cfg.latent_channels(), cfg.width_classes, init),
            in_shape: None,
        }
    }

    pub fn infer(&self, z: &Tensor<T>) -> Tensor<T> {
        self.fc.infer(&global_avg_pool(z))
    }

    pub fn forward(&mut self, z: &Tensor<T>, rng: &mut dyn RngCore) -> Tensor<T> {
        self.in_shape = Some(z.shape());
        let pooled = global_avg_pool(z);
        let dropped = self.dropout.forward(&pooled, rng);
        self.fc.forward(&dropped)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let shape = self.in_shape.take().expect("head backward without forward");
        let d = self.dropout.backward(&self.fc.backward(dy));
        global_avg_pool_backward(&d, shape)
    }
}

composite_parameters!(WidthHead { fc });

/// Weights of the two extractor loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatExLossWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for FeatExLossWeights {
    fn default() -> Self {
        Self { w1: 0.001, w2: 10.0 }
    }
}

/// Combined extractor loss `w1 * MSE(recon, crop) + w2 * CE(logits, class)`
/// for a single sample.
pub fn featex_loss(
    recon: &Raster,
    crop: &Raster,
    logits: &WidthLogits,
    true_width_class: usize,
    w1: f64,
    w2: f64,
) -> Result<f64> {
    ensure!(
        recon.dims() == crop.dims(),
        Shape,
        "reconstruction {:?} vs crop {:?}",
        recon.dims(),
        crop.dims()
    );
    ensure!(
        true_width_class < logits.0.len(),
        InvalidArgument,
        "class {true_width_class} out of range"
    );
    let (l1, _) = mse(&recon.to_tensor::<f64>(), &crop.to_tensor::<f64>());
    let lt = Tensor::from_vec([1, logits.0.len(), 1, 1], logits.0.clone()).cast::<f64>();
    let (l2, _) = cross_entropy(&lt, &[true_width_class]);
    Ok(w1 * l1 + w2 * l2)
}

/// Per-step training statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FeatExStep {
    pub loss: f64,
    pub recon_mse: f64,
    pub cross_entropy: f64,
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    config: FeatExConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub head: WidthHead<T>,
}

composite_parameters!(FeatureExtractor { encoder, decoder, head });

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(config: FeatExConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Encoder::new(&config, init),
            decoder: Decoder::new(&config, init),
            head: WidthHead::new(&config, init),
            config,
        })
    }

    pub fn config(&self) -> &FeatExConfig {
        &self.config
    }

    fn check_crop(&self, crop: &Raster) -> Result<()> {
        let c = &self.config;
        ensure!(
            crop.dims() == (c.input_side, c.input_side, c.in_channels),
            Shape,
            "crop {:?} does not match the {}x{}x{} extractor input",
            crop.dims(),
            c.input_side,
            c.input_side,
            c.in_channels
        );
        Ok(())
    }

    fn check_latent(&self, latent: &LatentBlock) -> Result<()> {
        let c = &self.config;
        ensure!(
            latent.channels == c.latent_channels() && latent.side == c.latent_side(),
            Shape,
            "latent {}x{}x{} does not match {}x{}x{}",
            latent.channels,
            latent.side,
            latent.side,
            c.latent_channels(),
            c.latent_side(),
            c.latent_side()
        );
        Ok(())
    }

    /// Eval-mode encoding of one crop.
    pub fn encode(&self, crop: &Raster) -> Result<LatentBlock> {
        self.check_crop(crop)?;
        Ok(LatentBlock::from_tensor(&self.encoder.infer(&crop.to_tensor())))
    }

    pub fn decode(&self, latent: &LatentBlock) -> Result<Raster> {
        self.check_latent(latent)?;
        let y = self.decoder.infer(&latent.to_tensor());
        Raster::from_tensor(&y, 0)
    }

    /// Eval-mode width scores (dropout disabled).
    pub fn predict_width(&self, latent: &LatentBlock) -> Result<WidthLogits> {
        self.check_latent(latent)?;
        let y = self.head.infer(&latent.to_tensor());
        Ok(WidthLogits(y.cast::<f32>().into_vec()))
    }

    /// Training-mode width scores with dropout driven by `rng`.
    pub fn predict_width_train(&mut self, latent: &LatentBlock, rng: &mut dyn RngCore) -> Result<WidthLogits> {
        self.check_latent(latent)?;
        let y = self.head.forward(&latent.to_tensor(), rng);
        self.head.in_shape = None;
        Ok(WidthLogits(y.cast::<f32>().into_vec()))
    }

    /// Encodes the five crops and concatenates them along channels in the
    /// canonical tag order, regardless of the order stored in the set.
    pub fn encode_crop_set(&self, set: &WallCropSet) -> Result<LatentBlock> {
        let rasters = set.rasters_in_tag_order()?;
        for r in &rasters {
            self.check_crop(r)?;
        }
        let batch = Tensor::stack(&rasters.iter().map(|r| r.to_tensor::<T>()).collect::<Vec<_>>());
        let z = self.encoder.infer(&batch);
        let [n, c, h, w] = z.shape();
        Ok(LatentBlock::from_tensor(&z.reshape([1, n * c, h, w])))
    }

    /// Forward + backward of the combined loss on a batch of crops
    /// `[N, C, S, S]`; gradients accumulate into the parameters.
    pub fn accumulate_gradients(
        &mut self,
        crops: &Tensor<T>,
        classes: &[usize],
        weights: FeatExLossWeights,
        rng: &mut dyn RngCore,
    ) -> Result<FeatExStep> {
        let c = &self.config;
        ensure!(
            crops.shape()[1..] == [c.in_channels, c.input_side, c.input_side],
            Shape,
            "crop batch {:?} does not match the extractor input",
            crops.shape()
        );
        ensure!(classes.len() == crops.n(), Shape, "one width class per crop");
        ensure!(
            classes.iter().all(|&k| k < c.width_classes),
            InvalidArgument,
            "width class out of range"
        );
        let z = self.encoder.forward(crops);
        let recon = self.decoder.forward(&z);
        let logits = self.head.forward(&z, rng);
        let (l1, mut g1) = mse(&recon, crops);
        let (l2, mut g2) = cross_entropy(&logits, classes);
        let (w1, w2) = (T::lit(weights.w1), T::lit(weights.w2));
        g1.data_mut().iter_mut().for_each(|g| *g *= w1);
        g2.data_mut().iter_mut().for_each(|g| *g *= w2);
        let mut dz = self.decoder.backward(&g1);
        dz.add_assign(&self.head.backward(&g2));
        self.encoder.backward(&dz);
        Ok(FeatExStep {
            loss: weights.w1 * l1 + weights.w2 * l2,
            recon_mse: l1,
            cross_entropy: l2,
        })
    }

    /// Loss value only, evaluated exactly like [`Self::accumulate_gradients`]
    /// (training-mode batch norm, dropout from `rng`). Gradients are untouched.
    pub fn training_loss(
        &mut self,
        crops: &Tensor<T>,
        classes: &[usize],
        weights: FeatExLossWeights,
        rng: &mut dyn RngCore,
    ) -> f64 {
        let z = self.encoder.forward(crops);
        let recon = self.decoder.forward(&z);
        let logits = self.head.forward(&z, rng);
        let (l1, _) = mse(&recon, crops);
        let (l2, _) = cross_entropy(&logits, classes);
        weights.w1 * l1 + weights.w2 * l2
    }

    /// Eval-mode reconstruction MSE and width predictions for a batch.
    pub fn evaluate_batch(&self, crops: &Tensor<T>) -> (Tensor<T>, Vec<WidthLogits>) {
        let z = self.encoder.infer(crops);
        let recon = self.decoder.infer(&z);
        let logits = self.head.infer(&z);
        let k = logits.sample_len();
        let rows = logits
            .cast::<f32>()
            .into_vec()
            .chunks(k)
            .map(|r| WidthLogits(r.to_vec()))
            .collect();
        (recon, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(cfg: FeatExConfig, seed: u64) -> FeatureExtractor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureExtractor::new(cfg, &mut Init::Random(&mut rng)).unwrap()
    }

    #[test]
    fn latent_is_256_by_2_by_2() {
        let m = model(FeatExConfig::default(), 1);
        let crop = Raster::filled(64, 64, 1, 0.3);
        let z = m.encode(&crop).unwrap();
        assert_eq!((z.channels, z.side, z.values.len()), (256, 2, 1024));
    }

    #[test]
    fn zero_crop_untrained_is_finite() {
        let m = model(FeatExConfig::default(), 2);
        let z = m.encode(&Raster::filled(64, 64, 1, 0.0)).unwrap();
        assert!(z.values.iter().all(|v| v.is_finite()));
        let r = m.decode(&LatentBlock::zeros(256, 2)).unwrap();
        assert_eq!(r.dims(), (64, 64, 1));
        assert!(r.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let m = model(FeatExConfig::default(), 3);
        let crop = Raster::from_fn(64, 64, |y, x| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        assert_eq!(m.encode(&crop).unwrap(), m.encode(&crop).unwrap());
        let z = m.encode(&crop).unwrap();
        assert_eq!(m.predict_width(&z).unwrap(), m.predict_width(&z).unwrap());
    }

    #[test]
    fn dropout_seeded_logits_reproduce() {
        let mut m = model(FeatExConfig::default(), 4);
        let z = LatentBlock::new(256, 2, (0..1024).map(|i| (i as f32 * 0.01).sin()).collect()).unwrap();
        let a = m.predict_width_train(&z, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = m.predict_width_train(&z, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 64);
    }

    #[test]
    fn wrong_crop_shape_is_rejected() {
        let m = model(FeatExConfig::default(), 5);
        assert!(matches!(m.encode(&Raster::filled(32, 32, 1, 0.5)), Err(Error::Shape(_))));
        assert!(m.decode(&LatentBlock::zeros(128, 2)).is_err());
    }

    #[test]
    fn width_class_mapping() {
        assert_eq!(width_class(1, 64), 0);
        assert_eq!(width_class(24, 64), 23);
        assert_eq!(width_class(64, 64), 63);
        assert_eq!(width_class(90, 64), 63);
        assert_eq!(width_class(0, 64), 0);
    }

    #[test]
    fn loss_reference_values() {
        let crop = Raster::filled(4, 4, 1, 0.25);
        let uniform = WidthLogits(vec![0.0; 64]);
        assert_eq!(featex_loss(&crop, &crop, &uniform, 3, 1.0, 0.0).unwrap(), 0.0);
        let l = featex_loss(&crop, &crop, &uniform, 3, 0.0, 1.0).unwrap();
        assert!((l - 4.158883083359672).abs() < 1e-9);
    }

    #[test]
    fn decoder_plan_mirrors_encoder() {
        assert_eq!(FeatExConfig::default().decoder_channels(), vec![128, 64, 32, 16, 16]);
        assert_eq!(FeatExConfig::default().crop_set_channels(), 1280);
    }
}
