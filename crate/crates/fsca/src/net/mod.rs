//! Backbone, feature-separation heads, decoder, and counter.

pub mod checkpoint;

use crate::attn::concat_channels;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{rf, GradTensor, Real};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct ChannelConfig {
    /// Backbone output channels.
    pub c_b: usize,
    /// Channels of each separated subspace; decoder/counter run on `2c`.
    pub c: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig { c_b: 32, c: 16 }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_b == 0 || self.c == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.c % 2 != 0 {
            return Err(Error::Config(format!(
                "separated channel count c={} must be even (counter halves it)",
                self.c
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer<F: Real> {
    pub w: GradTensor<F>,
    pub b: GradTensor<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Real> ConvLayer<F> {
    /// He fan-in init, zero bias.
    fn init(rng: &mut ChaCha12Rng, co: usize, ci: usize, k: usize, pad: usize) -> Self {
        let fan_in = (ci * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let data: Vec<F> = (0..co * ci * k * k)
            .map(|_| rf(std * rng::normal(rng)))
            .collect();
        ConvLayer {
            w: GradTensor::param(vec![co, ci, k, k], data).expect("conv weight shape"),
            b: GradTensor::param(vec![co], vec![F::zero(); co]).expect("conv bias shape"),
            stride: 1,
            pad,
        }
    }

    fn from_parts(w: GradTensor<F>, b: GradTensor<F>, pad: usize) -> Self {
        ConvLayer {
            w,
            b,
            stride: 1,
            pad,
        }
    }

    pub fn forward(&self, x: &GradTensor<F>) -> Result<GradTensor<F>> {
        x.conv2d(&self.w, &self.b, self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }
}

/// Mean-pool by 2 in both spatial extents (sum pool scaled by 1/4).
fn downsample2<F: Real>(x: &GradTensor<F>) -> Result<GradTensor<F>> {
    Ok(x.sum_pool2d(2)?.scale(rf(0.25)))
}

fn conv_relu<F: Real>(layer: &ConvLayer<F>, x: &GradTensor<F>) -> Result<GradTensor<F>> {
    Ok(layer.forward(x)?.relu())
}

/// Shared feature extractor: four 3x3 conv+ReLU blocks with channel
/// progression {16, 32, 32, c_b} and mean-pool downsampling after blocks two
/// and four, so a `[1, H, W]` image becomes `[c_b, H/4, W/4]`.
#[derive(Debug, Clone)]
pub struct Backbone<F: Real> {
    pub blocks: Vec<ConvLayer<F>>,
}

impl<F: Real> Backbone<F> {
    fn init(rng: &mut ChaCha12Rng, c_b: usize) -> Self {
        let widths = [16usize, 32, 32, c_b];
        let mut blocks = Vec::new();
        let mut ci = 1;
        for &co in &widths {
            blocks.push(ConvLayer::init(rng, co, ci, 3, 1));
            ci = co;
        }
        Backbone { blocks }
    }

    pub fn forward(&self, image: &GradTensor<F>) -> Result<GradTensor<F>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::Dimension(format!(
                "backbone: expected [1,H,W] image, got {s:?}"
            )));
        }
        if s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(Error::Dimension(format!(
                "backbone: extents {}x{} must be divisible by 4",
                s[1], s[2]
            )));
        }
        let x = conv_relu(&self.blocks[0], image)?;
        let x = downsample2(&conv_relu(&self.blocks[1], &x)?)?;
        let x = conv_relu(&self.blocks[2], &x)?;
        downsample2(&conv_relu(&self.blocks[3], &x)?)
    }
}

/// One separation head: 3x3 conv + ReLU + 1x1 conv, `c_b -> c` channels.
#[derive(Debug, Clone)]
pub struct ProjectionHead<F: Real> {
    pub conv3: ConvLayer<F>,
    pub conv1: ConvLayer<F>,
}

impl<F: Real> ProjectionHead<F> {
    fn init(rng: &mut ChaCha12Rng, c_in: usize, c_out: usize) -> Self {
        ProjectionHead {
            conv3: ConvLayer::init(rng, c_out, c_in, 3, 1),
            conv1: ConvLayer::init(rng, c_out, c_out, 1, 0),
        }
    }

    pub fn forward(&self, x: &GradTensor<F>) -> Result<GradTensor<F>> {
        self.conv1.forward(&conv_relu(&self.conv3, x)?)
    }
}

/// Channel-preserving refinement: 2c -> c (3x3), c -> c (1x1), c -> 2c (3x3)
/// with ReLU between layers.
#[derive(Debug, Clone)]
pub struct Decoder<F: Real> {
    pub layers: [ConvLayer<F>; 3],
}

impl<F: Real> Decoder<F> {
    fn init(rng: &mut ChaCha12Rng, c: usize) -> Self {
        Decoder {
            layers: [
                ConvLayer::init(rng, c, 2 * c, 3, 1),
                ConvLayer::init(rng, c, c, 1, 0),
                ConvLayer::init(rng, 2 * c, c, 3, 1),
            ],
        }
    }

    pub fn forward(&self, x: &GradTensor<F>) -> Result<GradTensor<F>> {
        let x = conv_relu(&self.layers[0], x)?;
        let x = conv_relu(&self.layers[1], &x)?;
        self.layers[2].forward(&x)
    }
}

/// Density head: 2c -> c -> c/2 -> 1, all 3x3, ReLU throughout so the
/// produced density map is nonnegative.
#[derive(Debug, Clone)]
pub struct Counter<F: Real> {
    pub layers: [ConvLayer<F>; 3],
}

impl<F: Real> Counter<F> {
    fn init(rng: &mut ChaCha12Rng, c: usize) -> Self {
        Counter {
            layers: [
                ConvLayer::init(rng, c, 2 * c, 3, 1),
                ConvLayer::init(rng, c / 2, c, 3, 1),
                ConvLayer::init(rng, 1, c / 2, 3, 1),
            ],
        }
    }

    pub fn forward(&self, x: &GradTensor<F>) -> Result<GradTensor<F>> {
        let x = conv_relu(&self.layers[0], x)?;
        let x = conv_relu(&self.layers[1], &x)?;
        Ok(self.layers[2].forward(&x)?.relu())
    }
}

/// Full separation network: backbone, two disjoint projection heads, decoder,
/// counter.
#[derive(Debug, Clone)]
pub struct FscaNet<F: Real> {
    pub cfg: ChannelConfig,
    pub backbone: Backbone<F>,
    pub sep_di: ProjectionHead<F>,
    pub sep_ds: ProjectionHead<F>,
    pub decoder: Decoder<F>,
    pub counter: Counter<F>,
}

impl<F: Real> FscaNet<F> {
    pub fn init(cfg: ChannelConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(FscaNet {
            cfg,
            backbone: Backbone::init(rng, cfg.c_b),
            sep_di: ProjectionHead::init(rng, cfg.c_b, cfg.c),
            sep_ds: ProjectionHead::init(rng, cfg.c_b, cfg.c),
            decoder: Decoder::init(rng, cfg.c),
            counter: Counter::init(rng, cfg.c),
        })
    }

    /// Base features for one image.
    pub fn backbone_forward(&self, image: &GradTensor<F>) -> Result<GradTensor<F>> {
        self.backbone.forward(image)
    }

    /// Split base features into (domain-invariant, domain-specific) maps via
    /// the two parameter-disjoint heads.
    pub fn separate(&self, f_base: &GradTensor<F>) -> Result<(GradTensor<F>, GradTensor<F>)> {
        Ok((self.sep_di.forward(f_base)?, self.sep_ds.forward(f_base)?))
    }

    /// Decoder + counter on an assembled `[2c,h,w]` input.
    pub fn head_forward(&self, f_dsdi: &GradTensor<F>) -> Result<GradTensor<F>> {
        self.counter.forward(&self.decoder.forward(f_dsdi)?)
    }

    /// Attention-free forward used at evaluation and in single-domain
    /// training: fused features equal the originals. With `di_only` the DS
    /// block is replaced by a second copy of the DI features, realizing the
    /// DI-only generalization path.
    pub fn forward_no_partner(&self, image: &GradTensor<F>, di_only: bool) -> Result<GradTensor<F>> {
        let base = self.backbone_forward(image)?;
        let (di, ds) = self.separate(&base)?;
        let dsdi = if di_only {
            concat_channels(&di, &di)?
        } else {
            concat_channels(&di, &ds)?
        };
        self.head_forward(&dsdi)
    }

    pub fn named_params(&self) -> Vec<(String, GradTensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.blocks.iter().enumerate() {
            out.push((format!("backbone.{i}.w"), l.w.clone()));
            out.push((format!("backbone.{i}.b"), l.b.clone()));
        }
        for (name, head) in [("sep_di", &self.sep_di), ("sep_ds", &self.sep_ds)] {
            out.push((format!("{name}.conv3.w"), head.conv3.w.clone()));
            out.push((format!("{name}.conv3.b"), head.conv3.b.clone()));
            out.push((format!("{name}.conv1.w"), head.conv1.w.clone()));
            out.push((format!("{name}.conv1.b"), head.conv1.b.clone()));
        }
        for (i, l) in self.decoder.layers.iter().enumerate() {
            out.push((format!("decoder.{i}.w"), l.w.clone()));
            out.push((format!("decoder.{i}.b"), l.b.clone()));
        }
        for (i, l) in self.counter.layers.iter().enumerate() {
            out.push((format!("counter.{i}.w"), l.w.clone()));
            out.push((format!("counter.{i}.b"), l.b.clone()));
        }
        out
    }
}

/// Baseline without separation: the decoder/counter stack (sized for the
/// backbone width) runs on duplicated base features.
#[derive(Debug, Clone)]
pub struct NaiveNet<F: Real> {
    pub c_b: usize,
    pub backbone: Backbone<F>,
    pub decoder: Decoder<F>,
    pub counter: Counter<F>,
}

impl<F: Real> NaiveNet<F> {
    pub fn init(cfg: ChannelConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.c_b % 2 != 0 {
            return Err(Error::Config(format!(
                "naive baseline needs even backbone width, got {}",
                cfg.c_b
            )));
        }
        Ok(NaiveNet {
            c_b: cfg.c_b,
            backbone: Backbone::init(rng, cfg.c_b),
            decoder: Decoder::init(rng, cfg.c_b),
            counter: Counter::init(rng, cfg.c_b),
        })
    }

    pub fn forward(&self, image: &GradTensor<F>) -> Result<GradTensor<F>> {
        let base = self.backbone.forward(image)?;
        let dup = concat_channels(&base, &base)?;
        self.counter.forward(&self.decoder.forward(&dup)?)
    }

    pub fn named_params(&self) -> Vec<(String, GradTensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.blocks.iter().enumerate() {
            out.push((format!("backbone.{i}.w"), l.w.clone()));
            out.push((format!("backbone.{i}.b"), l.b.clone()));
        }
        for (i, l) in self.decoder.layers.iter().enumerate() {
            out.push((format!("decoder.{i}.w"), l.w.clone()));
            out.push((format!("decoder.{i}.b"), l.b.clone()));
        }
        for (i, l) in self.counter.layers.iter().enumerate() {
            out.push((format!("counter.{i}.w"), l.w.clone()));
            out.push((format!("counter.{i}.b"), l.b.clone()));
        }
        out
    }
}

/// Total crowd count: the sum over all density cells. The counter's final
/// ReLU guarantees nonnegativity, so negative entries are a contract breach.
pub fn count_from_density<F: Real>(density: &GradTensor<F>) -> Result<GradTensor<F>> {
    if density.data_vec().iter().any(|&v| v < F::zero()) {
        return Err(Error::Contract(
            "count_from_density: density map has negative entries".into(),
        ));
    }
    Ok(density.sum())
}

/// Rebuild layer structs from checkpoint tensors, keyed by the fixed naming
/// scheme of `named_params`.
pub(crate) fn conv_from_named<F: Real>(
    named: &std::collections::BTreeMap<String, GradTensor<F>>,
    prefix: &str,
    pad: usize,
) -> Result<ConvLayer<F>> {
    let w = named
        .get(&format!("{prefix}.w"))
        .ok_or_else(|| Error::Contract(format!("checkpoint missing tensor {prefix}.w")))?;
    let b = named
        .get(&format!("{prefix}.b"))
        .ok_or_else(|| Error::Contract(format!("checkpoint missing tensor {prefix}.b")))?;
    Ok(ConvLayer::from_parts(w.clone(), b.clone(), pad))
}
