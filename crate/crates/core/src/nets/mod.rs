//! Network architectures: the conditional GAN (encoder/decoder generator
//! plus multi-task discriminator) and the three comparison classifiers.

pub mod blocks;
pub mod cdgan;
pub mod resnet;
pub mod stargan;
pub mod unet;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};

use crate::error::CoreError;
use crate::params::{BufUpdates, Initializer, ParamStore};
use crate::phase::{PhaseLabel, NUM_PHASES};
use crate::rng::{stream_rng, StreamDomain};
use crate::tensor::{Mode, Scalar};

pub use blocks::{apply_buf_updates, Act, ConvLayer, ConvSpec, Norm, SeqConv};

/// Which architecture a parameter store belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ModelKind {
    /// Conditional GAN whose discriminator doubles as the phase classifier.
    CdGan,
    /// Patch discriminator with a classification head, optionally trained
    /// inside a full translation-GAN loop with a residual generator.
    StarganD,
    /// Encoder-decoder classifier with a fully connected head.
    Unet,
    /// Residual bottleneck classifier.
    Resnet,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] =
        [ModelKind::CdGan, ModelKind::StarganD, ModelKind::Unet, ModelKind::Resnet];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::CdGan => "cdgan",
            ModelKind::StarganD => "stargan_d",
            ModelKind::Unet => "unet",
            ModelKind::Resnet => "resnet",
        }
    }

    pub fn from_name(s: &str) -> Result<Self, CoreError> {
        match s {
            "cdgan" => Ok(ModelKind::CdGan),
            "stargan_d" => Ok(ModelKind::StarganD),
            "unet" => Ok(ModelKind::Unet),
            "resnet" => Ok(ModelKind::Resnet),
            other => Err(CoreError::config(format!("unknown model kind '{other}'"))),
        }
    }

    /// Whether the bundle carries a generator alongside the classifier.
    pub fn has_generator(self) -> bool {
        matches!(self, ModelKind::CdGan | ModelKind::StarganD)
    }
}

/// Architecture hyperparameters. The defaults describe the full-size
/// networks; tests and the desk-scale experiments shrink the widths.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct NetConfig {
    /// Input image extent `(h, w)`.
    pub image_hw: (usize, usize),
    /// Channel width of the first stage.
    pub base_width: usize,
    /// Stride-2 stages in the generator encoder and discriminator trunk.
    pub enc_stages: usize,
    /// Length of the representation vector between encoder and decoder.
    pub rep_channels: usize,
    /// Decoder widths as a fraction of the mirrored encoder widths.
    pub dec_width_factor: f64,
    /// Extra stride-1 conv blocks at full width in the discriminator trunk.
    pub disc_extra_convs: usize,
    /// Trunk widths are capped at `base_width * disc_width_cap`.
    pub disc_width_cap: usize,
    /// Mirror encoder features into the decoder (off by default: skips
    /// would route enhancement information around the bottleneck).
    pub decoder_skips: bool,
    /// Residual blocks in the translation generator's bottleneck.
    pub res_blocks: usize,
    /// Use the 50-layer residual preset instead of the desk-scale one.
    pub resnet_full: bool,
    /// Pooling levels in the encoder-decoder classifier.
    pub unet_levels: usize,
    /// First-stage width of the encoder-decoder classifier.
    pub unet_width: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_hw: (64, 64),
            base_width: 32,
            enc_stages: 4,
            rep_channels: 128,
            dec_width_factor: 0.5,
            disc_extra_convs: 2,
            disc_width_cap: 4,
            decoder_skips: false,
            res_blocks: 6,
            resnet_full: false,
            unet_levels: 3,
            unet_width: 8,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            leaky_slope: 0.01,
        }
    }
}

impl NetConfig {
    /// Desk-scale preset: same shapes, half the width, sized for CPU runs.
    pub fn desk() -> Self {
        NetConfig { base_width: 16, rep_channels: 64, ..NetConfig::default() }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let (h, w) = self.image_hw;
        let div = 1usize << self.enc_stages;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(CoreError::config(format!(
                "image {h}x{w} is not divisible by 2^{} = {div}",
                self.enc_stages
            )));
        }
        if h >> self.enc_stages == 0 || w >> self.enc_stages == 0 {
            return Err(CoreError::config(format!(
                "image {h}x{w} vanishes after {} stride-2 stages",
                self.enc_stages
            )));
        }
        let udiv = 1usize << self.unet_levels;
        if h % udiv != 0 || w % udiv != 0 {
            return Err(CoreError::config(format!(
                "image {h}x{w} is not divisible by 2^{} = {udiv} pooling levels",
                self.unet_levels
            )));
        }
        if self.base_width == 0 || self.rep_channels == 0 || self.unet_width == 0 {
            return Err(CoreError::config("channel widths must be positive"));
        }
        if self.enc_stages == 0 || self.unet_levels == 0 {
            return Err(CoreError::config("need at least one downsampling stage"));
        }
        if self.disc_width_cap == 0 {
            return Err(CoreError::config("discriminator width cap must be positive"));
        }
        if !(self.dec_width_factor > 0.0 && self.dec_width_factor.is_finite()) {
            return Err(CoreError::config("decoder width factor must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(CoreError::config("batchnorm momentum must lie in [0, 1]"));
        }
        if self.bn_eps <= 0.0 || !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(CoreError::config("bad normalization or activation constant"));
        }
        Ok(())
    }

    /// Spatial extent after the stride-2 encoder stages.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let d = 1usize << self.enc_stages;
        (self.image_hw.0 / d, self.image_hw.1 / d)
    }

    /// Output channels of encoder stage `i` (the last stage emits the
    /// representation).
    pub fn enc_width(&self, i: usize) -> usize {
        if i + 1 == self.enc_stages {
            self.rep_channels
        } else {
            (self.base_width << i).min(self.base_width * self.disc_width_cap)
        }
    }

    /// Output channels of decoder stage `j` (a shrunk mirror of the
    /// encoder widths).
    pub fn dec_width(&self, j: usize) -> usize {
        let mirrored = self.enc_width(self.enc_stages - 1 - j);
        let scaled = (self.dec_width_factor * mirrored as f64).round() as usize;
        scaled.max(4)
    }

    /// Trunk width of discriminator stage `i`.
    pub fn disc_width(&self, i: usize) -> usize {
        (self.base_width << i).min(self.base_width * self.disc_width_cap)
    }
}

/// Discriminator outputs: per-patch realness logits and phase posterior.
pub struct DiscOut<F> {
    /// `(b, ph, pw, 1)` raw logits; squashing happens inside the losses.
    pub src_logits: Array4<F>,
    /// `(b, 3)` rows on the probability simplex.
    pub cls_probs: Array2<F>,
}

/// Phase predictions by row argmax of a posterior batch.
pub fn predict_phases<F: Scalar>(probs: &ArrayView2<'_, F>) -> Vec<PhaseLabel> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut buf = [0.0f32; NUM_PHASES];
            for (dst, src) in buf.iter_mut().zip(row.iter()) {
                *dst = src.to_f32().unwrap_or(0.0);
            }
            crate::phase::argmax_phase(&buf)
        })
        .collect()
}

/// A model's parameters plus the architecture objects that run them.
pub struct Model<F> {
    pub kind: ModelKind,
    pub config: NetConfig,
    pub store: ParamStore<F>,
    pub arch: Arch,
}

/// Architecture-specific layer handles.
pub enum Arch {
    CdGan { gen: cdgan::Generator, disc: cdgan::Discriminator },
    StarganD { gen: stargan::ResGenerator, disc: cdgan::Discriminator },
    Unet(unet::UnetClassifier),
    Resnet(resnet::ResnetClassifier),
}

impl<F: Scalar> Model<F> {
    /// Builds and initializes a model. Weights come from a stream keyed by
    /// `(seed, kind)`, so identical calls build identical models.
    pub fn build(kind: ModelKind, config: NetConfig, seed: u64) -> Result<Self, CoreError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(stream_rng(seed, StreamDomain::Init, kind as u64, 0));
        let arch = match kind {
            ModelKind::CdGan => Arch::CdGan {
                gen: cdgan::Generator::register(&mut store, &mut init, &config)?,
                disc: cdgan::Discriminator::register(
                    &mut store,
                    &mut init,
                    &config,
                    cdgan::DiscStyle::Cdgan,
                )?,
            },
            ModelKind::StarganD => Arch::StarganD {
                gen: stargan::ResGenerator::register(&mut store, &mut init, &config)?,
                disc: cdgan::Discriminator::register(
                    &mut store,
                    &mut init,
                    &config,
                    cdgan::DiscStyle::Stargan,
                )?,
            },
            ModelKind::Unet => {
                Arch::Unet(unet::UnetClassifier::register(&mut store, &mut init, &config)?)
            }
            ModelKind::Resnet => {
                Arch::Resnet(resnet::ResnetClassifier::register(&mut store, &mut init, &config)?)
            }
        };
        Ok(Model { kind, config, store, arch })
    }

    fn disc(&self) -> Option<&cdgan::Discriminator> {
        match &self.arch {
            Arch::CdGan { disc, .. } | Arch::StarganD { disc, .. } => Some(disc),
            _ => None,
        }
    }

    /// Phase posterior for a batch of images `(b, h, w, 1)`.
    pub fn classify(&self, x: &ArrayView4<'_, F>, mode: Mode) -> Result<Array2<F>, CoreError> {
        let mut updates = Vec::new();
        self.classify_with_updates(x, mode, &mut updates)
    }

    /// Like [`classify`](Self::classify) but surfaces training-mode batch
    /// statistics for the caller to apply.
    pub fn classify_with_updates(
        &self,
        x: &ArrayView4<'_, F>,
        mode: Mode,
        updates: &mut BufUpdates<F>,
    ) -> Result<Array2<F>, CoreError> {
        match &self.arch {
            Arch::CdGan { disc, .. } | Arch::StarganD { disc, .. } => Ok(disc
                .forward(&self.store, x, mode, false, &self.config, updates)?
                .out
                .cls_probs),
            Arch::Unet(n) => {
                Ok(n.forward(&self.store, x, mode, false, &self.config, updates)?.probs)
            }
            Arch::Resnet(n) => {
                Ok(n.forward(&self.store, x, mode, false, &self.config, updates)?.probs)
            }
        }
    }

    /// Full discriminator output (realness map + posterior); only the GAN
    /// bundles have one.
    pub fn discriminate(&self, x: &ArrayView4<'_, F>, mode: Mode) -> Result<DiscOut<F>, CoreError> {
        let disc = self.disc().ok_or_else(|| {
            CoreError::config(format!("model '{}' has no discriminator heads", self.kind.name()))
        })?;
        let mut updates = Vec::new();
        Ok(disc.forward(&self.store, x, mode, false, &self.config, &mut updates)?.out)
    }

    /// Translates a batch to the given per-item target phase codes.
    pub fn synthesize(
        &self,
        x: &ArrayView4<'_, F>,
        codes: &ArrayView2<'_, F>,
        mode: Mode,
    ) -> Result<Array4<F>, CoreError> {
        let mut updates = Vec::new();
        match &self.arch {
            Arch::CdGan { gen, .. } => Ok(gen
                .forward(&self.store, x, codes, mode, false, &self.config, &mut updates)?
                .y),
            Arch::StarganD { gen, .. } => Ok(gen
                .forward(&self.store, x, codes, mode, false, &self.config, &mut updates)?
                .y),
            _ => Err(CoreError::config(format!(
                "model '{}' has no generator",
                self.kind.name()
            ))),
        }
    }

    /// Names of every tensor, in registration order.
    pub fn tensor_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, name, _, _)| String::from(name)).collect()
    }
}

/// One-hot codes `(b, 3)` for a slice of labels.
pub fn one_hot_codes<F: Scalar>(labels: &[PhaseLabel]) -> Array2<F> {
    let mut codes = Array2::zeros((labels.len(), NUM_PHASES));
    for (i, l) in labels.iter().enumerate() {
        codes[[i, l.index()]] = F::one();
    }
    codes
}
