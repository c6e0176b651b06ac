//! PDPCRN and the DPCRN baseline: causal conv encoder, recurrent bottleneck,
//! transposed-conv decoder with skips, mapping M mixture spectra to M
//! enhanced spectra.

mod blocks;
mod codec;

pub use blocks::{Dprnn, Gate, MixingBlock, MixingState};
pub use codec::{Decoder, Encoder};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Builder, Mode, ParamStore, Session};
use crate::signal::{Spectrogram, BINS};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Pdpcrn,
    Dpcrn,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Pdpcrn => "PDPCRN",
            Variant::Dpcrn => "DPCRN",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub mics: usize,
    pub encoder_channels: Vec<usize>,
    /// `[time, freq]` per encoder layer.
    pub kernels: Vec<[usize; 2]>,
    /// `[time, freq]` per encoder layer. Time strides must be 1.
    pub strides: Vec<[usize; 2]>,
    /// Bottleneck depth: Mixing Blocks for PDPCRN, plain DPRNN blocks for DPCRN.
    pub mixing_blocks: usize,
    pub dprnn_hidden: usize,
    pub attention_heads: usize,
    pub attention_head_dim: usize,
    /// `[1, k]`: a per-channel filter of `k` causal taps along time.
    pub depthwise_kernel: [usize; 2],
    pub bi_interaction: bool,
    /// Hidden width of the channel gate is `C / channel_gate_reduction`.
    pub channel_gate_reduction: usize,
    /// Hidden width of the spatial gate is `C / spatial_gate_reduction`.
    pub spatial_gate_reduction: usize,
}

impl ModelConfig {
    /// Full-size PDPCRN for a 16-microphone array.
    pub fn full() -> Self {
        Self {
            variant: Variant::Pdpcrn,
            mics: 16,
            encoder_channels: vec![32, 32, 32, 64, 80],
            kernels: vec![[2, 5], [2, 3], [2, 3], [2, 3], [2, 3]],
            strides: vec![[1, 2], [1, 2], [1, 1], [1, 1], [1, 1]],
            mixing_blocks: 2,
            dprnn_hidden: 80,
            attention_heads: 50,
            attention_head_dim: 2,
            depthwise_kernel: [1, 3],
            bi_interaction: true,
            channel_gate_reduction: 8,
            spatial_gate_reduction: 16,
        }
    }

    /// DPCRN baseline at its reference width: last encoder stage and DPRNN
    /// hidden size of 128.
    pub fn dpcrn() -> Self {
        Self {
            variant: Variant::Dpcrn,
            encoder_channels: vec![32, 32, 32, 64, 128],
            dprnn_hidden: 128,
            ..Self::full()
        }
    }

    /// Two-microphone model small enough for overfit and gradient tests.
    pub fn tiny() -> Self {
        Self {
            mics: 2,
            encoder_channels: vec![8, 8, 8, 8, 16],
            dprnn_hidden: 16,
            attention_heads: 4,
            attention_head_dim: 2,
            channel_gate_reduction: 4,
            spatial_gate_reduction: 4,
            ..Self::full()
        }
    }

    /// Reduced-width four-microphone model that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            mics: 4,
            encoder_channels: vec![16, 16, 16, 24, 32],
            dprnn_hidden: 32,
            attention_heads: 8,
            attention_head_dim: 4,
            channel_gate_reduction: 8,
            spatial_gate_reduction: 8,
            ..Self::full()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_bi_interaction(mut self, on: bool) -> Self {
        self.bi_interaction = on;
        self
    }

    /// Display name: "PDPCRN", "PDPCRN (w/o BI)" or "DPCRN".
    pub fn method_label(&self) -> String {
        match (self.variant, self.bi_interaction) {
            (Variant::Pdpcrn, false) => format!("{} (w/o BI)", self.variant.label()),
            _ => self.variant.label().to_string(),
        }
    }

    pub fn latent_channels(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&0)
    }

    /// Frequency size after every encoder layer, starting with the input's 201.
    pub fn freq_sizes(&self) -> Vec<usize> {
        let mut f = vec![BINS];
        for (k, s) in self.kernels.iter().zip(&self.strides) {
            let last = *f.last().unwrap();
            let p = (k[1] - 1) / 2;
            f.push((last + 2 * p).saturating_sub(k[1]) / s[1] + 1);
        }
        f
    }

    pub fn latent_freq(&self) -> usize {
        *self.freq_sizes().last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.encoder_channels.len();
        if n == 0 {
            return Err(Error::config("encoder_channels is empty"));
        }
        if self.kernels.len() != n || self.strides.len() != n {
            return Err(Error::config(format!(
                "encoder_channels, kernels and strides must have equal lengths ({n}, {}, {})",
                self.kernels.len(),
                self.strides.len()
            )));
        }
        if self.mics == 0 {
            return Err(Error::config("mics must be positive"));
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::config("encoder channels must be positive"));
        }
        for (i, (k, s)) in self.kernels.iter().zip(&self.strides).enumerate() {
            if k.contains(&0) || s.contains(&0) {
                return Err(Error::config(format!(
                    "layer {i}: kernel and stride must be positive"
                )));
            }
            if s[0] != 1 {
                return Err(Error::config(format!(
                    "layer {i}: time stride must be 1 to keep frames aligned"
                )));
            }
        }
        if self
            .freq_sizes()
            .windows(2)
            .any(|w| w[1] == 0 || w[1] > w[0])
        {
            return Err(Error::config("encoder collapses the frequency axis"));
        }
        if self.dprnn_hidden < 2 || self.dprnn_hidden % 2 != 0 {
            return Err(Error::config("dprnn_hidden must be even and at least 2"));
        }
        if self.variant == Variant::Pdpcrn {
            if self.attention_heads == 0 || self.attention_head_dim == 0 {
                return Err(Error::config(
                    "attention heads and head_dim must be positive",
                ));
            }
            if self.depthwise_kernel[0] != 1 || self.depthwise_kernel[1] == 0 {
                return Err(Error::config("depthwise_kernel must be [1, k] with k >= 1"));
            }
            if self.channel_gate_reduction == 0 || self.spatial_gate_reduction == 0 {
                return Err(Error::config("gate reductions must be positive"));
            }
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Clone, Debug)]
pub enum Bottleneck {
    Mixing(MixingBlock),
    Plain(Dprnn),
}

impl Bottleneck {
    pub fn forward(&self, s: &Session, x: &Var) -> Result<Var> {
        match self {
            Bottleneck::Mixing(m) => m.forward(s, x),
            Bottleneck::Plain(d) => d.forward(s, x),
        }
    }
}

/// Network layout. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub blocks: Vec<Bottleneck>,
    pub decoder: Decoder,
}

impl Model {
    /// Lays out the network and draws its initial parameters from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut b = Builder::new(seed);
        let encoder = Encoder::new(&mut b, config)?;
        let c = config.latent_channels();
        let f = config.latent_freq();
        let blocks = (0..config.mixing_blocks)
            .map(|i| {
                let name = format!("blocks.{i}");
                Ok(match config.variant {
                    Variant::Pdpcrn => {
                        Bottleneck::Mixing(MixingBlock::new(&mut b, &name, config, c, f)?)
                    }
                    Variant::Dpcrn => {
                        Bottleneck::Plain(Dprnn::new(&mut b, &name, c, config.dprnn_hidden, f)?)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(&mut b, config)?;
        Ok((
            Self {
                config: config.clone(),
                encoder,
                blocks,
                decoder,
            },
            b.finish(),
        ))
    }

    /// `[B, 2M, T, 201]` mixture planes to `[B, 2M, T, 201]` estimate planes.
    pub fn forward(&self, s: &Session, planes: &Var) -> Result<Var> {
        let (latent, skips) = self.encoder.forward(s, planes)?;
        let mut x = latent;
        for block in &self.blocks {
            x = block.forward(s, &x)?;
        }
        self.decoder.forward(s, &x, &skips)
    }

    /// Eval-mode estimate of every channel's clean spectrum.
    pub fn enhance(&self, store: &ParamStore, mixture: &Spectrogram) -> Result<Spectrogram> {
        if mixture.channels() != self.config.mics {
            return Err(Error::shape(
                "enhance channels",
                &[mixture.channels()],
                &[self.config.mics],
            ));
        }
        self.check_store(store)?;
        let s = Session::new(store, Mode::Eval);
        let out = self.forward(&s, &s.input(mixture.to_planes()))?;
        Spectrogram::from_planes(&out.value())
    }

    pub fn param_count(store: &ParamStore) -> usize {
        store.param_count()
    }

    /// Hash of the configuration and every stored tensor's name, kind and shape.
    pub fn structural_hash(&self, store: &ParamStore) -> u64 {
        structural_hash(&self.config, store)
    }

    /// Fails unless `store` has exactly the layout this model expects.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        let (_, fresh) = Self::build(&self.config, 0)?;
        let expected = structural_hash(&self.config, &fresh);
        let got = structural_hash(&self.config, store);
        if expected != got {
            return Err(Error::config(format!(
                "parameter layout {got:016x} does not match the configuration ({expected:016x})"
            )));
        }
        Ok(())
    }
}

pub fn structural_hash(config: &ModelConfig, store: &ParamStore) -> u64 {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for e in store.entries() {
        h.update((e.name.len() as u32).to_le_bytes());
        h.update(e.name.as_bytes());
        h.update([e.kind as u8]);
        h.update((e.value.rank() as u32).to_le_bytes());
        for d in e.value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
