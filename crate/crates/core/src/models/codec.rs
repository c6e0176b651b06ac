use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{gelu, BatchNorm, Builder, Conv2d, Conv2dSpec, ConvTranspose2d, Session};
use crate::tensor::Var;

/// Causal conv → BN → GELU stages. Every stage output is kept as a skip.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<(Conv2d, BatchNorm)>,
    pub in_channels: usize,
}

impl Encoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let mut c_in = 2 * cfg.mics;
        let mut layers = Vec::new();
        for (i, &c_out) in cfg.encoder_channels.iter().enumerate() {
            let k = cfg.kernels[i];
            let s = cfg.strides[i];
            let spec = Conv2dSpec::causal(c_in, c_out, (k[0], k[1]), (s[0], s[1]));
            let name = format!("encoder.{i}");
            layers.push((
                Conv2d::new(b, &format!("{name}.conv"), spec)?,
                BatchNorm::new(b, &format!("{name}.bn"), c_out)?,
            ));
            c_in = c_out;
        }
        Ok(Self {
            layers,
            in_channels: 2 * cfg.mics,
        })
    }

    /// Latent `[B, C, T, F']` and the per-stage outputs.
    pub fn forward(&self, s: &Session, x: &Var) -> Result<(Var, Vec<Var>)> {
        if x.shape().len() != 4 || x.shape()[1] != self.in_channels {
            return Err(Error::shape(
                "encoder input",
                x.shape(),
                &[0, self.in_channels, 0, 0],
            ));
        }
        let mut skips = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (conv, bn) in &self.layers {
            h = gelu(&bn.forward(s, &conv.forward(s, &h)?)?);
            skips.push(h.clone());
        }
        Ok((h, skips))
    }
}

/// Mirrors the encoder with causal transposed convs over
/// `concat(previous, skip)`. The last stage is linear and emits `2M` planes.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// Ordered from the bottleneck outwards.
    pub layers: Vec<(ConvTranspose2d, Option<BatchNorm>)>,
    /// Frequency size each stage must produce, bottleneck side first.
    pub freq_out: Vec<usize>,
}

impl Decoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let n = cfg.encoder_channels.len();
        let freqs = cfg.freq_sizes();
        let mut layers = Vec::with_capacity(n);
        let mut freq_out = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let c = cfg.encoder_channels[i];
            let out = if i == 0 {
                2 * cfg.mics
            } else {
                cfg.encoder_channels[i - 1]
            };
            let k = cfg.kernels[i];
            let s = cfg.strides[i];
            let spec = Conv2dSpec::causal(2 * c, out, (k[0], k[1]), (s[0], s[1]));
            let name = format!("decoder.{}", n - 1 - i);
            let deconv = ConvTranspose2d::new(b, &format!("{name}.deconv"), spec)?;
            let bn = if i == 0 {
                None
            } else {
                Some(BatchNorm::new(b, &format!("{name}.bn"), out)?)
            };
            layers.push((deconv, bn));
            freq_out.push(freqs[i]);
        }
        Ok(Self { layers, freq_out })
    }

    /// `skips` in encoder order, as returned by [`Encoder::forward`].
    pub fn forward(&self, s: &Session, latent: &Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "decoder needs {} skips, got {}",
                self.layers.len(),
                skips.len()
            )));
        }
        let mut h = latent.clone();
        for (j, (deconv, bn)) in self.layers.iter().enumerate() {
            let skip = &skips[skips.len() - 1 - j];
            if skip.shape() != h.shape() {
                return Err(Error::shape("decoder skip", skip.shape(), h.shape()));
            }
            let t = h.shape()[2];
            let y = deconv.forward(s, &Var::concat(&[&h, skip], 1)?, (t, self.freq_out[j]))?;
            h = match bn {
                Some(bn) => gelu(&bn.forward(s, &y)?),
                None => y,
            };
        }
        Ok(h)
    }
}
