use super::{Builder, Mode, Session, BN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{causal_mask, ConvGeometry, Tensor, Var};

pub fn gelu(x: &Var) -> Var {
    x.gelu()
}

/// Affine map over the last axis. Weight is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        b.uniform(&format!("{name}.weight"), &[in_dim, out_dim], bound)?;
        b.uniform(&format!("{name}.bias"), &[out_dim], bound)?;
        Ok(Self {
            name: name.to_string(),
            in_dim,
            out_dim,
        })
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Result<Var> {
        if x.shape().last() != Some(&self.in_dim) {
            return Err(Error::shape("linear", x.shape(), &[self.in_dim]));
        }
        let w = s.param(&format!("{}.weight", self.name))?;
        let bias = s.param(&format!("{}.bias", self.name))?;
        x.matmul(&w)?.add(&bias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(time, freq)` taps.
    pub kernel: (usize, usize),
    /// `(time, freq)` strides.
    pub stride: (usize, usize),
    /// Zero padding `(low, high)` on the frequency axis.
    pub freq_pad: (usize, usize),
    pub groups: usize,
    /// Pads `kernel.0 − 1` frames on the past side only. Without it the time
    /// axis is unpadded.
    pub causal: bool,
}

impl Conv2dSpec {
    /// Causal conv with symmetric frequency padding of `⌊(k_f − 1)/2⌋` per side.
    pub fn causal(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Self {
        let p = (kernel.1 - 1) / 2;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            freq_pad: (p, p),
            groups: 1,
            causal: true,
        }
    }

    /// Per-channel causal filter of `taps` frames along time.
    pub fn depthwise_time(channels: usize, taps: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            kernel: (taps, 1),
            stride: (1, 1),
            freq_pad: (0, 0),
            groups: channels,
            causal: true,
        }
    }

    fn validate(&self) -> Result<()> {
        let Self {
            in_channels,
            out_channels,
            groups,
            kernel,
            stride,
            ..
        } = *self;
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::invalid(format!(
                "channels {in_channels}->{out_channels} not divisible by groups {groups}"
            )));
        }
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("kernel and stride must be positive"));
        }
        Ok(())
    }

    /// Geometry of the forward (large to small) map.
    pub fn geometry(&self) -> ConvGeometry {
        let t = if self.causal { self.kernel.0 - 1 } else { 0 };
        ConvGeometry {
            kernel: self.kernel,
            stride: self.stride,
            pad: [t, 0, self.freq_pad.0, self.freq_pad.1],
            groups: self.groups,
        }
    }

    /// Geometry whose adjoint is a causal transposed conv: the padding sits on
    /// the future side of the large axis.
    pub fn transposed_geometry(&self) -> ConvGeometry {
        let t = if self.causal { self.kernel.0 - 1 } else { 0 };
        ConvGeometry {
            kernel: self.kernel,
            stride: self.stride,
            pad: [0, t, self.freq_pad.0, self.freq_pad.1],
            groups: self.groups,
        }
    }

    pub fn output_size(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        self.geometry().conv_out(input)
    }

    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }
}

fn channel_bias(bias: &Var) -> Result<Var> {
    bias.reshape(&[1, bias.shape()[0], 1, 1])
}

/// 2-D convolution over `[B, C, T, F]` with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, spec: Conv2dSpec) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels / spec.groups * spec.taps();
        let bound = 1.0 / (fan_in as f64).sqrt();
        b.uniform(
            &format!("{name}.weight"),
            &[
                spec.out_channels,
                spec.in_channels / spec.groups,
                spec.kernel.0,
                spec.kernel.1,
            ],
            bound,
        )?;
        b.uniform(&format!("{name}.bias"), &[spec.out_channels], bound)?;
        Ok(Self {
            name: name.to_string(),
            spec,
        })
    }

    pub fn param_count(&self) -> usize {
        let s = &self.spec;
        s.in_channels / s.groups * s.out_channels * s.taps() + s.out_channels
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Result<Var> {
        if x.shape().len() != 4 || x.shape()[1] != self.spec.in_channels {
            return Err(Error::shape(
                "conv2d input",
                x.shape(),
                &[self.spec.in_channels],
            ));
        }
        let w = s.param(&format!("{}.weight", self.name))?;
        let bias = s.param(&format!("{}.bias", self.name))?;
        x.conv2d(&w, self.spec.geometry())?
            .add(&channel_bias(&bias)?)
    }
}

/// Transposed convolution mirroring a forward [`Conv2dSpec`].
///
/// `spec.in_channels` is the channel count of the small (input) side and
/// `spec.out_channels` that of the restored large side.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub spec: Conv2dSpec,
}

impl ConvTranspose2d {
    pub fn new(b: &mut Builder, name: &str, spec: Conv2dSpec) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.out_channels / spec.groups * spec.taps();
        let bound = 1.0 / (fan_in as f64).sqrt();
        b.uniform(
            &format!("{name}.weight"),
            &[
                spec.in_channels,
                spec.out_channels / spec.groups,
                spec.kernel.0,
                spec.kernel.1,
            ],
            bound,
        )?;
        b.uniform(&format!("{name}.bias"), &[spec.out_channels], bound)?;
        Ok(Self {
            name: name.to_string(),
            spec,
        })
    }

    pub fn param_count(&self) -> usize {
        let s = &self.spec;
        s.in_channels * (s.out_channels / s.groups) * s.taps() + s.out_channels
    }

    /// Maps `[B, C_in, T', F']` back to `[B, C_out, T, F]` for the given `(T, F)`.
    pub fn forward(&self, s: &Session, x: &Var, large: (usize, usize)) -> Result<Var> {
        if x.shape().len() != 4 || x.shape()[1] != self.spec.in_channels {
            return Err(Error::shape(
                "conv_transpose2d input",
                x.shape(),
                &[self.spec.in_channels],
            ));
        }
        let w = s.param(&format!("{}.weight", self.name))?;
        let bias = s.param(&format!("{}.bias", self.name))?;
        x.conv_transpose2d(&w, self.spec.transposed_geometry(), large)?
            .add(&channel_bias(&bias)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmSpec {
    pub input_dim: usize,
    /// Hidden units per direction.
    pub hidden_dim: usize,
    pub bidirectional: bool,
}

impl LstmSpec {
    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn output_dim(&self) -> usize {
        self.hidden_dim * self.directions()
    }

    pub fn param_count(&self) -> usize {
        self.directions() * 4 * self.hidden_dim * (self.input_dim + self.hidden_dim + 1)
    }
}

/// LSTM over `[N, L, D]`; a bidirectional layer concatenates the forward and
/// reversed passes on the feature axis.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub name: String,
    pub spec: LstmSpec,
}

impl Lstm {
    pub fn new(b: &mut Builder, name: &str, spec: LstmSpec) -> Result<Self> {
        let h = spec.hidden_dim;
        let bound = 1.0 / (h as f64).sqrt();
        for dir in Self::dir_names(&spec) {
            b.uniform(
                &format!("{name}.{dir}.w_ih"),
                &[4 * h, spec.input_dim],
                bound,
            )?;
            b.uniform(&format!("{name}.{dir}.w_hh"), &[4 * h, h], bound)?;
            b.uniform(&format!("{name}.{dir}.bias"), &[4 * h], bound)?;
        }
        Ok(Self {
            name: name.to_string(),
            spec,
        })
    }

    fn dir_names(spec: &LstmSpec) -> &'static [&'static str] {
        if spec.bidirectional {
            &["fwd", "bwd"]
        } else {
            &["fwd"]
        }
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Runs the layer; `init` gives per-direction `(h0, c0)` states.
    pub fn forward_with_state(
        &self,
        s: &Session,
        x: &Var,
        init: Option<&[(Tensor, Tensor)]>,
    ) -> Result<Var> {
        if x.shape().len() != 3 || x.shape()[2] != self.spec.input_dim {
            return Err(Error::shape(
                "lstm input",
                x.shape(),
                &[self.spec.input_dim],
            ));
        }
        let dirs = Self::dir_names(&self.spec);
        if let Some(st) = init {
            if st.len() != dirs.len() {
                return Err(Error::invalid(format!(
                    "lstm expects {} initial states, got {}",
                    dirs.len(),
                    st.len()
                )));
            }
        }
        let mut outs = Vec::with_capacity(dirs.len());
        for (k, dir) in dirs.iter().enumerate() {
            let p = |n: &str| s.param(&format!("{}.{dir}.{n}", self.name));
            let state = init.map(|st| (&st[k].0, &st[k].1));
            outs.push(
                x.lstm(&p("w_ih")?, &p("w_hh")?, &p("bias")?, k == 1, state)?
                    .output,
            );
        }
        if outs.len() == 1 {
            Ok(outs.pop().unwrap())
        } else {
            Var::concat(&[&outs[0], &outs[1]], 2)
        }
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Result<Var> {
        self.forward_with_state(s, x, None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

impl AttentionSpec {
    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Four projections with biases.
    pub fn param_count(&self) -> usize {
        let (d, w) = (self.model_dim, self.inner_dim());
        3 * (d * w + w) + w * d + d
    }
}

/// Multi-head scaled dot-product self-attention over `[B, L, D]`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub name: String,
    pub spec: AttentionSpec,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, spec: AttentionSpec) -> Result<Self> {
        if spec.heads == 0 || spec.head_dim == 0 || spec.model_dim == 0 {
            return Err(Error::invalid(
                "attention heads, head_dim and model_dim must be positive",
            ));
        }
        let (d, w) = (spec.model_dim, spec.inner_dim());
        Ok(Self {
            name: name.to_string(),
            spec,
            query: Linear::new(b, &format!("{name}.q"), d, w)?,
            key: Linear::new(b, &format!("{name}.k"), d, w)?,
            value: Linear::new(b, &format!("{name}.v"), d, w)?,
            output: Linear::new(b, &format!("{name}.out"), w, d)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    fn split_heads(&self, x: &Var) -> Result<Var> {
        let (b, l) = (x.shape()[0], x.shape()[1]);
        x.reshape(&[b, l, self.spec.heads, self.spec.head_dim])?
            .permute(&[0, 2, 1, 3])
    }

    /// Attention weights `[B, heads, L, L]` and the projected output. The
    /// value projection reads `value_input` when given, `x` otherwise.
    pub fn forward_with_weights(
        &self,
        s: &Session,
        x: &Var,
        value_input: Option<&Var>,
    ) -> Result<(Var, Var)> {
        if x.shape().len() != 3 || x.shape()[2] != self.spec.model_dim {
            return Err(Error::shape(
                "attention input",
                x.shape(),
                &[self.spec.model_dim],
            ));
        }
        if let Some(v) = value_input {
            if v.shape() != x.shape() {
                return Err(Error::shape("attention value input", v.shape(), x.shape()));
            }
        }
        let (b, l) = (x.shape()[0], x.shape()[1]);
        let q = self.split_heads(&self.query.forward(s, x)?)?;
        let k = self.split_heads(&self.key.forward(s, x)?)?;
        let v = self.split_heads(&self.value.forward(s, value_input.unwrap_or(x))?)?;
        let mut scores = q
            .matmul(&k.permute(&[0, 1, 3, 2])?)?
            .scale(1.0 / (self.spec.head_dim as f64).sqrt());
        if self.spec.causal {
            scores = scores.add(&s.input(causal_mask(l)))?;
        }
        let weights = scores.softmax();
        let ctx =
            weights
                .matmul(&v)?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b, l, self.spec.inner_dim()])?;
        Ok((weights, self.output.forward(s, &ctx)?))
    }

    pub fn forward(&self, s: &Session, x: &Var, value_input: Option<&Var>) -> Result<Var> {
        Ok(self.forward_with_weights(s, x, value_input)?.1)
    }
}

/// Batch normalization over axis 1 with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        b.constant(&format!("{name}.weight"), &[channels], 1.0)?;
        b.constant(&format!("{name}.bias"), &[channels], 0.0)?;
        b.buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?;
        b.buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]))?;
        Ok(Self {
            name: name.to_string(),
            channels,
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Result<Var> {
        if x.shape().len() < 2 || x.shape()[1] != self.channels {
            return Err(Error::shape(
                "batch_norm input",
                x.shape(),
                &[self.channels],
            ));
        }
        let gamma = s.param(&format!("{}.weight", self.name))?;
        let beta = s.param(&format!("{}.bias", self.name))?;
        match s.mode() {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(&gamma, &beta, BN_EPS)?;
                s.record_batch_stats(&self.name, stats);
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.buffer(&format!("{}.running_mean", self.name))?;
                let var = s.buffer(&format!("{}.running_var", self.name))?;
                let mut bshape = vec![1; x.shape().len()];
                bshape[1] = self.channels;
                let inv = s.input(Tensor::new(
                    bshape.clone(),
                    var.data()
                        .iter()
                        .map(|v| 1.0 / (v + BN_EPS).sqrt())
                        .collect(),
                )?);
                let mean = s.input(Tensor::new(bshape.clone(), mean.data().to_vec())?);
                let scale = gamma.reshape(&bshape)?.mul(&inv)?;
                x.sub(&mean)?.mul(&scale)?.add(&beta.reshape(&bshape)?)
            }
        }
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        b.constant(&format!("{name}.weight"), &[dim], 1.0)?;
        b.constant(&format!("{name}.bias"), &[dim], 0.0)?;
        Ok(Self {
            name: name.to_string(),
            dim,
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Result<Var> {
        let gamma = s.param(&format!("{}.weight", self.name))?;
        let beta = s.param(&format!("{}.bias", self.name))?;
        x.layer_norm(&gamma, &beta, Self::EPS)
    }
}
