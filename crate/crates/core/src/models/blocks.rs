use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{
    gelu, Attention, AttentionSpec, BatchNorm, Builder, Conv2d, Conv2dSpec, LayerNorm, Linear,
    Lstm, LstmSpec, Session,
};
use crate::tensor::Var;

/// `[B, C, T, F]` to `[B·F, T, C]`: one sequence over time per frequency bin.
fn time_sequences(x: &Var) -> Result<Var> {
    let &[b, c, t, f] = x.shape() else {
        return Err(Error::shape("time_sequences", x.shape(), &[0, 0, 0, 0]));
    };
    x.permute(&[0, 3, 2, 1])?.reshape(&[b * f, t, c])
}

fn from_time_sequences(y: &Var, b: usize, f: usize) -> Result<Var> {
    let (t, c) = (y.shape()[1], y.shape()[2]);
    y.reshape(&[b, f, t, c])?.permute(&[0, 3, 2, 1])
}

/// Intra-chunk pass across frequency, then inter-chunk pass across time,
/// each followed by a projection, a per-frame layer norm and a residual.
#[derive(Clone, Debug)]
pub struct Dprnn {
    pub name: String,
    pub channels: usize,
    pub freq: usize,
    pub intra_rnn: Lstm,
    pub intra_fc: Linear,
    pub intra_norm: LayerNorm,
    pub inter_rnn: Lstm,
    pub inter_fc: Linear,
    pub inter_norm: LayerNorm,
}

impl Dprnn {
    pub fn new(
        b: &mut Builder,
        name: &str,
        channels: usize,
        hidden: usize,
        freq: usize,
    ) -> Result<Self> {
        let intra = LstmSpec {
            input_dim: channels,
            hidden_dim: hidden / 2,
            bidirectional: true,
        };
        let inter = LstmSpec {
            input_dim: channels,
            hidden_dim: hidden,
            bidirectional: false,
        };
        Ok(Self {
            name: name.to_string(),
            channels,
            freq,
            intra_rnn: Lstm::new(b, &format!("{name}.intra_rnn"), intra)?,
            intra_fc: Linear::new(b, &format!("{name}.intra_fc"), intra.output_dim(), channels)?,
            intra_norm: LayerNorm::new(b, &format!("{name}.intra_norm"), freq * channels)?,
            inter_rnn: Lstm::new(b, &format!("{name}.inter_rnn"), inter)?,
            inter_fc: Linear::new(b, &format!("{name}.inter_fc"), inter.output_dim(), channels)?,
            inter_norm: LayerNorm::new(b, &format!("{name}.inter_norm"), freq * channels)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.intra_rnn.param_count()
            + self.intra_fc.param_count()
            + self.intra_norm.param_count()
            + self.inter_rnn.param_count()
            + self.inter_fc.param_count()
            + self.inter_norm.param_count()
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Result<Var> {
        let &[b, c, t, f] = x.shape() else {
            return Err(Error::shape(
                "dprnn input",
                x.shape(),
                &[0, self.channels, 0, self.freq],
            ));
        };
        if c != self.channels || f != self.freq {
            return Err(Error::shape(
                "dprnn input",
                x.shape(),
                &[b, self.channels, t, self.freq],
            ));
        }
        // Frames as [B, T, F, C].
        let frames = x.permute(&[0, 2, 3, 1])?;
        let intra = self
            .intra_rnn
            .forward(s, &frames.reshape(&[b * t, f, c])?)?;
        let intra = self.intra_fc.forward(s, &intra)?.reshape(&[b, t, f * c])?;
        let intra = self.intra_norm.forward(s, &intra)?.reshape(&[b, t, f, c])?;
        let frames = frames.add(&intra)?;

        let seq = frames.permute(&[0, 2, 1, 3])?.reshape(&[b * f, t, c])?;
        let inter = self.inter_rnn.forward(s, &seq)?;
        let inter = self.inter_fc.forward(s, &inter)?.reshape(&[b, f, t, c])?;
        let inter = inter.permute(&[0, 2, 1, 3])?.reshape(&[b, t, f * c])?;
        let inter = self.inter_norm.forward(s, &inter)?.reshape(&[b, t, f, c])?;
        frames.add(&inter)?.permute(&[0, 3, 1, 2])
    }
}

/// `σ(conv₂(GELU(BN(conv₁(x)))))` with causal 2×2 convs.
#[derive(Clone, Debug)]
pub struct Gate {
    pub first: Conv2d,
    pub norm: BatchNorm,
    pub second: Conv2d,
}

fn conv2x2(c_in: usize, c_out: usize) -> Conv2dSpec {
    Conv2dSpec {
        in_channels: c_in,
        out_channels: c_out,
        kernel: (2, 2),
        stride: (1, 1),
        freq_pad: (0, 1),
        groups: 1,
        causal: true,
    }
}

impl Gate {
    pub fn new(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            first: Conv2d::new(b, &format!("{name}.conv1"), conv2x2(c_in, hidden))?,
            norm: BatchNorm::new(b, &format!("{name}.bn"), hidden)?,
            second: Conv2d::new(b, &format!("{name}.conv2"), conv2x2(hidden, c_out))?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.norm.param_count() + self.second.param_count()
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Result<Var> {
        let h = gelu(&self.norm.forward(s, &self.first.forward(s, x)?)?);
        Ok(self.second.forward(s, &h)?.sigmoid())
    }
}

/// Intermediate tensors of one Mixing Block pass.
pub struct MixingState {
    /// Left branch after DPRNN and attention.
    pub left: Var,
    /// Right branch after depthwise conv and DPRNN.
    pub right: Var,
    /// `[B, C, T, F]` gate on the attention values.
    pub channel_gate: Option<Var>,
    /// `[B, 1, T, F]` gate on the right branch.
    pub spatial_gate: Option<Var>,
    pub output: Var,
}

/// Two parallel branches, DPRNN → causal MHSA on the left and depthwise
/// conv → DPRNN on the right, coupled by the interaction gates. The block
/// output is the sum of the branches.
#[derive(Clone, Debug)]
pub struct MixingBlock {
    pub left_dprnn: Dprnn,
    pub attention: Attention,
    pub depthwise: Conv2d,
    pub right_dprnn: Dprnn,
    /// Right to left, onto the attention values.
    pub channel_gate: Option<Gate>,
    /// Left to right, onto the right branch output.
    pub spatial_gate: Option<Gate>,
}

impl MixingBlock {
    pub fn new(
        b: &mut Builder,
        name: &str,
        cfg: &ModelConfig,
        channels: usize,
        freq: usize,
    ) -> Result<Self> {
        let attention = AttentionSpec {
            model_dim: channels,
            heads: cfg.attention_heads,
            head_dim: cfg.attention_head_dim,
            causal: true,
        };
        let (channel_gate, spatial_gate) = if cfg.bi_interaction {
            let ch = (channels / cfg.channel_gate_reduction).max(1);
            let sh = (channels / cfg.spatial_gate_reduction).max(1);
            (
                Some(Gate::new(
                    b,
                    &format!("{name}.channel_gate"),
                    channels,
                    ch,
                    channels,
                )?),
                Some(Gate::new(
                    b,
                    &format!("{name}.spatial_gate"),
                    channels,
                    sh,
                    1,
                )?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            left_dprnn: Dprnn::new(b, &format!("{name}.left"), channels, cfg.dprnn_hidden, freq)?,
            attention: Attention::new(b, &format!("{name}.attention"), attention)?,
            depthwise: Conv2d::new(
                b,
                &format!("{name}.depthwise"),
                Conv2dSpec::depthwise_time(channels, cfg.depthwise_kernel[1]),
            )?,
            right_dprnn: Dprnn::new(
                b,
                &format!("{name}.right"),
                channels,
                cfg.dprnn_hidden,
                freq,
            )?,
            channel_gate,
            spatial_gate,
        })
    }

    pub fn interaction_param_count(&self) -> usize {
        self.channel_gate.as_ref().map_or(0, Gate::param_count)
            + self.spatial_gate.as_ref().map_or(0, Gate::param_count)
    }

    pub fn param_count(&self) -> usize {
        self.left_dprnn.param_count()
            + self.attention.param_count()
            + self.depthwise.param_count()
            + self.right_dprnn.param_count()
            + self.interaction_param_count()
    }

    pub fn forward_detailed(&self, s: &Session, x: &Var) -> Result<MixingState> {
        let (b, f) = (x.shape()[0], x.shape()[3]);
        let right = self
            .right_dprnn
            .forward(s, &self.depthwise.forward(s, x)?)?;
        let channel_gate = self
            .channel_gate
            .as_ref()
            .map(|g| g.forward(s, &right))
            .transpose()?;

        let a = self.left_dprnn.forward(s, x)?;
        let values = match &channel_gate {
            Some(g) => a.mul(g)?,
            None => a.clone(),
        };
        let attended =
            self.attention
                .forward(s, &time_sequences(&a)?, Some(&time_sequences(&values)?))?;
        let left = a.add(&from_time_sequences(&attended, b, f)?)?;

        let spatial_gate = self
            .spatial_gate
            .as_ref()
            .map(|g| g.forward(s, &left))
            .transpose()?;
        let output = match &spatial_gate {
            Some(g) => left.add(&right.mul(g)?)?,
            None => left.add(&right)?,
        };
        Ok(MixingState {
            left,
            right,
            channel_gate,
            spatial_gate,
            output,
        })
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Result<Var> {
        Ok(self.forward_detailed(s, x)?.output)
    }
}
