//! Exact parameter counts and analytic FLOP counts per layer.
//!
//! Convention: one multiply-accumulate is 2 FLOPs (biases ride along in the
//! accumulation), elementwise operations cost 1 FLOP per element, softmax 5
//! per element, layer norm 5 per element and an inference-time batch norm
//! 2 per element. Counts are for batch 1 and `T = seconds · 80` frames.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Bottleneck, Dprnn, Gate, MixingBlock, Model, ModelConfig};
use crate::nn::{Attention, Conv2dSpec, LstmSpec, ParamStore};
use crate::signal::{BINS, FRAME_RATE};

pub const FLOPS_PER_MAC: u64 = 2;
pub const SOFTMAX_FLOPS: u64 = 5;
pub const LAYER_NORM_FLOPS: u64 = 5;
pub const BATCH_NORM_FLOPS: u64 = 2;
/// Gate nonlinearities (3 sigmoid, 2 tanh), bias add and the cell/hidden
/// update, per hidden unit and step.
pub const LSTM_ELEMENTWISE_FLOPS: u64 = 13;

/// Reference totals for the two architectures: (method, #params in
/// thousands, GFLOPs per second of audio).
pub const REFERENCE_TOTALS: [(&str, f64, f64); 2] =
    [("PDPCRN", 790.78, 3.05), ("DPCRN", 814.60, 3.09)];

pub fn reference_for(method: &str) -> Option<(f64, f64)> {
    REFERENCE_TOTALS
        .iter()
        .find(|r| r.0 == method)
        .map(|r| (r.1, r.2))
}

/// FLOPs of a conv producing a `t_out × f_out` map.
pub fn conv_flops(spec: &Conv2dSpec, t_out: usize, f_out: usize) -> u64 {
    let (kt, kf) = spec.kernel;
    FLOPS_PER_MAC
        * (t_out * f_out * spec.out_channels * (spec.in_channels / spec.groups) * kt * kf) as u64
}

/// FLOPs of a transposed conv reading a `t_in × f_in` map: every input
/// element scatters into `C_out · k_t · k_f` outputs.
pub fn conv_transpose_flops(spec: &Conv2dSpec, t_in: usize, f_in: usize) -> u64 {
    let (kt, kf) = spec.kernel;
    FLOPS_PER_MAC * (t_in * f_in * spec.in_channels * spec.out_channels * kt * kf) as u64
}

/// FLOPs of `sequences` runs of `steps` steps.
pub fn lstm_flops(spec: &LstmSpec, sequences: usize, steps: usize) -> u64 {
    let h = spec.hidden_dim as u64;
    let per_step = FLOPS_PER_MAC * 4 * h * (spec.input_dim as u64 + h) + LSTM_ELEMENTWISE_FLOPS * h;
    per_step * (sequences * steps * spec.directions()) as u64
}

pub fn linear_flops(in_dim: usize, out_dim: usize, rows: usize) -> u64 {
    FLOPS_PER_MAC * (in_dim * out_dim * rows) as u64
}

pub fn dprnn_flops(d: &Dprnn, frames: usize) -> u64 {
    let (f, c) = (d.freq, d.channels);
    let elems = (frames * f * c) as u64;
    let intra = lstm_flops(&d.intra_rnn.spec, frames, f)
        + linear_flops(d.intra_fc.in_dim, d.intra_fc.out_dim, frames * f)
        + LAYER_NORM_FLOPS * elems
        + elems;
    let inter = lstm_flops(&d.inter_rnn.spec, f, frames)
        + linear_flops(d.inter_fc.in_dim, d.inter_fc.out_dim, frames * f)
        + LAYER_NORM_FLOPS * elems
        + elems;
    intra + inter
}

/// Causal MHSA along time, once per frequency bin. The score matrix is
/// computed densely and masked.
pub fn attention_flops(a: &Attention, frames: usize, freq: usize) -> u64 {
    let (c, d, heads) = (a.spec.model_dim, a.spec.inner_dim(), a.spec.heads);
    let t = frames;
    let per_bin = 3 * linear_flops(c, d, t)
        + FLOPS_PER_MAC * (t * t * d) as u64
        + (2 + SOFTMAX_FLOPS) * (heads * t * t) as u64
        + FLOPS_PER_MAC * (t * t * d) as u64
        + linear_flops(d, c, t);
    per_bin * freq as u64
}

pub fn gate_flops(g: &Gate, frames: usize, freq: usize) -> u64 {
    let hidden = g.first.spec.out_channels;
    let out = g.second.spec.out_channels;
    let map = frames * freq;
    conv_flops(&g.first.spec, frames, freq)
        + (BATCH_NORM_FLOPS + 1) * (map * hidden) as u64
        + conv_flops(&g.second.spec, frames, freq)
        + (map * out) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub method: String,
    pub mics: usize,
    pub seconds: f64,
    pub frames: usize,
    pub rows: Vec<LayerProfile>,
    pub total_params: usize,
    pub total_flops: u64,
}

fn mixing_rows(
    m: &MixingBlock,
    prefix: &str,
    frames: usize,
    freq: usize,
    store: &ParamStore,
    rows: &mut Vec<LayerProfile>,
) {
    let c = m.left_dprnn.channels;
    let elems = (frames * freq * c) as u64;
    let mut push = |name: &str, flops: u64| {
        let full = format!("{prefix}.{name}");
        rows.push(LayerProfile {
            params: store.param_count_under(&format!("{full}.")),
            name: full,
            flops,
        });
    };
    push("left", dprnn_flops(&m.left_dprnn, frames));
    push("attention", attention_flops(&m.attention, frames, freq));
    push("depthwise", conv_flops(&m.depthwise.spec, frames, freq));
    push("right", dprnn_flops(&m.right_dprnn, frames));
    if let Some(g) = &m.channel_gate {
        push("channel_gate", gate_flops(g, frames, freq));
    }
    if let Some(g) = &m.spatial_gate {
        push("spatial_gate", gate_flops(g, frames, freq));
    }
    let gated = m.channel_gate.is_some() as u64 + m.spatial_gate.is_some() as u64;
    // Attention residual, branch sum and one product per active gate.
    push("merge", (2 + gated) * elems);
}

/// Profile of `model` with stored parameters `store` over `seconds` of audio.
pub fn profile(model: &Model, store: &ParamStore, seconds: f64) -> Result<ProfileReport> {
    if !(seconds > 0.0) {
        return Err(Error::invalid("profile duration must be positive"));
    }
    model.check_store(store)?;
    let cfg = &model.config;
    let frames = (seconds * FRAME_RATE).round() as usize;
    let freqs = cfg.freq_sizes();
    let mut rows = Vec::new();
    for (i, (conv, bn)) in model.encoder.layers.iter().enumerate() {
        let f_out = freqs[i + 1];
        let out = (frames * f_out * bn.channels) as u64;
        let name = format!("encoder.{i}");
        rows.push(LayerProfile {
            params: store.param_count_under(&format!("{name}.")),
            name,
            flops: conv_flops(&conv.spec, frames, f_out) + (BATCH_NORM_FLOPS + 1) * out,
        });
    }
    let latent_freq = cfg.latent_freq();
    for (j, block) in model.blocks.iter().enumerate() {
        let prefix = format!("blocks.{j}");
        match block {
            Bottleneck::Mixing(m) => mixing_rows(m, &prefix, frames, latent_freq, store, &mut rows),
            Bottleneck::Plain(d) => rows.push(LayerProfile {
                params: store.param_count_under(&format!("{prefix}.")),
                name: prefix,
                flops: dprnn_flops(d, frames),
            }),
        }
    }
    let n = model.decoder.layers.len();
    for (j, (deconv, bn)) in model.decoder.layers.iter().enumerate() {
        let f_in = freqs[n - j];
        let f_out = model.decoder.freq_out[j];
        let post = bn.as_ref().map_or(0, |b| {
            (BATCH_NORM_FLOPS + 1) * (frames * f_out * b.channels) as u64
        });
        let name = format!("decoder.{j}");
        rows.push(LayerProfile {
            params: store.param_count_under(&format!("{name}.")),
            name,
            flops: conv_transpose_flops(&deconv.spec, frames, f_in) + post,
        });
    }
    let total_params = rows.iter().map(|r| r.params).sum();
    if total_params != store.param_count() {
        return Err(Error::invalid(format!(
            "profile rows cover {total_params} of {} parameters",
            store.param_count()
        )));
    }
    let total_flops = rows.iter().map(|r| r.flops).sum();
    Ok(ProfileReport {
        method: cfg.method_label(),
        mics: cfg.mics,
        seconds,
        frames,
        rows,
        total_params,
        total_flops,
    })
}

/// Builds `config` and profiles one second of audio.
pub fn profile_config(config: &ModelConfig) -> Result<ProfileReport> {
    let (model, store) = Model::build(config, 0)?;
    profile(&model, &store, 1.0)
}

impl ProfileReport {
    /// Parameters in encoder, bottleneck and decoder rows.
    pub fn stage_params(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for r in &self.rows {
            let i = if r.name.starts_with("encoder") {
                0
            } else if r.name.starts_with("blocks") {
                1
            } else {
                2
            };
            out[i] += r.params;
        }
        out
    }
}

/// Side-by-side profiles in the layout of a model-size table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reports: Vec<ProfileReport>,
}

impl Comparison {
    pub fn new(reports: Vec<ProfileReport>) -> Self {
        Self { reports }
    }

    /// `(method, baseline method, Δparams, ΔFLOPs)` of every report against
    /// the first one.
    pub fn deltas(&self) -> Vec<(String, String, i64, i64)> {
        let Some(base) = self.reports.first() else {
            return Vec::new();
        };
        self.reports[1..]
            .iter()
            .map(|r| {
                (
                    r.method.clone(),
                    base.method.clone(),
                    r.total_params as i64 - base.total_params as i64,
                    r.total_flops as i64 - base.total_flops as i64,
                )
            })
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        if let Some(r) = self.reports.first() {
            let _ = writeln!(
                s,
                "FLOPs for {} s of audio ({} frames, {} bins, M = {}); 1 MAC = 2 FLOPs, elementwise 1, softmax 5, layer norm 5, batch norm 2.\n",
                r.seconds, r.frames, BINS, r.mics
            );
        }
        s.push_str("| Method | #Params(K) | FLOPs(G) | Reference #Params(K) | Reference FLOPs(G) | Params gap |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for r in &self.reports {
            let k = r.total_params as f64 / 1e3;
            let g = r.total_flops as f64 / 1e9;
            match reference_for(&r.method) {
                Some((rk, rg)) => {
                    let _ = writeln!(
                        s,
                        "| {} | {k:.2} | {g:.2} | {rk:.2} | {rg:.2} | {:+.1}% |",
                        r.method,
                        100.0 * (k - rk) / rk
                    );
                }
                None => {
                    let _ = writeln!(s, "| {} | {k:.2} | {g:.2} | - | - | - |", r.method);
                }
            }
        }
        for (method, base, dp, df) in self.deltas() {
            let _ = writeln!(
                s,
                "\n{method} vs {base}: {:+.2}K params, {:+.3} GFLOPs",
                dp as f64 / 1e3,
                df as f64 / 1e9
            );
        }
        for r in &self.reports {
            let _ = writeln!(
                s,
                "\n### {}\n\n| Layer | Params | Share | MFLOPs |\n|---|---|---|---|",
                r.method
            );
            for row in &r.rows {
                let share = 100.0 * row.params as f64 / r.total_params.max(1) as f64;
                let _ = writeln!(
                    s,
                    "| {} | {} | {share:.1}% | {:.2} |",
                    row.name,
                    row.params,
                    row.flops as f64 / 1e6
                );
            }
            let [e, b, d] = r.stage_params();
            let _ = writeln!(
                s,
                "| encoder / bottleneck / decoder | {e} / {b} / {d} | | |"
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,layer,params,flops\n");
        for r in &self.reports {
            for row in &r.rows {
                let _ = writeln!(s, "{},{},{},{}", r.method, row.name, row.params, row.flops);
            }
            let _ = writeln!(s, "{},total,{},{}", r.method, r.total_params, r.total_flops);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, body) in [
            ("profile.md", self.to_markdown()),
            ("profile.csv", self.to_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
