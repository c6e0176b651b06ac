mod common;

use common::{causality_trials, eval, grads_with_params, perturb_from, rng, split_change};
use pdpcrn::models::{Bottleneck, Dprnn, MixingBlock, Model, ModelConfig, Variant};
use pdpcrn::nn::{Builder, Mode, ParamStore, Session};
use pdpcrn::signal::{stft, MultichannelWave, SAMPLE_RATE};
use pdpcrn::{Result, Tensor, Var};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain-loop LSTM over a sequence of vectors; gate order (i, f, g, o).
fn lstm_oracle(seq: &[Vec<f64>], p: &ParamStore, prefix: &str, reverse: bool) -> Vec<Vec<f64>> {
    let w_ih = p.get(&format!("{prefix}.w_ih")).unwrap();
    let w_hh = p.get(&format!("{prefix}.w_hh")).unwrap();
    let bias = p.get(&format!("{prefix}.bias")).unwrap().data();
    let (h4, inp) = (w_ih.shape()[0], w_ih.shape()[1]);
    let hid = h4 / 4;
    let (mut h, mut c) = (vec![0.0; hid], vec![0.0; hid]);
    let mut out = vec![Vec::new(); seq.len()];
    let order: Vec<usize> = if reverse {
        (0..seq.len()).rev().collect()
    } else {
        (0..seq.len()).collect()
    };
    for &t in &order {
        let z: Vec<f64> = (0..h4)
            .map(|r| {
                bias[r]
                    + (0..inp)
                        .map(|j| w_ih.data()[r * inp + j] * seq[t][j])
                        .sum::<f64>()
                    + (0..hid)
                        .map(|j| w_hh.data()[r * hid + j] * h[j])
                        .sum::<f64>()
            })
            .collect();
        for k in 0..hid {
            let (i, f, g, o) = (
                sigmoid(z[k]),
                sigmoid(z[hid + k]),
                z[2 * hid + k].tanh(),
                sigmoid(z[3 * hid + k]),
            );
            c[k] = f * c[k] + i * g;
            h[k] = o * c[k].tanh();
        }
        out[t] = h.clone();
    }
    out
}

fn linear_oracle(x: &[f64], p: &ParamStore, prefix: &str) -> Vec<f64> {
    let w = p.get(&format!("{prefix}.weight")).unwrap();
    let b = p.get(&format!("{prefix}.bias")).unwrap().data();
    let (i_dim, o_dim) = (w.shape()[0], w.shape()[1]);
    (0..o_dim)
        .map(|o| {
            b[o] + (0..i_dim)
                .map(|i| x[i] * w.data()[i * o_dim + o])
                .sum::<f64>()
        })
        .collect()
}

fn layer_norm_oracle(x: &[f64], p: &ParamStore, prefix: &str) -> Vec<f64> {
    let g = p.get(&format!("{prefix}.weight")).unwrap().data();
    let b = p.get(&format!("{prefix}.bias")).unwrap().data();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

/// Independent DPRNN over `[1, C, T, F]`.
fn dprnn_oracle(x: &Tensor, p: &ParamStore, name: &str) -> Tensor {
    let (c, t_len, f_len) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = x.clone();
    for t in 0..t_len {
        let seq: Vec<Vec<f64>> = (0..f_len)
            .map(|f| (0..c).map(|ch| x.get(&[0, ch, t, f])).collect())
            .collect();
        let fwd = lstm_oracle(&seq, p, &format!("{name}.intra_rnn.fwd"), false);
        let bwd = lstm_oracle(&seq, p, &format!("{name}.intra_rnn.bwd"), true);
        let mut flat = Vec::new();
        for f in 0..f_len {
            let both: Vec<f64> = fwd[f].iter().chain(&bwd[f]).cloned().collect();
            flat.extend(linear_oracle(&both, p, &format!("{name}.intra_fc")));
        }
        let normed = layer_norm_oracle(&flat, p, &format!("{name}.intra_norm"));
        for f in 0..f_len {
            for ch in 0..c {
                let v = y.get(&[0, ch, t, f]) + normed[f * c + ch];
                y.set(&[0, ch, t, f], v);
            }
        }
    }
    let mut proj = vec![vec![Vec::new(); f_len]; t_len];
    for f in 0..f_len {
        let seq: Vec<Vec<f64>> = (0..t_len)
            .map(|t| (0..c).map(|ch| y.get(&[0, ch, t, f])).collect())
            .collect();
        let out = lstm_oracle(&seq, p, &format!("{name}.inter_rnn.fwd"), false);
        for t in 0..t_len {
            proj[t][f] = linear_oracle(&out[t], p, &format!("{name}.inter_fc"));
        }
    }
    let mut z = y.clone();
    for t in 0..t_len {
        let flat: Vec<f64> = proj[t].iter().flatten().cloned().collect();
        let normed = layer_norm_oracle(&flat, p, &format!("{name}.inter_norm"));
        for f in 0..f_len {
            for ch in 0..c {
                z.set(&[0, ch, t, f], y.get(&[0, ch, t, f]) + normed[f * c + ch]);
            }
        }
    }
    z
}

fn dprnn(c: usize, hidden: usize, f: usize, seed: u64) -> (Dprnn, ParamStore) {
    let mut b = Builder::new(seed);
    let d = Dprnn::new(&mut b, "d", c, hidden, f).unwrap();
    (d, b.finish())
}

#[test]
fn dprnn_matches_loop_oracle() {
    for t in [1, 4] {
        let (d, store) = dprnn(3, 4, 5, 10 + t as u64);
        let x = Tensor::randn(&[1, 3, t, 5], 1.0, &mut rng(t as u64));
        let got = eval(&store, &x, |s, v| d.forward(s, v));
        let want = dprnn_oracle(&x, &store, "d");
        assert!(
            got.max_abs_diff(&want) < 1e-12,
            "T={t}: {}",
            got.max_abs_diff(&want)
        );
    }
}

#[test]
fn dprnn_with_zero_projections_is_identity() {
    let (d, mut store) = dprnn(4, 6, 7, 3);
    for n in [
        "d.intra_fc.weight",
        "d.intra_fc.bias",
        "d.inter_fc.weight",
        "d.inter_fc.bias",
    ] {
        store.get_mut(n).unwrap().data_mut().fill(0.0);
    }
    let x = Tensor::randn(&[2, 4, 5, 7], 1.0, &mut rng(4));
    assert_eq!(eval(&store, &x, |s, v| d.forward(s, v)), x);
}

#[test]
fn dprnn_is_causal_and_shape_preserving() {
    let (d, store) = dprnn(4, 6, 7, 5);
    let worst = causality_trials(&[1, 4, 8, 7], 2, 20, 6, |x| {
        eval(&store, x, |s, v| d.forward(s, v))
    });
    assert!(worst < 1e-12, "{worst}");
    let x = Tensor::randn(&[2, 4, 3, 7], 1.0, &mut rng(7));
    assert_eq!(
        eval(&store, &x, |s, v| d.forward(s, v)).shape(),
        &[2, 4, 3, 7]
    );
}

fn tiny_block(bi: bool, seed: u64) -> (MixingBlock, ParamStore, ModelConfig) {
    let cfg = ModelConfig::tiny().with_bi_interaction(bi);
    let mut b = Builder::new(seed);
    let m = MixingBlock::new(&mut b, "m", &cfg, 16, 6).unwrap();
    (m, b.finish(), cfg)
}

fn sequences(x: &Var) -> Result<Var> {
    let s = x.shape().to_vec();
    x.permute(&[0, 3, 2, 1])?
        .reshape(&[s[0] * s[3], s[2], s[1]])
}

fn unsequences(y: &Var, b: usize, f: usize) -> Result<Var> {
    let (t, c) = (y.shape()[1], y.shape()[2]);
    y.reshape(&[b, f, t, c])?.permute(&[0, 3, 2, 1])
}

#[test]
fn mixing_block_without_interaction_is_sum_of_branches() {
    let (m, store, _) = tiny_block(false, 8);
    assert!(m.channel_gate.is_none() && m.spatial_gate.is_none());
    let x = Tensor::randn(&[2, 16, 5, 6], 1.0, &mut rng(9));
    let got = eval(&store, &x, |s, v| m.forward(s, v));
    let want = eval(&store, &x, |s, v| {
        let a = m.left_dprnn.forward(s, v)?;
        let left = a.add(&unsequences(
            &m.attention.forward(s, &sequences(&a)?, None)?,
            2,
            6,
        )?)?;
        let right = m.right_dprnn.forward(s, &m.depthwise.forward(s, v)?)?;
        left.add(&right)
    });
    assert_eq!(got, want);
}

#[test]
fn saturated_gates_reduce_to_plain_block() {
    let (m, mut store, cfg) = tiny_block(true, 10);
    for gate in ["m.channel_gate", "m.spatial_gate"] {
        store
            .get_mut(&format!("{gate}.conv2.weight"))
            .unwrap()
            .data_mut()
            .fill(0.0);
        store
            .get_mut(&format!("{gate}.conv2.bias"))
            .unwrap()
            .data_mut()
            .fill(40.0);
    }
    let mut scratch = Builder::new(0);
    let plain =
        MixingBlock::new(&mut scratch, "m", &cfg.with_bi_interaction(false), 16, 6).unwrap();
    let x = Tensor::randn(&[1, 16, 5, 6], 1.0, &mut rng(11));
    let a = eval(&store, &x, |s, v| m.forward(s, v));
    let b = eval(&store, &x, |s, v| plain.forward(s, v));
    assert!(a.max_abs_diff(&b) < 1e-6);
}

#[test]
fn gates_lie_strictly_inside_unit_interval() {
    let (m, store, _) = tiny_block(true, 12);
    let x = Tensor::randn(&[1, 16, 6, 6], 2.0, &mut rng(13));
    let s = Session::new(&store, Mode::Eval);
    let st = m.forward_detailed(&s, &s.input(x)).unwrap();
    let cg = st.channel_gate.unwrap().value().clone();
    let sg = st.spatial_gate.unwrap().value().clone();
    assert_eq!(cg.shape(), &[1, 16, 6, 6]);
    assert_eq!(sg.shape(), &[1, 1, 6, 6]);
    assert!(cg
        .data()
        .iter()
        .chain(sg.data())
        .all(|g| *g > 0.0 && *g < 1.0));
    assert_eq!(st.left.shape(), st.right.shape());
}

#[test]
fn full_block_preserves_shape() {
    let cfg = ModelConfig::full();
    let mut b = Builder::new(14);
    let m = MixingBlock::new(&mut b, "m", &cfg, 80, 51).unwrap();
    let store = b.finish();
    let x = Tensor::randn(&[1, 80, 12, 51], 1.0, &mut rng(15));
    assert_eq!(
        eval(&store, &x, |s, v| m.forward(s, v)).shape(),
        &[1, 80, 12, 51]
    );
    assert_eq!(m.interaction_param_count(), 6510 + 1636);
}

#[test]
fn encoder_geometry() {
    let cfg = ModelConfig::full();
    assert_eq!(cfg.freq_sizes(), vec![201, 101, 51, 51, 51, 51]);
    let (model, mut store) = Model::build(&cfg, 16).unwrap();
    assert_eq!(model.encoder.layers[0].0.spec.in_channels, 32);
    assert_eq!(model.encoder.layers[0].0.spec.out_channels, 32);
    let x = Tensor::randn(&[1, 32, 4, 201], 1.0, &mut rng(17));
    let s = Session::new(&store, Mode::Eval);
    let (latent, skips) = model.encoder.forward(&s, &s.input(x)).unwrap();
    assert_eq!(latent.shape(), &[1, 80, 4, 51]);
    assert_eq!(skips.len(), 5);
    assert_eq!(skips[0].shape(), &[1, 32, 4, 101]);
    drop(s);

    let s = Session::new(&store, Mode::Eval);
    assert!(model
        .encoder
        .forward(&s, &s.input(Tensor::zeros(&[1, 30, 4, 201])))
        .is_err());
    drop(s);

    for i in 0..5 {
        store
            .get_mut(&format!("encoder.{i}.conv.bias"))
            .unwrap()
            .data_mut()
            .fill(0.0);
    }
    let s = Session::new(&store, Mode::Eval);
    let (latent, _) = model
        .encoder
        .forward(&s, &s.input(Tensor::zeros(&[1, 32, 3, 201])))
        .unwrap();
    assert!(latent.value().data().iter().all(|v| *v == 0.0));
}

#[test]
fn decoder_shapes_zero_weights_and_skip_errors() {
    let cfg = ModelConfig::tiny();
    let (model, mut store) = Model::build(&cfg, 18).unwrap();
    let x = Tensor::randn(&[2, 4, 5, 201], 1.0, &mut rng(19));
    assert_eq!(
        eval(&store, &x, |s, v| model.forward(s, v)).shape(),
        &[2, 4, 5, 201]
    );

    let s = Session::new(&store, Mode::Eval);
    let (latent, skips) = model.encoder.forward(&s, &s.input(x.clone())).unwrap();
    assert!(model.decoder.forward(&s, &latent, &skips[1..]).is_err());
    let mut wrong = skips.clone();
    wrong[4] = s.input(Tensor::zeros(&[2, 16, 4, 51]));
    assert!(model.decoder.forward(&s, &latent, &wrong).is_err());
    drop(s);

    let names: Vec<String> = store
        .params()
        .filter(|e| e.name.starts_with("decoder."))
        .map(|e| e.name.clone())
        .collect();
    for n in names {
        store.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let y = eval(&store, &x, |s, v| model.forward(s, v));
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn full_model_is_mimo() {
    let (model, store) = Model::build(&ModelConfig::full(), 20).unwrap();
    let mut r = rng(21);
    let chans: Vec<Vec<f64>> = (0..16)
        .map(|_| Tensor::randn(&[10_200], 0.1, &mut r).into_data())
        .collect();
    let spec = stft(&MultichannelWave::new(SAMPLE_RATE, chans).unwrap()).unwrap();
    assert_eq!(spec.frames(), 50);
    let out = model.enhance(&store, &spec).unwrap();
    assert_eq!((out.channels(), out.frames(), out.bins()), (16, 50, 201));
    let again = model.enhance(&store, &spec).unwrap();
    assert_eq!(out, again);
}

#[test]
fn end_to_end_causality_for_both_variants() {
    for variant in [Variant::Pdpcrn, Variant::Dpcrn] {
        let cfg = ModelConfig::tiny().with_variant(variant);
        let (model, store) = Model::build(&cfg, 22).unwrap();
        let worst = causality_trials(&[1, 4, 6, 201], 2, 20, 23, |x| {
            eval(&store, x, |s, v| model.forward(s, v))
        });
        assert!(worst < 1e-9, "{variant:?}: {worst}");
    }
}

#[test]
fn encoder_block_and_decoder_are_each_causal() {
    let cfg = ModelConfig::tiny();
    let (model, store) = Model::build(&cfg, 24).unwrap();
    let worst = causality_trials(&[1, 4, 6, 201], 2, 20, 25, |x| {
        eval(&store, x, |s, v| Ok(model.encoder.forward(s, v)?.0))
    });
    assert!(worst < 1e-9);
    let Bottleneck::Mixing(block) = &model.blocks[0] else {
        panic!("expected a Mixing Block")
    };
    let worst = causality_trials(&[1, 16, 6, 51], 2, 20, 26, |x| {
        eval(&store, x, |s, v| block.forward(s, v))
    });
    assert!(worst < 1e-9);

    let shapes: Vec<Vec<usize>> = cfg
        .encoder_channels
        .iter()
        .zip(&cfg.freq_sizes()[1..])
        .map(|(c, f)| vec![1, *c, 6, *f])
        .collect();
    for trial in 0..20u64 {
        let t = 1 + (trial as usize % 5);
        let skips: Vec<Tensor> = shapes
            .iter()
            .map(|sh| Tensor::randn(sh, 1.0, &mut rng(100 + trial)))
            .collect();
        let moved: Vec<Tensor> = skips
            .iter()
            .enumerate()
            .map(|(i, x)| perturb_from(x, 2, t, 200 + trial + i as u64))
            .collect();
        let latent = Tensor::randn(&shapes[4], 1.0, &mut rng(300 + trial));
        let latent_moved = perturb_from(&latent, 2, t, 400 + trial);
        let run = |lat: &Tensor, sk: &[Tensor]| {
            let s = Session::new(&store, Mode::Eval);
            let sk: Vec<Var> = sk.iter().map(|x| s.input(x.clone())).collect();
            model
                .decoder
                .forward(&s, &s.input(lat.clone()), &sk)
                .unwrap()
                .value()
                .clone()
        };
        let (past, future) = split_change(&run(&latent, &skips), &run(&latent_moved, &moved), 2, t);
        assert!(past < 1e-9 && future > 0.0);
    }
}

#[test]
fn parameter_ordering_and_ablation_difference() {
    let count = |cfg: &ModelConfig| Model::build(cfg, 0).unwrap().1.param_count();
    let full = ModelConfig::full();
    let (with_bi, without) = (
        count(&full),
        count(&full.clone().with_bi_interaction(false)),
    );
    assert_eq!(with_bi, 757_612);
    assert_eq!(with_bi - without, 2 * (6510 + 1636));
    assert!(without < with_bi);
    assert!(with_bi < count(&ModelConfig::dpcrn()));
}

#[test]
fn structural_hash_is_stable_and_discriminating() {
    let (a, sa) = Model::build(&ModelConfig::tiny(), 1).unwrap();
    let (_, sb) = Model::build(&ModelConfig::tiny(), 2).unwrap();
    assert_eq!(a.structural_hash(&sa), a.structural_hash(&sb));
    assert_eq!(a.structural_hash(&sa), 3_033_992_471_068_115_966);
    let (c, sc) = Model::build(&ModelConfig::tiny().with_bi_interaction(false), 1).unwrap();
    assert_ne!(a.structural_hash(&sa), c.structural_hash(&sc));
    assert!(a.check_store(&sc).is_err());
    a.check_store(&sb).unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ModelConfig::full();
    cfg.kernels.pop();
    assert!(Model::build(&cfg, 0).is_err());
    let mut cfg = ModelConfig::full();
    cfg.strides[0] = [2, 2];
    assert!(Model::build(&cfg, 0).is_err());
    let mut cfg = ModelConfig::full();
    cfg.dprnn_hidden = 81;
    assert!(Model::build(&cfg, 0).is_err());
}

/// Smallest layout that still exercises every path.
fn micro(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        mics: 1,
        encoder_channels: vec![2, 2, 2, 2, 4],
        strides: vec![[1, 2], [1, 2], [1, 2], [1, 2], [1, 1]],
        dprnn_hidden: 4,
        attention_heads: 2,
        attention_head_dim: 2,
        channel_gate_reduction: 2,
        spatial_gate_reduction: 2,
        ..ModelConfig::full()
    }
}

#[test]
fn end_to_end_gradients() {
    for variant in [Variant::Pdpcrn, Variant::Dpcrn] {
        let (model, store) = Model::build(&micro(variant), 27).unwrap();
        let x = Tensor::randn(&[1, 2, 3, 201], 1.0, &mut rng(28));
        let errs = grads_with_params(&store, Mode::Train, x, |s, v| model.forward(s, v));
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        assert!(worst < 1e-3, "{variant:?}: {worst:e}");
    }
}
