use pdpcrn::nn::{
    Attention, AttentionSpec, BatchNorm, Builder, Conv2d, Conv2dSpec, ConvTranspose2d, LayerNorm,
    Linear, Lstm, LstmSpec, Mode, ParamStore, Session,
};
use pdpcrn::tensor::gradcheck::check;
use pdpcrn::{Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gradient check over the input and every named parameter.
fn layer_grads<F>(store: &ParamStore, mode: Mode, x: Tensor, f: F) -> Vec<f64>
where
    F: Fn(&Session, &Var) -> Result<Var>,
{
    let names: Vec<String> = store.params().map(|e| e.name.clone()).collect();
    let mut inputs = vec![x];
    inputs.extend(names.iter().map(|n| store.get(n).unwrap().clone()));
    check(&inputs, 1e-5, 5, |v| {
        let s = Session::on_tape(v[0].tape().clone(), store, mode);
        for (n, var) in names.iter().zip(&v[1..]) {
            s.bind(n, var.clone())?;
        }
        f(&s, &v[0])
    })
    .unwrap()
}

fn assert_small(errs: &[f64], tol: f64, what: &str) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < tol, "{what}: input {i} rel-err {e:e}");
    }
}

fn eval(store: &ParamStore, x: &Tensor, f: impl Fn(&Session, &Var) -> Result<Var>) -> Tensor {
    let s = Session::new(store, Mode::Eval);
    let xv = s.input(x.clone());
    f(&s, &xv).unwrap().value().clone()
}

/// Asserts that outputs at frames `< t` ignore a perturbation of frames `≥ t`.
fn assert_causal(x: &Tensor, time_axis: usize, run: impl Fn(&Tensor) -> Tensor, seed: u64) {
    let mut r = rng(seed);
    let len = x.shape()[time_axis];
    let base = run(x);
    for t in 0..len {
        let noise = Tensor::randn(x.shape(), 1.0, &mut r);
        let mut y = x.clone();
        let mut idx = vec![0; x.rank()];
        for k in 0..x.numel() {
            let mut rem = k;
            for ax in (0..x.rank()).rev() {
                idx[ax] = rem % x.shape()[ax];
                rem /= x.shape()[ax];
            }
            if idx[time_axis] >= t {
                y.data_mut()[k] += noise.data()[k];
            }
        }
        let out = run(&y);
        let mut changed_future = false;
        for k in 0..out.numel() {
            let mut rem = k;
            for ax in (0..out.rank()).rev() {
                idx[ax] = rem % out.shape()[ax];
                rem /= out.shape()[ax];
            }
            let d = (out.data()[k] - base.data()[k]).abs();
            if idx[time_axis] < t {
                assert!(
                    d < 1e-12,
                    "frame {} changed by perturbing frame {t}",
                    idx[time_axis]
                );
            } else if d > 0.0 {
                changed_future = true;
            }
        }
        assert!(changed_future, "perturbation at frame {t} had no effect");
    }
}

fn set(store: &mut ParamStore, name: &str, t: Tensor) {
    *store.get_mut(name).unwrap() = t;
}

#[test]
fn conv_1x1_identity_weights_is_identity() {
    let mut b = Builder::new(0);
    let spec = Conv2dSpec::causal(3, 3, (1, 1), (1, 1));
    let conv = Conv2d::new(&mut b, "c", spec).unwrap();
    let mut store = b.finish();
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.set(&[c, c, 0, 0], 1.0);
    }
    set(&mut store, "c.weight", w);
    set(&mut store, "c.bias", Tensor::zeros(&[3]));
    let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng(1));
    let y = eval(&store, &x, |s, x| conv.forward(s, x));
    assert_eq!(y, x);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut b = Builder::new(2);
    let spec = Conv2dSpec::causal(1, 1, (2, 3), (1, 1));
    let conv = Conv2d::new(&mut b, "c", spec).unwrap();
    let store = b.finish();
    let x = Tensor::randn(&[1, 1, 4, 6], 1.0, &mut rng(3));
    let y = eval(&store, &x, |s, x| conv.forward(s, x));
    let w = store.get("c.weight").unwrap();
    let bias = store.get("c.bias").unwrap().data()[0];
    assert_eq!(y.shape(), &[1, 1, 4, 6]);
    for t in 0..4 {
        for f in 0..6 {
            let mut acc = bias;
            for kt in 0..2 {
                for kf in 0..3 {
                    let (ti, fi) = (t as isize + kt as isize - 1, f as isize + kf as isize - 1);
                    if ti >= 0 && fi >= 0 && fi < 6 {
                        acc += w.get(&[0, 0, kt, kf]) * x.get(&[0, 0, ti as usize, fi as usize]);
                    }
                }
            }
            assert!((y.get(&[0, 0, t, f]) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_is_causal_and_checks_channels() {
    let mut b = Builder::new(4);
    let conv = Conv2d::new(&mut b, "c", Conv2dSpec::causal(2, 3, (2, 5), (1, 2))).unwrap();
    let store = b.finish();
    let x = Tensor::randn(&[1, 2, 6, 9], 1.0, &mut rng(5));
    assert_causal(&x, 2, |x| eval(&store, x, |s, x| conv.forward(s, x)), 6);
    let bad = Tensor::zeros(&[1, 3, 6, 9]);
    let s = Session::new(&store, Mode::Eval);
    assert!(conv.forward(&s, &s.input(bad)).is_err());
    assert!(Conv2d::new(
        &mut Builder::new(0),
        "g",
        Conv2dSpec {
            groups: 2,
            ..Conv2dSpec::causal(3, 4, (1, 1), (1, 1))
        }
    )
    .is_err());
}

#[test]
fn transposed_conv_restores_shape_and_is_adjoint() {
    let spec = Conv2dSpec::causal(3, 4, (2, 5), (1, 2));
    let mut b = Builder::new(7);
    let conv = Conv2d::new(&mut b, "enc", spec).unwrap();
    let mirrored = Conv2dSpec {
        in_channels: 4,
        out_channels: 3,
        ..spec
    };
    let deconv = ConvTranspose2d::new(&mut b, "dec", mirrored).unwrap();
    let mut store = b.finish();
    // Share one weight tensor and drop the biases for the adjoint identity.
    let w = store.get("enc.weight").unwrap().clone();
    set(&mut store, "dec.weight", w);
    set(&mut store, "enc.bias", Tensor::zeros(&[4]));
    set(&mut store, "dec.bias", Tensor::zeros(&[3]));

    let mut r = rng(8);
    let x = Tensor::randn(&[2, 3, 5, 201], 1.0, &mut r);
    let cx = eval(&store, &x, |s, x| conv.forward(s, x));
    assert_eq!(cx.shape(), &[2, 4, 5, 101]);
    let y = Tensor::randn(cx.shape(), 1.0, &mut r);
    let ty = eval(&store, &y, |s, y| deconv.forward(s, y, (5, 201)));
    assert_eq!(ty.shape(), x.shape());
    // The causal transposed conv is the exact adjoint of the same-weight conv
    // padded on the future side; the adjoint of the past-padded conv itself
    // would be anti-causal.
    let s = Session::new(&store, Mode::Eval);
    let wv = s.param("enc.weight").unwrap();
    let future = s
        .input(x.clone())
        .conv2d(&wv, spec.transposed_geometry())
        .unwrap();
    assert_eq!(future.shape(), cx.shape());
    let (lhs, rhs) = (future.value().dot(&y), x.dot(&ty));
    assert!(
        (lhs - rhs).abs() / lhs.abs().max(rhs.abs()) < 1e-10,
        "{lhs} vs {rhs}"
    );

    assert_causal(
        &y,
        2,
        |y| eval(&store, y, |s, y| deconv.forward(s, y, (5, 201))),
        9,
    );
    let s = Session::new(&store, Mode::Eval);
    assert!(deconv.forward(&s, &s.input(y.clone()), (5, 199)).is_err());
}

#[test]
fn depthwise_conv_taps() {
    let c = 3;
    let mut b = Builder::new(10);
    let dw = Conv2d::new(&mut b, "dw", Conv2dSpec::depthwise_time(c, 3)).unwrap();
    let mut store = b.finish();
    set(&mut store, "dw.bias", Tensor::zeros(&[c]));
    let x = Tensor::randn(&[1, c, 6, 4], 1.0, &mut rng(11));

    let taps = |k: [f64; 3]| Tensor::from_fn(&[c, 1, 3, 1], |i| k[i % 3]);
    set(&mut store, "dw.weight", taps([0.0, 0.0, 1.0]));
    assert_eq!(eval(&store, &x, |s, x| dw.forward(s, x)), x);

    set(&mut store, "dw.weight", taps([1.0, 0.0, 0.0]));
    let y = eval(&store, &x, |s, x| dw.forward(s, x));
    for ch in 0..c {
        for t in 0..6 {
            for f in 0..4 {
                let want = if t >= 2 {
                    x.get(&[0, ch, t - 2, f])
                } else {
                    0.0
                };
                assert_eq!(y.get(&[0, ch, t, f]), want);
            }
        }
    }

    let w = Tensor::randn(&[c, 1, 3, 1], 1.0, &mut rng(12));
    let bias = Tensor::randn(&[c], 1.0, &mut rng(13));
    set(&mut store, "dw.weight", w.clone());
    set(&mut store, "dw.bias", bias.clone());
    let y = eval(&store, &x, |s, x| dw.forward(s, x));
    for ch in 0..c {
        for t in 0..6 {
            for f in 0..4 {
                let mut acc = bias.data()[ch];
                for k in 0..3 {
                    if t + k >= 2 {
                        acc += w.get(&[ch, 0, k, 0]) * x.get(&[0, ch, t + k - 2, f]);
                    }
                }
                assert!((y.get(&[0, ch, t, f]) - acc).abs() < 1e-12);
            }
        }
    }
    assert!(Conv2d::new(
        &mut Builder::new(0),
        "bad",
        Conv2dSpec {
            out_channels: 4,
            ..Conv2dSpec::depthwise_time(3, 3)
        }
    )
    .is_err());
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reference unrolled cell over one sequence, returning the hidden states.
fn unrolled(store: &ParamStore, prefix: &str, seq: &[Vec<f64>], hidden: usize) -> Vec<Vec<f64>> {
    let wi = store.get(&format!("{prefix}.w_ih")).unwrap();
    let wh = store.get(&format!("{prefix}.w_hh")).unwrap();
    let b = store.get(&format!("{prefix}.bias")).unwrap();
    let (mut h, mut c) = (vec![0.0; hidden], vec![0.0; hidden]);
    let mut out = Vec::new();
    for x in seq {
        let mut z = b.data().to_vec();
        for (row, zr) in z.iter_mut().enumerate() {
            for (k, xv) in x.iter().enumerate() {
                *zr += wi.get(&[row, k]) * xv;
            }
            for k in 0..hidden {
                *zr += wh.get(&[row, k]) * h[k];
            }
        }
        for j in 0..hidden {
            let (i, f) = (sigmoid(z[j]), sigmoid(z[hidden + j]));
            let (g, o) = (z[2 * hidden + j].tanh(), sigmoid(z[3 * hidden + j]));
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        out.push(h.clone());
    }
    out
}

#[test]
fn bidirectional_lstm_matches_unrolled_cells() {
    let (n, len, input, hidden) = (2, 5, 3, 4);
    let spec = LstmSpec {
        input_dim: input,
        hidden_dim: hidden,
        bidirectional: true,
    };
    let mut b = Builder::new(14);
    let lstm = Lstm::new(&mut b, "rnn", spec).unwrap();
    let store = b.finish();
    let x = Tensor::randn(&[n, len, input], 1.0, &mut rng(15));
    let y = eval(&store, &x, |s, x| lstm.forward(s, x));
    assert_eq!(y.shape(), &[n, len, 2 * hidden]);
    for s in 0..n {
        let seq: Vec<Vec<f64>> = (0..len)
            .map(|t| (0..input).map(|k| x.get(&[s, t, k])).collect())
            .collect();
        let fwd = unrolled(&store, "rnn.fwd", &seq, hidden);
        let rev: Vec<_> = seq.iter().rev().cloned().collect();
        let mut bwd = unrolled(&store, "rnn.bwd", &rev, hidden);
        bwd.reverse();
        for t in 0..len {
            for j in 0..hidden {
                assert!((y.get(&[s, t, j]) - fwd[t][j]).abs() < 1e-12);
                assert!((y.get(&[s, t, hidden + j]) - bwd[t][j]).abs() < 1e-12);
            }
        }
    }
    // A single step equals one cell evaluation.
    let x1 = Tensor::randn(&[1, 1, input], 1.0, &mut rng(16));
    let y1 = eval(&store, &x1, |s, x| lstm.forward(s, x));
    let cell = unrolled(&store, "rnn.fwd", &[x1.data().to_vec()], hidden);
    for j in 0..hidden {
        assert!((y1.data()[j] - cell[0][j]).abs() < 1e-15);
    }
}

#[test]
fn lstm_zero_weights_and_bad_state() {
    let spec = LstmSpec {
        input_dim: 3,
        hidden_dim: 4,
        bidirectional: false,
    };
    let mut b = Builder::new(17);
    let lstm = Lstm::new(&mut b, "rnn", spec).unwrap();
    let mut store = b.finish();
    let names: Vec<String> = store.params().map(|e| e.name.clone()).collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        set(&mut store, &n, Tensor::zeros(&shape));
    }
    let x = Tensor::randn(&[2, 6, 3], 1.0, &mut rng(18));
    let y = eval(&store, &x, |s, x| lstm.forward(s, x));
    assert!(y.data().iter().all(|v| *v == 0.0));
    let s = Session::new(&store, Mode::Eval);
    let bad = [(Tensor::zeros(&[2, 5]), Tensor::zeros(&[2, 5]))];
    assert!(lstm
        .forward_with_state(&s, &s.input(x), Some(&bad))
        .is_err());
}

#[test]
fn attention_single_position_and_uniform_weights() {
    let spec = AttentionSpec {
        model_dim: 4,
        heads: 2,
        head_dim: 3,
        causal: true,
    };
    let mut b = Builder::new(19);
    let att = Attention::new(&mut b, "att", spec).unwrap();
    let mut store = b.finish();

    // L = 1: output is the value path alone.
    let x = Tensor::randn(&[2, 1, 4], 1.0, &mut rng(20));
    let y = eval(&store, &x, |s, x| att.forward(s, x, None));
    let direct = eval(&store, &x, |s, x| {
        att.output.forward(s, &att.value.forward(s, x)?)
    });
    assert!(y.max_abs_diff(&direct) < 1e-15);

    for n in ["att.q.weight", "att.q.bias", "att.k.weight", "att.k.bias"] {
        let shape = store.get(n).unwrap().shape().to_vec();
        set(&mut store, n, Tensor::zeros(&shape));
    }
    let x = Tensor::randn(&[1, 5, 4], 1.0, &mut rng(21));
    let s = Session::new(&store, Mode::Eval);
    let (w, _) = att
        .forward_with_weights(&s, &s.input(x.clone()), None)
        .unwrap();
    for h in 0..2 {
        for t in 0..5 {
            for u in 0..5 {
                let want = if u <= t { 1.0 / (t + 1) as f64 } else { 0.0 };
                assert!((w.value().get(&[0, h, t, u]) - want).abs() < 1e-15);
            }
        }
    }
    let open = Attention {
        spec: AttentionSpec {
            causal: false,
            ..spec
        },
        ..att.clone()
    };
    let s = Session::new(&store, Mode::Eval);
    let (w, _) = open.forward_with_weights(&s, &s.input(x), None).unwrap();
    assert!(w.value().data().iter().all(|v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn attention_matches_explicit_formula() {
    let (d, heads, hd, l) = (4, 2, 3, 3);
    let spec = AttentionSpec {
        model_dim: d,
        heads,
        head_dim: hd,
        causal: true,
    };
    let mut b = Builder::new(22);
    let att = Attention::new(&mut b, "att", spec).unwrap();
    let store = b.finish();
    let mut r = rng(23);
    let x = Tensor::randn(&[1, l, d], 1.0, &mut r);
    let ext = Tensor::randn(&[1, l, d], 1.0, &mut r);
    let s = Session::new(&store, Mode::Eval);
    let y = att
        .forward(&s, &s.input(x.clone()), Some(&s.input(ext.clone())))
        .unwrap()
        .value()
        .clone();

    let proj = |name: &str, src: &Tensor, t: usize, out: usize| -> f64 {
        let w = store.get(&format!("att.{name}.weight")).unwrap();
        let bias = store.get(&format!("att.{name}.bias")).unwrap();
        let inner = w.shape()[0];
        bias.data()[out]
            + (0..inner)
                .map(|k| src.get(&[0, t, k]) * w.get(&[k, out]))
                .sum::<f64>()
    };
    let mut ctx = vec![vec![0.0; heads * hd]; l];
    for h in 0..heads {
        for t in 0..l {
            let scores: Vec<f64> = (0..=t)
                .map(|u| {
                    (0..hd)
                        .map(|e| proj("q", &x, t, h * hd + e) * proj("k", &x, u, h * hd + e))
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for (u, sc) in scores.iter().enumerate() {
                let a = (sc - m).exp() / z;
                for e in 0..hd {
                    ctx[t][h * hd + e] += a * proj("v", &ext, u, h * hd + e);
                }
            }
        }
    }
    let wo = store.get("att.out.weight").unwrap();
    let bo = store.get("att.out.bias").unwrap();
    for t in 0..l {
        for o in 0..d {
            let want = bo.data()[o]
                + (0..heads * hd)
                    .map(|k| ctx[t][k] * wo.get(&[k, o]))
                    .sum::<f64>();
            assert!((y.get(&[0, t, o]) - want).abs() < 1e-10);
        }
    }
    assert_causal(
        &x,
        1,
        |x| eval(&store, x, |s, x| att.forward(s, x, None)),
        24,
    );

    let s = Session::new(&store, Mode::Eval);
    assert!(att
        .forward(&s, &s.input(Tensor::zeros(&[1, 3, 5])), None)
        .is_err());
    assert!(att
        .forward(
            &s,
            &s.input(x.clone()),
            Some(&s.input(Tensor::zeros(&[1, 2, 4])))
        )
        .is_err());
    assert!(Attention::new(
        &mut Builder::new(0),
        "bad",
        AttentionSpec { heads: 0, ..spec }
    )
    .is_err());
}

#[test]
fn batch_norm_modes_and_running_stats() {
    let mut b = Builder::new(25);
    let bn = BatchNorm::new(&mut b, "bn", 3).unwrap();
    let mut store = b.finish();
    let x = Tensor::randn(&[2, 3, 4, 4], 6.0, &mut rng(26)).map(|v| v + 1.5);

    let s = Session::new(&store, Mode::Train);
    let y = bn.forward(&s, &s.input(x.clone())).unwrap().value().clone();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2)
            .flat_map(|b| (0..16).map(move |k| (b, k)))
            .map(|(b, k)| y.get(&[b, c, k / 4, k % 4]))
            .collect();
        let m = vals.iter().sum::<f64>() / 32.0;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 32.0;
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6, "mean {m} var {v}");
    }
    let stats = s.take_batch_stats();
    for c in 0..3 {
        let batch_var = stats[0].1.var[c];
        let vals: Vec<f64> = (0..32)
            .map(|k| y.get(&[k / 16, c, (k % 16) / 4, k % 4]))
            .collect();
        let v = vals.iter().map(|x| x * x).sum::<f64>() / 32.0;
        assert!((v - batch_var / (batch_var + 1e-5)).abs() < 1e-12);
    }
    assert_eq!(stats.len(), 1);
    let batch_mean = stats[0].1.mean.clone();
    store.apply_batch_stats(&stats).unwrap();
    let rm = store.get("bn.running_mean").unwrap();
    for c in 0..3 {
        assert!((rm.data()[c] - 0.1 * batch_mean[c]).abs() < 1e-15);
    }

    // Fresh running stats make eval mode the identity up to eps.
    let fresh = {
        let mut b = Builder::new(0);
        BatchNorm::new(&mut b, "bn", 3).unwrap();
        b.finish()
    };
    let y = eval(&fresh, &x, |s, x| bn.forward(s, x));
    assert!(y.max_abs_diff(&x.map(|v| v / (1.0 + 1e-5f64).sqrt())) < 1e-13);
    assert!(y.max_abs_diff(&x) < 1e-3);

    let s = Session::new(&store, Mode::Train);
    assert!(bn
        .forward(&s, &s.input(Tensor::zeros(&[0, 3, 4, 4])))
        .is_err());
}

#[test]
fn gelu_values() {
    let empty = ParamStore::new();
    let s = Session::new(&empty, Mode::Eval);
    let y = s
        .input(Tensor::new(vec![3], vec![0.0, 10.0, -1.0]).unwrap())
        .gelu();
    assert_eq!(y.value().data()[0], 0.0);
    assert!((y.value().data()[1] - 10.0).abs() < 1e-6);
    // Φ(−1) from the Maclaurin series of erf, independent of the library erf.
    let z = 1.0 / 2f64.sqrt();
    let (mut term, mut erf, mut n) = (z, 0.0, 0u32);
    while term.abs() > 1e-20 {
        erf += term / (2 * n + 1) as f64;
        n += 1;
        term *= -z * z / n as f64;
    }
    let erf = erf * 2.0 / std::f64::consts::PI.sqrt();
    let want = -0.5 * (1.0 - erf);
    assert!(
        (y.value().data()[2] - want).abs() < 1e-15,
        "{} vs {want}",
        y.value().data()[2]
    );
    assert!((want + 0.158_655_253_931_457).abs() < 1e-14);
}

#[test]
fn parameter_count_formulas() {
    let mut b = Builder::new(0);
    let conv = Conv2d::new(&mut b, "c", Conv2dSpec::causal(32, 32, (2, 5), (1, 2))).unwrap();
    assert_eq!(conv.param_count(), 10_272);
    let lstm = Lstm::new(
        &mut b,
        "l",
        LstmSpec {
            input_dim: 80,
            hidden_dim: 80,
            bidirectional: false,
        },
    )
    .unwrap();
    assert_eq!(lstm.param_count(), 51_520);
    let bi = Lstm::new(
        &mut b,
        "bi",
        LstmSpec {
            input_dim: 80,
            hidden_dim: 40,
            bidirectional: true,
        },
    )
    .unwrap();
    assert_eq!(bi.param_count(), 2 * 4 * 40 * (80 + 40 + 1));
    let att = Attention::new(
        &mut b,
        "a",
        AttentionSpec {
            model_dim: 80,
            heads: 50,
            head_dim: 2,
            causal: true,
        },
    )
    .unwrap();
    assert_eq!(att.param_count(), 4 * 80 * 100 + 3 * 100 + 80);
    let dw = Conv2d::new(&mut b, "dw", Conv2dSpec::depthwise_time(80, 3)).unwrap();
    assert_eq!(dw.param_count(), 80 * 3 + 80);
    let de = ConvTranspose2d::new(&mut b, "d", Conv2dSpec::causal(64, 32, (2, 3), (1, 1))).unwrap();
    assert_eq!(de.param_count(), 64 * 32 * 6 + 32);
    let lin = Linear::new(&mut b, "lin", 80, 80).unwrap();
    let ln = LayerNorm::new(&mut b, "ln", 7).unwrap();
    let bn = BatchNorm::new(&mut b, "bn", 9).unwrap();
    let total = conv.param_count()
        + lstm.param_count()
        + bi.param_count()
        + att.param_count()
        + dw.param_count()
        + de.param_count()
        + lin.param_count()
        + ln.param_count()
        + bn.param_count();
    assert_eq!(b.finish().param_count(), total);
}

#[test]
fn layer_gradient_checks() {
    let mut r = rng(27);
    let tol = 1e-4;

    let mut b = Builder::new(28);
    let lin = Linear::new(&mut b, "lin", 5, 3).unwrap();
    let store = b.finish();
    let errs = layer_grads(
        &store,
        Mode::Train,
        Tensor::randn(&[2, 4, 5], 1.0, &mut r),
        |s, x| lin.forward(s, x),
    );
    assert_small(&errs, tol, "linear");

    let mut b = Builder::new(29);
    let conv = Conv2d::new(&mut b, "c", Conv2dSpec::causal(2, 3, (2, 3), (1, 2))).unwrap();
    let store = b.finish();
    let errs = layer_grads(
        &store,
        Mode::Train,
        Tensor::randn(&[1, 2, 4, 7], 1.0, &mut r),
        |s, x| conv.forward(s, x),
    );
    assert_small(&errs, tol, "conv2d");

    let mut b = Builder::new(30);
    let de = ConvTranspose2d::new(&mut b, "d", Conv2dSpec::causal(3, 2, (2, 3), (1, 2))).unwrap();
    let store = b.finish();
    let errs = layer_grads(
        &store,
        Mode::Train,
        Tensor::randn(&[1, 3, 4, 4], 1.0, &mut r),
        |s, x| de.forward(s, x, (4, 7)),
    );
    assert_small(&errs, tol, "conv_transpose2d");

    let mut b = Builder::new(31);
    let dw = Conv2d::new(&mut b, "dw", Conv2dSpec::depthwise_time(3, 3)).unwrap();
    let store = b.finish();
    let errs = layer_grads(
        &store,
        Mode::Train,
        Tensor::randn(&[2, 3, 5, 2], 1.0, &mut r),
        |s, x| dw.forward(s, x),
    );
    assert_small(&errs, tol, "depthwise");

    let mut b = Builder::new(32);
    let lstm = Lstm::new(
        &mut b,
        "l",
        LstmSpec {
            input_dim: 3,
            hidden_dim: 4,
            bidirectional: true,
        },
    )
    .unwrap();
    let store = b.finish();
    let errs = layer_grads(
        &store,
        Mode::Train,
        Tensor::randn(&[2, 5, 3], 1.0, &mut r),
        |s, x| lstm.forward(s, x),
    );
    assert_small(&errs, tol, "lstm");

    let mut b = Builder::new(33);
    let att = Attention::new(
        &mut b,
        "a",
        AttentionSpec {
            model_dim: 4,
            heads: 2,
            head_dim: 3,
            causal: true,
        },
    )
    .unwrap();
    let store = b.finish();
    let gate = Tensor::randn(&[2, 5, 4], 1.0, &mut r).map(|v| 1.0 / (1.0 + (-v).exp()));
    let errs = layer_grads(
        &store,
        Mode::Train,
        Tensor::randn(&[2, 5, 4], 1.0, &mut r),
        |s, x| {
            let g = s.input(gate.clone());
            att.forward(s, x, Some(&x.mul(&g)?))
        },
    );
    assert_small(&errs, tol, "attention");

    let mut b = Builder::new(34);
    let bn = BatchNorm::new(&mut b, "bn", 3).unwrap();
    let mut store = b.finish();
    set(&mut store, "bn.weight", Tensor::randn(&[3], 1.0, &mut r));
    set(&mut store, "bn.bias", Tensor::randn(&[3], 1.0, &mut r));
    let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
    assert_small(
        &layer_grads(&store, Mode::Train, x.clone(), |s, x| bn.forward(s, x)),
        tol,
        "bn train",
    );
    set(
        &mut store,
        "bn.running_mean",
        Tensor::randn(&[3], 1.0, &mut r),
    );
    set(
        &mut store,
        "bn.running_var",
        Tensor::from_fn(&[3], |i| 0.5 + i as f64),
    );
    assert_small(
        &layer_grads(&store, Mode::Eval, x, |s, x| bn.forward(s, x)),
        tol,
        "bn eval",
    );

    let mut b = Builder::new(35);
    let ln = LayerNorm::new(&mut b, "ln", 6).unwrap();
    let mut store = b.finish();
    set(&mut store, "ln.weight", Tensor::randn(&[6], 1.0, &mut r));
    let errs = layer_grads(
        &store,
        Mode::Train,
        Tensor::randn(&[2, 3, 6], 1.0, &mut r),
        |s, x| ln.forward(s, x),
    );
    assert_small(&errs, tol, "layer_norm");
}
