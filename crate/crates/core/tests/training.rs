mod common;

use common::rng;
use pdpcrn::io::{list_tensors, Checkpoint};
use pdpcrn::metrics::si_sdr;
use pdpcrn::models::ModelConfig;
use pdpcrn::nn::{EntryKind, Mode, ParamStore, Session};
use pdpcrn::signal::{
    read_manifest, synthesize_dataset, synthetic_speech, DatasetConfig, MultichannelWave,
    MANIFEST_FILE,
};
use pdpcrn::tensor::gradcheck::check;
use pdpcrn::tensor::Precision;
use pdpcrn::training::*;
use pdpcrn::{Error, Tape, Tensor};
use proptest::prelude::*;

fn planes(seed: u64, frames: usize) -> Tensor {
    Tensor::randn(&[1, 2, frames, 201], 1.0, &mut rng(seed))
}

fn scalar_loss(kind: LossKind, p: &Tensor, t: &Tensor) -> pdpcrn::Result<f64> {
    let tape = Tape::new();
    Ok(
        loss(kind, &tape.constant(p.clone()), &tape.constant(t.clone()))?
            .value()
            .item(),
    )
}

#[test]
fn loss_at_perfect_estimate() {
    let t = planes(1, 4);
    assert!((scalar_loss(LossKind::NegSiSdr, &t, &t).unwrap() + 60.0).abs() < 1e-9);
    assert_eq!(scalar_loss(LossKind::SpectralMse, &t, &t).unwrap(), 0.0);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let (p, t) = (planes(2, 3), planes(3, 3));
    for kind in [LossKind::NegSiSdr, LossKind::SpectralMse] {
        let err = check(&[p.clone()], 1e-5, 4, |v| {
            let target = v[0].tape().constant(t.clone());
            loss(kind, &v[0], &target)
        })
        .unwrap();
        assert!(err[0] < 1e-3, "{kind:?}: {err:?}");
    }
}

#[test]
fn loss_errors() {
    let t = planes(1, 4);
    let z = Tensor::zeros(t.shape());
    assert!(matches!(
        scalar_loss(LossKind::NegSiSdr, &t, &planes(1, 5)),
        Err(Error::Shape { .. })
    ));
    assert!(scalar_loss(LossKind::NegSiSdr, &t, &z).is_err());
    assert!(scalar_loss(LossKind::SpectralMse, &t, &z).is_err());
}

#[test]
fn soft_clamped_si_sdr_tracks_the_metric() {
    let x = synthetic_speech(4000, 16_000, &mut rng(5));
    let noise = Tensor::randn(&[4000], 0.05, &mut rng(6));
    let est: Vec<f64> = x
        .iter()
        .zip(noise.data())
        .map(|(a, b)| 0.8 * a + b)
        .collect();
    let tape = Tape::new();
    let r = tape.constant(Tensor::new(vec![1, 1, 4000], x.clone()).unwrap());
    let e = tape.constant(Tensor::new(vec![1, 1, 4000], est.clone()).unwrap());
    let soft = si_sdr_db(&e, &r).unwrap().value().item();
    let exact = si_sdr(&x, &est).unwrap();
    assert!((soft - exact).abs() < 1e-4, "{soft} vs {exact}");
    let zero = tape.constant(Tensor::zeros(&[1, 1, 4000]));
    assert!((si_sdr_db(&zero, &r).unwrap().value().item() - 0.0).abs() < 1e-12);
}

fn scalar_store(w: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(
        "w",
        EntryKind::Param,
        Tensor::new(vec![1], vec![w]).unwrap(),
    )
    .unwrap();
    s
}

#[test]
fn adam_matches_scalar_trace() {
    let mut store = scalar_store(1.0);
    let mut adam = Adam::new(&store);
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=10 {
        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        w -= lr * mhat / (vhat.sqrt() + eps);

        let g = 2.0 * store.get("w").unwrap().data()[0];
        adam.step(
            &mut store,
            &[("w".into(), Tensor::new(vec![1], vec![g]).unwrap())],
            lr,
            Precision::F64,
        )
        .unwrap();
        assert!(
            (store.get("w").unwrap().data()[0] - w).abs() < 1e-12,
            "step {t}"
        );
    }
}

#[test]
fn adam_constant_gradient_moves_by_lr() {
    let mut store = scalar_store(0.0);
    let mut adam = Adam::new(&store);
    let g = vec![("w".to_string(), Tensor::new(vec![1], vec![-0.37]).unwrap())];
    let mut prev = 0.0;
    for _ in 0..50 {
        adam.step(&mut store, &g, 1e-3, Precision::F64).unwrap();
        let now = store.get("w").unwrap().data()[0];
        assert!((now - prev - 1e-3).abs() < 1e-9);
        prev = now;
    }
}

#[test]
fn adam_zero_gradient_and_nan() {
    let mut store = scalar_store(0.5);
    let mut adam = Adam::new(&store);
    let zero = vec![("w".to_string(), Tensor::zeros(&[1]))];
    adam.step(&mut store, &zero, 1e-3, Precision::F64).unwrap();
    assert_eq!(store.get("w").unwrap().data()[0], 0.5);

    let one = vec![("w".to_string(), Tensor::ones(&[1]))];
    adam.step(&mut store, &one, 1e-3, Precision::F64).unwrap();
    let (m, v) = (
        adam.slot("w").unwrap().first.data()[0],
        adam.slot("w").unwrap().second.data()[0],
    );
    adam.step(&mut store, &[], 1e-3, Precision::F64).unwrap();
    assert_eq!(adam.slot("w").unwrap().first.data()[0], 0.9 * m);
    assert_eq!(adam.slot("w").unwrap().second.data()[0], 0.999 * v);

    let before = store.clone();
    let nan = vec![("w".to_string(), Tensor::full(&[1], f64::NAN))];
    let err = adam
        .step(&mut store, &nan, 1e-3, Precision::F64)
        .unwrap_err();
    assert!(
        matches!(&err, Error::Numeric(m) if m.contains("parameter w")),
        "{err}"
    );
    assert_eq!(store, before);
}

fn halvings(losses: &[f64]) -> Vec<usize> {
    let mut p = Plateau::new(2, 0.5);
    losses
        .iter()
        .enumerate()
        .filter(|(_, l)| p.observe(**l))
        .map(|(i, _)| i + 1)
        .collect()
}

#[test]
fn plateau_rule() {
    assert!(halvings(&[3.0, 2.9, 2.8]).is_empty());
    assert_eq!(halvings(&[3.0, 3.0, 3.0]), vec![3]);
    assert_eq!(halvings(&[3.0, 3.1, 2.9, 2.95, 2.97]), vec![5]);
    assert_eq!(Plateau::new(2, 0.5).reduce(1e-3), 5e-4);
}

proptest! {
    #[test]
    fn plateau_never_raises_lr(losses in proptest::collection::vec(0.0f64..10.0, 1..40)) {
        let mut p = Plateau::new(2, 0.5);
        let mut lr = 1e-3;
        for l in losses {
            let next = if p.observe(l) { p.reduce(lr) } else { lr };
            prop_assert!(next <= lr);
            lr = next;
        }
    }
}

fn micro_examples(n: usize, frames_seconds: f64) -> Vec<Example> {
    let len = (frames_seconds * 16_000.0) as usize;
    (0..n)
        .map(|i| {
            let clean = synthetic_speech(len, 16_000, &mut rng(100 + i as u64));
            let noise = Tensor::randn(&[len], 0.1, &mut rng(200 + i as u64));
            let mix: Vec<f64> = clean.iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            let target = MultichannelWave::new(16_000, vec![clean.clone(), clean]).unwrap();
            let mixture = MultichannelWave::new(16_000, vec![mix.clone(), mix]).unwrap();
            Example::from_waves(&format!("ex{i}"), &mixture, &target, Precision::F32).unwrap()
        })
        .collect()
}

fn tiny_trainer(seed: u64) -> Trainer {
    Trainer::new(
        &ModelConfig::tiny(),
        TrainConfig {
            seed,
            ..TrainConfig::default()
        },
    )
    .unwrap()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ex = micro_examples(2, 0.3);
    let batch = Batch::whole(&ex.iter().collect::<Vec<_>>()).unwrap();
    let mut t = tiny_trainer(4);
    t.step(&batch).unwrap();
    let ckpt = t.checkpoint();
    let bytes = ckpt.to_bytes();
    assert_eq!(&bytes[..4], b"PDPC");
    let back = Checkpoint::from_bytes(&bytes, "mem".as_ref()).unwrap();
    assert_eq!(back.store, t.store);
    assert_eq!(back.optimizer.as_ref().unwrap(), &t.adam);
    assert_eq!(back.training.as_ref().unwrap(), &t.state);
    assert_eq!(back.structural_hash(), t.model.structural_hash(&t.store));

    let run = |store: &ParamStore| {
        let s = Session::new(store, Mode::Eval);
        t.model
            .forward(&s, &s.input(batch.mixture.clone()))
            .unwrap()
            .value()
            .clone()
    };
    assert_eq!(run(&back.store), run(&t.store));

    let params: usize = list_tensors(&bytes)
        .unwrap()
        .iter()
        .filter(|(n, _)| !n.starts_with("optim.") && !n.contains("running_"))
        .map(|(_, c)| c)
        .sum();
    assert_eq!(params, t.store.param_count());
}

#[test]
fn checkpoint_rejects_damage() {
    let t = tiny_trainer(4);
    let bytes = t.checkpoint().to_bytes();
    let fail = |b: &[u8]| Checkpoint::from_bytes(b, "x.ckpt".as_ref()).unwrap_err();
    assert!(fail(&bytes[..bytes.len() - 3])
        .to_string()
        .contains("truncated"));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(fail(&magic).to_string().contains("magic"));
    let mut hash = bytes.clone();
    hash[8] ^= 1;
    assert!(matches!(fail(&hash), Error::Config(_)));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(fail(&version).to_string().contains("version"));
}

#[test]
fn resume_reproduces_next_step_bitwise() {
    let ex = micro_examples(2, 0.3);
    let batch = Batch::whole(&ex.iter().collect::<Vec<_>>()).unwrap();
    let mut a = tiny_trainer(8);
    a.step(&batch).unwrap();
    a.step(&batch).unwrap();
    let saved = a.checkpoint().to_bytes();
    let next = a.step(&batch).unwrap();

    let mut b = Trainer::resume(Checkpoint::from_bytes(&saved, "mem".as_ref()).unwrap()).unwrap();
    assert_eq!(b.step(&batch).unwrap().to_bits(), next.to_bits());
    assert_eq!(b.store, a.store);
    assert_eq!(b.adam, a.adam);
}

#[test]
fn nan_loss_names_the_batch() {
    let ex = micro_examples(1, 0.3);
    let mut t = tiny_trainer(1);
    let name = t.store.params().next().unwrap().name.clone();
    t.store.get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
    let err = t.step(&Batch::whole(&[&ex[0]]).unwrap()).unwrap_err();
    assert!(
        matches!(&err, Error::Numeric(m) if m.contains("ex0")),
        "{err}"
    );
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn tiny_model_loss_falls_on_one_batch() {
    let ex = micro_examples(2, 0.25);
    let batch = Batch::whole(&ex.iter().collect::<Vec<_>>()).unwrap();
    let mut t = Trainer::new(
        &ModelConfig::tiny(),
        TrainConfig {
            lr: 3e-3,
            seed: 2,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let losses: Vec<f64> = (0..25).map(|_| t.step(&batch).unwrap()).collect();
    assert!(losses[24] < losses[0] - 3.0, "{losses:?}");
}

fn micro_dataset(dir: &std::path::Path, count: usize) -> Vec<pdpcrn::signal::ManifestRow> {
    let cfg = DatasetConfig {
        count,
        mics: 2,
        seconds: 0.4,
        snr_db: vec![0.0, 5.0],
        rt60_s: vec![0.2],
        seed: 13,
        ..DatasetConfig::default()
    };
    synthesize_dataset(&cfg, dir).unwrap();
    read_manifest(&dir.join(MANIFEST_FILE)).unwrap()
}

fn short_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 2,
        segment_seconds: 0.25,
        seed: 6,
        ..TrainConfig::default()
    }
}

#[test]
fn fit_is_deterministic_and_resumable() {
    let data = tempfile::tempdir().unwrap();
    let rows = micro_dataset(data.path(), 4);
    let (train, val) = rows.split_at(3);
    let mc = ModelConfig::tiny();
    let cfg = short_config();

    let out = |name: &str| data.path().join(name);
    let a = fit(&mc, &cfg, train, val, data.path(), &out("a"), false).unwrap();
    let b = fit(&mc, &cfg, train, val, data.path(), &out("b"), false).unwrap();
    assert_eq!(a.store, b.store);
    let curve = |d: &str| std::fs::read_to_string(out(d).join(LOSS_CURVE_FILE)).unwrap();
    assert_eq!(curve("a"), curve("b"));
    assert_eq!(a.state.history.len(), 3);
    assert!(curve("a").starts_with("epoch,train_loss,val_loss,lr\n1,"));
    assert!(out("a").join(BEST_CHECKPOINT).exists());

    let one = TrainConfig {
        epochs: 1,
        ..cfg.clone()
    };
    fit(&mc, &one, train, val, data.path(), &out("c"), false).unwrap();
    let c = fit(&mc, &cfg, train, val, data.path(), &out("c"), true).unwrap();
    assert_eq!(curve("c"), curve("a"));
    assert_eq!(c.store, a.store);
    assert_eq!(
        std::fs::read(out("c").join(LAST_CHECKPOINT)).unwrap(),
        std::fs::read(out("a").join(LAST_CHECKPOINT)).unwrap()
    );

    assert!(fit(&mc, &cfg, &[], val, data.path(), &out("d"), false).is_err());
    let bad = TrainConfig {
        plateau_patience: 0,
        ..cfg
    };
    assert!(matches!(
        fit(&mc, &bad, train, val, data.path(), &out("d"), false),
        Err(Error::Config(_))
    ));
}

#[test]
fn ablation_emits_paired_report() {
    let data = tempfile::tempdir().unwrap();
    let rows = micro_dataset(data.path(), 4);
    let cfg = TrainConfig {
        epochs: 1,
        max_steps: Some(1),
        ..short_config()
    };
    let out = data.path().join("ablate");
    let rep = ablate(
        &ModelConfig::tiny(),
        &cfg,
        &rows[..2],
        &rows[2..3],
        &rows[3..],
        data.path(),
        &out,
    )
    .unwrap();
    let methods: Vec<&str> = rep.table.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["Unprocessed", "PDPCRN", "PDPCRN (w/o BI)"]);
    assert_eq!(rep.runs.len(), 2);
    assert!(rep
        .runs
        .iter()
        .all(|r| r.history.len() == 1 && r.report.failures.is_empty()));
    let md = std::fs::read_to_string(out.join("ablation.md")).unwrap();
    assert!(md.contains("PDPCRN (w/o BI)") && md.contains("Final train loss"));
    assert!(out.join("with_bi/metrics.csv").exists() && out.join("without_bi/last.ckpt").exists());
}

#[test]
fn segments_tile_every_utterance() {
    let example = |frames: usize| Example {
        id: format!("e{frames}"),
        mixture: Tensor::zeros(&[2, frames, 201]),
        target: Tensor::zeros(&[2, frames, 201]),
    };
    let examples = [example(240), example(50), example(80), example(241)];
    let segs = segments(&examples, 80);
    assert_eq!(&segs[..3], &[(0, 0, 80), (0, 80, 80), (0, 160, 80)]);
    assert_eq!(segs[3], (1, 0, 50));
    assert_eq!(segs[4], (2, 0, 80));
    // 241 frames need 4 windows spread over offsets 0..=161.
    let last: Vec<usize> = segs[5..].iter().map(|s| s.1).collect();
    assert_eq!(last, vec![0, 54, 107, 161]);
    for &(i, o, f) in &segs {
        assert!(o + f <= examples[i].frames());
    }
}
