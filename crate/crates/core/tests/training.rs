use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waterformer::data::{Batch, Dataset, PairedSample};
use waterformer::losses::LossWeights;
use waterformer::net::ModelConfig;
use waterformer::train::checkpoint::{decode_any, encode, FORMAT_VERSION};
use waterformer::train::{
    load_checkpoint, lr_at, save_checkpoint, trend_decreasing, Checkpoint, Trainer, TrainConfig, TrainState, Variant,
};
use waterformer::{Error, ImageRgb, Tensor};

/// A smooth scene and a hazy, color-cast copy of it.
fn pair(seed: u64, h: usize, w: usize) -> PairedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, c) = (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.0..6.0));
    let reference = ImageRgb::from_fn(h, w, |y, x| {
        let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
        [
            0.5 + 0.4 * (a * u + c).sin(),
            0.5 + 0.4 * (b * v).cos(),
            0.5 + 0.3 * (a * u * v + b).sin(),
        ]
    })
    .unwrap();
    let (degraded, _) = reference.map_pixels(|p| [0.55 * p[0] + 0.05, 0.8 * p[1] + 0.12, 0.85 * p[2] + 0.13]).unwrap();
    PairedSample { id: format!("p{seed}"), degraded, reference }
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        batch_size: 2,
        image_size: 16,
        epochs: 2,
        log_every: 0,
        ..TrainConfig::default()
    }
}

fn dataset(n: usize, size: usize) -> Dataset {
    Dataset::new((0..n as u64).map(|s| pair(s, size, size)).collect())
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let tr = Trainer::new(tiny_cfg()).unwrap();
    let ds = dataset(2, 16);
    let batch: Batch<f32> = ds.batch(&[0, 1], None).unwrap();
    let mut st = tr.init_state::<f32>();
    // move away from the zero head so gradients reach every layer
    tr.train_step(&mut st, &batch, 1e-2).unwrap();
    let before = st.params.clone();
    tr.train_step(&mut st, &batch, 0.0).unwrap();
    for (name, t) in before.iter() {
        let after = st.params.get(name).unwrap();
        let same = t.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{name} changed under zero learning rate");
    }
    assert_eq!(st.step, 2);
}

#[test]
fn fifty_steps_reduce_the_loss_on_one_pair() {
    let cfg = TrainConfig { batch_size: 1, ..tiny_cfg() };
    let tr = Trainer::new(cfg).unwrap();
    let ds = dataset(1, 16);
    let batch: Batch<f64> = ds.batch(&[0], None).unwrap();
    let mut st = tr.init_state::<f64>();
    let first = tr.train_step(&mut st, &batch, 1e-3).unwrap();
    let mut last = first;
    for _ in 1..50 {
        last = tr.train_step(&mut st, &batch, 1e-3).unwrap();
    }
    assert!(last.total < first.total, "loss {} -> {}", first.total, last.total);
}

#[test]
fn loss_parts_recombine_with_default_weights() {
    let tr = Trainer::new(tiny_cfg()).unwrap();
    assert_eq!(tr.objective.weights, LossWeights { l1: 3.0, chroma: 1.0, sobel: 3.0 });
    let ds = dataset(2, 16);
    let batch: Batch<f64> = ds.batch(&[0, 1], None).unwrap();
    let mut st = tr.init_state::<f64>();
    for _ in 0..3 {
        let p = tr.train_step(&mut st, &batch, 1e-3).unwrap();
        let expect = 3.0 * p.l1 + p.chroma + 3.0 * p.sobel;
        assert!((p.total - expect).abs() <= 1e-12 * expect.abs().max(1.0), "{p:?}");
    }
}

#[test]
fn base_variant_reports_but_does_not_train_on_disabled_terms() {
    let tr = Trainer::new(TrainConfig { variant: Variant::Base, ..tiny_cfg() }).unwrap();
    let ds = dataset(1, 16);
    let batch: Batch<f64> = ds.batch(&[0], None).unwrap();
    let mut st = tr.init_state::<f64>();
    let p = tr.train_step(&mut st, &batch, 1e-3).unwrap();
    assert!(p.chroma > 0.0 && p.sobel > 0.0);
    assert_eq!(tr.objective.weights, LossWeights { l1: 3.0, chroma: 0.0, sobel: 0.0 });
    assert_eq!(p.total, 3.0 * p.l1);
}

#[test]
fn non_finite_input_aborts_with_diagnostic() {
    let tr = Trainer::new(tiny_cfg()).unwrap();
    let ds = dataset(1, 16);
    let mut batch: Batch<f32> = ds.batch(&[0], None).unwrap();
    batch.degraded.data_mut()[5] = f32::NAN;
    let mut st = tr.init_state::<f32>();
    let before = st.clone();
    let err = tr.train_step(&mut st, &batch, 1e-3).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(st, before, "state must be untouched by a failed step");
}

#[test]
fn schedule_matches_closed_form() {
    let cfg = TrainConfig::default();
    for (epoch, lr) in [(0, 0.001), (49, 0.001), (50, 0.0005), (99, 0.0005), (100, 0.00025), (150, 0.000125)] {
        assert_eq!(lr_at(epoch, &cfg), lr, "epoch {epoch}");
    }
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn checkpoint_round_trip_then_step_is_bit_exact() {
    let tr = Trainer::new(tiny_cfg()).unwrap();
    let ds = dataset(2, 16);
    let batch: Batch<f32> = ds.batch(&[0, 1], None).unwrap();
    let mut st = tr.init_state::<f32>();
    for _ in 0..3 {
        tr.train_step(&mut st, &batch, 1e-3).unwrap();
    }
    st.epoch = 1;
    st.cursor = 1;
    st.best_val_psnr = Some(21.5);
    let dir = tmp();
    let path = dir.path().join("ck.wfk");
    save_checkpoint(&path, &tr.checkpoint(&st)).unwrap();
    let ck: Checkpoint<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(ck.state, st);
    assert_eq!(ck.train, tr.cfg);

    let resumed_tr = Trainer::from_checkpoint(&ck).unwrap();
    let mut resumed = ck.state;
    let a = tr.train_step(&mut st, &batch, 1e-3).unwrap();
    let b = resumed_tr.train_step(&mut resumed, &batch, 1e-3).unwrap();
    assert_eq!(a, b);
    for ((n, x), (_, y)) in st.params.iter().zip(resumed.params.iter()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()), "{n}");
    }
    assert_eq!(st, resumed);
}

#[test]
fn f64_checkpoints_round_trip_and_refuse_other_precision() {
    let tr = Trainer::new(tiny_cfg()).unwrap();
    let st = tr.init_state::<f64>();
    let dir = tmp();
    let path = dir.path().join("ck.wfk");
    save_checkpoint(&path, &tr.checkpoint(&st)).unwrap();
    assert_eq!(load_checkpoint::<f64>(&path).unwrap().state, st);
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Incompatible(_))));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let tr = Trainer::new(tiny_cfg()).unwrap();
    let st = tr.init_state::<f32>();
    let bytes = encode(&tr.checkpoint(&st)).unwrap();
    decode_any(&bytes).unwrap();

    let mut wrong_magic = bytes.clone();
    wrong_magic[..4].copy_from_slice(b"WFK2");
    assert!(matches!(decode_any(&wrong_magic), Err(Error::Integrity(_))));

    for cut in [bytes.len() - 1, bytes.len() / 2, 10, 3] {
        assert!(matches!(decode_any(&bytes[..cut]), Err(Error::Integrity(_))), "cut at {cut}");
    }

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(decode_any(&flipped), Err(Error::Integrity(_))));

    let mut future = bytes.clone();
    future[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(decode_any(&future), Err(Error::Incompatible(_))));

    let dir = tmp();
    assert!(load_checkpoint::<f32>(&dir.path().join("missing.wfk")).is_err());
}

#[test]
fn reference_checkpoint_is_three_f32_arrays_plus_small_overhead() {
    let tr = Trainer::new(TrainConfig::default()).unwrap();
    let st = tr.init_state::<f32>();
    let bytes = encode(&tr.checkpoint(&st)).unwrap();
    // parameters plus both Adam moments, four bytes each
    let payload = 3 * 4 * tr.model.count_params();
    assert!(bytes.len() > payload);
    assert!(bytes.len() - payload <= 64 * 1024, "{} bytes of overhead", bytes.len() - payload);
    assert!(bytes.len() <= 6_000_000, "{} bytes", bytes.len());
}

#[test]
fn fit_is_deterministic_and_resumes_exactly() {
    let cfg = TrainConfig { epochs: 2, batch_size: 2, ..tiny_cfg() };
    let train = dataset(5, 16);
    let val = dataset(2, 16);

    let tr = Trainer::new(cfg.clone()).unwrap();
    let mut a = tr.init_state::<f32>();
    let run_a = tr.fit(&mut a, &train, Some(&val), None, Vec::new()).unwrap();
    let mut b = tr.init_state::<f32>();
    let run_b = tr.fit(&mut b, &train, Some(&val), None, Vec::new()).unwrap();
    assert!(run_a.completed);
    assert_eq!(run_a.curve.len(), 6);
    assert_eq!(run_a.curve, run_b.curve);
    assert_eq!(a, b);
    assert_eq!(run_a.validation.len(), 2);

    // stop mid-epoch, persist, reload and finish
    let dir = tmp();
    let partial = Trainer::new(TrainConfig { max_steps: Some(4), ..cfg.clone() }).unwrap();
    let mut c = partial.init_state::<f32>();
    let first = partial.fit(&mut c, &train, Some(&val), Some(dir.path()), Vec::new()).unwrap();
    assert!(!first.completed);
    assert_eq!((c.epoch, c.cursor, c.step), (1, 1, 4));
    let ck: Checkpoint<f32> = load_checkpoint(&dir.path().join("last.wfk")).unwrap();
    let resumed = Trainer::new(cfg).unwrap();
    let mut d = ck.state;
    let rest = resumed.fit(&mut d, &train, Some(&val), None, first.curve).unwrap();
    assert_eq!(rest.curve, run_a.curve);
    assert_eq!(d, a);
    assert!(dir.path().join("loss.csv").exists());
    assert!(dir.path().join("best.wfk").exists());
}

#[test]
fn trend_check_rejects_flat_curves() {
    let tr = Trainer::new(TrainConfig { epochs: 1, ..tiny_cfg() }).unwrap();
    let mut st: TrainState<f32> = tr.init_state();
    let ds = dataset(2, 16);
    let out = tr.fit(&mut st, &ds, None, None, Vec::new()).unwrap();
    assert!(!trend_decreasing(&out.curve, 10), "one step cannot show a trend");
}

#[test]
fn weights_of_all_variants_validate() {
    let base = TrainConfig { model: ModelConfig::tiny(), ..TrainConfig::default() };
    for v in Variant::ALL {
        let tr = Trainer::new(TrainConfig { variant: v, ..base.clone() }).unwrap();
        let st: TrainState<f32> = tr.init_state();
        tr.model.check_params(&st.params).unwrap();
        let x = Tensor::<f32>::full([1, 3, 16, 16], 0.3);
        let y = waterformer::train::forward_batch(&tr.model, &st.params, &x).unwrap();
        assert_eq!(y.shape(), [1, 3, 16, 16], "{v}");
    }
}
