use super::dataset::*;
use super::*;
use crate::stroke::ClassLabel;

fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn adam_zero_gradient_keeps_weights() {
    let mut w = vec![t(&[3], &[0.5, -1.0, 2.0])];
    let before = w.clone();
    let mut state = AdamState::new(&w);
    for _ in 0..5 {
        adam_step(&mut w, &[Tensor::zeros(&[3])], &mut state, 1e-3).unwrap();
    }
    assert_eq!(w, before);
    assert_eq!(state.step, 5);
}

#[test]
fn adam_first_steps_match_hand_calculation() {
    let lr = 1e-2;
    let g = [0.5f64, -2.0];
    let mut w = vec![t(&[2], &[1.0, 1.0])];
    let mut state = AdamState::new(&w);
    let (mut m, mut v, mut expect) = ([0.0f64; 2], [0.0f64; 2], [1.0f64; 2]);
    for step in 1..=3 {
        adam_step(&mut w, &[t(&[2], &[g[0] as f32, g[1] as f32])], &mut state, lr).unwrap();
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(step));
            let vh = v[i] / (1.0 - 0.999f64.powi(step));
            expect[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    // a constant gradient moves each weight by about lr per step against its sign
    assert!((expect[0] - (1.0 - 3.0 * lr)).abs() < 1e-6);
    assert!((expect[1] - (1.0 + 3.0 * lr)).abs() < 1e-6);
    for i in 0..2 {
        assert!((w[0].data()[i] as f64 - expect[i]).abs() < 1e-6, "{i}");
    }
}

#[test]
fn adam_minimizes_quadratic_bowl() {
    let center = [0.3f32, -1.2, 2.5, 0.0];
    let mut w = vec![Tensor::zeros(&[4])];
    let mut state = AdamState::new(&w);
    let steps = 500;
    for s in 0..steps {
        let g: Vec<f32> = w[0].data().iter().zip(&center).map(|(x, c)| 2.0 * (x - c)).collect();
        let lr = cosine_lr(s, steps, 0.1);
        adam_step(&mut w, &[t(&[4], &g)], &mut state, lr).unwrap();
    }
    for (x, c) in w[0].data().iter().zip(&center) {
        assert!((x - c).abs() < 1e-3, "{x} vs {c}");
    }
}

#[test]
fn adam_rejects_shape_mismatch() {
    let mut w = vec![Tensor::zeros(&[2])];
    let mut state = AdamState::new(&w);
    assert!(adam_step(&mut w, &[Tensor::zeros(&[3])], &mut state, 0.1).is_err());
    assert!(adam_step(&mut w, &[], &mut state, 0.1).is_err());
}

#[test]
fn cosine_lr_endpoints() {
    assert_eq!(cosine_lr(0, 2000, 1e-4), 1e-4);
    assert!((cosine_lr(1000, 2000, 1e-4) - 5e-5).abs() < 1e-18);
    assert_eq!(cosine_lr(2000, 2000, 1e-4), 0.0);
    let mut prev = f64::INFINITY;
    for s in 0..=2000 {
        let lr = cosine_lr(s, 2000, 1e-4);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn ema_cases() {
    let w = vec![t(&[2], &[1.0, -3.0])];
    let mut e = vec![t(&[2], &[5.0, 5.0])];
    ema_update(&mut e, &w, 1.0).unwrap();
    assert_eq!(e[0].data(), &[5.0, 5.0]);
    ema_update(&mut e, &w, 0.0).unwrap();
    assert_eq!(e, w);

    let mut e = vec![t(&[2], &[0.0, 0.0])];
    let d = 0.9f64;
    for n in 1..=50 {
        ema_update(&mut e, &w, d).unwrap();
        let gap = d.powi(n);
        assert!((e[0].data()[0] as f64 - (1.0 - gap)).abs() < 1e-5);
        assert!((e[0].data()[1] as f64 - (-3.0 * (1.0 - gap))).abs() < 1e-5);
    }
    assert!(ema_update(&mut e, &[Tensor::zeros(&[3])], 0.5).is_err());
}

#[test]
fn ema_warmup_schedule() {
    assert_eq!(ema_decay_at(0, 0.9999, true), 0.1);
    assert!((ema_decay_at(90, 0.9999, true) - 0.91).abs() < 1e-12);
    assert_eq!(ema_decay_at(1_000_000, 0.9999, true), 0.9999);
    assert_eq!(ema_decay_at(3, 0.9999, false), 0.9999);
}

fn tiny_spec() -> SyntheticDatasetSpec {
    let mut spec = SyntheticDatasetSpec::new(2, 6);
    spec.test_per_class = 2;
    spec.fit_resolution = 16;
    spec.candidates = 2;
    spec.previews_per_class = 1;
    spec
}

fn tiny_data() -> Vec<StrokeSequence> {
    let spec = tiny_spec();
    (0..spec.num_classes)
        .flat_map(|c| (0..spec.samples_per_class).map(move |i| (c, i)))
        .map(|(c, i)| generate_sample(&spec, c, &mut sample_rng(3, Split::Train, c, i)).unwrap().1)
        .collect()
}

fn tiny_config() -> TrainConfig {
    let mut model = ModelConfig::custom(1, 16, 2, 2);
    model.freq_dim = 16;
    TrainConfig {
        lr_max: 1e-3,
        batch_size: 4,
        total_steps: 12,
        seed: 11,
        model,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn train_config_defaults_and_json() {
    let c = TrainConfig::default();
    assert_eq!(c.lr_max, 1e-4);
    assert_eq!(c.ema_decay, 0.9999);
    assert_eq!(c.batch_size, 32);
    let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
    let partial: TrainConfig = serde_json::from_str(r#"{"total_steps": 7}"#).unwrap();
    assert_eq!(partial.total_steps, 7);
    assert_eq!(partial.lr_max, 1e-4);
    let mut bad = c.clone();
    bad.ema_decay = 1.0;
    assert!(bad.validate().is_err());
}

#[test]
fn generated_samples_are_valid_and_full() {
    for seq in tiny_data() {
        seq.validate().unwrap();
        assert_eq!(seq.occupied_count(), seq.len());
        assert!(matches!(seq.class, ClassLabel::Id(0 | 1)));
        // every stroke sits where locate_slot would put it
        for (i, s) in seq.strokes.iter().enumerate() {
            let loc = seq.grid.location_of(i).unwrap();
            assert_eq!(seq.grid.level_for_extent(s.extent()), loc.level);
            assert_eq!(seq.grid.cell_of(loc.level, s.x, s.y), loc.block);
        }
    }
}

#[test]
fn extent_bands_map_to_their_level() {
    let grid = crate::stroke::GridLayout::default();
    for level in 1..=grid.levels {
        let (lo, hi) = extent_band(&grid, level);
        assert!(lo < hi);
        for k in 0..=10 {
            let e = lo + (hi - lo) * k as f32 / 10.0;
            assert_eq!(grid.level_for_extent(e), level);
        }
    }
}

#[test]
fn sample_streams_are_independent_of_order() {
    let spec = tiny_spec();
    let a = generate_sample(&spec, 1, &mut sample_rng(5, Split::Train, 1, 3)).unwrap().1;
    let _ = generate_sample(&spec, 0, &mut sample_rng(5, Split::Train, 0, 0)).unwrap();
    let b = generate_sample(&spec, 1, &mut sample_rng(5, Split::Train, 1, 3)).unwrap().1;
    assert_eq!(a, b);
    let c = generate_sample(&spec, 1, &mut sample_rng(5, Split::Test, 1, 3)).unwrap().1;
    assert_ne!(a, c);
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    let manifest = generate_synthetic_dataset(&spec, dir.path(), 9).unwrap();
    assert_eq!(manifest.train_count, 12);
    assert_eq!(manifest.class_names, vec!["blob-0".to_string(), "worm-1".to_string()]);
    let train = load_split(dir.path().join("train")).unwrap();
    let test = load_split(dir.path().join("test")).unwrap();
    assert_eq!(train.len(), 12);
    assert_eq!(test.len(), 4);
    let expect = generate_sample(&spec, 1, &mut sample_rng(9, Split::Train, 1, 2)).unwrap().1;
    assert_eq!(train[spec.samples_per_class + 2], expect);
    assert_eq!(DatasetManifest::load(dir.path()).unwrap(), manifest);
    assert!(dir.path().join("previews/class-1-0.png").exists());
    assert!(dir.path().join("previews/class-1-0-target.png").exists());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut tr = Trainer::new(tiny_config(), tiny_data(), vec!["a".into(), "b".into()]).unwrap();
    tr.train_step().unwrap();
    let ck = tr.checkpoint();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    assert_eq!(back.ema_model().unwrap().params, tr.ema);
}

#[test]
fn resume_reproduces_next_steps_bit_exactly() {
    let data = tiny_data();
    let mut a = Trainer::new(tiny_config(), data.clone(), vec![]).unwrap();
    for _ in 0..2 {
        a.train_step().unwrap();
    }
    let saved = Checkpoint::from_bytes(&a.checkpoint().to_bytes().unwrap()).unwrap();
    let mut b = Trainer::resume(saved, data).unwrap();
    for _ in 0..10 {
        let ra = a.train_step().unwrap();
        let rb = b.train_step().unwrap();
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        assert_eq!(ra.lr.to_bits(), rb.lr.to_bits());
    }
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.ema, b.ema);
    assert_eq!(a.adam, b.adam);
    assert!(a.is_done() && b.is_done());
}

#[test]
fn training_is_deterministic_and_starts_near_unit_loss() {
    let data = tiny_data();
    let mut a = Trainer::new(tiny_config(), data.clone(), vec![]).unwrap();
    let mut b = Trainer::new(tiny_config(), data, vec![]).unwrap();
    let first = a.train_step().unwrap();
    assert_eq!(first.loss.to_bits(), b.train_step().unwrap().loss.to_bits());
    assert!((first.loss - 1.0).abs() < 0.25, "step-0 loss {}", first.loss);
    assert_eq!(first.lr, 1e-3);
    assert_ne!(a.model.params, a.ema, "one averaged step moves the EMA only part way");
}

#[test]
fn run_writes_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config();
    config.total_steps = 5;
    config.checkpoint_every = 2;
    let mut tr = Trainer::new(config, tiny_data(), vec![]).unwrap();
    let mut seen = 0;
    let path = tr.run(dir.path(), |_| seen += 1).unwrap();
    assert_eq!(seen, 5);
    let log = read_log(dir.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    let ck = Checkpoint::load(path).unwrap();
    assert_eq!(ck.step, 5);
    assert_eq!(ck.weights, tr.model.params);
}

#[test]
fn rejects_mismatched_data() {
    let mut config = tiny_config();
    config.model.num_classes = 1;
    assert!(Trainer::new(config, tiny_data(), vec![]).is_err());
    assert!(Trainer::new(tiny_config(), vec![], vec![]).is_err());
}

#[test]
fn hsv_primaries() {
    assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
    let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
    assert!(g[0].abs() < 1e-6 && (g[1] - 1.0).abs() < 1e-6 && g[2].abs() < 1e-6);
    assert_eq!(hsv_to_rgb(0.5, 0.0, 0.5), [0.5, 0.5, 0.5]);
}
