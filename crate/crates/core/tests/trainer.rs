//! Training loop: crops, batching, optimizer bookkeeping, resume and history.

mod common;

use std::collections::BTreeSet;
use std::io::Cursor;

use proptest::prelude::*;
use textfuse::image::{reflect_index, Image};
use textfuse::io::synth_pair;
use textfuse::model::{ImagePair, ModelConfig, Semantics, Variant};
use textfuse::sig::fixtures::HashTextEncoder;
use textfuse::sig::{embed_text, BinaryMask, MaskProvenance, MaskSemantics, TextDescription};
use textfuse::tensor::{read_checkpoint, rng, write_checkpoint, AdamW, Checkpoint};
use textfuse::train::{sample_crop, TrainConfig, TrainError, TrainSample, Trainer, HISTORY_HEADER};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig { patch: 4, dim: 8, heads: 2, text_dim: 6, depth: 1, gate_kernel: 3, base_size: 16, seed: 5 },
        epochs: 2,
        batch_size: 2,
        crop: 16,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

fn samples(n: usize, h: usize, w: usize) -> Vec<TrainSample> {
    (0..n)
        .map(|i| {
            let s = synth_pair(&format!("{i:04}"), i as u64, h, w);
            let (h, w) = s.pair.dims();
            let [t, l, rh, rw] = s.region;
            let mask = MaskSemantics::from_mask(BinaryMask::rect(h, w, t, l, rh, rw), MaskProvenance::Union);
            let text = embed_text(&TextDescription::new(&s.caption), &HashTextEncoder::new(6)).unwrap();
            TrainSample { pair: s.pair, semantics: Semantics { mask, text } }
        })
        .collect()
}

fn bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(&mut out, ckpt).unwrap();
    out
}

/// Pixel value encodes its own coordinates so a crop reveals its origin.
fn coded_pair(h: usize, w: usize) -> (ImagePair, MaskSemantics) {
    let code = |y: usize, x: usize| (y * w + x) as f64 / (h * w) as f64;
    let vis = Image::from_fn(3, h, w, |c, y, x| if c == 0 { code(y, x) } else { 0.5 });
    let ir = Image::from_fn(1, h, w, |_, y, x| 1.0 - code(y, x));
    let mask = BinaryMask::from_fn(h, w, |y, x| (y + 2 * x) % 3 == 0);
    (ImagePair::new("coded", vis, ir).unwrap(), MaskSemantics::from_mask(mask, MaskProvenance::Union))
}

#[test]
fn crops_cover_every_window_and_stay_aligned() {
    let (h, w, c) = (7, 9, 4);
    let (pair, mask) = coded_pair(h, w);
    let mut r = rng::stream(3, &[rng::label("test.crop")]);
    let mut seen = BTreeSet::new();
    for _ in 0..2000 {
        let (p, m) = sample_crop(&pair, &mask, c, &mut r);
        assert_eq!(p.dims(), (c, c));
        let k = (p.vis.get(0, 0, 0) * (h * w) as f64).round() as usize;
        let (top, left) = (k / w, k % w);
        for y in 0..c {
            for x in 0..c {
                assert_eq!(p.vis.get(0, y, x), pair.vis.get(0, top + y, left + x));
                assert_eq!(p.ir.get(0, y, x), pair.ir.get(0, top + y, left + x));
                assert_eq!(m.mask.get(y, x), mask.mask.get(top + y, left + x));
                assert_eq!(m.complement.get(y, x), !m.mask.get(y, x));
            }
        }
        seen.insert((top, left));
    }
    assert_eq!(seen.len(), (h - c + 1) * (w - c + 1));
}

#[test]
fn crop_is_deterministic_for_a_seed() {
    let (pair, mask) = coded_pair(12, 10);
    let draw = |seed| {
        let mut r = rng::stream(seed, &[rng::label("test.crop")]);
        (0..20).map(|_| sample_crop(&pair, &mask, 4, &mut r).0.vis.get(0, 0, 0)).collect::<Vec<_>>()
    };
    assert_eq!(draw(1), draw(1));
    assert_ne!(draw(1), draw(2));
}

#[test]
fn full_size_crop_returns_the_pair() {
    let (pair, mask) = coded_pair(8, 8);
    let mut r = rng::stream(0, &[]);
    let (p, m) = sample_crop(&pair, &mask, 8, &mut r);
    assert_eq!(p, pair);
    assert_eq!(m, mask);
}

#[test]
fn undersized_inputs_are_reflect_padded() {
    let (h, w, c) = (5, 6, 8);
    let (pair, mask) = coded_pair(h, w);
    let mut r = rng::stream(0, &[]);
    let (p, m) = sample_crop(&pair, &mask, c, &mut r);
    assert_eq!(p.dims(), (c, c));
    for y in 0..c {
        for x in 0..c {
            let (sy, sx) = (reflect_index(y as isize, h), reflect_index(x as isize, w));
            assert_eq!(p.vis.get(0, y, x), pair.vis.get(0, sy, sx));
            assert_eq!(p.ir.get(0, y, x), pair.ir.get(0, sy, sx));
            assert_eq!(m.mask.get(y, x), mask.mask.get(sy, sx));
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = samples(2, 20, 23);
    let cfg = TrainConfig { lr: 0.0, steps: Some(2), ..tiny_config() };
    let mut t = Trainer::new(cfg).unwrap();
    let before: Vec<Vec<f64>> = t.model.store().iter().map(|p| p.value.data().to_vec()).collect();
    t.run(&data, |_, _| {}).unwrap();
    assert_eq!(t.step, 2);
    for (p, b) in t.model.store().iter().zip(&before) {
        assert_eq!(p.value.data(), &b[..], "{}", p.name);
        assert_eq!(p.step, 2);
    }
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let data = samples(3, 18, 21);
    let cfg = TrainConfig { steps: Some(5), cosine: true, ..tiny_config() };

    let mut straight = Trainer::new(cfg.clone()).unwrap();
    straight.run(&data, |_, _| {}).unwrap();

    let mut first = Trainer::new(TrainConfig { steps: Some(5), ..cfg.clone() }).unwrap();
    for _ in 0..3 {
        first.train_step(&data).unwrap();
    }
    let saved = read_checkpoint(&mut Cursor::new(bytes(&first.checkpoint()))).unwrap();
    let mut second = Trainer::resume(cfg, &saved).unwrap();
    assert_eq!(second.step, 3);
    second.run(&data, |_, _| {}).unwrap();

    assert_eq!(bytes(&second.checkpoint()), bytes(&straight.checkpoint()));
    let joined: Vec<_> = first.history.iter().chain(&second.history).copied().collect();
    assert_eq!(joined, straight.history);
}

#[test]
fn resume_rejects_a_different_model() {
    let t = Trainer::new(tiny_config()).unwrap();
    let ckpt = t.checkpoint();
    let other = TrainConfig { variant: Variant::NoGaf, ..tiny_config() };
    assert!(matches!(Trainer::resume(other, &ckpt), Err(TrainError::Config(_)) | Err(TrainError::Model(_))));
    let mut no_step = ckpt.clone();
    no_step.meta.remove("train.step");
    assert!(Trainer::resume(tiny_config(), &no_step).is_err());
}

#[test]
fn history_file_has_header_and_one_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(2, 16, 20);
    let run = |name: &str| {
        let path = dir.path().join(name);
        let mut t = Trainer::new(TrainConfig { steps: Some(3), ..tiny_config() }).unwrap();
        t.log_history_to(&path).unwrap();
        t.run(&data, |_, _| {}).unwrap();
        (std::fs::read_to_string(&path).unwrap(), t.history)
    };
    let (text, history) = run("a.csv");
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], HISTORY_HEADER);
    assert_eq!(lines.len(), 4);
    for (line, rec) in lines[1..].iter().zip(&history) {
        assert_eq!(*line, rec.csv_line());
        let total: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(total, rec.terms.total);
    }
    assert_eq!(history.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(run("b.csv").0, text);
}

#[test]
fn batch_loss_is_the_mean_of_pair_losses() {
    let data = samples(2, 16, 16);
    let cfg = TrainConfig { steps: Some(1), batch_size: 2, ..tiny_config() };
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let rec = t.train_step(&data).unwrap();
    let mut sum = 0.0;
    for i in 0..2 {
        let mut single = Trainer::new(TrainConfig { batch_size: 1, ..cfg.clone() }).unwrap();
        let one = std::slice::from_ref(&data[i]);
        sum += single.train_step(one).unwrap().terms.total;
    }
    // Crop equals the pair size, so both runs see identical inputs.
    assert!((rec.terms.total - sum / 2.0).abs() < 1e-12, "{} vs {}", rec.terms.total, sum / 2.0);
}

#[test]
fn non_finite_parameters_abort_and_keep_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.ckpt");
    let data = samples(2, 16, 20);
    let mut t = Trainer::new(TrainConfig { steps: Some(4), checkpoint_every: 1, ..tiny_config() }).unwrap();
    t.checkpoint_to(&path);
    t.train_step(&data).unwrap();
    t.model.save(&path, t.checkpoint_meta()).unwrap();
    let good = std::fs::read(&path).unwrap();
    t.model.store_mut().iter_mut().next().unwrap().value.data_mut()[0] = f64::NAN;
    let err = t.run(&data, |_, _| {}).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { step: 1, .. }), "{err}");
    assert_eq!(t.step, 1);
    assert_eq!(std::fs::read(&path).unwrap(), good);
}

#[test]
fn invalid_configurations_are_rejected() {
    for cfg in [
        TrainConfig { batch_size: 0, ..tiny_config() },
        TrainConfig { crop: 18, ..tiny_config() },
        TrainConfig { lr: -1.0, ..tiny_config() },
        TrainConfig { lr: f64::INFINITY, ..tiny_config() },
    ] {
        assert!(matches!(Trainer::new(cfg), Err(TrainError::Config(_))));
    }
    let mut t = Trainer::new(tiny_config()).unwrap();
    assert!(matches!(t.train_step(&[]), Err(TrainError::EmptyDataset)));
}

#[test]
fn cosine_schedule_decays_to_zero() {
    let cfg = TrainConfig { cosine: true, lr: 2e-3, ..tiny_config() };
    assert_eq!(cfg.lr_at(0, 10), 2e-3);
    assert!((cfg.lr_at(5, 10) - 1e-3).abs() < 1e-15);
    assert!(cfg.lr_at(10, 10).abs() < 1e-18);
    let flat = TrainConfig { cosine: false, ..cfg };
    assert_eq!(flat.lr_at(7, 10), 2e-3);
    assert_eq!(AdamW::default().lr, 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn each_epoch_visits_every_pair_once(pairs in 1usize..30, batch in 1usize..9, seed in 0u64..100, epoch in 0u64..4) {
        let cfg = TrainConfig { batch_size: batch, seed, ..tiny_config() };
        let t = Trainer::new(cfg.clone()).unwrap();
        let per = cfg.steps_per_epoch(pairs);
        let mut seen = Vec::new();
        for k in 0..per {
            let (e, idx) = t.batch_indices(epoch * per + k, pairs);
            prop_assert_eq!(e, epoch);
            prop_assert!(!idx.is_empty() && idx.len() <= batch);
            seen.extend(idx);
        }
        seen.sort();
        prop_assert_eq!(seen, (0..pairs).collect::<Vec<_>>());
    }
}
