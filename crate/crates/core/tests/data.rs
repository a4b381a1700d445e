use fan_core::data::{
    load_idx, procedural_digits, resize_bilinear, rgb_to_gray, sample_protocol, synth_domain_pair, to_model_input,
    write_idx_images, write_idx_labels, DomainDataset, DomainTag, Shift, LUMA, NUM_CLASSES,
};
use fan_core::ErrorCategory;
use fan_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

#[test]
fn idx_round_trip_scales_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    let px = bytes(5 * 28 * 28, 1);
    write_idx_images(&img, &[5, 28, 28], &px).unwrap();
    write_idx_labels(&lab, &[3, 1, 4, 1, 5]).unwrap();
    let ds = load_idx(&img, Some(&lab), DomainTag::Source).unwrap();
    assert_eq!(ds.images().shape(), &[5, 1, 28, 28]);
    assert_eq!(ds.labels().unwrap(), &[3, 1, 4, 1, 5]);
    for (v, b) in ds.images().data().iter().zip(&px) {
        assert_eq!(*v, *b as f32 / 255.0);
    }
}

#[test]
fn idx_header_is_big_endian() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("i.idx");
    write_idx_images(&p, &[2, 28, 28], &[0; 2 * 28 * 28]).unwrap();
    let raw = std::fs::read(&p).unwrap();
    assert_eq!(&raw[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28]);
}

#[test]
fn idx_images_without_labels_are_unlabeled() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("i.idx");
    write_idx_images(&p, &[3, 28, 28], &bytes(3 * 784, 2)).unwrap();
    let ds = load_idx(&p, None, DomainTag::Target).unwrap();
    assert_eq!(ds.len(), 3);
    assert!(ds.labels().is_none());
}

#[test]
fn idx_label_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    write_idx_images(&img, &[9, 28, 28], &bytes(9 * 784, 3)).unwrap();
    write_idx_labels(&lab, &[0; 10]).unwrap();
    let err = load_idx(&img, Some(&lab), DomainTag::Source).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Data);
}

#[test]
fn idx_truncated_and_bad_magic_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("i.idx");
    write_idx_images(&p, &[2, 28, 28], &bytes(2 * 784, 4)).unwrap();
    let mut raw = std::fs::read(&p).unwrap();
    raw.pop();
    std::fs::write(&p, &raw).unwrap();
    assert!(load_idx(&p, None, DomainTag::Source).is_err());
    raw.push(0);
    raw[2] = 0x0d;
    std::fs::write(&p, &raw).unwrap();
    assert!(load_idx(&p, None, DomainTag::Source).is_err());
}

#[test]
fn idx_rgb_images_become_gray_28() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("i.idx");
    let px = vec![255u8; 2 * 3 * 32 * 32];
    write_idx_images(&p, &[2, 3, 32, 32], &px).unwrap();
    let ds = load_idx(&p, None, DomainTag::Source).unwrap();
    assert_eq!(ds.images().shape(), &[2, 1, 28, 28]);
    assert!(ds.images().data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
}

#[test]
fn gray_of_white_and_red() {
    let white = Tensor::full(&[3, 2, 2], 1.0);
    assert!(rgb_to_gray(&white).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    let mut red = Tensor::zeros(&[3, 1, 1]);
    red.data_mut()[0] = 1.0;
    assert!((rgb_to_gray(&red).unwrap().data()[0] - 0.299).abs() < 1e-7);
}

#[test]
fn gray_matches_weighted_sum_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = Tensor::uniform(&[3, 7, 9], 0.0, 1.0, &mut rng);
    let g = rgb_to_gray(&img).unwrap();
    let d = img.data();
    for i in 0..63 {
        let want = 0.299f64 * d[i] as f64 + 0.587 * d[63 + i] as f64 + 0.114 * d[126 + i] as f64;
        assert!((g.data()[i] as f64 - want).abs() < 1e-6);
    }
    assert_eq!(LUMA, [0.299, 0.587, 0.114]);
}

#[test]
fn resize_identity_constant_and_ramp() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = Tensor::uniform(&[1, 28, 28], 0.0, 1.0, &mut rng);
    assert_eq!(resize_bilinear(&img, 28, 28).unwrap(), img);

    let c = resize_bilinear(&Tensor::full(&[1, 16, 16], 0.37), 28, 28).unwrap();
    assert!(c.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));

    let ramp: Vec<f32> = (0..16 * 16).map(|i| (i % 16) as f32 / 15.0).collect();
    let r = resize_bilinear(&Tensor::new(&[1, 16, 16], ramp).unwrap(), 28, 28).unwrap();
    for row in r.data().chunks(28) {
        assert!(row.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(row[0], 0.0);
        assert!((row[27] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn resize_matches_direct_interpolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
    let r = resize_bilinear(&img, 28, 28).unwrap();
    let at = |y: usize, x: usize| img.data()[y * 16 + x] as f64;
    for (y, x) in [(0, 0), (5, 13), (27, 27), (14, 3), (20, 26)] {
        let (py, px) = (y as f64 * 15.0 / 27.0, x as f64 * 15.0 / 27.0);
        let (y0, x0) = (py.floor() as usize, px.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(15), (x0 + 1).min(15));
        let (fy, fx) = (py - y0 as f64, px - x0 as f64);
        let want = (at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx) * (1.0 - fy)
            + (at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx) * fy;
        assert!((r.data()[y * 28 + x] as f64 - want).abs() < 1e-5, "({y},{x})");
    }
}

#[test]
fn sampling_is_deterministic_and_without_replacement() {
    let ds = procedural_digits(300, 8).unwrap();
    let a = sample_protocol(&ds, 120, 7).unwrap();
    let b = sample_protocol(&ds, 120, 7).unwrap();
    assert_eq!(a.images(), b.images());
    assert_eq!(a.labels(), b.labels());
    let full = sample_protocol(&ds, 300, 1).unwrap();
    let mut rows: Vec<Vec<u32>> = (0..300)
        .map(|i| full.images().row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    let mut orig: Vec<Vec<u32>> = (0..300)
        .map(|i| ds.images().row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort();
    orig.sort();
    assert_eq!(rows, orig);
    assert_eq!(
        sample_protocol(&ds, 301, 0).unwrap_err().category(),
        ErrorCategory::Config
    );
}

#[test]
fn sampled_class_histogram_is_multinomial() {
    let n_pop = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels: Vec<usize> = (0..n_pop).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
    let images = Tensor::zeros(&[n_pop, 1, 28, 28]);
    let ds = DomainDataset::new(images, Some(labels.clone()), DomainTag::Source, "labels only").unwrap();
    let s = sample_protocol(&ds, 2000, 7).unwrap();
    let hist = s.class_histogram().unwrap();
    let mut pop = [0usize; NUM_CLASSES];
    labels.iter().for_each(|&c| pop[c] += 1);
    for c in 0..NUM_CLASSES {
        let p = pop[c] as f64 / n_pop as f64;
        let (mean, sd) = (2000.0 * p, (2000.0 * p * (1.0 - p)).sqrt());
        assert!((hist[c] as f64 - mean).abs() <= 4.0 * sd, "class {c}: {} vs {mean}", hist[c]);
    }
}

#[test]
fn invert_is_an_involution() {
    let ds = procedural_digits(20, 10).unwrap();
    let twice = Shift::Invert.apply(&Shift::Invert.apply(&ds, 0), 0);
    assert!(twice.images().max_abs_diff(ds.images()) < 1e-7);
}

#[test]
fn domain_pair_withholds_target_labels() {
    let base = procedural_digits(30, 11).unwrap();
    let (s, t) = synth_domain_pair(&base, Shift::Brightness, 3);
    assert_eq!(s.images(), base.images());
    assert_eq!(s.domain, DomainTag::Source);
    assert_eq!(t.domain, DomainTag::Target);
    assert!(t.labels().is_none());
    assert_eq!(t.evaluation_labels(), base.labels());
    for (a, b) in t.images().data().iter().zip(base.images().data()) {
        assert!((a - (0.6 * b).clamp(0.0, 1.0)).abs() < 1e-7);
    }
}

#[test]
fn transforms_are_deterministic() {
    let base = procedural_digits(40, 12).unwrap();
    assert_eq!(procedural_digits(40, 12).unwrap(), base);
    let a = Shift::Noise.apply(&base, 5);
    let b = Shift::Noise.apply(&base, 5);
    assert_eq!(a.images(), b.images());
    assert_ne!(Shift::Noise.apply(&base, 6).images(), a.images());
}

fn in_range(t: &Tensor) -> bool {
    t.data().iter().all(|v| (0.0..=1.0).contains(v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_transform_keeps_range_and_shape(seed in 0u64..10_000, n in 1usize..12, si in 0usize..3) {
        let base = procedural_digits(n, seed).unwrap();
        prop_assert!(in_range(base.images()));
        let shift = [Shift::Invert, Shift::Noise, Shift::Brightness][si];
        let (s, t) = synth_domain_pair(&base, shift, seed);
        for ds in [&s, &t] {
            prop_assert_eq!(ds.images().shape(), &[n, 1, 28, 28]);
            prop_assert!(in_range(ds.images()));
        }
        let k = 1 + (seed as usize % n);
        let sub = sample_protocol(&base, k, seed).unwrap();
        prop_assert_eq!(sub.images().shape(), &[k, 1, 28, 28]);
    }

    #[test]
    fn preprocessing_keeps_range(seed in 0u64..10_000, c in prop::sample::select(vec![1usize, 3]), h in 2usize..40, w in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::uniform(&[c, h, w], 0.0, 1.0, &mut rng);
        let out = to_model_input(&img).unwrap();
        prop_assert_eq!(out.shape(), &[1, 28, 28]);
        prop_assert!(in_range(&out));
        prop_assert_eq!(to_model_input(&img).unwrap(), out);
    }
}
