use htr_core::session::Session;
use htr_core::tensor::{ParamStore, Tensor};
use htr_core::vision::{
    augment, denormalize, estimate_flops, extract, features, load_and_normalize, map_to_sequence, normalize_gray, pad_batch,
    rescale_height, warp, AffineParams, AugmentConfig, Cnn, CnnConfig, ColumnRanges, ConvLayerSpec, LineImage, RnnDims,
    LINE_HEIGHT,
};
use htr_core::HtrError;
use image::{DynamicImage, GrayImage, RgbImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_line(rng: &mut ChaCha8Rng, w: usize) -> LineImage {
    let data = (0..LINE_HEIGHT * w).map(|_| rng.random_range(0.0f32..1.0)).collect();
    LineImage::from_pixels(LINE_HEIGHT, w, data).unwrap()
}

fn cnn(cfg: CnnConfig, seed: u64) -> (Cnn, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cnn = Cnn::new(cfg, &mut store, &mut rng).unwrap();
    (cnn, store)
}

/// Gives the BN layers non-trivial running statistics.
fn perturb_running_stats(store: &mut ParamStore<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).contains("running")).collect();
    for id in ids {
        let is_var = store.name(id).ends_with("var");
        for v in store.get_mut(id).data_mut() {
            *v = if is_var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.3..0.3) };
        }
    }
}

#[test]
fn normalize_examples() {
    let img = normalize_gray(3, 1, &[255, 0, 128]).unwrap();
    assert_eq!(img.data(), &[0.0, 1.0, 127.0 / 255.0]);
    assert!((img.data()[2] - 0.498).abs() < 1e-3);
    assert_eq!(img.height(), 1);
    assert_eq!(img.width(), 3);
}

#[test]
fn normalize_rejects_color_and_wrong_sizes() {
    let rgb = DynamicImage::ImageRgb8(RgbImage::new(4, 4));
    assert!(matches!(load_and_normalize(&rgb), Err(HtrError::Format(_))));
    assert!(matches!(normalize_gray(2, 2, &[0; 3]), Err(HtrError::Format(_))));
    let gray = DynamicImage::ImageLuma8(GrayImage::from_raw(2, 1, vec![10, 200]).unwrap());
    let img = load_and_normalize(&gray).unwrap();
    assert_eq!(denormalize(&img), vec![10, 200]);
}

#[test]
fn rescale_examples() {
    let big = LineImage::from_pixels(128, 1751, vec![0.25; 128 * 1751]).unwrap();
    let r = rescale_height(&big, 32).unwrap();
    assert_eq!((r.height(), r.width()), (32, 438));
    assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let same = random_line(&mut rng, 100);
    assert_eq!(rescale_height(&same, 32).unwrap(), same);

    let narrow = LineImage::from_pixels(64, 6, vec![1.0; 64 * 6]).unwrap();
    let r = rescale_height(&narrow, 32).unwrap();
    assert_eq!((r.height(), r.width()), (32, 8));
    assert_eq!(r.original_width, 6);

    assert!(matches!(LineImage::from_pixels(0, 5, vec![]), Err(HtrError::Format(_))));
}

#[test]
fn augment_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_line(&mut rng, 50);
    let out = augment(&img, &AugmentConfig::none(), &mut rng).unwrap();
    assert_eq!(out, img);

    let mut delta = vec![0.0f32; LINE_HEIGHT * 20];
    delta[10 * 20 + 5] = 1.0;
    let delta = LineImage::from_pixels(LINE_HEIGHT, 20, delta).unwrap();
    let moved = warp(&delta, &AffineParams::translation(2.0, 0.0));
    assert_eq!(moved.get(10, 7), 1.0);
    assert!((moved.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);

    let cfg = AugmentConfig::default();
    let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

    let bad = AugmentConfig { rotation_sigma: -1.0, ..AugmentConfig::default() };
    assert!(augment(&img, &bad, &mut rng).is_err());
}

#[test]
fn pad_batch_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = CnnConfig::standard();
    let b = pad_batch(&[random_line(&mut rng, 100), random_line(&mut rng, 100)], &cfg).unwrap();
    assert_eq!(b.max_width(), 100);
    assert!(b.frame_mask.iter().all(|&m| m));

    let one = pad_batch(&[random_line(&mut rng, 57)], &cfg).unwrap();
    assert_eq!(one.len(), 1);
    assert!(one.frame_mask.iter().all(|&m| m));
    assert_eq!(one.frame_mask.len(), one.frames);

    assert!(matches!(pad_batch(&[], &cfg), Err(HtrError::Contract(_))));
}

#[test]
fn cnn_forward_examples() {
    let (net, store) = cnn(CnnConfig::standard(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (w, frames) in [(100, 24), (8, 1)] {
        let batch = pad_batch(&[random_line(&mut rng, w), random_line(&mut rng, w)], &net.config).unwrap();
        let mut s = Session::inference(&store);
        let x = s.graph.constant(batch.pixels.clone());
        let (y, _) = net.forward(&mut s, x, &batch.column_ranges()).unwrap();
        assert_eq!(s.graph.shape(y), &[2, 128, 1, frames]);
    }

    let mut s = Session::inference(&store);
    let x = s.graph.constant(Tensor::zeros(&[1, 1, 32, 7]));
    assert!(matches!(net.forward(&mut s, x, &ColumnRanges::full(1, 7)), Err(HtrError::Dimension(_))));

    let zeros = LineImage::from_pixels(LINE_HEIGHT, 40, vec![0.0; LINE_HEIGHT * 40]).unwrap();
    let batch = pad_batch(&[zeros], &net.config).unwrap();
    let (a, _) = features(&net, &store, &batch).unwrap();
    let (b, _) = features(&net, &store, &batch).unwrap();
    assert!(a.is_finite());
    assert_eq!(a, b);
    // Zero input with zero-initialized beta and zero running mean stays zero.
    assert!(a.data().iter().all(|&v| v == 0.0));
}

#[test]
fn map_to_sequence_examples() {
    let store = ParamStore::<f64>::new();
    let mut s = Session::inference(&store);
    let (b, c, w) = (2, 128, 24);
    let data: Vec<f64> = (0..b * c * w).map(|i| i as f64).collect();
    let fm = s.graph.constant(Tensor::new(vec![b, c, 1, w], data.clone()).unwrap());
    let seq = map_to_sequence(&mut s, fm, &ColumnRanges::full(b, w)).unwrap();
    assert_eq!((seq.batch, seq.steps, seq.dim), (2, 24, 128));
    let v = s.graph.value(seq.vectors);
    for bi in 0..b {
        for i in 0..w {
            for ch in 0..c {
                assert_eq!(v.at(&[bi, i, ch]), data[(bi * c + ch) * w + i]);
            }
        }
    }

    let mut constant = vec![0.0; c * 3];
    constant[5 * 3..6 * 3].fill(7.5);
    let fm = s.graph.constant(Tensor::new(vec![1, c, 1, 3], constant).unwrap());
    let seq = map_to_sequence(&mut s, fm, &ColumnRanges::full(1, 3)).unwrap();
    let v = s.graph.value(seq.vectors);
    assert!((0..3).all(|i| v.at(&[0, i, 5]) == 7.5));

    let tall = s.graph.constant(Tensor::zeros(&[1, 4, 2, 3]));
    assert!(map_to_sequence(&mut s, tall, &ColumnRanges::full(1, 3)).is_err());
}

#[test]
fn flops_examples() {
    let empty = CnnConfig { layers: vec![], ..CnnConfig::standard() };
    assert_eq!(estimate_flops(&empty, &RnnDims::none(), 32, 100).total, 0);

    let one = CnnConfig {
        layers: vec![ConvLayerSpec { filters: 1, kernel: (1, 1), pad: (0, 0), pool: None }],
        ..CnnConfig::standard()
    };
    assert_eq!(estimate_flops(&one, &RnnDims::none(), 4, 4).conv, 32);

    let std = CnnConfig::standard();
    let hi = estimate_flops(&std, &RnnDims::standard(), 128, 1600);
    let lo = estimate_flops(&std, &RnnDims::standard(), 32, 400);
    let ratio = hi.conv as f64 / lo.conv as f64;
    assert!((ratio / 16.0 - 1.0).abs() < 0.05, "{ratio}");
}

#[test]
fn padded_batch_matches_solo_features() {
    let (net, mut store) = cnn(CnnConfig::halved(), 5);
    perturb_running_stats(&mut store, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let imgs: Vec<LineImage> = [23, 64, 41, 97].iter().map(|&w| random_line(&mut rng, w)).collect();
    let batch = pad_batch(&imgs, &net.config).unwrap();
    let (all, mask) = features(&net, &store, &batch).unwrap();
    let d = net.config.out_channels();
    for (i, img) in imgs.iter().enumerate() {
        let solo = pad_batch(std::slice::from_ref(img), &net.config).unwrap();
        let (alone, _) = features(&net, &store, &solo).unwrap();
        let valid: Vec<usize> = (0..batch.frames).filter(|&t| mask[i * batch.frames + t]).collect();
        assert_eq!(valid.len(), solo.frames);
        for (j, &t) in valid.iter().enumerate() {
            for k in 0..d {
                let a = all.at(&[i, t, k]);
                let b = alone.at(&[0, j, k]);
                assert!((a - b).abs() < 1e-4, "item {i} frame {t} channel {k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn training_mode_bn_ignores_padding() {
    let (net, store) = cnn(CnnConfig::halved(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = random_line(&mut rng, 48);
    let solo = pad_batch(std::slice::from_ref(&img), &net.config).unwrap();
    let mut s = Session::new(&store, htr_core::session::Mode::Train, 0);
    extract(&mut s, &net, &solo).unwrap();
    let solo_stats = s.bn_updates.clone();
    // A padded copy of the same image alone must see identical statistics.
    let padded = {
        let mut px = vec![0.0f32; LINE_HEIGHT * 80];
        for y in 0..LINE_HEIGHT {
            for x in 0..48 {
                px[y * 80 + 16 + x] = solo.pixels.data()[y * 48 + x];
            }
        }
        let mut b = pad_batch(&[LineImage::from_pixels(LINE_HEIGHT, 80, px).unwrap()], &net.config).unwrap();
        b.widths = vec![48];
        b.offsets = vec![16];
        b.frame_mask = (0..b.frames).map(|f| (4..4 + solo.frames).contains(&f)).collect();
        b
    };
    let mut s = Session::new(&store, htr_core::session::Mode::Train, 0);
    extract(&mut s, &net, &padded).unwrap();
    for (a, b) in solo_stats.iter().zip(&s.bn_updates) {
        for (x, y) in a.batch_mean.iter().zip(&b.batch_mean) {
            assert!((x - y).abs() < 1e-4);
        }
        for (x, y) in a.batch_var.iter().zip(&b.batch_var) {
            assert!((x - y).abs() < 1e-3 * y.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shape_law(w in 8usize..400, seed in 0u64..4) {
        let (net, store) = cnn(CnnConfig::standard(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = pad_batch(&[random_line(&mut rng, w)], &net.config).unwrap();
        let mut s = Session::inference(&store);
        let x = s.graph.constant(batch.pixels.clone());
        let (y, _) = net.forward(&mut s, x, &batch.column_ranges()).unwrap();
        prop_assert_eq!(s.graph.shape(y), &[1, 128, 1, w / 2 / 2 - 1][..]);
    }

    #[test]
    fn zero_sigma_augmentation_is_identity(w in 8usize..80, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_line(&mut rng, w);
        prop_assert_eq!(augment(&img, &AugmentConfig::none(), &mut rng).unwrap(), img);
    }

    #[test]
    fn normalize_round_trips_bytes(raw in prop::collection::vec(any::<u8>(), 1..200)) {
        let img = normalize_gray(raw.len(), 1, &raw).unwrap();
        prop_assert_eq!(denormalize(&img), raw);
    }

    #[test]
    fn rescale_keeps_range_and_height(h in 1usize..140, w in 1usize..300, v in 0.0f32..1.0) {
        let img = LineImage::from_pixels(h, w, vec![v; h * w]).unwrap();
        let r = rescale_height(&img, 32).unwrap();
        prop_assert_eq!(r.height(), 32);
        prop_assert_eq!(r.width(), ((w as f64 * 32.0 / h as f64).round() as usize).max(8));
        prop_assert!(r.data().iter().all(|&x| (x - v).abs() < 1e-5));
    }

    #[test]
    fn augmentation_stays_in_unit_range(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_line(&mut rng, 40);
        let cfg = AugmentConfig { translation_sigma: 5.0, rotation_sigma: 10.0, shear_sigma: 0.5, scale_sigma: 0.3 };
        let out = augment(&img, &cfg, &mut rng).unwrap();
        prop_assert_eq!((out.height(), out.width()), (32, 40));
        prop_assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn flops_monotone(h in 8usize..160, w in 8usize..600, dh in 0usize..8, dw in 0usize..64, layer in 0usize..7, extra in 1usize..16) {
        let rnn = RnnDims::standard();
        let cfg = CnnConfig::standard();
        let base = estimate_flops(&cfg, &rnn, h, w).total;
        prop_assert!(estimate_flops(&cfg, &rnn, h + dh, w).total >= base);
        prop_assert!(estimate_flops(&cfg, &rnn, h, w + dw).total >= base);
        let mut filters = htr_core::vision::STANDARD_FILTERS;
        filters[layer] += extra;
        prop_assert!(estimate_flops(&CnnConfig::with_filters(&filters), &rnn, h, w).total >= base);
    }

    #[test]
    fn padding_never_changes_valid_frames(widths in prop::collection::vec(8usize..90, 1..4), seed in 0u64..1000) {
        let (net, mut store) = cnn(CnnConfig::with_filters(&[4, 4, 8, 8, 8, 8, 8]), seed);
        perturb_running_stats(&mut store, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs: Vec<LineImage> = widths.iter().map(|&w| random_line(&mut rng, w)).collect();
        let batch = pad_batch(&imgs, &net.config).unwrap();
        let (all, mask) = features(&net, &store, &batch).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let (alone, _) = features(&net, &store, &pad_batch(std::slice::from_ref(img), &net.config).unwrap()).unwrap();
            let valid: Vec<usize> = (0..batch.frames).filter(|&t| mask[i * batch.frames + t]).collect();
            prop_assert_eq!(valid.len(), alone.shape()[1]);
            for (j, &t) in valid.iter().enumerate() {
                for k in 0..8 {
                    prop_assert!((all.at(&[i, t, k]) - alone.at(&[0, j, k])).abs() < 1e-4);
                }
            }
            // Masked frames carry no signal.
            for t in (0..batch.frames).filter(|&t| !mask[i * batch.frames + t]) {
                prop_assert!((0..8).all(|k| all.at(&[i, t, k]) == 0.0));
            }
        }
    }
}
