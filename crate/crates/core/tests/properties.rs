use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tsattn::frontend::{fix_length, Framing, Waveform};
use tsattn::model::{Model, ModelConfig};
use tsattn::robustness::{add_noise_snr, mask_region_noise, RegionMask};
use tsattn::tape::{sigmoid, softmax};
use tsattn::train::mixup;
use tsattn::{Axis, Padding, Tape, Tensor};

fn tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_ignores_a_common_shift(xs in prop::collection::vec(-20.0f64..20.0, 1..8), c in -50.0f64..50.0) {
        let p = softmax(&xs).unwrap();
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let q = softmax(&shifted).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_stays_in_the_closed_unit_interval(x in -1e4f64..1e4) {
        let s = sigmoid(x);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s + sigmoid(-x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frame_count_matches_last_window_fitting(rate in 8000u32..48000, samples in 0usize..200_000) {
        let f = Framing::new(rate, 0.040, 0.020).unwrap();
        match f.frame_count(samples) {
            None => prop_assert!(samples < f.window),
            Some(n) => {
                prop_assert!(n >= 1);
                prop_assert!((n - 1) * f.hop + f.window <= samples);
                prop_assert!(n * f.hop + f.window > samples);
            }
        }
    }

    #[test]
    fn fix_length_is_idempotent(len in 1usize..5000, seconds in 0.01f64..0.5) {
        let w = Waveform::new((0..len).map(|i| (i as f64 * 0.01).sin()).collect(), 8000).unwrap();
        let once = fix_length(&w, seconds);
        prop_assert_eq!(once.len(), (seconds * 8000.0).round() as usize);
        prop_assert_eq!(fix_length(&once, seconds), once.clone());
    }

    #[test]
    fn conv_and_pool_shapes(n in 1usize..3, t in 3usize..12, f in 3usize..12, ci in 1usize..4, co in 1usize..4, seed in 0u64..100) {
        let mut tape = Tape::new();
        let x = tape.constant(tensor(vec![n, t, f, ci], seed));
        let k = tape.constant(tensor(vec![3, 3, ci, co], seed + 1));
        let b = tape.constant(Tensor::zeros(vec![co]));
        let same = tape.conv2d(x, k, b, Padding::Same).unwrap();
        let valid = tape.conv2d(x, k, b, Padding::Valid).unwrap();
        let pooled = tape.avg_pool2d(same).unwrap();
        prop_assert_eq!(tape.value(same).shape(), &[n, t, f, co]);
        prop_assert_eq!(tape.value(valid).shape(), &[n, t - 2, f - 2, co]);
        prop_assert_eq!(tape.value(pooled).shape(), &[n, t / 2, f / 2, co]);
    }

    #[test]
    fn realized_snr_hits_the_target(snr in -10.0f64..40.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Waveform::new((0..4000).map(|_| StandardNormal.sample(&mut rng)).collect(), 8000).unwrap();
        let nz = Waveform::new((0..4000).map(|_| StandardNormal.sample(&mut rng)).collect(), 8000).unwrap();
        let mixed = add_noise_snr(&s, &nz, snr).unwrap();
        let added: Vec<f64> = mixed.samples.iter().zip(&s.samples).map(|(m, x)| m - x).collect();
        prop_assert!((tsattn::robustness::snr_db(&s.samples, &added) - snr).abs() < 0.01);
    }

    #[test]
    fn mixup_targets_stay_distributions(lambda in 0.0f64..=1.0, a in 0usize..4, b in 0usize..4) {
        let one_hot = |k: usize| (0..4).map(|i| if i == k { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let x = tensor(vec![4, 3, 1], 1);
        let (mixed, y) = mixup(&x, &one_hot(a), &x, &one_hot(b), lambda).unwrap();
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(y.iter().all(|&v| v >= 0.0));
        prop_assert!(mixed.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn stripe_noise_leaves_the_rest_untouched(start in 0usize..10, width in 0usize..6, time in any::<bool>(), seed in 0u64..100) {
        let x = tensor(vec![16, 10, 2], seed);
        let axis = if time { Axis::Time } else { Axis::Frequency };
        let end = (start + width).min(9);
        let mask = RegionMask::new(axis, start.min(end), end);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = mask_region_noise(&x, &mask, &mut rng).unwrap();
        for t in 0..16 {
            for f in 0..10 {
                for c in 0..2 {
                    let (a, b) = (x.at(&[t, f, c]), y.at(&[t, f, c]));
                    if mask.contains(t, f) {
                        prop_assert!(a != b);
                    } else {
                        prop_assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn batch_permutation_permutes_logits(seed in 0u64..1000, rot in 1usize..3) {
        let mut cfg = ModelConfig::preset("TS-CNN10", 3).unwrap();
        cfg.block_channels = vec![3, 3, 3, 3];
        cfg.fc_hidden = 4;
        cfg.input_bands = 16;
        let model = Model::<f64>::new(cfg, seed).unwrap();
        let x = tensor(vec![3, 16, 16, 1], seed);
        let item = 16 * 16;
        let mut data = x.data().to_vec();
        data.rotate_left(rot * item);
        let permuted = Tensor::new(vec![3, 16, 16, 1], data).unwrap();
        let mut a = model.forward_eval(&x).unwrap().into_data();
        let b = model.forward_eval(&permuted).unwrap().into_data();
        a.rotate_left(rot * 3);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
