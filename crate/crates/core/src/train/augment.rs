use rand::Rng;

use super::SpecAugmentConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `λ·a + (1−λ)·b` for both the features and the (soft) labels.
pub fn mixup<S: Scalar>(
    x_a: &Tensor<S>,
    y_a: &[S],
    x_b: &Tensor<S>,
    y_b: &[S],
    lambda: S,
) -> Result<(Tensor<S>, Vec<S>)> {
    if x_a.shape() != x_b.shape() || y_a.len() != y_b.len() {
        return Err(Error::shape("mixup", "the two examples differ in shape"));
    }
    if !(lambda >= S::zero() && lambda <= S::one()) {
        return Err(Error::InvalidArgument(format!(
            "mixup coefficient {lambda} outside [0, 1]"
        )));
    }
    let mix = |a: &[S], b: &[S]| -> Vec<S> {
        a.iter()
            .zip(b)
            .map(|(&a, &b)| lambda * a + (S::one() - lambda) * b)
            .collect()
    };
    let x = Tensor::new(x_a.shape().to_vec(), mix(x_a.data(), x_b.data()))?;
    Ok((x, mix(y_a, y_b)))
}

/// Masks random time and frequency stripes of a `T×F×1` feature in place,
/// filling them with the feature's mean taken before any masking.
pub fn spec_augment<S: Scalar>(feature: &mut Tensor<S>, cfg: &SpecAugmentConfig, rng: &mut impl Rng) -> Result<()> {
    let &[t, f, 1] = feature.shape() else {
        return Err(Error::shape(
            "spec_augment",
            format!("expected T×F×1, got {:?}", feature.shape()),
        ));
    };
    if (cfg.time_masks > 0 && cfg.max_time_width >= t) || (cfg.freq_masks > 0 && cfg.max_freq_width >= f) {
        return Err(Error::InvalidArgument(format!(
            "mask widths ({}, {}) must be below the feature dims {t}×{f}",
            cfg.max_time_width, cfg.max_freq_width
        )));
    }
    if cfg.time_masks == 0 && cfg.freq_masks == 0 {
        return Ok(());
    }
    let fill = feature.mean();
    let data = feature.data_mut();
    for _ in 0..cfg.time_masks {
        let width = rng.random_range(0..=cfg.max_time_width);
        let start = rng.random_range(0..=t - width);
        data[start * f..(start + width) * f].fill(fill);
    }
    for _ in 0..cfg.freq_masks {
        let width = rng.random_range(0..=cfg.max_freq_width);
        let start = rng.random_range(0..=f - width);
        for row in data.chunks_mut(f) {
            row[start..start + width].fill(fill);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot(k: usize, n: usize) -> Vec<f64> {
        (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let a = Tensor::<f64>::from_f64(vec![2, 1, 1], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![2, 1, 1], &[5.0, -2.0]).unwrap();
        let (x, y) = mixup(&a, &one_hot(2, 10), &b, &one_hot(7, 10), 1.0).unwrap();
        assert_eq!(x, a);
        assert_eq!(y, one_hot(2, 10));
        let (x, y) = mixup(&a, &one_hot(2, 10), &b, &one_hot(7, 10), 0.5).unwrap();
        assert_eq!(x.data(), &[3.0, 0.0]);
        assert_eq!((y[2], y[7]), (0.5, 0.5));
        assert!(mixup(&a, &one_hot(2, 10), &b, &one_hot(7, 10), 1.5).is_err());
    }

    #[test]
    fn no_masks_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::new(vec![10, 6, 1], (0..60).map(f64::from).collect()).unwrap();
        let mut y = x.clone();
        spec_augment(&mut y, &SpecAugmentConfig::OFF, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn one_time_mask_changes_width_rows() {
        // Strictly increasing values never equal the mean except possibly
        // in one cell, so count rows that became constant at the mean.
        let cfg = SpecAugmentConfig {
            time_masks: 1,
            max_time_width: 5,
            freq_masks: 0,
            max_freq_width: 0,
        };
        let x = Tensor::<f64>::new(vec![12, 6, 1], (0..72).map(|v| v as f64 + 0.25).collect()).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut y = x.clone();
            spec_augment(&mut y, &cfg, &mut rng).unwrap();
            let changed = x.data().iter().zip(y.data()).filter(|(a, b)| a != b).count();
            assert_eq!(changed % 6, 0);
            assert!(changed <= 5 * 6);
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn oversized_masks_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = Tensor::<f64>::zeros(vec![8, 4, 1]);
        let cfg = SpecAugmentConfig {
            time_masks: 0,
            max_time_width: 0,
            freq_masks: 1,
            max_freq_width: 4,
        };
        assert!(spec_augment(&mut x, &cfg, &mut rng).is_err());
    }
}
