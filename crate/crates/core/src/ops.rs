//! Tape-free versions of the differentiable operations, plus batch
//! normalization with running statistics.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Axis, Padding, Tape};
use crate::tensor::Tensor;

pub use crate::tape::{sigmoid, softmax};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }

    /// `running = momentum·running + (1 − momentum)·batch`.
    pub fn update(&mut self, batch_mean: &[S], batch_var: &[S]) {
        let m = S::of(BN_MOMENTUM);
        let one_m = S::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = m * *r + one_m * b;
        }
    }
}

fn unary<S: Scalar>(
    x: &Tensor<S>,
    f: impl FnOnce(&mut Tape<S>, crate::tape::Var) -> Result<crate::tape::Var>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    padding: Padding,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let (x, k, b) = (
        tape.constant(input.clone()),
        tape.constant(kernel.clone()),
        tape.constant(bias.clone()),
    );
    let out = tape.conv2d(x, k, b, padding)?;
    Ok(tape.value(out).clone())
}

pub fn avg_pool2d<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    unary(input, |t, v| t.avg_pool2d(v))
}

/// `reduce = Frequency` maps `T×F×1` to a length-T vector; `Time` to length F.
pub fn global_avg_pool_axis<S: Scalar>(input: &Tensor<S>, reduce: Axis) -> Result<Tensor<S>> {
    unary(input, |t, v| t.global_avg_pool_axis(v, reduce))
}

pub fn activation<S: Scalar>(input: &Tensor<S>, kind: Activation) -> Result<Tensor<S>> {
    unary(input, |t, v| match kind {
        Activation::Relu => t.relu(v),
        Activation::Sigmoid => t.sigmoid(v),
    })
}

pub fn dense<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let (x, w, b) = (
        tape.constant(input.clone()),
        tape.constant(weight.clone()),
        tape.constant(bias.clone()),
    );
    let out = tape.dense(x, w, b)?;
    Ok(tape.value(out).clone())
}

/// Batch normalization over every axis but the channel axis. Train mode uses
/// batch statistics and folds them into `stats`; eval mode reads `stats` only.
pub fn batch_norm<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    stats: &mut RunningStats<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    if input.rank() == 4 && input.shape()[0] == 0 {
        return Err(Error::shape("batch_norm", "empty batch"));
    }
    let mut tape = Tape::new();
    let (x, g, b) = (
        tape.constant(input.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let eps = S::of(BN_EPSILON);
    let out = match mode {
        Mode::Train => {
            let (out, batch) = tape.batch_norm_train(x, g, b, eps)?;
            stats.update(&batch.mean, &batch.var);
            out
        }
        Mode::Eval => tape.batch_norm_eval(x, g, b, &stats.mean, &stats.var, eps)?,
    };
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Independent direct convolution, `same` padding, written against raw indices.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (t, f, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, co) = (k.shape()[0], k.shape()[1], k.shape()[3]);
        let mut out = Vec::new();
        for i in 0..t as i64 {
            for j in 0..f as i64 {
                for o in 0..co {
                    let mut s = b.at(&[o]);
                    for a in 0..kh as i64 {
                        for c in 0..kw as i64 {
                            let (si, sj) = (i + a - kh as i64 / 2, j + c - kw as i64 / 2);
                            if si < 0 || sj < 0 || si >= t as i64 || sj >= f as i64 {
                                continue;
                            }
                            for ch in 0..ci {
                                s += x.at(&[si as usize, sj as usize, ch]) * k.at(&[a as usize, c as usize, ch, o]);
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
        out
    }

    #[test]
    fn conv_1x1_scales() {
        let x = Tensor::<f64>::from_f64(vec![2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::<f64>::from_f64(vec![1, 1, 1, 1], &[2.0]).unwrap();
        let b = Tensor::<f64>::zeros(vec![1]);
        let y = conv2d(&x, &k, &b, Padding::Same).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_counts_overlap() {
        let x = Tensor::<f64>::full(vec![3, 3, 1], 1.0);
        let k = Tensor::<f64>::full(vec![3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, &Tensor::<f64>::zeros(vec![1]), Padding::Same).unwrap();
        assert_eq!(y.at(&[1, 1, 0]), 9.0);
        for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(&[i, j, 0]), 4.0);
        }
        assert_eq!(y.at(&[0, 1, 0]), 6.0);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(vec![5, 4, 2], &mut rng);
        let k = random(vec![3, 3, 2, 3], &mut rng);
        let b = random(vec![3], &mut rng);
        let y = conv2d(&x, &k, &b, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[5, 4, 3]);
        let want = conv_oracle(&x, &k, &b);
        for (a, w) in y.data().iter().zip(&want) {
            assert!((a - w).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_valid_shrinks_and_batch_matches_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(vec![2, 5, 4, 2], &mut rng);
        let k = random(vec![3, 3, 2, 1], &mut rng);
        let b = Tensor::<f64>::zeros(vec![1]);
        assert_eq!(conv2d(&x, &k, &b, Padding::Valid).unwrap().shape(), &[2, 3, 2, 1]);
        let whole = conv2d(&x, &k, &b, Padding::Same).unwrap();
        let item = Tensor::new(vec![5, 4, 2], x.data()[40..].to_vec()).unwrap();
        let single = conv2d(&item, &k, &b, Padding::Same).unwrap();
        assert_eq!(&whole.data()[20..], single.data());
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f64>::zeros(vec![3, 3, 2]);
        let k = Tensor::<f64>::zeros(vec![3, 3, 1, 1]);
        assert!(matches!(
            conv2d(&x, &k, &Tensor::<f64>::zeros(vec![1]), Padding::Same),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn avg_pool_examples() {
        let x = Tensor::<f64>::from_f64(vec![2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2d(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(vec![6, 4, 3], 1.75);
        let y = avg_pool2d(&c).unwrap();
        assert_eq!(y.shape(), &[3, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.75));
        assert!(avg_pool2d(&Tensor::<f64>::zeros(vec![4, 4])).is_err());
    }

    #[test]
    fn avg_pool_5x5_matches_window_mean() {
        let x =
            Tensor::<f64>::from_f64(vec![5, 5, 1], &(0..25).map(|v| (v * v % 7) as f64).collect::<Vec<_>>()).unwrap();
        let y = avg_pool2d(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        s += x.at(&[2 * i + a, 2 * j + b, 0]);
                    }
                }
                assert_abs_diff_eq!(y.at(&[i, j, 0]), s / 4.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn axis_pooling_examples() {
        let x = Tensor::<f64>::from_f64(vec![2, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(global_avg_pool_axis(&x, Axis::Frequency).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(global_avg_pool_axis(&x, Axis::Time).unwrap().data(), &[2.5, 3.5, 4.5]);
        let c = Tensor::<f64>::full(vec![4, 3, 1], -0.5);
        assert_eq!(global_avg_pool_axis(&c, Axis::Time).unwrap().data(), &[-0.5; 3]);
        assert_eq!(global_avg_pool_axis(&c, Axis::Frequency).unwrap().data(), &[-0.5; 4]);
        assert!(global_avg_pool_axis(&Tensor::<f64>::zeros(vec![2, 3, 2]), Axis::Time).is_err());
    }

    #[test]
    fn activation_examples() {
        let x = Tensor::<f64>::from_f64(vec![3], &[-3.0, 0.0, 3.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).unwrap().data(), &[0.0, 0.0, 3.0]);
        assert_eq!(activation(&x, Activation::Sigmoid).unwrap().data()[1], 0.5);
        for v in [-20.0, -3.3, -0.1, 0.7, 5.0, 35.0] {
            assert!((sigmoid(v) + sigmoid(-v) - 1.0f64).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let e = std::f64::consts::E;
        let p = softmax(&[1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], e / (e + 2.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / (e + 2.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.5761, epsilon = 5e-5);
        assert_abs_diff_eq!(p[1], 0.2119, epsilon = 5e-5);
        for x in [[0.0; 3], [1000.0; 3]] {
            let p = softmax(&x).unwrap();
            for v in p {
                assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(vec![3, 4, 5, 2], &mut rng);
        let mut stats = RunningStats::new(2);
        let y = batch_norm(
            &x,
            &Tensor::<f64>::full(vec![2], 1.0),
            &Tensor::<f64>::zeros(vec![2]),
            &mut stats,
            Mode::Train,
        )
        .unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = y.data().iter().skip(ch).step_by(2).copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3, "variance {v}");
        }
        assert_ne!(stats.mean, vec![0.0, 0.0]);

        let c = Tensor::<f64>::full(vec![2, 3, 3, 1], 4.2);
        let mut stats = RunningStats::new(1);
        let y = batch_norm(
            &c,
            &Tensor::<f64>::full(vec![1], 1.0),
            &Tensor::<f64>::zeros(vec![1]),
            &mut stats,
            Mode::Train,
        )
        .unwrap();
        assert!(y.max_abs() < 1e-3);
    }

    #[test]
    fn batch_norm_eval_scalar_case() {
        let x = Tensor::<f64>::from_f64(vec![1, 1, 1, 1], &[3.0]).unwrap();
        let mut stats = RunningStats {
            mean: vec![1.0],
            var: vec![4.0],
        };
        let g = Tensor::<f64>::from_f64(vec![1], &[2.0]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![1], &[0.5]).unwrap();
        let y = batch_norm(&x, &g, &b, &mut stats, Mode::Eval).unwrap();
        let want = (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt() * 2.0 + 0.5;
        assert_abs_diff_eq!(y.data()[0], want, epsilon = 1e-12);
        assert_eq!(stats.mean, vec![1.0]);
    }

    #[test]
    fn dense_examples() {
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let x = Tensor::<f64>::from_f64(vec![3], &[0.3, -1.0, 2.0]).unwrap();
        let y = dense(
            &x,
            &Tensor::<f64>::from_f64(vec![3, 3], &eye).unwrap(),
            &Tensor::<f64>::zeros(vec![3]),
        )
        .unwrap();
        assert_eq!(y.data(), x.data());
        let y = dense(
            &Tensor::<f64>::from_f64(vec![2], &[2.0, 3.0]).unwrap(),
            &Tensor::<f64>::from_f64(vec![1, 2], &[1.0, 1.0]).unwrap(),
            &Tensor::<f64>::from_f64(vec![1], &[1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[6.0]);
        assert!(dense(&x, &Tensor::<f64>::zeros(vec![2, 2]), &Tensor::<f64>::zeros(vec![2])).is_err());
    }

    #[test]
    fn dense_matches_dot_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(vec![16], &mut rng);
        let w = random(vec![8, 16], &mut rng);
        let b = random(vec![8], &mut rng);
        let y = dense(&x, &w, &b).unwrap();
        for o in 0..8 {
            let mut s = b.at(&[o]);
            for i in 0..16 {
                s += w.at(&[o, i]) * x.at(&[i]);
            }
            assert!((y.at(&[o]) - s).abs() < 1e-6);
        }
    }
}
