//! Central finite-difference checks of tape gradients, in `f64`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{graph, SerialOrder};
use crate::error::{Error, Result};
use crate::tape::{Axis, GlobalPoolMode, Padding, Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so exact zeros compare as absolute.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares `∂L/∂inputs` from the tape with central differences, where
/// `L = Σ w ⊙ f(inputs)` for a fixed random `w`.
pub fn check(op: &str, inputs: &[Tensor<f64>], f: &Build<'_>, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).clone()
    };
    let weights = Tensor::new(
        probe.shape().to_vec(),
        (0..probe.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;

    let loss_of = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;

    let mut max_rel_error = 0.0f64;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var);
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let plus = loss_of(&xs)?;
            xs[i].data_mut()[j] = orig - FD_STEP;
            let minus = loss_of(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_rel_error = max_rel_error.max(relative_error(analytic.data()[j], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error,
        checked,
    })
}

/// Names accepted by [`check_named`].
pub const OPS: &[&str] = &[
    "conv2d",
    "conv2d_valid",
    "avg_pool2d",
    "global_avg_pool_axis",
    "global_pool",
    "relu",
    "sigmoid",
    "softmax",
    "batch_norm",
    "batch_norm_eval",
    "dense",
    "channel_squeeze",
    "axis_attention_weights",
    "rescale",
    "temporal_attention",
    "spectral_attention",
    "parallel_fuse",
    "serial_concat",
    "cross_entropy",
];

struct Gen(ChaCha8Rng);

impl Gen {
    fn uniform(&mut self, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.0.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Values bounded away from zero, so ReLU kinks stay outside the difference stencil.
    fn away_from_zero(&mut self, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = self.0.random_range(0.05..1.0);
                if self.0.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Shuffled values at least 0.01 apart, so max-pool ties stay outside the stencil.
    fn distinct(&mut self, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut data: Vec<f64> = (0..n).map(|i| 2.0 * i as f64 / n as f64 - 1.0).collect();
        data.shuffle(&mut self.0);
        Tensor::new(shape, data).unwrap()
    }

    fn dim(&mut self, lo: usize, hi: usize) -> usize {
        self.0.random_range(lo..=hi)
    }
}

/// Runs the finite-difference check for one named operation on random small inputs.
pub fn check_named(op: &str, seed: u64) -> Result<GradCheckReport> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let (t, f, c) = (g.dim(3, 6), g.dim(3, 6), g.dim(1, 4));
    let squeeze = |_: &mut Tape<f64>, w: Var, b: Var| graph::SqueezeVars { weight: w, bias: b };
    match op {
        "conv2d" => {
            let co = g.dim(1, 3);
            let inputs = [
                g.uniform(vec![2, t, f, c]),
                g.uniform(vec![3, 3, c, co]),
                g.uniform(vec![co]),
            ];
            check(op, &inputs, &|tp, v| tp.conv2d(v[0], v[1], v[2], Padding::Same), seed)
        }
        "conv2d_valid" => {
            let inputs = [
                g.uniform(vec![t, f, c]),
                g.uniform(vec![3, 1, c, 2]),
                g.uniform(vec![2]),
            ];
            check(op, &inputs, &|tp, v| tp.conv2d(v[0], v[1], v[2], Padding::Valid), seed)
        }
        "avg_pool2d" => check(op, &[g.uniform(vec![2, t, f, c])], &|tp, v| tp.avg_pool2d(v[0]), seed),
        "global_avg_pool_axis" => {
            let x = g.uniform(vec![2, t, f, 1]);
            let a = check(
                op,
                std::slice::from_ref(&x),
                &|tp, v| tp.global_avg_pool_axis(v[0], Axis::Time),
                seed,
            )?;
            let b = check(op, &[x], &|tp, v| tp.global_avg_pool_axis(v[0], Axis::Frequency), seed)?;
            Ok(worst(a, b))
        }
        "global_pool" => {
            let x = g.distinct(vec![2, t, f, c]);
            let a = check(
                op,
                std::slice::from_ref(&x),
                &|tp, v| tp.global_pool(v[0], GlobalPoolMode::Mean),
                seed,
            )?;
            let b = check(op, &[x], &|tp, v| tp.global_pool(v[0], GlobalPoolMode::Max), seed)?;
            Ok(worst(a, b))
        }
        "relu" => check(op, &[g.away_from_zero(vec![t, f, c])], &|tp, v| tp.relu(v[0]), seed),
        "sigmoid" => check(
            op,
            &[g.uniform(vec![t, f, c]).map(|x| 3.0 * x)],
            &|tp, v| tp.sigmoid(v[0]),
            seed,
        ),
        "softmax" => check(
            op,
            &[g.uniform(vec![f]).map(|x| 2.0 * x)],
            &|tp, v| tp.softmax(v[0]),
            seed,
        ),
        "batch_norm" => {
            let inputs = [g.uniform(vec![2, t, f, c]), g.uniform(vec![c]), g.uniform(vec![c])];
            check(
                op,
                &inputs,
                &|tp, v| Ok(tp.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
                seed,
            )
        }
        "batch_norm_eval" => {
            let inputs = [g.uniform(vec![2, t, f, c]), g.uniform(vec![c]), g.uniform(vec![c])];
            let mean = g.uniform(vec![c]).into_data();
            let var: Vec<f64> = g.uniform(vec![c]).data().iter().map(|x| x.abs() + 0.2).collect();
            check(
                op,
                &inputs,
                &|tp, v| tp.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5),
                seed,
            )
        }
        "dense" => {
            let (din, dout) = (g.dim(2, 6), g.dim(2, 6));
            let inputs = [
                g.uniform(vec![3, din]),
                g.uniform(vec![dout, din]),
                g.uniform(vec![dout]),
            ];
            check(op, &inputs, &|tp, v| tp.dense(v[0], v[1], v[2]), seed)
        }
        "channel_squeeze" => {
            let inputs = [
                g.uniform(vec![2, t, f, c]),
                g.uniform(vec![1, 1, c, 1]),
                g.uniform(vec![1]),
            ];
            check(
                op,
                &inputs,
                &|tp, v| {
                    let th = squeeze(tp, v[1], v[2]);
                    graph::channel_squeeze(tp, v[0], th)
                },
                seed,
            )
        }
        "axis_attention_weights" => {
            let x = g.uniform(vec![2, t, f, 1]).map(|x| 2.0 * x);
            let a = check(
                op,
                std::slice::from_ref(&x),
                &|tp, v| graph::axis_attention_weights(tp, v[0], Axis::Time),
                seed,
            )?;
            let b = check(
                op,
                &[x],
                &|tp, v| graph::axis_attention_weights(tp, v[0], Axis::Frequency),
                seed,
            )?;
            Ok(worst(a, b))
        }
        "rescale" => {
            let u = g.uniform(vec![2, t, f, c]);
            let a = check(
                op,
                &[u.clone(), g.uniform(vec![2, t])],
                &|tp, v| tp.rescale(v[0], v[1], Axis::Time),
                seed,
            )?;
            let b = check(
                op,
                &[u, g.uniform(vec![2, f])],
                &|tp, v| tp.rescale(v[0], v[1], Axis::Frequency),
                seed,
            )?;
            Ok(worst(a, b))
        }
        "temporal_attention" | "spectral_attention" => {
            let inputs = [
                g.uniform(vec![2, t, f, c]),
                g.uniform(vec![1, 1, c, 1]),
                g.uniform(vec![1]),
            ];
            let temporal = op == "temporal_attention";
            check(
                op,
                &inputs,
                &|tp, v| {
                    let th = squeeze(tp, v[1], v[2]);
                    if temporal {
                        graph::temporal_attention(tp, v[0], th)
                    } else {
                        graph::spectral_attention(tp, v[0], th)
                    }
                },
                seed,
            )
        }
        "parallel_fuse" => {
            let inputs = [
                g.uniform(vec![2, t, f, c]),
                g.uniform(vec![1, 1, c, 1]),
                g.uniform(vec![1]),
                g.uniform(vec![1, 1, c, 1]),
                g.uniform(vec![1]),
                g.uniform(vec![3]),
            ];
            check(
                op,
                &inputs,
                &|tp, v| {
                    let (tt, tf) = (squeeze(tp, v[1], v[2]), squeeze(tp, v[3], v[4]));
                    let coeffs = graph::normalize_coefficients(tp, v[5])?;
                    graph::parallel_attention(tp, v[0], tt, tf, coeffs)
                },
                seed,
            )
        }
        "serial_concat" => {
            let inputs = [
                g.uniform(vec![2, t, f, c]),
                g.uniform(vec![1, 1, c, 1]),
                g.uniform(vec![1]),
                g.uniform(vec![1, 1, c, 1]),
                g.uniform(vec![1]),
            ];
            let mut reports = Vec::new();
            for order in [SerialOrder::TemporalSpectral, SerialOrder::SpectralTemporal] {
                reports.push(check(
                    op,
                    &inputs,
                    &|tp, v| {
                        let (tt, tf) = (squeeze(tp, v[1], v[2]), squeeze(tp, v[3], v[4]));
                        graph::serial_concat(tp, v[0], tt, tf, order)
                    },
                    seed,
                )?);
            }
            let b = reports.pop().unwrap();
            Ok(worst(reports.pop().unwrap(), b))
        }
        "cross_entropy" => {
            let (n, k) = (3, g.dim(2, 6));
            let mut targets = g.uniform(vec![n, k]).map(|x| x.abs() + 0.05);
            for row in targets.data_mut().chunks_mut(k) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            let logits = g.uniform(vec![n, k]).map(|x| 3.0 * x);
            check(op, &[logits], &|tp, v| tp.cross_entropy(v[0], &targets), seed)
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown gradcheck op {other:?}; valid ops: {}",
            OPS.join(", ")
        ))),
    }
}

fn worst(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    GradCheckReport {
        op: a.op,
        max_rel_error: a.max_rel_error.max(b.max_rel_error),
        checked: a.checked + b.checked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_symmetric_and_floored() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 1.1) - relative_error(1.1, 1.0)).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn unknown_op_lists_valid_names() {
        let err = check_named("nope", 0).unwrap_err().to_string();
        assert!(err.contains("parallel_fuse"));
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // The frozen copy hides half of d(x²)/dx from the tape.
        let x = Tensor::<f64>::from_f64(vec![3], &[0.5, -0.3, 0.9]).unwrap();
        let r = check(
            "broken",
            &[x],
            &|tp, v| {
                let frozen = tp.constant(tp.value(v[0]).clone());
                tp.mul(v[0], frozen)
            },
            1,
        )
        .unwrap();
        assert!(!r.passed(), "{r:?}");
    }
}
