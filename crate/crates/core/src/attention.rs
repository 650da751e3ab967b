//! Temporal and spectral attention, and the ways of combining them.
//!
//! A 1×1 convolution squeezes a `T×F×C` map to one channel. Averaging that
//! map over frequency and passing it through a sigmoid gives one gate per
//! time frame; averaging over time gives one gate per frequency band. The
//! gated maps are combined either in parallel, as a softmax-weighted sum with
//! the ungated map, or serially, one attention feeding the other.
//!
//! [`graph`] records these operations on a [`Tape`]; the top-level functions
//! are tape-free conveniences over the same code.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Axis, Padding, Tape, Var};
use crate::tensor::Tensor;

/// Coefficient used by the fixed-fusion variant for each of the three branches.
pub const FIXED_COEFFICIENT: f64 = 0.33;

/// Parameters of a 1×1 convolution squeezing `C` channels to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SqueezeParams<S> {
    /// `1×1×C×1`
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> SqueezeParams<S> {
    pub fn new(weights: Vec<S>, bias: S) -> Self {
        let c = weights.len();
        Self {
            weight: Tensor::new(vec![1, 1, c, 1], weights).expect("non-empty squeeze weights"),
            bias: Tensor::scalar(bias),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        Self::new(vec![S::zero(); channels], S::zero())
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Squeeze parameters for the temporal (`theta_t`) and spectral (`theta_f`) branches.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<S> {
    pub theta_t: SqueezeParams<S>,
    pub theta_f: SqueezeParams<S>,
}

impl<S: Scalar> AttentionParams<S> {
    pub fn zeros(channels: usize) -> Self {
        Self {
            theta_t: SqueezeParams::zeros(channels),
            theta_f: SqueezeParams::zeros(channels),
        }
    }
}

/// Sigmoid gates along one axis: per frame for `Time`, per band for `Frequency`.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisActivations<S> {
    pub axis: Axis,
    pub values: Vec<S>,
}

/// Fusion weights `(α, β, γ)` for the temporal, spectral and shortcut branches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BranchCoefficients<S> {
    /// Learnable logits, normalized by softmax on every use.
    Learned { logits: [S; 3] },
    /// The constant `(0.33, 0.33, 0.33)`.
    Fixed,
}

impl<S: Scalar> BranchCoefficients<S> {
    /// Equal logits, hence equal initial weights of 1/3.
    pub fn learned() -> Self {
        Self::Learned { logits: [S::zero(); 3] }
    }

    pub fn normalized(&self) -> [S; 3] {
        match self {
            Self::Learned { logits } => normalize_coefficients(*logits),
            Self::Fixed => [S::of(FIXED_COEFFICIENT); 3],
        }
    }
}

/// Softmax over exactly three logits.
pub fn normalize_coefficients<S: Scalar>(logits: [S; 3]) -> [S; 3] {
    let p = crate::tape::softmax(&logits).expect("three logits");
    [p[0], p[1], p[2]]
}

/// Order of the two attentions in the serial baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SerialOrder {
    /// Temporal first, spectral on its output.
    TemporalSpectral,
    /// Spectral first, temporal on its output.
    SpectralTemporal,
}

/// Tape-recording versions of the attention operations.
pub mod graph {
    use super::*;

    #[derive(Clone, Copy, Debug)]
    pub struct SqueezeVars {
        pub weight: Var,
        pub bias: Var,
    }

    impl SqueezeVars {
        pub fn record<S: Scalar>(tape: &mut Tape<S>, p: &SqueezeParams<S>, trainable: bool) -> Self {
            let put = |tape: &mut Tape<S>, t: &Tensor<S>| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            };
            Self {
                weight: put(tape, &p.weight),
                bias: put(tape, &p.bias),
            }
        }
    }

    /// `V = conv1x1(U; θ)`, a single-channel global feature map.
    pub fn channel_squeeze<S: Scalar>(tape: &mut Tape<S>, u: Var, theta: SqueezeVars) -> Result<Var> {
        let w = tape.value(theta.weight);
        if w.rank() != 4 || w.shape()[..2] != [1, 1] || w.shape()[3] != 1 {
            return Err(Error::shape(
                "channel_squeeze",
                format!("squeeze kernel must be 1×1×C×1, got {:?}", w.shape()),
            ));
        }
        tape.conv2d(u, theta.weight, theta.bias, Padding::Same)
    }

    /// Gates along `axis`: average `V` over the other axis, then sigmoid.
    pub fn axis_attention_weights<S: Scalar>(tape: &mut Tape<S>, v: Var, axis: Axis) -> Result<Var> {
        let pooled = tape.global_avg_pool_axis(v, axis.other())?;
        tape.sigmoid(pooled)
    }

    pub fn axis_attention<S: Scalar>(tape: &mut Tape<S>, u: Var, theta: SqueezeVars, axis: Axis) -> Result<Var> {
        let v = channel_squeeze(tape, u, theta)?;
        let gates = axis_attention_weights(tape, v, axis)?;
        tape.rescale(u, gates, axis)
    }

    pub fn temporal_attention<S: Scalar>(tape: &mut Tape<S>, u: Var, theta_t: SqueezeVars) -> Result<Var> {
        axis_attention(tape, u, theta_t, Axis::Time)
    }

    pub fn spectral_attention<S: Scalar>(tape: &mut Tape<S>, u: Var, theta_f: SqueezeVars) -> Result<Var> {
        axis_attention(tape, u, theta_f, Axis::Frequency)
    }

    pub fn normalize_coefficients<S: Scalar>(tape: &mut Tape<S>, logits: Var) -> Result<Var> {
        if tape.value(logits).shape() != [3] {
            return Err(Error::shape("normalize_coefficients", "expected exactly 3 logits"));
        }
        tape.softmax(logits)
    }

    /// `U' = α·U_T + β·U_F + γ·U` for already-normalized `coeffs`.
    pub fn parallel_fuse<S: Scalar>(tape: &mut Tape<S>, u_t: Var, u_f: Var, u: Var, coeffs: Var) -> Result<Var> {
        tape.weighted_sum([u_t, u_f, u], coeffs)
    }

    /// Full parallel block: both attentions from `u`, fused with `coeffs`.
    pub fn parallel_attention<S: Scalar>(
        tape: &mut Tape<S>,
        u: Var,
        theta_t: SqueezeVars,
        theta_f: SqueezeVars,
        coeffs: Var,
    ) -> Result<Var> {
        let u_t = temporal_attention(tape, u, theta_t)?;
        let u_f = spectral_attention(tape, u, theta_f)?;
        parallel_fuse(tape, u_t, u_f, u, coeffs)
    }

    pub fn serial_concat<S: Scalar>(
        tape: &mut Tape<S>,
        u: Var,
        theta_t: SqueezeVars,
        theta_f: SqueezeVars,
        order: SerialOrder,
    ) -> Result<Var> {
        match order {
            SerialOrder::TemporalSpectral => {
                let mid = temporal_attention(tape, u, theta_t)?;
                spectral_attention(tape, mid, theta_f)
            }
            SerialOrder::SpectralTemporal => {
                let mid = spectral_attention(tape, u, theta_f)?;
                temporal_attention(tape, mid, theta_t)
            }
        }
    }
}

fn run<S: Scalar>(f: impl FnOnce(&mut Tape<S>) -> Result<Var>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let out = f(&mut tape)?;
    Ok(tape.value(out).clone())
}

pub fn channel_squeeze<S: Scalar>(u: &Tensor<S>, theta: &SqueezeParams<S>) -> Result<Tensor<S>> {
    run(|tape| {
        let uv = tape.constant(u.clone());
        let th = graph::SqueezeVars::record(tape, theta, false);
        graph::channel_squeeze(tape, uv, th)
    })
}

pub fn axis_attention_weights<S: Scalar>(v: &Tensor<S>, axis: Axis) -> Result<AxisActivations<S>> {
    let values = run(|tape| {
        let vv = tape.constant(v.clone());
        graph::axis_attention_weights(tape, vv, axis)
    })?;
    Ok(AxisActivations {
        axis,
        values: values.into_data(),
    })
}

/// Broadcast-multiplies `u` by the gates (`f_scale`).
pub fn rescale<S: Scalar>(u: &Tensor<S>, a: &AxisActivations<S>) -> Result<Tensor<S>> {
    run(|tape| {
        let uv = tape.constant(u.clone());
        let gv = tape.constant(Tensor::vector(a.values.clone()));
        tape.rescale(uv, gv, a.axis)
    })
}

pub fn temporal_attention<S: Scalar>(u: &Tensor<S>, params: &AttentionParams<S>) -> Result<Tensor<S>> {
    run(|tape| {
        let uv = tape.constant(u.clone());
        let th = graph::SqueezeVars::record(tape, &params.theta_t, false);
        graph::temporal_attention(tape, uv, th)
    })
}

pub fn spectral_attention<S: Scalar>(u: &Tensor<S>, params: &AttentionParams<S>) -> Result<Tensor<S>> {
    run(|tape| {
        let uv = tape.constant(u.clone());
        let th = graph::SqueezeVars::record(tape, &params.theta_f, false);
        graph::spectral_attention(tape, uv, th)
    })
}

/// Weighted sum of the three branches with the given (already normalized) triple.
pub fn parallel_fuse<S: Scalar>(
    u_t: &Tensor<S>,
    u_f: &Tensor<S>,
    u: &Tensor<S>,
    normalized: [S; 3],
) -> Result<Tensor<S>> {
    run(|tape| {
        let a = tape.constant(u_t.clone());
        let b = tape.constant(u_f.clone());
        let c = tape.constant(u.clone());
        let k = tape.constant(Tensor::vector(normalized.to_vec()));
        graph::parallel_fuse(tape, a, b, c, k)
    })
}

pub fn parallel_attention<S: Scalar>(
    u: &Tensor<S>,
    params: &AttentionParams<S>,
    coeffs: &BranchCoefficients<S>,
) -> Result<Tensor<S>> {
    let u_t = temporal_attention(u, params)?;
    let u_f = spectral_attention(u, params)?;
    parallel_fuse(&u_t, &u_f, u, coeffs.normalized())
}

pub fn serial_concat<S: Scalar>(u: &Tensor<S>, params: &AttentionParams<S>, order: SerialOrder) -> Result<Tensor<S>> {
    run(|tape| {
        let uv = tape.constant(u.clone());
        let tt = graph::SqueezeVars::record(tape, &params.theta_t, false);
        let tf = graph::SqueezeVars::record(tape, &params.theta_f, false);
        graph::serial_concat(tape, uv, tt, tf, order)
    })
}
