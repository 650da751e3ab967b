//! The CNN10 backbone and its attention variants.
//!
//! Each of the four blocks is two `3×3 conv → batch norm → ReLU` layers,
//! optional attention, then `2×2` average pooling. The blocks feed a global
//! pool and two dense layers. Attention, where configured, sees the block's
//! finest-resolution activation just before pooling.

mod checkpoint;
mod config;

pub use checkpoint::{load_model, save_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{AttentionVariant, ModelConfig, PRESETS, SMALL_CHANNELS, SMALL_FC_HIDDEN, SMALL_SUFFIX};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::graph::{self as attn, SqueezeVars};
use crate::attention::{BranchCoefficients, SerialOrder, FIXED_COEFFICIENT};
use crate::error::{Error, Result};
use crate::ops::{Mode, RunningStats, BN_EPSILON};
use crate::scalar::Scalar;
use crate::tape::{BatchStats, GlobalPoolMode, Padding, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvSlots {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct AttentionSlots {
    theta_t: (usize, usize),
    theta_f: (usize, usize),
    logits: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct BlockSlots {
    convs: Vec<ConvSlots>,
    attention: Option<AttentionSlots>,
}

/// One entry of the model's layer list, in execution order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        block: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    },
    BatchNorm {
        block: usize,
        channels: usize,
    },
    Relu {
        block: usize,
    },
    Attention {
        block: usize,
        variant: AttentionVariant,
        channels: usize,
    },
    AvgPool {
        block: usize,
    },
    GlobalPool(GlobalPoolMode),
    Dense {
        d_in: usize,
        d_out: usize,
    },
}

/// Everything a forward pass recorded on the tape.
#[derive(Clone, Debug)]
pub struct Trace<S> {
    pub logits: Var,
    /// One var per parameter tensor, in [`Model::parameters`] order.
    pub params: Vec<Var>,
    /// Pooled output of each block.
    pub block_outputs: Vec<Var>,
    /// Per block, the activation entering attention (if the block has any).
    pub attention_inputs: Vec<Option<Var>>,
    /// Batch statistics of every batch-norm layer; empty in eval mode.
    pub batch_stats: Vec<BatchStats<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    params: Vec<Tensor<S>>,
    names: Vec<String>,
    running: Vec<RunningStats<S>>,
    blocks: Vec<BlockSlots>,
    fc: [usize; 4],
}

impl<S: Scalar> Model<S> {
    /// Builds a model with He-uniform conv and dense weights drawn from `seed`,
    /// zero biases, zero attention squeezes and equal fusion logits.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model {
            params: Vec::new(),
            names: Vec::new(),
            running: Vec::new(),
            blocks: Vec::new(),
            fc: [0; 4],
            config,
        };
        let k = m.config.kernel;
        let mut c_in = 1;
        for (bi, &c) in m.config.block_channels.clone().iter().enumerate() {
            let block = bi + 1;
            let mut convs = Vec::new();
            for li in 0..m.config.convs_per_block {
                let p = format!("block{block}.conv{}", li + 1);
                convs.push(ConvSlots {
                    weight: m.push(
                        format!("{p}.weight"),
                        he_uniform(&mut rng, vec![k, k, c_in, c], k * k * c_in),
                    ),
                    bias: m.push(format!("{p}.bias"), Tensor::zeros(vec![c])),
                    gamma: m.push(format!("{p}.bn.gamma"), Tensor::full(vec![c], S::one())),
                    beta: m.push(format!("{p}.bn.beta"), Tensor::zeros(vec![c])),
                });
                m.running.push(RunningStats::new(c));
                c_in = c;
            }
            let attention = m.config.has_attention(block).then(|| {
                let p = format!("block{block}.attention");
                let variant = m.config.attention_variant;
                // Zero squeezes start every gate at exactly 0.5 and draw no random
                // numbers, so a preset shares its backbone init with plain CNN10.
                let squeeze = |m: &mut Self, name: &str| {
                    let w = m.push(format!("{p}.{name}.weight"), Tensor::zeros(vec![1, 1, c, 1]));
                    let b = m.push(format!("{p}.{name}.bias"), Tensor::zeros(vec![1]));
                    (w, b)
                };
                let theta_t = squeeze(&mut m, "theta_t");
                let theta_f = squeeze(&mut m, "theta_f");
                let logits = variant
                    .has_logits()
                    .then(|| m.push(format!("{p}.logits"), Tensor::zeros(vec![3])));
                AttentionSlots {
                    theta_t,
                    theta_f,
                    logits,
                }
            });
            m.blocks.push(BlockSlots { convs, attention });
        }
        let (h, n) = (m.config.fc_hidden, m.config.n_classes);
        m.fc = [
            m.push("fc1.weight".into(), he_uniform(&mut rng, vec![h, c_in], c_in)),
            m.push("fc1.bias".into(), Tensor::zeros(vec![h])),
            m.push("fc2.weight".into(), he_uniform(&mut rng, vec![n, h], h)),
            m.push("fc2.bias".into(), Tensor::zeros(vec![n])),
        ];
        Ok(m)
    }

    pub fn from_preset(name: &str, n_classes: usize, input_bands: usize, seed: u64) -> Result<Self> {
        let mut cfg = ModelConfig::preset(name, n_classes)?;
        cfg.input_bands = input_bands;
        Self::new(cfg, seed)
    }

    fn push(&mut self, name: String, t: Tensor<S>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    /// Index into [`Self::parameters`] of the parameter called `name`.
    pub fn parameter_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn running_stats(&self) -> &[RunningStats<S>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<S>] {
        &mut self.running
    }

    /// Total number of scalar parameters (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn layers(&self) -> Vec<Layer> {
        let cfg = &self.config;
        let mut out = Vec::new();
        let mut c_in = 1;
        for (bi, &c) in cfg.block_channels.iter().enumerate() {
            let block = bi + 1;
            for _ in 0..cfg.convs_per_block {
                out.push(Layer::Conv {
                    block,
                    c_in,
                    c_out: c,
                    kernel: cfg.kernel,
                });
                out.push(Layer::BatchNorm { block, channels: c });
                out.push(Layer::Relu { block });
                c_in = c;
            }
            if cfg.has_attention(block) {
                out.push(Layer::Attention {
                    block,
                    variant: cfg.attention_variant,
                    channels: c,
                });
            }
            out.push(Layer::AvgPool { block });
        }
        out.push(Layer::GlobalPool(cfg.global_pool));
        out.push(Layer::Dense {
            d_in: c_in,
            d_out: cfg.fc_hidden,
        });
        out.push(Layer::Relu { block: 0 });
        out.push(Layer::Dense {
            d_in: cfg.fc_hidden,
            d_out: cfg.n_classes,
        });
        out
    }

    /// Normalized `(α, β, γ)` per block carrying parallel attention.
    pub fn attention_coefficients(&self) -> Vec<(usize, [S; 3])> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(bi, b)| {
                let a = b.attention?;
                let coeffs = match (self.config.attention_variant, a.logits) {
                    (AttentionVariant::ParallelLearned, Some(l)) => {
                        let d = self.params[l].data();
                        BranchCoefficients::Learned {
                            logits: [d[0], d[1], d[2]],
                        }
                    }
                    (AttentionVariant::ParallelFixed, _) => BranchCoefficients::Fixed,
                    _ => return None,
                };
                Some((bi + 1, coeffs.normalized()))
            })
            .collect()
    }

    /// Records a forward pass over an `N×T×F×1` batch (or one `T×F×1` feature).
    ///
    /// Parameters enter the tape as differentiable leaves when `trainable`.
    /// Train mode normalizes with batch statistics and reports them in the
    /// trace; it does not touch the running statistics.
    pub fn forward_graph(&self, tape: &mut Tape<S>, input: Var, mode: Mode, trainable: bool) -> Result<Trace<S>> {
        self.check_input(tape.value(input).shape())?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let eps = S::of(BN_EPSILON);
        let mut x = input;
        let mut block_outputs = Vec::new();
        let mut attention_inputs = Vec::new();
        let mut batch_stats = Vec::new();
        let mut bn = 0;
        for block in &self.blocks {
            for c in &block.convs {
                x = tape.conv2d(x, params[c.weight], params[c.bias], Padding::Same)?;
                x = match mode {
                    Mode::Train => {
                        let (y, stats) = tape.batch_norm_train(x, params[c.gamma], params[c.beta], eps)?;
                        batch_stats.push(stats);
                        y
                    }
                    Mode::Eval => {
                        let r = &self.running[bn];
                        tape.batch_norm_eval(x, params[c.gamma], params[c.beta], &r.mean, &r.var, eps)?
                    }
                };
                bn += 1;
                x = tape.relu(x)?;
            }
            attention_inputs.push(block.attention.map(|_| x));
            if let Some(a) = block.attention {
                x = self.attend(tape, x, a, &params)?;
            }
            x = tape.avg_pool2d(x)?;
            block_outputs.push(x);
        }
        x = tape.global_pool(x, self.config.global_pool)?;
        x = tape.dense(x, params[self.fc[0]], params[self.fc[1]])?;
        x = tape.relu(x)?;
        let logits = tape.dense(x, params[self.fc[2]], params[self.fc[3]])?;
        Ok(Trace {
            logits,
            params,
            block_outputs,
            attention_inputs,
            batch_stats,
        })
    }

    fn attend(&self, tape: &mut Tape<S>, u: Var, a: AttentionSlots, params: &[Var]) -> Result<Var> {
        let squeeze = |(w, b): (usize, usize)| SqueezeVars {
            weight: params[w],
            bias: params[b],
        };
        let (tt, tf) = (squeeze(a.theta_t), squeeze(a.theta_f));
        match self.config.attention_variant {
            AttentionVariant::None => Ok(u),
            AttentionVariant::Temporal => attn::temporal_attention(tape, u, tt),
            AttentionVariant::Spectral => attn::spectral_attention(tape, u, tf),
            AttentionVariant::ParallelLearned => {
                let logits = a.logits.expect("learned variant has logits");
                let coeffs = attn::normalize_coefficients(tape, params[logits])?;
                attn::parallel_attention(tape, u, tt, tf, coeffs)
            }
            AttentionVariant::ParallelFixed => {
                let coeffs = tape.constant(Tensor::full(vec![3], S::of(FIXED_COEFFICIENT)));
                attn::parallel_attention(tape, u, tt, tf, coeffs)
            }
            AttentionVariant::ConcatTS => attn::serial_concat(tape, u, tt, tf, SerialOrder::TemporalSpectral),
            AttentionVariant::ConcatST => attn::serial_concat(tape, u, tt, tf, SerialOrder::SpectralTemporal),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (t, f, c) = match *shape {
            [_, t, f, c] | [t, f, c] => (t, f, c),
            _ => {
                return Err(Error::shape(
                    "forward",
                    format!("expected T×F×1 or N×T×F×1 input, got {shape:?}"),
                ))
            }
        };
        if c != 1 || f != self.config.input_bands {
            return Err(Error::shape(
                "forward",
                format!(
                    "model expects {} mel bands and 1 channel, got {shape:?}",
                    self.config.input_bands
                ),
            ));
        }
        let min = 1 << self.blocks.len();
        if t < min || f < min {
            return Err(Error::shape(
                "forward",
                format!("{t}×{f} input is too small for {} poolings", self.blocks.len()),
            ));
        }
        Ok(())
    }

    /// Eval-mode logits: `N×K` for a batch, `K` for a single feature.
    pub fn forward_eval(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let trace = self.forward_graph(&mut tape, x, Mode::Eval, false)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Eval-mode pooled output of `block` (1-based) for a single `T×F×1` feature.
    pub fn block_output(&self, input: &Tensor<S>, block: usize) -> Result<Tensor<S>> {
        if block == 0 || block > self.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "block must lie in 1..={}, got {block}",
                self.blocks.len()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let trace = self.forward_graph(&mut tape, x, Mode::Eval, false)?;
        Ok(tape.value(trace.block_outputs[block - 1]).clone())
    }

    /// Class id and probabilities for one `T×F×1` feature.
    pub fn predict(&self, feature: &Tensor<S>) -> Result<(usize, Vec<S>)> {
        Ok(predict_logits(self.forward_eval(feature)?.data()))
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.iter().map(|&v| T::of(v.as_f64())).collect(),
                    var: r.var.iter().map(|&v| T::of(v.as_f64())).collect(),
                })
                .collect(),
            blocks: self.blocks.clone(),
            fc: self.fc,
        }
    }
}

/// Argmax of the softmax, ties going to the lowest class id.
pub fn predict_logits<S: Scalar>(logits: &[S]) -> (usize, Vec<S>) {
    let probs = crate::tape::softmax(logits).expect("at least two classes");
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    (best, probs)
}

fn he_uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("positive dims")
}
