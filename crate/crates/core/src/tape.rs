//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Inputs always precede their consumers, so
//! [`Tape::backward`] walks the node list once from the loss down to zero.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::{spatial_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k/2` on each side; spatial dims are preserved.
    Same,
    Valid,
}

/// A spatial axis of a `T×F×C` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Time,
    Frequency,
}

impl Axis {
    pub fn other(self) -> Axis {
        match self {
            Axis::Time => Axis::Frequency,
            Axis::Frequency => Axis::Time,
        }
    }
}

/// Reduction used to collapse all spatial positions of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalPoolMode {
    Mean,
    Max,
}

/// Per-channel statistics of one training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    AvgPool2 {
        input: Var,
        dims: [usize; 4],
    },
    ReduceAxis {
        input: Var,
        reduce: Axis,
        dims: [usize; 4],
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        /// Train mode normalizes with batch statistics, which feed back into the gradient.
        train: bool,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
        n: usize,
        d_in: usize,
        d_out: usize,
    },
    Rescale {
        input: Var,
        gate: Var,
        axis: Axis,
        dims: [usize; 4],
    },
    WeightedSum {
        branches: [Var; 3],
        coeffs: Var,
    },
    GlobalPool {
        input: Var,
        dims: [usize; 4],
        argmax: Option<Vec<usize>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<S>,
        probs: Vec<S>,
        n: usize,
        k: usize,
    },
    Sum {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: S,
    },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor<S> {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape matches node"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false)
    }

    /// A differentiable leaf (model parameter or checked input).
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// 2-D convolution, stride 1. `kernel` is `kh×kw×C_in×C_out`, `bias` has length `C_out`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let x = self.value(input);
        let batched = x.rank() == 4;
        let [n, t, f, c_in] = x.dims4("conv2d")?;
        let k = self.value(kernel);
        let &[kh, kw, kc, c_out] = k.shape() else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be rank 4, got {:?}", k.shape()),
            ));
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but kernel expects {kc}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel spatial dims must be odd, got {kh}×{kw}"),
            ));
        }
        let b = self.value(bias);
        if b.shape() != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{c_out}]", b.shape()),
            ));
        }
        let (pad_t, pad_f) = match padding {
            Padding::Same => (kh / 2, kw / 2),
            Padding::Valid => {
                if kh > t || kw > f {
                    return Err(Error::shape("conv2d", "valid kernel larger than input"));
                }
                (0, 0)
            }
        };
        let geom = ConvGeometry {
            n,
            t,
            f,
            c_in,
            kh,
            kw,
            c_out,
            pad_t,
            pad_f,
        };
        let out = kernels::conv2d_forward(&geom, x.data(), k.data(), b.data());
        let value = Tensor::new(spatial_shape(batched, n, geom.out_t(), geom.out_f(), c_out), out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        )
    }

    /// 2×2 average pooling; an odd trailing row or column is dropped.
    pub fn avg_pool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let batched = x.rank() == 4;
        let dims = x.dims4("avg_pool2d")?;
        let [n, t, f, c] = dims;
        if t < 2 || f < 2 {
            return Err(Error::shape(
                "avg_pool2d",
                format!("spatial dims {t}×{f} are below 2×2"),
            ));
        }
        let out = kernels::avg_pool2_forward(dims, x.data());
        let value = Tensor::new(spatial_shape(batched, n, t / 2, f / 2, c), out)?;
        self.push("avg_pool2d", value, Op::AvgPool2 { input, dims }, &[input])
    }

    /// Averages a single-channel map over `reduce`: reducing frequency leaves a
    /// length-T vector, reducing time leaves a length-F vector.
    pub fn global_avg_pool_axis(&mut self, input: Var, reduce: Axis) -> Result<Var> {
        let x = self.value(input);
        let batched = x.rank() == 4;
        let dims = x.dims4("global_avg_pool_axis")?;
        let [n, t, f, c] = dims;
        if c != 1 {
            return Err(Error::shape(
                "global_avg_pool_axis",
                format!("expected 1 channel, got {c}"),
            ));
        }
        let xs = x.data();
        let (out, keep) = match reduce {
            Axis::Frequency => {
                let inv = S::one() / S::of_usize(f);
                let out = (0..n * t)
                    .map(|r| xs[r * f..(r + 1) * f].iter().copied().sum::<S>() * inv)
                    .collect::<Vec<_>>();
                (out, t)
            }
            Axis::Time => {
                let inv = S::one() / S::of_usize(t);
                let mut out = vec![S::zero(); n * f];
                for b in 0..n {
                    for ti in 0..t {
                        for fj in 0..f {
                            out[b * f + fj] += xs[(b * t + ti) * f + fj];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v *= inv);
                (out, f)
            }
        };
        let shape = if batched { vec![n, keep] } else { vec![keep] };
        let value = Tensor::new(shape, out)?;
        self.push(
            "global_avg_pool_axis",
            value,
            Op::ReduceAxis { input, reduce, dims },
            &[input],
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|x| x.max(S::zero()));
        self.push("relu", value, Op::Relu { input }, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid { input }, &[input])
    }

    /// Softmax over a non-empty rank-1 tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 1 {
            return Err(Error::shape(
                "softmax",
                format!("expected a vector, got {:?}", x.shape()),
            ));
        }
        let value = Tensor::vector(softmax(x.data())?);
        self.push("softmax", value, Op::Softmax { input }, &[input])
    }

    /// Training-mode batch normalization over every axis but the last (channel) one.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: S) -> Result<(Var, BatchStats<S>)> {
        let (c, m) = self.bn_dims(input, gamma, beta)?;
        let xs = self.value(input).data();
        let inv_m = S::one() / S::of_usize(m);
        let mut mean = vec![S::zero(); c];
        for row in xs.chunks(c) {
            for (a, &x) in mean.iter_mut().zip(row) {
                *a += x;
            }
        }
        mean.iter_mut().for_each(|v| *v *= inv_m);
        let mut var = vec![S::zero(); c];
        for row in xs.chunks(c) {
            for ((a, &x), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *a += (x - mu) * (x - mu);
            }
        }
        var.iter_mut().for_each(|v| *v *= inv_m);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(input, gamma, beta, &mean, &inv_std)?;
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train: true,
        };
        let out = self.push("batch_norm", value, op, &[input, gamma, beta])?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, mean: &[S], var: &[S], eps: S) -> Result<Var> {
        let (c, _) = self.bn_dims(input, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                "running statistics length differs from channel count",
            ));
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(input, gamma, beta, mean, &inv_std)?;
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train: false,
        };
        self.push("batch_norm", value, op, &[input, gamma, beta])
    }

    fn bn_dims(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(Error::shape(
                "batch_norm",
                "input needs a channel axis and at least one other axis",
            ));
        }
        let c = *x.shape().last().unwrap();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("batch_norm", format!("gamma/beta must have length {c}")));
        }
        Ok((c, x.len() / c))
    }

    fn bn_apply(&self, input: Var, gamma: Var, beta: Var, mean: &[S], inv_std: &[S]) -> Result<(Tensor<S>, Vec<S>)> {
        let x = self.value(input);
        let c = mean.len();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(h * g[ch] + b[ch]);
            }
        }
        Ok((Tensor::new(x.shape().to_vec(), out)?, xhat))
    }

    /// `y = W x + b` for a vector or an `N×D` batch; `W` is `D_out×D_in`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let batched = x.rank() == 2;
        let (n, d_in) = match *x.shape() {
            [d] => (1, d),
            [n, d] => (n, d),
            _ => {
                return Err(Error::shape(
                    "dense",
                    format!("expected rank 1 or 2 input, got {:?}", x.shape()),
                ))
            }
        };
        let w = self.value(weight);
        let &[d_out, wd] = w.shape() else {
            return Err(Error::shape(
                "dense",
                format!("weight must be a matrix, got {:?}", w.shape()),
            ));
        };
        if wd != d_in {
            return Err(Error::shape("dense", format!("weight expects {wd} inputs, got {d_in}")));
        }
        let b = self.value(bias);
        if b.shape() != [d_out] {
            return Err(Error::shape(
                "dense",
                format!("bias shape {:?}, expected [{d_out}]", b.shape()),
            ));
        }
        let (xs, ws, bs) = (x.data(), w.data(), b.data());
        let mut out = Vec::with_capacity(n * d_out);
        for r in 0..n {
            let xr = &xs[r * d_in..][..d_in];
            for o in 0..d_out {
                let wr = &ws[o * d_in..][..d_in];
                let mut s = bs[o];
                for (&a, &bb) in wr.iter().zip(xr) {
                    s += a * bb;
                }
                out.push(s);
            }
        }
        let shape = if batched { vec![n, d_out] } else { vec![d_out] };
        let value = Tensor::new(shape, out)?;
        self.push(
            "dense",
            value,
            Op::Dense {
                input,
                weight,
                bias,
                n,
                d_in,
                d_out,
            },
            &[input, weight, bias],
        )
    }

    /// Multiplies every `T×F×C` cell by the gate of its frame (`Axis::Time`,
    /// gate length T) or band (`Axis::Frequency`, gate length F).
    pub fn rescale(&mut self, input: Var, gate: Var, axis: Axis) -> Result<Var> {
        let x = self.value(input);
        let batched = x.rank() == 4;
        let dims = x.dims4("rescale")?;
        let [n, t, f, c] = dims;
        let want = match axis {
            Axis::Time => t,
            Axis::Frequency => f,
        };
        let g = self.value(gate);
        let expected = if batched { vec![n, want] } else { vec![want] };
        if g.shape() != expected.as_slice() {
            return Err(Error::shape(
                "rescale",
                format!(
                    "gate shape {:?} does not match {axis:?} axis, expected {expected:?}",
                    g.shape()
                ),
            ));
        }
        let (xs, gs) = (x.data(), g.data());
        let mut out = Vec::with_capacity(xs.len());
        for b in 0..n {
            for ti in 0..t {
                for fj in 0..f {
                    let gv = match axis {
                        Axis::Time => gs[b * t + ti],
                        Axis::Frequency => gs[b * f + fj],
                    };
                    let base = ((b * t + ti) * f + fj) * c;
                    out.extend(xs[base..base + c].iter().map(|&v| v * gv));
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(
            "rescale",
            value,
            Op::Rescale {
                input,
                gate,
                axis,
                dims,
            },
            &[input, gate],
        )
    }

    /// `c0·b0 + c1·b1 + c2·b2`, accumulated left to right, for a length-3 `coeffs`.
    pub fn weighted_sum(&mut self, branches: [Var; 3], coeffs: Var) -> Result<Var> {
        let shape = self.value(branches[0]).shape().to_vec();
        if branches.iter().any(|&b| self.value(b).shape() != shape.as_slice()) {
            return Err(Error::shape("weighted_sum", "branches differ in shape"));
        }
        let cs = self.value(coeffs);
        if cs.shape() != [3] {
            return Err(Error::shape(
                "weighted_sum",
                format!("expected 3 coefficients, got {:?}", cs.shape()),
            ));
        }
        let cs = cs.data();
        let (b0, b1, b2) = (
            self.value(branches[0]).data(),
            self.value(branches[1]).data(),
            self.value(branches[2]).data(),
        );
        let out = (0..b0.len())
            .map(|i| cs[0] * b0[i] + cs[1] * b1[i] + cs[2] * b2[i])
            .collect();
        let value = Tensor::new(shape, out)?;
        let inputs = [branches[0], branches[1], branches[2], coeffs];
        self.push("weighted_sum", value, Op::WeightedSum { branches, coeffs }, &inputs)
    }

    /// Collapses all spatial positions per channel: `T×F×C → C`, `N×T×F×C → N×C`.
    pub fn global_pool(&mut self, input: Var, mode: GlobalPoolMode) -> Result<Var> {
        let x = self.value(input);
        let batched = x.rank() == 4;
        let dims = x.dims4("global_pool")?;
        let [n, t, f, c] = dims;
        let xs = x.data();
        let area = t * f;
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::new();
        for b in 0..n {
            let item = &xs[b * area * c..][..area * c];
            for ch in 0..c {
                match mode {
                    GlobalPoolMode::Mean => {
                        let s: S = (0..area).map(|p| item[p * c + ch]).sum();
                        out.push(s / S::of_usize(area));
                    }
                    GlobalPoolMode::Max => {
                        let mut best = 0;
                        for p in 1..area {
                            if item[p * c + ch] > item[best * c + ch] {
                                best = p;
                            }
                        }
                        out.push(item[best * c + ch]);
                        argmax.push(b * area * c + best * c + ch);
                    }
                }
            }
        }
        let shape = if batched { vec![n, c] } else { vec![c] };
        let value = Tensor::new(shape, out)?;
        let argmax = (mode == GlobalPoolMode::Max).then_some(argmax);
        self.push("global_pool", value, Op::GlobalPool { input, dims, argmax }, &[input])
    }

    /// Mean over the batch of `-Σ_k t_k log softmax(z)_k`; `targets` are soft labels.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor<S>) -> Result<Var> {
        let z = self.value(logits);
        let (n, k) = match *z.shape() {
            [k] => (1, k),
            [n, k] => (n, k),
            _ => {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("logits must be rank 1 or 2, got {:?}", z.shape()),
                ))
            }
        };
        if targets.len() != n * k || targets.shape().last() != Some(&k) {
            return Err(Error::shape(
                "cross_entropy",
                format!("targets {:?} do not match logits {:?}", targets.shape(), z.shape()),
            ));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = S::zero();
        for (zr, tr) in z.data().chunks(k).zip(targets.data().chunks(k)) {
            let lsm = log_softmax(zr);
            for (&l, &t) in lsm.iter().zip(tr) {
                loss -= t * l;
            }
            probs.extend(lsm.iter().map(|l| l.exp()));
        }
        let value = Tensor::scalar(loss / S::of_usize(n));
        let op = Op::CrossEntropy {
            logits,
            targets: targets.data().to_vec(),
            probs,
            n,
            k,
        };
        self.push("cross_entropy", value, op, &[logits])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).sum());
        self.push("sum", value, Op::Sum { input }, &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Result<Var> {
        let value = self.value(input).map(|x| x * factor);
        self.push("scale", value, Op::Scale { input, factor }, &[input])
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(dy) = rest[0].as_deref() else { continue };
            let mut acc = Accumulator {
                nodes: &self.nodes,
                grads: before,
            };
            self.backprop_node(node, dy, &mut acc);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<S>, dy: &[S], acc: &mut Accumulator<'_, S>) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let need_dx = acc.wants(*input);
                let (dx, dk, db) = kernels::conv2d_backward(geom, val(*input), val(*kernel), dy, need_dx);
                if need_dx {
                    acc.add(*input, dx);
                }
                acc.add(*kernel, dk);
                acc.add(*bias, db);
            }
            Op::AvgPool2 { input, dims } => {
                acc.add(*input, kernels::avg_pool2_backward(*dims, dy));
            }
            Op::ReduceAxis { input, reduce, dims } => {
                let [n, t, f, _] = *dims;
                let mut dx = vec![S::zero(); n * t * f];
                match reduce {
                    Axis::Frequency => {
                        let inv = S::one() / S::of_usize(f);
                        for (r, chunk) in dx.chunks_mut(f).enumerate() {
                            chunk.iter_mut().for_each(|g| *g = dy[r] * inv);
                        }
                    }
                    Axis::Time => {
                        let inv = S::one() / S::of_usize(t);
                        for b in 0..n {
                            for ti in 0..t {
                                for fj in 0..f {
                                    dx[(b * t + ti) * f + fj] = dy[b * f + fj] * inv;
                                }
                            }
                        }
                    }
                }
                acc.add(*input, dx);
            }
            Op::Relu { input } => {
                let dx = val(*input)
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                acc.add(*input, dx);
            }
            Op::Sigmoid { input } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&y, &g)| g * y * (S::one() - y))
                    .collect();
                acc.add(*input, dx);
            }
            Op::Softmax { input } => {
                let y = node.value.data();
                let dot: S = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                acc.add(*input, y.iter().zip(dy).map(|(&yi, &gi)| yi * (gi - dot)).collect());
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let m = xhat.len() / c;
                let g = val(*gamma);
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for (hr, dr) in xhat.chunks(c).zip(dy.chunks(c)) {
                    for ch in 0..c {
                        dbeta[ch] += dr[ch];
                        dgamma[ch] += dr[ch] * hr[ch];
                    }
                }
                if acc.wants(*input) {
                    let mut dx = Vec::with_capacity(dy.len());
                    if *train {
                        let mf = S::of_usize(m);
                        for (hr, dr) in xhat.chunks(c).zip(dy.chunks(c)) {
                            for ch in 0..c {
                                let scale = g[ch] * inv_std[ch] / mf;
                                dx.push(scale * (mf * dr[ch] - dbeta[ch] - hr[ch] * dgamma[ch]));
                            }
                        }
                    } else {
                        for dr in dy.chunks(c) {
                            for ch in 0..c {
                                dx.push(dr[ch] * g[ch] * inv_std[ch]);
                            }
                        }
                    }
                    acc.add(*input, dx);
                }
                acc.add(*gamma, dgamma);
                acc.add(*beta, dbeta);
            }
            Op::Dense {
                input,
                weight,
                bias,
                n,
                d_in,
                d_out,
            } => {
                let (n, d_in, d_out) = (*n, *d_in, *d_out);
                let (x, w) = (val(*input), val(*weight));
                if acc.wants(*input) {
                    let mut dx = vec![S::zero(); n * d_in];
                    for r in 0..n {
                        let dxr = &mut dx[r * d_in..][..d_in];
                        for o in 0..d_out {
                            let g = dy[r * d_out + o];
                            for (a, &wv) in dxr.iter_mut().zip(&w[o * d_in..][..d_in]) {
                                *a += g * wv;
                            }
                        }
                    }
                    acc.add(*input, dx);
                }
                let mut dw = vec![S::zero(); d_out * d_in];
                let mut db = vec![S::zero(); d_out];
                for r in 0..n {
                    let xr = &x[r * d_in..][..d_in];
                    for o in 0..d_out {
                        let g = dy[r * d_out + o];
                        db[o] += g;
                        for (a, &xv) in dw[o * d_in..][..d_in].iter_mut().zip(xr) {
                            *a += g * xv;
                        }
                    }
                }
                acc.add(*weight, dw);
                acc.add(*bias, db);
            }
            Op::Rescale {
                input,
                gate,
                axis,
                dims,
            } => {
                let [n, t, f, c] = *dims;
                let (x, gs) = (val(*input), val(*gate));
                let mut dx = Vec::with_capacity(x.len());
                let mut dg = vec![S::zero(); gs.len()];
                for b in 0..n {
                    for ti in 0..t {
                        for fj in 0..f {
                            let gi = match axis {
                                Axis::Time => b * t + ti,
                                Axis::Frequency => b * f + fj,
                            };
                            let base = ((b * t + ti) * f + fj) * c;
                            for ch in base..base + c {
                                dx.push(dy[ch] * gs[gi]);
                                dg[gi] += dy[ch] * x[ch];
                            }
                        }
                    }
                }
                acc.add(*input, dx);
                acc.add(*gate, dg);
            }
            Op::WeightedSum { branches, coeffs } => {
                let cs = val(*coeffs);
                let mut dc = [S::zero(); 3];
                for (j, &b) in branches.iter().enumerate() {
                    let bv = val(b);
                    dc[j] = bv.iter().zip(dy).map(|(&x, &g)| x * g).sum();
                    acc.add(b, dy.iter().map(|&g| g * cs[j]).collect());
                }
                acc.add(*coeffs, dc.to_vec());
            }
            Op::GlobalPool { input, dims, argmax } => {
                let [n, t, f, c] = *dims;
                let area = t * f;
                let mut dx = vec![S::zero(); n * area * c];
                match argmax {
                    Some(idx) => {
                        for (&i, &g) in idx.iter().zip(dy) {
                            dx[i] += g;
                        }
                    }
                    None => {
                        let inv = S::one() / S::of_usize(area);
                        for b in 0..n {
                            for p in 0..area {
                                for ch in 0..c {
                                    dx[(b * area + p) * c + ch] = dy[b * c + ch] * inv;
                                }
                            }
                        }
                    }
                }
                acc.add(*input, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                n,
                k,
            } => {
                let scale = dy[0] / S::of_usize(*n);
                let mut dz = Vec::with_capacity(n * k);
                for (pr, tr) in probs.chunks(*k).zip(targets.chunks(*k)) {
                    let mass: S = tr.iter().copied().sum();
                    dz.extend(pr.iter().zip(tr).map(|(&p, &t)| (p * mass - t) * scale));
                }
                acc.add(*logits, dz);
            }
            Op::Sum { input } => {
                let len = self.nodes[input.0].value.len();
                acc.add(*input, vec![dy[0]; len]);
            }
            Op::Add { a, b } => {
                acc.add(*a, dy.to_vec());
                acc.add(*b, dy.to_vec());
            }
            Op::Mul { a, b } => {
                let (x, y) = (val(*a), val(*b));
                acc.add(*a, dy.iter().zip(y).map(|(&g, &v)| g * v).collect());
                acc.add(*b, dy.iter().zip(x).map(|(&g, &v)| g * v).collect());
            }
            Op::Scale { input, factor } => {
                acc.add(*input, dy.iter().map(|&g| g * *factor).collect());
            }
        }
    }
}

struct Accumulator<'a, S> {
    nodes: &'a [Node<S>],
    grads: &'a mut [Option<Vec<S>>],
}

impl<S: Scalar> Accumulator<'_, S> {
    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn add(&mut self, var: Var, contribution: Vec<S>) {
        if !self.wants(var) {
            return;
        }
        match &mut self.grads[var.0] {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Softmax with max-subtraction; errors on an empty slice.
pub fn softmax<S: Scalar>(x: &[S]) -> Result<Vec<S>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    Ok(log_softmax(x).into_iter().map(|l| l.exp()).collect())
}

fn log_softmax<S: Scalar>(x: &[S]) -> Vec<S> {
    let m = x.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = x.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
    x.iter().map(|&v| v - m - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::<f64>::from_f64(vec![2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[1.0; 6]);
    }

    #[test]
    fn half_square_gradient_is_input() {
        let mut tape = Tape::<f64>::new();
        let data = [1.5, -2.0, 0.25, 4.0];
        let x = tape.param(Tensor::<f64>::from_f64(vec![4], &data).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &data);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::<f64>::zeros(vec![3]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::<f64>::full(vec![2], 1.0));
        let unused = tape.param(Tensor::<f64>::full(vec![3], 1.0));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(!g.is_reached(unused));
        assert_eq!(g.get(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::<f64>::full(vec![2], 3.0));
        let x = tape.param(Tensor::<f64>::full(vec![2], 2.0));
        let y = tape.mul(c, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(!g.is_reached(c));
        assert_eq!(g.get(x).data(), &[3.0, 3.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::<f64>::full(vec![1], 2.0));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).data(), &[2.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::<f64>::full(vec![1], f64::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(softmax::<f64>(&[]).is_err());
    }
}
