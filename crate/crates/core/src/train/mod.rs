//! Mini-batch training: Adam with stepwise exponential learning-rate decay,
//! soft-label cross-entropy, mixup on log-mel features, then SpecAugment.

mod adam;
mod augment;
mod config;

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use augment::{mixup, spec_augment};
pub use config::{lr_schedule, SpecAugmentConfig, TrainConfig};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::LogMelFeature;
use crate::model::{predict_logits, Model};
use crate::ops::Mode;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Features held in memory with their integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<Tensor<f32>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "dataset needs matching non-empty features and labels, got {} and {}",
                features.len(),
                labels.len()
            )));
        }
        let shape = features[0].shape().to_vec();
        if shape.len() != 3 || shape[2] != 1 || features.iter().any(|f| f.shape() != shape.as_slice()) {
            return Err(Error::shape("dataset", "features must all share one T×F×1 shape"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn from_features(features: Vec<LogMelFeature<f32>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        Self::new(features.into_iter().map(|f| f.values).collect(), labels, n_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(T, F)` of every feature.
    pub fn feature_dims(&self) -> (usize, usize) {
        let s = self.features[0].shape();
        (s[0], s[1])
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    /// Batch accuracy against each row's dominant (soft) label.
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iter,lr,loss,train_acc,eval_acc\n");
    for r in rows {
        let eval = r.eval_acc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.iter, r.lr, r.loss, r.train_acc, eval));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Predicted class of every feature, in order, with the model in eval mode.
pub fn predict_all<S: Scalar>(model: &Model<S>, features: &[Tensor<f32>]) -> Result<Vec<usize>> {
    features
        .par_iter()
        .map(|x| Ok(predict_logits(model.forward_eval(&x.cast::<S>())?.data()).0))
        .collect()
}

pub fn accuracy<S: Scalar>(model: &Model<S>, data: &Dataset) -> Result<f64> {
    let pred = predict_all(model, &data.features)?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Yields mini-batch indices: each epoch is a fresh permutation and
/// batches continue straight across epoch boundaries.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// Assembles one augmented batch: `N×T×F×1` features and `N×K` soft labels.
fn make_batch<S: Scalar>(
    data: &Dataset,
    idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let k = data.n_classes;
    let one_hot = |l: usize| -> Vec<S> { (0..k).map(|i| if i == l { S::one() } else { S::zero() }).collect() };
    let mut xs: Vec<Tensor<S>> = idx.iter().map(|&i| data.features[i].cast()).collect();
    let mut ys: Vec<Vec<S>> = idx.iter().map(|&i| one_hot(data.labels[i])).collect();
    if cfg.mixup_alpha > 0.0 {
        let beta =
            Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).map_err(|e| Error::Config(format!("mixup_alpha: {e}")))?;
        let mut partner: Vec<usize> = (0..idx.len()).collect();
        partner.shuffle(rng);
        let (x0, y0) = (xs.clone(), ys.clone());
        for (i, &j) in partner.iter().enumerate() {
            let lambda = S::of(beta.sample(rng));
            (xs[i], ys[i]) = mixup(&x0[i], &y0[i], &x0[j], &y0[j], lambda)?;
        }
    }
    for x in xs.iter_mut() {
        spec_augment(x, &cfg.spec_augment, rng)?;
    }
    let (t, f) = data.feature_dims();
    let x = Tensor::new(
        vec![idx.len(), t, f, 1],
        xs.into_iter().flat_map(Tensor::into_data).collect(),
    )?;
    let y = Tensor::new(vec![idx.len(), k], ys.concat())?;
    Ok((x, y))
}

fn check_compatible<S: Scalar>(model: &Model<S>, data: &Dataset, what: &str) -> Result<()> {
    let cfg = model.config();
    let (_, f) = data.feature_dims();
    if f != cfg.input_bands {
        return Err(Error::shape(
            "train",
            format!("{what} features have {f} bands, model expects {}", cfg.input_bands),
        ));
    }
    if data.n_classes != cfg.n_classes {
        return Err(Error::shape(
            "train",
            format!("{what} has {} classes, model has {}", data.n_classes, cfg.n_classes),
        ));
    }
    Ok(())
}

/// One optimization step on a prepared batch; returns the loss and the
/// batch accuracy against each row's dominant label.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    adam: &mut Adam<S>,
    x: Tensor<S>,
    targets: &Tensor<S>,
    lr: S,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let input = tape.constant(x);
    let trace = model.forward_graph(&mut tape, input, Mode::Train, true)?;
    let loss = tape.cross_entropy(trace.logits, targets)?;
    let grads = tape.backward(loss)?;
    let k = model.config().n_classes;
    let logits = tape.value(trace.logits).data();
    let mut correct = 0;
    for (z, t) in logits.chunks(k).zip(targets.data().chunks(k)) {
        let target = predict_logits(t).0;
        if predict_logits(z).0 == target {
            correct += 1;
        }
    }
    let n = logits.len() / k;
    let g: Vec<Tensor<S>> = trace.params.iter().map(|&v| grads.get(v)).collect();
    adam.step(model.parameters_mut(), &g, lr)?;
    for (r, s) in model.running_stats_mut().iter_mut().zip(&trace.batch_stats) {
        r.update(&s.mean, &s.var);
    }
    Ok((tape.value(loss).data()[0].as_f64(), correct as f64 / n as f64))
}

/// Trains `model` in place for up to `cfg.max_iters` steps.
///
/// Evaluation on `eval` (when given) runs every `cfg.eval_every`
/// iterations and after the final one. The run is a pure function of the
/// model's initial state, the data and `cfg`.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    check_compatible(model, data, "training set")?;
    if let Some(e) = eval {
        check_compatible(model, e, "evaluation set")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler::new(data.len());
    let mut adam = Adam::new(model.parameters());
    let mut rows = Vec::with_capacity(cfg.max_iters);
    for iter in 0..cfg.max_iters {
        let idx = sampler.next(cfg.batch_size, &mut rng);
        let (x, y) = make_batch::<S>(data, &idx, cfg, &mut rng)?;
        let lr = cfg.learning_rate(iter);
        let (loss, train_acc) = train_step(model, &mut adam, x, &y, S::of(lr))?;
        let last = iter + 1 == cfg.max_iters;
        let due = last || (cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0);
        let eval_acc = match eval {
            Some(e) if due => Some(accuracy(model, e)?),
            _ => None,
        };
        rows.push(MetricsRow {
            iter,
            lr,
            loss,
            train_acc,
            eval_acc,
        });
        if matches!((eval_acc, cfg.stop_at_eval_acc), (Some(a), Some(target)) if a >= target) {
            break;
        }
    }
    Ok(rows)
}
