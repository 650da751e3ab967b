//! Noise-robustness evaluation: waveform-domain noise at a target SNR,
//! feature-domain Gaussian stripes, channel-averaged feature maps and the
//! suppression ratio comparing noisy and clean maps inside a stripe.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::{load_wav, write_tsfa, Frontend, Waveform};
use crate::manifest::Manifest;
use crate::model::{predict_logits, Model};
use crate::scalar::Scalar;
use crate::tape::Axis;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum NoiseKind {
    Gaussian,
    /// Noise taken from an audio clip, tiled or randomly cropped to length.
    External(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Target SNR in dB; `+∞` means no noise at all.
    pub snr_db: f64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, snr_db: f64) -> Result<Self> {
        if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument(format!(
                "SNR must be finite or +inf, got {snr_db}"
            )));
        }
        Ok(Self { kind, snr_db })
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::External(_) => "external",
        }
    }
}

/// `10·log10(P_signal / P_noise)` with `P` the mean squared amplitude.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    let p = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    10.0 * (p(signal) / p(noise)).log10()
}

/// Mixes the first `signal.len()` samples of `noise` into `signal`, scaled
/// so the realized SNR equals `snr_db`.
pub fn add_noise_snr(signal: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if snr_db == f64::INFINITY {
        return Ok(signal.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "SNR must be finite or +inf, got {snr_db}"
        )));
    }
    if noise.len() < signal.len() {
        return Err(Error::InvalidArgument(format!(
            "noise has {} samples, signal needs {}",
            noise.len(),
            signal.len()
        )));
    }
    let noise = &noise.samples[..signal.len()];
    let ps = signal.power();
    let pn = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    if ps == 0.0 {
        return Err(Error::InvalidArgument("signal is silent, SNR is undefined".into()));
    }
    if pn == 0.0 {
        return Err(Error::InvalidArgument(
            "noise is silent and cannot reach a finite SNR".into(),
        ));
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = signal.samples.iter().zip(noise).map(|(s, n)| s + gain * n).collect();
    Waveform::new(samples, signal.sample_rate)
}

/// Tiles a short clip, or crops a random window of a long one, to `len` samples.
pub fn fit_noise(noise: &Waveform, len: usize, rng: &mut impl Rng) -> Waveform {
    let src = &noise.samples;
    let samples = if src.len() >= len {
        let start = rng.random_range(0..=src.len() - len);
        src[start..start + len].to_vec()
    } else {
        src.iter().cycle().take(len).copied().collect()
    };
    Waveform {
        samples,
        sample_rate: noise.sample_rate,
    }
}

pub fn gaussian_noise(len: usize, sample_rate: u32, rng: &mut impl Rng) -> Waveform {
    let samples = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    Waveform { samples, sample_rate }
}

/// An inclusive stripe of time frames or frequency bands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionMask {
    pub axis: Axis,
    pub start: usize,
    pub end: usize,
}

impl RegionMask {
    pub fn new(axis: Axis, start: usize, end: usize) -> Self {
        Self { axis, start, end }
    }

    pub fn validate(&self, frames: usize, bands: usize) -> Result<()> {
        let len = match self.axis {
            Axis::Time => frames,
            Axis::Frequency => bands,
        };
        if self.start > self.end || self.end >= len {
            return Err(Error::InvalidArgument(format!(
                "mask {}..={} does not fit an axis of length {len}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn contains(&self, t: usize, f: usize) -> bool {
        let i = match self.axis {
            Axis::Time => t,
            Axis::Frequency => f,
        };
        (self.start..=self.end).contains(&i)
    }

    /// The same stripe after `poolings` rounds of 2×2 pooling: indices halve,
    /// clamped to the pooled axis length.
    pub fn pooled(&self, poolings: usize, frames: usize, bands: usize) -> Self {
        let len = match self.axis {
            Axis::Time => frames,
            Axis::Frequency => bands,
        } >> poolings;
        let last = len.saturating_sub(1);
        Self {
            axis: self.axis,
            start: (self.start >> poolings).min(last),
            end: (self.end >> poolings).min(last),
        }
    }
}

/// Adds Gaussian noise inside `mask` of a `T×F×C` feature, with standard
/// deviation equal to that of the whole clean feature. Cells outside the
/// stripe are returned untouched.
pub fn mask_region_noise<S: Scalar>(feature: &Tensor<S>, mask: &RegionMask, rng: &mut impl Rng) -> Result<Tensor<S>> {
    let &[t, f, c] = feature.shape() else {
        return Err(Error::shape(
            "mask_region_noise",
            format!("expected T×F×C, got {:?}", feature.shape()),
        ));
    };
    mask.validate(t, f)?;
    let mean = feature.mean();
    let var = feature.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / S::of_usize(feature.len());
    let std = var.sqrt().as_f64();
    let mut out = feature.clone();
    let data = out.data_mut();
    for ti in 0..t {
        for fj in 0..f {
            if mask.contains(ti, fj) {
                for v in &mut data[(ti * f + fj) * c..][..c] {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += S::of(std * z);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub label: usize,
    pub total: usize,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassReport>,
    pub predictions: Vec<usize>,
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Accuracy of `model` on labeled clips, optionally after mixing noise into
/// each waveform. Clip `i` draws its noise from stream `i` of `seed`, so the
/// result does not depend on scheduling.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    clips: &[(Waveform, usize)],
    frontend: &Frontend,
    noise: Option<&NoiseSpec>,
    seed: u64,
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let external = match noise.map(|n| &n.kind) {
        Some(NoiseKind::External(p)) => Some(load_wav(p)?),
        _ => None,
    };
    let predictions = clips
        .par_iter()
        .enumerate()
        .map(|(i, (wave, _))| {
            let clean = frontend.prepare(wave);
            let input = match noise {
                None => clean,
                Some(spec) => {
                    let mut rng = clip_rng(seed, i);
                    let n = match &external {
                        Some(src) => fit_noise(&frontend.prepare(src), clean.len(), &mut rng),
                        None => gaussian_noise(clean.len(), clean.sample_rate, &mut rng),
                    };
                    add_noise_snr(&clean, &n, spec.snr_db)?
                }
            };
            let feature = frontend.features_of_prepared::<S>(&input)?;
            Ok(predict_logits(model.forward_eval(&feature.values)?.data()).0)
        })
        .collect::<Result<Vec<usize>>>()?;
    let n_classes = model
        .config()
        .n_classes
        .max(clips.iter().map(|c| c.1 + 1).max().unwrap_or(0));
    let mut per_class: Vec<ClassReport> = (0..n_classes)
        .map(|label| ClassReport {
            label,
            total: 0,
            correct: 0,
        })
        .collect();
    for ((_, label), &p) in clips.iter().zip(&predictions) {
        per_class[*label].total += 1;
        per_class[*label].correct += usize::from(p == *label);
    }
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / clips.len() as f64,
        per_class,
        predictions,
    })
}

/// [`evaluate`] over the rows of `manifest` in `fold`.
pub fn evaluate_manifest<S: Scalar>(
    model: &Model<S>,
    manifest: &Manifest,
    fold: u32,
    frontend: &Frontend,
    noise: Option<&NoiseSpec>,
    seed: u64,
) -> Result<EvalReport> {
    let rows = manifest.with_fold(fold);
    let clips = rows
        .entries
        .par_iter()
        .map(|e| Ok((load_wav(rows.resolve(e))?, e.label)))
        .collect::<Result<Vec<_>>>()?;
    evaluate(model, &clips, frontend, noise, seed)
}

/// One row of the noise report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub noise_kind: String,
    pub snr_db: f64,
    pub model: String,
    pub accuracy: f64,
}

/// Appends rows to a `noise_kind,snr_db,model,accuracy` CSV, writing the
/// header when the file is new.
pub fn append_report(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    if fresh {
        out.push_str("noise_kind,snr_db,model,accuracy\n");
    }
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.noise_kind, r.snr_db, r.model, r.accuracy));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Eval-mode output of `block` averaged over channels: a `T'×F'` grid.
pub fn channel_mean_map<S: Scalar>(model: &Model<S>, feature: &Tensor<S>, block: usize) -> Result<Tensor<S>> {
    let out = model.block_output(feature, block)?;
    let &[t, f, c] = out.shape() else {
        return Err(Error::shape("channel_mean_map", "expected a single feature"));
    };
    let inv = S::one() / S::of_usize(c);
    let data = out
        .data()
        .chunks(c)
        .map(|cell| cell.iter().copied().sum::<S>() * inv)
        .collect();
    Tensor::new(vec![t, f], data)
}

/// Writes the channel-averaged map of `block` as TSFA at `out_path` and as
/// CSV (one row per frame) next to it. Returns the map.
pub fn dump_feature_maps<S: Scalar>(
    model: &Model<S>,
    feature: &Tensor<S>,
    block: usize,
    out_path: impl AsRef<Path>,
) -> Result<Tensor<S>> {
    let path = out_path.as_ref();
    let map = channel_mean_map(model, feature, block)?;
    let (t, f) = (map.shape()[0], map.shape()[1]);
    let values: Vec<f32> = map.data().iter().map(|v| v.as_f64() as f32).collect();
    write_tsfa(path, t, f, &values)?;
    let mut csv = String::new();
    for row in values.chunks(f) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    let twin = path.with_extension("csv");
    std::fs::write(&twin, csv).map_err(|e| Error::io(&twin, e))?;
    Ok(map)
}

/// Mean |noisy| over the stripe divided by mean |clean| over the same stripe.
pub fn suppression_ratio<S: Scalar>(clean: &Tensor<S>, noisy: &Tensor<S>, mask: &RegionMask) -> Result<f64> {
    if clean.shape() != noisy.shape() || clean.rank() != 2 {
        return Err(Error::shape("suppression_ratio", "maps must be equal-shaped T×F grids"));
    }
    let (t, f) = (clean.shape()[0], clean.shape()[1]);
    mask.validate(t, f)?;
    let (mut a, mut b) = (0.0, 0.0);
    for ti in 0..t {
        for fj in 0..f {
            if mask.contains(ti, fj) {
                a += noisy.data()[ti * f + fj].as_f64().abs();
                b += clean.data()[ti * f + fj].as_f64().abs();
            }
        }
    }
    if b == 0.0 {
        return Err(Error::InvalidArgument("clean map is zero inside the region".into()));
    }
    Ok(a / b)
}
