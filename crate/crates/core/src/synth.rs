//! Synthetic labeled clips for desk-scale experiments.
//!
//! Each class owns one recipe: a harmonic tone, a linear chirp or a band of
//! noise, centered on a class frequency spaced logarithmically between 250 Hz
//! and 6 kHz. Each clip places one event of random onset, length, amplitude
//! and phase over a faint white-noise floor. Optionally a burst of broadband
//! noise, unrelated to the class, lands somewhere in the clip as a distractor.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::{write_wav, WavEncoding, Waveform};
use crate::manifest::{Manifest, ManifestEntry};

pub const TRAIN_FOLD: u32 = 1;
pub const EVAL_FOLD: u32 = 2;

const LOW_HZ: f64 = 250.0;
const HIGH_HZ: f64 = 6000.0;
const FLOOR_STD: f64 = 0.005;
pub const DISTRACTOR_LEVEL: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    Tone,
    Chirp,
    NoiseBand,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub sample_rate: u32,
    pub seconds: f64,
    pub seed: u64,
    /// Peak amplitude of the class-independent noise burst; 0 disables it.
    pub distractor_level: f64,
}

impl SynthConfig {
    pub fn new(n_classes: usize, n_per_class: usize, seed: u64) -> Self {
        Self {
            n_classes,
            n_per_class,
            sample_rate: 16_000,
            seconds: 1.0,
            seed,
            distractor_level: DISTRACTOR_LEVEL,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.n_per_class == 0 || self.seconds <= 0.0 || self.sample_rate < 2 * HIGH_HZ as u32 + 2000 {
            return Err(Error::InvalidArgument(
                "clips per class and duration must be positive; sample rate must exceed 14 kHz".into(),
            ));
        }
        Ok(())
    }
}

/// One generated clip. Even-numbered clips of each class go to the training
/// fold, odd-numbered ones to the evaluation fold.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub name: String,
    pub wave: Waveform,
    pub label: usize,
    pub fold: u32,
}

pub fn class_frequency(class: usize, n_classes: usize) -> f64 {
    let span = (n_classes - 1).max(1) as f64;
    LOW_HZ * (HIGH_HZ / LOW_HZ).powf(class as f64 / span)
}

pub fn class_recipe(class: usize) -> Recipe {
    [Recipe::Tone, Recipe::Chirp, Recipe::NoiseBand][class % 3]
}

fn render(cfg: &SynthConfig, label: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let n = (cfg.seconds * sr).round() as usize;
    let fc = class_frequency(label, cfg.n_classes);
    let amp = rng.random_range(0.3..0.8);
    let len = ((rng.random_range(0.4..0.7) * cfg.seconds * sr) as usize).max(1);
    let onset = rng.random_range(0..=n - len.min(n));
    let phase = rng.random_range(0.0..TAU);
    let mut event = vec![0.0; len];
    match class_recipe(label) {
        Recipe::Tone => {
            for (h, w) in [(1.0, 1.0), (2.0, 0.4), (3.0, 0.2)] {
                if fc * h < sr / 2.0 {
                    for (i, e) in event.iter_mut().enumerate() {
                        *e += w * (TAU * fc * h * i as f64 / sr + phase * h).sin();
                    }
                }
            }
        }
        Recipe::Chirp => {
            let (f0, f1) = (fc / 1.25, fc * 1.25);
            let dur = len as f64 / sr;
            for (i, e) in event.iter_mut().enumerate() {
                let t = i as f64 / sr;
                *e = (TAU * (f0 * t + 0.5 * (f1 - f0) / dur * t * t) + phase).sin();
            }
        }
        Recipe::NoiseBand => {
            for _ in 0..24 {
                let f = fc * rng.random_range(-0.15f64..0.15).exp();
                let p = rng.random_range(0.0..TAU);
                for (i, e) in event.iter_mut().enumerate() {
                    *e += (TAU * f * i as f64 / sr + p).sin() / 24f64.sqrt();
                }
            }
        }
    }
    let peak = event.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let fade = ((0.01 * sr) as usize).min(len / 2).max(1);
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            FLOOR_STD * z
        })
        .collect();
    for (i, &e) in event.iter().enumerate() {
        let ramp = (i.min(len - 1 - i) as f64 / fade as f64).min(1.0);
        out[onset + i] += amp * ramp * e / peak;
    }
    if cfg.distractor_level > 0.0 {
        let level = cfg.distractor_level * rng.random_range(0.5..1.0);
        let len = ((rng.random_range(0.1..0.25) * cfg.seconds * sr) as usize).clamp(1, n);
        let onset = rng.random_range(0..=n - len);
        for v in &mut out[onset..onset + len] {
            let z: f64 = StandardNormal.sample(rng);
            *v += level * z / 3.0;
        }
    }
    // Keep samples on the 16-bit grid so written files round-trip exactly.
    out.iter()
        .map(|x| (x * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0)
        .collect()
}

/// Generates every clip; the result depends only on `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthClip>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.n_classes)
        .flat_map(|c| (0..cfg.n_per_class).map(move |i| (c, i)))
        .collect();
    jobs.par_iter()
        .enumerate()
        .map(|(stream, &(label, i))| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream as u64);
            Ok(SynthClip {
                name: format!("class{label:02}_{i:04}.wav"),
                wave: Waveform::new(render(cfg, label, &mut rng), cfg.sample_rate)?,
                label,
                fold: if i % 2 == 0 { TRAIN_FOLD } else { EVAL_FOLD },
            })
        })
        .collect()
}

/// Writes the clips as 16-bit WAV files plus `manifest.csv` into `out_dir`.
pub fn write_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let clips = generate(cfg)?;
    for c in &clips {
        write_wav(dir.join(&c.name), &c.wave, WavEncoding::Pcm16)?;
    }
    let entries = clips
        .iter()
        .map(|c| ManifestEntry {
            path: c.name.clone().into(),
            label: c.label,
            fold: c.fold,
        })
        .collect();
    let manifest = Manifest::new(dir, entries);
    manifest.save(dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{load_wav, Frontend, FrontendConfig};

    #[test]
    fn counts_and_folds() {
        let clips = generate(&SynthConfig::new(2, 10, 1)).unwrap();
        assert_eq!(clips.len(), 20);
        assert_eq!(clips.iter().filter(|c| c.fold == TRAIN_FOLD).count(), 10);
        assert_eq!(clips.iter().filter(|c| c.fold == EVAL_FOLD).count(), 10);
        assert!(clips
            .iter()
            .all(|c| c.wave.len() == 16_000 && c.wave.samples.iter().all(|x| x.abs() < 1.0)));
        assert!(generate(&SynthConfig::new(1, 10, 1)).is_err());
    }

    #[test]
    fn files_round_trip_and_repeat() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(3, 2, 9);
        let m = write_dataset(&cfg, dir.path().join("a")).unwrap();
        write_dataset(&cfg, dir.path().join("b")).unwrap();
        let clips = generate(&cfg).unwrap();
        for (e, c) in m.entries.iter().zip(&clips) {
            let a = std::fs::read(dir.path().join("a").join(&e.path)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(&e.path)).unwrap();
            assert_eq!(a, b);
            assert_eq!(load_wav(m.resolve(e)).unwrap(), c.wave);
        }
        let reread = Manifest::load(dir.path().join("a/manifest.csv")).unwrap();
        assert_eq!(reread.entries, m.entries);
    }

    #[test]
    fn nearest_mean_log_mel_separates_classes() {
        // 1-NN on time-averaged log-mel vectors, trained on fold 1, scored on fold 2.
        let fe = Frontend::new(FrontendConfig::desk()).unwrap();
        for classes in [2, 4, 6] {
            let clips = generate(&SynthConfig::new(classes, 10, 3)).unwrap();
            let mean_vec = |c: &SynthClip| -> Vec<f64> {
                let f = fe.featurize::<f64>(&c.wave).unwrap();
                let (t, b) = (f.frames(), f.bands());
                (0..b)
                    .map(|j| (0..t).map(|i| f.values.data()[i * b + j]).sum::<f64>() / t as f64)
                    .collect()
            };
            let train: Vec<_> = clips
                .iter()
                .filter(|c| c.fold == TRAIN_FOLD)
                .map(|c| (mean_vec(c), c.label))
                .collect();
            for c in clips.iter().filter(|c| c.fold == EVAL_FOLD) {
                let v = mean_vec(c);
                let dist = |u: &[f64]| u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let nearest = train
                    .iter()
                    .min_by(|a, b| dist(&a.0).partial_cmp(&dist(&b.0)).unwrap())
                    .unwrap();
                assert_eq!(nearest.1, c.label, "{classes} classes, clip {}", c.name);
            }
        }
    }
}
