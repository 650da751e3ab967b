//! Audio to log-mel features: decode, resample, fix length, STFT, mel
//! filterbank, log compression.

mod mel;
mod signal;
mod stft;
mod tsfa;
mod wav;

pub use mel::{log_mel, LogBase, MelFilterbank, MelScale};
pub use signal::{fix_length, resample_linear};
pub use stft::{stft, Framing, PowerSpectrogram, WindowKind};
pub use tsfa::{read_tsfa, write_tsfa, TSFA_MAGIC, TSFA_VERSION};
pub use wav::{load_wav, write_wav, WavEncoding, Waveform};

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub n_mels: usize,
    pub fmin: f64,
    /// `None` means Nyquist.
    pub fmax: Option<f64>,
    pub n_fft: Option<usize>,
    pub window: WindowKind,
    pub mel_scale: MelScale,
    pub log_base: LogBase,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 44100,
            clip_seconds: 5.0,
            window_seconds: 0.040,
            hop_seconds: 0.020,
            n_mels: 40,
            fmin: 0.0,
            fmax: None,
            n_fft: None,
            window: WindowKind::Hann,
            mel_scale: MelScale::Htk,
            log_base: LogBase::Ten,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    /// Short low-rate clips used by the synthetic desk-scale experiments.
    pub fn desk() -> Self {
        Self {
            sample_rate: 16000,
            clip_seconds: 1.0,
            ..Self::default()
        }
    }
}

/// A `T×F×1` log-mel feature.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelFeature<S> {
    pub values: Tensor<S>,
    pub hop_seconds: f64,
    pub window_seconds: f64,
}

impl<S: Scalar> LogMelFeature<S> {
    pub fn new(values: Tensor<S>, hop_seconds: f64, window_seconds: f64) -> Result<Self> {
        match values.shape() {
            [_, _, 1] => {}
            other => {
                return Err(Error::shape(
                    "log_mel_feature",
                    format!("expected T×F×1, got {other:?}"),
                ))
            }
        }
        if !values.all_finite() {
            return Err(Error::NonFinite { op: "log_mel_feature" });
        }
        Ok(Self {
            values,
            hop_seconds,
            window_seconds,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bands(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn cast<T: Scalar>(&self) -> LogMelFeature<T> {
        LogMelFeature {
            values: self.values.cast(),
            hop_seconds: self.hop_seconds,
            window_seconds: self.window_seconds,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let grid: Vec<f32> = self.values.data().iter().map(|x| x.as_f64() as f32).collect();
        write_tsfa(path, self.frames(), self.bands(), &grid)
    }

    pub fn load(path: impl AsRef<Path>, cfg: &FrontendConfig) -> Result<Self> {
        let grid = read_tsfa(path)?;
        let (t, f) = (grid.shape()[0], grid.shape()[1]);
        Self::new(
            grid.cast::<S>().reshape(vec![t, f, 1])?,
            cfg.hop_seconds,
            cfg.window_seconds,
        )
    }
}

/// The full featurization pipeline with its filterbank precomputed.
#[derive(Clone, Debug)]
pub struct Frontend {
    pub config: FrontendConfig,
    pub framing: Framing,
    pub filterbank: MelFilterbank,
}

impl Frontend {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        if config.clip_seconds <= 0.0 {
            return Err(Error::InvalidArgument("clip length must be positive".into()));
        }
        let mut framing = Framing::new(config.sample_rate, config.window_seconds, config.hop_seconds)?;
        if let Some(n) = config.n_fft {
            framing = framing.with_n_fft(n)?;
        }
        let fmax = config.fmax.unwrap_or(config.sample_rate as f64 / 2.0);
        let filterbank = MelFilterbank::new(
            framing.n_fft,
            config.sample_rate,
            config.n_mels,
            config.fmin,
            fmax,
            config.mel_scale,
        )?;
        Ok(Self {
            config,
            framing,
            filterbank,
        })
    }

    /// Frames produced for every clip after length fixing.
    pub fn frames_per_clip(&self) -> usize {
        let n = (self.config.clip_seconds * self.config.sample_rate as f64).round() as usize;
        self.framing.frame_count(n).unwrap_or(0)
    }

    /// Resamples, fixes the length, and returns the fixed waveform.
    pub fn prepare(&self, w: &Waveform) -> Waveform {
        fix_length(&resample_linear(w, self.config.sample_rate), self.config.clip_seconds)
    }

    /// Features of an already prepared waveform.
    pub fn features_of_prepared<S: Scalar>(&self, w: &Waveform) -> Result<LogMelFeature<S>> {
        let spec = stft(w, &self.framing, self.config.window)?;
        let values = log_mel(&spec, &self.filterbank, self.config.log_floor, self.config.log_base)?;
        LogMelFeature::new(values, self.config.hop_seconds, self.config.window_seconds)
    }

    pub fn featurize<S: Scalar>(&self, w: &Waveform) -> Result<LogMelFeature<S>> {
        self.features_of_prepared(&self.prepare(w))
    }

    pub fn featurize_path<S: Scalar>(&self, path: impl AsRef<Path>) -> Result<LogMelFeature<S>> {
        self.featurize(&load_wav(path)?)
    }
}
