use super::stft::PowerSpectrogram;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MelScale {
    /// `2595 · log10(1 + f/700)`
    Htk,
    /// Linear below 1 kHz, logarithmic above.
    Slaney,
}

const SLANEY_F_SP: f64 = 200.0 / 3.0;
const SLANEY_MIN_LOG_HZ: f64 = 1000.0;
const SLANEY_MIN_LOG_MEL: f64 = SLANEY_MIN_LOG_HZ / SLANEY_F_SP;

impl MelScale {
    pub fn hz_to_mel(self, hz: f64) -> f64 {
        match self {
            MelScale::Htk => 2595.0 * (1.0 + hz / 700.0).log10(),
            MelScale::Slaney => {
                if hz < SLANEY_MIN_LOG_HZ {
                    hz / SLANEY_F_SP
                } else {
                    SLANEY_MIN_LOG_MEL + (hz / SLANEY_MIN_LOG_HZ).ln() / slaney_log_step()
                }
            }
        }
    }

    pub fn mel_to_hz(self, mel: f64) -> f64 {
        match self {
            MelScale::Htk => 700.0 * (10f64.powf(mel / 2595.0) - 1.0),
            MelScale::Slaney => {
                if mel < SLANEY_MIN_LOG_MEL {
                    mel * SLANEY_F_SP
                } else {
                    SLANEY_MIN_LOG_HZ * (slaney_log_step() * (mel - SLANEY_MIN_LOG_MEL)).exp()
                }
            }
        }
    }
}

fn slaney_log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Triangular filters sampled at FFT bin centres, stored `bins × n_mels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub weights: Vec<f64>,
    pub bins: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub scale: MelScale,
    /// `n_mels + 2` edges equally spaced in mel, in Hz.
    pub breakpoints_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_fft: usize, sample_rate: u32, n_mels: usize, fmin: f64, fmax: f64, scale: MelScale) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 {
            return Err(Error::InvalidArgument("n_mels must be at least 1".into()));
        }
        if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= fmin < fmax <= {nyquist} Hz, got fmin={fmin}, fmax={fmax}"
            )));
        }
        let (mlo, mhi) = (scale.hz_to_mel(fmin), scale.hz_to_mel(fmax));
        let breakpoints_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| scale.mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bins = n_fft / 2 + 1;
        let mut fb = Self {
            weights: vec![0.0; bins * n_mels],
            bins,
            n_mels,
            fmin,
            fmax,
            scale,
            breakpoints_hz,
        };
        for k in 0..bins {
            let hz = k as f64 * sample_rate as f64 / n_fft as f64;
            for m in 0..n_mels {
                fb.weights[k * n_mels + m] = fb.triangle(m, hz);
            }
        }
        for m in 0..n_mels {
            if (0..bins).all(|k| fb.weights[k * n_mels + m] == 0.0) {
                return Err(Error::DegenerateBand { band: m });
            }
        }
        Ok(fb)
    }

    /// Continuous triangle of `band`: 0 at its outer breakpoints, 1 at its centre.
    pub fn triangle(&self, band: usize, hz: f64) -> f64 {
        let (lo, mid, hi) = (
            self.breakpoints_hz[band],
            self.breakpoints_hz[band + 1],
            self.breakpoints_hz[band + 2],
        );
        if hz <= lo || hz >= hi {
            0.0
        } else if hz <= mid {
            (hz - lo) / (mid - lo)
        } else {
            (hi - hz) / (hi - mid)
        }
    }

    pub fn weight(&self, bin: usize, band: usize) -> f64 {
        self.weights[bin * self.n_mels + band]
    }
}

/// Base of the log compression.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogBase {
    Ten,
    E,
}

/// `log(max(spec · fb, floor))` as a `T×n_mels×1` tensor.
pub fn log_mel<S: Scalar>(spec: &PowerSpectrogram, fb: &MelFilterbank, floor: f64, base: LogBase) -> Result<Tensor<S>> {
    if spec.bins != fb.bins {
        return Err(Error::shape(
            "log_mel",
            format!("spectrogram has {} bins, filterbank expects {}", spec.bins, fb.bins),
        ));
    }
    let mut out = Vec::with_capacity(spec.frames * fb.n_mels);
    let mut energy = vec![0.0f64; fb.n_mels];
    for t in 0..spec.frames {
        energy.iter_mut().for_each(|e| *e = 0.0);
        for (k, &p) in spec.frame(t).iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let row = &fb.weights[k * fb.n_mels..][..fb.n_mels];
            for (e, &w) in energy.iter_mut().zip(row) {
                *e += p * w;
            }
        }
        out.extend(energy.iter().map(|&e| {
            let e = e.max(floor);
            S::of(match base {
                LogBase::Ten => e.log10(),
                LogBase::E => e.ln(),
            })
        }));
    }
    Tensor::new(vec![spec.frames, fb.n_mels, 1], out)
}
