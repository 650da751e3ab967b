use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::wav::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
    Hamming,
}

impl WindowKind {
    /// Periodic window of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let (a0, a1) = match self {
            WindowKind::Hann => (0.5, 0.5),
            WindowKind::Hamming => (0.54, 0.46),
        };
        (0..len)
            .map(|n| a0 - a1 * (2.0 * PI * n as f64 / len as f64).cos())
            .collect()
    }
}

/// Frame layout derived from a sample rate and window/hop durations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
}

impl Framing {
    pub fn new(sample_rate: u32, window_seconds: f64, hop_seconds: f64) -> Result<Self> {
        let window = (window_seconds * sample_rate as f64).round() as usize;
        let hop = (hop_seconds * sample_rate as f64).round() as usize;
        if window == 0 || hop == 0 {
            return Err(Error::InvalidArgument(format!(
                "window ({window_seconds}s) and hop ({hop_seconds}s) must each span at least one sample"
            )));
        }
        Ok(Self {
            window,
            hop,
            n_fft: window.next_power_of_two(),
        })
    }

    pub fn with_n_fft(self, n_fft: usize) -> Result<Self> {
        if n_fft < self.window {
            return Err(Error::InvalidArgument(format!(
                "n_fft {n_fft} is shorter than the {}-sample window",
                self.window
            )));
        }
        Ok(Self { n_fft, ..self })
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `⌊(N − W)/H⌋ + 1`, or `None` when the clip is shorter than one window.
    pub fn frame_count(&self, samples: usize) -> Option<usize> {
        (samples >= self.window).then(|| (samples - self.window) / self.hop + 1)
    }
}

/// Magnitude-squared one-sided spectra, one row of `bins` values per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl PowerSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// Short-time power spectrum; frames start at sample 0 with no centering.
pub fn stft(w: &Waveform, framing: &Framing, window: WindowKind) -> Result<PowerSpectrogram> {
    let frames = framing.frame_count(w.len()).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "clip of {} samples is shorter than one {}-sample window",
            w.len(),
            framing.window
        ))
    })?;
    let coeffs = window.coefficients(framing.window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(framing.n_fft);
    let bins = framing.bins();
    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); framing.n_fft];
    for t in 0..frames {
        let start = t * framing.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < framing.window {
                Complex::new(w.samples[start + i] * coeffs[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        data.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Ok(PowerSpectrogram { frames, bins, data })
}
