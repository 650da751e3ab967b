use super::wav::Waveform;

/// Linear-interpolation resampling to `target_rate`; output length is
/// `round(n · target / source)`. Equal rates return the input unchanged.
pub fn resample_linear(w: &Waveform, target_rate: u32) -> Waveform {
    assert!(target_rate > 0, "target rate must be positive");
    if w.sample_rate == target_rate {
        return w.clone();
    }
    let n = w.samples.len();
    let ratio = w.sample_rate as f64 / target_rate as f64;
    let out_len = ((n as f64) * target_rate as f64 / w.sample_rate as f64)
        .round()
        .max(1.0) as usize;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = pos.floor() as usize;
            if i0 + 1 >= n {
                return w.samples[n - 1];
            }
            let frac = pos - i0 as f64;
            w.samples[i0] + (w.samples[i0 + 1] - w.samples[i0]) * frac
        })
        .collect();
    Waveform {
        samples,
        sample_rate: target_rate,
    }
}

/// Zero-pads or truncates at the tail to exactly `round(seconds · rate)` samples.
pub fn fix_length(w: &Waveform, seconds: f64) -> Waveform {
    assert!(seconds > 0.0, "clip length must be positive");
    let len = (seconds * w.sample_rate as f64).round() as usize;
    let mut samples = w.samples.clone();
    samples.resize(len, 0.0);
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, rate: u32, seconds: f64) -> Waveform {
        let n = (seconds * rate as f64).round() as usize;
        Waveform::new(
            (0..n)
                .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin())
                .collect(),
            rate,
        )
        .unwrap()
    }

    #[test]
    fn same_rate_is_identity() {
        let w = tone(440.0, 16000, 0.1);
        assert_eq!(resample_linear(&w, 16000), w);
    }

    #[test]
    fn constants_stay_constant() {
        let w = Waveform::new(vec![0.37; 1000], 22050).unwrap();
        for target in [8000, 16000, 44100, 48000] {
            let r = resample_linear(&w, target);
            assert_eq!(r.len(), (1000.0 * target as f64 / 22050.0).round() as usize);
            assert!(r.samples.iter().all(|&x| (x - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn upsampled_sine_correlates_with_analytic() {
        let w = tone(100.0, 22050, 0.5);
        let r = resample_linear(&w, 44100);
        assert_eq!(r.len(), 22050);
        let reference: Vec<f64> = (0..r.len())
            .map(|i| (2.0 * PI * 100.0 * i as f64 / 44100.0).sin())
            .collect();
        let dot: f64 = r.samples.iter().zip(&reference).map(|(a, b)| a * b).sum();
        let na: f64 = r.samples.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = reference.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.999);
    }

    #[test]
    fn fix_length_examples() {
        let rate = 44100;
        let three = Waveform::new(vec![0.25; 3 * rate as usize], rate).unwrap();
        let padded = fix_length(&three, 5.0);
        assert_eq!(padded.len(), 220500);
        assert!(padded.samples[220500 - 88200..].iter().all(|&x| x == 0.0));
        assert_eq!(padded.samples[..132300], three.samples[..]);

        let six = tone(10.0, rate, 6.0);
        let cut = fix_length(&six, 5.0);
        assert_eq!(cut.samples[..], six.samples[..220500]);

        let five = tone(10.0, rate, 5.0);
        assert_eq!(fix_length(&five, 5.0), five);
    }
}
