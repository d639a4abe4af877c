//! Objective measures: periodogram harmonic-to-noise ratio, mel-cepstral
//! distortion and duration error.

use ndarray::Array2;

use crate::aligner::interpolate_frames;
use crate::error::{Error, Result};
use crate::frame::{MelSpectrogram, Waveform};
use crate::prosody::autocorrelation_f0;
use crate::spectral::periodogram;

#[derive(Debug, Clone, PartialEq)]
pub struct HnrConfig {
    pub window: usize,
    pub hop: usize,
    /// Highest frequency considered, in Hz.
    pub max_hz: f64,
    /// Frames more than this many dB below the loudest are ignored.
    pub activity_db: f64,
}

impl Default for HnrConfig {
    fn default() -> Self {
        Self { window: 2048, hop: 512, max_hz: 3000.0, activity_db: 30.0 }
    }
}

/// Harmonic-to-noise ratio of one frame in dB: mean periodogram power in
/// bands around multiples of the autocorrelation F0 over mean power
/// elsewhere, between F0/2 and `max_hz`. White noise scores about 0 dB.
fn frame_hnr(frame: &[f32], sample_rate: u32, cfg: &HnrConfig) -> f64 {
    let x: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
    let Some((f0, _)) = autocorrelation_f0(&x, sample_rate as f64) else {
        return 0.0;
    };
    let (bin_hz, power) = periodogram(frame, sample_rate, 8192);
    let half_width = (2.0 * sample_rate as f64 / cfg.window as f64).min(f0 / 4.0);
    let (mut h, mut nh, mut n, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for (k, &p) in power.iter().enumerate() {
        let f = k as f64 * bin_hz;
        if f < f0 / 2.0 || f > cfg.max_hz {
            continue;
        }
        let harmonic = (f / f0).round().max(1.0) * f0;
        if (f - harmonic).abs() <= half_width {
            h += p;
            nh += 1;
        } else {
            n += p;
            nn += 1;
        }
    }
    if nh == 0 || nn == 0 || h <= 0.0 {
        return 0.0;
    }
    let noise = (n / nn as f64).max(1e-30);
    10.0 * ((h / nh as f64) / noise).log10()
}

/// Energy-weighted mean frame HNR over the active frames, in dB.
pub fn harmonic_to_noise_ratio(w: &Waveform, cfg: &HnrConfig) -> Result<f64> {
    if w.len() < cfg.window {
        return Err(Error::InputTooShort { len: w.len(), min: cfg.window });
    }
    let starts: Vec<usize> = (0..=(w.len() - cfg.window)).step_by(cfg.hop.max(1)).collect();
    let energy: Vec<f64> =
        starts.iter().map(|&s| w.samples[s..s + cfg.window].iter().map(|&v| (v as f64).powi(2)).sum()).collect();
    let peak = energy.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(0.0);
    }
    let floor = peak * 10f64.powf(-cfg.activity_db / 10.0);
    let (mut acc, mut weight) = (0.0, 0.0);
    for (&s, &e) in starts.iter().zip(&energy) {
        if e >= floor {
            acc += e * frame_hnr(&w.samples[s..s + cfg.window], w.sample_rate, cfg);
            weight += e;
        }
    }
    Ok(acc / weight)
}

/// Coefficients `1..=n` of the orthonormal DCT-II of the log-amplitude mel
/// spectrum, one row per frame.
pub fn mel_cepstrum(log_mel: &Array2<f64>, n: usize) -> Array2<f64> {
    let m = log_mel.ncols();
    let basis = Array2::from_shape_fn((m, n), |(j, k)| {
        let k = k + 1;
        (2.0 / m as f64).sqrt() * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / m as f64).cos()
    });
    log_mel.mapv(|v| 0.5 * v).dot(&basis)
}

pub const MCD_COEFFS: usize = 24;

/// Mel-cepstral distortion in dB after stretching `converted` to the
/// reference length by linear interpolation.
pub fn mel_cepstral_distortion(converted: &MelSpectrogram, reference: &MelSpectrogram) -> Result<f64> {
    converted.check_domain(&reference.spec)?;
    if reference.n_frames() == 0 || converted.n_frames() == 0 {
        return Err(Error::Argument("distortion needs non-empty spectrograms".into()));
    }
    let stretched = interpolate_frames(&converted.frames, reference.n_frames())?;
    let a = mel_cepstrum(&stretched, MCD_COEFFS);
    let b = mel_cepstrum(&reference.frames, MCD_COEFFS);
    let scale = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt();
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(scale * total / reference.n_frames() as f64)
}

/// Absolute frame-count difference.
pub fn duration_error(actual_frames: usize, expected_frames: usize) -> f64 {
    actual_frames.abs_diff(expected_frames) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_pair, SynthSpec};
    use crate::frame::{compute_mel, FrameSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone_plus_noise(noise: f32) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples = (0..22050)
            .map(|i| {
                let t = i as f64 / 22050.0;
                let h: f64 = (1..=10).map(|k| (2.0 * std::f64::consts::PI * 150.0 * k as f64 * t).sin() / k as f64).sum();
                0.1 * h as f32 + noise * rng.random_range(-1.0f32..1.0)
            })
            .collect();
        Waveform { samples, sample_rate: 22050 }
    }

    #[test]
    fn hnr_orders_by_noise_level() {
        let cfg = HnrConfig::default();
        let clean = harmonic_to_noise_ratio(&tone_plus_noise(0.001), &cfg).unwrap();
        let mid = harmonic_to_noise_ratio(&tone_plus_noise(0.05), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let white = Waveform { samples: (0..22050).map(|_| rng.random_range(-0.3f32..0.3)).collect(), sample_rate: 22050 };
        let noise = harmonic_to_noise_ratio(&white, &cfg).unwrap();
        assert!(clean > mid && mid > noise, "{clean} {mid} {noise}");
        assert!(noise.abs() < 3.0, "{noise}");
    }

    #[test]
    fn synthetic_pairs_differ_in_harmonicity() {
        let spec = SynthSpec::new(2, 4, 21);
        let cfg = HnrConfig::default();
        for k in 0..2 {
            for u in 0..4 {
                let p = synth_pair(&spec, k, u).unwrap();
                let n = harmonic_to_noise_ratio(&p.normal, &cfg).unwrap();
                let w = harmonic_to_noise_ratio(&p.whisper, &cfg).unwrap();
                // 5x in linear power.
                assert!(n - w > 10.0 * 5f64.log10(), "speaker {k} utt {u}: normal {n} dB, whisper {w} dB");
            }
        }
    }

    #[test]
    fn self_distortion_is_zero() {
        let p = synth_pair(&SynthSpec::new(1, 1, 3), 0, 0).unwrap();
        let spec = FrameSpec::synthesis_22k();
        let mel = compute_mel(&p.normal, &spec).unwrap();
        assert_eq!(mel_cepstral_distortion(&mel, &mel).unwrap(), 0.0);
        let other = compute_mel(&p.whisper, &spec).unwrap();
        assert!(mel_cepstral_distortion(&other, &mel).unwrap() > 1.0);
    }

    #[test]
    fn cepstrum_of_constant_spectrum_vanishes() {
        let c = mel_cepstrum(&Array2::from_elem((3, 80), -2.0), 24);
        assert!(c.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn distortion_matches_direct_formula() {
        let spec = FrameSpec::synthesis_22k();
        let a = MelSpectrogram { frames: Array2::zeros((2, 80)), spec: spec.clone() };
        let mut f = Array2::zeros((2, 80));
        // A pure first cosine with unit cepstral weight in both frames.
        for j in 0..80 {
            f[[0, j]] = 2.0 * (2.0f64 / 80.0).sqrt() * (std::f64::consts::PI * (j as f64 + 0.5) / 80.0).cos();
        }
        let first = f.row(0).to_owned();
        f.row_mut(1).assign(&first);
        let b = MelSpectrogram { frames: f, spec };
        let expected = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt();
        assert!((mel_cepstral_distortion(&a, &b).unwrap() - expected).abs() < 1e-5);
        assert_eq!(duration_error(170, 172), 2.0);
    }
}
