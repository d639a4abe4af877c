//! Mel inversion by pseudo-inverse filterbank and Griffin-Lim phase
//! reconstruction. Used when no trained vocoder is available.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::frame::{MelSpectrogram, Waveform, LOG_FLOOR};
use crate::spectral::{MelFilterbank, Stft};

#[derive(Debug, Clone)]
pub struct GriffinLimOutput {
    pub waveform: Waveform,
    /// Spectral convergence `||S - |STFT(x_k)||| / ||S||` before the first
    /// iteration and after each one.
    pub convergence: Vec<f64>,
}

/// Linear magnitude spectrogram `T x n_bins` recovered from a log-mel.
pub fn mel_to_magnitude(mel: &MelSpectrogram) -> Array2<f64> {
    let pinv = MelFilterbank::new(&mel.spec).pseudo_inverse();
    let lin = mel.frames.mapv(|v| (v.exp() - LOG_FLOOR).max(0.0));
    lin.dot(&pinv.t()).mapv(|p| p.max(0.0).sqrt())
}

fn spectral_convergence(target: &Array2<f64>, spectra: &Array2<Complex64>) -> f64 {
    let denom = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    let num = target.iter().zip(spectra.iter()).map(|(s, c)| (s - c.norm()).powi(2)).sum::<f64>().sqrt();
    if denom > 0.0 {
        num / denom
    } else {
        num
    }
}

/// Reconstruct `T * hop` samples from a log-mel with `n_iters` iterations.
pub fn griffin_lim(mel: &MelSpectrogram, n_iters: usize, seed: u64) -> Result<GriffinLimOutput> {
    let spec = &mel.spec;
    spec.validate()?;
    if mel.frames.ncols() != spec.n_mels || mel.n_frames() == 0 {
        return Err(Error::Shape(format!("mel {:?} does not match {} bins", mel.frames.dim(), spec.n_mels)));
    }
    if 2 * spec.hop > spec.n_fft {
        return Err(Error::Argument("griffin-lim needs hop <= n_fft / 2".into()));
    }
    let stft = Stft::new(spec);
    let target = mel_to_magnitude(mel);
    let t = target.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectra = target.mapv(|m| Complex64::from_polar(m, rng.random_range(0.0..std::f64::consts::TAU)));
    let mut buffer = stft.inverse_padded(&spectra);
    let mut convergence = Vec::with_capacity(n_iters + 1);
    let mut current = stft.analyze_padded(&buffer, t);
    convergence.push(spectral_convergence(&target, &current));
    for _ in 0..n_iters {
        for ((s, c), m) in spectra.iter_mut().zip(current.iter()).zip(target.iter()) {
            let n = c.norm();
            *s = if n > 1e-12 { c * (*m / n) } else { Complex64::new(*m, 0.0) };
        }
        buffer = stft.inverse_padded(&spectra);
        current = stft.analyze_padded(&buffer, t);
        convergence.push(spectral_convergence(&target, &current));
    }
    let start = spec.n_fft / 2;
    let samples = buffer[start..start + t * spec.hop].iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect();
    Ok(GriffinLimOutput { waveform: Waveform { samples, sample_rate: spec.sample_rate }, convergence })
}
