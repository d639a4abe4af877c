//! Short-time Fourier analysis and mel filterbanks shared by the feature
//! front-ends, pitch tracking and phase reconstruction.
//!
//! Frames are centred: the signal is reflect-padded by `n_fft / 2` on both
//! sides so frame `t` is centred on sample `t * hop`. Power spectra are
//! unnormalised squared magnitudes, so scaling the input by `k` scales every
//! power value by `k^2`.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::frame::FrameSpec;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window of length `win`, zero-padded and centred in `n_fft`.
pub fn hann_window(win: usize, n_fft: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_fft];
    let offset = (n_fft - win) / 2;
    for i in 0..win {
        w[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos();
    }
    w
}

/// Mirror an out-of-range index back into `[0, len)`, reflecting as often as
/// needed (numpy "reflect" mode, edge sample not repeated).
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

pub(crate) fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let n = samples.len() as isize;
    (-(pad as isize)..n + pad as isize)
        .map(|i| samples[reflect_index(i, samples.len())])
        .collect()
}

/// Triangular mel filterbank on the HTK mel scale, peak-normalised to 1.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels x n_bins`
    pub weights: Array2<f64>,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(spec: &FrameSpec) -> Self {
        let n_bins = spec.n_fft / 2 + 1;
        let mel_lo = hz_to_mel(spec.fmin);
        let mel_hi = hz_to_mel(spec.fmax);
        let edges: Vec<f64> = (0..spec.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (spec.n_mels + 1) as f64))
            .collect();
        let bin_hz = spec.sample_rate as f64 / spec.n_fft as f64;
        let mut weights = Array2::zeros((spec.n_mels, n_bins));
        for m in 0..spec.n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[[m, k]] = w;
            }
        }
        Self { weights, centers_hz: edges[1..spec.n_mels + 1].to_vec() }
    }

    /// Moore-Penrose pseudo-inverse, `n_bins x n_mels`.
    pub fn pseudo_inverse(&self) -> Array2<f64> {
        let (rows, cols) = self.weights.dim();
        let m = nalgebra::DMatrix::from_fn(rows, cols, |r, c| self.weights[[r, c]]);
        let pinv = m
            .pseudo_inverse(1e-10)
            .expect("pseudo-inverse with positive epsilon cannot fail");
        Array2::from_shape_fn((cols, rows), |(r, c)| pinv[(r, c)])
    }
}

/// Reusable STFT plan for one frame domain.
pub struct Stft {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(spec: &FrameSpec) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft: spec.n_fft,
            hop: spec.hop,
            window: hann_window(spec.win, spec.n_fft),
            forward: planner.plan_fft_forward(spec.n_fft),
            inverse: planner.plan_fft_inverse(spec.n_fft),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Complex spectra of centred frames, `T x n_bins`.
    pub fn analyze(&self, samples: &[f64]) -> Array2<Complex64> {
        let padded = reflect_pad(samples, self.n_fft / 2);
        self.analyze_padded(&padded, samples.len() / self.hop + 1)
    }

    /// Spectra of `n_frames` frames read from an already padded buffer
    /// starting at offsets `t * hop`.
    pub fn analyze_padded(&self, padded: &[f64], n_frames: usize) -> Array2<Complex64> {
        let n_bins = self.n_bins();
        let mut out = Array2::zeros((n_frames, n_bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for t in 0..n_frames {
            let start = t * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let x = padded.get(start + i).copied().unwrap_or(0.0);
                *b = Complex64::new(x * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for k in 0..n_bins {
                out[[t, k]] = buf[k];
            }
        }
        out
    }

    /// Squared-magnitude spectra of centred frames, `T x n_bins`.
    pub fn power(&self, samples: &[f64]) -> Array2<f64> {
        self.analyze(samples).mapv(|c| c.norm_sqr())
    }

    /// Least-squares inverse STFT into a padded buffer of length
    /// `(T - 1) * hop + n_fft`: overlap-add of windowed frames divided by the
    /// summed squared window.
    pub fn inverse_padded(&self, spectra: &Array2<Complex64>) -> Vec<f64> {
        let (n_frames, n_bins) = spectra.dim();
        let len = (n_frames - 1) * self.hop + self.n_fft;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for t in 0..n_frames {
            for k in 0..n_bins {
                buf[k] = spectra[[t, k]];
            }
            // Hermitian fill for a real-valued frame.
            for k in n_bins..self.n_fft {
                buf[k] = spectra[[t, self.n_fft - k]].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for i in 0..self.n_fft {
                let w = self.window[i];
                out[start + i] += buf[i].re / self.n_fft as f64 * w;
                norm[start + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            *o = if *n > 1e-10 { *o / n } else { 0.0 };
        }
        out
    }
}

/// Power periodogram with a Hann window, zero-padded to the next power of two
/// at least `min_fft`. Returns `(bin_hz, power)`.
pub fn periodogram(samples: &[f32], sample_rate: u32, min_fft: usize) -> (f64, Vec<f64>) {
    let n = samples.len();
    let n_fft = n.max(min_fft).next_power_of_two();
    let mut buf: Vec<Complex64> = samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
            Complex64::new(x as f64 * w, 0.0)
        })
        .collect();
    buf.resize(n_fft, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    let power = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
    (sample_rate as f64 / n_fft as f64, power)
}

/// Frequency in Hz of the periodogram maximum, refined by parabolic
/// interpolation on the log-power.
pub fn peak_frequency(samples: &[f32], sample_rate: u32) -> f64 {
    let (bin_hz, power) = periodogram(samples, sample_rate, 1 << 16);
    let (k, _) = power
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::MIN), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
    let offset = if k + 1 < power.len() {
        let (a, b, c) = (power[k - 1].ln(), power[k].ln(), power[k + 1].ln());
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-12 {
            0.5 * (a - c) / denom
        } else {
            0.0
        }
    } else {
        0.0
    };
    (k as f64 + offset) * bin_hz
}
