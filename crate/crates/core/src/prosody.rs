//! Frame-level pitch and energy targets in the 22.05 kHz frame grid.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{num_frames, FrameSpec, MelSpectrogram, Waveform, LOG_FLOOR};

pub const F0_MIN: f64 = 50.0;
pub const F0_MAX: f64 = 600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchConfig {
    /// Analysis window in samples, centred on each frame.
    pub window: usize,
    /// Minimum normalised autocorrelation peak for a voiced frame.
    pub voicing_threshold: f64,
    /// Frames quieter than this RMS are unvoiced.
    pub silence_rms: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self { window: 1024, voicing_threshold: 0.6, silence_rms: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProsodyTargets {
    /// log-Hz on voiced frames, 0 elsewhere.
    pub pitch: Vec<f32>,
    /// Linear frame energy.
    pub energy: Vec<f32>,
    pub voicing: Vec<bool>,
}

impl ProsodyTargets {
    pub fn new(pitch: Vec<f32>, energy: Vec<f32>, voicing: Vec<bool>) -> Result<Self> {
        if pitch.len() != energy.len() || pitch.len() != voicing.len() {
            return Err(Error::Shape(format!(
                "prosody lengths differ: pitch {}, energy {}, voicing {}",
                pitch.len(),
                energy.len(),
                voicing.len()
            )));
        }
        if pitch.iter().any(|p| !p.is_finite()) || energy.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::Argument("prosody values must be finite with non-negative energy".into()));
        }
        Ok(Self { pitch, energy, voicing })
    }

    pub fn len(&self) -> usize {
        self.pitch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitch.is_empty()
    }

    /// Pitch, energy and voicing as a `(T, 3)` matrix for the feature container.
    pub fn to_matrix(&self) -> Array2<f32> {
        Array2::from_shape_fn((self.len(), 3), |(t, k)| match k {
            0 => self.pitch[t],
            1 => self.energy[t],
            _ => self.voicing[t] as u8 as f32,
        })
    }

    pub fn from_matrix(m: &Array2<f32>) -> Result<Self> {
        if m.ncols() != 3 {
            return Err(Error::Shape(format!("prosody matrix needs 3 columns, got {}", m.ncols())));
        }
        Self::new(m.column(0).to_vec(), m.column(1).to_vec(), m.column(2).iter().map(|&v| v > 0.5).collect())
    }

    /// Crop or edge-pad every contour to `t` frames.
    pub fn fit_length(&self, t: usize) -> Self {
        fn fit<T: Clone + Default>(v: &[T], t: usize) -> Vec<T> {
            (0..t).map(|i| v.get(i.min(v.len().saturating_sub(1))).cloned().unwrap_or_default()).collect()
        }
        Self { pitch: fit(&self.pitch, t), energy: fit(&self.energy, t), voicing: fit(&self.voicing, t) }
    }
}

fn frame_at(samples: &[f32], center: usize, window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..window)
        .map(|i| {
            let idx = center as isize + i as isize - half as isize;
            if idx < 0 || idx as usize >= samples.len() {
                0.0
            } else {
                samples[idx as usize] as f64
            }
        })
        .collect()
}

fn normalized_autocorrelation(x: &[f64], lag: usize) -> f64 {
    let n = x.len() - lag;
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        xy += x[i] * x[i + lag];
        xx += x[i] * x[i];
        yy += x[i + lag] * x[i + lag];
    }
    let d = (xx * yy).sqrt();
    if d > 0.0 {
        xy / d
    } else {
        0.0
    }
}

/// Best autocorrelation period in 50-600 Hz, ignoring voicing: `(f0, peak)`.
/// Picks the shortest lag whose peak is within 85% of the global best to
/// avoid sub-octave errors, then refines it parabolically.
pub(crate) fn autocorrelation_f0(x: &[f64], sample_rate: f64) -> Option<(f64, f64)> {
    let min_lag = (sample_rate / F0_MAX).floor().max(2.0) as usize;
    let max_lag = ((sample_rate / F0_MIN).ceil() as usize).min(x.len() / 2);
    if min_lag + 2 > max_lag {
        return None;
    }
    let r: Vec<f64> = (min_lag - 1..=max_lag + 1).map(|l| normalized_autocorrelation(x, l)).collect();
    let at = |lag: usize| r[lag + 1 - min_lag];
    let best = (min_lag..=max_lag).map(at).fold(f64::NEG_INFINITY, f64::max);
    let lag = (min_lag..=max_lag).find(|&l| {
        let v = at(l);
        v >= 0.85 * best && v >= at(l - 1) && v >= at(l + 1)
    })?;
    let (a, b, c) = (at(lag - 1), at(lag), at(lag + 1));
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    Some((sample_rate / (lag as f64 + shift), best))
}

/// F0 of one frame in Hz, or `None` when unvoiced.
fn frame_f0(x: &[f64], sample_rate: f64, cfg: &PitchConfig) -> Option<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms < cfg.silence_rms {
        return None;
    }
    let (f0, best) = autocorrelation_f0(x, sample_rate)?;
    if best < cfg.voicing_threshold {
        return None;
    }
    (F0_MIN..=F0_MAX).contains(&f0).then_some(f0)
}

/// Autocorrelation pitch track: log-Hz contour and voicing mask, one value
/// per synthesis frame.
pub fn extract_pitch(w: &Waveform, spec22: &FrameSpec, cfg: &PitchConfig) -> Result<(Vec<f32>, Vec<bool>)> {
    if w.sample_rate != spec22.sample_rate {
        return Err(Error::Domain(format!("pitch tracker expects {} Hz audio, got {}", spec22.sample_rate, w.sample_rate)));
    }
    let t = num_frames(w.len(), spec22)?;
    let sr = w.sample_rate as f64;
    let mut pitch = Vec::with_capacity(t);
    let mut voicing = Vec::with_capacity(t);
    for i in 0..t {
        let frame = frame_at(&w.samples, i * spec22.hop, cfg.window);
        match frame_f0(&frame, sr, cfg) {
            Some(f0) => {
                pitch.push(f0.ln() as f32);
                voicing.push(true);
            }
            None => {
                pitch.push(0.0);
                voicing.push(false);
            }
        }
    }
    Ok((pitch, voicing))
}

/// Per-frame L2 norm of the linear mel energies.
pub fn extract_energy(mel22: &MelSpectrogram) -> Vec<f32> {
    mel22
        .frames
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .map(|&v| {
                    let lin = (v.exp() - LOG_FLOOR).max(0.0);
                    lin * lin
                })
                .sum::<f64>()
                .sqrt() as f32
        })
        .collect()
}

pub fn extract_prosody(w: &Waveform, mel22: &MelSpectrogram, cfg: &PitchConfig) -> Result<ProsodyTargets> {
    let (pitch, voicing) = extract_pitch(w, &mel22.spec, cfg)?;
    if pitch.len() != mel22.n_frames() {
        return Err(Error::Shape(format!("pitch track has {} frames, mel has {}", pitch.len(), mel22.n_frames())));
    }
    ProsodyTargets::new(pitch, extract_energy(mel22), voicing)
}
