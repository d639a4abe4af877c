//! Frame domains, waveforms and log-mel front-end.
//!
//! Two domains are used throughout: the 16 kHz analysis domain consumed by the
//! content encoder and the 22.05 kHz synthesis domain produced by the acoustic
//! model and vocoder.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{MelFilterbank, Stft};

/// Floor added to mel energies before the natural log.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub sample_rate: u32,
    pub hop: usize,
    pub win: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl FrameSpec {
    /// 16 kHz analysis domain: 10 ms hop, 25 ms window.
    pub fn analysis_16k() -> Self {
        Self { sample_rate: 16_000, hop: 160, win: 400, n_fft: 400, n_mels: 80, fmin: 0.0, fmax: 8000.0 }
    }

    /// 22.05 kHz synthesis domain.
    pub fn synthesis_22k() -> Self {
        Self { sample_rate: 22_050, hop: 256, win: 1024, n_fft: 1024, n_mels: 80, fmin: 0.0, fmax: 8000.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sample_rate > 0
            && self.hop >= 1
            && self.win >= 1
            && self.win <= self.n_fft
            && self.n_mels >= 1
            && self.fmin >= 0.0
            && self.fmin < self.fmax
            && self.fmax <= self.sample_rate as f64 / 2.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid frame spec {self:?}")))
        }
    }

    /// Seconds between consecutive frames.
    pub fn frame_period(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|&x| (x as f64).powi(2)).sum();
        (ss / self.samples.len() as f64).sqrt()
    }

    /// Reject empty or non-finite signals.
    pub fn check(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Argument("empty waveform".into()));
        }
        if self.samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::Argument("waveform contains non-finite samples".into()));
        }
        Ok(())
    }

    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = hound::WavReader::open(path).map_err(|e| match e {
            hound::Error::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::format(path, format!("expected mono, found {} channels", spec.channels)));
        }
        let samples: std::result::Result<Vec<f32>, _> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect(),
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect(),
            (fmt, bits) => {
                return Err(Error::format(path, format!("unsupported sample format {fmt:?}/{bits}-bit")))
            }
        };
        let samples = samples.map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self { samples, sample_rate: spec.sample_rate })
    }

    /// Like [`Waveform::read_wav`], but rejects files whose header rate differs
    /// from `expected_rate`.
    pub fn read_wav_checked(path: impl AsRef<Path>, expected_rate: u32) -> Result<Self> {
        let w = Self::read_wav(path.as_ref())?;
        if w.sample_rate != expected_rate {
            return Err(Error::format(
                path.as_ref(),
                format!("sample rate {} does not match expected {}", w.sample_rate, expected_rate),
            ));
        }
        Ok(w)
    }

    /// Write as 32-bit float mono WAV.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
        for &s in &self.samples {
            writer.write_sample(s)?;
        }
        writer.finalize()?;
        Ok(())
    }

    /// Write as 16-bit PCM mono WAV, clipping to [-1, 1].
    pub fn write_wav_pcm16(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
        for &s in &self.samples {
            writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// `T x n_mels` natural-log mel energies.
    pub frames: Array2<f64>,
    pub spec: FrameSpec,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn check_domain(&self, spec: &FrameSpec) -> Result<()> {
        if &self.spec != spec {
            return Err(Error::Domain(format!(
                "mel is in the {} Hz domain, expected {} Hz",
                self.spec.sample_rate, spec.sample_rate
            )));
        }
        if self.frames.ncols() != spec.n_mels {
            return Err(Error::Shape(format!("mel has {} bins, spec says {}", self.frames.ncols(), spec.n_mels)));
        }
        Ok(())
    }
}

/// Frame count under the centre-padded convention.
pub fn num_frames(n_samples: usize, spec: &FrameSpec) -> Result<usize> {
    if n_samples < spec.win {
        return Err(Error::InputTooShort { len: n_samples, min: spec.win });
    }
    Ok(n_samples / spec.hop + 1)
}

/// Log-mel spectrogram of a waveform in the domain described by `spec`.
pub fn compute_mel(w: &Waveform, spec: &FrameSpec) -> Result<MelSpectrogram> {
    if w.sample_rate != spec.sample_rate {
        return Err(Error::Domain(format!(
            "waveform at {} Hz cannot be analysed in the {} Hz domain",
            w.sample_rate, spec.sample_rate
        )));
    }
    let n = num_frames(w.len(), spec)?;
    let samples: Vec<f64> = w.samples.iter().map(|&x| x as f64).collect();
    let power = Stft::new(spec).power(&samples);
    debug_assert_eq!(power.nrows(), n);
    let fb = MelFilterbank::new(spec);
    let mel = power.dot(&fb.weights.t());
    Ok(MelSpectrogram { frames: mel.mapv(|e| (e + LOG_FLOOR).ln()), spec: spec.clone() })
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// Output length is `round(len * target / source)`.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Argument("target sample rate must be positive".into()));
    }
    if w.is_empty() {
        return Err(Error::Argument("cannot resample an empty waveform".into()));
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let src = w.sample_rate as u64;
    let dst = target_rate as u64;
    let out_len = ((w.len() as u64 * dst + src / 2) / src) as usize;
    let ratio = dst as f64 / src as f64;
    // Normalised cutoff relative to the source Nyquist.
    let cutoff = ratio.min(1.0) * 0.96;
    const ZERO_CROSSINGS: f64 = 24.0;
    let half_width = ZERO_CROSSINGS / cutoff;
    let n_in = w.len() as isize;
    let out = (0..out_len)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = (t - half_width).ceil() as isize;
            let hi = (t + half_width).floor() as isize;
            let mut acc = 0.0;
            for i in lo.max(0)..=hi.min(n_in - 1) {
                let x = i as f64 - t;
                let arg = cutoff * x;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                let win = 0.5 + 0.5 * (PI * x / half_width).cos();
                acc += w.samples[i as usize] as f64 * cutoff * sinc * win;
            }
            acc as f32
        })
        .collect();
    Ok(Waveform::new(out, target_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, n: usize, amp: f64) -> Waveform {
        Waveform::new(
            (0..n).map(|i| (amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32).collect(),
            rate,
        )
    }

    #[test]
    fn num_frames_examples() {
        let s16 = FrameSpec::analysis_16k();
        let s22 = FrameSpec::synthesis_22k();
        assert_eq!(num_frames(16000, &s16).unwrap(), 101);
        assert_eq!(num_frames(22050, &s22).unwrap(), 87);
        let spec = FrameSpec { win: 100, n_fft: 100, hop: 100, ..s16.clone() };
        assert_eq!(num_frames(100, &spec).unwrap(), 2);
        assert!(matches!(num_frames(399, &s16), Err(Error::InputTooShort { .. })));
    }

    #[test]
    fn num_frames_steps_once_per_hop() {
        let s = FrameSpec::analysis_16k();
        let mut prev = num_frames(s.win, &s).unwrap();
        for n in s.win + 1..s.win + 2000 {
            let cur = num_frames(n, &s).unwrap();
            assert!(cur == prev || (cur == prev + 1 && n % s.hop == 0));
            prev = cur;
        }
    }

    #[test]
    fn default_specs_are_valid() {
        FrameSpec::analysis_16k().validate().unwrap();
        FrameSpec::synthesis_22k().validate().unwrap();
        let bad = FrameSpec { fmax: 9000.0, ..FrameSpec::analysis_16k() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn silence_is_log_floor() {
        let s = FrameSpec::analysis_16k();
        let mel = compute_mel(&Waveform::new(vec![0.0; 16000], 16000), &s).unwrap();
        assert_eq!(mel.frames.dim(), (101, 80));
        let floor = LOG_FLOOR.ln();
        assert!(mel.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn tone_peaks_in_nearest_mel_bin() {
        let s = FrameSpec::analysis_16k();
        let fb = MelFilterbank::new(&s);
        // Nearest centre frequency to 1 kHz from the filterbank's own table.
        let expected = fb
            .centers_hz
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let mel = compute_mel(&sine(1000.0, 16000, 16000, 0.5), &s).unwrap();
        // The first and last two frames overlap the reflected padding, which
        // breaks the tone's phase continuity and smears its spectrum.
        let edge = s.n_fft.div_ceil(2 * s.hop);
        let n = mel.n_frames();
        for row in mel.frames.slice(ndarray::s![edge..n - edge, ..]).rows() {
            let arg = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(arg, expected);
        }
    }

    #[test]
    fn rate_mismatch_is_domain_error() {
        let w = Waveform::new(vec![0.0; 22050], 22050);
        assert!(matches!(compute_mel(&w, &FrameSpec::analysis_16k()), Err(Error::Domain(_))));
    }

    #[test]
    fn resample_identity_and_length() {
        let w = sine(440.0, 16000, 16000, 0.5);
        assert_eq!(resample(&w, 16000).unwrap(), w);
        let w22 = sine(440.0, 22050, 22050, 0.5);
        let r = resample(&w22, 16000).unwrap();
        assert_eq!(r.len(), 16000);
        assert_eq!(r.sample_rate, 16000);
    }

    #[test]
    fn resample_preserves_tone_frequency() {
        let w22 = sine(440.0, 22050, 22050, 0.5);
        let r = resample(&w22, 16000).unwrap();
        let f = crate::spectral::peak_frequency(&r.samples, 16000);
        assert!((f - 440.0).abs() < 1.0, "{f}");
    }

    #[test]
    fn wav_round_trip_float_and_pcm() {
        let dir = tempfile::tempdir().unwrap();
        let w = sine(300.0, 22050, 2048, 0.4);
        let p = dir.path().join("a.wav");
        w.write_wav(&p).unwrap();
        assert_eq!(Waveform::read_wav(&p).unwrap(), w);
        let q = dir.path().join("b.wav");
        w.write_wav_pcm16(&q).unwrap();
        let back = Waveform::read_wav_checked(&q, 22050).unwrap();
        assert!(back.samples.iter().zip(&w.samples).all(|(a, b)| (a - b).abs() < 1e-4));
        assert!(Waveform::read_wav_checked(&q, 16000).is_err());
    }
}
