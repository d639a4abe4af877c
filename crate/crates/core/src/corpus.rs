//! Synthetic paired whisper/normal corpus, manifest ingestion and speaker
//! embedding providers.
//!
//! Each utterance is a token sequence rendered twice through the same
//! source-filter model: a glottal pulse train for normal speech and white
//! noise for the whisper, whose formants are shifted up, energy lowered and
//! token durations stretched by a per-utterance tempo ratio.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acoustic::{EmbeddingSource, SpeakerEmbedding, SPEAKER_DIM};
use crate::error::{Error, Result};
use crate::features::read_matrix;
use crate::frame::{compute_mel, resample, FrameSpec, Waveform};

pub const CORPUS_RATE: u32 = 22_050;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phone {
    pub symbol: String,
    /// F1, F2, F3 in Hz.
    pub formants: [f64; 3],
    /// Pitch target offset in semitones.
    pub f0_offset: f64,
}

fn phone(symbol: &str, formants: [f64; 3], f0_offset: f64) -> Phone {
    Phone { symbol: symbol.to_string(), formants, f0_offset }
}

pub fn default_inventory() -> Vec<Phone> {
    vec![
        phone("a", [730.0, 1090.0, 2440.0], 0.0),
        phone("i", [270.0, 2290.0, 3010.0], 3.0),
        phone("u", [300.0, 870.0, 2240.0], -2.0),
        phone("e", [530.0, 1840.0, 2480.0], 1.5),
        phone("o", [570.0, 840.0, 2410.0], -1.0),
        phone("ae", [660.0, 1720.0, 2410.0], 2.0),
        phone("er", [490.0, 1350.0, 1690.0], -3.0),
        phone("uh", [520.0, 1190.0, 2390.0], 0.5),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub phone_inventory: Vec<Phone>,
    /// Per-speaker F0 interval in Hz.
    pub f0_ranges: Vec<(f64, f64)>,
    /// Per-speaker multiplier on every formant (vocal tract length).
    pub formant_scales: Vec<f64>,
    pub whisper_energy_drop_db: f64,
    pub whisper_formant_shift: f64,
    pub tempo_ratio_range: (f64, f64),
    pub tokens_per_utterance: (usize, usize),
    /// Token duration interval in seconds.
    pub token_duration: (f64, f64),
    /// Whole-waveform RMS of the normal rendering.
    pub normal_rms: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Speakers spread geometrically over 90-260 Hz, vocal-tract scales over 1.0-1.15.
    pub fn new(n_speakers: usize, utterances_per_speaker: usize, seed: u64) -> Self {
        let span = (n_speakers.max(2) - 1) as f64;
        let f0_ranges = (0..n_speakers)
            .map(|k| {
                let lo = 90.0 * (2.3f64).powf(k as f64 / span);
                (lo, lo * 1.25)
            })
            .collect();
        let formant_scales = (0..n_speakers).map(|k| 1.0 + 0.15 * k as f64 / span).collect();
        Self {
            n_speakers,
            utterances_per_speaker,
            phone_inventory: default_inventory(),
            f0_ranges,
            formant_scales,
            whisper_energy_drop_db: 12.0,
            whisper_formant_shift: 1.1,
            tempo_ratio_range: (0.85, 1.15),
            tokens_per_utterance: (4, 7),
            token_duration: (0.09, 0.16),
            normal_rms: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(format!("synth spec: {m}")));
        if self.whisper_energy_drop_db <= 0.0 {
            return bad("whisper_energy_drop_db must be positive");
        }
        if self.whisper_formant_shift <= 1.0 {
            return bad("whisper_formant_shift must exceed 1");
        }
        let (lo, hi) = self.tempo_ratio_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad("tempo ratios must be positive and ordered");
        }
        if self.f0_ranges.len() != self.n_speakers || self.formant_scales.len() != self.n_speakers {
            return bad("per-speaker tables must have n_speakers entries");
        }
        if self.f0_ranges.iter().any(|&(a, b)| !(a >= 50.0 && a <= b && b <= 600.0)) {
            return bad("F0 ranges must lie in 50-600 Hz");
        }
        if self.phone_inventory.is_empty() {
            return bad("empty phone inventory");
        }
        let (tmin, tmax) = self.tokens_per_utterance;
        let (dmin, dmax) = self.token_duration;
        if tmin == 0 || tmin > tmax || !(dmin > 0.0 && dmin <= dmax) {
            return bad("token counts and durations must be positive and ordered");
        }
        Ok(())
    }

    pub fn speaker_name(k: usize) -> String {
        format!("spk{k:02}")
    }

    pub fn speakers(&self) -> Vec<String> {
        (0..self.n_speakers).map(Self::speaker_name).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub normal: Waveform,
    pub whisper: Waveform,
    pub tokens: Vec<String>,
    pub tempo_ratio: f64,
    /// Per-sample F0 of the normal rendering in Hz.
    pub f0_track: Vec<f64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b)
}

/// 64-bit FNV-1a, stable across platforms and releases.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Two-pole resonator with unity gain at DC.
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new() -> Self {
        Self { y1: 0.0, y2: 0.0 }
    }

    fn step(&mut self, x: f64, freq: f64, bw: f64, sr: f64) -> f64 {
        let t = 1.0 / sr;
        let c = -(-2.0 * std::f64::consts::PI * bw * t).exp();
        let b = 2.0 * (-std::f64::consts::PI * bw * t).exp() * (2.0 * std::f64::consts::PI * freq * t).cos();
        let a = 1.0 - b - c;
        let y = a * x + b * self.y1 + c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

const BANDWIDTHS: [f64; 3] = [80.0, 110.0, 160.0];
const EDGE_SILENCE: f64 = 0.04;
const FADE: f64 = 0.01;

/// Piecewise-linear interpolation of per-token targets through token centres.
fn token_track(durations: &[usize], values: &[f64], n: usize) -> Vec<f64> {
    let mut centres = Vec::with_capacity(durations.len());
    let mut acc = 0usize;
    for &d in durations {
        centres.push(acc as f64 + d as f64 / 2.0);
        acc += d;
    }
    (0..n)
        .map(|i| {
            let t = i as f64;
            if t <= centres[0] {
                return values[0];
            }
            for k in 1..centres.len() {
                if t <= centres[k] {
                    let w = (t - centres[k - 1]) / (centres[k] - centres[k - 1]);
                    return values[k - 1] + w * (values[k] - values[k - 1]);
                }
            }
            values[values.len() - 1]
        })
        .collect()
}

fn render(excitation: &[f64], formants: &[[f64; 3]], sr: f64) -> Vec<f64> {
    let mut rs = [Resonator::new(), Resonator::new(), Resonator::new()];
    let mut prev = 0.0;
    excitation
        .iter()
        .zip(formants)
        .map(|(&x, f)| {
            let mut y = x;
            for (k, r) in rs.iter_mut().enumerate() {
                y = r.step(y, f[k], BANDWIDTHS[k], sr);
            }
            // Lip radiation.
            let out = y - prev;
            prev = y;
            out
        })
        .collect()
}

fn finish(body: Vec<f64>, sr: f64, rms: f64) -> Waveform {
    let pad = (EDGE_SILENCE * sr).round() as usize;
    let fade = ((FADE * sr).round() as usize).max(1);
    let n = body.len();
    let mut out = vec![0.0; pad];
    for (i, v) in body.into_iter().enumerate() {
        let edge = i.min(n - 1 - i);
        let g = if edge < fade { 0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / fade as f64).cos() } else { 1.0 };
        out.push(v * g);
    }
    out.extend(std::iter::repeat_n(0.0, pad));
    let cur = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    let gain = if cur > 0.0 { rms / cur } else { 0.0 };
    Waveform { samples: out.iter().map(|v| (v * gain) as f32).collect(), sample_rate: CORPUS_RATE }
}

/// Render one paired utterance. Deterministic per `(spec.seed, speaker, utt_index)`.
pub fn synth_pair(spec: &SynthSpec, speaker: usize, utt_index: usize) -> Result<SynthPair> {
    spec.validate()?;
    if speaker >= spec.n_speakers {
        return Err(Error::Argument(format!("unknown speaker index {speaker}; spec has {}", spec.n_speakers)));
    }
    let sr = CORPUS_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, speaker as u64, utt_index as u64));
    let (tmin, tmax) = spec.tokens_per_utterance;
    let n_tokens = rng.random_range(tmin..=tmax);
    let phones: Vec<&Phone> = (0..n_tokens).map(|_| &spec.phone_inventory[rng.random_range(0..spec.phone_inventory.len())]).collect();
    let (dmin, dmax) = spec.token_duration;
    let secs: Vec<f64> = (0..n_tokens).map(|_| if dmin < dmax { rng.random_range(dmin..dmax) } else { dmin }).collect();
    let (f_lo, f_hi) = spec.f0_ranges[speaker];
    let base_f0 = if f_lo < f_hi { rng.random_range(f_lo..f_hi) } else { f_lo };
    let (r_lo, r_hi) = spec.tempo_ratio_range;
    let tempo = if r_lo < r_hi { rng.random_range(r_lo..r_hi) } else { r_lo };
    let scale = spec.formant_scales[speaker];

    let formant_targets: Vec<[f64; 3]> = phones.iter().map(|p| p.formants.map(|f| f * scale)).collect();
    let tracks = |durs: &[usize], shift: f64| -> Vec<[f64; 3]> {
        let n: usize = durs.iter().sum();
        let per: Vec<Vec<f64>> =
            (0..3).map(|k| token_track(durs, &formant_targets.iter().map(|f| f[k] * shift).collect::<Vec<_>>(), n)).collect();
        (0..n).map(|i| [per[0][i], per[1][i], per[2][i]]).collect()
    };

    // Normal: glottal pulse train following a per-token F0 contour.
    let durs: Vec<usize> = secs.iter().map(|s| (s * sr).round() as usize).collect();
    let n: usize = durs.iter().sum();
    let f0_targets: Vec<f64> = phones.iter().map(|p| base_f0 * 2f64.powf(p.f0_offset / 12.0)).collect();
    let f0_track = token_track(&durs, &f0_targets, n);
    let mut phase = 0.0;
    let mut glottal = Resonator::new();
    let pulses: Vec<f64> = f0_track
        .iter()
        .map(|&f0| {
            phase += f0 / sr;
            let x = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            glottal.step(x, 0.0, 100.0, sr)
        })
        .collect();
    let normal = finish(render(&pulses, &tracks(&durs, 1.0), sr), sr, spec.normal_rms);

    // Whisper: noise through the shifted filters at the stretched tempo.
    let wdurs: Vec<usize> = secs.iter().map(|s| (s * tempo * sr).round() as usize).collect();
    let wn: usize = wdurs.iter().sum();
    let noise: Vec<f64> = (0..wn).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let whisper_rms = spec.normal_rms * 10f64.powf(-spec.whisper_energy_drop_db / 20.0);
    let whisper = finish(render(&noise, &tracks(&wdurs, spec.whisper_formant_shift), sr), sr, whisper_rms);

    Ok(SynthPair { normal, whisper, tokens: phones.iter().map(|p| p.symbol.clone()).collect(), tempo_ratio: tempo, f0_track })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Normal,
    Whisper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub pair_id: String,
    pub speaker: String,
    pub style: Style,
    /// Relative to the manifest directory unless absolute.
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub sample_rate: u32,
}

impl UtteranceRecord {
    pub fn resolve(&self, base: &Path) -> PathBuf {
        if self.path.is_absolute() {
            self.path.clone()
        } else {
            base.join(&self.path)
        }
    }

    /// Read the waveform, checking the header rate against the record.
    pub fn load(&self, base: &Path) -> Result<Waveform> {
        let path = self.resolve(base);
        let w = Waveform::read_wav(&path)?;
        if w.sample_rate != self.sample_rate {
            return Err(Error::format(&path, format!("header says {} Hz, manifest says {}", w.sample_rate, self.sample_rate)));
        }
        Ok(w)
    }
}

/// One whisper/normal pair from a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub pair_id: String,
    pub normal: UtteranceRecord,
    pub whisper: UtteranceRecord,
}

/// Check `(pair_id, style)` uniqueness and sort by it.
pub fn validate_records(mut records: Vec<UtteranceRecord>) -> Result<Vec<UtteranceRecord>> {
    let mut seen = BTreeSet::new();
    for r in &records {
        if r.sample_rate == 0 {
            return Err(Error::Validation(format!("record '{}' has sample rate 0", r.utt_id)));
        }
        if !seen.insert((r.pair_id.clone(), r.style)) {
            return Err(Error::Validation(format!("pair '{}' has more than one {:?} record", r.pair_id, r.style)));
        }
    }
    records.sort_by(|a, b| (&a.pair_id, a.style).cmp(&(&b.pair_id, b.style)));
    Ok(records)
}

/// Read a line-delimited manifest. Audio paths are resolved against the
/// manifest's directory and must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: UtteranceRecord =
            serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        records.push(r);
    }
    let records = validate_records(records)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !r.resolve(base).is_file())
        .map(|r| format!("{} ({})", r.utt_id, r.resolve(base).display()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingAudio(missing));
    }
    Ok(records)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[UtteranceRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Group records into complete whisper/normal pairs.
pub fn pair_records(records: &[UtteranceRecord]) -> Result<Vec<PairRecord>> {
    let mut by_pair: BTreeMap<&str, (Option<&UtteranceRecord>, Option<&UtteranceRecord>)> = BTreeMap::new();
    for r in records {
        let slot = by_pair.entry(&r.pair_id).or_default();
        let target = match r.style {
            Style::Normal => &mut slot.0,
            Style::Whisper => &mut slot.1,
        };
        if target.is_some() {
            return Err(Error::Validation(format!("pair '{}' has more than one {:?} record", r.pair_id, r.style)));
        }
        *target = Some(r);
    }
    by_pair
        .into_iter()
        .map(|(id, slot)| match slot {
            (Some(n), Some(w)) => {
                if n.speaker != w.speaker {
                    return Err(Error::Pairing(format!("pair '{id}' mixes speakers '{}' and '{}'", n.speaker, w.speaker)));
                }
                Ok(PairRecord { pair_id: id.to_string(), normal: n.clone(), whisper: w.clone() })
            }
            (None, _) => Err(Error::Pairing(format!("pair '{id}' has no normal record"))),
            (_, None) => Err(Error::Pairing(format!("pair '{id}' has no whisper record"))),
        })
        .collect()
}

/// Keep only records whose speaker is listed.
pub fn filter_speakers(records: &[UtteranceRecord], speakers: &[String]) -> Vec<UtteranceRecord> {
    records.iter().filter(|r| speakers.contains(&r.speaker)).cloned().collect()
}

/// Render every pair of `spec` into `dir` and write `dir/manifest.jsonl`.
pub fn write_corpus(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let dir = dir.as_ref();
    let wav_dir = dir.join("wavs");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut records = Vec::new();
    for k in 0..spec.n_speakers {
        let speaker = SynthSpec::speaker_name(k);
        for u in 0..spec.utterances_per_speaker {
            let pair = synth_pair(spec, k, u)?;
            let pair_id = format!("{speaker}_{u:03}");
            for (style, w) in [(Style::Normal, &pair.normal), (Style::Whisper, &pair.whisper)] {
                let tag = match style {
                    Style::Normal => "normal",
                    Style::Whisper => "whisper",
                };
                let rel = PathBuf::from("wavs").join(format!("{pair_id}_{tag}.wav"));
                w.write_wav(dir.join(&rel))?;
                records.push(UtteranceRecord {
                    utt_id: format!("{pair_id}_{tag}"),
                    pair_id: pair_id.clone(),
                    speaker: speaker.clone(),
                    style,
                    path: rel,
                    text: Some(pair.tokens.join(" ")),
                    sample_rate: CORPUS_RATE,
                });
            }
        }
    }
    let records = validate_records(records)?;
    write_manifest(dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

/// Where a speaker embedding comes from.
#[derive(Debug, Clone)]
pub enum SpeakerEmbedder {
    /// Fixed random vector per known speaker id.
    Lookup { speakers: BTreeSet<String>, seed: u64 },
    /// Precomputed vectors read from feature containers.
    External { vectors: BTreeMap<String, Vec<f32>> },
    /// Log-mel mean/std pooling followed by a fixed random projection.
    StatsPool(StatsPoolEmbedder),
}

impl SpeakerEmbedder {
    pub fn lookup(speakers: impl IntoIterator<Item = String>, seed: u64) -> Self {
        SpeakerEmbedder::Lookup { speakers: speakers.into_iter().collect(), seed }
    }

    /// One `1 x 256` feature container per speaker.
    pub fn external(files: &BTreeMap<String, PathBuf>) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        for (speaker, path) in files {
            let m = read_matrix(path)?;
            if m.dim() != (1, SPEAKER_DIM) {
                return Err(Error::format(path, format!("speaker embedding must be 1x{SPEAKER_DIM}, got {:?}", m.dim())));
            }
            vectors.insert(speaker.clone(), m.row(0).to_vec());
        }
        Ok(SpeakerEmbedder::External { vectors })
    }

    pub fn stats_pool(seed: u64) -> Self {
        SpeakerEmbedder::StatsPool(StatsPoolEmbedder::new(seed))
    }

    pub fn embed_speaker(&self, speaker: &str) -> Result<SpeakerEmbedding> {
        match self {
            SpeakerEmbedder::Lookup { speakers, seed } => {
                if !speakers.contains(speaker) {
                    return Err(Error::Argument(format!("unknown speaker '{speaker}'")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(*seed, fnv1a(speaker), 0));
                let v = (0..SPEAKER_DIM).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                SpeakerEmbedding::normalized(v, EmbeddingSource::Lookup)
            }
            SpeakerEmbedder::External { vectors } => {
                let v = vectors.get(speaker).ok_or_else(|| Error::Argument(format!("no external embedding for speaker '{speaker}'")))?;
                SpeakerEmbedding::normalized(v.clone(), EmbeddingSource::External)
            }
            SpeakerEmbedder::StatsPool(_) => {
                Err(Error::Argument("the stats-pool embedder needs audio, not a speaker id".into()))
            }
        }
    }

    pub fn embed_waveform(&self, w: &Waveform) -> Result<SpeakerEmbedding> {
        match self {
            SpeakerEmbedder::StatsPool(e) => e.embed(w),
            _ => Err(Error::Argument("this embedder works from speaker ids only".into())),
        }
    }

    /// Embedding for a manifest record, from audio or id as the provider needs.
    pub fn embed_record(&self, r: &UtteranceRecord, base: &Path) -> Result<SpeakerEmbedding> {
        match self {
            SpeakerEmbedder::StatsPool(e) => e.embed(&r.load(base)?),
            _ => self.embed_speaker(&r.speaker),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StatsPoolEmbedder {
    /// `256 x 2 n_mels`
    projection: Array2<f64>,
    spec: FrameSpec,
}

impl StatsPoolEmbedder {
    pub fn new(seed: u64) -> Self {
        let spec = FrameSpec::analysis_16k();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * spec.n_mels;
        let projection = Array2::from_shape_fn((SPEAKER_DIM, d), |_| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt());
        Self { projection, spec }
    }

    /// Pooled statistics of the voiced-energy frames, centred, projected and
    /// normalised.
    pub fn embed(&self, w: &Waveform) -> Result<SpeakerEmbedding> {
        let w16 = resample(w, self.spec.sample_rate)?;
        let mel = compute_mel(&w16, &self.spec)?;
        let frame_energy: Vec<f64> = mel.frames.rows().into_iter().map(|r| r.iter().map(|&v| v.exp()).sum()).collect();
        let peak = frame_energy.iter().cloned().fold(0.0, f64::max);
        let active: Vec<usize> = (0..mel.n_frames()).filter(|&t| frame_energy[t] > peak * 1e-3).collect();
        let rows: Vec<usize> = if active.is_empty() { (0..mel.n_frames()).collect() } else { active };
        let n_mels = self.spec.n_mels;
        let mut stats = vec![0.0; 2 * n_mels];
        for k in 0..n_mels {
            let vals: Vec<f64> = rows.iter().map(|&t| mel.frames[[t, k]] as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            stats[k] = mean;
            stats[n_mels + k] = var.sqrt();
        }
        for half in [0..n_mels, n_mels..2 * n_mels] {
            let m = stats[half.clone()].iter().sum::<f64>() / n_mels as f64;
            for v in &mut stats[half] {
                *v -= m;
            }
        }
        let v: Vec<f32> = self.projection.rows().into_iter().map(|row| row.iter().zip(&stats).map(|(a, b)| a * b).sum::<f64>() as f32).collect();
        SpeakerEmbedding::normalized(v, EmbeddingSource::StatsPool)
    }
}
