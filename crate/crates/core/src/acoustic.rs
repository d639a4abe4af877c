//! Duration-free, speaker-conditioned acoustic model.
//!
//! Aligned features already sit in the synthesis frame grid, so there is no
//! length regulator: every layer maps `T22` frames to `T22` frames.
//!
//! input linear + positions + speaker projection -> FFT blocks
//!   -> pitch / energy predictors -> prosody embeddings -> FFT blocks -> mel head

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Linear;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureDomain, FeatureSequence};
use crate::frame::{FrameSpec, MelSpectrogram};
use crate::nn::{array_from_tensor, linear, scalar, sinusoidal_positions, tensor_from_array, FftBlock, LayerNorm, ParamBuilder, SeqConv};
use crate::prosody::{ProsodyTargets, F0_MIN};

pub const SPEAKER_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    Lookup,
    External,
    StatsPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f32>,
    pub source: EmbeddingSource,
}

impl SpeakerEmbedding {
    /// Unit-normalised embedding.
    pub fn normalized(vector: Vec<f32>, source: EmbeddingSource) -> Result<Self> {
        if vector.len() != SPEAKER_DIM {
            return Err(Error::Shape(format!("speaker embedding must have {SPEAKER_DIM} values, got {}", vector.len())));
        }
        let norm = vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Argument("speaker embedding has zero or non-finite norm".into()));
        }
        Ok(Self { vector: vector.iter().map(|&v| (v as f64 / norm) as f32).collect(), source })
    }

    /// Embedding taken as is, e.g. the all-zero vector for ablations.
    pub fn raw(vector: Vec<f32>, source: EmbeddingSource) -> Result<Self> {
        if vector.len() != SPEAKER_DIM {
            return Err(Error::Shape(format!("speaker embedding must have {SPEAKER_DIM} values, got {}", vector.len())));
        }
        Ok(Self { vector, source })
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        cosine(&self.vector, &other.vector)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub n_feat: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub ff_kernel: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub predictor_kernel: usize,
    /// Constant added to the mel head so the untrained output sits near
    /// typical log-mel levels.
    pub mel_offset: f64,
    /// Constant added to the pitch head (log-Hz).
    pub pitch_offset: f64,
    pub spec: FrameSpec,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            n_feat: 48,
            width: 128,
            heads: 2,
            ff_dim: 256,
            ff_kernel: 3,
            encoder_blocks: 2,
            decoder_blocks: 2,
            predictor_kernel: 3,
            mel_offset: -5.0,
            pitch_offset: 5.0,
            spec: FrameSpec::synthesis_22k(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2LossWeights {
    pub w_pitch: f64,
    pub w_energy: f64,
}

impl Default for Stage2LossWeights {
    fn default() -> Self {
        Self { w_pitch: 0.1, w_energy: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2LossBreakdown {
    pub mel_l1: f64,
    pub mel_l2: f64,
    pub pitch_mse: f64,
    pub energy_mse: f64,
    pub total: f64,
}

impl Stage2LossBreakdown {
    pub fn from_components(mel_l1: f64, mel_l2: f64, pitch_mse: f64, energy_mse: f64, w: &Stage2LossWeights) -> Self {
        let total = mel_l1 + mel_l2 + w.w_pitch * pitch_mse + w.w_energy * energy_mse;
        Self { mel_l1, mel_l2, pitch_mse, energy_mse, total }
    }
}

/// Differentiable outputs of one forward pass.
pub struct AcousticOutput {
    /// `(T, n_mels)`
    pub mel: Tensor,
    /// `(T,)` predicted log-Hz pitch.
    pub pitch: Tensor,
    /// `(T,)` predicted `log(1 + energy)`.
    pub log_energy: Tensor,
    /// Prosody that was embedded: targets in train mode, predictions in infer mode.
    pub used: ProsodyTargets,
}

impl AcousticOutput {
    /// Predicted prosody as contours. Frames below the pitch floor are unvoiced.
    pub fn predicted_prosody(&self) -> Result<ProsodyTargets> {
        prosody_from_predictions(&self.pitch, &self.log_energy)
    }
}

fn prosody_from_predictions(pitch: &Tensor, log_energy: &Tensor) -> Result<ProsodyTargets> {
    let p: Vec<f32> = pitch.to_dtype(DType::F32)?.to_vec1()?;
    let e: Vec<f32> = log_energy.to_dtype(DType::F32)?.to_vec1()?;
    let floor = F0_MIN.ln() as f32;
    let voicing: Vec<bool> = p.iter().map(|&v| v >= floor).collect();
    let pitch = p.iter().zip(&voicing).map(|(&v, &on)| if on { v } else { 0.0 }).collect();
    let energy = e.iter().map(|&v| v.max(0.0).exp_m1()).collect();
    ProsodyTargets::new(pitch, energy, voicing)
}

struct VariancePredictor {
    conv1: SeqConv,
    norm1: LayerNorm,
    conv2: SeqConv,
    norm2: LayerNorm,
    head: Linear,
}

impl VariancePredictor {
    fn new(pb: &ParamBuilder, width: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            conv1: SeqConv::new(&pb.pp("conv1"), width, width, kernel, 1, 1)?,
            norm1: LayerNorm::new(&pb.pp("norm1"), width)?,
            conv2: SeqConv::new(&pb.pp("conv2"), width, width, kernel, 1, 1)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), width)?,
            head: linear(&pb.pp("head"), width, 1)?,
        })
    }

    /// `(T, width)` to `(T,)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward_time(x)?.relu()?)?;
        let h = self.norm2.forward(&self.conv2.forward_time(&h)?.relu()?)?;
        Ok(self.head.forward(&h)?.squeeze(1)?)
    }
}

pub struct AcousticModel {
    cfg: AcousticConfig,
    input: Linear,
    speaker: Linear,
    encoder: Vec<FftBlock>,
    pitch_predictor: VariancePredictor,
    energy_predictor: VariancePredictor,
    pitch_embed: Linear,
    energy_embed: Linear,
    decoder: Vec<FftBlock>,
    mel_head: Linear,
    dtype: DType,
}

impl AcousticModel {
    pub fn new(pb: &ParamBuilder, cfg: AcousticConfig) -> Result<Self> {
        if !cfg.width.is_multiple_of(cfg.heads) {
            return Err(Error::Argument(format!("width {} not divisible by {} heads", cfg.width, cfg.heads)));
        }
        cfg.spec.validate()?;
        let w = cfg.width;
        let blocks = |name: &str, n: usize| -> Result<Vec<FftBlock>> {
            (0..n).map(|i| FftBlock::new(&pb.pp(format!("{name}{i}")), w, cfg.heads, cfg.ff_dim, cfg.ff_kernel)).collect()
        };
        Ok(Self {
            input: linear(&pb.pp("input"), cfg.n_feat, w)?,
            speaker: linear(&pb.pp("speaker"), SPEAKER_DIM, w)?,
            encoder: blocks("encoder", cfg.encoder_blocks)?,
            pitch_predictor: VariancePredictor::new(&pb.pp("pitch_predictor"), w, cfg.predictor_kernel)?,
            energy_predictor: VariancePredictor::new(&pb.pp("energy_predictor"), w, cfg.predictor_kernel)?,
            pitch_embed: linear(&pb.pp("pitch_embed"), 1, w)?,
            energy_embed: linear(&pb.pp("energy_embed"), 1, w)?,
            decoder: blocks("decoder", cfg.decoder_blocks)?,
            mel_head: linear(&pb.pp("mel_head"), w, cfg.spec.n_mels)?,
            dtype: pb.store().dtype(),
            cfg,
        })
    }

    pub fn config(&self) -> &AcousticConfig {
        &self.cfg
    }

    fn column(&self, v: &[f32], device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(v.to_vec(), (v.len(), 1), device)?.to_dtype(self.dtype)?)
    }

    /// Aligned features `(T, n_feat)` and a speaker vector to mel `(T, n_mels)`.
    pub fn forward_tensor(&self, x: &Tensor, speaker: &SpeakerEmbedding, targets: Option<&ProsodyTargets>, mode: Mode) -> Result<AcousticOutput> {
        let (t, d) = x.dims2()?;
        if d != self.cfg.n_feat {
            return Err(Error::Shape(format!("acoustic model expects {} channels, got {d}", self.cfg.n_feat)));
        }
        if speaker.vector.len() != SPEAKER_DIM {
            return Err(Error::Shape(format!("speaker embedding has {} values", speaker.vector.len())));
        }
        let device = x.device();
        let s = Tensor::from_vec(speaker.vector.clone(), (1, SPEAKER_DIM), device)?.to_dtype(self.dtype)?;
        let mut h = self.input.forward(x)?;
        h = (h + sinusoidal_positions(t, self.cfg.width, self.dtype, device)?)?;
        h = h.broadcast_add(&self.speaker.forward(&s)?)?;
        for b in &self.encoder {
            h = b.forward(&h)?;
        }
        let pitch = (self.pitch_predictor.forward(&h)? + self.cfg.pitch_offset)?;
        let log_energy = self.energy_predictor.forward(&h)?;
        let used = match (mode, targets) {
            (Mode::Train, Some(tg)) => {
                if tg.len() != t {
                    return Err(Error::Shape(format!("prosody targets have {} frames, input has {t}", tg.len())));
                }
                tg.clone()
            }
            (Mode::Train, None) => return Err(Error::Argument("train mode requires prosody targets".into())),
            (Mode::Infer, _) => prosody_from_predictions(&pitch, &log_energy)?,
        };
        let log_e: Vec<f32> = used.energy.iter().map(|e| e.ln_1p()).collect();
        let pe = self.pitch_embed.forward(&self.column(&used.pitch, device)?)?;
        let ee = self.energy_embed.forward(&self.column(&log_e, device)?)?;
        h = ((h + pe)? + ee)?;
        for b in &self.decoder {
            h = b.forward(&h)?;
        }
        let mel = (self.mel_head.forward(&h)? + self.cfg.mel_offset)?;
        Ok(AcousticOutput { mel, pitch, log_energy, used })
    }

    pub fn forward(
        &self,
        aligned: &FeatureSequence,
        speaker: &SpeakerEmbedding,
        targets: Option<&ProsodyTargets>,
        mode: Mode,
    ) -> Result<(MelSpectrogram, ProsodyTargets)> {
        aligned.expect_domain(FeatureDomain::Aligned22k)?;
        let x = tensor_from_array(&aligned.frames, self.dtype, &Device::Cpu)?;
        let out = self.forward_tensor(&x, speaker, targets, mode)?;
        let mel = MelSpectrogram { frames: array_from_tensor(&out.mel)?, spec: self.cfg.spec.clone() };
        Ok((mel, out.predicted_prosody()?))
    }
}

/// Differentiable Stage-2 objective. Energy is compared as `log(1 + e)`;
/// pitch only on target-voiced frames.
pub fn stage2_objective(out: &AcousticOutput, target_mel: &Tensor, target: &ProsodyTargets, w: &Stage2LossWeights) -> Result<(Tensor, Stage2LossBreakdown)> {
    if out.mel.dims() != target_mel.dims() {
        return Err(Error::Shape(format!("mel {:?} vs target {:?}", out.mel.dims(), target_mel.dims())));
    }
    let t = out.mel.dims()[0];
    if target.len() != t {
        return Err(Error::Shape(format!("prosody targets have {} frames, mel has {t}", target.len())));
    }
    let dtype = out.mel.dtype();
    let device = out.mel.device();
    let diff = (&out.mel - target_mel)?;
    let l1 = diff.abs()?.mean_all()?;
    let l2 = diff.sqr()?.mean_all()?;

    let mask: Vec<f32> = target.voicing.iter().map(|&v| v as u8 as f32).collect();
    let voiced = mask.iter().sum::<f32>();
    let mask = Tensor::from_vec(mask, t, device)?.to_dtype(dtype)?;
    let tp = Tensor::from_vec(target.pitch.clone(), t, device)?.to_dtype(dtype)?;
    let pitch = if voiced > 0.0 {
        ((&out.pitch - tp)?.sqr()? * mask)?.sum_all()? / voiced as f64
    } else {
        out.pitch.sum_all()? * 0.0
    }?;
    let te: Vec<f32> = target.energy.iter().map(|e| e.ln_1p()).collect();
    let te = Tensor::from_vec(te, t, device)?.to_dtype(dtype)?;
    let energy = (&out.log_energy - te)?.sqr()?.mean_all()?;

    let total = ((((&l1 + &l2)? + (&pitch * w.w_pitch)?)?) + (&energy * w.w_energy)?)?;
    let b = Stage2LossBreakdown::from_components(scalar(&l1)?, scalar(&l2)?, scalar(&pitch)?, scalar(&energy)?, w);
    Ok((total, b))
}

/// Non-differentiable Stage-2 loss on finished outputs.
pub fn stage2_loss(
    pred_mel: &MelSpectrogram,
    target_mel: &MelSpectrogram,
    pred: &ProsodyTargets,
    target: &ProsodyTargets,
    w: &Stage2LossWeights,
) -> Result<Stage2LossBreakdown> {
    if pred_mel.frames.dim() != target_mel.frames.dim() || pred.len() != target.len() || pred.len() != pred_mel.n_frames() {
        return Err(Error::Shape(format!(
            "mel {:?} vs {:?}, prosody {} vs {}",
            pred_mel.frames.dim(),
            target_mel.frames.dim(),
            pred.len(),
            target.len()
        )));
    }
    let diff: Array2<f64> = pred_mel.frames.mapv(f64::from) - target_mel.frames.mapv(f64::from);
    let n = diff.len() as f64;
    let l1 = diff.iter().map(|v| v.abs()).sum::<f64>() / n;
    let l2 = diff.iter().map(|v| v * v).sum::<f64>() / n;
    let (mut ps, mut pn) = (0.0, 0usize);
    for i in 0..target.len() {
        if target.voicing[i] {
            ps += (pred.pitch[i] as f64 - target.pitch[i] as f64).powi(2);
            pn += 1;
        }
    }
    let pitch = if pn > 0 { ps / pn as f64 } else { 0.0 };
    let energy = pred
        .energy
        .iter()
        .zip(&target.energy)
        .map(|(&a, &b)| ((a as f64).ln_1p() - (b as f64).ln_1p()).powi(2))
        .sum::<f64>()
        / target.len() as f64;
    Ok(Stage2LossBreakdown::from_components(l1, l2, pitch, energy, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn unit_speaker(seed: usize) -> SpeakerEmbedding {
        SpeakerEmbedding::normalized((0..SPEAKER_DIM).map(|i| ((i * 7 + seed * 13) as f32).sin()).collect(), EmbeddingSource::Lookup).unwrap()
    }

    fn aligned(t: usize) -> FeatureSequence {
        FeatureSequence::new(Array2::from_shape_fn((t, 48), |(i, j)| ((i + 2 * j) as f32 * 0.1).cos()), FeatureDomain::Aligned22k).unwrap()
    }

    #[test]
    fn shape_law() {
        let store = ParamStore::new(2, DType::F32);
        let m = AcousticModel::new(&store.root().pp("acoustic"), AcousticConfig::default()).unwrap();
        let (mel, pros) = m.forward(&aligned(172), &unit_speaker(0), None, Mode::Infer).unwrap();
        assert_eq!(mel.frames.dim(), (172, 80));
        assert_eq!(pros.len(), 172);
        assert!(store.names().iter().all(|n| !n.contains("duration")));
    }

    #[test]
    fn speaker_conditioning_is_live() {
        let store = ParamStore::new(2, DType::F32);
        let m = AcousticModel::new(&store.root(), AcousticConfig::default()).unwrap();
        let zero = SpeakerEmbedding::raw(vec![0.0; SPEAKER_DIM], EmbeddingSource::External).unwrap();
        let (a, _) = m.forward(&aligned(20), &zero, None, Mode::Infer).unwrap();
        let (b, _) = m.forward(&aligned(20), &unit_speaker(1), None, Mode::Infer).unwrap();
        let delta: f64 = (&a.frames - &b.frames).iter().map(|v| v * v).sum();
        assert!(delta > 0.0);
    }

    #[test]
    fn teacher_forcing_consistency() {
        let store = ParamStore::new(5, DType::F32);
        let m = AcousticModel::new(&store.root(), AcousticConfig::default()).unwrap();
        let x = aligned(31);
        let s = unit_speaker(2);
        let (inf, pred) = m.forward(&x, &s, None, Mode::Infer).unwrap();
        let (tf, _) = m.forward(&x, &s, Some(&pred), Mode::Train).unwrap();
        for (a, b) in inf.frames.iter().zip(tf.frames.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn train_mode_requires_targets() {
        let store = ParamStore::new(5, DType::F32);
        let m = AcousticModel::new(&store.root(), AcousticConfig::default()).unwrap();
        assert!(matches!(m.forward(&aligned(4), &unit_speaker(0), None, Mode::Train), Err(Error::Argument(_))));
    }

    #[test]
    fn loss_examples() {
        let w = Stage2LossWeights::default();
        assert!((Stage2LossBreakdown::from_components(0.1, 0.2, 0.3, 0.4, &w).total - 0.37).abs() < 1e-12);
        let mel = MelSpectrogram { frames: Array2::from_elem((3, 80), -3.0), spec: FrameSpec::synthesis_22k() };
        let p = ProsodyTargets::new(vec![5.0, 0.0, 5.2], vec![1.0, 0.0, 2.0], vec![true, false, true]).unwrap();
        let b = stage2_loss(&mel, &mel, &p, &p, &w).unwrap();
        assert_eq!((b.mel_l1, b.mel_l2, b.pitch_mse, b.energy_mse, b.total), (0.0, 0.0, 0.0, 0.0, 0.0));
        let unvoiced = ProsodyTargets::new(vec![0.0; 3], vec![0.0; 3], vec![false; 3]).unwrap();
        let q = ProsodyTargets::new(vec![4.0; 3], vec![0.0; 3], vec![true; 3]).unwrap();
        assert_eq!(stage2_loss(&mel, &mel, &q, &unvoiced, &w).unwrap().pitch_mse, 0.0);
        let short = MelSpectrogram { frames: Array2::zeros((2, 80)), spec: FrameSpec::synthesis_22k() };
        assert!(matches!(stage2_loss(&short, &mel, &p, &p, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        assert!((unit_speaker(3).norm() - 1.0).abs() < 1e-6);
        assert!(SpeakerEmbedding::normalized(vec![0.0; SPEAKER_DIM], EmbeddingSource::Lookup).is_err());
        assert!(SpeakerEmbedding::normalized(vec![1.0; 10], EmbeddingSource::Lookup).is_err());
    }
}
