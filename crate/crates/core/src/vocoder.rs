//! GAN vocoder: upsampling generator with multi-receptive-field residual
//! blocks, multi-period and multi-scale discriminators, and least-squares
//! adversarial fine-tuning on predicted mels.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{FrameSpec, MelSpectrogram, Waveform, LOG_FLOOR};
use crate::nn::{leaky_relu, scalar, tensor_from_array, ParamBuilder, ParamStore, SeqConv, Upsample};
use crate::optim::{Adam, OptimizerConfig};
use crate::spectral::{hann_window, reflect_index, MelFilterbank};

const SLOPE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    pub upsample_factors: Vec<usize>,
    pub upsample_initial_channels: usize,
    pub resblock_kernels: Vec<usize>,
    pub resblock_dilations: Vec<usize>,
    pub periods: Vec<usize>,
    pub scales: usize,
    pub mpd_channels: Vec<usize>,
    pub msd_channels: Vec<usize>,
    pub lambda_fm: f64,
    pub lambda_mel: f64,
    /// Training crop length in mel frames.
    pub segment_frames: usize,
    pub spec: FrameSpec,
}

impl VocoderConfig {
    pub fn full() -> Self {
        Self {
            upsample_factors: vec![8, 8, 4],
            upsample_initial_channels: 512,
            resblock_kernels: vec![3, 7, 11],
            resblock_dilations: vec![1, 3, 5],
            periods: vec![2, 3, 5, 7, 11],
            scales: 3,
            mpd_channels: vec![32, 128, 512, 1024],
            msd_channels: vec![128, 256, 512, 1024],
            lambda_fm: 2.0,
            lambda_mel: 45.0,
            segment_frames: 32,
            spec: FrameSpec::synthesis_22k(),
        }
    }

    /// Channel widths divided by 8.
    pub fn toy() -> Self {
        Self {
            upsample_initial_channels: 64,
            mpd_channels: vec![4, 16, 64, 128],
            msd_channels: vec![16, 32, 64, 128],
            ..Self::full()
        }
    }

    /// Small enough for CPU fine-tuning inside unit tests.
    pub fn reduced() -> Self {
        Self {
            upsample_initial_channels: 32,
            resblock_kernels: vec![3, 7],
            resblock_dilations: vec![1, 3],
            periods: vec![2, 3],
            scales: 2,
            mpd_channels: vec![8, 16, 32],
            msd_channels: vec![8, 16, 32],
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let product: usize = self.upsample_factors.iter().product();
        if product != self.spec.hop {
            return Err(Error::Argument(format!(
                "upsample factors {:?} multiply to {product}, hop is {}",
                self.upsample_factors, self.spec.hop
            )));
        }
        if self.upsample_factors.contains(&0)
            || self.resblock_kernels.iter().any(|k| k % 2 == 0)
            || self.periods.contains(&0)
            || self.mpd_channels.is_empty()
            || self.msd_channels.is_empty()
            || self.segment_frames == 0
        {
            return Err(Error::Argument(format!("invalid vocoder config {self:?}")));
        }
        Ok(())
    }

    fn stage_channels(&self, i: usize) -> usize {
        (self.upsample_initial_channels >> (i + 1)).max(1)
    }
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self::reduced()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocoderLossBreakdown {
    pub adv_g: f64,
    pub adv_d: f64,
    pub feature_match: f64,
    pub mel_recon: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl VocoderLossBreakdown {
    pub fn from_components(adv_g: f64, adv_d: f64, feature_match: f64, mel_recon: f64, cfg: &VocoderConfig) -> Self {
        let total_g = adv_g + cfg.lambda_fm * feature_match + cfg.lambda_mel * mel_recon;
        Self { adv_g, adv_d, feature_match, mel_recon, total_g, total_d: adv_d }
    }
}

struct ResBlock {
    dilated: Vec<SeqConv>,
    plain: Vec<SeqConv>,
}

impl ResBlock {
    fn new(pb: &ParamBuilder, channels: usize, kernel: usize, dilations: &[usize]) -> Result<Self> {
        let mut dilated = Vec::new();
        let mut plain = Vec::new();
        for (j, &d) in dilations.iter().enumerate() {
            dilated.push(SeqConv::new(&pb.pp(format!("dilated{j}")), channels, channels, kernel, 1, d)?);
            plain.push(SeqConv::new(&pb.pp(format!("plain{j}")), channels, channels, kernel, 1, 1)?);
        }
        Ok(Self { dilated, plain })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (a, b) in self.dilated.iter().zip(&self.plain) {
            let h = a.forward_channels(&leaky_relu(&x, SLOPE)?)?;
            let h = b.forward_channels(&leaky_relu(&h, SLOPE)?)?;
            x = (x + h)?;
        }
        Ok(x)
    }
}

pub struct Generator {
    cfg: VocoderConfig,
    conv_pre: SeqConv,
    ups: Vec<Upsample>,
    mrf: Vec<Vec<ResBlock>>,
    conv_post: SeqConv,
    dtype: DType,
}

impl Generator {
    pub fn new(pb: &ParamBuilder, cfg: VocoderConfig) -> Result<Self> {
        cfg.validate()?;
        let conv_pre = SeqConv::new(&pb.pp("conv_pre"), cfg.spec.n_mels, cfg.upsample_initial_channels, 7, 1, 1)?;
        let mut ups = Vec::new();
        let mut mrf = Vec::new();
        let mut c_in = cfg.upsample_initial_channels;
        for (i, &u) in cfg.upsample_factors.iter().enumerate() {
            let c_out = cfg.stage_channels(i);
            ups.push(Upsample::new(&pb.pp(format!("up{i}")), c_in, c_out, u)?);
            let blocks = cfg
                .resblock_kernels
                .iter()
                .enumerate()
                .map(|(j, &k)| ResBlock::new(&pb.pp(format!("mrf{i}.block{j}")), c_out, k, &cfg.resblock_dilations))
                .collect::<Result<Vec<_>>>()?;
            mrf.push(blocks);
            c_in = c_out;
        }
        let conv_post = SeqConv::new(&pb.pp("conv_post"), c_in, 1, 7, 1, 1)?;
        Ok(Self { cfg, conv_pre, ups, mrf, conv_post, dtype: pb.store().dtype() })
    }

    pub fn config(&self) -> &VocoderConfig {
        &self.cfg
    }

    /// Mel `(T, n_mels)` to waveform `(1, 1, T * hop)`.
    pub fn forward(&self, mel: &Tensor) -> Result<Tensor> {
        let mut x = self.conv_pre.forward_channels(&mel.t()?.unsqueeze(0)?)?;
        for (up, blocks) in self.ups.iter().zip(&self.mrf) {
            x = up.forward(&leaky_relu(&x, SLOPE)?)?;
            let mut acc = blocks[0].forward(&x)?;
            for b in &blocks[1..] {
                acc = (acc + b.forward(&x)?)?;
            }
            x = (acc / blocks.len() as f64)?;
        }
        let y = self.conv_post.forward_channels(&leaky_relu(&x, SLOPE)?)?;
        Ok(y.tanh()?)
    }

    /// Synthesise a waveform of exactly `T * hop` samples.
    pub fn generate(&self, mel22: &MelSpectrogram) -> Result<Waveform> {
        mel22.check_domain(&self.cfg.spec)?;
        let x = tensor_from_array(&mel22.frames, self.dtype, &Device::Cpu)?;
        let y = self.forward(&x)?;
        let samples: Vec<f32> = y.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        Ok(Waveform { samples, sample_rate: self.cfg.spec.sample_rate })
    }
}

/// Logits plus every intermediate feature map of one sub-discriminator.
pub struct DiscOutput {
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

struct ConvStack {
    convs: Vec<SeqConv>,
    post: SeqConv,
}

impl ConvStack {
    fn forward(&self, x: &Tensor) -> Result<DiscOutput> {
        let mut h = x.clone();
        let mut features = Vec::new();
        for c in &self.convs {
            h = leaky_relu(&c.forward_channels(&h)?, SLOPE)?;
            features.push(h.clone());
        }
        let logits = self.post.forward_channels(&h)?;
        features.push(logits.clone());
        Ok(DiscOutput { logits, features })
    }
}

struct PeriodDiscriminator {
    period: usize,
    stack: ConvStack,
}

impl PeriodDiscriminator {
    fn new(pb: &ParamBuilder, period: usize, channels: &[usize]) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(SeqConv::new(&pb.pp(format!("conv{i}")), c_in, c, 5, 3, 1)?);
            c_in = c;
        }
        let post = SeqConv::new(&pb.pp("post"), c_in, 1, 3, 1, 1)?;
        Ok(Self { period, stack: ConvStack { convs, post } })
    }

    /// Fold `(1, 1, L)` into `period` interleaved columns and convolve each
    /// along time, i.e. a `(k, 1)` 2-D convolution.
    fn forward(&self, x: &Tensor) -> Result<DiscOutput> {
        let p = self.period;
        let l = x.dims3()?.2;
        let pad = (p - l % p) % p;
        let x = x.pad_with_zeros(2, 0, pad)?;
        let rows = (l + pad) / p;
        let folded = x.reshape((rows, p))?.t()?.reshape((p, 1, rows))?.contiguous()?;
        self.stack.forward(&folded)
    }
}

struct ScaleDiscriminator {
    pool: usize,
    stack: ConvStack,
}

impl ScaleDiscriminator {
    fn new(pb: &ParamBuilder, pool: usize, channels: &[usize]) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in channels.iter().enumerate() {
            let (k, s) = if i == 0 { (15, 1) } else { (9, 4) };
            convs.push(SeqConv::new(&pb.pp(format!("conv{i}")), c_in, c, k, s, 1)?);
            c_in = c;
        }
        let post = SeqConv::new(&pb.pp("post"), c_in, 1, 3, 1, 1)?;
        Ok(Self { pool, stack: ConvStack { convs, post } })
    }

    /// Pairwise average pooling applied `pool` times, then the conv stack.
    fn forward(&self, x: &Tensor) -> Result<DiscOutput> {
        let mut h = x.clone();
        for _ in 0..self.pool {
            let l = h.dims3()?.2;
            if l < 2 {
                break;
            }
            let even = l - l % 2;
            h = h.narrow(2, 0, even)?.reshape((1, 1, even / 2, 2))?.mean(3)?;
        }
        self.stack.forward(&h)
    }
}

pub struct Discriminators {
    mpd: Vec<PeriodDiscriminator>,
    msd: Vec<ScaleDiscriminator>,
}

impl Discriminators {
    pub fn new(pb: &ParamBuilder, cfg: &VocoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mpd = cfg
            .periods
            .iter()
            .map(|&p| PeriodDiscriminator::new(&pb.pp(format!("mpd.p{p}")), p, &cfg.mpd_channels))
            .collect::<Result<_>>()?;
        let msd = (0..cfg.scales)
            .map(|s| ScaleDiscriminator::new(&pb.pp(format!("msd.s{s}")), s, &cfg.msd_channels))
            .collect::<Result<_>>()?;
        Ok(Self { mpd, msd })
    }

    pub fn len(&self) -> usize {
        self.mpd.len() + self.msd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Outputs of every sub-discriminator on a `(1, 1, L)` waveform.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<DiscOutput>> {
        let mut out = Vec::with_capacity(self.len());
        for d in &self.mpd {
            out.push(d.forward(x)?);
        }
        for d in &self.msd {
            out.push(d.forward(x)?);
        }
        Ok(out)
    }
}

/// `sum_d mean((D(real) - 1)^2) + mean(D(fake)^2)`
pub fn lsgan_discriminator_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        let term = ((r - 1.0)?.sqr()?.mean_all()? + f.sqr()?.mean_all()?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Argument("no discriminator outputs".into()))
}

/// `sum_d mean((D(fake) - 1)^2)`
pub fn lsgan_generator_loss(fake: &[Tensor]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for f in fake {
        let term = (f - 1.0)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Argument("no discriminator outputs".into()))
}

/// Mean over feature maps of the mean absolute difference.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    let mut n = 0usize;
    for (rs, fs) in real.iter().zip(fake) {
        for (r, f) in rs.iter().zip(fs) {
            let term = (r.detach() - f)?.abs()?.mean_all()?;
            n += 1;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
    }
    let total = total.ok_or_else(|| Error::Argument("no feature maps".into()))?;
    Ok((total / n as f64)?)
}

/// Differentiable log-mel front-end: reflect-padded framing, windowed DFT as
/// a strided convolution, triangular mel filterbank, `ln(mel + eps)`.
pub struct MelTransform {
    spec: FrameSpec,
    dft: Tensor,
    filters: Tensor,
    n_bins: usize,
}

impl MelTransform {
    pub fn new(spec: &FrameSpec, dtype: DType, device: &Device) -> Result<Self> {
        let n = spec.n_fft;
        let n_bins = n / 2 + 1;
        let window = hann_window(spec.win, n);
        let mut kernel = Vec::with_capacity(2 * n_bins * n);
        for part in 0..2 {
            for k in 0..n_bins {
                for (i, w) in window.iter().enumerate() {
                    let a = 2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    kernel.push(w * if part == 0 { a.cos() } else { -a.sin() });
                }
            }
        }
        let dft = Tensor::from_vec(kernel, (2 * n_bins, 1, n), device)?.to_dtype(dtype)?;
        let fb = MelFilterbank::new(spec);
        let filters = Tensor::from_vec(fb.weights.iter().copied().collect::<Vec<f64>>(), fb.weights.dim(), device)?.to_dtype(dtype)?;
        Ok(Self { spec: spec.clone(), dft, filters, n_bins })
    }

    /// `(1, 1, L)` waveform to `(T, n_mels)` log-mel with `T = L / hop + 1`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let l = x.dims3()?.2;
        let pad = self.spec.n_fft / 2;
        let idx: Vec<u32> = (-(pad as isize)..(l + pad) as isize).map(|i| reflect_index(i, l) as u32).collect();
        let idx = Tensor::from_vec(idx, l + 2 * pad, x.device())?;
        let padded = x.index_select(&idx, 2)?;
        let spec = padded.conv1d(&self.dft, 0, self.spec.hop, 1, 1)?.squeeze(0)?;
        let re = spec.narrow(0, 0, self.n_bins)?;
        let im = spec.narrow(0, self.n_bins, self.n_bins)?;
        let power = (re.sqr()? + im.sqr()?)?;
        let mel = self.filters.matmul(&power)?.t()?;
        Ok((mel + LOG_FLOOR)?.log()?)
    }
}

/// Generator, discriminators and the mel front-end used by the losses.
pub struct Vocoder {
    pub generator: Generator,
    pub discriminators: Discriminators,
    pub mel: MelTransform,
    cfg: VocoderConfig,
}

pub const GENERATOR_PREFIX: &str = "generator";
pub const DISCRIMINATOR_PREFIX: &str = "discriminator";

impl Vocoder {
    pub fn new(pb: &ParamBuilder, cfg: VocoderConfig) -> Result<Self> {
        let store = pb.store();
        Ok(Self {
            generator: Generator::new(&pb.pp(GENERATOR_PREFIX), cfg.clone())?,
            discriminators: Discriminators::new(&pb.pp(DISCRIMINATOR_PREFIX), &cfg)?,
            mel: MelTransform::new(&cfg.spec, store.dtype(), store.device())?,
            cfg,
        })
    }

    pub fn config(&self) -> &VocoderConfig {
        &self.cfg
    }

    pub fn generate(&self, mel22: &MelSpectrogram) -> Result<Waveform> {
        self.generator.generate(mel22)
    }

    fn losses_tensors(&self, real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let d_real = self.discriminators.forward(real)?;
        let d_fake_det = self.discriminators.forward(&fake.detach())?;
        let d_fake = self.discriminators.forward(fake)?;
        let logits = |o: &[DiscOutput]| o.iter().map(|d| d.logits.clone()).collect::<Vec<_>>();
        let feats = |o: &[DiscOutput]| o.iter().map(|d| d.features.clone()).collect::<Vec<_>>();
        let real_logits: Vec<Tensor> = logits(&d_real).iter().map(|t| t.detach()).collect();
        let adv_d = lsgan_discriminator_loss(&real_logits, &logits(&d_fake_det))?;
        let adv_g = lsgan_generator_loss(&logits(&d_fake))?;
        let fm = feature_matching_loss(&feats(&d_real), &feats(&d_fake))?;
        let mel_recon = (self.mel.forward(real)?.detach() - self.mel.forward(fake)?)?.abs()?.mean_all()?;
        Ok((adv_g, adv_d, fm, mel_recon))
    }

    /// All loss components for a real/fake waveform pair, cropped to the
    /// shorter length.
    pub fn vocoder_losses(&self, real: &Waveform, fake: &Waveform) -> Result<VocoderLossBreakdown> {
        let n = real.len().min(fake.len());
        if n == 0 {
            return Err(Error::Argument("empty waveform".into()));
        }
        let to_t = |w: &Waveform| -> Result<Tensor> {
            Ok(Tensor::from_vec(w.samples[..n].to_vec(), (1, 1, n), &Device::Cpu)?.to_dtype(self.generator.dtype)?)
        };
        let (adv_g, adv_d, fm, mel) = self.losses_tensors(&to_t(real)?, &to_t(fake)?)?;
        Ok(VocoderLossBreakdown::from_components(scalar(&adv_g)?, scalar(&adv_d)?, scalar(&fm)?, scalar(&mel)?, &self.cfg))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MelProvenance {
    /// Produced by the acoustic model.
    Predicted,
    /// Computed from a recording.
    GroundTruth,
}

/// A mel spectrogram with a record of where it came from.
#[derive(Debug, Clone)]
pub struct TaggedMel {
    pub utt_id: String,
    pub mel: MelSpectrogram,
    pub provenance: MelProvenance,
}

/// Refuse anything but acoustic-model output in the fine-tuning data path.
pub fn audit_provenance(mels: &[TaggedMel]) -> Result<()> {
    for m in mels {
        if m.provenance != MelProvenance::Predicted {
            return Err(Error::DataPolicy(format!(
                "utterance '{}' carries a {:?} mel; fine-tuning only accepts predicted mels",
                m.utt_id, m.provenance
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderTrainConfig {
    pub generator: OptimizerConfig,
    pub discriminator: OptimizerConfig,
    pub seed: u64,
}

impl Default for VocoderTrainConfig {
    fn default() -> Self {
        let opt = OptimizerConfig { beta1: 0.8, beta2: 0.99, ..OptimizerConfig::default() };
        Self { generator: opt.clone(), discriminator: opt, seed: 0 }
    }
}

/// Vocoder plus optimiser state for alternating D/G updates.
pub struct VocoderTrainer {
    pub vocoder: Vocoder,
    g_opt: Adam,
    d_opt: Adam,
    rng: ChaCha8Rng,
}

impl VocoderTrainer {
    /// `prefix` is the parameter path the vocoder was built under.
    pub fn new(vocoder: Vocoder, store: &ParamStore, prefix: &str, cfg: &VocoderTrainConfig) -> Result<Self> {
        let join = |p: &str| if prefix.is_empty() { p.to_string() } else { format!("{prefix}.{p}") };
        let g_vars = store.vars_with_prefix(&join(GENERATOR_PREFIX));
        let d_vars = store.vars_with_prefix(&join(DISCRIMINATOR_PREFIX));
        if g_vars.is_empty() || d_vars.is_empty() {
            return Err(Error::Argument(format!("no vocoder parameters under '{prefix}'")));
        }
        Ok(Self {
            vocoder,
            g_opt: Adam::new(g_vars, cfg.generator.clone())?,
            d_opt: Adam::new(d_vars, cfg.discriminator.clone())?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn optimizer_state(&self) -> BTreeMap<String, Tensor> {
        let mut s = self.g_opt.state();
        s.extend(self.d_opt.state());
        s
    }

    pub fn step_count(&self) -> usize {
        self.g_opt.step_count()
    }

    /// One discriminator update followed by one generator update on a
    /// random segment of the utterance.
    pub fn finetune_step(&mut self, pred: &TaggedMel, reference: &Waveform) -> Result<VocoderLossBreakdown> {
        audit_provenance(std::slice::from_ref(pred))?;
        let cfg = self.vocoder.cfg.clone();
        pred.mel.check_domain(&cfg.spec)?;
        if reference.sample_rate != cfg.spec.sample_rate {
            return Err(Error::Domain(format!("reference at {} Hz", reference.sample_rate)));
        }
        let hop = cfg.spec.hop;
        let t = pred.mel.n_frames();
        if (t * hop).abs_diff(reference.len()) > hop {
            return Err(Error::Pairing(format!(
                "utterance '{}': mel covers {} samples, reference has {}",
                pred.utt_id,
                t * hop,
                reference.len()
            )));
        }
        let seg = cfg.segment_frames.min(t);
        let start = if t > seg { self.rng.random_range(0..=t - seg) } else { 0 };
        let dtype = self.vocoder.generator.dtype;
        let mel = tensor_from_array(&pred.mel.frames.slice(ndarray::s![start..start + seg, ..]).to_owned(), dtype, &Device::Cpu)?;
        let real: Vec<f32> = (start * hop..(start + seg) * hop).map(|i| reference.samples.get(i).copied().unwrap_or(0.0)).collect();
        let real = Tensor::from_vec(real, (1, 1, seg * hop), &Device::Cpu)?.to_dtype(dtype)?;

        let fake = self.vocoder.generator.forward(&mel)?;
        let d = &self.vocoder.discriminators;
        let real_logits: Vec<Tensor> = d.forward(&real)?.into_iter().map(|o| o.logits).collect();
        let fake_logits: Vec<Tensor> = d.forward(&fake.detach())?.into_iter().map(|o| o.logits).collect();
        let adv_d = lsgan_discriminator_loss(&real_logits, &fake_logits)?;
        self.d_opt.step(&adv_d.backward()?)?;

        let d_real = d.forward(&real)?;
        let d_fake = d.forward(&fake)?;
        let adv_g = lsgan_generator_loss(&d_fake.iter().map(|o| o.logits.clone()).collect::<Vec<_>>())?;
        let fm = feature_matching_loss(
            &d_real.iter().map(|o| o.features.clone()).collect::<Vec<_>>(),
            &d_fake.iter().map(|o| o.features.clone()).collect::<Vec<_>>(),
        )?;
        let mel_recon = (self.vocoder.mel.forward(&real)?.detach() - self.vocoder.mel.forward(&fake)?)?.abs()?.mean_all()?;
        let total_g = ((&adv_g + (&fm * cfg.lambda_fm)?)? + (&mel_recon * cfg.lambda_mel)?)?;
        self.g_opt.step(&total_g.backward()?)?;

        Ok(VocoderLossBreakdown::from_components(scalar(&adv_g)?, scalar(&adv_d)?, scalar(&fm)?, scalar(&mel_recon)?, &cfg))
    }
}
