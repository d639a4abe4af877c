//! Stage trainers, end-to-end conversion and the evaluation harness.
//!
//! Data policy: Stage 1 trains on whisper/normal pairs, Stage 2 on normal
//! recordings only, Stage 3 on acoustic-model mels paired with normal
//! recordings. Every trainer writes one checkpoint under
//! `checkpoint_dir/stage{n}.safetensors` and a line-delimited loss log next
//! to it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::{stage2_objective, AcousticModel, Mode, SpeakerEmbedding, Stage2LossBreakdown};
use crate::aligner::{target_length, LengthChannelAligner};
use crate::checkpoint::Checkpoint;
use crate::config::{AdapterConfig, AdapterKind, CosineReference, RunConfig, SpeakerProvider};
use crate::content_encoder::ContentEncoder;
use crate::corpus::{load_manifest, pair_records, PairRecord, SpeakerEmbedder, Style, UtteranceRecord};
use crate::error::{Error, Result};
use crate::features::{write_matrix, FeatureDomain, FeatureSequence};
use crate::frame::{compute_mel, resample, MelSpectrogram, Waveform};
use crate::griffin_lim::griffin_lim;
use crate::metrics::{duration_error, harmonic_to_noise_ratio, mel_cepstral_distortion, HnrConfig};
use crate::nn::{tensor_from_array, ParamStore};
use crate::optim::Adam;
use crate::prosody::{extract_prosody, ProsodyTargets};
use crate::vae::{ConformerVae, ContentPair, Stage1LossBreakdown};
use crate::vocoder::{audit_provenance, MelProvenance, TaggedMel, Vocoder, VocoderLossBreakdown, VocoderTrainer};

pub const ENCODER_PREFIX: &str = "content_encoder";
pub const VAE_PREFIX: &str = "vae";
pub const ALIGNER_PREFIX: &str = "aligner";
pub const ACOUSTIC_PREFIX: &str = "acoustic";
pub const VOCODER_PREFIX: &str = "vocoder";

/// Every trainable module of the system in one parameter store.
pub struct Models {
    pub store: ParamStore,
    pub encoder: ContentEncoder,
    pub vae: ConformerVae,
    pub aligner: LengthChannelAligner,
    pub acoustic: AcousticModel,
    pub vocoder: Vocoder,
}

impl Models {
    /// Fresh initialisation from `cfg.seed`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.seed, DType::F32);
        let root = store.root();
        let encoder = ContentEncoder::new(&root.pp(ENCODER_PREFIX), cfg.encoder.clone())?;
        let vae = ConformerVae::new(&root.pp(VAE_PREFIX), cfg.vae.clone())?;
        let aligner = LengthChannelAligner::new(&root.pp(ALIGNER_PREFIX), cfg.aligner.clone())?;
        let acoustic = AcousticModel::new(&root.pp(ACOUSTIC_PREFIX), cfg.acoustic.clone())?;
        let vocoder = Vocoder::new(&root.pp(VOCODER_PREFIX), cfg.vocoder.clone())?;
        Ok(Self { store, encoder, vae, aligner, acoustic, vocoder })
    }

    /// Load the listed stages' checkpoints over a fresh initialisation.
    pub fn load(cfg: &RunConfig, stages: &[u8]) -> Result<Self> {
        let models = Self::new(cfg)?;
        for &s in stages {
            models.restore_stage(cfg, s)?;
        }
        Ok(models)
    }

    pub fn restore_stage(&self, cfg: &RunConfig, stage: u8) -> Result<Checkpoint> {
        let ck = require_checkpoint(cfg, stage)?;
        for p in stage_prefixes(stage) {
            ck.restore(&self.store, p)?;
        }
        Ok(ck)
    }

    /// Content features of a waveform at any rate.
    pub fn content_features(&self, w: &Waveform) -> Result<FeatureSequence> {
        self.encoder.encode_content(&analysis_mel(w, &self.encoder.config().spec)?)
    }
}

pub fn stage_prefixes(stage: u8) -> &'static [&'static str] {
    match stage {
        1 => &[ENCODER_PREFIX, VAE_PREFIX],
        2 => &[ALIGNER_PREFIX, ACOUSTIC_PREFIX],
        _ => &[VOCODER_PREFIX],
    }
}

fn require_checkpoint(cfg: &RunConfig, stage: u8) -> Result<Checkpoint> {
    let path = cfg.checkpoint_path(stage);
    if !path.is_file() {
        return Err(Error::Dependency(format!("stage-{stage} checkpoint {} not found", path.display())));
    }
    Checkpoint::load(&path)
}

/// 16 kHz analysis mel of a waveform at any rate.
pub fn analysis_mel(w: &Waveform, spec16: &crate::frame::FrameSpec) -> Result<MelSpectrogram> {
    compute_mel(&resample(w, spec16.sample_rate)?, spec16)
}

/// Crop or edge-pad rows to `t`.
pub fn fit_frames<T: Clone>(x: &Array2<T>, t: usize) -> Array2<T> {
    let last = x.nrows().saturating_sub(1);
    Array2::from_shape_fn((t, x.ncols()), |(i, j)| x[[i.min(last), j]].clone())
}

/// Crop or zero-pad samples to `n`.
pub fn fit_samples(w: &Waveform, n: usize) -> Waveform {
    let mut samples = w.samples.clone();
    samples.resize(n, 0.0);
    Waveform { samples, sample_rate: w.sample_rate }
}

/// A loaded manifest with its base directory.
pub struct Corpus {
    pub base: PathBuf,
    pub records: Vec<UtteranceRecord>,
}

impl Corpus {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let manifest =
            cfg.corpus.manifest.as_ref().ok_or_else(|| Error::Validation("corpus.manifest is not set".into()))?;
        Self::from_manifest(manifest)
    }

    pub fn from_manifest(path: &Path) -> Result<Self> {
        let records = load_manifest(path)?;
        Ok(Self { base: path.parent().unwrap_or(Path::new(".")).to_path_buf(), records })
    }

    pub fn speakers(&self) -> Vec<String> {
        self.records.iter().map(|r| r.speaker.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// `(train, held_out)`: the last `held_out_per_speaker` pairs of every
    /// speaker are held out; training keeps only `train_speakers` if set.
    pub fn split(&self, cfg: &RunConfig) -> Result<(Vec<PairRecord>, Vec<PairRecord>)> {
        let mut by_speaker: BTreeMap<String, Vec<PairRecord>> = BTreeMap::new();
        for p in pair_records(&self.records)? {
            by_speaker.entry(p.normal.speaker.clone()).or_default().push(p);
        }
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (speaker, pairs) in by_speaker {
            let cut = pairs.len().saturating_sub(cfg.corpus.held_out_per_speaker);
            let keep = cfg.corpus.train_speakers.as_ref().is_none_or(|s| s.contains(&speaker));
            for (i, p) in pairs.into_iter().enumerate() {
                if i >= cut {
                    held.push(p);
                } else if keep {
                    train.push(p);
                }
            }
        }
        Ok((train, held))
    }

    pub fn load(&self, r: &UtteranceRecord) -> Result<Waveform> {
        r.load(&self.base)
    }
}

/// Content features for a record, from `corpus.feature_dir` when configured.
fn record_features(cfg: &RunConfig, models: &Models, corpus: &Corpus, r: &UtteranceRecord) -> Result<FeatureSequence> {
    match &cfg.corpus.feature_dir {
        Some(dir) => {
            let f = FeatureSequence::import(dir.join(format!("{}.w2sf", r.utt_id)))?;
            if f.dim() != cfg.encoder.d_content {
                return Err(Error::Shape(format!("{}: {} feature channels, expected {}", r.utt_id, f.dim(), cfg.encoder.d_content)));
            }
            Ok(FeatureSequence { domain: FeatureDomain::Content16k, ..f })
        }
        None => models.content_features(&corpus.load(r)?),
    }
}

pub fn build_embedder(cfg: &RunConfig, speakers: &[String]) -> Result<SpeakerEmbedder> {
    Ok(match cfg.speaker.provider {
        SpeakerProvider::Lookup => SpeakerEmbedder::lookup(speakers.iter().cloned(), cfg.speaker.seed),
        SpeakerProvider::StatsPool => SpeakerEmbedder::stats_pool(cfg.speaker.seed),
        SpeakerProvider::External => SpeakerEmbedder::external(&cfg.speaker.files)?,
    })
}

fn write_log<T: Serialize>(path: &Path, entries: &[T]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (step, e) in entries.iter().enumerate() {
        let line = serde_json::json!({ "step": step, "loss": e });
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Deterministic epoch-shuffled index stream.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self { order: (0..n).collect(), pos: n, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.next()).collect()
    }
}

fn mean_breakdown<T: Copy>(items: &[T], f: impl Fn(&[T]) -> T) -> T {
    f(items)
}

// ---------------------------------------------------------------- Stage 1

/// One training pair: mel inputs for a trainable encoder, or fixed features.
pub struct Stage1Example {
    pub pair_id: String,
    pub mel_whisper: Tensor,
    pub mel_normal: Tensor,
}

pub struct Stage1Trainer<'a> {
    models: &'a Models,
    cfg: &'a RunConfig,
    opt: Adam,
    rng: ChaCha8Rng,
    /// Cached encoder outputs when the encoder is frozen.
    frozen: Vec<Option<(Tensor, Tensor)>>,
}

impl<'a> Stage1Trainer<'a> {
    pub fn new(models: &'a Models, cfg: &'a RunConfig, n_examples: usize) -> Result<Self> {
        let mut vars = models.store.vars_with_prefix(VAE_PREFIX);
        if cfg.stage1.train_content_encoder {
            vars.extend(models.store.vars_with_prefix(ENCODER_PREFIX));
        }
        Ok(Self {
            models,
            cfg,
            opt: Adam::new(vars, cfg.stage1.optimizer.clone())?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5157_0001),
            frozen: vec![None; n_examples],
        })
    }

    fn features(&mut self, idx: usize, ex: &Stage1Example) -> Result<(Tensor, Tensor)> {
        let enc = &self.models.encoder;
        if self.cfg.stage1.train_content_encoder {
            return Ok((enc.forward(&ex.mel_whisper)?, enc.forward(&ex.mel_normal)?));
        }
        if self.frozen[idx].is_none() {
            self.frozen[idx] = Some((enc.forward(&ex.mel_whisper)?.detach(), enc.forward(&ex.mel_normal)?.detach()));
        }
        Ok(self.frozen[idx].clone().expect("cached"))
    }

    /// One optimiser update on the mean loss of `batch` (indices into `examples`).
    pub fn step(&mut self, examples: &[Stage1Example], batch: &[usize]) -> Result<Stage1LossBreakdown> {
        let mut total: Option<Tensor> = None;
        let mut parts = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = &examples[i];
            let (c_w, c_n) = self.features(i, ex)?;
            let pair = ContentPair { whisper_pair_id: ex.pair_id.clone(), normal_pair_id: ex.pair_id.clone(), whisper: c_w, normal: c_n };
            let (loss, b) = self.models.vae.stage1_loss(&pair, &self.cfg.stage1.loss, &self.cfg.softdtw, &mut self.rng)?;
            total = Some(match total {
                Some(t) => (t + loss)?,
                None => loss,
            });
            parts.push(b);
        }
        let total = (total.ok_or_else(|| Error::Argument("empty batch".into()))? / batch.len() as f64)?;
        self.opt.step(&total.backward()?)?;
        Ok(mean_breakdown(&parts, |p| average_stage1(p, &self.cfg.stage1.loss)))
    }

    pub fn optimizer_state(&self) -> BTreeMap<String, Tensor> {
        self.opt.state()
    }
}

fn average_stage1(parts: &[Stage1LossBreakdown], w: &crate::vae::Stage1LossWeights) -> Stage1LossBreakdown {
    let n = parts.len() as f64;
    let m = |f: fn(&Stage1LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    Stage1LossBreakdown::from_components(m(|b| b.kl_w), m(|b| b.kl_n), m(|b| b.recon_n), m(|b| b.dtw), w)
}

pub fn stage1_examples(cfg: &RunConfig, corpus: &Corpus, pairs: &[PairRecord]) -> Result<Vec<Stage1Example>> {
    let spec = &cfg.encoder.spec;
    pairs
        .iter()
        .map(|p| {
            if p.whisper.style != Style::Whisper || p.normal.style != Style::Normal {
                return Err(Error::Pairing(format!("pair '{}' is not one whisper and one normal record", p.pair_id)));
            }
            let t = |r: &UtteranceRecord| -> Result<Tensor> {
                tensor_from_array(&analysis_mel(&corpus.load(r)?, spec)?.frames, DType::F32, &Device::Cpu)
            };
            Ok(Stage1Example { pair_id: p.pair_id.clone(), mel_whisper: t(&p.whisper)?, mel_normal: t(&p.normal)? })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct StageOutcome<T> {
    pub log: Vec<T>,
    pub checkpoint: PathBuf,
}

pub fn train_stage1(cfg: &RunConfig) -> Result<StageOutcome<Stage1LossBreakdown>> {
    let corpus = Corpus::open(cfg)?;
    let (train, _) = corpus.split(cfg)?;
    if train.is_empty() {
        return Err(Error::Pairing("no complete whisper/normal pairs to train on".into()));
    }
    let models = Models::new(cfg)?;
    let examples = stage1_examples(cfg, &corpus, &train)?;
    train_stage1_on(cfg, &models, &examples)
}

/// Stage-1 loop over prepared examples; saves the checkpoint and log.
pub fn train_stage1_on(cfg: &RunConfig, models: &Models, examples: &[Stage1Example]) -> Result<StageOutcome<Stage1LossBreakdown>> {
    let mut trainer = Stage1Trainer::new(models, cfg, examples.len())?;
    let mut sampler = Sampler::new(examples.len(), cfg.seed ^ 0x5157_0002);
    let mut log = Vec::with_capacity(cfg.stage1.steps);
    for step in 0..cfg.stage1.steps {
        let b = trainer.step(examples, &sampler.batch(cfg.stage1.batch_size))?;
        tracing::debug!(step, total = b.total, "stage 1");
        log.push(b);
    }
    let ck = Checkpoint::from_store("stage1", log.len(), cfg.to_json(), &models.store, stage_prefixes(1))
        .with_optimizer(trainer.optimizer_state());
    let path = cfg.checkpoint_path(1);
    ck.save(&path)?;
    write_log(&cfg.checkpoint_dir.join("stage1_log.jsonl"), &log)?;
    Ok(StageOutcome { log, checkpoint: path })
}

// ---------------------------------------------------------------- Stage 2

/// Refuse anything but normal speech in the Stage-2 training set.
pub fn check_stage2_records(records: &[UtteranceRecord]) -> Result<()> {
    match records.iter().find(|r| r.style != Style::Normal) {
        Some(r) => Err(Error::DataPolicy(format!(
            "utterance '{}' is {:?} speech; Stage 2 trains on normal speech only",
            r.utt_id, r.style
        ))),
        None => Ok(()),
    }
}

pub struct Stage2Example {
    pub utt_id: String,
    pub speaker: SpeakerEmbedding,
    /// `(T_enc, d_content)`
    pub content: Tensor,
    /// `(T22, n_mels)`
    pub target_mel: Tensor,
    pub prosody: ProsodyTargets,
}

/// Targets are cut or edge-padded to the aligner's target frame count so that they
/// line up with the aligner output.
pub fn stage2_example(
    cfg: &RunConfig,
    models: &Models,
    corpus: &Corpus,
    embedder: &SpeakerEmbedder,
    r: &UtteranceRecord,
) -> Result<Stage2Example> {
    check_stage2_records(std::slice::from_ref(r))?;
    let spec22 = &cfg.aligner.spec22;
    let wav = corpus.load(r)?;
    let wav22 = resample(&wav, spec22.sample_rate)?;
    let content = record_features(cfg, models, corpus, r)?;
    let t22 = target_length(content.len(), &cfg.aligner.spec16, spec22)?;
    let mel = compute_mel(&wav22, spec22)?;
    let prosody = extract_prosody(&wav22, &mel, &cfg.stage2.pitch)?.fit_length(t22);
    Ok(Stage2Example {
        utt_id: r.utt_id.clone(),
        speaker: embedder.embed_record(r, &corpus.base)?,
        content: tensor_from_array(&content.frames, DType::F32, &Device::Cpu)?,
        target_mel: tensor_from_array(&fit_frames(&mel.frames, t22), DType::F32, &Device::Cpu)?,
        prosody,
    })
}

pub struct Stage2Trainer<'a> {
    models: &'a Models,
    cfg: &'a RunConfig,
    opt: Adam,
}

impl<'a> Stage2Trainer<'a> {
    pub fn new(models: &'a Models, cfg: &'a RunConfig) -> Result<Self> {
        let mut vars = models.store.vars_with_prefix(ALIGNER_PREFIX);
        vars.extend(models.store.vars_with_prefix(ACOUSTIC_PREFIX));
        Ok(Self { models, cfg, opt: Adam::new(vars, cfg.stage2.optimizer.clone())? })
    }

    pub fn loss(&self, ex: &Stage2Example) -> Result<(Tensor, Stage2LossBreakdown)> {
        let x = self.models.aligner.forward(&ex.content)?;
        let out = self.models.acoustic.forward_tensor(&x, &ex.speaker, Some(&ex.prosody), Mode::Train)?;
        stage2_objective(&out, &ex.target_mel, &ex.prosody, &self.cfg.stage2.loss)
    }

    pub fn step(&mut self, examples: &[Stage2Example], batch: &[usize]) -> Result<Stage2LossBreakdown> {
        let mut total: Option<Tensor> = None;
        let mut parts = Vec::with_capacity(batch.len());
        for &i in batch {
            let (loss, b) = self.loss(&examples[i])?;
            total = Some(match total {
                Some(t) => (t + loss)?,
                None => loss,
            });
            parts.push(b);
        }
        let total = (total.ok_or_else(|| Error::Argument("empty batch".into()))? / batch.len() as f64)?;
        self.opt.step(&total.backward()?)?;
        let n = parts.len() as f64;
        let m = |f: fn(&Stage2LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        Ok(Stage2LossBreakdown::from_components(
            m(|b| b.mel_l1),
            m(|b| b.mel_l2),
            m(|b| b.pitch_mse),
            m(|b| b.energy_mse),
            &self.cfg.stage2.loss,
        ))
    }

    pub fn optimizer_state(&self) -> BTreeMap<String, Tensor> {
        self.opt.state()
    }
}

pub fn train_stage2(cfg: &RunConfig) -> Result<StageOutcome<Stage2LossBreakdown>> {
    let models = Models::load(cfg, &[1])?;
    let corpus = Corpus::open(cfg)?;
    let (train, _) = corpus.split(cfg)?;
    let records: Vec<UtteranceRecord> = train.into_iter().map(|p| p.normal).collect();
    if records.is_empty() {
        return Err(Error::Validation("no normal recordings to train on".into()));
    }
    train_stage2_on(cfg, &models, &corpus, &records)
}

/// Stage-2 loop on explicit records, which must all be normal speech.
pub fn train_stage2_on(
    cfg: &RunConfig,
    models: &Models,
    corpus: &Corpus,
    records: &[UtteranceRecord],
) -> Result<StageOutcome<Stage2LossBreakdown>> {
    check_stage2_records(records)?;
    let speakers: Vec<String> = records.iter().map(|r| r.speaker.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let embedder = build_embedder(cfg, &speakers)?;
    let examples = records
        .iter()
        .map(|r| stage2_example(cfg, models, corpus, &embedder, r))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = Stage2Trainer::new(models, cfg)?;
    let mut sampler = Sampler::new(examples.len(), cfg.seed ^ 0x5157_0003);
    let mut log = Vec::with_capacity(cfg.stage2.steps);
    for step in 0..cfg.stage2.steps {
        let b = trainer.step(&examples, &sampler.batch(cfg.stage2.batch_size))?;
        tracing::debug!(step, mel_l1 = b.mel_l1, "stage 2");
        log.push(b);
    }
    let mut ck = Checkpoint::from_store("stage2", log.len(), cfg.to_json(), &models.store, stage_prefixes(2))
        .with_optimizer(trainer.optimizer_state());
    ck.notes.insert("speakers".into(), serde_json::to_string(&speakers).expect("strings serialise"));
    let path = cfg.checkpoint_path(2);
    ck.save(&path)?;
    write_log(&cfg.checkpoint_dir.join("stage2_log.jsonl"), &log)?;
    Ok(StageOutcome { log, checkpoint: path })
}

// ---------------------------------------------------------------- Stage 3

/// Acoustic-model mels for Stage-3 fine-tuning, paired with the normal
/// recordings cut to the mel's sample span.
pub fn predicted_mel_cache(
    cfg: &RunConfig,
    models: &Models,
    corpus: &Corpus,
    embedder: &SpeakerEmbedder,
    records: &[UtteranceRecord],
) -> Result<Vec<(TaggedMel, Waveform)>> {
    check_stage2_records(records)?;
    let spec22 = &cfg.aligner.spec22;
    records
        .iter()
        .map(|r| {
            let content = record_features(cfg, models, corpus, r)?;
            let aligned = models.aligner.align(&content)?;
            let speaker = embedder.embed_record(r, &corpus.base)?;
            let (mel, _) = models.acoustic.forward(&aligned, &speaker, None, Mode::Infer)?;
            let wav22 = resample(&corpus.load(r)?, spec22.sample_rate)?;
            let reference = fit_samples(&wav22, mel.n_frames() * spec22.hop);
            Ok((TaggedMel { utt_id: r.utt_id.clone(), mel, provenance: MelProvenance::Predicted }, reference))
        })
        .collect()
}

pub fn train_stage3(cfg: &RunConfig) -> Result<StageOutcome<VocoderLossBreakdown>> {
    let models = Models::new(cfg)?;
    models.restore_stage(cfg, 1)?;
    let ck2 = models.restore_stage(cfg, 2)?;
    if let Some(init) = &cfg.stage3.init_checkpoint {
        if !init.is_file() {
            return Err(Error::Dependency(format!("initial vocoder checkpoint {} not found", init.display())));
        }
        Checkpoint::load(init)?.restore(&models.store, VOCODER_PREFIX)?;
    }
    let corpus = Corpus::open(cfg)?;
    let (train, _) = corpus.split(cfg)?;
    let records: Vec<UtteranceRecord> = train.into_iter().map(|p| p.normal).collect();
    let speakers = checkpoint_speakers(&ck2).unwrap_or_else(|| corpus.speakers());
    let embedder = build_embedder(cfg, &speakers)?;
    let cache = predicted_mel_cache(cfg, &models, &corpus, &embedder, &records)?;
    let cache_dir = cfg.checkpoint_dir.join("stage3_mels");
    std::fs::create_dir_all(&cache_dir).map_err(|e| Error::io(&cache_dir, e))?;
    for (m, _) in &cache {
        write_matrix(cache_dir.join(format!("{}.w2sf", m.utt_id)), &m.mel.frames.mapv(|v| v as f32))?;
    }
    let Models { store, vocoder, .. } = models;
    train_stage3_on(cfg, &store, vocoder, &cache)
}

/// Fine-tune on a cache of predicted mels; saves the checkpoint and log.
pub fn train_stage3_on(
    cfg: &RunConfig,
    store: &ParamStore,
    vocoder: Vocoder,
    cache: &[(TaggedMel, Waveform)],
) -> Result<StageOutcome<VocoderLossBreakdown>> {
    let tagged: Vec<TaggedMel> = cache.iter().map(|(m, _)| m.clone()).collect();
    audit_provenance(&tagged)?;
    if cache.is_empty() {
        return Err(Error::Validation("no predicted mels to fine-tune on".into()));
    }
    let mut trainer = VocoderTrainer::new(vocoder, store, VOCODER_PREFIX, &cfg.stage3.train)?;
    let mut sampler = Sampler::new(cache.len(), cfg.seed ^ 0x5157_0004);
    let mut log = Vec::with_capacity(cfg.stage3.steps);
    for step in 0..cfg.stage3.steps {
        let (mel, wav) = &cache[sampler.next()];
        let b = trainer.finetune_step(mel, wav)?;
        tracing::debug!(step, mel_recon = b.mel_recon, "stage 3");
        log.push(b);
    }
    let ck = Checkpoint::from_store("stage3", log.len(), cfg.to_json(), store, stage_prefixes(3))
        .with_optimizer(trainer.optimizer_state());
    let path = cfg.checkpoint_path(3);
    ck.save(&path)?;
    write_log(&cfg.checkpoint_dir.join("stage3_log.jsonl"), &log)?;
    Ok(StageOutcome { log, checkpoint: path })
}

fn checkpoint_speakers(ck: &Checkpoint) -> Option<Vec<String>> {
    ck.notes.get("speakers").and_then(|s| serde_json::from_str(s).ok())
}

// ---------------------------------------------------------------- conversion

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WaveformBackend {
    Vocoder,
    GriffinLim,
}

#[derive(Debug, Clone)]
pub struct Conversion {
    pub waveform: Waveform,
    pub mel: MelSpectrogram,
    pub prosody: ProsodyTargets,
    pub t_enc: usize,
    pub backend: WaveformBackend,
}

/// Where the target speaker comes from.
#[derive(Debug, Clone)]
pub enum SpeakerRef {
    Id(String),
    Audio(PathBuf),
    Embedding(SpeakerEmbedding),
}

pub struct Converter {
    pub models: Models,
    cfg: RunConfig,
    backend: WaveformBackend,
    embedder: SpeakerEmbedder,
}

impl Converter {
    /// Stage-1 and Stage-2 checkpoints are required; without a Stage-3
    /// checkpoint the Griffin-Lim fallback is used.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let models = Models::new(cfg)?;
        models.restore_stage(cfg, 1)?;
        let ck2 = models.restore_stage(cfg, 2)?;
        let backend = if !cfg.convert.force_griffin_lim && cfg.checkpoint_path(3).is_file() {
            models.restore_stage(cfg, 3)?;
            WaveformBackend::Vocoder
        } else {
            WaveformBackend::GriffinLim
        };
        let speakers = checkpoint_speakers(&ck2).unwrap_or_default();
        let embedder = build_embedder(cfg, &speakers)?;
        Ok(Self { models, cfg: cfg.clone(), backend, embedder })
    }

    pub fn backend(&self) -> WaveformBackend {
        self.backend
    }

    pub fn speaker(&self, r: &SpeakerRef) -> Result<SpeakerEmbedding> {
        match r {
            SpeakerRef::Id(id) => self.embedder.embed_speaker(id),
            SpeakerRef::Audio(path) => match &self.embedder {
                SpeakerEmbedder::StatsPool(_) => self.embedder.embed_waveform(&Waveform::read_wav(path)?),
                _ => Err(Error::Argument("speaker audio needs the stats-pool provider".into())),
            },
            SpeakerRef::Embedding(e) => Ok(e.clone()),
        }
    }

    /// compute_mel(16k), content encoder, whisper-branch VAE, aligner,
    /// acoustic model in inference mode, then waveform synthesis.
    pub fn convert(&self, whisper: &Waveform, speaker: &SpeakerEmbedding) -> Result<Conversion> {
        let m = &self.models;
        let c_w = m.content_features(whisper)?;
        let r_w = m.vae.infer_aligned(&c_w)?;
        let aligned = m.aligner.align(&r_w)?;
        let (mel, prosody) = m.acoustic.forward(&aligned, speaker, None, Mode::Infer)?;
        let waveform = match self.backend {
            WaveformBackend::Vocoder => m.vocoder.generate(&mel)?,
            WaveformBackend::GriffinLim => griffin_lim(&mel, self.cfg.convert.griffin_lim_iters, self.cfg.seed)?.waveform,
        };
        Ok(Conversion { waveform, mel, prosody, t_enc: c_w.len(), backend: self.backend })
    }
}

/// Which intermediate representation `export-features` writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// Content-encoder output.
    Content,
    /// Whisper-branch VAE reconstruction handed to the aligner.
    Latent,
    /// Aligner output in the synthesis frame grid.
    Aligned,
}

pub fn export_features(cfg: &RunConfig, wav: &Waveform, kind: FeatureKind, out: &Path) -> Result<FeatureSequence> {
    let stages: &[u8] = if kind == FeatureKind::Aligned { &[1, 2] } else { &[1] };
    let models = Models::load(cfg, stages)?;
    let c = models.content_features(wav)?;
    let f = match kind {
        FeatureKind::Content => c,
        FeatureKind::Latent => models.vae.infer_aligned(&c)?,
        FeatureKind::Aligned => models.aligner.align(&models.vae.infer_aligned(&c)?)?,
    };
    f.export(out)?;
    Ok(f)
}

// ---------------------------------------------------------------- evaluation

/// Full-scale reference results, kept for context only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTargets {
    pub dnsmos: f64,
    pub utmos: f64,
    pub cer: f64,
    pub speaker_cosine: f64,
    pub reproducible_at_desk_scale: bool,
    pub note: String,
}

impl Default for ReferenceTargets {
    fn default() -> Self {
        Self {
            dnsmos: 3.11,
            utmos: 2.52,
            cer: 0.1867,
            speaker_cosine: 0.76,
            reproducible_at_desk_scale: false,
            note: "full-scale system on AISHELL6-Whisper with pretrained Whisper-large-v3 and SimAM-ResNet34".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub pair_id: String,
    pub output: PathBuf,
    pub mel_cepstral_distortion: Option<f64>,
    pub speaker_cosine: Option<f64>,
    /// Frames.
    pub duration_error: Option<f64>,
    pub output_hnr_db: Option<f64>,
    pub input_hnr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub evaluated: usize,
    pub failed: usize,
    pub mel_cepstral_distortion: Option<f64>,
    pub speaker_cosine: Option<f64>,
    pub duration_error: Option<f64>,
    pub output_hnr_db: Option<f64>,
    pub input_hnr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub reference: ReferenceTargets,
    pub utterances: Vec<UtteranceMetrics>,
    pub aggregate: AggregateMetrics,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    /// Aggregates are arithmetic means over utterances without an error.
    pub fn from_utterances(utterances: Vec<UtteranceMetrics>) -> Self {
        let ok: Vec<&UtteranceMetrics> = utterances.iter().filter(|u| u.error.is_none()).collect();
        let names: BTreeSet<&String> = ok.iter().flat_map(|u| u.external.keys()).collect();
        let external = names
            .into_iter()
            .filter_map(|n| mean_of(ok.iter().map(|u| u.external.get(n).copied())).map(|m| (n.clone(), m)))
            .collect();
        let aggregate = AggregateMetrics {
            evaluated: ok.len(),
            failed: utterances.len() - ok.len(),
            mel_cepstral_distortion: mean_of(ok.iter().map(|u| u.mel_cepstral_distortion)),
            speaker_cosine: mean_of(ok.iter().map(|u| u.speaker_cosine)),
            duration_error: mean_of(ok.iter().map(|u| u.duration_error)),
            output_hnr_db: mean_of(ok.iter().map(|u| u.output_hnr_db)),
            input_hnr_db: mean_of(ok.iter().map(|u| u.input_hnr_db)),
            external,
        };
        Self { reference: ReferenceTargets::default(), utterances, aggregate }
    }

    /// Reference line, one line per utterance, then the aggregate.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |kind: &str, v: serde_json::Value| {
            let mut obj = serde_json::json!({ "kind": kind });
            if let (Some(o), serde_json::Value::Object(m)) = (obj.as_object_mut(), v) {
                o.extend(m);
            }
            out.push_str(&obj.to_string());
            out.push('\n');
        };
        push("reference", serde_json::to_value(&self.reference).expect("serialisable"));
        for u in &self.utterances {
            push("utterance", serde_json::to_value(u).expect("serialisable"));
        }
        push("aggregate", serde_json::to_value(&self.aggregate).expect("serialisable"));
        out
    }

    pub fn summary_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let mut s = String::new();
        s.push_str(&format!(
            "reference (not reproducible at desk scale): DNSMOS {:.2}  UTMOS {:.2}  CER {:.2}%  cosine {:.2}\n",
            self.reference.dnsmos,
            self.reference.utmos,
            self.reference.cer * 100.0,
            self.reference.speaker_cosine
        ));
        s.push_str(&format!("{:<24} {:>9} {:>9} {:>9} {:>9} {:>9}\n", "pair", "MCD dB", "cosine", "dur err", "HNR out", "HNR in"));
        for u in &self.utterances {
            match &u.error {
                Some(e) => s.push_str(&format!("{:<24} error: {e}\n", u.pair_id)),
                None => s.push_str(&format!(
                    "{:<24} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
                    u.pair_id,
                    f(u.mel_cepstral_distortion),
                    f(u.speaker_cosine),
                    f(u.duration_error),
                    f(u.output_hnr_db),
                    f(u.input_hnr_db)
                )),
            }
        }
        let a = &self.aggregate;
        s.push_str(&format!(
            "{:<24} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            format!("mean of {} ({} failed)", a.evaluated, a.failed),
            f(a.mel_cepstral_distortion),
            f(a.speaker_cosine),
            f(a.duration_error),
            f(a.output_hnr_db),
            f(a.input_hnr_db)
        ));
        for (k, v) in &a.external {
            s.push_str(&format!("{k}: {v:.4}\n"));
        }
        s
    }
}

/// Output file expected for a pair.
pub fn output_path(outputs_dir: &Path, pair_id: &str) -> PathBuf {
    outputs_dir.join(format!("{pair_id}.wav"))
}

/// Internal metrics for every pair, then configured external adapters on the
/// outputs that loaded.
pub fn evaluate(cfg: &RunConfig, corpus: &Corpus, pairs: &[PairRecord], outputs_dir: &Path) -> Result<MetricReport> {
    let embedder = SpeakerEmbedder::stats_pool(cfg.eval.embedder_seed);
    let hnr = HnrConfig::default();
    let spec22 = &cfg.aligner.spec22;
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = output_path(outputs_dir, &p.pair_id);
        let row = (|| -> Result<UtteranceMetrics> {
            if !out.is_file() {
                return Err(Error::Dependency(format!("converted output {} not found", out.display())));
            }
            let converted = resample(&Waveform::read_wav(&out)?, spec22.sample_rate)?;
            let whisper = corpus.load(&p.whisper)?;
            let normal = resample(&corpus.load(&p.normal)?, spec22.sample_rate)?;
            let mcd = mel_cepstral_distortion(&compute_mel(&converted, spec22)?, &compute_mel(&normal, spec22)?)?;
            let reference = match cfg.eval.cosine_reference {
                CosineReference::PairedNormal => &normal,
                CosineReference::WhisperInput => &whisper,
            };
            let cosine = embedder.embed_waveform(&converted)?.cosine(&embedder.embed_waveform(reference)?);
            let t_enc = crate::content_encoder::encoded_length(analysis_mel(&whisper, &cfg.aligner.spec16)?.n_frames());
            let expected = target_length(t_enc, &cfg.aligner.spec16, spec22)?;
            Ok(UtteranceMetrics {
                pair_id: p.pair_id.clone(),
                output: out.clone(),
                mel_cepstral_distortion: Some(mcd),
                speaker_cosine: Some(cosine),
                duration_error: Some(duration_error(converted.len() / spec22.hop, expected)),
                output_hnr_db: Some(harmonic_to_noise_ratio(&converted, &hnr)?),
                input_hnr_db: Some(harmonic_to_noise_ratio(&resample(&whisper, spec22.sample_rate)?, &hnr)?),
                external: BTreeMap::new(),
                error: None,
            })
        })();
        rows.push(row.unwrap_or_else(|e| UtteranceMetrics {
            pair_id: p.pair_id.clone(),
            output: out.clone(),
            error: Some(e.to_string()),
            ..Default::default()
        }));
    }
    for adapter in &cfg.eval.adapters {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].error.is_none()).collect();
        if idx.is_empty() {
            break;
        }
        let wavs: Vec<PathBuf> = idx.iter().map(|&i| rows[i].output.clone()).collect();
        let lines = run_adapter(adapter, &wavs)?;
        for (&i, line) in idx.iter().zip(&lines) {
            let value = match adapter.kind {
                AdapterKind::Score => line.trim().parse::<f64>().map_err(|_| {
                    Error::Validation(format!("adapter '{}' printed '{line}', not a number", adapter.name))
                })?,
                AdapterKind::Transcript => {
                    let pair = &pairs[i];
                    let text = pair.normal.text.as_deref().or(pair.whisper.text.as_deref()).ok_or_else(|| {
                        Error::Validation(format!("pair '{}' has no reference text for '{}'", pair.pair_id, adapter.name))
                    })?;
                    character_error_rate(text, line.trim())
                }
            };
            rows[i].external.insert(adapter.name.clone(), value);
        }
    }
    Ok(MetricReport::from_utterances(rows))
}

/// Run `program args... wavs...` and return one output line per WAV.
pub fn run_adapter(adapter: &AdapterConfig, wavs: &[PathBuf]) -> Result<Vec<String>> {
    let output = std::process::Command::new(&adapter.program)
        .args(&adapter.args)
        .args(wavs)
        .output()
        .map_err(|e| Error::Dependency(format!("metric adapter '{}' ({}) failed to start: {e}", adapter.name, adapter.program)))?;
    if !output.status.success() {
        return Err(Error::Dependency(format!(
            "metric adapter '{}' exited with {}: {}",
            adapter.name,
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    let lines: Vec<String> =
        String::from_utf8_lossy(&output.stdout).lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
    if lines.len() != wavs.len() {
        return Err(Error::Validation(format!(
            "metric adapter '{}' printed {} lines for {} files",
            adapter.name,
            lines.len(),
            wavs.len()
        )));
    }
    Ok(lines)
}

/// Levenshtein distance over characters, divided by the reference length.
pub fn character_error_rate(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    if r.is_empty() {
        return if h.is_empty() { 0.0 } else { 1.0 };
    }
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    for (i, rc) in r.iter().enumerate() {
        let mut cur = vec![i + 1; h.len() + 1];
        for (j, hc) in h.iter().enumerate() {
            cur[j + 1] = (prev[j] + (rc != hc) as usize).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[h.len()] as f64 / r.len() as f64
}
