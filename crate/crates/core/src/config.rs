//! Run configuration: a TOML tree merged over built-in defaults, then
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticConfig, Stage2LossWeights};
use crate::aligner::AlignerConfig;
use crate::content_encoder::ContentEncoderConfig;
use crate::corpus::SynthSpec;
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::prosody::PitchConfig;
use crate::softdtw::{CostMetric, SoftDtwConfig};
use crate::vae::{Stage1LossWeights, VaeConfig};
use crate::vocoder::{VocoderConfig, VocoderTrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Line-delimited manifest. Required by every trainer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Precomputed content features `<utt_id>.w2sf`, used instead of the
    /// toy encoder when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dir: Option<PathBuf>,
    /// Speakers used for training; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_speakers: Option<Vec<String>>,
    /// The last pairs of each speaker, by pair id, are kept out of training.
    pub held_out_per_speaker: usize,
    /// Used by `make-synth-data`.
    pub synth: SynthSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpeakerProvider {
    Lookup,
    StatsPool,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerConfig {
    pub provider: SpeakerProvider,
    /// Speaker id to `1 x 256` feature file, for the external provider.
    #[serde(default)]
    pub files: std::collections::BTreeMap<String, PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: Stage1LossWeights,
    pub train_content_encoder: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: Stage2LossWeights,
    pub pitch: PitchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Config {
    pub steps: usize,
    pub train: VocoderTrainConfig,
    /// Vocoder checkpoint to fine-tune from instead of a fresh initialisation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertConfig {
    /// Iterations of the fallback used when no vocoder checkpoint exists.
    pub griffin_lim_iters: usize,
    /// Ignore a present vocoder checkpoint and always use the fallback.
    pub force_griffin_lim: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CosineReference {
    /// The paired normal recording.
    PairedNormal,
    /// The whispered input itself.
    WhisperInput,
}

/// A metric tool invoked as `program args... wav...`, printing one line per
/// WAV in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub name: String,
    pub kind: AdapterKind,
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    /// One score per line.
    Score,
    /// One transcript per line, scored as character error rate against the
    /// manifest text.
    Transcript,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub cosine_reference: CosineReference,
    /// Seed of the stats-pool embedder used for speaker similarity.
    pub embedder_seed: u64,
    #[serde(default)]
    pub adapters: Vec<AdapterConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub encoder: ContentEncoderConfig,
    pub vae: VaeConfig,
    pub softdtw: SoftDtwConfig,
    pub aligner: AlignerConfig,
    pub acoustic: AcousticConfig,
    pub vocoder: VocoderConfig,
    pub speaker: SpeakerConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub convert: ConvertConfig,
    pub eval: EvalConfig,
}

/// Ten times the default rate, so a 50-step toy fine-tune makes visible progress.
fn toy_vocoder_training(seed: u64) -> VocoderTrainConfig {
    let d = VocoderTrainConfig::default();
    VocoderTrainConfig {
        generator: OptimizerConfig { learning_rate: 2e-3, ..d.generator },
        discriminator: OptimizerConfig { learning_rate: 2e-3, ..d.discriminator },
        seed,
    }
}

impl RunConfig {
    /// Desk-scale defaults.
    pub fn toy(seed: u64) -> Self {
        let opt = OptimizerConfig { learning_rate: 1e-3, ..OptimizerConfig::default() };
        Self {
            seed,
            checkpoint_dir: PathBuf::from("checkpoints"),
            out_dir: PathBuf::from("out"),
            corpus: CorpusConfig {
                manifest: None,
                feature_dir: None,
                train_speakers: None,
                held_out_per_speaker: 5,
                synth: SynthSpec::new(2, 20, seed),
            },
            encoder: ContentEncoderConfig::default(),
            vae: VaeConfig::default(),
            softdtw: SoftDtwConfig { gamma: 0.01, metric: CostMetric::MeanSquared, normalize_by_length: true },
            aligner: AlignerConfig::toy(),
            acoustic: AcousticConfig::default(),
            vocoder: VocoderConfig::reduced(),
            speaker: SpeakerConfig { provider: SpeakerProvider::Lookup, files: Default::default(), seed },
            stage1: Stage1Config {
                steps: 300,
                batch_size: 1,
                optimizer: opt.clone(),
                loss: Stage1LossWeights::default(),
                train_content_encoder: false,
            },
            stage2: Stage2Config {
                steps: 300,
                // Single-utterance steps leave low-pitched voices with smeared
                // harmonics; a higher rate instead stalls on the mean spectrum.
                batch_size: 4,
                optimizer: opt,
                loss: Stage2LossWeights::default(),
                pitch: PitchConfig::default(),
            },
            stage3: Stage3Config { steps: 50, train: toy_vocoder_training(seed), init_checkpoint: None },
            convert: ConvertConfig { griffin_lim_iters: 32, force_griffin_lim: false },
            eval: EvalConfig { cosine_reference: CosineReference::PairedNormal, embedder_seed: seed, adapters: Vec::new() },
        }
    }

    /// Parse a TOML tree, apply `key=value` overrides and merge the result
    /// over `toy(seed)`. The seed must come from the file or an override.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table =
            toml::from_str(text).map_err(|e| Error::Validation(format!("config: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let seed = match user.get("seed") {
            Some(toml::Value::Integer(s)) if *s >= 0 => *s as u64,
            Some(other) => return Err(Error::Validation(format!("seed must be a non-negative integer, got {other}"))),
            None => return Err(Error::Validation("a seed is required: set `seed` in the config or pass --seed".into())),
        };
        let mut tree = toml::Table::try_from(Self::toy(seed)).map_err(|e| Error::Validation(format!("config defaults: {e}")))?;
        merge(&mut tree, user);
        let cfg: RunConfig =
            toml::Value::Table(tree).try_into().map_err(|e: toml::de::Error| Error::Validation(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.aligner.validate()?;
        self.vocoder.validate()?;
        self.stage1.loss.validate()?;
        self.corpus.synth.validate()?;
        if self.vae.d_content != self.encoder.d_content || self.aligner.d_in != self.encoder.d_content {
            return Err(Error::Validation("encoder.d_content, vae.d_content and aligner.d_in must agree".into()));
        }
        if self.acoustic.n_feat != self.aligner.n_feat {
            return Err(Error::Validation("acoustic.n_feat must equal aligner.n_feat".into()));
        }
        if self.acoustic.spec != self.aligner.spec22 || self.vocoder.spec != self.aligner.spec22 {
            return Err(Error::Validation("aligner, acoustic model and vocoder must share the synthesis frame spec".into()));
        }
        if self.encoder.spec != self.aligner.spec16 {
            return Err(Error::Validation("encoder and aligner must share the analysis frame spec".into()));
        }
        if self.stage1.batch_size == 0 || self.stage2.batch_size == 0 {
            return Err(Error::Validation("batch sizes must be positive".into()));
        }
        for dir in [&self.checkpoint_dir, &self.out_dir] {
            if dir.exists() && !dir.is_dir() {
                return Err(Error::Validation(format!("{} exists and is not a directory", dir.display())));
            }
        }
        Ok(())
    }

    pub fn checkpoint_path(&self, stage: u8) -> PathBuf {
        self.checkpoint_dir.join(format!("stage{stage}.safetensors"))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is parsed as a TOML literal, falling back to a
/// bare string.
fn apply_override(tree: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("override '{item}' is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let next = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match next {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Validation(format!("override '{key}': '{p}' is not a table"))),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required() {
        assert!(matches!(RunConfig::from_toml_str("", &[]), Err(Error::Validation(_))));
        let cfg = RunConfig::from_toml_str("", &["seed=4".into()]).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.corpus.synth.seed, 4);
    }

    #[test]
    fn file_and_overrides_merge_over_defaults() {
        let text = "seed = 7\n[stage1]\nsteps = 12\n[vae]\nd_latent = 16\n";
        let cfg = RunConfig::from_toml_str(text, &["stage2.optimizer.learning_rate=0.01".into(), "out_dir=x/y".into()]).unwrap();
        assert_eq!(cfg.stage1.steps, 12);
        assert_eq!(cfg.stage1.batch_size, 1);
        assert_eq!(cfg.vae.d_latent, 16);
        assert_eq!(cfg.stage2.optimizer.learning_rate, 0.01);
        assert_eq!(cfg.out_dir, PathBuf::from("x/y"));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::toy(3);
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn inconsistent_widths_rejected() {
        assert!(RunConfig::from_toml_str("seed = 1\n[aligner]\nn_feat = 10\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("seed = 1", &["stage1.batch_size=0".into()]).is_err());
        assert!(RunConfig::from_toml_str("seed = 1", &["nonsense".into()]).is_err());
    }
}
