use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use w2s_core::config::{RunConfig, SpeakerProvider};
use w2s_core::corpus::write_corpus;
use w2s_core::pipeline::{
    evaluate, export_features, output_path, train_stage1, train_stage2, train_stage3, Converter, Corpus, FeatureKind,
    SpeakerRef,
};
use w2s_core::{Error, Result, Waveform};

#[derive(Parser)]
#[command(name = "w2s", version, about = "Three-stage whisper-to-speech conversion")]
struct Cli {
    /// TOML run configuration merged over the built-in toy defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set stage1.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic paired corpus and its manifest.
    MakeSynthData {
        /// Target directory; defaults to `<out>/corpus`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Train the content encoder and dual-encoder VAE on whisper/normal pairs.
    TrainStage1,
    /// Train the aligner and acoustic model on normal speech.
    TrainStage2,
    /// Fine-tune the vocoder on predicted mels.
    TrainStage3,
    /// Convert one whispered file, or every held-out pair when `--input` is absent.
    Convert {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Target speaker id known to the speaker provider.
        #[arg(long, conflicts_with = "speaker_audio")]
        speaker: Option<String>,
        /// Reference recording of the target speaker (stats-pool provider).
        #[arg(long)]
        speaker_audio: Option<PathBuf>,
        /// Output WAV for `--input`; defaults to `<out>/converted/<stem>.wav`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score converted outputs of the held-out pairs.
    Eval {
        /// Directory of `<pair_id>.wav`; defaults to `<out>/converted`.
        #[arg(long)]
        outputs: Option<PathBuf>,
    },
    /// Write an intermediate feature sequence of one file.
    ExportFeatures {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "content")]
        kind: Kind,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Content,
    Latent,
    Aligned,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(d) = &cli.checkpoint_dir {
        cfg.checkpoint_dir = d.clone();
    }
    if let Some(d) = &cli.out {
        cfg.out_dir = d.clone();
    }
    if cfg.corpus.manifest.is_none() {
        let default = default_corpus_dir(&cfg).join("manifest.jsonl");
        cfg.corpus.manifest = default.is_file().then_some(default);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_corpus_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("corpus")
}

fn converted_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("converted")
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e }),
        None => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::MakeSynthData { dir } => {
            let dir = dir.unwrap_or_else(|| default_corpus_dir(&cfg));
            let records = write_corpus(&cfg.corpus.synth, &dir)?;
            println!("wrote {} utterances; manifest {}", records.len(), dir.join("manifest.jsonl").display());
        }
        Command::TrainStage1 => {
            let o = train_stage1(&cfg)?;
            if let (Some(first), Some(last)) = (o.log.first(), o.log.last()) {
                println!("stage 1: total {:.5} -> {:.5}", first.total, last.total);
            }
            println!("checkpoint {}", o.checkpoint.display());
        }
        Command::TrainStage2 => {
            let o = train_stage2(&cfg)?;
            if let (Some(first), Some(last)) = (o.log.first(), o.log.last()) {
                println!("stage 2: mel_l1 {:.5} -> {:.5}", first.mel_l1, last.mel_l1);
            }
            println!("checkpoint {}", o.checkpoint.display());
        }
        Command::TrainStage3 => {
            let o = train_stage3(&cfg)?;
            if let (Some(first), Some(last)) = (o.log.first(), o.log.last()) {
                println!("stage 3: mel_recon {:.5} -> {:.5}", first.mel_recon, last.mel_recon);
            }
            println!("checkpoint {}", o.checkpoint.display());
        }
        Command::Convert { input, speaker, speaker_audio, output } => {
            let converter = Converter::load(&cfg)?;
            match input {
                Some(input) => {
                    let target = match (speaker, speaker_audio) {
                        (Some(id), _) => SpeakerRef::Id(id),
                        (None, Some(p)) => SpeakerRef::Audio(p),
                        (None, None) => return Err(Error::Argument("convert --input needs --speaker or --speaker-audio".into())),
                    };
                    let embedding = converter.speaker(&target)?;
                    let c = converter.convert(&Waveform::read_wav(&input)?, &embedding)?;
                    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "converted".into());
                    let out = output.unwrap_or_else(|| converted_dir(&cfg).join(format!("{stem}.wav")));
                    ensure_parent(&out)?;
                    c.waveform.write_wav(&out)?;
                    println!("{} ({:?}, {} samples)", out.display(), c.backend, c.waveform.len());
                }
                None => {
                    let corpus = Corpus::open(&cfg)?;
                    let (_, held) = corpus.split(&cfg)?;
                    let dir = converted_dir(&cfg);
                    ensure_parent(&dir.join("x"))?;
                    for p in &held {
                        let target = match &speaker {
                            Some(id) => SpeakerRef::Id(id.clone()),
                            None if cfg.speaker.provider == SpeakerProvider::StatsPool => {
                                SpeakerRef::Audio(p.normal.resolve(&corpus.base))
                            }
                            None => SpeakerRef::Id(p.normal.speaker.clone()),
                        };
                        let c = converter.convert(&corpus.load(&p.whisper)?, &converter.speaker(&target)?)?;
                        c.waveform.write_wav(output_path(&dir, &p.pair_id))?;
                    }
                    println!("converted {} held-out pairs into {} ({:?})", held.len(), dir.display(), converter.backend());
                }
            }
        }
        Command::Eval { outputs } => {
            let corpus = Corpus::open(&cfg)?;
            let (_, held) = corpus.split(&cfg)?;
            let dir = outputs.unwrap_or_else(|| converted_dir(&cfg));
            let report = evaluate(&cfg, &corpus, &held, &dir)?;
            let path = cfg.out_dir.join("metrics.jsonl");
            write_file(&path, &report.to_jsonl())?;
            print!("{}", report.summary_table());
            println!("records {}", path.display());
        }
        Command::ExportFeatures { input, kind, output } => {
            let kind = match kind {
                Kind::Content => FeatureKind::Content,
                Kind::Latent => FeatureKind::Latent,
                Kind::Aligned => FeatureKind::Aligned,
            };
            let f = export_features(&cfg, &Waveform::read_wav(&input)?, kind, &output)?;
            println!("{} ({} x {}, {:?})", output.display(), f.len(), f.dim(), f.domain);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
