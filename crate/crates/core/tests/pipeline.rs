use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use w2s_core::aligner::target_length;
use w2s_core::checkpoint::Checkpoint;
use w2s_core::config::RunConfig;
use w2s_core::content_encoder::encoded_length;
use w2s_core::corpus::{write_corpus, write_manifest, Style, SynthSpec};
use w2s_core::pipeline::{
    analysis_mel, evaluate, output_path, stage_prefixes, train_stage1, train_stage2, train_stage3, Converter, Corpus,
    Models,
};
use w2s_core::{num_frames, resample, Error, Waveform};

fn toy_run(dir: &Path, seed: u64, speakers: usize, utts: usize) -> RunConfig {
    let mut cfg = RunConfig::toy(seed);
    cfg.corpus.synth = SynthSpec::new(speakers, utts, seed);
    cfg.corpus.held_out_per_speaker = 1;
    write_corpus(&cfg.corpus.synth, dir.join("corpus")).unwrap();
    cfg.corpus.manifest = Some(dir.join("corpus/manifest.jsonl"));
    cfg.checkpoint_dir = dir.join("ckpt");
    cfg
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn stage1_loss_trends_down() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_run(dir.path(), 7, 2, 6);
    assert_eq!(cfg.stage1.steps, 300);
    let out = train_stage1(&cfg).unwrap();
    let totals: Vec<f64> = out.log.iter().map(|b| b.total).collect();
    assert_eq!(totals.len(), 300);
    assert!(median(&totals[250..]) < median(&totals[..50]), "{} vs {}", median(&totals[250..]), median(&totals[..50]));
    assert!(out.checkpoint.is_file());
    assert!(cfg.checkpoint_dir.join("stage1_log.jsonl").is_file());
}

fn assert_checkpoint_is_initialisation(cfg: &RunConfig, stage: u8) {
    let ck = Checkpoint::load(cfg.checkpoint_path(stage)).unwrap();
    let fresh = Models::new(cfg).unwrap().store.snapshot();
    let expected: Vec<_> = fresh.iter().filter(|(k, _)| stage_prefixes(stage).iter().any(|p| k.starts_with(p))).collect();
    assert!(!expected.is_empty());
    assert_eq!(ck.params.len(), expected.len());
    for (name, t) in expected {
        let saved = ck.params.get(name).unwrap_or_else(|| panic!("{name} missing"));
        let a = saved.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn zero_steps_save_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_run(dir.path(), 3, 2, 2);
    cfg.stage1.steps = 0;
    cfg.stage2.steps = 0;
    assert!(train_stage1(&cfg).unwrap().log.is_empty());
    assert_checkpoint_is_initialisation(&cfg, 1);
    assert!(train_stage2(&cfg).unwrap().log.is_empty());
    assert_checkpoint_is_initialisation(&cfg, 2);
}

#[test]
fn missing_upstream_checkpoints_are_dependency_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_run(dir.path(), 4, 2, 2);
    for result in [train_stage2(&cfg).map(|_| ()), train_stage3(&cfg).map(|_| ()), Converter::load(&cfg).map(|_| ())] {
        match result {
            Err(e @ Error::Dependency(_)) => assert_eq!(e.exit_code(), 2),
            other => panic!("expected a dependency error, got {:?}", other.err()),
        }
    }
    cfg.stage1.steps = 1;
    train_stage1(&cfg).unwrap();
    assert!(matches!(train_stage3(&cfg), Err(Error::Dependency(_))));
    assert!(matches!(Converter::load(&cfg), Err(Error::Dependency(_))));
}

#[test]
fn unpaired_manifest_is_a_pairing_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_run(dir.path(), 5, 2, 2);
    let manifest = cfg.corpus.manifest.clone().unwrap();
    let records = Corpus::open(&cfg).unwrap().records;
    let normals: Vec<_> = records.into_iter().filter(|r| r.style == Style::Normal).collect();
    write_manifest(&manifest, &normals).unwrap();
    match train_stage1(&cfg) {
        Err(e @ Error::Pairing(_)) => assert_eq!(e.exit_code(), 1),
        other => panic!("expected a pairing error, got {:?}", other.err()),
    }
}

#[test]
fn conversion_obeys_the_length_contract() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_run(dir.path(), 6, 2, 3);
    cfg.stage1.steps = 3;
    cfg.stage2.steps = 3;
    train_stage1(&cfg).unwrap();
    train_stage2(&cfg).unwrap();
    let converter = Converter::load(&cfg).unwrap();
    let speaker = converter.speaker(&w2s_core::pipeline::SpeakerRef::Id("spk01".into())).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..12 {
        let rate = [16_000, 22_050][rng.random_range(0..2)];
        let n = rng.random_range(rate as usize / 10..rate as usize * 2);
        let w = Waveform { samples: (0..n).map(|_| rng.random_range(-0.1f32..0.1)).collect(), sample_rate: rate };
        let out = converter.convert(&w, &speaker).unwrap();
        let t_enc = encoded_length(analysis_mel(&w, &cfg.aligner.spec16).unwrap().n_frames());
        assert_eq!(out.t_enc, t_enc);
        let expected = target_length(t_enc, &cfg.aligner.spec16, &cfg.aligner.spec22).unwrap();
        assert_eq!(out.waveform.len(), expected * cfg.aligner.spec22.hop, "{n} samples at {rate} Hz");
        assert_eq!(out.waveform.sample_rate, 22050);
        assert_eq!(out.mel.n_frames(), expected);
    }

    // An input giving exactly 100 encoder frames.
    let n = (400..64_000).find(|&n| encoded_length(num_frames(n, &cfg.aligner.spec16).unwrap()) == 100).unwrap();
    let w = Waveform { samples: (0..n).map(|i| (i as f32 * 0.05).sin() * 0.1).collect(), sample_rate: 16_000 };
    let out = converter.convert(&w, &speaker).unwrap();
    assert_eq!(out.t_enc, 100);
    assert_eq!(out.waveform.len(), 172 * 256);
    let again = converter.convert(&w, &speaker).unwrap();
    assert_eq!(out.waveform.samples, again.waveform.samples);

    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"not a wave file at all").unwrap();
    assert!(matches!(Waveform::read_wav(&junk), Err(Error::Format { .. })));
}

#[test]
fn evaluating_the_reference_itself() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_run(dir.path(), 8, 2, 3);
    let corpus = Corpus::open(&cfg).unwrap();
    let (_, held) = corpus.split(&cfg).unwrap();
    assert_eq!(held.len(), 2);
    let outputs = dir.path().join("out");
    std::fs::create_dir_all(&outputs).unwrap();
    // Only the first pair gets an output, and it is the normal recording.
    let normal = resample(&corpus.load(&held[0].normal).unwrap(), 22050).unwrap();
    normal.write_wav(output_path(&outputs, &held[0].pair_id)).unwrap();

    let report = evaluate(&cfg, &corpus, &held, &outputs).unwrap();
    let (ok, missing) = (&report.utterances[0], &report.utterances[1]);
    assert!(ok.error.is_none());
    assert!(ok.mel_cepstral_distortion.unwrap().abs() < 1e-9, "{:?}", ok.mel_cepstral_distortion);
    assert!((ok.speaker_cosine.unwrap() - 1.0).abs() < 1e-6);
    assert!(ok.external.is_empty());
    assert!(missing.error.as_deref().unwrap().contains(&held[1].pair_id));
    assert!(missing.mel_cepstral_distortion.is_none());

    let agg = &report.aggregate;
    assert_eq!((agg.evaluated, agg.failed), (1, 1));
    assert_eq!(agg.mel_cepstral_distortion, ok.mel_cepstral_distortion);
    assert_eq!(agg.speaker_cosine, ok.speaker_cosine);
    assert!(!report.reference.reproducible_at_desk_scale);
    assert_eq!((report.reference.dnsmos, report.reference.utmos, report.reference.cer, report.reference.speaker_cosine), (3.11, 2.52, 0.1867, 0.76));
    // Reference header, two utterances, aggregate.
    assert_eq!(report.to_jsonl().lines().count(), 4);
}
