use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use w2s_core::config::RunConfig;
use w2s_core::corpus::{write_corpus, SynthSpec};
use w2s_core::nn::{array_from_tensor, scalar, tensor_from_array, ParamStore};
use w2s_core::pipeline::{stage1_examples, train_stage1_on, Corpus, Models};
use w2s_core::softdtw::soft_dtw_value;
use w2s_core::vae::{
    kl_standard_normal, reparameterize, stage1_objective, Branch, ConformerVae, LatentPosterior, Stage1LossBreakdown,
    Stage1LossWeights, VaeConfig, DECODER_PREFIX, NORMAL_ENCODER_PREFIX, WHISPER_ENCODER_PREFIX,
};

fn posterior(mean: Vec<f64>, log_var: Vec<f64>, t: usize, d: usize) -> LatentPosterior {
    let m = Tensor::from_vec(mean, (t, d), &Device::Cpu).unwrap();
    let v = Tensor::from_vec(log_var, (t, d), &Device::Cpu).unwrap();
    LatentPosterior::new(m, v).unwrap()
}

fn kl(q: &LatentPosterior) -> f64 {
    scalar(&kl_standard_normal(q).unwrap()).unwrap()
}

fn small_vae(store: &ParamStore) -> ConformerVae {
    let cfg = VaeConfig { d_content: 6, d_model: 8, d_latent: 4, heads: 2, ff_mult: 2, conv_kernel: 3, encoder_blocks: 1, decoder_blocks: 1 };
    ConformerVae::new(&store.root().pp("vae"), cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_is_non_negative(
        (t, d, mean, log_var) in (1usize..6, 1usize..5).prop_flat_map(|(t, d)| (
            Just(t), Just(d),
            prop::collection::vec(-4.0f64..4.0, t * d),
            prop::collection::vec(-10.0f64..5.0, t * d),
        ))
    ) {
        prop_assert!(kl(&posterior(mean, log_var, t, d)) >= 0.0);
    }

    #[test]
    fn kl_vanishes_only_at_the_prior(
        (t, d, idx) in (1usize..6, 1usize..5).prop_flat_map(|(t, d)| (Just(t), Just(d), 0..t * d)),
        delta in prop_oneof![-1.0f64..-1e-3, 1e-3f64..1.0],
        on_mean in any::<bool>(),
    ) {
        let zeros = vec![0.0; t * d];
        prop_assert!(kl(&posterior(zeros.clone(), zeros.clone(), t, d)).abs() < 1e-9);
        let mut moved = zeros.clone();
        moved[idx] = delta;
        let q = if on_mean { posterior(moved, zeros, t, d) } else { posterior(zeros, moved, t, d) };
        prop_assert!(kl(&q) > 1e-9);
    }

    #[test]
    fn breakdown_total_is_the_weighted_sum(
        c in prop::array::uniform4(-10.0f64..10.0),
        l in prop::array::uniform3(0.0f64..5.0),
    ) {
        let w = Stage1LossWeights { lambda_kl: l[0], lambda_n: l[1], lambda_dtw: l[2] };
        let b = Stage1LossBreakdown::from_components(c[0], c[1], c[2], c[3], &w);
        let want = l[0] * (c[0] + c[1]) + l[1] * c[2] + l[2] * c[3];
        prop_assert!((b.total - want).abs() < 1e-6);
    }
}

#[test]
fn reparameterized_sample_mean_approaches_posterior_mean() {
    let n = 100_000;
    let q = posterior(vec![0.7; n], vec![(0.5f64).ln(); n], n, 1);
    let z = reparameterize(&q, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mean: f64 = z.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().sum::<f64>() / n as f64;
    let sigma = 0.5f64.sqrt();
    assert!((mean - 0.7).abs() < 3.0 * sigma / (n as f64).sqrt(), "{mean}");
}

#[test]
fn one_decoder_two_disjoint_encoders() {
    let store = ParamStore::new(0, DType::F32);
    let vae = small_vae(&store);
    let names = store.names();
    let under = |p: &str| names.iter().filter(|n| n.starts_with(p)).cloned().collect::<Vec<_>>();
    let (wp, np, dp) = (format!("vae.{WHISPER_ENCODER_PREFIX}."), format!("vae.{NORMAL_ENCODER_PREFIX}."), format!("vae.{DECODER_PREFIX}."));
    let (whisper, normal, decoder) = (under(&wp), under(&np), under(&dp));
    assert!(!whisper.is_empty() && !decoder.is_empty());
    assert_eq!(whisper.len() + normal.len() + decoder.len(), names.len(), "{names:?}");
    // Same architecture, separate storage.
    let strip = |v: &[String], p: &str| v.iter().map(|n| n[p.len()..].to_string()).collect::<Vec<_>>();
    assert_eq!(strip(&whisper, &wp), strip(&normal, &np));
    let wv = store.vars_with_prefix(&wp);
    let nv = store.vars_with_prefix(&np);
    assert!(wv.iter().zip(&nv).all(|((_, a), (_, b))| !std::ptr::eq(a.as_tensor(), b.as_tensor())));

    // The shared decoder maps equal latents to equal outputs.
    let z = Tensor::ones((5, vae.config().d_latent), DType::F32, &Device::Cpu).unwrap();
    let a = array_from_tensor::<f32>(&vae.decode(&z).unwrap()).unwrap();
    let b = array_from_tensor::<f32>(&vae.decode(&z.clone()).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dim(), (5, vae.config().d_content));
    let c = Tensor::ones((5, vae.config().d_content), DType::F32, &Device::Cpu).unwrap();
    let qw = vae.encode(&c, Branch::Whisper).unwrap();
    let qn = vae.encode(&c, Branch::Normal).unwrap();
    assert_ne!(array_from_tensor::<f32>(&qw.mean).unwrap(), array_from_tensor::<f32>(&qn.mean).unwrap());
}

/// Stage-1 total with a fixed reparameterisation draw.
fn total(vae: &ConformerVae, c_w: &Tensor, c_n: &Tensor, w: &Stage1LossWeights, cfg: &RunConfig) -> Tensor {
    let fwd = vae.forward_pair(c_w, c_n, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    stage1_objective(&fwd, c_n, w, &cfg.softdtw).unwrap().0
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let store = ParamStore::new(5, DType::F64);
    let vae = small_vae(&store);
    let cfg = RunConfig::toy(0);
    let w = Stage1LossWeights { lambda_kl: 1e-2, lambda_n: 1.0, lambda_dtw: 1.0 };
    let d = vae.config().d_content;
    let c_w = tensor_from_array(&Array2::from_shape_fn((2, d), |(i, j)| ((i * d + j) as f64 * 0.7).sin()), DType::F64, &Device::Cpu).unwrap();
    let c_n = tensor_from_array(&Array2::from_shape_fn((2, d), |(i, j)| ((i * d + j) as f64 * 0.3).cos()), DType::F64, &Device::Cpu).unwrap();

    let grads = total(&vae, &c_w, &c_n, &w, &cfg).backward().unwrap();
    let h = 1e-6;
    let mut checked = 0;
    for (name, var) in store.vars_with_prefix(&format!("vae.{DECODER_PREFIX}.")) {
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}"));
        let g: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let shape = var.as_tensor().shape().clone();
        for &i in &[0, base.len() / 2, base.len() - 1] {
            let at = |delta: f64| {
                let mut p = base.clone();
                p[i] += delta;
                var.set(&Tensor::from_vec(p, shape.clone(), &Device::Cpu).unwrap()).unwrap();
                scalar(&total(&vae, &c_w, &c_n, &w, &cfg)).unwrap()
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            restore(&var, &base, &shape);
            let scale = g[i].abs().max(numeric.abs());
            if scale < 1e-7 {
                assert!((g[i] - numeric).abs() < 1e-9, "{name}[{i}]: {} vs {numeric}", g[i]);
            } else {
                assert!((g[i] - numeric).abs() / scale < 1e-3, "{name}[{i}]: analytic {} numeric {numeric}", g[i]);
                checked += 1;
            }
        }
    }
    assert!(checked >= 10, "only {checked} non-trivial entries");
}

fn restore(var: &Var, base: &[f64], shape: &candle_core::Shape) {
    var.set(&Tensor::from_vec(base.to_vec(), shape.clone(), &Device::Cpu).unwrap()).unwrap();
}

#[test]
fn training_brings_whisper_branch_closer_to_normal_content() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::toy(21);
    cfg.corpus.synth = SynthSpec::new(2, 8, 21);
    cfg.corpus.held_out_per_speaker = 2;
    write_corpus(&cfg.corpus.synth, dir.path().join("corpus")).unwrap();
    cfg.corpus.manifest = Some(dir.path().join("corpus/manifest.jsonl"));
    cfg.checkpoint_dir = dir.path().join("ckpt");

    let corpus = Corpus::open(&cfg).unwrap();
    let (train, held) = corpus.split(&cfg).unwrap();
    let trained = Models::new(&cfg).unwrap();
    let baseline = Models::new(&cfg).unwrap();
    let mean_dtw = |m: &Models| -> f64 {
        let total: f64 = held
            .iter()
            .map(|p| {
                let c_w = m.content_features(&corpus.load(&p.whisper).unwrap()).unwrap();
                let c_n = m.content_features(&corpus.load(&p.normal).unwrap()).unwrap();
                let r_w = m.vae.infer_aligned(&c_w).unwrap();
                let (a, b) = (r_w.frames.mapv(f64::from), c_n.frames.mapv(f64::from));
                soft_dtw_value(a.view(), b.view(), &cfg.softdtw).unwrap()
            })
            .sum();
        total / held.len() as f64
    };
    let before = mean_dtw(&baseline);
    let examples = stage1_examples(&cfg, &corpus, &train).unwrap();
    train_stage1_on(&cfg, &trained, &examples).unwrap();
    let after = mean_dtw(&trained);
    assert!(after < before, "held-out soft-DTW {after} not below untrained {before}");
}
