use candle_core::DType;
use ndarray::Array2;
use proptest::prelude::*;
use w2s_core::aligner::{target_length, upsample_time, AlignerConfig, LengthChannelAligner};
use w2s_core::content_encoder::{encoded_length, ContentEncoder, ContentEncoderConfig};
use w2s_core::nn::ParamStore;
use w2s_core::{FeatureDomain, FeatureSequence, FrameSpec, MelSpectrogram};

fn matrix(t: usize, d: usize) -> impl Strategy<Value = Array2<f32>> {
    prop::collection::vec(-5.0f32..5.0, t * d).prop_map(move |v| Array2::from_shape_vec((t, d), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_files_round_trip_bit_exactly(m in (1usize..40, 1usize..20).prop_flat_map(|(t, d)| matrix(t, d)), aligned in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let domain = if aligned { FeatureDomain::Aligned22k } else { FeatureDomain::Content16k };
        let f = FeatureSequence::new(m, domain).unwrap();
        let path = dir.path().join("f.w2sf");
        f.export(&path).unwrap();
        let g = FeatureSequence::import(&path).unwrap();
        // The container carries no domain; imports are content features.
        prop_assert_eq!(g.domain, FeatureDomain::Content16k);
        prop_assert!(f.frames.iter().zip(g.frames.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(g.frames.dim(), f.frames.dim());
    }

    #[test]
    fn upsampling_keeps_endpoints_and_stays_between_neighbours(
        m in (1usize..30, 1usize..6).prop_flat_map(|(t, d)| matrix(t, d)),
        extra in 0usize..60,
    ) {
        let t_out = m.nrows() + extra;
        let x = FeatureSequence::new(m.clone(), FeatureDomain::Content16k).unwrap();
        let y = upsample_time(&x, t_out).unwrap().frames;
        prop_assert_eq!(y.nrows(), t_out);
        prop_assert_eq!(y.row(0), m.row(0));
        if t_out > 1 {
            prop_assert_eq!(y.row(t_out - 1), m.row(m.nrows() - 1));
        }
        let t_in = m.nrows();
        for j in 0..t_out {
            // Source position on the endpoint-aligned grid.
            let (lo, hi) = if t_out == 1 || t_in == 1 {
                (0, 0)
            } else {
                let num = j * (t_in - 1);
                (num / (t_out - 1), num.div_ceil(t_out - 1))
            };
            for c in 0..m.ncols() {
                let (a, b) = (m[[lo, c]], m[[hi, c]]);
                let v = y[[j, c]];
                prop_assert!(v >= a.min(b) - 1e-5 && v <= a.max(b) + 1e-5, "frame {} ch {}: {} outside [{}, {}]", j, c, v, a, b);
            }
        }
    }

    #[test]
    fn projection_is_local_in_time(start in 0usize..20, len in 8usize..40, seed in 0u64..50) {
        let store = ParamStore::new(seed, DType::F32);
        let cfg = AlignerConfig::toy();
        let aligner = LengthChannelAligner::new(&store.root(), cfg.clone()).unwrap();
        let full = Array2::from_shape_fn((80, cfg.d_in), |(i, j)| ((i * 7 + j * 3) as f32 * 0.37 + seed as f32).sin());
        let whole = aligner.project_channels(&FeatureSequence::new(full.clone(), FeatureDomain::Aligned22k).unwrap()).unwrap().frames;
        let window = full.slice(ndarray::s![start..start + len, ..]).to_owned();
        let part = aligner.project_channels(&FeatureSequence::new(window, FeatureDomain::Aligned22k).unwrap()).unwrap().frames;
        // Kernels 5 then 3: three frames of context on each side.
        for i in 3..len - 3 {
            for c in 0..cfg.n_feat {
                prop_assert!((part[[i, c]] - whole[[start + i, c]]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn target_length_is_strictly_increasing() {
    let (s16, s22) = (FrameSpec::analysis_16k(), FrameSpec::synthesis_22k());
    let mut last = 0;
    for t in 1..=100_000 {
        let n = target_length(t, &s16, &s22).unwrap();
        assert!(n > last, "T_enc {t}: {n} after {last}");
        last = n;
    }
}

#[test]
fn encoder_length_law_on_real_mels() {
    let store = ParamStore::new(4, DType::F32);
    let enc = ContentEncoder::new(&store.root(), ContentEncoderConfig::default()).unwrap();
    let spec = FrameSpec::analysis_16k();
    for t in [1usize, 2, 3, 17, 100, 255, 1000] {
        let mel = MelSpectrogram { frames: Array2::from_shape_fn((t, 80), |(i, j)| -3.0 + ((i + j) as f64 * 0.1).sin()), spec: spec.clone() };
        let c = enc.encode_content(&mel).unwrap();
        assert_eq!(c.len(), encoded_length(t));
        assert_eq!(c.len(), t.div_ceil(2));
        assert_eq!(c.domain, FeatureDomain::Content16k);
    }
}
