//! Dual-encoder, shared-decoder conformer VAE for whisper/normal domain
//! alignment.
//!
//! Whisper and normal content features each have their own conformer encoder
//! producing a diagonal Gaussian posterior; a single decoder reconstructs
//! content features from latent samples of either branch. The objective is
//!
//! ```text
//! L = λ_KL [KL(q_w || N(0,I)) + KL(q_n || N(0,I))]
//!   + λ_n  mean((r_n - c_n)^2)
//!   + λ_DTW softDTW(r_w, c_n)
//! ```
//!
//! At inference only the whisper encoder is used, with the posterior mean in
//! place of a sample, followed by the shared decoder.

use candle_core::{DType, Module, Tensor};
use candle_nn::Linear;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureDomain, FeatureSequence};
use crate::nn::{array_from_tensor, linear, scalar, sinusoidal_positions, tensor_from_array, ConformerBlock, ConformerDims, ParamBuilder};
use crate::softdtw::{soft_dtw, SoftDtwConfig};

pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub d_content: usize,
    pub d_model: usize,
    pub d_latent: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub conv_kernel: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { d_content: 64, d_model: 64, d_latent: 32, heads: 4, ff_mult: 2, conv_kernel: 7, encoder_blocks: 2, decoder_blocks: 2 }
    }
}

impl VaeConfig {
    fn dims(&self) -> ConformerDims {
        ConformerDims { dim: self.d_model, heads: self.heads, ff_mult: self.ff_mult, conv_kernel: self.conv_kernel }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Whisper,
    Normal,
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whisper" => Ok(Branch::Whisper),
            "normal" => Ok(Branch::Normal),
            other => Err(Error::Argument(format!("unknown encoder branch '{other}'"))),
        }
    }
}

/// Per-frame diagonal Gaussian, both `(T, d_latent)`.
#[derive(Debug, Clone)]
pub struct LatentPosterior {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl LatentPosterior {
    pub fn new(mean: Tensor, log_var: Tensor) -> Result<Self> {
        if mean.dims() != log_var.dims() {
            return Err(Error::Shape(format!("mean {:?} vs log_var {:?}", mean.dims(), log_var.dims())));
        }
        Ok(Self { mean, log_var: log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)? })
    }

    pub fn len(&self) -> usize {
        self.mean.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `z = mean + exp(log_var / 2) * eps`, `eps ~ N(0, I)` drawn from `rng`.
pub fn reparameterize<R: Rng>(q: &LatentPosterior, rng: &mut R) -> Result<Tensor> {
    let n = q.mean.elem_count();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let eps = Tensor::from_vec(eps, q.mean.shape(), q.mean.device())?.to_dtype(q.mean.dtype())?;
    Ok((&q.mean + ((&q.log_var * 0.5)?.exp()? * eps)?)?)
}

/// `½ Σ_d (μ² + σ² − 1 − log σ²)`, averaged over frames. Scalar tensor.
pub fn kl_standard_normal(q: &LatentPosterior) -> Result<Tensor> {
    let per = ((q.mean.sqr()? + q.log_var.exp()?)? - 1.0)?;
    let per = (per - &q.log_var)?;
    let frames = q.len() as f64;
    Ok(((per.sum_all()? * 0.5)? / frames)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1LossWeights {
    pub lambda_kl: f64,
    pub lambda_n: f64,
    pub lambda_dtw: f64,
}

impl Default for Stage1LossWeights {
    fn default() -> Self {
        Self { lambda_kl: 1e-2, lambda_n: 1.0, lambda_dtw: 0.1 }
    }
}

impl Stage1LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_kl, self.lambda_n, self.lambda_dtw].iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Argument(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1LossBreakdown {
    pub kl_w: f64,
    pub kl_n: f64,
    pub recon_n: f64,
    pub dtw: f64,
    pub total: f64,
}

impl Stage1LossBreakdown {
    pub fn from_components(kl_w: f64, kl_n: f64, recon_n: f64, dtw: f64, w: &Stage1LossWeights) -> Self {
        let total = w.lambda_kl * (kl_w + kl_n) + w.lambda_n * recon_n + w.lambda_dtw * dtw;
        Self { kl_w, kl_n, recon_n, dtw, total }
    }
}

/// Scalar tensor equal to `soft_dtw(x, y)` whose gradient with respect to
/// `x` is the exact soft-DTW gradient; `y` is treated as a constant.
pub fn soft_dtw_loss(x: &Tensor, y: &Tensor, cfg: &SoftDtwConfig) -> Result<(Tensor, f64)> {
    let xa = array_from_tensor::<f64>(x)?;
    let ya = array_from_tensor::<f64>(y)?;
    let res = soft_dtw(xa.view(), ya.view(), cfg)?;
    let grad = Tensor::from_vec(res.grad_x.iter().copied().collect::<Vec<f64>>(), res.grad_x.dim(), x.device())?
        .to_dtype(x.dtype())?;
    let linear_term = (x * &grad)?.sum_all()?;
    let offset = res.value - scalar(&linear_term)?;
    Ok(((linear_term + offset)?, res.value))
}

/// One whisper/normal pair of content features.
#[derive(Debug, Clone)]
pub struct ContentPair {
    pub whisper_pair_id: String,
    pub normal_pair_id: String,
    pub whisper: Tensor,
    pub normal: Tensor,
}

impl ContentPair {
    pub fn check(&self) -> Result<()> {
        if self.whisper_pair_id != self.normal_pair_id {
            return Err(Error::Pairing(format!(
                "whisper features from pair '{}' matched with normal features from pair '{}'",
                self.whisper_pair_id, self.normal_pair_id
            )));
        }
        Ok(())
    }
}

/// Intermediate tensors of one Stage-1 forward pass.
pub struct Stage1Forward {
    pub q_w: LatentPosterior,
    pub q_n: LatentPosterior,
    pub r_w: Tensor,
    pub r_n: Tensor,
}

/// Combine Stage-1 terms into a differentiable total and its breakdown.
pub fn stage1_objective(
    fwd: &Stage1Forward,
    c_n: &Tensor,
    weights: &Stage1LossWeights,
    dtw_cfg: &SoftDtwConfig,
) -> Result<(Tensor, Stage1LossBreakdown)> {
    weights.validate()?;
    if fwd.r_n.dims() != c_n.dims() {
        return Err(Error::Shape(format!("r_n {:?} vs c_n {:?}", fwd.r_n.dims(), c_n.dims())));
    }
    let kl_w = kl_standard_normal(&fwd.q_w)?;
    let kl_n = kl_standard_normal(&fwd.q_n)?;
    let recon = (&fwd.r_n - c_n)?.sqr()?.mean_all()?;
    let (dtw, dtw_value) = soft_dtw_loss(&fwd.r_w, c_n, dtw_cfg)?;
    let total = (((&kl_w + &kl_n)? * weights.lambda_kl)? + (&recon * weights.lambda_n)?)?;
    let total = (total + (dtw * weights.lambda_dtw)?)?;
    let breakdown = Stage1LossBreakdown::from_components(scalar(&kl_w)?, scalar(&kl_n)?, scalar(&recon)?, dtw_value, weights);
    Ok((total, breakdown))
}

struct VaeEncoder {
    input: Linear,
    blocks: Vec<ConformerBlock>,
    mean: Linear,
    log_var: Linear,
}

impl VaeEncoder {
    fn new(pb: &ParamBuilder, cfg: &VaeConfig) -> Result<Self> {
        Ok(Self {
            input: linear(&pb.pp("input"), cfg.d_content, cfg.d_model)?,
            blocks: (0..cfg.encoder_blocks)
                .map(|i| ConformerBlock::new(&pb.pp(format!("block{i}")), cfg.dims()))
                .collect::<Result<_>>()?,
            mean: linear(&pb.pp("mean"), cfg.d_model, cfg.d_latent)?,
            log_var: linear(&pb.pp("log_var"), cfg.d_model, cfg.d_latent)?,
        })
    }

    fn forward(&self, c: &Tensor) -> Result<LatentPosterior> {
        let mut h = self.input.forward(c)?;
        let (t, d) = h.dims2()?;
        h = (h + sinusoidal_positions(t, d, c.dtype(), c.device())?)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        LatentPosterior::new(self.mean.forward(&h)?, self.log_var.forward(&h)?)
    }
}

struct VaeDecoder {
    input: Linear,
    blocks: Vec<ConformerBlock>,
    output: Linear,
}

impl VaeDecoder {
    fn new(pb: &ParamBuilder, cfg: &VaeConfig) -> Result<Self> {
        Ok(Self {
            input: linear(&pb.pp("input"), cfg.d_latent, cfg.d_model)?,
            blocks: (0..cfg.decoder_blocks)
                .map(|i| ConformerBlock::new(&pb.pp(format!("block{i}")), cfg.dims()))
                .collect::<Result<_>>()?,
            output: linear(&pb.pp("output"), cfg.d_model, cfg.d_content)?,
        })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.input.forward(z)?;
        let (t, d) = h.dims2()?;
        h = (h + sinusoidal_positions(t, d, z.dtype(), z.device())?)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(self.output.forward(&h)?)
    }
}

pub const WHISPER_ENCODER_PREFIX: &str = "enc_whisper";
pub const NORMAL_ENCODER_PREFIX: &str = "enc_normal";
pub const DECODER_PREFIX: &str = "decoder";

pub struct ConformerVae {
    cfg: VaeConfig,
    whisper: VaeEncoder,
    normal: VaeEncoder,
    decoder: VaeDecoder,
    dtype: DType,
}

impl ConformerVae {
    pub fn new(pb: &ParamBuilder, cfg: VaeConfig) -> Result<Self> {
        Ok(Self {
            whisper: VaeEncoder::new(&pb.pp(WHISPER_ENCODER_PREFIX), &cfg)?,
            normal: VaeEncoder::new(&pb.pp(NORMAL_ENCODER_PREFIX), &cfg)?,
            decoder: VaeDecoder::new(&pb.pp(DECODER_PREFIX), &cfg)?,
            dtype: pb.store().dtype(),
            cfg,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn encode(&self, c: &Tensor, branch: Branch) -> Result<LatentPosterior> {
        match branch {
            Branch::Whisper => self.whisper.forward(c),
            Branch::Normal => self.normal.forward(c),
        }
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z)
    }

    fn to_tensor(&self, seq: &FeatureSequence) -> Result<Tensor> {
        if seq.dim() != self.cfg.d_content {
            return Err(Error::Shape(format!("expected {} content channels, got {}", self.cfg.d_content, seq.dim())));
        }
        tensor_from_array(&seq.frames, self.dtype, &candle_core::Device::Cpu)
    }

    /// Posterior for content features on the selected branch.
    pub fn conformer_encode(&self, c: &FeatureSequence, branch: Branch) -> Result<LatentPosterior> {
        c.expect_domain(FeatureDomain::Content16k)?;
        self.encode(&self.to_tensor(c)?, branch)
    }

    /// Decode latent frames back to content features.
    pub fn decode_sequence(&self, z: &FeatureSequence) -> Result<FeatureSequence> {
        z.expect_domain(FeatureDomain::Latent)?;
        if z.dim() != self.cfg.d_latent {
            return Err(Error::Shape(format!("expected {} latent channels, got {}", self.cfg.d_latent, z.dim())));
        }
        let zt = tensor_from_array(&z.frames, self.dtype, &candle_core::Device::Cpu)?;
        FeatureSequence::new(array_from_tensor(&self.decode(&zt)?)?, FeatureDomain::Content16k)
    }

    pub fn forward_pair<R: Rng>(&self, c_w: &Tensor, c_n: &Tensor, rng: &mut R) -> Result<Stage1Forward> {
        let q_w = self.encode(c_w, Branch::Whisper)?;
        let q_n = self.encode(c_n, Branch::Normal)?;
        let z_w = reparameterize(&q_w, rng)?;
        let z_n = reparameterize(&q_n, rng)?;
        let r_w = self.decode(&z_w)?;
        let r_n = self.decode(&z_n)?;
        Ok(Stage1Forward { q_w, q_n, r_w, r_n })
    }

    /// Stage-1 objective on one pair.
    pub fn stage1_loss<R: Rng>(
        &self,
        pair: &ContentPair,
        weights: &Stage1LossWeights,
        dtw_cfg: &SoftDtwConfig,
        rng: &mut R,
    ) -> Result<(Tensor, Stage1LossBreakdown)> {
        pair.check()?;
        let fwd = self.forward_pair(&pair.whisper, &pair.normal, rng)?;
        stage1_objective(&fwd, &pair.normal, weights, dtw_cfg)
    }

    /// Whisper-branch inference: encoder, posterior mean, shared decoder.
    pub fn infer_aligned(&self, c_w: &FeatureSequence) -> Result<FeatureSequence> {
        let q = self.conformer_encode(c_w, Branch::Whisper)?;
        let r = self.decode(&q.mean)?.detach();
        FeatureSequence::new(array_from_tensor(&r)?, FeatureDomain::Content16k)
    }
}

/// Posterior as `(mean, log_var)` arrays.
pub fn posterior_arrays(q: &LatentPosterior) -> Result<(Array2<f32>, Array2<f32>)> {
    Ok((array_from_tensor(&q.mean)?, array_from_tensor(&q.log_var)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), (rows, cols), &Device::Cpu).unwrap()
    }

    fn content(t: usize, d: usize, phase: f32) -> FeatureSequence {
        FeatureSequence::new(
            Array2::from_shape_fn((t, d), |(i, j)| (i as f32 * 0.3 + j as f32 * 0.7 + phase).sin()),
            FeatureDomain::Content16k,
        )
        .unwrap()
    }

    #[test]
    fn kl_closed_forms() {
        let q = LatentPosterior::new(t64(1, 2, &[0.0, 0.0]), t64(1, 2, &[0.0, 0.0])).unwrap();
        assert_eq!(scalar(&kl_standard_normal(&q).unwrap()).unwrap(), 0.0);
        let q = LatentPosterior::new(t64(1, 2, &[1.0, 0.0]), t64(1, 2, &[0.0, 0.0])).unwrap();
        assert!((scalar(&kl_standard_normal(&q).unwrap()).unwrap() - 0.5).abs() < 1e-12);
        // sigma^2 = e  =>  log_var = 1
        let q = LatentPosterior::new(t64(1, 1, &[0.0]), t64(1, 1, &[1.0])).unwrap();
        let expected = (std::f64::consts::E - 2.0) / 2.0;
        assert!((scalar(&kl_standard_normal(&q).unwrap()).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.359141).abs() < 1e-6);
    }

    #[test]
    fn kl_averages_over_frames() {
        let q = LatentPosterior::new(t64(2, 1, &[1.0, 1.0]), t64(2, 1, &[0.0, 0.0])).unwrap();
        assert!((scalar(&kl_standard_normal(&q).unwrap()).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn log_var_is_clamped_and_sample_collapses_to_mean() {
        let q = LatentPosterior::new(t64(1, 3, &[0.5, -1.0, 2.0]), t64(1, 3, &[-1e4, -1e4, -1e4])).unwrap();
        let lv: Vec<Vec<f64>> = q.log_var.to_vec2().unwrap();
        assert!(lv[0].iter().all(|&v| v == LOG_VAR_MIN));
        let z: Vec<Vec<f64>> = reparameterize(&q, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().to_vec2().unwrap();
        for (a, b) in z[0].iter().zip([0.5, -1.0, 2.0]) {
            assert!((a - b).abs() < (-15f64).exp() * 10.0);
        }
    }

    #[test]
    fn reparameterize_is_seeded() {
        let q = LatentPosterior::new(t64(2, 2, &[0.0, 1.0, 2.0, 3.0]), t64(2, 2, &[0.0; 4])).unwrap();
        let a: Vec<Vec<f64>> = reparameterize(&q, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().to_vec2().unwrap();
        let b: Vec<Vec<f64>> = reparameterize(&q, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().to_vec2().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        let n = 100_000;
        let mean = 0.7;
        let log_var = 2.0f64.ln();
        let q = LatentPosterior::new(
            Tensor::full(mean, (n, 1), &Device::Cpu).unwrap(),
            Tensor::full(log_var, (n, 1), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let z = reparameterize(&q, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let m = scalar(&z.mean_all().unwrap()).unwrap();
        let tol = 3.0 * 2f64.sqrt() / (n as f64).sqrt();
        assert!((m - mean).abs() < tol, "{m}");
    }

    #[test]
    fn breakdown_arithmetic() {
        let w = Stage1LossWeights { lambda_kl: 1.0, lambda_n: 1.0, lambda_dtw: 1.0 };
        let b = Stage1LossBreakdown::from_components(0.2, 0.3, 0.5, -0.1, &w);
        assert!((b.total - 0.9).abs() < 1e-12);
    }

    #[test]
    fn shapes_branches_and_shared_decoder() {
        let store = ParamStore::new(3, DType::F32);
        let vae = ConformerVae::new(&store.root().pp("vae"), VaeConfig::default()).unwrap();
        let c = content(50, 64, 0.0);
        let qw = vae.conformer_encode(&c, Branch::Whisper).unwrap();
        let qn = vae.conformer_encode(&c, Branch::Normal).unwrap();
        assert_eq!(qw.mean.dims(), &[50, 32]);
        assert_eq!(qw.log_var.dims(), &[50, 32]);
        let a = array_from_tensor::<f32>(&qw.mean).unwrap();
        assert_ne!(a, array_from_tensor::<f32>(&qn.mean).unwrap());
        assert_eq!(a, array_from_tensor::<f32>(&vae.conformer_encode(&c, Branch::Whisper).unwrap().mean).unwrap());

        let z = FeatureSequence::new(a, FeatureDomain::Latent).unwrap();
        let r = vae.decode_sequence(&z).unwrap();
        assert_eq!((r.len(), r.dim()), (50, 64));
        assert_eq!(r, vae.decode_sequence(&z).unwrap());
        assert!(matches!(vae.decode_sequence(&c), Err(Error::Domain(_))));

        let enc_w = store.count("vae.enc_whisper");
        assert!(enc_w > 0);
        assert_eq!(enc_w, store.count("vae.enc_normal"));
        assert!(store.count("vae.decoder") > 0);
        assert_eq!(store.count("vae"), 2 * enc_w + store.count("vae.decoder"));
    }

    #[test]
    fn unknown_branch_rejected() {
        assert!(matches!("shout".parse::<Branch>(), Err(Error::Argument(_))));
        assert_eq!("whisper".parse::<Branch>().unwrap(), Branch::Whisper);
    }

    #[test]
    fn infer_aligned_is_deterministic() {
        let store = ParamStore::new(8, DType::F32);
        let vae = ConformerVae::new(&store.root(), VaeConfig::default()).unwrap();
        let c = content(23, 64, 1.0);
        let a = vae.infer_aligned(&c).unwrap();
        assert_eq!((a.len(), a.dim()), (23, 64));
        assert_eq!(a, vae.infer_aligned(&c).unwrap());
    }

    #[test]
    fn stubbed_terms_vanish() {
        let c_n = t64(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let zero = LatentPosterior::new(Tensor::zeros((3, 4), DType::F64, &Device::Cpu).unwrap(), Tensor::zeros((3, 4), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let fwd = Stage1Forward { q_w: zero.clone(), q_n: zero, r_w: c_n.clone(), r_n: c_n.clone() };
        let (_, b) = stage1_objective(&fwd, &c_n, &Stage1LossWeights::default(), &SoftDtwConfig::with_gamma(0.0)).unwrap();
        assert_eq!(b.recon_n, 0.0);
        assert_eq!(b.kl_w, 0.0);
        assert_eq!(b.kl_n, 0.0);
        assert_eq!(b.dtw, 0.0);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn unpaired_inputs_rejected() {
        let store = ParamStore::new(0, DType::F32);
        let vae = ConformerVae::new(&store.root(), VaeConfig::default()).unwrap();
        let t = Tensor::zeros((4, 64), DType::F32, &Device::Cpu).unwrap();
        let pair = ContentPair { whisper_pair_id: "a".into(), normal_pair_id: "b".into(), whisper: t.clone(), normal: t };
        let res = vae.stage1_loss(&pair, &Stage1LossWeights::default(), &SoftDtwConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(res, Err(Error::Pairing(_))));
    }

    #[test]
    fn soft_dtw_surrogate_matches_value_and_gradient() {
        let x = candle_core::Var::from_tensor(&t64(3, 1, &[0.0, 1.0, 3.0])).unwrap();
        let y = t64(2, 1, &[0.5, 2.0]);
        let cfg = SoftDtwConfig::default();
        let (loss, value) = soft_dtw_loss(x.as_tensor(), &y, &cfg).unwrap();
        assert!((scalar(&loss).unwrap() - value).abs() < 1e-12);
        let g = loss.backward().unwrap();
        let g: Vec<Vec<f64>> = g.get(x.as_tensor()).unwrap().to_vec2().unwrap();
        let xa = ndarray::array![[0.0], [1.0], [3.0]];
        let ya = ndarray::array![[0.5], [2.0]];
        let expected = soft_dtw(xa.view(), ya.view(), &cfg).unwrap().grad_x;
        for i in 0..3 {
            assert!((g[i][0] - expected[[i, 0]]).abs() < 1e-12);
        }
    }
}
