//! Length–channel aligner: maps content frames (half the 16 kHz mel rate) to
//! the 22.05 kHz mel frame grid.
//!
//! ```text
//! T22 = floor((2 T_enc - 1) h16 f22 / (f16 h22)) + 1
//! ```
//!
//! followed by endpoint-aligned linear interpolation in time and a
//! conv(k=5) -> ReLU -> conv(k=3) channel projection.

use candle_core::{Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureDomain, FeatureSequence};
use crate::frame::FrameSpec;
use crate::nn::{array_from_tensor, tensor_from_array, ParamBuilder, SeqConv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignerConfig {
    pub d_in: usize,
    pub d_mid: usize,
    pub n_feat: usize,
    pub spec16: FrameSpec,
    pub spec22: FrameSpec,
}

impl AlignerConfig {
    pub fn full() -> Self {
        Self { d_in: 1280, d_mid: 1024, n_feat: 768, spec16: FrameSpec::analysis_16k(), spec22: FrameSpec::synthesis_22k() }
    }

    pub fn toy() -> Self {
        Self { d_in: 64, d_mid: 96, n_feat: 48, spec16: FrameSpec::analysis_16k(), spec22: FrameSpec::synthesis_22k() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_mid == 0 || self.n_feat == 0 {
            return Err(Error::Argument(format!("aligner widths must be positive: {self:?}")));
        }
        self.spec16.validate()?;
        self.spec22.validate()
    }
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthMap {
    pub t_enc: usize,
    pub t22: usize,
}

impl LengthMap {
    pub fn new(t_enc: usize, spec16: &FrameSpec, spec22: &FrameSpec) -> Result<Self> {
        Ok(Self { t_enc, t22: target_length(t_enc, spec16, spec22)? })
    }
}

/// Target frame count in the synthesis domain, evaluated in exact integer
/// arithmetic.
pub fn target_length(t_enc: usize, spec16: &FrameSpec, spec22: &FrameSpec) -> Result<usize> {
    if t_enc < 1 {
        return Err(Error::Argument("t_enc must be at least 1".into()));
    }
    let num = (2 * t_enc as u128 - 1) * spec16.hop as u128 * spec22.sample_rate as u128;
    let den = spec16.sample_rate as u128 * spec22.hop as u128;
    Ok((num / den) as usize + 1)
}

/// Source position and blend weight for output frame `j`.
fn grid(j: usize, t_in: usize, t_out: usize) -> (usize, usize, f64) {
    if t_in == 1 || t_out == 1 {
        return (0, 0, 0.0);
    }
    let num = j * (t_in - 1);
    let den = t_out - 1;
    let lo = num / den;
    let frac = (num % den) as f64 / den as f64;
    let hi = (lo + 1).min(t_in - 1);
    (lo, hi, frac)
}

/// Endpoint-aligned linear interpolation of a `T x d` matrix to `t_out` rows.
pub fn interpolate_frames<T: candle_core::WithDType>(x: &Array2<T>, t_out: usize) -> Result<Array2<T>> {
    if t_out < 1 || x.nrows() < 1 {
        return Err(Error::Argument("interpolation needs at least one input and one output frame".into()));
    }
    let (t_in, d) = x.dim();
    let mut out = Array2::from_elem((t_out, d), T::zero());
    for j in 0..t_out {
        let (lo, hi, frac) = grid(j, t_in, t_out);
        for k in 0..d {
            let a = x[[lo, k]];
            let b = x[[hi, k]].to_f64();
            out[[j, k]] = if frac == 0.0 { a } else { T::from_f64(a.to_f64() + (b - a.to_f64()) * frac) };
        }
    }
    Ok(out)
}

/// Endpoint-aligned linear interpolation to `t_out` frames.
pub fn upsample_time(x: &FeatureSequence, t_out: usize) -> Result<FeatureSequence> {
    FeatureSequence::new(interpolate_frames(&x.frames, t_out)?, x.domain)
}

/// `(t_out, t_in)` interpolation matrix matching [`upsample_time`].
pub fn interpolation_matrix(t_in: usize, t_out: usize, dtype: candle_core::DType, device: &Device) -> Result<Tensor> {
    let mut w = vec![0f64; t_out * t_in];
    for j in 0..t_out {
        let (lo, hi, frac) = grid(j, t_in, t_out);
        w[j * t_in + lo] += 1.0 - frac;
        w[j * t_in + hi] += frac;
    }
    Ok(Tensor::from_vec(w, (t_out, t_in), device)?.to_dtype(dtype)?)
}

pub struct LengthChannelAligner {
    cfg: AlignerConfig,
    conv1: SeqConv,
    conv2: SeqConv,
}

impl LengthChannelAligner {
    pub fn new(pb: &ParamBuilder, cfg: AlignerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            conv1: SeqConv::new(&pb.pp("conv1"), cfg.d_in, cfg.d_mid, 5, 1, 1)?,
            conv2: SeqConv::new(&pb.pp("conv2"), cfg.d_mid, cfg.n_feat, 3, 1, 1)?,
            cfg,
        })
    }

    pub fn config(&self) -> &AlignerConfig {
        &self.cfg
    }

    pub fn target_length(&self, t_enc: usize) -> Result<usize> {
        target_length(t_enc, &self.cfg.spec16, &self.cfg.spec22)
    }

    /// `(T, d_in)` to `(T, n_feat)`.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.cfg.d_in {
            return Err(Error::Shape(format!("aligner expects {} channels, got {d}", self.cfg.d_in)));
        }
        let h = self.conv1.forward_time(x)?.relu()?;
        self.conv2.forward_time(&h)
    }

    /// Upsample `(T_enc, d_in)` to the synthesis grid and project.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (t_enc, _) = x.dims2()?;
        let t22 = self.target_length(t_enc)?;
        let w = interpolation_matrix(t_enc, t22, x.dtype(), x.device())?;
        self.project(&w.matmul(&x.contiguous()?)?)
    }

    fn tensor(&self, x: &FeatureSequence) -> Result<Tensor> {
        let w = self.conv1.weight();
        tensor_from_array(&x.frames, w.dtype(), w.device())
    }

    pub fn project_channels(&self, x: &FeatureSequence) -> Result<FeatureSequence> {
        let y = self.project(&self.tensor(x)?)?;
        FeatureSequence::new(array_from_tensor(&y)?, x.domain)
    }

    pub fn align(&self, x: &FeatureSequence) -> Result<FeatureSequence> {
        x.expect_domain(FeatureDomain::Content16k)?;
        let up = upsample_time(x, self.target_length(x.len())?)?;
        let y = self.project(&self.tensor(&up)?)?;
        FeatureSequence::new(array_from_tensor(&y)?, FeatureDomain::Aligned22k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::DType;
    use ndarray::array;

    fn specs() -> (FrameSpec, FrameSpec) {
        (FrameSpec::analysis_16k(), FrameSpec::synthesis_22k())
    }

    #[test]
    fn target_length_examples() {
        let (a, b) = specs();
        assert_eq!(target_length(100, &a, &b).unwrap(), 172);
        assert_eq!(target_length(1, &a, &b).unwrap(), 1);
        assert!(matches!(target_length(0, &a, &b), Err(Error::Argument(_))));
    }

    #[test]
    fn equal_frame_periods_double_length() {
        let a = FrameSpec::analysis_16k();
        let b = FrameSpec { sample_rate: 24000, hop: 240, ..FrameSpec::synthesis_22k() };
        for t in 1..50 {
            assert_eq!(target_length(t, &a, &b).unwrap(), 2 * t);
        }
    }

    #[test]
    fn upsample_examples() {
        let x = FeatureSequence::new(array![[0.0f32], [1.0]], FeatureDomain::Content16k).unwrap();
        assert_eq!(upsample_time(&x, 3).unwrap().frames, array![[0.0f32], [0.5], [1.0]]);
        let c = FeatureSequence::new(Array2::from_elem((7, 3), 2.5f32), FeatureDomain::Content16k).unwrap();
        let u = upsample_time(&c, 12).unwrap();
        assert!(u.frames.iter().all(|&v| v == 2.5));
        let r = FeatureSequence::new(Array2::from_shape_fn((5, 2), |(i, j)| (i * 3 + j) as f32), FeatureDomain::Content16k).unwrap();
        assert_eq!(upsample_time(&r, 5).unwrap(), r);
    }

    #[test]
    fn single_frame_repeats() {
        let x = FeatureSequence::new(array![[0.3f32, -1.0]], FeatureDomain::Content16k).unwrap();
        let u = upsample_time(&x, 4).unwrap();
        for row in u.frames.rows() {
            assert_eq!(row.to_vec(), vec![0.3, -1.0]);
        }
    }

    #[test]
    fn matrix_matches_array_path() {
        let x = Array2::from_shape_fn((9, 4), |(i, j)| ((i * 4 + j) as f32).sin());
        let seq = FeatureSequence::new(x.clone(), FeatureDomain::Content16k).unwrap();
        let w = interpolation_matrix(9, 16, DType::F64, &Device::Cpu).unwrap();
        let y = array_from_tensor::<f32>(&w.matmul(&tensor_from_array(&x, DType::F64, &Device::Cpu).unwrap()).unwrap()).unwrap();
        let z = upsample_time(&seq, 16).unwrap().frames;
        for (a, b) in y.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn align_shapes_toy() {
        let store = ParamStore::new(1, DType::F32);
        let lca = LengthChannelAligner::new(&store.root().pp("aligner"), AlignerConfig::toy()).unwrap();
        let x = FeatureSequence::new(Array2::from_elem((100, 64), 0.1f32), FeatureDomain::Content16k).unwrap();
        let y = lca.align(&x).unwrap();
        assert_eq!((y.len(), y.dim()), (172, 48));
        assert_eq!(y.domain, FeatureDomain::Aligned22k);
        let one = FeatureSequence::new(Array2::from_elem((1, 64), 0.1f32), FeatureDomain::Content16k).unwrap();
        assert_eq!(lca.align(&one).unwrap().len(), 1);
        let bad = FeatureSequence::new(Array2::zeros((3, 10)), FeatureDomain::Content16k).unwrap();
        assert!(matches!(lca.project_channels(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let store = ParamStore::new(1, DType::F32);
        let lca = LengthChannelAligner::new(&store.root(), AlignerConfig::toy()).unwrap();
        for (name, v) in store.vars() {
            if name.ends_with("bias") {
                v.set(&v.zeros_like().unwrap()).unwrap();
            }
        }
        let x = FeatureSequence::new(Array2::zeros((172, 64)), FeatureDomain::Aligned22k).unwrap();
        let y = lca.project_channels(&x).unwrap();
        assert_eq!(y.dim(), 48);
        assert!(y.frames.iter().all(|&v| v == 0.0));
    }
}
