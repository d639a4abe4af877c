//! Content encoder: 16 kHz log-mels to linguistic feature frames at half the
//! mel frame rate.
//!
//! A small stand-in for a large pretrained speech encoder that keeps the one
//! property the rest of the pipeline depends on: exactly one stride-2
//! convolution, so `T_enc = ceil(T_mel / 2)`. Real encoder features can be
//! brought in through [`FeatureSequence::import`].

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureDomain, FeatureSequence};
use crate::frame::{FrameSpec, MelSpectrogram};
use crate::nn::{array_from_tensor, linear, tensor_from_array, LayerNorm, ParamBuilder, SeqConv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Gelu => x.gelu()?,
            Activation::Relu => x.relu()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentEncoderConfig {
    pub d_content: usize,
    /// Convolutional layers; the last one has stride 2.
    pub n_conv_layers: usize,
    pub n_res_blocks: usize,
    pub kernel: usize,
    pub activation: Activation,
    /// Log-mels are mapped through `(x - input_offset) / input_scale`.
    pub input_offset: f64,
    pub input_scale: f64,
    pub spec: FrameSpec,
}

impl Default for ContentEncoderConfig {
    fn default() -> Self {
        Self {
            d_content: 64,
            n_conv_layers: 2,
            n_res_blocks: 2,
            kernel: 3,
            activation: Activation::Gelu,
            input_offset: -2.0,
            input_scale: 5.0,
            spec: FrameSpec::analysis_16k(),
        }
    }
}

impl ContentEncoderConfig {
    pub fn strides(&self) -> Vec<usize> {
        (0..self.n_conv_layers).map(|i| if i + 1 == self.n_conv_layers { 2 } else { 1 }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_conv_layers == 0 || self.kernel.is_multiple_of(2) || self.d_content == 0 || self.input_scale <= 0.0 {
            return Err(Error::Argument(format!("invalid content encoder config {self:?}")));
        }
        self.spec.validate()
    }
}

/// Output length of the encoder for `t_mel` input frames.
pub fn encoded_length(t_mel: usize) -> usize {
    t_mel.div_ceil(2)
}

struct ResidualFeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

pub struct ContentEncoder {
    cfg: ContentEncoderConfig,
    convs: Vec<SeqConv>,
    blocks: Vec<ResidualFeedForward>,
}

impl ContentEncoder {
    pub fn new(pb: &ParamBuilder, cfg: ContentEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_content;
        let mut convs = Vec::new();
        for (i, stride) in cfg.strides().into_iter().enumerate() {
            let c_in = if i == 0 { cfg.spec.n_mels } else { d };
            convs.push(SeqConv::new(&pb.pp(format!("conv{i}")), c_in, d, cfg.kernel, stride, 1)?);
        }
        let blocks = (0..cfg.n_res_blocks)
            .map(|i| {
                let b = pb.pp(format!("block{i}"));
                Ok(ResidualFeedForward {
                    norm: LayerNorm::new(&b.pp("norm"), d)?,
                    up: linear(&b.pp("up"), d, 2 * d)?,
                    down: linear(&b.pp("down"), 2 * d, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, convs, blocks })
    }

    pub fn config(&self) -> &ContentEncoderConfig {
        &self.cfg
    }

    /// `(T_mel, n_mels)` to `(ceil(T_mel/2), d_content)`.
    pub fn forward(&self, mel: &Tensor) -> Result<Tensor> {
        let mut x = ((mel - self.cfg.input_offset)? / self.cfg.input_scale)?;
        for conv in &self.convs {
            x = self.cfg.activation.apply(&conv.forward_time(&x)?)?;
        }
        for b in &self.blocks {
            let h = b.up.forward(&b.norm.forward(&x)?)?;
            x = (&x + b.down.forward(&self.cfg.activation.apply(&h)?)?)?;
        }
        Ok(x)
    }

    /// Encode a 16 kHz mel-spectrogram into content features.
    pub fn encode_content(&self, mel16: &MelSpectrogram) -> Result<FeatureSequence> {
        mel16.check_domain(&self.cfg.spec)?;
        let w = self.convs[0].weight();
        let x = tensor_from_array(&mel16.frames, w.dtype(), w.device())?;
        let y = self.forward(&x)?.detach();
        FeatureSequence::new(array_from_tensor(&y)?, FeatureDomain::Content16k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::DType;
    use ndarray::Array2;

    fn encoder(store: &ParamStore) -> ContentEncoder {
        ContentEncoder::new(&store.root().pp("content"), ContentEncoderConfig::default()).unwrap()
    }

    fn mel(t: usize, seed: f64) -> MelSpectrogram {
        MelSpectrogram {
            frames: Array2::from_shape_fn((t, 80), |(i, j)| ((i as f64 * 0.37 + j as f64 * 0.11 + seed).sin() * 3.0) - 4.0),
            spec: FrameSpec::analysis_16k(),
        }
    }

    #[test]
    fn exactly_one_stride_two_layer() {
        let strides = ContentEncoderConfig::default().strides();
        assert_eq!(strides.iter().filter(|&&s| s == 2).count(), 1);
        assert!(strides.iter().all(|&s| s == 1 || s == 2));
    }

    #[test]
    fn length_law_examples() {
        let store = ParamStore::new(0, DType::F32);
        let enc = encoder(&store);
        for (t, expected) in [(100, 50), (101, 51), (1, 1)] {
            let out = enc.encode_content(&mel(t, 0.0)).unwrap();
            assert_eq!(out.len(), expected);
            assert_eq!(out.dim(), 64);
        }
    }

    #[test]
    fn length_law_holds_up_to_1000() {
        let store = ParamStore::new(0, DType::F32);
        let enc = encoder(&store);
        for t in (1..=1000).step_by(37).chain([999, 1000]) {
            assert_eq!(enc.encode_content(&mel(t, 0.5)).unwrap().len(), encoded_length(t));
        }
    }

    #[test]
    fn wrong_domain_rejected() {
        let store = ParamStore::new(0, DType::F32);
        let enc = encoder(&store);
        let m = MelSpectrogram { frames: Array2::zeros((10, 80)), spec: FrameSpec::synthesis_22k() };
        assert!(matches!(enc.encode_content(&m), Err(Error::Domain(_))));
    }

    #[test]
    fn prepending_two_frames_shifts_output_by_one() {
        let store = ParamStore::new(5, DType::F32);
        let enc = encoder(&store);
        let base = mel(40, 1.3);
        let silence = crate::frame::LOG_FLOOR.ln();
        let mut shifted = Array2::from_elem((42, 80), silence);
        shifted.slice_mut(ndarray::s![2.., ..]).assign(&base.frames);
        let a = enc.encode_content(&base).unwrap();
        let b = enc.encode_content(&MelSpectrogram { frames: shifted, spec: base.spec.clone() }).unwrap();
        assert_eq!(b.len(), a.len() + 1);
        // Receptive field is +-2 mel frames; skip frames touching either edge.
        for j in 2..a.len() - 2 {
            for k in 0..a.dim() {
                assert!((a.frames[[j, k]] - b.frames[[j + 1, k]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn deterministic() {
        let a = encoder(&ParamStore::new(9, DType::F32)).encode_content(&mel(30, 0.2)).unwrap();
        let b = encoder(&ParamStore::new(9, DType::F32)).encode_content(&mel(30, 0.2)).unwrap();
        assert_eq!(a, b);
    }
}
