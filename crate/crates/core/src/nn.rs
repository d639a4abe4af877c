//! Seeded parameter store and the small set of differentiable layers the
//! three stages are built from.
//!
//! Sequence layers take time-major `(T, C)` tensors (one utterance at a time);
//! the vocoder works channel-first on `(1, C, L)`.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv1d, Conv1dConfig, Linear};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-b, b)
    Uniform(f64),
    /// N(0, std^2)
    Normal(f64),
    Const(f64),
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named trainable tensors with deterministic, seed-driven initialisation.
pub struct ParamStore {
    inner: RefCell<StoreInner>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: RefCell::new(StoreInner { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamBuilder<'_> {
        ParamBuilder { store: self, prefix: String::new() }
    }

    /// All parameters in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner.borrow().vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars().into_iter().filter(|(k, _)| k.starts_with(prefix)).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.borrow().vars.keys().cloned().collect()
    }

    /// Scalar parameter count under `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.vars_with_prefix(prefix).iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.inner
            .borrow()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrite parameters in place from `tensors`. Every parameter under
    /// `prefix` must be present with a matching shape.
    pub fn load(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in self.vars_with_prefix(prefix) {
            let src = tensors
                .get(&name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Shape(format!("{name}: checkpoint {:?} vs model {:?}", src.dims(), var.dims())));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.borrow_mut();
        if inner.vars.contains_key(&name) {
            return Err(Error::Argument(format!("parameter {name} registered twice")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Uniform(b) => (0..n).map(|_| inner.rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n).map(|_| std * inner.rng.sample::<f64, _>(StandardNormal)).collect(),
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }
}

#[derive(Clone)]
pub struct ParamBuilder<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self { store: self.store, prefix }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.create(self.pp(name).prefix, shape, init)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}

pub fn linear(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Linear> {
    let bound = 1.0 / (d_in as f64).sqrt();
    let w = pb.get("weight", &[d_out, d_in], Init::Uniform(bound))?;
    let b = pb.get("bias", &[d_out], Init::Uniform(bound))?;
    Ok(Linear::new(w, Some(b)))
}

/// 1-D convolution with odd kernel and symmetric zero padding.
pub struct SeqConv {
    conv: Conv1d,
}

impl SeqConv {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, kernel: usize, stride: usize, dilation: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let w = pb.get("weight", &[c_out, c_in, kernel], Init::Uniform(bound))?;
        let b = pb.get("bias", &[c_out], Init::Uniform(bound))?;
        let cfg = Conv1dConfig { padding: dilation * (kernel - 1) / 2, stride, dilation, groups: 1, cudnn_fwd_algo: None };
        Ok(Self { conv: Conv1d::new(w, Some(b), cfg) })
    }

    /// `(1, C, L)` in, `(1, C', L')` out.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(&x.contiguous()?)?)
    }

    /// `(T, C)` in, `(T', C')` out.
    pub fn forward_time(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_channels(&x.t()?.unsqueeze(0)?)?;
        Ok(y.squeeze(0)?.t()?.contiguous()?)
    }

    pub fn weight(&self) -> &Tensor {
        self.conv.weight()
    }
}

/// Layer normalisation over the last dimension, built from primitive ops so
/// it participates in backpropagation.
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self { gain: pb.get("gain", &[dim], Init::Const(1.0))?, bias: pb.get("bias", &[dim], Init::Const(0.0))?, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}

/// Fixed sinusoidal position table, `(T, d)`.
pub fn sinusoidal_positions(t: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..t)
        .flat_map(|pos| {
            (0..d).map(move |i| {
                let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let a = pos as f64 * rate;
                if i % 2 == 0 {
                    a.sin()
                } else {
                    a.cos()
                }
            })
        })
        .collect();
    Ok(Tensor::from_vec(data, (t, d), device)?.to_dtype(dtype)?)
}

pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            return Err(Error::Argument(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: linear(&pb.pp("q"), dim, dim)?,
            k: linear(&pb.pp("k"), dim, dim)?,
            v: linear(&pb.pp("v"), dim, dim)?,
            o: linear(&pb.pp("o"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (t, d) = x.dims2()?;
        let dk = d / self.heads;
        let split = |y: Tensor| -> Result<Tensor> { Ok(y.reshape((t, self.heads, dk))?.transpose(0, 1)?.contiguous()?) };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dk as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(0, 1)?.contiguous()?.reshape((t, d))?;
        Ok(self.o.forward(&out)?)
    }
}

/// Per-channel convolution over time with zero padding.
pub struct DepthwiseConv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl DepthwiseConv {
    pub fn new(pb: &ParamBuilder, dim: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / (kernel as f64).sqrt();
        Ok(Self {
            weight: pb.get("weight", &[kernel, dim], Init::Uniform(bound))?,
            bias: pb.get("bias", &[dim], Init::Uniform(bound))?,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(0)?;
        let half = (self.kernel - 1) / 2;
        let padded = x.pad_with_zeros(0, half, self.kernel - 1 - half)?;
        let mut acc = self.bias.unsqueeze(0)?.broadcast_as(x.shape())?.contiguous()?;
        for j in 0..self.kernel {
            let tap = self.weight.get(j)?.unsqueeze(0)?;
            acc = (acc + padded.narrow(0, j, t)?.broadcast_mul(&tap)?)?;
        }
        Ok(acc)
    }
}

struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(pb: &ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self { norm: LayerNorm::new(&pb.pp("norm"), dim)?, up: linear(&pb.pp("up"), dim, hidden)?, down: linear(&pb.pp("down"), hidden, dim)? })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.up.forward(&self.norm.forward(x)?)?.silu()?;
        Ok(self.down.forward(&h)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConformerDims {
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub conv_kernel: usize,
}

/// Macaron conformer block: half feed-forward, self-attention, convolution
/// module, half feed-forward, output norm.
pub struct ConformerBlock {
    ff1: FeedForward,
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    conv_norm: LayerNorm,
    pointwise_in: Linear,
    depthwise: DepthwiseConv,
    conv_mid_norm: LayerNorm,
    pointwise_out: Linear,
    ff2: FeedForward,
    out_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new(pb: &ParamBuilder, dims: ConformerDims) -> Result<Self> {
        let d = dims.dim;
        Ok(Self {
            ff1: FeedForward::new(&pb.pp("ff1"), d, d * dims.ff_mult)?,
            attn_norm: LayerNorm::new(&pb.pp("attn_norm"), d)?,
            attn: MultiHeadAttention::new(&pb.pp("attn"), d, dims.heads)?,
            conv_norm: LayerNorm::new(&pb.pp("conv_norm"), d)?,
            pointwise_in: linear(&pb.pp("pw_in"), d, 2 * d)?,
            depthwise: DepthwiseConv::new(&pb.pp("dw"), d, dims.conv_kernel)?,
            // Layer norm stands in for batch norm: utterances are processed one at a time.
            conv_mid_norm: LayerNorm::new(&pb.pp("conv_mid_norm"), d)?,
            pointwise_out: linear(&pb.pp("pw_out"), d, d)?,
            ff2: FeedForward::new(&pb.pp("ff2"), d, d * dims.ff_mult)?,
            out_norm: LayerNorm::new(&pb.pp("out_norm"), d)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + (self.ff1.forward(x)? * 0.5)?)?;
        let x = (&x + self.attn.forward(&self.attn_norm.forward(&x)?)?)?;
        let x = (&x + self.conv_module(&x)?)?;
        let x = (&x + (self.ff2.forward(&x)? * 0.5)?)?;
        self.out_norm.forward(&x)
    }

    fn conv_module(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.pointwise_in.forward(&self.conv_norm.forward(x)?)?;
        let d = h.dim(1)? / 2;
        let h = (h.narrow(1, 0, d)? * sigmoid(&h.narrow(1, d, d)?)?)?;
        let h = self.depthwise.forward(&h)?;
        let h = self.conv_mid_norm.forward(&h)?.silu()?;
        Ok(self.pointwise_out.forward(&h)?)
    }
}

/// Post-norm feed-forward transformer block with a convolutional FFN.
pub struct FftBlock {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    conv1: SeqConv,
    conv2: SeqConv,
    norm2: LayerNorm,
}

impl FftBlock {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, ff_dim: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&pb.pp("attn"), dim, heads)?,
            norm1: LayerNorm::new(&pb.pp("norm1"), dim)?,
            conv1: SeqConv::new(&pb.pp("conv1"), dim, ff_dim, kernel, 1, 1)?,
            conv2: SeqConv::new(&pb.pp("conv2"), ff_dim, dim, 1, 1, 1)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.norm1.forward(&(x + self.attn.forward(x)?)?)?;
        let h = self.conv2.forward_time(&self.conv1.forward_time(&x)?.relu()?)?;
        self.norm2.forward(&(x + h)?)
    }
}

/// Learnable transposed convolution by integer factor `u`, implemented as
/// zero-stuffing followed by an ordinary convolution with kernel `2u`.
/// Maps `(1, C, L)` to `(1, C', L * u)`.
pub struct Upsample {
    conv: Conv1d,
    factor: usize,
}

impl Upsample {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, factor: usize) -> Result<Self> {
        let kernel = 2 * factor;
        // Zero-stuffing leaves one non-zero input per `factor` taps.
        let bound = 1.0 / ((c_in * 2) as f64).sqrt();
        let w = pb.get("weight", &[c_out, c_in, kernel], Init::Uniform(bound))?;
        let b = pb.get("bias", &[c_out], Init::Uniform(bound))?;
        Ok(Self { conv: Conv1d::new(w, Some(b), Conv1dConfig::default()), factor })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, l) = x.dims3()?;
        let u = self.factor;
        let stuffed = if u == 1 {
            x.clone()
        } else {
            let zeros = Tensor::zeros((b, c, l, u - 1), x.dtype(), x.device())?;
            Tensor::cat(&[&x.unsqueeze(3)?, &zeros], 3)?.reshape((b, c, l * u))?
        };
        let padded = stuffed.pad_with_zeros(2, u, u - 1)?;
        Ok(self.conv.forward(&padded)?)
    }
}

pub fn tensor_from_array<T: candle_core::WithDType>(a: &Array2<T>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (r, c) = a.dim();
    let data: Vec<T> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (r, c), device)?.to_dtype(dtype)?)
}

pub fn array_from_tensor<T: candle_core::WithDType>(t: &Tensor) -> Result<Array2<T>> {
    let (r, c) = t.dims2()?;
    let data: Vec<T> = t.to_dtype(T::DTYPE)?.flatten_all()?.to_vec1()?;
    Array2::from_shape_vec((r, c), data).map_err(|e| Error::Shape(e.to_string()))
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
