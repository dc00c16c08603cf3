//! Layer building blocks shared by the spatial and temporal networks.
//!
//! Layers only remember parameter names; weights are looked up through a
//! [`Binding`] on every call.

use crate::error::{shape_err, Result};
use crate::params::{Binding, ParamBuilder};
use crate::tensor::{conv_nd, group_norm, linear, matmul, softmax, Scalar, Tensor};

/// Largest group count `<= 8` that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Convolution over 1, 2 or 3 spatial axes with a cubic kernel.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: String,
    bias: String,
    dims: usize,
    stride: usize,
    pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    /// LeCun-normal weights, zero bias.
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dims: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::with_gain(pb, name, dims, in_channels, out_channels, kernel, stride, 1.0)
    }

    /// As [`Conv::new`] with the weight standard deviation multiplied by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dims: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Result<Self> {
        let mut shape = vec![out_channels, in_channels];
        shape.extend(std::iter::repeat_n(kernel, dims));
        let fan_in = in_channels * kernel.pow(dims as u32);
        let mut scope = pb.scope(name);
        let weight = scope.normal("weight", &shape, gain / (fan_in as f64).sqrt())?;
        let bias = scope.constant("bias", &[out_channels], 0.0)?;
        Ok(Self {
            weight,
            bias,
            dims,
            stride,
            pad: kernel / 2,
            in_channels,
            out_channels,
        })
    }

    /// Kernel that reproduces its input: center tap 1 on the channel diagonal.
    pub fn dirac<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, dims: usize, channels: usize, kernel: usize) -> Result<Self> {
        let taps = kernel.pow(dims as u32);
        let mut w = vec![T::zero(); channels * channels * taps];
        for c in 0..channels {
            w[(c * channels + c) * taps + taps / 2] = T::one();
        }
        let mut shape = vec![channels, channels];
        shape.extend(std::iter::repeat_n(kernel, dims));
        let mut scope = pb.scope(name);
        let weight = scope.values("weight", &shape, w)?;
        let bias = scope.constant("bias", &[channels], 0.0)?;
        Ok(Self {
            weight,
            bias,
            dims,
            stride: 1,
            pad: kernel / 2,
            in_channels: channels,
            out_channels: channels,
        })
    }

    pub fn forward<T: Scalar>(&self, bind: &Binding<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = bind.get(&self.weight)?;
        let b = bind.get(&self.bias)?;
        conv_nd(x, &w, Some(&b), &vec![self.stride; self.dims], &vec![self.pad; self.dims])
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, in_f: usize, out_f: usize, bias: bool) -> Result<Self> {
        Self::with_std(pb, name, in_f, out_f, bias, 1.0 / (in_f as f64).sqrt())
    }

    pub fn with_std<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_f: usize,
        out_f: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let mut scope = pb.scope(name);
        let weight = if std == 0.0 {
            scope.constant("weight", &[out_f, in_f], 0.0)?
        } else {
            scope.normal("weight", &[out_f, in_f], std)?
        };
        let bias = if bias {
            Some(scope.constant("bias", &[out_f], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight<T: Scalar>(&self, bind: &Binding<'_, T>) -> Result<Tensor<T>> {
        bind.get(&self.weight)
    }

    pub fn forward<T: Scalar>(&self, bind: &Binding<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = bind.get(&self.weight)?;
        let b = self.bias.as_ref().map(|b| bind.get(b)).transpose()?;
        linear(x, &w, b.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gain: String,
    bias: String,
    groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut scope = pb.scope(name);
        let gain = scope.constant("gain", &[channels], 1.0)?;
        let bias = scope.constant("bias", &[channels], 0.0)?;
        Ok(Self {
            gain,
            bias,
            groups: norm_groups(channels),
        })
    }

    pub fn forward<T: Scalar>(&self, bind: &Binding<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        group_norm(x, self.groups, &bind.get(&self.gain)?, &bind.get(&self.bias)?)
    }
}

/// Sinusoidal embedding of an integer timestep, shape `[1, dim]`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        v[i] = (t as f64 * freq).sin();
        v[half + i] = (t as f64 * freq).cos();
    }
    Tensor::from_f64(&[1, dim], &v).expect("embedding shape")
}

/// Sinusoidal features followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut scope = pb.scope(name);
        Ok(Self {
            dim,
            fc1: Linear::new(&mut scope, "fc1", dim, dim, true)?,
            fc2: Linear::new(&mut scope, "fc2", dim, dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, bind: &Binding<'_, T>, t: usize) -> Result<Tensor<T>> {
        let h = self.fc1.forward(bind, &timestep_embedding(t, self.dim))?;
        self.fc2.forward(bind, &h.silu())
    }
}

/// GroupNorm → SiLU → conv, timestep bias, GroupNorm → SiLU → conv, plus
/// a (projected) skip path. Works over 1 or 2 spatial axes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    dims: usize,
    norm1: GroupNorm,
    conv1: Conv,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
    pub out_channels: usize,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dims: usize,
        in_channels: usize,
        out_channels: usize,
        time_dim: usize,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            dims,
            norm1: GroupNorm::new(&mut s, "norm1", in_channels)?,
            conv1: Conv::new(&mut s, "conv1", dims, in_channels, out_channels, 3, 1)?,
            time_proj: Linear::new(&mut s, "time_proj", time_dim, out_channels, true)?,
            norm2: GroupNorm::new(&mut s, "norm2", out_channels)?,
            conv2: Conv::new(&mut s, "conv2", dims, out_channels, out_channels, 3, 1)?,
            skip: (in_channels != out_channels)
                .then(|| Conv::new(&mut s, "skip", dims, in_channels, out_channels, 1, 1))
                .transpose()?,
            out_channels,
        })
    }

    pub fn forward<T: Scalar>(&self, bind: &Binding<'_, T>, x: &Tensor<T>, t_emb: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.forward(bind, &self.norm1.forward(bind, x)?.silu())?;
        let tb = self.time_proj.forward(bind, &t_emb.silu())?;
        let mut bshape = vec![1, self.out_channels];
        bshape.extend(std::iter::repeat_n(1, self.dims));
        let h = h.add(&tb.reshape(&bshape)?)?;
        let h = self.conv2.forward(bind, &self.norm2.forward(bind, &h)?.silu())?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(bind, x)?,
            None => x.clone(),
        };
        skip.add(&h)
    }
}

/// `softmax(q kᵀ / √d) v` over `q[N, Lq, d]`, `k[N|1, Lk, d]`, `v[N|1, Lk, dv]`.
pub fn scaled_dot_product_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *q.shape().last().ok_or_else(|| shape_err("attention", "empty query shape"))?;
    if k.shape().last() != Some(&d) {
        return Err(shape_err(
            "attention",
            format!("query dim {d} differs from key shape {:?}", k.shape()),
        ));
    }
    let scores = matmul(q, &k.transpose_last()?)?.scale(1.0 / (d as f64).sqrt());
    let weights = softmax(&scores, scores.rank() - 1)?;
    matmul(&weights, v)
}

/// Multi-source attention with learned projections: queries from `x`,
/// keys and values from `context` (which is `x` itself for self-attention).
#[derive(Debug, Clone)]
pub struct CrossAttention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    pub query_dim: usize,
    pub context_dim: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, query_dim: usize, context_dim: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            to_q: Linear::new(&mut s, "to_q", query_dim, query_dim, false)?,
            to_k: Linear::new(&mut s, "to_k", context_dim, query_dim, false)?,
            to_v: Linear::new(&mut s, "to_v", context_dim, query_dim, false)?,
            to_out: Linear::new(&mut s, "to_out", query_dim, query_dim, true)?,
            query_dim,
            context_dim,
        })
    }

    /// `x[N, L, query_dim]`, `context[N|1, M, context_dim]`.
    pub fn forward<T: Scalar>(&self, bind: &Binding<'_, T>, x: &Tensor<T>, context: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().last() != Some(&self.query_dim) {
            return Err(shape_err(
                "cross_attention",
                format!("token dim of {:?} is not {}", x.shape(), self.query_dim),
            ));
        }
        if context.shape().last() != Some(&self.context_dim) {
            return Err(shape_err(
                "cross_attention",
                format!("context dim of {:?} is not {}", context.shape(), self.context_dim),
            ));
        }
        let q = self.to_q.forward(bind, x)?;
        let k = self.to_k.forward(bind, context)?;
        let v = self.to_v.forward(bind, context)?;
        let attended = scaled_dot_product_attention(&q, &k, &v)?;
        self.to_out.forward(bind, &attended)
    }

    /// Value projection alone (what attention over one key returns before `to_out`).
    pub fn value_projection<T: Scalar>(&self, bind: &Binding<'_, T>, context: &Tensor<T>) -> Result<Tensor<T>> {
        self.to_out.forward(bind, &self.to_v.forward(bind, context)?)
    }
}

/// Spatial transformer: self-attention over pixel tokens, then
/// cross-attention to the prompt, each with a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm: GroupNorm,
    self_attn: CrossAttention,
    cross_attn: CrossAttention,
    channels: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, text_dim: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            norm: GroupNorm::new(&mut s, "norm", channels)?,
            self_attn: CrossAttention::new(&mut s, "self_attn", channels, channels)?,
            cross_attn: CrossAttention::new(&mut s, "cross_attn", channels, text_dim)?,
            channels,
        })
    }

    /// `x[N, C, H, W]`, `prompt[1|N, M, text_dim]`.
    pub fn forward<T: Scalar>(&self, bind: &Binding<'_, T>, x: &Tensor<T>, prompt: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank("transformer", 4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        debug_assert_eq!(c, self.channels);
        let to_tokens = |t: &Tensor<T>| t.reshape(&[n, c, h * w])?.permute(&[0, 2, 1]);
        let tokens = to_tokens(x)?;
        let normed = to_tokens(&self.norm.forward(bind, x)?)?;
        let tokens = tokens.add(&self.self_attn.forward(bind, &normed, &normed)?)?;
        let tokens = tokens.add(&self.cross_attn.forward(bind, &tokens, prompt)?)?;
        tokens.permute(&[0, 2, 1])?.reshape(&[n, c, h, w])
    }
}
