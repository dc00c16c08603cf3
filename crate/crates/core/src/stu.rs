//! Spatial-temporal modeling unit: brings a temporal-Unet feature to the
//! layout of a spatial-Unet stage, attends over frames, mixes it in with
//! weight λ and smooths the result with a 3D convolution.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::{Conv, Linear};
use crate::params::{Binding, ParamBuilder};
use crate::spatial::{f_spa, f_spa_inv, StageId};
use crate::tensor::{linear, matmul, resize_trilinear, softmax, Scalar, Tensor};

pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Which STU pieces exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StuAblation {
    pub enabled: bool,
    pub use_temporal_attention: bool,
    pub use_conv3d: bool,
}

impl Default for StuAblation {
    fn default() -> Self {
        Self {
            enabled: true,
            use_temporal_attention: true,
            use_conv3d: true,
        }
    }
}

impl StuAblation {
    fn has_attention(&self) -> bool {
        self.enabled && self.use_temporal_attention
    }

    fn has_conv3d(&self) -> bool {
        self.enabled && self.use_conv3d
    }
}

/// Single-head attention across frames at each spatial location of
/// `x[b, c, f, h, w]`, with projections `w_q`, `w_k`, `w_v` of shape `[c, c]`.
pub fn temporal_attention<T: Scalar>(x: &Tensor<T>, w_q: &Tensor<T>, w_k: &Tensor<T>, w_v: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank("temporal_attention", 5)?;
    let s = x.shape().to_vec();
    let (b, c, f, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    for (name, m) in [("W_q", w_q), ("W_k", w_k), ("W_v", w_v)] {
        if m.shape() != [c, c] {
            return Err(shape_err(
                "temporal_attention",
                format!("{name} is {:?}, expected [{c}, {c}]", m.shape()),
            ));
        }
    }
    let tokens = x.permute(&[0, 3, 4, 2, 1])?.reshape(&[b * h * w, f, c])?;
    let q = linear(&tokens, w_q, None)?;
    let k = linear(&tokens, w_k, None)?;
    let v = linear(&tokens, w_v, None)?;
    let scores = matmul(&q, &k.transpose_last()?)?.scale(1.0 / (c as f64).sqrt());
    let out = matmul(&softmax(&scores, 2)?, &v)?;
    out.reshape(&[b, h, w, f, c])?.permute(&[0, 4, 3, 1, 2])
}

#[derive(Debug, Clone)]
struct Attention {
    w_q: Linear,
    w_k: Linear,
    w_v: Linear,
}

/// Geometry of the stage an STU is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StuGeometry {
    pub temporal_channels: usize,
    pub spatial_channels: usize,
}

#[derive(Debug, Clone)]
pub struct Stu {
    pub stage: StageId,
    pub lambda: f64,
    pub ablation: StuAblation,
    pub geometry: StuGeometry,
    proj: Conv,
    attention: Option<Attention>,
    conv3d: Option<Conv>,
}

impl Stu {
    /// Trainable projection `c_t → c_k` (LeCun normal), `W_q`/`W_k` random,
    /// `W_v` zero and a Dirac 3×3×3 convolution, so a fresh unit passes
    /// `X_spa` through unchanged.
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        stage: StageId,
        geometry: StuGeometry,
        lambda: f64,
        ablation: StuAblation,
    ) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(invalid(format!("stu.lambda must be finite and nonnegative, got {lambda}")));
        }
        let c = geometry.spatial_channels;
        let mut s = pb.scope(&stage.to_string());
        let proj = Conv::new(&mut s, "proj", 3, geometry.temporal_channels, c, 1, 1)?;
        let attention = ablation
            .has_attention()
            .then(|| -> Result<Attention> {
                let mut a = s.scope("attn");
                Ok(Attention {
                    w_q: Linear::new(&mut a, "w_q", c, c, false)?,
                    w_k: Linear::new(&mut a, "w_k", c, c, false)?,
                    w_v: Linear::with_std(&mut a, "w_v", c, c, false, 0.0)?,
                })
            })
            .transpose()?;
        let conv3d = ablation
            .has_conv3d()
            .then(|| Conv::dirac(&mut s, "conv3d", 3, c, 3))
            .transpose()?;
        Ok(Self {
            stage,
            lambda,
            ablation,
            geometry,
            proj,
            attention,
            conv3d,
        })
    }

    /// `x_tem[(b·h·w), c_t, f_k]` → `[b, c_k, f, h_k, w_k]`: trilinear resize
    /// over frames and space, then the pointwise channel projection.
    pub fn align<T: Scalar>(
        &self,
        bind: &Binding<'_, T>,
        x_tem: &Tensor<T>,
        (b, h, w): (usize, usize, usize),
        (f, h_k, w_k): (usize, usize, usize),
    ) -> Result<Tensor<T>> {
        x_tem.expect_rank("stu_align", 3)?;
        let s = x_tem.shape().to_vec();
        if s[0] != b * h * w {
            return Err(shape_err(
                "stu_align",
                format!("temporal batch {} is not b·h·w = {b}·{h}·{w}", s[0]),
            ));
        }
        if s[1] != self.geometry.temporal_channels {
            return Err(shape_err(
                "stu_align",
                format!("channel dimension is {}, expected {}", s[1], self.geometry.temporal_channels),
            ));
        }
        let video = x_tem.reshape(&[b, h, w, s[1], s[2]])?.permute(&[0, 3, 4, 1, 2])?;
        let resized = resize_trilinear(&video, f, h_k, w_k)?;
        self.proj.forward(bind, &resized)
    }

    /// Fuses `x_spa[(b·f), c_k, h_k, w_k]` with the temporal feature of the
    /// same stage; `latent` is the `(b, h, w)` of the temporal fold.
    pub fn forward<T: Scalar>(
        &self,
        bind: &Binding<'_, T>,
        x_spa: &Tensor<T>,
        x_tem: &Tensor<T>,
        latent: (usize, usize, usize),
    ) -> Result<Tensor<T>> {
        x_spa.expect_rank("stu", 4)?;
        let b = latent.0;
        let spa = f_spa_inv(x_spa, b)?;
        let (c, f, h_k, w_k) = (spa.shape()[1], spa.shape()[2], spa.shape()[3], spa.shape()[4]);
        if c != self.geometry.spatial_channels {
            return Err(shape_err(
                "stu",
                format!("{} expects {} spatial channels, got {c}", self.stage, self.geometry.spatial_channels),
            ));
        }
        let aligned = self.align(bind, x_tem, latent, (f, h_k, w_k))?;
        if !self.ablation.enabled {
            return f_spa(&spa.add(&aligned)?);
        }
        let temporal = match &self.attention {
            Some(a) => temporal_attention(
                &aligned,
                &a.w_q.weight(bind)?,
                &a.w_k.weight(bind)?,
                &a.w_v.weight(bind)?,
            )?,
            None => aligned,
        };
        let fused = spa.add(&temporal.scale(self.lambda))?;
        let out = match &self.conv3d {
            Some(conv) => conv.forward(bind, &fused)?,
            None => fused,
        };
        f_spa(&out)
    }
}
