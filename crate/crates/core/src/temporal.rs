//! 1D-convolutional Unet over the frame axis. Spatial positions are folded
//! into the batch, so positions never mix.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::{Conv, ResBlock, TimeEmbedding};
use crate::params::{Binding, ParamBuilder};
use crate::spatial::{StageFeatures, StageId};
use crate::tensor::{concat, repeat_interleave, Scalar, Tensor};

/// `(b, c, f, h, w) → (b·h·w, c, f)`.
pub fn f_tem<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank("f_tem", 5)?;
    let s = x.shape().to_vec();
    x.permute(&[0, 3, 4, 1, 2])?.reshape(&[s[0] * s[3] * s[4], s[1], s[2]])
}

/// Inverse of [`f_tem`] for known `b`, `h`, `w`.
pub fn f_tem_inv<T: Scalar>(x: &Tensor<T>, b: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    x.expect_rank("f_tem_inv", 3)?;
    let s = x.shape().to_vec();
    if b * h * w != s[0] {
        return Err(shape_err("f_tem_inv", format!("leading extent {} is not {b}·{h}·{w}", s[0])));
    }
    x.reshape(&[b, h, w, s[1], s[2]])?.permute(&[0, 3, 4, 1, 2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalUnetConfig {
    /// Channels of the first stage; `None` means the latent channel count.
    pub base_channels: Option<usize>,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub time_dim: usize,
}

impl Default for TemporalUnetConfig {
    fn default() -> Self {
        Self {
            base_channels: None,
            levels: 2,
            blocks_per_level: 1,
            time_dim: 64,
        }
    }
}

impl TemporalUnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.blocks_per_level == 0 || self.time_dim == 0 || self.base_channels == Some(0) {
            return Err(invalid("temporal config extents must be positive"));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(invalid(format!("temporal.time_dim must be even, got {}", self.time_dim)));
        }
        Ok(())
    }

    pub fn frame_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone)]
struct DownStage {
    blocks: Vec<ResBlock>,
    downsample: Conv,
}

#[derive(Debug, Clone)]
struct UpStage {
    upsample: Conv,
    blocks: Vec<ResBlock>,
    channels: usize,
}

#[derive(Debug, Clone)]
pub struct TemporalUnet {
    pub config: TemporalUnetConfig,
    pub in_channels: usize,
    pub base: usize,
    time: TimeEmbedding,
    conv_in: Conv,
    down: Vec<DownStage>,
    mid: Vec<ResBlock>,
    up: Vec<UpStage>,
}

fn run_blocks<T: Scalar>(blocks: &[ResBlock], bind: &Binding<'_, T>, mut x: Tensor<T>, t_emb: &Tensor<T>) -> Result<Tensor<T>> {
    for b in blocks {
        x = b.forward(bind, &x, t_emb)?;
    }
    Ok(x)
}

impl TemporalUnet {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, config: &TemporalUnetConfig, in_channels: usize) -> Result<Self> {
        config.validate()?;
        let base = config.base_channels.unwrap_or(in_channels);
        let td = config.time_dim;
        let nb = config.blocks_per_level;
        let time = TimeEmbedding::new(pb, "time", td)?;
        let conv_in = Conv::new(pb, "conv_in", 1, in_channels, base, 3, 1)?;
        let mut down = Vec::new();
        for k in 0..config.levels - 1 {
            let c = base << k;
            let mut s = pb.scope(&format!("down{k}"));
            down.push(DownStage {
                blocks: (0..nb)
                    .map(|j| ResBlock::new(&mut s, &format!("res{j}"), 1, c, c, td))
                    .collect::<Result<_>>()?,
                downsample: Conv::new(&mut s, "downsample", 1, c, 2 * c, 3, 2)?,
            });
        }
        let mid = {
            let c = base << (config.levels - 1);
            let mut s = pb.scope("mid");
            (0..nb)
                .map(|j| ResBlock::new(&mut s, &format!("res{j}"), 1, c, c, td))
                .collect::<Result<_>>()?
        };
        let mut up = Vec::new();
        for k in (0..config.levels - 1).rev() {
            let c = base << k;
            let mut s = pb.scope(&format!("up{k}"));
            up.push(UpStage {
                upsample: Conv::new(&mut s, "upsample", 1, 2 * c, c, 3, 1)?,
                blocks: (0..nb)
                    .map(|j| ResBlock::new(&mut s, &format!("res{j}"), 1, if j == 0 { 2 * c } else { c }, c, td))
                    .collect::<Result<_>>()?,
                channels: c,
            });
        }
        Ok(Self {
            config: config.clone(),
            in_channels,
            base,
            time,
            conv_in,
            down,
            mid,
            up,
        })
    }

    pub fn time_embedding<T: Scalar>(&self, bind: &Binding<'_, T>, t: usize) -> Result<Tensor<T>> {
        self.time.forward(bind, t)
    }

    /// Residual blocks of down stage `k`, then a stride-2 convolution.
    /// Returns the pre-downsampling feature `[N, c, f]` and the stage
    /// output `[N, 2c, f/2]`.
    pub fn down_stage<T: Scalar>(
        &self,
        k: usize,
        bind: &Binding<'_, T>,
        x: &Tensor<T>,
        t_emb: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let stage = self
            .down
            .get(k)
            .ok_or_else(|| invalid(format!("no temporal down stage {k}")))?;
        x.expect_rank("temporal_down_stage", 3)?;
        let (c, f) = (x.shape()[1], x.shape()[2]);
        if c != self.base << k {
            return Err(shape_err(
                "temporal_down_stage",
                format!("channel dimension is {c}, expected {}", self.base << k),
            ));
        }
        if f % 2 != 0 {
            return Err(shape_err("temporal_down_stage", format!("frame axis must be even, got {f}")));
        }
        let feat = run_blocks(&stage.blocks, bind, x.clone(), t_emb)?;
        let out = stage.downsample.forward(bind, &feat)?;
        Ok((feat, out))
    }

    /// Nearest ×2 upsampling and convolution `2c → c`, concatenation with
    /// `skip[N, c, f]`, then residual blocks.
    pub fn up_stage<T: Scalar>(
        &self,
        k: usize,
        bind: &Binding<'_, T>,
        x: &Tensor<T>,
        skip: &Tensor<T>,
        t_emb: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let levels = self.config.levels;
        let stage = k
            .checked_add(2)
            .filter(|&k2| k2 <= levels)
            .map(|k2| &self.up[levels - k2])
            .ok_or_else(|| invalid(format!("no temporal up stage {k}")))?;
        x.expect_rank("temporal_up_stage", 3)?;
        skip.expect_rank("temporal_up_stage", 3)?;
        let c = stage.channels;
        let (xs, ss) = (x.shape(), skip.shape());
        if xs[1] != 2 * c || ss[1] != c || ss[0] != xs[0] || ss[2] != 2 * xs[2] {
            return Err(shape_err(
                "temporal_up_stage",
                format!("input {xs:?} and skip {ss:?} do not follow [N, 2c, f/2] / [N, c, f] with c = {c}"),
            ));
        }
        let up = stage.upsample.forward(bind, &repeat_interleave(x, 2, 2)?)?;
        run_blocks(&stage.blocks, bind, concat(&[up, skip.clone()], 1)?, t_emb)
    }

    /// Stage features for `x[(b·h·w), c, f]`: each down stage, the
    /// bottleneck, each up stage.
    pub fn forward<T: Scalar>(&self, bind: &Binding<'_, T>, x: &Tensor<T>, t: usize) -> Result<StageFeatures<T>> {
        x.expect_rank("temporal_unet", 3)?;
        let (c, f) = (x.shape()[1], x.shape()[2]);
        if c != self.in_channels {
            return Err(shape_err(
                "temporal_unet",
                format!("channel dimension is {c}, expected {}", self.in_channels),
            ));
        }
        let div = self.config.frame_divisor();
        if f % div != 0 {
            return Err(shape_err(
                "temporal_unet",
                format!("frame count must be divisible by {div}, got {f}"),
            ));
        }
        let t_emb = self.time.forward(bind, t)?;
        let mut feats = Vec::new();
        let mut h = self.conv_in.forward(bind, x)?;
        let mut skips = Vec::new();
        for k in 0..self.down.len() {
            let (feat, out) = self.down_stage(k, bind, &h, &t_emb)?;
            feats.push((StageId::Down(k), feat.clone()));
            skips.push(feat);
            h = out;
        }
        h = run_blocks(&self.mid, bind, h, &t_emb)?;
        feats.push((StageId::Mid, h.clone()));
        for k in (0..self.down.len()).rev() {
            let skip = skips.pop().expect("one skip per level");
            h = self.up_stage(k, bind, &h, &skip, &t_emb)?;
            feats.push((StageId::Up(k), h.clone()));
        }
        Ok(feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::RngState;

    fn toy(c: usize, levels: usize) -> (ParamStore<f64>, TemporalUnet) {
        let mut store = ParamStore::new();
        let cfg = TemporalUnetConfig {
            levels,
            time_dim: 8,
            ..Default::default()
        };
        let net = TemporalUnet::new(&mut ParamBuilder::new(&mut store, RngState::new(4), true, "temporal"), &cfg, c).unwrap();
        (store, net)
    }

    #[test]
    fn f_tem_shapes_and_inverse() {
        let x = RngState::new(2).normal_tensor::<f64>(&[2, 4, 8, 16, 16]);
        let y = f_tem(&x).unwrap();
        assert_eq!(y.shape(), &[512, 4, 8]);
        assert_eq!(f_tem_inv(&y, 2, 16, 16).unwrap().to_vec(), x.to_vec());
        let flat = Tensor::<f64>::zeros(&[3, 2, 5, 1, 1]);
        assert_eq!(f_tem(&flat).unwrap().shape(), &[3, 2, 5]);
    }

    #[test]
    fn stage_ledger() {
        let (store, net) = toy(4, 2);
        let x = RngState::new(1).normal_tensor::<f64>(&[6, 4, 8]);
        let feats = net.forward(&store.bind(false), &x, 5).unwrap();
        let shapes: Vec<_> = feats.iter().map(|(id, t)| (*id, t.shape().to_vec())).collect();
        assert_eq!(
            shapes,
            vec![
                (StageId::Down(0), vec![6, 4, 8]),
                (StageId::Mid, vec![6, 8, 4]),
                (StageId::Up(0), vec![6, 4, 8]),
            ]
        );
    }

    #[test]
    fn down_and_up_stage_contracts() {
        let (store, net) = toy(8, 3);
        let bind = store.bind(false);
        let t_emb = net.time_embedding(&bind, 3).unwrap();
        let x = RngState::new(1).normal_tensor::<f64>(&[5, 8, 8]);
        let (feat, out) = net.down_stage(0, &bind, &x, &t_emb).unwrap();
        assert_eq!(feat.shape(), &[5, 8, 8]);
        assert_eq!(out.shape(), &[5, 16, 4]);
        let (_, out2) = net.down_stage(1, &bind, &out, &t_emb).unwrap();
        assert_eq!(out2.shape(), &[5, 32, 2]);
        let up = net.up_stage(0, &bind, &out, &x, &t_emb).unwrap();
        assert_eq!(up.shape(), &[5, 8, 8]);
        assert!(net.up_stage(0, &bind, &out, &out, &t_emb).is_err());
        assert!(net.down_stage(0, &bind, &Tensor::zeros(&[1, 8, 3]), &t_emb).is_err());
    }

    #[test]
    fn frame_divisor_reported() {
        let (store, net) = toy(4, 3);
        let err = net.forward(&store.bind(false), &Tensor::<f64>::zeros(&[1, 4, 6]), 0).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
    }

    #[test]
    fn rows_never_mix() {
        let (store, net) = toy(4, 2);
        let bind = store.bind(false);
        let x = RngState::new(9).normal_tensor::<f64>(&[3, 4, 4]);
        let row = |t: &Tensor<f64>, i: usize| {
            let n = t.numel() / t.shape()[0];
            t.data()[i * n..(i + 1) * n].to_vec()
        };
        let perm = [2, 0, 1];
        let xp = Tensor::from_vec(&[3, 4, 4], perm.iter().flat_map(|&i| row(&x, i)).collect()).unwrap();
        let a = net.forward(&bind, &x, 7).unwrap();
        let b = net.forward(&bind, &xp, 7).unwrap();
        for ((_, fa), (_, fb)) in a.iter().zip(&b) {
            for (dst, &src) in perm.iter().enumerate() {
                assert_eq!(row(fb, dst), row(fa, src));
            }
        }
    }
}
