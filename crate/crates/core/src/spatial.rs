//! Frame-wise 2D denoising Unet standing in for the frozen pretrained
//! text-to-image network.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::{Conv, GroupNorm, ResBlock, TimeEmbedding, TransformerBlock};
use crate::params::{Binding, ParamBuilder};
use crate::tensor::{concat, repeat_interleave, Scalar, Tensor};

/// `(b, c, f, h, w) → (b·f, c, h, w)`.
pub fn f_spa<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank("f_spa", 5)?;
    let s = x.shape().to_vec();
    x.permute(&[0, 2, 1, 3, 4])?.reshape(&[s[0] * s[2], s[1], s[3], s[4]])
}

/// Inverse of [`f_spa`] for a known batch size.
pub fn f_spa_inv<T: Scalar>(x: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    x.expect_rank("f_spa_inv", 4)?;
    let s = x.shape().to_vec();
    if b == 0 || !s[0].is_multiple_of(b) {
        return Err(shape_err("f_spa_inv", format!("leading extent {} is not a multiple of batch {b}", s[0])));
    }
    x.reshape(&[b, s[0] / b, s[1], s[2], s[3]])?.permute(&[0, 2, 1, 3, 4])
}

/// Position of a feature map inside a Unet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageId {
    Down(usize),
    Mid,
    Up(usize),
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageId::Down(k) => write!(f, "down{k}"),
            StageId::Mid => write!(f, "mid"),
            StageId::Up(k) => write!(f, "up{k}"),
        }
    }
}

/// Callback that may replace each stage's feature map before the next
/// stage consumes it.
pub trait StageHook<T: Scalar> {
    fn on_stage(&self, id: StageId, x: Tensor<T>) -> Result<Tensor<T>>;
}

/// Leaves every stage untouched.
pub struct NoHook;

impl<T: Scalar> StageHook<T> for NoHook {
    fn on_stage(&self, _id: StageId, x: Tensor<T>) -> Result<Tensor<T>> {
        Ok(x)
    }
}

/// Init gain of the output convolution. Keeps the random stand-in's noise
/// estimate small and smooth in `z`, which DDIM inversion needs to
/// reconstruct its input.
pub const OUTPUT_GAIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialUnetConfig {
    pub latent_channels: usize,
    pub channel_schedule: Vec<usize>,
    pub blocks_per_level: usize,
    /// Levels carrying transformer blocks; `None` means the deepest
    /// down/up level plus the bottleneck.
    pub attention_levels: Option<Vec<usize>>,
    pub text_dim: usize,
    pub time_dim: usize,
}

impl Default for SpatialUnetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            channel_schedule: vec![32, 64],
            blocks_per_level: 1,
            attention_levels: None,
            text_dim: crate::stubs::text::DEFAULT_TEXT_DIM,
            time_dim: 64,
        }
    }
}

impl SpatialUnetConfig {
    pub fn levels(&self) -> usize {
        self.channel_schedule.len()
    }

    pub fn resolved_attention_levels(&self) -> Vec<usize> {
        match &self.attention_levels {
            Some(levels) => levels.clone(),
            None => {
                let l = self.levels();
                if l >= 2 {
                    vec![l - 2, l - 1]
                } else {
                    vec![0]
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_schedule.is_empty() {
            return Err(invalid("spatial.channel_schedule must be nonempty"));
        }
        if self.latent_channels == 0
            || self.blocks_per_level == 0
            || self.text_dim == 0
            || self.time_dim == 0
            || self.channel_schedule.contains(&0)
        {
            return Err(invalid("spatial config extents must be positive"));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(invalid(format!("spatial.time_dim must be even, got {}", self.time_dim)));
        }
        if let Some(bad) = self.resolved_attention_levels().iter().find(|&&l| l >= self.levels()) {
            return Err(invalid(format!("attention level {bad} beyond {} levels", self.levels())));
        }
        Ok(())
    }

    /// Required divisor of the latent height and width.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<(ResBlock, Option<TransformerBlock>)>,
}

impl Level {
    fn forward<T: Scalar>(&self, bind: &Binding<'_, T>, mut x: Tensor<T>, t_emb: &Tensor<T>, prompt: &Tensor<T>) -> Result<Tensor<T>> {
        for (res, attn) in &self.blocks {
            x = res.forward(bind, &x, t_emb)?;
            if let Some(attn) = attn {
                x = attn.forward(bind, &x, prompt)?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct Upsample {
    conv: Conv,
}

impl Upsample {
    fn forward<T: Scalar>(&self, bind: &Binding<'_, T>, x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
        let mut y = x.clone();
        for &a in axes {
            y = repeat_interleave(&y, a, 2)?;
        }
        self.conv.forward(bind, &y)
    }
}

/// Per-stage features recorded during a forward pass (before any hook).
pub type StageFeatures<T> = Vec<(StageId, Tensor<T>)>;

#[derive(Debug, Clone)]
pub struct SpatialUnet {
    pub config: SpatialUnetConfig,
    time: TimeEmbedding,
    conv_in: Conv,
    down: Vec<(Level, Conv)>,
    mid: (ResBlock, Option<TransformerBlock>, ResBlock),
    up: Vec<(Upsample, Level)>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl SpatialUnet {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, config: &SpatialUnetConfig) -> Result<Self> {
        config.validate()?;
        let ch = &config.channel_schedule;
        let l = ch.len();
        let attn_levels = config.resolved_attention_levels();
        let (td, xd) = (config.time_dim, config.text_dim);
        let time = TimeEmbedding::new(pb, "time", td)?;
        let conv_in = Conv::new(pb, "conv_in", 2, config.latent_channels, ch[0], 3, 1)?;
        let mut down = Vec::new();
        for k in 0..l - 1 {
            let mut s = pb.scope(&format!("down{k}"));
            let blocks = (0..config.blocks_per_level)
                .map(|j| {
                    let res = ResBlock::new(&mut s, &format!("res{j}"), 2, ch[k], ch[k], td)?;
                    let attn = attn_levels
                        .contains(&k)
                        .then(|| TransformerBlock::new(&mut s, &format!("attn{j}"), ch[k], xd))
                        .transpose()?;
                    Ok((res, attn))
                })
                .collect::<Result<_>>()?;
            let downsample = Conv::new(&mut s, "downsample", 2, ch[k], ch[k + 1], 3, 2)?;
            down.push((Level { blocks }, downsample));
        }
        let mid = {
            let mut s = pb.scope("mid");
            let c = ch[l - 1];
            (
                ResBlock::new(&mut s, "res0", 2, c, c, td)?,
                attn_levels.contains(&(l - 1)).then(|| TransformerBlock::new(&mut s, "attn", c, xd)).transpose()?,
                ResBlock::new(&mut s, "res1", 2, c, c, td)?,
            )
        };
        let mut up = Vec::new();
        for k in (0..l - 1).rev() {
            let mut s = pb.scope(&format!("up{k}"));
            let upsample = Upsample {
                conv: Conv::new(&mut s, "upsample", 2, ch[k + 1], ch[k], 3, 1)?,
            };
            let blocks = (0..config.blocks_per_level)
                .map(|j| {
                    let cin = if j == 0 { 2 * ch[k] } else { ch[k] };
                    let res = ResBlock::new(&mut s, &format!("res{j}"), 2, cin, ch[k], td)?;
                    let attn = attn_levels
                        .contains(&k)
                        .then(|| TransformerBlock::new(&mut s, &format!("attn{j}"), ch[k], xd))
                        .transpose()?;
                    Ok((res, attn))
                })
                .collect::<Result<_>>()?;
            up.push((upsample, Level { blocks }));
        }
        Ok(Self {
            config: config.clone(),
            time,
            norm_out: GroupNorm::new(pb, "norm_out", ch[0])?,
            conv_out: Conv::with_gain(pb, "conv_out", 2, ch[0], config.latent_channels, 3, 1, OUTPUT_GAIN)?,
            conv_in,
            down,
            mid,
            up,
        })
    }

    /// Stage ids in forward order.
    pub fn stage_ids(&self) -> Vec<StageId> {
        let l = self.config.levels();
        (0..l - 1)
            .map(StageId::Down)
            .chain(std::iter::once(StageId::Mid))
            .chain((0..l - 1).rev().map(StageId::Up))
            .collect()
    }

    /// Channel count and downsampling factor of a stage.
    pub fn stage_geometry(&self, id: StageId) -> (usize, usize) {
        let ch = &self.config.channel_schedule;
        match id {
            StageId::Down(k) | StageId::Up(k) => (ch[k], 1 << k),
            StageId::Mid => (ch[ch.len() - 1], 1 << (ch.len() - 1)),
        }
    }

    /// Noise estimate for frames `z[(b·f), c, h, w]` at timestep `t`.
    /// `prompt` is `[1, tokens, text_dim]`. Returns the estimate and the
    /// stage features as computed before `hook` replaced them.
    pub fn forward<T: Scalar>(
        &self,
        bind: &Binding<'_, T>,
        z: &Tensor<T>,
        t: usize,
        prompt: &Tensor<T>,
        hook: &dyn StageHook<T>,
    ) -> Result<(Tensor<T>, StageFeatures<T>)> {
        z.expect_rank("spatial_unet", 4)?;
        let (c, h, w) = (z.shape()[1], z.shape()[2], z.shape()[3]);
        if c != self.config.latent_channels {
            return Err(shape_err(
                "spatial_unet",
                format!("channel dimension is {c}, expected {}", self.config.latent_channels),
            ));
        }
        let div = self.config.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(shape_err(
                "spatial_unet",
                format!("height and width must be divisible by {div}, got {h}×{w}"),
            ));
        }
        if prompt.rank() != 3 || prompt.shape()[2] != self.config.text_dim {
            return Err(shape_err(
                "spatial_unet",
                format!("prompt {:?} must be [1, tokens, {}]", prompt.shape(), self.config.text_dim),
            ));
        }
        let t_emb = self.time.forward(bind, t)?;
        let mut features = Vec::new();
        let mut tap = |id: StageId, x: Tensor<T>| -> Result<Tensor<T>> {
            features.push((id, x.clone()));
            hook.on_stage(id, x)
        };
        let mut x = self.conv_in.forward(bind, z)?;
        let mut skips = Vec::new();
        for (k, (level, downsample)) in self.down.iter().enumerate() {
            x = tap(StageId::Down(k), level.forward(bind, x, &t_emb, prompt)?)?;
            skips.push(x.clone());
            x = downsample.forward(bind, &x)?;
        }
        let (res0, attn, res1) = &self.mid;
        x = res0.forward(bind, &x, &t_emb)?;
        if let Some(attn) = attn {
            x = attn.forward(bind, &x, prompt)?;
        }
        x = tap(StageId::Mid, res1.forward(bind, &x, &t_emb)?)?;
        let levels = self.config.levels();
        for (i, (upsample, level)) in self.up.iter().enumerate() {
            let k = levels - 2 - i;
            let skip = skips.pop().expect("one skip per level");
            x = concat(&[upsample.forward(bind, &x, &[2, 3])?, skip], 1)?;
            x = tap(StageId::Up(k), level.forward(bind, x, &t_emb, prompt)?)?;
        }
        let out = self.conv_out.forward(bind, &self.norm_out.forward(bind, &x)?.silu())?;
        Ok((out, features))
    }
}
