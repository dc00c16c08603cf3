//! The joint denoiser: frozen spatial Unet, trainable temporal Unet, and
//! one STU per fused stage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::TcveConfig;
use crate::diffusion::NoisePredictor;
use crate::error::{invalid, shape_err, Result};
use crate::params::{Binding, ParamBuilder, ParamStore};
use crate::rng::RngState;
use crate::spatial::{f_spa, f_spa_inv, NoHook, SpatialUnet, StageHook, StageId};
use crate::stu::{Stu, StuAblation, StuGeometry};
use crate::stubs::PromptEmbedding;
use crate::temporal::{f_tem, TemporalUnet};
use crate::tensor::{Scalar, Tensor};

/// Seed of the frozen spatial weights; every model shares them, playing
/// the part of one pretrained checkpoint.
pub const SPATIAL_SEED: u64 = 0x5350_4154_4941_4c00;

pub const SPATIAL_PREFIX: &str = "spatial";
pub const TEMPORAL_PREFIX: &str = "temporal";
pub const STU_PREFIX: &str = "stu";

/// Component toggles mirroring the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub temporal_unet: bool,
    pub stu: StuAblation,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            temporal_unet: true,
            stu: StuAblation::default(),
        }
    }
}

impl Ablation {
    pub const FLAGS: [&'static str; 4] = ["no-tu", "no-stu", "no-ta", "no-3dconv"];

    /// Applies one `--ablate` flag.
    pub fn apply_flag(&mut self, flag: &str) -> Result<()> {
        match flag {
            "no-tu" => self.temporal_unet = false,
            "no-stu" => self.stu.enabled = false,
            "no-ta" => self.stu.use_temporal_attention = false,
            "no-3dconv" => self.stu.use_conv3d = false,
            other => {
                return Err(invalid(format!(
                    "unknown ablation `{other}`, expected one of {}",
                    Self::FLAGS.join(", ")
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TcveModel<T: Scalar> {
    pub config: TcveConfig,
    pub params: ParamStore<T>,
    spatial: SpatialUnet,
    temporal: Option<TemporalUnet>,
    stus: BTreeMap<StageId, Stu>,
}

impl<T: Scalar> TcveModel<T> {
    /// Frozen spatial weights from [`SPATIAL_SEED`]; trainable weights from `seed`.
    pub fn new(config: &TcveConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let spatial = SpatialUnet::new(
            &mut ParamBuilder::new(&mut params, RngState::new(SPATIAL_SEED), false, SPATIAL_PREFIX),
            &config.spatial,
        )?;
        let ablation = config.train.ablation;
        let trainable = RngState::new(seed);
        let mut temporal = None;
        let mut stus = BTreeMap::new();
        if ablation.temporal_unet {
            let tu = TemporalUnet::new(
                &mut ParamBuilder::new(&mut params, trainable.split(1), true, TEMPORAL_PREFIX),
                &config.temporal,
                config.spatial.latent_channels,
            )?;
            let mut pb = ParamBuilder::new(&mut params, trainable.split(2), true, STU_PREFIX);
            for id in spatial.stage_ids() {
                if matches!(id, StageId::Up(_)) && !config.stu.fuse_up_stages {
                    continue;
                }
                let Some(temporal_channels) = temporal_stage_channels(&tu, id) else {
                    continue;
                };
                let geometry = StuGeometry {
                    temporal_channels,
                    spatial_channels: spatial.stage_geometry(id).0,
                };
                stus.insert(id, Stu::new(&mut pb, id, geometry, config.stu.lambda, ablation.stu)?);
            }
            temporal = Some(tu);
        }
        Ok(Self {
            config: config.clone(),
            params,
            spatial,
            temporal,
            stus,
        })
    }

    pub fn fused_stages(&self) -> Vec<StageId> {
        self.stus.keys().copied().collect()
    }

    /// Checks a latent video shape against both Unets.
    pub fn check_latent(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return Err(shape_err("tcve", format!("latent video must be rank 5, got {shape:?}")));
        }
        let (c, f, h, w) = (shape[1], shape[2], shape[3], shape[4]);
        if c != self.config.spatial.latent_channels {
            return Err(shape_err(
                "tcve",
                format!("channel dimension is {c}, expected {}", self.config.spatial.latent_channels),
            ));
        }
        let div = self.config.spatial.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(shape_err(
                "tcve",
                format!("latent height and width must be divisible by {div} (pixels by {}), got {h}×{w}", 2 * div),
            ));
        }
        if let Some(tu) = &self.temporal {
            let div = tu.config.frame_divisor();
            if f % div != 0 {
                return Err(shape_err("tcve", format!("frame count must be divisible by {div}, got {f}")));
            }
        }
        Ok(())
    }

    fn prompt_tensor(&self, prompt: &PromptEmbedding) -> Result<Tensor<T>> {
        if prompt.dim != self.config.spatial.text_dim {
            return Err(shape_err(
                "tcve",
                format!("prompt width {} differs from text_dim {}", prompt.dim, self.config.spatial.text_dim),
            ));
        }
        Ok(prompt.to_tensor())
    }

    /// Joint noise estimate for `z[b, c, f, h, w]`.
    pub fn denoise(&self, bind: &Binding<'_, T>, z: &Tensor<T>, t: usize, prompt: &PromptEmbedding) -> Result<Tensor<T>> {
        self.check_latent(z.shape())?;
        let p = self.prompt_tensor(prompt)?;
        let s = z.shape();
        let (b, h, w) = (s[0], s[3], s[4]);
        let out = match &self.temporal {
            Some(tu) => {
                let feats = tu.forward(bind, &f_tem(z)?, t)?;
                let hook = Fuse {
                    stus: &self.stus,
                    temporal: feats.into_iter().collect(),
                    bind,
                    latent: (b, h, w),
                };
                self.spatial.forward(bind, &f_spa(z)?, t, &p, &hook)?.0
            }
            None => self.spatial.forward(bind, &f_spa(z)?, t, &p, &NoHook)?.0,
        };
        f_spa_inv(&out, b)
    }

    /// The frozen spatial Unet applied frame by frame, no fusion.
    pub fn denoise_spatial_only(&self, bind: &Binding<'_, T>, z: &Tensor<T>, t: usize, prompt: &PromptEmbedding) -> Result<Tensor<T>> {
        self.check_latent(z.shape())?;
        let p = self.prompt_tensor(prompt)?;
        let out = self.spatial.forward(bind, &f_spa(z)?, t, &p, &NoHook)?.0;
        f_spa_inv(&out, z.shape()[0])
    }

    /// Inference-time predictor over the joint denoiser.
    pub fn predictor(&self) -> Predictor<'_, T> {
        Predictor {
            model: self,
            bind: self.params.bind(false),
            spatial_only: false,
        }
    }

    /// Inference-time predictor over the spatial Unet alone.
    pub fn spatial_predictor(&self) -> Predictor<'_, T> {
        Predictor {
            model: self,
            bind: self.params.bind(false),
            spatial_only: true,
        }
    }

    /// Parameter-name prefixes of the trainable submodules: the temporal
    /// Unet blocks and each STU's `W_q`, `W_k`, `W_v`, projection and 3D conv.
    pub fn trainable_submodules(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(tu) = &self.temporal {
            out.push(format!("{TEMPORAL_PREFIX}.time."));
            out.push(format!("{TEMPORAL_PREFIX}.conv_in."));
            for k in 0..tu.config.levels - 1 {
                out.push(format!("{TEMPORAL_PREFIX}.down{k}."));
                out.push(format!("{TEMPORAL_PREFIX}.up{k}."));
            }
            out.push(format!("{TEMPORAL_PREFIX}.mid."));
        }
        for id in self.stus.keys() {
            let base = format!("{STU_PREFIX}.{id}");
            out.push(format!("{base}.proj."));
            for w in ["w_q", "w_k", "w_v"] {
                out.push(format!("{base}.attn.{w}."));
            }
            out.push(format!("{base}.conv3d."));
        }
        out.retain(|prefix| self.params.count_prefix(prefix) > 0);
        out
    }

    /// Element counts per top-level component, keyed like `stu.mid.attn`.
    pub fn parameter_accounting(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in self.params.iter() {
            let parts: Vec<&str> = p.name.split('.').collect();
            let key = match parts[0] {
                STU_PREFIX => parts[..3.min(parts.len() - 1)].join("."),
                other => other.to_string(),
            };
            *out.entry(key).or_insert(0) += p.numel();
        }
        out
    }
}

fn temporal_stage_channels(tu: &TemporalUnet, id: StageId) -> Option<usize> {
    let levels = tu.config.levels;
    match id {
        StageId::Down(k) | StageId::Up(k) if k + 1 < levels => Some(tu.base << k),
        StageId::Mid => Some(tu.base << (levels - 1)),
        _ => None,
    }
}

struct Fuse<'a, 'b, T: Scalar> {
    stus: &'a BTreeMap<StageId, Stu>,
    temporal: BTreeMap<StageId, Tensor<T>>,
    bind: &'a Binding<'b, T>,
    latent: (usize, usize, usize),
}

impl<T: Scalar> StageHook<T> for Fuse<'_, '_, T> {
    fn on_stage(&self, id: StageId, x: Tensor<T>) -> Result<Tensor<T>> {
        match (self.stus.get(&id), self.temporal.get(&id)) {
            (Some(stu), Some(x_tem)) => stu.forward(self.bind, &x, x_tem, self.latent),
            _ => Ok(x),
        }
    }
}

pub struct Predictor<'a, T: Scalar> {
    model: &'a TcveModel<T>,
    bind: Binding<'a, T>,
    spatial_only: bool,
}

impl<T: Scalar> NoisePredictor<T> for Predictor<'_, T> {
    fn predict(&self, z_t: &Tensor<T>, t: usize, prompt: &PromptEmbedding) -> Result<Tensor<T>> {
        if self.spatial_only {
            self.model.denoise_spatial_only(&self.bind, z_t, t, prompt)
        } else {
            self.model.denoise(&self.bind, z_t, t, prompt)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stubs::encode_text;

    fn small() -> TcveConfig {
        let mut cfg = TcveConfig::default();
        cfg.spatial.channel_schedule = vec![8, 16];
        cfg.spatial.text_dim = 8;
        cfg.spatial.time_dim = 8;
        cfg.temporal.time_dim = 8;
        cfg
    }

    #[test]
    fn fresh_model_matches_spatial_only() {
        let model = TcveModel::<f64>::new(&small(), 3).unwrap();
        assert_eq!(model.fused_stages(), vec![StageId::Down(0), StageId::Mid, StageId::Up(0)]);
        let z = RngState::new(1).normal_tensor::<f64>(&[1, 12, 4, 4, 4]);
        let p = encode_text("a red kite", 8);
        let bind = model.params.bind(false);
        let joint = model.denoise(&bind, &z, 500, &p).unwrap();
        let spatial = model.denoise_spatial_only(&bind, &z, 500, &p).unwrap();
        assert_eq!(joint.shape(), z.shape());
        assert_eq!(joint.to_vec(), spatial.to_vec());
    }

    #[test]
    fn no_tu_has_no_trainable_parameters() {
        let mut cfg = small();
        cfg.train.ablation.apply_flag("no-tu").unwrap();
        let model = TcveModel::<f64>::new(&cfg, 3).unwrap();
        assert_eq!(model.params.count(true), 0);
        assert!(model.fused_stages().is_empty());
        assert!(cfg.train.ablation.clone().apply_flag("no-everything").is_err());
    }

    #[test]
    fn up_stage_toggle() {
        let mut cfg = small();
        cfg.stu.fuse_up_stages = false;
        let model = TcveModel::<f64>::new(&cfg, 3).unwrap();
        assert_eq!(model.fused_stages(), vec![StageId::Down(0), StageId::Mid]);
    }

    #[test]
    fn spatial_weights_independent_of_seed() {
        let a = TcveModel::<f32>::new(&small(), 1).unwrap();
        let b = TcveModel::<f32>::new(&small(), 2).unwrap();
        let pairs: Vec<_> = a.params.iter().zip(b.params.iter()).collect();
        assert!(pairs.iter().all(|(pa, pb)| pa.name == pb.name));
        assert!(pairs.iter().filter(|(pa, _)| !pa.trainable).all(|(pa, pb)| pa.data == pb.data));
        assert!(pairs.iter().any(|(pa, pb)| pa.trainable && pa.data != pb.data));
    }

    #[test]
    fn accounting_keys() {
        let model = TcveModel::<f32>::new(&small(), 1).unwrap();
        let acct = model.parameter_accounting();
        for key in ["spatial", "temporal", "stu.mid.attn", "stu.mid.conv3d", "stu.mid.proj", "stu.down0.attn"] {
            assert!(acct.contains_key(key), "{key}: {acct:?}");
        }
        assert_eq!(acct.values().sum::<usize>(), model.params.count(true) + model.params.count(false));
    }

    #[test]
    fn latent_checks() {
        let model = TcveModel::<f32>::new(&small(), 1).unwrap();
        assert!(model.check_latent(&[1, 12, 8, 8, 8]).is_ok());
        assert!(model.check_latent(&[1, 12, 7, 8, 8]).unwrap_err().to_string().contains("divisible by 2"));
        assert!(model.check_latent(&[1, 12, 8, 7, 8]).is_err());
        assert!(model.check_latent(&[1, 4, 8, 8, 8]).is_err());
    }
}
