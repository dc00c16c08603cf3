//! One-video fine-tuning of the temporal Unet and STUs with the spatial
//! Unet frozen.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::TcveConfig;
use crate::diffusion::ldm_loss;
use crate::error::{invalid, Error, Result};
use crate::model::{Ablation, TcveModel};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::stubs::{encode_text, encode_video, PixelVideo};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            iterations: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("train.iterations must be at least 1".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config(format!("train.adam_eps must be positive, got {}", self.adam_eps)));
        }
        Ok(())
    }
}

/// First and second moments per trainable tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// Bias-corrected Adam update of every trainable tensor in `store`.
/// Frozen tensors are never touched.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let names: Vec<String> = store.trainable().map(|p| p.name.clone()).collect();
    for name in &names {
        match grads.get(name) {
            None => return Err(invalid(format!("no gradient for trainable tensor `{name}`"))),
            Some(g) if g.len() != store.get(name).expect("listed").numel() => {
                return Err(invalid(format!("gradient for `{name}` has {} values", g.len())))
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for name in names {
        let g = &grads[&name];
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let data = store.data_mut(&name)?;
        for i in 0..g.len() {
            let gi = g[i].to_f64_lossy();
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            if update != 0.0 {
                data[i] = T::from_f64_lossy(data[i].to_f64_lossy() - update);
            }
        }
    }
    Ok(())
}

pub struct TrainOutcome<T: Scalar> {
    pub model: TcveModel<T>,
    pub losses: Vec<f64>,
    pub timesteps: Vec<usize>,
}

const LOSS_STREAM: u64 = 0x6c6f_7373;

/// Fine-tunes a fresh model (trainable weights seeded by `cfg.train.seed`)
/// on one video and its prompt.
pub fn train_on_video<T: Scalar>(video: &PixelVideo, source_prompt: &str, cfg: &TcveConfig) -> Result<TrainOutcome<T>> {
    let model = TcveModel::new(cfg, cfg.train.seed)?;
    train_model(model, video, source_prompt)
}

/// Runs `model.config.train.iterations` steps on `model`.
pub fn train_model<T: Scalar>(mut model: TcveModel<T>, video: &PixelVideo, source_prompt: &str) -> Result<TrainOutcome<T>> {
    let cfg = model.config.clone();
    let z0: Tensor<T> = encode_video(video)?;
    model.check_latent(z0.shape())?;
    let prompt = encode_text(source_prompt, cfg.spatial.text_dim);
    let sched = cfg.schedule.build()?;
    let mut rng = RngState::new(cfg.train.seed).split(LOSS_STREAM);
    let mut state = AdamState::default();
    let mut losses = Vec::with_capacity(cfg.train.iterations);
    let mut timesteps = Vec::with_capacity(cfg.train.iterations);
    for _ in 0..cfg.train.iterations {
        let grads = {
            let bind = model.params.bind(true);
            let denoiser = |z: &Tensor<T>, t: usize, p: &_| model.denoise(&bind, z, t, p);
            let sample = ldm_loss(&denoiser, &z0, &prompt, &mut rng, &sched)?;
            let loss = sample.loss.item()?.to_f64_lossy();
            if !loss.is_finite() {
                return Err(invalid(format!("loss diverged to {loss} at step {}", losses.len() + 1)));
            }
            if sample.loss.tracks_grad() {
                sample.loss.backward()?;
            }
            losses.push(loss);
            timesteps.push(sample.t);
            bind.grads()
        };
        adam_step(&mut model.params, &grads, &mut state, &cfg.train)?;
    }
    Ok(TrainOutcome {
        model,
        losses,
        timesteps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", &[1], vec![v], trainable).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = scalar_store(1.5, true);
        let grads = BTreeMap::from([("w".to_string(), vec![0.0])]);
        let mut state = AdamState::default();
        for _ in 0..5 {
            adam_step(&mut store, &grads, &mut state, &TrainConfig::default()).unwrap();
        }
        assert_eq!(*store.get("w").unwrap().data, vec![1.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        for g in [0.3, -7.0] {
            let mut store = scalar_store(1.0, true);
            let grads = BTreeMap::from([("w".to_string(), vec![g])]);
            adam_step(&mut store, &grads, &mut AdamState::default(), &cfg).unwrap();
            let moved = store.get("w").unwrap().data[0] - 1.0;
            let expect = -cfg.learning_rate * f64::signum(g);
            assert!((moved - expect).abs() < 1e-9 * cfg.learning_rate.max(1.0), "{moved} vs {expect}");
        }
    }

    #[test]
    fn frozen_untouched_and_missing_gradient_rejected() {
        let mut store = scalar_store(2.0, false);
        store.insert("t", &[2], vec![0.0, 0.0], true).unwrap();
        let mut state = AdamState::default();
        assert!(adam_step(&mut store, &BTreeMap::new(), &mut state, &TrainConfig::default()).is_err());
        let grads = BTreeMap::from([("t".to_string(), vec![1.0, -1.0]), ("w".to_string(), vec![5.0])]);
        for _ in 0..10 {
            adam_step(&mut store, &grads, &mut state, &TrainConfig::default()).unwrap();
        }
        assert_eq!(*store.get("w").unwrap().data, vec![2.0]);
        assert!(store.get("t").unwrap().data[0] < 0.0);
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
