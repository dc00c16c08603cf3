//! Noise schedule, forward noising, the denoising objective, and the
//! deterministic DDIM sampler with its inversion.

use crate::error::{invalid, shape_err, Result};
use crate::rng::RngState;
use crate::stubs::PromptEmbedding;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_DDIM_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 12.5;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;

/// Anything that predicts the noise in `z_t` at timestep `t` under a prompt.
pub trait NoisePredictor<T: Scalar> {
    fn predict(&self, z_t: &Tensor<T>, t: usize, prompt: &PromptEmbedding) -> Result<Tensor<T>>;
}

impl<T, F> NoisePredictor<T> for F
where
    T: Scalar,
    F: Fn(&Tensor<T>, usize, &PromptEmbedding) -> Result<Tensor<T>>,
{
    fn predict(&self, z_t: &Tensor<T>, t: usize, prompt: &PromptEmbedding) -> Result<Tensor<T>> {
        self(z_t, t, prompt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub ddim_steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Linear betas from 1e-4 to 2e-2 over `t_total` steps, and `s` DDIM
    /// timesteps spread uniformly over `[0, t_total − 1]` (both ends kept;
    /// `s = 1` keeps only the last).
    pub fn new(t_total: usize, s: usize) -> Result<Self> {
        if t_total == 0 || s == 0 {
            return Err(invalid(format!("schedule needs T ≥ 1 and S ≥ 1, got T={t_total}, S={s}")));
        }
        if s > t_total {
            return Err(invalid(format!("DDIM steps S={s} exceed diffusion steps T={t_total}")));
        }
        let betas: Vec<f64> = (0..t_total)
            .map(|t| {
                if t_total == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * t as f64 / (t_total - 1) as f64
                }
            })
            .collect();
        let alpha_bar = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alpha_bar,
            ddim_steps: ddim_subsequence(t_total, s),
        })
    }

    pub fn timesteps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// Same betas with a different DDIM subsequence length.
    pub fn with_steps(&self, s: usize) -> Result<Self> {
        let t_total = self.timesteps();
        if s == 0 || s > t_total {
            return Err(invalid(format!("DDIM steps S={s} must lie in [1, {t_total}]")));
        }
        Ok(Self {
            ddim_steps: ddim_subsequence(t_total, s),
            ..self.clone()
        })
    }

    fn abar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| invalid(format!("timestep {t} outside [0, {})", self.timesteps())))
    }
}

fn ddim_subsequence(t_total: usize, s: usize) -> Vec<usize> {
    if s == 1 {
        return vec![t_total - 1];
    }
    let (span, gaps) = (t_total - 1, s - 1);
    (0..s).map(|i| (i * span + gaps / 2) / gaps).collect()
}

/// `√ᾱ_t · z0 + √(1 − ᾱ_t) · ε`.
pub fn q_sample<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() {
        return Err(shape_err("q_sample", format!("noise {:?} vs latent {:?}", eps.shape(), z0.shape())));
    }
    let ab = sched.abar(t)?;
    z0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))
}

/// One stochastic estimate of the denoising objective.
pub struct LossSample<T: Scalar> {
    pub loss: Tensor<T>,
    pub t: usize,
}

/// Draws `t` uniformly over the schedule and `ε ~ N(0, I)`, then returns
/// the mean squared error between `ε` and the model's prediction.
pub fn ldm_loss<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    z0: &Tensor<T>,
    prompt: &PromptEmbedding,
    rng: &mut RngState,
    sched: &NoiseSchedule,
) -> Result<LossSample<T>> {
    let t = rng.range_inclusive(0, sched.timesteps() - 1);
    let eps = rng.normal_tensor::<T>(z0.shape());
    let z_t = q_sample(&z0.detach(), t, &eps, sched)?;
    let pred = model.predict(&z_t, t, prompt)?;
    if pred.shape() != eps.shape() {
        return Err(shape_err(
            "ldm_loss",
            format!("model returned {:?} for input {:?}", pred.shape(), eps.shape()),
        ));
    }
    Ok(LossSample {
        loss: pred.sub(&eps)?.square().mean(),
        t,
    })
}

fn check_abar(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must lie in (0, 1], got {v}")))
    }
}

fn affine<T: Scalar>(op: &'static str, z: &Tensor<T>, eps: &Tensor<T>, c1: f64, c2: f64) -> Result<Tensor<T>> {
    if z.shape() != eps.shape() {
        return Err(shape_err(op, format!("noise {:?} vs latent {:?}", eps.shape(), z.shape())));
    }
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| T::from_f64_lossy(c1 * z.to_f64_lossy() + c2 * e.to_f64_lossy()))
        .collect();
    Tensor::from_vec(z.shape(), data)
}

/// Deterministic update from `ᾱ_t` to `ᾱ_prev`:
/// `√ᾱ_prev · (z_t − √(1−ᾱ_t) ε) / √ᾱ_t + √(1−ᾱ_prev) ε`.
///
/// Evaluated as `c1·z_t + c2·ε`, which makes equal alphas an exact identity.
pub fn ddim_step<T: Scalar>(z_t: &Tensor<T>, eps: &Tensor<T>, abar_t: f64, abar_prev: f64) -> Result<Tensor<T>> {
    check_abar("abar_t", abar_t)?;
    check_abar("abar_prev", abar_prev)?;
    let (c1, c2) = step_coefficients(abar_t, abar_prev);
    affine("ddim_step", z_t, eps, c1, c2)
}

/// Mirror of [`ddim_step`], moving from `ᾱ_prev` up to `ᾱ_t`.
pub fn ddim_invert_step<T: Scalar>(z_prev: &Tensor<T>, eps: &Tensor<T>, abar_prev: f64, abar_t: f64) -> Result<Tensor<T>> {
    check_abar("abar_prev", abar_prev)?;
    check_abar("abar_t", abar_t)?;
    let (c1, c2) = step_coefficients(abar_prev, abar_t);
    affine("ddim_invert_step", z_prev, eps, c1, c2)
}

/// `(c1, c2)` such that moving from `ᾱ_from` to `ᾱ_to` is `c1·z + c2·ε`.
pub fn step_coefficients(abar_from: f64, abar_to: f64) -> (f64, f64) {
    let c1 = (abar_to / abar_from).sqrt();
    (c1, (1.0 - abar_to).sqrt() - c1 * (1.0 - abar_from).sqrt())
}

/// Classifier-free combination `uncond + s·(cond − uncond)`, evaluated as
/// `s·cond + (1 − s)·uncond` so that `s = 1` and `s = 0` are exact.
pub fn guided_eps<T: Scalar>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(shape_err(
            "guided_eps",
            format!("conditional {:?} vs unconditional {:?}", eps_cond.shape(), eps_uncond.shape()),
        ));
    }
    affine("guided_eps", eps_cond, eps_uncond, scale, 1.0 - scale)
}

#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub unconditional: PromptEmbedding,
}

impl GuidanceConfig {
    pub fn new(scale: f64, text_dim: usize) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(invalid(format!("guidance scale must be finite and nonnegative, got {scale}")));
        }
        Ok(Self {
            scale,
            unconditional: crate::stubs::unconditional(text_dim),
        })
    }

    /// Scale 1: the conditional prediction alone.
    pub fn disabled(text_dim: usize) -> Self {
        Self::new(1.0, text_dim).expect("unit scale")
    }
}

fn guided_prediction<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    z: &Tensor<T>,
    t: usize,
    prompt: &PromptEmbedding,
    guidance: &GuidanceConfig,
) -> Result<Tensor<T>> {
    let cond = model.predict(z, t, prompt)?;
    if guidance.scale == 1.0 {
        return Ok(cond);
    }
    let uncond = model.predict(z, t, &guidance.unconditional)?;
    guided_eps(&cond, &uncond, guidance.scale)
}

fn checked<T: Scalar>(op: &'static str, eps: Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    if eps.shape() != z.shape() {
        return Err(shape_err(op, format!("model returned {:?} for latent {:?}", eps.shape(), z.shape())));
    }
    Ok(eps)
}

/// Runs the sampler from `z_T` down the DDIM subsequence to a clean latent.
pub fn ddim_sample<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    z_t: &Tensor<T>,
    model: &M,
    prompt: &PromptEmbedding,
    guidance: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let steps = &sched.ddim_steps;
    let mut z = z_t.detach();
    for i in (0..steps.len()).rev() {
        let t = steps[i];
        let eps = checked("ddim_sample", guided_prediction(model, &z, t, prompt, guidance)?, &z)?;
        let abar_prev = if i > 0 { sched.abar(steps[i - 1])? } else { 1.0 };
        z = ddim_step(&z, &eps.detach(), sched.abar(t)?, abar_prev)?;
    }
    Ok(z)
}

/// Where the inversion queries the noise predictor when moving from
/// `ẑ_{prev}` to `ẑ_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InversionQuery {
    /// `ε(ẑ_prev, t_prev)`; the first step uses the first DDIM timestep.
    #[default]
    PreviousTimestep,
    /// `ε(ẑ_prev, t)`.
    TargetTimestep,
}

/// Runs the sampler's recursion backward from a clean latent to `ẑ_T`,
/// always without guidance.
pub fn ddim_invert<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    z0: &Tensor<T>,
    model: &M,
    prompt: &PromptEmbedding,
    sched: &NoiseSchedule,
    query: InversionQuery,
) -> Result<Tensor<T>> {
    let steps = &sched.ddim_steps;
    let mut z = z0.detach();
    for i in 0..steps.len() {
        let t = steps[i];
        let (t_prev, abar_prev) = if i > 0 {
            (steps[i - 1], sched.abar(steps[i - 1])?)
        } else {
            (steps[0], 1.0)
        };
        let t_query = match query {
            InversionQuery::PreviousTimestep => t_prev,
            InversionQuery::TargetTimestep => t,
        };
        let eps = checked("ddim_invert", model.predict(&z, t_query, prompt)?, &z)?;
        z = ddim_invert_step(&z, &eps.detach(), abar_prev, sched.abar(t)?)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stubs::encode_text;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    fn zero_model(z: &Tensor<f64>, _t: usize, _p: &PromptEmbedding) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(z.shape()))
    }

    #[test]
    fn default_schedule_endpoints() {
        let sched = NoiseSchedule::new(1000, 50).unwrap();
        assert_eq!(sched.ddim_steps.len(), 50);
        assert_eq!(sched.ddim_steps[0], 0);
        assert_eq!(sched.ddim_steps[49], 999);
        assert!(sched.ddim_steps.windows(2).all(|w| w[0] < w[1]));
        assert!(sched.alpha_bar[999] < 0.01);
        assert!(sched.alpha_bar[0] > 0.999);
    }

    #[test]
    fn alpha_bar_is_cumulative_product() {
        let sched = NoiseSchedule::new(1000, 10).unwrap();
        let mut prod = 1.0;
        for (t, b) in sched.betas.iter().enumerate() {
            assert!(*b > 0.0 && *b < 1.0);
            prod *= 1.0 - b;
            assert!((sched.alpha_bar[t] - prod).abs() < 1e-9);
        }
        let small = NoiseSchedule::new(4, 2).unwrap();
        assert_eq!(small.alpha_bar.len(), 4);
        assert!(small.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn schedule_rejects_s_above_t() {
        assert!(NoiseSchedule::new(10, 11).is_err());
        assert!(NoiseSchedule::new(10, 0).is_err());
        assert_eq!(NoiseSchedule::new(10, 1).unwrap().ddim_steps, vec![9]);
        assert_eq!(NoiseSchedule::new(5, 5).unwrap().ddim_steps, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn q_sample_limits_and_scalar_case() {
        let sched = NoiseSchedule {
            betas: vec![0.0; 3],
            alpha_bar: vec![1.0, 0.25, 0.0],
            ddim_steps: vec![0, 2],
        };
        let (z0, eps) = (s(2.0), s(1.0));
        assert_eq!(q_sample(&z0, 0, &eps, &sched).unwrap().item().unwrap(), 2.0);
        assert_eq!(q_sample(&z0, 2, &eps, &sched).unwrap().item().unwrap(), 1.0);
        let mid = q_sample(&z0, 1, &eps, &sched).unwrap().item().unwrap();
        assert!((mid - (0.5 * 2.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((mid - 1.8660).abs() < 1e-4);
        assert!(q_sample(&z0, 3, &eps, &sched).is_err());
    }

    #[test]
    fn q_sample_variance_matches() {
        let sched = NoiseSchedule::new(1000, 50).unwrap();
        let t = 400;
        let ab = sched.alpha_bar[t];
        let n = 200_000;
        let mut rng = RngState::new(5);
        let z0 = Tensor::<f64>::from_vec(&[n], rng.normal_vec(n, 2.0)).unwrap();
        let eps = rng.normal_tensor::<f64>(&[n]);
        let zt = q_sample(&z0, t, &eps, &sched).unwrap();
        let var = zt.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let expected = ab * 4.0 + (1.0 - ab);
        // variance of a sample second moment: 2σ⁴/n
        let sigma = (2.0 * expected * expected / n as f64).sqrt();
        assert!((var - expected).abs() < 3.0 * sigma, "{var} vs {expected}");
    }

    #[test]
    fn oracle_model_has_zero_loss_and_zero_model_unit_loss() {
        let sched = NoiseSchedule::new(1000, 50).unwrap();
        let p = encode_text("a cat", 8);
        let z0 = Tensor::<f64>::zeros(&[1, 4, 8, 8, 8]);
        let n = z0.numel() as f64;
        // the oracle replays the draw to recover ε
        let mut replay = RngState::new(11);
        let t = replay.range_inclusive(0, 999);
        let eps = replay.normal_tensor::<f64>(z0.shape());
        let oracle = |_z: &Tensor<f64>, tq: usize, _p: &PromptEmbedding| -> Result<Tensor<f64>> {
            assert_eq!(tq, t);
            Ok(eps.clone())
        };
        let l = ldm_loss(&oracle, &z0, &p, &mut RngState::new(11), &sched).unwrap();
        assert_eq!(l.loss.item().unwrap(), 0.0);
        let l = ldm_loss(&zero_model, &z0, &p, &mut RngState::new(12), &sched).unwrap();
        let v = l.loss.item().unwrap();
        assert!((v - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "{v}");
        assert!(v >= 0.0);
    }

    #[test]
    fn loss_rejects_bad_model_shape() {
        let sched = NoiseSchedule::new(10, 2).unwrap();
        let bad = |_z: &Tensor<f64>, _t: usize, _p: &PromptEmbedding| Ok(Tensor::<f64>::zeros(&[3]));
        let z0 = Tensor::<f64>::zeros(&[2, 2]);
        assert!(ldm_loss(&bad, &z0, &encode_text("x", 4), &mut RngState::new(0), &sched).is_err());
    }

    #[test]
    fn ddim_scalar_cases() {
        let out = ddim_step(&s(1.0), &s(0.0), 0.25, 1.0).unwrap().item().unwrap();
        assert!((out - 2.0).abs() < 1e-12);
        let out = ddim_step(&s(0.925), &s(0.5), 0.36, 0.64).unwrap().item().unwrap();
        assert!((out - 1.0).abs() < 1e-12);
        let inv = ddim_invert_step(&s(1.0), &s(0.5), 0.64, 0.36).unwrap().item().unwrap();
        assert!((inv - 0.925).abs() < 1e-12);
    }

    #[test]
    fn ddim_equal_alphas_identity() {
        for (z, e, a) in [(0.3, 7.0, 0.2), (-4.0, 0.1, 1.0), (1e-8, -3.0, 0.999)] {
            assert_eq!(ddim_step(&s(z), &s(e), a, a).unwrap().item().unwrap(), z);
            assert_eq!(ddim_invert_step(&s(z), &s(e), a, a).unwrap().item().unwrap(), z);
        }
    }

    #[test]
    fn ddim_rejects_bad_alphas() {
        assert!(ddim_step(&s(1.0), &s(0.0), 0.0, 0.5).is_err());
        assert!(ddim_step(&s(1.0), &s(0.0), 0.5, 1.5).is_err());
        assert!(ddim_invert_step(&s(1.0), &s(0.0), -0.1, 0.5).is_err());
    }

    #[test]
    fn guidance_limits() {
        let (c, u) = (s(0.3), s(-1.7));
        assert_eq!(guided_eps(&c, &u, 1.0).unwrap().item().unwrap(), 0.3);
        assert_eq!(guided_eps(&c, &u, 0.0).unwrap().item().unwrap(), -1.7);
        assert_eq!(guided_eps(&s(1.0), &s(0.0), 12.5).unwrap().item().unwrap(), 12.5);
        assert!(guided_eps(&c, &Tensor::zeros(&[2]), 2.0).is_err());
    }

    #[test]
    fn zero_model_chains_telescope() {
        let sched = NoiseSchedule::new(1000, 50).unwrap();
        let p = encode_text("a dog", 8);
        let z = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let last = sched.alpha_bar[999];
        let sampled = ddim_sample(&z, &zero_model, &p, &GuidanceConfig::disabled(8), &sched).unwrap();
        for (o, i) in sampled.data().iter().zip(z.data()) {
            assert!((o - i / last.sqrt()).abs() < 1e-10 * o.abs());
        }
        let inverted = ddim_invert(&z, &zero_model, &p, &sched, InversionQuery::default()).unwrap();
        for (o, i) in inverted.data().iter().zip(z.data()) {
            assert!((o - i * last.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_sampling_is_one_update() {
        let sched = NoiseSchedule::new(100, 1).unwrap();
        let p = encode_text("a dog", 8);
        let model = |z: &Tensor<f64>, _t: usize, _p: &PromptEmbedding| Ok(z.scale(0.3));
        let z = s(1.5);
        let out = ddim_sample(&z, &model, &p, &GuidanceConfig::disabled(8), &sched).unwrap();
        let direct = ddim_step(&z, &z.scale(0.3), sched.alpha_bar[99], 1.0).unwrap();
        assert_eq!(out.to_vec(), direct.to_vec());
    }

    #[test]
    fn guidance_queries_both_branches() {
        let sched = NoiseSchedule::new(10, 2).unwrap();
        let p = encode_text("a dog", 8);
        let calls = std::cell::Cell::new(0);
        let model = |z: &Tensor<f64>, _t: usize, q: &PromptEmbedding| {
            calls.set(calls.get() + 1);
            Ok(z.scale(if q.is_unconditional() { 0.1 } else { 0.2 }))
        };
        ddim_sample(&s(1.0), &model, &p, &GuidanceConfig::new(12.5, 8).unwrap(), &sched).unwrap();
        assert_eq!(calls.get(), 4);
        calls.set(0);
        ddim_sample(&s(1.0), &model, &p, &GuidanceConfig::disabled(8), &sched).unwrap();
        assert_eq!(calls.get(), 2);
    }

    #[test]
    fn inversion_query_timesteps() {
        let sched = NoiseSchedule::new(100, 3).unwrap();
        let p = encode_text("a dog", 8);
        let seen = std::cell::RefCell::new(Vec::new());
        let model = |z: &Tensor<f64>, t: usize, _p: &PromptEmbedding| {
            seen.borrow_mut().push(t);
            Ok(Tensor::zeros(z.shape()))
        };
        ddim_invert(&s(1.0), &model, &p, &sched, InversionQuery::PreviousTimestep).unwrap();
        assert_eq!(*seen.borrow(), vec![0, 0, 50]);
        seen.borrow_mut().clear();
        ddim_invert(&s(1.0), &model, &p, &sched, InversionQuery::TargetTimestep).unwrap();
        assert_eq!(*seen.borrow(), vec![0, 50, 99]);
    }

    #[test]
    fn smooth_model_round_trip() {
        let sched = NoiseSchedule::new(1000, 50).unwrap();
        let p = encode_text("a dog", 8);
        let model = |z: &Tensor<f64>, _t: usize, _p: &PromptEmbedding| {
            Tensor::from_vec(z.shape(), z.data().iter().map(|v| 0.05 * v.tanh()).collect())
        };
        let mut rng = RngState::new(3);
        let z0 = rng.normal_tensor::<f64>(&[64]);
        let zt = ddim_invert(&z0, &model, &p, &sched, InversionQuery::default()).unwrap();
        let back = ddim_sample(&zt, &model, &p, &GuidanceConfig::disabled(8), &sched).unwrap();
        let err: f64 = back.data().iter().zip(z0.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = z0.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 5e-2, "{}", err / norm);
    }

    #[test]
    fn sampling_is_deterministic() {
        let sched = NoiseSchedule::new(1000, 20).unwrap();
        let p = encode_text("a dog", 8);
        let model = |z: &Tensor<f64>, t: usize, _p: &PromptEmbedding| Ok(z.scale(0.001 * t as f64).add_scalar(0.1));
        let z = RngState::new(4).normal_tensor::<f64>(&[16]);
        let g = GuidanceConfig::new(3.0, 8).unwrap();
        assert_eq!(
            ddim_sample(&z, &model, &p, &g, &sched).unwrap().to_vec(),
            ddim_sample(&z, &model, &p, &g, &sched).unwrap().to_vec()
        );
    }
}
