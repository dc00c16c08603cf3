//! Zero-shot editing: invert the source clip under its prompt, then sample
//! under the edited prompt with classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_invert, ddim_sample, GuidanceConfig, InversionQuery, NoiseSchedule, DEFAULT_GUIDANCE};
use crate::error::{invalid, Result};
use crate::model::TcveModel;
use crate::stubs::text::tokenize;
use crate::stubs::{decode_video, encode_text, encode_video, PixelVideo};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub source_video: PixelVideo,
    pub source_prompt: String,
    pub edited_prompt: String,
    pub guidance_scale: f64,
    pub ddim_steps: usize,
    pub seed: u64,
}

impl EditRequest {
    pub fn new(source_video: PixelVideo, source_prompt: &str, edited_prompt: &str) -> Self {
        Self {
            source_video,
            source_prompt: source_prompt.to_string(),
            edited_prompt: edited_prompt.to_string(),
            guidance_scale: DEFAULT_GUIDANCE,
            ddim_steps: crate::diffusion::DEFAULT_DDIM_STEPS,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if tokenize(&self.edited_prompt).is_empty() {
            return Err(invalid("edited prompt is empty"));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(invalid(format!("guidance scale must be finite and nonnegative, got {}", self.guidance_scale)));
        }
        if self.ddim_steps == 0 {
            return Err(invalid("ddim_steps must be at least 1"));
        }
        Ok(())
    }
}

fn schedule<T: Scalar>(model: &TcveModel<T>, steps: usize) -> Result<NoiseSchedule> {
    model.config.schedule.build()?.with_steps(steps)
}

/// `ẑ_T` for the source clip: encode, then invert at guidance 1.
/// Editing several prompts against one clip can reuse this result.
pub fn invert_source<T: Scalar>(model: &TcveModel<T>, video: &PixelVideo, prompt: &str, steps: usize) -> Result<Tensor<T>> {
    let z0: Tensor<T> = encode_video(video)?;
    model.check_latent(z0.shape())?;
    let p = encode_text(prompt, model.config.spatial.text_dim);
    ddim_invert(&z0, &model.predictor(), &p, &schedule(model, steps)?, InversionQuery::default())
}

/// Samples from an inverted latent under `prompt` and decodes.
pub fn sample_from<T: Scalar>(model: &TcveModel<T>, z_t: &Tensor<T>, prompt: &str, guidance_scale: f64, steps: usize) -> Result<PixelVideo> {
    let dim = model.config.spatial.text_dim;
    let guidance = GuidanceConfig::new(guidance_scale, dim)?;
    let z0 = ddim_sample(z_t, &model.predictor(), &encode_text(prompt, dim), &guidance, &schedule(model, steps)?)?;
    decode_video(&z0)
}

pub fn edit_video<T: Scalar>(req: &EditRequest, model: &TcveModel<T>) -> Result<PixelVideo> {
    req.validate()?;
    let z_t = invert_source(model, &req.source_video, &req.source_prompt, req.ddim_steps)?;
    sample_from(model, &z_t, &req.edited_prompt, req.guidance_scale, req.ddim_steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub steps: usize,
    pub relative_latent_error: f64,
    pub pixel_mae: f64,
}

/// Inversion then sampling under one prompt at guidance 1.
pub fn reconstruct_video<T: Scalar>(
    video: &PixelVideo,
    prompt: &str,
    model: &TcveModel<T>,
    steps: usize,
) -> Result<(PixelVideo, ReconstructionReport)> {
    if steps == 0 {
        return Err(invalid("ddim_steps must be at least 1"));
    }
    let z0: Tensor<T> = encode_video(video)?;
    let z_t = invert_source(model, video, prompt, steps)?;
    let p = encode_text(prompt, model.config.spatial.text_dim);
    let guidance = GuidanceConfig::disabled(model.config.spatial.text_dim);
    let back = ddim_sample(&z_t, &model.predictor(), &p, &guidance, &schedule(model, steps)?)?;
    let out = decode_video(&back)?;
    let report = ReconstructionReport {
        steps,
        relative_latent_error: relative_l2(&back, &z0),
        pixel_mae: out.mean_abs_diff(video)?,
    };
    Ok((out, report))
}

/// `‖a − b‖ / ‖b‖`.
pub fn relative_l2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let (mut err, mut norm) = (0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        err += (x - y) * (x - y);
        norm += y * y;
    }
    (err / norm).sqrt()
}
