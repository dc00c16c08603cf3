//! The bundled 8-frame 16×16 clip used by the tests and examples.

use crate::stubs::PixelVideo;

pub const TOY_FRAMES: usize = 8;
pub const TOY_SIZE: usize = 16;
pub const TOY_PROMPT: &str = "a red ball rolling across a blue floor";

/// A soft red disk moving left to right over a vertical blue-green
/// gradient. Values sit on 8-bit levels, so the clip survives PPM exactly.
pub fn toy_video() -> PixelVideo {
    moving_disk(TOY_FRAMES, TOY_SIZE, TOY_SIZE, 0.0)
}

/// Variant of [`toy_video`] with a different start phase, for corpora.
pub fn moving_disk(frames: usize, h: usize, w: usize, phase: f64) -> PixelVideo {
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let progress = (f as f64 + phase) / frames.max(1) as f64;
        let cx = 3.0 + progress * (w as f64 - 6.0);
        let cy = h as f64 / 2.0 + 2.0 * (std::f64::consts::TAU * progress).sin();
        let radius = w as f64 / 5.0;
        let mut frame = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                let disk = (1.0 - (d - radius).max(0.0) / 1.5).clamp(0.0, 1.0);
                let grad = y as f64 / (h.max(2) - 1) as f64;
                let bg = [0.1, 0.25 + 0.3 * grad, 0.8 - 0.3 * grad];
                let fg = [0.9, 0.15, 0.1];
                for c in 0..3 {
                    let v = bg[c] * (1.0 - disk) + fg[c] * disk;
                    frame[(c * h + y) * w + x] = ((v * 255.0).round() / 255.0) as f32;
                }
            }
        }
        out.push(frame);
    }
    PixelVideo::from_frames(&out, h, w).expect("valid toy clip")
}
