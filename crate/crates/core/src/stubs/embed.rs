use crate::error::{shape_err, Result};
use crate::rng::RngState;
use crate::tensor::{resize_trilinear, Tensor};

/// Output width of [`embed_frame`].
pub const FRAME_EMBED_DIM: usize = 64;
const GRID: usize = 16;
const PROJ_SEED: u64 = 0x6672_616d_655f_656d;
const BIAS_STD: f64 = 1e-3;

struct Projection {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

fn projection() -> &'static Projection {
    static PROJ: std::sync::OnceLock<Projection> = std::sync::OnceLock::new();
    PROJ.get_or_init(|| {
        let rng = RngState::new(PROJ_SEED);
        let inputs = GRID * GRID;
        Projection {
            weight: rng.split(0).normal_vec(FRAME_EMBED_DIM * inputs, 1.0 / (inputs as f64).sqrt()),
            // keeps a uniform mid-gray frame away from the zero vector
            bias: rng.split(1).normal_vec(FRAME_EMBED_DIM, BIAS_STD),
        }
    })
}

/// Stand-in image embedder for the metrics: bilinear resize to 16×16,
/// luma mapped to `[−1, 1]`, fixed random projection to 64 dims, unit norm.
///
/// `frame` is channel-major `[3, h, w]`.
pub fn embed_frame(frame: &[f32], h: usize, w: usize) -> Result<Vec<f64>> {
    if h == 0 || w == 0 || frame.len() != 3 * h * w {
        return Err(shape_err(
            "embed_frame",
            format!("expected 3×{h}×{w} values, got {}", frame.len()),
        ));
    }
    let plane = h * w;
    let luma: Vec<f64> = (0..plane)
        .map(|i| 0.299 * frame[i] as f64 + 0.587 * frame[plane + i] as f64 + 0.114 * frame[2 * plane + i] as f64)
        .collect();
    let small = resize_trilinear(&Tensor::<f64>::from_vec(&[1, 1, 1, h, w], luma)?, 1, GRID, GRID)?;
    let x: Vec<f64> = small.data().iter().map(|g| 2.0 * g - 1.0).collect();
    let proj = projection();
    let mut out: Vec<f64> = proj
        .weight
        .chunks(x.len())
        .zip(&proj.bias)
        .map(|(row, b)| row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect();
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    out.iter_mut().for_each(|v| *v /= norm);
    Ok(out)
}

/// Cosine similarity; exactly 1 for a vector against itself, since
/// `sqrt(x·x)` rounds back to `x`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum();
    let nb: f64 = b.iter().map(|v| v * v).sum();
    dot / (na * nb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_frame(seed: u64, h: usize, w: usize) -> Vec<f32> {
        let mut rng = RngState::new(seed);
        (0..3 * h * w).map(|_| rng.uniform() as f32).collect()
    }

    #[test]
    fn unit_norm() {
        for (seed, h, w) in [(1, 16, 16), (2, 7, 33), (3, 1, 1)] {
            let e = embed_frame(&random_frame(seed, h, w), h, w).unwrap();
            assert_eq!(e.len(), FRAME_EMBED_DIM);
            assert!((e.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
        let gray = embed_frame(&vec![0.5; 3 * 64], 8, 8).unwrap();
        assert!((gray.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_frames_identical_embeddings() {
        let f = random_frame(9, 16, 16);
        assert_eq!(embed_frame(&f, 16, 16).unwrap(), embed_frame(&f.clone(), 16, 16).unwrap());
    }

    #[test]
    fn unrelated_frames_nearly_orthogonal() {
        let trials = 200;
        let mut below = 0;
        for i in 0..trials {
            let a = embed_frame(&random_frame(1000 + 2 * i, 16, 16), 16, 16).unwrap();
            let b = embed_frame(&random_frame(1001 + 2 * i, 16, 16), 16, 16).unwrap();
            if cosine(&a, &b).abs() < 0.5 {
                below += 1;
            }
        }
        assert!(below as f64 / trials as f64 > 0.95, "{below}/{trials}");
    }

    #[test]
    fn bad_length_rejected() {
        assert!(embed_frame(&[0.0; 5], 1, 2).is_err());
    }
}
