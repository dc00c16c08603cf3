use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Pixel-space video `[b, 3, f, h, w]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVideo {
    shape: [usize; 5],
    data: Vec<f32>,
}

impl PixelVideo {
    pub fn new(shape: [usize; 5], data: Vec<f32>) -> Result<Self> {
        if shape[1] != 3 {
            return Err(shape_err("pixel_video", format!("expected 3 color channels, got {}", shape[1])));
        }
        if shape.contains(&0) {
            return Err(invalid(format!("pixel video extents must be positive, got {shape:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err(
                "pixel_video",
                format!("shape {shape:?} does not hold {} values", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { shape, data })
    }

    /// Single-clip video from `frames[f][3·h·w]` (channel-major per frame).
    pub fn from_frames(frames: &[Vec<f32>], h: usize, w: usize) -> Result<Self> {
        let f = frames.len();
        if f == 0 {
            return Err(invalid("video needs at least one frame"));
        }
        let plane = h * w;
        let mut data = vec![0.0; 3 * f * plane];
        for (fi, frame) in frames.iter().enumerate() {
            if frame.len() != 3 * plane {
                return Err(shape_err("pixel_video", format!("frame {fi} has {} values, expected {}", frame.len(), 3 * plane)));
            }
            for c in 0..3 {
                let dst = (c * f + fi) * plane;
                data[dst..dst + plane].copy_from_slice(&frame[c * plane..(c + 1) * plane]);
            }
        }
        Self::new([1, 3, f, h, w], data)
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.shape[2]
    }

    pub fn height(&self) -> usize {
        self.shape[3]
    }

    pub fn width(&self) -> usize {
        self.shape[4]
    }

    /// Frame `fi` of clip `bi` as `[3·h·w]`, channel-major.
    pub fn frame(&self, bi: usize, fi: usize) -> Vec<f32> {
        let [_, c, f, h, w] = self.shape;
        let plane = h * w;
        let mut out = Vec::with_capacity(c * plane);
        for ch in 0..c {
            let start = ((bi * c + ch) * f + fi) * plane;
            out.extend_from_slice(&self.data[start..start + plane]);
        }
        out
    }

    /// Reorders frames: output frame `i` is input frame `order[i]`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Self> {
        let [b, c, f, h, w] = self.shape;
        let mut seen = vec![false; f];
        if order.len() != f || order.iter().any(|&o| o >= f || std::mem::replace(&mut seen[o], true)) {
            return Err(invalid(format!("{order:?} is not a permutation of {f} frames")));
        }
        let plane = h * w;
        let mut data = vec![0.0; self.data.len()];
        for bc in 0..b * c {
            for (i, &src) in order.iter().enumerate() {
                let (d, s) = ((bc * f + i) * plane, (bc * f + src) * plane);
                data[d..d + plane].copy_from_slice(&self.data[s..s + plane]);
            }
        }
        Self::new(self.shape, data)
    }

    pub fn mean_abs_diff(&self, other: &PixelVideo) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err("pixel_mae", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let total: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
        Ok(total / self.data.len() as f64)
    }
}

const FACTOR: usize = 2;

/// Stand-in encoder: `[0, 1] → [−1, 1]`, then space-to-depth by 2,
/// `(b, 3, f, h, w) → (b, 12, f, h/2, w/2)`. The affine map is evaluated
/// in f64, so the inverse is exact whenever `T` is `f64`.
pub fn encode_video<T: Scalar>(video: &PixelVideo) -> Result<Tensor<T>> {
    let [b, c, f, h, w] = video.shape;
    if h % FACTOR != 0 || w % FACTOR != 0 {
        return Err(shape_err(
            "encode_video",
            format!("height and width must be even, got {h}×{w}"),
        ));
    }
    let (hl, wl) = (h / FACTOR, w / FACTOR);
    let cl = c * FACTOR * FACTOR;
    let mut out = vec![T::zero(); video.data.len()];
    for bi in 0..b {
        for ch in 0..c {
            for fi in 0..f {
                for y in 0..h {
                    for x in 0..w {
                        let v = video.data[(((bi * c + ch) * f + fi) * h + y) * w + x] as f64;
                        let lc = ch * FACTOR * FACTOR + (y % FACTOR) * FACTOR + x % FACTOR;
                        let dst = (((bi * cl + lc) * f + fi) * hl + y / FACTOR) * wl + x / FACTOR;
                        out[dst] = T::from_f64_lossy(v * 2.0 - 1.0);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, cl, f, hl, wl], out)
}

/// Inverse of [`encode_video`]: depth-to-space, inverse affine, clamp to `[0, 1]`.
pub fn decode_video<T: Scalar>(z: &Tensor<T>) -> Result<PixelVideo> {
    z.expect_rank("decode_video", 5)?;
    let (b, cl, f, hl, wl) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3], z.shape()[4]);
    let block = FACTOR * FACTOR;
    if cl != 3 * block {
        return Err(shape_err(
            "decode_video",
            format!("latent must carry {} channels, got {cl}", 3 * block),
        ));
    }
    let (h, w) = (hl * FACTOR, wl * FACTOR);
    let src = z.data();
    let mut data = vec![0.0f32; src.len()];
    for bi in 0..b {
        for ch in 0..3 {
            for fi in 0..f {
                for y in 0..h {
                    for x in 0..w {
                        let lc = ch * block + (y % FACTOR) * FACTOR + x % FACTOR;
                        let s = (((bi * cl + lc) * f + fi) * hl + y / FACTOR) * wl + x / FACTOR;
                        let v = (src[s].to_f64_lossy() + 1.0) * 0.5;
                        data[(((bi * 3 + ch) * f + fi) * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }
    PixelVideo::new([b, 3, f, h, w], data)
}
