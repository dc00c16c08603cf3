use super::{Scalar, Tensor};
use crate::error::{invalid, Result};

/// Source taps `(lo, hi, frac)` of linear interpolation with half-pixel
/// centers (align-corners = false), clamped at the borders.
fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Linear resize of one axis to `new_len`. Same length is the identity.
pub fn resize_linear_axis<T: Scalar>(x: &Tensor<T>, axis: usize, new_len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(invalid(format!("resize: axis {axis} out of range for {:?}", x.shape())));
    }
    if new_len == 0 {
        return Err(invalid("resize: target extent must be >= 1"));
    }
    let in_len = x.shape()[axis];
    if in_len == new_len {
        return Ok(x.clone());
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let taps: Vec<(usize, usize, T, T)> = linear_taps(in_len, new_len)
        .into_iter()
        .map(|(lo, hi, f)| (lo, hi, T::from_f64_lossy(1.0 - f), T::from_f64_lossy(f)))
        .collect();

    let src = x.data();
    let mut out = vec![T::zero(); outer * new_len * inner];
    for o in 0..outer {
        for (j, &(lo, hi, wl, wh)) in taps.iter().enumerate() {
            let dst = (o * new_len + j) * inner;
            let a = (o * in_len + lo) * inner;
            let b = (o * in_len + hi) * inner;
            for i in 0..inner {
                out[dst + i] = src[a + i] * wl + src[b + i] * wh;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = new_len;
    let n = x.numel();
    Ok(Tensor::from_op(
        shape,
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n];
            for o in 0..outer {
                for (j, &(lo, hi, wl, wh)) in taps.iter().enumerate() {
                    let src = (o * new_len + j) * inner;
                    let a = (o * in_len + lo) * inner;
                    let b = (o * in_len + hi) * inner;
                    for i in 0..inner {
                        gx[a + i] = gx[a + i] + g[src + i] * wl;
                        gx[b + i] = gx[b + i] + g[src + i] * wh;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Trilinear resize of `x[N, C, D, H, W]` (separable, align-corners = false).
pub fn resize_trilinear<T: Scalar>(x: &Tensor<T>, d: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    x.expect_rank("resize_trilinear", 5)?;
    if d == 0 || h == 0 || w == 0 {
        return Err(invalid(format!("resize_trilinear: zero target extent in ({d}, {h}, {w})")));
    }
    let y = resize_linear_axis(x, 2, d)?;
    let y = resize_linear_axis(&y, 3, h)?;
    resize_linear_axis(&y, 4, w)
}

/// Repeats every slice along `axis` `factor` times (nearest-neighbour upsampling).
pub fn repeat_interleave<T: Scalar>(x: &Tensor<T>, axis: usize, factor: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || factor == 0 {
        return Err(invalid(format!(
            "repeat_interleave: axis {axis} / factor {factor} invalid for {:?}",
            x.shape()
        )));
    }
    let len = x.shape()[axis];
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let src = x.data();
    let mut out = Vec::with_capacity(x.numel() * factor);
    for o in 0..outer {
        for j in 0..len {
            let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len * factor;
    let n = x.numel();
    Ok(Tensor::from_op(
        shape,
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n];
            for o in 0..outer {
                for j in 0..len {
                    let dst = (o * len + j) * inner;
                    for r in 0..factor {
                        let s = ((o * len + j) * factor + r) * inner;
                        for i in 0..inner {
                            gx[dst + i] = gx[dst + i] + g[s + i];
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_pixel_downsample_case() {
        let x = Tensor::<f64>::from_f64(&[1, 3], &[0., 3., 6.]).unwrap();
        let y = resize_linear_axis(&x, 1, 2).unwrap().to_vec();
        assert!((y[0] - 0.75).abs() < 1e-12 && (y[1] - 5.25).abs() < 1e-12, "{y:?}");
    }

    #[test]
    fn same_size_is_bitwise_identity() {
        let vals: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| (i as f64 * 0.37).cos()).collect();
        let x = Tensor::<f64>::from_f64(&[1, 2, 3, 4, 5], &vals).unwrap();
        assert_eq!(resize_trilinear(&x, 3, 4, 5).unwrap().to_vec(), vals);
    }

    #[test]
    fn constants_stay_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 4, 4], 0.625);
        for (d, h, w) in [(1, 1, 1), (6, 8, 2), (3, 3, 7)] {
            let y = resize_trilinear(&x, d, h, w).unwrap();
            assert_eq!(y.shape(), &[1, 2, d, h, w]);
            assert!(y.data().iter().all(|&v| v == 0.625));
        }
    }

    #[test]
    fn zero_extent_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        assert!(resize_trilinear(&x, 0, 2, 2).is_err());
    }

    #[test]
    fn nearest_doubling() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let y = repeat_interleave(&x, 2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![1., 1., 2., 2., 3., 3., 4., 4.]);
        let y = repeat_interleave(&x, 1, 2).unwrap();
        assert_eq!(y.to_vec(), vec![1., 2., 1., 2., 3., 4., 3., 4.]);
    }
}
