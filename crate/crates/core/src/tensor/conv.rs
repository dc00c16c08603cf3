use super::{numel, Scalar, Tensor};
use crate::error::{invalid, shape_err, Result};

const UNUSED: usize = usize::MAX;

/// Geometry of an N-d convolution lowered to a matrix product.
struct Lowering {
    out_spatial: Vec<usize>,
    /// `gather[kk * positions + p]` is the flat input offset read by kernel
    /// tap `kk` at output position `p`, or `UNUSED` inside the zero padding.
    gather: Vec<usize>,
    taps: usize,
    positions: usize,
}

impl Lowering {
    fn new(
        op: &'static str,
        in_spatial: &[usize],
        kernel: &[usize],
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Self> {
        let rank = in_spatial.len();
        let mut out_spatial = Vec::with_capacity(rank);
        for d in 0..rank {
            if stride[d] == 0 {
                return Err(invalid(format!("{op}: stride must be >= 1 on spatial axis {d}")));
            }
            let padded = in_spatial[d] + 2 * pad[d];
            if kernel[d] > padded {
                return Err(shape_err(
                    op,
                    format!(
                        "spatial axis {d}: kernel {} exceeds padded input {} (extent {}, pad {})",
                        kernel[d], padded, in_spatial[d], pad[d]
                    ),
                ));
            }
            out_spatial.push((padded - kernel[d]) / stride[d] + 1);
        }
        let taps = numel(kernel);
        let positions = numel(&out_spatial);

        // per-axis source index, or None in the padding
        let axis_tables: Vec<Vec<Option<usize>>> = (0..rank)
            .map(|d| {
                let mut tab = Vec::with_capacity(kernel[d] * out_spatial[d]);
                for k in 0..kernel[d] {
                    for p in 0..out_spatial[d] {
                        let src = (p * stride[d] + k) as isize - pad[d] as isize;
                        tab.push((src >= 0 && (src as usize) < in_spatial[d]).then_some(src as usize));
                    }
                }
                tab
            })
            .collect();

        let in_strides = super::strides_of(in_spatial);
        let mut gather = vec![UNUSED; taps * positions];
        let mut kidx = vec![0usize; rank];
        for kk in 0..taps {
            let mut pidx = vec![0usize; rank];
            for p in 0..positions {
                let mut offset = 0;
                let mut valid = true;
                for d in 0..rank {
                    match axis_tables[d][kidx[d] * out_spatial[d] + pidx[d]] {
                        Some(s) => offset += s * in_strides[d],
                        None => {
                            valid = false;
                            break;
                        }
                    }
                }
                if valid {
                    gather[kk * positions + p] = offset;
                }
                increment(&mut pidx, &out_spatial);
            }
            increment(&mut kidx, kernel);
        }
        Ok(Self {
            out_spatial,
            gather,
            taps,
            positions,
        })
    }

    fn im2col<T: Scalar>(&self, x: &[T], channels: usize, in_size: usize, col: &mut [T]) {
        for c in 0..channels {
            let src = &x[c * in_size..(c + 1) * in_size];
            let rows = &mut col[c * self.taps * self.positions..(c + 1) * self.taps * self.positions];
            for (dst, &g) in rows.iter_mut().zip(&self.gather) {
                *dst = if g == UNUSED { T::zero() } else { src[g] };
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], channels: usize, in_size: usize, gx: &mut [T]) {
        for c in 0..channels {
            let dst = &mut gx[c * in_size..(c + 1) * in_size];
            let rows = &col[c * self.taps * self.positions..(c + 1) * self.taps * self.positions];
            for (&v, &g) in rows.iter().zip(&self.gather) {
                if g != UNUSED {
                    dst[g] = dst[g] + v;
                }
            }
        }
    }
}

fn increment(idx: &mut [usize], extents: &[usize]) {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < extents[d] {
            return;
        }
        idx[d] = 0;
    }
}

/// Cross-correlation over `x[N, C, S...]` with `w[O, C, K...]` and optional
/// bias `b[O]`. `stride` and `pad` hold one entry per spatial axis; padding
/// is symmetric and zero-filled.
pub fn conv_nd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: &[usize],
    pad: &[usize],
) -> Result<Tensor<T>> {
    let op = match x.rank() {
        3 => "conv1d",
        4 => "conv2d",
        5 => "conv3d",
        _ => "conv",
    };
    let rank = x.rank().checked_sub(2).filter(|&r| r >= 1).ok_or_else(|| {
        shape_err(op, format!("input must be [N, C, spatial...], got {:?}", x.shape()))
    })?;
    if w.rank() != rank + 2 {
        return Err(shape_err(
            op,
            format!("weight rank {} does not match input rank {}", w.rank(), x.rank()),
        ));
    }
    if stride.len() != rank || pad.len() != rank {
        return Err(invalid(format!("{op}: stride/pad need {rank} entries")));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let (o, wc) = (w.shape()[0], w.shape()[1]);
    if wc != c {
        return Err(shape_err(
            op,
            format!("channel dimension: input has {c} channels, weight expects {wc}"),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(shape_err(op, format!("bias must be [{o}], got {:?}", b.shape())));
        }
    }
    let in_spatial = x.shape()[2..].to_vec();
    let kernel = w.shape()[2..].to_vec();
    let lw = Lowering::new(op, &in_spatial, &kernel, stride, pad)?;
    let in_size = numel(&in_spatial);
    let ckk = c * lw.taps;
    let p = lw.positions;

    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); n * o * p];
    let mut col = vec![T::zero(); ckk * p];
    for s in 0..n {
        lw.im2col(&xd[s * c * in_size..(s + 1) * c * in_size], c, in_size, &mut col);
        let dst = &mut out[s * o * p..(s + 1) * o * p];
        T::gemm(o, ckk, p, wd, (ckk, 1), &col, (p, 1), dst, false);
        if let Some(b) = b {
            for (row, &bv) in dst.chunks_mut(p).zip(b.data()) {
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }

    let mut shape = vec![n, o];
    shape.extend(&lw.out_spatial);
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (x_data, w_data) = (x.shared_data(), w.shared_data());
    let w_len = w.numel();
    Ok(Tensor::from_op(
        shape,
        out,
        parents,
        Box::new(move |g, needs| {
            let mut gx = needs[0].then(|| vec![T::zero(); n * c * in_size]);
            let mut gw = needs[1].then(|| vec![T::zero(); w_len]);
            let mut gb = needs.get(2).copied().unwrap_or(false).then(|| vec![T::zero(); o]);
            let mut col = vec![T::zero(); ckk * p];
            for s in 0..n {
                let gs = &g[s * o * p..(s + 1) * o * p];
                if let Some(gw) = gw.as_mut() {
                    lw.im2col(&x_data[s * c * in_size..(s + 1) * c * in_size], c, in_size, &mut col);
                    // dW += dOut · colᵀ
                    T::gemm(o, p, ckk, gs, (p, 1), &col, (1, p), gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    // dcol = Wᵀ · dOut
                    T::gemm(ckk, o, p, &w_data, (1, ckk), gs, (p, 1), &mut col, false);
                    lw.col2im(&col, c, in_size, &mut gx[s * c * in_size..(s + 1) * c * in_size]);
                }
                if let Some(gb) = gb.as_mut() {
                    for (acc, row) in gb.iter_mut().zip(gs.chunks(p)) {
                        *acc = *acc + row.iter().copied().sum();
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(gb);
            }
            grads
        }),
    ))
}

/// `x[N, C, L]` with `w[C', C, k]`.
pub fn conv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    x.expect_rank("conv1d", 3)?;
    conv_nd(x, w, b, &[stride], &[pad])
}

/// `x[N, C, H, W]` with `w[C', C, kh, kw]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    x.expect_rank("conv2d", 4)?;
    conv_nd(x, w, b, &[stride; 2], &[pad; 2])
}

/// `x[N, C, D, H, W]` with `w[C', C, kd, kh, kw]`.
pub fn conv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    x.expect_rank("conv3d", 5)?;
    conv_nd(x, w, b, &[stride; 3], &[pad; 3])
}
