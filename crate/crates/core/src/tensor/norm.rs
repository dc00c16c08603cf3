use super::{Scalar, Tensor};
use crate::error::{invalid, shape_err, Result};

const GROUP_NORM_EPS: f64 = 1e-6;

/// Group normalization over `x[N, C, ...]` followed by a per-channel affine.
pub fn group_norm<T: Scalar>(x: &Tensor<T>, groups: usize, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(shape_err("group_norm", format!("expected [N, C, ...], got {:?}", x.shape())));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if groups == 0 || c % groups != 0 {
        return Err(invalid(format!("group_norm: {c} channels not divisible into {groups} groups")));
    }
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(shape_err(
            "group_norm",
            format!("affine parameters must be [{c}], got {:?} and {:?}", gain.shape(), bias.shape()),
        ));
    }
    let spatial: usize = x.shape()[2..].iter().product();
    let per_group = c / groups;
    let group_len = per_group * spatial;
    let eps = T::from_f64_lossy(GROUP_NORM_EPS);
    let count = T::from_usize(group_len).unwrap();

    let src = x.data();
    let (gd, bd) = (gain.data(), bias.data());
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); n * groups];
    let mut out = vec![T::zero(); x.numel()];
    for s in 0..n {
        for g in 0..groups {
            let start = (s * c + g * per_group) * spatial;
            let slice = &src[start..start + group_len];
            let mean = slice.iter().copied().sum::<T>() / count;
            let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[s * groups + g] = istd;
            for (i, &v) in slice.iter().enumerate() {
                let ch = g * per_group + i / spatial;
                let h = (v - mean) * istd;
                xhat[start + i] = h;
                out[start + i] = h * gd[ch] + bd[ch];
            }
        }
    }

    let gain_data = gain.shared_data();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |g, needs| {
            let mut gx = needs[0].then(|| vec![T::zero(); xhat.len()]);
            let mut ggain = vec![T::zero(); c];
            let mut gbias = vec![T::zero(); c];
            for s in 0..n {
                for grp in 0..groups {
                    let start = (s * c + grp * per_group) * spatial;
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for i in 0..group_len {
                        let ch = grp * per_group + i / spatial;
                        let gi = g[start + i];
                        let h = xhat[start + i];
                        ggain[ch] = ggain[ch] + gi * h;
                        gbias[ch] = gbias[ch] + gi;
                        let d = gi * gain_data[ch];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * h;
                    }
                    if let Some(gx) = gx.as_mut() {
                        mean_d = mean_d / count;
                        mean_dx = mean_dx / count;
                        let istd = inv_std[s * groups + grp];
                        for i in 0..group_len {
                            let ch = grp * per_group + i / spatial;
                            let d = g[start + i] * gain_data[ch];
                            gx[start + i] = istd * (d - mean_d - xhat[start + i] * mean_dx);
                        }
                    }
                }
            }
            vec![gx, needs[1].then_some(ggain), needs[2].then_some(gbias)]
        }),
    ))
}

/// `y = x · wᵀ + b` over the trailing axis of `x[..., in]` with `w[out, in]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.rank() == 0 {
        return Err(shape_err(
            "linear",
            format!("expected x[..., in] and w[out, in], got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    if *x.shape().last().unwrap() != in_f {
        return Err(shape_err(
            "linear",
            format!("input features {} do not match weight {:?}", x.shape().last().unwrap(), w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [out_f] {
            return Err(shape_err("linear", format!("bias must be [{out_f}], got {:?}", b.shape())));
        }
    }
    let rows = x.numel() / in_f;
    let mut out = vec![T::zero(); rows * out_f];
    T::gemm(rows, in_f, out_f, x.data(), (in_f, 1), w.data(), (1, in_f), &mut out, false);
    if let Some(b) = b {
        for row in out.chunks_mut(out_f) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v = *v + bv);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (x_data, w_data) = (x.shared_data(), w.shared_data());
    Ok(Tensor::from_op(
        shape,
        out,
        parents,
        Box::new(move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![T::zero(); rows * in_f];
                T::gemm(rows, out_f, in_f, g, (out_f, 1), &w_data, (in_f, 1), &mut gx, false);
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![T::zero(); out_f * in_f];
                T::gemm(out_f, rows, in_f, g, (1, out_f), &x_data, (in_f, 1), &mut gw, false);
                gw
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![T::zero(); out_f];
                    for row in g.chunks(out_f) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    gb
                }));
            }
            grads
        }),
    ))
}
