use super::{numel, strides_of, Scalar, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Calls `f(out_index, offset_a, offset_b)` for every element of `shape`
/// in row-major order, where the offsets follow the given strides.
fn visit2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let total = numel(shape);
    let last = shape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut out = 0;
    while out < total {
        for j in 0..last {
            f(out + j, oa + j * la, ob + j * lb);
        }
        out += last;
        // advance the odometer over all but the last axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            oa -= sa[axis] * shape[axis];
            ob -= sb[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(shape_err(
                    op,
                    format!("cannot broadcast {a:?} with {b:?} (dimension {i}: {da} vs {db})"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

fn binary<T: Scalar>(op: Binary, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let name = match op {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
    };
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); numel(&out_shape)];
    if a.shape() == b.shape() {
        for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
            *o = apply(op, x, y);
        }
    } else {
        visit2(&out_shape, &sa, &sb, |i, ia, ib| out[i] = apply(op, ad[ia], bd[ib]));
    }

    let (a_data, b_data) = (a.shared_data(), b.shared_data());
    let (na, nb) = (a.numel(), b.numel());
    let shape_for_bw = out_shape.clone();
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            let mut ga = needs[0].then(|| vec![T::zero(); na]);
            let mut gb = needs[1].then(|| vec![T::zero(); nb]);
            visit2(&shape_for_bw, &sa, &sb, |i, ia, ib| {
                let gi = g[i];
                let (da, db) = match op {
                    Binary::Add => (gi, gi),
                    Binary::Sub => (gi, -gi),
                    Binary::Mul => (gi * b_data[ib], gi * a_data[ia]),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] = ga[ia] + da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] = gb[ib] + db;
                }
            });
            vec![ga, gb]
        }),
    ))
}

#[inline]
fn apply<T: Scalar>(op: Binary, x: T, y: T) -> T {
    match op {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
    }
}

/// Elementwise map with a derivative expressed through input and output.
fn unary<T: Scalar>(
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let xin = x.shared_data();
    let yout = std::sync::Arc::new(out.clone());
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let gx = g
                .iter()
                .zip(xin.iter().zip(yout.iter()))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![Some(gx)]
        }),
    )
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(Binary::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(Binary::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(Binary::Mul, self, other)
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        let s = T::from_f64_lossy(s);
        unary(self, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64_lossy(c);
        unary(self, move |v| v + c, |_, _| T::one())
    }

    pub fn square(&self) -> Tensor<T> {
        let two = T::from_f64_lossy(2.0);
        unary(self, |v| v * v, move |x, _| two * x)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(self, sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        unary(
            self,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Row-major reinterpretation sharing the same buffer.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} ({} values) as {shape:?}", self.shape(), self.numel()),
            ));
        }
        if shape.contains(&0) {
            return Err(invalid(format!("reshape: zero extent in {shape:?}")));
        }
        Ok(Tensor::view_op(
            shape.to_vec(),
            self.shared_data(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes; `order[i]` names the source axis of output axis `i`.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if order.len() != rank || order.iter().any(|&o| o >= rank || std::mem::replace(&mut seen[o], true)) {
            return Err(invalid(format!("permute: {order:?} is not a permutation of rank {rank}")));
        }
        let in_strides = strides_of(self.shape());
        let out_shape: Vec<usize> = order.iter().map(|&o| self.shape()[o]).collect();
        let src_strides: Vec<usize> = order.iter().map(|&o| in_strides[o]).collect();
        let zero = vec![0; rank];
        let src = self.data();
        let mut out = vec![T::zero(); self.numel()];
        visit2(&out_shape, &src_strides, &zero, |i, s, _| out[i] = src[s]);

        let n = self.numel();
        let bw_shape = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); n];
                visit2(&bw_shape, &src_strides, &zero, |i, s, _| gx[s] = g[i]);
                vec![Some(gx)]
            }),
        ))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(shape_err("transpose", format!("needs rank >= 2, got {:?}", self.shape())));
        }
        let mut order: Vec<usize> = (0..rank).collect();
        order.swap(rank - 2, rank - 1);
        self.permute(&order)
    }
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| invalid("concat: no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(invalid(format!("concat: axis {axis} out of range for rank {rank}")));
    }
    for p in parts {
        let ok = p.rank() == rank && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
        if !ok {
            return Err(shape_err(
                "concat",
                format!("{:?} incompatible with {:?} along axis {axis}", p.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let chunks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let row: usize = chunks.iter().sum();

    let mut out = Vec::with_capacity(outer * row);
    for o in 0..outer {
        for (p, &c) in parts.iter().zip(&chunks) {
            out.extend_from_slice(&p.data()[o * c..(o + 1) * c]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();

    Ok(Tensor::from_op(
        shape,
        out,
        parts.to_vec(),
        Box::new(move |g, needs| {
            let mut start = 0;
            chunks
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let offset = start;
                    start += c;
                    need.then(|| {
                        let mut gp = Vec::with_capacity(outer * c);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * row + offset..o * row + offset + c]);
                        }
                        gp
                    })
                })
                .collect()
        }),
    ))
}

/// Batched matrix product `[..., M, K] · [..., K, N]` with broadcast batch axes.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(shape_err(
            "matmul",
            format!("operands need rank >= 2, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("inner extents differ: {:?} · {:?} ({k} vs {k2})", a.shape(), b.shape()),
        ));
    }
    let (ba, bb) = (&a.shape()[..ra - 2], &b.shape()[..rb - 2]);
    let batch = broadcast_shape("matmul", ba, bb)?;
    let sa = broadcast_strides(ba, &batch);
    let sb = broadcast_strides(bb, &batch);
    let mut pairs = Vec::with_capacity(numel(&batch));
    visit2(&batch, &sa, &sb, |_, ia, ib| pairs.push((ia, ib)));

    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); pairs.len() * m * n];
    for (i, &(ia, ib)) in pairs.iter().enumerate() {
        T::gemm(
            m,
            k,
            n,
            &ad[ia * m * k..],
            (k, 1),
            &bd[ib * k * n..],
            (n, 1),
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    let mut shape = batch;
    shape.extend([m, n]);

    let (a_data, b_data) = (a.shared_data(), b.shared_data());
    let (na, nb) = (a.numel(), b.numel());
    Ok(Tensor::from_op(
        shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            let mut ga = needs[0].then(|| vec![T::zero(); na]);
            let mut gb = needs[1].then(|| vec![T::zero(); nb]);
            for (i, &(ia, ib)) in pairs.iter().enumerate() {
                let gi = &g[i * m * n..(i + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    // dA = dC · Bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        gi,
                        (n, 1),
                        &b_data[ib * k * n..],
                        (1, n),
                        &mut ga[ia * m * k..(ia + 1) * m * k],
                        true,
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    // dB = Aᵀ · dC
                    T::gemm(
                        k,
                        m,
                        n,
                        &a_data[ia * m * k..],
                        (1, k),
                        gi,
                        (n, 1),
                        &mut gb[ib * k * n..(ib + 1) * k * n],
                        true,
                    );
                }
            }
            vec![ga, gb]
        }),
    ))
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(invalid(format!("softmax: axis {axis} out of range for shape {:?}", x.shape())));
    }
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len).map(|j| src[base + j * inner]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total = total + e;
            }
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] / total;
            }
        }
    }
    let y = std::sync::Arc::new(out.clone());
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: T = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..len {
                        let at = base + j * inner;
                        gx[at] = y[at] * (g[at] - dot);
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

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn broadcast_add_over_channels() {
        let x = t(&[2, 3, 2], &[0.; 12]);
        let b = t(&[3, 1], &[1., 2., 3.]);
        let y = x.add(&b).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        assert_eq!(y.to_vec(), vec![1., 1., 2., 2., 3., 3., 1., 1., 2., 2., 3., 3.]);
    }

    #[test]
    fn broadcast_mismatch_names_dimension() {
        let err = t(&[2, 3], &[0.; 6]).add(&t(&[4], &[0.; 4])).unwrap_err();
        assert!(err.to_string().contains("dimension 1"), "{err}");
    }

    #[test]
    fn broadcast_grad_reduces() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]).requires_grad();
        let b = t(&[3], &[1., 1., 1.]).requires_grad();
        x.mul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![5., 7., 9.]);
        assert_eq!(x.grad().unwrap(), vec![1.; 6]);
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let v = t(&[3, 1], &[4., -5., 6.]);
        assert_eq!(matmul(&eye, &v).unwrap().to_vec(), vec![4., -5., 6.]);

        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let ones = t(&[2, 1], &[1., 1.]);
        let c = matmul(&a, &ones).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.to_vec(), vec![3., 7.]);
    }

    #[test]
    fn matmul_inner_mismatch_rejected() {
        assert!(matmul(&t(&[2, 3], &[0.; 6]), &t(&[2, 2], &[0.; 4])).is_err());
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let a = t(&[2, 1, 2], &[1., 0., 0., 1.]);
        let b = t(&[2, 1], &[3., 4.]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.to_vec(), vec![3., 4.]);
    }

    #[test]
    fn softmax_known_values() {
        let y = softmax(&t(&[2], &[1., -1.]), 0).unwrap().to_vec();
        assert!((y[0] - 0.880797).abs() < 5e-7);
        assert!((y[1] - 0.119203).abs() < 5e-7);

        let c = softmax(&t(&[1, 4], &[3.; 4]), 1).unwrap().to_vec();
        assert!(c.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        assert!(softmax(&t(&[2], &[0., 0.]), 1).is_err());
    }

    #[test]
    fn reshape_preserves_sequence() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let y = x.reshape(&[3, 2]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), x.to_vec());
        assert!(x.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn permute_validation() {
        let x = t(&[2, 3], &[0.; 6]);
        assert!(x.permute(&[0, 0]).is_err());
        assert!(x.permute(&[0]).is_err());
        assert!(x.permute(&[2, 0]).is_err());
    }

    #[test]
    fn permute_moves_elements() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn concat_and_split_grad() {
        let a = t(&[2, 1], &[1., 2.]).requires_grad();
        let b = t(&[2, 2], &[3., 4., 5., 6.]).requires_grad();
        let c = concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.to_vec(), vec![1., 3., 4., 2., 5., 6.]);
        let w = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        c.mul(&w).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1., 4.]);
        assert_eq!(b.grad().unwrap(), vec![2., 3., 5., 6.]);
    }

    #[test]
    fn silu_at_zero() {
        assert_eq!(t(&[1], &[0.]).silu().to_vec(), vec![0.]);
    }
}
