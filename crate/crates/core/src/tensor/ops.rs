//! Pure forward kernels. The tape calls into these and adds the backward rules.

use super::{split_axis, Argmax, Tensor};
use crate::error::{Error, Result};

/// Variance floor used inside the square root of [`affine_norm`].
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    Sum,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-major 2-D product. Arguments are (rows, cols) of the logical operands;
/// strides let callers pass transposed views without copying.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices are at least as long as the extents imply for the
    // strides handed in, and `c` does not alias `a` or `b`.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            beta != 0.0,
            a.as_ptr(),
            a_strides.1,
            a_strides.0,
            b.as_ptr(),
            b_strides.1,
            b_strides.0,
            beta,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        &a.data,
        (k as isize, 1),
        &b.data,
        (n as isize, 1),
        &mut out,
        0.0,
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn unary(x: &Tensor, f: Unary) -> Result<Tensor> {
    if f == Unary::Sqrt {
        if let Some((index, &value)) = x.data.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::NegativeSqrt { value, index });
        }
    }
    let g: fn(f64) -> f64 = match f {
        Unary::Relu => |v| v.max(0.0),
        Unary::Sigmoid => sigmoid,
        Unary::Tanh => f64::tanh,
        Unary::Exp => f64::exp,
        Unary::Sqrt => f64::sqrt,
    };
    Ok(x.map(g))
}

/// Output shape of a broadcasting binary op. Ranks must agree; an axis may
/// only be stretched from extent 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape("broadcast", a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape("broadcast", a, b)),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        strides[ax] = if shape[ax] == 1 && out[ax] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[ax];
    }
    strides
}

/// Visits every output position of a broadcast with the matching flat
/// offsets into both operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let Some(outer_rank) = out.len().checked_sub(1) else {
        f(0, 0, 0);
        return;
    };
    let inner = out[outer_rank];
    let (sa_in, sb_in) = (sa[outer_rank], sb[outer_rank]);
    let mut idx = vec![0usize; outer_rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for j in 0..inner {
            f(o + j, ia + j * sa_in, ib + j * sb_in);
        }
        o += inner;
        let mut ax = outer_rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub fn binary(a: &Tensor, b: &Tensor, op: Binary) -> Result<Tensor> {
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let n = shape.iter().product();
    let mut out = vec![0.0; n];
    let (ad, bd) = (&a.data, &b.data);
    match op {
        Binary::Add => for_each_broadcast(&shape, &a.shape, &b.shape, |o, ia, ib| {
            out[o] = ad[ia] + bd[ib]
        }),
        Binary::Sub => for_each_broadcast(&shape, &a.shape, &b.shape, |o, ia, ib| {
            out[o] = ad[ia] - bd[ib]
        }),
        Binary::Mul => for_each_broadcast(&shape, &a.shape, &b.shape, |o, ia, ib| {
            out[o] = ad[ia] * bd[ib]
        }),
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Expands singleton axes of `x` to `shape`.
pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let out = broadcast_shape(&x.shape, shape)?;
    if out != shape {
        return Err(Error::shape("broadcast_to", &x.shape, shape));
    }
    let mut data = vec![0.0; out.iter().product()];
    for_each_broadcast(&out, &x.shape, &out, |o, ix, _| data[o] = x.data[ix]);
    Ok(Tensor::from_parts(out, data))
}

fn removed(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Reduces `axis` away. `Max` also reports which index along the axis won;
/// ties go to the lowest index.
pub fn reduce(x: &Tensor, axis: usize, kind: ReduceKind) -> Result<(Tensor, Option<Argmax>)> {
    let (outer, len, inner) = split_axis(&x.shape, axis)?;
    if len == 0 {
        return Err(Error::EmptyAxis {
            axis,
            shape: x.shape.clone(),
        });
    }
    let shape = removed(&x.shape, axis);
    let mut out = vec![0.0; outer * inner];
    let mut arg = match kind {
        ReduceKind::Max => Some(vec![0usize; outer * inner]),
        _ => None,
    };
    if inner == 1 {
        for (o, row) in x.data.chunks_exact(len).enumerate() {
            let (mut best, mut at) = (row[0], 0);
            for (l, &v) in row.iter().enumerate().skip(1) {
                match kind {
                    ReduceKind::Max if v > best => (best, at) = (v, l),
                    ReduceKind::Max => {}
                    ReduceKind::Mean | ReduceKind::Sum => best += v,
                }
            }
            out[o] = if kind == ReduceKind::Mean {
                best * (1.0 / len as f64)
            } else {
                best
            };
            if let Some(arg) = arg.as_mut() {
                arg[o] = at;
            }
        }
    } else {
        for o in 0..outer {
            let base = o * len * inner;
            let dst = &mut out[o * inner..(o + 1) * inner];
            dst.copy_from_slice(&x.data[base..base + inner]);
            for l in 1..len {
                let src = &x.data[base + l * inner..base + (l + 1) * inner];
                match kind {
                    ReduceKind::Max => {
                        let arg = &mut arg.as_mut().unwrap()[o * inner..(o + 1) * inner];
                        for i in 0..inner {
                            if src[i] > dst[i] {
                                dst[i] = src[i];
                                arg[i] = l;
                            }
                        }
                    }
                    ReduceKind::Mean | ReduceKind::Sum => {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            if kind == ReduceKind::Mean {
                let scale = 1.0 / len as f64;
                dst.iter_mut().for_each(|d| *d *= scale);
            }
        }
    }
    let argmax = arg.map(|index| Argmax {
        shape: shape.clone(),
        index,
    });
    Ok((Tensor::from_parts(shape, out), argmax))
}

/// Stable softmax along `axis` (the per-slice maximum is subtracted first).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(&x.shape, axis)?;
    let mut out = x.data.clone();
    if inner == 1 && len > 0 {
        for row in out.chunks_exact_mut(len) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        return Ok(Tensor::from_parts(x.shape.clone(), out));
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| o * len * inner + l * inner + i;
            let max = (0..len)
                .map(|l| x.data[at(l)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (x.data[at(l)] - max).exp();
                out[at(l)] = e;
                total += e;
            }
            for l in 0..len {
                out[at(l)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Forward state of [`affine_norm`] kept for the backward rule.
#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn affine_norm_cached(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    axis: usize,
) -> Result<(Tensor, NormCache)> {
    let (outer, len, inner) = split_axis(&x.shape, axis)?;
    if gain.numel() != len || bias.numel() != len {
        return Err(Error::shape("affine_norm", &x.shape, gain.shape()));
    }
    let mut out = vec![0.0; x.numel()];
    let mut normalized = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| o * len * inner + l * inner + i;
            let mean = (0..len).map(|l| x.data[at(l)]).sum::<f64>() / len as f64;
            let var = (0..len)
                .map(|l| (x.data[at(l)] - mean).powi(2))
                .sum::<f64>()
                / len as f64;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[o * inner + i] = r;
            for l in 0..len {
                let xh = (x.data[at(l)] - mean) * r;
                normalized[at(l)] = xh;
                out[at(l)] = gain.data[l] * xh + bias.data[l];
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape.clone(), out),
        NormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Standardizes every slice along `axis` (population variance, `NORM_EPS`
/// inside the square root), then applies the per-position gain and bias.
pub fn affine_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, axis: usize) -> Result<Tensor> {
    affine_norm_cached(x, gain, bias, axis).map(|(out, _)| out)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidTensor("concat of zero tensors".into()))?;
    let (outer, _, inner) = split_axis(&first.shape, axis)?;
    let mut total = 0;
    for p in parts {
        let same_rank = p.rank() == first.rank();
        let compatible = same_rank
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", &first.shape, &p.shape));
        }
        total += p.shape[axis];
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Scales every slice along `axis` to unit Euclidean norm.
pub fn l2_normalize(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(&x.shape, axis)?;
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| o * len * inner + l * inner + i;
            let norm = (0..len).map(|l| x.data[at(l)].powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm);
            }
            for l in 0..len {
                out[at(l)] /= norm;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let c = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn reduce_max_with_argmax() {
        let x = t(&[2, 2], &[1., 5., 3., 2.]);
        let (v, arg) = reduce(&x, 0, ReduceKind::Max).unwrap();
        assert_eq!(v.data(), &[3., 5.]);
        assert_eq!(arg.unwrap().index, vec![1, 0]);
    }

    #[test]
    fn reduce_max_ties_go_low() {
        let (v, arg) = reduce(&t(&[1, 2], &[2., 2.]), 1, ReduceKind::Max).unwrap();
        assert_eq!(v.data(), &[2.]);
        assert_eq!(arg.unwrap().index, vec![0]);
    }

    #[test]
    fn reduce_mean_and_bad_axis() {
        let (v, arg) = reduce(&t(&[1, 3], &[1., 2., 3.]), 1, ReduceKind::Mean).unwrap();
        assert_eq!(v.data(), &[2.]);
        assert!(arg.is_none());
        assert!(reduce(&t(&[1, 3], &[1., 2., 3.]), 2, ReduceKind::Sum).is_err());
    }

    #[test]
    fn pointwise_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        let r = unary(&t(&[2], &[-3., 3.]), Unary::Relu).unwrap();
        assert_eq!(r.data(), &[0., 3.]);
        assert!(matches!(
            unary(&t(&[2], &[4., -1.]), Unary::Sqrt),
            Err(Error::NegativeSqrt { index: 1, .. })
        ));
        assert_eq!(unary(&t(&[1], &[4.]), Unary::Sqrt).unwrap().data(), &[2.]);
    }

    #[test]
    fn broadcasting_singleton_axes_only() {
        let a = t(&[2, 1], &[1., 2.]);
        let b = t(&[1, 3], &[10., 20., 30.]);
        let c = binary(&a, &b, Binary::Add).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11., 21., 31., 12., 22., 32.]);
        assert!(binary(&t(&[2], &[1., 2.]), &t(&[3], &[1., 2., 3.]), Binary::Mul).is_err());
        assert!(binary(&t(&[2], &[1., 2.]), &t(&[1, 2], &[1., 2.]), Binary::Mul).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&t(&[2], &[0., 0.]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[1000., 1000.]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[0., 3f64.ln()]), 0).unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn affine_norm_standardizes() {
        let one = Tensor::full(vec![3], 1.0);
        let zero = Tensor::zeros(vec![3]);
        let y = affine_norm(&t(&[3], &[1., 2., 3.]), &one, &zero, 0).unwrap();
        let mean = y.sum() / 3.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        // var(x) = 2/3, so the output variance is (2/3) / (2/3 + eps).
        assert_abs_diff_eq!(var, (2.0 / 3.0) / (2.0 / 3.0 + NORM_EPS), epsilon = 1e-12);

        let bias = t(&[3], &[0.1, 0.2, 0.3]);
        let y = affine_norm(&t(&[3], &[5., 5., 5.]), &one, &bias, 0).unwrap();
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn concat_and_broadcast_to() {
        let a = t(&[2, 1], &[1., 2.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
        let e = broadcast_to(&a, &[2, 3]).unwrap();
        assert_eq!(e.data(), &[1., 1., 1., 2., 2., 2.]);
        assert!(l2_normalize(&Tensor::zeros(vec![3]), 0).is_err());
    }
}
