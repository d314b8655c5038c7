use super::ops::{self, Binary, NormCache, ReduceKind, Unary};
use super::{split_axis, Argmax, Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Binary(Var, Var, Binary),
    Unary(Var, Unary),
    ClampMin(Var, f64),
    Scale(Var, f64),
    Reduce {
        x: Var,
        axis: usize,
        kind: ReduceKind,
        argmax: Option<Argmax>,
    },
    Softmax(Var, usize),
    AffineNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        cache: NormCache,
    },
    Concat(Vec<Var>, usize),
    Reshape(Var),
    BroadcastTo(Var),
    L2Normalize(Var, usize),
    WeightedLayerReduce {
        x: Var,
        alpha: Var,
        kind: ReduceKind,
        argmax: Option<Argmax>,
    },
    Elementwise {
        x: Var,
        deriv: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        x: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any parameter is upstream of this node.
    needs_grad: bool,
}

/// Records forward operations in evaluation order so gradients can be
/// propagated back in reverse. Nodes only reference earlier nodes, so the
/// recording is acyclic by construction.
///
/// A tape copies parameter values when they are recorded and never holds on
/// to the [`ParamStore`], so several tapes can evaluate against one store
/// concurrently.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Binary(a, b, _) => self.needs(*a) || self.needs(*b),
            Op::Unary(x, _)
            | Op::ClampMin(x, _)
            | Op::Scale(x, _)
            | Op::Reduce { x, .. }
            | Op::Softmax(x, _)
            | Op::Reshape(x)
            | Op::BroadcastTo(x)
            | Op::L2Normalize(x, _)
            | Op::Elementwise { x, .. }
            | Op::SoftmaxCrossEntropy { x, .. } => self.needs(*x),
            Op::WeightedLayerReduce { x, alpha, .. } => self.needs(*x) || self.needs(*alpha),
            Op::AffineNorm { x, gain, bias, .. } => {
                self.needs(*x) || self.needs(*gain) || self.needs(*bias)
            }
            Op::Concat(parts, _) => parts.iter().any(|p| self.needs(*p)),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let out = ops::binary(self.value(a), self.value(b), op)?;
        Ok(self.push(out, Op::Binary(a, b, op)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let out = ops::unary(self.value(x), f)?;
        Ok(self.push(out, Op::Unary(x, f)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh).expect("tanh is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp).expect("exp is total")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    /// `max(x, floor)` elementwise; gradient passes where `x >= floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor));
        self.push(out, Op::ClampMin(x, floor))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn reduce(
        &mut self,
        x: Var,
        axis: usize,
        kind: ReduceKind,
    ) -> Result<(Var, Option<Argmax>)> {
        let (out, argmax) = ops::reduce(self.value(x), axis, kind)?;
        let v = self.push(
            out,
            Op::Reduce {
                x,
                axis,
                kind,
                argmax: argmax.clone(),
            },
        );
        Ok((v, argmax))
    }

    /// Reduces `alpha ⊙ x` over the middle axis of `x: [A × L × B]` with
    /// `alpha: [L × B]`, without materializing the product. Returns `[A × B]`.
    /// `Max` breaks ties toward the lowest index.
    pub fn weighted_layer_reduce(
        &mut self,
        x: Var,
        alpha: Var,
        kind: ReduceKind,
    ) -> Result<(Var, Option<Argmax>)> {
        let (xv, av) = (self.value(x), self.value(alpha));
        if xv.rank() != 3 || av.shape() != &xv.shape()[1..] {
            return Err(Error::shape(
                "weighted_layer_reduce",
                xv.shape(),
                av.shape(),
            ));
        }
        let (a, l, b) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (xd, ad) = (xv.data(), av.data());
        let mut out = vec![0.0; a * b];
        let mut index = if kind == ReduceKind::Max {
            vec![0usize; a * b]
        } else {
            Vec::new()
        };
        for i in 0..a {
            let row = &xd[i * l * b..(i + 1) * l * b];
            let o = &mut out[i * b..(i + 1) * b];
            match kind {
                ReduceKind::Max => {
                    let idx = &mut index[i * b..(i + 1) * b];
                    o.copy_from_slice(&row[..b]);
                    for (j, v) in o.iter_mut().enumerate() {
                        *v *= ad[j];
                    }
                    for layer in 1..l {
                        let (xr, ar) = (
                            &row[layer * b..(layer + 1) * b],
                            &ad[layer * b..(layer + 1) * b],
                        );
                        for j in 0..b {
                            let v = ar[j] * xr[j];
                            if v > o[j] {
                                o[j] = v;
                                idx[j] = layer;
                            }
                        }
                    }
                }
                ReduceKind::Sum | ReduceKind::Mean => {
                    for layer in 0..l {
                        let (xr, ar) = (
                            &row[layer * b..(layer + 1) * b],
                            &ad[layer * b..(layer + 1) * b],
                        );
                        for j in 0..b {
                            o[j] += ar[j] * xr[j];
                        }
                    }
                    if kind == ReduceKind::Mean {
                        o.iter_mut().for_each(|v| *v /= l as f64);
                    }
                }
            }
        }
        let argmax = (kind == ReduceKind::Max).then(|| Argmax {
            shape: vec![a, b],
            index,
        });
        let v = self.push(
            Tensor::from_parts(vec![a, b], out),
            Op::WeightedLayerReduce {
                x,
                alpha,
                kind,
                argmax: argmax.clone(),
            },
        );
        Ok((v, argmax))
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let flat = self.reshape(x, vec![n]).expect("flattening preserves size");
        self.reduce(flat, 0, ReduceKind::Sum)
            .expect("axis 0 exists")
            .0
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax(x, axis)))
    }

    pub fn affine_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        let (out, cache) =
            ops::affine_norm_cached(self.value(x), self.value(gain), self.value(bias), axis)?;
        Ok(self.push(
            out,
            Op::AffineNorm {
                x,
                gain,
                bias,
                axis,
                cache,
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = ops::broadcast_to(self.value(x), shape)?;
        Ok(self.push(out, Op::BroadcastTo(x)))
    }

    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::l2_normalize(self.value(x), axis)?;
        Ok(self.push(out, Op::L2Normalize(x, axis)))
    }

    /// Applies a caller-defined elementwise function. `f(value, flat_index)`
    /// returns the output and its derivative with respect to the input.
    pub fn map_elementwise(&mut self, x: Var, f: impl Fn(f64, usize) -> (f64, f64)) -> Var {
        let input = self.value(x);
        let (vals, deriv): (Vec<f64>, Vec<f64>) = input
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, i))
            .unzip();
        let out = Tensor::from_parts(input.shape().to_vec(), vals);
        self.push(out, Op::Elementwise { x, deriv })
    }

    /// `-log softmax(logits)[label]` over all elements of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let x = self.value(logits);
        if label >= x.numel() {
            return Err(Error::Invalid(format!(
                "label {label} out of range for {} logits",
                x.numel()
            )));
        }
        let max = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.data().iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() + max - x.data()[label];
        let probs = exps.into_iter().map(|e| e / total).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                x: logits,
                label,
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`, returning gradients for every
    /// parameter the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = &self.nodes[loss.0].value;
        if seed.numel() != 1 {
            return Err(Error::NonScalarSeed(seed.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(seed.shape().to_vec(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.push(*id, g)?,
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.needs(*a) {
                        let ga = slot(&mut grads, *a, av.shape());
                        ops::gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            (n as isize, 1),
                            bv.data(),
                            (1, n as isize),
                            ga,
                            1.0,
                        );
                    }
                    if self.needs(*b) {
                        let gb = slot(&mut grads, *b, bv.shape());
                        ops::gemm(
                            k,
                            m,
                            n,
                            av.data(),
                            (1, k as isize),
                            g.data(),
                            (n as isize, 1),
                            gb,
                            1.0,
                        );
                    }
                }
                Op::Binary(a, b, op) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                    if av.shape() == bv.shape() {
                        let (na, nb) = (self.needs(*a), self.needs(*b));
                        let (ga, gb): (Option<Vec<f64>>, Option<Vec<f64>>) = match op {
                            Binary::Add => (na.then(|| gd.to_vec()), nb.then(|| gd.to_vec())),
                            Binary::Sub => (
                                na.then(|| gd.to_vec()),
                                nb.then(|| gd.iter().map(|v| -v).collect()),
                            ),
                            Binary::Mul => (
                                na.then(|| gd.iter().zip(bd).map(|(g, y)| g * y).collect()),
                                nb.then(|| gd.iter().zip(ad).map(|(g, x)| g * x).collect()),
                            ),
                        };
                        if let Some(ga) = ga {
                            accumulate(
                                &mut grads,
                                *a,
                                Tensor::from_parts(av.shape().to_vec(), ga),
                            )?;
                        }
                        if let Some(gb) = gb {
                            accumulate(
                                &mut grads,
                                *b,
                                Tensor::from_parts(bv.shape().to_vec(), gb),
                            )?;
                        }
                        continue;
                    }
                    let (gs, ash, bsh) = (g.shape(), av.shape(), bv.shape());
                    if self.needs(*a) {
                        let mut ga = vec![0.0; av.numel()];
                        match op {
                            Binary::Add | Binary::Sub => {
                                ops::for_each_broadcast(gs, ash, bsh, |o, ia, _| ga[ia] += gd[o])
                            }
                            Binary::Mul => ops::for_each_broadcast(gs, ash, bsh, |o, ia, ib| {
                                ga[ia] += gd[o] * bd[ib]
                            }),
                        }
                        accumulate(&mut grads, *a, Tensor::from_parts(ash.to_vec(), ga))?;
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; bv.numel()];
                        match op {
                            Binary::Add => {
                                ops::for_each_broadcast(gs, ash, bsh, |o, _, ib| gb[ib] += gd[o])
                            }
                            Binary::Sub => {
                                ops::for_each_broadcast(gs, ash, bsh, |o, _, ib| gb[ib] -= gd[o])
                            }
                            Binary::Mul => ops::for_each_broadcast(gs, ash, bsh, |o, ia, ib| {
                                gb[ib] += gd[o] * ad[ia]
                            }),
                        }
                        accumulate(&mut grads, *b, Tensor::from_parts(bsh.to_vec(), gb))?;
                    }
                }
                Op::Unary(x, f) => {
                    let (xv, y) = (self.value(*x).data(), node.value.data());
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, gj)| {
                            gj * match f {
                                Unary::Relu => {
                                    if xv[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sigmoid => y[j] * (1.0 - y[j]),
                                Unary::Tanh => 1.0 - y[j] * y[j],
                                Unary::Exp => y[j],
                                Unary::Sqrt => 0.5 / y[j],
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), d))?;
                }
                Op::ClampMin(x, floor) => {
                    let xv = self.value(*x).data();
                    let d = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(gj, v)| if v >= floor { *gj } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), d))?;
                }
                Op::Scale(x, factor) => {
                    accumulate(&mut grads, *x, g.map(|v| v * factor))?;
                }
                Op::Reduce {
                    x,
                    axis,
                    kind,
                    argmax,
                } => {
                    let xshape = self.value(*x).shape();
                    let (outer, len, inner) = split_axis(xshape, *axis)?;
                    let d = slot(&mut grads, *x, xshape);
                    let gd = g.data();
                    for o in 0..outer {
                        let go = &gd[o * inner..(o + 1) * inner];
                        let block = &mut d[o * len * inner..(o + 1) * len * inner];
                        match kind {
                            ReduceKind::Max => {
                                let idx = &argmax.as_ref().expect("max keeps argmax").index
                                    [o * inner..(o + 1) * inner];
                                for j in 0..inner {
                                    block[idx[j] * inner + j] += go[j];
                                }
                            }
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let scale = if *kind == ReduceKind::Mean {
                                    1.0 / len as f64
                                } else {
                                    1.0
                                };
                                if inner == 1 {
                                    let gv = go[0] * scale;
                                    block.iter_mut().for_each(|r| *r += gv);
                                    continue;
                                }
                                for row in block.chunks_exact_mut(inner) {
                                    for (r, gv) in row.iter_mut().zip(go) {
                                        *r += gv * scale;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::WeightedLayerReduce {
                    x,
                    alpha,
                    kind,
                    argmax,
                } => {
                    let (xv, av) = (self.value(*x), self.value(*alpha));
                    let (a, l, b) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let (xd, ad, gd) = (xv.data(), av.data(), g.data());
                    let scale = if *kind == ReduceKind::Mean {
                        1.0 / l as f64
                    } else {
                        1.0
                    };
                    if self.needs(*alpha) {
                        let ga = slot(&mut grads, *alpha, av.shape());
                        for i in 0..a {
                            let (row, go) =
                                (&xd[i * l * b..(i + 1) * l * b], &gd[i * b..(i + 1) * b]);
                            if let Some(am) = argmax {
                                let idx = &am.index[i * b..(i + 1) * b];
                                for j in 0..b {
                                    ga[idx[j] * b + j] += go[j] * scale * row[idx[j] * b + j];
                                }
                            } else {
                                for (gr, xr) in ga.chunks_exact_mut(b).zip(row.chunks_exact(b)) {
                                    for j in 0..b {
                                        gr[j] += go[j] * scale * xr[j];
                                    }
                                }
                            }
                        }
                    }
                    if self.needs(*x) {
                        let gx = slot(&mut grads, *x, xv.shape());
                        for i in 0..a {
                            let (block, go) =
                                (&mut gx[i * l * b..(i + 1) * l * b], &gd[i * b..(i + 1) * b]);
                            if let Some(am) = argmax {
                                let idx = &am.index[i * b..(i + 1) * b];
                                for j in 0..b {
                                    block[idx[j] * b + j] += go[j] * scale * ad[idx[j] * b + j];
                                }
                            } else {
                                for (br, ar) in block.chunks_exact_mut(b).zip(ad.chunks_exact(b)) {
                                    for j in 0..b {
                                        br[j] += go[j] * scale * ar[j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Softmax(x, axis) => {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis)?;
                    let mut d = vec![0.0; y.len()];
                    let gd = g.data();
                    if inner == 1 && len > 0 {
                        for ((dr, yr), gr) in d
                            .chunks_exact_mut(len)
                            .zip(y.chunks_exact(len))
                            .zip(gd.chunks_exact(len))
                        {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                                *dv = yv * (gv - dot);
                            }
                        }
                    } else {
                        for o in 0..outer {
                            for j in 0..inner {
                                let at = |l: usize| o * len * inner + l * inner + j;
                                let dot: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                                for l in 0..len {
                                    d[at(l)] = y[at(l)] * (gd[at(l)] - dot);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), d))?;
                }
                Op::AffineNorm {
                    x,
                    gain,
                    bias,
                    axis,
                    cache,
                } => {
                    let gamma = self.value(*gain).data();
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis)?;
                    let gd = g.data();
                    let xh = &cache.normalized;
                    let mut dx = vec![0.0; gd.len()];
                    let mut dgain = vec![0.0; len];
                    let mut dbias = vec![0.0; len];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + j;
                            let r = cache.inv_std[o * inner + j];
                            let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                            for l in 0..len {
                                let dxh = gd[at(l)] * gamma[l];
                                sum_d += dxh;
                                sum_dx += dxh * xh[at(l)];
                                dgain[l] += gd[at(l)] * xh[at(l)];
                                dbias[l] += gd[at(l)];
                            }
                            let n = len as f64;
                            for l in 0..len {
                                let dxh = gd[at(l)] * gamma[l];
                                dx[at(l)] = r / n * (n * dxh - sum_d - xh[at(l)] * sum_dx);
                            }
                        }
                    }
                    let gshape = self.value(*gain).shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), dx))?;
                    accumulate(&mut grads, *gain, Tensor::from_parts(gshape, dgain))?;
                    accumulate(&mut grads, *bias, Tensor::from_parts(bshape, dbias))?;
                }
                Op::Concat(parts, axis) => {
                    let (outer, _, inner) = split_axis(g.shape(), *axis)?;
                    let mut offset = 0;
                    let total = g.shape()[*axis];
                    for p in parts {
                        let pshape = self.value(*p).shape().to_vec();
                        let block = pshape[*axis] * inner;
                        let mut d = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * total * inner + offset;
                            d.extend_from_slice(&g.data()[start..start + block]);
                        }
                        offset += block;
                        accumulate(&mut grads, *p, Tensor::from_parts(pshape, d))?;
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.reshape(shape)?)?;
                }
                Op::BroadcastTo(x) => {
                    let xshape = self.value(*x).shape();
                    let d = slot(&mut grads, *x, xshape);
                    ops::for_each_broadcast(g.shape(), xshape, g.shape(), |o, ix, _| {
                        d[ix] += g.data()[o];
                    });
                }
                Op::L2Normalize(x, axis) => {
                    let xv = self.value(*x).data();
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis)?;
                    let gd = g.data();
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + j;
                            let norm = (0..len).map(|l| xv[at(l)].powi(2)).sum::<f64>().sqrt();
                            let dot: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                d[at(l)] = (gd[at(l)] - y[at(l)] * dot) / norm;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), d))?;
                }
                Op::Elementwise { x, deriv } => {
                    let d = g.data().iter().zip(deriv).map(|(a, b)| a * b).collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), d))?;
                }
                Op::SoftmaxCrossEntropy { x, label, probs } => {
                    let gv = g.data()[0];
                    let mut d: Vec<f64> = probs.iter().map(|p| gv * p).collect();
                    d[*label] -= gv;
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(shape, d))?;
                }
            }
        }
        Ok(out)
    }

    /// Runs [`Tape::backward`] and adds the result onto the store's gradients.
    /// Repeated calls accumulate until the store is zeroed.
    pub fn backprop(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradient buffer of `v`, created as zeros on first use, for ops that add
/// their contribution in place.
fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
        .data_mut()
}
