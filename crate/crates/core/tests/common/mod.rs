//! Oracles shared by the integration suites. Everything here is written
//! against plain slices so it does not lean on the code it checks.

#![allow(dead_code)]

use lap_core::pooling::LayerStack;
use lap_core::tensor::{finite_diff_grad, relative_error, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod gradient_cases;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn random_stack(seed: u64, c: usize, n: usize, t: usize) -> LayerStack {
    let mut r = rng(seed);
    LayerStack::new(format!("utt{seed}"), uniform(&mut r, &[c, n, t], -1.0, 1.0)).unwrap()
}

/// Relative error between backprop and central differences of the scalar
/// built by `f`, over the gradients of all parameters taken as one vector.
/// (Blocks whose true gradient is exactly zero, such as a bias ahead of a
/// shift-invariant softmax, would otherwise compare rounding noise against
/// the zero floor.)
pub fn grad_error(store: &ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Var) -> f64 {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let grads = tape.backward(loss).unwrap();
    let numeric = finite_diff_grad(store, 1e-6, |s| {
        let mut t = Tape::new();
        let l = f(&mut t, s);
        Ok(t.value(l).data()[0])
    })
    .unwrap();
    let (mut analytic_all, mut numeric_all) = (Vec::new(), Vec::new());
    for (id, num) in store.ids().zip(&numeric) {
        match grads.get(id) {
            Some(g) => analytic_all.extend_from_slice(g.data()),
            None => analytic_all.extend(std::iter::repeat_n(0.0, num.numel())),
        }
        numeric_all.extend_from_slice(num.data());
    }
    relative_error(&Tensor::vector(analytic_all), &Tensor::vector(numeric_all))
}

/// Contracts `v` with fixed random weights so that every output element
/// reaches the scalar with a distinct coefficient.
pub fn probe(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let w = tape.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let prod = tape.mul(v, w).unwrap();
    tape.sum_all(prod)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `[rows × cols]` row-major matrix product with `[cols]` vector.
fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| (0..cols).map(|j| m[i * cols + j] * v[j]).sum())
        .collect()
}

/// Straight-line evaluation of one layer-attentive head on `x[C][N][T]`:
/// project every layer and frame, pool the projection over its latent axis by
/// max and by mean, squeeze-excite both, then weight layers per frame and
/// aggregate them by max (sigmoid) or sum (softmax). Returns `y[d][T]`.
pub fn direct_head(
    x: &Tensor,
    w_in: &Tensor,
    w_sq: &Tensor,
    w_ex: &Tensor,
    sigmoid_max: bool,
) -> Vec<Vec<f64>> {
    let (c, n, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = w_in.shape()[0];
    let g = w_sq.shape()[0];
    let mut y = vec![vec![0.0; t]; d];
    for f in 0..t {
        // proj[l][k]
        let proj: Vec<Vec<f64>> = (0..n)
            .map(|l| {
                let col: Vec<f64> = (0..c).map(|ch| x.at(&[ch, l, f])).collect();
                matvec(w_in.data(), d, c, &col)
            })
            .collect();
        let zmax: Vec<f64> = proj
            .iter()
            .map(|p| p.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let zmean: Vec<f64> = proj
            .iter()
            .map(|p| p.iter().sum::<f64>() / d as f64)
            .collect();
        let se = |z: &[f64]| {
            let hidden: Vec<f64> = matvec(w_sq.data(), g, n, z)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            matvec(w_ex.data(), n, g, &hidden)
        };
        let pre: Vec<f64> = se(&zmax)
            .iter()
            .zip(se(&zmean))
            .map(|(a, b)| a + b)
            .collect();
        let alpha: Vec<f64> = if sigmoid_max {
            pre.iter().map(|&p| sigmoid(p)).collect()
        } else {
            let m = pre.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = pre.iter().map(|p| (p - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        for k in 0..d {
            let vals = (0..n).map(|l| alpha[l] * proj[l][k]);
            y[k][f] = if sigmoid_max {
                vals.fold(f64::NEG_INFINITY, f64::max)
            } else {
                vals.sum()
            };
        }
    }
    y
}

/// Per-column normalization with gain and bias over the rows of `m[R][T]`.
pub fn direct_norm(m: &[Vec<f64>], gain: &[f64], bias: &[f64], eps: f64) -> Vec<Vec<f64>> {
    let (r, t) = (m.len(), m[0].len());
    let mut out = vec![vec![0.0; t]; r];
    for f in 0..t {
        let mean = (0..r).map(|i| m[i][f]).sum::<f64>() / r as f64;
        let var = (0..r).map(|i| (m[i][f] - mean).powi(2)).sum::<f64>() / r as f64;
        for i in 0..r {
            out[i][f] = gain[i] * (m[i][f] - mean) / (var + eps).sqrt() + bias[i];
        }
    }
    out
}

/// Miss and false-alarm rates at threshold `tau`, accepting scores above it.
pub fn rates_at(scores: &[f64], labels: &[bool], tau: f64) -> (f64, f64) {
    let nt = labels.iter().filter(|&&l| l).count() as f64;
    let nn = labels.len() as f64 - nt;
    let misses = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| **l && **s <= tau)
        .count() as f64;
    let fas = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| !**l && **s > tau)
        .count() as f64;
    (misses / nt, fas / nn)
}

/// Every operating point, found by trying each distinct score as a
/// threshold plus one below all of them, in increasing threshold order.
pub fn brute_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let mut taus: Vec<f64> = scores.to_vec();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let lowest = taus[0] - 1.0;
    std::iter::once(lowest)
        .chain(taus)
        .map(|tau| rates_at(scores, labels, tau))
        .collect()
}

/// EER by sweeping the points for the first sign change of `miss − fa` and
/// interpolating linearly between the two points around it.
pub fn brute_eer(scores: &[f64], labels: &[bool]) -> f64 {
    let pts = brute_points(scores, labels);
    for w in pts.windows(2) {
        let (da, db) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
        if da == 0.0 {
            return w[0].0;
        }
        if da < 0.0 && db >= 0.0 {
            let t = da / (da - db);
            return w[0].0 + t * (w[1].0 - w[0].0);
        }
    }
    pts.last().unwrap().0
}

pub fn brute_min_dcf(scores: &[f64], labels: &[bool], p: f64) -> f64 {
    let norm = p.min(1.0 - p);
    brute_points(scores, labels)
        .into_iter()
        .map(|(pm, pf)| (p * pm + (1.0 - p) * pf) / norm)
        .fold(f64::INFINITY, f64::min)
}
