//! Backprop against central finite differences for every differentiable
//! operation, at three seeds each.

use super::{grad_error, probe, random_stack, rng, uniform};
use lap_core::embedder::{
    astp_attention, astp_pool, AstpParams, SpeakerBackend, SpeakerBackendConfig,
};
use lap_core::objectives::{
    aam_intertopk_logits, sample_loss, subcenter_cosines, ClassifierHead, LossConfig,
};
use lap_core::pooling::{init_lap, lap_pool, static_superb_pool_on, AggregationMode, LapDims};
use lap_core::tensor::{Binary, ParamStore, ReduceKind, Unary};

pub const TOL: f64 = 1e-4;
pub const SEEDS: [u64; 3] = [1, 2, 3];

fn store_with(shapes: &[&[usize]], seed: u64, lo: f64, hi: f64) -> ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for (i, sh) in shapes.iter().enumerate() {
        s.add(format!("p{i}"), uniform(&mut r, sh, lo, hi), true);
    }
    s
}

/// One labeled relative error per checked configuration.
pub type Report = Vec<(String, f64)>;

pub fn matmul() -> Report {
    let mut out = Report::new();
    for seed in SEEDS {
        let s = store_with(&[&[4, 5], &[5, 3]], seed, -1.0, 1.0);
        let ids: Vec<_> = s.ids().collect();
        let err = grad_error(&s, |t, st| {
            let a = t.param(st, ids[0]);
            let b = t.param(st, ids[1]);
            let c = t.matmul(a, b).unwrap();
            probe(t, c, seed)
        });
        out.push((format!("matmul seed {seed}"), err));
    }
    out
}

pub fn binary_with_broadcasting() -> Report {
    let mut out = Report::new();
    for op in [Binary::Add, Binary::Sub, Binary::Mul] {
        for seed in SEEDS {
            let s = store_with(&[&[3, 4, 5], &[1, 4, 1], &[3, 4, 5]], seed, -1.0, 1.0);
            let ids: Vec<_> = s.ids().collect();
            let err = grad_error(&s, |t, st| {
                let a = t.param(st, ids[0]);
                let b = t.param(st, ids[1]);
                let c = t.param(st, ids[2]);
                let ab = t.binary(a, b, op).unwrap();
                let abc = t.binary(ab, c, op).unwrap();
                probe(t, abc, seed)
            });
            out.push((format!("{op:?} seed {seed}"), err));
        }
    }
    out
}

pub fn unary_functions() -> Report {
    let mut out = Report::new();
    for f in [
        Unary::Relu,
        Unary::Sigmoid,
        Unary::Tanh,
        Unary::Exp,
        Unary::Sqrt,
    ] {
        for seed in SEEDS {
            // Positive inputs away from zero keep sqrt defined and relu smooth.
            let (lo, hi) = match f {
                Unary::Sqrt | Unary::Relu => (0.2, 2.0),
                _ => (-2.0, 2.0),
            };
            let mut s = store_with(&[&[4, 7]], seed, lo, hi);
            if f == Unary::Relu {
                let id = s.ids().next().unwrap();
                let v = s
                    .value(id)
                    .map(|x| if (x * 10.0) as i64 % 2 == 0 { -x } else { x });
                s.set_value(id, v).unwrap();
            }
            let id = s.ids().next().unwrap();
            let err = grad_error(&s, |t, st| {
                let x = t.param(st, id);
                let y = t.unary(x, f).unwrap();
                probe(t, y, seed)
            });
            out.push((format!("{f:?} seed {seed}"), err));
        }
    }
    out
}

pub fn clamp_and_scale() -> Report {
    let mut out = Report::new();
    for seed in SEEDS {
        let s = store_with(&[&[6, 5]], seed, -1.0, 1.0);
        let id = s.ids().next().unwrap();
        let err = grad_error(&s, |t, st| {
            let x = t.param(st, id);
            let y = t.clamp_min(x, 0.05);
            let y = t.scale(y, -2.5);
            probe(t, y, seed)
        });
        out.push((format!("clamp/scale seed {seed}"), err));
    }
    out
}

pub fn reductions() -> Report {
    let mut out = Report::new();
    for kind in [ReduceKind::Max, ReduceKind::Mean, ReduceKind::Sum] {
        for axis in 0..3 {
            for seed in SEEDS {
                let s = store_with(&[&[3, 4, 5]], seed, -1.0, 1.0);
                let id = s.ids().next().unwrap();
                let err = grad_error(&s, |t, st| {
                    let x = t.param(st, id);
                    let (y, _) = t.reduce(x, axis, kind).unwrap();
                    probe(t, y, seed)
                });
                out.push((format!("{kind:?} axis {axis} seed {seed}"), err));
            }
        }
    }
    out
}

pub fn weighted_layer_reduce() -> Report {
    let mut out = Report::new();
    for kind in [ReduceKind::Max, ReduceKind::Mean, ReduceKind::Sum] {
        for seed in SEEDS {
            let s = store_with(&[&[3, 4, 5], &[4, 5]], seed, 0.1, 1.0);
            let ids: Vec<_> = s.ids().collect();
            let err = grad_error(&s, |t, st| {
                let x = t.param(st, ids[0]);
                let a = t.param(st, ids[1]);
                let (y, _) = t.weighted_layer_reduce(x, a, kind).unwrap();
                probe(t, y, seed)
            });
            out.push((format!("weighted {kind:?} seed {seed}"), err));
        }
    }
    out
}

pub fn softmax_norms_and_shapes() -> Report {
    let mut out = Report::new();
    for seed in SEEDS {
        let s = store_with(&[&[4, 7], &[4], &[4], &[3, 7]], seed, -1.0, 1.0);
        let ids: Vec<_> = s.ids().collect();
        let err = grad_error(&s, |t, st| {
            let x = t.param(st, ids[0]);
            let gain = t.param(st, ids[1]);
            let bias = t.param(st, ids[2]);
            let other = t.param(st, ids[3]);
            let sm = t.softmax(x, 1).unwrap();
            let nm = t.affine_norm(sm, gain, bias, 0).unwrap();
            let cat = t.concat(&[nm, other], 0).unwrap();
            let l2 = t.l2_normalize(cat, 0).unwrap();
            let r = t.reshape(l2, vec![7, 7]).unwrap();
            probe(t, r, seed)
        });
        out.push((format!("softmax/norm/concat/l2/reshape seed {seed}"), err));
    }
    out
}

pub fn broadcast_elementwise_and_cross_entropy() -> Report {
    let mut out = Report::new();
    for seed in SEEDS {
        let s = store_with(&[&[3, 1], &[3, 4]], seed, -0.9, 0.9);
        let ids: Vec<_> = s.ids().collect();
        let err = grad_error(&s, |t, st| {
            let col = t.param(st, ids[0]);
            let m = t.param(st, ids[1]);
            let b = t.broadcast_to(col, &[3, 4]).unwrap();
            let sum = t.add(b, m).unwrap();
            let cubic = t.map_elementwise(sum, |v, i| {
                (v * v * v + i as f64 * v, 3.0 * v * v + i as f64)
            });
            t.softmax_cross_entropy(cubic, 5).unwrap()
        });
        out.push((format!("broadcast/elementwise/xent seed {seed}"), err));
    }
    out
}

fn lap_error(mode: AggregationMode, seed: u64) -> f64 {
    let dims = LapDims {
        channels: 5,
        layers: 4,
        heads: 2,
        head_dim: 3,
        out_dim: 6,
    };
    let (mut store, params) = init_lap(dims, mode, seed).unwrap();
    // Non-trivial norm parameters so that their gradients are exercised too.
    let mut r = rng(seed + 100);
    store
        .set_value(params.norm_gain, uniform(&mut r, &[6], 0.5, 1.5))
        .unwrap();
    store
        .set_value(params.norm_bias, uniform(&mut r, &[6], -0.5, 0.5))
        .unwrap();
    if let Some(id) = params.layer_logits {
        store
            .set_value(id, uniform(&mut r, &[4], -1.0, 1.0))
            .unwrap();
    }
    let x = random_stack(seed, 5, 4, 6);
    grad_error(&store, |t, st| {
        let (y, _) = lap_pool(t, st, &params, &x).unwrap();
        probe(t, y, seed)
    })
}

pub fn lap_sigmoid_max() -> Report {
    let mut out = Report::new();
    for seed in SEEDS {
        out.push((
            format!("lap sigmoid-max seed {seed}"),
            lap_error(AggregationMode::SigmoidMax, seed),
        ));
    }
    out
}

pub fn lap_softmax_sum() -> Report {
    let mut out = Report::new();
    for seed in SEEDS {
        out.push((
            format!("lap softmax-sum seed {seed}"),
            lap_error(AggregationMode::SoftmaxSum, seed),
        ));
    }
    out
}

pub fn lap_static_superb() -> Report {
    let mut out = Report::new();
    for seed in SEEDS {
        out.push((
            format!("lap static seed {seed}"),
            lap_error(AggregationMode::StaticSuperb, seed),
        ));
    }
    out
}

pub fn static_superb_pool() -> Report {
    let mut out = Report::new();
    for seed in SEEDS {
        let s = store_with(&[&[5]], seed, -1.0, 1.0);
        let id = s.ids().next().unwrap();
        let x = random_stack(seed, 3, 5, 4);
        let err = grad_error(&s, |t, st| {
            let w = t.param(st, id);
            let y = static_superb_pool_on(t, &x, w).unwrap();
            probe(t, y, seed)
        });
        out.push((format!("static pool seed {seed}"), err));
    }
    out
}

pub fn astp() -> Report {
    let mut out = Report::new();
    for seed in SEEDS {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let x_id = store.add("x", uniform(&mut r, &[3, 5], -1.0, 1.0), false);
        let p = AstpParams::init(&mut store, 3, 4, 2, &mut r);
        for id in [p.b1, p.b2] {
            let shape = store.value(id).shape().to_vec();
            store
                .set_value(id, uniform(&mut r, &shape, -0.5, 0.5))
                .unwrap();
        }
        let err = grad_error(&store, |t, st| {
            let x = t.param(st, x_id);
            let alpha = astp_attention(t, st, &p, x).unwrap();
            let stats = astp_pool(t, x, alpha).unwrap();
            probe(t, stats, seed)
        });
        out.push((format!("astp seed {seed}"), err));
    }
    out
}

pub fn aam_intertopk_loss() -> Report {
    let mut out = Report::new();
    for seed in SEEDS {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let e_id = store.add("e", uniform(&mut r, &[6], -1.0, 1.0), false);
        let head = ClassifierHead::init(&mut store, 5, 2, 6, &mut r).unwrap();
        let cfg = LossConfig::default().with_margins(0.2, 0.04);
        let err = grad_error(&store, |t, st| {
            let e = t.param(st, e_id);
            let cos = subcenter_cosines(t, st, &head, e).unwrap();
            let logits = aam_intertopk_logits(t, cos, 1, &cfg).unwrap();
            t.softmax_cross_entropy(logits, 1).unwrap()
        });
        out.push((format!("aam/inter-topk seed {seed}"), err));
    }
    out
}

pub fn full_backend_and_loss() -> Report {
    let mut out = Report::new();
    let cfg = SpeakerBackendConfig {
        channels: 4,
        layers: 3,
        heads: 2,
        head_dim: 2,
        lap_dim: 4,
        bottleneck: 3,
        emb_dim: 3,
        mode: AggregationMode::SigmoidMax,
    };
    for seed in SEEDS {
        let mut backend = SpeakerBackend::init(cfg, seed).unwrap();
        let mut r = rng(seed);
        let head = ClassifierHead::init(&mut backend.store, 4, 2, 3, &mut r).unwrap();
        let x = random_stack(seed, 4, 3, 5);
        let loss_cfg = LossConfig::default().with_margins(0.1, 0.02);
        let store = backend.store.clone();
        let err = grad_error(&store, |t, st| {
            let b = SpeakerBackend {
                store: st.clone(),
                ..backend.clone()
            };
            let (e, _) = b.forward(t, &x).unwrap();
            sample_loss(t, st, &head, e, 2, &loss_cfg).unwrap().0
        });
        out.push((format!("backend + loss seed {seed}"), err));
    }
    out
}

pub const ALL: &[(&str, fn() -> Report)] = &[
    ("matmul", matmul),
    ("binary_with_broadcasting", binary_with_broadcasting),
    ("unary_functions", unary_functions),
    ("clamp_and_scale", clamp_and_scale),
    ("reductions", reductions),
    ("weighted_layer_reduce", weighted_layer_reduce),
    ("softmax_norms_and_shapes", softmax_norms_and_shapes),
    (
        "broadcast_elementwise_and_cross_entropy",
        broadcast_elementwise_and_cross_entropy,
    ),
    ("lap_sigmoid_max", lap_sigmoid_max),
    ("lap_softmax_sum", lap_softmax_sum),
    ("lap_static_superb", lap_static_superb),
    ("static_superb_pool", static_superb_pool),
    ("astp", astp),
    ("aam_intertopk_loss", aam_intertopk_loss),
    ("full_backend_and_loss", full_backend_and_loss),
];
