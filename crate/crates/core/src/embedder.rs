//! Attentive statistics pooling over time and the final embedding head.
//!
//! The complete backend is `LAP → ASTP → linear → norm`: LAP collapses the
//! layer axis frame by frame, ASTP collapses time into a weighted mean and
//! standard deviation per channel, and the projection maps those statistics
//! to the speaker embedding.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pooling::{
    lap_pool, AggregationMode, LapDims, LapParams, LayerAttentionRecord, LayerStack,
};
use crate::tensor::{ParamId, ParamStore, ReduceKind, Tape, Tensor, Var};

/// Floor applied to variances before taking square roots.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Shape of the whole backend.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpeakerBackendConfig {
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// LAP output width, also the ASTP input width.
    pub lap_dim: usize,
    /// ASTP attention bottleneck.
    pub bottleneck: usize,
    pub emb_dim: usize,
    pub mode: AggregationMode,
}

impl SpeakerBackendConfig {
    /// 12-layer encoder with 768 channels (13 stacked states).
    pub fn base() -> Self {
        Self {
            channels: 768,
            layers: 13,
            heads: 12,
            head_dim: 64,
            lap_dim: 512,
            bottleneck: 128,
            emb_dim: 192,
            mode: AggregationMode::SigmoidMax,
        }
    }

    /// 24-layer encoder with 1024 channels (25 stacked states).
    pub fn large() -> Self {
        Self {
            channels: 1024,
            layers: 25,
            heads: 16,
            head_dim: 64,
            ..Self::base()
        }
    }

    /// Desk-scale backend used by the synthetic experiments.
    pub fn toy() -> Self {
        Self {
            channels: 32,
            layers: 8,
            heads: 4,
            head_dim: 8,
            lap_dim: 64,
            bottleneck: 32,
            emb_dim: 32,
            mode: AggregationMode::SigmoidMax,
        }
    }

    pub fn lap_dims(&self) -> LapDims {
        LapDims {
            channels: self.channels,
            layers: self.layers,
            heads: self.heads,
            head_dim: self.head_dim,
            out_dim: self.lap_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lap_dims().validate()?;
        if self.bottleneck == 0 || self.emb_dim == 0 {
            return Err(Error::Config(
                "bottleneck and emb_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form count of learnable scalars in LAP, ASTP and the embedding
/// head (no classifier):
///
/// ```text
/// LAP   h·(d·C + 2·γ·N) + R·h·d + 2R          (+ N static logits, − SE for static)
/// ASTP  B·3R + B  +  R·B + R
/// emb   E·2R + E  +  2E
/// ```
/// with `γ = max(1, round(N/2))`, `R` the LAP width and `E` the embedding width.
pub fn count_parameters(cfg: &SpeakerBackendConfig) -> usize {
    let (c, n, h, d, r, b, e) = (
        cfg.channels,
        cfg.layers,
        cfg.heads,
        cfg.head_dim,
        cfg.lap_dim,
        cfg.bottleneck,
        cfg.emb_dim,
    );
    let gamma = cfg.lap_dims().squeeze_dim();
    let per_head = match cfg.mode {
        AggregationMode::StaticSuperb => d * c,
        _ => d * c + 2 * gamma * n,
    };
    let static_logits = if cfg.mode == AggregationMode::StaticSuperb {
        n
    } else {
        0
    };
    let lap = h * per_head + r * h * d + 2 * r + static_logits;
    let astp = b * 3 * r + b + r * b + r;
    let emb = e * 2 * r + e + 2 * e;
    lap + astp + emb
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AstpParams {
    /// Column blocks of the `[B × 3C]` attention weight that act on the
    /// frame, the global mean and the global std, each `[B × C]`; bias `[B]`
    pub w1_frame: ParamId,
    pub w1_mean: ParamId,
    pub w1_std: ParamId,
    pub b1: ParamId,
    /// `[C × B]`, `[C]`
    pub w2: ParamId,
    pub b2: ParamId,
    /// `[E × 2C]`, `[E]`
    pub w_emb: ParamId,
    pub b_emb: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

impl AstpParams {
    pub fn init(
        store: &mut ParamStore,
        channels: usize,
        bottleneck: usize,
        emb_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        use crate::pooling::xavier;
        let w1 = xavier(rng, bottleneck, 3 * channels);
        let blocks: Vec<Tensor> = (0..3)
            .map(|k| {
                Tensor::from_fn(vec![bottleneck, channels], |i| {
                    w1.data()[(i / channels) * 3 * channels + k * channels + i % channels]
                })
            })
            .collect();
        Self {
            w1_frame: store.add("astp.w1.frame", blocks[0].clone(), true),
            w1_mean: store.add("astp.w1.mean", blocks[1].clone(), true),
            w1_std: store.add("astp.w1.std", blocks[2].clone(), true),
            b1: store.add("astp.b1", Tensor::zeros(vec![bottleneck, 1]), true),
            w2: store.add("astp.w2", xavier(rng, channels, bottleneck), true),
            b2: store.add("astp.b2", Tensor::zeros(vec![channels, 1]), true),
            w_emb: store.add("embed.w", xavier(rng, emb_dim, 2 * channels), true),
            b_emb: store.add("embed.b", Tensor::zeros(vec![emb_dim, 1]), true),
            norm_gain: store.add("embed.norm.gain", Tensor::full(vec![emb_dim], 1.0), false),
            norm_bias: store.add("embed.norm.bias", Tensor::zeros(vec![emb_dim]), false),
        }
    }
}

/// Per-channel mean and floored standard deviation over frames, both `[C × 1]`.
fn global_stats(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let c = tape.value(x).shape()[0];
    let (mean, _) = tape.reduce(x, 1, ReduceKind::Mean)?;
    let sq = tape.mul(x, x)?;
    let (sq_mean, _) = tape.reduce(sq, 1, ReduceKind::Mean)?;
    let mean_sq = tape.mul(mean, mean)?;
    let var = tape.sub(sq_mean, mean_sq)?;
    let var = tape.clamp_min(var, VARIANCE_FLOOR);
    let std = tape.sqrt(var)?;
    Ok((
        tape.reshape(mean, vec![c, 1])?,
        tape.reshape(std, vec![c, 1])?,
    ))
}

/// Frame weights `[C × T]`: a softmax over time per channel of
/// `W2·tanh(W1·[x_t; mean; std] + b1) + b2`.
pub fn astp_attention(tape: &mut Tape, store: &ParamStore, p: &AstpParams, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidTensor(format!(
            "ASTP input must be [C x T], got {shape:?}"
        )));
    }
    let (mean, std) = global_stats(tape, x)?;
    let w_frame = tape.param(store, p.w1_frame);
    let w_mean = tape.param(store, p.w1_mean);
    let w_std = tape.param(store, p.w1_std);
    let b1 = tape.param(store, p.b1);
    let w2 = tape.param(store, p.w2);
    let b2 = tape.param(store, p.b2);
    // The mean and std columns are the same on every frame, so their
    // contribution is computed once and broadcast.
    let global = tape.matmul(w_mean, mean)?;
    let global_std = tape.matmul(w_std, std)?;
    let global = tape.add(global, global_std)?;
    let global = tape.add(global, b1)?;
    let hidden = tape.matmul(w_frame, x)?;
    let hidden = tape.add(hidden, global)?;
    let hidden = tape.tanh(hidden);
    let logits = tape.matmul(w2, hidden)?;
    let logits = tape.add(logits, b2)?;
    tape.softmax(logits, 1)
}

/// Weighted mean and standard deviation per channel, concatenated to `[2C]`.
pub fn astp_pool(tape: &mut Tape, x: Var, alpha: Var) -> Result<Var> {
    let weighted = tape.mul(alpha, x)?;
    let (mu, _) = tape.reduce(weighted, 1, ReduceKind::Sum)?;
    let sq = tape.mul(x, x)?;
    let weighted_sq = tape.mul(alpha, sq)?;
    let (m2, _) = tape.reduce(weighted_sq, 1, ReduceKind::Sum)?;
    let mu_sq = tape.mul(mu, mu)?;
    let var = tape.sub(m2, mu_sq)?;
    let var = tape.clamp_min(var, VARIANCE_FLOOR);
    let sigma = tape.sqrt(var)?;
    tape.concat(&[mu, sigma], 0)
}

/// Value-level helpers for callers that do not need gradients.
pub fn astp_attention_value(store: &ParamStore, p: &AstpParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let alpha = astp_attention(&mut tape, store, p, xv)?;
    Ok(tape.value(alpha).clone())
}

pub fn astp_pool_value(x: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let av = tape.constant(alpha.clone());
    let stats = astp_pool(&mut tape, xv, av)?;
    Ok(tape.value(stats).clone())
}

/// Embedding of one utterance, kept with its frame count for calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub utt_id: String,
    pub num_frames: usize,
    pub vector: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Complete backend: parameters plus the handles that address them.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerBackend {
    pub config: SpeakerBackendConfig,
    pub store: ParamStore,
    pub lap: LapParams,
    pub astp: AstpParams,
}

impl SpeakerBackend {
    pub fn init(config: SpeakerBackendConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(config, &mut rng)
    }

    pub fn init_with(config: SpeakerBackendConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let lap = LapParams::init(&mut store, config.lap_dims(), config.mode, rng)?;
        let astp = AstpParams::init(
            &mut store,
            config.lap_dim,
            config.bottleneck,
            config.emb_dim,
            rng,
        );
        Ok(Self {
            config,
            store,
            lap,
            astp,
        })
    }

    /// Learnable scalars owned by the backend, excluding anything else (such
    /// as a classifier) registered in the same store.
    pub fn backend_scalars(&self) -> usize {
        self.store
            .iter()
            .filter(|p| {
                ["lap.", "astp.", "embed."]
                    .iter()
                    .any(|pre| p.name.starts_with(pre))
            })
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records the full forward pass; returns the `[E]` embedding.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &LayerStack,
    ) -> Result<(Var, Vec<LayerAttentionRecord>)> {
        let (pooled, recs) = lap_pool(tape, &self.store, &self.lap, x)?;
        let alpha = astp_attention(tape, &self.store, &self.astp, pooled)?;
        let stats = astp_pool(tape, pooled, alpha)?;
        let n = tape.value(stats).numel();
        let stats = tape.reshape(stats, vec![n, 1])?;
        let w = tape.param(&self.store, self.astp.w_emb);
        let b = tape.param(&self.store, self.astp.b_emb);
        let projected = tape.matmul(w, stats)?;
        let projected = tape.add(projected, b)?;
        let gain = tape.param(&self.store, self.astp.norm_gain);
        let bias = tape.param(&self.store, self.astp.norm_bias);
        let normed = tape.affine_norm(projected, gain, bias, 0)?;
        let emb = tape.reshape(normed, vec![self.config.emb_dim])?;
        Ok((emb, recs))
    }

    pub fn embed(&self, x: &LayerStack) -> Result<SpeakerEmbedding> {
        Ok(self.embed_with_records(x)?.0)
    }

    pub fn embed_with_records(
        &self,
        x: &LayerStack,
    ) -> Result<(SpeakerEmbedding, Vec<LayerAttentionRecord>)> {
        let mut tape = Tape::new();
        let (emb, recs) = self.forward(&mut tape, x)?;
        let vector = tape.value(emb).data().to_vec();
        Ok((
            SpeakerEmbedding {
                utt_id: x.utt_id.clone(),
                num_frames: x.frames(),
                vector,
            },
            recs,
        ))
    }
}

/// Formats like C's `%.{digits}g`.
pub fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let sci = format!("{:.*e}", digits - 1, v);
    // Rounding can bump the exponent (9.9999999995 -> 1.00000000e1).
    let exp = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse::<i32>().ok())
        .unwrap_or(exp);
    if exp < -5 || exp >= digits as i32 {
        let (mant, e) = sci.split_once('e').expect("scientific format");
        let mant = trim_zeros(mant);
        let sign = if e.starts_with('-') { "-" } else { "+" };
        let e = e.trim_start_matches('-');
        return format!("{mant}e{sign}{e:0>2}");
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `utt_id<TAB>num_frames<TAB>v0,v1,...` with nine significant digits.
pub fn write_embeddings(embs: &[SpeakerEmbedding], mut out: impl Write) -> std::io::Result<()> {
    for e in embs {
        let mut line = format!("{}\t{}\t", e.utt_id, e.num_frames);
        for (i, v) in e.vector.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            let _ = write!(line, "{}", format_significant(*v, 9));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_embeddings(input: impl BufRead, source: &str) -> Result<Vec<SpeakerEmbedding>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad("expected utt_id, num_frames and vector"));
        }
        let num_frames = fields[1].parse().map_err(|_| bad("bad num_frames"))?;
        let vector = fields[2]
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad vector component"))?;
        out.push(SpeakerEmbedding {
            utt_id: fields[0].to_string(),
            num_frames,
            vector,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_significant(0.5, 9), "0.5");
        assert_eq!(format_significant(-1.23456789012, 9), "-1.23456789");
        assert_eq!(format_significant(123456789.4, 9), "123456789");
        assert_eq!(format_significant(1.5e-7, 9), "1.5e-07");
        assert_eq!(format_significant(9.9999999999, 9), "10");
        assert_eq!(format_significant(0.0, 9), "0");
    }

    #[test]
    fn pool_constant_input_hits_variance_floor() {
        let x = Tensor::full(vec![2, 4], 3.0);
        let alpha = Tensor::full(vec![2, 4], 0.25);
        let s = astp_pool_value(&x, &alpha).unwrap();
        assert_eq!(s.shape(), &[4]);
        assert!((s.data()[0] - 3.0).abs() < 1e-12);
        assert!((s.data()[2] - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn pool_hand_example() {
        let x = Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap();
        let alpha = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let s = astp_pool_value(&x, &alpha).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_single_frame_and_constant_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AstpParams::init(&mut store, 3, 4, 2, &mut rng);
        let a = astp_attention_value(
            &store,
            &p,
            &Tensor::matrix(3, 1, vec![0.3, -1.0, 2.0]).unwrap(),
        )
        .unwrap();
        assert!(a.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let a = astp_attention_value(&store, &p, &Tensor::full(vec![3, 5], 0.7)).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn toy_count_matches_store_enumeration() {
        let cfg = SpeakerBackendConfig::toy();
        let backend = SpeakerBackend::init(cfg, 0).unwrap();
        assert_eq!(backend.store.num_scalars(), count_parameters(&cfg));
        let superb = SpeakerBackendConfig {
            mode: AggregationMode::StaticSuperb,
            ..cfg
        };
        let backend = SpeakerBackend::init(superb, 0).unwrap();
        assert_eq!(backend.store.num_scalars(), count_parameters(&superb));
    }

    #[test]
    fn embeddings_tsv_round_trip() {
        let e = SpeakerEmbedding {
            utt_id: "spk1-u3".into(),
            num_frames: 50,
            vector: vec![0.125, -2.0, 1.0 / 3.0],
        };
        let mut buf = Vec::new();
        write_embeddings(std::slice::from_ref(&e), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "spk1-u3\t50\t0.125,-2,0.333333333\n"
        );
        let back = read_embeddings(buf.as_slice(), "mem").unwrap();
        assert_eq!(back[0].utt_id, e.utt_id);
        assert!((back[0].vector[2] - 1.0 / 3.0).abs() < 1e-9);
    }
}
