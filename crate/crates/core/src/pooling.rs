//! Layer attentive pooling (LAP) over a stack of encoder hidden states.
//!
//! Each head projects every layer with `W_in`, summarizes the projected
//! features per layer and frame by their max and mean over the latent axis,
//! and turns those summaries into layer weights with a squeeze-excitation
//! block shared between the two statistics. The sigmoid-max variant then
//! keeps, per latent value, the strongest weighted layer; softmax-sum takes
//! the weighted sum instead. The static weighted-sum baseline uses one
//! time-invariant softmax weight per layer.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Argmax, ParamId, ParamStore, ReduceKind, Tape, Tensor, Var};

/// All hidden states of one utterance, laid out as `[C × N × T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub utt_id: String,
    data: Tensor,
}

impl LayerStack {
    pub fn new(utt_id: impl Into<String>, data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::InvalidTensor(format!(
                "layer stack must be [C x N x T], got {:?}",
                data.shape()
            )));
        }
        if !data.is_finite() {
            return Err(Error::InvalidTensor(
                "layer stack contains non-finite values".into(),
            ));
        }
        Ok(Self {
            utt_id: utt_id.into(),
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn layers(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Reorders frames so that output frame `t` is input frame `order[t]`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Self> {
        let (c, n, t) = (self.channels(), self.layers(), self.frames());
        if order.len() != t {
            return Err(Error::Invalid("frame permutation has wrong length".into()));
        }
        let src = self.data.data();
        let data = Tensor::from_fn(vec![c, n, t], |i| {
            let (ci, rest) = (i / (n * t), i % (n * t));
            let (li, ti) = (rest / t, rest % t);
            src[ci * n * t + li * t + order[ti]]
        });
        Self::new(self.utt_id.clone(), data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggregationMode {
    SigmoidMax,
    SoftmaxSum,
    StaticSuperb,
}

impl AggregationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::SigmoidMax => "sigmoid-max",
            AggregationMode::SoftmaxSum => "softmax-sum",
            AggregationMode::StaticSuperb => "static-superb",
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid-max" => Ok(Self::SigmoidMax),
            "softmax-sum" => Ok(Self::SoftmaxSum),
            "static-superb" => Ok(Self::StaticSuperb),
            other => Err(Error::Config(format!(
                "unknown aggregation mode `{other}` (expected sigmoid-max, softmax-sum or static-superb)"
            ))),
        }
    }
}

/// Sizes of a LAP block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LapDims {
    /// Hidden size `C` of the encoder.
    pub channels: usize,
    /// Number of stacked hidden states `N`, including the convolutional output.
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Output width `R`.
    pub out_dim: usize,
}

impl LapDims {
    /// `d` defaults to `C / h` when it divides evenly.
    pub fn with_default_head_dim(
        channels: usize,
        layers: usize,
        heads: usize,
        out_dim: usize,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "cannot derive head_dim: {channels} channels over {heads} heads"
            )));
        }
        Ok(Self {
            channels,
            layers,
            heads,
            head_dim: channels / heads,
            out_dim,
        })
    }

    /// Squeeze width: half the layer count, rounded, at least one.
    pub fn squeeze_dim(&self) -> usize {
        ((self.layers as f64 / 2.0).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.channels,
            self.layers,
            self.heads,
            self.head_dim,
            self.out_dim,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!(
                "LAP dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LapHeadParams {
    /// `[d × C]`
    pub w_in: ParamId,
    /// `[γ × N]` and `[N × γ]`; absent for the static baseline.
    pub squeeze: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LapParams {
    pub dims: LapDims,
    pub mode: AggregationMode,
    pub heads: Vec<LapHeadParams>,
    /// `[R × h·d]`
    pub w_out: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    /// Static per-layer logits `[N]`, only for [`AggregationMode::StaticSuperb`].
    pub layer_logits: Option<ParamId>,
}

/// Layer weights chosen by one head for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttentionRecord {
    /// `[N × T]`
    pub alpha: Tensor,
    /// `[d × T]` winning layer per latent value; sigmoid-max only.
    pub argmax: Option<Argmax>,
}

/// Uniform draw in ±√(6 / (fan_in + fan_out)) for a `[rows × cols]` matrix.
pub(crate) fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(vec![rows, cols], |_| rng.random_range(-bound..bound))
}

impl LapParams {
    /// Registers freshly initialized LAP weights under `lap.*` in `store`.
    pub fn init(
        store: &mut ParamStore,
        dims: LapDims,
        mode: AggregationMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        dims.validate()?;
        let gamma = dims.squeeze_dim();
        let mut heads = Vec::with_capacity(dims.heads);
        for i in 0..dims.heads {
            let w_in = store.add(
                format!("lap.head{i}.w_in"),
                xavier(rng, dims.head_dim, dims.channels),
                true,
            );
            let squeeze = (mode != AggregationMode::StaticSuperb).then(|| {
                let sq = store.add(
                    format!("lap.head{i}.w_sq"),
                    xavier(rng, gamma, dims.layers),
                    true,
                );
                let ex = store.add(
                    format!("lap.head{i}.w_ex"),
                    xavier(rng, dims.layers, gamma),
                    true,
                );
                (sq, ex)
            });
            heads.push(LapHeadParams { w_in, squeeze });
        }
        let w_out = store.add(
            "lap.w_out",
            xavier(rng, dims.out_dim, dims.heads * dims.head_dim),
            true,
        );
        let norm_gain = store.add(
            "lap.norm.gain",
            Tensor::full(vec![dims.out_dim], 1.0),
            false,
        );
        let norm_bias = store.add("lap.norm.bias", Tensor::zeros(vec![dims.out_dim]), false);
        let layer_logits = (mode == AggregationMode::StaticSuperb)
            .then(|| store.add("lap.layer_logits", Tensor::zeros(vec![dims.layers]), true));
        Ok(Self {
            dims,
            mode,
            heads,
            w_out,
            norm_gain,
            norm_bias,
            layer_logits,
        })
    }

    pub fn check_input(&self, x: &LayerStack) -> Result<()> {
        if x.channels() != self.dims.channels || x.layers() != self.dims.layers {
            return Err(Error::shape(
                "lap_pool",
                &[self.dims.channels, self.dims.layers],
                &[x.channels(), x.layers()],
            ));
        }
        Ok(())
    }

    /// Evaluates the block without keeping a tape around.
    pub fn pool(
        &self,
        store: &ParamStore,
        x: &LayerStack,
    ) -> Result<(Tensor, Vec<LayerAttentionRecord>)> {
        let mut tape = Tape::new();
        let (out, recs) = lap_pool(&mut tape, store, self, x)?;
        Ok((tape.value(out).clone(), recs))
    }
}

/// Fresh parameters in their own store; identical for identical seeds.
pub fn init_lap(
    dims: LapDims,
    mode: AggregationMode,
    seed: u64,
) -> Result<(ParamStore, LapParams)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = LapParams::init(&mut store, dims, mode, &mut rng)?;
    Ok((store, params))
}

/// Records the layer stack as a `[C × N·T]` matrix so every head can project
/// all layers and frames with one product.
fn stack_matrix(tape: &mut Tape, x: &LayerStack) -> Var {
    let (c, n, t) = (x.channels(), x.layers(), x.frames());
    let flat = x
        .tensor()
        .clone()
        .reshape(vec![c, n * t])
        .expect("same size");
    tape.constant(flat)
}

fn squeeze_excite(tape: &mut Tape, w_sq: Var, w_ex: Var, z: Var) -> Result<Var> {
    let squeezed = tape.matmul(w_sq, z)?;
    let act = tape.relu(squeezed);
    tape.matmul(w_ex, act)
}

/// One LAP head on its `[d × N·T]` projection of the stack. Returns `[d × T]`.
fn head_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &LapParams,
    head: &LapHeadParams,
    projected: Var,
    frames: usize,
    layer_logits: Option<Var>,
) -> Result<(Var, LayerAttentionRecord)> {
    let dims = params.dims;
    let (d, n, t) = (dims.head_dim, dims.layers, frames);
    let x = tape.reshape(projected, vec![d, n, t])?;

    let alpha_var = match params.mode {
        AggregationMode::StaticSuperb => {
            let logits = layer_logits
                .ok_or_else(|| Error::Invalid("static mode without layer logits".into()))?;
            let w = tape.softmax(logits, 0)?;
            let col = tape.reshape(w, vec![n, 1])?;
            tape.broadcast_to(col, &[n, t])?
        }
        mode => {
            let (sq, ex) = head
                .squeeze
                .ok_or_else(|| Error::Invalid("attentive head without squeeze weights".into()))?;
            let (x_max, _) = tape.reduce(x, 0, ReduceKind::Max)?;
            let (x_mean, _) = tape.reduce(x, 0, ReduceKind::Mean)?;
            let w_sq = tape.param(store, sq);
            let w_ex = tape.param(store, ex);
            let se_max = squeeze_excite(tape, w_sq, w_ex, x_max)?;
            let se_mean = squeeze_excite(tape, w_sq, w_ex, x_mean)?;
            let pre = tape.add(se_max, se_mean)?;
            if mode == AggregationMode::SigmoidMax {
                tape.sigmoid(pre)
            } else {
                tape.softmax(pre, 0)?
            }
        }
    };
    let alpha = tape.value(alpha_var).clone();
    let kind = match params.mode {
        AggregationMode::SigmoidMax => ReduceKind::Max,
        _ => ReduceKind::Sum,
    };
    let (y, argmax) = tape.weighted_layer_reduce(x, alpha_var, kind)?;
    Ok((y, LayerAttentionRecord { alpha, argmax }))
}

/// A single head as a standalone computation, returning `[d × T]`.
pub fn lap_head(
    tape: &mut Tape,
    store: &ParamStore,
    params: &LapParams,
    head: usize,
    x: &LayerStack,
) -> Result<(Var, LayerAttentionRecord)> {
    params.check_input(x)?;
    let head = params
        .heads
        .get(head)
        .ok_or_else(|| Error::Invalid(format!("no head {head}")))?;
    let stack = stack_matrix(tape, x);
    let w_in = tape.param(store, head.w_in);
    let projected = tape.matmul(w_in, stack)?;
    let logits = params.layer_logits.map(|id| tape.param(store, id));
    head_forward(tape, store, params, head, projected, x.frames(), logits)
}

/// All heads, concatenated, projected to `R` and normalized per frame.
/// Returns `[R × T]` and one record per head.
pub fn lap_pool(
    tape: &mut Tape,
    store: &ParamStore,
    params: &LapParams,
    x: &LayerStack,
) -> Result<(Var, Vec<LayerAttentionRecord>)> {
    params.check_input(x)?;
    let stack = stack_matrix(tape, x);
    let logits = params.layer_logits.map(|id| tape.param(store, id));
    let mut outs = Vec::with_capacity(params.heads.len());
    let mut recs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let w_in = tape.param(store, head.w_in);
        let projected = tape.matmul(w_in, stack)?;
        let (y, rec) = head_forward(tape, store, params, head, projected, x.frames(), logits)?;
        outs.push(y);
        recs.push(rec);
    }
    let cat = tape.concat(&outs, 0)?;
    let w_out = tape.param(store, params.w_out);
    let projected = tape.matmul(w_out, cat)?;
    let gain = tape.param(store, params.norm_gain);
    let bias = tape.param(store, params.norm_bias);
    let pooled = tape.affine_norm(projected, gain, bias, 0)?;
    Ok((pooled, recs))
}

/// Static softmax-weighted sum of layers, `[C × T]`.
pub fn static_superb_pool(x: &LayerStack, w: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let logits = tape.constant(w.clone());
    let out = static_superb_pool_on(&mut tape, x, logits)?;
    Ok(tape.value(out).clone())
}

/// Recorded form of [`static_superb_pool`] with learnable layer logits.
pub fn static_superb_pool_on(tape: &mut Tape, x: &LayerStack, w: Var) -> Result<Var> {
    let (c, n, t) = (x.channels(), x.layers(), x.frames());
    if tape.value(w).shape() != [n] {
        return Err(Error::shape(
            "static_superb_pool",
            &[n],
            tape.value(w).shape(),
        ));
    }
    let weights = tape.softmax(w, 0)?;
    let wb = tape.reshape(weights, vec![1, n, 1])?;
    let stack = tape.constant(x.tensor().clone());
    debug_assert_eq!(tape.value(stack).shape(), [c, n, t]);
    let scaled = tape.mul(wb, stack)?;
    Ok(tape.reduce(scaled, 1, ReduceKind::Sum)?.0)
}

fn require_argmax(rec: &LayerAttentionRecord) -> Result<&Argmax> {
    rec.argmax.as_ref().ok_or_else(|| {
        Error::Invalid(
            "layer usage needs sigmoid-max records; weighted-sum variants select no layer".into(),
        )
    })
}

/// How often each layer won the max over layers, across all heads, latent
/// positions and frames of the given records.
pub fn layer_usage(recs: &[LayerAttentionRecord], layers: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; layers];
    for rec in recs {
        for &l in &require_argmax(rec)?.index {
            counts[l] += 1;
        }
    }
    Ok(counts)
}

/// Per-frame selection counts `[N × T]` for the records of one utterance.
pub fn layer_usage_per_frame(
    recs: &[LayerAttentionRecord],
    layers: usize,
    frames: usize,
) -> Result<Vec<Vec<u64>>> {
    let mut counts = vec![vec![0u64; frames]; layers];
    for rec in recs {
        let arg = require_argmax(rec)?;
        if arg.shape.len() != 2 || arg.shape[1] != frames {
            return Err(Error::Invalid(format!(
                "record frames {:?} != {frames}",
                arg.shape
            )));
        }
        for (i, &l) in arg.index.iter().enumerate() {
            counts[l][i % frames] += 1;
        }
    }
    Ok(counts)
}

/// Most-selected layer of each frame of a `[N × T]` count matrix; ties go to
/// the lower layer.
pub fn dominant_layers(per_frame: &[Vec<u64>]) -> Vec<usize> {
    let frames = per_frame.first().map_or(0, Vec::len);
    (0..frames)
        .map(|t| {
            let mut best = 0;
            for l in 1..per_frame.len() {
                if per_frame[l][t] > per_frame[best][t] {
                    best = l;
                }
            }
            best
        })
        .collect()
}

/// Writes `layer,count,fraction` rows.
pub fn write_usage_csv(counts: &[u64], mut out: impl Write) -> std::io::Result<()> {
    let total: u64 = counts.iter().sum();
    writeln!(out, "layer,count,fraction")?;
    for (l, &c) in counts.iter().enumerate() {
        let frac = if total == 0 {
            0.0
        } else {
            c as f64 / total as f64
        };
        writeln!(out, "{l},{c},{frac:.6}")?;
    }
    Ok(())
}
