//! Sub-center additive angular margin softmax with an inter-top-k penalty.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, ReduceKind, Tape, Tensor, Var};

/// Cosines within this distance outside [-1, 1] are clamped, beyond it rejected.
const COS_TOLERANCE: f64 = 1e-6;

/// `S` speakers with `K` prototype vectors each, stored as `[S·K × E]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub speakers: usize,
    pub subcenters: usize,
    pub emb_dim: usize,
}

impl ClassifierHead {
    pub fn init(
        store: &mut ParamStore,
        speakers: usize,
        subcenters: usize,
        emb_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if speakers == 0 || subcenters == 0 || emb_dim == 0 {
            return Err(Error::Config(
                "classifier dimensions must be positive".into(),
            ));
        }
        let value = crate::pooling::xavier(rng, speakers * subcenters, emb_dim);
        let weight = store.add("classifier.weight", value, true);
        Ok(Self {
            weight,
            speakers,
            subcenters,
            emb_dim,
        })
    }

    /// Cosine to the closest sub-center of every speaker, without gradients.
    pub fn cosines(&self, store: &ParamStore, embedding: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::vector(embedding.to_vec()));
        let cos = subcenter_cosines(&mut tape, store, self, e)?;
        Ok(tape.value(cos).clone())
    }
}

/// `cos[s] = max_k cos(e, W[s, k])`, shape `[S]`.
pub fn subcenter_cosines(
    tape: &mut Tape,
    store: &ParamStore,
    head: &ClassifierHead,
    embedding: Var,
) -> Result<Var> {
    let n = tape.value(embedding).numel();
    if n != head.emb_dim {
        return Err(Error::shape("subcenter_cosines", &[head.emb_dim], &[n]));
    }
    let w = tape.param(store, head.weight);
    let w = tape.l2_normalize(w, 1)?;
    let e = tape.reshape(embedding, vec![n, 1])?;
    let e = tape.l2_normalize(e, 0)?;
    let cos = tape.matmul(w, e)?;
    let cos = tape.reshape(cos, vec![head.speakers, head.subcenters])?;
    Ok(tape.reduce(cos, 1, ReduceKind::Max)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub scale: f64,
    pub margin: f64,
    pub topk: usize,
    pub penalty: f64,
    pub subcenters: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.0,
            topk: 5,
            penalty: 0.0,
            subcenters: 3,
        }
    }
}

impl LossConfig {
    pub fn with_margins(self, margin: f64, penalty: f64) -> Self {
        Self {
            margin,
            penalty,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!(
                "margin must lie in [0, pi/2), got {}",
                self.margin
            )));
        }
        if !(self.penalty >= 0.0) {
            return Err(Error::Config(format!(
                "penalty must be non-negative, got {}",
                self.penalty
            )));
        }
        if self.subcenters == 0 {
            return Err(Error::Config("subcenters must be positive".into()));
        }
        Ok(())
    }
}

/// Angular shift per class: `+m` for the target, `−m'` for the `topk`
/// hardest non-targets, `0` elsewhere.
///
/// The hardest non-targets are those with the highest cosine; any class that
/// beats the target is among them, and the remaining slots fall to the next
/// highest. Ties resolve to the lower index.
pub fn angular_shifts(cos: &[f64], label: usize, cfg: &LossConfig) -> Result<Vec<f64>> {
    if label >= cos.len() {
        return Err(Error::Invalid(format!(
            "label {label} out of range for {} classes",
            cos.len()
        )));
    }
    if let Some(c) = cos
        .iter()
        .find(|c| c.abs() > 1.0 + COS_TOLERANCE || c.is_nan())
    {
        return Err(Error::Invalid(format!("cosine {c} outside [-1, 1]")));
    }
    let mut shifts = vec![0.0; cos.len()];
    shifts[label] = cfg.margin;
    let mut others: Vec<usize> = (0..cos.len()).filter(|&j| j != label).collect();
    others.sort_by(|&a, &b| cos[b].total_cmp(&cos[a]).then(a.cmp(&b)));
    for &j in others.iter().take(cfg.topk) {
        shifts[j] = -cfg.penalty;
    }
    Ok(shifts)
}

/// `s·cos(θ + δ)` and its derivative with respect to `cos θ`.
fn shifted_logit(c: f64, shift: f64, scale: f64, is_target: bool) -> (f64, f64) {
    if shift == 0.0 {
        return (scale * c, scale);
    }
    let c = c.clamp(-1.0, 1.0);
    let theta = c.acos();
    if is_target && theta + shift > std::f64::consts::PI {
        return (scale * (c - shift * shift.sin()), scale);
    }
    let sin_theta = theta.sin().max(1e-6);
    (
        scale * (theta + shift).cos(),
        scale * (theta + shift).sin() / sin_theta,
    )
}

/// Margin-adjusted logits `[S]` for one sample.
pub fn aam_intertopk_logits(
    tape: &mut Tape,
    cos: Var,
    label: usize,
    cfg: &LossConfig,
) -> Result<Var> {
    let shifts = angular_shifts(tape.value(cos).data(), label, cfg)?;
    let scale = cfg.scale;
    Ok(tape.map_elementwise(cos, |c, j| shifted_logit(c, shifts[j], scale, j == label)))
}

pub fn aam_intertopk_logits_value(cos: &Tensor, label: usize, cfg: &LossConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c = tape.constant(cos.clone());
    let l = aam_intertopk_logits(&mut tape, c, label, cfg)?;
    Ok(tape.value(l).clone())
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.softmax_cross_entropy(l, label)?;
    Ok(tape.value(loss).data()[0])
}

/// Full per-sample objective: sub-center cosines, margins, cross-entropy.
/// Also reports whether the raw cosines rank the label first.
pub fn sample_loss(
    tape: &mut Tape,
    store: &ParamStore,
    head: &ClassifierHead,
    embedding: Var,
    label: usize,
    cfg: &LossConfig,
) -> Result<(Var, bool)> {
    let cos = subcenter_cosines(tape, store, head, embedding)?;
    let c = tape.value(cos).data();
    let best = (0..c.len()).fold(0, |b, j| if c[j] > c[b] { j } else { b });
    let logits = aam_intertopk_logits(tape, cos, label, cfg)?;
    Ok((tape.softmax_cross_entropy(logits, label)?, best == label))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Main,
    LargeMargin,
}

/// Margin ramp: zero at epoch 0, geometric from `start` at epoch 1 to
/// `final_margin` at `ramp_epochs`, flat afterwards. The penalty follows the
/// margin proportionally.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginSchedule {
    pub ramp_epochs: usize,
    pub start: f64,
    pub final_margin: f64,
    pub final_penalty: f64,
    pub large_margin: f64,
}

impl Default for MarginSchedule {
    fn default() -> Self {
        Self {
            ramp_epochs: 20,
            start: 0.01,
            final_margin: 0.3,
            final_penalty: 0.06,
            large_margin: 0.5,
        }
    }
}

impl MarginSchedule {
    /// `(m, m')` for an epoch.
    pub fn at(&self, epoch: usize, stage: Stage) -> (f64, f64) {
        if stage == Stage::LargeMargin {
            return (self.large_margin, 0.0);
        }
        let m = match epoch {
            0 => 0.0,
            e if e >= self.ramp_epochs => self.final_margin,
            e => {
                let frac = (e - 1) as f64 / (self.ramp_epochs - 1) as f64;
                self.start * (self.final_margin / self.start).powf(frac)
            }
        };
        (m, self.final_penalty * m / self.final_margin)
    }
}

pub fn margin_at(epoch: usize, stage: Stage) -> (f64, f64) {
    MarginSchedule::default().at(epoch, stage)
}
