use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::{KeyValueConfig, RunConfig};
use super::optim::OptimizerState;
use super::schedule::one_cycle_lr;
use super::SpeakerModel;
use crate::error::{Error, Result};
use crate::objectives::{sample_loss, Stage};
use crate::pooling::LayerStack;
use crate::store::{load_stacks, Manifest};
use crate::tensor::{Gradients, Tape};

pub const METRICS_HEADER: &str = "epoch\tstep\tlr\tmargin\tloss\tacc";

/// Labeled training utterances held in memory.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub stacks: Vec<LayerStack>,
    pub labels: Vec<usize>,
    /// Speaker ids in label order.
    pub speakers: Vec<String>,
}

impl TrainData {
    pub fn from_manifest(manifest: &Manifest, root: &Path) -> Result<Self> {
        let index = manifest.speaker_index();
        let stacks = load_stacks(manifest, root)?;
        let labels = manifest.rows.iter().map(|r| index[&r.speaker]).collect();
        Ok(Self {
            stacks,
            labels,
            speakers: index.into_keys().collect(),
        })
    }

    /// Loads the manifest at `path`, resolving files against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = Manifest::read(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&manifest, root)
    }

    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub margin: f64,
    pub penalty: f64,
    pub loss: f64,
    pub acc: f64,
    pub stage: Stage,
}

impl EpochMetrics {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.step, self.lr, self.margin, self.loss, self.acc
        )
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Trains from scratch, or continues `resume`, up to the configured number
/// of epochs or until `stop_after` epochs have completed. Calls `on_epoch`
/// after every epoch and returns the final state.
///
/// Per-sample gradients inside a batch are computed in parallel and summed
/// in batch order, so results do not depend on the thread count.
pub fn train(
    cfg: &RunConfig,
    data: &TrainData,
    resume: Option<Checkpoint>,
    stop_after: Option<usize>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("no training utterances".into()));
    }
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let schedule = cfg.schedule(per_epoch);
    let mut state = match resume {
        Some(ck) => {
            if ck.config.hash() != cfg.hash() {
                return Err(Error::Config(
                    "resume checkpoint was written for a different configuration".into(),
                ));
            }
            if ck.speakers != data.speakers {
                return Err(Error::Config(
                    "resume checkpoint has a different speaker list".into(),
                ));
            }
            ck
        }
        None => {
            let model = SpeakerModel::init(cfg, data.speakers.len())?;
            let optimizer = OptimizerState::new(&model.backend.store, cfg.adam);
            Checkpoint {
                config: cfg.clone(),
                speakers: data.speakers.clone(),
                epoch: 0,
                step: 0,
                model,
                optimizer,
            }
        }
    };

    let total_epochs = cfg.epochs + cfg.large_margin_epochs;
    let last = stop_after.map_or(total_epochs, |s| s.min(total_epochs));
    while state.epoch < last {
        let epoch = state.epoch;
        let stage = if epoch < cfg.epochs {
            Stage::Main
        } else {
            Stage::LargeMargin
        };
        let (margin, penalty) = cfg.margins.at(epoch, stage);
        let loss_cfg = cfg.loss.with_margins(margin, penalty);
        state.optimizer.config.weight_decay = match stage {
            Stage::Main => cfg.adam.weight_decay,
            Stage::LargeMargin => cfg.large_margin_weight_decay,
        };

        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, cfg.lr_min);
        for batch in order.chunks(cfg.batch_size) {
            lr = match stage {
                Stage::Main => one_cycle_lr(state.step as usize, &schedule),
                Stage::LargeMargin => cfg.lr_min,
            };
            let model = &state.model;
            let results: Vec<Result<(f64, bool, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::new();
                    let (emb, _) = model.backend.forward(&mut tape, &data.stacks[i])?;
                    let (loss, hit) = sample_loss(
                        &mut tape,
                        &model.backend.store,
                        &model.head,
                        emb,
                        data.labels[i],
                        &loss_cfg,
                    )?;
                    let value = tape.value(loss).data()[0];
                    Ok((value, hit, tape.backward(loss)?))
                })
                .collect();
            let mut grads = Gradients::default();
            let mut batch_loss = 0.0;
            for r in results {
                let (value, hit, g) = r?;
                batch_loss += value;
                correct += usize::from(hit);
                grads.merge(g)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: state.step as usize,
                    lr,
                    margin,
                });
            }
            loss_sum += batch_loss;
            grads.scale(1.0 / batch.len() as f64);
            let store = &mut state.model.backend.store;
            store.accumulate(&grads)?;
            state.optimizer.step(store, lr)?;
            state.step += 1;
        }
        state.epoch += 1;
        let metrics = EpochMetrics {
            epoch,
            step: state.step,
            lr,
            margin,
            penalty,
            loss: loss_sum / data.len() as f64,
            acc: correct as f64 / data.len() as f64,
            stage,
        };
        log::info!("{}", metrics.tsv_line());
        on_epoch(&metrics);
    }
    Ok(state)
}
