//! Optimizer, learning-rate schedule, training loop, checkpoints and the
//! synthetic layered dataset used for desk-scale experiments.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod runner;
pub mod schedule;
pub mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::Checkpoint;
pub use config::{KeyValueConfig, RunConfig};
pub use optim::{AdamConfig, OptimizerState};
pub use runner::{train, EpochMetrics, TrainData, METRICS_HEADER};
pub use schedule::{one_cycle_lr, ScheduleConfig};
pub use synth::{make_synth_dataset, SynthSpec};

use crate::embedder::SpeakerBackend;
use crate::error::Result;
use crate::objectives::ClassifierHead;

/// Backend plus the training classifier, sharing one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerModel {
    pub backend: SpeakerBackend,
    pub head: ClassifierHead,
}

impl SpeakerModel {
    /// Fresh model; the layout depends only on the config and speaker count,
    /// the values only on the seed.
    pub fn init(cfg: &RunConfig, speakers: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut backend = SpeakerBackend::init_with(cfg.model, &mut rng)?;
        let head = ClassifierHead::init(
            &mut backend.store,
            speakers,
            cfg.loss.subcenters,
            cfg.model.emb_dim,
            &mut rng,
        )?;
        Ok(Self { backend, head })
    }
}
