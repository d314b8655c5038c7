//! Synthetic layer stacks in which speaker identity lives in one layer per
//! frame, and that layer changes over time.
//!
//! Every speaker `s` owns a unit vector `v_s = β·u + √(1−β²)·r_s`, where `u`
//! is a direction shared by all speakers and `r_s ⊥ u` is speaker specific.
//! At frame `t` the active layer `l(t)` carries `a·v_s` plus noise. Every
//! other layer carries a distractor of the same amplitude along a random
//! direction orthogonal to `u`, redrawn per layer and segment, plus noise.
//! The shared `u` component is what marks the active layer, so a model that
//! re-weights layers per frame can find the speaker signal while a fixed
//! layer mixture averages it with distractors.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::pooling::LayerStack;
use crate::store::{self, Manifest, ManifestRow};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub speakers: usize,
    pub utts_per_speaker: usize,
    pub channels: usize,
    pub layers: usize,
    pub frames: usize,
    /// Amplitude `a` of the speaker vector on the active layer.
    pub amplitude: f64,
    pub noise_std: f64,
    pub distractor: f64,
    /// Frames per constant-active-layer segment.
    pub segment_len: usize,
    /// Weight `β` of the shared direction in every speaker vector.
    pub shared: f64,
    /// Utterances per speaker reserved for evaluation (the last ones).
    pub holdout_per_speaker: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            speakers: 32,
            utts_per_speaker: 50,
            channels: 32,
            layers: 8,
            frames: 50,
            amplitude: 2.0,
            noise_std: 0.5,
            distractor: 2.0,
            segment_len: 10,
            shared: 0.6,
            holdout_per_speaker: 10,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.speakers,
            self.utts_per_speaker,
            self.channels,
            self.layers,
            self.frames,
            self.segment_len,
        ];
        if counts.contains(&0) {
            return Err(Error::Config(format!(
                "synthetic dataset sizes must be positive: {self:?}"
            )));
        }
        if self.channels < 2 {
            return Err(Error::Config(
                "need at least 2 channels for a shared direction".into(),
            ));
        }
        if !(self.amplitude > 0.0 && self.distractor >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::Config(
                "amplitude must be positive, noise and distractor non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.shared) {
            return Err(Error::Config(format!(
                "shared weight {} outside [0, 1)",
                self.shared
            )));
        }
        if self.holdout_per_speaker >= self.utts_per_speaker {
            return Err(Error::Config(
                "holdout must leave training utterances per speaker".into(),
            ));
        }
        Ok(())
    }

    pub fn num_utterances(&self) -> usize {
        self.speakers * self.utts_per_speaker
    }

    pub fn speaker_name(s: usize) -> String {
        format!("spk{s:03}")
    }

    pub fn utt_name(s: usize, u: usize) -> String {
        format!("spk{s:03}-u{u:03}")
    }

    fn shared_direction(&self) -> Vec<f64> {
        vec![1.0 / (self.channels as f64).sqrt(); self.channels]
    }

    /// Unit speaker vectors `v_s`, one row per speaker.
    pub fn speaker_vectors(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let u = self.shared_direction();
        let beta = self.shared;
        (0..self.speakers)
            .map(|_| {
                let r = random_orthogonal_unit(&mut rng, &u);
                u.iter()
                    .zip(&r)
                    .map(|(a, b)| beta * a + (1.0 - beta * beta).sqrt() * b)
                    .collect()
            })
            .collect()
    }

    /// Active layer per frame: segments of `segment_len` frames stepping
    /// through the layers from a per-utterance starting layer.
    pub fn active_layers(&self, start: usize) -> Vec<usize> {
        (0..self.frames)
            .map(|t| (start + t / self.segment_len) % self.layers)
            .collect()
    }

    /// Utterance `u` of speaker `s`: the stack and its active-layer schedule.
    pub fn utterance(
        &self,
        speaker_vectors: &[Vec<f64>],
        s: usize,
        u: usize,
    ) -> Result<(LayerStack, Vec<usize>)> {
        let (c, n, t) = (self.channels, self.layers, self.frames);
        let index = (s * self.utts_per_speaker + u) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index + 1);
        let start = rng.random_range(0..n);
        let active = self.active_layers(start);
        let shared = self.shared_direction();
        let segments = t.div_ceil(self.segment_len);
        let distractors: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| {
                (0..segments)
                    .map(|_| random_orthogonal_unit(&mut rng, &shared))
                    .collect()
            })
            .collect();
        let v = &speaker_vectors[s];
        let mut data = vec![0.0; c * n * t];
        for (f, &act) in active.iter().enumerate() {
            for l in 0..n {
                for ch in 0..c {
                    let clean = if l == act {
                        self.amplitude * v[ch]
                    } else {
                        self.distractor * distractors[l][f / self.segment_len][ch]
                    };
                    let noise: f64 = rng.sample(StandardNormal);
                    data[ch * n * t + l * t + f] = clean + self.noise_std * noise;
                }
            }
        }
        let stack = LayerStack::new(Self::utt_name(s, u), Tensor::new(vec![c, n, t], data)?)?;
        Ok((stack, active))
    }
}

fn random_orthogonal_unit(rng: &mut impl Rng, u: &[f64]) -> Vec<f64> {
    loop {
        let mut r: Vec<f64> = (0..u.len()).map(|_| StandardNormal.sample(rng)).collect();
        let dot: f64 = r.iter().zip(u).map(|(a, b)| a * b).sum();
        r.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        let norm = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            r.iter_mut().for_each(|a| *a /= norm);
            return r;
        }
    }
}

/// Files written by [`make_synth_dataset`].
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub trials: PathBuf,
    pub schedule: PathBuf,
}

pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const EVAL_MANIFEST: &str = "eval.tsv";
pub const TRIALS: &str = "trials.txt";
pub const SCHEDULE: &str = "active_layers.tsv";

/// Writes one LSF1 file per utterance under `out/feats`, train and eval
/// manifests, labeled trials over every pair of held-out utterances, and the
/// active-layer schedule of each utterance.
pub fn make_synth_dataset(spec: &SynthSpec, out: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    if !out.is_dir() {
        return Err(Error::io(
            out,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "output directory does not exist",
            ),
        ));
    }
    let feats = out.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let vectors = spec.speaker_vectors();
    let mut train = Manifest::default();
    let mut eval = Manifest::default();
    let mut schedule = String::new();
    for s in 0..spec.speakers {
        for u in 0..spec.utts_per_speaker {
            let (stack, active) = spec.utterance(&vectors, s, u)?;
            let rel = format!("feats/{}.lsf", stack.utt_id);
            store::write_layerstack(&stack, &out.join(&rel))?;
            let row = ManifestRow {
                utt_id: stack.utt_id.clone(),
                path: rel,
                speaker: SynthSpec::speaker_name(s),
                num_frames: stack.frames(),
            };
            let joined: Vec<String> = active.iter().map(|l| l.to_string()).collect();
            schedule.push_str(&format!("{}\t{}\n", stack.utt_id, joined.join(",")));
            if u >= spec.utts_per_speaker - spec.holdout_per_speaker {
                eval.rows.push(row);
            } else {
                train.rows.push(row);
            }
        }
    }
    let mut trials = String::new();
    for (i, a) in eval.rows.iter().enumerate() {
        for b in &eval.rows[i + 1..] {
            let label = u8::from(a.speaker == b.speaker);
            trials.push_str(&format!("{label} {} {}\n", a.utt_id, b.utt_id));
        }
    }
    let result = SynthOutput {
        train_manifest: out.join(TRAIN_MANIFEST),
        eval_manifest: out.join(EVAL_MANIFEST),
        trials: out.join(TRIALS),
        schedule: out.join(SCHEDULE),
    };
    train.write(&result.train_manifest)?;
    eval.write(&result.eval_manifest)?;
    store::write_atomic(&result.trials, trials.as_bytes())?;
    store::write_atomic(&result.schedule, schedule.as_bytes())?;
    Ok(result)
}

/// Parses the `utt<TAB>l0,l1,...` schedule file.
pub fn read_schedule(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: &str| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: msg.into(),
        };
        let (utt, layers) = line
            .split_once('\t')
            .ok_or_else(|| err("expected utt<TAB>layers"))?;
        let layers = layers
            .split(',')
            .map(|v| v.parse::<usize>().map_err(|_| err("bad layer index")))
            .collect::<Result<Vec<_>>>()?;
        out.push((utt.to_string(), layers));
    }
    Ok(out)
}
