use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::calibration::{CalibrationModel, QualityFeatures};
use super::metrics::cosine_score;
use super::snorm::{snorm_from_stats, Cohort, CohortStats};
use crate::embedder::{format_significant, SpeakerEmbedding};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    /// `Some(true)` for a target pair; `None` in unlabeled lists.
    pub label: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    /// Parses `label enroll test` or `enroll test` lines; a list must use one
    /// form throughout.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut trials = Vec::new();
        let mut labeled: Option<bool> = None;
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let trial = match fields.as_slice() {
                [] => continue,
                [label, e, t] => {
                    let label = match *label {
                        "1" => true,
                        "0" => false,
                        other => return Err(err(format!("label must be 0 or 1, got `{other}`"))),
                    };
                    Trial {
                        enroll: e.to_string(),
                        test: t.to_string(),
                        label: Some(label),
                    }
                }
                [e, t] => Trial {
                    enroll: e.to_string(),
                    test: t.to_string(),
                    label: None,
                },
                _ => {
                    return Err(err(format!(
                        "expected 2 or 3 fields, found {}",
                        fields.len()
                    )))
                }
            };
            let this = trial.label.is_some();
            match labeled {
                None => labeled = Some(this),
                Some(prev) if prev != this => {
                    return Err(err("mixes labeled and unlabeled trials".into()));
                }
                _ => {}
            }
            trials.push(trial);
        }
        Ok(Self { trials })
    }

    pub fn labels(&self) -> Option<Vec<bool>> {
        self.trials.iter().map(|t| t.label).collect()
    }
}

/// Embeddings addressable by utterance id.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    items: HashMap<String, SpeakerEmbedding>,
}

impl EmbeddingTable {
    pub fn new(embs: impl IntoIterator<Item = SpeakerEmbedding>) -> Self {
        Self {
            items: embs.into_iter().map(|e| (e.utt_id.clone(), e)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Result<&SpeakerEmbedding> {
        self.items
            .get(id)
            .ok_or_else(|| Error::MissingId(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Optional stages applied after cosine scoring.
#[derive(Clone, Debug, Default)]
pub struct ScoreOptions {
    /// Cohort and adaptive top-K size.
    pub snorm: Option<(Cohort, usize)>,
    pub calibration: Option<CalibrationModel>,
}

/// Raw cosine, then optional s-norm, then optional calibration; one score per
/// trial in list order. Cohort statistics are computed once per utterance.
pub fn score_trials(
    list: &TrialList,
    table: &EmbeddingTable,
    opts: &ScoreOptions,
) -> Result<Vec<f64>> {
    let mut stats: HashMap<&str, CohortStats> = HashMap::new();
    if let Some((cohort, k)) = &opts.snorm {
        for t in &list.trials {
            for id in [t.enroll.as_str(), t.test.as_str()] {
                if !stats.contains_key(id) {
                    stats.insert(id, cohort.stats(&table.get(id)?.vector, *k)?);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(list.trials.len());
    for t in &list.trials {
        let (e, v) = (table.get(&t.enroll)?, table.get(&t.test)?);
        let mut s = cosine_score(&e.vector, &v.vector)?;
        if opts.snorm.is_some() {
            s = snorm_from_stats(s, stats[t.enroll.as_str()], stats[t.test.as_str()])?;
        }
        if let Some(model) = &opts.calibration {
            s = model.apply(&QualityFeatures::new(s, e.num_frames, v.num_frames));
        }
        out.push(s);
    }
    Ok(out)
}

/// `enroll<TAB>test<TAB>score` lines, scores with 17 significant digits so
/// they re-read exactly.
pub fn write_scores(list: &TrialList, scores: &[f64], mut out: impl Write) -> std::io::Result<()> {
    for (t, s) in list.trials.iter().zip(scores) {
        writeln!(
            out,
            "{}\t{}\t{}",
            t.enroll,
            t.test,
            format_significant(*s, 17)
        )?;
    }
    Ok(())
}

pub fn read_scores(input: impl BufRead, source: &str) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let err = |msg: &str| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg: msg.into(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [e, t, s] = fields.as_slice() else {
            return Err(err("expected enroll<TAB>test<TAB>score"));
        };
        let s: f64 = s.parse().map_err(|_| err("bad score"))?;
        out.push((e.to_string(), t.to_string(), s));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_forms() {
        let one = TrialList::parse("1 a b", "t").unwrap();
        assert_eq!(one.trials[0].label, Some(true));
        let two = TrialList::parse("0 a c\n1 a b\n", "t").unwrap();
        assert_eq!(two.labels(), Some(vec![false, true]));
        assert_eq!(two.trials[1].test, "b");
        let plain = TrialList::parse("a b\n", "t").unwrap();
        assert_eq!(plain.labels(), None);
    }

    #[test]
    fn mixed_and_malformed_lines_report_line_numbers() {
        let e = TrialList::parse("1 a b\na c\n", "t")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2"), "{e}");
        let e = TrialList::parse("1 a b\n2 a c\n", "t")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2"), "{e}");
        assert!(TrialList::parse("a b c d\n", "t").is_err());
    }
}
