use super::metrics::cosine_score;
use crate::error::{Error, Result};

/// Mean and population standard deviation of the top cohort scores of one
/// side of a trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
}

/// Imposter cohort of unit-normalized embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    vectors: Vec<Vec<f64>>,
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl Cohort {
    pub fn new(vectors: &[Vec<f64>]) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::Invalid("empty s-norm cohort".into()));
        }
        let dim = vectors[0].len();
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Invalid("cohort embeddings differ in length".into()));
        }
        Ok(Self {
            vectors: vectors.iter().map(|v| unit(v)).collect::<Result<_>>()?,
        })
    }

    /// Unit-normalized per-speaker means of `(speaker, embedding)` pairs, in
    /// order of first appearance.
    pub fn from_speaker_means<'a>(
        items: impl IntoIterator<Item = (&'a str, &'a [f64])>,
    ) -> Result<Self> {
        let mut names: Vec<&str> = Vec::new();
        let mut sums: Vec<Vec<f64>> = Vec::new();
        for (spk, e) in items {
            let idx = match names.iter().position(|n| *n == spk) {
                Some(i) => i,
                None => {
                    names.push(spk);
                    sums.push(vec![0.0; e.len()]);
                    names.len() - 1
                }
            };
            if sums[idx].len() != e.len() {
                return Err(Error::Invalid("cohort embeddings differ in length".into()));
            }
            let e = unit(e)?;
            sums[idx].iter_mut().zip(&e).for_each(|(s, x)| *s += x);
        }
        Self::new(&sums)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Statistics of the `k` highest cohort scores of `e`.
    pub fn stats(&self, e: &[f64], k: usize) -> Result<CohortStats> {
        if k < 2 || k > self.len() {
            return Err(Error::Invalid(format!(
                "adaptive s-norm needs 2 <= K <= cohort size ({}), got {k}",
                self.len()
            )));
        }
        let mut scores = self
            .vectors
            .iter()
            .map(|c| cosine_score(e, c))
            .collect::<Result<Vec<_>>>()?;
        scores.sort_by(|a, b| b.total_cmp(a));
        Ok(stats_of(&scores[..k]))
    }
}

/// Mean and population standard deviation.
pub fn stats_of(scores: &[f64]) -> CohortStats {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    CohortStats {
        mean,
        std: var.sqrt(),
    }
}

/// `0.5·((s − μ_e)/σ_e + (s − μ_t)/σ_t)`.
pub fn snorm_from_stats(score: f64, enroll: CohortStats, test: CohortStats) -> Result<f64> {
    for (side, st) in [("enroll", enroll), ("test", test)] {
        if !(st.std > 0.0) {
            return Err(Error::Degenerate(format!(
                "s-norm: {side}-side cohort scores have zero spread (mean {})",
                st.mean
            )));
        }
    }
    Ok(0.5 * ((score - enroll.mean) / enroll.std + (score - test.mean) / test.std))
}

/// Adaptive symmetric score normalization with the top-`k` cohort scores of
/// each side.
pub fn adaptive_snorm(
    score: f64,
    enroll: &[f64],
    test: &[f64],
    cohort: &Cohort,
    k: usize,
) -> Result<f64> {
    snorm_from_stats(score, cohort.stats(enroll, k)?, cohort.stats(test, k)?)
}
