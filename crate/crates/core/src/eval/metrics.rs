use crate::error::{Error, Result};

/// Cosine similarity of two embeddings.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_score", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Miss and false-alarm rates at one threshold; trials scoring strictly
/// above the threshold are accepted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

fn check_labels(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "detection metrics",
            &[scores.len()],
            &[labels.len()],
        ));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Invalid(format!("score {i} is not finite")));
    }
    let targets = labels.iter().filter(|&&l| l).count();
    let nontargets = labels.len() - targets;
    if targets == 0 || nontargets == 0 {
        return Err(Error::Invalid(
            "detection metrics need at least one target and one nontarget trial".into(),
        ));
    }
    Ok((targets, nontargets))
}

/// Every distinct operating point, from accept-all to reject-all. Interior
/// thresholds sit at midpoints between consecutive distinct scores; the two
/// ends sit one unit outside the score range.
pub fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<OperatingPoint>> {
    let (targets, nontargets) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (nt, nn) = (targets as f64, nontargets as f64);
    let mut points = Vec::with_capacity(scores.len() + 1);
    let (mut misses, mut accepted_nontargets) = (0usize, nontargets);
    points.push(OperatingPoint {
        threshold: scores[order[0]] - 1.0,
        p_miss: 0.0,
        p_fa: 1.0,
    });
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                misses += 1;
            } else {
                accepted_nontargets -= 1;
            }
            i += 1;
        }
        let threshold = if i < order.len() {
            0.5 * (s + scores[order[i]])
        } else {
            s + 1.0
        };
        points.push(OperatingPoint {
            threshold,
            p_miss: misses as f64 / nt,
            p_fa: accepted_nontargets as f64 / nn,
        });
    }
    Ok(points)
}

/// Equal error rate and its threshold. Where no operating point has equal
/// rates, both rates are interpolated linearly between the two points that
/// bracket the crossing.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let points = operating_points(scores, labels)?;
    eer_from_points(&points)
}

pub(crate) fn eer_from_points(points: &[OperatingPoint]) -> Result<(f64, f64)> {
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.p_miss - a.p_fa;
        let db = b.p_miss - b.p_fa;
        if da == 0.0 {
            return Ok((a.p_miss, a.threshold));
        }
        if da < 0.0 && db >= 0.0 {
            let t = da / (da - db);
            let rate = a.p_miss + t * (b.p_miss - a.p_miss);
            let threshold = a.threshold + t * (b.threshold - a.threshold);
            return Ok((rate, threshold));
        }
    }
    // The last point is reject-all (miss 1, fa 0), so a crossing always exists.
    let last = points.last().expect("at least two points");
    Ok((last.p_miss, last.threshold))
}

/// Normalized minimum detection cost and the threshold attaining it:
/// `min_τ (c_miss·P·P_miss(τ) + c_fa·(1−P)·P_fa(τ)) / min(c_miss·P, c_fa·(1−P))`.
pub fn min_dcf(
    scores: &[f64],
    labels: &[bool],
    p_target: f64,
    c_fa: f64,
    c_miss: f64,
) -> Result<(f64, f64)> {
    if !(p_target > 0.0 && p_target < 1.0) || c_fa <= 0.0 || c_miss <= 0.0 {
        return Err(Error::Invalid(format!(
            "need 0 < p_target < 1 and positive costs, got {p_target}, {c_fa}, {c_miss}"
        )));
    }
    let points = operating_points(scores, labels)?;
    Ok(min_dcf_from_points(&points, p_target, c_fa, c_miss))
}

pub(crate) fn min_dcf_from_points(
    points: &[OperatingPoint],
    p_target: f64,
    c_fa: f64,
    c_miss: f64,
) -> (f64, f64) {
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    let mut best = (f64::INFINITY, 0.0);
    for p in points {
        let cost = (c_miss * p_target * p.p_miss + c_fa * (1.0 - p_target) * p.p_fa) / norm;
        if cost < best.0 {
            best = (cost, p.threshold);
        }
    }
    best
}

/// EER plus minDCF at both target priors, with unit costs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetMetrics {
    pub eer: f64,
    pub eer_threshold: f64,
    pub dcf_p01: f64,
    pub dcf_p01_threshold: f64,
    pub dcf_p05: f64,
    pub dcf_p05_threshold: f64,
}

impl DetMetrics {
    pub fn compute(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let points = operating_points(scores, labels)?;
        let (eer, eer_threshold) = eer_from_points(&points)?;
        let (dcf_p01, dcf_p01_threshold) = min_dcf_from_points(&points, 0.01, 1.0, 1.0);
        let (dcf_p05, dcf_p05_threshold) = min_dcf_from_points(&points, 0.05, 1.0, 1.0);
        Ok(Self {
            eer,
            eer_threshold,
            dcf_p01,
            dcf_p01_threshold,
            dcf_p05,
            dcf_p05_threshold,
        })
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "eer={}\ndcf_p01={}\ndcf_p05={}\neer_threshold={}\ndcf_p01_threshold={}\ndcf_p05_threshold={}\n",
            self.eer, self.dcf_p01, self.dcf_p05, self.eer_threshold, self.dcf_p01_threshold, self.dcf_p05_threshold
        )
    }
}
