use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    /// Score at the equal-error operating point.
    pub threshold: f64,
    pub num_target: usize,
    pub num_nontarget: usize,
}

/// Equal error rate of a labelled score list.
///
/// Operating points are the thresholds at every distinct score plus `±∞`, with
/// `FRR(t) = #{target < t}/T` and `FAR(t) = #{nontarget ≥ t}/N`. The EER is
/// taken at the first (lowest) threshold where FRR reaches FAR, linearly
/// interpolated between that point and its predecessor when they cross.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<EerResult> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "compute_eer",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Format(format!("score {i} is not finite")));
    }
    let num_target = labels.iter().filter(|&&l| l).count();
    let num_nontarget = labels.len() - num_target;
    if num_target == 0 || num_nontarget == 0 {
        return Err(Error::Protocol(format!(
            "EER needs both classes, got {num_target} target and {num_nontarget} nontarget scores"
        )));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (t, n) = (num_target as f64, num_nontarget as f64);

    // (threshold, FRR, FAR), starting below every score.
    let mut prev = (f64::NEG_INFINITY, 0.0, 1.0);
    let (mut below_t, mut below_n) = (0usize, 0usize);
    let mut i = 0;
    loop {
        let point = if i < pairs.len() {
            let thr = pairs[i].0;
            (thr, below_t as f64 / t, (num_nontarget - below_n) as f64 / n)
        } else {
            (f64::INFINITY, 1.0, 0.0)
        };
        let (thr, frr, far) = point;
        if frr >= far {
            if frr == far {
                return Ok(EerResult {
                    eer: frr,
                    threshold: if thr.is_finite() { thr } else { pairs[pairs.len() - 1].0 },
                    num_target,
                    num_nontarget,
                });
            }
            let (p_thr, p_frr, p_far) = prev;
            let gap_before = p_far - p_frr;
            let gap_after = frr - far;
            let alpha = gap_before / (gap_before + gap_after);
            let eer = p_frr + alpha * (frr - p_frr);
            let threshold = match (p_thr.is_finite(), thr.is_finite()) {
                (true, true) => p_thr + alpha * (thr - p_thr),
                (true, false) => p_thr,
                _ => thr,
            };
            return Ok(EerResult {
                eer,
                threshold,
                num_target,
                num_nontarget,
            });
        }
        if i >= pairs.len() {
            unreachable!("FRR reaches 1 and FAR 0 at +inf");
        }
        prev = point;
        let thr = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == thr {
            if pairs[i].1 {
                below_t += 1;
            } else {
                below_n += 1;
            }
            i += 1;
        }
    }
}

/// Reference EER: evaluates every midpoint threshold between sorted distinct
/// scores (plus both ends), keeps the one minimizing `|FAR − FRR|` and returns
/// the mean of the two rates there.
pub fn brute_force_eer(scores: &[f64], labels: &[bool]) -> f64 {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![distinct[0] - 1.0];
    thresholds.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(distinct[distinct.len() - 1] + 1.0);
    let t = labels.iter().filter(|&&l| l).count() as f64;
    let n = labels.len() as f64 - t;
    let mut best = (f64::INFINITY, 0.0);
    for thr in thresholds {
        let frr = scores.iter().zip(labels).filter(|(&s, &l)| l && s < thr).count() as f64 / t;
        let far = scores.iter().zip(labels).filter(|(&s, &l)| !l && s >= thr).count() as f64 / n;
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, 0.5 * (far + frr));
        }
    }
    best.1
}
