//! Affordance-map metrics. A `None` result means the metric is undefined for
//! that sample (e.g. single-class labels) and must be excluded, not zeroed.

use alloc::vec::Vec;

/// Sweep used by [`miou`]: `t = k / 100` for `k = 1..=99`.
pub fn iou_thresholds() -> impl Iterator<Item = f64> {
    (1..=99).map(|k| k as f64 / 100.0)
}

pub const KLD_EPS: f64 = 1e-12;

/// IoU of `pred >= t` against `gt`; `None` when both are empty.
pub fn iou_at(pred: &[f64], gt: &[bool], t: f64) -> Option<f64> {
    assert_eq!(pred.len(), gt.len(), "iou length mismatch");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        let on = p >= t;
        inter += (on && g) as usize;
        union += (on || g) as usize;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Mean IoU over the threshold sweep. Undefined when `gt` has no positives.
pub fn miou(pred: &[f64], gt: &[bool]) -> Option<f64> {
    if !gt.iter().any(|&g| g) {
        return None;
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for t in iou_thresholds() {
        total += iou_at(pred, gt, t).unwrap_or(0.0);
        n += 1;
    }
    Some(total / n as f64)
}

/// ROC area from the Mann-Whitney rank statistic, ties counted as one half.
pub fn auc(pred: &[f64], gt: &[bool]) -> Option<f64> {
    assert_eq!(pred.len(), gt.len(), "auc length mismatch");
    let n_pos = gt.iter().filter(|&&g| g).count();
    let n_neg = gt.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && pred[order[j]] == pred[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * order[i..j].iter().filter(|&&k| gt[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

fn normalized(map: &[f64]) -> Option<Vec<f64>> {
    let mass: f64 = map.iter().sum();
    if !(mass > 0.0) || !mass.is_finite() {
        return None;
    }
    Some(map.iter().map(|&x| x / mass).collect())
}

/// Histogram intersection of the two maps after normalizing each to unit mass.
pub fn sim(pred: &[f64], gt: &[f64]) -> Option<f64> {
    assert_eq!(pred.len(), gt.len(), "sim length mismatch");
    let p = normalized(pred)?;
    let q = normalized(gt)?;
    Some(p.iter().zip(&q).map(|(&a, &b)| a.min(b)).sum())
}

/// `KL(gt ‖ pred)` on unit-mass maps.
pub fn kld(pred: &[f64], gt: &[f64]) -> Option<f64> {
    assert_eq!(pred.len(), gt.len(), "kld length mismatch");
    let p = normalized(pred)?;
    let q = normalized(gt)?;
    Some(
        q.iter()
            .zip(&p)
            .map(|(&qi, &pi)| if qi > 0.0 { qi * libm::log(qi / (pi + KLD_EPS)) } else { 0.0 })
            .sum(),
    )
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Option<f64> {
    assert_eq!(pred.len(), gt.len(), "mae length mismatch");
    if pred.is_empty() {
        return None;
    }
    Some(pred.iter().zip(gt).map(|(&p, &g)| libm::fabs(p - g)).sum::<f64>() / pred.len() as f64)
}
