//! Ranking, classification and keypoint metrics.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::KeypointSet;
use crate::model::ModelState;
use crate::synth::{Dataset, DatasetMode};
use crate::tensor::Scalar;

/// PDJ thresholds as fractions of torso length.
pub const PDJ_THRESHOLDS: [f64; 10] = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5];
/// Torsos shorter than this are skipped.
pub const MIN_TORSO: f64 = 1e-6;

/// Mean precision at the rank of each positive after a stable sort on
/// descending score. `None` without positives.
pub fn average_precision(scored: &[(f64, bool)]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if scored[i].1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Keypoint index pairs whose mean distance defines the torso length.
pub fn torso_diagonals(mode: DatasetMode) -> [(usize, usize); 2] {
    match mode {
        // right shoulder to left hip, left shoulder to right hip
        DatasetMode::Mpii => [(2, 11), (5, 8)],
        // left shoulder to right hem, right shoulder to left hem
        DatasetMode::Garment => [(2, 7), (3, 6)],
    }
}

pub fn torso_length(gt: &KeypointSet, diagonals: [(usize, usize); 2]) -> f64 {
    let d = |(a, b): (usize, usize)| {
        let (p, q) = (gt.point(a), gt.point(b));
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    };
    0.5 * (d(diagonals[0]) + d(diagonals[1]))
}

/// Per-keypoint correctness: distance strictly below `threshold * torso`.
pub fn pdj(pred: &KeypointSet, gt: &KeypointSet, torso: f64, threshold: f64) -> Vec<bool> {
    pred.points()
        .iter()
        .zip(gt.points())
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt() < threshold * torso)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PdjReport {
    pub thresholds: Vec<f64>,
    /// `[keypoint][threshold]` detection rates.
    pub per_keypoint: Vec<Vec<f64>>,
    /// Mean over keypoints per threshold.
    pub mean: Vec<f64>,
    pub evaluated: usize,
    pub skipped_degenerate: usize,
}

impl PdjReport {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| (t - threshold).abs() < 1e-9).map(|i| self.mean[i])
    }

    pub fn is_monotone(&self) -> bool {
        self.per_keypoint.iter().chain(std::iter::once(&self.mean)).all(|c| c.windows(2).all(|w| w[0] <= w[1]))
    }
}

pub fn pdj_curves(preds: &[KeypointSet], gts: &[KeypointSet], diagonals: [(usize, usize); 2]) -> PdjReport {
    let n = gts.first().map_or(0, KeypointSet::len);
    let mut hits = vec![vec![0usize; PDJ_THRESHOLDS.len()]; n];
    let (mut evaluated, mut skipped) = (0, 0);
    for (p, g) in preds.iter().zip(gts) {
        let torso = torso_length(g, diagonals);
        if torso < MIN_TORSO {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        for (t, &thr) in PDJ_THRESHOLDS.iter().enumerate() {
            for (k, ok) in pdj(p, g, torso, thr).into_iter().enumerate() {
                hits[k][t] += ok as usize;
            }
        }
    }
    let rate = |h: usize| if evaluated == 0 { 0.0 } else { h as f64 / evaluated as f64 };
    let per_keypoint: Vec<Vec<f64>> = hits.iter().map(|row| row.iter().map(|&h| rate(h)).collect()).collect();
    let mean = (0..PDJ_THRESHOLDS.len())
        .map(|t| if n == 0 { 0.0 } else { per_keypoint.iter().map(|r| r[t]).sum::<f64>() / n as f64 })
        .collect();
    PdjReport { thresholds: PDJ_THRESHOLDS.to_vec(), per_keypoint, mean, evaluated, skipped_degenerate: skipped }
}

/// Nearest-rank percentile of unsorted values, `q` in `(0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct GroupMetrics {
    pub name: String,
    pub accuracy: f64,
    /// One-vs-rest AP per class; absent when the class has no positives.
    pub ap: Vec<Option<f64>>,
    pub mean_ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ElongationStats {
    /// Longer over shorter side of the sampled boxes, 95th percentile per part.
    pub p95_per_part: Vec<f64>,
    /// 95th percentile over all parts' boxes.
    pub p95: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LossPoint {
    pub iteration: usize,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MetricsReport {
    pub samples: usize,
    pub groups: Vec<GroupMetrics>,
    pub mean_accuracy: f64,
    pub mean_ap: Option<f64>,
    /// Absent for variants without keypoint prediction.
    pub pdj: Option<PdjReport>,
    /// Absent for variants without part boxes.
    pub elongation: Option<ElongationStats>,
    #[serde(default)]
    pub loss_trace: Vec<LossPoint>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Evaluates `model` on every sample of `data` in file order.
pub fn evaluate<T: Scalar>(model: &ModelState<T>, data: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    let n_parts = model.config.parts.len();
    let mut probs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_parts];
    let mut pred_kp = Vec::new();
    let mut elong: Vec<Vec<f64>> = vec![Vec::new(); n_parts];
    let order: Vec<usize> = (0..data.len()).collect();
    for batch_idx in order.chunks(batch_size.max(1)) {
        let batch = data.batch::<T>(batch_idx);
        let pred = model.predict(&batch.images, Some(&batch.keypoints))?;
        for (t, p) in pred.probabilities.into_iter().enumerate() {
            probs[t].extend(p);
        }
        if let Some(k) = pred.keypoints {
            pred_kp.extend(k);
        }
        if let Some(boxes) = pred.boxes {
            for (t, b) in boxes.into_iter().enumerate() {
                elong[t].extend(b.iter().map(|b| b.elongation()));
            }
        }
    }
    let names = data.mode().group_names();
    let mut groups = Vec::with_capacity(n_parts);
    for (t, p) in probs.iter().enumerate() {
        let truth: Vec<usize> = data.samples.iter().map(|s| s.labels[t]).collect();
        let predicted: Vec<usize> = p
            .iter()
            .map(|row| row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0)
            .collect();
        let classes = model.config.class_counts[t];
        let ap: Vec<Option<f64>> = (0..classes)
            .map(|c| average_precision(&p.iter().zip(&truth).map(|(row, &y)| (row[c], y == c)).collect::<Vec<_>>()))
            .collect();
        groups.push(GroupMetrics {
            name: names.get(t).map_or_else(|| model.config.parts[t].name.clone(), |s| s.to_string()),
            accuracy: accuracy(&predicted, &truth),
            mean_ap: mean_of(ap.iter().flatten().copied()),
            ap,
        });
    }
    let pdj = (!pred_kp.is_empty()).then(|| {
        let gts: Vec<KeypointSet> = data.samples.iter().map(|s| s.keypoints.clone()).collect();
        pdj_curves(&pred_kp, &gts, torso_diagonals(data.mode()))
    });
    let elongation = model.config.variant.has_parts().then(|| {
        let all: Vec<f64> = elong.iter().flatten().copied().collect();
        ElongationStats {
            p95_per_part: elong.iter().map(|e| percentile(e, 0.95)).collect(),
            p95: percentile(&all, 0.95),
            mean: mean_of(all.iter().copied()).unwrap_or(f64::NAN),
        }
    });
    Ok(MetricsReport {
        samples: data.len(),
        mean_accuracy: mean_of(groups.iter().map(|g| g.accuracy)).unwrap_or(0.0),
        mean_ap: mean_of(groups.iter().filter_map(|g| g.mean_ap)),
        groups,
        pdj,
        elongation,
        loss_trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Precision at each positive's position in a fixed ranking.
    fn ap_by_definition(ranked_labels: &[bool]) -> Option<f64> {
        let positives = ranked_labels.iter().filter(|&&p| p).count();
        if positives == 0 {
            return None;
        }
        let mut total = 0.0;
        for (k, &is_pos) in ranked_labels.iter().enumerate() {
            if is_pos {
                let prefix = &ranked_labels[..=k];
                total += prefix.iter().filter(|&&p| p).count() as f64 / prefix.len() as f64;
            }
        }
        Some(total / positives as f64)
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[(0.9, true), (0.8, true), (0.1, false)]), Some(1.0));
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[(0.5, false)]), None);
    }

    #[test]
    fn ties_keep_input_order() {
        // the negative comes first among equal scores
        let ap = average_precision(&[(0.5, false), (0.5, true)]).unwrap();
        assert_eq!(ap, 0.5);
    }

    proptest! {
        #[test]
        fn ap_matches_definition(items in prop::collection::vec((0u8..6, any::<bool>()), 1..=16)) {
            let scored: Vec<(f64, bool)> = items.iter().map(|&(s, p)| (s as f64 / 5.0, p)).collect();
            let mut ranked: Vec<(usize, (f64, bool))> = scored.iter().copied().enumerate().collect();
            // insertion order as the tiebreak
            ranked.sort_by(|a, b| b.1 .0.partial_cmp(&a.1 .0).unwrap().then(a.0.cmp(&b.0)));
            let labels: Vec<bool> = ranked.iter().map(|r| r.1 .1).collect();
            prop_assert_eq!(average_precision(&scored), ap_by_definition(&labels));
        }

        #[test]
        fn pdj_curves_are_monotone(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut set = || KeypointSet::new((0..14).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect());
            let gts: Vec<_> = (0..8).map(|_| set()).collect();
            let preds: Vec<_> = (0..8).map(|_| set()).collect();
            let r = pdj_curves(&preds, &gts, torso_diagonals(DatasetMode::Mpii));
            prop_assert!(r.is_monotone());
            prop_assert!(r.at(0.5).unwrap() >= r.at(0.1).unwrap());
        }
    }

    #[test]
    fn pdj_boundary_is_strict() {
        let gt = KeypointSet::new(vec![[0.0, 0.0]]);
        assert_eq!(pdj(&KeypointSet::new(vec![[0.1, 0.0]]), &gt, 1.0, 0.2), vec![true]);
        assert_eq!(pdj(&KeypointSet::new(vec![[0.25, 0.0]]), &gt, 1.0, 0.25), vec![false]);
    }

    #[test]
    fn degenerate_torso_is_skipped() {
        let gt = KeypointSet::new(vec![[0.5, 0.5]; 14]);
        let r = pdj_curves(std::slice::from_ref(&gt), std::slice::from_ref(&gt), torso_diagonals(DatasetMode::Mpii));
        assert_eq!((r.evaluated, r.skipped_degenerate), (0, 1));
    }

    #[test]
    fn torso_is_mean_of_diagonals() {
        let mut pts = vec![[0.0, 0.0]; 14];
        pts[2] = [0.0, 0.0];
        pts[11] = [0.0, 0.4];
        pts[5] = [0.2, 0.0];
        pts[8] = [0.2, 0.2];
        assert!((torso_length(&KeypointSet::new(pts), torso_diagonals(DatasetMode::Mpii)) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&v, 1.0), 20.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }
}
