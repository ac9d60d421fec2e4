//! Detection AP and task-alignment diagnostics.

mod eval;
pub mod plot;

pub use eval::{
    alignment_pools, evaluate, extract_detections, write_alignment_report, AlignmentReport, EvalOutput,
    ALIGNMENT_REPORT_HEADER,
};

use crate::error::{Error, Result};
use crate::geometry::{iou, Detection, Instance};

/// 1-based average ranks; tied values share the mean of their ranks.
pub fn rank(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `degenerate` is set when either side has zero
/// variance, in which case the value is 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs two equal-length samples of size >= 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation { value: 0.0, degenerate: true });
    }
    Ok(Correlation { value: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0), degenerate: false })
}

/// Pearson correlation of the rank transforms of `xs` and `ys`.
pub fn pcc(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    pearson(&rank(xs), &rank(ys))
}

/// One prediction attributed to an instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPrediction {
    pub score: f64,
    pub iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentStats {
    /// Mean over instances with at least two predictions.
    pub pcc_top: f64,
    /// Mean over instances with at least one prediction.
    pub mean_iou_top: f64,
    pub instances_pcc: usize,
    pub instances_iou: usize,
    /// Instances whose PCC was degenerate (counted as 0).
    pub degenerate: usize,
}

/// Per instance: rank correlation between score and IoU over the `k1` most
/// confident predictions, and mean IoU over the `k2` most confident; both
/// averaged over instances. Equal scores keep input order.
pub fn alignment_analysis(per_instance: &[Vec<ScoredPrediction>], k1: usize, k2: usize) -> AlignmentStats {
    let (mut pcc_sum, mut iou_sum) = (0.0, 0.0);
    let mut stats = AlignmentStats { pcc_top: 0.0, mean_iou_top: 0.0, instances_pcc: 0, instances_iou: 0, degenerate: 0 };
    for preds in per_instance {
        let mut sorted = preds.clone();
        sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
        let top1 = &sorted[..k1.min(sorted.len())];
        if top1.len() >= 2 {
            let s: Vec<f64> = top1.iter().map(|p| p.score).collect();
            let u: Vec<f64> = top1.iter().map(|p| p.iou).collect();
            let c = pcc(&s, &u).expect("lengths checked");
            pcc_sum += c.value;
            stats.instances_pcc += 1;
            stats.degenerate += c.degenerate as usize;
        }
        let top2 = &sorted[..k2.min(sorted.len())];
        if !top2.is_empty() {
            iou_sum += top2.iter().map(|p| p.iou).sum::<f64>() / top2.len() as f64;
            stats.instances_iou += 1;
        }
    }
    if stats.instances_pcc > 0 {
        stats.pcc_top = pcc_sum / stats.instances_pcc as f64;
    }
    if stats.instances_iou > 0 {
        stats.mean_iou_top = iou_sum / stats.instances_iou as f64;
    }
    stats
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Census {
    pub correct: usize,
    pub redundant: usize,
    pub error: usize,
}

impl std::ops::AddAssign for Census {
    fn add_assign(&mut self, o: Self) {
        self.correct += o.correct;
        self.redundant += o.redundant;
        self.error += o.error;
    }
}

pub const CENSUS_MATCH_IOU: f64 = 0.5;
pub const CENSUS_ERROR_IOU: f64 = 0.1;

fn by_score_desc(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Correct / redundant / error boxes of one image.
///
/// Detections are visited by descending score and compared with the ground
/// truth of their own class. A detection whose best IoU is at least 0.5 is
/// correct if it can claim an unmatched box at that threshold (the one it
/// overlaps most) and redundant otherwise; one whose best IoU lies in
/// `(0.1, 0.5)` is an error. Anything else is not counted.
pub fn box_census(dets: &[Detection], gts: &[Instance]) -> Census {
    let mut matched = vec![false; gts.len()];
    let mut c = Census::default();
    for k in by_score_desc(dets) {
        let d = &dets[k];
        let mut best = 0.0f64;
        let mut claim: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate().filter(|(_, gt)| gt.class_id == d.class_id) {
            let v = iou(&d.bbox, &gt.bbox);
            best = best.max(v);
            if !matched[g] && v >= CENSUS_MATCH_IOU && claim.is_none_or(|(_, cv)| v > cv) {
                claim = Some((g, v));
            }
        }
        if let Some((g, _)) = claim {
            matched[g] = true;
            c.correct += 1;
        } else if best >= CENSUS_MATCH_IOU {
            c.redundant += 1;
        } else if best > CENSUS_ERROR_IOU {
            c.error += 1;
        }
    }
    c
}

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

/// Precision/recall points of one class at one IoU threshold, in score order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Greedy score-ordered matching of one class across images.
pub fn pr_curve(dets: &[Vec<Detection>], gts: &[Vec<Instance>], class_id: usize, threshold: f64) -> (PrCurve, usize) {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|i| i.class_id == class_id).count()).sum();
    let mut pool: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (img, d)))
        .collect();
    pool.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = PrCurve::default();
    for (img, d) in pool {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts[img].iter().enumerate() {
            if gt.class_id != class_id || matched[img][g] {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                matched[img][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.precision.push(tp as f64 / (tp + fp) as f64);
        curve.recall.push(if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 });
    }
    (curve, n_gt)
}

/// 101-point interpolated area under a PR curve.
pub fn interpolated_ap(curve: &PrCurve) -> f64 {
    let mut env = curve.precision.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = curve.recall.partition_point(|&x| x < r);
        if idx < env.len() {
            total += env[idx];
        }
    }
    total / 101.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    /// Mean over classes with ground truth; `None` without any ground truth.
    pub ap50: Option<f64>,
    pub ap: Option<f64>,
    /// Class-mean AP at each threshold.
    pub per_threshold: Vec<(f64, f64)>,
}

/// Class-averaged AP at every threshold; `ap` averages over `thresholds`,
/// `ap50` is the value at 0.5 (when present).
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<Instance>], num_classes: usize, thresholds: &[f64]) -> Result<ApResult> {
    if dets.len() != gts.len() {
        return Err(Error::InvalidArgument(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    let classes: Vec<usize> = (0..num_classes)
        .filter(|&c| gts.iter().any(|g| g.iter().any(|i| i.class_id == c)))
        .collect();
    if classes.is_empty() {
        return Ok(ApResult { ap50: None, ap: None, per_threshold: Vec::new() });
    }
    let per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let s: f64 = classes.iter().map(|&c| interpolated_ap(&pr_curve(dets, gts, c, t).0)).sum();
            (t, s / classes.len() as f64)
        })
        .collect();
    let ap = per_threshold.iter().map(|x| x.1).sum::<f64>() / per_threshold.len().max(1) as f64;
    let ap50 = per_threshold.iter().find(|(t, _)| (t - 0.5).abs() < 1e-9).map(|x| x.1);
    Ok(ApResult { ap50, ap: Some(ap), per_threshold })
}
