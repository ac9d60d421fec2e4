use std::path::Path;

use super::plot::{line_plot, Series};
use super::{
    alignment_analysis, average_precision, box_census, coco_thresholds, pr_curve, AlignmentStats, ApResult, Census,
    PrCurve, ScoredPrediction,
};
use crate::error::{Error, Result};
use crate::geometry::{iou_xyxy, nms, BBox, Detection, Instance};
use crate::synthdata::SceneRecord;
use crate::tal::{predicted_box, AnchorGrid};
use crate::tensor::Tensor;
use crate::thead::HeadOutputs;
use crate::trainer::{predict, ModelConfig, ModelParams};

pub const ALIGNMENT_REPORT_HEADER: &str = "pcc_top50,mean_iou_top10,n_correct,n_redundant,n_error,ap50,ap";

/// Predictions ranked per instance for the correlation statistic.
pub const PCC_TOP: usize = 50;
/// Predictions averaged per instance for the IoU statistic.
pub const IOU_TOP: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentReport {
    pub pcc_top50: f64,
    pub mean_iou_top10: f64,
    pub n_correct: usize,
    pub n_redundant: usize,
    pub n_error: usize,
    pub ap50: Option<f64>,
    pub ap: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AlignmentReport {
    /// CSV fields in [`ALIGNMENT_REPORT_HEADER`] order; missing AP is empty.
    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.pcc_top50.to_string(),
            self.mean_iou_top10.to_string(),
            self.n_correct.to_string(),
            self.n_redundant.to_string(),
            self.n_error.to_string(),
            opt(self.ap50),
            opt(self.ap),
        ]
    }
}

pub fn write_alignment_report(path: &Path, report: &AlignmentReport) -> Result<()> {
    let text = format!("{ALIGNMENT_REPORT_HEADER}\n{}\n", report.csv_fields().join(","));
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Thresholded, class-wise NMS-filtered detections of one image, best first,
/// at most `max_detections`.
pub fn extract_detections(
    out: &HeadOutputs<Tensor<f32>>,
    grid: &AnchorGrid,
    score_threshold: f64,
    nms_iou: f64,
    max_detections: usize,
) -> Vec<Detection> {
    let k = out.p_align.shape()[2];
    let mut raw = Vec::new();
    for a in 0..grid.len() {
        let b = predicted_box(grid, &out.b_align, a);
        if !b.iter().all(|v| v.is_finite()) {
            continue;
        }
        let bbox = BBox { x1: b[0], y1: b[1], x2: b[2], y2: b[3] };
        for c in 0..k {
            let score = out.p_align.data()[a * k + c] as f64;
            if score >= score_threshold {
                raw.push(Detection { bbox, class_id: c, score });
            }
        }
    }
    let mut kept = nms(&raw, nms_iou);
    kept.truncate(max_detections);
    kept
}

/// For each instance, its candidate anchors (see [`AnchorGrid::candidates`])
/// scored at the instance class, with the IoU of their box prediction.
pub fn alignment_pools(out: &HeadOutputs<Tensor<f32>>, grid: &AnchorGrid, instances: &[Instance]) -> Vec<Vec<ScoredPrediction>> {
    let k = out.p_align.shape()[2];
    instances
        .iter()
        .map(|inst| {
            grid.candidates(inst)
                .into_iter()
                .map(|a| {
                    let u = iou_xyxy(predicted_box(grid, &out.b_align, a), inst.bbox.to_array());
                    ScoredPrediction {
                        score: out.p_align.data()[a * k + inst.class_id] as f64,
                        iou: if u.is_finite() { u } else { 0.0 },
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: AlignmentReport,
    pub ap: ApResult,
    pub alignment: AlignmentStats,
    pub census: Census,
    /// Per-class PR curves at IoU 0.5.
    pub pr_curves: Vec<(usize, PrCurve)>,
    pub detections: Vec<Vec<Detection>>,
}

impl EvalOutput {
    pub fn pr_svg(&self) -> String {
        let names = crate::synthdata::CLASS_NAMES;
        let series: Vec<Series> = self
            .pr_curves
            .iter()
            .map(|(c, curve)| Series {
                name: names.get(*c).copied().unwrap_or("class"),
                points: curve.recall.iter().copied().zip(curve.precision.iter().copied()).collect(),
            })
            .collect();
        line_plot("precision-recall at IoU 0.5", "recall", "precision", &series)
    }
}

/// AP, census and alignment statistics of `params` on `records`.
pub fn evaluate(params: &ModelParams<Tensor<f32>>, cfg: &ModelConfig, records: &[SceneRecord]) -> Result<EvalOutput> {
    let grid = cfg.grid();
    let mut detections = Vec::with_capacity(records.len());
    let mut pools = Vec::new();
    let mut census = Census::default();
    for r in records {
        let out = predict(params, &r.image)?;
        let dets = extract_detections(&out, &grid, cfg.score_threshold, cfg.nms_iou, cfg.max_detections);
        census += box_census(&dets, &r.instances);
        pools.extend(alignment_pools(&out, &grid, &r.instances));
        detections.push(dets);
    }
    let gts: Vec<Vec<Instance>> = records.iter().map(|r| r.instances.clone()).collect();
    let k = cfg.head.num_classes;
    let ap = average_precision(&detections, &gts, k, &coco_thresholds())?;
    let alignment = alignment_analysis(&pools, PCC_TOP, IOU_TOP);
    let pr_curves = (0..k)
        .filter_map(|c| {
            let (curve, n_gt) = pr_curve(&detections, &gts, c, 0.5);
            (n_gt > 0).then_some((c, curve))
        })
        .collect();
    let report = AlignmentReport {
        pcc_top50: alignment.pcc_top,
        mean_iou_top10: alignment.mean_iou_top,
        n_correct: census.correct,
        n_redundant: census.redundant,
        n_error: census.error,
        ap50: ap.ap50,
        ap: ap.ap,
    };
    Ok(EvalOutput { report, ap, alignment, census, pr_curves, detections })
}
