//! Task-aligned sample assignment.
//!
//! For every instance the anchors whose centers fall inside its box are
//! scored with `t = s^alpha * u^beta`, where `s` is the aligned score at the
//! instance class and `u` the IoU of the aligned box prediction. The `m`
//! best-scoring anchors become positives, an anchor claimed by several
//! instances goes to the one it overlaps best, and the labels
//! `t_hat = t * max(u) / max(t)` are computed over the surviving positives.

mod dump;
mod loss;

pub use dump::{read_anchor_dump, write_anchor_dump, write_anchor_dump_file, AnchorRow};
pub use loss::{
    cls_loss, reg_loss, total_loss, ClassificationLoss, ClsPart, LossBreakdown, LossVars, RegressionLoss,
    BCE_EPS,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_xyxy, Instance};
use crate::tensor::{Scalar, Tensor};

/// One anchor point per feature-map location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorGrid {
    pub height: usize,
    pub width: usize,
    /// Pixels per feature cell.
    pub stride: f64,
}

impl AnchorGrid {
    pub fn new(height: usize, width: usize, stride: f64) -> Self {
        Self { height, width, stride }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Center of anchor `idx` (row-major): `((j + 0.5) * stride, (i + 0.5) * stride)`.
    pub fn point(&self, idx: usize) -> (f64, f64) {
        let (i, j) = (idx / self.width, idx % self.width);
        ((j as f64 + 0.5) * self.stride, (i as f64 + 0.5) * self.stride)
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|k| self.point(k)).collect()
    }

    /// Pixel box from side distances given in stride units.
    pub fn decode(&self, idx: usize, ltrb: [f64; 4]) -> [f64; 4] {
        let (x, y) = self.point(idx);
        let s = self.stride;
        [x - ltrb[0] * s, y - ltrb[1] * s, x + ltrb[2] * s, y + ltrb[3] * s]
    }

    /// Anchors strictly inside `bbox`; when there are none, the single anchor
    /// nearest to its center (lowest index on ties).
    pub fn candidates(&self, inst: &Instance) -> Vec<usize> {
        let inside: Vec<usize> = (0..self.len())
            .filter(|&k| {
                let (x, y) = self.point(k);
                inst.bbox.contains(x, y)
            })
            .collect();
        if !inside.is_empty() || self.is_empty() {
            return inside;
        }
        let (cx, cy) = inst.bbox.center();
        let dist = |k: usize| {
            let (x, y) = self.point(k);
            (x - cx).powi(2) + (y - cy).powi(2)
        };
        let best = (0..self.len()).fold(0, |b, k| if dist(k) < dist(b) { k } else { b });
        vec![best]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TalConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Positives per instance.
    pub m: usize,
    /// Focusing exponent of the classification loss.
    pub gamma: f64,
}

impl Default for TalConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 6.0,
            m: 13,
            gamma: 2.0,
        }
    }
}

impl TalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "alpha and beta must be positive, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `t = s^alpha * u^beta`.
pub fn alignment_metric(s: f64, u: f64, alpha: f64, beta: f64) -> f64 {
    s.powf(alpha) * u.powf(beta)
}

/// Per-anchor label.
///
/// `s`, `u` and `t` refer to the assigned instance for positives. For other
/// anchors they refer to the candidate instance with the largest `t`, or are
/// `(max class score, 0, 0)` when the anchor is nobody's candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorLabel {
    pub is_positive: bool,
    pub instance: Option<usize>,
    pub s: f64,
    pub u: f64,
    pub t: f64,
    pub t_hat: f64,
}

impl Default for AnchorLabel {
    fn default() -> Self {
        Self {
            is_positive: false,
            instance: None,
            s: 0.0,
            u: 0.0,
            t: 0.0,
            t_hat: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub labels: Vec<AnchorLabel>,
}

impl Assignment {
    pub fn all_negative(n_anchors: usize) -> Self {
        Self {
            labels: vec![AnchorLabel::default(); n_anchors],
        }
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, &AnchorLabel)> {
        self.labels.iter().enumerate().filter(|(_, l)| l.is_positive)
    }

    pub fn num_positive(&self) -> usize {
        self.positives().count()
    }

    pub fn positives_of(&self, instance: usize) -> Vec<usize> {
        self.positives()
            .filter(|(_, l)| l.instance == Some(instance))
            .map(|(k, _)| k)
            .collect()
    }

    /// Loss normalizer `max(sum of t_hat over positives, 1)`.
    pub fn normalizer(&self) -> f64 {
        self.positives().map(|(_, l)| l.t_hat).sum::<f64>().max(1.0)
    }
}

/// An anchor scored against one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub anchor: usize,
    pub s: f64,
    pub u: f64,
    pub t: f64,
}

/// Positions of the `m` largest entries of `t`, largest first, lower index
/// first among equals. Non-positive and NaN entries are never selected.
pub fn select_top_m(t: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..t.len()).filter(|&k| t[k] > 0.0).collect();
    order.sort_by(|&a, &b| t[b].total_cmp(&t[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

/// `t_hat_i = t_i * max(u) / max(t)`; all zeros when `max(t) = 0`.
pub fn normalize_t(t: &[f64], u: &[f64]) -> Vec<f64> {
    let max_t = t.iter().copied().fold(0.0, f64::max);
    if max_t <= 0.0 {
        return vec![0.0; t.len()];
    }
    let max_u = u.iter().copied().fold(0.0, f64::max);
    let scale = max_u / max_t;
    t.iter().map(|&x| x * scale).collect()
}

fn read<T: Scalar>(t: &Tensor<T>, idx: usize, c: usize) -> f64 {
    let ch = t.shape()[2];
    t.data()[idx * ch + c].as_f64()
}

fn check_maps<T: Scalar>(grid: &AnchorGrid, p_align: &Tensor<T>, b_align: &Tensor<T>, instances: &[Instance]) -> Result<usize> {
    let (h, w, k) = p_align.hwc()?;
    if (h, w) != (grid.height, grid.width) {
        return Err(Error::shape("assign", format!("scores {:?} on a {}x{} grid", p_align.shape(), grid.height, grid.width)));
    }
    if b_align.shape() != [h, w, 4] {
        return Err(Error::shape("assign", format!("boxes {:?} for scores {:?}", b_align.shape(), p_align.shape())));
    }
    if let Some(bad) = instances.iter().find(|i| i.class_id >= k) {
        return Err(Error::InvalidArgument(format!("instance class {} with {k} score channels", bad.class_id)));
    }
    Ok(k)
}

/// Decoded box prediction of anchor `idx`.
pub fn predicted_box<T: Scalar>(grid: &AnchorGrid, b_align: &Tensor<T>, idx: usize) -> [f64; 4] {
    let ltrb = [0, 1, 2, 3].map(|c| read(b_align, idx, c));
    grid.decode(idx, ltrb)
}

fn finite_or_zero(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        0.0
    }
}

/// Scores every candidate anchor of every instance.
pub fn score_candidates<T: Scalar>(
    instances: &[Instance],
    grid: &AnchorGrid,
    p_align: &Tensor<T>,
    b_align: &Tensor<T>,
    cfg: &TalConfig,
) -> Result<Vec<Vec<Candidate>>> {
    check_maps(grid, p_align, b_align, instances)?;
    Ok(instances
        .iter()
        .map(|inst| {
            let gt = inst.bbox.to_array();
            grid.candidates(inst)
                .into_iter()
                .map(|anchor| {
                    let s = read(p_align, anchor, inst.class_id);
                    let u = finite_or_zero(iou_xyxy(predicted_box(grid, b_align, anchor), gt));
                    let t = alignment_metric(s, u, cfg.alpha, cfg.beta);
                    Candidate { anchor, s, u, t }
                })
                .collect()
        })
        .collect())
}

/// Top-m selection, conflict resolution and label normalization over
/// already-scored candidates.
///
/// An anchor selected by several instances keeps the one with the largest
/// `u` (lowest instance index on ties).
pub fn resolve(candidates: &[Vec<Candidate>], n_anchors: usize, m: usize) -> Assignment {
    let mut labels = vec![AnchorLabel::default(); n_anchors];

    for (inst, cands) in candidates.iter().enumerate() {
        for c in cands {
            let l = &mut labels[c.anchor];
            if l.instance.is_none() || c.t > l.t {
                *l = AnchorLabel { is_positive: false, instance: Some(inst), s: c.s, u: c.u, t: c.t, t_hat: 0.0 };
            }
        }
    }
    let mut reference: Vec<AnchorLabel> = labels.clone();
    for l in &mut labels {
        l.instance = None;
    }

    for (inst, cands) in candidates.iter().enumerate() {
        let t: Vec<f64> = cands.iter().map(|c| c.t).collect();
        for pick in select_top_m(&t, m) {
            let c = cands[pick];
            let l = &mut labels[c.anchor];
            if !l.is_positive || c.u > l.u {
                *l = AnchorLabel { is_positive: true, instance: Some(inst), s: c.s, u: c.u, t: c.t, t_hat: 0.0 };
            }
        }
    }

    for inst in 0..candidates.len() {
        let members: Vec<usize> = (0..n_anchors)
            .filter(|&k| labels[k].is_positive && labels[k].instance == Some(inst))
            .collect();
        let t: Vec<f64> = members.iter().map(|&k| labels[k].t).collect();
        let u: Vec<f64> = members.iter().map(|&k| labels[k].u).collect();
        for (&k, th) in members.iter().zip(normalize_t(&t, &u)) {
            labels[k].t_hat = th;
        }
    }

    for (l, r) in labels.iter_mut().zip(reference.iter_mut()) {
        if !l.is_positive {
            r.instance = None;
            *l = *r;
        }
    }
    Assignment { labels }
}

/// Task-aligned assignment for one image.
///
/// Non-candidate anchors record the maximum class score as `s`.
pub fn assign<T: Scalar>(
    instances: &[Instance],
    grid: &AnchorGrid,
    p_align: &Tensor<T>,
    b_align: &Tensor<T>,
    cfg: &TalConfig,
) -> Result<Assignment> {
    cfg.validate()?;
    let candidates = score_candidates(instances, grid, p_align, b_align, cfg)?;
    let mut a = resolve(&candidates, grid.len(), cfg.m);
    fill_background_scores(&mut a, &candidates, p_align);
    Ok(a)
}

fn fill_background_scores<T: Scalar>(a: &mut Assignment, candidates: &[Vec<Candidate>], p_align: &Tensor<T>) {
    let mut is_candidate = vec![false; a.labels.len()];
    for c in candidates.iter().flatten() {
        is_candidate[c.anchor] = true;
    }
    let k = p_align.shape()[2];
    for (idx, l) in a.labels.iter_mut().enumerate() {
        if !is_candidate[idx] {
            l.s = (0..k).map(|c| read(p_align, idx, c)).fold(0.0, f64::max);
        }
    }
}

/// Radius of the center region, in strides, for [`assign_center`].
pub const CENTER_RADIUS: f64 = 1.5;

/// Fixed center-sampling assignment used as a baseline.
///
/// An anchor is positive for an instance when it is a candidate of that
/// instance and lies within `CENTER_RADIUS * stride` of the box center on
/// both axes; an instance with no such anchor takes its candidate nearest to
/// the center. Overlapping claims go to the smaller box (lower index on ties).
/// Every positive has `t = t_hat = 1`.
pub fn assign_center<T: Scalar>(
    instances: &[Instance],
    grid: &AnchorGrid,
    p_align: &Tensor<T>,
    b_align: &Tensor<T>,
) -> Result<Assignment> {
    check_maps(grid, p_align, b_align, instances)?;
    let radius = CENTER_RADIUS * grid.stride;
    let mut owner: Vec<Option<usize>> = vec![None; grid.len()];
    for (inst_idx, inst) in instances.iter().enumerate() {
        let (cx, cy) = inst.bbox.center();
        let cands = grid.candidates(inst);
        let dist = |k: usize| {
            let (x, y) = grid.point(k);
            (x - cx).powi(2) + (y - cy).powi(2)
        };
        let mut chosen: Vec<usize> = cands
            .iter()
            .copied()
            .filter(|&k| {
                let (x, y) = grid.point(k);
                (x - cx).abs() < radius && (y - cy).abs() < radius
            })
            .collect();
        if chosen.is_empty() {
            if let Some(&best) = cands.iter().min_by(|&&a, &&b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b))) {
                chosen.push(best);
            }
        }
        for k in chosen {
            let replace = match owner[k] {
                None => true,
                Some(o) => inst.bbox.area() < instances[o].bbox.area(),
            };
            if replace {
                owner[k] = Some(inst_idx);
            }
        }
    }
    let k = p_align.shape()[2];
    let labels = owner
        .iter()
        .enumerate()
        .map(|(idx, o)| match *o {
            Some(i) => {
                let inst = &instances[i];
                AnchorLabel {
                    is_positive: true,
                    instance: Some(i),
                    s: read(p_align, idx, inst.class_id),
                    u: finite_or_zero(iou_xyxy(predicted_box(grid, b_align, idx), inst.bbox.to_array())),
                    t: 1.0,
                    t_hat: 1.0,
                }
            }
            None => AnchorLabel {
                s: (0..k).map(|c| read(p_align, idx, c)).fold(0.0, f64::max),
                ..AnchorLabel::default()
            },
        })
        .collect();
    Ok(Assignment { labels })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignerKind {
    #[default]
    Tal,
    Center,
}

/// Dispatches to [`assign`] or [`assign_center`].
pub fn assign_with<T: Scalar>(
    kind: AssignerKind,
    instances: &[Instance],
    grid: &AnchorGrid,
    p_align: &Tensor<T>,
    b_align: &Tensor<T>,
    cfg: &TalConfig,
) -> Result<Assignment> {
    match kind {
        AssignerKind::Tal => assign(instances, grid, p_align, b_align, cfg),
        AssignerKind::Center => assign_center(instances, grid, p_align, b_align),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn metric_examples() {
        assert_eq!(alignment_metric(1.0, 1.0, 1.0, 6.0), 1.0);
        assert_eq!(alignment_metric(1.0, 1.0, 0.3, 2.5), 1.0);
        assert!((alignment_metric(0.5, 0.8, 1.0, 6.0) - 0.131072).abs() < 1e-12);
        assert_eq!(alignment_metric(0.0, 0.7, 1.0, 6.0), 0.0);
        let d = TalConfig::default();
        assert_eq!((d.alpha, d.beta, d.m), (1.0, 6.0, 13));
    }

    #[test]
    fn top_m_examples() {
        let mut picked = select_top_m(&[0.9, 0.1, 0.5, 0.7], 2);
        picked.sort();
        assert_eq!(picked, vec![0, 3]);
        assert_eq!(select_top_m(&[0.2, 0.4, 0.2], 10), vec![1, 0, 2]);
        assert_eq!(select_top_m(&[0.3, 0.0, 0.3], 5), vec![0, 2]);
    }

    #[test]
    fn normalize_examples() {
        let th = normalize_t(&[0.4, 0.2], &[0.9, 0.6]);
        assert!((th[0] - 0.9).abs() < 1e-12 && (th[1] - 0.45).abs() < 1e-12);
        assert_eq!(normalize_t(&[0.37], &[0.61]), vec![0.61]);
        assert_eq!(normalize_t(&[0.0, 0.0], &[0.5, 0.2]), vec![0.0, 0.0]);
    }

    fn inst(x1: f64, y1: f64, x2: f64, y2: f64, c: usize) -> Instance {
        Instance { bbox: BBox::new(x1, y1, x2, y2).unwrap(), class_id: c }
    }

    #[test]
    fn empty_instances_are_all_negative() {
        let grid = AnchorGrid::new(4, 4, 8.0);
        let p = Tensor::<f64>::full(&[4, 4, 2], 0.3);
        let b = Tensor::<f64>::full(&[4, 4, 4], 1.0);
        let a = assign(&[], &grid, &p, &b, &TalConfig::default()).unwrap();
        assert_eq!(a.num_positive(), 0);
        assert!(a.labels.iter().all(|l| l.s == 0.3 && l.instance.is_none()));
    }

    #[test]
    fn saturation_marks_every_candidate() {
        let grid = AnchorGrid::new(3, 3, 8.0);
        let p = Tensor::<f64>::full(&[3, 3, 1], 0.5);
        let b = Tensor::<f64>::full(&[3, 3, 4], 1.5);
        let cfg = TalConfig { m: 100, ..TalConfig::default() };
        let a = assign(&[inst(0.0, 0.0, 24.0, 24.0, 0)], &grid, &p, &b, &cfg).unwrap();
        assert_eq!(a.num_positive(), 9);
    }

    #[test]
    fn anchor_points_follow_half_cell_rule() {
        let grid = AnchorGrid::new(2, 3, 8.0);
        assert_eq!(grid.point(0), (4.0, 4.0));
        assert_eq!(grid.point(5), (20.0, 12.0));
        assert_eq!(grid.decode(0, [0.5, 0.5, 1.0, 1.0]), [0.0, 0.0, 12.0, 12.0]);
    }

    #[test]
    fn tiny_box_between_anchors_gets_nearest_anchor() {
        let grid = AnchorGrid::new(4, 4, 8.0);
        let i = inst(4.0, 4.0, 12.0, 12.0, 0);
        assert_eq!(grid.candidates(&i), vec![0]);
    }

    #[test]
    fn conflict_goes_to_higher_iou() {
        let cands = vec![
            vec![Candidate { anchor: 0, s: 0.9, u: 0.5, t: 0.9 }],
            vec![Candidate { anchor: 0, s: 0.2, u: 0.7, t: 0.1 }],
        ];
        let a = resolve(&cands, 1, 1);
        assert_eq!(a.labels[0].instance, Some(1));
        assert_eq!(a.labels[0].t_hat, 0.7);
    }

    #[test]
    fn center_baseline_prefers_small_boxes() {
        let grid = AnchorGrid::new(8, 8, 8.0);
        let p = Tensor::<f64>::full(&[8, 8, 2], 0.1);
        let b = Tensor::<f64>::full(&[8, 8, 4], 1.0);
        let big = inst(0.0, 0.0, 64.0, 64.0, 0);
        let small = inst(24.0, 24.0, 40.0, 40.0, 1);
        let a = assign_center(&[big, small], &grid, &p, &b).unwrap();
        let pos_small = a.positives_of(1);
        assert_eq!(pos_small.len(), 4);
        assert!(a.positives().all(|(_, l)| l.t_hat == 1.0));
        // Both center regions are the same 2x2 anchors.
        assert!(a.positives_of(0).is_empty());
    }

    fn random_fixture(seed: u64) -> (AnchorGrid, Vec<Instance>, Tensor<f64>, Tensor<f64>, TalConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = rng.random_range(2..=16);
        let w = rng.random_range(2..=16);
        let stride = 8.0;
        let k = rng.random_range(1..=3);
        let grid = AnchorGrid::new(h, w, stride);
        let (iw, ih) = (w as f64 * stride, h as f64 * stride);
        let n = rng.random_range(1..=4);
        let instances = (0..n)
            .map(|_| {
                let bw = rng.random_range(6.0..iw.clamp(7.0, 60.0));
                let bh = rng.random_range(6.0..ih.clamp(7.0, 60.0));
                let x1 = rng.random_range(0.0..(iw - bw).max(0.5));
                let y1 = rng.random_range(0.0..(ih - bh).max(0.5));
                inst(x1, y1, x1 + bw, y1 + bh, rng.random_range(0..k))
            })
            .collect();
        // Scores on a coarse lattice so ties actually occur.
        let p = Tensor::from_fn(&[h, w, k], |_| rng.random_range(0..8) as f64 / 8.0);
        let b = Tensor::from_fn(&[h, w, 4], |_| rng.random_range(0.2..4.0));
        let cfg = TalConfig { m: rng.random_range(1..=15), ..TalConfig::default() };
        (grid, instances, p, b, cfg)
    }

    /// Exhaustive reference: every instance sorts all of its candidates.
    fn brute_force(grid: &AnchorGrid, instances: &[Instance], p: &Tensor<f64>, b: &Tensor<f64>, cfg: &TalConfig) -> Vec<(bool, Option<usize>, f64)> {
        let n = grid.len();
        let k = p.shape()[2];
        let mut claims: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); n];
        for (ii, ins) in instances.iter().enumerate() {
            let inside: Vec<usize> = (0..n)
                .filter(|&a| {
                    let x = ((a % grid.width) as f64 + 0.5) * grid.stride;
                    let y = ((a / grid.width) as f64 + 0.5) * grid.stride;
                    x > ins.bbox.x1 && x < ins.bbox.x2 && y > ins.bbox.y1 && y < ins.bbox.y2
                })
                .collect();
            let pool: Vec<usize> = if inside.is_empty() { grid.candidates(ins) } else { inside };
            let mut scored: Vec<(usize, f64, f64)> = pool
                .into_iter()
                .map(|a| {
                    let x = ((a % grid.width) as f64 + 0.5) * grid.stride;
                    let y = ((a / grid.width) as f64 + 0.5) * grid.stride;
                    let d: Vec<f64> = (0..4).map(|c| b.data()[a * 4 + c] * grid.stride).collect();
                    let pb = [x - d[0], y - d[1], x + d[2], y + d[3]];
                    let g = ins.bbox.to_array();
                    let iw = (pb[2].min(g[2]) - pb[0].max(g[0])).max(0.0);
                    let ih = (pb[3].min(g[3]) - pb[1].max(g[1])).max(0.0);
                    let inter = iw * ih;
                    let u = inter / ((pb[2] - pb[0]) * (pb[3] - pb[1]) + (g[2] - g[0]) * (g[3] - g[1]) - inter);
                    let s = p.data()[a * k + ins.class_id];
                    (a, s * u.powi(6), u)
                })
                .collect();
            scored.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
            for (a, t, u) in scored.into_iter().filter(|x| x.1 > 0.0).take(cfg.m) {
                claims[a].push((ii, t, u));
            }
        }
        let mut out = vec![(false, None, 0.0); n];
        let mut per_inst: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); instances.len()];
        for (a, c) in claims.iter().enumerate() {
            if let Some(best) = c.iter().fold(None::<&(usize, f64, f64)>, |acc, x| match acc {
                Some(b) if b.2 > x.2 || (b.2 == x.2 && b.0 < x.0) => Some(b),
                _ => Some(x),
            }) {
                per_inst[best.0].push((a, best.1, best.2));
            }
        }
        for (ii, members) in per_inst.iter().enumerate() {
            let mt = members.iter().map(|m| m.1).fold(0.0, f64::max);
            let mu = members.iter().map(|m| m.2).fold(0.0, f64::max);
            for &(a, t, _) in members {
                out[a] = (true, Some(ii), if mt > 0.0 { t * mu / mt } else { 0.0 });
            }
        }
        out
    }

    #[test]
    fn assignment_matches_brute_force() {
        for seed in 0..100 {
            let (grid, instances, p, b, cfg) = random_fixture(seed);
            let a = assign(&instances, &grid, &p, &b, &cfg).unwrap();
            let expect = brute_force(&grid, &instances, &p, &b, &cfg);
            for (k, (l, e)) in a.labels.iter().zip(&expect).enumerate() {
                assert_eq!(l.is_positive, e.0, "seed {seed} anchor {k}");
                if l.is_positive {
                    assert_eq!(l.instance, e.1, "seed {seed} anchor {k}");
                    assert!((l.t_hat - e.2).abs() < 1e-12, "seed {seed} anchor {k}");
                }
            }
            for i in 0..instances.len() {
                let pos = a.positives_of(i);
                assert!(pos.len() <= cfg.m);
                if !pos.is_empty() {
                    let mt = pos.iter().map(|&k| a.labels[k].t_hat).fold(0.0, f64::max);
                    let mu = pos.iter().map(|&k| a.labels[k].u).fold(0.0, f64::max);
                    assert!((mt - mu).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn scaling_scores_keeps_top_m(seed in 0u64..500, k in 0.05f64..=1.0) {
            let (grid, instances, p, b, cfg) = random_fixture(seed);
            let scaled = p.map(|x| x * k);
            let c1 = score_candidates(&instances, &grid, &p, &b, &cfg).unwrap();
            let c2 = score_candidates(&instances, &grid, &scaled, &b, &cfg).unwrap();
            for (a, b) in c1.iter().zip(&c2) {
                let mut s1 = select_top_m(&a.iter().map(|c| c.t).collect::<Vec<_>>(), cfg.m);
                let mut s2 = select_top_m(&b.iter().map(|c| c.t).collect::<Vec<_>>(), cfg.m);
                s1.sort();
                s2.sort();
                prop_assert_eq!(s1, s2);
            }
        }

        #[test]
        fn t_hat_preserves_order(t in proptest::collection::vec(0.0f64..1.0, 1..20), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = t.iter().map(|_| rng.random_range(0.0..1.0)).collect();
            let th = normalize_t(&t, &u);
            for i in 0..t.len() {
                for j in 0..t.len() {
                    if t[i] < t[j] {
                        prop_assert!(th[i] <= th[j]);
                    }
                }
            }
            let max_t = t.iter().copied().fold(0.0, f64::max);
            if max_t > 0.0 {
                let mu = u.iter().copied().fold(0.0, f64::max);
                let mth = th.iter().copied().fold(0.0, f64::max);
                prop_assert!((mth - mu).abs() < 1e-12);
            }
        }
    }
}
