//! Task-aligned classification and regression losses as graph ops.
//!
//! Both ops read a frozen [`Assignment`]: the labels `t_hat` are constants,
//! so the focal factor `|t_hat - s|^gamma` is differentiated through `s`
//! only. Each sum is divided by the assignment's normalizer
//! `max(sum t_hat, 1)`.

use std::sync::Arc;

use super::{AnchorGrid, Assignment};
use crate::error::{Error, Result};
use crate::geometry::{giou_with_grad, Instance};
use crate::tensor::{CustomOp, Graph, Scalar, Tensor, Var};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the log.
pub const BCE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls_pos: f64,
    pub cls_neg: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cls_pos + self.cls_neg + self.reg
    }

    pub fn is_finite(&self) -> bool {
        self.cls_pos.is_finite() && self.cls_neg.is_finite() && self.reg.is_finite()
    }

    /// Name of the first non-finite component.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [("cls_pos", self.cls_pos), ("cls_neg", self.cls_neg), ("reg", self.reg)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

fn bce(s: f64, y: f64) -> f64 {
    let p = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn bce_grad(s: f64, y: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&s) {
        return 0.0;
    }
    (s - y) / (s * (1.0 - s))
}

/// `x^gamma` and its derivative for `x >= 0`.
fn focal(x: f64, gamma: f64) -> (f64, f64) {
    let d = if gamma == 0.0 { 0.0 } else { gamma * x.powf(gamma - 1.0) };
    (x.powf(gamma), d)
}

/// Positive term `|t_hat - s|^gamma * BCE(s, t_hat)` and its derivative in `s`.
fn positive_term(s: f64, t_hat: f64, gamma: f64) -> (f64, f64) {
    let diff = s - t_hat;
    let (f, df) = focal(diff.abs(), gamma);
    let df = if diff < 0.0 { -df } else { df };
    let b = bce(s, t_hat);
    (f * b, df * b + f * bce_grad(s, t_hat))
}

/// Negative term `s^gamma * BCE(s, 0)` and its derivative in `s`.
fn negative_term(s: f64, gamma: f64) -> (f64, f64) {
    let (f, df) = focal(s.max(0.0), gamma);
    let b = bce(s, 0.0);
    (f * b, df * b + f * bce_grad(s, 0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClsPart {
    /// Matched class channel of positive anchors.
    Positive,
    /// Every other (anchor, class) pair.
    Negative,
}

/// Classification loss over `P_align [H, W, K]`.
#[derive(Clone, Debug)]
pub struct ClassificationLoss {
    /// Per anchor: `(class, t_hat)` for positives.
    pub targets: Vec<Option<(usize, f64)>>,
    pub gamma: f64,
    pub normalizer: f64,
    pub part: ClsPart,
}

impl ClassificationLoss {
    pub fn new(a: &Assignment, instances: &[Instance], gamma: f64, part: ClsPart) -> Self {
        let targets = a
            .labels
            .iter()
            .map(|l| match (l.is_positive, l.instance) {
                (true, Some(i)) => Some((instances[i].class_id, l.t_hat)),
                _ => None,
            })
            .collect();
        Self {
            targets,
            gamma,
            normalizer: a.normalizer(),
            part,
        }
    }

    fn check<T: Scalar>(&self, p: &Tensor<T>) -> Result<usize> {
        let (h, w, k) = p.hwc()?;
        if h * w != self.targets.len() {
            return Err(Error::shape(self.name_str(), format!("{} targets for scores {:?}", self.targets.len(), p.shape())));
        }
        Ok(k)
    }

    fn name_str(&self) -> &'static str {
        match self.part {
            ClsPart::Positive => "cls_pos",
            ClsPart::Negative => "cls_neg",
        }
    }

    /// Visits every contributing entry as `(flat index, value, d/ds)`.
    fn terms<T: Scalar>(&self, p: &Tensor<T>, k: usize, mut f: impl FnMut(usize, f64, f64)) {
        for (a, target) in self.targets.iter().enumerate() {
            for c in 0..k {
                let idx = a * k + c;
                let s = p.data()[idx].as_f64();
                match (self.part, target) {
                    (ClsPart::Positive, Some((tc, th))) if *tc == c => {
                        let (v, d) = positive_term(s, *th, self.gamma);
                        f(idx, v, d);
                    }
                    (ClsPart::Negative, Some((tc, _))) if *tc == c => {}
                    (ClsPart::Negative, _) => {
                        let (v, d) = negative_term(s, self.gamma);
                        f(idx, v, d);
                    }
                    _ => {}
                }
            }
        }
    }
}

impl<T: Scalar> CustomOp<T> for ClassificationLoss {
    fn name(&self) -> &str {
        self.name_str()
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let p = inputs[0];
        let k = self.check(p)?;
        let mut total = 0.0;
        self.terms(p, k, |_, v, _| total += v);
        Ok(Tensor::scalar(T::from_f64(total / self.normalizer)))
    }

    fn backward(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let p = inputs[0];
        let k = p.shape()[2];
        let scale = grad_out.item().as_f64() / self.normalizer;
        let mut grad = vec![T::zero(); p.len()];
        self.terms(p, k, |idx, _, d| grad[idx] = T::from_f64(d * scale));
        vec![Some(Tensor::new(p.shape().to_vec(), grad).expect("gradient shape matches input"))]
    }
}

/// Weighted GIoU loss over `B_align [H, W, 4]` (side distances in stride units).
#[derive(Clone, Debug)]
pub struct RegressionLoss {
    /// `(anchor, ground-truth box, weight)` per positive anchor.
    pub targets: Vec<(usize, [f64; 4], f64)>,
    pub grid: AnchorGrid,
    pub normalizer: f64,
}

impl RegressionLoss {
    pub fn new(a: &Assignment, instances: &[Instance], grid: AnchorGrid) -> Self {
        let targets = a
            .positives()
            .filter_map(|(k, l)| l.instance.map(|i| (k, instances[i].bbox.to_array(), l.t_hat)))
            .collect();
        Self {
            targets,
            grid,
            normalizer: a.normalizer(),
        }
    }
}

impl<T: Scalar> CustomOp<T> for RegressionLoss {
    fn name(&self) -> &str {
        "reg"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let b = inputs[0];
        let (h, w, c) = b.hwc()?;
        if c != 4 || (h, w) != (self.grid.height, self.grid.width) {
            return Err(Error::shape("reg", format!("boxes {:?} on a {}x{} grid", b.shape(), self.grid.height, self.grid.width)));
        }
        let mut total = 0.0;
        for &(a, gt, wgt) in &self.targets {
            if wgt == 0.0 {
                continue;
            }
            let pred = super::predicted_box(&self.grid, b, a);
            let (g, _) = giou_with_grad(pred, gt);
            total += wgt * (1.0 - g);
        }
        Ok(Tensor::scalar(T::from_f64(total / self.normalizer)))
    }

    fn backward(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let b = inputs[0];
        let scale = grad_out.item().as_f64() / self.normalizer;
        let s = self.grid.stride;
        let mut grad = vec![T::zero(); b.len()];
        for &(a, gt, wgt) in &self.targets {
            if wgt == 0.0 {
                continue;
            }
            let pred = super::predicted_box(&self.grid, b, a);
            let (_, dg) = giou_with_grad(pred, gt);
            // x1 = x - l*s, y1 = y - t*s, x2 = x + r*s, y2 = y + b*s.
            let d = [wgt * s * dg[0], wgt * s * dg[1], -wgt * s * dg[2], -wgt * s * dg[3]];
            for c in 0..4 {
                grad[a * 4 + c] += T::from_f64(d[c] * scale);
            }
        }
        vec![Some(Tensor::new(b.shape().to_vec(), grad).expect("gradient shape matches input"))]
    }
}

/// Graph handles of the three loss components and their sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossVars {
    pub cls_pos: Var,
    pub cls_neg: Var,
    pub reg: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        LossBreakdown {
            cls_pos: g.value(self.cls_pos).item().as_f64(),
            cls_neg: g.value(self.cls_neg).item().as_f64(),
            reg: g.value(self.reg).item().as_f64(),
        }
    }
}

/// `cls_pos + cls_neg + reg` for one image.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    p_align: Var,
    b_align: Var,
    assignment: &Assignment,
    instances: &[Instance],
    grid: AnchorGrid,
    gamma: f64,
) -> Result<LossVars> {
    let pos = ClassificationLoss::new(assignment, instances, gamma, ClsPart::Positive);
    let neg = ClassificationLoss::new(assignment, instances, gamma, ClsPart::Negative);
    let cls_pos = g.custom(Arc::new(pos), &[p_align])?;
    let cls_neg = g.custom(Arc::new(neg), &[p_align])?;
    let reg = g.custom(Arc::new(RegressionLoss::new(assignment, instances, grid)), &[b_align])?;
    let c = g.add(cls_pos, cls_neg)?;
    let total = g.add(c, reg)?;
    Ok(LossVars { cls_pos, cls_neg, reg, total })
}

/// `(cls_pos, cls_neg)` evaluated on a score map.
pub fn cls_loss<T: Scalar>(p_align: &Tensor<T>, a: &Assignment, instances: &[Instance], gamma: f64) -> Result<(f64, f64)> {
    let eval = |part| -> Result<f64> {
        let op = ClassificationLoss::new(a, instances, gamma, part);
        Ok(CustomOp::<T>::forward(&op, &[p_align])?.item().as_f64())
    };
    Ok((eval(ClsPart::Positive)?, eval(ClsPart::Negative)?))
}

/// Regression loss evaluated on a box map.
pub fn reg_loss<T: Scalar>(b_align: &Tensor<T>, a: &Assignment, instances: &[Instance], grid: AnchorGrid) -> Result<f64> {
    let op = RegressionLoss::new(a, instances, grid);
    Ok(CustomOp::<T>::forward(&op, &[b_align])?.item().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::tal::AnchorLabel;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(is_positive: bool, t_hat: f64) -> (Assignment, Vec<Instance>) {
        let inst = Instance { bbox: BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(), class_id: 0 };
        let label = AnchorLabel {
            is_positive,
            instance: is_positive.then_some(0),
            t_hat,
            ..AnchorLabel::default()
        };
        (Assignment { labels: vec![label] }, vec![inst])
    }

    #[test]
    fn positive_at_target_is_zero() {
        let (a, inst) = single(true, 0.7);
        let p = Tensor::<f64>::full(&[1, 1, 1], 0.7);
        assert_eq!(cls_loss(&p, &a, &inst, 2.0).unwrap().0, 0.0);
    }

    #[test]
    fn negative_at_zero_is_zero() {
        let (a, inst) = single(false, 0.0);
        let p = Tensor::<f64>::full(&[1, 1, 2], 0.0);
        assert_eq!(cls_loss(&p, &a, &inst, 2.0).unwrap().1, 0.0);
    }

    #[test]
    fn positive_half_score_full_target() {
        let (a, inst) = single(true, 1.0);
        let p = Tensor::<f64>::full(&[1, 1, 1], 0.5);
        let (pos, neg) = cls_loss(&p, &a, &inst, 2.0).unwrap();
        assert!((pos - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((pos - 0.17329).abs() < 1e-5);
        assert_eq!(neg, 0.0);
    }

    #[test]
    fn regression_examples() {
        // A 1x1 grid with stride 1 whose only anchor sits at (0.5, 0.5).
        let grid = AnchorGrid::new(1, 1, 1.0);
        let inst = vec![Instance { bbox: BBox::new(2.0, 2.0, 3.0, 3.0).unwrap(), class_id: 0 }];
        let label = AnchorLabel { is_positive: true, instance: Some(0), t_hat: 0.5, ..AnchorLabel::default() };
        let a = Assignment { labels: vec![label] };
        let b = Tensor::<f64>::new(vec![1, 1, 4], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let loss = reg_loss(&b, &a, &inst, grid).unwrap();
        assert!((loss - 0.5 * (1.0 + 7.0 / 9.0)).abs() < 1e-12);

        let exact = Tensor::<f64>::new(vec![1, 1, 4], vec![-1.5, -1.5, 2.5, 2.5]).unwrap();
        assert!(reg_loss(&exact, &a, &inst, grid).unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_weight_positive_has_no_gradient() {
        let grid = AnchorGrid::new(1, 1, 1.0);
        let inst = vec![Instance { bbox: BBox::new(2.0, 2.0, 3.0, 3.0).unwrap(), class_id: 0 }];
        let label = AnchorLabel { is_positive: true, instance: Some(0), t_hat: 0.0, ..AnchorLabel::default() };
        let a = Assignment { labels: vec![label] };
        let mut g = Graph::<f64>::new();
        let b = g.param(Tensor::full(&[1, 1, 4], 0.5));
        let op = RegressionLoss::new(&a, &inst, grid);
        let l = g.custom(Arc::new(op), &[b]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn breakdown_is_non_negative_and_additive() {
        let lb = LossBreakdown { cls_pos: 0.0, cls_neg: 0.0, reg: 0.0 };
        assert_eq!(lb.total(), 0.0);
        let lb = LossBreakdown { cls_pos: 0.1, cls_neg: f64::NAN, reg: 0.3 };
        assert_eq!(lb.non_finite_component(), Some("cls_neg"));
    }

    #[test]
    fn loss_gradients_match_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = AnchorGrid::new(4, 4, 8.0);
            let k = 3;
            let instances = vec![
                Instance { bbox: BBox::new(3.0, 5.0, 22.0, 27.0).unwrap(), class_id: 1 },
                Instance { bbox: BBox::new(10.0, 12.0, 31.0, 30.0).unwrap(), class_id: 2 },
            ];
            let p = Tensor::from_fn(&[4, 4, k], |_| rng.random_range(0.02..0.98));
            let b = Tensor::from_fn(&[4, 4, 4], |_| rng.random_range(0.3..2.5));
            let cfg = crate::tal::TalConfig { m: 4, ..Default::default() };
            let a = crate::tal::assign(&instances, &grid, &p, &b, &cfg).unwrap();
            assert!(a.num_positive() > 0);
            let report = grad_check(
                &[p.clone(), b.clone()],
                |g, v| Ok(total_loss(g, v[0], v[1], &a, &instances, grid, 2.0)?.total),
                &GradCheckOptions { eps: 1e-6, max_entries: None, seed, abs_floor: 1e-6, ..GradCheckOptions::default() },
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-3, "seed {seed}: {report:?}");
        }
    }
}
