//! Task-aligned head.
//!
//! A single stack of `N` convolutions produces task-interactive features.
//! Each task then gates the stack layer-wise (layer attention), reduces the
//! gated concatenation with a 1x1 conv and predicts with a 3x3 conv. The
//! classification scores are rescaled by a spatial probability map `M`
//! (`P_align = sqrt(P * M)`), and each box side is resampled at a learned
//! offset (`O`, two coordinates per side).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Prior probability used to initialise the classification bias.
pub const CLS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Channels `C` of the incoming feature map and of every interactive layer.
    pub channels: usize,
    /// Number of interactive layers `N`.
    pub layers: usize,
    pub num_classes: usize,
    /// Layer-attention bottleneck: `fc1` maps `N*C -> C/r`, `fc2` maps `C/r -> N`.
    pub attn_reduction: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            layers: 6,
            num_classes: 3,
            attn_reduction: 4,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.layers == 0 || self.num_classes == 0 {
            return Err(Error::Config("head channels, layers and classes must be positive".into()));
        }
        if self.attn_reduction == 0 || self.channels < self.attn_reduction {
            return Err(Error::Config(format!(
                "attention reduction {} incompatible with {} channels",
                self.attn_reduction, self.channels
            )));
        }
        if self.channels < 4 {
            return Err(Error::Config("need at least 4 channels for the alignment heads".into()));
        }
        Ok(())
    }

    fn attn_hidden(&self) -> usize {
        self.channels / self.attn_reduction
    }

    fn align_hidden(&self) -> usize {
        self.channels / 4
    }
}

/// Convolution parameters; `P` is a stored tensor or a graph handle.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention<P> {
    pub fc1: Dense<P>,
    pub fc2: Dense<P>,
}

/// One task-aligned predictor (classification or localization).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPredictor<P> {
    pub attention: LayerAttention<P>,
    pub reduce: Conv<P>,
    pub predict: Conv<P>,
}

/// 1x1 reduction followed by a 3x3 prediction, used for `M` and `O`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentHead<P> {
    pub reduce: Conv<P>,
    pub predict: Conv<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct THeadParams<P> {
    pub inter: Vec<Conv<P>>,
    pub cls: TaskPredictor<P>,
    pub loc: TaskPredictor<P>,
    pub prob: AlignmentHead<P>,
    pub offset: AlignmentHead<P>,
}

/// Named traversal of a parameter tree in a fixed order.
pub trait ParamTree<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P> Conv<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Conv<Q> {
        Conv {
            weight: f(&self.weight),
            bias: f(&self.bias),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

impl<P> ParamTree<P> for Conv<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl<P> Dense<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Dense<Q> {
        Dense {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<P> ParamTree<P> for Dense<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl<P> TaskPredictor<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> TaskPredictor<Q> {
        TaskPredictor {
            attention: LayerAttention {
                fc1: self.attention.fc1.map(f),
                fc2: self.attention.fc2.map(f),
            },
            reduce: self.reduce.map(f),
            predict: self.predict.map(f),
        }
    }
}

impl<P> ParamTree<P> for TaskPredictor<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.attention.fc1.visit(&join(prefix, "attention.fc1"), f);
        self.attention.fc2.visit(&join(prefix, "attention.fc2"), f);
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.predict.visit(&join(prefix, "predict"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        self.attention.fc1.visit_mut(&join(prefix, "attention.fc1"), f);
        self.attention.fc2.visit_mut(&join(prefix, "attention.fc2"), f);
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.predict.visit_mut(&join(prefix, "predict"), f);
    }
}

impl<P> AlignmentHead<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> AlignmentHead<Q> {
        AlignmentHead {
            reduce: self.reduce.map(f),
            predict: self.predict.map(f),
        }
    }
}

impl<P> ParamTree<P> for AlignmentHead<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.predict.visit(&join(prefix, "predict"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.predict.visit_mut(&join(prefix, "predict"), f);
    }
}

impl<P> THeadParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> THeadParams<Q> {
        THeadParams {
            inter: self.inter.iter().map(|c| c.map(f)).collect(),
            cls: self.cls.map(f),
            loc: self.loc.map(f),
            prob: self.prob.map(f),
            offset: self.offset.map(f),
        }
    }
}

impl<P> ParamTree<P> for THeadParams<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (k, c) in self.inter.iter().enumerate() {
            c.visit(&join(prefix, &format!("inter.{k}")), f);
        }
        self.cls.visit(&join(prefix, "cls"), f);
        self.loc.visit(&join(prefix, "loc"), f);
        self.prob.visit(&join(prefix, "prob"), f);
        self.offset.visit(&join(prefix, "offset"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        for (k, c) in self.inter.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("inter.{k}")), f);
        }
        self.cls.visit_mut(&join(prefix, "cls"), f);
        self.loc.visit_mut(&join(prefix, "loc"), f);
        self.prob.visit_mut(&join(prefix, "prob"), f);
        self.offset.visit_mut(&join(prefix, "offset"), f);
    }
}

/// Total number of scalars in a parameter tree of tensors.
pub fn count_params<T: Scalar>(tree: &impl ParamTree<Tensor<T>>) -> usize {
    let mut n = 0;
    tree.visit("", &mut |_, t| n += t.len());
    n
}

/// Closed-form parameter count of the T-Head for `cfg`.
pub fn thead_param_count(cfg: &HeadConfig) -> usize {
    let (c, n, k) = (cfg.channels, cfg.layers, cfg.num_classes);
    let conv = |cin: usize, cout: usize, ks: usize| ks * ks * cin * cout + cout;
    let dense = |i: usize, o: usize| i * o + o;
    let inter = n * conv(c, c, 3);
    let attn = dense(n * c, cfg.attn_hidden()) + dense(cfg.attn_hidden(), n);
    let tap = |out: usize| attn + conv(n * c, c, 1) + conv(c, out, 3);
    let align = |out: usize| conv(n * c, cfg.align_hidden(), 1) + conv(cfg.align_hidden(), out, 3);
    inter + tap(k) + tap(4) + align(1) + align(8)
}

/// Closed-form parameter count of a conventional two-branch head with
/// `branch_layers` 3x3 convs per branch, plus a centerness output on the
/// localization branch when `centerness` is set.
pub fn parallel_head_param_count(channels: usize, num_classes: usize, branch_layers: usize, centerness: bool) -> usize {
    let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
    2 * branch_layers * conv(channels, channels)
        + conv(channels, num_classes)
        + conv(channels, 4)
        + if centerness { conv(channels, 1) } else { 0 }
}

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f32> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

/// Convolution with weights drawn from `N(0, gain^2 / fan_in)`.
pub fn init_conv<R: Rng>(rng: &mut R, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Conv<Tensor<f32>> {
    let fan_in = (k * k * cin) as f64;
    Conv {
        weight: normal_tensor(rng, &[k, k, cin, cout], gain / fan_in.sqrt()),
        bias: Tensor::zeros(&[cout]),
        stride,
        pad: (k - 1) / 2,
    }
}

fn init_dense<R: Rng>(rng: &mut R, n_in: usize, n_out: usize, gain: f64) -> Dense<Tensor<f32>> {
    Dense {
        weight: normal_tensor(rng, &[n_in, n_out], gain / (n_in as f64).sqrt()),
        bias: Tensor::zeros(&[n_out]),
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
const PREDICT_GAIN: f64 = 0.1;

/// Initial parameters. The `M` and `O` output convs start at zero so the head
/// begins at the identity alignment (`M = 0.5`, `O = 0`); the classification
/// bias encodes the prior [`CLS_PRIOR`].
pub fn init_thead<R: Rng>(cfg: &HeadConfig, rng: &mut R) -> Result<THeadParams<Tensor<f32>>> {
    cfg.validate()?;
    let (c, n) = (cfg.channels, cfg.layers);
    let inter = (0..n).map(|_| init_conv(rng, c, c, 3, 1, RELU_GAIN)).collect();
    let tap = |rng: &mut R, out: usize| TaskPredictor {
        attention: LayerAttention {
            fc1: init_dense(rng, n * c, cfg.attn_hidden(), RELU_GAIN),
            fc2: init_dense(rng, cfg.attn_hidden(), n, 1.0),
        },
        reduce: init_conv(rng, n * c, c, 1, 1, RELU_GAIN),
        predict: init_conv(rng, c, out, 3, 1, PREDICT_GAIN),
    };
    let mut cls = tap(rng, cfg.num_classes);
    let loc = tap(rng, 4);
    let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln() as f32;
    cls.predict.bias = Tensor::full(&[cfg.num_classes], prior_bias);

    let align = |rng: &mut R, out: usize| AlignmentHead {
        reduce: init_conv(rng, n * c, cfg.align_hidden(), 1, 1, RELU_GAIN),
        predict: init_conv(rng, cfg.align_hidden(), out, 3, 1, 0.0),
    };
    let prob = align(rng, 1);
    let offset = align(rng, 8);
    Ok(THeadParams { inter, cls, loc, prob, offset })
}

/// Registers every tensor of `params` as a graph parameter.
pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &THeadParams<Tensor<T>>) -> THeadParams<Var> {
    params.map(&mut |t| g.param(t.clone()))
}

pub fn apply_conv<T: Scalar>(g: &mut Graph<T>, x: Var, conv: &Conv<Var>) -> Result<Var> {
    g.conv2d(x, conv.weight, conv.bias, conv.stride, conv.pad)
}

/// `X_1 = relu(conv_1(x))`, `X_k = relu(conv_k(X_{k-1}))`; returns all `N` maps.
pub fn interactive_features<T: Scalar>(g: &mut Graph<T>, x_fpn: Var, convs: &[Conv<Var>]) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(convs.len());
    let mut cur = x_fpn;
    for conv in convs {
        let y = apply_conv(g, cur, conv)?;
        cur = g.relu(y);
        out.push(cur);
    }
    Ok(out)
}

/// `X_task_k = w_k * X_inter_k`.
pub fn gate_layers<T: Scalar>(g: &mut Graph<T>, inter: &[Var], w: Var) -> Result<Vec<Var>> {
    inter.iter().enumerate().map(|(k, &x)| g.gate(x, w, k)).collect()
}

/// Layer attention `w = sigmoid(fc2(relu(fc1(avgpool(concat(inter))))))` and
/// the gated task features.
pub fn layer_attention<T: Scalar>(
    g: &mut Graph<T>,
    inter: &[Var],
    attn: &LayerAttention<Var>,
) -> Result<(Var, Vec<Var>)> {
    let cat = g.concat(inter)?;
    let pooled = g.global_avg_pool(cat)?;
    let h = g.linear(pooled, attn.fc1.weight, attn.fc1.bias)?;
    let h = g.relu(h);
    let z = g.linear(h, attn.fc2.weight, attn.fc2.bias)?;
    let w = g.sigmoid(z);
    let task = gate_layers(g, inter, w)?;
    Ok((w, task))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification,
    Localization,
}

/// Raw prediction `Z = conv2(relu(conv1(concat(task_feats))))`.
pub fn tap_logits<T: Scalar>(g: &mut Graph<T>, task_feats: &[Var], tap: &TaskPredictor<Var>) -> Result<Var> {
    let cat = g.concat(task_feats)?;
    let r = apply_conv(g, cat, &tap.reduce)?;
    let r = g.relu(r);
    apply_conv(g, r, &tap.predict)
}

/// Task prediction: sigmoid scores `P` for classification, or `exp` side
/// distances `B` (in stride units) for localization.
pub fn tap_predict<T: Scalar>(
    g: &mut Graph<T>,
    task_feats: &[Var],
    tap: &TaskPredictor<Var>,
    task: Task,
) -> Result<Var> {
    let z = tap_logits(g, task_feats, tap)?;
    Ok(match task {
        Task::Classification => g.sigmoid(z),
        Task::Localization => g.exp(z),
    })
}

/// `M = sigmoid(conv2(relu(conv1(X_inter))))`.
pub fn probability_map<T: Scalar>(g: &mut Graph<T>, inter_cat: Var, head: &AlignmentHead<Var>) -> Result<Var> {
    let r = apply_conv(g, inter_cat, &head.reduce)?;
    let r = g.relu(r);
    let z = apply_conv(g, r, &head.predict)?;
    Ok(g.sigmoid(z))
}

/// `O = conv4(relu(conv3(X_inter)))`, 8 channels ordered
/// `(row, col)` per side `(l, t, r, b)`.
pub fn offset_map<T: Scalar>(g: &mut Graph<T>, inter_cat: Var, head: &AlignmentHead<Var>) -> Result<Var> {
    let r = apply_conv(g, inter_cat, &head.reduce)?;
    let r = g.relu(r);
    apply_conv(g, r, &head.predict)
}

/// `P_align = sqrt(P * M)`, `M` broadcast over classes.
pub fn aligned_scores<T: Scalar>(g: &mut Graph<T>, p: Var, m: Var) -> Result<Var> {
    let pm = g.mul_broadcast(p, m)?;
    Ok(g.sqrt(pm))
}

/// `B_align(i,j,c) = B(i + O(i,j,2c), j + O(i,j,2c+1), c)`.
pub fn aligned_boxes<T: Scalar>(g: &mut Graph<T>, b: Var, o: Var) -> Result<Var> {
    g.offset_sample(b, o)
}

/// `(M, P_align)` from the interactive stack.
pub fn align_classification<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    inter_cat: Var,
    head: &AlignmentHead<Var>,
) -> Result<(Var, Var)> {
    let m = probability_map(g, inter_cat, head)?;
    Ok((m, aligned_scores(g, p, m)?))
}

/// `(O, B_align)` from the interactive stack.
pub fn align_localization<T: Scalar>(
    g: &mut Graph<T>,
    b: Var,
    inter_cat: Var,
    head: &AlignmentHead<Var>,
) -> Result<(Var, Var)> {
    let o = offset_map(g, inter_cat, head)?;
    Ok((o, aligned_boxes(g, b, o)?))
}

/// Head outputs; `P` is a graph handle or an evaluated tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs<P> {
    pub p: P,
    pub b: P,
    pub m: P,
    pub o: P,
    pub p_align: P,
    pub b_align: P,
    pub w_cls: P,
    pub w_loc: P,
}

impl HeadOutputs<Var> {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> HeadOutputs<Tensor<T>> {
        let v = |x: Var| g.value(x).clone();
        HeadOutputs {
            p: v(self.p),
            b: v(self.b),
            m: v(self.m),
            o: v(self.o),
            p_align: v(self.p_align),
            b_align: v(self.b_align),
            w_cls: v(self.w_cls),
            w_loc: v(self.w_loc),
        }
    }
}

/// Full head on one feature map `[H, W, C]`.
pub fn thead_forward<T: Scalar>(g: &mut Graph<T>, x_fpn: Var, params: &THeadParams<Var>) -> Result<HeadOutputs<Var>> {
    let inter = interactive_features(g, x_fpn, &params.inter)?;
    let inter_cat = g.concat(&inter)?;

    let (w_cls, cls_feats) = layer_attention(g, &inter, &params.cls.attention)?;
    let p = tap_predict(g, &cls_feats, &params.cls, Task::Classification)?;
    let (w_loc, loc_feats) = layer_attention(g, &inter, &params.loc.attention)?;
    let b = tap_predict(g, &loc_feats, &params.loc, Task::Localization)?;

    let (m, p_align) = align_classification(g, p, inter_cat, &params.prob)?;
    let (o, b_align) = align_localization(g, b, inter_cat, &params.offset)?;
    Ok(HeadOutputs {
        p,
        b,
        m,
        o,
        p_align,
        b_align,
        w_cls,
        w_loc,
    })
}
