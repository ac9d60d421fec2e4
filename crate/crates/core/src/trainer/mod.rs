//! Backbone + T-Head model, SGD, the training loop and checkpoints.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_HEADER};
pub use optim::Sgd;
pub use train::{
    frozen_loss, image_loss, predict, train, train_on_records, train_step, BatchGrads, StepReport, TrainSummary,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::DatasetConfig;
use crate::tal::{AnchorGrid, AssignerKind, TalConfig};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::thead::{apply_conv, bind, init_conv, init_thead, thead_forward, Conv, HeadConfig, HeadOutputs, ParamTree, THeadParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output channels of each 3x3 backbone conv.
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub head: HeadConfig,
    pub tal: TalConfig,
    pub assigner: AssignerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Intermediate checkpoint period in steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    /// Scene generation settings used by `gen`.
    pub data: DatasetConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            backbone_channels: vec![16, 32, 64, 64],
            backbone_strides: vec![2, 2, 2, 1],
            head: HeadConfig::default(),
            tal: TalConfig::default(),
            assigner: AssignerKind::Tal,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 50,
            steps: 500,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 0,
            nms_iou: crate::geometry::DEFAULT_NMS_IOU,
            score_threshold: 0.05,
            max_detections: 100,
            data: DatasetConfig::default(),
            train_scenes: 64,
            val_scenes: 64,
        }
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Total backbone stride.
    pub fn stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / self.stride()
    }

    pub fn grid(&self) -> AnchorGrid {
        let n = self.feature_size();
        AnchorGrid::new(n, n, self.stride() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.tal.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.backbone_channels.is_empty() || self.backbone_channels.len() != self.backbone_strides.len() {
            return bad("backbone channels and strides must be non-empty and of equal length".into());
        }
        if self.backbone_strides.contains(&0) || self.backbone_channels.contains(&0) {
            return bad("backbone strides and channels must be positive".into());
        }
        if self.backbone_channels.last() != Some(&self.head.channels) {
            return bad(format!(
                "last backbone width {:?} must equal head channels {}",
                self.backbone_channels.last(),
                self.head.channels
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.stride()) {
            return bad(format!("stride {} must divide image size {}", self.stride(), self.image_size));
        }
        if self.data.image_size != self.image_size {
            return bad(format!("data image size {} differs from model image size {}", self.data.image_size, self.image_size));
        }
        if self.data.classes != self.head.num_classes {
            return bad(format!("data has {} classes, head predicts {}", self.data.classes, self.head.num_classes));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return bad("lr, momentum and weight_decay must be non-negative".into());
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad(format!("nms_iou must lie in (0, 1], got {}", self.nms_iou));
        }
        self.data.validate()
    }
}

/// Backbone convolutions followed by the head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub backbone: Vec<Conv<P>>,
    pub head: THeadParams<P>,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            backbone: self.backbone.iter().map(|c| c.map(f)).collect(),
            head: self.head.map(f),
        }
    }
}

impl<P> ParamTree<P> for ModelParams<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        for (k, c) in self.backbone.iter().enumerate() {
            c.visit(&p(&format!("backbone.{k}")), f);
        }
        self.head.visit(&p("head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        for (k, c) in self.backbone.iter_mut().enumerate() {
            c.visit_mut(&p(&format!("backbone.{k}")), f);
        }
        self.head.visit_mut(&p("head"), f);
    }
}

impl<P> ModelParams<P> {
    /// Parameters in visiting order with their names.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n, p)));
        out
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<Tensor<U>> {
        self.map(&mut |t| t.cast())
    }
}

/// Deterministic initial parameters for `cfg`.
pub fn build_model(cfg: &ModelConfig) -> Result<ModelParams<Tensor<f32>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cin = 3;
    let mut backbone = Vec::with_capacity(cfg.backbone_channels.len());
    for (&cout, &stride) in cfg.backbone_channels.iter().zip(&cfg.backbone_strides) {
        backbone.push(init_conv(&mut rng, cin, cout, 3, stride, std::f64::consts::SQRT_2));
        cin = cout;
    }
    let head = init_thead(&cfg.head, &mut rng)?;
    Ok(ModelParams { backbone, head })
}

pub fn bind_model<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<Tensor<T>>) -> ModelParams<Var> {
    ModelParams {
        backbone: params.backbone.iter().map(|c| c.map(&mut |t| g.param(t.clone()))).collect(),
        head: bind(g, &params.head),
    }
}

/// Image `[H, W, 3]` in `[0, 1]` → head outputs on the stride-`s` grid.
pub fn model_forward<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<Var>, image: &Tensor<T>) -> Result<HeadOutputs<Var>> {
    let centered = image.map(|v| v - T::from_f64(0.5));
    let mut x = g.constant(centered);
    for conv in &params.backbone {
        let y = apply_conv(g, x, conv)?;
        x = g.relu(y);
    }
    thead_forward(g, x, &params.head)
}
