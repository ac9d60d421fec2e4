use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{bind_model, build_model, model_forward, save_checkpoint, Checkpoint, ModelConfig, ModelParams, Sgd};
use crate::error::{Error, Result};
use crate::metrics::plot::{line_plot, Series};
use crate::synthdata::{read_dataset, SceneRecord};
use crate::tal::{assign_with, total_loss, Assignment, LossBreakdown, LossVars};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::thead::HeadOutputs;

/// Builds the loss graph of one scene: forward, frozen assignment, loss.
pub fn image_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<crate::tensor::Var>,
    cfg: &ModelConfig,
    scene: &SceneRecord,
) -> Result<(LossVars, Assignment, HeadOutputs<crate::tensor::Var>)> {
    let image: Tensor<T> = scene.image.cast();
    let out = model_forward(g, params, &image)?;
    let grid = cfg.grid();
    let a = assign_with(cfg.assigner, &scene.instances, &grid, g.value(out.p_align), g.value(out.b_align), &cfg.tal)?;
    let loss = total_loss(g, out.p_align, out.b_align, &a, &scene.instances, grid, cfg.tal.gamma)?;
    Ok((loss, a, out))
}

/// Loss of one scene under a fixed assignment.
pub fn frozen_loss(
    cfg: &ModelConfig,
    params: &ModelParams<Tensor<f32>>,
    scene: &SceneRecord,
    assignment: &Assignment,
) -> Result<LossBreakdown> {
    let mut g = Graph::<f32>::new();
    let vars = bind_model(&mut g, params);
    let out = model_forward(&mut g, &vars, &scene.image)?;
    let lv = total_loss(&mut g, out.p_align, out.b_align, assignment, &scene.instances, cfg.grid(), cfg.tal.gamma)?;
    Ok(lv.breakdown(&g))
}

/// Forward pass only.
pub fn predict(params: &ModelParams<Tensor<f32>>, image: &Tensor<f32>) -> Result<HeadOutputs<Tensor<f32>>> {
    let mut g = Graph::new();
    let vars = bind_model(&mut g, params);
    let out = model_forward(&mut g, &vars, image)?;
    Ok(out.values(&g))
}

/// Batch-averaged gradients (in parameter visiting order) and losses.
#[derive(Clone, Debug)]
pub struct BatchGrads {
    pub grads: Vec<Tensor<f32>>,
    pub loss: LossBreakdown,
    pub num_positive: usize,
}

impl BatchGrads {
    /// Per-scene graphs, reduced in batch order.
    pub fn compute(cfg: &ModelConfig, params: &ModelParams<Tensor<f32>>, batch: &[&SceneRecord]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut grads: Vec<Tensor<f32>> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut loss = LossBreakdown::default();
        let mut num_positive = 0;
        for scene in batch {
            let mut g = Graph::<f32>::new();
            let vars = bind_model(&mut g, params);
            let (lv, a, _) = image_loss(&mut g, &vars, cfg, scene)?;
            let lb = lv.breakdown(&g);
            loss.cls_pos += lb.cls_pos;
            loss.cls_neg += lb.cls_neg;
            loss.reg += lb.reg;
            num_positive += a.num_positive();
            let mut gr = g.backward(lv.total)?;
            for ((_, v), acc) in vars.named().iter().zip(grads.iter_mut()) {
                if let Some(t) = gr.take(**v) {
                    for (x, y) in acc.data_mut().iter_mut().zip(t.data()) {
                        *x += *y;
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let inv = 1.0 / batch.len() as f32;
        for t in &mut grads {
            for x in t.data_mut() {
                *x *= inv;
            }
        }
        loss.cls_pos /= n;
        loss.cls_neg /= n;
        loss.reg /= n;
        Ok(Self { grads, loss, num_positive })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    /// Batch-mean loss before the update.
    pub loss: LossBreakdown,
    pub num_positive: usize,
}

/// One optimization step on `batch`.
pub fn train_step(
    cfg: &ModelConfig,
    params: &mut ModelParams<Tensor<f32>>,
    opt: &mut Sgd<f32>,
    batch: &[&SceneRecord],
    step: usize,
) -> Result<StepReport> {
    let bg = BatchGrads::compute(cfg, params, batch)?;
    if let Some(component) = bg.loss.non_finite_component() {
        return Err(Error::NonFinite { component, step });
    }
    if bg.grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { component: "gradient", step });
    }
    opt.step(step, params, &bg.grads)?;
    Ok(StepReport { step, loss: bg.loss, num_positive: bg.num_positive })
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: Checkpoint,
    pub curve: Vec<StepReport>,
}

/// Infinite stream of scene indices: successive seeded permutations.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), pos: n };
        b.pos = b.order.len();
        b
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

const CURVE_HEADER: &str = "step,cls_pos,cls_neg,reg,total";

fn write_curve(dir: &Path, curve: &[StepReport]) -> Result<()> {
    let path = dir.join("loss_curve.csv");
    let mut text = format!("{CURVE_HEADER}\n");
    for r in curve {
        text.push_str(&format!("{},{},{},{},{}\n", r.step, r.loss.cls_pos, r.loss.cls_neg, r.loss.reg, r.loss.total()));
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let series = |name, f: fn(&LossBreakdown) -> f64| Series {
        name,
        points: curve.iter().map(|r| (r.step as f64, f(&r.loss))).collect(),
    };
    let svg = line_plot(
        "training loss",
        "step",
        "loss",
        &[
            series("total", |l| l.total()),
            series("cls_pos", |l| l.cls_pos),
            series("cls_neg", |l| l.cls_neg),
            series("reg", |l| l.reg),
        ],
    );
    let path = dir.join("loss_curve.svg");
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))
}

/// Trains from the initialization of `cfg` on `records`.
///
/// With an output directory, writes `loss_curve.csv`, `loss_curve.svg`,
/// `checkpoint/` and, if `checkpoint_every > 0`, `checkpoint-<step>/`.
/// `progress` receives every step report.
pub fn train_on_records(
    cfg: &ModelConfig,
    records: &[SceneRecord],
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&StepReport),
) -> Result<TrainSummary> {
    let mut params = build_model(cfg)?;
    if records.is_empty() && cfg.steps > 0 {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if let Some(bad) = records.iter().find(|r| r.image.shape() != [cfg.image_size, cfg.image_size, 3]) {
        return Err(Error::InvalidArgument(format!(
            "scene {} has image shape {:?}, model expects {}x{}x3",
            bad.seed,
            bad.image.shape(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.warmup_steps);
    let mut batches = Batches::new(records.len(), cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batches.next_batch(cfg.batch_size);
        let batch: Vec<&SceneRecord> = idx.iter().map(|&i| &records[i]).collect();
        let report = train_step(cfg, &mut params, &mut opt, &batch, step)?;
        progress(&report);
        curve.push(report);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                let ck = Checkpoint { step: step + 1, config: cfg.clone(), params: params.clone() };
                save_checkpoint(&ck, &dir.join(format!("checkpoint-{}", step + 1)))?;
            }
        }
    }
    let checkpoint = Checkpoint { step: cfg.steps, config: cfg.clone(), params };
    if let Some(dir) = out_dir {
        save_checkpoint(&checkpoint, &dir.join("checkpoint"))?;
        write_curve(dir, &curve)?;
    }
    Ok(TrainSummary { checkpoint, curve })
}

/// Trains on the dataset file at `dataset`, writing results to `out_dir`.
pub fn train(cfg: &ModelConfig, dataset: &Path, out_dir: &Path) -> Result<TrainSummary> {
    let records = read_dataset(dataset)?;
    let mut log = std::io::stderr();
    train_on_records(cfg, &records, Some(out_dir), |r| {
        if r.step % 25 == 0 || r.step + 1 == cfg.steps {
            let _ = writeln!(
                log,
                "step {:>5}  total {:.4}  cls_pos {:.4}  cls_neg {:.4}  reg {:.4}  positives {}",
                r.step,
                r.loss.total(),
                r.loss.cls_pos,
                r.loss.cls_neg,
                r.loss.reg,
                r.num_positive
            );
        }
    })
}
