//! Finite-difference gradient suites and head identities, runnable from the
//! command line.
//!
//! Every suite builds a double-precision graph whose output is a random
//! weighted sum of the op under test, so no entry of the gradient is
//! trivially constant. Wherever an op has a kink at its initial value
//! (bilinear sampling at integer offsets, which is where the zero-initialized
//! offset head starts) the inputs are moved off it first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::synthdata::{generate_scene, DatasetConfig};
use crate::tal::{assign_with, total_loss, AnchorGrid, Assignment, TalConfig};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use crate::thead::{
    aligned_boxes, aligned_scores, gate_layers, init_thead, thead_forward, HeadConfig, ParamTree, THeadParams,
};
use crate::trainer::{bind_model, build_model, model_forward, ModelConfig, ModelParams};

/// Maximum relative error accepted by every gradient suite.
pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub seed: u64,
    /// Largest relative (gradient suites) or absolute (identities) deviation.
    pub max_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error <= self.tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn opts(seed: u64, max_entries: Option<usize>) -> GradCheckOptions {
    GradCheckOptions { eps: 1e-5, max_entries, seed, abs_floor: 1e-6, tolerance: GRAD_TOLERANCE }
}

fn result(name: &'static str, seed: u64, r: GradCheckReport) -> SuiteResult {
    SuiteResult { name, seed, max_error: r.max_relative_error, tolerance: GRAD_TOLERANCE, checked: r.entries_checked }
}

/// Convolution at strides 1 and 2.
pub fn conv_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = vec![
        rand_tensor(&mut rng, &[6, 7, 3], -1.0, 1.0),
        rand_tensor(&mut rng, &[3, 3, 3, 4], -0.5, 0.5),
        rand_tensor(&mut rng, &[4], -0.5, 0.5),
    ];
    let w1 = rand_tensor(&mut rng, &[6, 7, 4], -1.0, 1.0);
    let w2 = rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0);
    let r = grad_check(
        &params,
        |g, v| {
            let a = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            let b = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            let sa = weighted_sum(g, a, &w1)?;
            let sb = weighted_sum(g, b, &w2)?;
            g.add(sa, sb)
        },
        &opts(seed, None),
    )?;
    Ok(result("conv2d", seed, r))
}

/// relu, sigmoid, exp, sqrt, powf, mul, broadcast mul, add, scale.
pub fn pointwise_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = vec![
        rand_tensor(&mut rng, &[3, 4, 2], 0.1, 1.0),
        rand_tensor(&mut rng, &[3, 4, 2], -1.5, 1.5),
        rand_tensor(&mut rng, &[3, 4, 1], 0.1, 1.0),
    ];
    let w = rand_tensor(&mut rng, &[3, 4, 2], -1.0, 1.0);
    let r = grad_check(
        &params,
        |g, v| {
            let s = g.sigmoid(v[1]);
            let e = g.exp(v[1]);
            let r = g.relu(v[1]);
            let q = g.sqrt(v[0]);
            let p = g.powf(v[0], 2.5);
            let m = g.mul_broadcast(s, v[2])?;
            let a = g.mul(q, e)?;
            let b = g.add(m, a)?;
            let c = g.add(b, r)?;
            let d = g.scale(p, 0.3);
            let y = g.add(c, d)?;
            weighted_sum(g, y, &w)
        },
        &opts(seed, None),
    )?;
    Ok(result("pointwise", seed, r))
}

/// concat, global average pooling, linear layers and layer gating.
pub fn attention_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = vec![
        rand_tensor(&mut rng, &[4, 4, 3], -1.0, 1.0),
        rand_tensor(&mut rng, &[4, 4, 3], -1.0, 1.0),
        rand_tensor(&mut rng, &[6, 3], -1.0, 1.0),
        rand_tensor(&mut rng, &[3], -0.5, 0.5),
        rand_tensor(&mut rng, &[3, 2], -1.0, 1.0),
        rand_tensor(&mut rng, &[2], -0.5, 0.5),
    ];
    let w = rand_tensor(&mut rng, &[4, 4, 6], -1.0, 1.0);
    let r = grad_check(
        &params,
        |g, v| {
            let cat = g.concat(&[v[0], v[1]])?;
            let pooled = g.global_avg_pool(cat)?;
            let h = g.linear(pooled, v[2], v[3])?;
            let h = g.sigmoid(h);
            let z = g.linear(h, v[4], v[5])?;
            let gates = g.sigmoid(z);
            let task = gate_layers(g, &[v[0], v[1]], gates)?;
            let y = g.concat(&task)?;
            weighted_sum(g, y, &w)
        },
        &opts(seed, None),
    )?;
    Ok(result("attention", seed, r))
}

/// Offset bilinear sampling, with offsets kept off integer coordinates.
pub fn sampling_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = rand_tensor(&mut rng, &[5, 6, 4], 0.2, 3.0);
    let offsets = Tensor::from_fn(&[5, 6, 8], |_| {
        let whole = rng.random_range(-2..=2) as f64;
        whole + rng.random_range(0.1..0.9)
    });
    let w = rand_tensor(&mut rng, &[5, 6, 4], -1.0, 1.0);
    let r = grad_check(
        &[map, offsets],
        |g, v| {
            let y = g.offset_sample(v[0], v[1])?;
            weighted_sum(g, y, &w)
        },
        &opts(seed, None),
    )?;
    Ok(result("offset_sample", seed, r))
}

/// Random non-zero alignment outputs, so offsets leave integer coordinates
/// and every branch carries gradient.
fn perturb_alignment_heads(head: &mut THeadParams<Tensor<f64>>, rng: &mut ChaCha8Rng) {
    for conv in [&mut head.prob.predict, &mut head.offset.predict] {
        conv.weight = rand_tensor(rng, conv.weight.shape(), -0.1, 0.1);
        conv.bias = rand_tensor(rng, conv.bias.shape(), -0.4, 0.4);
    }
}

/// Zero-initialized biases leave pre-activations at exactly 0 wherever a
/// whole receptive field is dead, which puts relu on its kink.
fn jitter_biases(tree: &mut impl ParamTree<Tensor<f64>>, rng: &mut ChaCha8Rng) {
    tree.visit_mut("", &mut |name, t| {
        if name.ends_with("bias") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    });
}

fn flatten<P: Clone>(tree: &impl ParamTree<P>) -> Vec<P> {
    let mut out = Vec::new();
    tree.visit("", &mut |_, p| out.push(p.clone()));
    out
}

/// Whole T-Head: aligned scores and boxes against every head parameter.
pub fn head_suite(seed: u64) -> Result<SuiteResult> {
    let cfg = HeadConfig { channels: 8, layers: 3, num_classes: 2, attn_reduction: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = init_thead(&cfg, &mut rng)?.map(&mut |t| t.cast::<f64>());
    perturb_alignment_heads(&mut head, &mut rng);
    jitter_biases(&mut head, &mut rng);
    let x = rand_tensor(&mut rng, &[6, 6, 8], -1.0, 1.0);
    let wp = rand_tensor(&mut rng, &[6, 6, 2], -1.0, 1.0);
    let wb = rand_tensor(&mut rng, &[6, 6, 4], -1.0, 1.0);
    let r = grad_check(
        &flatten(&head),
        |g, v| {
            let mut it = v.iter().copied();
            let bound = head.map(&mut |_| it.next().expect("one var per parameter"));
            let xv = g.constant(x.clone());
            let out = thead_forward(g, xv, &bound)?;
            let a = weighted_sum(g, out.p_align, &wp)?;
            let b = weighted_sum(g, out.b_align, &wb)?;
            g.add(a, b)
        },
        &opts(seed, Some(8)),
    )?;
    Ok(result("thead", seed, r))
}

/// Classification and regression losses against the aligned maps, with the
/// assignment frozen.
pub fn loss_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = AnchorGrid::new(5, 5, 8.0);
    let instances = crate::synthdata::generate_scene(seed, &DatasetConfig {
        image_size: 40,
        min_size: 10.0,
        max_size: 24.0,
        max_per_scene: 3,
        ..DatasetConfig::default()
    })?
    .instances;
    let p = rand_tensor(&mut rng, &[5, 5, 3], 0.02, 0.98);
    let b = rand_tensor(&mut rng, &[5, 5, 4], 0.3, 2.5);
    let a = crate::tal::assign(&instances, &grid, &p, &b, &TalConfig { m: 5, ..TalConfig::default() })?;
    let r = grad_check(
        &[p, b],
        |g, v| Ok(total_loss(g, v[0], v[1], &a, &instances, grid, 2.0)?.total),
        &opts(seed, None),
    )?;
    Ok(result("tal_loss", seed, r))
}

/// Small model used by the full-graph suite.
pub fn desk_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        backbone_channels: vec![8, 8],
        backbone_strides: vec![2, 2],
        head: HeadConfig { channels: 8, layers: 3, num_classes: 3, attn_reduction: 2 },
        tal: TalConfig { m: 5, ..TalConfig::default() },
        data: DatasetConfig { image_size: 32, min_size: 8.0, max_size: 20.0, max_per_scene: 2, ..DatasetConfig::default() },
        seed,
        ..ModelConfig::default()
    }
}

/// Initial parameters of [`desk_model_config`] in double precision, with the
/// alignment heads and biases moved off their kinks.
pub fn desk_model_params(cfg: &ModelConfig) -> Result<ModelParams<Tensor<f64>>> {
    let mut params = build_model(cfg)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    perturb_alignment_heads(&mut params.head, &mut rng);
    jitter_biases(&mut params, &mut rng);
    Ok(params)
}

/// Frozen assignment of `params` on `scene`, computed once from the
/// unperturbed forward pass.
pub fn frozen_assignment(
    cfg: &ModelConfig,
    params: &ModelParams<Tensor<f64>>,
    scene: &crate::synthdata::SceneRecord,
) -> Result<Assignment> {
    let mut g = Graph::<f64>::new();
    let vars = bind_model(&mut g, params);
    let out = model_forward(&mut g, &vars, &scene.image.cast())?;
    assign_with(cfg.assigner, &scene.instances, &cfg.grid(), g.value(out.p_align), g.value(out.b_align), &cfg.tal)
}

/// Backbone, T-Head and TAL loss end to end, against every parameter.
pub fn model_suite(seed: u64) -> Result<SuiteResult> {
    let cfg = desk_model_config(seed);
    let params = desk_model_params(&cfg)?;
    let scene = generate_scene(seed, &cfg.data)?;
    let a = frozen_assignment(&cfg, &params, &scene)?;
    let image: Tensor<f64> = scene.image.cast();
    let grid = cfg.grid();
    let r = grad_check(
        &flatten(&params),
        |g, v| {
            let mut it = v.iter().copied();
            let bound = params.map(&mut |_| it.next().expect("one var per parameter"));
            let out = model_forward(g, &bound, &image)?;
            Ok(total_loss(g, out.p_align, out.b_align, &a, &scene.instances, grid, cfg.tal.gamma)?.total)
        },
        &opts(seed, Some(4)),
    )?;
    Ok(result("model", seed, r))
}

/// All gradient suites for one seed.
pub fn gradient_suites(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        conv_suite(seed)?,
        pointwise_suite(seed)?,
        attention_suite(seed)?,
        sampling_suite(seed)?,
        head_suite(seed)?,
        loss_suite(seed)?,
        model_suite(seed)?,
    ])
}

/// `M = 1` gives `P_align^2 = P`; `O = 0` gives `B_align = B` exactly;
/// unit gates give task features equal to the interactive features.
pub fn identity_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::<f64>::new();
    let p = g.constant(rand_tensor(&mut rng, &[6, 6, 3], 0.0, 1.0));
    let ones = g.constant(Tensor::full(&[6, 6, 1], 1.0));
    let pa = aligned_scores(&mut g, p, ones)?;
    let max_sq = g
        .value(pa)
        .data()
        .iter()
        .zip(g.value(p).data())
        .map(|(a, b)| (a * a - b).abs())
        .fold(0.0, f64::max);

    let b = g.constant(rand_tensor(&mut rng, &[6, 6, 4], 0.1, 5.0));
    let zeros = g.constant(Tensor::zeros(&[6, 6, 8]));
    let ba = aligned_boxes(&mut g, b, zeros)?;
    let bitwise = g.value(ba).data().iter().zip(g.value(b).data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();

    let inter: Vec<Var> = (0..4).map(|_| g.constant(rand_tensor(&mut rng, &[6, 6, 5], 0.0, 2.0))).collect();
    let unit = g.constant(Tensor::full(&[4], 1.0));
    let task = gate_layers(&mut g, &inter, unit)?;
    let gate_diff = task
        .iter()
        .zip(&inter)
        .flat_map(|(t, x)| g.value(*t).data().iter().zip(g.value(*x).data()).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);

    Ok(vec![
        SuiteResult { name: "identity_prob_map", seed, max_error: max_sq, tolerance: 1e-6, checked: 108 },
        SuiteResult { name: "identity_offsets", seed, max_error: bitwise as f64, tolerance: 0.0, checked: 144 },
        SuiteResult { name: "identity_gates", seed, max_error: gate_diff, tolerance: 0.0, checked: 720 },
    ])
}

/// Every suite over `seeds`.
pub fn run_all(seeds: std::ops::Range<u64>) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for s in seeds {
        out.extend(gradient_suites(s)?);
        out.extend(identity_suite(s)?);
    }
    Ok(out)
}
