//! End-to-end acceptance suite: one test per criterion, each printing one
//! `PASS`/`FAIL` line.
//!
//! Run with `cargo test -p tood-core --test acceptance -- --nocapture`.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tood_core::geometry::{bbox_to_distance, distance_to_bbox, giou, iou, nms};
use tood_core::metrics::evaluate;
use tood_core::selfcheck::{gradient_suites, identity_suite, GRAD_TOLERANCE};
use tood_core::synthdata::{dataset_from_bytes, dataset_to_bytes, generate_split, train_seeds, validation_seeds};
use tood_core::tal::{
    assign, cls_loss, reg_loss, write_anchor_dump, AnchorGrid, AnchorLabel, AssignerKind, Assignment, TalConfig,
};
use tood_core::trainer::{load_checkpoint, save_checkpoint, train_on_records, ModelConfig, TrainSummary};
use tood_core::{BBox, Detection, Error, Instance, Tensor};

/// AP50 on the 64 training scenes after the 500-step seed-0 run, pinned from
/// the first verified run (0.6791).
const TRAIN_AP50_BASELINE: f64 = 0.679;
const LOSS_RATIO_LIMIT: f64 = 0.5;
const GRADIENT_SEEDS: u64 = 10;
const GRADIENT_BUDGET_SECS: f64 = 120.0;
const IDENTITY_SEEDS: u64 = 10;
const ASSIGN_FIXTURES: u64 = 100;
const LOSS_FIXTURES: u64 = 20;
const LOSS_TOLERANCE: f64 = 1e-5;
const GEOMETRY_TOLERANCE: f64 = 1e-6;
const ALIGNMENT_SEEDS: [u64; 3] = [0, 1, 2];
const ALIGNMENT_WINS_NEEDED: usize = 2;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn inst(b: [f64; 4], class_id: usize) -> Instance {
    Instance { bbox: BBox::from_array(b).unwrap(), class_id }
}

fn anchor_point(grid: &AnchorGrid, a: usize) -> (f64, f64) {
    (((a % grid.width) as f64 + 0.5) * grid.stride, ((a / grid.width) as f64 + 0.5) * grid.stride)
}

fn plain_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn plain_giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    let enc = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if enc > 0.0 {
        iou - (enc - union) / enc
    } else {
        iou
    }
}

// 1

fn gradient_criterion() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut checked = 0;
    for seed in 0..GRADIENT_SEEDS {
        for r in gradient_suites(seed).expect("gradient suites run") {
            worst = worst.max(r.max_error);
            checked += 1;
            if !r.passed() {
                failures.push(format!("{}@{}={:.2e}", r.name, r.seed, r.max_error));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < GRADIENT_BUDGET_SECS,
        format!(
            "{checked} suites over {GRADIENT_SEEDS} seeds, worst rel err {worst:.2e} (tol {GRAD_TOLERANCE:.0e}), {secs:.1}s (budget {GRADIENT_BUDGET_SECS}s) {}",
            failures.join(" ")
        ),
    )
}

// 2

fn identity_criterion() -> Outcome {
    let mut failures = Vec::new();
    for seed in 0..IDENTITY_SEEDS {
        for r in identity_suite(seed).expect("identity suite runs") {
            if !r.passed() {
                failures.push(format!("{}@{}={:.2e}", r.name, r.seed, r.max_error));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("M=1 sqrt identity (1e-6), O=0 bitwise, unit gates exact over {IDENTITY_SEEDS} seeds {}", failures.join(" ")),
    )
}

// 3

fn assignment_fixture(seed: u64) -> (AnchorGrid, Vec<Instance>, Tensor<f64>, Tensor<f64>, TalConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa55a);
    let h = rng.random_range(2..=16);
    let w = rng.random_range(2..=16);
    let stride = 8.0;
    let k = rng.random_range(1..=3);
    let grid = AnchorGrid::new(h, w, stride);
    let (iw, ih) = (w as f64 * stride, h as f64 * stride);
    let n = rng.random_range(1..=4);
    let instances = (0..n)
        .map(|_| {
            let bw = rng.random_range(4.0..iw.clamp(5.0, 64.0));
            let bh = rng.random_range(4.0..ih.clamp(5.0, 64.0));
            let x1 = rng.random_range(0.0..(iw - bw).max(0.5));
            let y1 = rng.random_range(0.0..(ih - bh).max(0.5));
            inst([x1, y1, x1 + bw, y1 + bh], rng.random_range(0..k))
        })
        .collect();
    let p = Tensor::from_fn(&[h, w, k], |_| rng.random_range(0..10) as f64 / 10.0);
    let b = Tensor::from_fn(&[h, w, 4], |_| rng.random_range(0.1..4.0));
    let cfg = TalConfig { m: rng.random_range(1..=15), ..TalConfig::default() };
    (grid, instances, p, b, cfg)
}

/// Reference labels `(is_positive, instance, t_hat)` by full enumeration.
fn brute_force_assign(
    grid: &AnchorGrid,
    instances: &[Instance],
    p: &Tensor<f64>,
    b: &Tensor<f64>,
    cfg: &TalConfig,
) -> Vec<(bool, Option<usize>, f64)> {
    let n = grid.len();
    let k = p.shape()[2];
    let mut claims: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); n];
    for (ii, ins) in instances.iter().enumerate() {
        let g = ins.bbox.to_array();
        let inside: Vec<usize> = (0..n)
            .filter(|&a| {
                let (x, y) = anchor_point(grid, a);
                x > g[0] && x < g[2] && y > g[1] && y < g[3]
            })
            .collect();
        let pool = if inside.is_empty() {
            let (cx, cy) = ((g[0] + g[2]) / 2.0, (g[1] + g[3]) / 2.0);
            let d = |a: usize| {
                let (x, y) = anchor_point(grid, a);
                (x - cx).powi(2) + (y - cy).powi(2)
            };
            vec![(0..n).fold(0, |best, a| if d(a) < d(best) { a } else { best })]
        } else {
            inside
        };
        let mut scored: Vec<(usize, f64, f64)> = pool
            .into_iter()
            .map(|a| {
                let (x, y) = anchor_point(grid, a);
                let d: Vec<f64> = (0..4).map(|c| b.data()[a * 4 + c] * grid.stride).collect();
                let u = plain_iou([x - d[0], y - d[1], x + d[2], y + d[3]], g);
                let s = p.data()[a * k + ins.class_id];
                (a, s.powf(cfg.alpha) * u.powf(cfg.beta), u)
            })
            .collect();
        scored.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        for (a, t, u) in scored.into_iter().filter(|x| x.1 > 0.0).take(cfg.m) {
            claims[a].push((ii, t, u));
        }
    }
    let mut members: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); instances.len()];
    for (a, c) in claims.iter().enumerate() {
        let mut best: Option<(usize, f64, f64)> = None;
        for &x in c {
            best = match best {
                Some(b) if b.2 > x.2 || (b.2 == x.2 && b.0 < x.0) => Some(b),
                _ => Some(x),
            };
        }
        if let Some((ii, t, u)) = best {
            members[ii].push((a, t, u));
        }
    }
    let mut out = vec![(false, None, 0.0); n];
    for (ii, m) in members.iter().enumerate() {
        let mt = m.iter().map(|x| x.1).fold(0.0, f64::max);
        let mu = m.iter().map(|x| x.2).fold(0.0, f64::max);
        for &(a, t, _) in m {
            out[a] = (true, Some(ii), t * mu / mt);
        }
    }
    out
}

fn assignment_criterion() -> Outcome {
    let mut mismatches = Vec::new();
    let mut worst_norm = 0.0f64;
    let mut positives = 0;
    for seed in 0..ASSIGN_FIXTURES {
        let (grid, instances, p, b, cfg) = assignment_fixture(seed);
        let a = assign(&instances, &grid, &p, &b, &cfg).expect("assignment runs");
        let expect = brute_force_assign(&grid, &instances, &p, &b, &cfg);
        for (k, (l, e)) in a.labels.iter().zip(&expect).enumerate() {
            let same = l.is_positive == e.0 && (!l.is_positive || (l.instance == e.1 && (l.t_hat - e.2).abs() < 1e-12));
            if !same {
                mismatches.push(format!("fixture {seed} anchor {k}"));
            }
        }
        for i in 0..instances.len() {
            let pos = a.positives_of(i);
            positives += pos.len();
            if pos.len() > cfg.m {
                mismatches.push(format!("fixture {seed} instance {i} has {} > m positives", pos.len()));
            }
            if !pos.is_empty() {
                let mt = pos.iter().map(|&k| a.labels[k].t_hat).fold(0.0, f64::max);
                let mu = pos.iter().map(|&k| a.labels[k].u).fold(0.0, f64::max);
                worst_norm = worst_norm.max((mt - mu).abs());
            }
        }
    }
    mismatches.truncate(5);
    outcome(
        mismatches.is_empty() && worst_norm < 1e-12,
        format!(
            "{ASSIGN_FIXTURES} fixtures, {positives} positives match enumeration; max |max t_hat - max u| = {worst_norm:.1e} {}",
            mismatches.join("; ")
        ),
    )
}

// 4

struct DumpRow {
    is_positive: bool,
    instance: Option<usize>,
    t_hat: f64,
    pred: [f64; 4],
    gt: Option<[f64; 4]>,
    scores: Vec<f64>,
}

/// Parses the anchor dump by column name, without the library reader.
fn parse_dump(bytes: &[u8]) -> Vec<DumpRow> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap_or_else(|| panic!("dump lacks column {name}"));
    let score_cols: Vec<usize> = (0..).map_while(|c| header.iter().position(|h| h == format!("score_{c}"))).collect();
    let f = |rec: &csv::StringRecord, c: usize| -> f64 { rec[c].parse().unwrap() };
    let quad = |rec: &csv::StringRecord, prefix: &str| -> Option<[f64; 4]> {
        let cols = ["x1", "y1", "x2", "y2"].map(|s| col(&format!("{prefix}_{s}")));
        if rec[cols[0]].is_empty() {
            None
        } else {
            Some(cols.map(|c| f(rec, c)))
        }
    };
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            DumpRow {
                is_positive: &rec[col("is_positive")] == "1" || &rec[col("is_positive")] == "true",
                instance: Some(&rec[col("instance")]).filter(|s| !s.is_empty()).map(|s| s.parse().unwrap()),
                t_hat: f(&rec, col("t_hat")),
                pred: quad(&rec, "pred").expect("pred box is always written"),
                gt: quad(&rec, "gt"),
                scores: score_cols.iter().map(|&c| f(&rec, c)).collect(),
            }
        })
        .collect()
}

fn scalar_bce(s: f64, y: f64) -> f64 {
    let p = s.clamp(1e-6, 1.0 - 1e-6);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `(cls_pos, cls_neg, reg)` recomputed from dump rows alone.
fn recompute_losses(rows: &[DumpRow], instances: &[Instance], gamma: f64) -> (f64, f64, f64) {
    let (mut pos, mut neg, mut reg, mut norm) = (0.0, 0.0, 0.0, 0.0);
    for r in rows {
        let matched = if r.is_positive { r.instance.map(|i| instances[i].class_id) } else { None };
        for (c, &s) in r.scores.iter().enumerate() {
            if matched == Some(c) {
                pos += (r.t_hat - s).abs().powf(gamma) * scalar_bce(s, r.t_hat);
            } else {
                neg += s.powf(gamma) * scalar_bce(s, 0.0);
            }
        }
        if r.is_positive {
            norm += r.t_hat;
            reg += r.t_hat * (1.0 - plain_giou(r.pred, r.gt.expect("positives carry their gt")));
        }
    }
    let z = f64::max(norm, 1.0);
    (pos / z, neg / z, reg / z)
}

/// A 4x4 grid with one positive whose score equals its target, zero scores
/// elsewhere and an exact box: every loss is analytically zero.
fn zero_fixture() -> (AnchorGrid, Vec<Instance>, Assignment, Tensor<f64>, Tensor<f64>) {
    let grid = AnchorGrid::new(4, 4, 8.0);
    let instances = vec![inst([4.0, 4.0, 20.0, 20.0], 1)];
    let anchor = 5;
    let t_hat = 0.625;
    let mut labels = vec![AnchorLabel::default(); grid.len()];
    labels[anchor] = AnchorLabel { is_positive: true, instance: Some(0), s: t_hat, u: 1.0, t: t_hat, t_hat };
    let mut p = Tensor::zeros(&[4, 4, 2]);
    p.data_mut()[anchor * 2 + 1] = t_hat;
    let ltrb = bbox_to_distance(grid.point(anchor), &instances[0].bbox).map(|d| d / grid.stride);
    let b = Tensor::from_fn(&[4, 4, 4], |i| if i / 4 == anchor { ltrb[i % 4] } else { 1.0 });
    (grid, instances, Assignment { labels }, p, b)
}

fn loss_criterion() -> Outcome {
    let gamma = TalConfig::default().gamma;
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for seed in 0..LOSS_FIXTURES {
        let (grid, instances, a, p, b) = if seed == 0 {
            zero_fixture()
        } else {
            let (grid, instances, _, b, cfg) = assignment_fixture(1000 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = instances.iter().map(|i| i.class_id).max().unwrap() + 1;
            let p = Tensor::from_fn(&[grid.height, grid.width, k], |_| rng.random_range(0.0..1.0));
            let a = assign(&instances, &grid, &p, &b, &cfg).expect("assignment runs");
            (grid, instances, a, p, b)
        };
        let mut buf = Vec::new();
        write_anchor_dump(&mut buf, &grid, &a, &instances, &p, &b).expect("dump writes");
        let rows = parse_dump(&buf);
        let (pos, neg, reg) = recompute_losses(&rows, &instances, gamma);
        let (lpos, lneg) = cls_loss(&p, &a, &instances, gamma).expect("cls loss");
        let lreg = reg_loss(&b, &a, &instances, grid).expect("reg loss");
        if seed == 0 {
            worst = worst.max(lpos.abs()).max(lneg.abs()).max(lreg.abs()).max(pos.abs()).max(neg.abs()).max(reg.abs());
        } else {
            nonzero += usize::from(lpos > 0.0 && lneg > 0.0);
            worst = worst.max((pos - lpos).abs()).max((neg - lneg).abs()).max((reg - lreg).abs());
        }
    }
    outcome(
        worst < LOSS_TOLERANCE && nonzero == LOSS_FIXTURES as usize - 1,
        format!("{LOSS_FIXTURES} fixtures incl. analytic zeros, max deviation {worst:.2e} (tol {LOSS_TOLERANCE:.0e})"),
    )
}

// 5

fn geometry_criterion() -> Outcome {
    let b = |x1, y1, x2, y2| BBox::new(x1, y1, x2, y2).unwrap();
    let det = |bx, class_id, score| Detection { bbox: bx, class_id, score };
    let close = |x: f64, y: f64| (x - y).abs() <= GEOMETRY_TOLERANCE;
    let mut failed = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failed.push(name.to_string());
        }
    };
    check("iou identical", close(iou(&b(0., 0., 1., 1.), &b(0., 0., 1., 1.)), 1.0));
    check("iou disjoint", close(iou(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)), 0.0));
    check("iou half overlap", close(iou(&b(0., 0., 2., 2.), &b(1., 0., 3., 2.)), 1.0 / 3.0));
    check("giou identical", close(giou(&b(0., 0., 1., 1.), &b(0., 0., 1., 1.)), 1.0));
    check("giou disjoint", close(giou(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)), -7.0 / 9.0));
    check("giou nested", close(giou(&b(0., 0., 4., 4.), &b(1., 1., 2., 2.)), 1.0 / 16.0));
    let decoded = distance_to_bbox((4., 4.), [1., 2., 3., 4.]).unwrap().to_array();
    check("distance decode", decoded.iter().zip([3., 2., 7., 8.]).all(|(x, y)| close(*x, y)));
    let zero = distance_to_bbox((4., 4.), [0.; 4]).unwrap().to_array();
    check("zero distances", zero.iter().all(|x| close(*x, 4.0)));
    check("negative distance rejected", distance_to_bbox((0., 0.), [1., -0.5, 1., 1.]).is_err());
    let one = vec![det(b(0., 0., 4., 4.), 0, 0.3)];
    check("nms single", nms(&one, 0.6) == one);
    let kept = nms(&[det(b(0., 0., 4., 4.), 0, 0.8), det(b(0., 0., 4., 4.), 0, 0.9)], 0.6);
    check("nms duplicate", kept.len() == 1 && close(kept[0].score, 0.9));
    check("nms disjoint", nms(&[det(b(0., 0., 1., 1.), 0, 0.9), det(b(5., 5., 6., 6.), 0, 0.8)], 0.6).len() == 2);
    check(
        "nms class-wise",
        nms(&[det(b(0., 0., 4., 4.), 0, 0.9), det(b(0., 0., 4., 4.), 1, 0.8)], 0.6).len() == 2,
    );
    outcome(
        failed.is_empty(),
        format!("IoU/GIoU/distance/NMS examples to {GEOMETRY_TOLERANCE:.0e}, GIoU disjoint = -7/9 {}", failed.join(", ")),
    )
}

// 6

fn train_default(assigner: AssignerKind, seed: u64) -> TrainSummary {
    let cfg = ModelConfig { assigner, seed, ..ModelConfig::default() };
    let records = generate_split(train_seeds(cfg.train_scenes).start, cfg.train_scenes, &cfg.data).unwrap();
    train_on_records(&cfg, &records, None, |_| {}).expect("training runs")
}

fn smoke_criterion(first: &TrainSummary, second: &TrainSummary) -> Outcome {
    let cfg = &first.checkpoint.config;
    let initial = first.curve.first().unwrap().loss.total();
    let last = first.curve.last().unwrap().loss.total();
    let ratio = last / initial;
    let records = generate_split(train_seeds(cfg.train_scenes).start, cfg.train_scenes, &cfg.data).unwrap();
    let ap50 = evaluate(&first.checkpoint.params, cfg, &records).unwrap().report.ap50.unwrap_or(0.0);

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_checkpoint(&first.checkpoint, &a).unwrap();
    save_checkpoint(&second.checkpoint, &b).unwrap();
    let identical = ["manifest.txt", "payload.bin"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());

    outcome(
        ratio < LOSS_RATIO_LIMIT && ap50 > TRAIN_AP50_BASELINE && identical,
        format!(
            "{} steps: loss {initial:.4} -> {last:.4} (ratio {ratio:.3} < {LOSS_RATIO_LIMIT}), train AP50 {ap50:.4} > {TRAIN_AP50_BASELINE}, identical checkpoints {identical}",
            cfg.steps
        ),
    )
}

// 7

fn alignment_criterion(tal_seed0: &TrainSummary) -> Outcome {
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in ALIGNMENT_SEEDS {
        let tal = if seed == tal_seed0.checkpoint.config.seed { None } else { Some(train_default(AssignerKind::Tal, seed)) };
        let tal = tal.as_ref().unwrap_or(tal_seed0);
        let center = train_default(AssignerKind::Center, seed);
        let cfg = &tal.checkpoint.config;
        let val = generate_split(validation_seeds(cfg.val_scenes).start, cfg.val_scenes, &cfg.data).unwrap();
        let rt = evaluate(&tal.checkpoint.params, cfg, &val).unwrap().report;
        let rc = evaluate(&center.checkpoint.params, &center.checkpoint.config, &val).unwrap().report;
        let win = rt.pcc_top50 >= rc.pcc_top50 && rt.mean_iou_top10 >= rc.mean_iou_top10;
        wins += usize::from(win);
        notes.push(format!(
            "seed {seed}: pcc {:.3} vs {:.3}, iou {:.3} vs {:.3}{}",
            rt.pcc_top50,
            rc.pcc_top50,
            rt.mean_iou_top10,
            rc.mean_iou_top10,
            if win { " (win)" } else { "" }
        ));
    }
    outcome(
        wins >= ALIGNMENT_WINS_NEEDED,
        format!("TAL vs center on validation, {wins}/{} seeds with both >=: {}", ALIGNMENT_SEEDS.len(), notes.join("; ")),
    )
}

// 8

fn is_format_error(e: &Error) -> bool {
    matches!(e, Error::Format { .. })
}

fn round_trip_criterion(ckpt: &TrainSummary) -> Outcome {
    let mut failed = Vec::new();
    let cfg = ModelConfig::default();
    let records = generate_split(train_seeds(4).start, 4, &cfg.data).unwrap();
    let bytes = dataset_to_bytes(&records).unwrap();
    let back = dataset_from_bytes(&bytes).unwrap();
    if dataset_to_bytes(&back).unwrap() != bytes || back.len() != records.len() {
        failed.push("dataset bytes differ after round trip");
    }
    let same_pixels = records.iter().zip(&back).all(|(a, b)| {
        a.seed == b.seed
            && a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            && a.instances == b.instances
    });
    if !same_pixels {
        failed.push("dataset records differ after round trip");
    }
    if !dataset_from_bytes(&bytes[..bytes.len() - 3]).is_err_and(|e| is_format_error(&e)) {
        failed.push("truncated dataset accepted");
    }
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    if !dataset_from_bytes(&bad_magic).is_err_and(|e| is_format_error(&e)) {
        failed.push("dataset with bad magic accepted");
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    save_checkpoint(&ckpt.checkpoint, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let bitwise = loaded.step == ckpt.checkpoint.step
        && loaded.config == ckpt.checkpoint.config
        && loaded.params.named().iter().zip(ckpt.checkpoint.params.named()).all(|((na, a), (nb, b))| {
            na == &nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    if !bitwise {
        failed.push("checkpoint differs after round trip");
    }
    let payload = path.join("payload.bin");
    let full = std::fs::read(&payload).unwrap();
    std::fs::write(&payload, &full[..full.len() / 2]).unwrap();
    if !matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))) {
        failed.push("truncated checkpoint payload accepted");
    }
    std::fs::write(&payload, &full).unwrap();
    let manifest = path.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replacen("param head.inter.0.weight 3,3,", "param head.inter.0.weight 3,3,1", 1)).unwrap();
    if !matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))) {
        failed.push("edited checkpoint dims accepted");
    }
    std::fs::write(&manifest, text.lines().filter(|l| !l.starts_with("param head.cls.predict.bias")).collect::<Vec<_>>().join("\n"))
        .unwrap();
    if !matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))) {
        failed.push("checkpoint with a missing parameter accepted");
    }
    outcome(
        failed.is_empty(),
        format!("dataset and checkpoint bitwise round trips; truncation, bad magic, bad dims, missing param rejected {}", failed.join(", ")),
    )
}

fn report(n: usize, name: &str, o: Outcome) {
    println!("criterion {n} {name}: {} {}", if o.passed { "PASS" } else { "FAIL" }, o.detail.trim_end());
    assert!(o.passed, "criterion {n} ({name}) failed: {}", o.detail.trim_end());
}

/// The seed-0 TAL run, shared by criteria 6, 7 and 8.
fn seed0_tal() -> &'static TrainSummary {
    static RUN: OnceLock<TrainSummary> = OnceLock::new();
    RUN.get_or_init(|| train_default(AssignerKind::Tal, 0))
}

#[test]
fn criterion_1_gradient_suites() {
    report(1, "gradient suites", gradient_criterion());
}

#[test]
fn criterion_2_identities() {
    report(2, "identities", identity_criterion());
}

#[test]
fn criterion_3_assignment_oracle() {
    report(3, "assignment oracle", assignment_criterion());
}

#[test]
fn criterion_4_loss_oracle() {
    report(4, "loss oracle", loss_criterion());
}

#[test]
fn criterion_5_geometry_oracles() {
    report(5, "geometry oracles", geometry_criterion());
}

#[test]
fn criterion_6_smoke_training() {
    let second = train_default(AssignerKind::Tal, 0);
    report(6, "smoke training", smoke_criterion(seed0_tal(), &second));
}

#[test]
fn criterion_7_alignment_vs_center_sampling() {
    report(7, "alignment vs center sampling", alignment_criterion(seed0_tal()));
}

#[test]
fn criterion_8_format_round_trips() {
    report(8, "format round trips", round_trip_criterion(seed0_tal()));
}
