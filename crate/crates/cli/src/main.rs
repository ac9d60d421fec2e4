//! `tood`: generate synthetic scenes, train, evaluate and self-check.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tood_core::metrics::{evaluate, write_alignment_report, AlignmentReport};
use tood_core::synthdata::{generate_split, write_dataset, read_dataset, VALIDATION_SEED_BASE};
use tood_core::tal::{assign_with, write_anchor_dump_file, AssignerKind};
use tood_core::trainer::{load_checkpoint, predict, train, ModelConfig};
use tood_core::{selfcheck, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tood", version, about = "Task-aligned one-stage detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset file.
    Gen(GenArgs),
    /// Train a model; writes checkpoints and the loss curve to --out.
    Train(TrainArgs),
    /// AP and alignment report of one checkpoint.
    Eval(EvalArgs),
    /// Side-by-side census of two checkpoints.
    Analyze(AnalyzeArgs),
    /// Run the gradient and identity suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Model config (JSON); its `data` section sets the scene parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file to write.
    #[arg(long)]
    out: PathBuf,
    /// First scene seed; defaults to the start of the chosen split.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of scenes; defaults to the config's split size.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, value_enum, default_value = "train")]
    split: Split,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's initialization and shuffling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Two checkpoint directories, e.g. the TAL model then the baseline.
    #[arg(long, required = true, num_args = 1)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        None => Ok(ModelConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.into(), source: e })?;
            ModelConfig::from_json(&text)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (base, default_count) = match a.split {
        Split::Train => (0, cfg.train_scenes),
        Split::Val => (VALIDATION_SEED_BASE, cfg.val_scenes),
    };
    let first = a.seed.unwrap_or(base);
    let count = a.count.unwrap_or(default_count);
    let records = generate_split(first, count, &cfg.data)?;
    write_dataset(&records, &a.out)?;
    let n: usize = records.iter().map(|r| r.instances.len()).sum();
    println!("wrote {count} scenes ({n} instances, seeds {first}..{}) to {}", first + count as u64, a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let summary = train(&cfg, &a.dataset, &a.out)?;
    if let (Some(first), Some(last)) = (summary.curve.first(), summary.curve.last()) {
        println!("initial loss {:.4}, final loss {:.4}", first.loss.total(), last.loss.total());
    }
    println!("checkpoint written to {}", a.out.join("checkpoint").display());
    Ok(())
}

fn report_line(r: &AlignmentReport) -> String {
    let ap = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    format!(
        "ap {} ap50 {} pcc_top50 {:.4} mean_iou_top10 {:.4} correct {} redundant {} error {}",
        ap(r.ap),
        ap(r.ap50),
        r.pcc_top50,
        r.mean_iou_top10,
        r.n_correct,
        r.n_redundant,
        r.n_error
    )
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let records = read_dataset(&a.dataset)?;
    create_dir(&a.out)?;
    let ev = evaluate(&ckpt.params, &ckpt.config, &records)?;
    write_alignment_report(&a.out.join("alignment_report.csv"), &ev.report)?;
    write_file(&a.out.join("pr_curve.svg"), &ev.pr_svg())?;
    if let Some(scene) = records.first() {
        let cfg = &ckpt.config;
        let out = predict(&ckpt.params, &scene.image)?;
        let grid = cfg.grid();
        let asg = assign_with(cfg.assigner, &scene.instances, &grid, &out.p_align, &out.b_align, &cfg.tal)?;
        write_anchor_dump_file(&a.out.join("anchors_scene0.csv"), &grid, &asg, &scene.instances, &out.p_align, &out.b_align)?;
    }
    println!("{}", report_line(&ev.report));
    Ok(())
}

fn method_name(kind: AssignerKind) -> &'static str {
    match kind {
        AssignerKind::Tal => "T-head + TAL",
        AssignerKind::Center => "T-head + center sampling",
    }
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let records = read_dataset(&a.dataset)?;
    create_dir(&a.out)?;
    let mut text = String::from("method,ap,pcc_top50,mean_iou_top10,n_correct,n_redundant,n_error\n");
    let mut names: Vec<String> = Vec::new();
    for path in &a.checkpoint {
        let ckpt = load_checkpoint(path)?;
        let ev = evaluate(&ckpt.params, &ckpt.config, &records)?;
        let mut name = method_name(ckpt.config.assigner).to_string();
        if names.contains(&name) {
            name = format!("{name} ({})", path.display());
        }
        let r = &ev.report;
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            name.replace(',', ";"),
            r.ap.map(|v| v.to_string()).unwrap_or_default(),
            r.pcc_top50,
            r.mean_iou_top10,
            r.n_correct,
            r.n_redundant,
            r.n_error
        ));
        println!("{name}: {}", report_line(r));
        names.push(name);
    }
    write_file(&a.out.join("analysis.csv"), &text)
}

/// Returns whether every suite passed.
fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let results = selfcheck::run_all(a.seed..a.seed + a.seeds)?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{status} {:<18} seed {:<3} max error {:.3e} (tolerance {:.0e}, {} entries)",
            r.name, r.seed, r.max_error, r.tolerance, r.checked
        );
    }
    println!("{} of {} suites passed", results.iter().filter(|r| r.passed()).count(), results.len());
    Ok(ok)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Analyze(a) => cmd_analyze(a)?,
        Command::Gradcheck(a) => {
            if !cmd_gradcheck(a)? {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Command::Analyze(a) = &cli.command {
        if a.checkpoint.len() != 2 {
            eprintln!("error: analyze takes exactly two --checkpoint values, got {}", a.checkpoint.len());
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
