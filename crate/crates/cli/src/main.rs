//! `wseg`: dataset generation, training, EM, evaluation and gradient checks.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or I/O error,
//! 3 numerical abort.

mod artifacts;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use wseg_core::dataset::{read_dataset, read_label_space, write_dataset};
use wseg_core::em::{initialize, run_em, stage_name, EmConfig, EmData};
use wseg_core::eval::{hard_segmentation, iou_scores, report_table, ConfusionMatrix, ScoreReport, StageScores};
use wseg_core::gradcheck::{run_grad_check, GradCheckConfig};
use wseg_core::segmenter::extract_features;
use wseg_core::synth::{generate_dataset, DatasetSpec, SceneRecord, SHAPES};
use wseg_core::Segmenter;

use crate::config::Preset;

#[derive(Parser)]
#[command(name = "wseg", version, about = "Weakly-supervised segmentation by EM")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "WSEG_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train and score the initial model only.
    TrainInit(RunArgs),
    /// Run the initial model and K EM rounds, or resume from a checkpoint.
    RunEm(RunEmArgs),
    /// Score a checkpoint (or the ground truth itself) on one split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference loss gradients.
    GradCheck(GradCheckArgs),
    /// Print the score table of a finished run.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 300)]
    simple: usize,
    #[arg(long, default_value_t = 150)]
    complex: usize,
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Cue noise in [0, 1]; 0.5 is moderate.
    #[arg(long, default_value_t = 0.5)]
    noise_level: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Output directory; also the dataset directory unless --data is given.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Number of EM rounds.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    iou_weight: Option<f64>,
}

#[derive(Args)]
struct RunEmArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue from `checkpoints/<name>.wst` of an earlier run.
    #[arg(long)]
    from_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Simple,
    Complex,
    Val,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score the ground truth against itself.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    /// Where to write `reports/eval.{json,txt}`; defaults to --data.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory holding labels.txt; defaults to --out.
    #[arg(long)]
    data: Option<PathBuf>,
}

/// A verification that ran and failed.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<wseg_core::Error>())
        .any(wseg_core::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("wseg: {}", msg.as_ref());
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.classes == 0 || a.classes > SHAPES.len() {
        bail!("--classes must be in 1..={}, got {}", SHAPES.len(), a.classes);
    }
    let spec = DatasetSpec {
        classes: a.classes,
        simple: a.simple,
        complex: a.complex,
        val: a.val,
        height: a.height,
        width: a.width,
        noise_level: a.noise_level,
        seed: a.seed,
    };
    let data = generate_dataset(&spec)?;
    write_dataset(&a.out, &data).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!(
        "simple {}  complex {}  val {}  total {}",
        data.simple.len(),
        data.complex.len(),
        data.val.len(),
        data.simple.len() + data.complex.len() + data.val.len()
    );
    Ok(())
}

fn resolve_config(a: &RunArgs) -> Result<EmConfig> {
    let mut overrides = Vec::new();
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let flags = [
        ("k", a.k.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("eta", a.eta.map(|v| v.to_string())),
        ("iou_weight", a.iou_weight.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    }
    config::resolve(a.preset, a.config.as_deref(), &overrides)
}

fn data_dir(a: &RunArgs) -> &Path {
    a.data.as_deref().unwrap_or(&a.out)
}

fn print_table(report: &ScoreReport, space: &wseg_core::LabelSpace) {
    print!("{}", report_table(report, space));
}

fn train_init(a: &RunArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    let data = read_dataset(data_dir(a))?;
    let em_data = EmData {
        space: &data.space,
        simple: &data.simple,
        complex: &data.complex,
        val: &data.val,
    };
    log("training initial model");
    let state = initialize(&em_data, &cfg)?;
    artifacts::save_checkpoint(&a.out, 0, &state.params, &state.report, &cfg, &data.space)?;
    print_table(&state.report.scores, &data.space);
    Ok(())
}

fn run_em_cmd(a: &RunEmArgs) -> Result<()> {
    let cfg = resolve_config(&a.run)?;
    let data = read_dataset(data_dir(&a.run))?;
    let em_data = EmData {
        space: &data.space,
        simple: &data.simple,
        complex: &data.complex,
        val: &data.val,
    };
    let resume = a
        .from_checkpoint
        .as_deref()
        .map(artifacts::load_state)
        .transpose()?;
    if let Some(s) = &resume {
        log(format!("resuming after {}", stage_name(s.completed)));
    }
    let out = &a.run.out;
    let state = run_em(&em_data, &cfg, resume, |c| {
        log(format!(
            "{}: val mIoU {:.4}",
            stage_name(c.iteration),
            c.report.scores.stages[c.iteration].miou
        ));
        artifacts::save_checkpoint(out, c.iteration, c.params, c.report, &cfg, &data.space)
            .map_err(|e| wseg_core::Error::Format(format!("{e:#}")))
    })?;
    print_table(&state.report.scores, &data.space);
    Ok(())
}

fn eval_split(data: &wseg_core::synth::SyntheticDataset, split: Split) -> Vec<&SceneRecord> {
    match split {
        Split::Simple => data.simple.iter().map(|e| &e.scene).collect(),
        Split::Complex => data.complex.iter().collect(),
        Split::Val => data.val.iter().collect(),
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let records = eval_split(&data, a.split);
    let space = &data.space;
    let ignore = space.ignore_label();
    let (name, model) = match &a.checkpoint {
        Some(path) => {
            let params = artifacts::load_params(path)?;
            if params.num_labels() != space.num_labels() {
                bail!(
                    "checkpoint scores {} labels, dataset has {}",
                    params.num_labels(),
                    space.num_labels()
                );
            }
            let name = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            (name, Some(params))
        }
        None => ("oracle".to_string(), None),
    };
    let mats: Vec<Result<ConfusionMatrix>> = records
        .par_iter()
        .map(|r| {
            let pred = match &model {
                Some(m) => hard_segmentation(&m.forward(&extract_features(&r.image))?, ignore),
                None => r.gt.clone(),
            };
            let mut cm = ConfusionMatrix::new(space.num_labels());
            cm.accumulate(&pred, &r.gt, ignore)?;
            Ok(cm)
        })
        .collect();
    let mut total = ConfusionMatrix::new(space.num_labels());
    for m in mats {
        total.merge(&m?)?;
    }
    let scores = iou_scores(&total);
    let report = ScoreReport {
        stages: vec![StageScores {
            name,
            per_class_iou: scores.per_class,
            miou: scores.miou,
        }],
    };
    let out = a.out.as_deref().unwrap_or(&a.data).join(artifacts::REPORTS);
    std::fs::create_dir_all(&out)?;
    artifacts::write_json(&out.join("eval.json"), &report)?;
    std::fs::write(out.join("eval.txt"), report_table(&report, space))?;
    print_table(&report, space);
    Ok(())
}

fn grad_check(a: &GradCheckArgs) -> Result<()> {
    let cfg = GradCheckConfig {
        trials: a.trials,
        tolerance: a.tolerance,
        h: a.step,
        seed: a.seed,
    };
    let report = run_grad_check(&cfg)?;
    if let Some(path) = &a.json {
        artifacts::write_json(path, &report)?;
    }
    println!("trials {}  checks {}", report.trials, report.checks);
    match &report.worst {
        Some(w) => println!(
            "worst relative error {:.3e} in {} (trial {}, coordinate {}: analytic {:.12e}, numeric {:.12e})",
            w.rel_error, w.loss, w.trial, w.coordinate, w.analytic, w.numeric
        ),
        None => println!("worst relative error 0"),
    }
    if report.passed() {
        println!("PASS (tolerance {:e})", report.tolerance);
        Ok(())
    } else {
        Err(CheckFailed(format!(
            "gradient check failed: worst relative error {:.3e} >= tolerance {:e}",
            report.worst_error(),
            report.tolerance
        ))
        .into())
    }
}

fn report(a: &ReportArgs) -> Result<()> {
    let space = read_label_space(a.data.as_deref().unwrap_or(&a.out))?;
    let scores = artifacts::read_scores(&a.out)?;
    let table = report_table(&scores, &space);
    std::fs::write(a.out.join(artifacts::REPORTS).join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log(format!("error: {e}"));
            return ExitCode::from(2);
        }
    }
    let result = match &cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::TrainInit(a) => train_init(a),
        Cmd::RunEm(a) => run_em_cmd(a),
        Cmd::Eval(a) => eval(a),
        Cmd::GradCheck(a) => grad_check(a),
        Cmd::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log(format!("error: {e:#}"));
            ExitCode::from(exit_code(&e))
        }
    }
}
