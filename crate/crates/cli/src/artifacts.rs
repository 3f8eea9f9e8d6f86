//! Fixed output layout under `--out`:
//!
//! ```text
//! manifest.jsonl, labels.txt, tensors/    dataset (see `wseg_core::dataset`)
//! checkpoints/<name>.wst                  parameters, rank-2 WST1
//! checkpoints/<name>.json                 {"d", "num_labels", "feature_version"}
//! checkpoints/<name>.report.json          run state needed to resume from <name>
//! reports/report.json                     {"stages": [...]}
//! reports/report.txt                      fixed-width table
//! reports/training.json                   config, per-epoch losses, set sizes
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use wseg_core::em::{checkpoint_name, EmConfig, EmReport, EmState};
use wseg_core::eval::{report_table, ScoreReport};
use wseg_core::segmenter::{ParamsSidecar, FEATURE_DIM};
use wseg_core::{LabelSpace, SegmenterParams, Tensor};

pub const CHECKPOINTS: &str = "checkpoints";
pub const REPORTS: &str = "reports";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// `checkpoints/<name>` without extension.
pub fn checkpoint_stem(out: &Path, iteration: usize) -> PathBuf {
    out.join(CHECKPOINTS).join(checkpoint_name(iteration))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn save_params(stem: &Path, params: &SegmenterParams) -> Result<()> {
    let wst = with_suffix(stem, ".wst");
    params
        .to_tensor()
        .save(&wst)
        .with_context(|| format!("writing {}", wst.display()))?;
    write_json(&with_suffix(stem, ".json"), &params.sidecar())
}

pub fn load_params(wst: &Path) -> Result<SegmenterParams> {
    let tensor = Tensor::load(wst).with_context(|| format!("reading {}", wst.display()))?;
    let params = SegmenterParams::from_tensor(&tensor).with_context(|| format!("decoding {}", wst.display()))?;
    let sidecar_path = wst.with_extension("json");
    if sidecar_path.exists() {
        let sidecar: ParamsSidecar = read_json(&sidecar_path)?;
        if sidecar != params.sidecar() {
            bail!(
                "{} does not describe {} (d={}, labels={}, features={})",
                sidecar_path.display(),
                wst.display(),
                sidecar.d,
                sidecar.num_labels,
                sidecar.feature_version
            );
        }
    }
    if params.dim() != FEATURE_DIM {
        bail!("{}: feature dimension {} != {FEATURE_DIM}", wst.display(), params.dim());
    }
    Ok(params)
}

#[derive(Serialize)]
struct Training<'a> {
    config: &'a EmConfig,
    train_losses: &'a [Vec<f64>],
    sizes: &'a wseg_core::em::DatasetSizes,
    complex_kept: &'a [String],
}

pub fn write_reports(out: &Path, report: &EmReport, cfg: &EmConfig, space: &LabelSpace) -> Result<()> {
    let dir = out.join(REPORTS);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("report.json"), &report.scores)?;
    fs::write(dir.join("report.txt"), report_table(&report.scores, space))?;
    write_json(
        &dir.join("training.json"),
        &Training {
            config: cfg,
            train_losses: &report.train_losses,
            sizes: &report.sizes,
            complex_kept: &report.complex_kept,
        },
    )
}

/// Writes the checkpoint for `iteration` and refreshes the reports.
pub fn save_checkpoint(
    out: &Path,
    iteration: usize,
    params: &SegmenterParams,
    report: &EmReport,
    cfg: &EmConfig,
    space: &LabelSpace,
) -> Result<()> {
    fs::create_dir_all(out.join(CHECKPOINTS))?;
    let stem = checkpoint_stem(out, iteration);
    save_params(&stem, params)?;
    write_json(&with_suffix(&stem, ".report.json"), report)?;
    write_reports(out, report, cfg, space)
}

/// Rebuilds the run state saved next to `wst`.
pub fn load_state(wst: &Path) -> Result<EmState> {
    let params = load_params(wst)?;
    let report_path = with_suffix(&wst.with_extension(""), ".report.json");
    let report: EmReport = read_json(&report_path)?;
    if report.scores.stages.is_empty() {
        bail!("{} holds no completed stage", report_path.display());
    }
    Ok(EmState {
        params,
        completed: report.scores.stages.len() - 1,
        report,
    })
}

pub fn read_scores(out: &Path) -> Result<ScoreReport> {
    read_json(&out.join(REPORTS).join("report.json"))
}
