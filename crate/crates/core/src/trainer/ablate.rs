use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PatchSource;
use crate::error::Result;
use crate::metrics::MetricsReport;

use super::config::{TrainConfig, TrainMode};
use super::{evaluate_model, train};

/// One (mode, seed) training run with its test metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: TrainMode,
    pub seed: u64,
    pub perturb_depth: usize,
    pub test_iou: f64,
    pub test_f1: f64,
    pub test_precision: f64,
    pub test_recall: f64,
    pub val_iou: Option<f64>,
    pub seconds: f64,
    pub run_dir: Option<PathBuf>,
}

/// Per-mode medians over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub mode: TrainMode,
    pub runs: usize,
    pub median_test_iou: f64,
    pub median_test_f1: f64,
    pub median_val_iou: Option<f64>,
    /// Median test IoU of `semi` minus this mode's.
    pub semi_gain: Option<f64>,
    pub total_seconds: f64,
}

/// Trains every mode in `modes` once per seed with otherwise identical
/// settings and scores the final main branch on the test split.
pub fn ablate<S: PatchSource + ?Sized>(
    base: &TrainConfig,
    data: &S,
    modes: &[TrainMode],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::with_capacity(modes.len() * seeds.len());
    for &seed in seeds {
        for &mode in modes {
            let config = TrainConfig { mode, seed, ..base.clone() };
            let run_dir = out_dir.map(|d| d.join(format!("{mode}_seed{seed}")));
            log::info!("ablation run mode={mode} seed={seed}");
            let outcome = train::<f32, S>(&config, data, run_dir.as_deref())?;
            let (_, test) = evaluate_model(&outcome.checkpoint.params, data, &data.split().test)?;
            runs.push(run_record(mode, seed, &outcome, &test, run_dir));
        }
    }
    Ok(runs)
}

fn run_record(
    mode: TrainMode,
    seed: u64,
    outcome: &super::TrainOutcome<f32>,
    test: &MetricsReport,
    run_dir: Option<PathBuf>,
) -> AblationRun {
    AblationRun {
        mode,
        seed,
        perturb_depth: outcome.perturb_depth.depth,
        test_iou: test.iou,
        test_f1: test.f1,
        test_precision: test.precision,
        test_recall: test.recall,
        val_iou: outcome.val_metrics.last().map(|(_, m)| m.iou),
        seconds: outcome.seconds,
        run_dir,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One summary row per mode present in `runs`, in first-seen order.
pub fn summarize(runs: &[AblationRun]) -> Vec<AblationSummary> {
    let mut modes: Vec<TrainMode> = Vec::new();
    for r in runs {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    let mut rows: Vec<AblationSummary> = modes
        .into_iter()
        .map(|mode| {
            let of: Vec<&AblationRun> = runs.iter().filter(|r| r.mode == mode).collect();
            let vals: Vec<f64> = of.iter().filter_map(|r| r.val_iou).collect();
            AblationSummary {
                mode,
                runs: of.len(),
                median_test_iou: median(of.iter().map(|r| r.test_iou).collect()),
                median_test_f1: median(of.iter().map(|r| r.test_f1).collect()),
                median_val_iou: (!vals.is_empty()).then(|| median(vals)),
                semi_gain: None,
                total_seconds: of.iter().map(|r| r.seconds).sum(),
            }
        })
        .collect();
    if let Some(semi) = rows.iter().find(|r| r.mode == TrainMode::Semi).map(|r| r.median_test_iou) {
        for r in &mut rows {
            r.semi_gain = Some(semi - r.median_test_iou);
        }
    }
    rows
}
