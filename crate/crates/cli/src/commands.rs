use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fcseg::data::{
    generate_dataset, load_patch_dir, read_mask_png, split_counts, write_gray_png, write_patch_dir, PatchSource,
    SyntheticSceneSpec,
};
use fcseg::geometry::{building_length_stats, select_perturbation_depth_clamped, BuildingLengthStats, ResolutionSpec};
use fcseg::model::SegModel;
use fcseg::probe::{band_means, local_variation_map, to_heatmap};
use fcseg::trainer::{
    ablate, evaluate, image_batch, summarize, train, CheckpointRecord, TrainConfig, TrainMode, FINAL_CHECKPOINT,
    HISTORY_FILE,
};
use ndarray::Axis;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::args::{AblateArgs, DepthArgs, EvalArgs, GenDataArgs, ProbeArgs, TrainArgs};
use crate::manifest::RunManifest;
use crate::Failure;

const DESK_PATCH_SIZE: usize = 128;
const DEFAULT_VAL_FRAC: f64 = 0.1;
const DEFAULT_TEST_FRAC: f64 = 0.15;

pub struct Globals {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Globals {
    fn out(&self, command: &str) -> Result<&Path, Failure> {
        self.out.as_deref().ok_or_else(|| Failure::Usage(format!("{command} requires --out <DIR>")))
    }
}

/// Defaults, overlaid with the config file's keys (recursively for objects).
fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>) -> Result<T, Failure> {
    let mut value = serde_json::to_value(defaults).map_err(anyhow::Error::from)?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let overlay: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        merge(&mut value, overlay);
    }
    serde_json::from_value(value).map_err(|e| Failure::Usage(format!("invalid config: {e}")))
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn train_config(g: &Globals, iters: Option<u64>, mode: Option<TrainMode>) -> Result<TrainConfig, Failure> {
    let mut cfg: TrainConfig = layered(&TrainConfig::default(), g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(n) = iters {
        cfg.total_iters = n;
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn gen_data(g: &Globals, a: &GenDataArgs) -> Result<(), Failure> {
    let out = g.out("gen-data")?;
    let defaults = SyntheticSceneSpec { patch_size: DESK_PATCH_SIZE, ..Default::default() };
    let mut spec: SyntheticSceneSpec = layered(&defaults, g.config.as_deref())?;
    if let Some(r) = a.resolution {
        spec.resolution = ResolutionSpec::new(r)?;
    }
    if let Some(s) = a.patch_size {
        spec.patch_size = s;
    }
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let val = a.val.unwrap_or((a.n as f64 * DEFAULT_VAL_FRAC).round() as usize);
    let test = a.test.unwrap_or((a.n as f64 * DEFAULT_TEST_FRAC).round() as usize);
    let train = a.n.checked_sub(val + test).filter(|&t| t > 0).ok_or_else(|| {
        Failure::Usage(format!("--n {} leaves no training patches after {val} val and {test} test", a.n))
    })?;

    let manifest = RunManifest::start(
        "gen-data",
        serde_json::json!({ "scene": spec, "n": a.n, "val": val, "test": test, "ratio": a.ratio }),
    );
    let split = split_counts(train, val, test, a.ratio, spec.seed)?;
    let data = generate_dataset(&spec, split)?;
    write_patch_dir(out, &data)?;
    let s = data.split();
    println!(
        "wrote {} patches to {} (labeled {}, unlabeled {}, val {}, test {})",
        data.len(),
        out.display(),
        s.labeled.len(),
        s.unlabeled.len(),
        s.val.len(),
        s.test.len()
    );
    manifest.finish(out)?;
    Ok(())
}

fn mask_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let dir = if dir.join("masks").is_dir() { dir.join("masks") } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn depth(g: &Globals, a: &DepthArgs) -> Result<(), Failure> {
    let r = ResolutionSpec::new(a.resolution)?;
    let stats = match (&a.lengths, &a.masks) {
        (Some(l), _) => BuildingLengthStats::from_means(l[0], l[1], 1)?,
        (None, Some(dir)) => {
            let files = mask_files(dir)?;
            if files.is_empty() {
                return Err(Failure::Runtime(anyhow::anyhow!("no mask PNGs in {}", dir.display())));
            }
            let masks = files.iter().map(read_mask_png).collect::<fcseg::Result<Vec<_>>>()?;
            building_length_stats(masks.iter().map(|m| m.view()), r)?
        }
        (None, None) => return Err(Failure::Usage("depth needs --masks or --lengths".into())),
    };
    let sel = select_perturbation_depth_clamped(r, &stats, a.max_depth)?;
    let mut record = format!(
        "d={} log2_arg={:.6} l_min_mean_m={:.4} l_max_mean_m={:.4} buildings={}",
        sel.depth, sel.log2_arg, stats.l_min_mean, stats.l_max_mean, stats.building_count
    );
    if sel.clamped {
        record += &format!(" clamped_from={}", sel.unclamped);
    }
    if sel.nearest() != sel.unclamped {
        record += &format!(" nearest={}", sel.nearest());
        log::warn!(
            "log2 argument {:.4} rounds to {} but the floor rule selects {}",
            sel.log2_arg,
            sel.nearest(),
            sel.unclamped
        );
    }
    println!("{record}");
    if let Some(out) = &g.out {
        RunManifest::start(
            "depth",
            serde_json::json!({ "resolution": a.resolution, "stats": stats, "max_depth": a.max_depth }),
        )
        .finish(out)?;
    }
    Ok(())
}

pub fn run_train(g: &Globals, a: &TrainArgs) -> Result<(), Failure> {
    let out = g.out("train")?;
    let cfg = train_config(g, a.iters, a.mode)?;
    let data = load_patch_dir(&a.data)?;
    let manifest = RunManifest::start("train", serde_json::to_value(&cfg).map_err(anyhow::Error::from)?);
    let outcome = train::<f32, _>(&cfg, &data, Some(out))?;
    #[derive(Serialize)]
    struct ValRow {
        iter: u64,
        precision: f64,
        recall: f64,
        f1: f64,
        iou: f64,
    }
    let rows = outcome.val_metrics.iter().map(|(iter, m)| ValRow {
        iter: *iter,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        iou: m.iou,
    });
    write_csv(&out.join("val_metrics.csv"), rows)?;
    println!("mode={} perturb_depth={} iters={}", cfg.mode, outcome.perturb_depth.depth, cfg.total_iters);
    if let Some((_, m)) = outcome.val_metrics.last() {
        println!("val_iou={:.4} val_f1={:.4}", m.iou, m.f1);
    }
    println!("checkpoint={}", out.join(FINAL_CHECKPOINT).display());
    println!("history={}", out.join(HISTORY_FILE).display());
    manifest.finish(out)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalRow<'a> {
    run_id: &'a str,
    split: &'a str,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    tn: u64,
    precision: f64,
    recall: f64,
    f1: f64,
    iou: f64,
}

pub fn eval(g: &Globals, a: &EvalArgs) -> Result<(), Failure> {
    let checkpoint = CheckpointRecord::<f32>::load(&a.checkpoint)?;
    let data = load_patch_dir(&a.data)?;
    if data.split().by_name(&a.split).is_none() {
        return Err(Failure::Usage(format!("unknown split {:?}; use labeled, val or test", a.split)));
    }
    let (c, m) = evaluate(&checkpoint, &data, &a.split)?;
    let run_id = a.run_id.clone().unwrap_or_else(|| {
        a.checkpoint
            .canonicalize()
            .ok()
            .and_then(|p| p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "eval".to_string())
    });
    let row = EvalRow {
        run_id: &run_id,
        split: &a.split,
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        tn: c.tn,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        iou: m.iou,
    };
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.serialize(&row).map_err(anyhow::Error::from)?;
    w.flush().map_err(anyhow::Error::from)?;
    if m.degenerate {
        log::warn!("some scores had a zero denominator and were set to 0");
    }
    if let Some(out) = &g.out {
        fs::create_dir_all(out).map_err(anyhow::Error::from)?;
        write_csv(&out.join("eval.csv"), [row])?;
        RunManifest::start(
            "eval",
            serde_json::json!({ "checkpoint": a.checkpoint, "data": a.data, "split": a.split, "run_id": run_id }),
        )
        .finish(out)?;
    }
    Ok(())
}

pub fn probe(g: &Globals, a: &ProbeArgs) -> Result<(), Failure> {
    let out = g.out("probe")?;
    let data = load_patch_dir(&a.data)?;
    let model: SegModel<f32> = match &a.checkpoint {
        Some(p) => CheckpointRecord::<f32>::load(p)?.params,
        None => {
            let cfg = train_config(g, None, None)?;
            SegModel::new(cfg.model, cfg.seed)?
        }
    };
    if a.depth > model.config.depth {
        return Err(Failure::Usage(format!("--depth {} exceeds the encoder depth {}", a.depth, model.config.depth)));
    }
    let indices =
        data.split().by_name(&a.split).ok_or_else(|| Failure::Usage(format!("unknown split {:?}", a.split)))?;
    let heat_dir = out.join("heatmaps");
    fs::create_dir_all(&heat_dir).map_err(anyhow::Error::from)?;

    #[derive(Serialize)]
    struct ProbeRow {
        id: String,
        depth: usize,
        boundary_mean: Option<f64>,
        interior_mean: Option<f64>,
        boundary_to_interior: Option<f64>,
    }
    let size = data.patch_size();
    let mut rows = Vec::new();
    for &i in indices.iter().take(a.limit) {
        let state = model.encode(&image_batch::<f32, _>(&data, &[i]))?;
        let features = state.at_depth(a.depth).expect("depth checked").values().index_axis_move(Axis(0), 0);
        let map = local_variation_map(features, (size, size), a.depth)?;
        write_gray_png(heat_dir.join(format!("{}.png", data.id(i))), to_heatmap(map.values.view()).view())?;
        let (boundary, interior) = match data.mask(i) {
            Ok(mask) => band_means(map.values.view(), mask),
            Err(_) => (None, None),
        };
        rows.push(ProbeRow {
            id: data.id(i).to_string(),
            depth: a.depth,
            boundary_mean: boundary,
            interior_mean: interior,
            boundary_to_interior: boundary.zip(interior).filter(|(_, i)| *i > 0.0).map(|(b, i)| b / i),
        });
    }
    write_csv(&out.join("probe.csv"), &rows)?;
    let ratios: Vec<f64> = rows.iter().filter_map(|r| r.boundary_to_interior).collect();
    if !ratios.is_empty() {
        println!(
            "patches={} mean_boundary_to_interior={:.4}",
            rows.len(),
            ratios.iter().sum::<f64>() / ratios.len() as f64
        );
    }
    RunManifest::start(
        "probe",
        serde_json::json!({ "data": a.data, "depth": a.depth, "checkpoint": a.checkpoint, "split": a.split, "limit": a.limit }),
    )
    .finish(out)?;
    Ok(())
}

pub fn run_ablate(g: &Globals, a: &AblateArgs) -> Result<(), Failure> {
    let out = g.out("ablate")?;
    let cfg = train_config(g, a.iters, None)?;
    if a.seeds.is_empty() {
        return Err(Failure::Usage("--seeds must list at least one seed".into()));
    }
    let modes = if a.modes.is_empty() { TrainMode::ALL.to_vec() } else { a.modes.clone() };
    let data = load_patch_dir(&a.data)?;
    let manifest = RunManifest::start("ablate", serde_json::json!({ "config": cfg, "seeds": a.seeds, "modes": modes }));
    let runs = ablate(&cfg, &data, &modes, &a.seeds, Some(out))?;
    for run in &runs {
        let Some(dir) = &run.run_dir else { continue };
        let run_cfg = TrainConfig { mode: run.mode, seed: run.seed, ..cfg.clone() };
        let mut m = RunManifest::start("train", serde_json::to_value(&run_cfg).map_err(anyhow::Error::from)?);
        m.started_unix -= run.seconds;
        m.finish(dir)?;
    }
    write_csv(&out.join("ablation_runs.csv"), &runs)?;
    let summary = summarize(&runs);
    write_csv(&out.join("ablation_summary.csv"), &summary)?;
    println!("mode,runs,median_test_iou,semi_gain");
    for s in &summary {
        println!("{},{},{:.4},{:+.4}", s.mode, s.runs, s.median_test_iou, s.semi_gain.unwrap_or(f64::NAN));
    }
    manifest.finish(out)?;
    Ok(())
}
