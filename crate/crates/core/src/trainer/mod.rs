//! Joint training of `E`, `D` and `G`, evaluation and checkpoints.

mod ablate;
mod checkpoint;
mod config;
mod history;
mod optim;
mod step;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ablate::{ablate, summarize, AblationRun, AblationSummary};
pub use checkpoint::CheckpointRecord;
pub use config::{PerturbConfig, PerturbDepth, TrainConfig, TrainMode};
pub use history::{read_history, write_history, HistoryRow};
pub use optim::MomentumSgd;
pub use step::{loss_and_grads, LabeledBatch, StepResult, StepSettings};

use crate::data::PatchSource;
use crate::error::{Error, Result};
use crate::geometry::{building_length_stats, select_perturbation_depth_clamped, DepthSelection};
use crate::metrics::{confusion, report, ConfusionCounts, MetricsReport};
use crate::model::SegModel;
use crate::perturb::mix_seed;
use crate::scalar::Scalar;

const INIT_STREAM: u64 = 0;
const LABELED_STREAM: u64 = 11;
const UNLABELED_STREAM: u64 = 12;
const NOISE_STREAM: u64 = 13;
const EVAL_BATCH: usize = 8;

pub const HISTORY_FILE: &str = "loss_history.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Endless index sequence over a set, reshuffled at the start of every pass.
#[derive(Debug, Clone)]
pub struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    pub fn new(indices: &[usize], seed: u64) -> Self {
        let mut c = Self { order: indices.to_vec(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        c.order.shuffle(&mut c.rng);
        c
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Stacks images scaled to `[0, 1]` into `(N, 3, H, W)`.
pub fn image_batch<T: Scalar, S: PatchSource + ?Sized>(data: &S, indices: &[usize]) -> Array4<T> {
    let s = data.patch_size();
    let scale = T::lit(1.0 / 255.0);
    let mut out = Array4::zeros((indices.len(), 3, s, s));
    for (mut slot, &i) in out.outer_iter_mut().zip(indices) {
        slot.zip_mut_with(&data.image(i), |o, &v| *o = T::lit(v as f64) * scale);
    }
    out
}

/// Stacks masks into `(N, H, W)`.
pub fn mask_batch<S: PatchSource + ?Sized>(data: &S, indices: &[usize]) -> Result<Array3<u8>> {
    let s = data.patch_size();
    let mut out = Array3::zeros((indices.len(), s, s));
    for (mut slot, &i) in out.outer_iter_mut().zip(indices) {
        slot.assign(&data.mask(i)?);
    }
    Ok(out)
}

/// Resolves the perturbation depth; `"auto"` applies the depth rule to the
/// labeled masks at the dataset resolution.
pub fn resolve_perturb_depth<S: PatchSource + ?Sized>(config: &TrainConfig, data: &S) -> Result<DepthSelection> {
    match config.perturb.depth {
        PerturbDepth::Fixed(d) => Ok(DepthSelection { log2_arg: d as f64, unclamped: d, depth: d, clamped: false }),
        PerturbDepth::Auto => {
            let masks = data.split().labeled.iter().map(|&i| data.mask(i)).collect::<Result<Vec<_>>>()?;
            let stats = building_length_stats(masks, data.resolution())?;
            select_perturbation_depth_clamped(data.resolution(), &stats, config.model.depth)
        }
    }
}

/// Model, optimizer state and the fixed per-step settings.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: SegModel<T>,
    pub optimizer: MomentumSgd<T>,
    pub settings: StepSettings,
    noise_seed: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: &TrainConfig, perturb_depth: usize) -> Result<Self> {
        config.validate()?;
        let model = SegModel::new(config.model.clone(), mix_seed(config.seed, INIT_STREAM))?;
        Ok(Self::from_model(config, model, perturb_depth))
    }

    pub fn from_model(config: &TrainConfig, model: SegModel<T>, perturb_depth: usize) -> Self {
        let optimizer = MomentumSgd::new(&model, config.lr, config.momentum);
        let settings = StepSettings {
            mode: config.mode,
            weights: config.weights,
            total_iters: config.total_iters,
            perturb_depth,
            noise_bound: config.perturb.noise_bound,
        };
        Self { model, optimizer, settings, noise_seed: mix_seed(config.seed, NOISE_STREAM) }
    }

    /// One gradient step at iteration `t`; returns the loss terms and the
    /// confidence threshold used.
    pub fn train_step(
        &mut self,
        labeled: &LabeledBatch<T>,
        unlabeled: Option<&Array4<T>>,
        t: u64,
    ) -> Result<(crate::losses::LossBreakdown, f64)> {
        let seed = mix_seed(self.noise_seed, t);
        let r = loss_and_grads(&self.model, &self.settings, labeled, unlabeled, t, seed, true)?;
        let grads = r.grads.expect("gradients requested");
        self.optimizer.step(&mut self.model, &grads);
        Ok((r.breakdown, r.eta))
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub checkpoint: CheckpointRecord<T>,
    pub history: Vec<HistoryRow>,
    pub perturb_depth: DepthSelection,
    /// Validation metrics at each evaluation point, by completed iterations.
    pub val_metrics: Vec<(u64, MetricsReport)>,
    pub seconds: f64,
}

/// Runs `config.total_iters` steps, drawing one labeled and one unlabeled
/// batch per iteration from independently reshuffled cycles. Masks are only
/// read for labeled and validation indices.
///
/// With `out_dir`, writes the loss history, periodic checkpoints and the
/// final checkpoint there.
pub fn train<T: Scalar, S: PatchSource + ?Sized>(
    config: &TrainConfig,
    data: &S,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let start = Instant::now();
    config.validate()?;
    let split = data.split().clone();
    if split.labeled.is_empty() {
        return Err(Error::InsufficientData("labeled set is empty".into()));
    }
    if config.mode.uses_unlabeled() && split.unlabeled.is_empty() {
        return Err(Error::InsufficientData(format!("mode {} needs unlabeled patches", config.mode)));
    }
    let selection = resolve_perturb_depth(config, data)?;
    log::info!("perturbation depth {} (log2 argument {:.4})", selection.depth, selection.log2_arg);
    let mut state = TrainState::<T>::new(config, selection.depth)?;
    let history_path = out_dir.map(|d| d.join(HISTORY_FILE));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut labeled = Cycler::new(&split.labeled, mix_seed(config.seed, LABELED_STREAM));
    let mut unlabeled = Cycler::new(&split.unlabeled, mix_seed(config.seed, UNLABELED_STREAM));
    let mut history = Vec::with_capacity(config.total_iters as usize);
    let mut val_metrics = Vec::new();
    for t in 0..config.total_iters {
        let li = labeled.next_batch(config.batch_size);
        let ui = unlabeled.next_batch(config.batch_size);
        let batch = LabeledBatch { images: image_batch(data, &li), masks: mask_batch(data, &li)? };
        let x_u = config.mode.uses_unlabeled().then(|| image_batch(data, &ui));
        let (breakdown, eta) = state.train_step(&batch, x_u.as_ref(), t)?;
        history.push(HistoryRow::new(t, &breakdown, eta));

        let done = t + 1;
        if done % 100 == 0 {
            log::info!(
                "iter {done}/{} total {:.5} l_s {:.5} l_cons {:.5}",
                config.total_iters,
                breakdown.total,
                breakdown.l_s,
                breakdown.l_cons
            );
        }
        let last = done == config.total_iters;
        if !split.val.is_empty() && ((config.eval_every > 0 && done % config.eval_every == 0) || last) {
            let (_, m) = evaluate_model(&state.model, data, &split.val)?;
            log::info!("iter {done} val iou {:.4}", m.iou);
            val_metrics.push((done, m));
        }
        if let (Some(dir), true) =
            (out_dir, config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && !last)
        {
            let record = CheckpointRecord {
                params: state.model.clone(),
                iteration: done,
                config: config.clone(),
                loss_history: out_dir.map(|_| PathBuf::from(HISTORY_FILE)),
            };
            record.save(dir.join(format!("iter_{done}.ckpt")))?;
        }
    }

    let checkpoint = CheckpointRecord {
        params: state.model,
        iteration: config.total_iters,
        config: config.clone(),
        loss_history: out_dir.map(|_| PathBuf::from(HISTORY_FILE)),
    };
    if let (Some(dir), Some(hp)) = (out_dir, &history_path) {
        write_history(hp, &history)?;
        checkpoint.save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        history,
        perturb_depth: selection,
        val_metrics,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Binary prediction of the main branch: class 1 where its probability
/// exceeds class 0's.
pub fn predict_masks<T: Scalar>(model: &SegModel<T>, images: &Array4<T>) -> Result<Array3<u8>> {
    let probs = model.predict(images)?;
    let (n, _, h, w) = probs.dim();
    Ok(Array3::from_shape_fn((n, h, w), |(b, y, x)| u8::from(probs[[b, 1, y, x]] > probs[[b, 0, y, x]])))
}

/// Micro-averaged metrics of the main branch over `indices`.
pub fn evaluate_model<T: Scalar, S: PatchSource + ?Sized>(
    model: &SegModel<T>,
    data: &S,
    indices: &[usize],
) -> Result<(ConfusionCounts, MetricsReport)> {
    let mut counts = ConfusionCounts::default();
    for chunk in indices.chunks(EVAL_BATCH) {
        let pred = predict_masks(model, &image_batch(data, chunk))?;
        let gt = mask_batch(data, chunk)?;
        counts += confusion(pred.view(), gt.view())?;
    }
    Ok((counts, report(&counts)))
}

/// Evaluates a checkpoint on a named split (`labeled`, `val` or `test`).
pub fn evaluate<T: Scalar, S: PatchSource + ?Sized>(
    checkpoint: &CheckpointRecord<T>,
    data: &S,
    split: &str,
) -> Result<(ConfusionCounts, MetricsReport)> {
    let indices = data.split().by_name(split).ok_or_else(|| Error::Config(format!("unknown split {split:?}")))?;
    if split == "unlabeled" {
        return Err(Error::Config("the unlabeled split has no masks to evaluate against".into()));
    }
    let m = checkpoint.params.config.size_multiple();
    if !data.patch_size().is_multiple_of(m) || checkpoint.params.config.in_channels != 3 {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {}-channel inputs with sides divisible by {m}; data has 3-channel {}px patches",
            checkpoint.params.config.in_channels,
            data.patch_size()
        )));
    }
    evaluate_model(&checkpoint.params, data, indices)
}
