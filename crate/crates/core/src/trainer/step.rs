use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::losses::{
    bootstrapped_ce, eta_schedule, feature_consistency, lambda_schedule, output_consistency, total_loss, LossBreakdown,
    LossWeights,
};
use crate::model::{Injection, SegModel};
use crate::scalar::Scalar;

use super::config::TrainMode;

/// Everything a single loss evaluation depends on besides parameters and data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub mode: TrainMode,
    pub weights: LossWeights,
    pub total_iters: u64,
    pub perturb_depth: usize,
    pub noise_bound: f64,
}

/// Labeled images `(N, 3, H, W)` with masks `(N, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<T> {
    pub images: Array4<T>,
    pub masks: Array3<u8>,
}

/// Loss terms and, when requested, parameter gradients in a model-shaped buffer.
#[derive(Debug, Clone)]
pub struct StepResult<T> {
    pub breakdown: LossBreakdown,
    pub eta: f64,
    pub grads: Option<SegModel<T>>,
}

/// Evaluates the global loss at iteration `t` and optionally its gradient.
///
/// The clean unlabeled pass runs without a trace, so its outputs are
/// constants; `D` only receives gradient from the supervised term except in
/// [`TrainMode::NoAuxDecoder`], where the perturbed pass goes through `D`.
pub fn loss_and_grads<T: Scalar>(
    model: &SegModel<T>,
    settings: &StepSettings,
    labeled: &LabeledBatch<T>,
    unlabeled: Option<&Array4<T>>,
    t: u64,
    noise_seed: u64,
    want_grads: bool,
) -> Result<StepResult<T>> {
    let mode = settings.mode;
    let skip = model.config.skip_connections;
    let eta = eta_schedule(t, settings.total_iters, &settings.weights);
    let lambda = if mode.uses_unlabeled() { lambda_schedule(t, settings.total_iters, &settings.weights) } else { 0.0 };
    let omega = if mode.uses_feature_consistency() { settings.weights.omega_u } else { 0.0 };
    let mut grads = want_grads.then(|| model.zeros_like());

    model.check_input(&labeled.images)?;
    let (state, enc_trace) = model.encoder.forward(&labeled.images, None, want_grads)?;
    let (out, dec_trace) = model.main.forward(&state, skip, want_grads)?;
    let ce = bootstrapped_ce(out.probs.view(), labeled.masks.view(), eta)?;
    if let (Some(g), Some(et), Some(dt)) = (grads.as_mut(), enc_trace, dec_trace) {
        let d_enc = model.main.backward(&dt, Some(&ce.grad), &[], skip, &mut g.main);
        model.encoder.backward(&et, d_enc, &mut g.encoder);
    }

    let (mut l_up, mut l_uf) = (0.0, 0.0);
    if mode.uses_unlabeled() {
        let x_u = unlabeled.ok_or_else(|| Error::InsufficientData("unlabeled batch required in this mode".into()))?;
        model.check_input(x_u)?;
        let (clean_state, _) = model.encoder.forward(x_u, None, false)?;
        let (target, _) = model.main.forward(&clean_state, skip, false)?;
        let target = target.detach();

        let track = want_grads && lambda > 0.0;
        let inj = Injection { depth: settings.perturb_depth, noise_bound: settings.noise_bound, seed: noise_seed };
        let (pert_state, pert_trace) = model.encoder.forward(x_u, Some(inj), track)?;
        let decoder = if mode == TrainMode::NoAuxDecoder { &model.main } else { &model.aux };
        let (pert, pert_dec_trace) = decoder.forward(&pert_state, skip, track)?;

        let up = output_consistency(target.probs.view(), pert.probs.view())?;
        l_up = up.value.as_f64();
        let uf = if omega > 0.0 { Some(feature_consistency(&target.taps, &pert.taps)?) } else { None };
        if let Some(uf) = &uf {
            l_uf = uf.value.as_f64();
        }

        if let (Some(g), Some(et), Some(dt)) = (grads.as_mut(), pert_trace, pert_dec_trace) {
            let d_probs = up.grad * T::lit(lambda);
            let d_taps: Vec<Option<Array4<T>>> = match uf {
                Some(uf) => uf.grad.into_iter().map(|gt| Some(gt * T::lit(lambda * omega))).collect(),
                None => Vec::new(),
            };
            let target_grad = if mode == TrainMode::NoAuxDecoder { &mut g.main } else { &mut g.aux };
            let d_enc = decoder.backward(&dt, Some(&d_probs), &d_taps, skip, target_grad);
            model.encoder.backward(&et, d_enc, &mut g.encoder);
        }
    }

    let l_s = ce.value.as_f64();
    let breakdown = match total_loss(l_s, l_up, l_uf, lambda, omega) {
        Ok(b) => b,
        Err(Error::NonFinite(msg)) => {
            return Err(Error::NonFinite(format!("iteration {t}: {msg} (l_s={l_s}, l_up={l_up}, l_uf={l_uf})")))
        }
        Err(e) => return Err(e),
    };
    let fraction = if ce.pixels == 0 { 0.0 } else { ce.contributing as f64 / ce.pixels as f64 };
    Ok(StepResult { breakdown: breakdown.with_masked_fraction(fraction), eta, grads })
}
