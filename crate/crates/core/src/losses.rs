//! Supervised and consistency losses, their weighted sum, and the two
//! iteration schedules (consistency ramp-up and confidence-threshold anneal).
//!
//! Loss functions return the value together with the gradient with respect
//! to the differentiable argument. Consistency targets are constants: no
//! gradient is produced for them.

use ndarray::{Array, Array4, ArrayView, ArrayView3, ArrayView4, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ensure_same_shape, FeatureMap};

const PROB_CLAMP: f64 = 1e-7;
const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Final consistency weight reached by the ramp.
    pub alpha: f64,
    /// Weight of feature consistency relative to output consistency.
    pub omega_u: f64,
    pub ramp_frac: f64,
    pub eta_start: f64,
    pub eta_end: f64,
    pub anneal_frac: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.6, omega_u: 0.2, ramp_frac: 0.3, eta_start: 0.5, eta_end: 0.9, anneal_frac: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.omega_u >= 0.0
            && self.ramp_frac > 0.0
            && self.ramp_frac <= 1.0
            && self.anneal_frac > 0.0
            && self.anneal_frac <= 1.0
            && 0.0 <= self.eta_start
            && self.eta_start <= self.eta_end
            && self.eta_end <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Per-step loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_up: f64,
    pub l_uf: f64,
    pub l_cons: f64,
    pub lambda_t: f64,
    pub total: f64,
    /// Fraction of labeled pixels below the confidence threshold.
    pub masked_pixel_fraction: f64,
}

impl LossBreakdown {
    pub fn with_masked_fraction(mut self, fraction: f64) -> Self {
        self.masked_pixel_fraction = fraction;
        self
    }
}

/// Loss value with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<T, G> {
    pub value: T,
    pub grad: G,
}

/// Bootstrapped cross-entropy with the number of pixels that contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrappedCe<T> {
    pub value: T,
    /// Gradient with respect to the probability tensor.
    pub grad: Array4<T>,
    pub contributing: usize,
    pub pixels: usize,
}

/// Cross-entropy over the pixels whose ground-truth class probability is
/// strictly below `eta`, averaged over those pixels; zero when none qualify.
///
/// `probs` is `(batch, classes, height, width)`, `labels` is `(batch, height, width)`
/// holding class indices.
pub fn bootstrapped_ce<T: Scalar>(probs: ArrayView4<T>, labels: ArrayView3<u8>, eta: f64) -> Result<BootstrappedCe<T>> {
    let (n, c, h, w) = probs.dim();
    ensure_same_shape(&[n, h, w], labels.shape())?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Domain(format!("eta must lie in [0, 1], got {eta}")));
    }
    check_probabilities(probs)?;
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &v)| v as usize >= c) {
        return Err(Error::NonBinary { value, index });
    }

    let eta_t = T::lit(eta);
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let mut grad = Array4::<T>::zeros((n, c, h, w));
    let mut sum = 0.0f64;
    let mut contributing = 0usize;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let class = labels[[b, y, x]] as usize;
                let p = probs[[b, class, y, x]];
                if p < eta_t {
                    contributing += 1;
                    let pc = p.max(lo).min(hi);
                    sum -= pc.as_f64().ln();
                    if p == pc {
                        grad[[b, class, y, x]] = -pc.recip();
                    }
                }
            }
        }
    }
    if contributing == 0 {
        return Ok(BootstrappedCe { value: T::zero(), grad, contributing, pixels: n * h * w });
    }
    let k = T::from_usize(contributing).expect("count fits");
    grad.mapv_inplace(|g| g / k);
    Ok(BootstrappedCe { value: T::lit(sum / contributing as f64), grad, contributing, pixels: n * h * w })
}

fn check_probabilities<T: Scalar>(probs: ArrayView4<T>) -> Result<()> {
    if let Some((index, v)) = probs.iter().enumerate().find(|(_, v)| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::InvalidProbability { value: v.as_f64(), index });
    }
    let (n, c, h, w) = probs.dim();
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (0..c).map(|k| probs[[b, k, y, x]].as_f64()).sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidProbability { value: s, index: ((b * h) + y) * w + x });
                }
            }
        }
    }
    Ok(())
}

fn mse<T: Scalar, D: Dimension>(target: ArrayView<T, D>, pred: ArrayView<T, D>) -> Result<Scored<T, Array<T, D>>> {
    ensure_same_shape(target.shape(), pred.shape())?;
    let m = pred.len();
    if m == 0 {
        return Err(Error::InvalidShape("empty tensor".into()));
    }
    let scale = T::lit(2.0 / m as f64);
    let mut grad = Array::<T, D>::zeros(pred.raw_dim());
    let mut sum = 0.0f64;
    Zip::from(&mut grad).and(&pred).and(&target).for_each(|g, &p, &t| {
        let d = p - t;
        sum += (d * d).as_f64();
        *g = d * scale;
    });
    Ok(Scored { value: T::lit(sum / m as f64), grad })
}

/// Mean squared difference between the auxiliary prediction and the constant
/// main-decoder target. Gradient is with respect to `aux` only.
pub fn output_consistency<T: Scalar, D: Dimension>(
    main: ArrayView<T, D>,
    aux: ArrayView<T, D>,
) -> Result<Scored<T, Array<T, D>>> {
    mse(main, aux)
}

/// Sum over decoder depths of the per-depth mean squared tap difference.
/// Gradients are with respect to the auxiliary taps, one per depth.
pub fn feature_consistency<T: Scalar>(
    main_taps: &[FeatureMap<T>],
    aux_taps: &[FeatureMap<T>],
) -> Result<Scored<T, Vec<Array4<T>>>> {
    if main_taps.len() != aux_taps.len() {
        return Err(Error::LengthMismatch { expected: main_taps.len(), got: aux_taps.len() });
    }
    if main_taps.is_empty() {
        return Err(Error::EmptyInput("no decoder taps".into()));
    }
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(aux_taps.len());
    for (m, a) in main_taps.iter().zip(aux_taps) {
        let s = mse(m.values(), a.values())?;
        value += s.value;
        grads.push(s.grad);
    }
    Ok(Scored { value, grad: grads })
}

/// Consistency weight: Gaussian ramp `alpha * exp(-5 (1 - t/T)^2)` over the
/// first `ramp_frac * total_iters` iterations, then `alpha`.
pub fn lambda_schedule(t: u64, total_iters: u64, w: &LossWeights) -> f64 {
    let ramp = w.ramp_frac * total_iters.max(1) as f64;
    let t = t as f64;
    if t >= ramp {
        w.alpha
    } else {
        let phase = 1.0 - t / ramp;
        w.alpha * (-5.0 * phase * phase).exp()
    }
}

/// Confidence threshold, linear from `eta_start` to `eta_end` over the first
/// `anneal_frac * total_iters` iterations.
pub fn eta_schedule(t: u64, total_iters: u64, w: &LossWeights) -> f64 {
    let window = w.anneal_frac * total_iters.max(1) as f64;
    let t = t as f64;
    if t >= window {
        w.eta_end
    } else {
        w.eta_start + (w.eta_end - w.eta_start) * t / window
    }
}

/// `l_cons = l_up + omega_u * l_uf`, `total = l_s + lambda_t * l_cons`.
pub fn total_loss(l_s: f64, l_up: f64, l_uf: f64, lambda_t: f64, omega_u: f64) -> Result<LossBreakdown> {
    for (name, v) in [("l_s", l_s), ("l_up", l_up), ("l_uf", l_uf), ("lambda", lambda_t), ("omega_u", omega_u)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
        if v < 0.0 {
            return Err(Error::Domain(format!("{name} must be non-negative, got {v}")));
        }
    }
    let l_cons = l_up + omega_u * l_uf;
    Ok(LossBreakdown { l_s, l_up, l_uf, l_cons, lambda_t, total: l_s + lambda_t * l_cons, masked_pixel_fraction: 0.0 })
}
