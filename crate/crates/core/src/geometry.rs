//! Building-size statistics from ground-truth masks and the choice of
//! encoder depth at which unlabeled features are perturbed.
//!
//! The depth rule is `d = floor(log2((l_min + l_max) / (2 r)))`: the stage
//! whose receptive field in meters first matches the mean building size.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values of `log2(..)` closer than this to an integer snap to it before flooring.
const INTEGER_SNAP: f64 = 1e-9;

/// Ground sampling distance in meters per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ResolutionSpec(f64);

impl ResolutionSpec {
    pub fn new(meters_per_pixel: f64) -> Result<Self> {
        if meters_per_pixel.is_finite() && meters_per_pixel > 0.0 {
            Ok(Self(meters_per_pixel))
        } else {
            Err(Error::Domain(format!("resolution must be positive and finite, got {meters_per_pixel}")))
        }
    }

    pub fn meters_per_pixel(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ResolutionSpec {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ResolutionSpec> for f64 {
    fn from(r: ResolutionSpec) -> f64 {
        r.0
    }
}

/// Mean shorter and longer bounding-box side of individual buildings, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildingLengthStats {
    pub l_min_mean: f64,
    pub l_max_mean: f64,
    pub building_count: usize,
}

impl BuildingLengthStats {
    /// Stats from already known mean lengths (e.g. published survey values).
    pub fn from_means(l_min_mean: f64, l_max_mean: f64, building_count: usize) -> Result<Self> {
        if building_count == 0 {
            return Err(Error::EmptyInput("building count is zero".into()));
        }
        if !(l_min_mean > 0.0 && l_min_mean <= l_max_mean && l_max_mean.is_finite()) {
            return Err(Error::Domain(format!(
                "expected 0 < l_min_mean <= l_max_mean, got {l_min_mean}, {l_max_mean}"
            )));
        }
        Ok(Self { l_min_mean, l_max_mean, building_count })
    }
}

/// Outcome of the depth rule, including what was needed to get there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthSelection {
    /// `log2((l_min + l_max) / (2 r))`.
    pub log2_arg: f64,
    /// Floor of `log2_arg` before clamping.
    pub unclamped: usize,
    /// Depth actually used.
    pub depth: usize,
    pub clamped: bool,
}

impl DepthSelection {
    /// Nearest integer to `log2_arg`; differs from `unclamped` when the
    /// mean building size sits in the upper half of a depth's octave.
    pub fn nearest(&self) -> usize {
        self.log2_arg.round() as usize
    }
}

fn log2_arg(r: ResolutionSpec, stats: &BuildingLengthStats) -> Result<f64> {
    if stats.building_count == 0 {
        return Err(Error::EmptyInput("no buildings in statistics".into()));
    }
    let ratio = (stats.l_min_mean + stats.l_max_mean) / (2.0 * r.meters_per_pixel());
    if !ratio.is_finite() || ratio < 1.0 {
        return Err(Error::Domain(format!(
            "mean building size is {ratio:.4} px (< 1 px); perturbation depth would be negative"
        )));
    }
    Ok(ratio.log2())
}

fn snapped_floor(x: f64) -> usize {
    let nearest = x.round();
    let x = if (x - nearest).abs() < INTEGER_SNAP { nearest } else { x };
    x.floor() as usize
}

/// Encoder depth for the perturbation, unclamped.
pub fn select_perturbation_depth(r: ResolutionSpec, stats: &BuildingLengthStats) -> Result<usize> {
    Ok(snapped_floor(log2_arg(r, stats)?))
}

/// Depth rule clamped to the depths `1..=max_depth` an encoder actually has.
pub fn select_perturbation_depth_clamped(
    r: ResolutionSpec,
    stats: &BuildingLengthStats,
    max_depth: usize,
) -> Result<DepthSelection> {
    if max_depth == 0 {
        return Err(Error::Domain("encoder has no downsampling stages".into()));
    }
    let log2_arg = log2_arg(r, stats)?;
    let unclamped = snapped_floor(log2_arg);
    let depth = unclamped.clamp(1, max_depth);
    let clamped = depth != unclamped;
    if clamped {
        log::warn!("perturbation depth {unclamped} clamped to {depth} (encoder depths 1..={max_depth})");
    }
    Ok(DepthSelection { log2_arg, unclamped, depth, clamped })
}

/// Axis-aligned bounding box of one 8-connected foreground component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    pub min_row: usize,
    pub max_row: usize,
    pub min_col: usize,
    pub max_col: usize,
    pub pixels: usize,
}

impl Component {
    pub fn height(&self) -> usize {
        self.max_row - self.min_row + 1
    }

    pub fn width(&self) -> usize {
        self.max_col - self.min_col + 1
    }
}

/// Labels 8-connected foreground components (any nonzero value is foreground).
pub fn connected_components(mask: ArrayView2<u8>) -> Vec<Component> {
    let (h, w) = mask.dim();
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if mask[[r0, c0]] == 0 || seen[r0 * w + c0] {
                continue;
            }
            let mut comp = Component { min_row: r0, max_row: r0, min_col: c0, max_col: c0, pixels: 0 };
            seen[r0 * w + c0] = true;
            stack.push((r0, c0));
            while let Some((r, c)) = stack.pop() {
                comp.pixels += 1;
                comp.min_row = comp.min_row.min(r);
                comp.max_row = comp.max_row.max(r);
                comp.min_col = comp.min_col.min(c);
                comp.max_col = comp.max_col.max(c);
                for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                    for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                        let k = nr * w + nc;
                        if mask[[nr, nc]] != 0 && !seen[k] {
                            seen[k] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Mean bounding-box side lengths in meters over every building in `masks`.
pub fn building_length_stats<'a, I>(masks: I, r: ResolutionSpec) -> Result<BuildingLengthStats>
where
    I: IntoIterator<Item = ArrayView2<'a, u8>>,
{
    let mut count = 0usize;
    let mut sum_min = 0.0;
    let mut sum_max = 0.0;
    for mask in masks {
        if let Some((index, &value)) = mask.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NonBinary { value, index });
        }
        for comp in connected_components(mask) {
            let (a, b) = (comp.height(), comp.width());
            sum_min += a.min(b) as f64;
            sum_max += a.max(b) as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no foreground pixels in any mask".into()));
    }
    let scale = r.meters_per_pixel() / count as f64;
    Ok(BuildingLengthStats { l_min_mean: sum_min * scale, l_max_mean: sum_max * scale, building_count: count })
}
