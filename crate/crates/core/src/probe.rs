//! Local-variation maps: after bilinear resampling to image size, each pixel
//! holds the mean Euclidean distance between its channel vector and those of
//! its (up to 8) neighbors. High values mark low-density regions of the
//! feature distribution.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct VariationMap<T> {
    /// `(H, W)`, non-negative.
    pub values: Array2<T>,
    pub source_depth: usize,
}

pub const NEIGHBOR_OFFSETS: [(isize, isize); 8] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Bilinear resampling of `(C, h, w)` features to `(C, H, W)` using
/// half-pixel centers with edge clamping; the identity when sizes match.
pub fn resample_bilinear<T: Scalar>(features: ArrayView3<T>, (th, tw): (usize, usize)) -> Array3<T> {
    let (c, h, w) = features.dim();
    if (h, w) == (th, tw) {
        return features.to_owned();
    }
    let coords = |t: usize, src: usize, dst: usize| {
        let pos = ((t as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, T::lit(pos - i0 as f64))
    };
    let ys: Vec<_> = (0..th).map(|y| coords(y, h, th)).collect();
    let xs: Vec<_> = (0..tw).map(|x| coords(x, w, tw)).collect();
    Array3::from_shape_fn((c, th, tw), |(ch, y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let f = |yy, xx| features[[ch, yy, xx]];
        let top = f(y0, x0) + (f(y0, x1) - f(y0, x0)) * fx;
        let bot = f(y1, x0) + (f(y1, x1) - f(y1, x0)) * fx;
        top + (bot - top) * fy
    })
}

/// Mean neighbor distance over already resampled features `(C, H, W)`.
pub fn neighbor_variation<T: Scalar>(features: ArrayView3<T>) -> Result<Array2<T>> {
    let (_, h, w) = features.dim();
    if h * w < 2 {
        return Err(Error::InvalidShape(format!("{h}x{w} map has no neighbors")));
    }
    let mut sum = Array2::<T>::zeros((h, w));
    let mut count = Array2::<T>::zeros((h, w));
    for &(dy, dx) in &NEIGHBOR_OFFSETS {
        // Pixels p whose neighbor p + (dy, dx) exists.
        let (ys, yn) = shifted_ranges(h, dy);
        let (xs, xn) = shifted_ranges(w, dx);
        if ys.is_empty() || xs.is_empty() {
            continue;
        }
        let here = features.slice(s![.., ys.clone(), xs.clone()]);
        let there = features.slice(s![.., yn, xn]);
        let mut sq = Array2::<T>::zeros((ys.len(), xs.len()));
        for (a, b) in here.axis_iter(Axis(0)).zip(there.axis_iter(Axis(0))) {
            Zip::from(&mut sq).and(&a).and(&b).for_each(|s, &p, &q| *s += (p - q) * (p - q));
        }
        Zip::from(sum.slice_mut(s![ys.clone(), xs.clone()])).and(&sq).for_each(|acc, &v| *acc += v.sqrt());
        count.slice_mut(s![ys, xs]).mapv_inplace(|c| c + T::one());
    }
    Zip::from(&mut sum).and(&count).for_each(|s, &c| *s /= c);
    Ok(sum)
}

fn shifted_ranges(n: usize, d: isize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    if d < 0 {
        let k = d.unsigned_abs().min(n);
        (k..n, 0..n - k)
    } else {
        let k = (d as usize).min(n);
        (0..n - k, k..n)
    }
}

/// Resamples `(C, h, w)` features to `target` and computes the variation map.
pub fn local_variation_map<T: Scalar>(
    features: ArrayView3<T>,
    target: (usize, usize),
    source_depth: usize,
) -> Result<VariationMap<T>> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features".into()));
    }
    let (_, h, w) = features.dim();
    if h == 0 || w == 0 || target.0 * target.1 < 2 {
        return Err(Error::InvalidShape(format!("{h}x{w} features to {target:?}")));
    }
    let resampled = resample_bilinear(features, target);
    Ok(VariationMap { values: neighbor_variation(resampled.view())?, source_depth })
}

/// Pixels whose 8-neighborhood contains the other class.
pub fn boundary_band(mask: ArrayView2<u8>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        NEIGHBOR_OFFSETS.iter().any(|&(dy, dx)| {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            ny >= 0
                && nx >= 0
                && (ny as usize) < h
                && (nx as usize) < w
                && mask[[ny as usize, nx as usize]] != mask[[y, x]]
        })
    })
}

/// Mean variation on the class-boundary band and off it; `None` for an empty set.
pub fn band_means<T: Scalar>(map: ArrayView2<T>, mask: ArrayView2<u8>) -> (Option<f64>, Option<f64>) {
    let band = boundary_band(mask);
    let (mut sb, mut nb, mut si, mut ni) = (0.0, 0usize, 0.0, 0usize);
    Zip::from(&map).and(&band).for_each(|&v, &b| {
        if b {
            sb += v.as_f64();
            nb += 1;
        } else {
            si += v.as_f64();
            ni += 1;
        }
    });
    ((nb > 0).then(|| sb / nb as f64), (ni > 0).then(|| si / ni as f64))
}

/// Min-max normalization to 8-bit gray; a constant map becomes all zeros.
pub fn to_heatmap<T: Scalar>(map: ArrayView2<T>) -> Array2<u8> {
    let lo = map.iter().fold(f64::INFINITY, |a, &v| a.min(v.as_f64()));
    let hi = map.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.as_f64()));
    let span = hi - lo;
    map.mapv(|v| if span > 0.0 { ((v.as_f64() - lo) / span * 255.0).round() as u8 } else { 0 })
}
