use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, PatchDataset, PatchPair};
use crate::error::{Error, Result};
use crate::geometry::ResolutionSpec;
use crate::perturb::mix_seed;

const MAX_ATTEMPTS: usize = 1000;

/// Parameters of a synthetic scene. Lengths are in meters and converted to
/// pixels through `resolution`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub resolution: ResolutionSpec,
    pub patch_size: usize,
    /// Inclusive range of buildings per patch.
    pub buildings_per_patch: (usize, usize),
    /// Inclusive range of building side lengths in meters.
    pub side_length_range: (f64, f64),
    pub building_intensity_contrast: f64,
    pub background_noise_std: f64,
    /// Inclusive range of bright road strips (not labeled as buildings).
    pub roads_per_patch: (usize, usize),
    /// Draw L-shaped footprints (union of two rectangles) for half the buildings.
    pub composite_shapes: bool,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            resolution: ResolutionSpec::new(1.0).expect("positive"),
            patch_size: 256,
            buildings_per_patch: (3, 8),
            side_length_range: (10.0, 20.0),
            building_intensity_contrast: 0.2,
            background_noise_std: 0.08,
            roads_per_patch: (0, 2),
            composite_shapes: false,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.side_length_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid side length range {:?}", self.side_length_range)));
        }
        if self.buildings_per_patch.0 > self.buildings_per_patch.1 || self.roads_per_patch.0 > self.roads_per_patch.1 {
            return Err(Error::Config("count ranges must be ordered".into()));
        }
        if self.patch_size == 0 || self.background_noise_std < 0.0 || !self.building_intensity_contrast.is_finite() {
            return Err(Error::Config(format!("invalid scene spec {self:?}")));
        }
        Ok(())
    }
}

struct Footprint {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
    /// Cut-out corner `(rows, cols)` removed from the bottom-right, for L shapes.
    notch: Option<(usize, usize)>,
}

impl Footprint {
    fn contains(&self, r: usize, c: usize) -> bool {
        let (dr, dc) = (r - self.top, c - self.left);
        match self.notch {
            Some((nr, nc)) => !(dr >= self.height - nr && dc >= self.width - nc),
            None => true,
        }
    }
}

/// Renders scene `index`; a pure function of `(spec, index)`.
pub fn generate_scene(spec: &SyntheticSceneSpec, index: u64) -> Result<PatchPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index));
    let n = spec.patch_size;
    let r = spec.resolution.meters_per_pixel();
    let noise = Normal::new(0.0f32, spec.background_noise_std as f32).map_err(|e| Error::Config(e.to_string()))?;
    let contrast = spec.building_intensity_contrast as f32;

    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25f32..0.45));
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.01f32..0.04),
                rng.random_range(-0.05f32..0.05),
                rng.random_range(-0.05f32..0.05),
                rng.random_range(0.0f32..std::f32::consts::TAU),
            )
        })
        .collect();
    let mut image = Array3::<f32>::zeros((3, n, n));
    for ((c, y, x), v) in image.indexed_iter_mut() {
        let smooth: f32 = waves.iter().map(|&(a, fy, fx, ph)| a * (fy * y as f32 + fx * x as f32 + ph).sin()).sum();
        *v = base[c] + smooth;
    }

    let roads = rng.random_range(spec.roads_per_patch.0..=spec.roads_per_patch.1);
    for _ in 0..roads {
        let width = rng.random_range(3..=6usize).min(n);
        let offset = rng.random_range(0..=n - width);
        let tone = contrast * rng.random_range(0.5f32..1.0);
        let horizontal = rng.random_bool(0.5);
        for c in 0..3 {
            let mut strip = if horizontal {
                image.slice_mut(s![c, offset..offset + width, ..])
            } else {
                image.slice_mut(s![c, .., offset..offset + width])
            };
            strip.mapv_inplace(|v| v + tone);
        }
    }

    let mut mask = Array2::<u8>::zeros((n, n));
    let mut occupied = Array2::<bool>::from_elem((n, n), false);
    let count = rng.random_range(spec.buildings_per_patch.0..=spec.buildings_per_patch.1);
    let (lo, hi) = spec.side_length_range;
    for building in 0..count {
        let fp = place(&mut rng, &occupied, n, r, lo, hi, spec.composite_shapes)
            .ok_or(Error::InfeasiblePlacement { building, attempts: MAX_ATTEMPTS })?;
        let tone = contrast * rng.random_range(0.6f32..1.4);
        let tint: [f32; 3] = std::array::from_fn(|_| 1.0 + rng.random_range(-0.3f32..0.3));
        occupied
            .slice_mut(s![
                fp.top.saturating_sub(1)..(fp.top + fp.height + 1).min(n),
                fp.left.saturating_sub(1)..(fp.left + fp.width + 1).min(n)
            ])
            .fill(true);
        for y in fp.top..fp.top + fp.height {
            for x in fp.left..fp.left + fp.width {
                if fp.contains(y, x) {
                    mask[[y, x]] = 1;
                    for c in 0..3 {
                        image[[c, y, x]] = base[c] + tone * tint[c];
                    }
                }
            }
        }
    }

    image.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    Ok(PatchPair { image, mask, resolution: spec.resolution })
}

fn place(
    rng: &mut ChaCha8Rng,
    occupied: &Array2<bool>,
    n: usize,
    r: f64,
    lo: f64,
    hi: f64,
    composite: bool,
) -> Option<Footprint> {
    for _ in 0..MAX_ATTEMPTS {
        let height = (rng.random_range(lo..=hi) / r).round() as usize;
        let width = (rng.random_range(lo..=hi) / r).round() as usize;
        let notch = (composite && rng.random_bool(0.5)).then(|| {
            (
                (height as f64 * rng.random_range(0.3..0.6)).round() as usize,
                (width as f64 * rng.random_range(0.3..0.6)).round() as usize,
            )
        });
        if height < 1 || width < 1 || height > n || width > n {
            continue;
        }
        let top = rng.random_range(0..=n - height);
        let left = rng.random_range(0..=n - width);
        let free = !occupied.slice(s![top..top + height, left..left + width]).iter().any(|&o| o);
        if free {
            let notch = notch.filter(|&(a, b)| a > 0 && b > 0 && a < height && b < width);
            return Some(Footprint { top, left, height, width, notch });
        }
    }
    None
}

/// `split.all()` patches generated in memory with ids `p00000, p00001, ...`.
pub fn generate_dataset(spec: &SyntheticSceneSpec, split: DatasetSplit) -> Result<PatchDataset> {
    let n = split.all().copied().max().map_or(0, |m| m + 1);
    let mut ids = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let pair = generate_scene(spec, i as u64)?;
        ids.push(format!("p{i:05}"));
        images.push(pair.image_u8());
        masks.push(Some(pair.mask));
    }
    PatchDataset::new(ids, images, masks, spec.resolution, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{building_length_stats, connected_components};

    #[test]
    fn no_buildings_means_empty_mask() {
        let spec = SyntheticSceneSpec {
            buildings_per_patch: (0, 0),
            roads_per_patch: (0, 0),
            patch_size: 64,
            ..Default::default()
        };
        let p = generate_scene(&spec, 3).unwrap();
        assert!(p.mask.iter().all(|&v| v == 0));
        assert!(p.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_per_index() {
        let spec = SyntheticSceneSpec { patch_size: 64, seed: 5, ..Default::default() };
        assert_eq!(generate_scene(&spec, 7).unwrap(), generate_scene(&spec, 7).unwrap());
        assert_ne!(generate_scene(&spec, 7).unwrap(), generate_scene(&spec, 8).unwrap());
    }

    #[test]
    fn buildings_are_separate_components() {
        let spec = SyntheticSceneSpec { patch_size: 128, buildings_per_patch: (6, 6), ..Default::default() };
        for i in 0..20 {
            let p = generate_scene(&spec, i).unwrap();
            assert_eq!(connected_components(p.mask.view()).len(), 6);
        }
    }

    #[test]
    fn composite_shapes_keep_stats_in_range() {
        let spec = SyntheticSceneSpec { patch_size: 128, composite_shapes: true, ..Default::default() };
        let masks: Vec<_> = (0..50).map(|i| generate_scene(&spec, i).unwrap().mask).collect();
        let stats = building_length_stats(masks.iter().map(|m| m.view()), spec.resolution).unwrap();
        assert!(stats.l_min_mean >= 10.0 && stats.l_max_mean <= 20.0);
        let filled: usize = masks.iter().map(|m| m.iter().filter(|&&v| v == 1).count()).sum();
        let boxes: usize =
            masks.iter().flat_map(|m| connected_components(m.view())).map(|c| c.height() * c.width()).sum();
        assert!(filled < boxes, "some footprints should be L-shaped");
    }

    #[test]
    fn infeasible_placement_is_reported() {
        let spec = SyntheticSceneSpec { patch_size: 16, buildings_per_patch: (20, 20), ..Default::default() };
        assert!(matches!(generate_scene(&spec, 0), Err(Error::InfeasiblePlacement { .. })));
    }

    #[test]
    fn invalid_specs() {
        let spec = SyntheticSceneSpec { side_length_range: (5.0, 2.0), ..Default::default() };
        assert!(generate_scene(&spec, 0).is_err());
    }
}
