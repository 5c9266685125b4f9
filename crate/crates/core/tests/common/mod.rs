#![allow(dead_code)]

use fcseg::data::{
    generate_dataset, split_counts, DatasetSplit, LabelRatio, PatchDataset, PatchSource, SyntheticSceneSpec,
};
use fcseg::geometry::ResolutionSpec;
use fcseg::model::{ModelConfig, SegModel};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Under 1000 parameters in total over E, D and G.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig { base_width: 2, depth: 2, width_cap_depth: 2, norm_groups: 2, ..Default::default() }
}

pub fn random_images(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Array4<f64> {
    Array4::from_shape_fn((n, 3, size, size), |_| rng.random_range(0.0..1.0))
}

pub fn random_masks(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Array3<u8> {
    Array3::from_shape_fn((n, size, size), |_| u8::from(rng.random_bool(0.4)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Flat parameter vector in `params()` order.
pub fn flatten<T: fcseg::Scalar>(model: &SegModel<T>) -> Vec<T> {
    model.params().iter().flat_map(|(_, p)| p.iter().copied().collect::<Vec<_>>()).collect()
}

pub fn set_flat<T: fcseg::Scalar>(model: &mut SegModel<T>, index: usize, value: T) {
    let mut offset = 0;
    for (_, mut p) in model.params_mut() {
        if index < offset + p.len() {
            *p.iter_mut().nth(index - offset).unwrap() = value;
            return;
        }
        offset += p.len();
    }
    panic!("parameter index {index} out of range");
}

/// Small synthetic dataset at 32x32 with the given split sizes.
pub fn small_dataset(train: usize, val: usize, test: usize, k: u32, seed: u64) -> PatchDataset {
    let spec = SyntheticSceneSpec {
        resolution: ResolutionSpec::new(1.0).unwrap(),
        patch_size: 32,
        buildings_per_patch: (1, 3),
        side_length_range: (6.0, 10.0),
        seed,
        ..Default::default()
    };
    let split = split_counts(train, val, test, LabelRatio::new(k).unwrap(), seed).unwrap();
    generate_dataset(&spec, split).unwrap()
}

/// Wraps a source and records every mask access.
pub struct RecordingSource<'a, S> {
    pub inner: &'a S,
    pub mask_reads: std::cell::RefCell<Vec<usize>>,
}

impl<'a, S: PatchSource> RecordingSource<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self { inner, mask_reads: Default::default() }
    }
}

impl<S: PatchSource> PatchSource for RecordingSource<'_, S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn patch_size(&self) -> usize {
        self.inner.patch_size()
    }

    fn resolution(&self) -> ResolutionSpec {
        self.inner.resolution()
    }

    fn split(&self) -> &DatasetSplit {
        self.inner.split()
    }

    fn id(&self, index: usize) -> &str {
        self.inner.id(index)
    }

    fn image(&self, index: usize) -> ndarray::ArrayView3<'_, u8> {
        self.inner.image(index)
    }

    fn mask(&self, index: usize) -> fcseg::Result<ndarray::ArrayView2<'_, u8>> {
        self.mask_reads.borrow_mut().push(index);
        self.inner.mask(index)
    }
}
