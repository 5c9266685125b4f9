//! Patch datasets: synthetic footprint scenes, labeled/unlabeled/val/test
//! splits, and the on-disk directory format.

mod patch_dir;
mod split;
mod synthetic;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::geometry::ResolutionSpec;

pub use patch_dir::{load_patch_dir, read_mask_png, write_gray_png, write_patch_dir, Manifest, SplitIds};
pub use split::{split_counts, split_dataset, DatasetSplit, LabelRatio};
pub use synthetic::{generate_dataset, generate_scene, SyntheticSceneSpec};

/// One image with its building mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    /// `(3, H, W)` with values in `[0, 1]`.
    pub image: Array3<f32>,
    /// `(H, W)` with values in `{0, 1}`.
    pub mask: Array2<u8>,
    pub resolution: ResolutionSpec,
}

impl PatchPair {
    pub fn building_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&v| v == 1).count() as f64 / self.mask.len() as f64
    }

    /// 8-bit quantization used by the on-disk format.
    pub fn image_u8(&self) -> Array3<u8> {
        self.image.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
    }
}

/// Read access to a patch collection.
///
/// Training only calls [`PatchSource::mask`] for labeled indices; wrappers can
/// count calls to prove it.
pub trait PatchSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn patch_size(&self) -> usize;

    fn resolution(&self) -> ResolutionSpec;

    fn split(&self) -> &DatasetSplit;

    fn id(&self, index: usize) -> &str;

    /// `(3, H, W)` 8-bit image.
    fn image(&self, index: usize) -> ArrayView3<'_, u8>;

    /// `(H, W)` binary mask.
    fn mask(&self, index: usize) -> Result<ArrayView2<'_, u8>>;
}

/// Fully loaded dataset; read-only once built.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    ids: Vec<String>,
    images: Vec<Array3<u8>>,
    masks: Vec<Option<Array2<u8>>>,
    resolution: ResolutionSpec,
    patch_size: usize,
    split: DatasetSplit,
}

impl PatchDataset {
    pub fn new(
        ids: Vec<String>,
        images: Vec<Array3<u8>>,
        masks: Vec<Option<Array2<u8>>>,
        resolution: ResolutionSpec,
        split: DatasetSplit,
    ) -> Result<Self> {
        if ids.len() != images.len() || ids.len() != masks.len() {
            return Err(Error::LengthMismatch { expected: ids.len(), got: images.len().min(masks.len()) });
        }
        let patch_size = images.first().map(|im| im.dim().1).unwrap_or(0);
        for (i, id) in ids.iter().enumerate() {
            let (c, h, w) = images[i].dim();
            if c != 3 || h != patch_size || w != patch_size {
                return Err(Error::SizeMismatch {
                    id: id.clone(),
                    detail: format!("image is {c}x{h}x{w}, expected 3x{patch_size}x{patch_size}"),
                });
            }
            if let Some(m) = &masks[i] {
                if m.dim() != (h, w) {
                    return Err(Error::SizeMismatch { id: id.clone(), detail: format!("mask is {:?}", m.dim()) });
                }
            }
        }
        if let Some(&i) = split.all().find(|&&i| i >= ids.len()) {
            return Err(Error::InsufficientData(format!("split references index {i} beyond {} patches", ids.len())));
        }
        for &i in split.labeled.iter().chain(&split.val).chain(&split.test) {
            if masks[i].is_none() {
                return Err(Error::MissingPair(ids[i].clone()));
            }
        }
        Ok(Self { ids, images, masks, resolution, patch_size, split })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn masks(&self) -> impl Iterator<Item = ArrayView2<'_, u8>> {
        self.masks.iter().flatten().map(|m| m.view())
    }

    pub fn with_split(mut self, split: DatasetSplit) -> Result<Self> {
        let (ids, images, masks, res) = (self.ids, self.images, self.masks, self.resolution);
        self = Self::new(ids, images, masks, res, split)?;
        Ok(self)
    }
}

impl PatchSource for PatchDataset {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn resolution(&self) -> ResolutionSpec {
        self.resolution
    }

    fn split(&self) -> &DatasetSplit {
        &self.split
    }

    fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn image(&self, index: usize) -> ArrayView3<'_, u8> {
        self.images[index].view()
    }

    fn mask(&self, index: usize) -> Result<ArrayView2<'_, u8>> {
        self.masks[index].as_ref().map(|m| m.view()).ok_or_else(|| Error::MissingPair(self.ids[index].clone()))
    }
}
