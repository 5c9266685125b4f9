//! On-disk layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/<id>.png   8-bit RGB
//! <dir>/masks/<id>.png    8-bit grayscale, {0, 255}
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, LabelRatio, PatchDataset, PatchSource};
use crate::error::{Error, Result};
use crate::geometry::ResolutionSpec;

/// Mask pixels at or above this value are buildings.
const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub resolution_m_per_px: f64,
    pub patch_size: usize,
    pub ids: Vec<String>,
    pub split: SplitIds,
    /// Labeled-to-unlabeled ratio; inferred from the split sizes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<LabelRatio>,
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_path_buf(), source }
}

/// Reads an 8-bit grayscale PNG as a `(H, W)` binary mask (1 where the value
/// is at least 128).
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Array2<u8>> {
    let path = path.as_ref();
    let gray = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| u8::from(gray.get_pixel(x as u32, y as u32)[0] >= MASK_THRESHOLD)))
}

/// Writes a `(H, W)` array as an 8-bit grayscale PNG.
pub fn write_gray_png(path: impl AsRef<Path>, values: ArrayView2<u8>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = values.dim();
    let gray = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([values[[y as usize, x as usize]]]));
    gray.save(path).map_err(image_err(path))
}

/// Loads every listed patch. Masks are binarized at 128. Labeled, val and test
/// ids must have a mask; unlabeled ids may lack one.
pub fn load_patch_dir(dir: impl AsRef<Path>) -> Result<PatchDataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let resolution = ResolutionSpec::new(manifest.resolution_m_per_px)?;
    let size = manifest.patch_size;

    let mut images = Vec::with_capacity(manifest.ids.len());
    let mut masks = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        let path = dir.join("images").join(format!("{id}.png"));
        let rgb = image::open(&path).map_err(image_err(&path))?.to_rgb8();
        if rgb.width() as usize != size || rgb.height() as usize != size {
            return Err(Error::SizeMismatch {
                id: id.clone(),
                detail: format!("image is {}x{}, manifest says {size}", rgb.width(), rgb.height()),
            });
        }
        images.push(Array3::from_shape_fn((3, size, size), |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c]));

        let path = dir.join("masks").join(format!("{id}.png"));
        let mask = if path.is_file() {
            let mask = read_mask_png(&path)?;
            if mask.dim() != (size, size) {
                return Err(Error::SizeMismatch {
                    id: id.clone(),
                    detail: format!("mask is {}x{}, image is {size}x{size}", mask.ncols(), mask.nrows()),
                });
            }
            Some(mask)
        } else {
            None
        };
        masks.push(mask);
    }

    let index: HashMap<&str, usize> = manifest.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let lookup = |ids: &[String]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                index.get(id.as_str()).copied().ok_or_else(|| Error::Config(format!("split id {id:?} not in ids")))
            })
            .collect()
    };
    let labeled = lookup(&manifest.split.labeled)?;
    let unlabeled = lookup(&manifest.split.unlabeled)?;
    let ratio = match manifest.ratio {
        Some(r) => r,
        None => LabelRatio::new(((unlabeled.len() as f64 / labeled.len().max(1) as f64).round() as u32).max(1))?,
    };
    let split = DatasetSplit {
        labeled,
        unlabeled,
        val: lookup(&manifest.split.val)?,
        test: lookup(&manifest.split.test)?,
        ratio,
    };
    if !split.is_partition() {
        return Err(Error::Config("split sets overlap".into()));
    }
    PatchDataset::new(manifest.ids, images, masks, resolution, split)
}

/// Writes a dataset in the directory layout read by [`load_patch_dir`].
pub fn write_patch_dir(dir: impl AsRef<Path>, data: &PatchDataset) -> Result<Manifest> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let size = data.patch_size() as u32;
    for i in 0..data.len() {
        let id = data.id(i);
        let im = data.image(i);
        let rgb = image::RgbImage::from_fn(size, size, |x, y| {
            image::Rgb(std::array::from_fn(|c| im[[c, y as usize, x as usize]]))
        });
        let path = dir.join("images").join(format!("{id}.png"));
        rgb.save(&path).map_err(image_err(&path))?;
        if let Ok(mask) = data.mask(i) {
            write_gray_png(dir.join("masks").join(format!("{id}.png")), mask.mapv(|v| v * 255).view())?;
        }
    }
    let split = data.split();
    let names = |idx: &[usize]| idx.iter().map(|&i| data.id(i).to_string()).collect::<Vec<_>>();
    let manifest = Manifest {
        resolution_m_per_px: data.resolution().meters_per_pixel(),
        patch_size: data.patch_size(),
        ids: data.ids().to_vec(),
        split: SplitIds {
            labeled: names(&split.labeled),
            unlabeled: names(&split.unlabeled),
            val: names(&split.val),
            test: names(&split.test),
        },
        ratio: Some(split.ratio),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
