mod common;

use fcseg::data::{
    generate_scene, load_patch_dir, split_counts, write_patch_dir, LabelRatio, PatchSource, SyntheticSceneSpec,
};
use fcseg::geometry::{building_length_stats, ResolutionSpec};
use fcseg::Error;

fn spec(size: usize, seed: u64) -> SyntheticSceneSpec {
    SyntheticSceneSpec { resolution: ResolutionSpec::new(1.0).unwrap(), patch_size: size, seed, ..Default::default() }
}

#[test]
fn generated_building_lengths_stay_in_range() {
    let s = spec(128, 3);
    let masks: Vec<_> = (0..500).map(|i| generate_scene(&s, i).unwrap().mask).collect();
    let stats = building_length_stats(masks.iter().map(|m| m.view()), s.resolution).unwrap();
    assert!(stats.building_count > 500);
    for v in [stats.l_min_mean, stats.l_max_mean] {
        assert!((10.0..=20.0).contains(&v), "{stats:?}");
    }
}

#[test]
fn lengths_scale_with_resolution() {
    // At 0.5 m/px the same meter range spans twice the pixels.
    let s = SyntheticSceneSpec { resolution: ResolutionSpec::new(0.5).unwrap(), ..spec(128, 4) };
    let masks: Vec<_> = (0..100).map(|i| generate_scene(&s, i).unwrap().mask).collect();
    let stats = building_length_stats(masks.iter().map(|m| m.view()), s.resolution).unwrap();
    assert!((10.0..=20.0).contains(&stats.l_min_mean) && (10.0..=20.0).contains(&stats.l_max_mean));
}

#[test]
fn building_fraction_is_background_dominated() {
    let s = spec(256, 5);
    let inside =
        (0..1000).filter(|&i| (0.0..0.5).contains(&generate_scene(&s, i).unwrap().building_fraction())).count();
    let strictly = (0..1000)
        .filter(|&i| {
            let f = generate_scene(&s, i).unwrap().building_fraction();
            f > 0.0 && f < 0.5
        })
        .count();
    assert!(inside >= 990 && strictly >= 990, "{strictly} of 1000");
}

#[test]
fn images_are_finite_and_in_unit_range() {
    let p = generate_scene(&spec(64, 6), 0).unwrap();
    assert_eq!(p.image.dim(), (3, 64, 64));
    assert!(p.image.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    assert!(p.mask.iter().all(|&v| v <= 1));
}

#[test]
fn patch_dir_round_trip() {
    let data = common::small_dataset(6, 2, 2, 2, 1);
    let dir = tempfile::tempdir().unwrap();
    write_patch_dir(dir.path(), &data).unwrap();
    let back = load_patch_dir(dir.path()).unwrap();
    assert_eq!(back.len(), 10);
    assert_eq!(back.split(), data.split());
    assert_eq!(back.patch_size(), 32);
    for i in 0..data.len() {
        assert_eq!(back.id(i), data.id(i));
        assert_eq!(back.image(i), data.image(i));
        assert_eq!(back.mask(i).unwrap(), data.mask(i).unwrap());
    }
}

#[test]
fn masks_are_binarized_at_midpoint() {
    let data = common::small_dataset(3, 1, 1, 2, 2);
    let dir = tempfile::tempdir().unwrap();
    write_patch_dir(dir.path(), &data).unwrap();
    let id = data.id(0).to_string();
    let mut raw = image::GrayImage::new(32, 32);
    raw.put_pixel(0, 0, image::Luma([255]));
    raw.put_pixel(1, 0, image::Luma([128]));
    raw.put_pixel(2, 0, image::Luma([127]));
    raw.save(dir.path().join("masks").join(format!("{id}.png"))).unwrap();
    let back = load_patch_dir(dir.path()).unwrap();
    let m = back.mask(0).unwrap();
    assert_eq!((m[[0, 0]], m[[0, 1]], m[[0, 2]], m[[1, 1]]), (1, 1, 0, 0));
}

#[test]
fn patch_dir_errors() {
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_patch_dir(empty.path()), Err(Error::MissingManifest(_))));

    let data = common::small_dataset(3, 1, 1, 2, 3);
    let dir = tempfile::tempdir().unwrap();
    write_patch_dir(dir.path(), &data).unwrap();
    let labeled_id = data.id(data.split().labeled[0]).to_string();
    std::fs::remove_file(dir.path().join("masks").join(format!("{labeled_id}.png"))).unwrap();
    assert!(matches!(load_patch_dir(dir.path()), Err(Error::MissingPair(id)) if id == labeled_id));

    let dir = tempfile::tempdir().unwrap();
    write_patch_dir(dir.path(), &data).unwrap();
    image::GrayImage::new(16, 16).save(dir.path().join("masks").join(format!("{labeled_id}.png"))).unwrap();
    assert!(matches!(load_patch_dir(dir.path()), Err(Error::SizeMismatch { .. })));
}

#[test]
fn unlabeled_patches_may_lack_masks() {
    let data = common::small_dataset(6, 1, 1, 2, 4);
    let dir = tempfile::tempdir().unwrap();
    write_patch_dir(dir.path(), &data).unwrap();
    let u = data.split().unlabeled[0];
    std::fs::remove_file(dir.path().join("masks").join(format!("{}.png", data.id(u)))).unwrap();
    let back = load_patch_dir(dir.path()).unwrap();
    assert!(back.mask(u).is_err());
}

#[test]
fn desk_split_sizes() {
    let s = split_counts(600, 100, 150, LabelRatio::new(10).unwrap(), 0).unwrap();
    assert_eq!((s.labeled.len(), s.unlabeled.len(), s.val.len(), s.test.len()), (55, 545, 100, 150));
    assert!(s.is_partition());
}
