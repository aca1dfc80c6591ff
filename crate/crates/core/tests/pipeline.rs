use std::path::Path;

use proptest::prelude::*;

use mammo_core::image::{dicom, load_image, load_image_path, write_png, Photometric, RawImage};
use mammo_core::manifest::{dataset_summary, load_manifest};
use mammo_core::preprocess::{
    preprocess_manifest, processed_png_path, PreprocessConfig, RoiSource,
};
use mammo_core::synthetic::{generate_dataset, SyntheticSpec};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_patients: 6,
        n_cancer_patients: 3,
        size: 48,
        ..SyntheticSpec::default()
    }
}

fn small_config() -> PreprocessConfig {
    PreprocessConfig {
        target_height: 32,
        target_width: 32,
        detector_input_size: 32,
        ..PreprocessConfig::default()
    }
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generated_dataset_matches_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let generated = generate_dataset(dir.path(), &small_spec()).unwrap();
    let loaded = load_manifest(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(loaded, generated);
    assert_eq!(loaded.len(), 24);
    let summary = dataset_summary(&loaded);
    assert_eq!(summary.n_patients, 6);
    assert_eq!(summary.n_cancer_patients, 3);
    let mut dicoms = 0;
    for r in loaded.records() {
        let img = load_image(r, Some(dir.path())).unwrap();
        assert_eq!((img.height, img.width), (48, 48));
        dicoms += usize::from(r.source_path.extension().is_some_and(|e| e == "dcm"));
    }
    assert_eq!(dicoms, 6);
}

#[test]
fn generation_is_seeded() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(a.path(), &small_spec()).unwrap();
    generate_dataset(b.path(), &small_spec()).unwrap();
    assert_eq!(read_tree(a.path()), read_tree(b.path()));
}

#[test]
fn preprocessing_is_independent_of_worker_count() {
    let data = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(data.path(), &small_spec()).unwrap();
    let cfg = small_config();
    let (one, many) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s1 = preprocess_manifest(&manifest, Some(data.path()), one.path(), &cfg, None, 1).unwrap();
    let s2 = preprocess_manifest(&manifest, Some(data.path()), many.path(), &cfg, None, 3).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(read_tree(one.path()), read_tree(many.path()));
    for (r, side) in manifest.records().iter().zip(&s1) {
        assert_eq!(side.image_id, r.image_id);
        assert_eq!(side.roi.source, RoiSource::RuleBased);
        let img = load_image_path(&processed_png_path(one.path(), r)).unwrap();
        assert_eq!((img.height, img.width, img.bit_depth), (32, 32, 16));
    }
}

#[test]
fn preprocessing_orients_right_breasts_left() {
    let data = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(data.path(), &small_spec()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let sidecars = preprocess_manifest(
        &manifest,
        Some(data.path()),
        out.path(),
        &small_config(),
        None,
        1,
    )
    .unwrap();
    for (r, s) in manifest.records().iter().zip(&sidecars) {
        assert_eq!(s.flipped, r.laterality.as_str() == "R", "{}", r.image_id);
    }
}

#[test]
fn missing_image_is_reported() {
    let data = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(data.path(), &small_spec()).unwrap();
    std::fs::remove_file(data.path().join(&manifest.records()[0].source_path)).unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = preprocess_manifest(
        &manifest,
        Some(data.path()),
        out.path(),
        &small_config(),
        None,
        1,
    )
    .unwrap_err();
    assert!(
        err.to_string()
            .contains(&manifest.records()[0].source_path.display().to_string()),
        "{err}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dicom_round_trip(
        (h, w, bits, seed) in (1usize..20, 1usize..20, 8u8..=16, any::<u64>()),
        mono1 in any::<bool>(),
    ) {
        let max = (1u32 << bits) - 1;
        let pixels: Vec<u16> = (0..h * w)
            .map(|i| (mammo_core::mix_seed(seed, i as u64) % (max as u64 + 1)) as u16)
            .collect();
        let mut img = RawImage::new(h, w, pixels.clone(), bits);
        if mono1 {
            // stored inverted, tagged MONOCHROME1
            img.invert();
            prop_assert_eq!(img.photometric, Photometric::Mono1);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dcm");
        dicom::write(&path, &img).unwrap();
        let back = load_image_path(&path).unwrap();
        prop_assert_eq!((back.height, back.width, back.bit_depth), (h, w, bits));
        prop_assert_eq!(back.pixels, pixels);
    }

    #[test]
    fn png_round_trip(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let pixels: Vec<u16> = (0..h * w).map(|i| mammo_core::mix_seed(seed, i as u64) as u16).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        write_png(&path, h, w, &pixels, 16).unwrap();
        let back = load_image_path(&path).unwrap();
        prop_assert_eq!(back.pixels, pixels);
    }
}
