use std::path::PathBuf;

use pdvseg::volume::{
    load_mask, load_volume, normalize, resample, resample_labels, save_mask, save_volume, sidecar_path, CaseEntry, LabelMask, Manifest,
    ReconKernel, ScanMetadata, Vendor, Volume,
};
use proptest::prelude::*;

const EXTENSIONS: [&str; 3] = ["nii", "nii.gz", "raw"];

fn meta(z: f64) -> ScanMetadata {
    ScanMetadata {
        z_spacing: z,
        vendor: Vendor::Siemens,
        recon_kernel: ReconKernel::Bone,
        case_id: "case_a".into(),
    }
}

/// Shapes up to 5 per axis and spacings exactly representable in f32.
fn grid() -> impl Strategy<Value = ([usize; 3], [f64; 3])> {
    (prop::array::uniform3(1usize..6), prop::array::uniform3(1u32..24)).prop_map(|(s, q)| (s, q.map(|k| k as f64 * 0.125)))
}

fn volume_case() -> impl Strategy<Value = ([usize; 3], [f64; 3], Vec<f64>)> {
    grid().prop_flat_map(|(s, sp)| (Just(s), Just(sp), prop::collection::vec(-2000.0f64..3000.0, s.iter().product::<usize>())))
}

fn mask_case() -> impl Strategy<Value = ([usize; 3], [f64; 3], Vec<u8>)> {
    grid().prop_flat_map(|(s, sp)| (Just(s), Just(sp), prop::collection::vec(0u8..6, s.iter().product::<usize>())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn volumes_round_trip_bitwise_in_every_format((shape, spacing, data) in volume_case()) {
        let dir = tempfile::tempdir().unwrap();
        let v64 = Volume::new(data.clone(), shape, spacing, meta(spacing[2])).unwrap();
        let v32 = Volume::new(data.iter().map(|&x| x as f32).collect(), shape, spacing, meta(spacing[2])).unwrap();
        for ext in EXTENSIONS {
            let p = dir.path().join(format!("v64.{ext}"));
            save_volume(&v64, &p).unwrap();
            prop_assert_eq!(&load_volume::<f64>(&p).unwrap(), &v64);
            prop_assert!(sidecar_path(&p).exists());
            let p = dir.path().join(format!("v32.{ext}"));
            save_volume(&v32, &p).unwrap();
            prop_assert_eq!(&load_volume::<f32>(&p).unwrap(), &v32);
        }
    }

    #[test]
    fn masks_round_trip_in_every_format((shape, spacing, data) in mask_case()) {
        let dir = tempfile::tempdir().unwrap();
        let m = LabelMask::new(data, shape, spacing, meta(spacing[2])).unwrap();
        for ext in EXTENSIONS {
            let p = dir.path().join(format!("m.{ext}"));
            save_mask(&m, &p).unwrap();
            prop_assert_eq!(&load_mask(&p).unwrap(), &m);
        }
    }

    #[test]
    fn normalisation_is_bounded_and_monotone((shape, spacing, data) in volume_case()) {
        let v = Volume::new(data.clone(), shape, spacing, meta(spacing[2])).unwrap();
        let n = normalize(&v, -1000.0, 400.0).unwrap();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by(|&a, &b| data[a].total_cmp(&data[b]));
        for w in order.windows(2) {
            prop_assert!(n.data()[w[0]] <= n.data()[w[1]]);
        }
        prop_assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert_eq!(n.shape(), shape);
    }

    #[test]
    fn resampling_keeps_extent_and_constants(
        (shape, spacing) in grid(),
        target in prop::array::uniform3(1usize..9),
        value in -1000.0f64..1000.0,
    ) {
        let v = Volume::filled(shape, spacing, meta(spacing[2]), value).unwrap();
        let r = resample(&v, target).unwrap();
        prop_assert_eq!(r.shape(), target);
        for a in 0..3 {
            prop_assert!((r.spacing()[a] * target[a] as f64 - spacing[a] * shape[a] as f64).abs() < 1e-9);
        }
        prop_assert!(r.data().iter().all(|x| (x - value).abs() < 1e-9));
    }

    #[test]
    fn label_upsampling_by_two_is_undone_by_downsampling((shape, spacing, data) in mask_case()) {
        let m = LabelMask::new(data, shape, spacing, meta(spacing[2])).unwrap();
        let up = resample_labels(&m, shape.map(|s| 2 * s)).unwrap();
        let down = resample_labels(&up, shape).unwrap();
        prop_assert_eq!(down.data(), m.data());
        let mut before = m.histogram();
        let after = up.histogram();
        before.iter_mut().for_each(|c| *c *= 8);
        prop_assert_eq!(before, after);
    }
}

#[test]
fn manifest_round_trips_and_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let entry = |id: &str| CaseEntry {
        case_id: id.into(),
        volume_path: PathBuf::from(format!("{id}_img.nii.gz")),
        mask_path: PathBuf::from(format!("{id}_mask.nii.gz")),
        metadata: ScanMetadata::synthetic(id, 1.25),
    };
    let m = Manifest::new(dir.path(), vec![entry("a"), entry("b")]).unwrap();
    let path = dir.path().join("manifest.json");
    m.save(&path).unwrap();
    let back = Manifest::load(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.volume_path(&back.cases[1]), dir.path().join("b_img.nii.gz"));
    assert!(Manifest::new(dir.path(), vec![entry("a"), entry("a")]).is_err());
    assert!(Manifest::load(&dir.path().join("absent.json")).is_err());
}

#[test]
fn invalid_geometry_and_extensions_are_rejected() {
    assert!(Volume::new(vec![0.0f64; 7], [2, 2, 2], [1.0; 3], meta(1.0)).is_err());
    assert!(Volume::new(vec![0.0f64; 8], [2, 2, 2], [1.0, 0.0, 1.0], meta(1.0)).is_err());
    assert!(LabelMask::new(vec![9u8; 8], [2, 2, 2], [1.0; 3], meta(1.0)).is_err());
    let v = Volume::filled([2, 2, 2], [1.0; 3], meta(1.0), 0.0f64).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(save_volume(&v, &dir.path().join("v.png")).is_err());
    assert!(load_volume::<f64>(&dir.path().join("missing.nii")).is_err());
    assert!(normalize(&v, 1.0, 1.0).is_err());
}
