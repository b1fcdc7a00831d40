use std::collections::BTreeSet;

use pdvseg::phantom::{connected_components, generate_dataset, generate_phantom, PhantomConfig};
use pdvseg::volume::{load_mask, load_volume, voxel_index, Manifest};
use proptest::prelude::*;

const SHAPE: [usize; 3] = [32, 32, 24];

fn cfg(seed: u64) -> PhantomConfig {
    PhantomConfig {
        shape: SHAPE,
        seed,
        ..Default::default()
    }
}

/// Whether any voxel of `a` has a face neighbour in `b`.
fn face_adjacent(labels: &[u8], a: &[u8], b: &[u8]) -> bool {
    let [nx, ny, nz] = SHAPE;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !a.contains(&labels[voxel_index(SHAPE, x, y, z)]) {
                    continue;
                }
                let neighbours = [
                    (x + 1 < nx).then(|| (x + 1, y, z)),
                    (y + 1 < ny).then(|| (x, y + 1, z)),
                    (z + 1 < nz).then(|| (x, y, z + 1)),
                    x.checked_sub(1).map(|x| (x, y, z)),
                    y.checked_sub(1).map(|y| (x, y, z)),
                    z.checked_sub(1).map(|z| (x, y, z)),
                ];
                if neighbours.into_iter().flatten().any(|(x, y, z)| b.contains(&labels[voxel_index(SHAPE, x, y, z)])) {
                    return true;
                }
            }
        }
    }
    false
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn anatomy_holds_for_any_seed(seed in any::<u64>()) {
        let (vol, mask) = generate_phantom::<f32>(&cfg(seed)).unwrap();
        prop_assert!(vol.all_finite());
        prop_assert!(mask.same_grid(&vol));
        prop_assert!(mask.histogram().iter().all(|&c| c > 0));
        for lobe in 1..=5 {
            prop_assert_eq!(connected_components(mask.data(), SHAPE, lobe).len(), 1, "lobe {} is fragmented", lobe);
        }
        prop_assert!(!face_adjacent(mask.data(), &[1, 2, 3], &[4, 5]), "left and right lungs touch");
        prop_assert!(face_adjacent(mask.data(), &[2], &[1]) && face_adjacent(mask.data(), &[2], &[3]));
    }
}

#[test]
fn noise_has_the_requested_spread() {
    let sd = 20.0;
    let clean = generate_phantom::<f64>(&PhantomConfig { noise_sd: 0.0, ..cfg(3) }).unwrap().0;
    let noisy = generate_phantom::<f64>(&PhantomConfig { noise_sd: sd, ..cfg(3) }).unwrap().0;
    let r: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    // standard errors at n = 24576: mean 0.13, sd about 0.09
    assert!(mean.abs() < 0.6, "noise mean {mean}");
    assert!((var.sqrt() - sd).abs() < 0.5, "noise sd {}", var.sqrt());
}

#[test]
fn visible_fissure_voxels_grow_with_completeness() {
    let count = |completeness: f64| {
        let c = PhantomConfig {
            fissure_completeness: completeness,
            noise_sd: 0.0,
            pathology_blob_count: 0,
            ..cfg(11)
        };
        let (vol, mask) = generate_phantom::<f64>(&c).unwrap();
        let levels: BTreeSet<i64> = vol.data().iter().zip(mask.data()).filter(|(_, &l)| l != 0).map(|(v, _)| v.round() as i64).collect();
        let parenchyma = *levels.iter().next().unwrap();
        vol.data().iter().zip(mask.data()).filter(|(v, &l)| l != 0 && v.round() as i64 != parenchyma).count()
    };
    let counts = [0.0, 0.5, 1.0].map(count);
    assert_eq!(counts[0], 0);
    assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
}

#[test]
fn dataset_on_disk_matches_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let base = PhantomConfig {
        shape: [16, 16, 16],
        seed: 21,
        ..Default::default()
    };
    let path = generate_dataset(12, &base, dir.path()).unwrap();
    let m = Manifest::load(&path).unwrap();
    assert_eq!(m.len(), 12);
    let vendors: BTreeSet<_> = m.cases.iter().map(|c| c.metadata.vendor).collect();
    let kernels: BTreeSet<_> = m.cases.iter().map(|c| c.metadata.recon_kernel).collect();
    assert_eq!((vendors.len(), kernels.len()), (4, 3));
    for c in &m.cases {
        let mask = load_mask(&m.mask_path(c)).unwrap();
        let vol = load_volume::<f32>(&m.volume_path(c)).unwrap();
        assert!(mask.same_grid(&vol));
        assert_eq!(mask.spacing()[2], c.metadata.z_spacing);
        assert_eq!(vol.meta(), &c.metadata);
    }
    assert!(generate_dataset(0, &base, dir.path()).is_err());
}
