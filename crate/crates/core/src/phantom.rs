//! Procedural thoracic phantoms with five-lobe ground truth.
//!
//! Each lung is an ellipsoid. Lobes are carved by low-order polynomial
//! height fields: an oblique major fissure in both lungs and a near
//! horizontal minor fissure in the right lung. Intensities are a
//! parenchyma/background base, brightening along the visible part of each
//! fissure, hyperdense blobs and additive Gaussian noise.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{save_mask, save_volume, voxel_index, CaseEntry, LabelMask, Manifest, ReconKernel, ScanMetadata, Vendor, Volume};

pub const PARENCHYMA_HU: f64 = -850.0;
pub const BACKGROUND_HU: f64 = 40.0;
pub const FISSURE_OFFSET_HU: f64 = 200.0;
pub const BLOB_OFFSET_HU: f64 = 600.0;
/// Smallest share of all lung voxels any lobe may occupy.
pub const MIN_LOBE_FRACTION: f64 = 0.02;

const RUL: u8 = 1;
const RML: u8 = 2;
const RLL: u8 = 3;
const LUL: u8 = 4;
const LLL: u8 = 5;
const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub fissure_completeness: f64,
    pub noise_sd: f64,
    pub pathology_blob_count: usize,
    pub seed: u64,
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
}

fn default_spacing() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [64, 64, 32],
            fissure_completeness: 0.7,
            noise_sd: 20.0,
            pathology_blob_count: 2,
            seed: 0,
            spacing: default_spacing(),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d < 8) {
            return Err(Error::InvalidArgument(format!("phantom dimensions must be >= 8, got {:?}", self.shape)));
        }
        if !(0.0..=1.0).contains(&self.fissure_completeness) {
            return Err(Error::InvalidArgument(format!("fissure_completeness must lie in [0, 1], got {}", self.fissure_completeness)));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_sd must be non-negative, got {}", self.noise_sd)));
        }
        crate::volume::validate_spacing(self.spacing)
    }
}

/// Ellipsoid in normalised `[0, 1]^3` coordinates.
#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Local coordinates scaled so the surface is the unit sphere.
    fn local(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.centre[a]) / self.radii[a])
    }
}

/// `b = c0 + c1*a + c2*a^2 + c3*c` over lung-local coordinates, where
/// `a` runs anterior to posterior, `b` inferior to superior and `c` lateral.
#[derive(Debug, Clone, Copy)]
struct HeightField([f64; 4]);

impl HeightField {
    fn at(&self, a: f64, c: f64) -> f64 {
        let k = self.0;
        k[0] + k[1] * a + k[2] * a * a + k[3] * c
    }
}

struct Geometry {
    right: Ellipsoid,
    left: Ellipsoid,
    right_major: HeightField,
    right_minor: HeightField,
    left_major: HeightField,
}

fn jitter(rng: &mut ChaCha8Rng, base: f64, spread: f64) -> f64 {
    base + rng.random_range(-spread..=spread)
}

fn sample_geometry(rng: &mut ChaCha8Rng) -> Geometry {
    let right = Ellipsoid {
        centre: [jitter(rng, 0.28, 0.01), jitter(rng, 0.50, 0.02), jitter(rng, 0.50, 0.02)],
        radii: [jitter(rng, 0.19, 0.01), jitter(rng, 0.37, 0.02), jitter(rng, 0.42, 0.02)],
    };
    let left = Ellipsoid {
        centre: [jitter(rng, 0.72, 0.01), jitter(rng, 0.50, 0.02), jitter(rng, 0.50, 0.02)],
        radii: [jitter(rng, 0.18, 0.01), jitter(rng, 0.36, 0.02), jitter(rng, 0.41, 0.02)],
    };
    let major = |rng: &mut ChaCha8Rng| {
        HeightField([
            rng.random_range(-0.20..0.05),
            rng.random_range(0.45..0.80),
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.12..0.12),
        ])
    };
    let right_major = major(rng);
    let left_major = major(rng);
    let right_minor = HeightField([rng.random_range(0.05..0.30), rng.random_range(-0.10..0.10), 0.0, rng.random_range(-0.10..0.10)]);
    Geometry {
        right,
        left,
        right_major,
        right_minor,
        left_major,
    }
}

fn centre_coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

fn carve(shape: [usize; 3], g: &Geometry) -> Vec<u8> {
    let [nx, ny, nz] = shape;
    let mut labels = vec![0u8; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [centre_coord(x, nx), centre_coord(y, ny), centre_coord(z, nz)];
                let idx = voxel_index(shape, x, y, z);
                let r = g.right.local(p);
                if r.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    let (lat, ap, si) = (r[0], r[1], r[2]);
                    labels[idx] = if si < g.right_major.at(ap, lat) {
                        RLL
                    } else if si < g.right_minor.at(ap, lat) {
                        RML
                    } else {
                        RUL
                    };
                    continue;
                }
                let l = g.left.local(p);
                if l.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    labels[idx] = if l[2] < g.left_major.at(l[1], -l[0]) { LLL } else { LUL };
                }
            }
        }
    }
    labels
}

const NEIGHBOURS: [[isize; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// 6-connected neighbours of `idx` inside the grid.
fn neighbours(shape: [usize; 3], idx: usize) -> impl Iterator<Item = usize> {
    let [nx, ny, nz] = shape;
    let (x, y, z) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
    NEIGHBOURS.iter().filter_map(move |d| {
        let (a, b, c) = (x as isize + d[0], y as isize + d[1], z as isize + d[2]);
        (a >= 0 && b >= 0 && c >= 0 && (a as usize) < nx && (b as usize) < ny && (c as usize) < nz)
            .then(|| voxel_index(shape, a as usize, b as usize, c as usize))
    })
}

/// 6-connected components of the voxels carrying `label`.
pub fn connected_components(labels: &[u8], shape: [usize; 3], label: u8) -> Vec<Vec<usize>> {
    let mut seen = vec![false; labels.len()];
    let mut comps = Vec::new();
    for start in 0..labels.len() {
        if labels[start] != label || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut q = VecDeque::from([start]);
        while let Some(i) = q.pop_front() {
            for j in neighbours(shape, i) {
                if labels[j] == label && !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                    q.push_back(j);
                }
            }
        }
        comps.push(comp);
    }
    comps
}

fn lung_of(label: u8) -> u8 {
    if label <= RLL {
        0
    } else {
        1
    }
}

/// Keeps the largest component of each lobe and hands stray fragments to
/// an adjacent lobe of the same lung.
fn merge_fragments(labels: &mut [u8], shape: [usize; 3]) {
    const ORPHAN: u8 = 255;
    for lobe in RUL..=LLL {
        let mut comps = connected_components(labels, shape, lobe);
        comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
        for comp in comps.iter().skip(1) {
            for &i in comp {
                labels[i] = ORPHAN;
            }
        }
    }
    let mut q: VecDeque<usize> = (0..labels.len()).filter(|&i| labels[i] != 0 && labels[i] != ORPHAN).collect();
    while let Some(i) = q.pop_front() {
        let li = labels[i];
        for j in neighbours(shape, i) {
            if labels[j] == ORPHAN {
                labels[j] = li;
                q.push_back(j);
            }
        }
    }
}

fn lungs_touch(labels: &[u8], shape: [usize; 3]) -> bool {
    labels.iter().enumerate().any(|(i, &l)| l != 0 && neighbours(shape, i).any(|j| labels[j] != 0 && lung_of(labels[j]) != lung_of(l)))
}

fn lobe_fractions_ok(labels: &[u8]) -> bool {
    let mut h = [0usize; 6];
    for &l in labels {
        h[l as usize] += 1;
    }
    let lung: usize = h[1..].iter().sum();
    lung > 0 && h[1..].iter().all(|&c| c as f64 >= MIN_LOBE_FRACTION * lung as f64)
}

/// Marks the visible share of each fissure, dropping the peripheral part.
fn visible_fissures(labels: &[u8], shape: [usize; 3], g: &Geometry, completeness: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let [nx, ny, nz] = shape;
    let mut visible = vec![false; labels.len()];
    // groups: right major (touching RLL), right minor (RUL|RML), left major
    let mut groups: [Vec<(f64, usize)>; 3] = Default::default();
    let phases: [f64; 3] = [0.0; 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        for j in neighbours(shape, i) {
            let m = labels[j];
            if m == 0 || m == l || lung_of(m) != lung_of(l) {
                continue;
            }
            let group = match (l.min(m), l.max(m)) {
                (RUL, RML) => 1,
                (_, RLL) => 0,
                _ => 2,
            };
            let e = if lung_of(l) == 0 { g.right } else { g.left };
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let p = e.local([centre_coord(x, nx), centre_coord(y, ny), centre_coord(z, nz)]);
            let radius = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let wobble = 0.15 * (p[1].atan2(p[0]) + phases[group]).sin();
            groups[group].push((radius + wobble, i));
            break;
        }
    }
    for group in groups.iter_mut() {
        group.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let keep = (completeness * group.len() as f64).round() as usize;
        for &(_, i) in group.iter().take(keep) {
            visible[i] = true;
        }
    }
    visible
}

/// Builds one phantom. Identical configurations give bitwise-identical
/// output.
pub fn generate_phantom<T: Scalar>(cfg: &PhantomConfig) -> Result<(Volume<T>, LabelMask)> {
    let meta = ScanMetadata::synthetic(format!("phantom_{}", cfg.seed), cfg.spacing[2]);
    generate_phantom_with_meta(cfg, meta)
}

pub fn generate_phantom_with_meta<T: Scalar>(cfg: &PhantomConfig, meta: ScanMetadata) -> Result<(Volume<T>, LabelMask)> {
    cfg.validate()?;
    let shape = cfg.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut carved = None;
    for _ in 0..MAX_ATTEMPTS {
        let g = sample_geometry(&mut rng);
        let mut labels = carve(shape, &g);
        merge_fragments(&mut labels, shape);
        if lobe_fractions_ok(&labels) && !lungs_touch(&labels, shape) {
            carved = Some((g, labels));
            break;
        }
    }
    let (g, labels) = carved.ok_or_else(|| Error::InvalidArgument(format!("shape {shape:?} is too small to carve five lobes")))?;

    let visible = visible_fissures(&labels, shape, &g, cfg.fissure_completeness, &mut rng);
    let mut hu: Vec<f64> = labels.iter().map(|&l| if l == 0 { BACKGROUND_HU } else { PARENCHYMA_HU }).collect();
    for (v, &f) in hu.iter_mut().zip(&visible) {
        if f {
            *v += FISSURE_OFFSET_HU;
        }
    }
    let [nx, ny, nz] = shape;
    let lung_voxels: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0).collect();
    for _ in 0..cfg.pathology_blob_count {
        let c = lung_voxels[rng.random_range(0..lung_voxels.len())];
        let (cx, cy, cz) = ((c % nx) as f64, ((c / nx) % ny) as f64, (c / (nx * ny)) as f64);
        let r: f64 = rng.random_range(1.5..3.0);
        let reach = r.ceil() as isize;
        for dz in -reach..=reach {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (x, y, z) = (cx as isize + dx, cy as isize + dy, cz as isize + dz);
                    if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
                        continue;
                    }
                    if ((dx * dx + dy * dy + dz * dz) as f64) > r * r {
                        continue;
                    }
                    let i = voxel_index(shape, x as usize, y as usize, z as usize);
                    if labels[i] != 0 {
                        hu[i] = PARENCHYMA_HU + BLOB_OFFSET_HU;
                    }
                }
            }
        }
    }
    if cfg.noise_sd > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in hu.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let vol = Volume::new(hu.into_iter().map(T::lit).collect(), shape, cfg.spacing, meta.clone())?;
    let mask = LabelMask::new(labels, shape, cfg.spacing, meta)?;
    Ok((vol, mask))
}

fn case_seed(base: u64, i: usize) -> u64 {
    // splitmix64 step
    let mut z = base.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Slice spacings (mm) for the `<= 1`, `(1, 2)` and `>= 2` buckets.
const Z_SPACING_CHOICES: [&[f64]; 3] = [&[0.625, 0.8, 1.0], &[1.25, 1.5], &[2.0, 2.5]];

/// Metadata for case `i`: vendors, kernels and slice-spacing buckets are
/// assigned round-robin so every bucket is populated once `n >= 12`.
pub fn case_metadata(i: usize, seed: u64) -> ScanMetadata {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let bucket = Z_SPACING_CHOICES[(i / 3) % 3];
    ScanMetadata {
        z_spacing: bucket[rng.random_range(0..bucket.len())],
        vendor: Vendor::CLINICAL[i % 4],
        recon_kernel: ReconKernel::CLINICAL[i % 3],
        case_id: format!("phantom_{i:04}"),
    }
}

/// Writes `n` phantoms plus `manifest.json` into `out_dir`.
pub fn generate_dataset(n: usize, base: &PhantomConfig, out_dir: &Path) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one case".into()));
    }
    base.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let seed = case_seed(base.seed, i);
        let meta = case_metadata(i, seed);
        let cfg = PhantomConfig {
            seed,
            spacing: [base.spacing[0], base.spacing[1], meta.z_spacing],
            ..base.clone()
        };
        let (vol, mask) = generate_phantom_with_meta::<f32>(&cfg, meta.clone())?;
        let volume_path = PathBuf::from(format!("{}_img.nii.gz", meta.case_id));
        let mask_path = PathBuf::from(format!("{}_mask.nii.gz", meta.case_id));
        save_volume(&vol, &out_dir.join(&volume_path))?;
        save_mask(&mask, &out_dir.join(&mask_path))?;
        cases.push(CaseEntry {
            case_id: meta.case_id.clone(),
            volume_path,
            mask_path,
            metadata: meta,
        });
    }
    let manifest = Manifest::new(out_dir, cases)?;
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
