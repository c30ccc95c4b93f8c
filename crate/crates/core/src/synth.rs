//! Synthetic paired data: star-shaped surfaces, their voxelized volumes and
//! label grids, and the `DSET-1` dataset manifest.
//!
//! A shape has radius `r(u) = r0 · (1 + Σ a_k P_{l_k}(u · d_k))` along unit
//! direction `u`, where `P_l` are Legendre polynomials about random axes
//! `d_k`. Since `|P_l| ≤ 1` and `Σ |a_k| ≤ bumpiness`, the radius stays in
//! `r0 · [1 − bumpiness, 1 + bumpiness]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::{add, dot, icosphere, norm, read_obj, scale, sub, write_obj, TriMesh, Vec3};
use crate::volume::{load_labels, load_volume, save_labels, save_volume, Affine, LabelGrid, Volume};

pub const DATASET_VERSION: &str = "DSET-1";
pub const MAX_BUMPINESS: f64 = 0.3;
pub const MAX_MODES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub axis: Vec3,
    pub degree: u32,
    pub amplitude: f64,
}

/// Analytic star-shaped surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub seed: u64,
    pub center: Vec3,
    pub r0: f64,
    pub bumps: Vec<Bump>,
}

fn legendre(l: u32, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if l == 0 {
        return p0;
    }
    for k in 1..l {
        let k = k as f64;
        let p2 = ((2.0 * k + 1.0) * x * p1 - k * p0) / (k + 1.0);
        p0 = p1;
        p1 = p2;
    }
    p1
}

impl ShapeParams {
    /// Radius along the unit direction `u`.
    pub fn radius(&self, u: Vec3) -> f64 {
        let s: f64 = self.bumps.iter().map(|b| b.amplitude * legendre(b.degree, dot(u, b.axis))).sum();
        self.r0 * (1.0 + s)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let d = sub(p, self.center);
        let r = norm(d);
        if r == 0.0 {
            return true;
        }
        r <= self.radius(scale(d, 1.0 / r))
    }

    /// Icosphere with `10·4^subdivisions + 2` vertices displaced onto the surface.
    pub fn mesh(&self, subdivisions: u32) -> TriMesh {
        let mut m = icosphere(subdivisions);
        for v in &mut m.vertices {
            *v = add(self.center, scale(*v, self.radius(*v)));
        }
        m
    }
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = norm(v);
        if n > 1e-3 && n <= 1.0 {
            return scale(v, 1.0 / n);
        }
    }
}

/// Random shape of base radius `r0` centred at `center`.
pub fn random_shape(seed: u64, bumpiness: f64, mode_count: usize, r0: f64, center: Vec3) -> Result<ShapeParams> {
    if !(0.0..=MAX_BUMPINESS).contains(&bumpiness) {
        return Err(Error::invalid(
            "generate_shape",
            format!("bumpiness {bumpiness} outside [0, {MAX_BUMPINESS}]"),
        ));
    }
    if mode_count > MAX_MODES {
        return Err(Error::invalid("generate_shape", format!("mode_count {mode_count} exceeds {MAX_MODES}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bumps = Vec::with_capacity(mode_count);
    let raw: Vec<f64> = (0..mode_count).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let total: f64 = raw.iter().map(|a: &f64| a.abs()).sum();
    for &a in &raw {
        bumps.push(Bump {
            axis: random_unit(&mut rng),
            degree: rng.gen_range(2..=4),
            amplitude: if total > 0.0 { bumpiness * a / total } else { 0.0 },
        });
    }
    if bumpiness == 0.0 {
        bumps.clear();
    }
    Ok(ShapeParams {
        seed,
        center,
        r0,
        bumps,
    })
}

pub const DEFAULT_R0: f64 = 0.55;

/// Centred shape with the default base radius, and its surface at 2562 vertices.
pub fn generate_shape(seed: u64, bumpiness: f64, mode_count: usize) -> Result<(ShapeParams, TriMesh)> {
    let s = random_shape(seed, bumpiness, mode_count, DEFAULT_R0, [0.0; 3])?;
    let m = s.mesh(4);
    Ok((s, m))
}

fn gaussian_blur(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let src = data.to_vec();
        for (i, out) in data.iter_mut().enumerate() {
            let pos = (i / strides[axis] % dims[axis]) as isize;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                // Replicate the border voxel outside the volume.
                let q = (pos + k as isize - radius).clamp(0, n - 1);
                acc += w * src[(i as isize + (q - pos) * strides[axis] as isize) as usize];
            }
            *out = acc / ksum;
        }
    }
}

/// Occupancy of `shapes` at voxel centres; label `k + 1` marks shape `k`.
/// A positive `blur` (Gaussian sigma in voxels) softens the intensities
/// while the labels stay binary.
pub fn voxelize(shapes: &[ShapeParams], dims: [usize; 3], blur: f64) -> Result<(Volume, LabelGrid)> {
    if dims.iter().any(|&d| d < 16 || d % 16 != 0) {
        return Err(Error::invalid("voxelize", format!("dims {dims:?} must be multiples of 16 and at least 16")));
    }
    let transform = Affine::voxel_centered(dims);
    let n: usize = dims.iter().product();
    let mut labels = vec![0u8; n];
    let mut occ = vec![0.0f64; n];
    let mut i = 0;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let p = transform.apply([d as f64, h as f64, w as f64]);
                if let Some(k) = shapes.iter().position(|s| s.contains(p)) {
                    labels[i] = k as u8 + 1;
                    occ[i] = 1.0;
                }
                i += 1;
            }
        }
    }
    if blur > 0.0 {
        gaussian_blur(&mut occ, dims, blur);
    }
    let vol = Volume::new(dims, occ.into_iter().map(|v| v as f32).collect(), transform)?;
    Ok((vol, LabelGrid::new(dims, labels)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}; expected train, val or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub seed: u64,
    pub fractions: [f64; 3],
    pub dims: [usize; 3],
    pub blur: f64,
    pub bumpiness: f64,
    pub modes: usize,
    /// 1 for a single centred shape, 4 for four disjoint blobs.
    pub structures: usize,
    /// Icosphere level of the dense ground-truth meshes.
    pub gt_subdivisions: u32,
    /// Icosphere level of the shared-topology meshes used for templates.
    pub template_subdivisions: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 50,
            seed: 0,
            fractions: [0.8, 0.1, 0.1],
            dims: [32, 32, 32],
            blur: 0.5,
            bumpiness: 0.15,
            modes: 4,
            structures: 1,
            gt_subdivisions: 5,
            template_subdivisions: 4,
        }
    }
}

const BLOB_CENTERS: [Vec3; 4] = [
    [-0.45, -0.45, 0.0],
    [0.45, -0.45, 0.0],
    [-0.45, 0.45, 0.0],
    [0.45, 0.45, 0.0],
];

impl DatasetConfig {
    pub fn split_counts(&self) -> Result<[usize; 3]> {
        let f = self.fractions;
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {f:?} must be in [0, 1] and sum to 1")));
        }
        let train = (self.n as f64 * f[0]).round() as usize;
        let val = ((self.n as f64 * f[1]).round() as usize).min(self.n - train.min(self.n));
        Ok([train, val, self.n - train - val])
    }

    /// Shapes of sample `index`, one per structure.
    pub fn shapes(&self, index: usize) -> Result<Vec<ShapeParams>> {
        let seed = sample_seed(self.seed, index);
        match self.structures {
            1 => Ok(vec![random_shape(seed, self.bumpiness, self.modes, DEFAULT_R0, [0.0; 3])?]),
            4 => BLOB_CENTERS
                .iter()
                .enumerate()
                .map(|(k, &c)| random_shape(seed.wrapping_mul(4).wrapping_add(k as u64), self.bumpiness, self.modes, 0.3, c))
                .collect(),
            s => Err(Error::Config(format!("structures must be 1 or 4, got {s}"))),
        }
    }
}

/// Per-sample seed; distinct for distinct indices.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    /// Paths relative to the dataset directory (stems for volume pairs).
    pub volume: String,
    pub labels: String,
    pub gt_mesh: String,
    pub template_mesh: String,
    pub shapes: Vec<ShapeParams>,
    /// SHA-256 over the sample's files in the order above.
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub config: DatasetConfig,
    pub samples: Vec<SampleEntry>,
    pub hash: String,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    fn compute_hash(&self) -> String {
        let mut copy = self.clone();
        copy.hash.clear();
        hex::encode(Sha256::digest(serde_json::to_vec(&copy).expect("manifest serializes")))
    }
}

/// A loaded sample. Meshes hold one component per structure.
#[derive(Clone, Debug)]
pub struct Sample {
    pub entry: SampleEntry,
    pub volume: Volume,
    pub labels: LabelGrid,
    pub gt_mesh: TriMesh,
    pub template_mesh: TriMesh,
}

fn hash_files(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(fs::read(p).map_err(|e| Error::io(p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Generate `cfg.n` samples under `dir` and write `manifest.json`.
pub fn build_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    let counts = cfg.split_counts()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(cfg.n);
    for index in 0..cfg.n {
        let split = if index < counts[0] {
            Split::Train
        } else if index < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        let id = format!("s{index:04}");
        let shapes = cfg.shapes(index)?;
        let (vol, labels) = voxelize(&shapes, cfg.dims, cfg.blur)?;
        let gt = TriMesh::union(&shapes.iter().map(|s| s.mesh(cfg.gt_subdivisions)).collect::<Vec<_>>());
        let tpl = TriMesh::union(&shapes.iter().map(|s| s.mesh(cfg.template_subdivisions)).collect::<Vec<_>>());
        let rel = |name: &str| format!("{id}/{name}");
        save_volume(&dir.join(rel("volume")), &vol)?;
        save_labels(&dir.join(rel("labels")), &labels, vol.transform)?;
        write_obj(&dir.join(rel("gt.obj")), &gt)?;
        write_obj(&dir.join(rel("template.obj")), &tpl)?;
        let files: Vec<PathBuf> = ["volume.json", "volume.raw", "labels.json", "labels.raw", "gt.obj", "template.obj"]
            .iter()
            .map(|f| dir.join(rel(f)))
            .collect();
        samples.push(SampleEntry {
            id: id.clone(),
            index,
            seed: sample_seed(cfg.seed, index),
            split,
            volume: rel("volume"),
            labels: rel("labels"),
            gt_mesh: rel("gt.obj"),
            template_mesh: rel("template.obj"),
            shapes,
            content_hash: hash_files(&files)?,
        });
    }
    let mut manifest = DatasetManifest {
        version: DATASET_VERSION.into(),
        config: cfg.clone(),
        samples,
        hash: String::new(),
    };
    manifest.hash = manifest.compute_hash();
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != DATASET_VERSION {
        return Err(Error::format(&path, format!("expected {DATASET_VERSION}, found {}", m.version)));
    }
    if m.compute_hash() != m.hash {
        return Err(Error::format(&path, "manifest hash does not match its contents"));
    }
    Ok(m)
}

pub fn load_sample(dir: &Path, entry: &SampleEntry) -> Result<Sample> {
    Ok(Sample {
        entry: entry.clone(),
        volume: load_volume(&dir.join(&entry.volume))?,
        labels: load_labels(&dir.join(&entry.labels))?,
        gt_mesh: read_obj(&dir.join(&entry.gt_mesh))?,
        template_mesh: read_obj(&dir.join(&entry.template_mesh))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn flat_shape_is_sphere() {
        let (_, m) = generate_shape(3, 0.0, 4).unwrap();
        for v in &m.vertices {
            assert!((norm(*v) - DEFAULT_R0).abs() <= 1e-6);
        }
        assert_eq!(m.euler_characteristic(), 2);
    }

    #[test]
    fn deterministic_and_bounded() {
        let (a, ma) = generate_shape(11, 0.3, 8).unwrap();
        let (b, mb) = generate_shape(11, 0.3, 8).unwrap();
        assert_eq!((a.clone(), ma.clone()), (b, mb));
        for v in &ma.vertices {
            let r = norm(*v);
            assert!(r >= DEFAULT_R0 * 0.7 - 1e-12 && r <= DEFAULT_R0 * 1.3 + 1e-12);
        }
        assert!(generate_shape(1, 0.31, 2).is_err());
        assert!(generate_shape(1, 0.1, 9).is_err());
    }

    #[test]
    fn legendre_values() {
        assert_eq!(legendre(2, 1.0), 1.0);
        assert!((legendre(3, 0.5) - (-0.4375)).abs() < 1e-12);
        assert!((legendre(4, -1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn voxelized_sphere_volume() {
        let s = random_shape(0, 0.0, 0, 0.5, [0.0; 3]).unwrap();
        let (vol, labels) = voxelize(&[s], [32; 3], 0.0).unwrap();
        let frac = vol.data.iter().filter(|&&v| v == 1.0).count() as f64 / vol.data.len() as f64;
        // Each voxel spans 2/31, so the grid covers a cube of side 64/31.
        let expected = 4.0 / 3.0 * PI * 0.125 / (64.0f64 / 31.0).powi(3);
        assert!((frac - expected).abs() / expected < 0.05, "{frac} vs {expected}");
        assert!(vol.data.iter().all(|&v| v == 0.0 || v == 1.0));
        for (v, l) in vol.data.iter().zip(&labels.labels) {
            assert_eq!(*v > 0.5, *l == 1);
        }
    }

    #[test]
    fn blur_softens_and_preserves_mass() {
        let s = random_shape(0, 0.0, 0, 0.5, [0.0; 3]).unwrap();
        let (sharp, _) = voxelize(std::slice::from_ref(&s), [32; 3], 0.0).unwrap();
        let (soft, _) = voxelize(&[s], [32; 3], 1.0).unwrap();
        let sum = |v: &Volume| v.data.iter().map(|&x| x as f64).sum::<f64>();
        assert!((sum(&sharp) - sum(&soft)).abs() / sum(&sharp) < 1e-3);
        assert!(soft.data.iter().any(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn split_counts_and_manifest_determinism() {
        let cfg = DatasetConfig {
            n: 10,
            dims: [16; 3],
            gt_subdivisions: 2,
            template_subdivisions: 1,
            ..DatasetConfig::default()
        };
        assert_eq!(DatasetConfig { n: 50, ..cfg.clone() }.split_counts().unwrap(), [40, 5, 5]);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = build_dataset(&cfg, d1.path()).unwrap();
        let m2 = build_dataset(&cfg, d2.path()).unwrap();
        assert_eq!(m1.hash, m2.hash);
        assert_eq!(load_manifest(d1.path()).unwrap(), m1);
        let s = load_sample(d1.path(), &m1.samples[0]).unwrap();
        assert_eq!(s.template_mesh, m1.samples[0].shapes[0].mesh(1));
        let mut seeds: Vec<u64> = m1.samples.iter().map(|s| s.seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 10);
    }
}
