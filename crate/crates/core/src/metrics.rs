//! Surface-distance metrics and the evaluation report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{add, scale, sub, TriMesh, Vec3};
use crate::spatial::TriangleBvh;

/// Points drawn uniformly by area, with the face each came from.
#[derive(Clone, Debug)]
pub struct SurfaceSamples {
    pub points: Vec<Vec3>,
    pub faces: Vec<usize>,
}

pub fn sample_surface<R: Rng>(mesh: &TriMesh, count: usize, rng: &mut R) -> Result<SurfaceSamples> {
    if mesh.faces.is_empty() {
        return Err(Error::Mesh("cannot sample an empty mesh".into()));
    }
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::Mesh("mesh has zero surface area".into()));
    }
    let mut points = Vec::with_capacity(count);
    let mut faces = Vec::with_capacity(count);
    for _ in 0..count {
        let t = rng.gen::<f64>() * acc;
        let f = cdf.partition_point(|&c| c <= t).min(cdf.len() - 1);
        let [a, b, c] = mesh.faces[f].map(|i| mesh.vertices[i]);
        let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        points.push(add(a, add(scale(sub(b, a), u), scale(sub(c, a), v))));
        faces.push(f);
    }
    Ok(SurfaceSamples { points, faces })
}

/// Symmetric surface distances between two meshes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub assd: f64,
    pub hd: f64,
    /// 90th percentile of the pooled point-to-surface distances.
    pub hd90: f64,
}

fn one_way(points: &[Vec3], target: &TriangleBvh) -> Vec<f64> {
    points.iter().map(|&p| target.closest(p).expect("non-empty").dist2.sqrt()).collect()
}

/// Both meshes are sampled with the same seed, so the result does not
/// depend on argument order.
pub fn surface_distances(a: &TriMesh, b: &TriMesh, samples: usize, seed: u64) -> Result<SurfaceDistances> {
    if a.faces.is_empty() || b.faces.is_empty() {
        return Err(Error::Mesh("surface distance needs two non-empty meshes".into()));
    }
    let sa = sample_surface(a, samples, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let sb = sample_surface(b, samples, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let da = one_way(&sa.points, &TriangleBvh::new(b));
    let db = one_way(&sb.points, &TriangleBvh::new(a));
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let assd = 0.5 * (mean(&da) + mean(&db));
    let hd = da.iter().chain(&db).fold(0.0f64, |m, &d| m.max(d));
    let mut pooled: Vec<f64> = da.iter().chain(&db).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let hd90 = pooled[((pooled.len() as f64 * 0.9).ceil() as usize).clamp(1, pooled.len()) - 1];
    Ok(SurfaceDistances { assd, hd, hd90 })
}

pub fn assd(a: &TriMesh, b: &TriMesh, samples: usize, seed: u64) -> Result<f64> {
    Ok(surface_distances(a, b, samples, seed)?.assd)
}

pub fn hausdorff(a: &TriMesh, b: &TriMesh, samples: usize, seed: u64) -> Result<f64> {
    Ok(surface_distances(a, b, samples, seed)?.hd)
}

/// One evaluated (subject, structure) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject: String,
    pub structure: usize,
    pub assd: f64,
    pub hd: f64,
    pub hd90: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub structure: usize,
    pub count: usize,
    pub assd_mean: f64,
    pub assd_std: f64,
    pub hd_mean: f64,
    pub hd_std: f64,
    pub hd90_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub template_mode: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub split: String,
    pub samples_per_mesh: usize,
    pub skipped: usize,
    pub rows: Vec<SubjectRow>,
    pub structures: Vec<StructureSummary>,
    pub average_assd: f64,
    pub average_hd: f64,
    /// Full run configuration that produced these numbers.
    pub config: serde_json::Value,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl MetricsReport {
    pub fn new(
        template_mode: impl Into<String>,
        config_hash: impl Into<String>,
        dataset_hash: impl Into<String>,
        split: impl Into<String>,
        samples_per_mesh: usize,
        skipped: usize,
        rows: Vec<SubjectRow>,
        config: serde_json::Value,
    ) -> Self {
        let mut ids: Vec<usize> = rows.iter().map(|r| r.structure).collect();
        ids.sort_unstable();
        ids.dedup();
        let structures: Vec<StructureSummary> = ids
            .iter()
            .map(|&s| {
                let sel: Vec<&SubjectRow> = rows.iter().filter(|r| r.structure == s).collect();
                let a: Vec<f64> = sel.iter().map(|r| r.assd).collect();
                let h: Vec<f64> = sel.iter().map(|r| r.hd).collect();
                let h90: Vec<f64> = sel.iter().map(|r| r.hd90).collect();
                let (am, asd) = mean_std(&a);
                let (hm, hsd) = mean_std(&h);
                StructureSummary {
                    structure: s,
                    count: sel.len(),
                    assd_mean: am,
                    assd_std: asd,
                    hd_mean: hm,
                    hd_std: hsd,
                    hd90_mean: mean_std(&h90).0,
                }
            })
            .collect();
        let avg = |f: fn(&StructureSummary) -> f64| {
            if structures.is_empty() {
                f64::NAN
            } else {
                structures.iter().map(f).sum::<f64>() / structures.len() as f64
            }
        };
        Self {
            template_mode: template_mode.into(),
            config_hash: config_hash.into(),
            dataset_hash: dataset_hash.into(),
            split: split.into(),
            samples_per_mesh,
            skipped,
            average_assd: avg(|s| s.assd_mean),
            average_hd: avg(|s| s.hd_mean),
            rows,
            structures,
            config,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("subject,structure,assd,hd,hd90\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{}", r.subject, r.structure, r.assd, r.hd, r.hd90).unwrap();
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let json = stem.with_extension("json");
        fs::write(&json, serde_json::to_string_pretty(self).expect("report serializes")).map_err(|e| Error::io(&json, e))?;
        let csv = stem.with_extension("csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;

    fn square(z: f64) -> TriMesh {
        TriMesh::new(
            vec![[0.0, 0.0, z], [1.0, 0.0, z], [1.0, 1.0, z], [0.0, 1.0, z]],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn self_distance_is_zero() {
        let m = icosphere(2);
        let d = surface_distances(&m, &m, 2000, 1).unwrap();
        assert!(d.assd < 1e-12 && d.hd < 1e-12);
    }

    #[test]
    fn parallel_planes() {
        let d = surface_distances(&square(0.0), &square(0.3), 10_000, 5).unwrap();
        assert!((d.assd - 0.3).abs() < 0.003);
        assert!((d.hd - 0.3).abs() < 0.003);
    }

    #[test]
    fn symmetric_and_hd_dominates() {
        let a = icosphere(2);
        let b = icosphere(1).translated([0.1, 0.0, 0.0]);
        let x = surface_distances(&a, &b, 3000, 9).unwrap();
        let y = surface_distances(&b, &a, 3000, 9).unwrap();
        assert_eq!(x, y);
        assert!(x.hd >= x.hd90 && x.hd90 >= 0.0 && x.hd >= x.assd);
    }

    #[test]
    fn empty_mesh_is_error() {
        assert!(assd(&TriMesh::empty(), &icosphere(0), 10, 0).is_err());
    }

    #[test]
    fn report_aggregates_per_structure() {
        let rows = vec![
            SubjectRow { subject: "a".into(), structure: 0, assd: 1.0, hd: 2.0, hd90: 1.5 },
            SubjectRow { subject: "b".into(), structure: 0, assd: 3.0, hd: 4.0, hd90: 3.5 },
            SubjectRow { subject: "a".into(), structure: 1, assd: 5.0, hd: 6.0, hd90: 5.5 },
        ];
        let r = MetricsReport::new("Ta", "h", "d", "test", 10, 0, rows, serde_json::json!({}));
        assert_eq!(r.structures.len(), 2);
        assert_eq!(r.average_assd, (2.0 + 5.0) / 2.0);
        assert!(r.to_csv().starts_with("subject,structure,assd,hd,hd90\na,0,1,2,1.5\n"));
    }
}
