//! Multi-resolution template hierarchy and its `TPLB-1` container.
//!
//! On disk a bundle is a directory holding `bundle.json`, one OBJ per level
//! and `matrices.bin`, a little-endian stream of `(u64 row, u64 col, f64
//! value)` triplets for the up matrices followed by the down matrices.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{decimate, read_obj, write_obj, TriMesh};
use crate::error::{Error, Result};
use crate::tensor::SparseMatrix;

pub const BUNDLE_MAGIC: &str = "TPLB-1";

/// Fine-to-coarse reduction factors giving N, N/16, N/128, N/512, N/2048.
pub const FULL_SCALE_FACTORS: [f64; 4] = [16.0, 8.0, 4.0, 4.0];

/// No level may be decimated below this many vertices.
pub const MIN_LEVEL_VERTICES: usize = 12;

/// Coarsest-level size the automatic ladder aims for.
const AUTO_COARSEST: f64 = 20.0;

/// Per-level vertex reduction factors, finest first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorLadder(pub [f64; 4]);

impl FactorLadder {
    pub fn full_scale() -> Self {
        FactorLadder(FULL_SCALE_FACTORS)
    }

    /// Default ladder for a baseline of `n` vertices.
    ///
    /// Large meshes get the full-scale ladder verbatim. Below `2048 * 20`
    /// vertices that ladder would end under a handful of vertices, so
    /// every factor is raised to a common exponent `s < 1` chosen so the
    /// coarsest level lands near 20 vertices while the ladder keeps its
    /// shape (largest reduction first).
    pub fn for_vertex_count(n: usize) -> Self {
        let total: f64 = FULL_SCALE_FACTORS.iter().product();
        let s = ((n as f64 / AUTO_COARSEST).ln() / total.ln()).clamp(0.0, 1.0);
        if s >= 1.0 {
            return Self::full_scale();
        }
        FactorLadder(FULL_SCALE_FACTORS.map(|f| f.powf(s)))
    }

    /// Target vertex counts for each level, finest first.
    pub fn level_sizes(&self, n: usize) -> Result<Vec<usize>> {
        let mut sizes = vec![n];
        for (k, &f) in self.0.iter().enumerate() {
            if !(f > 1.0) || !f.is_finite() {
                return Err(Error::invalid("build_template_bundle", format!("factor {k} is {f}; must be > 1")));
            }
            let next = (sizes[k] as f64 / f).round() as usize;
            if next < MIN_LEVEL_VERTICES {
                return Err(Error::invalid(
                    "build_template_bundle",
                    format!(
                        "level {} would have {next} vertices (< {MIN_LEVEL_VERTICES}); use smaller factors",
                        k + 1
                    ),
                ));
            }
            if next >= sizes[k] {
                return Err(Error::invalid(
                    "build_template_bundle",
                    format!("factor {k} does not reduce {} vertices", sizes[k]),
                ));
            }
            sizes.push(next);
        }
        Ok(sizes)
    }
}

/// Baseline template with its four-step decimation hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateBundle {
    /// Level 0 is the baseline, level 4 the coarsest.
    pub levels: Vec<TriMesh>,
    /// `up[k]` maps level `k + 1` vertices to level `k`.
    pub up: Vec<SparseMatrix>,
    /// `down[k]` maps level `k` vertices to level `k + 1`.
    pub down: Vec<SparseMatrix>,
    pub factors: FactorLadder,
}

impl TemplateBundle {
    pub fn baseline(&self) -> &TriMesh {
        &self.levels[0]
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|m| m.num_vertices()).collect()
    }

    /// Structural self-check used after loading.
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != 5 || self.up.len() != 4 || self.down.len() != 4 {
            return Err(Error::Mesh("template bundle needs 5 levels and 4 up/down matrices".into()));
        }
        let sizes = self.level_sizes();
        for k in 0..4 {
            let (u, d) = (&self.up[k], &self.down[k]);
            if u.rows() != sizes[k] || u.cols() != sizes[k + 1] || d.rows() != sizes[k + 1] || d.cols() != sizes[k] {
                return Err(Error::Mesh(format!(
                    "matrix shapes at level {k} do not match level sizes {sizes:?}"
                )));
            }
            if let Some(s) = u.row_sums().into_iter().find(|s| (s - 1.0).abs() > 1e-6) {
                return Err(Error::Mesh(format!("up matrix {k} has a row summing to {s}")));
            }
        }
        Ok(())
    }
}

/// Decimate `baseline` four times following `factors`.
pub fn build_template_bundle(baseline: &TriMesh, factors: FactorLadder) -> Result<TemplateBundle> {
    baseline.validate_closed_manifold()?;
    let sizes = factors.level_sizes(baseline.num_vertices())?;
    let mut levels = vec![baseline.clone()];
    let mut up = Vec::with_capacity(4);
    let mut down = Vec::with_capacity(4);
    for &target in &sizes[1..] {
        let d = decimate(levels.last().unwrap(), target)?;
        up.push(d.up);
        down.push(d.down);
        levels.push(d.mesh);
    }
    log::info!("template ladder {:?}", sizes);
    Ok(TemplateBundle {
        levels,
        up,
        down,
        factors,
    })
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    rows: usize,
    cols: usize,
    nnz: usize,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    magic: String,
    factors: FactorLadder,
    level_sizes: Vec<usize>,
    level_files: Vec<String>,
    up: Vec<MatrixHeader>,
    down: Vec<MatrixHeader>,
}

pub fn save_template_bundle(dir: &Path, bundle: &TemplateBundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut level_files = Vec::new();
    for (k, m) in bundle.levels.iter().enumerate() {
        let name = format!("level{k}.obj");
        write_obj(&dir.join(&name), m)?;
        level_files.push(name);
    }
    let mut blob = Vec::new();
    let mut header = |m: &SparseMatrix| {
        for &(r, c, v) in m.entries() {
            blob.extend_from_slice(&(r as u64).to_le_bytes());
            blob.extend_from_slice(&(c as u64).to_le_bytes());
            blob.extend_from_slice(&v.to_le_bytes());
        }
        MatrixHeader {
            rows: m.rows(),
            cols: m.cols(),
            nnz: m.nnz(),
        }
    };
    let up: Vec<_> = bundle.up.iter().map(&mut header).collect();
    let down: Vec<_> = bundle.down.iter().map(&mut header).collect();
    let manifest = BundleManifest {
        magic: BUNDLE_MAGIC.into(),
        factors: bundle.factors,
        level_sizes: bundle.level_sizes(),
        level_files,
        up,
        down,
    };
    let bin = dir.join("matrices.bin");
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    let json = dir.join("bundle.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn load_template_bundle(dir: &Path) -> Result<TemplateBundle> {
    let json = dir.join("bundle.json");
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: BundleManifest = serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
    if manifest.magic != BUNDLE_MAGIC {
        return Err(Error::format(&json, format!("expected magic {BUNDLE_MAGIC}, found {}", manifest.magic)));
    }
    let levels = manifest
        .level_files
        .iter()
        .map(|f| read_obj(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let bin = dir.join("matrices.bin");
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut offset = 0usize;
    let mut read_matrix = |h: &MatrixHeader| -> Result<SparseMatrix> {
        let end = offset + h.nnz * 24;
        if end > blob.len() {
            return Err(Error::format(&bin, "truncated matrix data"));
        }
        let entries = blob[offset..end]
            .chunks_exact(24)
            .map(|c| {
                (
                    u64::from_le_bytes(c[0..8].try_into().unwrap()) as usize,
                    u64::from_le_bytes(c[8..16].try_into().unwrap()) as usize,
                    f64::from_le_bytes(c[16..24].try_into().unwrap()),
                )
            })
            .collect();
        offset = end;
        SparseMatrix::from_triplets(h.rows, h.cols, entries).map_err(|e| Error::format(&bin, e.to_string()))
    };
    let up = manifest.up.iter().map(&mut read_matrix).collect::<Result<Vec<_>>>()?;
    let down = manifest.down.iter().map(&mut read_matrix).collect::<Result<Vec<_>>>()?;
    let bundle = TemplateBundle {
        levels,
        up,
        down,
        factors: manifest.factors,
    };
    if bundle.level_sizes() != manifest.level_sizes {
        return Err(Error::format(&json, "level sizes disagree with level files"));
    }
    bundle.validate().map_err(|e| Error::format(&json, e.to_string()))?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;

    #[test]
    fn full_scale_ladder_for_large_meshes() {
        assert_eq!(FactorLadder::for_vertex_count(40962), FactorLadder::full_scale());
        let sizes = FactorLadder::full_scale().level_sizes(40962).unwrap();
        assert_eq!(sizes, vec![40962, 2560, 320, 80, 20]);
    }

    #[test]
    fn auto_ladder_ends_near_twenty() {
        for n in [642, 2562, 10242] {
            let sizes = FactorLadder::for_vertex_count(n).level_sizes(n).unwrap();
            assert!((19..=21).contains(&sizes[4]), "{n}: {sizes:?}");
        }
    }

    #[test]
    fn too_aggressive_factors_rejected() {
        let err = build_template_bundle(&icosphere(4), FactorLadder([4.0; 4])).unwrap_err();
        assert!(err.to_string().contains("level 4"), "{err}");
        assert!(FactorLadder([1.0, 2.0, 2.0, 2.0]).level_sizes(642).is_err());
    }

    #[test]
    fn bundle_roundtrip() {
        let b = build_template_bundle(&icosphere(3), FactorLadder::for_vertex_count(642)).unwrap();
        b.validate().unwrap();
        for m in &b.levels {
            assert_eq!(m.euler_characteristic(), 2);
        }
        let dir = tempfile::tempdir().unwrap();
        save_template_bundle(dir.path(), &b).unwrap();
        assert_eq!(load_template_bundle(dir.path()).unwrap(), b);
    }
}
