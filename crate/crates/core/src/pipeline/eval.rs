//! Evaluation of trained models and the marching-cubes baseline.

use std::path::Path;
use std::thread;

use super::config::RunConfig;
use super::model::Model;
use super::train::load_split;
use crate::error::{Error, Result};
use crate::mesh::{marching_cubes, TriMesh};
use crate::metrics::{surface_distances, MetricsReport, SubjectRow, SurfaceDistances};
use crate::synth::{load_manifest, Sample, Split};
use crate::tensor::Real;

/// Pair predicted and ground-truth structures. Multi-structure meshes are
/// split into connected components, which keep their order.
pub fn structure_pairs(pred: &TriMesh, gt: &TriMesh, structures: usize) -> Result<Vec<(TriMesh, TriMesh)>> {
    if structures <= 1 {
        return Ok(vec![(pred.clone(), gt.clone())]);
    }
    let p = pred.connected_components();
    let g = gt.connected_components();
    if p.len() != structures || g.len() != structures {
        return Err(Error::Topology(format!(
            "expected {structures} structures, prediction has {} and ground truth {}",
            p.len(),
            g.len()
        )));
    }
    Ok(p.into_iter().zip(g).collect())
}

/// Distances for each `(subject, structure, a, b, seed)` job. Outside strict
/// mode the jobs run on all available cores; results do not depend on it.
fn distances(jobs: &[(String, usize, TriMesh, TriMesh, u64)], samples: usize, strict: bool) -> Result<Vec<SubjectRow>> {
    let run = |job: &(String, usize, TriMesh, TriMesh, u64)| -> Result<SubjectRow> {
        let SurfaceDistances { assd, hd, hd90 } = surface_distances(&job.2, &job.3, samples, job.4)?;
        Ok(SubjectRow {
            subject: job.0.clone(),
            structure: job.1,
            assd,
            hd,
            hd90,
        })
    };
    let workers = if strict { 1 } else { thread::available_parallelism().map_or(1, |n| n.get()) };
    if workers <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(run).collect();
    }
    let chunk = jobs.len().div_ceil(workers);
    thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(run).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("metric worker panicked"))
            .collect()
    })
}

/// Helpers over evaluated rows.
pub struct Evaluated;

impl Evaluated {
    /// Mean over structures of the per-structure mean ASSD.
    pub fn mean_assd(rows: &[SubjectRow]) -> f64 {
        MetricsReport::new("", "", "", "", 0, 0, rows.to_vec(), serde_json::Value::Null).average_assd
    }
}

/// Final-stage meshes of `samples` scored against their ground truth.
pub fn predict_distances<T: Real>(
    model: &mut Model<T>,
    samples: &[Sample],
    points: usize,
    strict: bool,
) -> Result<Vec<SubjectRow>> {
    let mut jobs = Vec::new();
    for s in samples {
        let (_, stages) = model.reconstruct(&s.volume)?;
        let last = stages.last().expect("four stages");
        for (k, (p, g)) in structure_pairs(last, &s.gt_mesh, model.structures)?.into_iter().enumerate() {
            jobs.push((s.entry.id.clone(), k, p, g, s.entry.seed));
        }
    }
    distances(&jobs, points, strict)
}

/// Evaluate a checkpoint on one split of `dataset` (the training dataset
/// when `None`).
pub fn cmd_eval<T: Real>(checkpoint: &Path, dataset: Option<&Path>, split: Split, out: Option<&Path>) -> Result<MetricsReport> {
    let (mut model, _, info) = Model::<T>::load(checkpoint)?;
    let dir = dataset.unwrap_or(&info.run.dataset).to_path_buf();
    let manifest = load_manifest(&dir)?;
    let samples = load_split(&dir, &manifest, split)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("split {} of {} is empty", split.name(), dir.display())));
    }
    let cfg: RunConfig = info.run.clone();
    let rows = predict_distances(&mut model, &samples, cfg.eval_samples, cfg.strict)?;
    let report = MetricsReport::new(
        cfg.mode.name(),
        cfg.config_hash(),
        manifest.hash.clone(),
        split.name(),
        cfg.eval_samples,
        0,
        rows,
        serde_json::json!({ "run": cfg, "checkpoint": checkpoint, "epoch": info.epoch }),
    );
    let stem = match out {
        Some(o) => o.to_path_buf(),
        None => checkpoint.with_file_name(format!("eval_{}", split.name())),
    };
    report.write(&stem)?;
    Ok(report)
}

/// Marching cubes on the ground-truth labels, scored like [`cmd_eval`].
/// Structures whose isosurface is empty are skipped and counted.
pub fn cmd_baseline_mc(
    dataset: &Path,
    split: Split,
    iso: f64,
    samples_per_mesh: usize,
    strict: bool,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let manifest = load_manifest(dataset)?;
    let samples = load_split(dataset, &manifest, split)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("split {} of {} is empty", split.name(), dataset.display())));
    }
    let structures = manifest.config.structures;
    let mut jobs = Vec::new();
    let mut skipped = 0;
    for s in &samples {
        let gts = structure_pairs(&s.gt_mesh, &s.gt_mesh, structures)?;
        for (k, (gt, _)) in gts.into_iter().enumerate() {
            let ind = s.labels.indicator(k as u8 + 1, s.volume.transform)?;
            let mesh = marching_cubes(&ind, iso);
            if mesh.is_empty() {
                log::warn!("{} structure {k}: empty isosurface at iso {iso}, skipped", s.entry.id);
                skipped += 1;
                continue;
            }
            jobs.push((s.entry.id.clone(), k, mesh, gt, s.entry.seed));
        }
    }
    if jobs.is_empty() {
        log::warn!("all {skipped} surfaces were empty at iso {iso}; iso must lie strictly inside (0, 1)");
    }
    let rows = distances(&jobs, samples_per_mesh, strict)?;
    let config = serde_json::json!({ "dataset": dataset, "iso": iso, "samples_per_mesh": samples_per_mesh, "split": split });
    let hash = hex::encode(<sha2::Sha256 as sha2::Digest>::digest(config.to_string()));
    let report = MetricsReport::new("mc", hash, manifest.hash.clone(), split.name(), samples_per_mesh, skipped, rows, config);
    if let Some(o) = out {
        report.write(o)?;
    }
    Ok(report)
}
