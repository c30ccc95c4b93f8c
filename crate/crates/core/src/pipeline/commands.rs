//! Template construction, single-volume reconstruction and the ablation
//! matrix.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Dtype, RunConfig};
use super::eval::predict_distances;
use super::model::Model;
use super::train::{load_split, train, write_json};
use crate::decoder::TemplateMode;
use crate::error::{Error, Result};
use crate::mesh::{
    build_template_bundle, mean_template, save_template_bundle, taubin_smooth, write_obj, FactorLadder, TemplateBundle,
};
use crate::metrics::MetricsReport;
use crate::synth::{load_manifest, Split};
use crate::tensor::Real;
use crate::volume::load_volume;

/// Where the baseline template comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateSource {
    /// Vertex-wise mean of the training split's template-topology meshes.
    Mean,
    /// One training mesh, by position in the training split.
    Specific(usize),
}

impl FromStr for TemplateSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mean" {
            return Ok(Self::Mean);
        }
        s.strip_prefix("specific:")
            .and_then(|i| i.parse().ok())
            .map(Self::Specific)
            .ok_or_else(|| Error::Config(format!("template source {s:?}; expected mean or specific:<index>")))
    }
}

/// Build the template bundle from a dataset's training split and write it
/// to `out`. `factors` defaults to the automatic ladder per structure.
pub fn cmd_make_template(
    dataset: &Path,
    source: TemplateSource,
    smooth_iters: usize,
    factors: Option<FactorLadder>,
    out: &Path,
) -> Result<TemplateBundle> {
    let manifest = load_manifest(dataset)?;
    let train = load_split(dataset, &manifest, Split::Train)?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let meshes: Vec<_> = train.iter().map(|s| s.template_mesh.clone()).collect();
    let base = match source {
        TemplateSource::Mean => mean_template(&meshes)?,
        TemplateSource::Specific(i) => meshes
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Config(format!("specific index {i} outside the {}-sample training split", meshes.len())))?,
    };
    if base.surface_area() == 0.0 {
        log::warn!("baseline template is degenerate (zero surface area)");
    }
    let base = taubin_smooth(&base, smooth_iters);
    let structures = manifest.config.structures.max(1);
    let factors = factors.unwrap_or_else(|| FactorLadder::for_vertex_count(base.num_vertices() / structures));
    let bundle = build_template_bundle(&base, factors)?;
    save_template_bundle(out, &bundle)?;
    Ok(bundle)
}

/// Write the initial template and the four stage meshes for one volume.
/// Returns the paths written and their vertex counts.
pub fn cmd_reconstruct<T: Real>(checkpoint: &Path, volume: &Path, out_prefix: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let (mut model, _, _) = Model::<T>::load(checkpoint)?;
    let vol = load_volume(volume)?;
    let (init, stages) = model.reconstruct(&vol)?;
    let name = |suffix: &str| {
        let mut s = out_prefix.as_os_str().to_owned();
        s.push(format!("_{suffix}.obj"));
        PathBuf::from(s)
    };
    let mut written = Vec::new();
    let tag = format!("template_{}", model.cfg.mode.name().to_lowercase());
    for (suffix, mesh) in std::iter::once((tag, &init)).chain(stages.iter().enumerate().map(|(i, m)| (format!("s{}", i + 1), m))) {
        let path = name(&suffix);
        write_obj(&path, mesh)?;
        written.push((path, mesh.num_vertices()));
    }
    Ok(written)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub method: String,
    pub mode: TemplateMode,
    pub image_decoder: bool,
    pub seg_loss: bool,
}

/// The seven configurations compared in the ablation table.
pub fn ablation_cells() -> Vec<AblationCell> {
    let cell = |m: &str, mode, img, seg| AblationCell {
        method: m.into(),
        mode,
        image_decoder: img,
        seg_loss: seg,
    };
    vec![
        cell("#v1", TemplateMode::Ta, false, false),
        cell("#v2", TemplateMode::Ta, true, true),
        cell("#v3", TemplateMode::Tspe, true, false),
        cell("#v4", TemplateMode::Ts, true, false),
        cell("#v5", TemplateMode::Td, true, false),
        cell("#v6", TemplateMode::TspePlusTd, true, false),
        cell("our", TemplateMode::Ta, true, false),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    /// Test-split averages per seed; `None` where the cell failed.
    pub assd: Vec<Option<f64>>,
    pub hd: Vec<Option<f64>>,
    /// Wall-clock seconds spent training and testing each seed.
    pub seconds: Vec<f64>,
    pub median_assd: f64,
    pub median_hd: f64,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
    pub base_config: RunConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, method: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("Methods,Template,ImgDec,Segloss,Avg ASSD,Avg HD\n");
        let mark = |b: bool| if b { "yes" } else { "-" };
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.cell.method,
                r.cell.mode,
                mark(r.cell.image_decoder),
                mark(r.cell.seg_loss),
                r.median_assd,
                r.median_hd
            )
            .unwrap();
        }
        s
    }
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: &[Option<f64>]) -> f64 {
    let mut v: Vec<f64> = values.iter().flatten().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn run_cell<T: Real>(cfg: &RunConfig) -> Result<MetricsReport> {
    let mut outcome = train::<T>(cfg)?;
    let best = Model::<T>::load(&outcome.best_checkpoint)?.0;
    outcome.model = best;
    let manifest = load_manifest(&cfg.dataset)?;
    let test = load_split(&cfg.dataset, &manifest, Split::Test)?;
    if test.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let rows = predict_distances(&mut outcome.model, &test, cfg.eval_samples, cfg.strict)?;
    let report = MetricsReport::new(
        cfg.mode.name(),
        cfg.config_hash(),
        manifest.hash,
        "test",
        cfg.eval_samples,
        0,
        rows,
        serde_json::json!({ "run": cfg }),
    );
    report.write(&cfg.run_dir.join("eval_test"))?;
    Ok(report)
}

/// Train and test every cell for every seed on the shared dataset and
/// template. Failed cells are recorded and the table is still written to
/// `<run_dir>/ablation.{csv,json}`.
pub fn cmd_ablate(base: &RunConfig, seeds: &[u64], cells: &[AblationCell]) -> Result<AblationReport> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let manifest = load_manifest(&base.dataset)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut row = AblationRow {
            cell: cell.clone(),
            assd: Vec::new(),
            hd: Vec::new(),
            seconds: Vec::new(),
            median_assd: f64::NAN,
            median_hd: f64::NAN,
            errors: Vec::new(),
        };
        for &seed in seeds {
            let dir = format!("{}_seed{seed}", cell.method.trim_start_matches('#'));
            let cfg = RunConfig {
                mode: cell.mode,
                image_decoder: cell.image_decoder,
                seg_loss: cell.seg_loss,
                seed,
                run_dir: base.run_dir.join(dir),
                ..base.clone()
            };
            let start = Instant::now();
            let result = match cfg.dtype {
                Dtype::F32 => run_cell::<f32>(&cfg),
                Dtype::F64 => run_cell::<f64>(&cfg),
            };
            row.seconds.push(start.elapsed().as_secs_f64());
            match result {
                Ok(r) => {
                    if r.dataset_hash != manifest.hash {
                        return Err(Error::Config("dataset changed during the ablation".into()));
                    }
                    log::info!("{} seed {seed}: assd {} hd {}", cell.method, r.average_assd, r.average_hd);
                    row.assd.push(Some(r.average_assd));
                    row.hd.push(Some(r.average_hd));
                }
                Err(e) => {
                    log::error!("{} seed {seed} failed: {e}", cell.method);
                    row.assd.push(None);
                    row.hd.push(None);
                    row.errors.push(format!("seed {seed}: {e}"));
                }
            }
        }
        row.median_assd = median(&row.assd);
        row.median_hd = median(&row.hd);
        rows.push(row);
    }
    let report = AblationReport {
        dataset_hash: manifest.hash,
        seeds: seeds.to_vec(),
        base_config: base.clone(),
        rows,
    };
    let csv = base.run_dir.join("ablation.csv");
    fs::create_dir_all(&base.run_dir).map_err(|e| Error::io(&base.run_dir, e))?;
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    write_json(&base.run_dir.join("ablation.json"), &report)?;
    Ok(report)
}
