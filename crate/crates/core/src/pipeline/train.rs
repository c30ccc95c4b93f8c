//! Training loop with validation, best-checkpoint selection and logging.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{predict_distances, Evaluated};
use super::model::Model;
use crate::error::{Error, Result};
use crate::losses::{mesh_loss, seg_cross_entropy, GtSurface, LossTerms};
use crate::mesh::load_template_bundle;
use crate::synth::{load_manifest, load_sample, DatasetManifest, Sample, Split};
use crate::tensor::{NormMode, Real};

pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const BEST_STEM: &str = "best";
pub const LAST_STEM: &str = "last";

/// Per-group gradient norms averaged over an epoch's steps. A group whose
/// parameters never received a gradient stays `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub unet: Option<f64>,
    pub decoder: Option<f64>,
    pub deformer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean weighted total over training steps.
    pub train_loss: f64,
    /// Mean unweighted terms, summed over stages.
    pub train_terms: LossTerms,
    /// Mean Chamfer term of the final stage.
    pub train_final_chamfer: f64,
    pub train_seg_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_assd: Option<f64>,
    pub grad_norms: GradNorms,
    pub degenerate_faces: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config_hash: String,
    pub arch_hash: String,
    pub dataset_hash: String,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights are in the `best` checkpoint.
    pub best_epoch: usize,
    pub best_val_assd: Option<f64>,
}

pub struct TrainOutcome<T: Real> {
    pub model: Model<T>,
    pub log: TrainLog,
    pub best_checkpoint: PathBuf,
}

/// Dataset samples of one split with their loss targets.
pub struct PreparedSplit {
    pub samples: Vec<Sample>,
    pub gt: Vec<GtSurface>,
}

pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    manifest.split(split).map(|e| load_sample(dir, e)).collect()
}

/// Loss targets are seeded by the sample alone, so every run on a dataset
/// sees the same ground-truth points.
pub fn prepare_split(dir: &Path, manifest: &DatasetManifest, split: Split, points: usize) -> Result<PreparedSplit> {
    let samples = load_split(dir, manifest, split)?;
    let gt = samples
        .iter()
        .map(|s| GtSurface::sample(&s.gt_mesh, points, &mut ChaCha8Rng::seed_from_u64(s.entry.seed)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedSplit { samples, gt })
}

/// A fresh model for `cfg` on its dataset and template.
pub fn build_model<T: Real>(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Model<T>> {
    let bundle = load_template_bundle(&cfg.template)?;
    let t_spe = if cfg.mode.needs_specific() {
        let entry = manifest.split(Split::Train).nth(cfg.specific_index).ok_or_else(|| {
            Error::Config(format!("specific_index {} is outside the training split", cfg.specific_index))
        })?;
        Some(load_sample(&cfg.dataset, entry)?.template_mesh)
    } else {
        None
    };
    Model::new(cfg.clone(), bundle, t_spe, manifest.config.dims, manifest.config.structures)
}

struct StepResult {
    total: f64,
    terms: LossTerms,
    final_chamfer: f64,
    seg: Option<f64>,
    degenerate: usize,
}

fn loss_step<T: Real>(
    model: &mut Model<T>,
    sample: &Sample,
    gt: &GtSurface,
    mode: NormMode,
    backward: bool,
    where_: &str,
) -> Result<StepResult> {
    let pred = model.forward(&sample.volume, mode)?;
    let ml = mesh_loss(&pred.trace.stages, &model.topology, gt, &model.cfg.weights)?;
    let mut total = ml.total.clone();
    let mut seg = None;
    if model.cfg.seg_loss {
        let logits = pred
            .pyramid
            .seg_logits
            .as_ref()
            .ok_or_else(|| Error::Config("seg_loss is set but the model has no segmentation head".into()))?;
        let ce = seg_cross_entropy(logits, &sample.labels)?;
        seg = Some(ce.item().as_f64());
        total = total.add(&ce.scale(model.cfg.seg_weight))?;
    }
    let value = total.item().as_f64();
    let terms = ml.summed();
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {value} at {where_} (sample {}): chamfer {} laplacian {} normal {} edge {} seg {:?}",
            sample.entry.id, terms.chamfer, terms.laplacian, terms.normal, terms.edge, seg
        )));
    }
    if backward {
        total.backward()?;
    }
    Ok(StepResult {
        total: value,
        terms,
        final_chamfer: ml.stages.last().map(|s| s.chamfer).unwrap_or(0.0),
        seg,
        degenerate: ml.degenerate_faces,
    })
}

fn mean_opt(sum: f64, count: usize) -> Option<f64> {
    (count > 0).then(|| sum / count as f64)
}

/// Train per `cfg`, writing checkpoints, the log and a run manifest into
/// `cfg.run_dir`.
pub fn train<T: Real>(cfg: &RunConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.dataset)?;
    let mut model = build_model::<T>(cfg, &manifest)?;
    let points = cfg.gt_samples_per_vertex * model.baseline().num_vertices();
    let train = prepare_split(&cfg.dataset, &manifest, Split::Train, points)?;
    if train.samples.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let val = prepare_split(&cfg.dataset, &manifest, Split::Val, points)?;
    let mut opt = model.optimizer();
    let run = &cfg.run_dir;
    fs::create_dir_all(run).map_err(|e| Error::io(run, e))?;
    let best_stem = run.join(BEST_STEM);

    let mut log = TrainLog {
        config_hash: cfg.config_hash(),
        arch_hash: model.arch_hash(),
        dataset_hash: manifest.hash.clone(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_assd: None,
    };
    let mut order: Vec<usize> = (0..train.samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut terms = LossTerms::default();
        let mut final_chamfer = 0.0;
        let (mut seg_sum, mut seg_n) = (0.0, 0);
        let mut degenerate = 0;
        let mut norms = [(0.0, 0usize); 3];
        for (step, &i) in order.iter().enumerate() {
            model.params.zero_grad();
            let r = loss_step(
                &mut model,
                &train.samples[i],
                &train.gt[i],
                NormMode::Train,
                true,
                &format!("epoch {epoch} step {step}"),
            )?;
            for (slot, prefix) in norms.iter_mut().zip(["unet.", "decoder.", "deformer."]) {
                if let Some(g) = model.params.grad_norm(prefix) {
                    slot.0 += g;
                    slot.1 += 1;
                }
            }
            opt.step(&mut model.params)?;
            sum += r.total;
            terms.chamfer += r.terms.chamfer;
            terms.laplacian += r.terms.laplacian;
            terms.normal += r.terms.normal;
            terms.edge += r.terms.edge;
            final_chamfer += r.final_chamfer;
            degenerate += r.degenerate;
            if let Some(s) = r.seg {
                seg_sum += s;
                seg_n += 1;
            }
        }
        model.params.zero_grad();
        let n = order.len() as f64;
        let mut entry = EpochLog {
            epoch,
            train_loss: sum / n,
            train_terms: LossTerms {
                chamfer: terms.chamfer / n,
                laplacian: terms.laplacian / n,
                normal: terms.normal / n,
                edge: terms.edge / n,
            },
            train_final_chamfer: final_chamfer / n,
            train_seg_loss: mean_opt(seg_sum, seg_n),
            val_loss: None,
            val_assd: None,
            grad_norms: GradNorms {
                unet: mean_opt(norms[0].0, norms[0].1),
                decoder: mean_opt(norms[1].0, norms[1].1),
                deformer: mean_opt(norms[2].0, norms[2].1),
            },
            degenerate_faces: degenerate,
        };
        let validate = !val.samples.is_empty() && (epoch % cfg.val_every == 0 || epoch == cfg.epochs);
        if validate {
            let mut vl = 0.0;
            for (s, g) in val.samples.iter().zip(&val.gt) {
                vl += loss_step(&mut model, s, g, NormMode::Eval, false, &format!("validation after epoch {epoch}"))?.total;
            }
            entry.val_loss = Some(vl / val.samples.len() as f64);
            let rows = predict_distances(&mut model, &val.samples, cfg.val_samples, cfg.strict)?;
            entry.val_assd = Some(Evaluated::mean_assd(&rows));
        }
        log::info!(
            "epoch {epoch}: train {:.6} chamfer {:.6} val {:?} val_assd {:?}",
            entry.train_loss,
            entry.train_final_chamfer,
            entry.val_loss,
            entry.val_assd
        );
        let improved = match (entry.val_assd, log.best_val_assd) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            (None, _) => val.samples.is_empty(),
        };
        if improved {
            log.best_epoch = epoch;
            log.best_val_assd = entry.val_assd;
            model.save(&best_stem, Some(&opt), &manifest.hash, epoch)?;
        }
        log.epochs.push(entry);
    }
    model.save(&run.join(LAST_STEM), Some(&opt), &manifest.hash, cfg.epochs)?;
    write_json(&run.join(TRAIN_LOG_FILE), &log)?;
    let cfg_path = run.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    write_json(
        &run.join(RUN_MANIFEST_FILE),
        &serde_json::json!({
            "kind": "train",
            "config": cfg,
            "config_hash": log.config_hash,
            "arch_hash": log.arch_hash,
            "dataset_hash": log.dataset_hash,
            "best_epoch": log.best_epoch,
            "files": ["config.toml", TRAIN_LOG_FILE, "best.json", "best.bin", "last.json", "last.bin", "template"],
        }),
    )?;
    Ok(TrainOutcome {
        model,
        log,
        best_checkpoint: best_stem,
    })
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, serde_json::to_string_pretty(value).expect("value serializes")).map_err(|e| Error::io(path, e))
}
