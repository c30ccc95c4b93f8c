//! Run configuration, its TOML form and the hashes derived from it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{DecoderConfig, TemplateMode};
use crate::deformer::DeformerConfig;
use crate::error::{Error, Result};
use crate::features::UnetConfig;
use crate::losses::LossWeights;

/// Bumped whenever a change to the code alters what a checkpoint means.
pub const ARCH_VERSION: &str = "meshrecon-arch-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

/// Network widths. Whether the image decoder and segmentation head exist is
/// set by the run flags, not here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: [usize; 5],
    pub kernel: usize,
    pub decoder: DecoderConfig,
    pub deformer: DeformerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let u = UnetConfig::default();
        Self {
            channels: u.channels,
            kernel: u.kernel,
            decoder: DecoderConfig::default(),
            deformer: DeformerConfig::default(),
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    /// Template bundle directory.
    pub template: PathBuf,
    pub run_dir: PathBuf,
    pub mode: TemplateMode,
    /// Training sample whose template-topology mesh serves as `T_spe`.
    pub specific_index: usize,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub lr_feature_extractor: f64,
    pub lr_rest: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub image_decoder: bool,
    pub seg_loss: bool,
    pub seg_weight: f64,
    /// Run every stage sequentially in a fixed order.
    pub strict: bool,
    pub dtype: Dtype,
    /// Ground-truth surface samples per predicted vertex for the loss.
    pub gt_samples_per_vertex: usize,
    /// Surface samples per mesh for validation ASSD.
    pub val_samples: usize,
    /// Surface samples per mesh for evaluation reports.
    pub eval_samples: usize,
    pub val_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            template: PathBuf::from("template"),
            run_dir: PathBuf::from("runs/default"),
            mode: TemplateMode::Ta,
            specific_index: 0,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            lr_feature_extractor: 1e-4,
            lr_rest: 5e-5,
            batch_size: 1,
            epochs: 20,
            seed: 0,
            image_decoder: true,
            seg_loss: false,
            seg_weight: 1.0,
            strict: true,
            dtype: Dtype::F32,
            gt_samples_per_vertex: 10,
            val_samples: 2000,
            eval_samples: 10_000,
            val_every: 1,
        }
    }
}

fn sha256_json<S: Serialize>(v: &S) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("config serializes")))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size != 1 {
            return bad(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr_feature_extractor > 0.0) || !(self.lr_rest > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.seg_loss && !self.image_decoder {
            return bad("seg_loss needs image_decoder: the segmentation head sits on X8".into());
        }
        if self.model.channels.iter().any(|&c| c == 0) || self.model.kernel % 2 == 0 {
            return bad(format!(
                "model channels {:?} must be positive and kernel {} odd",
                self.model.channels, self.model.kernel
            ));
        }
        if self.gt_samples_per_vertex == 0 || self.val_samples == 0 || self.eval_samples == 0 || self.val_every == 0 {
            return bad("sample counts and val_every must be positive".into());
        }
        Ok(())
    }

    pub fn unet_config(&self, structures: usize) -> UnetConfig {
        UnetConfig {
            channels: self.model.channels,
            kernel: self.model.kernel,
            image_decoder: self.image_decoder,
            seg_classes: self.seg_loss.then_some(structures + 1),
        }
    }

    /// Hash of the full configuration.
    pub fn config_hash(&self) -> String {
        sha256_json(self)
    }

    /// Hash of everything that fixes the parameter set and its meaning.
    pub fn arch_hash(&self, dims: [usize; 3], level_sizes: &[usize], structures: usize) -> String {
        sha256_json(&serde_json::json!({
            "version": ARCH_VERSION,
            "mode": self.mode,
            "model": self.model,
            "unet": self.unet_config(structures),
            "dims": dims,
            "level_sizes": level_sizes,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.lr_feature_extractor, 1e-4);
        assert_eq!(cfg.lr_rest, 5e-5);
        assert_eq!(cfg.model.decoder.latent, 128);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml_str("mode = \"Ts\"\nepochs = 3\n[weights]\nchamfer = 1.0\nlaplacian = 0.1\nnormal = 0.001\nedge = 5.0\n").unwrap();
        assert_eq!(cfg.mode, TemplateMode::Ts);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.weights.chamfer, 1.0);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(RunConfig::from_toml_str("batch_size = 2"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("image_decoder = false\nseg_loss = true"), Err(Error::Config(_))));
    }

    #[test]
    fn arch_hash_tracks_architecture_only() {
        let a = RunConfig::default();
        let b = RunConfig { epochs: 99, ..a.clone() };
        let c = RunConfig { mode: TemplateMode::Ts, ..a.clone() };
        let h = |c: &RunConfig| c.arch_hash([32; 3], &[642, 100, 50, 30, 20], 1);
        assert_eq!(h(&a), h(&b));
        assert_ne!(h(&a), h(&c));
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
