//! The full network: U-Net features, optional mesh decoder, template
//! composition and the staged deformer, with its checkpoint layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::decoder::{compose_template, decode_displacement, init_decoder, DecoderGraph, TemplateMode};
use crate::deformer::{deform, init_deformer, mesh_to_tensor, tensor_to_mesh, DeformationTrace};
use crate::error::{Error, Result};
use crate::features::{check_divisible, init_unet, unet_forward, volume_tensor, FeaturePyramid, UnetConfig};
use crate::losses::MeshTopology;
use crate::mesh::{load_template_bundle, read_obj, save_template_bundle, write_obj, TemplateBundle, TriMesh};
use crate::tensor::{
    load_checkpoint, save_checkpoint, Adam, AdamConfig, CheckpointManifest, ModelParams, NormMode, ParamGroup,
    Real, SparseMatrix, Tensor,
};
use crate::volume::Volume;

pub const TEMPLATE_DIR: &str = "template";
pub const SPECIFIC_FILE: &str = "tspe.obj";

/// What a checkpoint records besides the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub run: RunConfig,
    pub dims: [usize; 3],
    pub structures: usize,
    pub dataset_hash: String,
    pub epoch: usize,
}

/// Outputs of one forward pass.
pub struct Prediction<T: Real> {
    pub pyramid: FeaturePyramid<T>,
    pub t_d: Option<Tensor<T>>,
    pub trace: DeformationTrace<T>,
}

pub struct Model<T: Real> {
    pub cfg: RunConfig,
    pub params: ModelParams<T>,
    pub bundle: TemplateBundle,
    pub t_spe_mesh: Option<TriMesh>,
    pub dims: [usize; 3],
    pub structures: usize,
    pub topology: MeshTopology,
    unet: UnetConfig,
    graph: Option<DecoderGraph>,
    adjacency: SparseMatrix,
    t_s: Tensor<T>,
    t_spe: Option<Tensor<T>>,
}

impl<T: Real> Model<T> {
    /// Freshly initialized model. Parameters are drawn in a fixed order
    /// (U-Net, decoder, deformer) from a generator seeded by `cfg.seed`.
    pub fn new(
        cfg: RunConfig,
        bundle: TemplateBundle,
        t_spe_mesh: Option<TriMesh>,
        dims: [usize; 3],
        structures: usize,
    ) -> Result<Self> {
        let mut m = Self::skeleton(cfg, bundle, t_spe_mesh, dims, structures, ModelParams::new(0, ""))?;
        let hash = m.arch_hash();
        let mut p = ModelParams::new(m.cfg.seed, hash);
        let mut rng = ChaCha8Rng::seed_from_u64(m.cfg.seed);
        init_unet(&mut p, &mut rng, &m.unet)?;
        if let Some(g) = &m.graph {
            let bottleneck: usize = m.cfg.model.channels[4] * dims.iter().map(|d| d / 16).product::<usize>();
            // Td uses the decoder output as the mesh itself, so it cannot start at zero.
            let zero_output = m.cfg.mode != TemplateMode::Td;
            init_decoder(&mut p, &mut rng, &m.cfg.model.decoder, bottleneck, g.level_sizes[4], zero_output)?;
        }
        let feature_channels = m.unet.pyramid_channels().iter().sum();
        init_deformer(&mut p, &mut rng, &m.cfg.model.deformer, feature_channels)?;
        m.params = p;
        Ok(m)
    }

    fn skeleton(
        cfg: RunConfig,
        bundle: TemplateBundle,
        t_spe_mesh: Option<TriMesh>,
        dims: [usize; 3],
        structures: usize,
        params: ModelParams<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        check_divisible(dims)?;
        bundle.validate()?;
        let base = bundle.baseline().clone();
        if cfg.mode.needs_specific() {
            let spe = t_spe_mesh
                .as_ref()
                .ok_or_else(|| Error::Config(format!("template mode {} requires a specific template", cfg.mode)))?;
            if spe.faces != base.faces {
                return Err(Error::Topology("specific template does not share the baseline face array".into()));
            }
        }
        let t_spe_mesh = if cfg.mode.needs_specific() { t_spe_mesh } else { None };
        let t_spe = t_spe_mesh.as_ref().map(mesh_to_tensor).transpose()?;
        let graph = cfg.mode.needs_decoder().then(|| DecoderGraph::new(&bundle));
        Ok(Self {
            unet: cfg.unet_config(structures),
            topology: MeshTopology::new(&base)?,
            adjacency: base.build_adjacency(),
            t_s: mesh_to_tensor(&base)?,
            t_spe,
            graph,
            cfg,
            params,
            bundle,
            t_spe_mesh,
            dims,
            structures,
        })
    }

    pub fn arch_hash(&self) -> String {
        self.cfg.arch_hash(self.dims, &self.bundle.level_sizes(), self.structures)
    }

    pub fn baseline(&self) -> &TriMesh {
        self.bundle.baseline()
    }

    pub fn forward(&mut self, vol: &Volume, mode: NormMode) -> Result<Prediction<T>> {
        if vol.dims != self.dims {
            return Err(Error::Config(format!(
                "volume dims {:?} differ from the model's {:?}; each must be a multiple of 16 and match training",
                vol.dims, self.dims
            )));
        }
        let input = volume_tensor::<T>(vol);
        let pyramid = unet_forward(&input, &mut self.params, &self.unet, mode)?;
        let t_d = match &self.graph {
            Some(g) => Some(decode_displacement(pyramid.bottleneck(), g, &self.params)?),
            None => None,
        };
        let initial = compose_template(self.cfg.mode, &self.t_s, self.t_spe.as_ref(), t_d.as_ref())?;
        let trace = deform(&initial, &self.adjacency, &pyramid, &mut self.params, &self.cfg.model.deformer, mode)?;
        Ok(Prediction { pyramid, t_d, trace })
    }

    /// Eval-mode initial template and the four stage meshes.
    pub fn reconstruct(&mut self, vol: &Volume) -> Result<(TriMesh, Vec<TriMesh>)> {
        let pred = self.forward(vol, NormMode::Eval)?;
        let faces = &self.baseline().faces;
        Ok((tensor_to_mesh(&pred.trace.initial, faces)?, pred.trace.stage_meshes(faces)?))
    }

    /// Adam with the feature-extractor and remaining learning rates.
    pub fn optimizer(&self) -> Adam<T> {
        Adam::new(
            AdamConfig::default(),
            self.cfg.lr_rest,
            vec![ParamGroup {
                prefix: crate::features::UNET_PREFIX.into(),
                lr: self.cfg.lr_feature_extractor,
            }],
        )
    }

    /// Write `<stem>.json/.bin` and, beside them, the template this model
    /// was built on.
    pub fn save(&self, stem: &Path, opt: Option<&Adam<T>>, dataset_hash: &str, epoch: usize) -> Result<()> {
        let dir = run_dir_of(stem);
        let tdir = dir.join(TEMPLATE_DIR);
        if !tdir.join("bundle.json").exists() {
            save_template_bundle(&tdir, &self.bundle)?;
        }
        if let Some(m) = &self.t_spe_mesh {
            write_obj(&dir.join(SPECIFIC_FILE), m)?;
        }
        let info = CheckpointInfo {
            run: self.cfg.clone(),
            dims: self.dims,
            structures: self.structures,
            dataset_hash: dataset_hash.into(),
            epoch,
        };
        save_checkpoint(stem, &self.params, opt, serde_json::to_value(info).expect("info serializes"))
    }

    /// Load a checkpoint written by [`Model::save`]. The stored architecture
    /// hash must match what this code derives from the stored config.
    pub fn load(stem: &Path) -> Result<(Self, Option<Adam<T>>, CheckpointInfo)> {
        let json = stem.with_extension("json");
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
        let info: CheckpointInfo =
            serde_json::from_value(manifest.config).map_err(|e| Error::format(&json, e.to_string()))?;
        let dir = run_dir_of(stem);
        let bundle = load_template_bundle(&dir.join(TEMPLATE_DIR))?;
        let spe_path = dir.join(SPECIFIC_FILE);
        let t_spe = if info.run.mode.needs_specific() { Some(read_obj(&spe_path)?) } else { None };
        let mut m = Self::skeleton(info.run.clone(), bundle, t_spe, info.dims, info.structures, ModelParams::new(0, ""))?;
        let ck = load_checkpoint::<T>(stem, Some(&m.arch_hash()))?;
        m.params = ck.params;
        let opt = ck.optimizer.map(|o| {
            let fresh = m.optimizer();
            o.with_hyperparams(fresh.config, fresh.default_lr, fresh.groups)
        });
        Ok((m, opt, info))
    }
}

fn run_dir_of(stem: &Path) -> PathBuf {
    stem.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::TemplateMode;
    use crate::deformer::DeformerConfig;
    use crate::mesh::{build_template_bundle, icosphere, FactorLadder};
    use crate::pipeline::config::ModelConfig;

    fn tiny(mode: TemplateMode) -> Model<f64> {
        let cfg = RunConfig {
            mode,
            model: ModelConfig {
                channels: [2, 2, 2, 2, 2],
                decoder: crate::decoder::DecoderConfig { hidden: 8, latent: 4, gcn_channels: [4, 4, 4] },
                deformer: DeformerConfig { hidden: 4, ..DeformerConfig::default() },
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        };
        let base = icosphere(3);
        let bundle = build_template_bundle(&base, FactorLadder::for_vertex_count(642)).unwrap();
        let spe = base.translated([0.05, 0.0, 0.0]);
        Model::new(cfg, bundle, Some(spe), [16; 3], 1).unwrap()
    }

    fn volume() -> Volume {
        Volume::from_fn([16; 3], |d, h, w| ((d * 7 + h * 3 + w) % 11) as f32 / 11.0).unwrap()
    }

    #[test]
    fn untrained_ta_reproduces_baseline_exactly() {
        let mut m = tiny(TemplateMode::Ta);
        let (init, stages) = m.reconstruct(&volume()).unwrap();
        assert_eq!(&init, m.baseline());
        for s in stages {
            assert_eq!(&s, m.baseline());
        }
    }

    #[test]
    fn untrained_td_is_not_collapsed() {
        let mut m = tiny(TemplateMode::Td);
        let (init, _) = m.reconstruct(&volume()).unwrap();
        assert!((0..init.num_faces()).any(|f| init.face_area(f) > 0.0));
        assert!(init.vertices.iter().any(|v| v != &[0.0; 3]));
    }

    #[test]
    fn ts_mode_has_no_decoder_parameters() {
        let m = tiny(TemplateMode::Ts);
        assert!(m.params.names().iter().all(|n| !n.starts_with("decoder.")));
        let m = tiny(TemplateMode::TspePlusTd);
        assert!(m.params.names().iter().any(|n| n.starts_with("decoder.")));
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny(TemplateMode::TspePlusTd);
        let stem = dir.path().join("best");
        m.save(&stem, None, "d", 0).unwrap();
        let (mut back, _, info) = Model::<f64>::load(&stem).unwrap();
        assert_eq!(info.dataset_hash, "d");
        assert!(back.params.same_values(&m.params));
        assert_eq!(back.reconstruct(&volume()).unwrap(), m.reconstruct(&volume()).unwrap());

        let mut json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
        json["config"]["run"]["model"]["channels"] = serde_json::json!([3, 2, 2, 2, 2]);
        fs::write(stem.with_extension("json"), json.to_string()).unwrap();
        assert!(matches!(Model::<f64>::load(&stem), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_volume_dims_is_config_error() {
        let mut m = tiny(TemplateMode::Ts);
        let v = Volume::from_fn([32; 3], |_, _, _| 0.0).unwrap();
        assert!(matches!(m.reconstruct(&v), Err(Error::Config(_))));
    }
}
