//! Staged GCN deformation of the initial template toward the target surface.
//!
//! Each of the four blocks samples the feature pyramid at the current vertex
//! positions, appends the coordinates, runs three graph convolutions (each
//! followed by batch norm and ReLU) and adds a projected 3-vector
//! displacement to the coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::graph_conv;
use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::mesh::TriMesh;
use crate::tensor::{batchnorm, concat, kaiming_uniform, linear, BatchNormState, ModelParams, NormMode, Real, SparseMatrix, Tensor};
use crate::vol2pc::map_pyramid;

pub const DEFORMER_PREFIX: &str = "deformer.";
pub const NUM_STAGES: usize = 4;
const LAYERS_PER_BLOCK: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformerConfig {
    pub hidden: usize,
    /// Resample features at every stage's current positions rather than
    /// once at the initial template.
    pub resample_per_stage: bool,
}

impl Default for DeformerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            resample_per_stage: true,
        }
    }
}

/// Initial template and the four stage outputs, all `[N, 3]`.
#[derive(Clone, Debug)]
pub struct DeformationTrace<T: Real> {
    pub initial: Tensor<T>,
    pub stages: Vec<Tensor<T>>,
}

/// Vertex coordinates of a `[N, 3]` tensor as a mesh with the given faces.
pub fn tensor_to_mesh<T: Real>(coords: &Tensor<T>, faces: &[[usize; 3]]) -> Result<TriMesh> {
    let v = coords.data().chunks_exact(3).map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()]).collect();
    TriMesh::new(v, faces.to_vec())
}

pub fn mesh_to_tensor<T: Real>(mesh: &TriMesh) -> Result<Tensor<T>> {
    let data = mesh.flat_vertices().into_iter().map(T::from_real).collect();
    Tensor::new(&[mesh.num_vertices(), 3], data)
}

impl<T: Real> DeformationTrace<T> {
    pub fn stage_meshes(&self, faces: &[[usize; 3]]) -> Result<Vec<TriMesh>> {
        self.stages.iter().map(|s| tensor_to_mesh(s, faces)).collect()
    }
}

pub fn init_deformer<T: Real, R: Rng>(
    p: &mut ModelParams<T>,
    rng: &mut R,
    cfg: &DeformerConfig,
    feature_channels: usize,
) -> Result<()> {
    let h = cfg.hidden;
    for b in 0..NUM_STAGES {
        let mut fin = 3 + feature_channels;
        for l in 0..LAYERS_PER_BLOCK {
            let name = format!("deformer.b{b}.gcn{l}");
            p.insert(format!("{name}.w"), kaiming_uniform(rng, &[h, fin], fin))?;
            p.insert(format!("{name}.b"), Tensor::zeros(&[h]))?;
            let bn = format!("deformer.b{b}.bn{l}");
            p.insert(format!("{bn}.gamma"), Tensor::full(&[h], T::one()))?;
            p.insert(format!("{bn}.beta"), Tensor::zeros(&[h]))?;
            p.insert_norm(bn, BatchNormState::new(h))?;
            fin = h;
        }
        p.insert(format!("deformer.b{b}.proj.w"), Tensor::zeros(&[3, h]))?;
        p.insert(format!("deformer.b{b}.proj.b"), Tensor::zeros(&[3]))?;
    }
    Ok(())
}

/// Run the four deformation blocks starting from `template: [N, 3]`.
pub fn deform<T: Real>(
    template: &Tensor<T>,
    adjacency: &SparseMatrix,
    pyr: &FeaturePyramid<T>,
    p: &mut ModelParams<T>,
    cfg: &DeformerConfig,
    mode: NormMode,
) -> Result<DeformationTrace<T>> {
    let n = adjacency.rows();
    if template.shape() != [n, 3] {
        return Err(Error::Topology(format!(
            "template has shape {:?}, adjacency expects [{n}, 3]",
            template.shape()
        )));
    }
    let mut coords = template.clone();
    let once = if cfg.resample_per_stage { None } else { Some(map_pyramid(pyr, template)?.concat) };
    let mut stages = Vec::with_capacity(NUM_STAGES);
    for b in 0..NUM_STAGES {
        let feats = match &once {
            Some(f) => f.clone(),
            None => map_pyramid(pyr, &coords)?.concat,
        };
        let mut h = concat(&[coords.clone(), feats], 1)?;
        for l in 0..LAYERS_PER_BLOCK {
            let name = format!("deformer.b{b}.gcn{l}");
            h = graph_conv(&h, adjacency, p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?)?;
            let bn = format!("deformer.b{b}.bn{l}");
            let gamma = p.get(&format!("{bn}.gamma"))?.clone();
            let beta = p.get(&format!("{bn}.beta"))?.clone();
            h = batchnorm(&h, &gamma, &beta, p.norm_mut(&bn)?, mode)?.relu();
        }
        let disp = linear(
            &h,
            p.get(&format!("deformer.b{b}.proj.w"))?,
            Some(p.get(&format!("deformer.b{b}.proj.b"))?),
        )?;
        coords = coords.add(&disp)?;
        stages.push(coords.clone());
    }
    Ok(DeformationTrace {
        initial: template.clone(),
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{init_unet, unet_forward, UnetConfig};
    use crate::mesh::icosphere;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_projection_keeps_template() {
        let cfg = UnetConfig {
            channels: [2, 2, 2, 2, 2],
            ..UnetConfig::default()
        };
        let mut p = ModelParams::<f32>::new(0, "t");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_unet(&mut p, &mut rng, &cfg).unwrap();
        let dcfg = DeformerConfig {
            hidden: 8,
            ..DeformerConfig::default()
        };
        init_deformer(&mut p, &mut rng, &dcfg, 18).unwrap();
        let input = Tensor::new(&[1, 1, 16, 16, 16], (0..4096).map(|i| (i % 5) as f32 / 5.0).collect()).unwrap();
        let pyr = unet_forward(&input, &mut p, &cfg, NormMode::Train).unwrap();
        let m = icosphere(1);
        let t = mesh_to_tensor::<f32>(&m.translated([0.0; 3])).unwrap();
        let trace = deform(&t, &m.build_adjacency(), &pyr, &mut p, &dcfg, NormMode::Train).unwrap();
        assert_eq!(trace.stages.len(), 4);
        for s in trace.stage_meshes(&m.faces).unwrap() {
            assert_eq!(s.faces, m.faces);
            assert_eq!(s.flat_vertices(), mesh_to_tensor::<f32>(&m).unwrap().data().iter().map(|&v| v as f64).collect::<Vec<_>>());
        }
    }
}
