//! GCN mesh decoder producing the displacement mesh `T_d` from the
//! bottleneck feature, and the template composition modes.
//!
//! `flatten(X4) → FC → latent → FC → coarsest-level coordinates`, then four
//! blocks of (sparse upsampling, graph convolution, activation) walk the
//! template hierarchy back to the baseline resolution. The final graph
//! convolution is zero-initialized and has no activation, so an untrained
//! decoder outputs exactly zero displacement.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{TemplateBundle, TriMesh};
use crate::tensor::{kaiming_uniform, linear, sparse_matmul, ModelParams, Real, SparseMatrix, Tensor};

pub const DECODER_PREFIX: &str = "decoder.";

/// Which mesh initializes the deformation (ablation axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateMode {
    /// Baseline template only.
    Ts,
    /// A specific training mesh.
    Tspe,
    /// The decoded displacement used directly as the mesh.
    Td,
    /// Specific mesh plus decoded displacement.
    TspePlusTd,
    /// Adaptive template: baseline plus decoded displacement.
    Ta,
}

impl TemplateMode {
    pub const ALL: [TemplateMode; 5] = [Self::Ts, Self::Tspe, Self::Td, Self::TspePlusTd, Self::Ta];

    pub fn needs_decoder(self) -> bool {
        matches!(self, Self::Td | Self::TspePlusTd | Self::Ta)
    }

    pub fn needs_specific(self) -> bool {
        matches!(self, Self::Tspe | Self::TspePlusTd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ts => "Ts",
            Self::Tspe => "Tspe",
            Self::Td => "Td",
            Self::TspePlusTd => "TspePlusTd",
            Self::Ta => "Ta",
        }
    }
}

impl fmt::Display for TemplateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown template mode {s:?}; expected one of Ts, Tspe, Td, TspePlusTd, Ta")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub latent: usize,
    /// Widths after the first three upsampling blocks; the last emits 3.
    pub gcn_channels: [usize; 3],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            latent: 128,
            gcn_channels: [32, 32, 32],
        }
    }
}

/// Fixed operators of the template hierarchy used by the decoder.
#[derive(Clone, Debug)]
pub struct DecoderGraph {
    pub level_sizes: Vec<usize>,
    /// `up[k]` maps level `k + 1` to level `k`.
    pub up: Vec<SparseMatrix>,
    /// Normalized adjacency of every level.
    pub adjacency: Vec<SparseMatrix>,
}

impl DecoderGraph {
    pub fn new(bundle: &TemplateBundle) -> Self {
        Self {
            level_sizes: bundle.level_sizes(),
            up: bundle.up.clone(),
            adjacency: bundle.levels.iter().map(|m| m.build_adjacency()).collect(),
        }
    }
}

/// One propagation step `Â · X · Wᵀ + b`.
pub fn graph_conv<T: Real>(
    x: &Tensor<T>,
    adjacency: &SparseMatrix,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    sparse_matmul(adjacency, &linear(x, weight, None)?)?.add_row_bias(bias)
}

fn gcn_widths(cfg: &DecoderConfig) -> [(usize, usize); 4] {
    let g = cfg.gcn_channels;
    [(3, g[0]), (g[0], g[1]), (g[1], g[2]), (g[2], 3)]
}

/// Register decoder parameters for a bottleneck of `x4_len` scalars. With
/// `zero_output` the last graph conv starts at zero, so `T_d = 0`.
pub fn init_decoder<T: Real, R: Rng>(
    p: &mut ModelParams<T>,
    rng: &mut R,
    cfg: &DecoderConfig,
    x4_len: usize,
    coarsest: usize,
    zero_output: bool,
) -> Result<()> {
    let fc = [(x4_len, cfg.hidden), (cfg.hidden, cfg.latent), (cfg.latent, coarsest * 3)];
    for (i, &(fin, fout)) in fc.iter().enumerate() {
        p.insert(format!("decoder.fc{i}.w"), kaiming_uniform(rng, &[fout, fin], fin))?;
        p.insert(format!("decoder.fc{i}.b"), Tensor::zeros(&[fout]))?;
    }
    for (i, &(fin, fout)) in gcn_widths(cfg).iter().enumerate() {
        let w = if i == 3 && zero_output {
            Tensor::zeros(&[fout, fin])
        } else {
            kaiming_uniform(rng, &[fout, fin], fin)
        };
        p.insert(format!("decoder.gcn{i}.w"), w)?;
        p.insert(format!("decoder.gcn{i}.b"), Tensor::zeros(&[fout]))?;
    }
    Ok(())
}

/// `T_d = Dec(X4)` as a `[N, 3]` displacement in baseline vertex order.
pub fn decode_displacement<T: Real>(
    x4: &Tensor<T>,
    graph: &DecoderGraph,
    p: &ModelParams<T>,
) -> Result<Tensor<T>> {
    if graph.level_sizes.len() != 5 || graph.up.len() != 4 {
        return Err(Error::Mesh("decoder needs a 5-level template hierarchy".into()));
    }
    let coarsest = graph.level_sizes[4];
    let out_b = p.get("decoder.fc2.b")?;
    if out_b.numel() != coarsest * 3 {
        return Err(Error::shape(
            "decode_displacement",
            "coarsest level",
            format!("parameters expect {} vertices, template has {coarsest}", out_b.numel() / 3),
        ));
    }
    let mut h = x4.reshape(&[1, x4.numel()])?;
    for i in 0..3 {
        h = linear(&h, p.get(&format!("decoder.fc{i}.w"))?, Some(p.get(&format!("decoder.fc{i}.b"))?))?;
        if i < 2 {
            h = h.relu();
        }
    }
    let mut x = h.reshape(&[coarsest, 3])?;
    for (i, k) in (0..4).rev().enumerate() {
        x = sparse_matmul(&graph.up[k], &x)?;
        x = graph_conv(
            &x,
            &graph.adjacency[k],
            p.get(&format!("decoder.gcn{i}.w"))?,
            p.get(&format!("decoder.gcn{i}.b"))?,
        )?;
        if i < 3 {
            x = x.relu();
        }
    }
    Ok(x)
}

/// Initial mesh coordinates `[N, 3]` for the chosen mode.
pub fn compose_template<T: Real>(
    mode: TemplateMode,
    t_s: &Tensor<T>,
    t_spe: Option<&Tensor<T>>,
    t_d: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let need = |t: Option<&Tensor<T>>, what: &str| {
        t.cloned()
            .ok_or_else(|| Error::Config(format!("template mode {mode} requires {what}")))
    };
    match mode {
        TemplateMode::Ts => Ok(t_s.clone()),
        TemplateMode::Tspe => need(t_spe, "a specific template"),
        TemplateMode::Td => need(t_d, "the mesh decoder"),
        TemplateMode::TspePlusTd => need(t_spe, "a specific template")?.add(&need(t_d, "the mesh decoder")?),
        TemplateMode::Ta => t_s.add(&need(t_d, "the mesh decoder")?),
    }
}

/// Mesh-level [`compose_template`]; faces are taken from `t_s`.
pub fn compose_template_mesh(
    mode: TemplateMode,
    t_s: &TriMesh,
    t_spe: Option<&TriMesh>,
    t_d: Option<&TriMesh>,
) -> Result<TriMesh> {
    for m in [t_spe, t_d].into_iter().flatten() {
        if m.faces != t_s.faces {
            return Err(Error::Topology("template meshes must share the baseline face array".into()));
        }
    }
    let as_t = |m: &TriMesh| Tensor::<f64>::new(&[m.num_vertices(), 3], m.flat_vertices());
    let t_spe_t = t_spe.map(as_t).transpose()?;
    let t_d_t = t_d.map(as_t).transpose()?;
    let out = compose_template(mode, &as_t(t_s)?, t_spe_t.as_ref(), t_d_t.as_ref())?;
    t_s.with_vertices(out.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_template_bundle, icosphere, FactorLadder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (DecoderGraph, ModelParams<f64>) {
        let b = build_template_bundle(&icosphere(3), FactorLadder::for_vertex_count(642)).unwrap();
        let g = DecoderGraph::new(&b);
        let mut p = ModelParams::new(0, "t");
        init_decoder(&mut p, &mut ChaCha8Rng::seed_from_u64(4), &DecoderConfig::default(), 16, g.level_sizes[4], true).unwrap();
        (g, p)
    }

    #[test]
    fn zero_final_layer_gives_zero_displacement() {
        let (g, p) = toy();
        let x4 = Tensor::new(&[1, 2, 2, 2, 2], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let td = decode_displacement(&x4, &g, &p).unwrap();
        assert_eq!(td.shape(), &[642, 3]);
        assert!(td.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mode_parsing_and_requirements() {
        assert_eq!("ta".parse::<TemplateMode>().unwrap(), TemplateMode::Ta);
        assert!("Tx".parse::<TemplateMode>().is_err());
        let ts = Tensor::<f64>::new(&[2, 3], vec![1.0; 6]).unwrap();
        assert!(compose_template(TemplateMode::Ta, &ts, None, None).is_err());
        assert_eq!(compose_template(TemplateMode::Ts, &ts, None, None).unwrap().to_vec(), vec![1.0; 6]);
    }

    #[test]
    fn composition_matches_elementwise_addition() {
        let m = icosphere(1);
        let spe = m.translated([0.1, 0.0, 0.0]);
        let d = m.with_vertices(m.vertices.iter().map(|v| [v[2] * 0.3, -v[0], 0.25]).collect()).unwrap();
        let out = compose_template_mesh(TemplateMode::TspePlusTd, &m, Some(&spe), Some(&d)).unwrap();
        for i in 0..m.num_vertices() {
            for k in 0..3 {
                assert_eq!(out.vertices[i][k], spe.vertices[i][k] + d.vertices[i][k]);
            }
        }
        let zero = m.with_vertices(vec![[0.0; 3]; m.num_vertices()]).unwrap();
        assert_eq!(compose_template_mesh(TemplateMode::Ta, &m, None, Some(&zero)).unwrap(), m);
    }
}
