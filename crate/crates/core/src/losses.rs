//! Mesh loss terms, their weighted staged sum and the segmentation loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{cross, dot, norm, scale, sub, TriMesh, Vec3};
use crate::metrics::sample_surface;
use crate::spatial::KdTree;
use crate::tensor::{sparse_matmul, Real, SparseMatrix, Tensor};
use crate::volume::LabelGrid;

/// Weights of the Chamfer, Laplacian, normal and edge terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub chamfer: f64,
    pub laplacian: f64,
    pub normal: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            chamfer: 5.0,
            laplacian: 0.1,
            normal: 0.001,
            edge: 5.0,
        }
    }
}

/// Ground-truth surface samples with normals and a search tree.
#[derive(Clone, Debug)]
pub struct GtSurface {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    tree: KdTree,
}

impl GtSurface {
    pub fn new(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("GtSurface", "no ground-truth points"));
        }
        if normals.len() != points.len() {
            return Err(Error::invalid("GtSurface", "one normal per point is required"));
        }
        let tree = KdTree::new(&points);
        Ok(Self { points, normals, tree })
    }

    /// Area-uniform samples of `mesh` carrying their face normals.
    pub fn sample<R: Rng>(mesh: &TriMesh, count: usize, rng: &mut R) -> Result<Self> {
        let s = sample_surface(mesh, count, rng)?;
        let fnorm = mesh.face_normals().normals;
        let normals = s.faces.iter().map(|&f| fnorm[f]).collect();
        Self::new(s.points, normals)
    }

    /// Vertices of `mesh` with their vertex normals.
    pub fn from_vertices(mesh: &TriMesh) -> Result<Self> {
        Self::new(mesh.vertices.clone(), mesh.vertex_normals().normals)
    }

    pub fn nearest(&self, p: Vec3) -> usize {
        self.tree.nearest(p).expect("non-empty").0
    }
}

fn rows3<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<Vec<Vec3>> {
    match t.shape() {
        [_, 3] => Ok(t.data().chunks_exact(3).map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()]).collect()),
        s => Err(Error::shape(op, "points", format!("expected [P, 3], got {s:?}"))),
    }
}

/// Nearest-neighbour indices in both directions: `pred → gt` and `gt → pred`.
pub fn chamfer_matches(pred: &[Vec3], gt: &GtSurface) -> (Vec<usize>, Vec<usize>) {
    let p2g = pred.iter().map(|&p| gt.nearest(p)).collect();
    let tree = KdTree::new(pred);
    let g2p = gt.points.iter().map(|&g| tree.nearest(g).unwrap().0).collect();
    (p2g, g2p)
}

/// Symmetric squared Chamfer distance, differentiable in `pred: [P, 3]`.
pub fn chamfer<T: Real>(pred: &Tensor<T>, gt: &GtSurface) -> Result<Tensor<T>> {
    let p = rows3(pred, "chamfer")?;
    let (p2g, g2p) = chamfer_matches(&p, gt);
    let (np, ng) = (p.len() as f64, gt.points.len() as f64);
    let d2 = |a: Vec3, b: Vec3| dot(sub(a, b), sub(a, b));
    let fwd: f64 = p.iter().zip(&p2g).map(|(&a, &j)| d2(a, gt.points[j])).sum::<f64>() / np;
    let bwd: f64 = gt.points.iter().zip(&g2p).map(|(&b, &i)| d2(p[i], b)).sum::<f64>() / ng;
    let gpts = gt.points.clone();
    Ok(Tensor::from_op(
        "chamfer",
        vec![1],
        vec![T::from_real(fwd + bwd)],
        vec![pred.clone()],
        move |ctx| {
            let go = ctx.grad[0].as_f64();
            let mut g = vec![0.0f64; p.len() * 3];
            for (i, &j) in p2g.iter().enumerate() {
                for k in 0..3 {
                    g[i * 3 + k] += 2.0 / np * (p[i][k] - gpts[j][k]);
                }
            }
            for (j, &i) in g2p.iter().enumerate() {
                for k in 0..3 {
                    g[i * 3 + k] += 2.0 / ng * (p[i][k] - gpts[j][k]);
                }
            }
            vec![Some(g.into_iter().map(|v| T::from_real(v * go)).collect())]
        },
    ))
}

/// Mean squared edge length over the given undirected edges.
pub fn edge_loss<T: Real>(pred: &Tensor<T>, edges: &[(usize, usize)]) -> Result<Tensor<T>> {
    let p = rows3(pred, "edge_loss")?;
    if edges.is_empty() {
        return Err(Error::invalid("edge_loss", "mesh has no edges"));
    }
    let n = edges.len() as f64;
    let value: f64 = edges.iter().map(|&(a, b)| dot(sub(p[a], p[b]), sub(p[a], p[b]))).sum::<f64>() / n;
    let edges = edges.to_vec();
    Ok(Tensor::from_op("edge_loss", vec![1], vec![T::from_real(value)], vec![pred.clone()], move |ctx| {
        let go = ctx.grad[0].as_f64();
        let mut g = vec![0.0f64; p.len() * 3];
        for &(a, b) in &edges {
            for k in 0..3 {
                let d = 2.0 / n * (p[a][k] - p[b][k]);
                g[a * 3 + k] += d;
                g[b * 3 + k] -= d;
            }
        }
        vec![Some(g.into_iter().map(|v| T::from_real(v * go)).collect())]
    }))
}

/// Mean squared norm of the uniform Laplacian residual, with `laplacian`
/// from [`TriMesh::laplacian_matrix`].
pub fn laplacian_loss<T: Real>(pred: &Tensor<T>, laplacian: &SparseMatrix) -> Result<Tensor<T>> {
    let n = laplacian.rows() as f64;
    Ok(sparse_matmul(laplacian, pred)?.square().sum().scale(1.0 / n))
}

/// Mean `1 − |⟨face normal, paired gt normal⟩|` over non-degenerate faces,
/// pairing each face with the gt sample nearest its centroid. Returns the
/// loss and the number of degenerate faces skipped.
pub fn normal_loss<T: Real>(pred: &Tensor<T>, faces: &[[usize; 3]], gt: &GtSurface) -> Result<(Tensor<T>, usize)> {
    let p = rows3(pred, "normal_loss")?;
    struct Face {
        idx: [usize; 3],
        c: Vec3,
        len: f64,
        gn: Vec3,
    }
    let mut used = Vec::with_capacity(faces.len());
    let mut degenerate = 0;
    for f in faces {
        let c = cross(sub(p[f[1]], p[f[0]]), sub(p[f[2]], p[f[0]]));
        let len = norm(c);
        if !(len > 1e-12) {
            degenerate += 1;
            continue;
        }
        let centroid = scale([0, 1, 2].iter().fold([0.0; 3], |acc, &k| crate::mesh::add(acc, p[f[k]])), 1.0 / 3.0);
        used.push(Face {
            idx: *f,
            c,
            len,
            gn: gt.normals[gt.nearest(centroid)],
        });
    }
    if used.is_empty() {
        return Err(Error::Numeric("normal_loss: every face is degenerate".into()));
    }
    let m = used.len() as f64;
    let value: f64 = used.iter().map(|f| 1.0 - (dot(f.c, f.gn) / f.len).abs()).sum::<f64>() / m;
    let nv = p.len();
    let out = Tensor::from_op("normal_loss", vec![1], vec![T::from_real(value)], vec![pred.clone()], move |ctx| {
        let go = ctx.grad[0].as_f64();
        let mut g = vec![0.0f64; nv * 3];
        for f in &used {
            let n = scale(f.c, 1.0 / f.len);
            let s = dot(n, f.gn);
            if s == 0.0 {
                continue;
            }
            // d(1 − |s|)/dc = −sign(s) (gn − n s) / |c|
            let gc = scale(sub(f.gn, scale(n, s)), -s.signum() / f.len / m);
            let [a, b, c] = f.idx;
            let u = sub(p[b], p[a]);
            let v = sub(p[c], p[a]);
            let gu = cross(v, gc);
            let gv = cross(gc, u);
            for k in 0..3 {
                g[b * 3 + k] += gu[k];
                g[c * 3 + k] += gv[k];
                g[a * 3 + k] -= gu[k] + gv[k];
            }
        }
        vec![Some(g.into_iter().map(|v| T::from_real(v * go)).collect())]
    });
    Ok((out, degenerate))
}

/// Fixed per-topology inputs of the mesh loss.
#[derive(Clone, Debug)]
pub struct MeshTopology {
    pub faces: Vec<[usize; 3]>,
    pub edges: Vec<(usize, usize)>,
    pub laplacian: SparseMatrix,
}

impl MeshTopology {
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        Ok(Self {
            faces: mesh.faces.clone(),
            edges: mesh.edges(),
            laplacian: mesh.laplacian_matrix()?,
        })
    }
}

/// Unweighted term values for one stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub chamfer: f64,
    pub laplacian: f64,
    pub normal: f64,
    pub edge: f64,
}

#[derive(Clone, Debug)]
pub struct MeshLoss<T: Real> {
    pub total: Tensor<T>,
    pub stages: Vec<LossTerms>,
    pub degenerate_faces: usize,
}

impl<T: Real> MeshLoss<T> {
    /// Sum of each term over stages.
    pub fn summed(&self) -> LossTerms {
        let mut t = LossTerms::default();
        for s in &self.stages {
            t.chamfer += s.chamfer;
            t.laplacian += s.laplacian;
            t.normal += s.normal;
            t.edge += s.edge;
        }
        t
    }
}

/// Weighted loss summed with equal weight over every stage mesh.
pub fn mesh_loss<T: Real>(
    stages: &[Tensor<T>],
    topo: &MeshTopology,
    gt: &GtSurface,
    w: &LossWeights,
) -> Result<MeshLoss<T>> {
    if stages.is_empty() {
        return Err(Error::invalid("mesh_loss", "no stages"));
    }
    let mut total: Option<Tensor<T>> = None;
    let mut terms = Vec::with_capacity(stages.len());
    let mut degenerate_faces = 0;
    for s in stages {
        let cd = chamfer(s, gt)?;
        let lap = laplacian_loss(s, &topo.laplacian)?;
        let (nl, deg) = normal_loss(s, &topo.faces, gt)?;
        let el = edge_loss(s, &topo.edges)?;
        degenerate_faces += deg;
        terms.push(LossTerms {
            chamfer: cd.item().as_f64(),
            laplacian: lap.item().as_f64(),
            normal: nl.item().as_f64(),
            edge: el.item().as_f64(),
        });
        let stage = cd
            .scale(w.chamfer)
            .add(&lap.scale(w.laplacian))?
            .add(&nl.scale(w.normal))?
            .add(&el.scale(w.edge))?;
        total = Some(match total {
            Some(t) => t.add(&stage)?,
            None => stage,
        });
    }
    Ok(MeshLoss {
        total: total.unwrap(),
        stages: terms,
        degenerate_faces,
    })
}

/// Mean voxelwise softmax cross-entropy of `logits: [1, C, D, H, W]`.
pub fn seg_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &LabelGrid) -> Result<Tensor<T>> {
    let s = logits.shape();
    let (c, dims) = match s {
        [1, c, d, h, w] => (*c, [*d, *h, *w]),
        _ => return Err(Error::shape("seg_cross_entropy", "logits", format!("expected [1, C, D, H, W], got {s:?}"))),
    };
    if dims != labels.dims {
        return Err(Error::shape(
            "seg_cross_entropy",
            "spatial dims",
            format!("logits {dims:?} vs labels {:?}", labels.dims),
        ));
    }
    if let Some(&bad) = labels.labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::invalid("seg_cross_entropy", format!("label {bad} out of range for {c} classes")));
    }
    let plane = dims.iter().product::<usize>();
    let x = logits.data();
    let mut probs = vec![0.0f64; c * plane];
    let mut loss = 0.0;
    for v in 0..plane {
        let mx = (0..c).map(|k| x[k * plane + v].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (x[k * plane + v].as_f64() - mx).exp()).sum();
        for k in 0..c {
            probs[k * plane + v] = (x[k * plane + v].as_f64() - mx).exp() / z;
        }
        let y = labels.labels[v] as usize;
        loss += z.ln() + mx - x[y * plane + v].as_f64();
    }
    let n = plane as f64;
    let lab = labels.labels.clone();
    Ok(Tensor::from_op(
        "seg_cross_entropy",
        vec![1],
        vec![T::from_real(loss / n)],
        vec![logits.clone()],
        move |ctx| {
            let go = ctx.grad[0].as_f64() / n;
            let mut g: Vec<T> = probs.iter().map(|&p| T::from_real(p * go)).collect();
            for (v, &y) in lab.iter().enumerate() {
                g[y as usize * plane + v] -= T::from_real(go);
            }
            vec![Some(g)]
        },
    ))
}
