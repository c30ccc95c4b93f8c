//! Indexed triangle meshes and the geometric operators built on them.

mod bundle;
mod decimate;
mod icosphere;
mod io;
mod marching_cubes;
mod mc_tables;
mod smooth;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::tensor::SparseMatrix;

pub use bundle::{
    build_template_bundle, load_template_bundle, save_template_bundle, FactorLadder, TemplateBundle, BUNDLE_MAGIC,
    MIN_LEVEL_VERTICES, FULL_SCALE_FACTORS,
};
pub use decimate::{decimate, Decimation};
pub use icosphere::icosphere;
pub use io::{read_obj, write_obj};
pub use marching_cubes::marching_cubes;
pub use smooth::taubin_smooth;

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Indexed triangle mesh with counter-clockwise faces.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

/// Normals together with the number of zero-area faces that were skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Normals {
    pub normals: Vec<Vec3>,
    pub degenerate_faces: usize,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::Mesh(format!("face {fi} {f:?} references vertex >= {n}")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Mesh(format!("face {fi} {f:?} repeats a vertex")));
            }
        }
        if let Some(i) = vertices.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::Mesh(format!("vertex {i} is not finite")));
        }
        Ok(Self { vertices, faces })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Same faces, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Topology(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
        })
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }

    /// Sorted neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.vertices.len()];
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                nb[a].insert(b);
                nb[b].insert(a);
            }
        }
        nb.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges().len() as i64 + self.faces.len() as i64
    }

    /// Fails unless every edge borders exactly two faces with opposite
    /// orientation and every vertex has a single disk-shaped fan.
    pub fn validate_closed_manifold(&self) -> Result<()> {
        if self.faces.is_empty() {
            return Err(Error::NonManifold("mesh has no faces".into()));
        }
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &c) in &directed {
            if c != 1 {
                return Err(Error::NonManifold(format!("directed edge ({a}, {b}) used {c} times")));
            }
            if !directed.contains_key(&(b, a)) {
                return Err(Error::NonManifold(format!("edge ({a}, {b}) is a boundary edge")));
            }
        }
        // Each vertex: the link edges (opposite edges of incident faces) must form one cycle.
        let mut link: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.vertices.len()];
        for f in &self.faces {
            for k in 0..3 {
                link[f[k]].push((f[(k + 1) % 3], f[(k + 2) % 3]));
            }
        }
        for (v, edges) in link.iter().enumerate() {
            if edges.is_empty() {
                continue;
            }
            let next: HashMap<usize, usize> = edges.iter().copied().collect();
            if next.len() != edges.len() {
                return Err(Error::NonManifold(format!("vertex {v} has a pinched fan")));
            }
            let start = edges[0].0;
            let mut cur = start;
            let mut steps = 0;
            loop {
                cur = match next.get(&cur) {
                    Some(&n) => n,
                    None => return Err(Error::NonManifold(format!("vertex {v} fan is open"))),
                };
                steps += 1;
                if cur == start || steps > edges.len() {
                    break;
                }
            }
            if steps != edges.len() {
                return Err(Error::NonManifold(format!("vertex {v} has more than one fan")));
            }
        }
        Ok(())
    }

    /// Vertices with no incident face.
    pub fn isolated_vertices(&self) -> Vec<usize> {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &i in f {
                used[i] = true;
            }
        }
        used.iter().enumerate().filter(|(_, &u)| !u).map(|(i, _)| i).collect()
    }

    fn face_cross(&self, f: &[usize; 3]) -> Vec3 {
        let [a, b, c] = [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]];
        cross(sub(b, a), sub(c, a))
    }

    pub fn face_area(&self, fi: usize) -> f64 {
        0.5 * norm(self.face_cross(&self.faces[fi]))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Signed enclosed volume (positive for outward-oriented closed meshes).
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| dot(self.vertices[f[0]], cross(self.vertices[f[1]], self.vertices[f[2]])) / 6.0)
            .sum()
    }

    pub fn face_centroid(&self, fi: usize) -> Vec3 {
        let f = self.faces[fi];
        let s = add(add(self.vertices[f[0]], self.vertices[f[1]]), self.vertices[f[2]]);
        scale(s, 1.0 / 3.0)
    }

    /// Unit face normals; zero-area faces get a zero vector and are counted.
    pub fn face_normals(&self) -> Normals {
        let mut degenerate = 0;
        let normals = self
            .faces
            .iter()
            .map(|f| {
                let c = self.face_cross(f);
                let n = norm(c);
                if n <= f64::EPSILON * 1e-3 {
                    degenerate += 1;
                    [0.0; 3]
                } else {
                    scale(c, 1.0 / n)
                }
            })
            .collect();
        Normals {
            normals,
            degenerate_faces: degenerate,
        }
    }

    /// Area-weighted unit vertex normals.
    pub fn vertex_normals(&self) -> Normals {
        let mut acc = vec![[0.0; 3]; self.vertices.len()];
        let mut degenerate = 0;
        for f in &self.faces {
            let c = self.face_cross(f);
            if norm(c) <= f64::EPSILON * 1e-3 {
                degenerate += 1;
                continue;
            }
            // |c| is twice the area, so summing c weights by area.
            for &i in f {
                acc[i] = add(acc[i], c);
            }
        }
        let normals = acc
            .into_iter()
            .map(|n| {
                let l = norm(n);
                if l > 0.0 {
                    scale(n, 1.0 / l)
                } else {
                    [0.0; 3]
                }
            })
            .collect();
        Normals {
            normals,
            degenerate_faces: degenerate,
        }
    }

    /// Symmetric-normalized adjacency with self loops, `D^-1/2 (A + I) D^-1/2`.
    pub fn build_adjacency(&self) -> SparseMatrix {
        let nb = self.neighbors();
        let deg: Vec<f64> = nb.iter().map(|n| (n.len() + 1) as f64).collect();
        let mut trip = Vec::with_capacity(self.vertices.len() + nb.iter().map(Vec::len).sum::<usize>());
        for (i, n) in nb.iter().enumerate() {
            trip.push((i, i, 1.0 / deg[i]));
            for &j in n {
                trip.push((i, j, 1.0 / (deg[i] * deg[j]).sqrt()));
            }
        }
        SparseMatrix::from_triplets(self.vertices.len(), self.vertices.len(), trip).expect("indices in range")
    }

    /// Uniform Laplacian operator `I - D^-1 A`; applied to the vertex array it
    /// gives each vertex minus the mean of its neighbors.
    pub fn laplacian_matrix(&self) -> Result<SparseMatrix> {
        let nb = self.neighbors();
        if let Some(i) = nb.iter().position(Vec::is_empty) {
            return Err(Error::Mesh(format!("vertex {i} has no neighbors")));
        }
        let mut trip = Vec::new();
        for (i, n) in nb.iter().enumerate() {
            trip.push((i, i, 1.0));
            let w = 1.0 / n.len() as f64;
            for &j in n {
                trip.push((i, j, -w));
            }
        }
        SparseMatrix::from_triplets(self.vertices.len(), self.vertices.len(), trip)
    }

    /// `v_i - mean(neighbors of v_i)` for every vertex.
    pub fn laplacian_residual(&self) -> Result<Vec<Vec3>> {
        let nb = self.neighbors();
        nb.iter()
            .enumerate()
            .map(|(i, n)| {
                if n.is_empty() {
                    return Err(Error::Mesh(format!("vertex {i} has no neighbors")));
                }
                let mut m = [0.0; 3];
                for &j in n {
                    m = add(m, self.vertices[j]);
                }
                Ok(sub(self.vertices[i], scale(m, 1.0 / n.len() as f64)))
            })
            .collect()
    }

    /// Split into connected components (by shared vertices), ordered by their
    /// smallest vertex index. Vertex order inside each component is preserved.
    pub fn connected_components(&self) -> Vec<TriMesh> {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for f in &self.faces {
            for k in 1..3 {
                let (a, b) = (find(&mut parent, f[0]), find(&mut parent, f[k]));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for v in 0..n {
            let r = find(&mut parent, v);
            groups.entry(r).or_default().push(v);
        }
        let mut order: Vec<Vec<usize>> = groups.into_values().collect();
        order.sort_by_key(|g| g[0]);
        let mut which = vec![(0usize, 0usize); n];
        for (c, g) in order.iter().enumerate() {
            for (local, &v) in g.iter().enumerate() {
                which[v] = (c, local);
            }
        }
        let mut out: Vec<TriMesh> = order
            .iter()
            .map(|g| TriMesh {
                vertices: g.iter().map(|&v| self.vertices[v]).collect(),
                faces: Vec::new(),
            })
            .collect();
        for f in &self.faces {
            let c = which[f[0]].0;
            out[c].faces.push([which[f[0]].1, which[f[1]].1, which[f[2]].1]);
        }
        out
    }

    /// Disjoint union; vertex indices of later meshes are offset.
    pub fn union(meshes: &[TriMesh]) -> TriMesh {
        let mut out = TriMesh::empty();
        for m in meshes {
            let off = out.vertices.len();
            out.vertices.extend_from_slice(&m.vertices);
            out.faces.extend(m.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
        }
        out
    }

    pub fn translated(&self, t: Vec3) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|&v| add(v, t)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Faces with reversed winding.
    pub fn flipped(&self) -> TriMesh {
        TriMesh {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(),
        }
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (
                [lo[0].min(v[0]), lo[1].min(v[1]), lo[2].min(v[2])],
                [hi[0].max(v[0]), hi[1].max(v[1]), hi[2].max(v[2])],
            )
        }))
    }

    /// Flattened `[V * 3]` coordinates.
    pub fn flat_vertices(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|v| v.iter().copied()).collect()
    }
}

/// Vertex-wise mean of meshes that share one face array.
pub fn mean_template(meshes: &[TriMesh]) -> Result<TriMesh> {
    let first = meshes
        .first()
        .ok_or_else(|| Error::Topology("no meshes to average".into()))?;
    let offenders: Vec<usize> = meshes
        .iter()
        .enumerate()
        .filter(|(_, m)| m.faces != first.faces || m.vertices.len() != first.vertices.len())
        .map(|(i, _)| i)
        .collect();
    if !offenders.is_empty() {
        return Err(Error::Topology(format!(
            "meshes {offenders:?} do not share the topology of mesh 0"
        )));
    }
    let n = meshes.len() as f64;
    let mut acc = vec![[0.0; 3]; first.vertices.len()];
    for m in meshes {
        for (a, v) in acc.iter_mut().zip(&m.vertices) {
            *a = add(*a, *v);
        }
    }
    Ok(TriMesh {
        vertices: acc.into_iter().map(|v| scale(v, 1.0 / n)).collect(),
        faces: first.faces.clone(),
    })
}
