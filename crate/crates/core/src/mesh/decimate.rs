//! Quadric-error half-edge-collapse simplification with sampling matrices.
//!
//! Every collapse moves one vertex onto a neighbour, so the coarse mesh is a
//! subset of the fine vertices at their original positions. The down matrix
//! selects those kept vertices; the up matrix reproduces kept vertices
//! exactly and places each removed vertex by barycentric interpolation inside
//! the coarse triangle nearest to its original position.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use super::{cross, dot, norm, sub, TriMesh, Vec3};
use crate::error::{Error, Result};
use crate::spatial::TriangleBvh;
use crate::tensor::SparseMatrix;

/// Result of [`decimate`].
#[derive(Clone, Debug)]
pub struct Decimation {
    pub mesh: TriMesh,
    /// `[coarse, fine]` selection of kept vertices.
    pub down: SparseMatrix,
    /// `[fine, coarse]` interpolation; rows sum to one.
    pub up: SparseMatrix,
    /// Fine index of each coarse vertex.
    pub kept: Vec<usize>,
}

type Quadric = [f64; 10];

fn plane_quadric(n: Vec3, d: f64, w: f64) -> Quadric {
    let [a, b, c] = n;
    [
        w * a * a,
        w * a * b,
        w * a * c,
        w * a * d,
        w * b * b,
        w * b * c,
        w * b * d,
        w * c * c,
        w * c * d,
        w * d * d,
    ]
}

fn quadric_error(q: &Quadric, p: Vec3) -> f64 {
    let [x, y, z] = p;
    q[0] * x * x + 2.0 * q[1] * x * y + 2.0 * q[2] * x * z + 2.0 * q[3] * x + q[4] * y * y + 2.0 * q[5] * y * z
        + 2.0 * q[6] * y
        + q[7] * z * z
        + 2.0 * q[8] * z
        + q[9]
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    cost: f64,
    from: usize,
    to: usize,
    stamp_from: u32,
    stamp_to: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Min-heap on (cost, from, to).
    fn cmp(&self, o: &Self) -> Ordering {
        o.cost
            .total_cmp(&self.cost)
            .then(o.from.cmp(&self.from))
            .then(o.to.cmp(&self.to))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

struct State<'a> {
    pos: &'a [Vec3],
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vert_faces: Vec<BTreeSet<usize>>,
    alive: Vec<bool>,
    quadrics: Vec<Quadric>,
    stamp: Vec<u32>,
}

impl State<'_> {
    fn neighbors(&self, v: usize) -> BTreeSet<usize> {
        let mut s = BTreeSet::new();
        for &f in &self.vert_faces[v] {
            for &w in &self.faces[f] {
                if w != v {
                    s.insert(w);
                }
            }
        }
        s
    }

    fn candidate(&self, from: usize, to: usize) -> Candidate {
        let mut q = self.quadrics[from];
        for (a, b) in q.iter_mut().zip(&self.quadrics[to]) {
            *a += b;
        }
        // Small length term keeps collapses local on flat/spherical regions
        // where the quadric error is nearly zero everywhere.
        let len2 = dot(sub(self.pos[from], self.pos[to]), sub(self.pos[from], self.pos[to]));
        Candidate {
            cost: quadric_error(&q, self.pos[to]).max(0.0) + 1e-6 * len2,
            from,
            to,
            stamp_from: self.stamp[from],
            stamp_to: self.stamp[to],
        }
    }

    /// Topological and geometric admissibility of moving `from` onto `to`.
    fn can_collapse(&self, from: usize, to: usize) -> bool {
        let nf = self.neighbors(from);
        if !nf.contains(&to) {
            return false;
        }
        let nt = self.neighbors(to);
        let common: Vec<usize> = nf.intersection(&nt).copied().collect();
        if common.len() != 2 {
            return false;
        }
        // Removing the two shared faces lowers the valence of the common
        // neighbours; valence 3 would become 2 (a doubled face).
        if common.iter().any(|&c| self.neighbors(c).len() <= 3) {
            return false;
        }
        if nf.len() + nt.len() - 2 < 3 + 2 {
            return false;
        }
        for &f in &self.vert_faces[from] {
            let tri = self.faces[f];
            if tri.contains(&to) {
                continue;
            }
            let old = face_cross(self.pos, tri);
            let moved = tri.map(|v| if v == from { to } else { v });
            let new = face_cross(self.pos, moved);
            let (lo, ln) = (norm(old), norm(new));
            if ln <= 1e-14 * (1.0 + lo) {
                return false;
            }
            if dot(old, new) <= 0.2 * lo * ln {
                return false;
            }
        }
        true
    }

    fn collapse(&mut self, from: usize, to: usize) {
        let incident: Vec<usize> = self.vert_faces[from].iter().copied().collect();
        for f in incident {
            let tri = self.faces[f];
            if tri.contains(&to) {
                self.face_alive[f] = false;
                for &v in &tri {
                    self.vert_faces[v].remove(&f);
                }
            } else {
                self.faces[f] = tri.map(|v| if v == from { to } else { v });
                self.vert_faces[to].insert(f);
            }
        }
        self.vert_faces[from].clear();
        self.alive[from] = false;
        let qf = self.quadrics[from];
        for (a, b) in self.quadrics[to].iter_mut().zip(&qf) {
            *a += b;
        }
    }
}

fn face_cross(pos: &[Vec3], f: [usize; 3]) -> Vec3 {
    cross(sub(pos[f[1]], pos[f[0]]), sub(pos[f[2]], pos[f[0]]))
}

/// Simplify a closed manifold mesh to exactly `target_vertices` vertices.
pub fn decimate(mesh: &TriMesh, target_vertices: usize) -> Result<Decimation> {
    let n = mesh.num_vertices();
    if target_vertices >= n {
        return Err(Error::invalid(
            "decimate",
            format!("target {target_vertices} must be below current vertex count {n}"),
        ));
    }
    if target_vertices < 4 {
        return Err(Error::invalid("decimate", "a closed mesh needs at least 4 vertices"));
    }
    mesh.validate_closed_manifold()?;
    if !mesh.isolated_vertices().is_empty() {
        return Err(Error::NonManifold("isolated vertices".into()));
    }

    let pos = &mesh.vertices;
    let mut quadrics = vec![[0.0; 10]; n];
    let mut vert_faces = vec![BTreeSet::new(); n];
    for (fi, f) in mesh.faces.iter().enumerate() {
        let c = face_cross(pos, *f);
        let l = norm(c);
        for &v in f {
            vert_faces[v].insert(fi);
        }
        if l == 0.0 {
            continue;
        }
        let nrm = [c[0] / l, c[1] / l, c[2] / l];
        let q = plane_quadric(nrm, -dot(nrm, pos[f[0]]), 0.5 * l);
        for &v in f {
            for (a, b) in quadrics[v].iter_mut().zip(&q) {
                *a += b;
            }
        }
    }
    let mut st = State {
        pos,
        faces: mesh.faces.clone(),
        face_alive: vec![true; mesh.faces.len()],
        vert_faces,
        alive: vec![true; n],
        quadrics,
        stamp: vec![0; n],
    };

    let mut heap = BinaryHeap::new();
    for (a, b) in mesh.edges() {
        heap.push(st.candidate(a, b));
        heap.push(st.candidate(b, a));
    }
    let mut remaining = n;
    while remaining > target_vertices {
        let Some(c) = heap.pop() else {
            return Err(Error::Mesh(format!(
                "decimation stalled at {remaining} vertices (target {target_vertices})"
            )));
        };
        if !st.alive[c.from] || !st.alive[c.to] || st.stamp[c.from] != c.stamp_from || st.stamp[c.to] != c.stamp_to {
            continue;
        }
        if !st.can_collapse(c.from, c.to) {
            continue;
        }
        let ring = st.neighbors(c.from);
        st.collapse(c.from, c.to);
        remaining -= 1;
        // Refresh every candidate touching the changed neighbourhood.
        let mut touched: BTreeSet<usize> = ring;
        touched.insert(c.to);
        touched.remove(&c.from);
        for &v in &touched {
            st.stamp[v] = st.stamp[v].wrapping_add(1);
        }
        let mut seen = BTreeSet::new();
        for &v in &touched {
            for w in st.neighbors(v) {
                let key = (v.min(w), v.max(w));
                if seen.insert(key) {
                    heap.push(st.candidate(v, w));
                    heap.push(st.candidate(w, v));
                }
            }
        }
    }

    let mut new_index = vec![usize::MAX; n];
    let kept: Vec<usize> = (0..n).filter(|&v| st.alive[v]).collect();
    for (k, &v) in kept.iter().enumerate() {
        new_index[v] = k;
    }
    let faces: Vec<[usize; 3]> = st
        .faces
        .iter()
        .zip(&st.face_alive)
        .filter(|(_, &a)| a)
        .map(|(f, _)| f.map(|v| new_index[v]))
        .collect();
    let coarse = TriMesh::new(kept.iter().map(|&v| pos[v]).collect(), faces)?;
    coarse.validate_closed_manifold()?;

    let down = SparseMatrix::from_triplets(
        kept.len(),
        n,
        kept.iter().enumerate().map(|(k, &v)| (k, v, 1.0)).collect(),
    )?;
    let bvh = TriangleBvh::new(&coarse);
    let mut up = Vec::with_capacity(n * 3);
    for v in 0..n {
        if st.alive[v] {
            up.push((v, new_index[v], 1.0));
            continue;
        }
        let hit = bvh.closest(pos[v]).expect("coarse mesh has faces");
        let f = coarse.faces[hit.face];
        let s: f64 = hit.bary.iter().sum();
        for k in 0..3 {
            if hit.bary[k] != 0.0 {
                up.push((v, f[k], hit.bary[k] / s));
            }
        }
    }
    let up = SparseMatrix::from_triplets(n, kept.len(), up)?;
    Ok(Decimation {
        mesh: coarse,
        down,
        up,
        kept,
    })
}
