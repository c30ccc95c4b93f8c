//! Nearest-neighbour structures: a k-d tree over points and a bounding-volume
//! hierarchy over triangles.

use crate::mesh::{add, dot, scale, sub, TriMesh, Vec3};

#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
        }
    }

    fn grow(&mut self, p: Vec3) {
        for k in 0..3 {
            self.lo[k] = self.lo[k].min(p[k]);
            self.hi[k] = self.hi[k].max(p[k]);
        }
    }

    /// Squared distance from `p` to the box; never exceeds the squared
    /// distance to any point inside it, in floating point as well.
    #[inline]
    fn dist2(&self, p: Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let e = if p[k] < self.lo[k] {
                self.lo[k] - p[k]
            } else if p[k] > self.hi[k] {
                p[k] - self.hi[k]
            } else {
                0.0
            };
            d += e * e;
        }
        d
    }

    fn widest_axis(&self) -> usize {
        let ext = sub(self.hi, self.lo);
        if ext[0] >= ext[1] && ext[0] >= ext[2] {
            0
        } else if ext[1] >= ext[2] {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Debug)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { left: usize, right: usize },
}

/// Static k-d tree. Queries return the smallest index among equidistant
/// points, matching a brute-force scan exactly.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<(KdNode, Aabb)>,
}

const KD_LEAF: usize = 8;

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut t = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            t.build(0, points.len());
        }
        t
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let mut bb = Aabb::empty();
        for &i in &self.order[start..end] {
            bb.grow(self.points[i]);
        }
        let id = self.nodes.len();
        self.nodes.push((KdNode::Leaf { start, end }, bb));
        if end - start > KD_LEAF {
            let axis = bb.widest_axis();
            let mid = (start + end) / 2;
            let pts = &self.points;
            self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
            });
            let left = self.build(start, mid);
            let right = self.build(mid, end);
            self.nodes[id].0 = KdNode::Split { left, right };
        }
        id
    }

    /// `(index, squared distance)` of the nearest point.
    pub fn nearest(&self, p: Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let (node, bb) = &self.nodes[n];
            if bb.dist2(p) > best.1 {
                continue;
            }
            match *node {
                KdNode::Leaf { start, end } => {
                    for &i in &self.order[start..end] {
                        let d = dist2(p, self.points[i]);
                        if d < best.1 || (d == best.1 && i < best.0) {
                            best = (i, d);
                        }
                    }
                }
                KdNode::Split { left, right } => {
                    let dl = self.nodes[left].1.dist2(p);
                    let dr = self.nodes[right].1.dist2(p);
                    // Visit the closer child first.
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        Some(best)
    }
}

/// Closest point on triangle `(a, b, c)` to `p`, with its barycentric weights.
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> (Vec3, [f64; 3]) {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, [1.0, 0.0, 0.0]);
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (add(a, scale(ab, v)), [1.0 - v, v, 0.0]);
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (add(a, scale(ac, w)), [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (add(b, scale(sub(c, b), w)), [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (add(a, add(scale(ab, v), scale(ac, w))), [1.0 - v - w, v, w])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceHit {
    pub face: usize,
    pub point: Vec3,
    pub bary: [f64; 3],
    pub dist2: f64,
}

/// Bounding-volume hierarchy over the faces of a mesh for closest-point
/// queries.
#[derive(Clone, Debug)]
pub struct TriangleBvh {
    tris: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<(KdNode, Aabb)>,
}

const BVH_LEAF: usize = 4;

impl TriangleBvh {
    pub fn new(mesh: &TriMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = mesh
            .faces
            .iter()
            .map(|f| [mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]])
            .collect();
        let centroids: Vec<Vec3> = tris
            .iter()
            .map(|t| scale(add(add(t[0], t[1]), t[2]), 1.0 / 3.0))
            .collect();
        let mut b = TriangleBvh {
            order: (0..tris.len()).collect(),
            tris,
            nodes: Vec::new(),
        };
        if !b.tris.is_empty() {
            b.build(0, b.tris.len(), &centroids);
        }
        b
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    fn build(&mut self, start: usize, end: usize, centroids: &[Vec3]) -> usize {
        let mut bb = Aabb::empty();
        let mut cb = Aabb::empty();
        for &i in &self.order[start..end] {
            for v in self.tris[i] {
                bb.grow(v);
            }
            cb.grow(centroids[i]);
        }
        let id = self.nodes.len();
        self.nodes.push((KdNode::Leaf { start, end }, bb));
        if end - start > BVH_LEAF {
            let axis = cb.widest_axis();
            let mid = (start + end) / 2;
            self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
            });
            let left = self.build(start, mid, centroids);
            let right = self.build(mid, end, centroids);
            self.nodes[id].0 = KdNode::Split { left, right };
        }
        id
    }

    /// Closest surface point; among equidistant faces the lowest index wins.
    pub fn closest(&self, p: Vec3) -> Option<SurfaceHit> {
        if self.tris.is_empty() {
            return None;
        }
        let mut best = SurfaceHit {
            face: usize::MAX,
            point: [0.0; 3],
            bary: [0.0; 3],
            dist2: f64::INFINITY,
        };
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let (node, bb) = &self.nodes[n];
            if bb.dist2(p) > best.dist2 {
                continue;
            }
            match *node {
                KdNode::Leaf { start, end } => {
                    for &i in &self.order[start..end] {
                        let [a, b, c] = self.tris[i];
                        let (q, w) = closest_point_on_triangle(p, a, b, c);
                        let d = dist2(p, q);
                        if d < best.dist2 || (d == best.dist2 && i < best.face) {
                            best = SurfaceHit {
                                face: i,
                                point: q,
                                bary: w,
                                dist2: d,
                            };
                        }
                    }
                }
                KdNode::Split { left, right } => {
                    let dl = self.nodes[left].1.dist2(p);
                    let dr = self.nodes[right].1.dist2(p);
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        Some(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;
    use rand::{Rng, SeedableRng};

    #[test]
    fn kdtree_matches_brute_force_including_ties() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        // Integer grid points produce many exact ties.
        let pts: Vec<Vec3> = (0..300)
            .map(|_| [rng.gen_range(0..5) as f64, rng.gen_range(0..5) as f64, rng.gen_range(0..5) as f64])
            .collect();
        let tree = KdTree::new(&pts);
        for _ in 0..500 {
            let q = [rng.gen_range(-1..6) as f64 * 0.5, rng.gen_range(-1..6) as f64 * 0.5, rng.gen_range(-1..6) as f64 * 0.5];
            let mut best = (usize::MAX, f64::INFINITY);
            for (i, &p) in pts.iter().enumerate() {
                let d = dist2(q, p);
                if d < best.1 {
                    best = (i, d);
                }
            }
            assert_eq!(tree.nearest(q).unwrap(), best);
        }
    }

    #[test]
    fn triangle_closest_point_regions() {
        let (a, b, c) = ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        let (q, w) = closest_point_on_triangle([0.25, 0.25, 2.0], a, b, c);
        assert_eq!(q, [0.25, 0.25, 0.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let (q, w) = closest_point_on_triangle([-1.0, -1.0, 0.0], a, b, c);
        assert_eq!((q, w), (a, [1.0, 0.0, 0.0]));
        let (q, _) = closest_point_on_triangle([1.0, 1.0, 0.0], a, b, c);
        assert!((q[0] - 0.5).abs() < 1e-15 && (q[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bvh_matches_brute_force() {
        let m = icosphere(2);
        let bvh = TriangleBvh::new(&m);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let brute = m
                .faces
                .iter()
                .map(|f| {
                    let (q, _) = closest_point_on_triangle(p, m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]);
                    dist2(p, q)
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(bvh.closest(p).unwrap().dist2, brute);
        }
    }
}
