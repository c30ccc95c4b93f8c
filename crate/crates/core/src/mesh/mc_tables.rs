//! The 256-case marching-cubes triangulation table, derived from the cube
//! topology on first use.
//!
//! For each corner configuration every cube face contributes oriented
//! segments between its edge crossings; a segment always wraps a run of
//! inside corners, so ambiguous faces separate their inside corners. The
//! rule depends only on the four face values, hence neighbouring cubes agree
//! on the shared face and the surface is crack-free. Segments chain into
//! closed loops (each crossing lies on exactly two faces), and each loop is
//! fan-triangulated. Loop orientation is fixed so triangle normals point
//! from inside corners toward outside corners.

use std::sync::OnceLock;

/// Corner `i` sits at `(i & 1, (i >> 1) & 1, (i >> 2) & 1)`.
pub(crate) const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Cube edges as corner pairs; the second corner has the larger index.
pub(crate) const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [2, 3],
    [4, 5],
    [6, 7],
    [0, 2],
    [1, 3],
    [4, 6],
    [5, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Face corners listed counter-clockwise seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2], // -x
    [1, 3, 7, 5], // +x
    [0, 1, 5, 4], // -y
    [2, 6, 7, 3], // +y
    [0, 2, 3, 1], // -z
    [4, 5, 7, 6], // +z
];

fn edge_between(a: usize, b: usize) -> usize {
    let key = [a.min(b), a.max(b)];
    EDGES.iter().position(|e| *e == key).expect("corners share an edge")
}

fn share_face(a: usize, b: usize) -> bool {
    FACES.iter().any(|f| {
        let on = |e: usize| EDGES[e].iter().all(|c| f.contains(c));
        on(a) && on(b)
    })
}

fn triangulate(case: usize) -> Vec<[usize; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mut next = [usize::MAX; 12];
    for face in FACES {
        let crossings: Vec<(usize, bool)> = (0..4)
            .filter_map(|i| {
                let (a, b) = (face[i], face[(i + 1) % 4]);
                (inside(a) != inside(b)).then(|| (edge_between(a, b), inside(b)))
            })
            .collect();
        // Crossings alternate entry (outside -> inside) and exit. Each
        // segment runs from an entry to the following exit.
        let n = crossings.len();
        for i in 0..n {
            let (e, entering) = crossings[i];
            if entering {
                next[e] = crossings[(i + 1) % n].0;
            }
        }
    }
    let mut used = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || used[start] {
            continue;
        }
        let mut ring = vec![start];
        used[start] = true;
        let mut e = next[start];
        while e != start {
            ring.push(e);
            used[e] = true;
            e = next[e];
        }
        let n = ring.len();
        // A fan diagonal joining two crossings of one cube face could be
        // emitted again by the neighbouring cube; pick an apex that avoids it.
        let s = (0..n)
            .find(|&s| (2..n - 1).all(|k| !share_face(ring[s], ring[(s + k) % n])))
            .expect("every loop admits a safe fan apex");
        for k in 1..n - 1 {
            tris.push([ring[s], ring[(s + k) % n], ring[(s + k + 1) % n]]);
        }
    }
    tris
}

/// Triangles (as cube-edge triples) for every corner configuration; bit `i`
/// of the case index is set when corner `i` is inside.
pub(crate) fn table() -> &'static [Vec<[usize; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(triangulate).collect())
}
