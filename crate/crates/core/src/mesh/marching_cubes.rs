use std::collections::HashMap;

use super::mc_tables::{table, CORNERS, EDGES};
use super::{TriMesh, Vec3};
use crate::volume::Volume;

/// Extract the `iso` level set of `vol` as a welded triangle mesh.
///
/// Voxels with value `> iso` are inside; faces are oriented so normals point
/// toward lower intensity. Vertices are placed by linear interpolation along
/// grid edges and mapped through the volume transform.
pub fn marching_cubes(vol: &Volume, iso: f64) -> TriMesh {
    let [nd, nh, nw] = vol.dims;
    if nd < 2 || nh < 2 || nw < 2 {
        return TriMesh::empty();
    }
    let flip = vol.transform.determinant() < 0.0;
    let tables = table();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces = Vec::new();
    let mut weld: HashMap<(usize, u8), usize> = HashMap::new();
    let val = |d: usize, h: usize, w: usize| vol.get(d, h, w) as f64;

    for d in 0..nd - 1 {
        for h in 0..nh - 1 {
            for w in 0..nw - 1 {
                let mut values = [0.0; 8];
                let mut case = 0usize;
                for (i, c) in CORNERS.iter().enumerate() {
                    values[i] = val(d + c[0], h + c[1], w + c[2]);
                    if values[i] > iso {
                        case |= 1 << i;
                    }
                }
                let tris = &tables[case];
                if tris.is_empty() {
                    continue;
                }
                let mut edge_vertex = [usize::MAX; 12];
                for tri in tris {
                    for &e in tri {
                        if edge_vertex[e] != usize::MAX {
                            continue;
                        }
                        let [a, b] = EDGES[e];
                        let (ca, cb) = (CORNERS[a], CORNERS[b]);
                        let axis = (0..3).find(|&k| ca[k] != cb[k]).unwrap() as u8;
                        let base = [d + ca[0], h + ca[1], w + ca[2]];
                        let key = (vol.index(base[0], base[1], base[2]), axis);
                        edge_vertex[e] = *weld.entry(key).or_insert_with(|| {
                            let t = (iso - values[a]) / (values[b] - values[a]);
                            let mut p = base.map(|x| x as f64);
                            p[axis as usize] += t;
                            vertices.push(vol.position(p));
                            vertices.len() - 1
                        });
                    }
                    let f = tri.map(|e| edge_vertex[e]);
                    faces.push(if flip { [f[0], f[2], f[1]] } else { f });
                }
            }
        }
    }
    TriMesh { vertices, faces }
}
