use super::{add, scale, sub, TriMesh, Vec3};

const TAUBIN_LAMBDA: f64 = 0.5;
const TAUBIN_MU: f64 = -0.53;

/// Taubin λ/μ smoothing with uniform weights. Faces are untouched.
pub fn taubin_smooth(mesh: &TriMesh, iterations: usize) -> TriMesh {
    let nb = mesh.neighbors();
    let mut v = mesh.vertices.clone();
    let step = |v: &[Vec3], factor: f64| -> Vec<Vec3> {
        v.iter()
            .enumerate()
            .map(|(i, &p)| {
                if nb[i].is_empty() {
                    return p;
                }
                let mut m = [0.0; 3];
                for &j in &nb[i] {
                    m = add(m, v[j]);
                }
                let m = scale(m, 1.0 / nb[i].len() as f64);
                add(p, scale(sub(m, p), factor))
            })
            .collect()
    };
    for _ in 0..iterations {
        v = step(&v, TAUBIN_LAMBDA);
        v = step(&v, TAUBIN_MU);
    }
    TriMesh {
        vertices: v,
        faces: mesh.faces.clone(),
    }
}
