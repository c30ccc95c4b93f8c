use meshrecon::mesh::{decimate, icosphere, TriMesh};
use meshrecon::metrics::surface_distances;
use meshrecon::synth::generate_shape;
use proptest::prelude::*;

fn scaled(m: &TriMesh, s: f64, t: [f64; 3]) -> TriMesh {
    m.with_vertices(m.vertices.iter().map(|v| [v[0] * s + t[0], v[1] * s + t[1], v[2] * s + t[2]]).collect())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_shapes_are_closed_spheres(seed in 0u64..10_000, bump in 0.0f64..0.3, modes in 1usize..=8) {
        let (_, mesh) = generate_shape(seed, bump, modes).unwrap();
        prop_assert!(mesh.validate_closed_manifold().is_ok());
        prop_assert_eq!(mesh.euler_characteristic(), 2);
        prop_assert!(mesh.signed_volume() > 0.0);
    }

    #[test]
    fn decimation_keeps_topology(target in 12usize..600) {
        let fine = icosphere(3);
        let d = decimate(&fine, target).unwrap();
        prop_assert_eq!(d.mesh.num_vertices(), target);
        prop_assert!(d.mesh.validate_closed_manifold().is_ok());
        prop_assert_eq!(d.mesh.euler_characteristic(), 2);
        for s in d.up.row_sums() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distances_are_translation_invariant(
        s in 0.5f64..1.5,
        t in prop::array::uniform3(-5.0f64..5.0),
        u in prop::array::uniform3(-0.2f64..0.2),
        seed in 0u64..1000,
    ) {
        let a = icosphere(2);
        let b = scaled(&icosphere(1), s, u);
        let d0 = surface_distances(&a, &b, 500, seed).unwrap();
        let d1 = surface_distances(&a.translated(t), &b.translated(t), 500, seed).unwrap();
        prop_assert!((d0.assd - d1.assd).abs() < 1e-6);
        prop_assert!((d0.hd - d1.hd).abs() < 1e-6);
    }

    #[test]
    fn hausdorff_bounds_assd(s in 0.5f64..1.5, u in prop::array::uniform3(-0.3f64..0.3), seed in 0u64..1000) {
        let a = icosphere(2);
        let b = scaled(&icosphere(2), s, u);
        let d = surface_distances(&a, &b, 400, seed).unwrap();
        prop_assert!(d.hd >= d.assd);
        prop_assert!(d.hd >= d.hd90 && d.hd90 >= 0.0);
        let r = surface_distances(&b, &a, 400, seed).unwrap();
        prop_assert_eq!(d, r);
    }

    #[test]
    fn union_splits_back_into_parts(k in 1usize..5, gap in 2.5f64..6.0) {
        let parts: Vec<TriMesh> = (0..k).map(|i| icosphere(1).translated([i as f64 * gap, 0.0, 0.0])).collect();
        let u = TriMesh::union(&parts);
        prop_assert_eq!(u.connected_components(), parts);
    }
}
