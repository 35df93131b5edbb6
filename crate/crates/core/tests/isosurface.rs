use imls_core::isosurface::{interpolate_vertex_attributes, marching_cubes, marching_cubes_values, sample_values};
use imls_core::optimize::extract_surface;
use imls_core::shapes::{sample_shape, ShapeKind};
use imls_core::splat::{build_grid, default_background_sdf};
use imls_core::Vec3;

const CENTER: Vec3 = Vec3::new(0.5, 0.5, 0.5);

fn max_radial_error(resolution: usize) -> f64 {
    let values = sample_values(resolution, |q| (q - CENTER).norm() - 0.3);
    let mesh = marching_cubes_values(resolution, &values, 0.0).unwrap();
    assert!(mesh.is_watertight());
    mesh.vertices.iter().map(|v| ((v - CENTER).norm() - 0.3).abs()).fold(0.0, f64::max)
}

#[test]
fn sphere_error_converges_with_resolution() {
    let e32 = max_radial_error(32);
    let e64 = max_radial_error(64);
    assert!(e64 <= 2.0 / 63.0);
    let ratio = e32 / e64;
    assert!(ratio >= 1.33, "ratio {ratio}");
}

#[test]
fn analytic_shapes_extract_closed_outward_surfaces() {
    for kind in [ShapeKind::Sphere, ShapeKind::Torus, ShapeKind::Box] {
        let values = sample_values(40, |q| kind.sdf(q));
        let mesh = marching_cubes_values(40, &values, 0.0).unwrap();
        assert!(mesh.is_watertight(), "{kind}");
        assert!(mesh.is_consistently_oriented(), "{kind}");
        // A vertex normal points along the SDF gradient.
        let h = 1e-5;
        for (v, n) in mesh.vertices.iter().zip(&mesh.vertex_normals).step_by(7) {
            let g = Vec3::new(
                kind.sdf(&(v + Vec3::x() * h)) - kind.sdf(&(v - Vec3::x() * h)),
                kind.sdf(&(v + Vec3::y() * h)) - kind.sdf(&(v - Vec3::y() * h)),
                kind.sdf(&(v + Vec3::z() * h)) - kind.sdf(&(v - Vec3::z() * h)),
            );
            assert!(n.dot(&g) > 0.0, "{kind} at {v:?}");
        }
    }
}

#[test]
fn splatted_surface_vertices_lie_on_the_level_set() {
    let cloud = sample_shape(ShapeKind::Torus, 3000, 0.0, 0.0, 4).unwrap();
    let r = 40;
    let (_, grid) = build_grid(&cloud, r, default_background_sdf(r)).unwrap();
    let mesh = marching_cubes(&grid, 0.0).unwrap();
    assert!(!mesh.is_empty());
    for v in &mesh.vertices {
        assert!(grid.sample_sdf(v).abs() < 1e-6);
    }
}

#[test]
fn extraction_is_watertight_and_carries_features() {
    let mut cloud = sample_shape(ShapeKind::Sphere, 2000, 0.002, 3.0, 8).unwrap();
    cloud.feature_dim = 3;
    for p in &mut cloud.points {
        p.feature = vec![p.position.x, p.position.y, 0.25];
    }
    let (mut mesh, grid, _) = extract_surface(&cloud, 32, default_background_sdf(32)).unwrap();
    assert!(mesh.is_watertight());
    let features = mesh.vertex_features.as_ref().expect("features interpolated");
    assert_eq!(features.len(), mesh.vertices.len());
    // Features are convex blends of points within one support radius of a
    // stencil corner.
    let reach = cloud.points.iter().map(|p| p.kernel.support_radius_sq().sqrt()).fold(0.0, f64::max)
        + 3f64.sqrt() / 31.0;
    for (v, f) in mesh.vertices.iter().zip(features) {
        assert!((f[2] - 0.25).abs() < 1e-9);
        assert!((f[0] - v.x).abs() <= reach);
    }
    // Every crossing edge has a covered negative end.
    assert!(interpolate_vertex_attributes(&mut mesh, &grid).unwrap().is_empty());
}
