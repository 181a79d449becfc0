use super::tests_support::sphere_mesh;
use super::*;
use crate::pointcloud::SyntheticShape;

#[test]
fn grid_of_exact_sphere() {
    let s = SyntheticShape::Sphere { radius: 0.4 };
    let g = evaluate_grid(&s, 16, Bounds::default()).unwrap();
    assert_eq!(g.values.len(), 17 * 17 * 17);
    for k in 0..17 {
        for j in 0..17 {
            for i in 0..17 {
                let p = g.node_position(i, j, k);
                assert!((g.values[g.index(i, j, k)] - (geom::norm(p) - 0.4)).abs() < 1e-12);
            }
        }
    }
    assert_eq!(evaluate_grid(&s, 2, Bounds::default()).unwrap().values.len(), 27);
    assert!(evaluate_grid(&s, 1, Bounds::default()).is_err());
}

#[test]
fn translated_field_gives_translated_grid() {
    let t = [0.1, -0.05, 0.2];
    let f = |p: Vec3| (p[0] * 3.0).sin() + p[1] * p[2];
    let b = Bounds::default();
    let moved = Bounds {
        min: geom::add(b.min, t),
        max: geom::add(b.max, t),
    };
    let g0 = ScalarGrid::from_fn(8, b, f).unwrap();
    let g1 = ScalarGrid::from_fn(8, moved, |p| f(geom::sub(p, t))).unwrap();
    for (a, c) in g0.values.iter().zip(&g1.values) {
        assert!((a - c).abs() < 1e-12);
    }
}

#[test]
fn constant_grid_gives_empty_mesh() {
    let g = ScalarGrid::from_fn(2, Bounds::default(), |_| 1.0).unwrap();
    assert!(marching_cubes(&g, 0.0).is_empty());
}

#[test]
fn sphere_oracle() {
    let r = 0.4;
    let res = 128;
    let m = sphere_mesh(r, res);
    let cell = 1.1 / res as f64;
    let max_dev = m.vertices.iter().map(|v| (geom::norm(*v) - r).abs()).fold(0.0, f64::max);
    assert!(max_dev < 2.0 * cell, "deviation {max_dev}");
    let area = m.area();
    let exact = 4.0 * std::f64::consts::PI * r * r;
    assert!((area / exact - 1.0).abs() < 0.05, "area {area} vs {exact}");
    assert!(m.is_watertight());
    let mut dot = 0.0;
    for t in 0..m.triangles.len() {
        let [a, b, c] = m.triangle_vertices(t);
        let centroid = geom::scale(geom::add(geom::add(a, b), c), 1.0 / 3.0);
        dot += geom::dot(m.triangle_normal(t).unwrap(), geom::normalized(centroid).unwrap());
    }
    assert!(dot / m.triangles.len() as f64 > 0.99);
    for t in 0..m.triangles.len() {
        assert!(m.triangle_area(t) > MIN_TRIANGLE_AREA);
    }
}

#[test]
fn vertices_lie_on_interpolated_zero_set() {
    // trilinear interpolation reproduces a linear field exactly
    let n = geom::normalized([0.3, -0.5, 0.8]).unwrap();
    let g = ScalarGrid::from_fn(20, Bounds::default(), |p| geom::dot(n, p) - 0.05).unwrap();
    let m = marching_cubes(&g, 0.0);
    assert!(!m.is_empty());
    for v in &m.vertices {
        assert!((geom::dot(n, *v) - 0.05).abs() < 1e-9);
    }
    // normals point toward increasing values
    for t in 0..m.triangles.len() {
        assert!(geom::dot(m.triangle_normal(t).unwrap(), n) > 0.999);
    }
}

#[test]
fn iso_value_shifts_surface() {
    let s = SyntheticShape::Sphere { radius: 0.3 };
    let g = evaluate_grid(&s, 64, Bounds::default()).unwrap();
    let m = marching_cubes(&g, 0.1);
    let mean = m.vertices.iter().map(|v| geom::norm(*v)).sum::<f64>() / m.vertices.len() as f64;
    assert!((mean - 0.4).abs() < 0.005);
}

#[test]
fn torus_is_watertight() {
    let s = SyntheticShape::default_for(crate::pointcloud::ShapeKind::Torus);
    let m = marching_cubes(&evaluate_grid(&s, 64, Bounds::default()).unwrap(), 0.0);
    assert!(m.is_watertight());
    let exact = s.surface_area();
    assert!((m.area() / exact - 1.0).abs() < 0.05);
}

#[test]
fn marching_cubes_is_deterministic() {
    assert_eq!(sphere_mesh(0.35, 40), sphere_mesh(0.35, 40));
}

#[test]
fn obj_round_trip_and_indexing() {
    let dir = tempfile::tempdir().unwrap();
    let strip = TriangleMesh::new(
        vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]],
        vec![[0, 1, 2], [2, 1, 3]],
    )
    .unwrap();
    let p = dir.path().join("strip.obj");
    save_obj(&strip, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.contains("f 1 2 3\nf 3 2 4\n"));
    assert_eq!(load_obj(&p).unwrap(), strip);

    let tri = TriangleMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
    save_obj(&tri, &p).unwrap();
    assert_eq!(load_obj(&p).unwrap(), tri);

    let sphere = sphere_mesh(0.4, 24);
    for name in ["s.obj", "s.ply"] {
        let p = dir.path().join(name);
        save_mesh(&sphere, &p).unwrap();
        let back = load_mesh(&p).unwrap();
        assert_eq!(back.vertices.len(), sphere.vertices.len());
        assert_eq!(back, sphere);
    }
}

#[test]
fn obj_variants_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.obj");
    std::fs::write(&p, "# c\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\nf -4 -3 -2\n").unwrap();
    let m = load_obj(&p).unwrap();
    assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3], [0, 1, 2]]);
    for bad in ["v 0 0\n", "v 0 0 0\nf 1 2 3\n", "v 0 0 0\nf 0 1 1\n", "v a 0 0\n", "v 0 0 0\nf 1 1\n"] {
        std::fs::write(&p, bad).unwrap();
        assert!(load_obj(&p).is_err(), "{bad:?}");
    }
    assert!(load_mesh(dir.path().join("m.stl")).is_err());
}
