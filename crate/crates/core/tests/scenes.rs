use nerfvs_core::dataset::{Dataset, DatasetSpec, Split};
use nerfvs_core::geometry::{MeshAccel, TriangleMesh};
use nerfvs_core::scaffold::bake_distance_map;
use nerfvs_core::synth::{
    build_scene, connected_components, perturb_scaffold, render_gt, PerturbMode, SceneSpec, Surface,
};
use std::collections::HashMap;

/// Every directed edge must be matched by exactly one reversed edge.
fn is_closed_and_consistent(mesh: &TriangleMesh) -> bool {
    let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
    for t in mesh.triangles() {
        for k in 0..3 {
            *edges.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
        }
    }
    edges.iter().all(|(&(a, b), &n)| n == 1 && edges.get(&(b, a)) == Some(&1))
}

fn median(mut v: Vec<u32>) -> u32 {
    v.sort_unstable();
    v[v.len() / 2]
}

#[test]
fn tessellated_room_stays_watertight() {
    let mut spec = SceneSpec::desk_room();
    spec.tessellation = Some(0.1);
    let scene = build_scene(&spec).unwrap();
    let coarse = build_scene(&SceneSpec::desk_room()).unwrap();
    assert!(scene.mesh().len() > coarse.mesh().len() + 1000);
    for comp in connected_components(scene.mesh()) {
        let tris: Vec<[u32; 3]> = comp.iter().map(|&t| scene.mesh().triangles()[t as usize]).collect();
        let part = TriangleMesh::new(scene.mesh().vertices().to_vec(), tris).unwrap();
        assert!(is_closed_and_consistent(&part));
    }
}

#[test]
fn training_coverage_is_imbalanced() {
    let ds = Dataset::generate(&DatasetSpec::desk_room(32)).unwrap();
    let scene = build_scene(&ds.spec.scene).unwrap();
    let (mut focus, mut walls) = (Vec::new(), Vec::new());
    for (cam, cov) in ds.train.cameras.iter().zip(&ds.train.coverage) {
        let gt = render_gt(&scene, cam);
        for (px, tri) in gt.triangle.iter().enumerate() {
            match tri.map(|t| scene.surfaces[t as usize]) {
                // Table and the ball on it.
                Some(Surface::Object(0 | 1)) => focus.push(cov.values[px]),
                Some(Surface::Wall) => walls.push(cov.values[px]),
                _ => {}
            }
        }
    }
    let (f, w) = (median(focus), median(walls));
    assert!(f >= 3 * w, "focus median {f}, wall median {w}");
    let sparse = ds.extrap.coverage.iter().flat_map(|c| &c.values).filter(|&&c| (1..=2).contains(&c));
    assert!(sparse.count() > 0);
}

#[test]
fn offset_object_changes_some_pixels_only() {
    let scene = build_scene(&SceneSpec::desk_room()).unwrap();
    let spec = DatasetSpec::desk_room(32);
    let cam = nerfvs_core::synth::make_trajectory(&spec.scene, &spec.trajectory).unwrap().train[0].clone();
    let clean = MeshAccel::new(scene.mesh().clone()).unwrap();
    let moved = perturb_scaffold(scene.mesh(), PerturbMode::OffsetObject, 0.05, 0).unwrap();
    assert_eq!(moved.len(), scene.mesh().len());
    let moved = MeshAccel::new(moved).unwrap();
    let (a, b) = (bake_distance_map(&clean, &cam), bake_distance_map(&moved, &cam));
    let changed = a.values.iter().zip(&b.values).filter(|(x, y)| x != y).count();
    assert!(changed > 0 && changed < a.values.len() / 2, "{changed} pixels changed");
}

#[test]
fn face_deletion_opens_holes() {
    let mut spec = SceneSpec::desk_room();
    spec.tessellation = Some(0.1);
    let mesh = build_scene(&spec).unwrap().mesh().clone();
    let cut = perturb_scaffold(&mesh, PerturbMode::DeleteRandomFaces, 0.1, 4).unwrap();
    assert_eq!(cut.len(), mesh.len() - mesh.len() / 10);
    assert!(!is_closed_and_consistent(&cut));
    assert_eq!(cut, perturb_scaffold(&mesh, PerturbMode::DeleteRandomFaces, 0.1, 4).unwrap());
}

#[test]
fn dataset_round_trips_through_disk() {
    let spec = DatasetSpec::desk_room(16);
    let ds = Dataset::generate(&spec).unwrap();
    assert_eq!(ds, Dataset::generate(&spec).unwrap());
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    for s in Split::ALL {
        assert!(dir.path().join(format!("cameras_{s}.json")).is_file());
    }
    assert!(dir.path().join("priors/cov_0.pfm").is_file());
    assert!(dir.path().join("priors/extrap/cov_0.pfm").is_file());
}

#[test]
fn loading_a_missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Dataset::load(&dir.path().join("nope")).unwrap_err();
    assert!(matches!(err, nerfvs_core::Error::Io { .. }), "{err}");
}
