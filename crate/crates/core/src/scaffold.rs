//! Per-view priors baked from the geometry scaffold: distance maps (the
//! Euclidean distance from the camera center to the first surface hit) and
//! occlusion-aware view-coverage maps.
//!
//! Coverage uses shadow mapping: a surface point seen by the target view is
//! counted as observed by a training camera when it projects inside that
//! camera's image and its distance agrees with the camera's distance map at
//! the nearest pixel to within `eps`.

use crate::geometry::{CameraModel, MeshAccel, Vec3};
use crate::{Error, Result};
use rayon::prelude::*;

/// Default shadow-map tolerance in scene units.
pub const DEFAULT_EPS: f64 = 0.01;

/// Row-major (top row first) per-pixel distances. Misses hold `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl DistanceMap {
    pub const MISS: f64 = f64::INFINITY;

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[(y * self.width + x) as usize]
    }

    /// Distance at `idx`, or `None` on a miss.
    pub fn hit(&self, idx: usize) -> Option<f64> {
        let v = self.values[idx];
        v.is_finite().then_some(v)
    }

    /// Rounds every value to `f32`, matching what a PFM round trip stores.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
        self
    }
}

/// Row-major per-pixel count of training views observing the surface
/// point; 0 where the scaffold is missed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<u32>,
}

impl CoverageMap {
    pub fn get(&self, x: u32, y: u32) -> u32 {
        self.values[(y * self.width + x) as usize]
    }
}

/// Raycasts every pixel center of `camera` against the scaffold.
pub fn bake_distance_map(accel: &MeshAccel, camera: &CameraModel) -> DistanceMap {
    let (w, h) = (camera.width(), camera.height());
    let values: Vec<f64> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| {
                accel
                    .raycast(&camera.pixel_center_ray(x, y))
                    .map_or(DistanceMap::MISS, |hit| hit.t)
            })
        })
        .collect();
    DistanceMap {
        width: w,
        height: h,
        values,
    }
}

/// Shadow-map visibility: the point projects in front of the camera, inside
/// the image, and its distance matches the nearest-pixel distance within `eps`.
pub fn visibility_test(point: Vec3, camera: &CameraModel, dmap: &DistanceMap, eps: f64) -> bool {
    let proj = camera.project_point(point);
    if !proj.in_frustum(dmap.width, dmap.height) {
        return false;
    }
    let x = proj.px.floor() as u32;
    let y = proj.py.floor() as u32;
    let d = dmap.get(x.min(dmap.width - 1), y.min(dmap.height - 1));
    d.is_finite() && (proj.dist - d).abs() <= eps
}

/// Coverage of every pixel of `target`: the number of training cameras that
/// see the scaffold point hit through that pixel.
pub fn bake_coverage_map(
    accel: &MeshAccel,
    target: &CameraModel,
    training_cameras: &[CameraModel],
    training_dmaps: &[DistanceMap],
    eps: f64,
) -> Result<CoverageMap> {
    if training_cameras.len() != training_dmaps.len() {
        return Err(Error::Data(format!(
            "{} training cameras but {} distance maps",
            training_cameras.len(),
            training_dmaps.len()
        )));
    }
    for (i, (c, d)) in training_cameras.iter().zip(training_dmaps).enumerate() {
        if c.width() != d.width || c.height() != d.height {
            return Err(Error::Data(format!("distance map {i} does not match its camera size")));
        }
    }
    let (w, h) = (target.width(), target.height());
    let values: Vec<u32> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| match accel.raycast(&target.pixel_center_ray(x, y)) {
                None => 0,
                Some(hit) => training_cameras
                    .iter()
                    .zip(training_dmaps)
                    .filter(|(cam, dmap)| visibility_test(hit.point, cam, dmap, eps))
                    .count() as u32,
            })
        })
        .collect();
    Ok(CoverageMap {
        width: w,
        height: h,
        values,
    })
}

/// Distance and coverage maps for a set of training views.
#[derive(Debug, Clone)]
pub struct PriorRasters {
    pub distance: Vec<DistanceMap>,
    pub coverage: Vec<CoverageMap>,
}

/// Bakes distance maps for all training cameras, then each view's own
/// coverage map against the full training set.
pub fn bake_training_priors(accel: &MeshAccel, cameras: &[CameraModel], eps: f64) -> Result<PriorRasters> {
    let distance: Vec<DistanceMap> = cameras.iter().map(|c| bake_distance_map(accel, c)).collect();
    let coverage = cameras
        .iter()
        .map(|c| bake_coverage_map(accel, c, cameras, &distance, eps))
        .collect::<Result<Vec<_>>>()?;
    Ok(PriorRasters { distance, coverage })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TriangleMesh;

    /// Wall quad in the plane z = -2 spanning [-s, s]^2.
    fn wall(s: f64) -> MeshAccel {
        let v = vec![
            Vec3::new(-s, -s, -2.0),
            Vec3::new(s, -s, -2.0),
            Vec3::new(s, s, -2.0),
            Vec3::new(-s, s, -2.0),
        ];
        MeshAccel::new(TriangleMesh::new(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap()).unwrap()
    }

    fn origin_camera(w: u32, h: u32) -> CameraModel {
        CameraModel::look_at(Vec3::ZERO, -Vec3::Z, Vec3::Y, w, h, 1.2).unwrap()
    }

    #[test]
    fn on_axis_distance_is_planar_distance() {
        let cam = origin_camera(33, 33);
        let ray = cam.pixel_to_ray(cam.cx(), cam.cy());
        let hit = wall(5.0).raycast(&ray).unwrap();
        assert!((hit.t - 2.0).abs() < 1e-12);
    }

    #[test]
    fn off_axis_pixels_store_distance_not_depth() {
        let cam = origin_camera(32, 24);
        let dmap = bake_distance_map(&wall(5.0), &cam);
        for y in 0..24 {
            for x in 0..32 {
                let ray = cam.pixel_center_ray(x, y);
                let cos = ray.direction.dot(cam.forward());
                let expected = 2.0 / cos;
                assert!((dmap.get(x, y) - expected).abs() < 1e-12);
            }
        }
        // Corner pixels are noticeably farther than the planar depth.
        assert!(dmap.get(0, 0) > 2.2);
    }

    #[test]
    fn rays_leaving_the_scene_are_misses() {
        let cam = origin_camera(16, 16);
        let dmap = bake_distance_map(&wall(0.1), &cam);
        assert_eq!(dmap.get(0, 0), DistanceMap::MISS);
        assert!(dmap.hit(0).is_none());
    }

    #[test]
    fn visibility_and_occlusion() {
        let cam = origin_camera(32, 32);
        let accel = wall(5.0);
        let dmap = bake_distance_map(&accel, &cam);
        let hit = accel.raycast(&cam.pixel_center_ray(20, 9)).unwrap();
        assert!(visibility_test(hit.point, &cam, &dmap, 0.01));
        // Behind the camera.
        assert!(!visibility_test(Vec3::new(0.0, 0.0, 2.0), &cam, &dmap, 0.01));

        // Insert an occluder plane at z = -1 and re-bake.
        let mut mesh = accel.mesh.clone();
        let occluder = TriangleMesh::new(
            vec![
                Vec3::new(-3.0, -3.0, -1.0),
                Vec3::new(3.0, -3.0, -1.0),
                Vec3::new(3.0, 3.0, -1.0),
                Vec3::new(-3.0, 3.0, -1.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        mesh.append(&occluder);
        let occluded = bake_distance_map(&MeshAccel::new(mesh).unwrap(), &cam);
        assert!(!visibility_test(hit.point, &cam, &occluded, 0.01));
    }

    #[test]
    fn self_coverage_and_duplicate_cameras() {
        let cam = origin_camera(24, 24);
        let accel = wall(5.0);
        let dmap = bake_distance_map(&accel, &cam);
        let cov = bake_coverage_map(&accel, &cam, &[cam.clone()], &[dmap.clone()], DEFAULT_EPS).unwrap();
        assert!(cov.values.iter().all(|&v| v == 1));
        let cov2 = bake_coverage_map(
            &accel,
            &cam,
            &[cam.clone(), cam.clone()],
            &[dmap.clone(), dmap.clone()],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(cov2.values.iter().all(|&v| v == 2));
        assert!(bake_coverage_map(&accel, &cam, &[cam.clone()], &[], DEFAULT_EPS).is_err());
    }

    #[test]
    fn scaffold_misses_have_zero_coverage() {
        let cam = origin_camera(16, 16);
        let accel = wall(0.1);
        let dmap = bake_distance_map(&accel, &cam);
        let cov = bake_coverage_map(&accel, &cam, &[cam.clone()], &[dmap.clone()], DEFAULT_EPS).unwrap();
        for (c, d) in cov.values.iter().zip(&dmap.values) {
            assert_eq!(*c == 0, d.is_infinite());
        }
    }
}
