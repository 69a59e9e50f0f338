//! Vector and camera math, ray/triangle intersection and the BVH used to
//! raycast the geometry scaffold.

mod bvh;
mod camera;
mod mesh;
mod vec;

pub use bvh::{raycast_linear, Bvh, BvhNode, MeshAccel};
pub use camera::{CameraModel, CameraRecord, Projection};
pub use mesh::TriangleMesh;
pub use vec::{Aabb, Vec3};

/// Hits closer than this are rejected so that rays leaving a surface do not
/// immediately re-hit it.
pub const HIT_EPSILON: f64 = 1e-6;

/// `r(t) = origin + t * direction` for `t` in `[t_near, t_far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
            t_near,
            t_far,
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn with_bounds(mut self, t_near: f64, t_far: f64) -> Self {
        self.t_near = t_near;
        self.t_far = t_far;
        self
    }

    /// Clips the ray to the unit scene cube `[-1, 1]^3`, keeping `t >= t_near`.
    /// Returns `None` if the clipped interval is empty.
    pub fn clip_to_scene(&self) -> Option<Ray> {
        let cube = Aabb {
            min: Vec3::splat(-1.0),
            max: Vec3::splat(1.0),
        };
        let inv = Vec3::new(1.0 / self.direction.x, 1.0 / self.direction.y, 1.0 / self.direction.z);
        let (t0, t1) = cube.intersect(self.origin, inv, self.t_near, self.t_far)?;
        (t1 > t0).then(|| self.with_bounds(t0, t1))
    }
}

/// Nearest intersection of a ray with a mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter, equal to the Euclidean distance since directions are unit.
    pub t: f64,
    pub triangle_id: u32,
    pub point: Vec3,
}

/// Möller–Trumbore intersection with inclusive edges. Returns the ray
/// parameter if the crossing lies in `[max(t_near, HIT_EPSILON), t_far]`.
#[inline]
pub fn ray_triangle_intersect(ray: &Ray, v0: Vec3, v1: Vec3, v2: Vec3) -> Option<f64> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let p = ray.direction.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-15 {
        return None;
    }
    let inv_det = 1.0 / det;
    let s = ray.origin - v0;
    let u = s.dot(p) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = ray.direction.dot(q) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv_det;
    (t >= ray.t_near.max(HIT_EPSILON) && t <= ray.t_far).then_some(t)
}
