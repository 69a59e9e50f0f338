//! Synthetic indoor scenes with fully known geometry, Lambert ground truth,
//! imbalanced camera trajectories and scaffold corruptions.

use crate::geometry::{Aabb, CameraModel, MeshAccel, TriangleMesh, Vec3};
use crate::io::Image;
use crate::scaffold::DistanceMap;
use crate::{Error, Result};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checker {
    /// Edge length of one checker square in scene units.
    pub scale: f64,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checker: Option<Checker>,
}

impl Material {
    pub const fn flat(albedo: [f64; 3]) -> Self {
        Self { albedo, checker: None }
    }

    pub const fn checker(albedo: [f64; 3], other: [f64; 3], scale: f64) -> Self {
        Self {
            albedo,
            checker: Some(Checker { scale, albedo: other }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub half_extents: [f64; 3],
    /// Removes the `x > notch[0], z > notch[1]` quadrant, giving an L-shaped
    /// floor plan.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notch: Option<[f64; 2]>,
    pub floor: Material,
    pub ceiling: Material,
    pub walls: Material,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ObjectSpec {
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        material: Material,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        /// Longitude subdivisions.
        segments: u32,
        /// Latitude subdivisions.
        rings: u32,
        material: Material,
    },
}

impl ObjectSpec {
    fn bounds(&self) -> Aabb {
        match *self {
            ObjectSpec::Box { center, half_extents, .. } => {
                let (c, h) = (Vec3::from_array(center), Vec3::from_array(half_extents));
                Aabb { min: c - h, max: c + h }
            }
            ObjectSpec::Sphere { center, radius, .. } => {
                let c = Vec3::from_array(center);
                Aabb {
                    min: c - Vec3::splat(radius),
                    max: c + Vec3::splat(radius),
                }
            }
        }
    }

    /// True if `p` lies inside the object grown by `margin`.
    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        match *self {
            ObjectSpec::Box { .. } => {
                let b = self.bounds();
                (0..3).all(|a| p[a] > b.min[a] - margin && p[a] < b.max[a] + margin)
            }
            ObjectSpec::Sphere { center, radius, .. } => (p - Vec3::from_array(center)).length() < radius + margin,
        }
    }
}

/// Specular lobe added on top of the Lambert term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Glossy {
    pub strength: f64,
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: RoomSpec,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    /// Direction toward the light.
    pub light_dir: [f64; 3],
    #[serde(default = "default_ambient")]
    pub ambient: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub glossy: Option<Glossy>,
    /// Largest quad edge on the room shell and on boxes; `None` keeps two
    /// triangles per face. Spheres are unaffected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tessellation: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_ambient() -> f64 {
    0.2
}

impl SceneSpec {
    pub fn empty_room(half_extents: [f64; 3], albedo: [f64; 3]) -> Self {
        Self {
            room: RoomSpec {
                half_extents,
                notch: None,
                floor: Material::flat(albedo),
                ceiling: Material::flat(albedo),
                walls: Material::flat(albedo),
            },
            objects: Vec::new(),
            light_dir: [0.3, 1.0, 0.2],
            ambient: 0.2,
            glossy: None,
            tessellation: None,
            seed: 0,
        }
    }

    /// Furnished room used by the end-to-end experiments: a textured table
    /// with a ball on it, two more objects, and low-texture walls.
    pub fn desk_room() -> Self {
        Self {
            room: RoomSpec {
                half_extents: [0.9, 0.55, 0.9],
                notch: None,
                floor: Material::checker([0.55, 0.42, 0.3], [0.35, 0.26, 0.18], 0.2),
                ceiling: Material::flat([0.8, 0.8, 0.78]),
                walls: Material::checker([0.7, 0.66, 0.56], [0.58, 0.6, 0.66], 0.3),
            },
            objects: vec![
                ObjectSpec::Box {
                    center: [0.1, -0.4, 0.0],
                    half_extents: [0.3, 0.15, 0.2],
                    material: Material::checker([0.75, 0.2, 0.15], [0.95, 0.85, 0.4], 0.08),
                },
                ObjectSpec::Sphere {
                    center: [0.15, -0.13, 0.0],
                    radius: 0.12,
                    segments: 24,
                    rings: 12,
                    material: Material::checker([0.2, 0.55, 0.85], [0.9, 0.9, 0.9], 0.06),
                },
                ObjectSpec::Box {
                    center: [-0.6, -0.35, 0.6],
                    half_extents: [0.15, 0.2, 0.15],
                    material: Material::checker([0.2, 0.3, 0.7], [0.6, 0.7, 0.9], 0.1),
                },
                ObjectSpec::Sphere {
                    center: [0.55, -0.33, -0.55],
                    radius: 0.2,
                    segments: 32,
                    rings: 16,
                    material: Material::checker([0.25, 0.65, 0.3], [0.85, 0.9, 0.5], 0.1),
                },
            ],
            light_dir: [0.4, 1.0, 0.25],
            ambient: 0.2,
            glossy: None,
            tessellation: None,
            seed: 0,
        }
    }

    /// L-shaped room with one box standing near the inner corner.
    pub fn l_room() -> Self {
        let mut spec = Self::empty_room([0.9, 0.5, 0.9], [0.6, 0.6, 0.6]);
        spec.room.notch = Some([0.2, 0.1]);
        spec.room.walls = Material::checker([0.7, 0.6, 0.5], [0.4, 0.45, 0.6], 0.25);
        spec.objects.push(ObjectSpec::Box {
            center: [-0.2, -0.3, -0.2],
            half_extents: [0.12, 0.2, 0.12],
            material: Material::flat([0.8, 0.3, 0.2]),
        });
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let h = Vec3::from_array(self.room.half_extents);
        if !(h.x > 0.0 && h.y > 0.0 && h.z > 0.0) || h.x > 1.0 || h.y > 1.0 || h.z > 1.0 {
            return Err(Error::Config("room must have positive half-extents no larger than 1".into()));
        }
        if let Some([nx, nz]) = self.room.notch {
            if !(nx.abs() < h.x && nz.abs() < h.z) {
                return Err(Error::Config("room notch must lie strictly inside the floor plan".into()));
            }
            if self.tessellation.is_some() {
                return Err(Error::Config("tessellation is not supported for L-shaped rooms".into()));
            }
        }
        if self.tessellation.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("tessellation must be > 0".into()));
        }
        if Vec3::from_array(self.light_dir).length() < 1e-12 {
            return Err(Error::Config("light_dir must be nonzero".into()));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            let b = obj.bounds();
            let inside = (0..3).all(|a| b.min[a] >= -h[a] && b.max[a] <= h[a])
                && self.room.notch.is_none_or(|[nx, nz]| b.max.x <= nx || b.max.z <= nz);
            if !inside {
                return Err(Error::Config(format!("object {i} is not inside the room")));
            }
            match *obj {
                ObjectSpec::Box { half_extents, .. } if half_extents.iter().any(|&e| !(e > 0.0)) => {
                    return Err(Error::Config(format!("object {i}: box half-extents must be positive")));
                }
                ObjectSpec::Sphere { radius, segments, rings, .. } if !(radius > 0.0) || segments < 3 || rings < 2 => {
                    return Err(Error::Config(format!("object {i}: sphere needs radius > 0, segments >= 3, rings >= 2")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// True if `p` is inside the room and outside every object grown by `margin`.
    pub fn is_free(&self, p: Vec3, margin: f64) -> bool {
        let h = Vec3::from_array(self.room.half_extents);
        let in_room = (0..3).all(|a| p[a].abs() < h[a] - margin)
            && self
                .room
                .notch
                .is_none_or(|[nx, nz]| p.x < nx - margin || p.z < nz - margin);
        in_room && !self.objects.iter().any(|o| o.contains(p, margin))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Surface {
    Floor,
    Ceiling,
    Wall,
    Object(u32),
}

/// A triangulated scene with per-triangle surface labels and materials.
#[derive(Debug, Clone)]
pub struct Scene {
    pub accel: MeshAccel,
    pub surfaces: Vec<Surface>,
    materials: Vec<Material>,
    light_dir: Vec3,
    ambient: f64,
    glossy: Option<Glossy>,
}

struct Builder {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    surfaces: Vec<Surface>,
    materials: Vec<Material>,
}

impl Builder {
    /// Adds a triangle whose normal is flipped, if needed, to face `toward`.
    fn push(&mut self, mut tri: [u32; 3], toward: Vec3, surface: Surface, material: Material) {
        let [a, b, c] = tri.map(|k| self.vertices[k as usize]);
        if (b - a).cross(c - a).dot(toward) < 0.0 {
            tri.swap(1, 2);
        }
        self.triangles.push(tri);
        self.surfaces.push(surface);
        self.materials.push(material);
    }

    fn add_vertex(&mut self, v: Vec3) -> u32 {
        self.vertices.push(v);
        (self.vertices.len() - 1) as u32
    }
}

fn floor_plan(room: &RoomSpec) -> Vec<[f64; 2]> {
    let [hx, _, hz] = room.half_extents;
    match room.notch {
        None => vec![[-hx, -hz], [hx, -hz], [hx, hz], [-hx, hz]],
        Some([nx, nz]) => vec![[-hx, -hz], [hx, -hz], [hx, nz], [nx, nz], [nx, hz], [-hx, hz]],
    }
}

fn add_room(b: &mut Builder, room: &RoomSpec) {
    let hy = room.half_extents[1];
    let plan = floor_plan(room);
    let n = plan.len() as u32;
    let bottom: Vec<u32> = plan.iter().map(|p| b.add_vertex(Vec3::new(p[0], -hy, p[1]))).collect();
    let top: Vec<u32> = plan.iter().map(|p| b.add_vertex(Vec3::new(p[0], hy, p[1]))).collect();
    // Wall normals are perpendicular to the plan edge; the sign is picked by
    // probing the plan interior.
    let centroid_probe = |p: [f64; 2], q: [f64; 2], nrm: [f64; 2]| {
        let m = [0.5 * (p[0] + q[0]) + 1e-3 * nrm[0], 0.5 * (p[1] + q[1]) + 1e-3 * nrm[1]];
        point_in_plan(&plan, m)
    };
    for i in 0..n as usize {
        let j = (i + 1) % n as usize;
        let (p, q) = (plan[i], plan[j]);
        let mut nrm = [q[1] - p[1], -(q[0] - p[0])];
        if !centroid_probe(p, q, nrm) {
            nrm = [-nrm[0], -nrm[1]];
        }
        let inward = Vec3::new(nrm[0], 0.0, nrm[1]);
        b.push([bottom[i], bottom[j], top[j]], inward, Surface::Wall, room.walls);
        b.push([bottom[i], top[j], top[i]], inward, Surface::Wall, room.walls);
    }
    // Both plans are star-shaped from vertex 0.
    for k in 1..n - 1 {
        let k = k as usize;
        b.push([bottom[0], bottom[k], bottom[k + 1]], Vec3::Y, Surface::Floor, room.floor);
        b.push([top[0], top[k], top[k + 1]], -Vec3::Y, Surface::Ceiling, room.ceiling);
    }
}

fn point_in_plan(plan: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut inside = false;
    let n = plan.len();
    for i in 0..n {
        let (a, c) = (plan[i], plan[(i + n - 1) % n]);
        if (a[1] > p[1]) != (c[1] > p[1]) && p[0] < (c[0] - a[0]) * (p[1] - a[1]) / (c[1] - a[1]) + a[0] {
            inside = !inside;
        }
    }
    inside
}

/// Axis-aligned box whose faces are split into a `counts` grid of quads,
/// sharing vertices along face seams. `face` labels each face from its axis
/// and side (0 = min, 1 = max).
fn add_grid_box(
    b: &mut Builder,
    min: Vec3,
    max: Vec3,
    counts: [u32; 3],
    inward: bool,
    face: impl Fn(usize, usize) -> (Surface, Material),
) {
    let mut lattice = std::collections::HashMap::new();
    let mut vertex = |b: &mut Builder, idx: [u32; 3]| -> u32 {
        *lattice.entry(idx).or_insert_with(|| {
            let at = |a: usize| min[a] + (max[a] - min[a]) * (idx[a] as f64 / counts[a] as f64);
            b.add_vertex(Vec3::new(at(0), at(1), at(2)))
        })
    };
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let (surface, material) = face(axis, side);
            let sign = if (side == 1) != inward { 1.0 } else { -1.0 };
            let toward = [Vec3::X, Vec3::Y, Vec3::Z][axis] * sign;
            for i in 0..counts[u] {
                for j in 0..counts[v] {
                    let corner = |di: u32, dj: u32| {
                        let mut idx = [0; 3];
                        idx[axis] = side as u32 * counts[axis];
                        idx[u] = i + di;
                        idx[v] = j + dj;
                        idx
                    };
                    let c = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)].map(|k| vertex(b, k));
                    b.push([c[0], c[1], c[2]], toward, surface, material);
                    b.push([c[0], c[2], c[3]], toward, surface, material);
                }
            }
        }
    }
}

fn grid_counts(extent: Vec3, cell: Option<f64>) -> [u32; 3] {
    let n = |e: f64| cell.map_or(1, |c| ((e / c).ceil() as u32).max(1));
    [n(extent.x), n(extent.y), n(extent.z)]
}

fn add_sphere(b: &mut Builder, center: Vec3, radius: f64, segments: u32, rings: u32, surface: Surface, material: Material) {
    use std::f64::consts::PI;
    let north = b.add_vertex(center + Vec3::Y * radius);
    let mut ring_start = Vec::new();
    for r in 1..rings {
        let theta = PI * r as f64 / rings as f64;
        ring_start.push(b.vertices.len() as u32);
        for s in 0..segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            let d = Vec3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin());
            b.add_vertex(center + d * radius);
        }
    }
    let south = b.add_vertex(center - Vec3::Y * radius);
    let at = |ring: usize, s: u32| ring_start[ring] + s % segments;
    let outward = |b: &Builder, tri: [u32; 3]| {
        let c = tri.iter().fold(Vec3::ZERO, |acc, &k| acc + b.vertices[k as usize]) / 3.0;
        c - center
    };
    for s in 0..segments {
        let t = [north, at(0, s), at(0, s + 1)];
        let o = outward(b, t);
        b.push(t, o, surface, material);
        for r in 0..ring_start.len() - 1 {
            for t in [[at(r, s), at(r + 1, s), at(r + 1, s + 1)], [at(r, s), at(r + 1, s + 1), at(r, s + 1)]] {
                let o = outward(b, t);
                b.push(t, o, surface, material);
            }
        }
        let last = ring_start.len() - 1;
        let t = [south, at(last, s + 1), at(last, s)];
        let o = outward(b, t);
        b.push(t, o, surface, material);
    }
}

/// Triangulates the room shell (inward-facing) and all objects
/// (outward-facing).
pub fn build_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut b = Builder {
        vertices: Vec::new(),
        triangles: Vec::new(),
        surfaces: Vec::new(),
        materials: Vec::new(),
    };
    let room = &spec.room;
    if room.notch.is_some() {
        add_room(&mut b, room);
    } else {
        let h = Vec3::from_array(room.half_extents);
        add_grid_box(&mut b, -h, h, grid_counts(h * 2.0, spec.tessellation), true, |axis, side| match (axis, side) {
            (1, 0) => (Surface::Floor, room.floor),
            (1, _) => (Surface::Ceiling, room.ceiling),
            _ => (Surface::Wall, room.walls),
        });
    }
    for (i, obj) in spec.objects.iter().enumerate() {
        let surface = Surface::Object(i as u32);
        match *obj {
            ObjectSpec::Box { center, half_extents, material } => {
                let (c, h) = (Vec3::from_array(center), Vec3::from_array(half_extents));
                let counts = grid_counts(h * 2.0, spec.tessellation);
                add_grid_box(&mut b, c - h, c + h, counts, false, |_, _| (surface, material));
            }
            ObjectSpec::Sphere {
                center,
                radius,
                segments,
                rings,
                material,
            } => add_sphere(&mut b, Vec3::from_array(center), radius, segments, rings, surface, material),
        }
    }
    let mesh = TriangleMesh::new(b.vertices, b.triangles)?;
    Ok(Scene {
        accel: MeshAccel::new(mesh)?,
        surfaces: b.surfaces,
        materials: b.materials,
        light_dir: Vec3::from_array(spec.light_dir).normalize(),
        ambient: spec.ambient,
        glossy: spec.glossy,
    })
}

impl Scene {
    pub fn mesh(&self) -> &TriangleMesh {
        &self.accel.mesh
    }

    /// Albedo at a surface point, with the checker evaluated in the plane
    /// spanned by the two axes least aligned with the triangle normal.
    pub fn albedo(&self, triangle: usize, point: Vec3) -> [f64; 3] {
        let m = &self.materials[triangle];
        let Some(ch) = m.checker else { return m.albedo };
        let n = self.mesh().normal(triangle);
        let a = Vec3::new(n.x.abs(), n.y.abs(), n.z.abs()).max_axis();
        let (u, v) = (point[(a + 1) % 3], point[(a + 2) % 3]);
        // Offset keeps square boundaries off the axis-aligned faces.
        let cell = (u / ch.scale + 0.5e-3).floor() as i64 + (v / ch.scale + 0.5e-3).floor() as i64;
        if cell.rem_euclid(2) == 0 {
            m.albedo
        } else {
            ch.albedo
        }
    }

    /// `albedo * max(0, n.l) + ambient`, plus the optional specular lobe,
    /// clamped to `[0, 1]`. `view_dir` points from the eye to the surface.
    pub fn shade(&self, triangle: usize, point: Vec3, view_dir: Vec3) -> [f64; 3] {
        let n = self.mesh().normal(triangle);
        let ndl = n.dot(self.light_dir);
        let diffuse = ndl.max(0.0);
        let mut spec = 0.0;
        if let Some(g) = self.glossy {
            if ndl > 0.0 {
                let r = n * (2.0 * ndl) - self.light_dir;
                spec = g.strength * r.dot(-view_dir).max(0.0).powf(g.exponent);
            }
        }
        self.albedo(triangle, point)
            .map(|a| (a * diffuse + self.ambient + spec).clamp(0.0, 1.0))
    }
}

/// Ground-truth view: Lambert image, scaffold distance and hit triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image: Image,
    pub distance: DistanceMap,
    pub triangle: Vec<Option<u32>>,
}

/// One primary ray per pixel center, black on miss. Uses the same rays and
/// BVH as the scaffold distance bake.
pub fn render_gt(scene: &Scene, camera: &CameraModel) -> GroundTruth {
    let (w, h) = (camera.width(), camera.height());
    let pixels: Vec<([f64; 3], f64, Option<u32>)> = (0..w as usize * h as usize)
        .into_par_iter()
        .map(|i| {
            let ray = camera.pixel_center_ray(i as u32 % w, i as u32 / w);
            match scene.accel.raycast(&ray) {
                Some(hit) => (
                    scene.shade(hit.triangle_id as usize, hit.point, ray.direction),
                    hit.t,
                    Some(hit.triangle_id),
                ),
                None => ([0.0; 3], DistanceMap::MISS, None),
            }
        })
        .collect();
    let mut image = Image::new(w, h);
    let mut distance = DistanceMap {
        width: w,
        height: h,
        values: Vec::with_capacity(pixels.len()),
    };
    let mut triangle = Vec::with_capacity(pixels.len());
    for (i, (c, d, t)) in pixels.into_iter().enumerate() {
        image.data[i] = c;
        distance.values.push(d);
        triangle.push(t);
    }
    GroundTruth { image, distance, triangle }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub n_train: usize,
    pub width: u32,
    pub height: u32,
    pub fov_x_deg: f64,
    /// Point the orbit cameras look at.
    pub focus: [f64; 3],
    pub orbit_radius: f64,
    /// Height of the orbit cameras.
    pub orbit_y: f64,
    pub orbit_start_deg: f64,
    pub orbit_arc_deg: f64,
    /// Position of the sweep cameras, which turn through a full circle.
    pub sweep_center: [f64; 3],
    pub sweep_pitch_deg: f64,
    /// Extrapolation positions span this box on a regular grid.
    pub extrap_min: [f64; 3],
    pub extrap_max: [f64; 3],
    pub extrap_grid: [usize; 3],
    pub extrap_yaws: usize,
    pub extrap_pitch_deg: f64,
}

impl TrajectorySpec {
    pub fn desk_room(width: u32, height: u32) -> Self {
        Self {
            n_train: 40,
            width,
            height,
            fov_x_deg: 70.0,
            focus: [0.1, -0.3, 0.0],
            orbit_radius: 0.45,
            orbit_y: 0.4,
            orbit_start_deg: 110.0,
            orbit_arc_deg: 200.0,
            sweep_center: [-0.1, 0.05, -0.35],
            sweep_pitch_deg: -5.0,
            extrap_min: [-0.45, -0.05, -0.45],
            extrap_max: [0.45, 0.2, 0.45],
            extrap_grid: [2, 1, 2],
            extrap_yaws: 8,
            extrap_pitch_deg: -12.0,
        }
    }

    pub fn n_orbit(&self) -> usize {
        (0.8 * self.n_train as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub train: Vec<CameraModel>,
    pub interp: Vec<CameraModel>,
    pub extrap: Vec<CameraModel>,
}

/// Camera at `eye` with the given yaw about +y (0 looks down -z) and pitch.
pub fn yaw_pitch_camera(eye: Vec3, yaw_deg: f64, pitch_deg: f64, width: u32, height: u32, fov_x_deg: f64) -> Result<CameraModel> {
    let (yaw, pitch) = (yaw_deg.to_radians(), pitch_deg.to_radians());
    let dir = Vec3::new(-yaw.sin() * pitch.cos(), pitch.sin(), -yaw.cos() * pitch.cos());
    CameraModel::look_at(eye, eye + dir, Vec3::Y, width, height, fov_x_deg.to_radians())
}

fn to_quat(rot: [[f64; 3]; 3]) -> UnitQuaternion<f64> {
    let m = Matrix3::from_fn(|i, j| rot[i][j]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// Pose midpoint: position lerp and rotation slerp, intrinsics from `a`.
pub fn midpoint_camera(a: &CameraModel, b: &CameraModel) -> Result<CameraModel> {
    let q = to_quat(a.rotation()).slerp(&to_quat(b.rotation()), 0.5);
    let r = q.to_rotation_matrix();
    let p = a.position().lerp(b.position(), 0.5);
    let m = r.matrix();
    let pose = [
        m[(0, 0)], m[(0, 1)], m[(0, 2)], p.x, //
        m[(1, 0)], m[(1, 1)], m[(1, 2)], p.y, //
        m[(2, 0)], m[(2, 1)], m[(2, 2)], p.z, //
        0.0, 0.0, 0.0, 1.0,
    ];
    CameraModel::new(a.fx(), a.fy(), a.cx(), a.cy(), a.width(), a.height(), pose)
}

fn grid_coord(min: f64, max: f64, n: usize, i: usize) -> f64 {
    if n == 1 {
        0.5 * (min + max)
    } else {
        min + (max - min) * i as f64 / (n - 1) as f64
    }
}

/// Imbalanced training trajectory plus interpolation and extrapolation
/// cameras. Four fifths of the training views orbit the focus point; the
/// rest turn in place to glance at the remaining walls.
pub fn make_trajectory(scene: &SceneSpec, t: &TrajectorySpec) -> Result<Trajectory> {
    if t.n_train < 4 {
        return Err(Error::Config("n_train must be >= 4".into()));
    }
    if t.extrap_yaws == 0 || t.extrap_grid.contains(&0) {
        return Err(Error::Config("extrapolation grid and yaw count must be positive".into()));
    }
    let (w, h, fov) = (t.width, t.height, t.fov_x_deg);
    let focus = Vec3::from_array(t.focus);
    let n_orbit = t.n_orbit();
    let n_sweep = t.n_train - n_orbit;
    let mut train = Vec::with_capacity(t.n_train);
    for i in 0..n_orbit {
        let frac = if n_orbit > 1 { i as f64 / (n_orbit - 1) as f64 } else { 0.5 };
        let a = (t.orbit_start_deg + t.orbit_arc_deg * frac).to_radians();
        let eye = Vec3::new(focus.x + t.orbit_radius * a.cos(), t.orbit_y, focus.z + t.orbit_radius * a.sin());
        train.push(CameraModel::look_at(eye, focus, Vec3::Y, w, h, fov.to_radians())?);
    }
    let sweep_eye = Vec3::from_array(t.sweep_center);
    for i in 0..n_sweep {
        let yaw = 360.0 * i as f64 / n_sweep as f64;
        train.push(yaw_pitch_camera(sweep_eye, yaw, t.sweep_pitch_deg, w, h, fov)?);
    }
    let interp = train
        .windows(2)
        .map(|p| midpoint_camera(&p[0], &p[1]))
        .collect::<Result<Vec<_>>>()?;
    let mut extrap = Vec::new();
    let [nx, ny, nz] = t.extrap_grid;
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let eye = Vec3::new(
                    grid_coord(t.extrap_min[0], t.extrap_max[0], nx, ix),
                    grid_coord(t.extrap_min[1], t.extrap_max[1], ny, iy),
                    grid_coord(t.extrap_min[2], t.extrap_max[2], nz, iz),
                );
                for k in 0..t.extrap_yaws {
                    let yaw = 360.0 * k as f64 / t.extrap_yaws as f64;
                    extrap.push(yaw_pitch_camera(eye, yaw, t.extrap_pitch_deg, w, h, fov)?);
                }
            }
        }
    }
    for (name, cams) in [("train", &train), ("extrap", &extrap)] {
        if let Some(c) = cams.iter().find(|c| !scene.is_free(c.position(), 0.02)) {
            return Err(Error::Config(format!(
                "{name} camera at {:?} is outside the room or inside an object",
                c.position().to_array()
            )));
        }
    }
    Ok(Trajectory { train, interp, extrap })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    /// Uniform noise in `[-mag, mag]` on every vertex coordinate.
    VertexNoise,
    /// Removes `floor(mag * T)` random triangles.
    DeleteRandomFaces,
    /// Translates one object (connected component) by `mag` along a random
    /// horizontal direction.
    OffsetObject,
}

impl std::str::FromStr for PerturbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vertex-noise" => Ok(Self::VertexNoise),
            "delete-random-faces" => Ok(Self::DeleteRandomFaces),
            "offset-object" => Ok(Self::OffsetObject),
            other => Err(Error::Config(format!("unknown perturbation mode {other:?}"))),
        }
    }
}

/// Triangle sets of the connected components of `mesh` (triangles sharing
/// a vertex index), ordered by their smallest triangle id.
pub fn connected_components(mesh: &TriangleMesh) -> Vec<Vec<u32>> {
    let mut parent: Vec<usize> = (0..mesh.vertices().len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for t in mesh.triangles() {
        for k in 1..3 {
            let (a, b) = (find(&mut parent, t[0] as usize), find(&mut parent, t[k] as usize));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut comps: Vec<Vec<u32>> = Vec::new();
    let mut index_of = std::collections::HashMap::new();
    for (i, t) in mesh.triangles().iter().enumerate() {
        let root = find(&mut parent, t[0] as usize);
        let slot = *index_of.entry(root).or_insert_with(|| {
            comps.push(Vec::new());
            comps.len() - 1
        });
        comps[slot].push(i as u32);
    }
    comps
}

/// Component `offset-object` moves: the seed picks among all components
/// except the one spanning the mesh bounds (the room shell).
pub fn offset_target(mesh: &TriangleMesh, seed: u64) -> Option<Vec<u32>> {
    let bounds = mesh.bounds();
    let comps = connected_components(mesh);
    let candidates: Vec<&Vec<u32>> = comps
        .iter()
        .filter(|c| {
            let b = c
                .iter()
                .fold(Aabb::EMPTY, |acc, &t| acc.union(mesh.triangle_bounds(t as usize)));
            b != bounds
        })
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Some(candidates[rng.gen_range(0..candidates.len())].clone())
}

/// Corrupts a scaffold mesh. Magnitude 0 returns the input unchanged.
pub fn perturb_scaffold(mesh: &TriangleMesh, mode: PerturbMode, magnitude: f64, seed: u64) -> Result<TriangleMesh> {
    if !(magnitude >= 0.0) {
        return Err(Error::Config("perturbation magnitude must be >= 0".into()));
    }
    if magnitude == 0.0 {
        return Ok(mesh.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        PerturbMode::VertexNoise => {
            let noise: Vec<Vec3> = (0..mesh.vertices().len())
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-magnitude..=magnitude),
                        rng.gen_range(-magnitude..=magnitude),
                        rng.gen_range(-magnitude..=magnitude),
                    )
                })
                .collect();
            let vertices = mesh.vertices().iter().zip(&noise).map(|(&v, &n)| v + n).collect();
            TriangleMesh::new(vertices, mesh.triangles().to_vec())
        }
        PerturbMode::DeleteRandomFaces => {
            if magnitude > 1.0 {
                return Err(Error::Config("delete-random-faces magnitude must be <= 1".into()));
            }
            let n = mesh.len();
            let remove = (magnitude * n as f64).floor() as usize;
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut rng);
            let mut keep = vec![true; n];
            for &i in &ids[..remove] {
                keep[i] = false;
            }
            let triangles = mesh
                .triangles()
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(t, _)| *t)
                .collect();
            TriangleMesh::new(mesh.vertices().to_vec(), triangles)
        }
        PerturbMode::OffsetObject => {
            let Some(target) = offset_target(mesh, seed) else {
                return Err(Error::Data("offset-object: scaffold has no object besides the room".into()));
            };
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let offset = Vec3::new(angle.cos(), 0.0, angle.sin()) * magnitude;
            let mut moved = vec![false; mesh.vertices().len()];
            for &t in &target {
                for k in mesh.triangles()[t as usize] {
                    moved[k as usize] = true;
                }
            }
            let vertices = mesh
                .vertices()
                .iter()
                .zip(&moved)
                .map(|(&v, &m)| if m { v + offset } else { v })
                .collect();
            TriangleMesh::new(vertices, mesh.triangles().to_vec())
        }
    }
}
