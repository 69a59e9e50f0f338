//! Pinhole camera with a rigid camera-to-world pose.
//!
//! Convention: right-handed camera frame, the camera looks down `-z`,
//! image `x` grows to the right and image `y` grows downward. Pixel `i`
//! is sampled at `i + 0.5`.

use super::{Ray, Vec3};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Serialized camera record: intrinsics plus a row-major 4x4 pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub cam_to_world: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraModel {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    /// Columns are the camera's right, up and back axes in world space.
    rotation: [[f64; 3]; 3],
    position: Vec3,
}

/// Result of projecting a world point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub px: f64,
    pub py: f64,
    /// Euclidean distance from the camera center.
    pub dist: f64,
    pub in_front: bool,
}

impl Projection {
    /// Whether the projection lands inside `[0, W) x [0, H)` in front of the camera.
    pub fn in_frustum(&self, width: u32, height: u32) -> bool {
        self.in_front
            && self.px >= 0.0
            && self.py >= 0.0
            && self.px < width as f64
            && self.py < height as f64
    }
}

impl CameraModel {
    /// Builds a camera from intrinsics and a row-major 4x4 camera-to-world
    /// transform. The rotation block must be orthonormal with determinant +1.
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        cam_to_world: [f64; 16],
    ) -> Result<Self> {
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!(
                "non-invertible intrinsics: fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::Config("principal point must be finite".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        let m = &cam_to_world;
        let rotation = [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]];
        check_rotation(&rotation)?;
        let position = Vec3::new(m[3], m[7], m[11]);
        if !position.is_finite() {
            return Err(Error::Config("camera position must be finite".into()));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            position,
        })
    }

    /// Camera at `eye` looking at `target`, with the principal point at the
    /// image center and the given horizontal field of view (radians).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, width: u32, height: u32, fov_x: f64) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(up).normalize();
        if right.length() < 0.5 {
            return Err(Error::Config("look_at: up vector parallel to view direction".into()));
        }
        let true_up = right.cross(forward);
        let back = -forward;
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        let pose = [
            right.x, true_up.x, back.x, eye.x, //
            right.y, true_up.y, back.y, eye.y, //
            right.z, true_up.z, back.z, eye.z, //
            0.0, 0.0, 0.0, 1.0,
        ];
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height, pose)
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn position(&self) -> Vec3 {
        self.position
    }
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        self.rotation
    }
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// World-space viewing direction (the camera's `-z` axis).
    pub fn forward(&self) -> Vec3 {
        -self.column(2)
    }

    fn column(&self, c: usize) -> Vec3 {
        Vec3::new(self.rotation[0][c], self.rotation[1][c], self.rotation[2][c])
    }

    fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    fn rotate_inv(&self, v: Vec3) -> Vec3 {
        Vec3::new(self.column(0).dot(v), self.column(1).dot(v), self.column(2).dot(v))
    }

    /// Row-major 4x4 camera-to-world matrix.
    pub fn cam_to_world(&self) -> [f64; 16] {
        let r = &self.rotation;
        let p = self.position;
        [
            r[0][0], r[0][1], r[0][2], p.x, //
            r[1][0], r[1][1], r[1][2], p.y, //
            r[2][0], r[2][1], r[2][2], p.z, //
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Ray from the camera center through image coordinates `(px, py)`.
    /// Integer pixel `i` has its center at `i + 0.5`.
    pub fn pixel_to_ray(&self, px: f64, py: f64) -> Ray {
        let d_cam = Vec3::new((px - self.cx) / self.fx, -(py - self.cy) / self.fy, -1.0);
        Ray::new(self.position, self.rotate(d_cam), 0.0, f64::INFINITY)
    }

    /// Ray through the center of integer pixel `(ix, iy)`.
    pub fn pixel_center_ray(&self, ix: u32, iy: u32) -> Ray {
        self.pixel_to_ray(ix as f64 + 0.5, iy as f64 + 0.5)
    }

    /// Projects a world point. `px`/`py` are NaN when the point is not in front.
    pub fn project_point(&self, point: Vec3) -> Projection {
        let rel = point - self.position;
        let dist = rel.length();
        let p_cam = self.rotate_inv(rel);
        let depth = -p_cam.z;
        if depth <= 0.0 {
            return Projection {
                px: f64::NAN,
                py: f64::NAN,
                dist,
                in_front: false,
            };
        }
        Projection {
            px: self.cx + self.fx * p_cam.x / depth,
            py: self.cy - self.fy * p_cam.y / depth,
            dist,
            in_front: true,
        }
    }

    /// Applies a rigid world transform `x -> rot * x + trans` to the pose.
    pub fn transformed(&self, rot: &[[f64; 3]; 3], trans: Vec3) -> Result<Self> {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| rot[i][k] * self.rotation[k][j]).sum();
            }
        }
        let p = self.position;
        let np = Vec3::new(
            rot[0][0] * p.x + rot[0][1] * p.y + rot[0][2] * p.z,
            rot[1][0] * p.x + rot[1][1] * p.y + rot[1][2] * p.z,
            rot[2][0] * p.x + rot[2][1] * p.y + rot[2][2] * p.z,
        ) + trans;
        let pose = [
            r[0][0], r[0][1], r[0][2], np.x, //
            r[1][0], r[1][1], r[1][2], np.y, //
            r[2][0], r[2][1], r[2][2], np.z, //
            0.0, 0.0, 0.0, 1.0,
        ];
        Self::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)
    }
}

fn check_rotation(r: &[[f64; 3]; 3]) -> Result<()> {
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let expected = if i == j { 1.0 } else { 0.0 };
            if !((dot - expected).abs() <= ORTHONORMAL_TOL) {
                return Err(Error::Config(format!(
                    "camera rotation is not orthonormal (column dot [{i}][{j}] = {dot})"
                )));
            }
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::Config(format!("camera rotation has determinant {det}")));
    }
    Ok(())
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let pose: [f64; 16] = r.cam_to_world.as_slice().try_into().map_err(|_| {
            Error::Config(format!(
                "cam_to_world must hold 16 values, got {}",
                r.cam_to_world.len()
            ))
        })?;
        CameraModel::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height, pose)
    }
}

impl From<CameraModel> for CameraRecord {
    fn from(c: CameraModel) -> Self {
        CameraRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            cam_to_world: c.cam_to_world().to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const IDENTITY: [f64; 16] = [
        1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
    ];

    #[test]
    fn principal_axis_ray_looks_down_negative_z() {
        let cam = CameraModel::new(1.0, 1.0, 0.0, 0.0, 4, 4, IDENTITY).unwrap();
        let ray = cam.pixel_to_ray(0.0, 0.0);
        assert_eq!(ray.direction, Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(ray.origin, Vec3::ZERO);
    }

    #[test]
    fn principal_point_maps_to_forward_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let cam = random_camera(&mut rng);
            let ray = cam.pixel_to_ray(cam.cx(), cam.cy());
            assert!((ray.direction - cam.forward()).length() < 1e-12);
        }
    }

    #[test]
    fn point_at_center_is_not_in_front() {
        let cam = CameraModel::new(50.0, 50.0, 32.0, 32.0, 64, 64, IDENTITY).unwrap();
        let p = cam.project_point(Vec3::ZERO);
        assert_eq!(p.dist, 0.0);
        assert!(!p.in_front);
    }

    #[test]
    fn on_axis_point_projects_to_principal_point() {
        let cam = CameraModel::new(50.0, 50.0, 32.0, 32.0, 64, 64, IDENTITY).unwrap();
        let p = cam.project_point(Vec3::new(0.0, 0.0, -2.0));
        assert_eq!((p.px, p.py, p.dist, p.in_front), (32.0, 32.0, 2.0, true));
    }

    #[test]
    fn image_y_grows_downward() {
        let cam = CameraModel::new(50.0, 50.0, 32.0, 32.0, 64, 64, IDENTITY).unwrap();
        let p = cam.project_point(Vec3::new(0.1, 0.1, -1.0));
        assert!(p.px > 32.0 && p.py < 32.0);
    }

    #[test]
    fn pixel_ray_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let cam = random_camera(&mut rng);
            let px = rng.gen_range(0.0..cam.width() as f64);
            let py = rng.gen_range(0.0..cam.height() as f64);
            let ray = cam.pixel_to_ray(px, py);
            let proj = cam.project_point(ray.at(0.7));
            assert!(proj.in_front);
            assert!((proj.px - px).abs() < 1e-6, "{} vs {}", proj.px, px);
            assert!((proj.py - py).abs() < 1e-6);
            assert!((proj.dist - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_intrinsics_and_rotations() {
        assert!(matches!(
            CameraModel::new(0.0, 1.0, 0.0, 0.0, 4, 4, IDENTITY),
            Err(Error::Config(_))
        ));
        let mut skew = IDENTITY;
        skew[1] = 0.1;
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, 4, 4, skew).is_err());
        let mut mirror = IDENTITY;
        mirror[0] = -1.0;
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, 4, 4, mirror).is_err());
    }

    #[test]
    fn json_record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = random_camera(&mut rng);
        let s = serde_json::to_string(&cam).unwrap();
        let back: CameraModel = serde_json::from_str(&s).unwrap();
        assert_eq!(cam, back);
        assert!(serde_json::from_str::<CameraModel>(
            r#"{"fx":1,"fy":1,"cx":0,"cy":0,"width":2,"height":2,"cam_to_world":[1,0,0]}"#
        )
        .is_err());
    }

    pub(crate) fn random_camera(rng: &mut impl Rng) -> CameraModel {
        let eye = Vec3::new(
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
        );
        let target = Vec3::new(
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
        );
        let w = rng.gen_range(16..96);
        let h = rng.gen_range(16..96);
        let fov = rng.gen_range(0.5..1.6);
        CameraModel::look_at(eye, target + Vec3::new(0.0, 0.0, 2.0), Vec3::Y, w, h, fov)
            .or_else(|_| CameraModel::look_at(eye, target, Vec3::X, w, h, fov))
            .unwrap()
    }
}
