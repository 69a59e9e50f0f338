//! Dense voxel radiance field.
//!
//! Each of the `R^3` grid vertices (spanning `[-1, 1]^3`) stores one raw
//! density and `3 * B` spherical-harmonic color coefficients, `B = (L+1)^2`.
//! Queries blend the eight surrounding vertices trilinearly; density goes
//! through softplus and color through a sigmoid of the SH expansion.

use crate::geometry::Vec3;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest supported SH degree.
pub const MAX_SH_DEGREE: u32 = 2;
/// Largest per-vertex feature count (degree 2: 1 + 3 * 9).
pub const MAX_FEATURES: usize = 1 + 3 * 9;

/// Density every vertex starts with, after softplus.
pub const INITIAL_DENSITY: f64 = 0.1;

const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

pub fn sh_basis_count(degree: u32) -> usize {
    ((degree + 1) * (degree + 1)) as usize
}

/// Real spherical harmonics up to `degree` evaluated at unit direction `d`.
/// Only the first `sh_basis_count(degree)` entries are written.
pub fn sh_basis(degree: u32, d: Vec3, out: &mut [f64; 9]) {
    out[0] = SH_C0;
    if degree >= 1 {
        out[1] = -SH_C1 * d.y;
        out[2] = SH_C1 * d.z;
        out[3] = -SH_C1 * d.x;
    }
    if degree >= 2 {
        let (x, y, z) = (d.x, d.y, d.z);
        out[4] = SH_C2[0] * x * y;
        out[5] = SH_C2[1] * y * z;
        out[6] = SH_C2[2] * (2.0 * z * z - x * x - y * y);
        out[7] = SH_C2[3] * x * z;
        out[8] = SH_C2[4] * (x * x - y * y);
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Density and view-dependent color at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    /// Volume density per scene unit, `>= 0`.
    pub sigma: f64,
    /// Each channel in `(0, 1)`.
    pub rgb: [f64; 3],
}

/// The eight vertices around a query point and their blend weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub vertices: [u32; 8],
    pub weights: [f64; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    sh_degree: u32,
    /// Vertex-major: `[density, sh(r)..., sh(g)..., sh(b)...]` per vertex,
    /// vertex index `(z * R + y) * R + x`.
    params: Vec<f64>,
}

impl VoxelGrid {
    /// Density at softplus(raw) = 0.1 everywhere, DC color coefficients
    /// uniform in `[-0.1, 0.1]`, higher orders zero. Deterministic in `seed`.
    pub fn init(resolution: usize, sh_degree: u32, seed: u64) -> Result<Self> {
        let mut grid = Self::zeros(resolution, sh_degree)?;
        let raw = softplus_inv(INITIAL_DENSITY);
        let b = grid.basis_count();
        let f = grid.features_per_vertex();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for vertex in grid.params.chunks_exact_mut(f) {
            vertex[0] = raw;
            for c in 0..3 {
                vertex[1 + c * b] = rng.gen_range(-0.1..=0.1);
            }
        }
        Ok(grid)
    }

    pub fn zeros(resolution: usize, sh_degree: u32) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Config(format!("grid resolution must be >= 2, got {resolution}")));
        }
        if sh_degree > MAX_SH_DEGREE {
            return Err(Error::Config(format!(
                "SH degree {sh_degree} unsupported (max {MAX_SH_DEGREE})"
            )));
        }
        let f = 1 + 3 * sh_basis_count(sh_degree);
        Ok(Self {
            resolution,
            sh_degree,
            params: vec![0.0; resolution.pow(3) * f],
        })
    }

    /// Builds a grid from separate density and SH arrays, the on-disk layout.
    pub fn from_parts(resolution: usize, sh_degree: u32, density: &[f64], sh: &[f64]) -> Result<Self> {
        let mut grid = Self::zeros(resolution, sh_degree)?;
        let n = grid.vertex_count();
        let cb = 3 * grid.basis_count();
        if density.len() != n || sh.len() != n * cb {
            return Err(Error::Data(format!(
                "grid part sizes ({}, {}) do not match resolution {resolution} / degree {sh_degree}",
                density.len(),
                sh.len()
            )));
        }
        let f = grid.features_per_vertex();
        for (v, vertex) in grid.params.chunks_exact_mut(f).enumerate() {
            vertex[0] = density[v];
            vertex[1..].copy_from_slice(&sh[v * cb..(v + 1) * cb]);
        }
        Ok(grid)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn sh_degree(&self) -> u32 {
        self.sh_degree
    }

    pub fn basis_count(&self) -> usize {
        sh_basis_count(self.sh_degree)
    }

    /// `1 + 3B`.
    pub fn features_per_vertex(&self) -> usize {
        1 + 3 * self.basis_count()
    }

    pub fn vertex_count(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn density_param(&self, vertex: usize) -> f64 {
        self.params[vertex * self.features_per_vertex()]
    }

    /// Raw densities, one per vertex.
    pub fn raw_density(&self) -> Vec<f64> {
        self.params.iter().step_by(self.features_per_vertex()).copied().collect()
    }

    /// SH coefficients, vertex-major then channel then basis.
    pub fn sh_coeffs(&self) -> Vec<f64> {
        let f = self.features_per_vertex();
        self.params.chunks_exact(f).flat_map(|v| v[1..].iter().copied()).collect()
    }

    pub fn vertex_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    pub fn vertex_position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let s = 2.0 / (self.resolution - 1) as f64;
        Vec3::new(-1.0 + s * x as f64, -1.0 + s * y as f64, -1.0 + s * z as f64)
    }

    /// Trilinear stencil at `point`, clamped to the grid bounds.
    #[inline]
    pub fn stencil(&self, point: Vec3) -> Stencil {
        let r = self.resolution;
        let scale = 0.5 * (r - 1) as f64;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for axis in 0..3 {
            let g = ((point[axis].clamp(-1.0, 1.0)) + 1.0) * scale;
            let i = (g.floor() as usize).min(r - 2);
            base[axis] = i;
            frac[axis] = g - i as f64;
        }
        let [fx, fy, fz] = frac;
        let v000 = self.vertex_index(base[0], base[1], base[2]) as u32;
        let (dx, dy, dz) = (1u32, r as u32, (r * r) as u32);
        let vertices = [
            v000,
            v000 + dx,
            v000 + dy,
            v000 + dx + dy,
            v000 + dz,
            v000 + dx + dz,
            v000 + dy + dz,
            v000 + dx + dy + dz,
        ];
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        let weights = [
            gx * gy * gz,
            fx * gy * gz,
            gx * fy * gz,
            fx * fy * gz,
            gx * gy * fz,
            fx * gy * fz,
            gx * fy * fz,
            fx * fy * fz,
        ];
        Stencil { vertices, weights }
    }

    /// Blends the raw per-vertex features at `point` into `out[..1 + 3B]`.
    #[inline]
    pub fn interpolate(&self, stencil: &Stencil, out: &mut [f64]) {
        let f = self.features_per_vertex();
        let out = &mut out[..f];
        out.fill(0.0);
        for (&v, &w) in stencil.vertices.iter().zip(&stencil.weights) {
            let src = &self.params[v as usize * f..(v as usize + 1) * f];
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }

    /// Raw feature vector at `point`.
    pub fn trilinear_sample(&self, point: Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.features_per_vertex()];
        self.interpolate(&self.stencil(point), &mut out);
        out
    }

    /// Adds `scale * grad_features` into `grad` at the stencil's vertices with
    /// the same trilinear weights used by the forward pass.
    #[inline]
    pub fn scatter(&self, stencil: &Stencil, grad_features: &[f64], scale: f64, grad: &mut [f64]) {
        let f = self.features_per_vertex();
        for (&v, &w) in stencil.vertices.iter().zip(&stencil.weights) {
            let ws = w * scale;
            if ws == 0.0 {
                continue;
            }
            let dst = &mut grad[v as usize * f..(v as usize + 1) * f];
            for (d, g) in dst.iter_mut().zip(grad_features) {
                *d += ws * g;
            }
        }
    }

    /// Decodes raw features into density and color for view direction `dir`.
    #[inline]
    pub fn decode(&self, features: &[f64], dir: Vec3) -> FieldSample {
        let b = self.basis_count();
        let mut basis = [0.0; 9];
        sh_basis(self.sh_degree, dir, &mut basis);
        let mut rgb = [0.0; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let coeffs = &features[1 + c * b..1 + (c + 1) * b];
            let s: f64 = coeffs.iter().zip(&basis[..b]).map(|(k, y)| k * y).sum();
            *out = sigmoid(s);
        }
        FieldSample {
            sigma: softplus(features[0]),
            rgb,
        }
    }

    /// Gradient of a scalar w.r.t. the raw features, given its gradient
    /// w.r.t. the decoded sample.
    #[inline]
    pub fn decode_backward(
        &self,
        features: &[f64],
        dir: Vec3,
        sample: &FieldSample,
        d_sigma: f64,
        d_rgb: [f64; 3],
        out: &mut [f64],
    ) {
        let b = self.basis_count();
        let mut basis = [0.0; 9];
        sh_basis(self.sh_degree, dir, &mut basis);
        out[0] = d_sigma * sigmoid(features[0]);
        for c in 0..3 {
            let rgb = sample.rgb[c];
            let g = d_rgb[c] * rgb * (1.0 - rgb);
            for k in 0..b {
                out[1 + c * b + k] = g * basis[k];
            }
        }
    }

    pub fn eval_field(&self, point: Vec3, dir: Vec3) -> FieldSample {
        let mut feats = [0.0; MAX_FEATURES];
        self.interpolate(&self.stencil(point), &mut feats);
        self.decode(&feats, dir)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_grid(r: usize, degree: u32, seed: u64) -> VoxelGrid {
        let mut grid = VoxelGrid::zeros(r, degree).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in grid.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        grid
    }

    fn random_point(rng: &mut impl Rng) -> Vec3 {
        Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    }

    fn random_dir(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = random_point(rng);
            if v.length() > 0.1 {
                return v.normalize();
            }
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(VoxelGrid::init(2, 0, 1).unwrap().param_count(), 8 + 8 * 3);
        assert_eq!(VoxelGrid::init(4, 1, 1).unwrap().param_count(), 832);
        assert!(VoxelGrid::init(1, 1, 1).is_err());
        assert!(VoxelGrid::init(4, 3, 1).is_err());
    }

    #[test]
    fn init_is_deterministic_and_in_range() {
        let a = VoxelGrid::init(5, 1, 77).unwrap();
        let b = VoxelGrid::init(5, 1, 77).unwrap();
        assert_eq!(a, b);
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, VoxelGrid::init(5, 1, 78).unwrap());
        let f = a.features_per_vertex();
        for v in a.params().chunks_exact(f) {
            assert!((softplus(v[0]) - INITIAL_DENSITY).abs() < 1e-12);
            for c in 0..3 {
                assert!(v[1 + c * 4].abs() <= 0.1);
                assert!(v[2 + c * 4..1 + (c + 1) * 4].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn vertex_and_cell_center_samples() {
        let grid = random_grid(4, 1, 3);
        let f = grid.features_per_vertex();
        let v = grid.vertex_index(1, 2, 3);
        let got = grid.trilinear_sample(grid.vertex_position(1, 2, 3));
        for k in 0..f {
            assert!((got[k] - grid.params()[v * f + k]).abs() < 1e-12);
        }
        let center = (grid.vertex_position(1, 1, 1) + grid.vertex_position(2, 2, 2)) * 0.5;
        let got = grid.trilinear_sample(center);
        let stencil = grid.stencil(center);
        for k in 0..f {
            let mean: f64 = stencil.vertices.iter().map(|&v| grid.params()[v as usize * f + k]).sum::<f64>() / 8.0;
            assert!((got[k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_points_clamp() {
        let grid = random_grid(3, 0, 4);
        let a = grid.trilinear_sample(Vec3::new(5.0, -7.0, 0.3));
        let b = grid.trilinear_sample(Vec3::new(1.0, -1.0, 0.3));
        assert_eq!(a, b);
    }

    #[test]
    fn weights_nonnegative_sum_to_one_and_affine_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = 6;
        let mut grid = VoxelGrid::zeros(r, 0).unwrap();
        let (a, bx, by, bz) = (0.3, 1.7, -0.4, 2.2);
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    let p = grid.vertex_position(x, y, z);
                    let v = grid.vertex_index(x, y, z);
                    grid.params_mut()[v * 4] = a + bx * p.x + by * p.y + bz * p.z;
                }
            }
        }
        for _ in 0..1000 {
            let p = random_point(&mut rng);
            let s = grid.stencil(p);
            assert!(s.weights.iter().all(|&w| w >= 0.0));
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let got = grid.trilinear_sample(p)[0];
            assert!((got - (a + bx * p.x + by * p.y + bz * p.z)).abs() < 1e-12);
        }
    }

    #[test]
    fn continuous_across_cell_faces() {
        let grid = random_grid(5, 1, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let face = grid.vertex_position(2, 0, 0).x;
        for _ in 0..200 {
            let (y, z) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let d = random_dir(&mut rng);
            let left = grid.eval_field(Vec3::new(face - 1e-13, y, z), d);
            let right = grid.eval_field(Vec3::new(face + 1e-13, y, z), d);
            let on = grid.eval_field(Vec3::new(face, y, z), d);
            for s in [left, right] {
                assert!((s.sigma - on.sigma).abs() < 1e-12);
                for c in 0..3 {
                    assert!((s.rgb[c] - on.rgb[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dc_only_color_is_view_independent() {
        let grid = random_grid(3, 0, 7);
        let p = Vec3::new(0.1, 0.2, -0.3);
        let d = Vec3::new(0.3, -0.5, 0.81).normalize();
        assert_eq!(grid.eval_field(p, d).rgb, grid.eval_field(p, -d).rgb);
    }

    #[test]
    fn zero_raw_density_is_ln2() {
        let grid = VoxelGrid::zeros(3, 1).unwrap();
        let s = grid.eval_field(Vec3::new(0.4, -0.2, 0.9), Vec3::Z);
        assert!((s.sigma - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((s.sigma - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn z_lobe_color_is_monotone_in_dz() {
        let mut grid = VoxelGrid::zeros(2, 1).unwrap();
        let f = grid.features_per_vertex();
        for v in grid.params_mut().chunks_exact_mut(f) {
            for c in 0..3 {
                v[1 + c * 4 + 2] = 1.5;
            }
        }
        let mut prev = -1.0;
        for i in 0..=20 {
            let dz = -1.0 + 0.1 * i as f64;
            let d = Vec3::new((1.0 - dz * dz).max(0.0).sqrt(), 0.0, dz);
            let rgb = grid.eval_field(Vec3::ZERO, d).rgb;
            assert!(rgb[0] > prev);
            prev = rgb[0];
        }
    }

    #[test]
    fn scatter_matches_finite_differences_of_trilinear() {
        let mut grid = random_grid(4, 1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = grid.features_per_vertex();
        for _ in 0..20 {
            let p = random_point(&mut rng);
            let k = rng.gen_range(0..f);
            let mut seed_grad = vec![0.0; f];
            seed_grad[k] = 1.0;
            let stencil = grid.stencil(p);
            let mut analytic = vec![0.0; grid.param_count()];
            grid.scatter(&stencil, &seed_grad, 1.0, &mut analytic);
            for &v in &stencil.vertices {
                let idx = v as usize * f + k;
                let h = 1e-5;
                let orig = grid.params()[idx];
                grid.params_mut()[idx] = orig + h;
                let up = grid.trilinear_sample(p)[k];
                grid.params_mut()[idx] = orig - h;
                let down = grid.trilinear_sample(p)[k];
                grid.params_mut()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let denom = fd.abs().max(analytic[idx].abs()).max(1e-12);
                assert!((fd - analytic[idx]).abs() / denom < 1e-6, "{fd} vs {}", analytic[idx]);
            }
        }
    }

    #[test]
    fn decode_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for degree in 0..=2 {
            let grid = random_grid(3, degree, 10 + degree as u64);
            let f = grid.features_per_vertex();
            for _ in 0..10 {
                let feats: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.5..1.5)).collect();
                let d = random_dir(&mut rng);
                let sample = grid.decode(&feats, d);
                let (ws, wc) = (rng.gen_range(-1.0..1.0), [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
                let scalar = |s: &FieldSample| ws * s.sigma + wc[0] * s.rgb[0] + wc[1] * s.rgb[1] + wc[2] * s.rgb[2];
                let mut grad = vec![0.0; f];
                grid.decode_backward(&feats, d, &sample, ws, wc, &mut grad);
                for k in 0..f {
                    let h = 1e-4;
                    let mut up = feats.clone();
                    up[k] += h;
                    let mut dn = feats.clone();
                    dn[k] -= h;
                    let fd = (scalar(&grid.decode(&up, d)) - scalar(&grid.decode(&dn, d))) / (2.0 * h);
                    let denom = fd.abs().max(grad[k].abs());
                    if denom > 1e-10 {
                        assert!((fd - grad[k]).abs() / denom < 1e-4, "k={k}: {fd} vs {}", grad[k]);
                    }
                }
            }
        }
    }

    #[test]
    fn parts_round_trip() {
        let grid = random_grid(3, 1, 12);
        let back = VoxelGrid::from_parts(3, 1, &grid.raw_density(), &grid.sh_coeffs()).unwrap();
        assert_eq!(grid, back);
        assert!(VoxelGrid::from_parts(3, 1, &grid.raw_density()[1..], &grid.sh_coeffs()).is_err());
    }
}
