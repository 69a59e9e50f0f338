//! Discrete volume rendering along a ray and its exact backward pass.
//!
//! With `alpha_i = 1 - exp(-sigma_i * delta_i)`, `T_i = prod_{j<i} (1 - alpha_j)`
//! and `w_i = T_i * alpha_i`, a ray yields
//!
//! * color `C = sum w_i c_i`, depth `D = sum w_i t_i`, opacity `O = sum w_i`,
//! * weight variance `sum w_i (t_i - D)^2`,
//! * color variance `sum sg(w_i) |c_i - C|^2`, where `sg` blocks the gradient.
//!
//! Unaccumulated transmittance composites to black.

use crate::field::{FieldSample, Stencil, VoxelGrid, MAX_FEATURES};
use crate::geometry::{Ray, Vec3};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sample positions along one ray.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaySamples {
    pub ts: Vec<f64>,
    /// `t_{i+1} - t_i`; the last interval runs to `t_far`.
    pub deltas: Vec<f64>,
    pub points: Vec<Vec3>,
    pub direction: Vec3,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

/// Stratified samples: `[t_near, t_far]` is cut into `n` equal bins and one
/// sample is taken per bin, at the midpoint when `jitter_seed` is `None`,
/// uniformly inside the bin otherwise.
pub fn sample_ray(ray: &Ray, n: usize, jitter_seed: Option<u64>) -> RaySamples {
    let mut out = RaySamples::default();
    sample_ray_into(ray, n, jitter_seed, &mut out);
    out
}

pub fn sample_ray_into(ray: &Ray, n: usize, jitter_seed: Option<u64>, out: &mut RaySamples) {
    debug_assert!(n >= 2, "need at least two samples per ray");
    let width = (ray.t_far - ray.t_near) / n as f64;
    out.ts.clear();
    out.deltas.clear();
    out.points.clear();
    out.direction = ray.direction;
    match jitter_seed {
        None => out
            .ts
            .extend((0..n).map(|i| ray.t_near + (i as f64 + 0.5) * width)),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.ts
                .extend((0..n).map(|i| ray.t_near + (i as f64 + rng.gen::<f64>()) * width));
        }
    }
    out.deltas.extend(out.ts.windows(2).map(|w| w[1] - w[0]));
    out.deltas.push(ray.t_far - out.ts[n - 1]);
    out.points.extend(out.ts.iter().map(|&t| ray.at(t)));
}

/// Per-ray quadrature outputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RayRenderResult {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// Transmittance before each sample, plus the residual after the last.
    pub transmittance: Vec<f64>,
    pub weight_var: f64,
    pub color_var: f64,
}

/// Upstream gradients of a scalar objective w.r.t. each render output.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderGrads {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub weight_var: f64,
    pub color_var: f64,
}

pub fn composite(samples: &RaySamples, field: &[FieldSample]) -> Result<RayRenderResult> {
    let mut out = RayRenderResult::default();
    composite_into(samples, field, &mut out)?;
    Ok(out)
}

pub fn composite_into(samples: &RaySamples, field: &[FieldSample], out: &mut RayRenderResult) -> Result<()> {
    let n = samples.len();
    if field.len() != n {
        return Err(Error::Contract(format!(
            "{} field samples for {n} ray samples",
            field.len()
        )));
    }
    out.weights.clear();
    out.transmittance.clear();
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut opacity = 0.0;
    for i in 0..n {
        let (sigma, delta) = (field[i].sigma, samples.deltas[i]);
        if !(sigma >= 0.0) || !(delta >= 0.0) {
            return Err(Error::Contract(format!(
                "negative density or interval at sample {i}: sigma={sigma}, delta={delta}"
            )));
        }
        let tau = sigma * delta;
        let keep = (-tau).exp();
        let alpha = -(-tau).exp_m1();
        let w = trans * alpha;
        out.transmittance.push(trans);
        out.weights.push(w);
        for c in 0..3 {
            color[c] += w * field[i].rgb[c];
        }
        depth += w * samples.ts[i];
        opacity += w;
        trans *= keep;
    }
    out.transmittance.push(trans);
    let mut weight_var = 0.0;
    let mut color_var = 0.0;
    for i in 0..n {
        let w = out.weights[i];
        let dt = samples.ts[i] - depth;
        weight_var += w * dt * dt;
        let rgb = field[i].rgb;
        color_var += w * ((rgb[0] - color[0]).powi(2) + (rgb[1] - color[1]).powi(2) + (rgb[2] - color[2]).powi(2));
    }
    out.color = color;
    out.depth = depth;
    out.opacity = opacity;
    out.weight_var = weight_var;
    out.color_var = color_var;
    Ok(())
}

/// Exact gradients of `sum_k upstream_k * output_k` w.r.t. each sample's
/// density and color. The color variance contributes to density gradients
/// only through the composited color; its weights are held constant.
pub fn composite_backward(
    samples: &RaySamples,
    field: &[FieldSample],
    result: &RayRenderResult,
    upstream: &RenderGrads,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let mut d_sigma = Vec::new();
    let mut d_rgb = Vec::new();
    composite_backward_into(samples, field, result, upstream, &mut d_sigma, &mut d_rgb);
    (d_sigma, d_rgb)
}

pub fn composite_backward_into(
    samples: &RaySamples,
    field: &[FieldSample],
    result: &RayRenderResult,
    g: &RenderGrads,
    d_sigma: &mut Vec<f64>,
    d_rgb: &mut Vec<[f64; 3]>,
) {
    let n = samples.len();
    let c_hat = result.color;
    let depth = result.depth;
    let leak = 1.0 - result.opacity;
    // dS/dw_i treating every weight as a free variable.
    let dw = |i: usize| -> f64 {
        let c = field[i].rgb;
        let t = samples.ts[i];
        let c_dot_gc = c[0] * g.color[0] + c[1] * g.color[1] + c[2] * g.color[2];
        let c_dot_chat = c[0] * c_hat[0] + c[1] * c_hat[1] + c[2] * c_hat[2];
        c_dot_gc
            + g.depth * t
            + g.opacity
            + g.weight_var * ((t - depth).powi(2) - 2.0 * t * depth * leak)
            - g.color_var * 2.0 * leak * c_dot_chat
    };
    d_sigma.clear();
    d_sigma.resize(n, 0.0);
    d_rgb.clear();
    d_rgb.resize(n, [0.0; 3]);
    // dw_i/dsigma_k = -delta_k w_i (i > k), delta_k T_{k+1} (i = k).
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let gk = dw(k);
        d_sigma[k] = samples.deltas[k] * (gk * result.transmittance[k + 1] - suffix);
        suffix += gk * result.weights[k];
    }
    for i in 0..n {
        let w = result.weights[i];
        let c = field[i].rgb;
        for ch in 0..3 {
            d_rgb[i][ch] = w * (g.color[ch] + 2.0 * g.color_var * (c[ch] - c_hat[ch] - leak * c_hat[ch]));
        }
    }
}

/// Scratch buffers for rendering one ray through a voxel grid.
#[derive(Debug, Default)]
pub struct RayWorkspace {
    pub samples: RaySamples,
    pub stencils: Vec<Stencil>,
    pub features: Vec<f64>,
    pub field: Vec<FieldSample>,
    pub result: RayRenderResult,
    d_sigma: Vec<f64>,
    d_rgb: Vec<[f64; 3]>,
}

impl RayWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Samples the ray, queries the grid at every sample and composites.
    pub fn render(&mut self, grid: &VoxelGrid, ray: &Ray, n_samples: usize, jitter_seed: Option<u64>) -> Result<()> {
        sample_ray_into(ray, n_samples, jitter_seed, &mut self.samples);
        let f = grid.features_per_vertex();
        self.stencils.clear();
        self.field.clear();
        self.features.resize(n_samples * f, 0.0);
        for (i, &p) in self.samples.points.iter().enumerate() {
            let st = grid.stencil(p);
            let feats = &mut self.features[i * f..(i + 1) * f];
            grid.interpolate(&st, feats);
            self.field.push(grid.decode(feats, ray.direction));
            self.stencils.push(st);
        }
        composite_into(&self.samples, &self.field, &mut self.result)
    }

    /// Back-propagates `upstream` from the last `render` into the grid,
    /// adding `scale * dS/dparam` to `grad`.
    pub fn backward(&mut self, grid: &VoxelGrid, upstream: &RenderGrads, scale: f64, grad: &mut [f64]) {
        self.backward_with(grid, upstream, |stencil, dfeat| grid.scatter(stencil, dfeat, scale, grad));
    }

    /// Like `backward`, but hands each sample's stencil and raw-feature
    /// gradient to `sink` instead of writing into a dense buffer.
    pub fn backward_with(&mut self, grid: &VoxelGrid, upstream: &RenderGrads, mut sink: impl FnMut(&Stencil, &[f64])) {
        composite_backward_into(
            &self.samples,
            &self.field,
            &self.result,
            upstream,
            &mut self.d_sigma,
            &mut self.d_rgb,
        );
        let f = grid.features_per_vertex();
        let mut dfeat = [0.0; MAX_FEATURES];
        let dir = self.samples.direction;
        for i in 0..self.samples.len() {
            let (ds, dc) = (self.d_sigma[i], self.d_rgb[i]);
            if ds == 0.0 && dc == [0.0; 3] {
                continue;
            }
            let feats = &self.features[i * f..(i + 1) * f];
            grid.decode_backward(feats, dir, &self.field[i], ds, dc, &mut dfeat[..f]);
            sink(&self.stencils[i], &dfeat[..f]);
        }
    }
}

/// Renders one ray with deterministic midpoint sampling.
pub fn render_ray(grid: &VoxelGrid, ray: &Ray, n_samples: usize) -> Result<RayRenderResult> {
    let mut ws = RayWorkspace::new();
    ws.render(grid, ray, n_samples, None)?;
    Ok(ws.result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs(sigma: f64, rgb: [f64; 3]) -> FieldSample {
        FieldSample { sigma, rgb }
    }

    fn samples_from(ts: &[f64], t_far: f64) -> RaySamples {
        let mut deltas: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
        deltas.push(t_far - ts[ts.len() - 1]);
        RaySamples {
            ts: ts.to_vec(),
            deltas,
            points: ts.iter().map(|&t| Vec3::new(0.0, 0.0, -t)).collect(),
            direction: -Vec3::Z,
        }
    }

    #[test]
    fn midpoints_for_deterministic_sampling() {
        let ray = Ray::new(Vec3::ZERO, Vec3::X, 0.0, 1.0);
        let s = sample_ray(&ray, 4, None);
        assert_eq!(s.ts, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.deltas, vec![0.25, 0.25, 0.25, 0.125]);
    }

    #[test]
    fn jittered_samples_stay_in_their_bins() {
        let ray = Ray::new(Vec3::ZERO, Vec3::X, 0.3, 2.3);
        for seed in 0..50 {
            let s = sample_ray(&ray, 10, Some(seed));
            for (i, &t) in s.ts.iter().enumerate() {
                let lo = 0.3 + 0.2 * i as f64;
                assert!(t >= lo - 1e-12 && t < lo + 0.2 + 1e-12);
            }
            assert!(s.deltas.iter().all(|&d| d > 0.0));
            assert_eq!(s, sample_ray(&ray, 10, Some(seed)));
        }
    }

    #[test]
    fn two_sample_hand_quadrature() {
        let s = samples_from(&[1.0, 2.0], 3.0);
        let field = [fs(std::f64::consts::LN_2, [1.0, 0.0, 0.0]), fs(1e3, [0.0, 0.0, 1.0])];
        let r = composite(&s, &field).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(r.weights[0], 0.5) && close(r.weights[1], 0.5));
        assert!(close(r.color[0], 0.5) && close(r.color[1], 0.0) && close(r.color[2], 0.5));
        assert!(close(r.depth, 1.5));
        assert!(close(r.opacity, 1.0));
        assert!(close(r.weight_var, 0.25));
        assert!(close(r.color_var, 0.5));
    }

    #[test]
    fn empty_space_renders_black_at_depth_zero() {
        let s = samples_from(&[0.5, 1.0, 1.5], 2.0);
        let r = composite(&s, &[fs(0.0, [0.3; 3]); 3]).unwrap();
        assert_eq!(r.weights, vec![0.0; 3]);
        assert_eq!((r.opacity, r.depth, r.color), (0.0, 0.0, [0.0; 3]));
    }

    #[test]
    fn delta_distribution_has_zero_variance() {
        let s = samples_from(&[0.5, 1.0, 1.5], 2.0);
        let field = [fs(0.0, [0.1; 3]), fs(1e4, [0.7, 0.2, 0.4]), fs(3.0, [0.9; 3])];
        let r = composite(&s, &field).unwrap();
        assert_eq!(r.depth, 1.0);
        assert_eq!(r.weight_var, 0.0);
        assert_eq!(r.color_var, 0.0);
    }

    #[test]
    fn negative_density_is_a_contract_violation() {
        let s = samples_from(&[0.5, 1.0], 2.0);
        assert!(matches!(
            composite(&s, &[fs(-1.0, [0.0; 3]), fs(1.0, [0.0; 3])]),
            Err(Error::Contract(_))
        ));
        assert!(composite(&s, &[fs(1.0, [0.0; 3])]).is_err());
    }

    #[test]
    fn single_sample_color_jacobian_is_weight_times_identity() {
        let s = samples_from(&[1.0], 1.5);
        let field = [fs(0.8, [0.2, 0.5, 0.9])];
        let r = composite(&s, &field).unwrap();
        for ch in 0..3 {
            let mut g = RenderGrads::default();
            g.color[ch] = 1.0;
            let (_, d_rgb) = composite_backward(&s, &field, &r, &g);
            for k in 0..3 {
                assert_eq!(d_rgb[0][k], if k == ch { r.weights[0] } else { 0.0 });
            }
        }
    }
}
