//! Ray-batched Adam optimization of a voxel grid.
//!
//! Each iteration draws a uniform batch of training pixels, renders them
//! with jittered stratified samples, and back-propagates the per-ray loss.
//! The last `relax_fraction` of iterations drop the depth and variance
//! regularizers and fine-tune on the photometric term alone.
//!
//! Gradients are accumulated in ray order regardless of how many worker
//! threads render the batch, so a fixed seed gives bit-identical results
//! for any thread count.

use crate::field::{Stencil, VoxelGrid};
use crate::geometry::{CameraModel, Ray};
use crate::io::Image;
use crate::losses::{total_ray_loss, DepthLossKind, LossTerms, LossWeights, RaySupervision};
use crate::render::RayWorkspace;
use crate::scaffold::{CoverageMap, DistanceMap};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;

/// Rays per work unit when rendering a batch in parallel.
const CHUNK_RAYS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub learning_rate: f64,
    /// Multiplier on `learning_rate` for the raw density parameters.
    pub density_lr_scale: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub n_samples_per_ray: usize,
    pub relax_fraction: f64,
    pub seed: u64,
    pub resolution: usize,
    pub sh_degree: u32,
    /// Near bound of every training and rendering ray.
    pub near: f64,
    /// Interval between rows of the CSV log.
    pub log_every: usize,
    pub losses: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_rays: 1024,
            learning_rate: 1e-3,
            density_lr_scale: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            n_samples_per_ray: 128,
            relax_fraction: 0.1,
            seed: 0,
            resolution: 64,
            sh_degree: 1,
            near: 0.05,
            log_every: 100,
            losses: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: 64^3 grid, 3000 iterations, 96 samples per ray.
    /// The dense grid needs a larger step size than a coordinate MLP, the
    /// density channel larger still, and with so few iterations the depth
    /// term only takes hold at `lambda_d = 1`.
    pub fn desk() -> Self {
        Self {
            iterations: 3000,
            n_samples_per_ray: 96,
            learning_rate: 0.05,
            density_lr_scale: 10.0,
            losses: LossWeights {
                lambda_d: 1.0,
                ..LossWeights::default()
            },
            ..Self::default()
        }
    }

    /// Tiny preset for end-to-end smoke runs.
    pub fn smoke() -> Self {
        Self {
            iterations: 300,
            batch_rays: 512,
            n_samples_per_ray: 48,
            resolution: 16,
            learning_rate: 0.05,
            density_lr_scale: 10.0,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.relax_fraction) {
            return bad(format!("relax_fraction must be in [0, 1), got {}", self.relax_fraction));
        }
        if self.batch_rays == 0 {
            return bad("batch_rays must be >= 1".into());
        }
        if self.n_samples_per_ray < 2 {
            return bad("n_samples_per_ray must be >= 2".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and > 0".into());
        }
        if !(self.density_lr_scale > 0.0) {
            return bad("density_lr_scale must be > 0".into());
        }
        if !(self.near >= 0.0) {
            return bad("near must be >= 0".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        self.losses.validate()
    }

    /// Number of iterations that run with the regularizers enabled.
    pub fn regularized_iterations(&self) -> usize {
        let relaxed = (self.iterations as f64 * self.relax_fraction).round() as usize;
        self.iterations - relaxed.min(self.iterations)
    }

    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse()
                .map_err(|e| Error::Config(format!("bad value {v:?} for {key}: {e}")))
        }
        let l = &mut self.losses;
        match key {
            "iterations" => self.iterations = parse(key, value)?,
            "batch_rays" => self.batch_rays = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "density_lr_scale" => self.density_lr_scale = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "n_samples_per_ray" => self.n_samples_per_ray = parse(key, value)?,
            "relax_fraction" => self.relax_fraction = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "resolution" => self.resolution = parse(key, value)?,
            "sh_degree" => self.sh_degree = parse(key, value)?,
            "near" => self.near = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "beta" => l.beta = parse(key, value)?,
            "alpha" => l.alpha = parse(key, value)?,
            "lambda_max" => l.lambda_max = parse(key, value)?,
            "lambda_d" => l.lambda_d = parse(key, value)?,
            "lambda_w" => l.lambda_w = parse(key, value)?,
            "lambda_c" => l.lambda_c = parse(key, value)?,
            "depth_loss" => {
                l.depth_loss = match value {
                    "robust" => DepthLossKind::Robust,
                    "l2" => DepthLossKind::L2,
                    other => return Err(Error::Config(format!("depth_loss must be robust or l2, got {other:?}"))),
                }
            }
            "coverage_adjustment" => l.coverage_adjustment = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over `self`. `#` starts a comment; an
    /// optional `preset = name` line must come first and resets the base.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
            let (key, value) = (key.trim(), value.trim().trim_matches('"'));
            if key == "preset" {
                *self = Self::preset(value)?;
            } else {
                self.set(key, value)
                    .map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let l = &self.losses;
        let depth = match l.depth_loss {
            DepthLossKind::Robust => "robust",
            DepthLossKind::L2 => "l2",
        };
        let mut s = String::new();
        let entries: [(&str, String); 22] = [
            ("iterations", self.iterations.to_string()),
            ("batch_rays", self.batch_rays.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("density_lr_scale", self.density_lr_scale.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("n_samples_per_ray", self.n_samples_per_ray.to_string()),
            ("relax_fraction", self.relax_fraction.to_string()),
            ("seed", self.seed.to_string()),
            ("resolution", self.resolution.to_string()),
            ("sh_degree", self.sh_degree.to_string()),
            ("near", self.near.to_string()),
            ("log_every", self.log_every.to_string()),
            ("beta", l.beta.to_string()),
            ("alpha", l.alpha.to_string()),
            ("lambda_max", l.lambda_max.to_string()),
            ("lambda_d", l.lambda_d.to_string()),
            ("lambda_w", l.lambda_w.to_string()),
            ("lambda_c", l.lambda_c.to_string()),
            ("depth_loss", depth.to_string()),
            ("coverage_adjustment", l.coverage_adjustment.to_string()),
        ];
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Adam moments, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, h: &AdamHyper) -> Result<()> {
    adam_step_strided(params, grads, state, h, &[1.0])
}

/// Adam update where parameter `i` uses `h.lr * lr_scale[i % lr_scale.len()]`.
pub fn adam_step_strided(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    h: &AdamHyper,
    lr_scale: &[f64],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Contract(format!(
            "adam shape mismatch: {} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let stride = lr_scale.len();
    if stride == 0 {
        return Err(Error::Contract("adam lr_scale must be nonempty".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let (b1, b2, eps) = (h.beta1, h.beta2, h.eps);
    let lrs: Vec<f64> = lr_scale.iter().map(|s| s * h.lr).collect();
    // Chunk boundaries fall on multiples of the stride.
    let chunk = (1 << 14) / stride * stride.max(1);
    params
        .par_chunks_mut(chunk)
        .zip(grads.par_chunks(chunk))
        .zip(state.m.par_chunks_mut(chunk))
        .zip(state.v.par_chunks_mut(chunk))
        .for_each(|(((p, g), m), v)| {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lrs[i % stride] * m_hat / (v_hat.sqrt() + eps);
            }
        });
    Ok(())
}

/// One training view with its ground truth and baked priors.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: CameraModel,
    pub image: Image,
    pub distance: DistanceMap,
    pub coverage: CoverageMap,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    views: Vec<TrainView>,
    /// Cumulative pixel counts for uniform sampling across views.
    offsets: Vec<usize>,
    near: f64,
}

impl TrainingSet {
    /// Every camera must sit inside the scene cube so that its rays can be
    /// clipped to `[near, exit]`.
    pub fn new(views: Vec<TrainView>, near: f64) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Data("training set has no views".into()));
        }
        let mut offsets = Vec::with_capacity(views.len() + 1);
        offsets.push(0);
        for (i, v) in views.iter().enumerate() {
            let (w, h) = (v.camera.width(), v.camera.height());
            if v.image.width != w || v.image.height != h {
                return Err(Error::Data(format!("view {i}: image size does not match camera")));
            }
            if v.distance.width != w || v.distance.height != h || v.coverage.width != w || v.coverage.height != h {
                return Err(Error::Data(format!("view {i}: prior raster size does not match camera")));
            }
            let p = v.camera.position();
            let margin = 1.0 - near.max(1e-6);
            if p.x.abs() >= margin || p.y.abs() >= margin || p.z.abs() >= margin {
                return Err(Error::Data(format!("view {i}: camera lies outside the scene cube")));
            }
            offsets.push(offsets[i] + v.camera.pixel_count());
        }
        Ok(Self { views, offsets, near })
    }

    pub fn views(&self) -> &[TrainView] {
        &self.views
    }

    pub fn pixel_count(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    /// Resolves a global pixel index to `(view, pixel)`.
    pub fn locate(&self, global: usize) -> (usize, usize) {
        let view = self.offsets.partition_point(|&o| o <= global) - 1;
        (view, global - self.offsets[view])
    }

    pub fn ray(&self, view: usize, pixel: usize) -> TrainingRay {
        let v = &self.views[view];
        let w = v.camera.width() as usize;
        let (x, y) = ((pixel % w) as u32, (pixel / w) as u32);
        let ray = scene_ray(&v.camera, x, y, self.near);
        let sup = RaySupervision {
            gt_color: v.image.data[pixel],
            prior_distance: v.distance.hit(pixel),
            coverage: v.coverage.values[pixel],
        };
        TrainingRay { view, pixel, ray, sup }
    }
}

/// Pixel-center ray clipped to `[near, exit of the scene cube]`. Rays that
/// never enter the cube get an empty-length interval at `near`.
pub fn scene_ray(camera: &CameraModel, x: u32, y: u32, near: f64) -> Ray {
    let ray = camera.pixel_center_ray(x, y).with_bounds(near, f64::INFINITY);
    ray.clip_to_scene().unwrap_or_else(|| ray.with_bounds(near, near + 1e-9))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingRay {
    pub view: usize,
    pub pixel: usize,
    pub ray: Ray,
    pub sup: RaySupervision,
}

/// Uniform draw over every training pixel of every view.
pub fn sample_batch(data: &TrainingSet, batch_rays: usize, rng: &mut impl Rng) -> Vec<TrainingRay> {
    let total = data.pixel_count();
    (0..batch_rays)
        .map(|_| {
            let (view, pixel) = data.locate(rng.gen_range(0..total));
            data.ray(view, pixel)
        })
        .collect()
}

/// Mean loss components over one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub regularized: bool,
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub weight_var: f64,
    pub color_var: f64,
    pub mean_lambda: f64,
}

/// One record per iteration; `to_csv` keeps every `log_every`-th.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn regularized_steps(&self) -> usize {
        self.records.iter().filter(|r| r.regularized).count()
    }

    pub fn relaxed_steps(&self) -> usize {
        self.records.len() - self.regularized_steps()
    }

    /// Columns: iter, L_total, L_color, L_depth, L_varw, L_varc, mean_lambda.
    /// Regularizer columns are already scaled by `lambda(r)` and their loss
    /// weight, so `L_total = L_color + L_depth + L_varw + L_varc`.
    pub fn to_csv(&self, every: usize) -> String {
        let mut s = String::from("iter,L_total,L_color,L_depth,L_varw,L_varc,mean_lambda\n");
        let last = self.records.len().saturating_sub(1);
        for (i, r) in self.records.iter().enumerate() {
            if i % every.max(1) == 0 || i == last {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    r.iteration, r.total, r.color, r.depth, r.weight_var, r.color_var, r.mean_lambda
                );
            }
        }
        s
    }
}

/// Per-chunk gradient records, replayed in ray order.
#[derive(Default)]
struct ChunkBuffer {
    stencils: Vec<Stencil>,
    grads: Vec<f64>,
    terms: Vec<LossTerms>,
    error: Option<Error>,
}

pub struct Trainer<'a> {
    data: &'a TrainingSet,
    config: TrainConfig,
    grid: VoxelGrid,
    adam: AdamState,
    rng: ChaCha8Rng,
    iteration: usize,
    grad: Vec<f64>,
    chunks: Vec<ChunkBuffer>,
    log: TrainLog,
}

fn mix_seed(seed: u64, iteration: usize, ray: usize) -> u64 {
    // splitmix64 finalizer over the packed indices.
    let mut z = seed
        .wrapping_add((iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((ray as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a TrainingSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let grid = VoxelGrid::init(config.resolution, config.sh_degree, config.seed)?;
        Self::with_grid(data, config, grid)
    }

    pub fn with_grid(data: &'a TrainingSet, config: TrainConfig, grid: VoxelGrid) -> Result<Self> {
        config.validate()?;
        let n = grid.param_count();
        Ok(Self {
            data,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_BA7C),
            grad: vec![0.0; n],
            adam: AdamState::new(n),
            grid,
            iteration: 0,
            chunks: Vec::new(),
            log: TrainLog::default(),
            config,
        })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// Runs one optimization step and returns its batch-mean losses.
    pub fn step(&mut self) -> Result<LogRecord> {
        let regularized = self.iteration < self.config.regularized_iterations();
        let batch = sample_batch(self.data, self.config.batch_rays, &mut self.rng);
        let n_chunks = batch.len().div_ceil(CHUNK_RAYS);
        let scale = 1.0 / batch.len() as f64;
        self.grad.fill(0.0);

        let grid = &self.grid;
        let cfg = &self.config;
        let iteration = self.iteration;
        let render_chunk = |ci: usize, rays: &[TrainingRay], buf: &mut ChunkBuffer, mut sink: Option<&mut [f64]>| {
            let mut ws = RayWorkspace::new();
            buf.stencils.clear();
            buf.grads.clear();
            buf.terms.clear();
            buf.error = None;
            for (k, tr) in rays.iter().enumerate() {
                let seed = mix_seed(cfg.seed, iteration, ci * CHUNK_RAYS + k);
                if let Err(e) = ws.render(grid, &tr.ray, cfg.n_samples_per_ray, Some(seed)) {
                    buf.error = Some(e);
                    return;
                }
                let (terms, upstream) = total_ray_loss(&ws.result, &tr.sup, &cfg.losses, regularized);
                buf.terms.push(terms);
                match sink.as_deref_mut() {
                    Some(grad) => ws.backward(grid, &upstream, scale, grad),
                    None => ws.backward_with(grid, &upstream, |st, g| {
                        buf.stencils.push(*st);
                        buf.grads.extend_from_slice(g);
                    }),
                }
            }
        };

        self.chunks.resize_with(n_chunks, ChunkBuffer::default);
        let chunks = &mut self.chunks[..n_chunks];
        if rayon::current_num_threads() == 1 {
            // Same additions in the same order as the replay below.
            for (ci, (rays, buf)) in batch.chunks(CHUNK_RAYS).zip(chunks.iter_mut()).enumerate() {
                render_chunk(ci, rays, buf, Some(&mut self.grad));
            }
        } else {
            chunks
                .par_iter_mut()
                .zip(batch.par_chunks(CHUNK_RAYS))
                .enumerate()
                .for_each(|(ci, (buf, rays))| render_chunk(ci, rays, buf, None));
            let f = self.grid.features_per_vertex();
            for buf in chunks.iter() {
                for (st, g) in buf.stencils.iter().zip(buf.grads.chunks_exact(f)) {
                    self.grid.scatter(st, g, scale, &mut self.grad);
                }
            }
        }

        let mut sum = LossTerms::default();
        for buf in chunks.iter_mut() {
            if let Some(e) = buf.error.take() {
                return Err(e);
            }
            for t in &buf.terms {
                sum.total += t.total;
                sum.color += t.color;
                sum.depth += t.depth;
                sum.weight_var += t.weight_var;
                sum.color_var += t.color_var;
                sum.lambda += t.lambda;
            }
        }
        let record = LogRecord {
            iteration: self.iteration,
            regularized,
            total: sum.total * scale,
            color: sum.color * scale,
            depth: sum.depth * scale,
            weight_var: sum.weight_var * scale,
            color_var: sum.color_var * scale,
            mean_lambda: sum.lambda * scale,
        };
        if !record.color.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                reason: format!("photometric loss became {}", record.color),
            });
        }

        let hyper = AdamHyper {
            lr: self.config.learning_rate,
            beta1: self.config.adam_beta1,
            beta2: self.config.adam_beta2,
            eps: self.config.adam_eps,
        };
        let mut lr_scale = vec![1.0; self.grid.features_per_vertex()];
        lr_scale[0] = self.config.density_lr_scale;
        adam_step_strided(self.grid.params_mut(), &self.grad, &mut self.adam, &hyper, &lr_scale)?;
        if !self.grid.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                reason: "grid parameters became non-finite".into(),
            });
        }
        self.log.records.push(record);
        self.iteration += 1;
        Ok(record)
    }

    pub fn finish(self) -> (VoxelGrid, TrainLog) {
        (self.grid, self.log)
    }
}

/// Trains a fresh grid for `config.iterations` steps.
pub fn train(data: &TrainingSet, config: &TrainConfig) -> Result<(VoxelGrid, TrainLog)> {
    let mut trainer = Trainer::new(data, config.clone())?;
    while !trainer.is_done() {
        trainer.step()?;
    }
    Ok(trainer.finish())
}
