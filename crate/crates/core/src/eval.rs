//! Image and geometry metrics, split evaluation and the ablation harness.

use crate::dataset::{Dataset, Split, SplitData};
use crate::field::VoxelGrid;
use crate::geometry::CameraModel;
use crate::io::Image;
use crate::losses::DepthLossKind;
use crate::render::RayWorkspace;
use crate::scaffold::CoverageMap;
use crate::train::{scene_ray, train, TrainConfig, TrainLog};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Mean squared error over all pixels and channels.
pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    check_dims(pred, gt)?;
    let sum: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| (0..3).map(|c| (p[c] - g[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * pred.data.len()) as f64)
}

/// Peak signal-to-noise ratio with peak 1.0, capped at `PSNR_CAP`.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt)?))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over all fully-contained windows.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Windowed SSIM on luminance (mean of RGB): 11x11 Gaussian window with
/// sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1, averaged over all
/// windows that fit inside the image.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_dims(pred, gt)?;
    let (w, h) = (pred.width as usize, pred.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Contract(format!("image {w}x{h} is smaller than the SSIM window")));
    }
    let luma = |img: &Image| -> Vec<f64> { img.data.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect() };
    let (a, b) = (luma(pred), luma(gt));
    let k = gaussian_kernel();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&a, w, h, &k);
    let mu_b = filter_valid(&b, w, h, &k);
    let aa = filter_valid(&prod(&a, &a), w, h, &k);
    let bb = filter_valid(&prod(&b, &b), w, h, &k);
    let ab = filter_valid(&prod(&a, &b), w, h, &k);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = mu_a.len();
    let sum: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(sum / n as f64)
}

/// RMSE and median absolute error over the masked pixels.
pub fn depth_error(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::Contract("depth maps and mask differ in length".into()));
    }
    let mut abs: Vec<f64> = (0..pred.len())
        .filter(|&i| mask[i])
        .map(|i| (pred[i] - gt[i]).abs())
        .collect();
    if abs.is_empty() {
        return Err(Error::Data("depth mask is empty".into()));
    }
    let rmse = (abs.iter().map(|e| e * e).sum::<f64>() / abs.len() as f64).sqrt();
    abs.sort_by(f64::total_cmp);
    let n = abs.len();
    let median = if n % 2 == 1 {
        abs[n / 2]
    } else {
        0.5 * (abs[n / 2 - 1] + abs[n / 2])
    };
    Ok((rmse, median))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoverageBin {
    #[serde(rename = "1-2")]
    OneToTwo,
    #[serde(rename = "3-5")]
    ThreeToFive,
    #[serde(rename = "6-9")]
    SixToNine,
    #[serde(rename = ">9")]
    AboveNine,
}

impl CoverageBin {
    pub const ALL: [CoverageBin; 4] = [Self::OneToTwo, Self::ThreeToFive, Self::SixToNine, Self::AboveNine];

    /// Bin of a coverage count; `None` for unobserved pixels.
    pub fn of(coverage: u32) -> Option<Self> {
        match coverage {
            0 => None,
            1..=2 => Some(Self::OneToTwo),
            3..=5 => Some(Self::ThreeToFive),
            6..=9 => Some(Self::SixToNine),
            _ => Some(Self::AboveNine),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::OneToTwo => "1-2",
            Self::ThreeToFive => "3-5",
            Self::SixToNine => "6-9",
            Self::AboveNine => ">9",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinPsnr {
    pub bin: CoverageBin,
    pub pixels: usize,
    pub psnr: f64,
}

/// PSNR over the pooled pixels of each coverage bin. Pixels with coverage 0
/// are excluded and empty bins are omitted.
pub fn coverage_binned_psnr(preds: &[&Image], gts: &[&Image], coverage: &[&CoverageMap]) -> Result<Vec<BinPsnr>> {
    if preds.len() != gts.len() || preds.len() != coverage.len() {
        return Err(Error::Contract("binned PSNR needs one gt image and coverage map per prediction".into()));
    }
    let mut sq = [0.0; 4];
    let mut count = [0usize; 4];
    for ((p, g), c) in preds.iter().zip(gts).zip(coverage) {
        check_dims(p, g)?;
        if c.values.len() != p.data.len() {
            return Err(Error::Contract("coverage map size differs from the image".into()));
        }
        for i in 0..p.data.len() {
            let Some(bin) = CoverageBin::of(c.values[i]) else { continue };
            let b = bin as usize;
            sq[b] += (0..3).map(|k| (p.data[i][k] - g.data[i][k]).powi(2)).sum::<f64>();
            count[b] += 1;
        }
    }
    Ok(CoverageBin::ALL
        .iter()
        .filter(|&&b| count[b as usize] > 0)
        .map(|&b| BinPsnr {
            bin: b,
            pixels: count[b as usize],
            psnr: psnr_from_mse(sq[b as usize] / (3 * count[b as usize]) as f64),
        })
        .collect())
}

/// Color image and expected-distance map rendered with midpoint sampling.
pub fn render_view(grid: &VoxelGrid, camera: &CameraModel, n_samples: usize, near: f64) -> Result<(Image, Vec<f64>)> {
    let (w, h) = (camera.width(), camera.height());
    let rows = (0..h)
        .into_par_iter()
        .map_init(RayWorkspace::new, |ws, y| {
            let mut row = Vec::with_capacity(w as usize);
            for x in 0..w {
                ws.render(grid, &scene_ray(camera, x, y, near), n_samples, None)?;
                row.push((ws.result.color, ws.result.depth));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut image = Image::new(w, h);
    let mut depth = Vec::with_capacity(image.data.len());
    for (i, (c, d)) in rows.into_iter().flatten().enumerate() {
        image.data[i] = c.map(|v| v.clamp(0.0, 1.0));
        depth.push(d);
    }
    Ok((image, depth))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_rmse: f64,
    pub depth_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_depth_rmse: f64,
    pub mean_depth_median: f64,
    pub coverage_bins: Vec<BinPsnr>,
}

impl EvalReport {
    pub fn bin(&self, bin: CoverageBin) -> Option<&BinPsnr> {
        self.coverage_bins.iter().find(|b| b.bin == bin)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Renders every view of a split and scores it against the ground truth.
pub fn evaluate_split(
    grid: &VoxelGrid,
    split: Split,
    data: &SplitData,
    n_samples: usize,
    near: f64,
) -> Result<(EvalReport, Vec<(Image, Vec<f64>)>)> {
    let renders = data
        .cameras
        .iter()
        .map(|c| render_view(grid, c, n_samples, near))
        .collect::<Result<Vec<_>>>()?;
    let mut views = Vec::with_capacity(renders.len());
    for (i, (img, depth)) in renders.iter().enumerate() {
        let gt_d = &data.gt_distance[i].values;
        let mask: Vec<bool> = gt_d.iter().map(|d| d.is_finite()).collect();
        let (depth_rmse, depth_median) = depth_error(depth, gt_d, &mask)?;
        views.push(ViewMetrics {
            index: i,
            psnr: psnr(img, &data.images[i])?,
            ssim: ssim(img, &data.images[i])?,
            depth_rmse,
            depth_median,
        });
    }
    let preds: Vec<&Image> = renders.iter().map(|r| &r.0).collect();
    let gts: Vec<&Image> = data.images.iter().collect();
    let covs: Vec<&CoverageMap> = data.coverage.iter().collect();
    let report = EvalReport {
        split,
        mean_psnr: mean(views.iter().map(|v| v.psnr)),
        mean_ssim: mean(views.iter().map(|v| v.ssim)),
        mean_depth_rmse: mean(views.iter().map(|v| v.depth_rmse)),
        mean_depth_median: mean(views.iter().map(|v| v.depth_median)),
        coverage_bins: coverage_binned_psnr(&preds, &gts, &covs)?,
        views,
    };
    Ok((report, renders))
}

/// Training configurations compared by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Photometric loss only.
    Baseline,
    Full,
    /// Robust depth loss replaced by L2.
    L2Depth,
    /// Weight and color variance regularizers removed.
    NoVariance,
    /// Coverage adjustment disabled (`lambda = 1` everywhere).
    NoAdjustment,
}

impl Variant {
    pub const TABLE: [Variant; 4] = [Variant::Full, Variant::L2Depth, Variant::NoVariance, Variant::NoAdjustment];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Full => "full",
            Variant::L2Depth => "l2-depth",
            Variant::NoVariance => "no-variance",
            Variant::NoAdjustment => "no-adjustment",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let l = &mut cfg.losses;
        match self {
            Variant::Baseline => {
                l.lambda_d = 0.0;
                l.lambda_w = 0.0;
                l.lambda_c = 0.0;
            }
            Variant::Full => {}
            Variant::L2Depth => l.depth_loss = DepthLossKind::L2,
            Variant::NoVariance => {
                l.lambda_w = 0.0;
                l.lambda_c = 0.0;
            }
            Variant::NoAdjustment => l.coverage_adjustment = false,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub interp: EvalReport,
    pub extrap: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "variant,interp_psnr,interp_ssim,interp_depth_rmse,extrap_psnr,extrap_ssim,extrap_depth_rmse\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.5},{:.4},{:.4},{:.5}",
                r.variant.name(),
                r.interp.mean_psnr,
                r.interp.mean_ssim,
                r.interp.mean_depth_rmse,
                r.extrap.mean_psnr,
                r.extrap.mean_ssim,
                r.extrap.mean_depth_rmse
            );
        }
        s
    }
}

/// Output of one ablation run.
pub struct VariantRun {
    pub variant: Variant,
    pub grid: VoxelGrid,
    pub log: TrainLog,
    pub interp: (EvalReport, Vec<(Image, Vec<f64>)>),
    pub extrap: (EvalReport, Vec<(Image, Vec<f64>)>),
}

/// Trains and evaluates one variant; evaluation uses the config's sample
/// count and near bound.
pub fn run_variant(data: &Dataset, base: &TrainConfig, variant: Variant) -> Result<VariantRun> {
    let cfg = variant.apply(base);
    let set = data.training_set(cfg.near)?;
    let (grid, log) = train(&set, &cfg)?;
    let interp = evaluate_split(&grid, Split::Interp, &data.interp, cfg.n_samples_per_ray, cfg.near)?;
    let extrap = evaluate_split(&grid, Split::Extrap, &data.extrap, cfg.n_samples_per_ray, cfg.near)?;
    Ok(VariantRun {
        variant,
        grid,
        log,
        interp,
        extrap,
    })
}
