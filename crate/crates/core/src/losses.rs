//! Per-ray training objectives and their gradients w.r.t. render outputs.
//!
//! The total loss for a ray is the photometric term plus a coverage-scaled
//! sum of the depth and variance regularizers:
//!
//! `L = |C - C_gt|^2 + lambda(r) * (l_d * L_depth + l_w * var_w + l_c * var_c)`.

use crate::render::{RayRenderResult, RenderGrads};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DepthLossKind {
    /// Quadratic below `beta`, logarithmic above.
    #[default]
    Robust,
    /// `0.5 * delta^2` everywhere.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Knee of the robust depth loss.
    pub beta: f64,
    /// Coverage above which a ray is considered well observed.
    pub alpha: f64,
    /// Regularizer multiplier at coverage 1.
    pub lambda_max: f64,
    pub lambda_d: f64,
    pub lambda_w: f64,
    pub lambda_c: f64,
    pub depth_loss: DepthLossKind,
    /// When false every ray uses `lambda(r) = 1`.
    pub coverage_adjustment: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.1,
            alpha: 9.0,
            lambda_max: 5.0,
            lambda_d: 0.1,
            lambda_w: 0.01,
            lambda_c: 0.01,
            depth_loss: DepthLossKind::Robust,
            coverage_adjustment: true,
        }
    }
}

impl LossWeights {
    /// Photometric-only objective.
    pub fn photometric_only() -> Self {
        Self {
            lambda_d: 0.0,
            lambda_w: 0.0,
            lambda_c: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("invalid loss weights: {what}")));
        if !(self.beta > 0.0) {
            return bad("beta must be > 0");
        }
        if !(self.alpha > 1.0) {
            return bad("alpha must be > 1");
        }
        if !(self.lambda_max >= 1.0) {
            return bad("lambda_max must be >= 1");
        }
        if !(self.lambda_d >= 0.0 && self.lambda_w >= 0.0 && self.lambda_c >= 0.0) {
            return bad("lambda_d, lambda_w and lambda_c must be >= 0");
        }
        Ok(())
    }
}

/// Ground truth attached to one training ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySupervision {
    pub gt_color: [f64; 3],
    /// Scaffold distance; `None` where the scaffold ray missed.
    pub prior_distance: Option<f64>,
    pub coverage: u32,
}

/// Squared L2 color error and its gradient w.r.t. the prediction.
pub fn photometric_loss(pred: [f64; 3], gt: [f64; 3]) -> (f64, [f64; 3]) {
    let d = [pred[0] - gt[0], pred[1] - gt[1], pred[2] - gt[2]];
    (
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2],
        [2.0 * d[0], 2.0 * d[1], 2.0 * d[2]],
    )
}

/// Robust depth loss and its derivative w.r.t. `pred_depth`.
///
/// With `d = |pred - prior|`: `0.5 d^2` for `d < beta`, otherwise
/// `beta^2 (0.5 + ln(d / beta))`. The gradient magnitude is `d` below the
/// knee and `beta^2 / d` above it, so it never exceeds `beta`.
pub fn robust_depth_loss(pred_depth: f64, prior_distance: f64, beta: f64) -> (f64, f64) {
    let diff = pred_depth - prior_distance;
    let d = diff.abs();
    if d < beta {
        (0.5 * d * d, diff)
    } else {
        let b2 = beta * beta;
        (b2 * (0.5 + (d / beta).ln()), b2 / diff)
    }
}

pub fn l2_depth_loss(pred_depth: f64, prior_distance: f64) -> (f64, f64) {
    let diff = pred_depth - prior_distance;
    (0.5 * diff * diff, diff)
}

/// Regularizer multiplier: 1 above `alpha`, rising linearly to `lambda_max`
/// at coverage 1.
pub fn coverage_weight(coverage: f64, alpha: f64, lambda_max: f64) -> f64 {
    if coverage > alpha {
        1.0
    } else {
        1.0 + (lambda_max - 1.0) / (alpha - 1.0) * (alpha - coverage)
    }
}

/// Value of each term of the total loss for one ray. The regularizer
/// fields already include `lambda(r)` and their loss weight, so
/// `total = color + depth + weight_var + color_var`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub weight_var: f64,
    pub color_var: f64,
    pub lambda: f64,
}

/// Total per-ray loss and its gradient w.r.t. the render outputs.
pub fn total_ray_loss(
    result: &RayRenderResult,
    sup: &RaySupervision,
    w: &LossWeights,
    regularizers_enabled: bool,
) -> (LossTerms, RenderGrads) {
    let (l_color, g_color) = photometric_loss(result.color, sup.gt_color);
    let mut grads = RenderGrads {
        color: g_color,
        ..RenderGrads::default()
    };
    let lambda = if w.coverage_adjustment {
        // Rays whose scaffold ray missed count as observed once.
        coverage_weight(sup.coverage.max(1) as f64, w.alpha, w.lambda_max)
    } else {
        1.0
    };
    let mut terms = LossTerms {
        color: l_color,
        lambda,
        ..LossTerms::default()
    };
    if regularizers_enabled {
        if let Some(prior) = sup.prior_distance {
            if w.lambda_d > 0.0 {
                let (l, g) = match w.depth_loss {
                    DepthLossKind::Robust => robust_depth_loss(result.depth, prior, w.beta),
                    DepthLossKind::L2 => l2_depth_loss(result.depth, prior),
                };
                terms.depth = lambda * w.lambda_d * l;
                grads.depth = lambda * w.lambda_d * g;
            }
        }
        terms.weight_var = lambda * w.lambda_w * result.weight_var;
        grads.weight_var = lambda * w.lambda_w;
        terms.color_var = lambda * w.lambda_c * result.color_var;
        grads.color_var = lambda * w.lambda_c;
    }
    terms.total = terms.color + terms.depth + terms.weight_var + terms.color_var;
    (terms, grads)
}
