//! Lesion-focused training objective.
//!
//! `total = dice + λ · w_size · focal`, where `focal` is the voxel-balanced
//! focal term
//!
//! ```text
//! L_V = −(1/N) Σᵢ [ α yᵢ (1−pᵢ)^γ log pᵢ + (1−α)(1−yᵢ) pᵢ^γ log(1−pᵢ) ]
//! ```
//!
//! and `w_size` optionally up-weights volumes whose lesion occupies a small
//! fraction of the voxels. All sums run over the flat index in ascending
//! order, so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[P_MIN, 1 − P_MIN]` before taking logs.
pub const P_MIN: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeWeighting {
    Off,
    #[default]
    InverseFraction,
}

/// Which pixelwise term accompanies the Dice loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Dice + λ · w_size · voxel-balanced focal term.
    #[default]
    Zoom,
    /// Dice + λ · binary cross-entropy; the plain fine-tuning objective.
    DiceBce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub objective: Objective,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    pub combine_lambda: f64,
    pub size_weighting: SizeWeighting,
    pub size_exponent: f64,
    /// `δ` in `(fraction + δ)^(−exponent)`.
    pub size_floor: f64,
    /// Lesion fraction at which the size weight equals one.
    pub size_reference: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Zoom,
            focal_alpha: 0.75,
            focal_gamma: 2.0,
            dice_smooth: 1e-5,
            combine_lambda: 1.0,
            size_weighting: SizeWeighting::InverseFraction,
            size_exponent: 0.5,
            size_floor: 1e-6,
            size_reference: 0.05,
        }
    }
}

impl LossConfig {
    /// Dice plus unweighted binary cross-entropy.
    pub fn dice_bce() -> Self {
        Self {
            objective: Objective::DiceBce,
            size_weighting: SizeWeighting::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return bad(format!("focal_alpha must lie in (0, 1), got {}", self.focal_alpha));
        }
        if !(self.focal_gamma >= 0.0) {
            return bad(format!("focal_gamma must be >= 0, got {}", self.focal_gamma));
        }
        if !(self.dice_smooth > 0.0) {
            return bad(format!("dice_smooth must be > 0, got {}", self.dice_smooth));
        }
        if !(self.combine_lambda >= 0.0) {
            return bad(format!("combine_lambda must be >= 0, got {}", self.combine_lambda));
        }
        if !(self.size_floor > 0.0 && self.size_reference > 0.0 && self.size_exponent >= 0.0) {
            return bad("size weighting needs floor > 0, reference > 0, exponent >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub dice_term: f64,
    /// Pixelwise term: the focal term, or BCE under [`Objective::DiceBce`].
    pub focal_term: f64,
    pub lesion_fraction: f64,
    pub size_weight: f64,
}

fn check_inputs(p: &Tensor, y: &Tensor) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            context: "loss inputs",
            expected: y.shape().to_vec(),
            actual: p.shape().to_vec(),
        });
    }
    if p.is_empty() {
        return Err(Error::InvalidInput("loss on an empty volume".into()));
    }
    if let Some(i) = p.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput(format!(
            "probability {} at flat index {i} lies outside [0, 1]",
            p.data()[i]
        )));
    }
    if let Some(i) = y.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput(format!(
            "label {} at flat index {i} is not binary",
            y.data()[i]
        )));
    }
    Ok(())
}

fn clamp(p: f64) -> f64 {
    p.clamp(P_MIN, 1.0 - P_MIN)
}

/// Focal value and, when requested, its gradient w.r.t. `p`.
fn focal_impl(p: &[f64], y: &[f64], alpha: f64, gamma: f64, grad: Option<&mut [f64]>) -> f64 {
    let n = p.len() as f64;
    let mut total = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let q = clamp(pi);
        let pos = alpha * yi * (1.0 - q).powf(gamma) * q.ln();
        let neg = (1.0 - alpha) * (1.0 - yi) * q.powf(gamma) * (1.0 - q).ln();
        total += pos + neg;
    }
    if let Some(grad) = grad {
        for ((g, &pi), &yi) in grad.iter_mut().zip(p).zip(y) {
            if pi <= P_MIN || pi >= 1.0 - P_MIN {
                *g = 0.0;
                continue;
            }
            let dpos = if yi != 0.0 {
                let m = (1.0 - pi).powf(gamma);
                let dm = if gamma == 0.0 {
                    0.0
                } else {
                    -gamma * (1.0 - pi).powf(gamma - 1.0)
                };
                alpha * yi * (dm * pi.ln() + m / pi)
            } else {
                0.0
            };
            let dneg = if yi != 1.0 {
                let m = pi.powf(gamma);
                let dm = if gamma == 0.0 {
                    0.0
                } else {
                    gamma * pi.powf(gamma - 1.0)
                };
                (1.0 - alpha) * (1.0 - yi) * (dm * (1.0 - pi).ln() - m / (1.0 - pi))
            } else {
                0.0
            };
            *g = -(dpos + dneg) / n;
        }
    }
    -total / n
}

fn dice_impl(p: &[f64], y: &[f64], smooth: f64, grad: Option<&mut [f64]>) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        inter += pi * yi;
        union += pi + yi;
    }
    let num = 2.0 * inter + smooth;
    let den = union + smooth;
    if let Some(grad) = grad {
        for (g, &yi) in grad.iter_mut().zip(y) {
            *g = -(2.0 * yi * den - num) / (den * den);
        }
    }
    (1.0 - num / den).clamp(0.0, 1.0)
}

pub fn focal_term(p: &Tensor, y: &Tensor, alpha: f64, gamma: f64) -> Result<f64> {
    check_inputs(p, y)?;
    Ok(focal_impl(p.data(), y.data(), alpha, gamma, None))
}

pub fn dice_term(p: &Tensor, y: &Tensor, smooth: f64) -> Result<f64> {
    check_inputs(p, y)?;
    Ok(dice_impl(p.data(), y.data(), smooth, None))
}

/// Mean binary cross-entropy (equals twice the focal term at α = ½, γ = 0).
pub fn bce_term(p: &Tensor, y: &Tensor) -> Result<f64> {
    check_inputs(p, y)?;
    Ok(2.0 * focal_impl(p.data(), y.data(), 0.5, 0.0, None))
}

pub fn lesion_fraction(y: &Tensor) -> f64 {
    y.sum() / y.len() as f64
}

pub fn size_weight(fraction: f64, config: &LossConfig) -> f64 {
    match config.size_weighting {
        SizeWeighting::Off => 1.0,
        SizeWeighting::InverseFraction => ((fraction + config.size_floor)
            / (config.size_reference + config.size_floor))
            .powf(-config.size_exponent),
    }
}

fn objective_impl(
    p: &[f64],
    y: &Tensor,
    config: &LossConfig,
    mut grad: Option<&mut [f64]>,
) -> LossReport {
    let yd = y.data();
    let fraction = lesion_fraction(y);
    let mut pix_grad = grad.as_ref().map(|g| vec![0.0; g.len()]);
    let (pixel, weight) = match config.objective {
        Objective::Zoom => (
            focal_impl(
                p,
                yd,
                config.focal_alpha,
                config.focal_gamma,
                pix_grad.as_deref_mut(),
            ),
            size_weight(fraction, config),
        ),
        Objective::DiceBce => (2.0 * focal_impl(p, yd, 0.5, 0.0, pix_grad.as_deref_mut()), 1.0),
    };
    if config.objective == Objective::DiceBce {
        if let Some(pg) = pix_grad.as_mut() {
            pg.iter_mut().for_each(|v| *v *= 2.0);
        }
    }
    let dice = dice_impl(p, yd, config.dice_smooth, grad.as_deref_mut());
    let coeff = config.combine_lambda * weight;
    if let (Some(g), Some(pg)) = (grad, pix_grad) {
        for (a, b) in g.iter_mut().zip(pg) {
            *a += coeff * b;
        }
    }
    LossReport {
        total: dice + coeff * pixel,
        dice_term: dice,
        focal_term: pixel,
        lesion_fraction: fraction,
        size_weight: weight,
    }
}

pub fn zoom_loss(p: &Tensor, y: &Tensor, config: &LossConfig) -> Result<LossReport> {
    config.validate()?;
    check_inputs(p, y)?;
    Ok(objective_impl(p.data(), y, config, None))
}

/// Loss report together with `∂total/∂p`.
pub fn zoom_loss_with_grad(
    p: &Tensor,
    y: &Tensor,
    config: &LossConfig,
) -> Result<(LossReport, Tensor)> {
    config.validate()?;
    check_inputs(p, y)?;
    let mut grad = vec![0.0; p.len()];
    let report = objective_impl(p.data(), y, config, Some(&mut grad));
    Ok((report, Tensor::from_parts(p.shape().to_vec(), grad)))
}

/// Records the objective on the tape as a scalar node depending on `p`.
pub fn zoom_loss_graph(
    g: &mut Graph,
    p: Var,
    y: &Tensor,
    config: &LossConfig,
) -> Result<(Var, LossReport)> {
    let (report, grad) = zoom_loss_with_grad(g.value(p), y, config)?;
    let node = g.custom(
        &[p],
        Tensor::scalar(report.total),
        Box::new(move |_, _, upstream| vec![grad.map(|v| v * upstream.item())]),
    );
    Ok((node, report))
}
