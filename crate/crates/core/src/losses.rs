//! Training objectives, all recorded on the autodiff tape.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StetError};
use crate::masking::MaskMatrix;
use crate::tensor::{Tape, Var};

/// Lower clamp applied to every log argument.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsymmetricLossConfig {
    /// Focusing exponent on positives.
    pub gamma_plus: f64,
    /// Focusing exponent on negatives.
    pub gamma_minus: f64,
    /// Probability shift applied to negatives.
    pub margin: f64,
}

impl Default for AsymmetricLossConfig {
    fn default() -> Self {
        Self {
            gamma_plus: 1.0,
            gamma_minus: 0.0,
            margin: 0.05,
        }
    }
}

impl AsymmetricLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_plus >= 0.0 && self.gamma_minus >= 0.0) {
            return Err(StetError::Parameter("focusing exponents must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(StetError::Parameter(format!("margin {} not in [0, 1)", self.margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Asymmetric,
    CrossEntropy,
}

/// Mean squared reconstruction error over masked entries only.
pub fn masked_mse_loss(tape: &mut Tape, x_true: Var, x_rec: Var, mask: &MaskMatrix) -> Result<Var> {
    if tape.shape(x_true) != tape.shape(x_rec) || tape.shape(x_true) != mask.shape() {
        return Err(StetError::dim("masked_mse_loss", tape.shape(x_true), tape.shape(x_rec)));
    }
    let count = mask.masked_count();
    if count == 0 {
        return Err(StetError::DegenerateMask);
    }
    let indicator = tape.constant_from(mask.shape().to_vec(), mask.masked_indicator())?;
    let diff = tape.sub(x_rec, x_true)?;
    let sq = tape.mul(diff, diff)?;
    let masked = tape.mul(sq, indicator)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / count as f64))
}

fn check_probs(tape: &Tape, v: Var) -> Result<()> {
    if tape.value(v).iter().any(|p| p.is_nan()) {
        return Err(StetError::NumericInstability { path: "loss input".into() });
    }
    Ok(())
}

/// Asymmetric multi-label loss, summed over classes (and batch rows):
///
/// `-Σ [ y (1-ŷ)^γ⁺ log ŷ + (1-y) (ŷₘ)^γ⁻ log(1-ŷₘ) ]`, `ŷₘ = max(ŷ - m, 0)`.
///
/// `targets` has the same layout as `probs` and holds 0/1 entries.
pub fn asymmetric_loss(
    tape: &mut Tape,
    targets: &[f64],
    probs: Var,
    cfg: &AsymmetricLossConfig,
) -> Result<Var> {
    cfg.validate()?;
    check_probs(tape, probs)?;
    let shape = tape.shape(probs).to_vec();
    if targets.len() != tape.value(probs).len() {
        return Err(StetError::dim("asymmetric_loss", &shape, &[targets.len()]));
    }
    let y = tape.constant_from(shape.clone(), targets.to_vec())?;
    let not_y = tape.constant_from(shape, targets.iter().map(|v| 1.0 - v).collect())?;

    // positive: y (1-ŷ)^γ⁺ log(ŷ)
    let one_minus = tape.scale(probs, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let focus_pos = tape.pow(one_minus, cfg.gamma_plus);
    let p_clamped = tape.clamp_min(probs, LOG_EPS);
    let log_p = tape.log(p_clamped);
    let pos = tape.mul(focus_pos, log_p)?;
    let pos = tape.mul(pos, y)?;

    // negative: (1-y) ŷₘ^γ⁻ log(1-ŷₘ)
    let shifted = tape.add_scalar(probs, -cfg.margin);
    let shifted = tape.clamp_min(shifted, 0.0);
    let focus_neg = tape.pow(shifted, cfg.gamma_minus);
    let comp = tape.scale(shifted, -1.0);
    let comp = tape.add_scalar(comp, 1.0);
    let comp = tape.clamp_min(comp, LOG_EPS);
    let log_comp = tape.log(comp);
    let neg = tape.mul(focus_neg, log_comp)?;
    let neg = tape.mul(neg, not_y)?;

    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0))
}

/// Softmax cross-entropy of a single logit row against class `target`.
pub fn cross_entropy_loss(tape: &mut Tape, target: usize, logits: Var) -> Result<Var> {
    let n = tape.value(logits).len();
    if target >= n {
        return Err(StetError::Mapping(target));
    }
    let max = tape.value(logits).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shape = tape.shape(logits).to_vec();
    let shifted = tape.add_scalar(logits, -max);
    let e = tape.exp(shifted);
    let s = tape.sum(e);
    let lse = tape.log(s);
    let mut onehot = vec![0.0; n];
    onehot[target] = 1.0;
    let onehot = tape.constant_from(shape, onehot)?;
    let picked = tape.mul(shifted, onehot)?;
    let picked = tape.sum(picked);
    tape.sub(lse, picked)
}

/// Mean of squared residuals.
pub fn mse_regression_loss(tape: &mut Tape, target: &[f64], pred: Var) -> Result<Var> {
    if target.len() != tape.value(pred).len() {
        return Err(StetError::dim("mse_regression_loss", tape.shape(pred), &[target.len()]));
    }
    let t = tape.constant_from(tape.shape(pred).to_vec(), target.to_vec())?;
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}
