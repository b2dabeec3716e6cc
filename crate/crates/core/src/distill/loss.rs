use crate::error::{Error, Result};
use crate::numerics::{argmax, log_softmax, softmax, validate_distribution, Vector};

use super::{BlendMode, Gating};

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<(f64, Vector)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let loss = -log_softmax(logits, 1.0)[label];
    let mut grad = softmax(logits, 1.0);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// `T² · KL(softmax(teacher/T) ‖ softmax(student/T))` and its gradient with
/// respect to the student logits, `T · (p_s − p_t)`.
pub fn kd_loss(student: &[f64], teacher: &[f64], temp: f64) -> Result<(f64, Vector)> {
    kd_loss_scaled(student, teacher, temp, true)
}

/// [`kd_loss`] with the `T²` factor optional.
pub fn kd_loss_scaled(
    student: &[f64],
    teacher: &[f64],
    temp: f64,
    temp_squared: bool,
) -> Result<(f64, Vector)> {
    if student.len() != teacher.len() {
        return Err(Error::DimMismatch {
            expected: teacher.len(),
            actual: student.len(),
            context: "kd logits",
        });
    }
    if !(temp > 0.0) {
        return Err(Error::InvalidHyperparameter(format!("temperature {temp} must be > 0")));
    }
    let pt = softmax(teacher, temp);
    let log_pt = log_softmax(teacher, temp);
    let log_ps = log_softmax(student, temp);
    let kl: f64 = pt
        .iter()
        .zip(log_pt.iter().zip(&log_ps))
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, (lt, ls))| p * (lt - ls))
        .sum::<f64>()
        .max(0.0);
    let ps = softmax(student, temp);
    let scale = if temp_squared { temp * temp } else { 1.0 };
    let grad = ps
        .iter()
        .zip(&pt)
        .map(|(s, t)| scale * (s - t) / temp)
        .collect();
    Ok((scale * kl, grad))
}

/// Top probability minus the runner-up (ties give 0).
pub fn confidence_margin(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::InvalidDistribution(format!(
            "confidence margin needs at least 2 classes, got {}",
            p.len()
        )));
    }
    validate_distribution(p, 1e-9)?;
    let top = argmax(p);
    let second = p
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != top)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((p[top] - second).clamp(0.0, 1.0))
}

/// `exp(beta · cm(p)^alpha)` before clamping.
pub fn margin_weight_unclamped(cm: f64, beta: f64, alpha: f64) -> f64 {
    (beta * cm.powf(alpha)).exp()
}

/// Instance weight from the auxiliary prediction `p_aux` for an example with
/// label `label`.
///
/// Gated: 1 when the aux argmax (lowest index on ties) is right, otherwise
/// `exp(beta · cm^alpha)`. Unconditional: always the exponential. The result
/// is clamped to `[1, cap]`.
pub fn margin_weight(
    p_aux: &[f64],
    label: usize,
    beta: f64,
    alpha: f64,
    cap: f64,
    gating: Gating,
) -> Result<f64> {
    if !(beta >= 0.0) || !(alpha > 0.0) || !(cap >= 1.0) {
        return Err(Error::InvalidHyperparameter(format!(
            "beta = {beta}, alpha = {alpha}, cap = {cap}"
        )));
    }
    let cm = confidence_margin(p_aux)?;
    if gating == Gating::GatedOnAuxError && argmax(p_aux) == label {
        return Ok(1.0);
    }
    Ok(margin_weight_unclamped(cm, beta, alpha).clamp(1.0, cap))
}

/// Coefficients `(c_ce, c_kd)` with `loss = c_ce·ce + c_kd·kd`.
pub fn blend_coefficients(mode: BlendMode, lambda: f64, wt: f64) -> (f64, f64) {
    match mode {
        BlendMode::LambdaBlend => (1.0 - lambda, lambda * wt),
        BlendMode::Alg2Additive => (1.0, wt),
    }
}

/// `(1 − λ)·ce + λ·wt·kd` or `ce + wt·kd`, depending on the blend mode.
pub fn student_loss(ce: f64, kd: f64, wt: f64, mode: BlendMode, lambda: f64) -> f64 {
    let (a, b) = blend_coefficients(mode, lambda, wt);
    a * ce + b * kd
}
