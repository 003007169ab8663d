//! Adversarial and classification objectives.
//!
//! The discriminator's source head emits patch logits; adversarial
//! terms are evaluated in the numerically stable softplus form after
//! clamping logits to ±30, so no `exp` ever overflows and probabilities
//! never round to exact 0 or 1. The generator's adversarial term
//! defaults to the non-saturating form; the original saturating form is
//! available behind a flag.
//!
//! The classification head is trained with standard multi-class
//! cross-entropy against the relevant phase code on both real-image
//! (discriminator update) and synthesized-image (generator update)
//! paths.

use alloc::format;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};

use crate::error::CoreError;
use crate::phase::{PhaseLabel, NUM_PHASES};
use crate::tensor::{c, to_f64, Scalar};

/// Source logits are clamped to this magnitude before any sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;
/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Allowed deviation from the simplex for classifier probabilities.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// `log(1 + exp(x))` without overflow.
#[inline]
fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (F::one() + (-x.abs()).exp()).ln()
}

/// Logistic sigmoid, evaluated on the numerically safe side.
#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn clamp_logit<F: Scalar>(x: F) -> F {
    let m = c::<F>(LOGIT_CLAMP);
    x.max(-m).min(m)
}

fn check_finite<'a, F: Scalar>(
    name: &str,
    values: impl Iterator<Item = &'a F>,
) -> Result<(), CoreError> {
    let mut any = false;
    for v in values {
        any = true;
        if !v.is_finite() {
            return Err(CoreError::Numeric(format!("{name}: non-finite value")));
        }
    }
    if !any {
        return Err(CoreError::invalid(format!("{name}: empty input")));
    }
    Ok(())
}

/// Discriminator adversarial loss over patch source logits:
/// `-mean log sigmoid(real) - mean log (1 - sigmoid(fake))`,
/// computed as `mean softplus(-real) + mean softplus(fake)`.
pub fn adv_loss_d<F: Scalar>(
    src_real: &ArrayView4<'_, F>,
    src_fake: &ArrayView4<'_, F>,
) -> Result<F, CoreError> {
    check_finite("adv_loss_d: real logits", src_real.iter())?;
    check_finite("adv_loss_d: fake logits", src_fake.iter())?;
    let nr = c::<F>(src_real.len() as f64);
    let nf = c::<F>(src_fake.len() as f64);
    let real_term = src_real.iter().map(|&v| softplus(-clamp_logit(v))).sum::<F>() / nr;
    let fake_term = src_fake.iter().map(|&v| softplus(clamp_logit(v))).sum::<F>() / nf;
    Ok(real_term + fake_term)
}

/// [`adv_loss_d`] plus its gradients w.r.t. the real and fake logits.
pub fn adv_loss_d_grads<F: Scalar>(
    src_real: &ArrayView4<'_, F>,
    src_fake: &ArrayView4<'_, F>,
) -> Result<(F, Array4<F>, Array4<F>), CoreError> {
    let loss = adv_loss_d(src_real, src_fake)?;
    let nr = c::<F>(src_real.len() as f64);
    let nf = c::<F>(src_fake.len() as f64);
    let limit = c::<F>(LOGIT_CLAMP);
    // d/dr softplus(-r) = sigmoid(r) - 1; zero where the clamp saturates
    let g_real = src_real.mapv(|v| {
        if v.abs() > limit {
            F::zero()
        } else {
            (sigmoid(v) - F::one()) / nr
        }
    });
    let g_fake = src_fake.mapv(|v| {
        if v.abs() > limit {
            F::zero()
        } else {
            sigmoid(v) / nf
        }
    });
    Ok((loss, g_real, g_fake))
}

/// Generator adversarial loss over fake source logits.
///
/// Non-saturating (default): `-mean log sigmoid(fake)`, i.e.
/// `mean softplus(-fake)`. Saturating: `mean log (1 - sigmoid(fake))`,
/// i.e. `-mean softplus(fake)`.
pub fn adv_loss_g<F: Scalar>(
    src_fake: &ArrayView4<'_, F>,
    saturating: bool,
) -> Result<F, CoreError> {
    check_finite("adv_loss_g: fake logits", src_fake.iter())?;
    let n = c::<F>(src_fake.len() as f64);
    let sum = if saturating {
        -src_fake.iter().map(|&v| softplus(clamp_logit(v))).sum::<F>()
    } else {
        src_fake.iter().map(|&v| softplus(-clamp_logit(v))).sum::<F>()
    };
    Ok(sum / n)
}

/// [`adv_loss_g`] plus its gradient w.r.t. the fake logits.
pub fn adv_loss_g_grads<F: Scalar>(
    src_fake: &ArrayView4<'_, F>,
    saturating: bool,
) -> Result<(F, Array4<F>), CoreError> {
    let loss = adv_loss_g(src_fake, saturating)?;
    let n = c::<F>(src_fake.len() as f64);
    let limit = c::<F>(LOGIT_CLAMP);
    let g = src_fake.mapv(|v| {
        if v.abs() > limit {
            F::zero()
        } else if saturating {
            -sigmoid(v) / n
        } else {
            (sigmoid(v) - F::one()) / n
        }
    });
    Ok((loss, g))
}

fn check_probs<F: Scalar>(
    probs: &ArrayView2<'_, F>,
    targets: &[PhaseLabel],
) -> Result<(), CoreError> {
    if probs.nrows() != targets.len() || probs.nrows() == 0 {
        return Err(CoreError::invalid(format!(
            "cls_loss: {} probability rows vs {} targets",
            probs.nrows(),
            targets.len()
        )));
    }
    if probs.ncols() != NUM_PHASES {
        return Err(CoreError::invalid(format!(
            "cls_loss: {} columns, expected {NUM_PHASES}",
            probs.ncols()
        )));
    }
    let tol = SIMPLEX_TOL;
    for (i, row) in probs.rows().into_iter().enumerate() {
        let mut sum = 0.0;
        for &p in row.iter() {
            if !p.is_finite() {
                return Err(CoreError::Numeric(format!("cls_loss: non-finite row {i}")));
            }
            let p = to_f64(p);
            if !(-tol..=1.0 + tol).contains(&p) {
                return Err(CoreError::invalid(format!(
                    "cls_loss: row {i} entry {p} outside [0, 1]"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > tol {
            return Err(CoreError::invalid(format!(
                "cls_loss: row {i} sums to {sum}, not a probability vector"
            )));
        }
    }
    Ok(())
}

/// Multi-class cross-entropy against the target phases:
/// `mean -log max(p[target], 1e-12)`.
pub fn cls_loss<F: Scalar>(
    probs: &ArrayView2<'_, F>,
    targets: &[PhaseLabel],
) -> Result<F, CoreError> {
    check_probs(probs, targets)?;
    let n = c::<F>(targets.len() as f64);
    let floor = c::<F>(PROB_FLOOR);
    let sum = probs
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, t)| -(row[t.index()].max(floor)).ln())
        .sum::<F>();
    Ok(sum / n)
}

/// [`cls_loss`] plus its gradient w.r.t. the probabilities.
pub fn cls_loss_grads<F: Scalar>(
    probs: &ArrayView2<'_, F>,
    targets: &[PhaseLabel],
) -> Result<(F, Array2<F>), CoreError> {
    let loss = cls_loss(probs, targets)?;
    let n = c::<F>(targets.len() as f64);
    let floor = c::<F>(PROB_FLOOR);
    let mut g = Array2::<F>::zeros(probs.raw_dim());
    for (i, t) in targets.iter().enumerate() {
        let p = probs[[i, t.index()]];
        if p > floor {
            g[[i, t.index()]] = -(p * n).recip();
        }
    }
    Ok((loss, g))
}

/// Loss-term weights; only the classification weight is configurable.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cls: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !self.lambda_cls.is_finite() || self.lambda_cls < 0.0 {
            return Err(CoreError::config(format!(
                "lambda_cls must be finite and non-negative, got {}",
                self.lambda_cls
            )));
        }
        Ok(())
    }
}

/// Total discriminator objective: adversarial term plus weighted
/// cross-entropy on *real* images.
pub fn d_objective<F: Scalar>(adv_d: F, cls_real: F, w: &LossWeights) -> F {
    adv_d + c::<F>(w.lambda_cls) * cls_real
}

/// Total generator objective: adversarial term plus weighted
/// cross-entropy of synthesized images against their assigned codes.
pub fn g_objective<F: Scalar>(adv_g: F, cls_fake: F, w: &LossWeights) -> F {
    adv_g + c::<F>(w.lambda_cls) * cls_fake
}

/// One training step's scalar losses, as logged per iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossValues {
    pub adv_d: f64,
    pub adv_g: f64,
    pub cls_real: f64,
    pub cls_fake: f64,
    pub d_total: f64,
    pub g_total: f64,
}

impl LossValues {
    pub fn all_finite(&self) -> bool {
        [
            self.adv_d,
            self.adv_g,
            self.cls_real,
            self.cls_fake,
            self.d_total,
            self.g_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
