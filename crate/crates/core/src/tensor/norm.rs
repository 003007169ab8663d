//! Batch and instance normalization with explicit backward passes.

use alloc::format;
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

use super::{c, Scalar};
use crate::error::CoreError;

fn check_affine<F: Scalar>(
    ch: usize,
    gamma: &ArrayView1<'_, F>,
    beta: &ArrayView1<'_, F>,
) -> Result<(), CoreError> {
    if gamma.len() != ch || beta.len() != ch {
        return Err(CoreError::invalid(format!(
            "norm: affine params ({}, {}) vs {ch} channels",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Everything the backward pass and the running-statistics update need
/// from one training-mode batchnorm application.
pub struct BnTrainOut<F> {
    pub y: Array4<F>,
    pub xhat: Array4<F>,
    pub inv_std: Array1<F>,
    pub batch_mean: Array1<F>,
    /// Biased (population) variance over the batch.
    pub batch_var: Array1<F>,
}

/// Batch normalization over `(batch, h, w)` per channel, using batch
/// statistics.
pub fn batchnorm_train<F: Scalar>(
    x: &ArrayView4<'_, F>,
    gamma: &ArrayView1<'_, F>,
    beta: &ArrayView1<'_, F>,
    eps: f64,
) -> Result<BnTrainOut<F>, CoreError> {
    let (b, h, w, ch) = x.dim();
    check_affine(ch, gamma, beta)?;
    let n = c::<F>((b * h * w) as f64);
    let mean = x
        .sum_axis(Axis(0))
        .sum_axis(Axis(0))
        .sum_axis(Axis(0))
        / n;
    let centered = x - &mean;
    let var = centered
        .mapv(|v| v * v)
        .sum_axis(Axis(0))
        .sum_axis(Axis(0))
        .sum_axis(Axis(0))
        / n;
    let inv_std = var.mapv(|v| (v + c::<F>(eps)).sqrt().recip());
    let xhat = centered * &inv_std;
    let y = &xhat * gamma + beta;
    Ok(BnTrainOut { y, xhat, inv_std, batch_mean: mean, batch_var: var })
}

/// Batch normalization with frozen running statistics.
pub fn batchnorm_infer<F: Scalar>(
    x: &ArrayView4<'_, F>,
    gamma: &ArrayView1<'_, F>,
    beta: &ArrayView1<'_, F>,
    running_mean: &ArrayView1<'_, F>,
    running_var: &ArrayView1<'_, F>,
    eps: f64,
) -> Result<Array4<F>, CoreError> {
    let ch = x.dim().3;
    check_affine(ch, gamma, beta)?;
    if running_mean.len() != ch || running_var.len() != ch {
        return Err(CoreError::invalid(format!(
            "norm: running stats ({}, {}) vs {ch} channels",
            running_mean.len(),
            running_var.len()
        )));
    }
    let inv_std = running_var.mapv(|v| (v + c::<F>(eps)).sqrt().recip());
    Ok((x - running_mean) * &inv_std * gamma + beta)
}

/// Gradients of training-mode batchnorm: `(d_input, d_gamma, d_beta)`.
/// Takes the saved normalized activations and inverse deviations so a
/// training tape only has to keep those two arrays.
pub fn batchnorm_bwd<F: Scalar>(
    xhat: &ArrayView4<'_, F>,
    inv_std: &ArrayView1<'_, F>,
    gamma: &ArrayView1<'_, F>,
    gy: &ArrayView4<'_, F>,
) -> (Array4<F>, Array1<F>, Array1<F>) {
    let (b, h, w, _ch) = gy.dim();
    let n = c::<F>((b * h * w) as f64);
    let dbeta = gy.sum_axis(Axis(0)).sum_axis(Axis(0)).sum_axis(Axis(0));
    let dgamma = (gy * xhat)
        .sum_axis(Axis(0))
        .sum_axis(Axis(0))
        .sum_axis(Axis(0));
    // gx = gamma * inv_std / n * (n*gy - dbeta - xhat * dgamma)
    let scale = gamma * inv_std / n;
    let gx = (gy * n - &dbeta - &(xhat * &dgamma)) * &scale;
    (gx, dgamma, dbeta)
}

/// Exponential moving average update for running statistics:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn ema_update<F: Scalar>(running: &mut Array1<F>, batch: &ArrayView1<'_, F>, momentum: f64) {
    let m = c::<F>(momentum);
    let one_minus = F::one() - m;
    running.zip_mut_with(&batch.view(), |r, &b| *r = *r * m + b * one_minus);
}

/// Instance-norm forward state.
pub struct InOut<F> {
    pub y: Array4<F>,
    pub xhat: Array4<F>,
    /// Per `(batch, channel)` inverse standard deviation.
    pub inv_std: Array2<F>,
}

/// Instance normalization: statistics over `(h, w)` independently per
/// sample and channel, then a shared per-channel affine. Identical in
/// training and inference.
pub fn instancenorm<F: Scalar>(
    x: &ArrayView4<'_, F>,
    gamma: &ArrayView1<'_, F>,
    beta: &ArrayView1<'_, F>,
    eps: f64,
) -> Result<InOut<F>, CoreError> {
    let (_b, h, w, ch) = x.dim();
    check_affine(ch, gamma, beta)?;
    let m = c::<F>((h * w) as f64);
    let mean = x.sum_axis(Axis(1)).sum_axis(Axis(1)) / m; // (B, C)
    let mean4 = mean.clone().insert_axis(Axis(1)).insert_axis(Axis(1));
    let centered = x - &mean4;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)).sum_axis(Axis(1)) / m;
    let inv_std = var.mapv(|v| (v + c::<F>(eps)).sqrt().recip());
    let inv4 = inv_std.clone().insert_axis(Axis(1)).insert_axis(Axis(1));
    let xhat = centered * &inv4;
    let y = &xhat * gamma + beta;
    Ok(InOut { y, xhat, inv_std })
}

/// Gradients of [`instancenorm`]: `(d_input, d_gamma, d_beta)`.
pub fn instancenorm_bwd<F: Scalar>(
    xhat: &ArrayView4<'_, F>,
    inv_std: &ArrayView2<'_, F>,
    gamma: &ArrayView1<'_, F>,
    gy: &ArrayView4<'_, F>,
) -> (Array4<F>, Array1<F>, Array1<F>) {
    let (_b, h, w, _ch) = gy.dim();
    let m = c::<F>((h * w) as f64);
    let dbeta = gy.sum_axis(Axis(0)).sum_axis(Axis(0)).sum_axis(Axis(0));
    let dgamma = (gy * xhat)
        .sum_axis(Axis(0))
        .sum_axis(Axis(0))
        .sum_axis(Axis(0));
    // per-(b, c) reductions for the input gradient
    let sum_gy = gy.sum_axis(Axis(1)).sum_axis(Axis(1)); // (B, C)
    let sum_gy_xhat = (gy * xhat).sum_axis(Axis(1)).sum_axis(Axis(1));
    let sum_gy4 = sum_gy.insert_axis(Axis(1)).insert_axis(Axis(1));
    let sum_gy_xhat4 = sum_gy_xhat.insert_axis(Axis(1)).insert_axis(Axis(1));
    let inv4 = inv_std
        .to_owned()
        .insert_axis(Axis(1))
        .insert_axis(Axis(1));
    let gx = (gy * m - &sum_gy4 - &(xhat * &sum_gy_xhat4)) * &inv4 * gamma / m;
    (gx, dgamma, dbeta)
}
