//! Activations, pooling, resampling, dense layers and tensor plumbing.

use alloc::format;
use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

use super::{c, matmul, matmul_nt, matmul_tn, Scalar};
use crate::error::CoreError;

/// Rectified linear unit.
pub fn relu<F: Scalar>(x: &ArrayView4<'_, F>) -> Array4<F> {
    x.mapv(|v| v.max(F::zero()))
}

/// ReLU gradient from the forward *output* (`y > 0` iff `x > 0`).
pub fn relu_bwd<F: Scalar>(y: &ArrayView4<'_, F>, gy: &ArrayView4<'_, F>) -> Array4<F> {
    let mut gx = gy.to_owned();
    gx.zip_mut_with(&y.view(), |g, &yv| {
        if yv <= F::zero() {
            *g = F::zero();
        }
    });
    gx
}

/// Leaky ReLU with slope `alpha` on the negative side.
pub fn leaky_relu<F: Scalar>(x: &ArrayView4<'_, F>, alpha: f64) -> Array4<F> {
    let a = c::<F>(alpha);
    x.mapv(|v| if v > F::zero() { v } else { v * a })
}

/// Leaky ReLU gradient from the forward output (valid for `alpha > 0`,
/// where the output sign matches the input sign).
pub fn leaky_relu_bwd<F: Scalar>(
    y: &ArrayView4<'_, F>,
    gy: &ArrayView4<'_, F>,
    alpha: f64,
) -> Array4<F> {
    let a = c::<F>(alpha);
    let mut gx = gy.to_owned();
    gx.zip_mut_with(&y.view(), |g, &yv| {
        if yv <= F::zero() {
            *g = *g * a;
        }
    });
    gx
}

/// Elementwise tanh.
pub fn tanh_act<F: Scalar>(x: &ArrayView4<'_, F>) -> Array4<F> {
    x.mapv(|v| v.tanh())
}

/// tanh gradient from the forward output: `gx = gy * (1 - y^2)`.
pub fn tanh_bwd<F: Scalar>(y: &ArrayView4<'_, F>, gy: &ArrayView4<'_, F>) -> Array4<F> {
    let mut gx = gy.to_owned();
    gx.zip_mut_with(&y.view(), |g, &yv| *g = *g * (F::one() - yv * yv));
    gx
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per
/// output cell, which of its four taps won (row-major offset 0..4,
/// first maximum wins ties).
pub fn maxpool2<F: Scalar>(
    x: &ArrayView4<'_, F>,
) -> Result<(Array4<F>, Array4<u8>), CoreError> {
    let (b, h, w, ch) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CoreError::invalid(format!(
            "maxpool2: extent ({h}, {w}) must be even"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<F>::zeros((b, oh, ow, ch));
    let mut sel = Array4::<u8>::zeros((b, oh, ow, ch));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..ch {
                    let mut best = x[[bi, 2 * oy, 2 * ox, ci]];
                    let mut which = 0u8;
                    for (k, (dy, dx)) in
                        [(0usize, 1usize), (1, 0), (1, 1)].iter().enumerate()
                    {
                        let v = x[[bi, 2 * oy + dy, 2 * ox + dx, ci]];
                        if v > best {
                            best = v;
                            which = k as u8 + 1;
                        }
                    }
                    y[[bi, oy, ox, ci]] = best;
                    sel[[bi, oy, ox, ci]] = which;
                }
            }
        }
    }
    Ok((y, sel))
}

/// Scatter pooled gradients back to the winning taps.
pub fn maxpool2_bwd<F: Scalar>(sel: &Array4<u8>, gy: &ArrayView4<'_, F>) -> Array4<F> {
    let (b, oh, ow, ch) = gy.dim();
    let mut gx = Array4::<F>::zeros((b, 2 * oh, 2 * ow, ch));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..ch {
                    let which = sel[[bi, oy, ox, ci]] as usize;
                    let (dy, dx) = (which / 2, which % 2);
                    gx[[bi, 2 * oy + dy, 2 * ox + dx, ci]] = gy[[bi, oy, ox, ci]];
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<F: Scalar>(x: &ArrayView4<'_, F>) -> Array4<F> {
    let (b, h, w, ch) = x.dim();
    let mut y = Array4::<F>::zeros((b, 2 * h, 2 * w, ch));
    for dy in 0..2 {
        for dx in 0..2 {
            let mut dst = y.slice_mut(s![.., dy..;2, dx..;2, ..]);
            dst.assign(x);
        }
    }
    y
}

/// Gradient of [`upsample2`]: each input cell collects its 2x2 copies.
pub fn upsample2_bwd<F: Scalar>(gy: &ArrayView4<'_, F>) -> Result<Array4<F>, CoreError> {
    let (_b, h, w, _ch) = gy.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CoreError::invalid(format!(
            "upsample2_bwd: extent ({h}, {w}) must be even"
        )));
    }
    let mut gx = gy.slice(s![.., 0..;2, 0..;2, ..]).to_owned();
    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
        gx += &gy.slice(s![.., dy..;2, dx..;2, ..]);
    }
    Ok(gx)
}

/// Mean over the spatial extent: `(B, H, W, C) -> (B, C)`.
pub fn global_avg_pool<F: Scalar>(x: &ArrayView4<'_, F>) -> Array2<F> {
    let (_b, h, w, _ch) = x.dim();
    x.sum_axis(Axis(1)).sum_axis(Axis(1)) / c::<F>((h * w) as f64)
}

/// Gradient of [`global_avg_pool`] back onto the `(h, w)` grid.
pub fn global_avg_pool_bwd<F: Scalar>(
    gy: &ArrayView2<'_, F>,
    hw: (usize, usize),
) -> Array4<F> {
    let (b, ch) = gy.dim();
    let (h, w) = hw;
    let scaled = gy.mapv(|v| v / c::<F>((h * w) as f64));
    let mut gx = Array4::<F>::zeros((b, h, w, ch));
    let g4 = scaled.insert_axis(Axis(1)).insert_axis(Axis(1));
    gx += &g4;
    gx
}

/// Fully connected layer: `y = x @ w + b` with `w: (inputs, outputs)`.
pub fn dense<F: Scalar>(
    x: &ArrayView2<'_, F>,
    w: &ArrayView2<'_, F>,
    b: Option<&ArrayView1<'_, F>>,
) -> Result<Array2<F>, CoreError> {
    if x.ncols() != w.nrows() {
        return Err(CoreError::invalid(format!(
            "dense: input width {} vs weight rows {}",
            x.ncols(),
            w.nrows()
        )));
    }
    let mut y = matmul(x, w);
    if let Some(b) = b {
        if b.len() != w.ncols() {
            return Err(CoreError::invalid(format!(
                "dense: bias length {} vs {} outputs",
                b.len(),
                w.ncols()
            )));
        }
        y += b;
    }
    Ok(y)
}

/// Gradients of [`dense`]: `(d_input, d_weight, d_bias)`.
pub fn dense_bwd<F: Scalar>(
    x: &ArrayView2<'_, F>,
    w: &ArrayView2<'_, F>,
    gy: &ArrayView2<'_, F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let gx = matmul_nt(gy, w);
    let gw = matmul_tn(x, gy);
    let gb = gy.sum_axis(Axis(0));
    (gx, gw, gb)
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_rows<F: Scalar>(z: &ArrayView2<'_, F>) -> Array2<F> {
    let mut p = z.to_owned();
    for mut row in p.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Softmax gradient from probabilities: `gz_i = p_i (g_i - sum_j g_j p_j)`.
pub fn softmax_rows_bwd<F: Scalar>(
    p: &ArrayView2<'_, F>,
    gp: &ArrayView2<'_, F>,
) -> Array2<F> {
    let dot = (p * gp).sum_axis(Axis(1)).insert_axis(Axis(1)); // (B, 1)
    p * &(gp - &dot)
}

/// Concatenate two maps along the channel axis.
pub fn concat_channels<F: Scalar>(
    a: &ArrayView4<'_, F>,
    b: &ArrayView4<'_, F>,
) -> Result<Array4<F>, CoreError> {
    if a.dim().0 != b.dim().0 || a.dim().1 != b.dim().1 || a.dim().2 != b.dim().2 {
        return Err(CoreError::invalid(format!(
            "concat_channels: grids {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    ndarray::concatenate(Axis(3), &[a.view(), b.view()])
        .map_err(|e| CoreError::invalid(format!("concat_channels: {e}")))
}

/// Split a channel-concatenated gradient back into its two parts;
/// `ca` is the channel count of the first part.
pub fn split_channels_grad<F: Scalar>(
    g: &ArrayView4<'_, F>,
    ca: usize,
) -> Result<(Array4<F>, Array4<F>), CoreError> {
    let ch = g.dim().3;
    if ca >= ch {
        return Err(CoreError::invalid(format!(
            "split_channels_grad: first part {ca} of {ch} channels"
        )));
    }
    Ok((
        g.slice(s![.., .., .., ..ca]).to_owned(),
        g.slice(s![.., .., .., ca..]).to_owned(),
    ))
}

/// Tile a `(B, C)` vector to every cell of an `(h, w)` grid.
pub fn broadcast_hw<F: Scalar>(v: &ArrayView2<'_, F>, h: usize, w: usize) -> Array4<F> {
    let (b, ch) = v.dim();
    let mut y = Array4::<F>::zeros((b, h, w, ch));
    let v4 = v.insert_axis(Axis(1)).insert_axis(Axis(1));
    y += &v4;
    y
}

/// Gradient of [`broadcast_hw`]: sum each sample's grid per channel.
pub fn broadcast_hw_bwd<F: Scalar>(gy: &ArrayView4<'_, F>) -> Array2<F> {
    gy.sum_axis(Axis(1)).sum_axis(Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{fd_grad4, max_rel_err, seeded4, seeded_mat};
    use ndarray::array;

    #[test]
    fn activation_values() {
        let x = ndarray::Array4::from_shape_vec(
            (1, 1, 1, 4),
            alloc::vec![-2.0f64, -0.5, 0.5, 2.0],
        )
        .unwrap();
        let y = relu(&x.view());
        assert_eq!(y.as_slice().unwrap(), &[0.0, 0.0, 0.5, 2.0]);
        let y = leaky_relu(&x.view(), 0.01);
        assert_eq!(y.as_slice().unwrap(), &[-0.02, -0.005, 0.5, 2.0]);
        let y = tanh_act(&x.view());
        assert!((y[[0, 0, 0, 3]] - 2.0f64.tanh()).abs() < 1e-15);
        assert!(y.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        // keep values away from the kinks at 0
        let x = seeded4(70, (2, 3, 3, 2)).mapv(|v| v + 0.05 * v.signum());
        let t = seeded4(71, (2, 3, 3, 2));
        let dot = |y: &ndarray::Array4<f64>| y.iter().zip(t.iter()).map(|(a, b)| a * b).sum();

        let y = relu(&x.view());
        let gx = relu_bwd(&y.view(), &t.view());
        let fx = fd_grad4(|v| dot(&relu(&v.view())), &x);
        assert!(max_rel_err(gx.iter(), fx.iter()) < 1e-6, "relu");

        let y = leaky_relu(&x.view(), 0.01);
        let gx = leaky_relu_bwd(&y.view(), &t.view(), 0.01);
        let fx = fd_grad4(|v| dot(&leaky_relu(&v.view(), 0.01)), &x);
        assert!(max_rel_err(gx.iter(), fx.iter()) < 1e-6, "leaky");

        let y = tanh_act(&x.view());
        let gx = tanh_bwd(&y.view(), &t.view());
        let fx = fd_grad4(|v| dot(&tanh_act(&v.view())), &x);
        assert!(max_rel_err(gx.iter(), fx.iter()) < 1e-6, "tanh");
    }

    #[test]
    fn maxpool_picks_first_maximum() {
        let x = ndarray::Array4::from_shape_vec(
            (1, 2, 2, 1),
            alloc::vec![3.0f64, 3.0, 1.0, 2.0],
        )
        .unwrap();
        let (y, sel) = maxpool2(&x.view()).unwrap();
        assert_eq!(y[[0, 0, 0, 0]], 3.0);
        assert_eq!(sel[[0, 0, 0, 0]], 0, "tie must go to the first tap");
        // gradient lands only on the winner
        let gy = ndarray::Array4::from_elem((1, 1, 1, 1), 5.0);
        let gx = maxpool2_bwd(&sel, &gy.view());
        assert_eq!(gx[[0, 0, 0, 0]], 5.0);
        assert_eq!(gx[[0, 0, 1, 0]], 0.0);
    }

    #[test]
    fn maxpool_gradients_match_finite_differences() {
        let x = seeded4(72, (2, 4, 6, 3));
        let t = seeded4(73, (2, 2, 3, 3));
        let (_, sel) = maxpool2(&x.view()).unwrap();
        let gx = maxpool2_bwd(&sel, &t.view());
        let fx = fd_grad4(
            |v| {
                maxpool2(&v.view())
                    .unwrap()
                    .0
                    .iter()
                    .zip(t.iter())
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &x,
        );
        assert!(max_rel_err(gx.iter(), fx.iter()) < 1e-6);
        assert!(maxpool2(&seeded4(74, (1, 3, 4, 1)).view()).is_err());
    }

    #[test]
    fn upsample_replicates_and_reduces() {
        let x = ndarray::Array4::from_shape_vec((1, 1, 2, 1), alloc::vec![1.0f64, 2.0])
            .unwrap();
        let y = upsample2(&x.view());
        assert_eq!(y.dim(), (1, 2, 4, 1));
        assert_eq!(y[[0, 0, 0, 0]], 1.0);
        assert_eq!(y[[0, 1, 1, 0]], 1.0);
        assert_eq!(y[[0, 0, 2, 0]], 2.0);
        assert_eq!(y[[0, 1, 3, 0]], 2.0);

        let x = seeded4(75, (2, 3, 2, 2));
        let t = seeded4(76, (2, 6, 4, 2));
        let gx = upsample2_bwd(&t.view()).unwrap();
        let fx = fd_grad4(
            |v| upsample2(&v.view()).iter().zip(t.iter()).map(|(a, b)| a * b).sum(),
            &x,
        );
        assert!(max_rel_err(gx.iter(), fx.iter()) < 1e-6);
    }

    #[test]
    fn gap_means_and_gradient() {
        let x = ndarray::Array4::from_shape_fn((1, 2, 2, 2), |(_, h, w, c)| {
            (h * 2 + w) as f64 + 10.0 * c as f64
        });
        let y = global_avg_pool(&x.view());
        assert!((y[[0, 0]] - 1.5).abs() < 1e-12);
        assert!((y[[0, 1]] - 11.5).abs() < 1e-12);

        let x = seeded4(77, (3, 4, 5, 2));
        let t = seeded_mat(78, (3, 2));
        let gx = global_avg_pool_bwd(&t.view(), (4, 5));
        let fx = fd_grad4(
            |v| {
                global_avg_pool(&v.view())
                    .iter()
                    .zip(t.iter())
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &x,
        );
        assert!(max_rel_err(gx.iter(), fx.iter()) < 1e-6);
    }

    #[test]
    fn dense_matches_manual_product() {
        let x = array![[1.0f64, 2.0]];
        let w = array![[3.0f64, 4.0, 5.0], [6.0, 7.0, 8.0]];
        let b = array![0.5f64, -0.5, 0.0];
        let y = dense(&x.view(), &w.view(), Some(&b.view())).unwrap();
        assert_eq!(y, array![[15.5, 17.5, 21.0]]);
        assert!(dense(&x.view(), &w.t(), None).is_err());
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let x = seeded_mat(80, (3, 4));
        let w = seeded_mat(81, (4, 2));
        let t = seeded_mat(82, (3, 2));
        let (gx, gw, gb) = dense_bwd(&x.view(), &w.view(), &t.view());
        let h = 1e-5;
        let loss = |x: &ndarray::Array2<f64>, w: &ndarray::Array2<f64>| -> f64 {
            dense(&x.view(), &w.view(), None)
                .unwrap()
                .iter()
                .zip(t.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            let got = gx.as_slice().unwrap()[i];
            assert!((got - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_slice_mut().unwrap()[i] += h;
            wm.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            let got = gw.as_slice().unwrap()[i];
            assert!((got - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
        // bias gradient is the column sum of the cotangent
        assert!(max_rel_err(gb.iter(), t.sum_axis(Axis(0)).iter()) < 1e-12);
    }

    #[test]
    fn softmax_rows_are_simplex_points() {
        let z = array![[1.0f64, 2.0, 3.0], [1000.0, 1000.0, 1000.0], [-800.0, 0.0, 800.0]];
        let p = softmax_rows(&z.view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // uniform logits give uniform probabilities, huge logits don't overflow
        assert!((p[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[[2, 2]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let z = seeded_mat(83, (3, 4));
        let t = seeded_mat(84, (3, 4));
        let p = softmax_rows(&z.view());
        let gz = softmax_rows_bwd(&p.view(), &t.view());
        let h = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp.as_slice_mut().unwrap()[i] += h;
            zm.as_slice_mut().unwrap()[i] -= h;
            let f = |z: &ndarray::Array2<f64>| -> f64 {
                softmax_rows(&z.view()).iter().zip(t.iter()).map(|(a, b)| a * b).sum()
            };
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            let got = gz.as_slice().unwrap()[i];
            assert!((got - fd).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let a = seeded4(85, (2, 3, 3, 2));
        let b = seeded4(86, (2, 3, 3, 5));
        let y = concat_channels(&a.view(), &b.view()).unwrap();
        assert_eq!(y.dim(), (2, 3, 3, 7));
        let (ga, gb) = split_channels_grad(&y.view(), 2).unwrap();
        assert_eq!(ga, a);
        assert_eq!(gb, b);
        let bad = seeded4(87, (2, 4, 3, 1));
        assert!(concat_channels(&a.view(), &bad.view()).is_err());
    }

    #[test]
    fn broadcast_and_reduce() {
        let v = array![[1.0f64, 2.0], [3.0, 4.0]];
        let y = broadcast_hw(&v.view(), 2, 3);
        assert_eq!(y.dim(), (2, 2, 3, 2));
        assert_eq!(y[[0, 1, 2, 1]], 2.0);
        assert_eq!(y[[1, 0, 0, 0]], 3.0);
        let g = broadcast_hw_bwd(&y.view());
        assert_eq!(g, v.mapv(|x| 6.0 * x));
    }
}
