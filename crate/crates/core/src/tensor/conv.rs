//! Convolution and transposed convolution via im2col lowering.

use alloc::format;
use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

use super::{matmul, matmul_nt, matmul_tn, Scalar};
use crate::error::CoreError;

/// Kernel footprint, stride and zero padding of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// 3x3, stride 1, pad 1: shape-preserving.
    pub const K3S1: ConvGeom = ConvGeom { kh: 3, kw: 3, stride: 1, pad: 1 };
    /// 3x3, stride 2, pad 1: halves even extents.
    pub const K3S2: ConvGeom = ConvGeom { kh: 3, kw: 3, stride: 2, pad: 1 };
    /// 4x4, stride 2, pad 1: the transposed-conv geometry that exactly
    /// doubles extents.
    pub const K4S2: ConvGeom = ConvGeom { kh: 4, kw: 4, stride: 2, pad: 1 };
    /// 1x1 pointwise.
    pub const K1S1: ConvGeom = ConvGeom { kh: 1, kw: 1, stride: 1, pad: 0 };

    /// 7x7, stride 1, size-preserving.
    pub const K7S1: ConvGeom = ConvGeom { kh: 7, kw: 7, stride: 1, pad: 3 };
    /// 7x7, stride 2: large-kernel stem that halves even extents.
    pub const K7S2: ConvGeom = ConvGeom { kh: 7, kw: 7, stride: 2, pad: 3 };
    /// 1x1, stride 2: channel projection on downsampling skip paths.
    pub const K1S2: ConvGeom = ConvGeom { kh: 1, kw: 1, stride: 2, pad: 0 };

    /// Output extent of a forward convolution over `(h, w)`.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize), CoreError> {
        let one = |n: usize, k: usize| -> Result<usize, CoreError> {
            let padded = n + 2 * self.pad;
            if padded < k {
                return Err(CoreError::invalid(format!(
                    "conv: extent {n} with pad {} is smaller than kernel {k}",
                    self.pad
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((one(h, self.kh)?, one(w, self.kw)?))
    }

    /// Output extent of a transposed convolution over `(h, w)`.
    pub fn transpose_out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            self.stride * (h - 1) + self.kh - 2 * self.pad,
            self.stride * (w - 1) + self.kw - 2 * self.pad,
        )
    }

    /// Output positions `o` for kernel offset `k` whose input coordinate
    /// `o*stride + k - pad` lands inside `[0, n)`; returned as `lo..hi`.
    fn valid_out_range(&self, k: usize, n: usize, out: usize) -> (usize, usize) {
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(self.stride)
        };
        let hi = if n + self.pad > k {
            (((n - 1 + self.pad - k) / self.stride) + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Lower `x` (B, H, W, C) to a patch matrix of shape
/// `(B*OH*OW, kh*kw*C)`; out-of-image taps stay zero.
pub fn im2col<F: Scalar>(x: &ArrayView4<'_, F>, g: ConvGeom) -> Result<Array2<F>, CoreError> {
    let (bsz, h, w, cin) = x.dim();
    let (oh, ow) = g.out_hw(h, w)?;
    let mut cols = Array2::<F>::zeros((bsz * oh * ow, g.kh * g.kw * cin));
    let kcols = g.kh * g.kw * cin;

    // Hot path: both buffers in standard layout, so every kernel tap of
    // every output pixel is one contiguous channel run.
    if let Some(xs) = x.as_slice() {
        let cs = cols.as_slice_mut().expect("fresh cols buffer is standard layout");
        for b in 0..bsz {
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid_out_range(ky, h, oh);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = g.valid_out_range(kx, w, ow);
                    if oy_lo >= oy_hi || ox_lo >= ox_hi {
                        continue;
                    }
                    let col0 = (ky * g.kw + kx) * cin;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let mut src0 = ((b * h + iy) * w + (ox_lo * g.stride + kx - g.pad)) * cin;
                        let mut dst0 = ((b * oh + oy) * ow + ox_lo) * kcols + col0;
                        for _ in ox_lo..ox_hi {
                            cs[dst0..dst0 + cin].copy_from_slice(&xs[src0..src0 + cin]);
                            src0 += g.stride * cin;
                            dst0 += kcols;
                        }
                    }
                }
            }
        }
        return Ok(cols);
    }

    for b in 0..bsz {
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_out_range(ky, h, oh);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_out_range(kx, w, ow);
                if oy_lo >= oy_hi || ox_lo >= ox_hi {
                    continue;
                }
                let col0 = (ky * g.kw + kx) * cin;
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let ix0 = ox_lo * g.stride + kx - g.pad;
                    let ix1 = (ox_hi - 1) * g.stride + kx - g.pad;
                    let src = x.slice(s![b, iy, ix0..=ix1;g.stride, ..]);
                    let row0 = (b * oh + oy) * ow + ox_lo;
                    let mut dst =
                        cols.slice_mut(s![row0..row0 + (ox_hi - ox_lo), col0..col0 + cin]);
                    dst.assign(&src);
                }
            }
        }
    }
    Ok(cols)
}

/// Adjoint of [`im2col`]: scatter-add patch columns back onto an
/// image grid of shape `(b, h, w, c)`.
pub fn col2im<F: Scalar>(
    cols: &ArrayView2<'_, F>,
    dims: (usize, usize, usize, usize),
    g: ConvGeom,
) -> Result<Array4<F>, CoreError> {
    let (bsz, h, w, cin) = dims;
    let (oh, ow) = g.out_hw(h, w)?;
    if cols.dim() != (bsz * oh * ow, g.kh * g.kw * cin) {
        return Err(CoreError::invalid(format!(
            "col2im: column matrix {:?} does not match grid {dims:?}",
            cols.dim()
        )));
    }
    let mut x = Array4::<F>::zeros(dims);
    for b in 0..bsz {
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_out_range(ky, h, oh);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_out_range(kx, w, ow);
                if oy_lo >= oy_hi || ox_lo >= ox_hi {
                    continue;
                }
                let col0 = (ky * g.kw + kx) * cin;
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let ix0 = ox_lo * g.stride + kx - g.pad;
                    let ix1 = (ox_hi - 1) * g.stride + kx - g.pad;
                    let row0 = (b * oh + oy) * ow + ox_lo;
                    let src = cols.slice(s![row0..row0 + (ox_hi - ox_lo), col0..col0 + cin]);
                    let mut dst = x.slice_mut(s![b, iy, ix0..=ix1;g.stride, ..]);
                    dst += &src;
                }
            }
        }
    }
    Ok(x)
}

/// Forward convolution. `w2` is `(kh*kw*c_in, c_out)`.
pub fn conv2d<F: Scalar>(
    x: &ArrayView4<'_, F>,
    w2: &ArrayView2<'_, F>,
    bias: Option<&ArrayView1<'_, F>>,
    g: ConvGeom,
) -> Result<Array4<F>, CoreError> {
    let (bsz, h, w, cin) = x.dim();
    if w2.nrows() != g.kh * g.kw * cin {
        return Err(CoreError::invalid(format!(
            "conv2d: weight rows {} vs kernel size {} ({}x{}x{cin})",
            w2.nrows(),
            g.kh * g.kw * cin,
            g.kh,
            g.kw
        )));
    }
    let cout = w2.ncols();
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(CoreError::invalid(format!(
                "conv2d: bias length {} vs {cout} output channels",
                b.len()
            )));
        }
    }
    let (oh, ow) = g.out_hw(h, w)?;
    let cols = im2col(x, g)?;
    let mut y2 = matmul(&cols.view(), w2);
    if let Some(b) = bias {
        y2 += b;
    }
    Ok(y2
        .into_shape_with_order((bsz, oh, ow, cout))
        .expect("conv2d output reshape"))
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`.
///
/// The patch matrix is recomputed from `x` rather than cached, trading
/// a little arithmetic for a much smaller training tape.
pub fn conv2d_bwd<F: Scalar>(
    x: &ArrayView4<'_, F>,
    w2: &ArrayView2<'_, F>,
    gy: &ArrayView4<'_, F>,
    g: ConvGeom,
) -> Result<(Array4<F>, Array2<F>, Array1<F>), CoreError> {
    let dims = x.dim();
    let cout = w2.ncols();
    let (gb, gh, gw_, gc) = gy.dim();
    let gy2 = gy
        .to_shape((gb * gh * gw_, gc))
        .expect("conv2d_bwd: gradient reshape");
    if gc != cout {
        return Err(CoreError::invalid(format!(
            "conv2d_bwd: gradient channels {gc} vs {cout}"
        )));
    }
    let cols = im2col(x, g)?;
    let gw = matmul_tn(&cols.view(), &gy2.view());
    let gbias = gy2.sum_axis(Axis(0));
    let gcols = matmul_nt(&gy2.view(), w2);
    let gx = col2im(&gcols.view(), dims, g)?;
    Ok((gx, gw, gbias))
}

/// Forward transposed convolution (fractionally strided upsampling).
/// `w2` is `(kh*kw*c_out, c_in)`; output extent is
/// `stride*(n-1) + k - 2*pad` per axis.
pub fn conv_transpose2d<F: Scalar>(
    x: &ArrayView4<'_, F>,
    w2: &ArrayView2<'_, F>,
    bias: Option<&ArrayView1<'_, F>>,
    g: ConvGeom,
) -> Result<Array4<F>, CoreError> {
    let (bsz, h, w, cin) = x.dim();
    if w2.ncols() != cin {
        return Err(CoreError::invalid(format!(
            "conv_transpose2d: weight cols {} vs {cin} input channels",
            w2.ncols()
        )));
    }
    if w2.nrows() % (g.kh * g.kw) != 0 {
        return Err(CoreError::invalid(format!(
            "conv_transpose2d: weight rows {} not a multiple of kernel area {}",
            w2.nrows(),
            g.kh * g.kw
        )));
    }
    let cout = w2.nrows() / (g.kh * g.kw);
    let (oh, ow) = g.transpose_out_hw(h, w);
    debug_assert_eq!(g.out_hw(oh, ow).expect("transpose geometry"), (h, w));
    let x2 = x
        .to_shape((bsz * h * w, cin))
        .expect("conv_transpose2d input reshape");
    let cols = matmul_nt(&x2.view(), w2);
    let mut y = col2im(&cols.view(), (bsz, oh, ow, cout), g)?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(CoreError::invalid(format!(
                "conv_transpose2d: bias length {} vs {cout} output channels",
                b.len()
            )));
        }
        y += b;
    }
    Ok(y)
}

/// Gradients of [`conv_transpose2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv_transpose2d_bwd<F: Scalar>(
    x: &ArrayView4<'_, F>,
    w2: &ArrayView2<'_, F>,
    gy: &ArrayView4<'_, F>,
    g: ConvGeom,
) -> Result<(Array4<F>, Array2<F>, Array1<F>), CoreError> {
    let (bsz, h, w, cin) = x.dim();
    let x2 = x
        .to_shape((bsz * h * w, cin))
        .expect("conv_transpose2d_bwd input reshape");
    let gycols = im2col(gy, g)?;
    if gycols.ncols() != w2.nrows() {
        return Err(CoreError::invalid(format!(
            "conv_transpose2d_bwd: gradient patches {} vs weight rows {}",
            gycols.ncols(),
            w2.nrows()
        )));
    }
    let gx2 = matmul(&gycols.view(), w2);
    let gx = gx2
        .into_shape_with_order((bsz, h, w, cin))
        .expect("conv_transpose2d_bwd gradient reshape");
    let gw = matmul_tn(&gycols.view(), &x2.view());
    let gbias = gy
        .sum_axis(Axis(0))
        .sum_axis(Axis(0))
        .sum_axis(Axis(0));
    Ok((gx, gw, gbias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{fd_grad4, max_rel_err, seeded4, seeded_mat};
    use ndarray::{Array1, Array4};

    #[test]
    fn identity_kernel_preserves_input() {
        let x = seeded4(1, (2, 5, 5, 1));
        // 3x3 kernel with only the center tap set
        let mut w = Array2::<f64>::zeros((9, 1));
        w[[4, 0]] = 1.0;
        let y = conv2d(&x.view(), &w.view(), None, ConvGeom::K3S1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn box_kernel_counts_taps_at_borders() {
        let x = Array4::<f64>::ones((1, 4, 4, 1));
        let w = Array2::<f64>::ones((9, 1));
        let y = conv2d(&x.view(), &w.view(), None, ConvGeom::K3S1).unwrap();
        assert_eq!(y[[0, 0, 0, 0]], 4.0); // corner: 2x2 taps in-image
        assert_eq!(y[[0, 0, 1, 0]], 6.0); // edge: 2x3
        assert_eq!(y[[0, 1, 1, 0]], 9.0); // interior: full 3x3
    }

    #[test]
    fn bias_and_shapes() {
        let x = seeded4(2, (3, 8, 6, 4));
        let w = seeded_mat(3, (9 * 4, 5));
        let b = Array1::from_elem(5, 0.25f64);
        let y1 = conv2d(&x.view(), &w.view(), None, ConvGeom::K3S2).unwrap();
        let y2 = conv2d(&x.view(), &w.view(), Some(&b.view()), ConvGeom::K3S2).unwrap();
        assert_eq!(y1.dim(), (3, 4, 3, 5));
        assert!(y2
            .iter()
            .zip(y1.iter())
            .all(|(a, b)| (a - b - 0.25).abs() < 1e-12));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), C> == <x, col2im(C)> for every geometry we use
        for &g in &[ConvGeom::K3S1, ConvGeom::K3S2, ConvGeom::K4S2, ConvGeom::K1S2] {
            let dims = (2, 6, 8, 3);
            let x = seeded4(10, dims);
            let (oh, ow) = g.out_hw(6, 8).unwrap();
            let c = seeded_mat(11, (2 * oh * ow, g.kh * g.kw * 3));
            let lhs: f64 = im2col(&x.view(), g)
                .unwrap()
                .iter()
                .zip(c.iter())
                .map(|(a, b)| a * b)
                .sum();
            let rhs: f64 = col2im(&c.view(), dims, g)
                .unwrap()
                .iter()
                .zip(x.iter())
                .map(|(a, b)| a * b)
                .sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{g:?}");
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        for &g in &[ConvGeom::K3S1, ConvGeom::K3S2] {
            let x = seeded4(20, (2, 5, 6, 3));
            let w = seeded_mat(21, (9 * 3, 4));
            let b = Array1::from_iter((0..4).map(|i| 0.1 * i as f64));
            let (oh, ow) = g.out_hw(5, 6).unwrap();
            let t = seeded4(22, (2, oh, ow, 4)); // random cotangent

            let loss = |x: &Array4<f64>, w: &Array2<f64>, b: &Array1<f64>| -> f64 {
                conv2d(&x.view(), &w.view(), Some(&b.view()), g)
                    .unwrap()
                    .iter()
                    .zip(t.iter())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let (gx, gw, gb) = conv2d_bwd(&x.view(), &w.view(), &t.view(), g).unwrap();

            let fx = fd_grad4(|v| loss(v, &w, &b), &x);
            assert!(max_rel_err(gx.iter(), fx.iter()) < 1e-6, "{g:?} input grad");

            let mut fw = Array2::<f64>::zeros(w.dim());
            for i in 0..w.len() {
                let h = 1e-5;
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp.as_slice_mut().unwrap()[i] += h;
                wm.as_slice_mut().unwrap()[i] -= h;
                fw.as_slice_mut().unwrap()[i] = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            }
            assert!(max_rel_err(gw.iter(), fw.iter()) < 1e-6, "{g:?} weight grad");

            for i in 0..4 {
                let h = 1e-5;
                let mut bp = b.clone();
                let mut bm = b.clone();
                bp[i] += h;
                bm[i] -= h;
                let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
                assert!((gb[i] - fd).abs() < 1e-6 * fd.abs().max(1.0), "{g:?} bias grad");
            }
        }
    }

    #[test]
    fn transpose_doubles_extent() {
        let x = seeded4(30, (2, 4, 3, 5));
        let w = seeded_mat(31, (16 * 2, 5)); // k4, c_out 2, c_in 5
        let y = conv_transpose2d(&x.view(), &w.view(), None, ConvGeom::K4S2).unwrap();
        assert_eq!(y.dim(), (2, 8, 6, 2));
    }

    #[test]
    fn transpose_is_adjoint_of_forward_conv() {
        // <conv(x; W), u> == <x, convT(u; W)> for the *same* matrix W:
        // the (kh*kw*c_in, c_out) forward layout is exactly the
        // (kh*kw*c_out', c_in') transpose layout with the roles of the
        // channel counts swapped.
        let g = ConvGeom::K4S2;
        let (cin, cout) = (3usize, 2usize);
        let w = seeded_mat(32, (16 * cin, cout));
        let u = seeded4(33, (2, 4, 4, cout)); // low-res side
        let x = seeded4(34, (2, 8, 8, cin)); // high-res side
        let conv_x = conv2d(&x.view(), &w.view(), None, g).unwrap();
        let convt_u = conv_transpose2d(&u.view(), &w.view(), None, g).unwrap();
        assert_eq!(conv_x.dim(), u.dim());
        assert_eq!(convt_u.dim(), x.dim());
        let lhs: f64 = conv_x.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(convt_u.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn transpose_gradients_match_finite_differences() {
        let g = ConvGeom::K4S2;
        let x = seeded4(40, (2, 3, 4, 3));
        let w = seeded_mat(41, (16 * 2, 3));
        let b = Array1::from_iter((0..2).map(|i| -0.2 + 0.3 * i as f64));
        let t = seeded4(42, (2, 6, 8, 2));
        let loss = |x: &Array4<f64>, w: &Array2<f64>, b: &Array1<f64>| -> f64 {
            conv_transpose2d(&x.view(), &w.view(), Some(&b.view()), g)
                .unwrap()
                .iter()
                .zip(t.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (gx, gw, gb) = conv_transpose2d_bwd(&x.view(), &w.view(), &t.view(), g).unwrap();
        let fx = fd_grad4(|v| loss(v, &w, &b), &x);
        assert!(max_rel_err(gx.iter(), fx.iter()) < 1e-6, "input grad");
        let h = 1e-5;
        let mut fw = Array2::<f64>::zeros(w.dim());
        for i in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_slice_mut().unwrap()[i] += h;
            wm.as_slice_mut().unwrap()[i] -= h;
            fw.as_slice_mut().unwrap()[i] = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
        }
        assert!(max_rel_err(gw.iter(), fw.iter()) < 1e-6, "weight grad");
        for i in 0..2 {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[i] += h;
            bm[i] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((gb[i] - fd).abs() < 1e-6 * fd.abs().max(1.0), "bias grad");
        }
    }

    #[test]
    fn geometry_validation() {
        let x = seeded4(50, (1, 4, 4, 2));
        let w = seeded_mat(51, (9 * 3, 4)); // wrong c_in
        assert!(conv2d(&x.view(), &w.view(), None, ConvGeom::K3S1).is_err());
        let g = ConvGeom { kh: 7, kw: 7, stride: 1, pad: 0 };
        assert!(g.out_hw(4, 4).is_err());
    }
}
