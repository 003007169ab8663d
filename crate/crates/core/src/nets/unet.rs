//! Encoder-decoder classifier: a U-shaped conv stack with skip
//! connections, pooled into a fully connected 3-way head.

use alloc::format;
use alloc::vec::Vec;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};

use super::blocks::{Act, ConvLayer, ConvSpec, Norm, NormTape, SeqConv, SeqTape};
use super::NetConfig;
use crate::error::CoreError;
use crate::params::{BufUpdates, GradStore, Initializer, ParamId, ParamKind, ParamStore};
use crate::phase::NUM_PHASES;
use crate::tensor::conv::ConvGeom;
use crate::tensor::ops::{
    dense, dense_bwd, concat_channels, global_avg_pool, global_avg_pool_bwd, maxpool2,
    maxpool2_bwd, softmax_rows, softmax_rows_bwd, split_channels_grad, upsample2, upsample2_bwd,
};
use crate::tensor::{Mode, Scalar};

/// One decoder stage's saved state.
struct UpStage<F> {
    conv_in: Array4<F>,
    conv_out: Array4<F>,
    conv_norm: Option<NormTape<F>>,
    blocks: SeqTape<F>,
}

/// Forward state for the backward pass.
pub struct UnetTape<F> {
    down: Vec<SeqTape<F>>,
    pools: Vec<Array4<u8>>,
    mid: SeqTape<F>,
    ups: Vec<UpStage<F>>,
    gap: Array2<F>,
    probs: Array2<F>,
}

pub struct UnetForward<F> {
    pub probs: Array2<F>,
    pub tape: Option<UnetTape<F>>,
}

/// U-shaped classifier: `levels` double-conv stages with 2x2 max pooling
/// down, mirrored upsampling stages with skip concats up, then global
/// average pooling and a fully connected softmax head.
pub struct UnetClassifier {
    down: Vec<SeqConv>,
    mid: SeqConv,
    up_conv: Vec<ConvLayer>,
    up_blocks: Vec<SeqConv>,
    cls_w: ParamId,
    cls_b: ParamId,
    head_in: usize,
}

fn double_conv(cin: usize, cout: usize) -> [ConvSpec; 2] {
    [
        ConvSpec::new(ConvGeom::K3S1, cin, cout, Norm::Batch, Act::Relu),
        ConvSpec::new(ConvGeom::K3S1, cout, cout, Norm::Batch, Act::Relu),
    ]
}

impl UnetClassifier {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        config: &NetConfig,
    ) -> Result<Self, CoreError> {
        let levels = config.unet_levels;
        let u = config.unet_width;
        let mut down = Vec::with_capacity(levels);
        let mut cin = 1;
        for l in 0..levels {
            let w = u << l;
            down.push(SeqConv::register(store, init, &format!("u.down.{l}"), &double_conv(cin, w))?);
            cin = w;
        }
        let mid =
            SeqConv::register(store, init, "u.mid", &double_conv(cin, u << levels))?;
        let mut up_conv = Vec::with_capacity(levels);
        let mut up_blocks = Vec::with_capacity(levels);
        let mut prev = u << levels;
        for k in 0..levels {
            let w = u << (levels - 1 - k);
            up_conv.push(ConvLayer::register(
                store,
                init,
                &format!("u.up.{k}.conv"),
                ConvSpec::new(ConvGeom::K3S1, prev, w, Norm::Batch, Act::Relu),
            )?);
            up_blocks.push(SeqConv::register(
                store,
                init,
                &format!("u.up.{k}"),
                &double_conv(2 * w, w),
            )?);
            prev = w;
        }
        let head_in = u;
        let cls_w =
            store.register("u.cls.w", ParamKind::Weight, init.gaussian::<F>(&[head_in, NUM_PHASES]))?;
        let cls_b = store.register(
            "u.cls.b",
            ParamKind::Weight,
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[NUM_PHASES])),
        )?;
        Ok(UnetClassifier { down, mid, up_conv, up_blocks, cls_w, cls_b, head_in })
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &ArrayView4<'_, F>,
        mode: Mode,
        want_tape: bool,
        config: &NetConfig,
        updates: &mut BufUpdates<F>,
    ) -> Result<UnetForward<F>, CoreError> {
        let (_b, h, w, ch) = x.dim();
        if (h, w) != config.image_hw || ch != 1 {
            return Err(CoreError::config(format!(
                "classifier: input {h}x{w}x{ch} vs configured {}x{}x1",
                config.image_hw.0, config.image_hw.1
            )));
        }
        let eps = config.bn_eps;
        let levels = self.down.len();

        let mut down_tapes = Vec::with_capacity(levels);
        let mut pools = Vec::with_capacity(levels);
        let mut cur = x.to_owned();
        for stage in &self.down {
            let tape = stage.forward(store, &cur.view(), mode, want_tape, eps, updates)?;
            let (pooled, sel) = maxpool2(&tape.y().view())?;
            cur = pooled;
            pools.push(sel);
            down_tapes.push(tape);
        }
        let mid = self.mid.forward(store, &cur.view(), mode, want_tape, eps, updates)?;
        cur = mid.y().clone();

        let mut ups = Vec::with_capacity(levels);
        for k in 0..levels {
            let conv_in = upsample2(&cur.view());
            let mut out =
                self.up_conv[k].forward(store, &conv_in.view(), mode, want_tape, eps)?;
            self.up_conv[k].push_stats(&mut out, updates);
            let skip = down_tapes[levels - 1 - k].y();
            let cat = concat_channels(&out.y.view(), &skip.view())?;
            let blocks =
                self.up_blocks[k].forward(store, &cat.view(), mode, want_tape, eps, updates)?;
            cur = blocks.y().clone();
            ups.push(UpStage { conv_in, conv_out: out.y, conv_norm: out.tape, blocks });
        }

        let gap = global_avg_pool(&cur.view());
        let logits = dense(
            &gap.view(),
            &store.mat(self.cls_w, self.head_in, NUM_PHASES),
            Some(&store.vec1(self.cls_b)),
        )?;
        let probs = softmax_rows(&logits.view());
        let tape = want_tape.then(|| UnetTape {
            down: down_tapes,
            pools,
            mid,
            ups,
            gap,
            probs: probs.clone(),
        });
        Ok(UnetForward { probs, tape })
    }

    /// Backward from a gradient w.r.t. the class probabilities; returns the
    /// gradient w.r.t. the input images.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &UnetTape<F>,
        g_probs: &ArrayView2<'_, F>,
        grads: &mut GradStore<F>,
    ) -> Result<Array4<F>, CoreError> {
        let levels = self.down.len();
        let gz = softmax_rows_bwd(&tape.probs.view(), g_probs);
        let (g_gap, gw, gb) = dense_bwd(
            &tape.gap.view(),
            &store.mat(self.cls_w, self.head_in, NUM_PHASES),
            &gz.view(),
        );
        grads.add(self.cls_w, gw.into_dyn());
        grads.add(self.cls_b, gb.into_dyn());

        let final_map = tape.ups.last().expect("decoder stages").blocks.y();
        let (_b, fh, fw, _c) = final_map.dim();
        let mut g = global_avg_pool_bwd(&g_gap.view(), (fh, fw));

        let mut skip_grads: Vec<Option<Array4<F>>> = Vec::new();
        skip_grads.resize_with(levels, || None);
        for k in (0..levels).rev() {
            let stage = &tape.ups[k];
            let g_cat = self.up_blocks[k].backward(store, &stage.blocks, &g.view(), grads)?;
            let main_ch = stage.conv_out.dim().3;
            let (g_main, g_skip) = split_channels_grad(&g_cat.view(), main_ch)?;
            skip_grads[levels - 1 - k] = Some(g_skip);
            let g_conv_in = self.up_conv[k].backward(
                store,
                &stage.conv_in.view(),
                &stage.conv_out.view(),
                stage.conv_norm.as_ref(),
                &g_main.view(),
                grads,
            )?;
            g = upsample2_bwd(&g_conv_in.view())?;
        }

        g = self.mid.backward(store, &tape.mid, &g.view(), grads)?;
        for l in (0..levels).rev() {
            let mut gy = maxpool2_bwd(&tape.pools[l], &g.view());
            if let Some(extra) = skip_grads[l].take() {
                gy += &extra;
            }
            g = self.down[l].backward(store, &tape.down[l], &gy.view(), grads)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::testsupport::{dot2, fd_param};
    use crate::rng::{stream_rng, StreamDomain};
    use crate::tensor::testutil::{max_rel_err, seeded4, seeded_mat};

    fn tiny_config() -> NetConfig {
        NetConfig {
            image_hw: (8, 8),
            base_width: 4,
            enc_stages: 2,
            rep_channels: 8,
            unet_levels: 2,
            unet_width: 4,
            ..NetConfig::default()
        }
    }

    fn build(config: &NetConfig) -> (ParamStore<f64>, UnetClassifier) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(stream_rng(6, StreamDomain::Init, 0, 0));
        let net = UnetClassifier::register(&mut store, &mut init, config).unwrap();
        (store, net)
    }

    #[test]
    fn output_is_a_simplex_row_per_item() {
        let config = tiny_config();
        let (store, net) = build(&config);
        let x = seeded4(201, (3, 8, 8, 1));
        let mut u = Vec::new();
        let out = net.forward(&store, &x.view(), Mode::Train, false, &config, &mut u).unwrap();
        assert_eq!(out.probs.dim(), (3, 3));
        for row in out.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        // two batchnorm convs per down level, mid, up conv + two per up stage
        let expected = config.unet_levels * 2 + 2 + config.unet_levels * 3;
        assert_eq!(u.len(), expected);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let config = tiny_config();
        let (store, net) = build(&config);
        let x = seeded4(202, (2, 8, 8, 1));
        let t = seeded_mat(203, (2, 3));
        let mut u = Vec::new();
        let fwd = net.forward(&store, &x.view(), Mode::Train, true, &config, &mut u).unwrap();
        let mut grads = GradStore::new(&store);
        let gx = net
            .backward(&store, fwd.tape.as_ref().unwrap(), &t.view(), &mut grads)
            .unwrap();

        let loss = |st: &ParamStore<f64>| {
            let mut u = Vec::new();
            let f = st_forward(&net, st, &x, &config, &mut u);
            dot2(&f, &t)
        };

        for name in [
            "u.down.0.0.w",
            "u.down.1.1.gamma",
            "u.mid.0.w",
            "u.up.0.conv.w",
            "u.up.1.0.w",
            "u.cls.w",
            "u.cls.b",
        ] {
            let id = store.id(name).unwrap();
            let fd = fd_param(&store, id, 4, loss);
            let got = grads.get(id).unwrap();
            let flat = got.as_slice().unwrap();
            let err = max_rel_err(flat.iter().take(fd.len()), fd.iter());
            assert!(err < 1e-6, "{name} grad err {err:.2e}");
        }

        let h = 1e-5;
        for idx in [(0, 2, 3, 0), (1, 5, 6, 0)] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += h;
            xm[idx] -= h;
            let mut u = Vec::new();
            let fp = dot2(&st_forward(&net, &store, &xp, &config, &mut u), &t);
            let fm = dot2(&st_forward(&net, &store, &xm, &config, &mut u), &t);
            let fd = (fp - fm) / (2.0 * h);
            let rel = (gx[idx] - fd).abs() / fd.abs().max(1.0);
            assert!(rel < 1e-6, "input grad at {idx:?}: {rel:.2e}");
        }
    }

    fn st_forward(
        net: &UnetClassifier,
        store: &ParamStore<f64>,
        x: &Array4<f64>,
        config: &NetConfig,
        updates: &mut BufUpdates<f64>,
    ) -> Array2<f64> {
        net.forward(store, &x.view(), Mode::Train, false, config, updates)
            .unwrap()
            .probs
    }
}
