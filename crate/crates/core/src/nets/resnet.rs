//! Residual bottleneck classifier in two presets: a desk-scale stack for
//! 64x64 phantoms and the full 50-layer configuration.

use alloc::format;
use alloc::vec::Vec;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};

use super::blocks::{Act, ConvLayer, ConvSpec, Norm, NormTape};
use super::NetConfig;
use crate::error::CoreError;
use crate::params::{BufUpdates, GradStore, Initializer, ParamId, ParamKind, ParamStore};
use crate::phase::NUM_PHASES;
use crate::tensor::conv::ConvGeom;
use crate::tensor::ops::{
    dense, dense_bwd, global_avg_pool, global_avg_pool_bwd, maxpool2, maxpool2_bwd, relu,
    relu_bwd, softmax_rows, softmax_rows_bwd,
};
use crate::tensor::{Mode, Scalar};

/// Bottleneck expansion: the block's output width is `4 * mid`.
const EXPANSION: usize = 4;

/// 1x1 reduce -> 3x3 (optionally strided) -> 1x1 expand, with a projection
/// shortcut when the shape changes; ReLU after the residual add.
struct Bottleneck {
    conv1: ConvLayer,
    conv2: ConvLayer,
    conv3: ConvLayer,
    proj: Option<ConvLayer>,
}

struct BlockTape<F> {
    x: Array4<F>,
    a1: Array4<F>,
    a2: Array4<F>,
    a3: Array4<F>,
    sc: Option<Array4<F>>,
    n1: Option<NormTape<F>>,
    n2: Option<NormTape<F>>,
    n3: Option<NormTape<F>>,
    np: Option<NormTape<F>>,
    y: Array4<F>,
}

impl Bottleneck {
    fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        prefix: &str,
        cin: usize,
        mid: usize,
        stride: usize,
    ) -> Result<Self, CoreError> {
        let cout = mid * EXPANSION;
        let g2 = if stride == 2 { ConvGeom::K3S2 } else { ConvGeom::K3S1 };
        let conv1 = ConvLayer::register(
            store,
            init,
            &format!("{prefix}.c1"),
            ConvSpec::new(ConvGeom::K1S1, cin, mid, Norm::Batch, Act::Relu),
        )?;
        let conv2 = ConvLayer::register(
            store,
            init,
            &format!("{prefix}.c2"),
            ConvSpec::new(g2, mid, mid, Norm::Batch, Act::Relu),
        )?;
        let conv3 = ConvLayer::register(
            store,
            init,
            &format!("{prefix}.c3"),
            ConvSpec::new(ConvGeom::K1S1, mid, cout, Norm::Batch, Act::None),
        )?;
        let proj = if stride != 1 || cin != cout {
            let gp = if stride == 2 { ConvGeom::K1S2 } else { ConvGeom::K1S1 };
            Some(ConvLayer::register(
                store,
                init,
                &format!("{prefix}.proj"),
                ConvSpec::new(gp, cin, cout, Norm::Batch, Act::None),
            )?)
        } else {
            None
        };
        Ok(Bottleneck { conv1, conv2, conv3, proj })
    }

    fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &ArrayView4<'_, F>,
        mode: Mode,
        want_tape: bool,
        eps: f64,
        updates: &mut BufUpdates<F>,
    ) -> Result<(Array4<F>, Option<BlockTape<F>>), CoreError> {
        let mut o1 = self.conv1.forward(store, x, mode, want_tape, eps)?;
        self.conv1.push_stats(&mut o1, updates);
        let mut o2 = self.conv2.forward(store, &o1.y.view(), mode, want_tape, eps)?;
        self.conv2.push_stats(&mut o2, updates);
        let mut o3 = self.conv3.forward(store, &o2.y.view(), mode, want_tape, eps)?;
        self.conv3.push_stats(&mut o3, updates);
        let (shortcut, sc, np) = match &self.proj {
            Some(p) => {
                let mut op = p.forward(store, x, mode, want_tape, eps)?;
                p.push_stats(&mut op, updates);
                (op.y.clone(), Some(op.y), op.tape)
            }
            None => (x.to_owned(), None, None),
        };
        let y = relu(&(&o3.y + &shortcut).view());
        let tape = want_tape.then(|| BlockTape {
            x: x.to_owned(),
            a1: o1.y,
            a2: o2.y,
            a3: o3.y,
            sc,
            n1: o1.tape,
            n2: o2.tape,
            n3: o3.tape,
            np,
            y: y.clone(),
        });
        Ok((y, tape))
    }

    fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &BlockTape<F>,
        gy: &ArrayView4<'_, F>,
        grads: &mut GradStore<F>,
    ) -> Result<Array4<F>, CoreError> {
        let gs = relu_bwd(&tape.y.view(), gy);
        let g2 = self.conv3.backward(
            store,
            &tape.a2.view(),
            &tape.a3.view(),
            tape.n3.as_ref(),
            &gs.view(),
            grads,
        )?;
        let g1 = self.conv2.backward(
            store,
            &tape.a1.view(),
            &tape.a2.view(),
            tape.n2.as_ref(),
            &g2.view(),
            grads,
        )?;
        let mut gx = self.conv1.backward(
            store,
            &tape.x.view(),
            &tape.a1.view(),
            tape.n1.as_ref(),
            &g1.view(),
            grads,
        )?;
        match (&self.proj, &tape.sc) {
            (Some(p), Some(sc)) => {
                gx += &p.backward(
                    store,
                    &tape.x.view(),
                    &sc.view(),
                    tape.np.as_ref(),
                    &gs.view(),
                    grads,
                )?;
            }
            (None, None) => gx += &gs,
            _ => return Err(CoreError::invalid("residual tape does not match the block")),
        }
        Ok(gx)
    }
}

/// Forward state for the backward pass.
pub struct ResnetTape<F> {
    stem_in: Array4<F>,
    stem_out: Array4<F>,
    stem_norm: Option<NormTape<F>>,
    pool_sel: Option<Array4<u8>>,
    blocks: Vec<BlockTape<F>>,
    gap: Array2<F>,
    probs: Array2<F>,
}

pub struct ResnetForward<F> {
    pub probs: Array2<F>,
    pub tape: Option<ResnetTape<F>>,
}

/// Residual classifier: stem, bottleneck stages, global average pooling,
/// fully connected softmax head.
pub struct ResnetClassifier {
    stem: ConvLayer,
    stem_pool: bool,
    blocks: Vec<Bottleneck>,
    cls_w: ParamId,
    cls_b: ParamId,
    head_in: usize,
}

/// `(mid width, block count, first-block stride)` per stage.
fn stage_plan(full: bool, base: usize) -> Vec<(usize, usize, usize)> {
    if full {
        vec![(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)]
    } else {
        let m = (base / 2).max(2);
        vec![(m, 2, 1), (2 * m, 2, 2), (4 * m, 2, 2)]
    }
}

impl ResnetClassifier {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        config: &NetConfig,
    ) -> Result<Self, CoreError> {
        let full = config.resnet_full;
        let stem_width = if full { 64 } else { config.base_width };
        let stem_geom = if full { ConvGeom::K7S2 } else { ConvGeom::K3S1 };
        let stem = ConvLayer::register(
            store,
            init,
            "r.stem",
            ConvSpec::new(stem_geom, 1, stem_width, Norm::Batch, Act::Relu),
        )?;
        let mut blocks = Vec::new();
        let mut cin = stem_width;
        for (si, (mid, count, stride)) in stage_plan(full, config.base_width).into_iter().enumerate()
        {
            for b in 0..count {
                let st = if b == 0 { stride } else { 1 };
                blocks.push(Bottleneck::register(
                    store,
                    init,
                    &format!("r.s{si}.{b}"),
                    cin,
                    mid,
                    st,
                )?);
                cin = mid * EXPANSION;
            }
        }
        let cls_w =
            store.register("r.cls.w", ParamKind::Weight, init.gaussian::<F>(&[cin, NUM_PHASES]))?;
        let cls_b = store.register(
            "r.cls.b",
            ParamKind::Weight,
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[NUM_PHASES])),
        )?;
        Ok(ResnetClassifier { stem, stem_pool: full, blocks, cls_w, cls_b, head_in: cin })
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &ArrayView4<'_, F>,
        mode: Mode,
        want_tape: bool,
        config: &NetConfig,
        updates: &mut BufUpdates<F>,
    ) -> Result<ResnetForward<F>, CoreError> {
        let (_b, h, w, ch) = x.dim();
        if (h, w) != config.image_hw || ch != 1 {
            return Err(CoreError::config(format!(
                "classifier: input {h}x{w}x{ch} vs configured {}x{}x1",
                config.image_hw.0, config.image_hw.1
            )));
        }
        let eps = config.bn_eps;
        let mut stem_out = self.stem.forward(store, x, mode, want_tape, eps)?;
        self.stem.push_stats(&mut stem_out, updates);
        let (mut cur, pool_sel) = if self.stem_pool {
            let (pooled, sel) = maxpool2(&stem_out.y.view())?;
            (pooled, Some(sel))
        } else {
            (stem_out.y.clone(), None)
        };
        let mut block_tapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, tape) = block.forward(store, &cur.view(), mode, want_tape, eps, updates)?;
            if let Some(t) = tape {
                block_tapes.push(t);
            }
            cur = y;
        }
        let gap = global_avg_pool(&cur.view());
        let logits = dense(
            &gap.view(),
            &store.mat(self.cls_w, self.head_in, NUM_PHASES),
            Some(&store.vec1(self.cls_b)),
        )?;
        let probs = softmax_rows(&logits.view());
        let tape = want_tape.then(|| ResnetTape {
            stem_in: x.to_owned(),
            stem_out: stem_out.y,
            stem_norm: stem_out.tape,
            pool_sel,
            blocks: block_tapes,
            gap,
            probs: probs.clone(),
        });
        Ok(ResnetForward { probs, tape })
    }

    /// Backward from a gradient w.r.t. the class probabilities; returns the
    /// gradient w.r.t. the input images.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &ResnetTape<F>,
        g_probs: &ArrayView2<'_, F>,
        grads: &mut GradStore<F>,
    ) -> Result<Array4<F>, CoreError> {
        let gz = softmax_rows_bwd(&tape.probs.view(), g_probs);
        let (g_gap, gw, gb) = dense_bwd(
            &tape.gap.view(),
            &store.mat(self.cls_w, self.head_in, NUM_PHASES),
            &gz.view(),
        );
        grads.add(self.cls_w, gw.into_dyn());
        grads.add(self.cls_b, gb.into_dyn());

        let last = tape.blocks.last().expect("residual stages");
        let (_b, fh, fw, _c) = last.y.dim();
        let mut g = global_avg_pool_bwd(&g_gap.view(), (fh, fw));
        for (block, btape) in self.blocks.iter().zip(tape.blocks.iter()).rev() {
            g = block.backward(store, btape, &g.view(), grads)?;
        }
        if let Some(sel) = &tape.pool_sel {
            g = maxpool2_bwd(sel, &g.view());
        }
        self.stem.backward(
            store,
            &tape.stem_in.view(),
            &tape.stem_out.view(),
            tape.stem_norm.as_ref(),
            &g.view(),
            grads,
        )
    }
}
