//! Residual image translator: the code is tiled onto the input as extra
//! channels, a strided instance-norm trunk compresses the grid, a stack of
//! residual blocks transforms it, and transposed convolutions bring it back
//! to image resolution under a tanh head.

use alloc::format;
use alloc::vec::Vec;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};

use super::blocks::{Act, ConvLayer, ConvSpec, Norm, NormTape, SeqConv, SeqTape};
use super::cdgan::{check_codes, check_image};
use super::NetConfig;
use crate::error::CoreError;
use crate::params::{BufUpdates, GradStore, Initializer, ParamStore};
use crate::phase::NUM_PHASES;
use crate::tensor::conv::ConvGeom;
use crate::tensor::ops::{broadcast_hw, broadcast_hw_bwd, concat_channels, split_channels_grad};
use crate::tensor::{Mode, Scalar};

/// Two 3x3 instance-norm convolutions on an identity shortcut; the second
/// has no activation so the sum stays unsquashed.
struct ResBlock {
    c1: ConvLayer,
    c2: ConvLayer,
}

struct ResTape<F> {
    x: Array4<F>,
    a1: Array4<F>,
    a2: Array4<F>,
    n1: Option<NormTape<F>>,
    n2: Option<NormTape<F>>,
}

impl ResBlock {
    fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        prefix: &str,
        ch: usize,
    ) -> Result<Self, CoreError> {
        let c1 = ConvLayer::register(
            store,
            init,
            &format!("{prefix}.c1"),
            ConvSpec::new(ConvGeom::K3S1, ch, ch, Norm::Instance, Act::Relu),
        )?;
        let c2 = ConvLayer::register(
            store,
            init,
            &format!("{prefix}.c2"),
            ConvSpec::new(ConvGeom::K3S1, ch, ch, Norm::Instance, Act::None),
        )?;
        Ok(ResBlock { c1, c2 })
    }

    fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &ArrayView4<'_, F>,
        mode: Mode,
        want_tape: bool,
        eps: f64,
    ) -> Result<(Array4<F>, Option<ResTape<F>>), CoreError> {
        let o1 = self.c1.forward(store, x, mode, want_tape, eps)?;
        let o2 = self.c2.forward(store, &o1.y.view(), mode, want_tape, eps)?;
        let y = &o2.y + x;
        let tape = want_tape.then(|| ResTape {
            x: x.to_owned(),
            a1: o1.y,
            a2: o2.y,
            n1: o1.tape,
            n2: o2.tape,
        });
        Ok((y, tape))
    }

    fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &ResTape<F>,
        gy: &ArrayView4<'_, F>,
        grads: &mut GradStore<F>,
    ) -> Result<Array4<F>, CoreError> {
        let g1 =
            self.c2.backward(store, &tape.a1.view(), &tape.a2.view(), tape.n2.as_ref(), gy, grads)?;
        let mut gx = self.c1.backward(
            store,
            &tape.x.view(),
            &tape.a1.view(),
            tape.n1.as_ref(),
            &g1.view(),
            grads,
        )?;
        gx += gy;
        Ok(gx)
    }
}

pub struct ResGenTape<F> {
    pre: SeqTape<F>,
    res: Vec<ResTape<F>>,
    post: SeqTape<F>,
}

pub struct ResGenOut<F> {
    pub y: Array4<F>,
    pub tape: Option<ResGenTape<F>>,
}

pub struct ResGenGrads<F> {
    pub gx: Array4<F>,
    pub gcode: Array2<F>,
}

/// Code-conditioned residual generator.
pub struct ResGenerator {
    pre: SeqConv,
    res: Vec<ResBlock>,
    post: SeqConv,
}

impl ResGenerator {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        config: &NetConfig,
    ) -> Result<Self, CoreError> {
        let (h, w) = config.image_hw;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(CoreError::config(format!(
                "residual generator needs extents divisible by 4, got {h}x{w}"
            )));
        }
        let bw = config.base_width;
        let pre = SeqConv::register(
            store,
            init,
            "g.pre",
            &[
                ConvSpec::new(ConvGeom::K7S1, 1 + NUM_PHASES, bw, Norm::Instance, Act::Relu),
                ConvSpec::new(ConvGeom::K4S2, bw, 2 * bw, Norm::Instance, Act::Relu),
                ConvSpec::new(ConvGeom::K4S2, 2 * bw, 4 * bw, Norm::Instance, Act::Relu),
            ],
        )?;
        let mut res = Vec::with_capacity(config.res_blocks);
        for i in 0..config.res_blocks {
            res.push(ResBlock::register(store, init, &format!("g.res.{i}"), 4 * bw)?);
        }
        let post = SeqConv::register(
            store,
            init,
            "g.post",
            &[
                ConvSpec::new(ConvGeom::K4S2, 4 * bw, 2 * bw, Norm::Instance, Act::Relu)
                    .transposed(),
                ConvSpec::new(ConvGeom::K4S2, 2 * bw, bw, Norm::Instance, Act::Relu).transposed(),
                ConvSpec::new(ConvGeom::K7S1, bw, 1, Norm::None, Act::Tanh),
            ],
        )?;
        Ok(ResGenerator { pre, res, post })
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &ArrayView4<'_, F>,
        codes: &ArrayView2<'_, F>,
        mode: Mode,
        want_tape: bool,
        config: &NetConfig,
        updates: &mut BufUpdates<F>,
    ) -> Result<ResGenOut<F>, CoreError> {
        check_image(x, config, "residual generator")?;
        check_codes(codes, x.dim().0)?;
        let (_b, h, w, _c) = x.dim();
        let eps = config.bn_eps;
        let tiled = broadcast_hw(codes, h, w);
        let cat = concat_channels(x, &tiled.view())?;
        let pre = self.pre.forward(store, &cat.view(), mode, want_tape, eps, updates)?;
        let mut cur = pre.y().clone();
        let mut res_tapes = Vec::with_capacity(self.res.len());
        for block in &self.res {
            let (y, tape) = block.forward(store, &cur.view(), mode, want_tape, eps)?;
            if let Some(t) = tape {
                res_tapes.push(t);
            }
            cur = y;
        }
        let post = self.post.forward(store, &cur.view(), mode, want_tape, eps, updates)?;
        let y = post.y().clone();
        let tape = want_tape.then(|| ResGenTape { pre, res: res_tapes, post });
        Ok(ResGenOut { y, tape })
    }

    /// Backward from a gradient w.r.t. the translated images; returns
    /// gradients w.r.t. the input images and the phase codes.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &ResGenTape<F>,
        gy: &ArrayView4<'_, F>,
        grads: &mut GradStore<F>,
    ) -> Result<ResGenGrads<F>, CoreError> {
        let mut g = self.post.backward(store, &tape.post, gy, grads)?;
        for (block, btape) in self.res.iter().zip(tape.res.iter()).rev() {
            g = block.backward(store, btape, &g.view(), grads)?;
        }
        let gcat = self.pre.backward(store, &tape.pre, &g.view(), grads)?;
        let (gx, gtiled) = split_channels_grad(&gcat.view(), 1)?;
        Ok(ResGenGrads { gx, gcode: broadcast_hw_bwd(&gtiled.view()) })
    }
}
