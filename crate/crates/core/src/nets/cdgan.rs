//! Conditional translation GAN: an encoder that pools to a compact
//! representation, a decoder conditioned on a phase code, and a patch
//! discriminator with an auxiliary phase classifier.

use alloc::format;
use alloc::vec::Vec;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};

use super::blocks::{Act, ConvLayer, ConvSpec, Norm, NormTape, SeqConv, SeqTape};
use super::{DiscOut, NetConfig};
use crate::error::CoreError;
use crate::params::{BufUpdates, GradStore, Initializer, ParamId, ParamKind, ParamStore};
use crate::phase::NUM_PHASES;
use crate::tensor::conv::ConvGeom;
use crate::tensor::ops::{
    broadcast_hw, broadcast_hw_bwd, concat_channels, dense, dense_bwd, global_avg_pool,
    global_avg_pool_bwd, softmax_rows, softmax_rows_bwd, split_channels_grad, upsample2,
    upsample2_bwd,
};
use crate::tensor::{Mode, Scalar};

pub(super) fn check_image<F: Scalar>(
    x: &ArrayView4<'_, F>,
    config: &NetConfig,
    who: &str,
) -> Result<(), CoreError> {
    let (_b, h, w, ch) = x.dim();
    if (h, w) != config.image_hw || ch != 1 {
        return Err(CoreError::config(format!(
            "{who}: input {h}x{w}x{ch} vs configured {}x{}x1",
            config.image_hw.0, config.image_hw.1
        )));
    }
    Ok(())
}

pub(super) fn check_codes<F: Scalar>(
    codes: &ArrayView2<'_, F>,
    batch: usize,
) -> Result<(), CoreError> {
    if codes.nrows() != batch || codes.ncols() != NUM_PHASES {
        return Err(CoreError::invalid(format!(
            "phase codes {}x{} vs expected {batch}x{NUM_PHASES}",
            codes.nrows(),
            codes.ncols()
        )));
    }
    if codes.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("phase codes contain non-finite values".into()));
    }
    Ok(())
}

/// Encoder-decoder generator. The encoder pools to an R-vector; the
/// decoder broadcasts `concat(representation, code)` to the bottleneck
/// resolution and upsamples back to image size, ending in tanh.
pub struct Generator {
    enc: SeqConv,
    dec: Vec<ConvLayer>,
    head: ConvLayer,
    skips: bool,
}

/// Everything the generator backward pass needs.
pub struct GenTape<F> {
    enc: SeqTape<F>,
    /// Input to each decoder conv (after upsampling and any skip concat).
    dec_ins: Vec<Array4<F>>,
    /// Output of each decoder conv.
    dec_outs: Vec<Array4<F>>,
    dec_norm: Vec<Option<NormTape<F>>>,
    /// Channels contributed by a skip concat at each decoder stage.
    skip_ch: Vec<usize>,
    y: Array4<F>,
}

/// Generator forward result.
pub struct GenOut<F> {
    pub y: Array4<F>,
    /// Pooled representation, `(b, R)`.
    pub rep: Array2<F>,
    pub tape: Option<GenTape<F>>,
}

/// Gradients the generator backward pass returns alongside the parameter
/// updates it accumulates.
pub struct GenGrads<F> {
    /// W.r.t. the input image batch.
    pub gx: Array4<F>,
    /// W.r.t. the phase codes, `(b, 3)`.
    pub gcode: Array2<F>,
}

impl Generator {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        config: &NetConfig,
    ) -> Result<Self, CoreError> {
        let s = config.enc_stages;
        let mut enc_specs = Vec::with_capacity(s);
        let mut cin = 1;
        for i in 0..s {
            let cout = config.enc_width(i);
            enc_specs.push(ConvSpec::new(ConvGeom::K3S2, cin, cout, Norm::Batch, Act::Relu));
            cin = cout;
        }
        let enc = SeqConv::register(store, init, "g.enc", &enc_specs)?;

        let mut dec = Vec::with_capacity(s);
        let mut cin = config.rep_channels + NUM_PHASES;
        for j in 0..s {
            let mut stage_in = cin;
            if config.decoder_skips && j + 2 <= s {
                // mirror of encoder stage s-2-j arrives after the upsample
                stage_in += config.enc_width(s - 2 - j);
            }
            let cout = config.dec_width(j);
            dec.push(ConvLayer::register(
                store,
                init,
                &format!("g.dec.{j}"),
                ConvSpec::new(ConvGeom::K3S1, stage_in, cout, Norm::Batch, Act::Relu),
            )?);
            cin = cout;
        }
        let head = ConvLayer::register(
            store,
            init,
            "g.head",
            ConvSpec::new(ConvGeom::K3S1, cin, 1, Norm::None, Act::Tanh),
        )?;
        Ok(Generator { enc, dec, head, skips: config.decoder_skips })
    }

    /// Encoder half only: images to pooled representations.
    pub fn encode<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &ArrayView4<'_, F>,
        mode: Mode,
        config: &NetConfig,
        updates: &mut BufUpdates<F>,
    ) -> Result<Array2<F>, CoreError> {
        check_image(x, config, "encode")?;
        let tape = self.enc.forward(store, x, mode, false, config.bn_eps, updates)?;
        Ok(global_avg_pool(&tape.y().view()))
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
    ) -> Result<GenOut<F>, CoreError> {
        check_image(x, config, "generator")?;
        check_codes(codes, x.dim().0)?;
        let eps = config.bn_eps;
        let s = self.dec.len();

        let enc_tape = self.enc.forward(store, x, mode, want_tape, eps, updates)?;
        let rep = global_avg_pool(&enc_tape.y().view());

        let (h0, w0) = config.bottleneck_hw();
        let z = ndarray::concatenate(Axis(1), &[rep.view(), codes.view()])
            .expect("representation/code concat");
        let seed = broadcast_hw(&z.view(), h0, w0);

        let mut dec_ins = Vec::with_capacity(s);
        let mut dec_outs = Vec::with_capacity(s);
        let mut dec_norm = Vec::with_capacity(s);
        let mut skip_ch = Vec::with_capacity(s);
        let mut cur = seed;
        for (j, layer) in self.dec.iter().enumerate() {
            let mut up = upsample2(&cur.view());
            if self.skips && j + 2 <= s {
                let feat = &enc_tape.acts[s - 1 - j];
                skip_ch.push(feat.dim().3);
                up = concat_channels(&up.view(), &feat.view())?;
            } else {
                skip_ch.push(0);
            }
            let mut out = layer.forward(store, &up.view(), mode, want_tape, eps)?;
            layer.push_stats(&mut out, updates);
            dec_ins.push(up);
            dec_norm.push(out.tape);
            dec_outs.push(out.y.clone());
            cur = out.y;
        }
        let mut head_out = self.head.forward(store, &cur.view(), mode, want_tape, eps)?;
        self.head.push_stats(&mut head_out, updates);
        let y = head_out.y;

        let tape = want_tape.then(|| GenTape {
            enc: enc_tape,
            dec_ins,
            dec_outs,
            dec_norm,
            skip_ch,
            y: y.clone(),
        });
        Ok(GenOut { y, rep, tape })
    }

    /// Backward from a gradient w.r.t. the generated image. Parameter
    /// gradients accumulate into `grads`.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &GenTape<F>,
        gy: &ArrayView4<'_, F>,
        grads: &mut GradStore<F>,
    ) -> Result<GenGrads<F>, CoreError> {
        let s = self.dec.len();
        let last = tape.dec_outs.last().expect("decoder output");
        let mut g =
            self.head
                .backward(store, &last.view(), &tape.y.view(), None, gy, grads)?;

        // gradients flowing into encoder activations via skip concats
        let mut skip_grads: Vec<Option<Array4<F>>> = Vec::new();
        skip_grads.resize_with(tape.enc.acts.len(), || None);
        for j in (0..s).rev() {
            g = self.dec[j].backward(
                store,
                &tape.dec_ins[j].view(),
                &tape.dec_outs[j].view(),
                tape.dec_norm[j].as_ref(),
                &g.view(),
                grads,
            )?;
            if tape.skip_ch[j] > 0 {
                let main_ch = g.dim().3 - tape.skip_ch[j];
                let (gmain, gskip) = split_channels_grad(&g.view(), main_ch)?;
                skip_grads[s - 1 - j] = Some(gskip);
                g = gmain;
            }
            g = upsample2_bwd(&g.view())?;
        }

        // seed = broadcast(concat(rep, code))
        let gz = broadcast_hw_bwd(&g.view());
        let r = gz.ncols() - NUM_PHASES;
        let grep = gz.slice(ndarray::s![.., ..r]).to_owned();
        let gcode = gz.slice(ndarray::s![.., r..]).to_owned();

        let enc_y = tape.enc.y();
        let (_b, eh, ew, _c) = enc_y.dim();
        let mut genc = global_avg_pool_bwd(&grep.view(), (eh, ew));

        // encoder backward, injecting any skip gradients at the matching
        // activations
        for (i, layer) in self.enc.layers.iter().enumerate().rev() {
            if let Some(extra) = skip_grads[i + 1].take() {
                genc += &extra;
            }
            genc = layer.backward(
                store,
                &tape.enc.acts[i].view(),
                &tape.enc.acts[i + 1].view(),
                tape.enc.tapes[i].as_ref(),
                &genc.view(),
                grads,
            )?;
        }
        Ok(GenGrads { gx: genc, gcode })
    }
}

/// Trunk flavor of the discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscStyle {
    /// Stride-2 3x3 stages plus extra stride-1 convs at full width.
    Cdgan,
    /// Stride-2 4x4 stages, one more of them, and no extra convs.
    Stargan,
}

/// Patch discriminator with a realness head and a 3-way classification
/// head. No normalization anywhere in the trunk.
pub struct Discriminator {
    trunk: SeqConv,
    src: ConvLayer,
    cls_w: ParamId,
    cls_b: ParamId,
    cls_in: usize,
}

/// Forward state for the discriminator backward pass.
pub struct DiscTape<F> {
    trunk: SeqTape<F>,
    src_y: Array4<F>,
    probs: Array2<F>,
}

pub struct DiscForward<F> {
    pub out: DiscOut<F>,
    pub tape: Option<DiscTape<F>>,
}

impl Discriminator {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        config: &NetConfig,
        style: DiscStyle,
    ) -> Result<Self, CoreError> {
        let leaky = Act::Leaky(config.leaky_slope);
        let stages = config.enc_stages;
        let geom = match style {
            DiscStyle::Cdgan => ConvGeom::K3S2,
            DiscStyle::Stargan => ConvGeom::K4S2,
        };
        let (h, w) = config.image_hw;
        if h >> stages == 0 || w >> stages == 0 || h % (1 << stages) != 0 || w % (1 << stages) != 0
        {
            return Err(CoreError::config(format!(
                "discriminator: image {h}x{w} does not support {stages} stride-2 stages"
            )));
        }
        let mut specs = Vec::new();
        let mut cin = 1;
        for i in 0..stages {
            let cout = config.disc_width(i);
            specs.push(ConvSpec::new(geom, cin, cout, Norm::None, leaky));
            cin = cout;
        }
        if style == DiscStyle::Cdgan {
            for _ in 0..config.disc_extra_convs {
                specs.push(ConvSpec::new(ConvGeom::K3S1, cin, cin, Norm::None, leaky));
            }
        }
        let trunk = SeqConv::register(store, init, "d.trunk", &specs)?;
        let src = ConvLayer::register(
            store,
            init,
            "d.src",
            ConvSpec::new(ConvGeom::K3S1, cin, 1, Norm::None, Act::None),
        )?;
        let (ph, pw) = (h >> stages, w >> stages);
        let cls_in = ph * pw * cin;
        let cls_w = store.register(
            "d.cls.w",
            ParamKind::Weight,
            init.gaussian::<F>(&[cls_in, NUM_PHASES]),
        )?;
        let cls_b = store.register(
            "d.cls.b",
            ParamKind::Weight,
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[NUM_PHASES])),
        )?;
        Ok(Discriminator { trunk, src, cls_w, cls_b, cls_in })
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &ArrayView4<'_, F>,
        mode: Mode,
        want_tape: bool,
        config: &NetConfig,
        updates: &mut BufUpdates<F>,
    ) -> Result<DiscForward<F>, CoreError> {
        check_image(x, config, "discriminator")?;
        let trunk = self.trunk.forward(store, x, mode, want_tape, config.bn_eps, updates)?;
        let ty = trunk.y();
        let (b, th, tw, tc) = ty.dim();
        if th * tw * tc != self.cls_in {
            return Err(CoreError::config(format!(
                "discriminator: trunk {th}x{tw}x{tc} vs registered head width {}",
                self.cls_in
            )));
        }
        let src_out = self.src.forward(store, &ty.view(), mode, false, config.bn_eps)?;
        let flat = ty
            .to_shape((b, self.cls_in))
            .expect("trunk flatten")
            .to_owned();
        let logits = dense(
            &flat.view(),
            &store.mat(self.cls_w, self.cls_in, NUM_PHASES),
            Some(&store.vec1(self.cls_b)),
        )?;
        let probs = softmax_rows(&logits.view());
        let tape = want_tape.then(|| DiscTape {
            trunk,
            src_y: src_out.y.clone(),
            probs: probs.clone(),
        });
        Ok(DiscForward {
            out: DiscOut { src_logits: src_out.y, cls_probs: probs },
            tape,
        })
    }

    /// Backward from gradients w.r.t. the realness logits and/or the class
    /// probabilities. Returns the gradient w.r.t. the input images.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &DiscTape<F>,
        g_src: Option<&ArrayView4<'_, F>>,
        g_probs: Option<&ArrayView2<'_, F>>,
        grads: &mut GradStore<F>,
    ) -> Result<Array4<F>, CoreError> {
        let ty = tape.trunk.y();
        let (b, th, tw, tc) = ty.dim();
        let mut g_trunk = Array4::<F>::zeros((b, th, tw, tc));
        if let Some(gs) = g_src {
            g_trunk += &self.src.backward(
                store,
                &ty.view(),
                &tape.src_y.view(),
                None,
                gs,
                grads,
            )?;
        }
        if let Some(gp) = g_probs {
            let gz = softmax_rows_bwd(&tape.probs.view(), gp);
            let flat = ty.to_shape((b, self.cls_in)).expect("trunk flatten");
            let (gflat, gw, gb) = dense_bwd(
                &flat.view(),
                &store.mat(self.cls_w, self.cls_in, NUM_PHASES),
                &gz.view(),
            );
            grads.add(self.cls_w, gw.into_dyn());
            grads.add(self.cls_b, gb.into_dyn());
            g_trunk += &gflat
                .into_shape_with_order((b, th, tw, tc))
                .expect("head gradient reshape");
        }
        self.trunk.backward(store, &tape.trunk, &g_trunk.view(), grads)
    }
}
