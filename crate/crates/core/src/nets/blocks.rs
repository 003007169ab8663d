//! Reusable convolution blocks: a conv (or transposed conv) followed by
//! optional normalization and a pointwise activation, with explicit
//! forward/backward passes over a [`ParamStore`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use ndarray::{Array1, Array4, ArrayD, ArrayView4};

use crate::error::CoreError;
use crate::params::{BufUpdates, GradStore, Initializer, ParamId, ParamKind, ParamStore};
use crate::tensor::conv::{conv2d, conv2d_bwd, conv_transpose2d, conv_transpose2d_bwd, ConvGeom};
use crate::tensor::norm::{
    batchnorm_bwd, batchnorm_infer, batchnorm_train, instancenorm, instancenorm_bwd,
};
use crate::tensor::ops::{leaky_relu, leaky_relu_bwd, relu, relu_bwd, tanh_act, tanh_bwd};
use crate::tensor::{Mode, Scalar};

/// Normalization attached to a conv block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    None,
    Batch,
    Instance,
}

/// Pointwise activation applied after normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    None,
    Relu,
    /// Leaky ReLU with the given negative-side slope.
    Leaky(f64),
    Tanh,
}

impl Act {
    pub fn apply<F: Scalar>(&self, x: &ArrayView4<'_, F>) -> Array4<F> {
        match self {
            Act::None => x.to_owned(),
            Act::Relu => relu(x),
            Act::Leaky(a) => leaky_relu(x, *a),
            Act::Tanh => tanh_act(x),
        }
    }

    /// Backward through the activation, expressed in terms of its output `y`.
    pub fn backward<F: Scalar>(
        &self,
        y: &ArrayView4<'_, F>,
        gy: &ArrayView4<'_, F>,
    ) -> Array4<F> {
        match self {
            Act::None => gy.to_owned(),
            Act::Relu => relu_bwd(y, gy),
            Act::Leaky(a) => leaky_relu_bwd(y, gy, *a),
            Act::Tanh => tanh_bwd(y, gy),
        }
    }
}

/// Parameter handles for the normalization stage, if any.
#[derive(Debug, Clone, Copy)]
pub enum NormAttach {
    None,
    Batch { gamma: ParamId, beta: ParamId, rmean: ParamId, rvar: ParamId },
    Instance { gamma: ParamId, beta: ParamId },
}

/// What a training-mode forward pass must remember for backward.
pub enum NormTape<F> {
    Batch { xhat: Array4<F>, inv_std: Array1<F> },
    Instance { xhat: Array4<F>, inv_std: ndarray::Array2<F> },
}

/// Static description of one conv block.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
    pub norm: Norm,
    pub act: Act,
    /// Transposed (fractionally strided) convolution instead of a forward one.
    pub transpose: bool,
}

impl ConvSpec {
    pub fn new(geom: ConvGeom, cin: usize, cout: usize, norm: Norm, act: Act) -> Self {
        ConvSpec { geom, cin, cout, norm, act, transpose: false }
    }

    pub fn transposed(mut self) -> Self {
        self.transpose = true;
        self
    }
}

/// Output of a single block's forward pass.
pub struct LayerOut<F> {
    pub y: Array4<F>,
    /// Saved normalization state; present only when a tape was requested
    /// and the block normalizes.
    pub tape: Option<NormTape<F>>,
    /// Batch statistics `(mean, biased var)` for the running-buffer update;
    /// present only for training-mode batchnorm.
    pub stats: Option<(Array1<F>, Array1<F>)>,
}

/// One registered conv block: conv/convT -> norm -> activation.
///
/// The convolution carries a bias only when no normalization follows it
/// (the affine stage of the norm makes a bias redundant).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    w: ParamId,
    b: Option<ParamId>,
    norm: NormAttach,
}

impl ConvLayer {
    /// Registers the block's parameters under `prefix` and returns the layer.
    ///
    /// Weights are N(0, 0.02) draws from `init`; biases and beta start at
    /// zero, gamma and running variance at one.
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        prefix: &str,
        spec: ConvSpec,
    ) -> Result<ConvLayer, CoreError> {
        if spec.cin == 0 || spec.cout == 0 {
            return Err(CoreError::config(format!(
                "layer {prefix}: zero channel count ({} -> {})",
                spec.cin, spec.cout
            )));
        }
        let g = spec.geom;
        let wshape: [usize; 4] = if spec.transpose {
            [g.kh, g.kw, spec.cout, spec.cin]
        } else {
            [g.kh, g.kw, spec.cin, spec.cout]
        };
        let w = store.register(
            &format!("{prefix}.w"),
            ParamKind::Weight,
            init.gaussian::<F>(&wshape),
        )?;
        let b = if spec.norm == Norm::None {
            Some(store.register(
                &format!("{prefix}.b"),
                ParamKind::Weight,
                ArrayD::zeros(ndarray::IxDyn(&[spec.cout])),
            )?)
        } else {
            None
        };
        let norm = match spec.norm {
            Norm::None => NormAttach::None,
            Norm::Batch => NormAttach::Batch {
                gamma: store.register(
                    &format!("{prefix}.gamma"),
                    ParamKind::Weight,
                    ArrayD::ones(ndarray::IxDyn(&[spec.cout])),
                )?,
                beta: store.register(
                    &format!("{prefix}.beta"),
                    ParamKind::Weight,
                    ArrayD::zeros(ndarray::IxDyn(&[spec.cout])),
                )?,
                rmean: store.register(
                    &format!("{prefix}.rmean"),
                    ParamKind::Buffer,
                    ArrayD::zeros(ndarray::IxDyn(&[spec.cout])),
                )?,
                rvar: store.register(
                    &format!("{prefix}.rvar"),
                    ParamKind::Buffer,
                    ArrayD::ones(ndarray::IxDyn(&[spec.cout])),
                )?,
            },
            Norm::Instance => NormAttach::Instance {
                gamma: store.register(
                    &format!("{prefix}.gamma"),
                    ParamKind::Weight,
                    ArrayD::ones(ndarray::IxDyn(&[spec.cout])),
                )?,
                beta: store.register(
                    &format!("{prefix}.beta"),
                    ParamKind::Weight,
                    ArrayD::zeros(ndarray::IxDyn(&[spec.cout])),
                )?,
            },
        };
        Ok(ConvLayer { spec, w, b, norm })
    }

    fn weight_rows(&self) -> usize {
        let g = self.spec.geom;
        if self.spec.transpose {
            g.kh * g.kw * self.spec.cout
        } else {
            g.kh * g.kw * self.spec.cin
        }
    }

    fn weight_cols(&self) -> usize {
        if self.spec.transpose {
            self.spec.cin
        } else {
            self.spec.cout
        }
    }

    /// Spatial output size for an input of `(h, w)`.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize), CoreError> {
        if self.spec.transpose {
            Ok(self.spec.geom.transpose_out_hw(h, w))
        } else {
            self.spec.geom.out_hw(h, w)
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &ArrayView4<'_, F>,
        mode: Mode,
        want_tape: bool,
        eps: f64,
    ) -> Result<LayerOut<F>, CoreError> {
        let w2 = store.mat(self.w, self.weight_rows(), self.weight_cols());
        let bias = self.b.map(|id| store.vec1(id));
        let z = if self.spec.transpose {
            conv_transpose2d(x, &w2, bias.as_ref(), self.spec.geom)?
        } else {
            conv2d(x, &w2, bias.as_ref(), self.spec.geom)?
        };
        let (normed, tape, stats) = match self.norm {
            NormAttach::None => (z, None, None),
            NormAttach::Batch { gamma, beta, rmean, rvar } => match mode {
                Mode::Train => {
                    let out = batchnorm_train(
                        &z.view(),
                        &store.vec1(gamma),
                        &store.vec1(beta),
                        eps,
                    )?;
                    let tape = want_tape
                        .then(|| NormTape::Batch { xhat: out.xhat, inv_std: out.inv_std });
                    (out.y, tape, Some((out.batch_mean, out.batch_var)))
                }
                Mode::Infer => {
                    let y = batchnorm_infer(
                        &z.view(),
                        &store.vec1(gamma),
                        &store.vec1(beta),
                        &store.vec1(rmean),
                        &store.vec1(rvar),
                        eps,
                    )?;
                    (y, None, None)
                }
            },
            NormAttach::Instance { gamma, beta } => {
                let out = instancenorm(&z.view(), &store.vec1(gamma), &store.vec1(beta), eps)?;
                let tape = want_tape
                    .then(|| NormTape::Instance { xhat: out.xhat, inv_std: out.inv_std });
                (out.y, tape, None)
            }
        };
        let y = self.spec.act.apply(&normed.view());
        Ok(LayerOut { y, tape, stats })
    }

    /// Backward through activation, norm, and conv. Accumulates parameter
    /// gradients into `grads` and returns the gradient w.r.t. `x`.
    ///
    /// `x` and `y` are the block's own input and output from the forward
    /// pass; the conv's patch matrix is recomputed from `x` rather than
    /// stored.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &ArrayView4<'_, F>,
        y: &ArrayView4<'_, F>,
        tape: Option<&NormTape<F>>,
        gy: &ArrayView4<'_, F>,
        grads: &mut GradStore<F>,
    ) -> Result<Array4<F>, CoreError> {
        let ga = self.spec.act.backward(y, gy);
        let gz = match (&self.norm, tape) {
            (NormAttach::None, _) => ga,
            (NormAttach::Batch { gamma, beta, .. }, Some(NormTape::Batch { xhat, inv_std })) => {
                let (gz, dgamma, dbeta) =
                    batchnorm_bwd(&xhat.view(), &inv_std.view(), &store.vec1(*gamma), &ga.view());
                grads.add(*gamma, dgamma.into_dyn());
                grads.add(*beta, dbeta.into_dyn());
                gz
            }
            (
                NormAttach::Instance { gamma, beta },
                Some(NormTape::Instance { xhat, inv_std }),
            ) => {
                let (gz, dgamma, dbeta) = instancenorm_bwd(
                    &xhat.view(),
                    &inv_std.view(),
                    &store.vec1(*gamma),
                    &ga.view(),
                );
                grads.add(*gamma, dgamma.into_dyn());
                grads.add(*beta, dbeta.into_dyn());
                gz
            }
            _ => {
                return Err(CoreError::config(
                    "conv block backward needs the training-mode tape for its normalizer",
                ))
            }
        };
        let w2 = store.mat(self.w, self.weight_rows(), self.weight_cols());
        let (gx, gw, gb) = if self.spec.transpose {
            conv_transpose2d_bwd(x, &w2, &gz.view(), self.spec.geom)?
        } else {
            conv2d_bwd(x, &w2, &gz.view(), self.spec.geom)?
        };
        let wshape = store.value(self.w).shape().to_vec();
        grads.add(
            self.w,
            gw.into_shape_with_order(ndarray::IxDyn(&wshape))
                .expect("conv weight gradient reshape"),
        );
        if let Some(b) = self.b {
            grads.add(b, gb.into_dyn());
        }
        Ok(gx)
    }

    /// Pushes this block's running-buffer update, if the forward pass
    /// produced batch statistics.
    pub fn push_stats<F: Scalar>(&self, out: &mut LayerOut<F>, updates: &mut BufUpdates<F>) {
        if let (NormAttach::Batch { rmean, rvar, .. }, Some((mean, var))) =
            (&self.norm, out.stats.take())
        {
            updates.push((*rmean, *rvar, mean, var));
        }
    }
}

/// A straight chain of conv blocks with a shared activation tape.
#[derive(Debug, Clone, Default)]
pub struct SeqConv {
    pub layers: Vec<ConvLayer>,
}

/// Forward state of a [`SeqConv`]: every intermediate activation
/// (`acts[i]` feeds layer `i`; `acts.last()` is the chain output) plus the
/// per-layer normalization tapes.
pub struct SeqTape<F> {
    pub acts: Vec<Array4<F>>,
    pub tapes: Vec<Option<NormTape<F>>>,
}

impl<F> SeqTape<F> {
    pub fn y(&self) -> &Array4<F> {
        self.acts.last().expect("sequence output")
    }

    pub fn into_y(mut self) -> Array4<F> {
        self.acts.pop().expect("sequence output")
    }
}

impl SeqConv {
    /// Registers a chain of blocks named `{prefix}.{i}`.
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        prefix: &str,
        specs: &[ConvSpec],
    ) -> Result<SeqConv, CoreError> {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            layers.push(ConvLayer::register(store, init, &format!("{prefix}.{i}"), *spec)?);
        }
        Ok(SeqConv { layers })
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &ArrayView4<'_, F>,
        mode: Mode,
        want_tape: bool,
        eps: f64,
        updates: &mut BufUpdates<F>,
    ) -> Result<SeqTape<F>, CoreError> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut tapes = Vec::with_capacity(self.layers.len());
        acts.push(x.to_owned());
        for layer in &self.layers {
            let cur = acts.last().expect("chain input");
            let mut out = layer.forward(store, &cur.view(), mode, want_tape, eps)?;
            layer.push_stats(&mut out, updates);
            tapes.push(out.tape);
            acts.push(out.y);
        }
        Ok(SeqTape { acts, tapes })
    }

    /// Backward across the whole chain; returns the gradient w.r.t. the
    /// chain input.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        tape: &SeqTape<F>,
        gy: &ArrayView4<'_, F>,
        grads: &mut GradStore<F>,
    ) -> Result<Array4<F>, CoreError> {
        if tape.acts.len() != self.layers.len() + 1 {
            return Err(CoreError::invalid(format!(
                "sequence backward: {} activations for {} layers",
                tape.acts.len(),
                self.layers.len()
            )));
        }
        let mut g = gy.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(
                store,
                &tape.acts[i].view(),
                &tape.acts[i + 1].view(),
                tape.tapes[i].as_ref(),
                &g.view(),
                grads,
            )?;
        }
        Ok(g)
    }
}

/// Applies accumulated batch statistics to the running buffers:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn apply_buf_updates<F: Scalar>(
    store: &mut ParamStore<F>,
    updates: BufUpdates<F>,
    momentum: f64,
) {
    for (rmean, rvar, mean, var) in updates {
        store.ema_buffer(rmean, &mean.view(), momentum);
        store.ema_buffer(rvar, &var.view(), momentum);
    }
}

/// Builds a parameter name under a dotted prefix.
pub fn scoped(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, StreamDomain};
    use crate::tensor::testutil::{fd_grad4, max_rel_err, seeded4};

    const EPS: f64 = 1e-5;

    fn new_init(tag: u64) -> Initializer {
        Initializer::new(stream_rng(7, StreamDomain::Init, tag, 0))
    }

    fn layer_setup(
        spec: ConvSpec,
    ) -> (ParamStore<f64>, ConvLayer) {
        let mut store = ParamStore::<f64>::new();
        let mut init = new_init(11);
        let layer = ConvLayer::register(&mut store, &mut init, "t", spec).unwrap();
        (store, layer)
    }

    fn layer_loss(
        store: &ParamStore<f64>,
        layer: &ConvLayer,
        x: &Array4<f64>,
        t: &Array4<f64>,
    ) -> f64 {
        let out = layer
            .forward(store, &x.view(), Mode::Train, false, EPS)
            .unwrap();
        out.y.iter().zip(t.iter()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn registered_names_follow_prefix() {
        let (store, _layer) = layer_setup(ConvSpec::new(
            ConvGeom::K3S1,
            2,
            3,
            Norm::Batch,
            Act::Relu,
        ));
        for name in ["t.w", "t.gamma", "t.beta", "t.rmean", "t.rvar"] {
            assert!(store.id(name).is_some(), "missing {name}");
        }
        assert!(store.id("t.b").is_none(), "norm layers carry no conv bias");
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        for (norm, act) in [
            (Norm::None, Act::Leaky(0.01)),
            (Norm::Batch, Act::Relu),
            (Norm::Instance, Act::Tanh),
        ] {
            let (store, layer) = layer_setup(ConvSpec::new(ConvGeom::K3S2, 2, 3, norm, act));
            let x = seeded4(31, (2, 6, 6, 2));
            let t = seeded4(32, (2, 3, 3, 3));
            let out = layer
                .forward(&store, &x.view(), Mode::Train, true, EPS)
                .unwrap();
            let mut grads = GradStore::new(&store);
            let gx = layer
                .backward(
                    &store,
                    &x.view(),
                    &out.y.view(),
                    out.tape.as_ref(),
                    &t.view(),
                    &mut grads,
                )
                .unwrap();
            let fx = fd_grad4(|v| layer_loss(&store, &layer, v, &t), &x);
            assert!(
                max_rel_err(gx.iter(), fx.iter()) < 1e-6,
                "input grad, norm {norm:?}"
            );

            // every trainable parameter's gradient against central differences
            for id in store.trainable_ids() {
                let base = store.value(id).clone();
                let got = grads.get(id).unwrap_or_else(|| {
                    panic!("no gradient for {}", store.name(id))
                });
                let h = 1e-5;
                let mut flat_err: f64 = 0.0;
                for j in 0..base.len().min(6) {
                    let mut sp = store.clone();
                    let mut sm = store.clone();
                    let mut vp = base.clone();
                    let mut vm = base.clone();
                    vp.as_slice_mut().unwrap()[j] += h;
                    vm.as_slice_mut().unwrap()[j] -= h;
                    sp.set_value(id, vp).unwrap();
                    sm.set_value(id, vm).unwrap();
                    let fd = (layer_loss(&sp, &layer, &x, &t)
                        - layer_loss(&sm, &layer, &x, &t))
                        / (2.0 * h);
                    let g = got.as_slice().unwrap()[j];
                    flat_err = flat_err.max((g - fd).abs() / fd.abs().max(1.0));
                }
                assert!(
                    flat_err < 1e-6,
                    "{} grad err {flat_err:.2e}, norm {norm:?}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn transpose_block_gradients_match_finite_differences() {
        let (store, layer) = layer_setup(
            ConvSpec::new(ConvGeom::K4S2, 3, 2, Norm::Instance, Act::Relu).transposed(),
        );
        let x = seeded4(41, (2, 3, 3, 3));
        let t = seeded4(42, (2, 6, 6, 2));
        let out = layer
            .forward(&store, &x.view(), Mode::Train, true, EPS)
            .unwrap();
        assert_eq!(out.y.dim(), (2, 6, 6, 2));
        let mut grads = GradStore::new(&store);
        let gx = layer
            .backward(
                &store,
                &x.view(),
                &out.y.view(),
                out.tape.as_ref(),
                &t.view(),
                &mut grads,
            )
            .unwrap();
        let fx = fd_grad4(|v| layer_loss(&store, &layer, v, &t), &x);
        assert!(max_rel_err(gx.iter(), fx.iter()) < 1e-6);
    }

    #[test]
    fn sequence_matches_manual_composition_and_fd() {
        let mut store = ParamStore::<f64>::new();
        let mut init = new_init(12);
        let seq = SeqConv::register(
            &mut store,
            &mut init,
            "s",
            &[
                ConvSpec::new(ConvGeom::K3S2, 1, 4, Norm::Batch, Act::Relu),
                ConvSpec::new(ConvGeom::K3S1, 4, 2, Norm::None, Act::Tanh),
            ],
        )
        .unwrap();
        let x = seeded4(51, (2, 8, 8, 1));
        let t = seeded4(52, (2, 4, 4, 2));
        let mut updates = Vec::new();
        let tape = seq
            .forward(&store, &x.view(), Mode::Train, true, EPS, &mut updates)
            .unwrap();
        assert_eq!(tape.y().dim(), (2, 4, 4, 2));
        assert_eq!(updates.len(), 1, "one batchnorm layer updates buffers");

        let mut grads = GradStore::new(&store);
        let gx = seq.backward(&store, &tape, &t.view(), &mut grads).unwrap();
        let loss = |v: &Array4<f64>| {
            let mut u = Vec::new();
            let tp = seq
                .forward(&store, &v.view(), Mode::Train, false, EPS, &mut u)
                .unwrap();
            tp.y().iter().zip(t.iter()).map(|(a, b)| a * b).sum()
        };
        let fx = fd_grad4(loss, &x);
        assert!(max_rel_err(gx.iter(), fx.iter()) < 1e-6);
    }

    #[test]
    fn buffer_updates_move_running_stats() {
        let (mut store, layer) =
            layer_setup(ConvSpec::new(ConvGeom::K3S1, 1, 2, Norm::Batch, Act::None));
        let x = seeded4(61, (2, 4, 4, 1)) + 3.0;
        let mut out = layer
            .forward(&store, &x.view(), Mode::Train, false, EPS)
            .unwrap();
        let mut updates = Vec::new();
        layer.push_stats(&mut out, &mut updates);
        assert_eq!(updates.len(), 1);
        let rmean = store.id("t.rmean").unwrap();
        apply_buf_updates(&mut store, updates, 0.0);
        // momentum 0 copies the batch mean straight into the buffer
        let z_mean = store.value(rmean).clone();
        assert!(z_mean.iter().any(|v| v.abs() > 1e-12));

        // infer mode consumes the buffers and produces no stats
        let out = layer
            .forward(&store, &x.view(), Mode::Infer, true, EPS)
            .unwrap();
        assert!(out.stats.is_none());
        assert!(out.tape.is_none());
    }

    #[test]
    fn backward_without_tape_is_rejected() {
        let (store, layer) =
            layer_setup(ConvSpec::new(ConvGeom::K3S1, 1, 2, Norm::Batch, Act::None));
        let x = seeded4(71, (1, 4, 4, 1));
        let out = layer
            .forward(&store, &x.view(), Mode::Train, false, EPS)
            .unwrap();
        let mut grads = GradStore::new(&store);
        let err = layer.backward(
            &store,
            &x.view(),
            &out.y.view(),
            None,
            &out.y.view(),
            &mut grads,
        );
        assert!(err.is_err());
    }

    #[test]
    fn gradient_shapes_match_parameter_shapes() {
        let (store, layer) = layer_setup(ConvSpec::new(
            ConvGeom::K4S2,
            2,
            3,
            Norm::None,
            Act::Relu,
        ));
        let x = seeded4(81, (1, 8, 8, 2));
        let out = layer
            .forward(&store, &x.view(), Mode::Train, true, EPS)
            .unwrap();
        let mut grads = GradStore::new(&store);
        layer
            .backward(
                &store,
                &x.view(),
                &out.y.view(),
                out.tape.as_ref(),
                &out.y.view(),
                &mut grads,
            )
            .unwrap();
        let w = store.id("t.w").unwrap();
        assert_eq!(grads.get(w).unwrap().shape(), &[4, 4, 2, 3]);
        let b = store.id("t.b").unwrap();
        assert_eq!(grads.get(b).unwrap().shape(), &[3]);
    }
}
