//! The alternating optimization loop: deterministic batch construction,
//! the step-decay learning-rate schedule, and one `train_step` per model
//! kind (adversarial for the GAN bundles, plain cross-entropy for the
//! classifiers). File IO, logging, and checkpoint formats live in the
//! CLI crate; everything here operates on in-memory state.

use alloc::format;
use alloc::vec::Vec;

use ndarray::{Array2, Array4, ArrayView4};
use rand::Rng;

use crate::adam::{AdamConfig, AdamState};
use crate::error::CoreError;
use crate::nets::{apply_buf_updates, Arch, Model, ModelKind, NetConfig};
use crate::objectives::{
    adv_loss_d_grads, adv_loss_g_grads, cls_loss_grads, d_objective, g_objective, LossValues,
    LossWeights,
};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::phase::{PhaseLabel, NUM_PHASES};
use crate::rng::{epoch_permutation, stream_rng, StreamDomain};
use crate::tensor::{c, Mode, Scalar};

/// How target contrast codes are assigned to each slice of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CodeMode {
    /// Every slice is paired with all three phases; the generator batch
    /// is three times the discriminator batch.
    EnumerateAllThree,
    /// One uniformly drawn phase per slice.
    SampleOne,
}

/// Optimization hyperparameters and loop bookkeeping.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub iterations: u64,
    pub lr_decay_factor: f64,
    pub lr_decay_period: u64,
    pub lambda_cls: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub code_mode: CodeMode,
    /// Train the translation baseline's generator adversarially instead
    /// of leaving it at initialization (classifier-only is the default,
    /// isolating the architecture comparison).
    pub stargan_full_loop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            d_steps: 1,
            iterations: 2000,
            lr_decay_factor: 0.1,
            lr_decay_period: 100_000,
            lambda_cls: 1.0,
            seed: 0,
            checkpoint_interval: 500,
            code_mode: CodeMode::EnumerateAllThree,
            stargan_full_loop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.adam().validate()?;
        self.weights().validate()?;
        if self.batch_size == 0 {
            return Err(CoreError::config("batch_size must be at least 1"));
        }
        if self.d_steps == 0 {
            return Err(CoreError::config("d_steps must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(CoreError::config("iterations must be at least 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(CoreError::config(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_period == 0 {
            return Err(CoreError::config("lr_decay_period must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_cls: self.lambda_cls }
    }
}

/// Effective learning rate at an iteration: step decay by the configured
/// factor once per period.
pub fn lr_at(iteration: u64, config: &TrainConfig) -> f64 {
    let steps = iteration / config.lr_decay_period;
    config.lr * config.lr_decay_factor.powi(steps.min(i32::MAX as u64) as i32)
}

/// One preprocessed training slice.
#[derive(Debug, Clone)]
pub struct LabeledSlice {
    /// `(h, w)` pixels in `[-1, 1]`.
    pub pixels: Array2<f32>,
    pub label: PhaseLabel,
}

/// An in-memory training set with a uniform grid.
#[derive(Debug, Clone)]
pub struct SliceDataset {
    slices: Vec<LabeledSlice>,
    hw: (usize, usize),
}

impl SliceDataset {
    pub fn new(slices: Vec<LabeledSlice>) -> Result<Self, CoreError> {
        let first = slices
            .first()
            .ok_or_else(|| CoreError::config("training set is empty"))?;
        let hw = first.pixels.dim();
        for (i, s) in slices.iter().enumerate() {
            if s.pixels.dim() != hw {
                return Err(CoreError::invalid(format!(
                    "slice {i} is {:?}, expected {hw:?}",
                    s.pixels.dim()
                )));
            }
            if s.pixels.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Numeric(format!("slice {i} has non-finite pixels")));
            }
        }
        Ok(SliceDataset { slices, hw })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn hw(&self) -> (usize, usize) {
        self.hw
    }

    pub fn get(&self, i: usize) -> &LabeledSlice {
        &self.slices[i]
    }
}

/// Dataset indices for one iteration's batch.
///
/// The sequence is a concatenation of per-epoch shuffles, indexed by the
/// global sample counter `iteration * batch_size`, so any iteration's
/// batch is computable without replaying the ones before it.
pub fn batch_indices(seed: u64, iteration: u64, batch_size: usize, n: usize) -> Vec<usize> {
    assert!(n > 0 && batch_size > 0);
    let start = iteration as u128 * batch_size as u128;
    let mut cached: Option<(u64, Vec<u32>)> = None;
    (0..batch_size as u128)
        .map(|j| {
            let abs = start + j;
            let epoch = (abs / n as u128) as u64;
            let pos = (abs % n as u128) as usize;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached = Some((epoch, epoch_permutation(seed, epoch, n)));
            }
            cached.as_ref().expect("epoch permutation").1[pos] as usize
        })
        .collect()
}

/// One iteration's inputs.
pub struct TrainBatch<F> {
    /// Real slices `(b, h, w, 1)`.
    pub x: Array4<F>,
    /// Their (possibly noise-corrupted) phase labels.
    pub labels: Vec<PhaseLabel>,
    /// Generator inputs: real slices, repeated per assigned code.
    pub gen_x: Array4<F>,
    /// One-hot target codes for `gen_x` rows.
    pub gen_codes: Array2<F>,
    /// The same targets in label form, for the fake-path cross-entropy.
    pub gen_targets: Vec<PhaseLabel>,
}

/// Assemble the batch for `iteration`. With `want_generator` the
/// synthesis inputs are populated per the configured code mode; without
/// it they are left empty (classifier-only training never reads them).
pub fn make_batch<F: Scalar>(
    data: &SliceDataset,
    iteration: u64,
    config: &TrainConfig,
    want_generator: bool,
) -> Result<TrainBatch<F>, CoreError> {
    if data.is_empty() {
        return Err(CoreError::config("training set is empty"));
    }
    let (h, w) = data.hw();
    let idx = batch_indices(config.seed, iteration, config.batch_size, data.len());
    let b = idx.len();
    let mut x = Array4::<F>::zeros((b, h, w, 1));
    let mut labels = Vec::with_capacity(b);
    for (row, &i) in idx.iter().enumerate() {
        let s = data.get(i);
        for r in 0..h {
            for cc in 0..w {
                x[[row, r, cc, 0]] = c::<F>(s.pixels[[r, cc]] as f64);
            }
        }
        labels.push(s.label);
    }

    let (gen_x, gen_codes, gen_targets) = if !want_generator {
        (Array4::zeros((0, h, w, 1)), Array2::zeros((0, NUM_PHASES)), Vec::new())
    } else {
        match config.code_mode {
            CodeMode::EnumerateAllThree => {
                let gb = b * NUM_PHASES;
                let mut gx = Array4::<F>::zeros((gb, h, w, 1));
                let mut targets = Vec::with_capacity(gb);
                for row in 0..b {
                    for (k, &phase) in PhaseLabel::ALL.iter().enumerate() {
                        let dst = row * NUM_PHASES + k;
                        gx.index_axis_mut(ndarray::Axis(0), dst)
                            .assign(&x.index_axis(ndarray::Axis(0), row));
                        targets.push(phase);
                    }
                }
                let codes = crate::nets::one_hot_codes::<F>(&targets);
                (gx, codes, targets)
            }
            CodeMode::SampleOne => {
                let mut rng = stream_rng(config.seed, StreamDomain::TargetCode, iteration, 0);
                let targets: Vec<PhaseLabel> = (0..b)
                    .map(|_| PhaseLabel::ALL[rng.random_range(0..NUM_PHASES)])
                    .collect();
                let codes = crate::nets::one_hot_codes::<F>(&targets);
                (x.clone(), codes, targets)
            }
        }
    };

    Ok(TrainBatch { x, labels, gen_x, gen_codes, gen_targets })
}

/// Whether this run updates generator parameters.
pub fn trains_generator(kind: ModelKind, config: &TrainConfig) -> bool {
    match kind {
        ModelKind::CdGan => true,
        ModelKind::StarganD => config.stargan_full_loop,
        ModelKind::Unet | ModelKind::Resnet => false,
    }
}

/// Mutable training state: the model plus per-network optimizer moments
/// and the iteration counter.
pub struct TrainState<F> {
    pub model: Model<F>,
    /// Discriminator/classifier optimizer.
    pub opt_d: AdamState<F>,
    /// Generator optimizer, present when the run trains one.
    pub opt_g: Option<AdamState<F>>,
    /// Completed iterations.
    pub iteration: u64,
}

/// Trainable parameters the discriminator-side optimizer covers. The
/// realness head only learns under an adversarial objective, so
/// classifier-only runs leave it out.
fn d_param_ids<F: Scalar>(store: &ParamStore<F>, adversarial: bool) -> Vec<ParamId> {
    store
        .trainable_ids()
        .into_iter()
        .filter(|&id| {
            let name = store.name(id);
            !name.starts_with("g.") && (adversarial || !name.starts_with("d.src"))
        })
        .collect()
}

fn g_param_ids<F: Scalar>(store: &ParamStore<F>) -> Vec<ParamId> {
    store
        .trainable_ids()
        .into_iter()
        .filter(|&id| store.name(id).starts_with("g."))
        .collect()
}

impl<F: Scalar> TrainState<F> {
    pub fn new(model: Model<F>, config: &TrainConfig) -> Result<Self, CoreError> {
        config.validate()?;
        let adversarial = trains_generator(model.kind, config);
        let d_ids = d_param_ids(&model.store, adversarial);
        if d_ids.is_empty() {
            return Err(CoreError::config("model has no classifier parameters"));
        }
        let opt_d = AdamState::new(&model.store, d_ids);
        let opt_g = adversarial
            .then(|| AdamState::new(&model.store, g_param_ids(&model.store)));
        Ok(TrainState { model, opt_d, opt_g, iteration: 0 })
    }
}

/// True when every parameter and buffer holds only finite values.
pub fn params_all_finite<F: Scalar>(store: &ParamStore<F>) -> bool {
    store.iter().all(|(_, _, _, v)| v.iter().all(|x| x.is_finite()))
}

/// Advance the state by one iteration and report the step's losses.
///
/// GAN kinds run `d_steps` discriminator updates (synthesized images
/// treated as constants) followed by one generator update; classifier
/// kinds minimize the real-slice cross-entropy only. Errors on
/// non-finite losses, leaving the state as the failed update wrote it
/// so callers can snapshot diagnostics.
pub fn train_step<F: Scalar>(
    state: &mut TrainState<F>,
    batch: &TrainBatch<F>,
    config: &TrainConfig,
) -> Result<LossValues, CoreError> {
    let lr = lr_at(state.iteration, config);
    let adam = config.adam();
    let weights = config.weights();
    let TrainState { model, opt_d, opt_g, iteration } = state;
    let Model { config: net, store, arch, .. } = model;

    let losses = match arch {
        Arch::Unet(n) => {
            let mut updates = Vec::new();
            let fwd = n.forward(store, &batch.x.view(), Mode::Train, true, net, &mut updates)?;
            let (loss, gp) = cls_loss_grads(&fwd.probs.view(), &batch.labels)?;
            let mut grads = GradStore::new(store);
            n.backward(store, fwd.tape.as_ref().expect("tape"), &gp.view(), &mut grads)?;
            opt_d.step(store, &grads, lr, &adam)?;
            apply_buf_updates(store, updates, net.bn_momentum);
            classifier_losses(loss)
        }
        Arch::Resnet(n) => {
            let mut updates = Vec::new();
            let fwd = n.forward(store, &batch.x.view(), Mode::Train, true, net, &mut updates)?;
            let (loss, gp) = cls_loss_grads(&fwd.probs.view(), &batch.labels)?;
            let mut grads = GradStore::new(store);
            n.backward(store, fwd.tape.as_ref().expect("tape"), &gp.view(), &mut grads)?;
            opt_d.step(store, &grads, lr, &adam)?;
            apply_buf_updates(store, updates, net.bn_momentum);
            classifier_losses(loss)
        }
        Arch::StarganD { disc, .. } if !config.stargan_full_loop => {
            let mut updates = Vec::new();
            let fwd = disc.forward(store, &batch.x.view(), Mode::Train, true, net, &mut updates)?;
            let (loss, gp) = cls_loss_grads(&fwd.out.cls_probs.view(), &batch.labels)?;
            let mut grads = GradStore::new(store);
            disc.backward(
                store,
                fwd.tape.as_ref().expect("tape"),
                None,
                Some(&gp.view()),
                &mut grads,
            )?;
            opt_d.step(store, &grads, lr, &adam)?;
            apply_buf_updates(store, updates, net.bn_momentum);
            classifier_losses(loss)
        }
        Arch::CdGan { gen, disc } => {
            let opt_g = opt_g.as_mut().expect("generator optimizer");
            let mut adv_d = F::zero();
            let mut cls_real = F::zero();
            for _ in 0..config.d_steps {
                let mut scratch = Vec::new();
                let fake = gen
                    .forward(
                        store,
                        &batch.gen_x.view(),
                        &batch.gen_codes.view(),
                        Mode::Train,
                        false,
                        net,
                        &mut scratch,
                    )?
                    .y;
                let (a, cr) =
                    disc_update(store, disc, opt_d, batch, &fake.view(), net, &weights, lr, &adam)?;
                adv_d = a;
                cls_real = cr;
            }

            let mut g_updates = Vec::new();
            let out = gen.forward(
                store,
                &batch.gen_x.view(),
                &batch.gen_codes.view(),
                Mode::Train,
                true,
                net,
                &mut g_updates,
            )?;
            let (adv_g, cls_fake, gy, mut grads) =
                gen_objective_grads(store, disc, &out.y.view(), &batch.gen_targets, net, &weights)?;
            gen.backward(store, out.tape.as_ref().expect("tape"), &gy.view(), &mut grads)?;
            opt_g.step(store, &grads, lr, &adam)?;
            apply_buf_updates(store, g_updates, net.bn_momentum);
            gan_losses(adv_d, adv_g, cls_real, cls_fake, &weights)
        }
        Arch::StarganD { gen, disc } => {
            let opt_g = opt_g.as_mut().expect("generator optimizer");
            let mut adv_d = F::zero();
            let mut cls_real = F::zero();
            for _ in 0..config.d_steps {
                let mut scratch = Vec::new();
                let fake = gen
                    .forward(
                        store,
                        &batch.gen_x.view(),
                        &batch.gen_codes.view(),
                        Mode::Train,
                        false,
                        net,
                        &mut scratch,
                    )?
                    .y;
                let (a, cr) =
                    disc_update(store, disc, opt_d, batch, &fake.view(), net, &weights, lr, &adam)?;
                adv_d = a;
                cls_real = cr;
            }

            let mut g_updates = Vec::new();
            let out = gen.forward(
                store,
                &batch.gen_x.view(),
                &batch.gen_codes.view(),
                Mode::Train,
                true,
                net,
                &mut g_updates,
            )?;
            let (adv_g, cls_fake, gy, mut grads) =
                gen_objective_grads(store, disc, &out.y.view(), &batch.gen_targets, net, &weights)?;
            gen.backward(store, out.tape.as_ref().expect("tape"), &gy.view(), &mut grads)?;
            opt_g.step(store, &grads, lr, &adam)?;
            apply_buf_updates(store, g_updates, net.bn_momentum);
            gan_losses(adv_d, adv_g, cls_real, cls_fake, &weights)
        }
    };

    if !losses.all_finite() {
        return Err(CoreError::Numeric(format!(
            "non-finite loss at iteration {}",
            *iteration
        )));
    }
    *iteration += 1;
    Ok(losses)
}

fn classifier_losses<F: Scalar>(loss: F) -> LossValues {
    let l = loss.to_f64().unwrap_or(f64::NAN);
    LossValues { adv_d: 0.0, adv_g: 0.0, cls_real: l, cls_fake: 0.0, d_total: l, g_total: 0.0 }
}

fn gan_losses<F: Scalar>(
    adv_d: F,
    adv_g: F,
    cls_real: F,
    cls_fake: F,
    weights: &LossWeights,
) -> LossValues {
    let (adv_d, adv_g) =
        (adv_d.to_f64().unwrap_or(f64::NAN), adv_g.to_f64().unwrap_or(f64::NAN));
    let (cls_real, cls_fake) =
        (cls_real.to_f64().unwrap_or(f64::NAN), cls_fake.to_f64().unwrap_or(f64::NAN));
    LossValues {
        adv_d,
        adv_g,
        cls_real,
        cls_fake,
        d_total: d_objective(adv_d, cls_real, weights),
        g_total: g_objective(adv_g, cls_fake, weights),
    }
}

/// One discriminator update against a constant batch of synthesized
/// images. Returns the adversarial and real-classification losses.
#[allow(clippy::too_many_arguments)]
fn disc_update<F: Scalar>(
    store: &mut ParamStore<F>,
    disc: &crate::nets::cdgan::Discriminator,
    opt_d: &mut AdamState<F>,
    batch: &TrainBatch<F>,
    fake: &ArrayView4<'_, F>,
    net: &NetConfig,
    weights: &LossWeights,
    lr: f64,
    adam: &AdamConfig,
) -> Result<(F, F), CoreError> {
    let mut updates = Vec::new();
    let real = disc.forward(store, &batch.x.view(), Mode::Train, true, net, &mut updates)?;
    let fake_f = disc.forward(store, fake, Mode::Train, true, net, &mut updates)?;
    let (adv_d, g_real_src, g_fake_src) =
        adv_loss_d_grads(&real.out.src_logits.view(), &fake_f.out.src_logits.view())?;
    let (cls_real, mut g_probs) = cls_loss_grads(&real.out.cls_probs.view(), &batch.labels)?;
    let lambda = c::<F>(weights.lambda_cls);
    g_probs.mapv_inplace(|v| v * lambda);
    let mut grads = GradStore::new(store);
    disc.backward(
        store,
        real.tape.as_ref().expect("tape"),
        Some(&g_real_src.view()),
        Some(&g_probs.view()),
        &mut grads,
    )?;
    disc.backward(
        store,
        fake_f.tape.as_ref().expect("tape"),
        Some(&g_fake_src.view()),
        None,
        &mut grads,
    )?;
    opt_d.step(store, &grads, lr, adam)?;
    apply_buf_updates(store, updates, net.bn_momentum);
    Ok((adv_d, cls_real))
}

/// Generator-side losses on a synthesized batch, with the gradient
/// w.r.t. the synthesized images. The returned store also carries
/// discriminator gradients from the chain rule; the caller's generator
/// optimizer ignores them.
fn gen_objective_grads<F: Scalar>(
    store: &ParamStore<F>,
    disc: &crate::nets::cdgan::Discriminator,
    fake: &ArrayView4<'_, F>,
    targets: &[PhaseLabel],
    net: &NetConfig,
    weights: &LossWeights,
) -> Result<(F, F, Array4<F>, GradStore<F>), CoreError> {
    let mut scratch = Vec::new();
    let fwd = disc.forward(store, fake, Mode::Train, true, net, &mut scratch)?;
    let (adv_g, g_src) = adv_loss_g_grads(&fwd.out.src_logits.view(), false)?;
    let (cls_fake, mut g_probs) = cls_loss_grads(&fwd.out.cls_probs.view(), targets)?;
    let lambda = c::<F>(weights.lambda_cls);
    g_probs.mapv_inplace(|v| v * lambda);
    let mut grads = GradStore::new(store);
    let gy = disc.backward(
        store,
        fwd.tape.as_ref().expect("tape"),
        Some(&g_src.view()),
        Some(&g_probs.view()),
        &mut grads,
    )?;
    Ok((adv_g, cls_fake, gy, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;
    use crate::rng::stream_rng;
    use ndarray::ArrayD;
    use rand_distr::{Distribution, Normal};

    fn tiny_net() -> NetConfig {
        NetConfig {
            image_hw: (8, 8),
            base_width: 4,
            enc_stages: 2,
            rep_channels: 8,
            disc_extra_convs: 1,
            res_blocks: 2,
            unet_levels: 2,
            unet_width: 4,
            ..NetConfig::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig { batch_size: 4, iterations: 6, seed: 9, ..TrainConfig::default() }
    }

    fn tiny_dataset(n: usize) -> SliceDataset {
        let normal = Normal::new(0.0f64, 0.3).unwrap();
        let slices = (0..n)
            .map(|i| {
                let label = PhaseLabel::ALL[i % NUM_PHASES];
                let mut rng = stream_rng(77, StreamDomain::VoxelNoise, i as u64, 0);
                let base = (label.index() as f32 - 1.0) * 0.4;
                let pixels = Array2::from_shape_fn((8, 8), |_| {
                    (base + normal.sample(&mut rng) as f32).clamp(-1.0, 1.0)
                });
                LabeledSlice { pixels, label }
            })
            .collect();
        SliceDataset::new(slices).unwrap()
    }

    #[test]
    fn lr_schedule_oracle() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(99_999, &cfg), 1e-4);
        assert!((lr_at(100_000, &cfg) - 1e-5).abs() < 1e-18);
        assert!((lr_at(250_000, &cfg) - 1e-6).abs() < 1e-19);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { d_steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_decay_factor: 0.0, ..TrainConfig::default() }
            .validate()
            .is_err());
        assert!(TrainConfig { lambda_cls: -1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn batches_cover_an_epoch_without_replacement() {
        let n = 10;
        let mut seen = alloc::vec![0usize; n];
        // batch 5, n 10: iterations 0..2 are exactly epoch 0.
        for it in 0..2 {
            for i in batch_indices(3, it, 5, n) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        // The boundary-spanning batch draws from both epoch permutations.
        let spanning = batch_indices(3, 1, 8, n);
        assert_eq!(spanning.len(), 8);
        assert_eq!(batch_indices(3, 1, 8, n), spanning);
    }

    #[test]
    fn enumerate_mode_pairs_every_slice_with_all_phases() {
        let data = tiny_dataset(9);
        let cfg = tiny_train();
        let batch = make_batch::<f32>(&data, 0, &cfg, true).unwrap();
        assert_eq!(batch.x.dim(), (4, 8, 8, 1));
        assert_eq!(batch.gen_x.dim(), (12, 8, 8, 1));
        assert_eq!(batch.gen_codes.dim(), (12, 3));
        for row in 0..4 {
            let targets = &batch.gen_targets[row * 3..row * 3 + 3];
            assert_eq!(targets, &PhaseLabel::ALL[..]);
            assert!(targets.contains(&batch.labels[row]));
            for k in 0..3 {
                assert_eq!(
                    batch.gen_x.index_axis(ndarray::Axis(0), row * 3 + k),
                    batch.x.index_axis(ndarray::Axis(0), row)
                );
            }
        }
    }

    #[test]
    fn sample_mode_draws_one_code_per_slice() {
        let data = tiny_dataset(9);
        let cfg = TrainConfig { code_mode: CodeMode::SampleOne, ..tiny_train() };
        let a = make_batch::<f32>(&data, 5, &cfg, true).unwrap();
        let b = make_batch::<f32>(&data, 5, &cfg, true).unwrap();
        assert_eq!(a.gen_x.dim(), (4, 8, 8, 1));
        assert_eq!(a.gen_targets, b.gen_targets);
        let later = make_batch::<f32>(&data, 6, &cfg, true).unwrap();
        assert_eq!(later.gen_targets.len(), 4);
    }

    #[test]
    fn classifier_step_moves_parameters_deterministically() {
        let data = tiny_dataset(12);
        let cfg = tiny_train();
        let run = |_: ()| {
            let model = Model::<f32>::build(ModelKind::Resnet, tiny_net(), 1).unwrap();
            let mut state = TrainState::new(model, &cfg).unwrap();
            let mut log = Vec::new();
            for it in 0..3 {
                let batch = make_batch::<f32>(&data, it, &cfg, false).unwrap();
                log.push(train_step(&mut state, &batch, &cfg).unwrap());
            }
            (log, state)
        };
        let (log_a, state_a) = run(());
        let (log_b, state_b) = run(());
        assert_eq!(log_a, log_b);
        assert_eq!(state_a.iteration, 3);
        for (id, name, _, v) in state_a.model.store.iter() {
            assert_eq!(v, state_b.model.store.value(id), "{name} diverged");
        }
        // And the parameters actually moved.
        let fresh = Model::<f32>::build(ModelKind::Resnet, tiny_net(), 1).unwrap();
        let id = fresh.store.id("r.stem.w").unwrap();
        assert_ne!(fresh.store.value(id), state_a.model.store.value(id));
        assert!(log_a[0].adv_d == 0.0 && log_a[0].g_total == 0.0);
        assert!(log_a[0].cls_real > 0.0 && log_a[0].d_total == log_a[0].cls_real);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_fixed() {
        let data = tiny_dataset(12);
        let cfg = TrainConfig { lr: 0.0, ..tiny_train() };
        let model = Model::<f32>::build(ModelKind::CdGan, tiny_net(), 2).unwrap();
        let before: Vec<ArrayD<f32>> = model
            .store
            .trainable_ids()
            .iter()
            .map(|&id| model.store.value(id).clone())
            .collect();
        let mut state = TrainState::new(model, &TrainConfig { lr: 1.0, ..cfg.clone() }).unwrap();
        let batch = make_batch::<f32>(&data, 0, &cfg, true).unwrap();
        train_step(&mut state, &batch, &cfg).unwrap();
        for (&id, old) in state.model.store.trainable_ids().iter().zip(&before) {
            assert_eq!(state.model.store.value(id), old);
        }
    }

    #[test]
    fn gan_step_updates_both_networks() {
        let data = tiny_dataset(12);
        let cfg = tiny_train();
        let model = Model::<f32>::build(ModelKind::CdGan, tiny_net(), 3).unwrap();
        let g_id = model.store.id("g.enc.0.w").unwrap();
        let d_id = model.store.id("d.trunk.0.w").unwrap();
        let src_id = model.store.id("d.src.w").unwrap();
        let (g0, d0, s0) = (
            model.store.value(g_id).clone(),
            model.store.value(d_id).clone(),
            model.store.value(src_id).clone(),
        );
        let mut state = TrainState::new(model, &cfg).unwrap();
        let batch = make_batch::<f32>(&data, 0, &cfg, true).unwrap();
        let losses = train_step(&mut state, &batch, &cfg).unwrap();
        assert!(losses.all_finite());
        assert!(losses.adv_d > 0.0 && losses.cls_real > 0.0 && losses.cls_fake > 0.0);
        assert_ne!(state.model.store.value(g_id), &g0);
        assert_ne!(state.model.store.value(d_id), &d0);
        assert_ne!(state.model.store.value(src_id), &s0);
        assert_eq!(state.opt_d.step_count(), 1);
        assert_eq!(state.opt_g.as_ref().unwrap().step_count(), 1);
        assert!(params_all_finite(&state.model.store));
    }

    #[test]
    fn extra_discriminator_steps_are_counted() {
        let data = tiny_dataset(12);
        let cfg = TrainConfig { d_steps: 2, ..tiny_train() };
        let model = Model::<f32>::build(ModelKind::CdGan, tiny_net(), 3).unwrap();
        let mut state = TrainState::new(model, &cfg).unwrap();
        let batch = make_batch::<f32>(&data, 0, &cfg, true).unwrap();
        train_step(&mut state, &batch, &cfg).unwrap();
        assert_eq!(state.opt_d.step_count(), 2);
        assert_eq!(state.opt_g.as_ref().unwrap().step_count(), 1);
    }

    #[test]
    fn classifier_only_translation_baseline_skips_generator_and_src() {
        let data = tiny_dataset(12);
        let cfg = tiny_train();
        let model = Model::<f32>::build(ModelKind::StarganD, tiny_net(), 4).unwrap();
        let g_id = model.store.id("g.pre.0.w").unwrap();
        let src_id = model.store.id("d.src.w").unwrap();
        let cls_id = model.store.id("d.cls.w").unwrap();
        let (g0, s0, c0) = (
            model.store.value(g_id).clone(),
            model.store.value(src_id).clone(),
            model.store.value(cls_id).clone(),
        );
        let mut state = TrainState::new(model, &cfg).unwrap();
        assert!(state.opt_g.is_none());
        let batch = make_batch::<f32>(&data, 0, &cfg, false).unwrap();
        let losses = train_step(&mut state, &batch, &cfg).unwrap();
        assert_eq!(losses.adv_d, 0.0);
        assert_eq!(state.model.store.value(g_id), &g0);
        assert_eq!(state.model.store.value(src_id), &s0);
        assert_ne!(state.model.store.value(cls_id), &c0);
    }

    #[test]
    fn full_loop_translation_baseline_trains_its_generator() {
        let data = tiny_dataset(12);
        let cfg = TrainConfig { stargan_full_loop: true, ..tiny_train() };
        let model = Model::<f32>::build(ModelKind::StarganD, tiny_net(), 4).unwrap();
        let g_id = model.store.id("g.pre.0.w").unwrap();
        let g0 = model.store.value(g_id).clone();
        let mut state = TrainState::new(model, &cfg).unwrap();
        let batch = make_batch::<f32>(&data, 0, &cfg, true).unwrap();
        let losses = train_step(&mut state, &batch, &cfg).unwrap();
        assert!(losses.adv_g != 0.0);
        assert_ne!(state.model.store.value(g_id), &g0);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let data = tiny_dataset(12);
        let cfg = tiny_train();
        let build = |_: ()| {
            let model = Model::<f32>::build(ModelKind::CdGan, tiny_net(), 5).unwrap();
            TrainState::new(model, &cfg).unwrap()
        };
        let step = |state: &mut TrainState<f32>| {
            let batch = make_batch::<f32>(&data, state.iteration, &cfg, true).unwrap();
            train_step(state, &batch, &cfg).unwrap()
        };

        let mut straight = build(());
        let straight_log: Vec<LossValues> = (0..6).map(|_| step(&mut straight)).collect();

        // Run 3 iterations, "checkpoint", rebuild from scratch, restore,
        // and finish: the tail must match bit for bit.
        let mut first = build(());
        for _ in 0..3 {
            step(&mut first);
        }
        let params: Vec<(String, ArrayD<f32>)> = first
            .model
            .store
            .iter()
            .map(|(_, name, _, v)| (String::from(name), v.clone()))
            .collect();
        let d_t = first.opt_d.step_count();
        let d_moments: Vec<_> = first
            .opt_d
            .moments()
            .map(|(id, m, v)| (id, m.clone(), v.clone()))
            .collect();
        let g_t = first.opt_g.as_ref().unwrap().step_count();
        let g_moments: Vec<_> = first
            .opt_g
            .as_ref()
            .unwrap()
            .moments()
            .map(|(id, m, v)| (id, m.clone(), v.clone()))
            .collect();
        let done = first.iteration;
        drop(first);

        let mut resumed = build(());
        for (name, value) in params {
            let id = resumed.model.store.id(&name).unwrap();
            resumed.model.store.set_value(id, value).unwrap();
        }
        resumed.opt_d.restore(d_t, d_moments).unwrap();
        resumed.opt_g.as_mut().unwrap().restore(g_t, g_moments).unwrap();
        resumed.iteration = done;

        let resumed_log: Vec<LossValues> = (0..3).map(|_| step(&mut resumed)).collect();
        assert_eq!(resumed_log, straight_log[3..]);
        for (id, name, _, v) in straight.model.store.iter() {
            assert_eq!(v, resumed.model.store.value(id), "{name} diverged after resume");
        }
    }

    #[test]
    fn rejects_bad_datasets() {
        assert!(SliceDataset::new(Vec::new()).is_err());
        let mixed = alloc::vec![
            LabeledSlice { pixels: Array2::zeros((8, 8)), label: PhaseLabel::NonContrast },
            LabeledSlice { pixels: Array2::zeros((4, 8)), label: PhaseLabel::PortalVenous },
        ];
        assert!(SliceDataset::new(mixed).is_err());
        let bad = alloc::vec![LabeledSlice {
            pixels: Array2::from_elem((8, 8), f32::NAN),
            label: PhaseLabel::NonContrast,
        }];
        assert!(SliceDataset::new(bad).is_err());
    }
}
