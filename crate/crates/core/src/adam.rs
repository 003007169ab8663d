//! Adam optimizer with per-network state.
//!
//! The discriminator and generator each own an [`AdamState`] covering
//! their parameter subset, matching the alternating update scheme. The
//! first and second moments are part of every checkpoint, so a resumed
//! run continues the exact optimizer trajectory.

use alloc::format;
use alloc::vec::Vec;

use ndarray::ArrayD;

use crate::error::CoreError;
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{c, Scalar};

/// Adam hyperparameters. `lr` is the base rate before schedule decay.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(CoreError::config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CoreError::config(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(CoreError::config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First/second moment accumulators for one parameter subset.
pub struct AdamState<F> {
    ids: Vec<ParamId>,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    t: u64,
}

impl<F: Scalar> AdamState<F> {
    /// Fresh zeroed state covering `ids` (typically one network's
    /// trainable parameters).
    pub fn new(store: &ParamStore<F>, ids: Vec<ParamId>) -> Self {
        let m = ids
            .iter()
            .map(|&id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        let v = ids
            .iter()
            .map(|&id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        AdamState { ids, m, v, t: 0 }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Moment tensors in id order, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &ArrayD<F>, &ArrayD<F>)> {
        self.ids
            .iter()
            .copied()
            .zip(self.m.iter().zip(self.v.iter()))
            .map(|(id, (m, v))| (id, m, v))
    }

    /// Restore previously checkpointed state.
    pub fn restore(
        &mut self,
        t: u64,
        moments: impl IntoIterator<Item = (ParamId, ArrayD<F>, ArrayD<F>)>,
    ) -> Result<(), CoreError> {
        self.t = t;
        let mut filled = alloc::vec![false; self.ids.len()];
        for (id, m, v) in moments {
            let pos = self
                .ids
                .iter()
                .position(|&i| i == id)
                .ok_or_else(|| {
                    CoreError::invalid("optimizer moment for a parameter outside this state")
                })?;
            if m.shape() != self.m[pos].shape() || v.shape() != self.v[pos].shape() {
                return Err(CoreError::invalid("optimizer moment shape mismatch"));
            }
            self.m[pos] = m;
            self.v[pos] = v;
            filled[pos] = true;
        }
        if filled.iter().any(|&f| !f) {
            return Err(CoreError::invalid("optimizer state is missing moments"));
        }
        Ok(())
    }

    /// One Adam update at the given effective learning rate. Every
    /// covered parameter must have received a gradient; a silent miss
    /// would mean a disconnected piece of network.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &GradStore<F>,
        lr_now: f64,
        cfg: &AdamConfig,
    ) -> Result<(), CoreError> {
        self.t += 1;
        let b1 = c::<F>(cfg.beta1);
        let b2 = c::<F>(cfg.beta2);
        let one = F::one();
        let bc1 = one - c::<F>(cfg.beta1.powi(self.t as i32));
        let bc2 = one - c::<F>(cfg.beta2.powi(self.t as i32));
        let lr = c::<F>(lr_now);
        let eps = c::<F>(cfg.eps);
        for (pos, &id) in self.ids.iter().enumerate() {
            let g = grads.get(id).ok_or_else(|| {
                CoreError::invalid(format!(
                    "parameter {} received no gradient this step",
                    store.name(id)
                ))
            })?;
            let m = &mut self.m[pos];
            let v = &mut self.v[pos];
            for (mi, &gi) in m.iter_mut().zip(g.iter()) {
                *mi = b1 * *mi + (one - b1) * gi;
            }
            for (vi, &gi) in v.iter_mut().zip(g.iter()) {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            let (m, v) = (&self.m[pos], &self.v[pos]);
            store.update_value(id, |p| {
                for ((pi, &mi), &vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use ndarray::IxDyn;

    fn single_param(v0: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .register("p", ParamKind::Weight, ArrayD::from_elem(IxDyn(&[1]), v0))
            .unwrap();
        (store, id)
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (mut store, id) = single_param(1.25);
        let mut adam = AdamState::new(&store, alloc::vec![id]);
        let cfg = AdamConfig::default();
        for _ in 0..5 {
            let mut grads = GradStore::new(&store);
            grads.add(id, ArrayD::from_elem(IxDyn(&[1]), 7.0));
            adam.step(&mut store, &grads, 0.0, &cfg).unwrap();
        }
        assert_eq!(store.value(id)[[0]], 1.25);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // with bias correction, step 1 moves by ~lr * g/|g| regardless
        // of gradient magnitude (eps aside)
        for &g in &[0.001, 1.0, 250.0] {
            let (mut store, id) = single_param(0.0);
            let mut adam = AdamState::new(&store, alloc::vec![id]);
            let mut grads = GradStore::new(&store);
            grads.add(id, ArrayD::from_elem(IxDyn(&[1]), g));
            adam.step(&mut store, &grads, 1e-2, &AdamConfig::default()).unwrap();
            let p = store.value(id)[[0]];
            assert!((p + 1e-2).abs() < 1e-5, "g={g}: {p}");
        }
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let cfg = AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.9, eps: 1e-8 };
        let (mut store, id) = single_param(1.0);
        let mut adam = AdamState::new(&store, alloc::vec![id]);

        let g1 = 2.0;
        let mut grads = GradStore::new(&store);
        grads.add(id, ArrayD::from_elem(IxDyn(&[1]), g1));
        adam.step(&mut store, &grads, cfg.lr, &cfg).unwrap();
        let m1 = 0.5 * g1;
        let v1 = 0.1 * g1 * g1;
        let p1 = 1.0 - 0.1 * (m1 / 0.5) / ((v1 / 0.1).sqrt() + 1e-8);
        assert!((store.value(id)[[0]] - p1).abs() < 1e-12);

        let g2 = -1.0;
        let mut grads = GradStore::new(&store);
        grads.add(id, ArrayD::from_elem(IxDyn(&[1]), g2));
        adam.step(&mut store, &grads, cfg.lr, &cfg).unwrap();
        let m2 = 0.5 * m1 + 0.5 * g2;
        let v2 = 0.9 * v1 + 0.1 * g2 * g2;
        let p2 = p1 - 0.1 * (m2 / 0.75) / ((v2 / 0.19).sqrt() + 1e-8);
        assert!((store.value(id)[[0]] - p2).abs() < 1e-12);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // minimize (p - 3)^2 from p = 0
        let (mut store, id) = single_param(0.0);
        let mut adam = AdamState::new(&store, alloc::vec![id]);
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        for _ in 0..500 {
            let p = store.value(id)[[0]];
            let mut grads = GradStore::new(&store);
            grads.add(id, ArrayD::from_elem(IxDyn(&[1]), 2.0 * (p - 3.0)));
            adam.step(&mut store, &grads, cfg.lr, &cfg).unwrap();
        }
        let p = store.value(id)[[0]];
        assert!((p - 3.0).abs() < 0.05, "ended at {p}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut store, id) = single_param(0.0);
        let mut adam = AdamState::new(&store, alloc::vec![id]);
        let grads = GradStore::new(&store);
        assert!(adam.step(&mut store, &grads, 1e-3, &AdamConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        assert!(AdamConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { eps: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn restore_round_trip() {
        let (mut store, id) = single_param(0.0);
        let mut adam = AdamState::new(&store, alloc::vec![id]);
        let mut grads = GradStore::new(&store);
        grads.add(id, ArrayD::from_elem(IxDyn(&[1]), 3.0));
        adam.step(&mut store, &grads, 1e-3, &AdamConfig::default()).unwrap();

        let saved: alloc::vec::Vec<_> = adam
            .moments()
            .map(|(id, m, v)| (id, m.clone(), v.clone()))
            .collect();
        let mut fresh = AdamState::new(&store, alloc::vec![id]);
        fresh.restore(adam.step_count(), saved).unwrap();
        assert_eq!(fresh.step_count(), 1);

        // both continue identically
        let mut s2 = ParamStore::<f64>::new();
        let id2 = s2
            .register("p", ParamKind::Weight, store.value(id).clone())
            .unwrap();
        let mut grads = GradStore::new(&store);
        grads.add(id, ArrayD::from_elem(IxDyn(&[1]), -1.0));
        let mut g2 = GradStore::new(&s2);
        g2.add(id2, ArrayD::from_elem(IxDyn(&[1]), -1.0));
        adam.step(&mut store, &grads, 1e-3, &AdamConfig::default()).unwrap();
        fresh.step(&mut s2, &g2, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(store.value(id), s2.value(id2));
    }
}
