//! Named parameter storage shared by all network architectures.
//!
//! Every tensor a network owns — trainable weights and running-statistic
//! buffers alike — lives in one [`ParamStore`] under a stable
//! dotted-path name. Checkpoints serialize the store by name; resuming
//! rebuilds the architecture (which re-registers the same names in the
//! same order) and fills values back in.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use ndarray::{Array1, ArrayD, ArrayView1, ArrayView2, ArrayView4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::CoreError;
use crate::tensor::{c, Scalar};

/// Standard deviation of the Gaussian used for weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Whether an entry receives gradient updates or is a running buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

/// Stable handle to one entry of a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
struct Entry<F> {
    name: String,
    kind: ParamKind,
    value: ArrayD<F>,
}

/// All tensors of one model, addressable by id or by name.
#[derive(Clone)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
    by_name: BTreeMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        value: ArrayD<F>,
    ) -> Result<ParamId, CoreError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(CoreError::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(Entry { name, kind, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    /// Replace a value, keeping the shape fixed.
    pub fn set_value(&mut self, id: ParamId, value: ArrayD<F>) -> Result<(), CoreError> {
        let cur = &mut self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(CoreError::invalid(format!(
                "parameter {}: shape {:?} cannot be replaced by {:?}",
                cur.name,
                cur.value.shape(),
                value.shape()
            )));
        }
        cur.value = value;
        Ok(())
    }

    /// In-place update applied to one value (used by the optimizer).
    pub fn update_value(&mut self, id: ParamId, f: impl FnOnce(&mut ArrayD<F>)) {
        f(&mut self.entries[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, ParamKind, &ArrayD<F>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), e.kind, &e.value))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Weight)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.value.len())
            .sum()
    }

    /// View a 1-D entry.
    pub fn vec1(&self, id: ParamId) -> ArrayView1<'_, F> {
        self.value(id)
            .view()
            .into_dimensionality()
            .expect("parameter is 1-D")
    }

    /// View any entry as a `(rows, cols)` matrix (row-major flatten).
    pub fn mat(&self, id: ParamId, rows: usize, cols: usize) -> ArrayView2<'_, F> {
        self.value(id)
            .view()
            .into_shape_with_order((rows, cols))
            .expect("parameter reshapes to matrix")
    }

    /// View a 4-D entry.
    pub fn arr4(&self, id: ParamId) -> ArrayView4<'_, F> {
        self.value(id)
            .view()
            .into_dimensionality()
            .expect("parameter is 4-D")
    }

    /// Apply an exponential moving average to a buffer:
    /// `buf = momentum * buf + (1 - momentum) * batch`.
    pub fn ema_buffer(&mut self, id: ParamId, batch: &ArrayView1<'_, F>, momentum: f64) {
        debug_assert_eq!(self.kind(id), ParamKind::Buffer);
        let m = c::<F>(momentum);
        let one_minus = F::one() - m;
        let value = &mut self.entries[id.0].value;
        for (r, &b) in value.iter_mut().zip(batch.iter()) {
            *r = *r * m + b * one_minus;
        }
    }
}

/// Batch statistics waiting to be folded into running buffers:
/// `(mean buffer id, variance buffer id, batch mean, batch variance)`.
pub type BufUpdates<F> = Vec<(ParamId, ParamId, Array1<F>, Array1<F>)>;

/// Gradient accumulator aligned with a [`ParamStore`].
pub struct GradStore<F> {
    slots: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        GradStore { slots: (0..store.len()).map(|_| None).collect() }
    }

    /// Add a contribution; multiple paths hitting the same parameter
    /// accumulate.
    pub fn add(&mut self, id: ParamId, grad: ArrayD<F>) {
        match &mut self.slots[id.index()] {
            Some(acc) => *acc += &grad,
            slot @ None => *slot = Some(grad),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<F>> {
        self.slots[id.index()].as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(|s| s.is_none())
    }
}

/// Draw parameter initializations in registration order from one
/// stream, so a rebuilt architecture initializes identically.
pub struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Initializer {
            rng,
            normal: Normal::new(0.0, INIT_STD).expect("fixed init spread"),
        }
    }

    /// Gaussian(0, 0.02) tensor of the given shape.
    pub fn gaussian<F: Scalar>(&mut self, shape: &[usize]) -> ArrayD<F> {
        let n: usize = shape.iter().product();
        let draws: Vec<F> = (0..n)
            .map(|_| c::<F>(self.normal.sample(&mut self.rng)))
            .collect();
        ArrayD::from_shape_vec(ndarray::IxDyn(shape), draws).expect("init shape")
    }
}
