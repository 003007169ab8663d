//! Contrast-phase labels and one-hot phase codes.
//!
//! The integer codes 0..2 are stable across manifests, checkpoints and
//! confusion-matrix axes; everything downstream relies on that ordering.

use alloc::vec::Vec;

use crate::error::CoreError;

/// Number of contrast phases handled by the whole pipeline.
pub const NUM_PHASES: usize = 3;

/// Acquisition timing class of a contrast-enhanced CT scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PhaseLabel {
    /// No contrast agent.
    NonContrast = 0,
    /// ~70-80 s after bolus injection; aorta, liver and spleen bright.
    PortalVenous = 1,
    /// ~10 min after injection; contrast pooled in the urinary system.
    Delayed = 2,
}

impl PhaseLabel {
    /// All phases in index order.
    pub const ALL: [PhaseLabel; NUM_PHASES] = [
        PhaseLabel::NonContrast,
        PhaseLabel::PortalVenous,
        PhaseLabel::Delayed,
    ];

    /// Stable integer code in 0..3.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Result<Self, CoreError> {
        match idx {
            0 => Ok(PhaseLabel::NonContrast),
            1 => Ok(PhaseLabel::PortalVenous),
            2 => Ok(PhaseLabel::Delayed),
            _ => Err(CoreError::invalid(alloc::format!(
                "phase index {idx} out of range 0..3"
            ))),
        }
    }

    /// Canonical lowercase name used in file headers and manifests.
    pub fn name(self) -> &'static str {
        match self {
            PhaseLabel::NonContrast => "non_contrast",
            PhaseLabel::PortalVenous => "portal_venous",
            PhaseLabel::Delayed => "delayed",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, CoreError> {
        match name {
            "non_contrast" => Ok(PhaseLabel::NonContrast),
            "portal_venous" => Ok(PhaseLabel::PortalVenous),
            "delayed" => Ok(PhaseLabel::Delayed),
            other => Err(CoreError::invalid(alloc::format!(
                "unknown phase name {other:?}"
            ))),
        }
    }

    /// One-hot code with a 1 at this phase's index.
    pub fn code(self) -> PhaseCode {
        PhaseCode::new(self)
    }
}

/// One-hot length-3 vector selecting a target contrast phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseCode {
    onehot: [f32; NUM_PHASES],
    label: PhaseLabel,
}

impl PhaseCode {
    pub fn new(label: PhaseLabel) -> Self {
        let mut onehot = [0.0; NUM_PHASES];
        onehot[label.index()] = 1.0;
        PhaseCode { onehot, label }
    }

    pub fn label(&self) -> PhaseLabel {
        self.label
    }

    pub fn onehot(&self) -> &[f32; NUM_PHASES] {
        &self.onehot
    }
}

/// Lowest-index argmax over a length-3 probability row; ties break to
/// the smaller label index so predictions are deterministic.
pub fn argmax_phase(probs: &[f32]) -> PhaseLabel {
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate().take(NUM_PHASES).skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    PhaseLabel::from_index(best).expect("index < 3")
}

/// Stack one-hot codes for a batch of labels into a row-per-item matrix.
pub fn onehot_batch(labels: &[PhaseLabel]) -> Vec<[f32; NUM_PHASES]> {
    labels.iter().map(|l| *l.code().onehot()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_members_with_stable_codes() {
        assert_eq!(PhaseLabel::ALL.len(), 3);
        assert_eq!(PhaseLabel::NonContrast.index(), 0);
        assert_eq!(PhaseLabel::PortalVenous.index(), 1);
        assert_eq!(PhaseLabel::Delayed.index(), 2);
        for p in PhaseLabel::ALL {
            assert_eq!(PhaseLabel::from_index(p.index()).unwrap(), p);
            assert_eq!(PhaseLabel::from_name(p.name()).unwrap(), p);
        }
    }

    #[test]
    fn onehot_invariants() {
        for p in PhaseLabel::ALL {
            let c = p.code();
            let sum: f32 = c.onehot().iter().sum();
            assert_eq!(sum, 1.0);
            assert_eq!(c.onehot()[p.index()], 1.0);
            assert!(c.onehot().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn argmax_breaks_ties_to_lowest_index() {
        assert_eq!(argmax_phase(&[0.1, 0.7, 0.2]), PhaseLabel::PortalVenous);
        assert_eq!(argmax_phase(&[0.4, 0.4, 0.2]), PhaseLabel::NonContrast);
        let third = 1.0f32 / 3.0;
        assert_eq!(argmax_phase(&[third, third, third]), PhaseLabel::NonContrast);
    }

    #[test]
    fn unknown_names_rejected() {
        assert!(PhaseLabel::from_name("arterial").is_err());
        assert!(PhaseLabel::from_index(3).is_err());
    }
}
