//! Held-out evaluation: batched inference plus per-subject aggregation.
//!
//! The report groups slice predictions by subject so that two models
//! evaluated on the same subjects can be compared with a paired t-test,
//! each subject contributing one accuracy observation per model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use ndarray::{Array2, Array4};

use crate::error::CoreError;
use crate::metrics::{accuracy, ConfusionMatrix};
use crate::nets::{predict_phases, Model};
use crate::phase::{PhaseLabel, NUM_PHASES};
use crate::tensor::{Mode, Scalar};

/// One held-out slice with its provenance.
#[derive(Debug, Clone)]
pub struct EvalSlice {
    /// Windowed pixels in `[-1, 1]`, shaped `(h, w)`.
    pub pixels: Array2<f32>,
    pub label: PhaseLabel,
    pub subject_id: String,
    pub slice_index: usize,
}

/// The model's call on one slice.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SlicePrediction {
    pub subject_id: String,
    pub slice_index: usize,
    pub truth: PhaseLabel,
    pub predicted: PhaseLabel,
}

impl SlicePrediction {
    pub fn is_correct(&self) -> bool {
        self.truth == self.predicted
    }
}

/// Aggregated held-out results for one model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    /// Every slice call, sorted by `(subject_id, slice_index, truth)`.
    pub predictions: Vec<SlicePrediction>,
    /// One accuracy per subject over all of that subject's slices,
    /// sorted by subject id. This is the paired-test observation unit.
    pub per_subject: Vec<(String, f64)>,
    pub overall_accuracy: f64,
    pub confusion: ConfusionMatrix,
    /// Subset of `predictions` where the call was wrong.
    pub misclassified: Vec<SlicePrediction>,
    /// Subjects whose slices do not cover all three phases. Non-empty
    /// means the test set is not fully paired; callers should warn.
    pub unpaired_subjects: Vec<String>,
}

impl EvalReport {
    /// Aggregates an already-computed prediction list into a report.
    ///
    /// Predictions are re-sorted into the canonical order, so callers
    /// may pass them in any order.
    pub fn from_predictions(mut predictions: Vec<SlicePrediction>) -> Result<Self, CoreError> {
        if predictions.is_empty() {
            return Err(CoreError::invalid("evaluation produced no predictions"));
        }
        predictions.sort_by(|a, b| {
            (a.subject_id.as_str(), a.slice_index, a.truth.index()).cmp(&(
                b.subject_id.as_str(),
                b.slice_index,
                b.truth.index(),
            ))
        });

        let preds: Vec<PhaseLabel> = predictions.iter().map(|p| p.predicted).collect();
        let truths: Vec<PhaseLabel> = predictions.iter().map(|p| p.truth).collect();
        let overall_accuracy = accuracy(&preds, &truths)?;
        let confusion = ConfusionMatrix::from_predictions(&preds, &truths)?;

        let mut per_subject = Vec::new();
        let mut unpaired_subjects = Vec::new();
        let mut start = 0;
        while start < predictions.len() {
            let subject = predictions[start].subject_id.as_str();
            let mut end = start;
            let mut hits = 0usize;
            let mut phases_seen = [false; NUM_PHASES];
            while end < predictions.len() && predictions[end].subject_id == subject {
                hits += usize::from(predictions[end].is_correct());
                phases_seen[predictions[end].truth.index()] = true;
                end += 1;
            }
            per_subject.push((String::from(subject), hits as f64 / (end - start) as f64));
            if phases_seen.iter().any(|seen| !seen) {
                unpaired_subjects.push(String::from(subject));
            }
            start = end;
        }

        let misclassified: Vec<SlicePrediction> =
            predictions.iter().filter(|p| !p.is_correct()).cloned().collect();

        Ok(EvalReport {
            predictions,
            per_subject,
            overall_accuracy,
            confusion,
            misclassified,
            unpaired_subjects,
        })
    }

    /// Subject ids in report order (sorted).
    pub fn subjects(&self) -> Vec<&str> {
        self.per_subject.iter().map(|(s, _)| s.as_str()).collect()
    }
}

/// Classifies every slice in inference mode and aggregates the report.
///
/// Slices are processed in a canonical order and in chunks of
/// `batch_size`; inference mode uses running normalizer statistics, so
/// the chunking does not affect any prediction.
pub fn evaluate_model<F: Scalar>(
    model: &Model<F>,
    slices: &[EvalSlice],
    batch_size: usize,
) -> Result<EvalReport, CoreError> {
    if batch_size == 0 {
        return Err(CoreError::invalid("evaluation batch_size must be at least 1"));
    }
    if slices.is_empty() {
        return Err(CoreError::invalid("evaluation needs at least one slice"));
    }
    let (h, w) = model.config.image_hw;
    for s in slices {
        if s.pixels.dim() != (h, w) {
            return Err(CoreError::invalid(format!(
                "slice {}/{} is {}x{} but the model expects {}x{}",
                s.subject_id,
                s.slice_index,
                s.pixels.dim().0,
                s.pixels.dim().1,
                h,
                w
            )));
        }
        if s.pixels.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid(format!(
                "slice {}/{} contains non-finite pixels",
                s.subject_id, s.slice_index
            )));
        }
    }

    let mut order: Vec<usize> = (0..slices.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = &slices[a];
        let sb = &slices[b];
        (sa.subject_id.as_str(), sa.slice_index, sa.label.index()).cmp(&(
            sb.subject_id.as_str(),
            sb.slice_index,
            sb.label.index(),
        ))
    });

    let mut predictions = Vec::with_capacity(slices.len());
    for chunk in order.chunks(batch_size) {
        let mut x = Array4::<F>::zeros((chunk.len(), h, w, 1));
        for (bi, &si) in chunk.iter().enumerate() {
            for r in 0..h {
                for c in 0..w {
                    x[[bi, r, c, 0]] = crate::tensor::c(slices[si].pixels[[r, c]] as f64);
                }
            }
        }
        let probs = model.classify(&x.view(), Mode::Infer)?;
        let called = predict_phases(&probs.view());
        for (&si, predicted) in chunk.iter().zip(called) {
            let s = &slices[si];
            predictions.push(SlicePrediction {
                subject_id: s.subject_id.clone(),
                slice_index: s.slice_index,
                truth: s.label,
                predicted,
            });
        }
    }

    EvalReport::from_predictions(predictions)
}

/// Lines up two reports' per-subject accuracies for a paired test.
///
/// Errors unless both reports cover exactly the same subjects.
pub fn pair_subject_accuracies(
    a: &EvalReport,
    b: &EvalReport,
) -> Result<(Vec<f64>, Vec<f64>), CoreError> {
    let sa = a.subjects();
    let sb = b.subjects();
    if sa != sb {
        let only_a: Vec<&str> = sa.iter().filter(|s| !sb.contains(s)).copied().collect();
        let only_b: Vec<&str> = sb.iter().filter(|s| !sa.contains(s)).copied().collect();
        return Err(CoreError::invalid(format!(
            "reports cover different subjects (only in first: [{}]; only in second: [{}])",
            only_a.join(", "),
            only_b.join(", ")
        )));
    }
    Ok((
        a.per_subject.iter().map(|(_, acc)| *acc).collect(),
        b.per_subject.iter().map(|(_, acc)| *acc).collect(),
    ))
}
