//! HU volumes, intensity windowing and axial slice extraction.
//!
//! Volumes hold raw 16-bit Hounsfield units. Slices are windowed to
//! [-1000, 1000] HU and linearly scaled to [-1, 1] before any network
//! sees them.

use alloc::string::String;
use alloc::vec::Vec;

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::CoreError;
use crate::phase::PhaseLabel;

/// Lower edge of the HU window.
pub const HU_WINDOW_MIN: i16 = -1000;
/// Upper edge of the HU window.
pub const HU_WINDOW_MAX: i16 = 1000;

/// A 3-D grid of signed 16-bit HU values, axes (slice, row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct HUVolume {
    pub voxels: Array3<i16>,
    /// (row mm, col mm, slice gap mm); all strictly positive.
    pub spacing_mm: [f64; 3],
    pub subject_id: String,
    pub phase: Option<PhaseLabel>,
}

impl HUVolume {
    pub fn new(
        voxels: Array3<i16>,
        spacing_mm: [f64; 3],
        subject_id: impl Into<String>,
        phase: Option<PhaseLabel>,
    ) -> Result<Self, CoreError> {
        if voxels.is_empty() {
            return Err(CoreError::invalid("volume grid is empty"));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(CoreError::invalid(alloc::format!(
                "spacing_mm must be strictly positive, got {spacing_mm:?}"
            )));
        }
        Ok(HUVolume {
            voxels,
            spacing_mm,
            subject_id: subject_id.into(),
            phase,
        })
    }

    pub fn num_slices(&self) -> usize {
        self.voxels.shape()[0]
    }
}

/// A single preprocessed axial slice with all pixels in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub pixels: Array2<f32>,
    pub phase: Option<PhaseLabel>,
    pub subject_id: String,
    pub slice_index: usize,
}

impl SliceImage {
    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

/// Which slices of a volume to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceRange {
    All,
    /// Inclusive interval of slice indices.
    Inclusive(usize, usize),
}

/// Clamp HU values to the [-1000, 1000] window and scale linearly to [-1, 1].
///
/// Out-of-window values saturate at the window edges rather than being
/// dropped, so slice geometry is preserved.
pub fn window_and_scale(hu: &ArrayView2<'_, i16>) -> Result<Array2<f32>, CoreError> {
    if hu.is_empty() {
        return Err(CoreError::invalid("window_and_scale: empty grid"));
    }
    Ok(hu.mapv(|v| {
        let clamped = v.clamp(HU_WINDOW_MIN, HU_WINDOW_MAX);
        f32::from(clamped) / 1000.0
    }))
}

/// Extract preprocessed axial slices from a volume, ascending by index.
pub fn extract_axial_slices(
    volume: &HUVolume,
    range: SliceRange,
) -> Result<Vec<SliceImage>, CoreError> {
    let n = volume.num_slices();
    let (lo, hi) = match range {
        SliceRange::All => (0, n - 1),
        SliceRange::Inclusive(lo, hi) => (lo, hi),
    };
    if lo > hi || hi >= n {
        return Err(CoreError::Range(alloc::format!(
            "slice range [{lo}, {hi}] outside volume extent 0..{n}"
        )));
    }
    let mut out = Vec::with_capacity(hi - lo + 1);
    for idx in lo..=hi {
        let plane = volume.voxels.index_axis(ndarray::Axis(0), idx);
        let pixels = window_and_scale(&plane)?;
        out.push(SliceImage {
            pixels,
            phase: volume.phase,
            subject_id: volume.subject_id.clone(),
            slice_index: idx,
        });
    }
    Ok(out)
}

/// Train/test designation of a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Test,
}

/// One labeled slice source: a volume file plus a slice index.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ManifestEntry {
    pub path: String,
    pub subject_id: String,
    pub slice_index: usize,
    pub phase: PhaseLabel,
}

/// A list of labeled slice sources for one split.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, split: Split) -> Result<Self, CoreError> {
        let mut seen: Vec<(&str, usize)> = entries
            .iter()
            .map(|e| (e.path.as_str(), e.slice_index))
            .collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::invalid(
                "manifest contains duplicate (path, slice_index) entries",
            ));
        }
        Ok(DatasetManifest { entries, split })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Sorted unique subject ids.
    pub fn subjects(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.entries.iter().map(|e| e.subject_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use ndarray::array;

    #[test]
    fn window_endpoints_and_linearity() {
        let hu = array![[-1000i16, 0, 2500, 500], [-3000, 1000, -500, 250]];
        let scaled = window_and_scale(&hu.view()).unwrap();
        assert_eq!(scaled[[0, 0]], -1.0);
        assert_eq!(scaled[[0, 1]], 0.0);
        assert_eq!(scaled[[0, 2]], 1.0); // clamped at the upper bound
        assert_eq!(scaled[[0, 3]], 0.5);
        assert_eq!(scaled[[1, 0]], -1.0); // clamped at the lower bound
        assert_eq!(scaled[[1, 1]], 1.0);
        assert_eq!(scaled[[1, 2]], -0.5);
        assert_eq!(scaled[[1, 3]], 0.25);
        assert_eq!(scaled.dim(), hu.dim());
    }

    #[test]
    fn window_rejects_empty() {
        let hu = Array2::<i16>::zeros((0, 0));
        assert!(window_and_scale(&hu.view()).is_err());
    }

    fn constant_volume(n_slices: usize, hu: i16) -> HUVolume {
        HUVolume::new(
            Array3::from_elem((n_slices, 4, 4), hu),
            [0.8, 0.8, 2.0],
            "s0",
            Some(PhaseLabel::Delayed),
        )
        .unwrap()
    }

    #[test]
    fn extract_all_slices_in_order() {
        let vol = constant_volume(80, 0);
        let slices = extract_axial_slices(&vol, SliceRange::All).unwrap();
        assert_eq!(slices.len(), 80);
        for (i, s) in slices.iter().enumerate() {
            assert_eq!(s.slice_index, i);
            assert_eq!(s.phase, Some(PhaseLabel::Delayed));
            assert_eq!(s.subject_id, "s0");
            assert!(s.pixels.iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn extract_subrange() {
        let vol = constant_volume(40, 100);
        let slices = extract_axial_slices(&vol, SliceRange::Inclusive(10, 19)).unwrap();
        assert_eq!(slices.len(), 10);
        assert_eq!(slices.first().unwrap().slice_index, 10);
        assert_eq!(slices.last().unwrap().slice_index, 19);
        assert!(slices[0].pixels.iter().all(|&p| p == 0.1));
    }

    #[test]
    fn extract_out_of_bounds_is_range_error() {
        let vol = constant_volume(10, 0);
        let err = extract_axial_slices(&vol, SliceRange::Inclusive(5, 10)).unwrap_err();
        assert!(matches!(err, CoreError::Range(_)));
    }

    #[test]
    fn volume_validation() {
        assert!(HUVolume::new(Array3::zeros((0, 0, 0)), [1.0; 3], "s", None).is_err());
        assert!(HUVolume::new(Array3::zeros((1, 2, 2)), [0.0, 1.0, 1.0], "s", None).is_err());
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let e = ManifestEntry {
            path: "v.json".into(),
            subject_id: "s0".into(),
            slice_index: 3,
            phase: PhaseLabel::NonContrast,
        };
        assert!(DatasetManifest::new(vec![e.clone(), e], Split::Train).is_err());
    }

    #[test]
    fn extraction_preserves_values_exactly() {
        // no resampling: pixel (r, c) of slice k equals scaled voxel (k, r, c)
        let mut vol = constant_volume(3, 0);
        vol.voxels[[1, 2, 3]] = 750;
        vol.voxels[[2, 0, 0]] = -250;
        let slices = extract_axial_slices(&vol, SliceRange::All).unwrap();
        assert_eq!(slices[1].pixels[[2, 3]], 0.75);
        assert_eq!(slices[2].pixels[[0, 0]], -0.25);
    }
}
