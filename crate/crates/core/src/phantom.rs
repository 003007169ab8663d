//! Procedural abdominal CT phantoms.
//!
//! Each phantom volume composites ellipses for a handful of abdominal
//! organs, paints every organ with a phase-dependent HU value from an
//! enhancement table, then adds Gaussian HU noise. Geometry is keyed by
//! `(seed, subject)` only, so the three phase volumes of one subject
//! share anatomy exactly and ROI statistics across phases isolate the
//! enhancement deltas.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use ndarray::Array3;
#[allow(unused_imports)] // inherent f64 methods take over when std is on
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::CoreError;
use crate::phase::{PhaseLabel, NUM_PHASES};
use crate::rng::{stream_rng, StreamDomain};
use crate::volume::{HUVolume, HU_WINDOW_MAX, HU_WINDOW_MIN};

/// Organs painted into the phantom, in paint order (later entries
/// overwrite earlier ones where they overlap).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Organ {
    SoftTissue,
    Liver,
    Spleen,
    KidneyCortex,
    UrinarySystem,
    Spine,
    Aorta,
}

impl Organ {
    pub const ALL: [Organ; 7] = [
        Organ::SoftTissue,
        Organ::Liver,
        Organ::Spleen,
        Organ::KidneyCortex,
        Organ::UrinarySystem,
        Organ::Spine,
        Organ::Aorta,
    ];

    pub fn index(self) -> usize {
        match self {
            Organ::SoftTissue => 0,
            Organ::Liver => 1,
            Organ::Spleen => 2,
            Organ::KidneyCortex => 3,
            Organ::UrinarySystem => 4,
            Organ::Spine => 5,
            Organ::Aorta => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Organ::SoftTissue => "soft_tissue",
            Organ::Liver => "liver",
            Organ::Spleen => "spleen",
            Organ::KidneyCortex => "kidney_cortex",
            Organ::UrinarySystem => "urinary_system",
            Organ::Spine => "spine",
            Organ::Aorta => "aorta",
        }
    }

    /// Voxel id in an [`OrganMap`]: 0 is background air.
    pub fn map_id(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn from_map_id(id: u8) -> Option<Organ> {
        (id >= 1).then(|| Organ::ALL.get(id as usize - 1).copied()).flatten()
    }
}

/// Per-organ baseline HU plus one enhancement delta per phase.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OrganEnhancement {
    pub baseline_hu: f64,
    /// Indexed by phase code; the non-contrast entry is conventionally 0.
    pub delta_hu: [f64; NUM_PHASES],
}

/// Baseline and per-phase enhancement for every painted organ.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnhancementTable {
    /// Indexed by [`Organ::index`].
    pub organs: [OrganEnhancement; 7],
}

impl Default for EnhancementTable {
    fn default() -> Self {
        // Typical abdominal values: the aorta peaks in portal venous,
        // the collecting system opacifies strongly in the delayed phase,
        // bone does not enhance.
        let e = |baseline_hu: f64, pv: f64, delayed: f64| OrganEnhancement {
            baseline_hu,
            delta_hu: [0.0, pv, delayed],
        };
        EnhancementTable {
            organs: [
                e(40.0, 10.0, 5.0),   // soft tissue
                e(55.0, 60.0, 20.0),  // liver
                e(50.0, 70.0, 20.0),  // spleen
                e(40.0, 90.0, 40.0),  // kidney cortex
                e(10.0, 30.0, 250.0), // urinary collecting system
                e(700.0, 0.0, 0.0),   // spine
                e(45.0, 120.0, 30.0), // aorta
            ],
        }
    }
}

impl EnhancementTable {
    pub fn get(&self, organ: Organ) -> &OrganEnhancement {
        &self.organs[organ.index()]
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        for organ in Organ::ALL {
            let e = self.get(organ);
            for (phase, &d) in PhaseLabel::ALL.iter().zip(&e.delta_hu) {
                let v = e.baseline_hu + d;
                if !v.is_finite()
                    || v < f64::from(HU_WINDOW_MIN)
                    || v > f64::from(HU_WINDOW_MAX)
                {
                    return Err(CoreError::config(format!(
                        "enhancement table: {} at {} is {v} HU, outside [{}, {}]",
                        organ.name(),
                        phase.name(),
                        HU_WINDOW_MIN,
                        HU_WINDOW_MAX
                    )));
                }
            }
        }
        Ok(())
    }

    /// HU painted for `organ` in `phase`, with deltas damped by the
    /// overlap factor (1 = fully overlapping enhancement, i.e. no
    /// phase-discriminative signal).
    pub fn paint_hu(&self, organ: Organ, phase: PhaseLabel, overlap: f64) -> f64 {
        let e = self.get(organ);
        e.baseline_hu + e.delta_hu[phase.index()] * (1.0 - overlap)
    }
}

/// Full description of a phantom dataset; two runs with equal specs
/// produce bit-identical volumes.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PhantomSpec {
    pub seed: u64,
    /// Axial grid (rows, cols).
    pub image_hw: (usize, usize),
    pub slices_per_volume: usize,
    /// (row mm, col mm, slice gap mm).
    pub spacing_mm: [f64; 3],
    pub table: EnhancementTable,
    /// Standard deviation of additive Gaussian HU noise.
    pub noise_sigma_hu: f64,
    /// In [0, 1]: 0 keeps the full per-phase deltas, 1 removes them so
    /// phases are distinguishable only up to noise.
    pub enhancement_overlap: f64,
    /// In [0, 1]: probability that a training slice's manifest label is
    /// replaced by one of the other two phases.
    pub label_noise_rate: f64,
    /// Per-subject uniform offset of each organ center, in normalized
    /// image coordinates.
    pub center_jitter: f64,
    /// Per-subject relative spread of each organ's radii.
    pub radius_jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            image_hw: (64, 64),
            slices_per_volume: 20,
            spacing_mm: [1.0, 1.0, 5.0],
            table: EnhancementTable::default(),
            noise_sigma_hu: 15.0,
            enhancement_overlap: 0.0,
            label_noise_rate: 0.0,
            center_jitter: 0.04,
            radius_jitter: 0.10,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), CoreError> {
        let (h, w) = self.image_hw;
        if h < 8 || w < 8 {
            return Err(CoreError::config(format!(
                "image_hw ({h}, {w}) is too small; need at least 8x8"
            )));
        }
        if self.slices_per_volume == 0 {
            return Err(CoreError::config("slices_per_volume must be positive"));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(CoreError::config(format!(
                "spacing_mm must be strictly positive, got {:?}",
                self.spacing_mm
            )));
        }
        if !self.noise_sigma_hu.is_finite() || self.noise_sigma_hu < 0.0 {
            return Err(CoreError::config(format!(
                "noise_sigma_hu must be finite and non-negative, got {}",
                self.noise_sigma_hu
            )));
        }
        if !(0.0..=1.0).contains(&self.enhancement_overlap) {
            return Err(CoreError::config(format!(
                "enhancement_overlap must lie in [0, 1], got {}",
                self.enhancement_overlap
            )));
        }
        if !(0.0..=1.0).contains(&self.label_noise_rate) {
            return Err(CoreError::config(format!(
                "label_noise_rate must lie in [0, 1], got {}",
                self.label_noise_rate
            )));
        }
        if !(0.0..=0.2).contains(&self.center_jitter) {
            return Err(CoreError::config(format!(
                "center_jitter must lie in [0, 0.2], got {}",
                self.center_jitter
            )));
        }
        if !(0.0..=0.5).contains(&self.radius_jitter) {
            return Err(CoreError::config(format!(
                "radius_jitter must lie in [0, 0.5], got {}",
                self.radius_jitter
            )));
        }
        self.table.validate()
    }
}

/// Voxel-wise organ ids for one volume: 0 = air, otherwise
/// [`Organ::map_id`] of the organ whose paint the voxel received.
/// Regions are exclusive; the collecting system carves its voxels out
/// of the surrounding kidney cortex.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrganMap {
    pub ids: Array3<u8>,
}

impl OrganMap {
    /// Number of voxels painted with `organ`.
    pub fn count(&self, organ: Organ) -> usize {
        let id = organ.map_id();
        self.ids.iter().filter(|&&v| v == id).count()
    }

    /// Mean HU of `volume` over the voxels painted with `organ`;
    /// `None` when the organ is absent.
    pub fn mean_hu(&self, volume: &HUVolume, organ: Organ) -> Option<f64> {
        let id = organ.map_id();
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for (&vid, &hu) in self.ids.iter().zip(volume.voxels.iter()) {
            if vid == id {
                sum += f64::from(hu);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Run-length encode the flattened (slice, row, col) id raster.
    pub fn to_runs(&self) -> Vec<(u8, u64)> {
        let mut runs: Vec<(u8, u64)> = Vec::new();
        for &id in self.ids.iter() {
            match runs.last_mut() {
                Some((last, len)) if *last == id => *len += 1,
                _ => runs.push((id, 1)),
            }
        }
        runs
    }

    /// Rebuild a map from runs produced by [`OrganMap::to_runs`].
    pub fn from_runs(
        dims: (usize, usize, usize),
        runs: &[(u8, u64)],
    ) -> Result<OrganMap, CoreError> {
        let total: u64 = runs.iter().map(|&(_, len)| len).sum();
        let expect = (dims.0 * dims.1 * dims.2) as u64;
        if total != expect {
            return Err(CoreError::invalid(format!(
                "organ map runs cover {total} voxels, grid has {expect}"
            )));
        }
        let mut flat = Vec::with_capacity(expect as usize);
        for &(id, len) in runs {
            if id > 7 {
                return Err(CoreError::invalid(format!("unknown organ id {id}")));
            }
            flat.extend(core::iter::repeat_n(id, len as usize));
        }
        let ids = Array3::from_shape_vec(dims, flat)
            .map_err(|e| CoreError::invalid(format!("organ map shape: {e}")))?;
        Ok(OrganMap { ids })
    }
}

/// An axis-aligned ellipse in normalized [-1, 1]^2 slice coordinates.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    fn scaled(&self, s: f64) -> Ellipse {
        Ellipse { rx: self.rx * s, ry: self.ry * s, ..*self }
    }
}

/// Fraction of the volume's slice extent an organ occupies.
#[derive(Debug, Clone, Copy)]
struct ZWindow {
    lo: f64,
    hi: f64,
}

impl ZWindow {
    const FULL: ZWindow = ZWindow { lo: 0.0, hi: 1.0 };

    fn contains(&self, zf: f64) -> bool {
        zf >= self.lo && zf < self.hi
    }

    /// Radial taper within the window: organs bulge at their center
    /// slices and narrow toward their poles, never below 0.35 of the
    /// full cross-section.
    fn taper(&self, zf: f64) -> f64 {
        const MIN_SCALE: f64 = 0.35;
        let span = self.hi - self.lo;
        if span <= 0.0 {
            return MIN_SCALE;
        }
        let u = 2.0 * (zf - self.lo) / span - 1.0;
        MIN_SCALE + (1.0 - MIN_SCALE) * (1.0 - u * u).max(0.0).sqrt()
    }
}

/// One subject's jittered anatomy, shared by all three phase volumes.
struct SubjectAnatomy {
    body: Ellipse,
    spine: Ellipse,
    aorta: Ellipse,
    liver: Ellipse,
    spleen: Ellipse,
    kidneys: [Ellipse; 2],
}

const LIVER_Z: ZWindow = ZWindow { lo: 0.0, hi: 0.60 };
const SPLEEN_Z: ZWindow = ZWindow { lo: 0.05, hi: 0.55 };
const KIDNEY_Z: ZWindow = ZWindow { lo: 0.40, hi: 0.95 };
const URINARY_Z: ZWindow = ZWindow { lo: 0.45, hi: 0.90 };
/// Collecting-system cross-section relative to its kidney.
const URINARY_SCALE: f64 = 0.45;

impl SubjectAnatomy {
    fn sample(spec: &PhantomSpec, subject: u64) -> SubjectAnatomy {
        let mut rng = stream_rng(spec.seed, StreamDomain::Geometry, subject, 0);
        let mut jitter = |base: Ellipse| -> Ellipse {
            let cj = spec.center_jitter;
            let rj = spec.radius_jitter;
            // Draw all four values even when jitter is zero so organ
            // shapes stay comparable across jitter settings.
            let dx = rng.random_range(-1.0..=1.0) * cj;
            let dy = rng.random_range(-1.0..=1.0) * cj;
            let sx = 1.0 + rng.random_range(-1.0..=1.0) * rj;
            let sy = 1.0 + rng.random_range(-1.0..=1.0) * rj;
            Ellipse {
                cx: base.cx + dx,
                cy: base.cy + dy,
                rx: base.rx * sx,
                ry: base.ry * sy,
            }
        };
        let e = |cx, cy, rx, ry| Ellipse { cx, cy, rx, ry };
        SubjectAnatomy {
            body: jitter(e(0.00, 0.05, 0.82, 0.62)),
            spine: jitter(e(0.00, 0.42, 0.13, 0.13)),
            aorta: jitter(e(0.07, 0.20, 0.065, 0.065)),
            liver: jitter(e(-0.33, -0.08, 0.38, 0.34)),
            spleen: jitter(e(0.43, -0.06, 0.17, 0.14)),
            kidneys: [jitter(e(-0.30, 0.34, 0.135, 0.105)), jitter(e(0.30, 0.34, 0.135, 0.105))],
        }
    }

    /// Organ whose paint pixel (x, y) receives on the slice at
    /// normalized depth `zf`, or `None` for air. Priority is the
    /// reverse of paint order.
    fn organ_at(&self, x: f64, y: f64, zf: f64) -> Option<Organ> {
        if !self.body.contains(x, y) {
            return None;
        }
        if self.aorta.contains(x, y) {
            return Some(Organ::Aorta);
        }
        if self.spine.contains(x, y) {
            return Some(Organ::Spine);
        }
        for kidney in &self.kidneys {
            if URINARY_Z.contains(zf)
                && kidney.scaled(URINARY_SCALE * URINARY_Z.taper(zf)).contains(x, y)
            {
                return Some(Organ::UrinarySystem);
            }
            if KIDNEY_Z.contains(zf) && kidney.scaled(KIDNEY_Z.taper(zf)).contains(x, y) {
                return Some(Organ::KidneyCortex);
            }
        }
        if SPLEEN_Z.contains(zf) && self.spleen.scaled(SPLEEN_Z.taper(zf)).contains(x, y) {
            return Some(Organ::Spleen);
        }
        if LIVER_Z.contains(zf) && self.liver.scaled(LIVER_Z.taper(zf)).contains(x, y) {
            return Some(Organ::Liver);
        }
        let _ = ZWindow::FULL;
        Some(Organ::SoftTissue)
    }
}

/// Canonical subject id for a subject index.
pub fn subject_id(subject: usize) -> String {
    format!("s{subject:04}")
}

/// Generate one phase volume of one subject, with its organ map.
///
/// Geometry depends only on `(spec.seed, subject)`; the phase controls
/// paint values and the noise stream, so all phases of a subject are
/// voxel-aligned.
pub fn generate_phantom_volume(
    spec: &PhantomSpec,
    subject: usize,
    phase: PhaseLabel,
) -> Result<(HUVolume, OrganMap), CoreError> {
    spec.validate()?;
    let (h, w) = spec.image_hw;
    let s = spec.slices_per_volume;
    let anatomy = SubjectAnatomy::sample(spec, subject as u64);

    // Paint values per organ for this phase, rounded once.
    let mut paint = [0i16; 7];
    for organ in Organ::ALL {
        let hu = spec.table.paint_hu(organ, phase, spec.enhancement_overlap);
        paint[organ.index()] = hu.round() as i16;
    }

    let mut ids = Array3::<u8>::zeros((s, h, w));
    let mut voxels = Array3::<i16>::from_elem((s, h, w), HU_WINDOW_MIN);
    for z in 0..s {
        let zf = (z as f64 + 0.5) / s as f64;
        for r in 0..h {
            let y = (r as f64 + 0.5) / h as f64 * 2.0 - 1.0;
            for c in 0..w {
                let x = (c as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                if let Some(organ) = anatomy.organ_at(x, y, zf) {
                    ids[[z, r, c]] = organ.map_id();
                    voxels[[z, r, c]] = paint[organ.index()];
                }
            }
        }
    }

    if spec.noise_sigma_hu > 0.0 {
        let mut rng =
            stream_rng(spec.seed, StreamDomain::VoxelNoise, subject as u64, phase.index() as u64);
        let normal = Normal::new(0.0f64, spec.noise_sigma_hu)
            .map_err(|e| CoreError::config(format!("noise sigma: {e}")))?;
        for v in voxels.iter_mut() {
            let noisy = f64::from(*v) + normal.sample(&mut rng);
            *v = noisy
                .round()
                .clamp(f64::from(HU_WINDOW_MIN), f64::from(HU_WINDOW_MAX))
                as i16;
        }
    }

    let volume = HUVolume::new(voxels, spec.spacing_mm, subject_id(subject), Some(phase))?;
    Ok((volume, OrganMap { ids }))
}

/// Manifest label for a training slice after optional corruption.
///
/// With probability `rate` the true phase is replaced by one of the
/// other two, chosen uniformly. The decision is keyed by
/// `(seed, subject, slice)` so manifests are reproducible.
pub fn corrupt_label(
    seed: u64,
    subject: usize,
    slice_index: usize,
    truth: PhaseLabel,
    rate: f64,
) -> Result<PhaseLabel, CoreError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(CoreError::config(format!(
            "label_noise_rate must lie in [0, 1], got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(truth);
    }
    let mut rng =
        stream_rng(seed, StreamDomain::LabelNoise, subject as u64, slice_index as u64);
    if rng.random_range(0.0..1.0) >= rate {
        return Ok(truth);
    }
    let others: Vec<PhaseLabel> =
        PhaseLabel::ALL.iter().copied().filter(|&p| p != truth).collect();
    Ok(others[rng.random_range(0..others.len())])
}

/// How a generated dataset is carved into train and test material.
///
/// From a pool of `3 * subjects_per_phase` subjects, the first
/// `round(pool * train_fraction)` become unpaired training subjects
/// (one volume each, phase = subject index mod 3); the rest are test
/// subjects generating all three phase volumes each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPlan {
    pub train: Vec<(usize, PhaseLabel)>,
    pub test_subjects: Vec<usize>,
}

impl DatasetPlan {
    pub fn split(subjects_per_phase: usize, train_fraction: f64) -> Result<Self, CoreError> {
        if subjects_per_phase == 0 {
            return Err(CoreError::config("subjects_per_phase must be positive"));
        }
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(CoreError::config(format!(
                "train_fraction must lie strictly inside (0, 1), got {train_fraction}"
            )));
        }
        let pool = 3 * subjects_per_phase;
        let n_train = (pool as f64 * train_fraction).round() as usize;
        if n_train == 0 || n_train >= pool {
            return Err(CoreError::config(format!(
                "train_fraction {train_fraction} leaves an empty split for {pool} subjects"
            )));
        }
        let train = (0..n_train)
            .map(|i| (i, PhaseLabel::from_index(i % 3).expect("index mod 3")))
            .collect();
        Ok(DatasetPlan { train, test_subjects: (n_train..pool).collect() })
    }

    /// Total volumes generated: one per training subject, three per
    /// test subject.
    pub fn volume_count(&self) -> usize {
        self.train.len() + 3 * self.test_subjects.len()
    }
}
