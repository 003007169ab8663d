//! Dataset generation and loading: turns phantom specs into volume
//! files plus train/test manifests, and manifests back into in-memory
//! slice sets for training and evaluation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use cdgan_core::evaluate::EvalSlice;
use cdgan_core::phantom::{
    corrupt_label, generate_phantom_volume, subject_id, DatasetPlan, PhantomSpec,
};
use cdgan_core::train::{LabeledSlice, SliceDataset};
use cdgan_core::volume::{
    extract_axial_slices, DatasetManifest, HUVolume, ManifestEntry, SliceRange, Split,
};
use cdgan_core::PhaseLabel;

use crate::error::{CliError, Result};
use crate::formats;

/// File names the generator writes into its output directory.
pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const TEST_MANIFEST: &str = "test.jsonl";

fn volume_file(subject: usize, phase: PhaseLabel) -> String {
    format!("{}_{}.json", subject_id(subject), phase.name())
}

/// Write one subject-phase volume (plus its organ masks) and return
/// the manifest entries for its slices.
fn emit_volume(
    spec: &PhantomSpec,
    subject: usize,
    phase: PhaseLabel,
    out_dir: &Path,
    corrupt: bool,
) -> Result<Vec<ManifestEntry>> {
    let (volume, map) = generate_phantom_volume(spec, subject, phase)?;
    let name = volume_file(subject, phase);
    formats::write_volume(&volume, &out_dir.join(&name))?;
    let mask_name = format!("{}_{}.masks.json", subject_id(subject), phase.name());
    formats::write_masks(&map, &out_dir.join(mask_name))?;

    let mut entries = Vec::with_capacity(spec.slices_per_volume);
    for idx in 0..spec.slices_per_volume {
        let label = if corrupt {
            corrupt_label(spec.seed, subject, idx, phase, spec.label_noise_rate)?
        } else {
            phase
        };
        entries.push(ManifestEntry {
            path: name.clone(),
            subject_id: subject_id(subject),
            slice_index: idx,
            phase: label,
        });
    }
    Ok(entries)
}

/// Generate the full phantom dataset: unpaired training volumes, fully
/// paired test volumes, and the two manifests. Deterministic in
/// `(spec, subjects_per_phase, train_fraction)`.
pub fn generate_dataset(
    spec: &PhantomSpec,
    subjects_per_phase: usize,
    train_fraction: f64,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    spec.validate()?;
    let plan = DatasetPlan::split(subjects_per_phase, train_fraction)?;
    std::fs::create_dir_all(out_dir).map_err(|e| crate::error::io_ctx(out_dir, e))?;

    let mut train_entries = Vec::new();
    for &(subject, phase) in &plan.train {
        // Label noise is a training-data corruption; test labels stay true.
        train_entries.extend(emit_volume(spec, subject, phase, out_dir, true)?);
    }
    let mut test_entries = Vec::new();
    for &subject in &plan.test_subjects {
        for phase in PhaseLabel::ALL {
            test_entries.extend(emit_volume(spec, subject, phase, out_dir, false)?);
        }
    }

    let train_path = out_dir.join(TRAIN_MANIFEST);
    let test_path = out_dir.join(TEST_MANIFEST);
    formats::write_manifest(&DatasetManifest::new(train_entries, Split::Train)?, &train_path)?;
    formats::write_manifest(&DatasetManifest::new(test_entries, Split::Test)?, &test_path)?;
    Ok((train_path, test_path))
}

/// Load every manifest entry's volume once, keyed by resolved path.
fn load_volumes(
    manifest_path: &Path,
    manifest: &DatasetManifest,
) -> Result<HashMap<String, HUVolume>> {
    let mut volumes = HashMap::new();
    for entry in &manifest.entries {
        if !volumes.contains_key(&entry.path) {
            let resolved = formats::resolve_entry_path(manifest_path, entry);
            volumes.insert(entry.path.clone(), formats::read_volume(&resolved)?);
        }
    }
    Ok(volumes)
}

fn entry_pixels(
    volumes: &HashMap<String, HUVolume>,
    entry: &ManifestEntry,
) -> Result<ndarray::Array2<f32>> {
    let volume = volumes.get(&entry.path).expect("volume preloaded");
    let mut slices = extract_axial_slices(
        volume,
        SliceRange::Inclusive(entry.slice_index, entry.slice_index),
    )
    .map_err(|e| CliError::usage(format!("{}: {e}", entry.path)))?;
    Ok(slices.remove(0).pixels)
}

/// Materialize a training set from a manifest.
pub fn load_train_dataset(manifest_path: &Path) -> Result<SliceDataset> {
    let manifest = formats::read_manifest(manifest_path, Split::Train)?;
    let volumes = load_volumes(manifest_path, &manifest)?;
    let mut slices = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        slices.push(LabeledSlice { pixels: entry_pixels(&volumes, entry)?, label: entry.phase });
    }
    Ok(SliceDataset::new(slices)?)
}

/// Materialize held-out slices (with provenance) from a manifest.
pub fn load_eval_slices(manifest_path: &Path) -> Result<Vec<EvalSlice>> {
    let manifest = formats::read_manifest(manifest_path, Split::Test)?;
    let volumes = load_volumes(manifest_path, &manifest)?;
    let mut slices = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        slices.push(EvalSlice {
            pixels: entry_pixels(&volumes, entry)?,
            label: entry.phase,
            subject_id: entry.subject_id.clone(),
            slice_index: entry.slice_index,
        });
    }
    Ok(slices)
}
