//! On-disk formats: volumes as JSON header + int16 little-endian
//! raster, manifests as JSON lines, slices as 8-bit PGM plus a raw
//! float sidecar, and organ masks as run-length JSON.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use cdgan_core::phantom::OrganMap;
use cdgan_core::volume::{DatasetManifest, HUVolume, ManifestEntry, Split};
use cdgan_core::PhaseLabel;

use crate::error::{io_ctx, CliError, Result};

pub const VOLUME_DTYPE: &str = "int16le";

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    /// (slices, rows, cols).
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    subject_id: String,
    /// One of the phase names or "unknown".
    phase: String,
    dtype: String,
}

fn phase_to_str(phase: Option<PhaseLabel>) -> String {
    phase.map_or_else(|| "unknown".to_string(), |p| p.name().to_string())
}

fn phase_from_str(s: &str) -> Result<Option<PhaseLabel>> {
    if s == "unknown" {
        return Ok(None);
    }
    Ok(Some(PhaseLabel::from_name(s).map_err(|_| {
        CliError::usage(format!(
            "unknown phase '{s}'; expected non_contrast, portal_venous, delayed or unknown"
        ))
    })?))
}

/// Raster path for a volume header path: same stem, `.raw` extension.
pub fn raster_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Write `volume` as `<path>` (JSON header) plus the `.raw` raster.
pub fn write_volume(volume: &HUVolume, header_path: &Path) -> Result<()> {
    let (s, h, w) = volume.voxels.dim();
    let header = VolumeHeader {
        dims: [s, h, w],
        spacing_mm: volume.spacing_mm,
        subject_id: volume.subject_id.clone(),
        phase: phase_to_str(volume.phase),
        dtype: VOLUME_DTYPE.to_string(),
    };
    let json = serde_json::to_vec_pretty(&header)
        .map_err(|e| CliError::usage(format!("volume header encode: {e}")))?;
    fs::write(header_path, json).map_err(|e| io_ctx(header_path, e))?;

    let mut raw = Vec::with_capacity(volume.voxels.len() * 2);
    for &v in volume.voxels.iter() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    let rp = raster_path(header_path);
    fs::write(&rp, raw).map_err(|e| io_ctx(&rp, e))?;
    Ok(())
}

/// Read a volume written by [`write_volume`]; bit-exact round trip.
pub fn read_volume(header_path: &Path) -> Result<HUVolume> {
    let text = fs::read(header_path).map_err(|e| io_ctx(header_path, e))?;
    let header: VolumeHeader = serde_json::from_slice(&text)
        .map_err(|e| CliError::usage(format!("{}: bad volume header: {e}", header_path.display())))?;
    if header.dtype != VOLUME_DTYPE {
        return Err(CliError::usage(format!(
            "{}: unsupported dtype '{}'; this reader handles {VOLUME_DTYPE}",
            header_path.display(),
            header.dtype
        )));
    }
    let [s, h, w] = header.dims;
    let rp = raster_path(header_path);
    let raw = fs::read(&rp).map_err(|e| io_ctx(&rp, e))?;
    let expect = s
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| CliError::usage(format!("{}: dims overflow", header_path.display())))?;
    if raw.len() != expect {
        return Err(CliError::usage(format!(
            "{}: raster holds {} bytes but the header claims {s}x{h}x{w} ({expect} bytes)",
            rp.display(),
            raw.len()
        )));
    }
    let voxels: Vec<i16> =
        raw.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
    let voxels = Array3::from_shape_vec((s, h, w), voxels)
        .map_err(|e| CliError::usage(format!("{}: {e}", rp.display())))?;
    let phase = phase_from_str(&header.phase)?;
    Ok(HUVolume::new(voxels, header.spacing_mm, header.subject_id, phase)?)
}

/// Write a manifest as JSON lines, one entry per slice source.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for entry in &manifest.entries {
        serde_json::to_writer(&mut out, entry)
            .map_err(|e| CliError::usage(format!("manifest encode: {e}")))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| io_ctx(path, e))
}

/// Read a JSON-lines manifest. The split is declared by the caller
/// (conventionally encoded in the file name).
pub fn read_manifest(path: &Path, split: Split) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| io_ctx(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            CliError::usage(format!("{}:{}: bad manifest entry: {e}", path.display(), i + 1))
        })?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(CliError::usage(format!("{}: manifest is empty", path.display())));
    }
    Ok(DatasetManifest::new(entries, split)?)
}

/// Resolve a manifest entry's volume path relative to the manifest.
pub fn resolve_entry_path(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}

/// Export one slice as an 8-bit binary PGM (values mapped from [-1,1]
/// to 0..=255) plus a `.f32` sidecar of the exact little-endian values.
pub fn write_slice_image(pixels: &Array2<f32>, base: &Path) -> Result<(PathBuf, PathBuf)> {
    let (h, w) = pixels.dim();
    let pgm_path = base.with_extension("pgm");
    let raw_path = base.with_extension("f32");

    let mut pgm = Vec::with_capacity(h * w + 32);
    write!(pgm, "P5\n{w} {h}\n255\n").expect("in-memory write");
    for &v in pixels.iter() {
        let byte = ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8;
        pgm.push(byte);
    }
    fs::write(&pgm_path, pgm).map_err(|e| io_ctx(&pgm_path, e))?;

    let mut raw = Vec::with_capacity(h * w * 4);
    for &v in pixels.iter() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, raw).map_err(|e| io_ctx(&raw_path, e))?;
    Ok((pgm_path, raw_path))
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskFile {
    dims: [usize; 3],
    /// Run-length encoding of the flattened organ-id raster.
    runs: Vec<(u8, u64)>,
}

/// Write a volume's organ map as run-length JSON for test oracles.
pub fn write_masks(map: &OrganMap, path: &Path) -> Result<()> {
    let (s, h, w) = map.ids.dim();
    let file = MaskFile { dims: [s, h, w], runs: map.to_runs() };
    let json = serde_json::to_vec(&file)
        .map_err(|e| CliError::usage(format!("mask encode: {e}")))?;
    fs::write(path, json).map_err(|e| io_ctx(path, e))
}

/// Read an organ map written by [`write_masks`].
pub fn read_masks(path: &Path) -> Result<OrganMap> {
    let text = fs::read(path).map_err(|e| io_ctx(path, e))?;
    let file: MaskFile = serde_json::from_slice(&text)
        .map_err(|e| CliError::usage(format!("{}: bad mask file: {e}", path.display())))?;
    let [s, h, w] = file.dims;
    Ok(OrganMap::from_runs((s, h, w), &file.runs)?)
}

/// Parse a JSON config file into any `serde(default)` type.
pub fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| io_ctx(path, e))?;
    serde_json::from_slice(&text)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}
