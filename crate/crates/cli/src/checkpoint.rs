//! Checkpoint container: a fixed magic, a JSON description of the
//! model and optimizer state, then the named tensors as little-endian
//! f32 blobs in description order.
//!
//! Layout: `b"CDCK"` | u32 LE version | u64 LE meta length | meta JSON
//! | concatenated tensor bytes. Tensors cover every parameter and
//! normalizer buffer by name, plus the Adam first/second moments under
//! `adam.<opt>.m.<param>` / `adam.<opt>.v.<param>`.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use cdgan_core::nets::{Model, ModelKind, NetConfig};
use cdgan_core::train::{TrainConfig, TrainState};

use crate::error::{io_ctx, CliError, Result};

const MAGIC: &[u8; 4] = b"CDCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptMeta {
    step_count: u64,
    /// Parameter names this optimizer covers, in moment order.
    params: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: ModelKind,
    net: NetConfig,
    train: TrainConfig,
    iteration: u64,
    opt_d: OptMeta,
    opt_g: Option<OptMeta>,
    tensors: Vec<TensorMeta>,
}

fn push_tensor(
    tensors: &mut Vec<TensorMeta>,
    blob: &mut Vec<u8>,
    name: String,
    value: &ArrayD<f32>,
) {
    tensors.push(TensorMeta { name, shape: value.shape().to_vec() });
    for &v in value.iter() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize the full training state (weights, buffers, Adam moments,
/// iteration counter) to `path`.
pub fn save(state: &TrainState<f32>, train: &TrainConfig, path: &Path) -> Result<()> {
    let model = &state.model;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();

    for (_, name, _, value) in model.store.iter() {
        push_tensor(&mut tensors, &mut blob, name.to_string(), value);
    }
    let mut opt_metas = Vec::new();
    let opts: Vec<(&str, &cdgan_core::adam::AdamState<f32>)> = match &state.opt_g {
        Some(g) => vec![("d", &state.opt_d), ("g", g)],
        None => vec![("d", &state.opt_d)],
    };
    for (tag, opt) in &opts {
        let mut params = Vec::new();
        for (id, m, v) in opt.moments() {
            let pname = model.store.name(id).to_string();
            push_tensor(&mut tensors, &mut blob, format!("adam.{tag}.m.{pname}"), m);
            push_tensor(&mut tensors, &mut blob, format!("adam.{tag}.v.{pname}"), v);
            params.push(pname);
        }
        opt_metas.push(OptMeta { step_count: opt.step_count(), params });
    }
    let mut opt_metas = opt_metas.into_iter();
    let meta = CheckpointMeta {
        kind: model.kind,
        net: model.config.clone(),
        train: train.clone(),
        iteration: state.iteration,
        opt_d: opt_metas.next().expect("discriminator optimizer"),
        opt_g: opt_metas.next(),
        tensors,
    };

    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| CliError::usage(format!("checkpoint encode: {e}")))?;
    let mut out = Vec::with_capacity(16 + meta_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&blob);
    fs::write(path, out).map_err(|e| io_ctx(path, e))
}

struct RawCheckpoint {
    meta: CheckpointMeta,
    values: Vec<ArrayD<f32>>,
}

fn read_raw(path: &Path) -> Result<RawCheckpoint> {
    let bytes = fs::read(path).map_err(|e| io_ctx(path, e))?;
    let bad = |msg: &str| CliError::usage(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + meta_len {
        return Err(bad("truncated metadata"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + meta_len])
        .map_err(|e| bad(&format!("bad metadata: {e}")))?;

    let mut cursor = 16 + meta_len;
    let mut values = Vec::with_capacity(meta.tensors.len());
    for t in &meta.tensors {
        let n: usize = t.shape.iter().product();
        let end = cursor + n * 4;
        if bytes.len() < end {
            return Err(bad(&format!("tensor '{}' is truncated", t.name)));
        }
        let data: Vec<f32> = bytes[cursor..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        values.push(
            ArrayD::from_shape_vec(t.shape.clone(), data)
                .map_err(|e| bad(&format!("tensor '{}': {e}", t.name)))?,
        );
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok(RawCheckpoint { meta, values })
}

fn tensor_index<'a>(raw: &'a RawCheckpoint, name: &str) -> Result<&'a ArrayD<f32>> {
    raw.meta
        .tensors
        .iter()
        .position(|t| t.name == name)
        .map(|i| &raw.values[i])
        .ok_or_else(|| CliError::usage(format!("checkpoint tensor '{name}' is missing")))
}

fn restore_opt(
    raw: &RawCheckpoint,
    tag: &str,
    meta: &OptMeta,
    store: &cdgan_core::params::ParamStore<f32>,
    opt: &mut cdgan_core::adam::AdamState<f32>,
) -> Result<()> {
    let mut moments = Vec::with_capacity(meta.params.len());
    for pname in &meta.params {
        let id = store
            .id(pname)
            .ok_or_else(|| CliError::usage(format!("checkpoint names unknown parameter '{pname}'")))?;
        let m = tensor_index(raw, &format!("adam.{tag}.m.{pname}"))?.clone();
        let v = tensor_index(raw, &format!("adam.{tag}.v.{pname}"))?.clone();
        moments.push((id, m, v));
    }
    opt.restore(meta.step_count, moments)?;
    Ok(())
}

/// Rebuild the full training state saved by [`save`].
pub fn load(path: &Path) -> Result<(TrainState<f32>, TrainConfig)> {
    let raw = read_raw(path)?;
    let train = raw.meta.train.clone();
    let model: Model<f32> = Model::build(raw.meta.kind, raw.meta.net.clone(), train.seed)?;
    let mut state = TrainState::new(model, &train)?;

    let names: Vec<String> =
        state.model.store.iter().map(|(_, name, _, _)| name.to_string()).collect();
    for name in names {
        let tensor = tensor_index(&raw, &name)?.clone();
        let id = state.model.store.id(&name).expect("own parameter");
        state.model.store.set_value(id, tensor)?;
    }

    restore_opt(&raw, "d", &raw.meta.opt_d, &state.model.store, &mut state.opt_d)?;
    match (&raw.meta.opt_g, &mut state.opt_g) {
        (Some(gm), Some(opt_g)) => {
            restore_opt(&raw, "g", gm, &state.model.store, opt_g)?;
        }
        (None, None) => {}
        _ => {
            return Err(CliError::usage(
                "checkpoint optimizer layout does not match the model kind".to_string(),
            ))
        }
    }
    state.iteration = raw.meta.iteration;
    Ok((state, train))
}
