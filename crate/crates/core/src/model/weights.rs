//! Weight files.
//!
//! ```text
//! "COLEARN1" | variant code (2 bytes) | manifest length (u64 LE) | manifest JSON | f32 LE data
//! ```
//!
//! The manifest records the network description and, for every tensor, its
//! id, shape and byte offset into the data section. Batch-norm running
//! statistics are stored as ordinary tensors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, Variant};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};
use crate::params::{BatchNormState, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"COLEARN1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    id: String,
    kind: TensorKind,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    network: Network,
    bn_momentum: f32,
    bn_epsilon: f32,
    tensors: Vec<TensorEntry>,
}

pub fn encode(network: &Network, params: &ModelParams) -> Result<Vec<u8>> {
    check_layout(network, params)?;
    let mut entries = Vec::new();
    let mut data: Vec<u8> = Vec::with_capacity(params.num_values() * 4);
    let mut push = |id: &str, kind: TensorKind, shape: Vec<usize>, values: &[f32]| {
        entries.push(TensorEntry {
            id: id.to_string(),
            kind,
            shape,
            offset: data.len(),
        });
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in params.iter() {
        push(&p.id, TensorKind::Param, p.value.shape().to_vec(), p.value.data());
    }
    let (mut momentum, mut epsilon) = (crate::params::BN_MOMENTUM, crate::params::BN_EPSILON);
    for (layer, state) in params.norms() {
        let c = state.running_mean.len();
        push(layer, TensorKind::RunningMean, vec![c], &state.running_mean);
        push(layer, TensorKind::RunningVar, vec![c], &state.running_var);
        momentum = state.momentum;
        epsilon = state.epsilon;
    }
    let manifest = Manifest {
        network: network.clone(),
        bn_momentum: momentum,
        bn_epsilon: epsilon,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(18 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&network.variant.code());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Parses a weight file image; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Network, ModelParams)> {
    let bad = |detail: String| Error::format(path, detail);
    if bytes.len() < 18 || &bytes[..8] != MAGIC {
        return Err(bad("missing COLEARN1 magic".into()));
    }
    let code = [bytes[8], bytes[9]];
    let variant = Variant::from_code(code)
        .ok_or_else(|| bad(format!("unknown variant code {:?}", String::from_utf8_lossy(&code))))?;
    let len = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
    let json = bytes
        .get(18..18usize.saturating_add(len))
        .ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| bad(format!("invalid manifest: {e}")))?;
    if manifest.network.variant != variant {
        return Err(bad(format!(
            "header says `{variant}` but manifest says `{}`",
            manifest.network.variant
        )));
    }
    manifest.network.config.validate()?;
    let data = &bytes[18 + len..];

    let mut params = ModelParams::new();
    let mut means: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut vars: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut expected_offset = 0usize;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset {
            return Err(bad(format!("tensor `{}` has offset {} (expected {expected_offset})", e.id, e.offset)));
        }
        let end = e.offset + 4 * n;
        let raw = data
            .get(e.offset..end)
            .ok_or_else(|| bad(format!("tensor `{}` runs past the end of the file", e.id)))?;
        expected_offset = end;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        match e.kind {
            TensorKind::Param => params.insert(e.id.clone(), Tensor::new(e.shape.clone(), values)?)?,
            TensorKind::RunningMean => {
                means.insert(e.id.clone(), values);
            }
            TensorKind::RunningVar => {
                vars.insert(e.id.clone(), values);
            }
        }
    }
    if expected_offset != data.len() {
        return Err(bad(format!(
            "{} trailing bytes after the last tensor",
            data.len() - expected_offset
        )));
    }
    for (layer, running_mean) in means {
        let running_var = vars
            .remove(&layer)
            .ok_or_else(|| bad(format!("layer `{layer}` has a running mean but no variance")))?;
        params.insert_norm_state(
            layer,
            BatchNormState {
                running_mean,
                running_var,
                momentum: manifest.bn_momentum,
                epsilon: manifest.bn_epsilon,
            },
        );
    }
    if let Some(layer) = vars.keys().next() {
        return Err(bad(format!("layer `{layer}` has a running variance but no mean")));
    }
    check_layout(&manifest.network, &params)?;
    Ok((manifest.network, params))
}

/// Verifies that `params` holds exactly the tensors `network` expects,
/// naming the first offending layer otherwise.
pub fn check_layout(network: &Network, params: &ModelParams) -> Result<()> {
    let expected = network.empty_params()?;
    for p in expected.iter() {
        let got = params.get(&p.id).map_err(|_| Error::LayerMismatch {
            layer: p.id.clone(),
            detail: format!("missing for variant `{}`", network.variant),
        })?;
        if got.value.shape() != p.value.shape() {
            return Err(Error::LayerMismatch {
                layer: p.id.clone(),
                detail: format!(
                    "shape {:?}, expected {:?}",
                    got.value.shape(),
                    p.value.shape()
                ),
            });
        }
    }
    if let Some(extra) = params.ids().find(|id| !expected.contains(id)) {
        return Err(Error::LayerMismatch {
            layer: extra.to_string(),
            detail: format!("not part of variant `{}`", network.variant),
        });
    }
    for (layer, state) in expected.norms() {
        let got = params.norm(layer).map_err(|_| Error::LayerMismatch {
            layer: layer.clone(),
            detail: "missing running statistics".into(),
        })?;
        if got.running_mean.len() != state.running_mean.len()
            || got.running_var.len() != state.running_var.len()
        {
            return Err(Error::LayerMismatch {
                layer: layer.clone(),
                detail: "running statistics have the wrong width".into(),
            });
        }
    }
    if let Some((extra, _)) = params.norms().find(|(l, _)| expected.norm(l).is_err()) {
        return Err(Error::LayerMismatch {
            layer: extra.clone(),
            detail: format!("not part of variant `{}`", network.variant),
        });
    }
    Ok(())
}

/// Writes the weight file atomically.
pub fn save(path: &Path, network: &Network, params: &ModelParams) -> Result<()> {
    write_atomic(path, &encode(network, params)?)
}

pub fn load(path: &Path) -> Result<(Network, ModelParams)> {
    decode(&read_bytes(path)?, path)
}
