//! Checkpoint directory layout:
//!   manifest.json  - names, shapes, dtype tag, byte offsets, format
//!                    version, update counter, config echo
//!   params.bin     - little-endian f32 payload, concatenated in manifest order
//!   adam_m.bin     - Adam first moments, same layout
//!   adam_v.bin     - Adam second moments, same layout
//!
//! Weights and bias of each convolution are separate records
//! (`<layer>.weights`, `<layer>.bias`). Save -> load roundtrips are
//! bit-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::AdamState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into each .bin file.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub update: u64,
    pub adam_t: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

/// In-memory checkpoint: parameter and optimizer payloads in record order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: Vec<Vec<f32>>,
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_model(
        graph: &Graph<f32>,
        adam: &AdamState,
        update: u64,
        config: serde_json::Value,
    ) -> Self {
        let mut tensors = Vec::new();
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        let mut offset = 0u64;
        for (pi, p) in graph.params.iter().enumerate() {
            let n_w = p.conv.weights.data.len();
            let wshape = p.conv.weights.shape;
            for (suffix, shape, data, m, v) in [
                (
                    "weights",
                    vec![wshape.n, wshape.c, wshape.h, wshape.w],
                    p.conv.weights.data.clone(),
                    adam.m[pi][..n_w].to_vec(),
                    adam.v[pi][..n_w].to_vec(),
                ),
                (
                    "bias",
                    vec![p.conv.bias.len()],
                    p.conv.bias.clone(),
                    adam.m[pi][n_w..].to_vec(),
                    adam.v[pi][n_w..].to_vec(),
                ),
            ] {
                tensors.push(TensorRecord {
                    name: format!("{}.{}", p.name, suffix),
                    shape,
                    dtype: "f32".into(),
                    offset,
                });
                offset += (data.len() * 4) as u64;
                params.push(data);
                adam_m.push(m);
                adam_v.push(v);
            }
        }
        Checkpoint {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                update,
                adam_t: adam.t,
                config,
                tensors,
            },
            params,
            adam_m,
            adam_v,
        }
    }

    /// Writes the loaded payloads into a freshly built graph + optimizer
    /// state of the same architecture.
    pub fn apply_to(&self, graph: &mut Graph<f32>, adam: &mut AdamState) -> Result<()> {
        if self.manifest.tensors.len() != graph.params.len() * 2 {
            return Err(Error::CheckpointMismatch(format!(
                "{} records for {} model parameters",
                self.manifest.tensors.len(),
                graph.params.len()
            )));
        }
        for (pi, p) in graph.params.iter_mut().enumerate() {
            for (k, suffix) in ["weights", "bias"].iter().enumerate() {
                let ri = pi * 2 + k;
                let rec = &self.manifest.tensors[ri];
                let expect = format!("{}.{}", p.name, suffix);
                if rec.name != expect {
                    return Err(Error::CheckpointMismatch(format!(
                        "record '{}' where '{}' was expected",
                        rec.name, expect
                    )));
                }
                let target_len = if k == 0 {
                    p.conv.weights.data.len()
                } else {
                    p.conv.bias.len()
                };
                if self.params[ri].len() != target_len {
                    return Err(Error::CheckpointMismatch(format!(
                        "record '{}' has {} values, model expects {}",
                        rec.name,
                        self.params[ri].len(),
                        target_len
                    )));
                }
                if k == 0 {
                    p.conv.weights.data.copy_from_slice(&self.params[ri]);
                    let n_w = target_len;
                    adam.m[pi][..n_w].copy_from_slice(&self.adam_m[ri]);
                    adam.v[pi][..n_w].copy_from_slice(&self.adam_v[ri]);
                } else {
                    p.conv.bias.copy_from_slice(&self.params[ri]);
                    let n_w = p.conv.weights.data.len();
                    adam.m[pi][n_w..].copy_from_slice(&self.adam_m[ri]);
                    adam.v[pi][n_w..].copy_from_slice(&self.adam_v[ri]);
                }
            }
        }
        adam.t = self.manifest.adam_t;
        Ok(())
    }
}

fn write_blob(path: &Path, payloads: &[Vec<f32>]) -> Result<()> {
    let total: usize = payloads.iter().map(|p| p.len() * 4).sum();
    let mut bytes = Vec::with_capacity(total);
    for p in payloads {
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_blob(path: &Path, manifest: &CheckpointManifest) -> Result<Vec<Vec<f32>>> {
    let bytes = std::fs::read(path)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        let count: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start + count * 4;
        if end > bytes.len() {
            return Err(Error::TruncatedBlob {
                name: rec.name.clone(),
                need: end,
                have: bytes.len(),
            });
        }
        let vals = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(vals);
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&ckpt.manifest)?,
    )?;
    write_blob(&dir.join("params.bin"), &ckpt.params)?;
    write_blob(&dir.join("adam_m.bin"), &ckpt.adam_m)?;
    write_blob(&dir.join("adam_v.bin"), &ckpt.adam_v)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            got: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let params = read_blob(&dir.join("params.bin"), &manifest)?;
    let adam_m = read_blob(&dir.join("adam_m.bin"), &manifest)?;
    let adam_v = read_blob(&dir.join("adam_v.bin"), &manifest)?;
    Ok(Checkpoint {
        manifest,
        params,
        adam_m,
        adam_v,
    })
}

/// Rebuilds a graph architecture from the checkpoint's config echo.
pub fn spec_from_config(config: &serde_json::Value) -> Result<crate::models::NetworkSpec> {
    let spec = config
        .get("spec")
        .ok_or_else(|| Error::CheckpointMismatch("config echo carries no spec".into()))?;
    let parse3 = |key: &str| -> Result<[usize; 3]> {
        let arr = spec
            .get(key)
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::CheckpointMismatch(format!("spec.{key} missing")))?;
        let mut out = [0usize; 3];
        for (i, v) in arr.iter().take(3).enumerate() {
            out[i] = v.as_u64().unwrap_or(0) as usize;
        }
        Ok(out)
    };
    let body = match spec.get("body").and_then(|v| v.as_str()) {
        Some("residual") => crate::models::BodyKind::Residual,
        Some("dense") => crate::models::BodyKind::Dense,
        other => {
            return Err(Error::CheckpointMismatch(format!(
                "unknown body kind {other:?}"
            )))
        }
    };
    let ds = parse3("downscale")?;
    let us = parse3("upscale")?;
    Ok(crate::models::NetworkSpec {
        name: spec
            .get("name")
            .and_then(|v| v.as_str())
            .unwrap_or("custom")
            .to_string(),
        body,
        blocks: parse3("blocks")?,
        filters: parse3("filters")?,
        downscale: (ds[0], (ds[1], ds[2])),
        upscale: (us[0], (us[1], us[2])),
        output_channels: 3,
    })
}

pub fn spec_to_config(spec: &crate::models::NetworkSpec) -> serde_json::Value {
    serde_json::json!({
        "name": spec.name,
        "body": match spec.body {
            crate::models::BodyKind::Residual => "residual",
            crate::models::BodyKind::Dense => "dense",
        },
        "blocks": spec.blocks,
        "filters": spec.filters,
        "downscale": [spec.downscale.0, spec.downscale.1.0, spec.downscale.1.1],
        "upscale": [spec.upscale.0, spec.upscale.1.0, spec.upscale.1.1],
    })
}
